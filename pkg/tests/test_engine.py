import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import C, stacked_deck
from r3d2.engine import (
    Card,
    ConfigError,
    Discard,
    GameConfig,
    IllegalMoveError,
    Play,
    ProtocolError,
    RevealColor,
    RevealRank,
    apply_action,
    check_invariants,
    derive_seeds,
    initial_composition,
    legal_actions,
    new_game,
    observe,
    parse_logs,
    shuffle,
)

RAINBOW = [C("R", 1), C("Y", 2), C("G", 3), C("W", 4), C("B", 5)]
ONES = [C("Y", 1), C("Y", 1), C("G", 1), C("W", 1), C("B", 1)]


def test_new_game_two_player_counts():
    state = new_game(GameConfig(players=2, seed=42))
    assert len(state.deck) == 40
    assert state.hint_tokens == 8 and state.life_tokens == 3
    assert state.fireworks == [0] * 5 and not state.terminal
    assert all(len(h) == 5 for h in state.hands)


def test_new_game_five_player_counts():
    state = new_game(GameConfig(players=5, seed=1))
    assert [len(h) for h in state.hands] == [4] * 5
    assert len(state.deck) == 30


def test_new_game_is_deterministic():
    a = new_game(GameConfig(players=3, seed=99))
    b = new_game(GameConfig(players=3, seed=99))
    assert a == b
    assert new_game(GameConfig(players=3, seed=100)).deck != a.deck


@pytest.mark.parametrize(
    "kwargs", [dict(players=1), dict(players=6), dict(colors=0), dict(ranks=6), dict(colors=1, ranks=1)]
)
def test_invalid_configs_rejected(kwargs):
    with pytest.raises(ConfigError):
        GameConfig(**kwargs)


def test_deck_composition():
    assert GameConfig().deck_size == 50
    assert GameConfig(colors=2).deck_size == 20
    comp = initial_composition(GameConfig())
    assert [comp[Card(0, r)] for r in range(1, 6)] == [3, 2, 2, 2, 1]


@given(st.integers(0, 2**64 - 1))
@settings(max_examples=50, deadline=None)
def test_shuffle_is_a_permutation(seed):
    items = list(range(50))
    out = shuffle(items, seed)
    assert sorted(out) == items
    assert shuffle(items, seed) == out


def test_shuffle_is_roughly_uniform():
    # position of element 0 after shuffling 5 items, over many seeds
    counts = Counter(shuffle(list(range(5)), s).index(0) for s in range(5000))
    assert all(abs(counts[i] - 1000) < 150 for i in range(5))


def test_derive_seeds_stable():
    assert derive_seeds(7, 3) == derive_seeds(7, 3)
    assert len(set(derive_seeds(7, 100))) == 100


def _reveal_count(hand):
    return len({c.color for c in hand}) + len({c.rank for c in hand})


def test_legal_actions_fresh_two_player():
    cfg = GameConfig(players=2)
    partner = RAINBOW
    mine = [C("R", 2), C("R", 3), C("R", 4), C("Y", 1), C("Y", 1)]
    state = new_game(cfg, deck=stacked_deck(cfg, [mine, partner]))
    actions = legal_actions(state)
    # independent count: plays, no discards at full hints, distinct colors + ranks
    assert len(actions) == 5 + 0 + _reveal_count(partner) == 15
    assert not any(isinstance(a, Discard) for a in actions)


def test_legal_actions_seven_hints():
    cfg = GameConfig(players=2)
    state = new_game(cfg, deck=stacked_deck(cfg, [[C("R", 2)] * 2 + [C("R", 3)] * 2 + [C("R", 4)], RAINBOW]))
    state.hint_tokens = 7
    assert len(legal_actions(state)) == 5 + 5 + (2 - 1) * (5 + 5) == 20


def test_legal_action_order():
    cfg = GameConfig(players=3, seed=5)
    state = new_game(cfg)
    state.hint_tokens = 4
    actions = legal_actions(state)
    kinds = [type(a).__name__ for a in actions]
    assert kinds[:10] == ["Play"] * 5 + ["Discard"] * 5
    reveals = actions[10:]
    keys = [(a.offset, 0 if isinstance(a, RevealColor) else 1) for a in reveals]
    assert keys == sorted(keys)


def test_no_reveals_without_hint_tokens():
    state = new_game(GameConfig(players=4, seed=3))
    state.hint_tokens = 0
    assert not any(isinstance(a, (RevealColor, RevealRank)) for a in legal_actions(state))


def test_legal_actions_on_terminal_state():
    state = new_game(GameConfig(seed=1))
    state.terminal = True
    with pytest.raises(ProtocolError):
        legal_actions(state)


def test_play_correct_card():
    cfg = GameConfig(players=2)
    state = new_game(cfg, deck=stacked_deck(cfg, [[C("R", 1)] + RAINBOW[1:], ONES]))
    nxt, reward, done = apply_action(state, Play(0))
    assert nxt.fireworks[0] == 1 and reward == 1.0 and not done
    assert len(nxt.hands[0]) == 5 and len(nxt.deck) == len(state.deck) - 1
    assert state.fireworks[0] == 0  # apply_action is functional


def test_play_wrong_card():
    cfg = GameConfig(players=2)
    state = new_game(cfg, deck=stacked_deck(cfg, [[C("R", 3)] + RAINBOW[1:], ONES]))
    state.fireworks[0] = 1
    state.deck.remove(C("R", 1))
    nxt, reward, done = apply_action(state, Play(0))
    assert nxt.discards == [C("R", 3)]
    assert nxt.life_tokens == 2 and reward == 0.0 and not done


def test_discard_and_reveal():
    cfg = GameConfig(players=2)
    state = new_game(cfg, deck=stacked_deck(cfg, [RAINBOW, [C("B", 1), C("R", 2), C("B", 2), C("Y", 1), C("G", 1)]]))
    nxt, _, _ = apply_action(state, RevealColor(1, 4))
    assert nxt.hint_tokens == 7
    assert [k.color for k in nxt.knowledge[1]] == [4, None, 4, None, None]
    obs = observe(nxt, 1)
    assert [k.color for k in obs.own_knowledge] == [4, None, 4, None, None]
    nxt, reward, _ = apply_action(nxt, Discard(2))
    assert nxt.hint_tokens == 8 and reward == 0.0 and nxt.discards == [C("B", 2)]


def test_reveal_rank_updates_every_match():
    cfg = GameConfig(players=2)
    hand = [C("R", 1), C("Y", 1), C("G", 2), C("W", 1), C("B", 3)]
    state = new_game(cfg, deck=stacked_deck(cfg, [RAINBOW, hand]))
    nxt, _, _ = apply_action(state, RevealRank(1, 1))
    assert [k.rank for k in nxt.knowledge[1]] == [1, 1, None, 1, None]


def test_illegal_moves_rejected():
    cfg = GameConfig(players=2)
    state = new_game(cfg, deck=stacked_deck(cfg, [RAINBOW, ONES]))
    with pytest.raises(IllegalMoveError):
        apply_action(state, Discard(0))  # full hints
    with pytest.raises(IllegalMoveError):
        apply_action(state, Play(7))
    with pytest.raises(IllegalMoveError):
        apply_action(state, RevealColor(2, 0))


def test_completing_color_restores_hint():
    cfg = GameConfig(players=2)
    state = new_game(cfg, deck=stacked_deck(cfg, [[C("R", 5)] + RAINBOW[1:4] + [C("B", 4)], ONES]))
    state.fireworks[0] = 4
    for r in (1, 2, 3, 4):
        state.deck.remove(C("R", r))
    state.hint_tokens = 5
    nxt, reward, _ = apply_action(state, Play(0))
    assert reward == 1.0 and nxt.hint_tokens == 6


def test_bomb_out_zeroes_return():
    cfg = GameConfig(players=2)
    state = new_game(cfg, deck=stacked_deck(cfg, [[C("R", 3)] + RAINBOW[1:], ONES]))
    state.fireworks = [1, 2, 2, 1, 1]
    state.life_tokens = 1
    assert state.score == 7
    nxt, reward, done = apply_action(state, Play(0))
    assert done and reward == -7.0
    assert 7 + reward == 0


def test_bomb_out_keeps_score_when_disabled():
    cfg = GameConfig(players=2, bomb_out_zeroes_score=False)
    state = new_game(cfg, deck=stacked_deck(cfg, [[C("R", 3)] + RAINBOW[1:], ONES]))
    state.fireworks = [1, 2, 2, 1, 1]
    state.life_tokens = 1
    _, reward, done = apply_action(state, Play(0))
    assert done and reward == 0.0


def test_game_ends_one_round_after_deck_empties():
    cfg = GameConfig(players=3, seed=11)
    state = new_game(cfg)
    state.deck = state.deck[-1:]
    state.hint_tokens = 4
    state.step(Discard(0))  # draws the last card
    assert not state.deck and state.final_countdown == 3
    for _ in range(2):
        state.step(Discard(0))
        assert not state.terminal
    state.step(Discard(0))
    assert state.terminal


def test_observe_hides_own_cards():
    cfg = GameConfig(players=3, seed=2)
    state = new_game(cfg)
    obs = observe(state, 1)
    assert len(obs.own_knowledge) == len(state.hands[1])
    assert all(k.color is None and k.rank is None for k in obs.own_knowledge)
    assert [h.offset for h in obs.visible_hands] == [1, 2]
    assert list(obs.visible_hands[0].cards) == state.hands[2]
    assert list(obs.visible_hands[1].cards) == state.hands[0]
    assert obs.legal_actions == ()  # not player 1's turn
    assert observe(state, 0).legal_actions


def test_observe_without_discards():
    cfg = GameConfig(players=2, seed=4, include_discards_in_obs=False)
    assert observe(new_game(cfg), 0).discards is None
    assert observe(new_game(GameConfig(players=2, seed=4)), 0).discards == ()


def test_last_action_is_relative_to_observer():
    cfg = GameConfig(players=3, seed=8)
    state = new_game(cfg)
    state.step(legal_actions(state)[0])
    assert observe(state, 1).last_action[0] == 2  # seat 0 sits two seats after seat 1
    assert observe(state, 0).last_action[0] == 0


def test_random_rollouts_hold_invariants():
    for g in range(400):
        cfg = GameConfig(players=2 + g % 4, seed=g)
        state = new_game(cfg)
        rng = random.Random(g)
        total, plus = 0.0, 0
        while not state.terminal:
            reward = state.step(rng.choice(legal_actions(state)))
            total += reward
            plus += reward > 0
            check_invariants(state)
        assert plus == state.score
        assert total == (0 if state.life_tokens == 0 else state.score)


def test_same_actions_same_trace():
    def trace(seed):
        state = new_game(GameConfig(players=4, seed=seed))
        rng = random.Random(0)
        out = []
        while not state.terminal:
            state.step(rng.choice(legal_actions(state)))
            out.append((state.score, state.hint_tokens, state.life_tokens, len(state.deck)))
        return out

    assert trace(3) == trace(3)


def test_parse_logs():
    text = "seed=5 players=2\nplay 0\nreveal red 1\nscore=0\nseed=6 players=3 colors=2\ndiscard 1\n"
    logs = parse_logs(text)
    assert [l.seed for l in logs] == [5, 6]
    assert logs[0].actions == ["play 0", "reveal red 1"] and logs[0].score == 0
    assert logs[1].config.colors == 2 and logs[1].score is None
    assert parse_logs(logs[0].dumps())[0].actions == logs[0].actions
