"""End-to-end acceptance checks; one criterion marker per requirement.

Run alone with `pytest tests/test_acceptance.py -v`; the terminal summary
prints one PASS/FAIL line per criterion.
"""

import difflib
import math
import random
import time
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from conftest import C, stacked_deck, synthetic_trajectory, tiny_encoder
from r3d2.agent import RandomAgent, TextAgent, action_catalog
from r3d2.engine import (
    Card,
    Discard,
    GameConfig,
    Play,
    RevealColor,
    RevealRank,
    check_invariants,
    initial_composition,
    legal_actions,
    new_game,
    observe,
)
from r3d2.evaluate import PolicySpec, play_games, transfer_eval
from r3d2.qnet import RecurrentState, forward_episode, gradient, init_params
from r3d2.replay import PrioritizedReplay, SampledBatch, SumTree, collate
from r3d2.textenc import UNK, build_vocab, parse_action, render_action, render_observation, tokenize
from r3d2.trainer import (
    Learner,
    TrainConfig,
    clip_gradients,
    double_dqn_targets,
    epsilon_for_actor,
    load_config,
    run_training,
)

VOCAB = build_vocab()


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def random_state(rng, players, **kw):
    cfg = GameConfig(players=players, seed=rng.getrandbits(63), **kw)
    state = new_game(cfg)
    for _ in range(rng.randrange(0, 70)):
        if state.terminal:
            break
        state.step(rng.choice(legal_actions(state)))
    return cfg, state


# -- 1 ------------------------------------------------------------------------


@criterion(1, "engine soundness over 10,000 random games")
def test_engine_soundness():
    torch.set_num_threads(1)
    start = time.perf_counter()
    for g in range(10_000):
        cfg = GameConfig(players=2 + g % 4, seed=g)
        state = new_game(cfg)
        rng = random.Random(g)
        steps, total, gains = 0, 0.0, 0
        while not state.terminal:
            reward = state.step(rng.choice(legal_actions(state)))
            total += reward
            gains += reward > 0
            steps += 1
            check_invariants(state)
        assert gains == state.score
        assert total == (0.0 if state.life_tokens == 0 else state.score)
        assert steps <= cfg.deck_size + cfg.players + cfg.colors * cfg.ranks
    elapsed = time.perf_counter() - start
    print(f"10,000 games in {elapsed:.1f}s")
    assert elapsed < 60


# -- 2 ------------------------------------------------------------------------


def perfect_information_move(state):
    hand = state.hands[state.current_player]
    for i, card in enumerate(hand):
        if state.fireworks[card.color] == card.rank - 1:
            return Play(i)
    if state.hint_tokens < state.config.max_hint_tokens:
        dead = [i for i, c in enumerate(hand) if state.fireworks[c.color] >= c.rank]
        if dead:
            return Discard(dead[0])
    reveals = [a for a in legal_actions(state) if isinstance(a, (RevealColor, RevealRank))]
    if reveals:
        return reveals[0]
    return Discard(max(range(len(hand)), key=lambda i: hand[i].rank))


@criterion(2, "rule arithmetic")
@pytest.mark.parametrize("players", [2, 3, 4, 5])
def test_perfect_score_on_scripted_deck(players):
    cfg = GameConfig(players=players)
    firsts = [Card(c, r) for r in range(1, 6) for c in range(5)]
    rest = initial_composition(cfg) - Counter(firsts)
    deck = list(reversed(firsts + sorted(rest.elements())))  # drawn from the end
    state = new_game(cfg, deck=deck)
    total = 0.0
    while not state.terminal:
        total += state.step(perfect_information_move(state))
    assert total == state.score == 25 == cfg.max_score


@criterion(2, "rule arithmetic")
def test_two_player_legal_count_below_full_hints():
    cfg = GameConfig(players=2)
    partner = [C("R", 1), C("Y", 2), C("G", 3), C("W", 4), C("B", 5)]
    state = new_game(cfg, deck=stacked_deck(cfg, [[C("R", 2)] * 2 + [C("R", 3)] * 2 + [C("R", 4)], partner]))
    state.hint_tokens = 7
    # 5 plays + 5 discards + 5 distinct colors + 5 distinct ranks on the partner
    assert len(legal_actions(state)) == 20


@criterion(2, "rule arithmetic")
def test_bomb_out_returns_zero():
    cfg = GameConfig(players=2)
    state = new_game(cfg, deck=stacked_deck(cfg, [
        [C("R", 1), C("R", 3), C("Y", 3), C("G", 3), C("W", 3)],
        [C("B", 2), C("G", 1), C("W", 1), C("B", 1), C("Y", 1)],
    ]))
    state.life_tokens = 1
    total = state.step(Play(0))  # R1 scores
    total += state.step(Play(0))  # B2 on an empty blue stack loses the last life
    assert state.terminal and state.life_tokens == 0
    assert state.score == 1 and total == 0.0


# -- 3 ------------------------------------------------------------------------


@criterion(3, "text layer")
def test_action_round_trip_every_config():
    checked = 0
    for players in range(2, 6):
        for colors in range(1, 6):
            for ranks in range(1, 6):
                try:
                    cfg = GameConfig(players=players, colors=colors, ranks=ranks)
                except ValueError:
                    continue
                for action in action_catalog(cfg):
                    assert parse_action(render_action(action), cfg) == action
                    checked += 1
    rng = random.Random(0)
    for _ in range(500):
        cfg, state = random_state(rng, rng.randrange(2, 6))
        if not state.terminal:
            for action in legal_actions(state):
                assert action in action_catalog(cfg)
    assert checked > 1000


@criterion(3, "text layer")
def test_vocabulary_closure_10k_states():
    rng = random.Random(1)
    for i in range(10_000):
        cfg, state = random_state(rng, 2 + i % 4)
        obs = observe(state, rng.randrange(cfg.players))
        assert UNK not in tokenize(render_observation(obs, cfg), VOCAB).ids


@criterion(3, "text layer")
def test_player_insertion_diff_1000_pairs():
    rng = random.Random(2)
    for i in range(1000):
        cfg, state = random_state(rng, 3 + i % 3)
        long_obs = observe(state, rng.randrange(cfg.players))
        short_obs = replace(long_obs, visible_hands=long_obs.visible_hands[:-1])
        long_text = render_observation(long_obs, cfg)
        short_text = render_observation(short_obs, cfg)
        ops = [o for o in difflib.SequenceMatcher(None, short_text, long_text, autojunk=False).get_opcodes()
               if o[0] != "equal"]
        assert len(ops) == 1 and ops[0][0] == "insert"
        inserted = long_text[ops[0][3] : ops[0][4]]
        assert f"Player {long_obs.visible_hands[-1].offset} hand:" in inserted


# -- 4 ------------------------------------------------------------------------


@criterion(4, "network")
def test_finite_difference_gradients_all_groups():
    net = init_params(tiny_encoder(len(VOCAB), max_seq_len=16, action_recurrence=True), seed=21, dtype=torch.float64)
    rng = np.random.default_rng(21)
    batch = collate([synthetic_trajectory(rng, t, len(VOCAB)) for t in (3, 2)])
    weights = torch.from_numpy(rng.normal(size=tuple(batch.cand_mask.shape)))

    def loss_fn():
        q = forward_episode(net, batch)
        return (q * weights).sum() + 0.1 * (q**2).sum()

    analytic = {n: g.clone() for n, g in gradient(net, loss_fn()).items()}
    groups = {}
    h = 1e-6
    with torch.no_grad():
        for name, param in net.named_parameters():
            flat = param.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                fd, ad = groups.setdefault(name.split(".")[0], ([], []))
                fd.append((up - down) / (2 * h))
                ad.append(analytic[name].view(-1)[i].item())
    for group, (fd, ad) in groups.items():
        fd, ad = np.array(fd), np.array(ad)
        rel = np.linalg.norm(fd - ad) / max(np.linalg.norm(fd), np.linalg.norm(ad), 1e-12)
        print(f"{group}: rel err {rel:.2e} over {len(fd)} entries")
        assert rel < 1e-4, group
    assert len(groups) == 7


@criterion(4, "network")
def test_pad_token_and_pad_step_invariance():
    net = init_params(tiny_encoder(len(VOCAB)), seed=1)
    rng = np.random.default_rng(3)
    trajs = [synthetic_trajectory(rng, t, len(VOCAB)) for t in (1, 4, 6)]
    with torch.no_grad():
        ids = torch.tensor([[4, 9, 14, 20]])
        padded = torch.cat([ids, torch.zeros(1, 9, dtype=torch.long)], 1)
        a, b = net.encode(ids, ids != 0), net.encode(padded, padded != 0)
        assert (a - b).abs().max() <= 1e-6
        together = forward_episode(net, collate(trajs))
        for i, tr in enumerate(trajs):
            alone = forward_episode(net, collate([tr]))
            diff = (together[i, : len(tr), : alone.shape[2]] - alone[0]).abs().max()
            assert diff <= 1e-6


@criterion(4, "network")
def test_dueling_shift_invariance_and_permutation():
    net = init_params(tiny_encoder(len(VOCAB)), seed=2)
    g = torch.Generator().manual_seed(0)
    obs = torch.randn(3, 8, generator=g)
    cands = torch.randn(3, 6, 8, generator=g)
    mask = torch.ones(3, 6, dtype=torch.bool)
    mask[2, 4:] = False
    state = RecurrentState.zeros(3, 8)
    perm = torch.tensor([5, 2, 0, 3, 1, 4])
    with torch.no_grad():
        q0, _ = net.step(obs, state, cands, mask)
        qp, _ = net.step(obs[:2], RecurrentState.zeros(2, 8), cands[:2, perm], mask[:2])
        torch.testing.assert_close(q0[:2, perm], qp, rtol=1e-6, atol=1e-6)
        net.advantage_head[2].bias.add_(123.0)
        q1, _ = net.step(obs, state, cands, mask)
        # float32 rounding of a 123-sized offset bounds the achievable agreement
        torch.testing.assert_close(q0, q1, rtol=1e-5, atol=1e-4)


# -- 5 ------------------------------------------------------------------------


@criterion(5, "replay")
def test_sampling_frequencies_chi_square():
    rng = np.random.default_rng(5)
    pri = rng.random(32) * 5 + 0.05
    buf = PrioritizedReplay(capacity=32, alpha=0.9, burn_in_frames=0, seed=11)
    for i in range(32):
        buf.append(synthetic_trajectory(rng, 1, len(VOCAB)))
        buf.update_priorities([i], [np.array([pri[i]])])
    counts = np.zeros(32)
    for _ in range(100_000 // 64):
        counts += np.bincount(buf.sample(64).slots, minlength=32)
    counts += np.bincount(buf.sample(100_000 % 64).slots, minlength=32)
    assert counts.sum() == 100_000
    expected = pri**0.9 / (pri**0.9).sum() * 100_000
    p = chisquare(counts, expected).pvalue
    print(f"chi-square p = {p:.3f}")
    assert p > 0.01


@criterion(5, "replay")
def test_sum_tree_root_exact_after_million_ops():
    rng = np.random.default_rng(6)
    tree = SumTree(777)
    for s, v in zip(rng.integers(0, 777, 1_000_000).tolist(), (rng.random(1_000_000) * 100).tolist()):
        tree.update(s, v)
    level = np.zeros(tree.leaf_base)
    level[:777] = tree.leaves()
    while len(level) > 1:
        level = level[0::2] + level[1::2]
    assert tree.total == level[0]
    assert math.isclose(tree.total, math.fsum(tree.leaves()), rel_tol=1e-12)


@criterion(5, "replay")
def test_ring_overwrite_order():
    rng = np.random.default_rng(7)
    buf = PrioritizedReplay(capacity=4, burn_in_frames=0)
    items = [synthetic_trajectory(rng, 1, len(VOCAB)) for _ in range(10)]
    assert [buf.append(t) for t in items] == [0, 1, 2, 3] * 2 + [0, 1]
    assert buf.slots == [items[8], items[9], items[6], items[7]]


# -- 6 ------------------------------------------------------------------------


def _oracle(rewards, online, target, gamma):
    out = []
    for t in range(len(rewards)):
        y = rewards[t]
        if t + 1 < len(rewards):
            y += gamma * target[t + 1][int(np.argmax(online[t + 1]))]
        out.append(y)
    return out


@criterion(6, "targets and optimizer")
@pytest.mark.parametrize("case", range(20))
def test_td_oracle_cases(case):
    rng = np.random.default_rng(600 + case)
    T = 1 + case % 5
    ks = rng.integers(1, 5, size=T)
    rewards = rng.integers(-3, 3, size=T).astype(float).tolist()
    online = [rng.integers(-4, 5, size=k).astype(float).tolist() for k in ks]
    target = [rng.integers(-4, 5, size=k).astype(float).tolist() for k in ks]
    K = int(ks.max())
    on = torch.full((1, T, K), 0.0, dtype=torch.float64)
    tg = torch.zeros(1, T, K, dtype=torch.float64)
    cm = torch.zeros(1, T, K, dtype=torch.bool)
    for t, k in enumerate(ks):
        on[0, t, :k], tg[0, t, :k], cm[0, t, :k] = torch.tensor(online[t]), torch.tensor(target[t]), True
    y = double_dqn_targets(torch.tensor([rewards], dtype=torch.float64), torch.ones(1, T, dtype=torch.bool),
                           on, tg, cm, 0.999)
    np.testing.assert_allclose(y[0].numpy(), _oracle(rewards, online, target, 0.999), atol=1e-6)


@criterion(6, "targets and optimizer")
def test_gradient_clip_exact():
    net = init_params(tiny_encoder(len(VOCAB)), seed=0)
    for p in net.parameters():
        p.grad = torch.randn_like(p)
    raw = float(torch.sqrt(sum((p.grad.double() ** 2).sum() for p in net.parameters())))
    for p in net.parameters():
        p.grad.mul_(50.0 / raw)
    clip_gradients(net, 5.0)
    norm = float(torch.sqrt(sum((p.grad.double() ** 2).sum() for p in net.parameters())))
    assert norm == pytest.approx(5.0, rel=1e-6)


@criterion(6, "targets and optimizer")
def test_target_sync_at_2500():
    net = init_params(tiny_encoder(len(VOCAB), model_dim=4, ffn_dim=4), seed=0)
    learner = Learner(TrainConfig(lr=1e-3), net)
    rng = np.random.default_rng(8)
    tr = synthetic_trajectory(rng, 1, len(VOCAB))

    sampled = SampledBatch([tr], np.ones(1), np.zeros(1, dtype=int), np.zeros(1, dtype=int))
    initial = [p.clone() for p in learner.target.parameters()]
    for _ in range(2499):
        learner.train_step(sampled)
    assert all(torch.equal(a, b) for a, b in zip(initial, learner.target.parameters()))
    learner.train_step(sampled)
    assert learner.step_count == 2500
    assert all(torch.equal(a, b) for a, b in zip(net.parameters(), learner.target.parameters()))


@criterion(6, "targets and optimizer")
def test_epsilon_endpoints():
    assert epsilon_for_actor(0, 80) == 0.1
    assert epsilon_for_actor(79, 80) == pytest.approx(1e-8, rel=1e-12)


# -- 7 ------------------------------------------------------------------------

SMOKE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "mini_smoke.cfg"


@criterion(7, "learning smoke test on mini-Hanabi")
@pytest.mark.slow
def test_learning_smoke(tmp_path):
    cfg = load_config(SMOKE_CONFIG)
    start = time.perf_counter()
    result = run_training(cfg, tmp_path)
    elapsed = time.perf_counter() - start
    assert result.learner.step_count == 20_000
    game = cfg.game_config(2)
    agent = TextAgent.from_checkpoint(result.checkpoints[-1])
    greedy = play_games([agent, agent], game, games=500, seed=2024).mean
    baseline = play_games([RandomAgent(1), RandomAgent(2)], game, games=500, seed=2024).mean
    print(f"greedy {greedy:.3f} vs random {baseline:.3f} after {elapsed / 60:.1f} min")
    assert elapsed <= 30 * 60
    assert greedy >= 3 * baseline


# -- 8 ------------------------------------------------------------------------


@criterion(8, "variable-player training and evaluation")
@pytest.mark.slow
def test_variable_player_path(tmp_path):
    cfg = TrainConfig(
        settings=(2, 3), colors=2, ranks=5, num_actors=2, envs_per_actor=2, epochs=4, updates_per_epoch=500,
        burn_in_frames=200, batchsize=8, layers=1, model_dim=16, attention_heads=2, ffn_dim=32,
        eval_every_epochs=4, probe_games=20, seed=1,
    )
    result = run_training(cfg, tmp_path)
    assert result.learner.step_count == 2000
    counts = {t.player_count for t in result.replay.slots if t is not None}
    assert counts == {2, 3}
    spec = PolicySpec.from_checkpoint(result.checkpoints[-1])
    assert spec.family == "R3D2-M"
    for players in (2, 3):
        report = play_games([spec] * players, cfg.game_config(players), games=50, seed=3)
        assert 0 <= report.mean <= 10
    for n in (2, 3):
        report = transfer_eval(n, [spec], [spec], games=20, colors=2, ranks=5)
        assert set(report.per_i) == set(range(1, n))


# -- 9 ------------------------------------------------------------------------


@criterion(9, "bit-identical reruns")
def test_reproducible_checkpoints_and_reports(tmp_path):
    cfg = TrainConfig(
        settings=(2, 3), colors=2, ranks=5, num_actors=2, envs_per_actor=2, epochs=3, updates_per_epoch=20,
        burn_in_frames=100, batchsize=8, layers=1, model_dim=16, attention_heads=2, ffn_dim=32,
        eval_every_epochs=1, probe_games=10, seed=7,
    )
    runs = [run_training(cfg, tmp_path / name) for name in ("a", "b")]
    assert runs[0].checkpoint_hashes == runs[1].checkpoint_hashes
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    reports = [
        play_games([PolicySpec.from_checkpoint(r.checkpoints[-1])] * 3, cfg.game_config(3), 40, seed=5).to_dict()
        for r in runs
    ]
    assert reports[0] == reports[1]
