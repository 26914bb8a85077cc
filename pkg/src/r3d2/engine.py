"""Hanabi game engine.

A deterministic, seedable state machine for 2 to 5 players with optional
scaled-down decks (fewer colors or ranks).  States are plain dataclasses;
`apply_action` is functional and returns a fresh state, while
`GameState.step` mutates in place for the hot rollout loops.

Shuffling uses Philox-4x64-10 (counter-based, from numpy) keyed through
numpy's SeedSequence, followed by a Fisher-Yates pass whose bounded draws
use rejection sampling on the raw 64-bit outputs.  Both pieces are stable
algorithms, so a (config, seed) pair always deals the same deck.
"""

from __future__ import annotations

import copy
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Union

import numpy as np

COLOR_NAMES = ("Red", "Yellow", "Green", "White", "Blue")
RNG_ALGORITHM = "philox4x64-10/seedsequence/fisher-yates-rejection/v1"
U64_MASK = (1 << 64) - 1


class HanabiError(Exception):
    pass


class ConfigError(HanabiError, ValueError):
    pass


class IllegalMoveError(HanabiError):
    pass


class ProtocolError(HanabiError):
    pass


@dataclass(frozen=True)
class GameConfig:
    players: int = 2
    colors: int = 5
    ranks: int = 5
    hand_size: Optional[int] = None
    max_hint_tokens: int = 8
    max_life_tokens: int = 3
    seed: int = 0
    include_discards_in_obs: bool = True
    bomb_out_zeroes_score: bool = True

    def __post_init__(self):
        if self.hand_size is None:
            object.__setattr__(self, "hand_size", 5 if self.players <= 3 else 4)
        self.validate()

    def validate(self) -> None:
        if not 2 <= self.players <= 5:
            raise ConfigError(f"players must be in [2, 5], got {self.players}")
        if not 1 <= self.colors <= len(COLOR_NAMES):
            raise ConfigError(f"colors must be in [1, 5], got {self.colors}")
        if not 1 <= self.ranks <= 5:
            raise ConfigError(f"ranks must be in [1, 5], got {self.ranks}")
        if self.hand_size < 1:
            raise ConfigError(f"hand_size must be positive, got {self.hand_size}")
        if self.max_hint_tokens < 1 or self.max_life_tokens < 1:
            raise ConfigError("token maxima must be positive")
        if self.deck_size < self.players * self.hand_size:
            raise ConfigError(
                f"deck of {self.deck_size} cards cannot deal {self.players}x{self.hand_size}"
            )

    @property
    def deck_size(self) -> int:
        return self.colors * sum(rank_copies(r, self.ranks) for r in range(1, self.ranks + 1))

    @property
    def max_score(self) -> int:
        return self.colors * self.ranks

    def with_seed(self, seed: int) -> "GameConfig":
        return replace(self, seed=seed)


def rank_copies(rank: int, ranks: int) -> int:
    """Copies of each (color, rank): three 1s, one top rank, two of everything else."""
    if rank == 1:
        return 3 if ranks > 1 else 1
    if rank == ranks:
        return 1
    return 2


class Card(NamedTuple):
    color: int
    rank: int

    def __str__(self) -> str:
        return f"{COLOR_NAMES[self.color]} {self.rank}"


@dataclass(frozen=True)
class CardKnowledge:
    color: Optional[int] = None
    rank: Optional[int] = None


@dataclass(frozen=True)
class Play:
    index: int


@dataclass(frozen=True)
class Discard:
    index: int


@dataclass(frozen=True)
class RevealColor:
    offset: int
    color: int


@dataclass(frozen=True)
class RevealRank:
    offset: int
    rank: int


Action = Union[Play, Discard, RevealColor, RevealRank]

_UNKNOWN = CardKnowledge()


def initial_composition(config: GameConfig) -> Counter:
    return Counter(
        {
            Card(c, r): rank_copies(r, config.ranks)
            for c in range(config.colors)
            for r in range(1, config.ranks + 1)
        }
    )


def _ordered_deck(config: GameConfig) -> list[Card]:
    return [
        Card(c, r)
        for c in range(config.colors)
        for r in range(1, config.ranks + 1)
        for _ in range(rank_copies(r, config.ranks))
    ]


def shuffle(items: list, seed: int) -> list:
    """Seeded Fisher-Yates shuffle; returns a new list.

    Draws come from numpy's Philox-4x64 bit generator seeded with
    ``SeedSequence(seed)``; each swap index uses rejection sampling on raw
    64-bit outputs so the bound is exact.
    """
    out = list(items)
    bits = np.random.Philox(seed & U64_MASK)
    for j in range(len(out) - 1, 0, -1):
        bound = j + 1
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            raw = int(bits.random_raw())
            if raw < limit:
                break
        k = raw % bound
        out[j], out[k] = out[k], out[j]
    return out


def derive_seeds(master_seed, count: int) -> list[int]:
    """Independent per-game 64-bit seeds from a master seed (int or list of ints)."""
    entropy = [s & U64_MASK for s in master_seed] if isinstance(master_seed, (list, tuple)) else master_seed & U64_MASK
    words = np.random.SeedSequence(entropy).generate_state(count, dtype=np.uint64)
    return [int(w) for w in words]


@dataclass
class GameState:
    deck: list[Card]
    hands: list[list[Card]]
    knowledge: list[list[CardKnowledge]]
    fireworks: list[int]
    discards: list[Card]
    hint_tokens: int
    life_tokens: int
    current_player: int = 0
    final_countdown: Optional[int] = None
    terminal: bool = False
    turn: int = 0
    last_action: Optional[tuple[int, Action]] = None
    config: GameConfig = field(default_factory=GameConfig, repr=False)

    @property
    def score(self) -> int:
        return sum(self.fireworks)

    def copy(self) -> "GameState":
        new = copy.copy(self)
        new.deck = list(self.deck)
        new.hands = [list(h) for h in self.hands]
        new.knowledge = [list(k) for k in self.knowledge]
        new.fireworks = list(self.fireworks)
        new.discards = list(self.discards)
        return new

    def step(self, action: Action) -> float:
        """Apply `action` in place and return the team reward."""
        if self.terminal:
            raise ProtocolError("game is over")
        cfg = self.config
        p = self.current_player
        hand = self.hands[p]
        reward = 0.0
        drew_last = False

        if isinstance(action, Play):
            self._check_index(action.index, hand, action)
            card = hand.pop(action.index)
            self.knowledge[p].pop(action.index)
            if self.fireworks[card.color] == card.rank - 1:
                self.fireworks[card.color] = card.rank
                reward = 1.0
                if card.rank == cfg.ranks and self.hint_tokens < cfg.max_hint_tokens:
                    self.hint_tokens += 1
            else:
                self.discards.append(card)
                self.life_tokens -= 1
            drew_last = self._draw(p)
        elif isinstance(action, Discard):
            self._check_index(action.index, hand, action)
            if self.hint_tokens >= cfg.max_hint_tokens:
                raise IllegalMoveError(f"{action}: discard not allowed with full hint tokens")
            card = hand.pop(action.index)
            self.knowledge[p].pop(action.index)
            self.discards.append(card)
            self.hint_tokens += 1
            drew_last = self._draw(p)
        elif isinstance(action, (RevealColor, RevealRank)):
            if not 1 <= action.offset < cfg.players:
                raise IllegalMoveError(f"{action}: target offset out of range")
            if self.hint_tokens <= 0:
                raise IllegalMoveError(f"{action}: no hint tokens")
            target = (p + action.offset) % cfg.players
            know = self.knowledge[target]
            hit = False
            for i, card in enumerate(self.hands[target]):
                if isinstance(action, RevealColor) and card.color == action.color:
                    know[i] = CardKnowledge(card.color, know[i].rank)
                    hit = True
                elif isinstance(action, RevealRank) and card.rank == action.rank:
                    know[i] = CardKnowledge(know[i].color, card.rank)
                    hit = True
            if not hit:
                raise IllegalMoveError(f"{action}: reveals no card")
            self.hint_tokens -= 1
        else:
            raise IllegalMoveError(f"unknown action {action!r}")

        self.last_action = (p, action)
        self.turn += 1
        self.current_player = (p + 1) % cfg.players

        if self.final_countdown is not None and not drew_last:
            self.final_countdown -= 1
        if self.life_tokens <= 0:
            self.terminal = True
            if cfg.bomb_out_zeroes_score:
                # everything scored so far is taken back
                reward -= self.score
        elif self.score == cfg.max_score or self.final_countdown == 0:
            self.terminal = True
        return reward

    def _check_index(self, index: int, hand: list[Card], action: Action) -> None:
        if not 0 <= index < len(hand):
            raise IllegalMoveError(f"{action}: card index out of range")

    def _draw(self, player: int) -> bool:
        if not self.deck:
            return False
        self.hands[player].append(self.deck.pop())
        self.knowledge[player].append(_UNKNOWN)
        if not self.deck:
            self.final_countdown = self.config.players
            return True
        return False


def new_game(config: GameConfig, deck: Optional[list[Card]] = None) -> GameState:
    """Deal a fresh game.  `deck` overrides the shuffle; cards are drawn from its end."""
    config.validate()
    if deck is None:
        deck = shuffle(_ordered_deck(config), config.seed)
    else:
        deck = list(deck)
        if Counter(deck) != initial_composition(config):
            raise ConfigError("scripted deck does not match the configured composition")
    hands: list[list[Card]] = [[] for _ in range(config.players)]
    for _ in range(config.hand_size):
        for p in range(config.players):
            hands[p].append(deck.pop())
    return GameState(
        deck=deck,
        hands=hands,
        knowledge=[[_UNKNOWN] * config.hand_size for _ in range(config.players)],
        fireworks=[0] * config.colors,
        discards=[],
        hint_tokens=config.max_hint_tokens,
        life_tokens=config.max_life_tokens,
        config=config,
    )


def legal_actions(state: GameState, config: Optional[GameConfig] = None) -> list[Action]:
    if state.terminal:
        raise ProtocolError("no legal actions in a terminal state")
    cfg = config or state.config
    p = state.current_player
    n = len(state.hands[p])
    actions: list[Action] = [Play(i) for i in range(n)]
    if state.hint_tokens < cfg.max_hint_tokens:
        actions.extend(Discard(i) for i in range(n))
    if state.hint_tokens > 0:
        for offset in range(1, cfg.players):
            target = state.hands[(p + offset) % cfg.players]
            colors = sorted({c.color for c in target})
            ranks = sorted({c.rank for c in target})
            actions.extend(RevealColor(offset, c) for c in colors)
            actions.extend(RevealRank(offset, r) for r in ranks)
    return actions


def apply_action(
    state: GameState, action: Action, config: Optional[GameConfig] = None
) -> tuple[GameState, float, bool]:
    if config is not None and config != state.config:
        raise ProtocolError("config does not match the state's config")
    if state.terminal:
        raise ProtocolError("game is over")
    if action not in legal_actions(state):
        raise IllegalMoveError(f"illegal action {action!r}")
    new = state.copy()
    reward = new.step(action)
    return new, reward, new.terminal


@dataclass(frozen=True)
class VisibleHand:
    offset: int
    cards: tuple[Card, ...]
    knowledge: tuple[CardKnowledge, ...]


@dataclass(frozen=True)
class StructuredObservation:
    """What seat `player` can see.  `legal_actions` is empty unless it is their turn."""

    player: int
    hint_tokens: int
    life_tokens: int
    fireworks: tuple[int, ...]
    own_knowledge: tuple[CardKnowledge, ...]
    visible_hands: tuple[VisibleHand, ...]
    discards: Optional[tuple[Card, ...]]
    legal_actions: tuple[Action, ...]
    last_action: Optional[tuple[int, Action]]
    deck_size: int
    terminal: bool


def observe(state: GameState, player: int, config: Optional[GameConfig] = None) -> StructuredObservation:
    cfg = config or state.config
    n = cfg.players
    if not 0 <= player < n:
        raise ProtocolError(f"player {player} out of range")
    visible = tuple(
        VisibleHand(
            offset,
            tuple(state.hands[(player + offset) % n]),
            tuple(state.knowledge[(player + offset) % n]),
        )
        for offset in range(1, n)
    )
    last = None
    if state.last_action is not None:
        actor, action = state.last_action
        last = ((actor - player) % n, action)
    mine = not state.terminal and state.current_player == player
    return StructuredObservation(
        player=player,
        hint_tokens=state.hint_tokens,
        life_tokens=state.life_tokens,
        fireworks=tuple(state.fireworks),
        own_knowledge=tuple(state.knowledge[player]),
        visible_hands=visible,
        discards=tuple(state.discards) if cfg.include_discards_in_obs else None,
        legal_actions=tuple(legal_actions(state, cfg)) if mine else (),
        last_action=last,
        deck_size=len(state.deck),
        terminal=state.terminal,
    )


def check_invariants(state: GameState) -> None:
    """Raise AssertionError if card conservation, token bounds or score identity fail."""
    cfg = state.config
    zones = Counter(state.deck)
    for hand in state.hands:
        zones.update(hand)
    zones.update(state.discards)
    for color, height in enumerate(state.fireworks):
        zones.update(Card(color, r) for r in range(1, height + 1))
    assert zones == initial_composition(cfg), "card conservation violated"
    assert 0 <= state.hint_tokens <= cfg.max_hint_tokens, "hint tokens out of bounds"
    assert 0 <= state.life_tokens <= cfg.max_life_tokens, "life tokens out of bounds"
    assert all(0 <= h <= cfg.ranks for h in state.fireworks), "firework out of bounds"
    assert state.score == sum(state.fireworks)
    for hand, know in zip(state.hands, state.knowledge):
        assert len(hand) == len(know) <= cfg.hand_size


# -- seeded replay logs ------------------------------------------------------


@dataclass
class GameLog:
    seed: int
    config: GameConfig
    actions: list[str] = field(default_factory=list)
    score: Optional[float] = None

    def header(self) -> str:
        parts = [f"seed={self.seed}", f"players={self.config.players}"]
        if self.config.colors != 5:
            parts.append(f"colors={self.config.colors}")
        if self.config.ranks != 5:
            parts.append(f"ranks={self.config.ranks}")
        return " ".join(parts)

    def dumps(self) -> str:
        lines = [self.header(), *self.actions]
        if self.score is not None:
            lines.append(f"score={self.score:g}")
        return "\n".join(lines) + "\n"


def parse_logs(text: str) -> list[GameLog]:
    """Parse one or more concatenated game logs."""
    logs: list[GameLog] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("seed="):
            fields = dict(tok.split("=", 1) for tok in line.split())
            seed = int(fields.pop("seed"))
            cfg = GameConfig(
                players=int(fields.pop("players")),
                colors=int(fields.pop("colors", 5)),
                ranks=int(fields.pop("ranks", 5)),
                seed=seed,
            )
            if fields:
                raise ProtocolError(f"unknown log header fields: {sorted(fields)}")
            logs.append(GameLog(seed=seed, config=cfg))
        elif line.startswith("score="):
            if not logs:
                raise ProtocolError("score line before any header")
            logs[-1].score = float(line.split("=", 1)[1])
        else:
            if not logs:
                raise ProtocolError("action line before any header")
            logs[-1].actions.append(line)
    return logs
