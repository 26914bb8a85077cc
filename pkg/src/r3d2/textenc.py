"""Text rendering of observations and actions, plus a closed-vocabulary tokenizer.

Observations follow a fixed sentence template::

    1 clue tokens available. 3 life tokens remaining. Fireworks display:
    Red 5, Yellow 4. knowledge about own hand: Green 5, Unknown X.
    Player 1 hand: Yellow 5, White 4. Player 1 knowledge: Yellow X, Unknown X.
    Discards: Green 4 Red 2. Last action: player 1 reveal yellow 1.

Each extra teammate only adds one more ``Player k hand`` section, so the
same network reads every player count.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from r3d2.engine import (
    COLOR_NAMES,
    Action,
    Card,
    CardKnowledge,
    Discard,
    GameConfig,
    Play,
    RevealColor,
    RevealRank,
    StructuredObservation,
)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "[pad]", "[unk]"

_TOKEN_RE = re.compile(r"[a-z]+|\d|[.,:]|[^a-z\d.,:\s]+")

# Every word the templates can emit.  Digits cover counts, ranks and offsets.
LEXICON = (
    *(str(d) for d in range(10)),
    ".",
    ",",
    ":",
    *(c.lower() for c in COLOR_NAMES),
    "unknown",
    "x",
    "clue",
    "tokens",
    "available",
    "life",
    "remaining",
    "fireworks",
    "display",
    "knowledge",
    "about",
    "own",
    "hand",
    "player",
    "discards",
    "last",
    "action",
    "none",
    "play",
    "discard",
    "reveal",
    "rank",
)


class ActionParseError(ValueError):
    pass


class SequenceTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class TemplateOptions:
    """Optional template sections.

    The discard pile appears only when both this flag is set and the
    observation carries one (see GameConfig.include_discards_in_obs).
    """

    last_action: bool = True
    teammate_knowledge: bool = True
    discards: bool = True


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise ValueError("vocab must start with the reserved pad and unk tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate vocab entries")

    @cached_property
    def index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def to_text(self) -> str:
        return "\n".join(self.tokens) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls(tuple(text.splitlines()))

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


def build_vocab() -> Vocab:
    return Vocab((PAD_TOKEN, UNK_TOKEN, *LEXICON))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    source_text: str = ""

    def __len__(self) -> int:
        return len(self.ids)


# -- rendering ----------------------------------------------------------------


def _card_text(card: Card) -> str:
    return f"{COLOR_NAMES[card.color]} {card.rank}"


def _knowledge_text(k: CardKnowledge) -> str:
    color = COLOR_NAMES[k.color] if k.color is not None else "Unknown"
    rank = str(k.rank) if k.rank is not None else "X"
    return f"{color} {rank}"


def _listing(items: Iterable[str]) -> str:
    return ", ".join(items)


def render_observation(
    obs: StructuredObservation,
    config: GameConfig,
    options: TemplateOptions = TemplateOptions(),
) -> str:
    fireworks = _listing(
        f"{COLOR_NAMES[c]} {h}" for c, h in enumerate(obs.fireworks)
    )
    parts = [
        f"{obs.hint_tokens} clue tokens available.",
        f"{obs.life_tokens} life tokens remaining.",
        f"Fireworks display: {fireworks}.",
        f"knowledge about own hand: {_listing(map(_knowledge_text, obs.own_knowledge))}.",
    ]
    for hand in obs.visible_hands:
        parts.append(f"Player {hand.offset} hand: {_listing(map(_card_text, hand.cards))}.")
        if options.teammate_knowledge:
            parts.append(
                f"Player {hand.offset} knowledge: {_listing(map(_knowledge_text, hand.knowledge))}."
            )
    if options.discards and obs.discards is not None:
        parts.append("Discards:" + "".join(" " + _card_text(c) for c in obs.discards) + ".")
    if options.last_action:
        if obs.last_action is None:
            parts.append("Last action: none.")
        else:
            actor, action = obs.last_action
            parts.append(f"Last action: player {actor} {render_action(action, config)}.")
    return " ".join(parts)


def render_action(action: Action, config: Optional[GameConfig] = None) -> str:
    if isinstance(action, Play):
        return f"play {action.index}"
    if isinstance(action, Discard):
        return f"discard {action.index}"
    if isinstance(action, RevealColor):
        return f"reveal {COLOR_NAMES[action.color].lower()} {action.offset}"
    if isinstance(action, RevealRank):
        return f"reveal rank {action.rank} {action.offset}"
    raise TypeError(f"not an action: {action!r}")


_COLOR_IDS = {name.lower(): i for i, name in enumerate(COLOR_NAMES)}


def parse_action(text: str, config: Optional[GameConfig] = None) -> Action:
    """Inverse of `render_action`.  With a config, bounds are checked too."""
    words = text.strip().lower().split()

    def number(word: str) -> int:
        if not word.isdigit():
            raise ActionParseError(f"expected a number, got {word!r} in {text!r}")
        return int(word)

    if len(words) == 2 and words[0] in ("play", "discard"):
        index = number(words[1])
        action: Action = Play(index) if words[0] == "play" else Discard(index)
        if config is not None and index >= config.hand_size:
            raise ActionParseError(f"card index {index} out of range in {text!r}")
    elif len(words) == 3 and words[0] == "reveal" and words[1] in _COLOR_IDS:
        action = RevealColor(number(words[2]), _COLOR_IDS[words[1]])
        if config is not None and action.color >= config.colors:
            raise ActionParseError(f"color not in this game: {text!r}")
    elif len(words) == 4 and words[:2] == ["reveal", "rank"]:
        action = RevealRank(number(words[3]), number(words[2]))
        if config is not None and not 1 <= action.rank <= config.ranks:
            raise ActionParseError(f"rank not in this game: {text!r}")
    else:
        raise ActionParseError(f"cannot parse action {text!r}")
    if isinstance(action, (RevealColor, RevealRank)):
        if action.offset < 1 or (config is not None and action.offset >= config.players):
            raise ActionParseError(f"target offset out of range in {text!r}")
    return action


# -- tokenization -------------------------------------------------------------


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    index = vocab.index
    return TokenSequence(tuple(index.get(w, UNK) for w in split_words(text)), text)


def pad_batch(
    seqs: Sequence[Union[TokenSequence, Sequence[int]]], max_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with PAD; returns int64 ids and a 0/1 mask, both (batch, max_len)."""
    ids = np.zeros((len(seqs), max_len), dtype=np.int64)
    mask = np.zeros((len(seqs), max_len), dtype=np.int64)
    for row, seq in enumerate(seqs):
        values = seq.ids if isinstance(seq, TokenSequence) else seq
        if len(values) > max_len:
            raise SequenceTooLongError(f"sequence {row} has {len(values)} tokens > {max_len}")
        ids[row, : len(values)] = values
        mask[row, : len(values)] = 1
    return ids, mask
