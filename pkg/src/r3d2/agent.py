"""Batched text agents: observation -> tokens -> Q over legal candidates."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from r3d2.engine import (
    Action,
    Discard,
    GameConfig,
    Play,
    RevealColor,
    RevealRank,
    StructuredObservation,
)
from r3d2.qnet import Checkpoint, QNet, RecurrentState, read_checkpoint
from r3d2.textenc import PAD, TemplateOptions, Vocab, render_action, render_observation, tokenize

ACTION_TOKENS = 4  # longest action string: "reveal rank 5 1"


def action_catalog(config: GameConfig) -> list[Action]:
    """Every action that can ever be legal under `config`, in legal_actions order."""
    out: list[Action] = [Play(i) for i in range(config.hand_size)]
    out += [Discard(i) for i in range(config.hand_size)]
    for offset in range(1, config.players):
        out += [RevealColor(offset, c) for c in range(config.colors)]
        out += [RevealRank(offset, r) for r in range(1, config.ranks + 1)]
    return out


class TextAgent:
    """Greedy / epsilon-greedy acting for many seats at once with one network.

    Call `refresh()` whenever the network's parameters change; action
    embeddings are cached per game shape between refreshes.
    """

    def __init__(self, net: QNet, vocab: Vocab, options: TemplateOptions = TemplateOptions()):
        self.net = net
        self.vocab = vocab
        self.options = options
        self._token_rows: dict[str, np.ndarray] = {}
        self._emb_cache: dict[tuple, tuple[dict[Action, int], torch.Tensor]] = {}

    @classmethod
    def from_checkpoint(cls, path_or_ckpt) -> "TextAgent":
        ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else read_checkpoint(path_or_ckpt)
        template = ckpt.meta.get("template", {})
        return cls(ckpt.build(), ckpt.vocab, TemplateOptions(**template))

    def refresh(self) -> None:
        self._emb_cache.clear()

    @property
    def dim(self) -> int:
        return self.net.cfg.model_dim

    def initial_state(self, n: int) -> RecurrentState:
        return RecurrentState.zeros(n, self.dim, self.net.dtype)

    def observation_tokens(self, obs: StructuredObservation, config: GameConfig) -> np.ndarray:
        text = render_observation(obs, config, self.options)
        return np.asarray(tokenize(text, self.vocab).ids, dtype=np.uint8)

    def action_tokens(self, action: Action) -> np.ndarray:
        text = render_action(action)
        row = self._token_rows.get(text)
        if row is None:
            ids = tokenize(text, self.vocab).ids
            row = np.zeros(ACTION_TOKENS, dtype=np.uint8)
            row[: len(ids)] = ids
            self._token_rows[text] = row
        return row

    def candidate_tokens(self, actions: Sequence[Action]) -> np.ndarray:
        return np.stack([self.action_tokens(a) for a in actions])

    def _catalog_embeddings(self, config: GameConfig) -> tuple[dict[Action, int], torch.Tensor]:
        key = (config.players, config.colors, config.ranks, config.hand_size)
        cached = self._emb_cache.get(key)
        if cached is None:
            catalog = action_catalog(config)
            ids = torch.from_numpy(self.candidate_tokens(catalog).astype(np.int64))
            with torch.no_grad():
                emb = self.net.encode(ids, ids != PAD, "act")
            cached = ({a: i for i, a in enumerate(catalog)}, emb)
            self._emb_cache[key] = cached
        return cached

    @torch.no_grad()
    def q_values(
        self,
        obs_tokens: Sequence[np.ndarray],
        legal: Sequence[Sequence[Action]],
        configs: Sequence[GameConfig],
        state: RecurrentState,
    ) -> tuple[list[np.ndarray], RecurrentState]:
        """Q over each row's legal actions; `state` rows line up with the inputs."""
        n = len(obs_tokens)
        L = max(len(t) for t in obs_tokens)
        ids = torch.zeros(n, L, dtype=torch.int64)
        for i, t in enumerate(obs_tokens):
            ids[i, : len(t)] = torch.from_numpy(t.astype(np.int64))
        obs_emb = self.net.encode(ids, ids != PAD, "obs")

        K = max(len(a) for a in legal)
        cand = torch.zeros(n, K, self.dim, dtype=self.net.dtype)
        mask = torch.zeros(n, K, dtype=torch.bool)
        for i, (actions, cfg) in enumerate(zip(legal, configs)):
            index, emb = self._catalog_embeddings(cfg)
            cand[i, : len(actions)] = emb[[index[a] for a in actions]]
            mask[i, : len(actions)] = True
        q, new_state = self.net.step(obs_emb, state, cand, mask)
        q = q.double().numpy()
        return [q[i, : len(a)] for i, a in enumerate(legal)], new_state

    @torch.no_grad()
    def advance_actions(
        self,
        chosen: Sequence[Action],
        configs: Sequence[GameConfig],
        state: RecurrentState,
    ) -> RecurrentState:
        if self.net.act_lstm is None:
            return state
        rows = []
        for a, cfg in zip(chosen, configs):
            index, emb = self._catalog_embeddings(cfg)
            rows.append(emb[index[a]])
        return self.net.advance_action_state(state, torch.stack(rows))

    def act(
        self,
        observations: Sequence[StructuredObservation],
        configs: Sequence[GameConfig],
        state: RecurrentState,
        epsilons: Optional[Sequence[float]] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[list[int], RecurrentState, list[np.ndarray], list[np.ndarray]]:
        """Pick one legal-action index per observation.

        Returns (indices, new state, observation tokens, candidate tokens).
        Greedy ties go to the lowest candidate index.
        """
        obs_tokens = [self.observation_tokens(o, c) for o, c in zip(observations, configs)]
        legal = [o.legal_actions for o in observations]
        qs, state = self.q_values(obs_tokens, legal, configs, state)
        picks = []
        for i, q in enumerate(qs):
            if epsilons is not None and rng is not None and rng.random() < epsilons[i]:
                picks.append(int(rng.integers(len(q))))
            else:
                picks.append(int(np.argmax(q)))
        state = self.advance_actions([legal[i][k] for i, k in enumerate(picks)], configs, state)
        cand_tokens = [self.candidate_tokens(a) for a in legal]
        return picks, state, obs_tokens, cand_tokens


class RandomAgent:
    """Uniform over legal actions; stateless."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def initial_state(self, n: int):
        return None

    def act(self, observations, configs, state, epsilons=None, rng=None):
        picks = [int(self.rng.integers(len(o.legal_actions))) for o in observations]
        return picks, None, None, None
