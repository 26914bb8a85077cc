"""Self-play, cross-play and cross-setting transfer evaluation."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from r3d2.agent import RandomAgent, TextAgent
from r3d2.engine import GameConfig, GameLog, ProtocolError, derive_seeds, new_game, observe
from r3d2.qnet import read_checkpoint
from r3d2.textenc import build_vocab, render_action

logger = logging.getLogger(__name__)

RANDOM = "random"
PAIRING_SCHEME = "round-robin: team k, seat s uses pool[(k + s) % len(pool)]; n-trained seats first"


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class PolicySpec:
    path: str
    label: str = ""
    family: str = ""
    greedy: bool = True

    def load(self, seed: int = 0):
        if self.path == RANDOM:
            return RandomAgent(seed)
        ckpt = read_checkpoint(self.path)
        if ckpt.meta.get("action_space", "text") != "text":
            raise PolicyError(f"{self.path}: fixed-action-space checkpoints cannot join text teams")
        if ckpt.vocab.sha256 != build_vocab().sha256:
            raise PolicyError(f"{self.path}: vocab hash {ckpt.vocab.sha256[:12]} does not match")
        return TextAgent.from_checkpoint(ckpt)

    @classmethod
    def from_checkpoint(cls, path) -> "PolicySpec":
        meta = read_checkpoint(path).meta
        family = meta.get("algorithm", "R3D2")
        settings = "".join(str(s) for s in meta.get("settings", []))
        label = f"{family}:seed{meta.get('seed', '?')}:{settings}p"
        return cls(str(path), label, family)


Member = Union[PolicySpec, TextAgent, RandomAgent]


@dataclass
class EvalReport:
    team: list[str]
    players: int
    games: int
    mean: float
    stderr: float
    bomb_rate: float
    scores: list[float]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _label(member: Member, i: int) -> str:
    if isinstance(member, PolicySpec):
        return member.label or member.path
    if isinstance(member, RandomAgent):
        return RANDOM
    return f"agent{i}"


def _resolve(team: Sequence[Member], seed: int) -> list:
    """Load specs once each; the same spec in two seats shares one agent."""
    loaded: dict[PolicySpec, object] = {}
    out = []
    for member in team:
        if isinstance(member, PolicySpec):
            if member not in loaded:
                loaded[member] = member.load(seed)
            out.append(loaded[member])
        else:
            out.append(member)
    return out


def play_games(
    team: Sequence[Member],
    config: GameConfig,
    games: int = 1000,
    seed: int = 0,
    record: Optional[list] = None,
) -> EvalReport:
    """Play `games` games with seat i controlled by team[i]; greedy actions.

    Games run in lockstep so each distinct policy makes one batched forward
    pass per turn.  Per-game deck seeds are derived from `seed`.
    """
    if len(team) != config.players:
        raise ProtocolError(f"team of {len(team)} for a {config.players}-player game")
    agents = _resolve(team, seed)
    n = config.players
    seeds = derive_seeds(seed, games)
    states = [new_game(config.with_seed(s)) for s in seeds]
    returns = [0.0] * games
    logs = [GameLog(s, config) for s in seeds] if record is not None else None
    distinct = list({id(a): a for a in agents}.values())
    rec = {id(a): a.initial_state(games * n) for a in distinct}

    active = list(range(games))
    while active:
        by_agent: dict[int, list[int]] = {}
        for g in active:
            by_agent.setdefault(id(agents[states[g].current_player]), []).append(g)
        for key, group in by_agent.items():
            agent = agents[states[group[0]].current_player]
            rows = [g * n + states[g].current_player for g in group]
            obs = [observe(states[g], states[g].current_player) for g in group]
            st = rec[key]
            sub = st.select(rows) if st is not None else None
            picks, sub, _, _ = agent.act(obs, [config] * len(group), sub)
            if st is not None:
                for t, value in enumerate(sub):
                    st[t][rows] = value
            for j, g in enumerate(group):
                action = obs[j].legal_actions[picks[j]]
                returns[g] += states[g].step(action)
                if logs is not None:
                    logs[g].actions.append(render_action(action))
        active = [g for g in active if not states[g].terminal]

    scores = np.asarray(returns, dtype=np.float64)
    if logs is not None:
        for log, score in zip(logs, scores):
            log.score = float(score)
        record.extend(logs)
    return EvalReport(
        team=[_label(m, i) for i, m in enumerate(team)],
        players=n,
        games=games,
        mean=float(scores.mean()),
        stderr=float(scores.std(ddof=1) / math.sqrt(games)) if games > 1 else 0.0,
        bomb_rate=float(np.mean([s.life_tokens == 0 for s in states])),
        scores=scores.tolist(),
        meta={"seed": seed, "colors": config.colors, "ranks": config.ranks},
    )


# -- cross-play ---------------------------------------------------------------


@dataclass
class CrossPlayResult:
    labels: list[str]
    families: list[str]
    reports: list[list[EvalReport]]

    @property
    def means(self) -> np.ndarray:
        return np.array([[r.mean for r in row] for row in self.reports])

    def self_play(self) -> float:
        return float(np.mean(np.diag(self.means)))

    def intra_xp(self) -> dict[str, float]:
        """Off-diagonal cells whose row and column policies share a family."""
        out = {}
        for fam in dict.fromkeys(self.families):
            cells = [
                self.means[i, j]
                for i, fi in enumerate(self.families)
                for j, fj in enumerate(self.families)
                if i != j and fi == fj == fam
            ]
            if cells:
                out[fam] = float(np.mean(cells))
        return out

    def inter_xp(self) -> dict[str, float]:
        groups: dict[str, list[float]] = {}
        for i, fi in enumerate(self.families):
            for j, fj in enumerate(self.families):
                if fi != fj:
                    groups.setdefault(f"{fi}|{fj}", []).append(self.means[i, j])
        return {k: float(np.mean(v)) for k, v in groups.items()}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["row\\col", *self.labels])
            for label, row in zip(self.labels, self.reports):
                w.writerow([label, *(f"{r.mean:.4f}" for r in row)])

    def plot_rows(self) -> list[dict]:
        rows = [{"group": "SP", "value": self.self_play()}]
        rows += [{"group": f"intra-XP {k}", "value": v} for k, v in self.intra_xp().items()]
        rows += [{"group": f"inter-XP {k}", "value": v} for k, v in self.inter_xp().items()]
        return rows


def crossplay_matrix(
    policies: Sequence[PolicySpec],
    config: GameConfig,
    games: int = 1000,
    seed: int = 0,
) -> CrossPlayResult:
    """Cell (i, j) seats policy i first and policy j in every other seat."""
    agents = {p: p.load(seed) for p in policies}
    reports = []
    for pi in policies:
        row = []
        for pj in policies:
            team = [agents[pi]] + [agents[pj]] * (config.players - 1)
            rep = play_games(team, config, games, seed)
            rep.team = [pi.label] + [pj.label] * (config.players - 1)
            row.append(rep)
        reports.append(row)
    return CrossPlayResult(
        labels=[p.label or p.path for p in policies],
        families=[p.family or p.label for p in policies],
        reports=reports,
    )


# -- cross-setting transfer ---------------------------------------------------


@dataclass
class TransferReport:
    n: int
    mean: float
    per_i: dict[int, dict]
    teams: list[dict]
    pairing: str = PAIRING_SCHEME
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def plot_rows(self) -> list[dict]:
        return [{"group": f"i={i}", "value": v["mean"], "teams": v["teams"]} for i, v in self.per_i.items()]


def transfer_teams(n: int, n_pool: Sequence, m_pool: Sequence, i: int) -> list[list]:
    """Round-robin teams with i seats from n_pool followed by n-i seats from m_pool."""
    k_teams = max(len(n_pool), len(m_pool))
    return [
        [n_pool[(k + s) % len(n_pool)] for s in range(i)]
        + [m_pool[(k + s) % len(m_pool)] for s in range(i, n)]
        for k in range(k_teams)
    ]


def transfer_eval(
    n: int,
    m_pool: Sequence[PolicySpec],
    n_pool: Sequence[PolicySpec],
    games: int = 1000,
    seed: int = 0,
    colors: int = 5,
    ranks: int = 5,
) -> TransferReport:
    """Zero-shot transfer of m-player policies into n-player games.

    For every 0 < i < n, teams of i n-trained seats and n-i m-trained seats
    each play `games` games.
    """
    if not n_pool or not m_pool:
        raise ValueError("both checkpoint pools must be nonempty")
    config = GameConfig(players=n, colors=colors, ranks=ranks)
    notes = []
    loaded = {p: p.load(seed) for p in dict.fromkeys([*n_pool, *m_pool])}
    per_i: dict[int, dict] = {}
    teams_out = []
    for i in range(1, n):
        if i > len(n_pool) or n - i > len(m_pool):
            msg = f"i={i}: pools too small for distinct seeds; reusing checkpoints"
            warnings.warn(msg)
            notes.append(msg)
        means = []
        for team in transfer_teams(n, n_pool, m_pool, i):
            rep = play_games([loaded[p] for p in team], config, games, seed)
            labels = [p.label or p.path for p in team]
            rep.team = labels
            teams_out.append({"i": i, "team": labels, "mean": rep.mean, "stderr": rep.stderr})
            means.append(rep.mean)
        per_i[i] = {"mean": float(np.mean(means)), "teams": len(means)}
    overall = float(np.mean([t["mean"] for t in teams_out]))
    logger.info("transfer n=%d: %s", n, {i: v["teams"] for i, v in per_i.items()})
    return TransferReport(n=n, mean=overall, per_i=per_i, teams=teams_out, warnings=notes)


def write_plot_data(rows: list[dict], path) -> None:
    keys = sorted({k for r in rows for k in r}, key=lambda k: (k != "group", k))
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def policies_in(directory) -> list[PolicySpec]:
    return [PolicySpec.from_checkpoint(p) for p in sorted(Path(directory).glob("*.ckpt"))]
