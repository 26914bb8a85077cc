"""Self-play actor-learner training.

Actors play complete games in which every seat is driven by the same
parameter snapshot; each seat's turns form one trajectory.  A single
learner samples whole trajectories from the shared prioritized buffer and
minimizes the importance-weighted double-DQN TD loss.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import torch

from r3d2.agent import TextAgent
from r3d2.engine import GameConfig, GameState, derive_seeds, new_game, observe
from r3d2.qnet import (
    EncoderConfig,
    EpisodeBatch,
    NumericError,
    QNet,
    forward_episode,
    gradient,
    init_params,
    locate_nonfinite,
    make_target,
    save_checkpoint,
    sync_target,
)
from r3d2.replay import PrioritizedReplay, SampledBatch, Trajectory, collate
from r3d2.textenc import TemplateOptions, Vocab, build_vocab

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    settings: tuple[int, ...] = (2,)
    num_actors: int = 80
    envs_per_actor: int = 4
    epochs: int = 2000
    updates_per_epoch: int = 500
    # replay
    burn_in_frames: int = 10_000
    replay_buffer_size: int = 50_000
    priority_exponent: float = 0.9
    priority_weight: float = 0.6
    max_trajectory_length: int = 80
    priority_eta: float = 0.9
    # optimization
    lr: float = 6.25e-5
    eps: float = 1.5e-5
    grad_clip: float = 5.0
    batchsize: int = 64
    # Q learning
    n_step: int = 1
    discount_factor: float = 0.999
    target_network_sync_interval: int = 2500
    # network
    layers: int = 2
    model_dim: int = 128
    attention_heads: int = 2
    ffn_dim: int = 512
    max_seq_len: int = 512
    encoder_update_period: int = 1
    action_recurrence: bool = False
    init_checkpoint: str = ""
    # game and template
    colors: int = 5
    ranks: int = 5
    include_discards_in_obs: bool = True
    last_action: bool = True
    teammate_knowledge: bool = True
    # schedule
    learner_steps_per_round: int = 1  # learner steps per actor round in deterministic mode
    eval_every_epochs: int = 50
    probe_games: int = 100
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self):
        self.settings = tuple(sorted(set(int(s) for s in self.settings)))
        if not self.settings or any(s not in (2, 3, 4, 5) for s in self.settings):
            raise ValueError(f"settings must be a nonempty subset of 2..5, got {self.settings}")
        positive = (
            "num_actors", "envs_per_actor", "epochs", "updates_per_epoch", "replay_buffer_size",
            "max_trajectory_length", "batchsize", "n_step", "target_network_sync_interval",
            "learner_steps_per_round", "eval_every_epochs",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.eps <= 0 or self.grad_clip <= 0:
            raise ValueError("lr, eps and grad_clip must be positive")
        if not 0 < self.discount_factor <= 1:
            raise ValueError("discount_factor must be in (0, 1]")

    @property
    def algorithm(self) -> str:
        return "R3D2-M" if len(self.settings) > 1 else "R3D2-S"

    def game_config(self, players: int, seed: int = 0) -> GameConfig:
        return GameConfig(
            players=players,
            colors=self.colors,
            ranks=self.ranks,
            seed=seed,
            include_discards_in_obs=self.include_discards_in_obs,
        )

    def template(self) -> TemplateOptions:
        return TemplateOptions(
            last_action=self.last_action,
            teammate_knowledge=self.teammate_knowledge,
            discards=self.include_discards_in_obs,
        )

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            layers=self.layers,
            model_dim=self.model_dim,
            attention_heads=self.attention_heads,
            ffn_dim=self.ffn_dim,
            max_seq_len=self.max_seq_len,
            init_mode="import" if self.init_checkpoint else "random",
            encoder_update_period=self.encoder_update_period,
            action_recurrence=self.action_recurrence,
        )


def _coerce(value: str, kind):
    if kind is bool or kind == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value.replace("_", "").replace(",", ""))
    if kind in (float, "float"):
        return float(value.replace("_", "").replace(",", ""))
    if kind in (str, "str"):
        return value
    return tuple(int(v) for v in value.replace(" ", "").split(",") if v)


def parse_config_text(text: str) -> dict:
    """Flat key=value lines; '#' starts a comment.  Unknown keys are an error."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _coerce(value, types[key])
    return out


def load_config(path, **overrides) -> TrainConfig:
    with open(path) as f:
        values = parse_config_text(f.read())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, (tuple, list)):
            value = ",".join(map(str, value))
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def epsilon_for_actor(i: int, n: int = 80) -> float:
    if not 0 <= i < n:
        raise ValueError(f"actor index {i} outside [0, {n})")
    if n == 1:
        return 0.1
    return 0.1 ** (1 + 7 * i / (n - 1))


# -- actors -------------------------------------------------------------------


@dataclass
class ActorHandle:
    index: int
    epsilon: float
    players: int
    snapshot: Callable[[], TextAgent]
    envs: int = 1
    seed: int = 0


class _SeatLog:
    __slots__ = ("obs", "cands", "actions", "rewards", "pending")

    def __init__(self):
        self.obs, self.cands, self.actions, self.rewards = [], [], [], []
        self.pending = 0.0  # team reward seen before this seat's first turn


def play_round(
    agent: TextAgent,
    configs: Sequence[GameConfig],
    epsilon: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> tuple[list[Trajectory], list[float]]:
    """Play one self-play game per config in lockstep; return trajectories and game returns."""
    games = [new_game(c) for c in configs]
    offsets = np.cumsum([0] + [c.players for c in configs])
    state = agent.initial_state(int(offsets[-1]))
    logs = [[_SeatLog() for _ in range(c.players)] for c in configs]
    returns = [0.0] * len(games)

    active = list(range(len(games)))
    while active:
        rows = [int(offsets[g] + games[g].current_player) for g in active]
        obs = [observe(games[g], games[g].current_player) for g in active]
        cfgs = [configs[g] for g in active]
        sub = state.select(rows)
        picks, sub, obs_tok, cand_tok = agent.act(
            obs, cfgs, sub, [epsilon] * len(active), rng
        )
        for t, value in enumerate(sub):
            state[t][rows] = value
        still = []
        for j, g in enumerate(active):
            game, seat = games[g], games[g].current_player
            log = logs[g][seat]
            log.obs.append(obs_tok[j])
            log.cands.append(cand_tok[j])
            log.actions.append(picks[j])
            log.rewards.append(log.pending)
            log.pending = 0.0
            reward = game.step(obs[j].legal_actions[picks[j]])
            returns[g] += reward
            for other in logs[g]:
                if other.rewards:
                    other.rewards[-1] += reward
                else:
                    other.pending += reward
            if not game.terminal:
                still.append(g)
        active = still

    trajectories = []
    for g, cfg in enumerate(configs):
        for log in logs[g]:
            if not log.actions:
                continue
            trajectories.append(
                Trajectory(
                    player_count=cfg.players,
                    obs=tuple(log.obs),
                    candidates=tuple(log.cands),
                    actions=np.asarray(log.actions, dtype=np.int64),
                    rewards=np.asarray(log.rewards, dtype=np.float32),
                )
            )
    return trajectories, returns


def actor_loop(handle: ActorHandle, cfg: TrainConfig) -> Iterator[list[Trajectory]]:
    """Endless stream of per-round trajectory lists for one actor.

    The parameter snapshot is re-fetched between rounds only, so every game
    is played by a single policy.
    """
    rng = np.random.default_rng([cfg.seed, handle.index])
    round_no = 0
    while True:
        agent = handle.snapshot()
        seeds = derive_seeds([cfg.seed, handle.index, round_no], handle.envs)
        configs = [cfg.game_config(handle.players, s) for s in seeds]
        trajectories, _ = play_round(agent, configs, handle.epsilon, rng)
        round_no += 1
        yield trajectories


# -- learner ------------------------------------------------------------------


def double_dqn_targets(
    rewards: torch.Tensor,
    step_mask: torch.Tensor,
    online_q: torch.Tensor,
    target_q: torch.Tensor,
    cand_mask: torch.Tensor,
    gamma: float,
    n_step: int = 1,
) -> torch.Tensor:
    """y_t = sum_{k<n} g^k r_{t+k} + g^n Q_target(t+n, argmax_a Q_online(t+n, a)).

    Bootstrapping stops at the end of each episode (the last live step is terminal).
    """
    B, T = step_mask.shape
    live = step_mask.bool()
    r = rewards * live
    masked_online = online_q.masked_fill(~cand_mask.bool(), float("-inf"))
    best = masked_online.argmax(-1, keepdim=True)
    boot = target_q.gather(-1, best).squeeze(-1)  # value of t's best action, (B, T)
    lengths = live.sum(1)

    y = torch.zeros_like(r)
    for k in range(n_step):
        shifted = torch.zeros_like(r)
        if k < T:
            shifted[:, : T - k] = r[:, k:]
        y = y + gamma**k * shifted
    nxt = torch.zeros_like(boot)
    if n_step < T:
        nxt[:, : T - n_step] = boot[:, n_step:]
    t_idx = torch.arange(T).expand(B, T)
    has_next = (t_idx + n_step) < lengths[:, None]
    y = y + gamma**n_step * nxt * has_next
    return y * live


def td_targets(
    batch: EpisodeBatch,
    online: QNet,
    target: QNet,
    gamma: float = 0.999,
    n_step: int = 1,
) -> torch.Tensor:
    with torch.no_grad():
        online_q = forward_episode(online, batch)
        target_q = forward_episode(target, batch)
    return double_dqn_targets(
        batch.rewards, batch.step_mask, online_q, target_q, batch.cand_mask, gamma, n_step
    )


def clip_gradients(net: QNet, max_norm: float) -> float:
    """Rescale all gradients jointly to global L2 norm <= max_norm; return the norm before."""
    return float(torch.nn.utils.clip_grad_norm_(net.parameters(), max_norm))


@dataclass
class StepMetrics:
    step: int
    loss: float
    grad_norm: float
    mean_abs_td: float


class Learner:
    """Owns the mutable online network, its target copy and the optimizer."""

    def __init__(self, cfg: TrainConfig, online: QNet, replay: Optional[PrioritizedReplay] = None):
        self.cfg = cfg
        self.online = online
        self.target = make_target(online)
        self.replay = replay
        self.optim = torch.optim.Adam(
            online.parameters(), lr=cfg.lr, eps=cfg.eps, betas=(0.9, 0.999)
        )
        self.step_count = 0

    def train_step(self, sampled: SampledBatch) -> StepMetrics:
        cfg = self.cfg
        batch = collate(sampled.trajectories)
        online_q = forward_episode(self.online, batch)
        with torch.no_grad():
            target_q = forward_episode(self.target, batch)
        y = double_dqn_targets(
            batch.rewards, batch.step_mask, online_q.detach(), target_q,
            batch.cand_mask, cfg.discount_factor, cfg.n_step,
        )
        live = batch.step_mask.to(online_q.dtype)
        taken = online_q.gather(-1, batch.chosen[..., None]).squeeze(-1)
        delta = (taken - y) * live
        weights = torch.as_tensor(sampled.weights, dtype=online_q.dtype)
        loss = (weights[:, None] * delta.pow(2)).sum() / live.sum()
        if not torch.isfinite(loss):
            where = locate_nonfinite(self.online, batch)
            raise NumericError(f"non-finite loss at learner step {self.step_count} (first bad module: {where})")

        gradient(self.online, loss, step=self.step_count)
        grad_norm = clip_gradients(self.online, cfg.grad_clip)
        self.optim.step()
        self.step_count += 1
        if self.step_count % cfg.target_network_sync_interval == 0:
            sync_target(self.online, self.target)

        abs_delta = delta.detach().abs().double().numpy()
        lengths = batch.step_mask.sum(1).numpy()
        if self.replay is not None:
            self.replay.update_priorities(
                sampled.slots, [abs_delta[b, : lengths[b]] for b in range(len(lengths))], sampled.keys
            )
        return StepMetrics(
            step=self.step_count,
            loss=float(loss.detach()),
            grad_norm=float(grad_norm),
            mean_abs_td=float(abs_delta.sum() / lengths.sum()),
        )


def train_step(learner: Learner, sampled: SampledBatch) -> StepMetrics:
    return learner.train_step(sampled)


# -- orchestration ------------------------------------------------------------


class SnapshotBoard:
    """Copy-on-publish parameter snapshots shared with actors."""

    def __init__(self, net: QNet, vocab: Vocab, options: TemplateOptions):
        self.vocab = vocab
        self.options = options
        self._lock = threading.Lock()
        self._agent = self._freeze(net)

    def _freeze(self, net: QNet) -> TextAgent:
        snap = copy.deepcopy(net)
        snap.requires_grad_(False)
        return TextAgent(snap, self.vocab, self.options)

    def publish(self, net: QNet) -> None:
        agent = self._freeze(net)
        with self._lock:
            self._agent = agent

    def get(self) -> TextAgent:
        with self._lock:
            return self._agent


def assign_actors(cfg: TrainConfig, board: SnapshotBoard) -> list[ActorHandle]:
    """Round-robin player counts over actors, each with its fixed epsilon."""
    return [
        ActorHandle(
            index=i,
            epsilon=epsilon_for_actor(i, cfg.num_actors),
            players=cfg.settings[i % len(cfg.settings)],
            snapshot=board.get,
            envs=cfg.envs_per_actor,
            seed=cfg.seed,
        )
        for i in range(cfg.num_actors)
    ]


def probe_scores(agent: TextAgent, cfg: TrainConfig, games: int, seed: int) -> dict[str, float]:
    from r3d2.evaluate import play_games

    return {
        f"{p}p": play_games([agent] * p, cfg.game_config(p), games, seed).mean
        for p in cfg.settings
    }


@dataclass
class TrainingResult:
    checkpoints: list[str]
    checkpoint_hashes: list[str]
    metrics_path: str
    replay: PrioritizedReplay
    learner: Learner


def run_training(
    cfg: TrainConfig,
    out_dir,
    progress: Optional[Callable[[dict], None]] = None,
) -> TrainingResult:
    """Train for cfg.epochs x cfg.updates_per_epoch learner steps.

    Writes epoch_<k>.ckpt, metrics.jsonl and config.txt under `out_dir`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    threads = int(os.environ.get("R3D2_THREADS", "0") or 0)
    if cfg.deterministic:
        torch.set_num_threads(1)
    elif threads:
        torch.set_num_threads(threads)

    vocab = build_vocab()
    vocab.save(out / "vocab.txt")
    net = init_params(cfg.encoder_config(len(vocab)), seed=cfg.seed, import_path=cfg.init_checkpoint or None)
    replay = PrioritizedReplay(
        capacity=cfg.replay_buffer_size,
        alpha=cfg.priority_exponent,
        beta=cfg.priority_weight,
        burn_in_frames=cfg.burn_in_frames,
        eta=cfg.priority_eta,
        max_length=cfg.max_trajectory_length,
        seed=cfg.seed,
    )
    learner = Learner(cfg, net, replay)
    board = SnapshotBoard(net, vocab, cfg.template())
    handles = assign_actors(cfg, board)
    streams = [actor_loop(h, cfg) for h in handles]
    meta = {
        "algorithm": cfg.algorithm,
        "settings": list(cfg.settings),
        "seed": cfg.seed,
        "colors": cfg.colors,
        "ranks": cfg.ranks,
        "include_discards_in_obs": cfg.include_discards_in_obs,
        "template": asdict(cfg.template()),
    }

    metrics_path = out / "metrics.jsonl"
    checkpoints, hashes = [], []
    stop = threading.Event()
    actor_threads: list[threading.Thread] = []
    if not cfg.deterministic:
        def feed(stream):
            for trajectories in stream:
                if stop.is_set():
                    return
                for tr in trajectories:
                    replay.append(tr)

        actor_threads = [threading.Thread(target=feed, args=(s,), daemon=True) for s in streams]
        for t in actor_threads:
            t.start()

    def collect_round():
        for stream in streams:
            for tr in next(stream):
                replay.append(tr)

    started = time.time()
    try:
        with open(metrics_path, "w") as metrics_file:
            for epoch in range(1, cfg.epochs + 1):
                window = []
                for update in range(cfg.updates_per_epoch):
                    if update % cfg.learner_steps_per_round == 0:
                        if cfg.deterministic:
                            collect_round()
                            while not replay.ready:
                                collect_round()
                        else:
                            while not replay.ready:
                                time.sleep(0.01)
                    window.append(learner.train_step(replay.sample(cfg.batchsize)))
                    if (update + 1) % cfg.learner_steps_per_round == 0:
                        board.publish(learner.online)
                board.publish(learner.online)
                record = {
                    "epoch": epoch,
                    "step": learner.step_count,
                    "loss": float(np.mean([m.loss for m in window])),
                    "grad_norm": float(np.mean([m.grad_norm for m in window])),
                    "mean_abs_td": float(np.mean([m.mean_abs_td for m in window])),
                    "buffer_size": len(replay),
                    "frames": replay.frames,
                }
                if not cfg.deterministic:
                    record["elapsed"] = round(time.time() - started, 3)
                if epoch % cfg.eval_every_epochs == 0 or epoch == cfg.epochs:
                    record["probe_scores"] = probe_scores(
                        board.get(), cfg, cfg.probe_games, seed=cfg.seed + epoch
                    )
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
                path = out / f"epoch_{epoch}.ckpt"
                hashes.append(
                    save_checkpoint(path, learner.online, vocab, learner.step_count, {**meta, "epoch": epoch})
                )
                checkpoints.append(str(path))
                if progress is not None:
                    progress(record)
    finally:
        stop.set()
    return TrainingResult(checkpoints, hashes, str(metrics_path), replay, learner)
