"""Dual-head recurrent Q-network over token sequences.

Observation text and each candidate action's text go through separate
small transformer encoders (sharing one token embedding table).  The
observation embedding is threaded through an LSTM cell across the turns of
one seat; candidate embeddings are fused with the LSTM output by
elementwise product, and a dueling value/advantage pair turns that into one
Q-value per candidate.  Any number of candidates works at every step.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from r3d2.textenc import PAD, Vocab

CHECKPOINT_MAGIC = b"R3D2CKPT\n"
CHECKPOINT_VERSION = 1


class NumericError(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    model_dim: int = 128
    attention_heads: int = 2
    ffn_dim: int = 512
    max_seq_len: int = 512
    init_mode: str = "random"
    encoder_update_period: int = 1
    action_recurrence: bool = False

    def __post_init__(self):
        if self.model_dim % self.attention_heads:
            raise ValueError("model_dim must be divisible by attention_heads")
        if self.encoder_update_period < 1:
            raise ValueError("encoder_update_period must be >= 1")
        if self.init_mode not in ("random", "import"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if min(self.vocab_size, self.layers, self.ffn_dim, self.max_seq_len) < 1:
            raise ValueError("encoder sizes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class EncoderLayer(nn.Module):
    """Post-norm transformer block (BERT layout)."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.heads = heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.attn_norm = nn.LayerNorm(dim)
        self.ffn_in = nn.Linear(dim, ffn_dim)
        self.ffn_out = nn.Linear(ffn_dim, dim)
        self.ffn_norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor, key_mask: Tensor) -> Tensor:
        n, length, dim = x.shape
        hd = dim // self.heads

        def split(t: Tensor) -> Tensor:
            return t.view(n, length, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        # softmax(q k^T / sqrt(hd)) v with PAD keys excluded
        attn = F.scaled_dot_product_attention(q, k, v, attn_mask=key_mask[:, None, None, :])
        x = self.attn_norm(x + self.out(attn.transpose(1, 2).reshape(n, length, dim)))
        return self.ffn_norm(x + self.ffn_out(F.gelu(self.ffn_in(x))))


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.positions = nn.Parameter(torch.zeros(cfg.max_seq_len, cfg.model_dim))
        self.embed_norm = nn.LayerNorm(cfg.model_dim)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.model_dim, cfg.attention_heads, cfg.ffn_dim) for _ in range(cfg.layers)
        )

    def forward(self, token_vectors: Tensor, mask: Tensor) -> Tensor:
        """(n, L, d) token vectors + (n, L) bool mask -> (n, d) masked mean."""
        length = token_vectors.shape[1]
        x = self.embed_norm(token_vectors + self.positions[:length])
        for layer in self.layers:
            x = layer(x, mask)
        weights = mask.to(x.dtype).unsqueeze(-1)
        return (x * weights).sum(1) / weights.sum(1)


def _mlp(dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 1))


class RecurrentState(NamedTuple):
    obs_h: Tensor
    obs_c: Tensor
    act_h: Tensor
    act_c: Tensor

    @classmethod
    def zeros(cls, batch: int, dim: int, dtype=torch.float32) -> "RecurrentState":
        return cls(*(torch.zeros(batch, dim, dtype=dtype) for _ in range(4)))

    def select(self, rows) -> "RecurrentState":
        return RecurrentState(*(t[rows] for t in self))


class QNet(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.model_dim
        self.token_embedding = nn.Embedding(cfg.vocab_size, dim)
        self.obs_encoder = TextEncoder(cfg)
        self.act_encoder = TextEncoder(cfg)
        self.obs_lstm = nn.LSTMCell(dim, dim)
        self.act_lstm = nn.LSTMCell(dim, dim) if cfg.action_recurrence else None
        self.value_head = _mlp(dim)
        self.advantage_head = _mlp(dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.token_embedding.weight.dtype

    def encoder_parameters(self) -> list[tuple[str, nn.Parameter]]:
        prefixes = ("token_embedding.", "obs_encoder.", "act_encoder.")
        return [(n, p) for n, p in self.named_parameters() if n.startswith(prefixes)]

    def encode(self, ids: Tensor, mask: Tensor, head: str = "obs") -> Tensor:
        mask = mask.bool()
        if ids.shape[1] > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[1]} > max_seq_len {self.cfg.max_seq_len}")
        if ids.shape[0] and not bool(mask.any(dim=1).all()):
            raise ValueError("cannot encode an all-PAD sequence")
        encoder = self.obs_encoder if head == "obs" else self.act_encoder
        return encoder(self.token_embedding(ids), mask)

    def candidate_features(self, cand_emb: Tensor, act_state: tuple[Tensor, Tensor]) -> Tensor:
        """Pass (n, K, d) candidate embeddings through the optional action recurrence."""
        if self.act_lstm is None:
            return cand_emb
        n, k, d = cand_emb.shape
        h, c = act_state
        h_out, _ = self.act_lstm(
            cand_emb.reshape(n * k, d),
            (h.repeat_interleave(k, 0), c.repeat_interleave(k, 0)),
        )
        return h_out.view(n, k, d)

    def dueling(self, obs_out: Tensor, cand: Tensor, cand_mask: Tensor) -> Tensor:
        """Q over candidates: V(obs) + A(obs*cand) - mean over legal A.  Masked slots get 0."""
        value = self.value_head(obs_out)  # (n, 1)
        adv = self.advantage_head(obs_out.unsqueeze(1) * cand).squeeze(-1)  # (n, K)
        weights = cand_mask.to(adv.dtype)
        mean_adv = (adv * weights).sum(1, keepdim=True) / weights.sum(1, keepdim=True)
        return (value + adv - mean_adv) * weights

    def step(
        self,
        obs_emb: Tensor,
        state: RecurrentState,
        cand_emb: Tensor,
        cand_mask: Tensor,
    ) -> tuple[Tensor, RecurrentState]:
        """One timestep for n independent seats.  Action recurrence is advanced separately."""
        h, c = self.obs_lstm(obs_emb, (state.obs_h, state.obs_c))
        cand = self.candidate_features(cand_emb, (state.act_h, state.act_c))
        q = self.dueling(h, cand, cand_mask)
        return q, RecurrentState(h, c, state.act_h, state.act_c)

    def advance_action_state(self, state: RecurrentState, chosen_emb: Tensor) -> RecurrentState:
        if self.act_lstm is None:
            return state
        h, c = self.act_lstm(chosen_emb, (state.act_h, state.act_c))
        return RecurrentState(state.obs_h, state.obs_c, h, c)

    def forward(self, batch: "EpisodeBatch") -> Tensor:
        return forward_episode(self, batch)


@dataclass
class EpisodeBatch:
    """Padded batch of per-seat episodes.

    Candidate actions are stored once in `action_ids` (a table of unique
    action token rows); `cand_index` points into it.
    """

    obs_ids: Tensor  # (B, T, L) int64
    obs_mask: Tensor  # (B, T, L) bool
    step_mask: Tensor  # (B, T) bool
    action_ids: Tensor  # (U, La) int64
    action_mask: Tensor  # (U, La) bool
    cand_index: Tensor  # (B, T, K) int64
    cand_mask: Tensor  # (B, T, K) bool
    chosen: Tensor  # (B, T) int64, index into that step's candidates
    rewards: Tensor  # (B, T)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.step_mask.shape)


def forward_episode(net: QNet, batch: EpisodeBatch) -> Tensor:
    """Q-values (B, T, K) with recurrent state threaded from zero at t=0.

    Pad steps and pad candidates come back as 0 and must be masked by the caller.
    """
    B, T = batch.step_mask.shape
    if batch.obs_ids.shape[:2] != (B, T) or batch.cand_index.shape[:2] != (B, T):
        raise ValueError("observation, candidate and step streams are misaligned")
    if batch.chosen.shape != (B, T) or batch.rewards.shape != (B, T):
        raise ValueError("chosen/reward streams are misaligned")
    dim = net.cfg.model_dim
    live = batch.step_mask.bool()

    obs_flat = batch.obs_ids[live]
    mask_flat = batch.obs_mask[live].bool()
    length = int(mask_flat.sum(1).max()) if len(mask_flat) else 1
    obs_emb = torch.zeros(B, T, dim, dtype=net.dtype)
    obs_emb[live] = net.encode(obs_flat[:, :length], mask_flat[:, :length], "obs")

    table = net.encode(batch.action_ids, batch.action_mask, "act")
    cand_emb = table[batch.cand_index]  # (B, T, K, d)
    cand_mask = batch.cand_mask.bool()

    state = RecurrentState.zeros(B, dim, net.dtype)
    chosen_emb = None
    if net.act_lstm is not None:
        chosen_emb = torch.gather(
            cand_emb, 2, batch.chosen.clamp(min=0)[:, :, None, None].expand(B, T, 1, dim)
        ).squeeze(2)
    qs = []
    for t in range(T):
        # keep the mean well defined on pad steps; their outputs are masked anyway
        step_cands = cand_mask[:, t] | ~live[:, t, None]
        q, state = net.step(obs_emb[:, t], state, cand_emb[:, t], step_cands)
        if chosen_emb is not None:
            state = net.advance_action_state(state, chosen_emb[:, t])
        qs.append(q * cand_mask[:, t])
    return torch.stack(qs, dim=1)


# -- parameters ---------------------------------------------------------------


def init_params(
    cfg: EncoderConfig,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    import_path: Optional[str] = None,
) -> QNet:
    """Seeded initialization: fan-in scaled uniform for linear maps, unit layer norms."""
    net = QNet(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in net.named_parameters():
            if "norm" in name:
                param.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.startswith("token_embedding") or name.endswith("positions"):
                param.normal_(0.0, 0.02, generator=gen)
            elif "lstm" in name:
                bound = 1.0 / math.sqrt(cfg.model_dim)
                param.uniform_(-bound, bound, generator=gen)
            elif name.endswith("weight"):
                bound = 1.0 / math.sqrt(param.shape[1])
                param.uniform_(-bound, bound, generator=gen)
            else:
                param.zero_()
    net = net.to(dtype)
    if cfg.init_mode == "import":
        if import_path is None:
            raise CheckpointError("init_mode 'import' needs a checkpoint path")
        arrays = read_checkpoint(import_path).arrays
        load_arrays(net, arrays)
    return net


def load_arrays(net: QNet, arrays: dict[str, np.ndarray]) -> None:
    params = dict(net.named_parameters())
    for name, param in params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing array {name!r}")
        if tuple(arrays[name].shape) != tuple(param.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(arrays[name].shape)}"
                f" vs model {tuple(param.shape)}"
            )
    extra = sorted(set(arrays) - set(params))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected arrays {extra}")
    with torch.no_grad():
        for name, param in params.items():
            param.copy_(torch.from_numpy(np.asarray(arrays[name])).to(param.dtype))


def sync_target(online: QNet, target: QNet) -> QNet:
    with torch.no_grad():
        for dst, src in zip(target.parameters(), online.parameters()):
            dst.copy_(src)
    return target


def make_target(online: QNet) -> QNet:
    target = copy.deepcopy(online)
    target.requires_grad_(False)
    return target


def gradient(
    net: QNet, loss: Tensor, step: int = 0, zero_grad: bool = True
) -> dict[str, Tensor]:
    """Backpropagate `loss` into `net`'s .grad fields and return them by name.

    Encoder gradients are zeroed unless `step` is a multiple of
    cfg.encoder_update_period.
    """
    if not torch.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss.item()}")
    if zero_grad:
        net.zero_grad(set_to_none=False)
    loss.backward()
    grads = {}
    for name, param in net.named_parameters():
        if param.grad is None:
            param.grad = torch.zeros_like(param)
        if not torch.isfinite(param.grad).all():
            raise NumericError(f"non-finite gradient in {name}")
        grads[name] = param.grad
    if step % net.cfg.encoder_update_period:
        for _, param in net.encoder_parameters():
            param.grad.zero_()
    return grads


def locate_nonfinite(net: QNet, batch: EpisodeBatch) -> Optional[str]:
    """Re-run a forward pass and name the first module whose output is not finite."""
    found: list[str] = []
    handles = []

    def hook(name):
        def check(_module, _inputs, output):
            outs = output if isinstance(output, tuple) else (output,)
            if not found and any(not torch.isfinite(o).all() for o in outs if isinstance(o, Tensor)):
                found.append(name)

        return check

    for name, module in net.named_modules():
        if name:
            handles.append(module.register_forward_hook(hook(name)))
    try:
        with torch.no_grad():
            forward_episode(net, batch)
    finally:
        for h in handles:
            h.remove()
    return found[0] if found else None


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    vocab: Vocab
    step: int
    arrays: dict[str, np.ndarray]
    meta: dict

    def build(self, dtype: torch.dtype = torch.float32) -> QNet:
        net = QNet(self.encoder_config).to(dtype)
        load_arrays(net, self.arrays)
        net.requires_grad_(False)
        return net


def checkpoint_bytes(net: QNet, vocab: Vocab, step: int, meta: Optional[dict] = None) -> bytes:
    arrays = [(n, p.detach().cpu().numpy().astype("<f4")) for n, p in net.named_parameters()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_config": asdict(net.cfg),
        "vocab_sha256": vocab.sha256,
        "vocab": vocab.to_text(),
        "step": int(step),
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    for _, a in arrays:
        buf.write(a.tobytes())
    return buf.getvalue()


def save_checkpoint(path, net: QNet, vocab: Vocab, step: int, meta: Optional[dict] = None) -> str:
    data = checkpoint_bytes(net, vocab, step, meta)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<IQ", data, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(data[pos : pos + head_len])
    pos += head_len
    vocab = Vocab.from_text(header["vocab"])
    if vocab.sha256 != header["vocab_sha256"]:
        raise CheckpointError(f"{path}: vocab hash mismatch")
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
        pos += 4 * count
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after arrays")
    return Checkpoint(
        encoder_config=EncoderConfig.from_dict(header["encoder_config"]),
        vocab=vocab,
        step=header["step"],
        arrays=arrays,
        meta=header["meta"],
    )
