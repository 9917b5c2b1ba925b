"""Toy diffusion transformer over mixed token streams.

Tokens come from three streams (latent, depth, reference) that share one
positional-embedding table: the embedding is a pure function of the
(frame, row, col) ids, so a reference token placed at frame j's coordinates
gets bitwise the same embedding as frame j's latent and depth tokens. The
streams are disambiguated by three separate input projections instead
(a learned modality embedding would work equally; see BackboneConfig).

Attention is full and bidirectional: every token attends to every token.
Timestep conditioning enters through adaptive layer-norm scale/shift/gate
parameters produced per block from a sinusoidal embedding of t.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

__all__ = [
    "STREAM_LATENT",
    "STREAM_DEPTH",
    "STREAM_REFERENCE",
    "BackboneConfig",
    "TokenSequence",
    "cat_sequences",
    "patchify",
    "unpatchify",
    "build_pe",
    "DitBackbone",
    "LoraConfig",
    "LoraAdapter",
    "LoraLinear",
    "apply_lora",
    "merge_lora",
    "lora_param_count",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_hash",
    "state_checksum",
]

STREAM_LATENT = 0
STREAM_DEPTH = 1
STREAM_REFERENCE = 2

_ATTN_TARGETS = {"query": "q", "key": "k", "value": "v", "output": "o"}

CHECKPOINT_FORMAT = "tinker-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    patch_size: int = 4
    max_frames: int = 32
    max_grid: int = 16
    in_channels: int = 3
    mlp_ratio: int = 4
    max_tokens: int = 4096
    # False gives standard (non-zero) init on the adaptive-norm projections;
    # useful when an untrained model must already mix information.
    zero_init_gates: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("d_model", "n_layers", "n_heads", "patch_size", "max_frames", "max_grid"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels


@dataclass
class TokenSequence:
    """Token stream: raw patch features plus ids, stream tags, and loss mask.

    embeddings: (L, patch_dim) float32 patch features (pre-projection)
    position_ids: (L, 3) long, columns (frame, row, col)
    stream_tags: (L,) long over {latent, depth, reference}
    loss_mask: (L,) bool, true only on latent tokens
    """

    embeddings: Tensor
    position_ids: Tensor
    stream_tags: Tensor
    loss_mask: Tensor

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if not (self.position_ids.shape == (n, 3) and self.stream_tags.shape == (n,) and self.loss_mask.shape == (n,)):
            raise ValueError("token arrays must share the sequence length")
        if self.loss_mask.dtype != torch.bool:
            raise ValueError("loss_mask must be boolean")
        if bool((self.loss_mask & (self.stream_tags != STREAM_LATENT)).any()):
            raise ValueError("loss_mask may be true only on latent tokens")

    def __len__(self) -> int:
        return int(self.embeddings.shape[0])


def cat_sequences(fragments: list[TokenSequence]) -> TokenSequence:
    return TokenSequence(
        embeddings=torch.cat([f.embeddings for f in fragments]),
        position_ids=torch.cat([f.position_ids for f in fragments]),
        stream_tags=torch.cat([f.stream_tags for f in fragments]),
        loss_mask=torch.cat([f.loss_mask for f in fragments]),
    )


def patchify(
    frames,
    patch_size: int,
    stream_tag: int,
    frame_indices=None,
    loss_mask: bool = False,
) -> TokenSequence:
    """Cut (F,H,W,C) frames into non-overlapping patch tokens.

    position_ids are (frame, patch_row, patch_col); frame defaults to
    0..F-1 but can be overridden so reference copies of frame j carry
    frame j's ids.
    """
    frames = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    if frames.ndim == 3:
        frames = frames.unsqueeze(0)
    n_frames, h, w, c = frames.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image size {w}x{h} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size

    patches = frames.reshape(n_frames, gh, patch_size, gw, patch_size, c)
    patches = patches.permute(0, 1, 3, 2, 4, 5).reshape(n_frames * gh * gw, -1)

    if frame_indices is None:
        frame_indices = range(n_frames)
    frame_ids = torch.as_tensor(list(frame_indices), dtype=torch.long)
    if frame_ids.shape[0] != n_frames:
        raise ValueError("frame_indices length must match the number of frames")
    rows = torch.arange(gh, dtype=torch.long)
    cols = torch.arange(gw, dtype=torch.long)
    ids = torch.stack(
        [
            frame_ids.repeat_interleave(gh * gw),
            rows.repeat_interleave(gw).repeat(n_frames),
            cols.repeat(gh * n_frames),
        ],
        dim=1,
    )
    n_tokens = n_frames * gh * gw
    return TokenSequence(
        embeddings=patches,
        position_ids=ids,
        stream_tags=torch.full((n_tokens,), stream_tag, dtype=torch.long),
        loss_mask=torch.full((n_tokens,), bool(loss_mask) and stream_tag == STREAM_LATENT),
    )


def unpatchify(
    embeddings: Tensor,
    n_frames: int,
    image_size: tuple[int, int],
    patch_size: int,
    channels: int = 3,
) -> Tensor:
    """Inverse of patchify's layout: (F*gh*gw, p*p*C) -> (F,H,W,C)."""
    w, h = image_size
    gh, gw = h // patch_size, w // patch_size
    x = embeddings.reshape(n_frames, gh, gw, patch_size, patch_size, channels)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(n_frames, h, w, channels)


def _axis_sinusoid(ids: Tensor, dim: int) -> Tensor:
    """Classic interleaved sin/cos table over integer ids, any dim >= 1."""
    half = (dim + 1) // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = ids.to(torch.float64)[:, None] * freqs[None, :]
    table = torch.zeros(ids.shape[0], dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angles[:, : (dim + 1) // 2])
    table[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return table.to(torch.float32)


def build_pe(position_ids: Tensor, d_model: int, max_frames: int, max_grid: int) -> Tensor:
    """Factorized sinusoidal embedding over (frame, row, col).

    A deterministic function of the ids alone: equal ids give bitwise equal
    rows, and the stream tag never enters.
    """
    ids = torch.as_tensor(position_ids, dtype=torch.long)
    if ids.ndim != 2 or ids.shape[1] != 3:
        raise ValueError("position_ids must have shape (L, 3)")
    if torch.any(ids < 0):
        raise ValueError("position ids must be non-negative")
    if torch.any(ids[:, 0] >= max_frames) or torch.any(ids[:, 1:] >= max_grid):
        raise ValueError(
            f"position ids exceed configured maxima (max_frames={max_frames}, max_grid={max_grid})"
        )
    d_axis = d_model // 3
    d_frame = d_model - 2 * d_axis
    return torch.cat(
        [
            _axis_sinusoid(ids[:, 0], d_frame),
            _axis_sinusoid(ids[:, 1], d_axis),
            _axis_sinusoid(ids[:, 2], d_axis),
        ],
        dim=1,
    )


def _timestep_embedding(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    angles = t.reshape(1).to(torch.float32) * 1000.0 * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class _Attention(nn.Module):
    """Full bidirectional attention, written out explicitly.

    The plain softmax path is markedly faster on CPU than the fused
    scaled_dot_product_attention fallback, and the explicit q/k/v/o linears
    are the LoRA attachment points.
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, x: Tensor) -> Tensor:
        length = x.shape[0]

        def heads(proj):
            return proj(x).reshape(length, self.n_heads, self.head_dim).transpose(0, 1)

        scores = heads(self.q) @ heads(self.k).transpose(-1, -2) / math.sqrt(self.head_dim)
        out = F.softmax(scores, dim=-1) @ heads(self.v)
        return self.o(out.transpose(0, 1).reshape(length, -1))


class _Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.attn = _Attention(d, cfg.n_heads)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(d, cfg.mlp_ratio * d),
            nn.GELU(),
            nn.Linear(cfg.mlp_ratio * d, d),
        )
        self.ada = nn.Linear(d, 6 * d)
        if cfg.zero_init_gates:
            nn.init.zeros_(self.ada.weight)
            nn.init.zeros_(self.ada.bias)

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(t_emb).chunk(6)
        h = self.norm1(x) * (1.0 + scale1) + shift1
        x = x + gate1 * self.attn(h)
        h = self.norm2(x) * (1.0 + scale2) + shift2
        return x + gate2 * self.mlp(h)


class DitBackbone(nn.Module):
    """Per-token velocity predictor over a mixed-stream TokenSequence.

    There is deliberately no text pathway: conditioning is carried entirely
    by the depth and reference token streams plus the timestep.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.input_proj = nn.ModuleList(
            [nn.Linear(config.patch_dim, d) for _ in range(3)]
        )
        self.t_mlp = nn.Sequential(nn.Linear(256, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList([_Block(config) for _ in range(config.n_layers)])
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.final_ada = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, config.patch_dim)
        if config.zero_init_gates:
            nn.init.zeros_(self.final_ada.weight)
            nn.init.zeros_(self.final_ada.bias)
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, seq: TokenSequence, t) -> Tensor:
        cfg = self.config
        if len(seq) > cfg.max_tokens:
            raise ValueError(f"sequence length {len(seq)} exceeds max_tokens {cfg.max_tokens}")
        if seq.embeddings.shape[1] != cfg.patch_dim:
            raise ValueError(
                f"token feature dim {seq.embeddings.shape[1]} != configured patch_dim {cfg.patch_dim}"
            )
        t = torch.as_tensor(t, dtype=torch.float32)

        x = torch.zeros(len(seq), cfg.d_model)
        for tag in (STREAM_LATENT, STREAM_DEPTH, STREAM_REFERENCE):
            sel = (seq.stream_tags == tag).to(torch.float32).unsqueeze(1)
            x = x + sel * self.input_proj[tag](seq.embeddings)
        x = x + build_pe(seq.position_ids, cfg.d_model, cfg.max_frames, cfg.max_grid)

        t_emb = self.t_mlp(_timestep_embedding(t, 256))
        for block in self.blocks:
            x = block(x, t_emb)
        shift, scale = self.final_ada(t_emb).chunk(2)
        x = self.final_norm(x) * (1.0 + scale) + shift
        return self.head(x)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 128
    alpha: float | None = None  # defaults to rank, i.e. scale 1
    dropout: float = 0.05
    targets: tuple[str, ...] = ("query", "key", "value", "output")

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        unknown = set(self.targets) - set(_ATTN_TARGETS)
        if unknown:
            raise ValueError(f"unknown LoRA targets: {sorted(unknown)}")

    @property
    def scale(self) -> float:
        alpha = self.rank if self.alpha is None else self.alpha
        return alpha / self.rank


class LoraAdapter(nn.Module):
    """Low-rank (A, B) pairs for every targeted projection in a backbone.

    B starts at zero, so a freshly applied adapter leaves the base model's
    function unchanged.
    """

    def __init__(self, config: LoraConfig, shapes: dict[str, tuple[int, int]], seed: int = 0):
        super().__init__()
        self.lora_config = config
        gen = torch.Generator().manual_seed(seed)
        self.a_mats = nn.ParameterDict()
        self.b_mats = nn.ParameterDict()
        for key, (d_out, d_in) in shapes.items():
            pkey = key.replace(".", "/")
            a = torch.empty(config.rank, d_in)
            nn.init.kaiming_uniform_(a, a=math.sqrt(5), generator=gen)
            self.a_mats[pkey] = nn.Parameter(a)
            self.b_mats[pkey] = nn.Parameter(torch.zeros(d_out, config.rank))

    @classmethod
    def init_for(cls, backbone: DitBackbone, config: LoraConfig, seed: int = 0) -> "LoraAdapter":
        shapes = {}
        for key, linear in _target_linears(backbone, config.targets).items():
            shapes[key] = (linear.out_features, linear.in_features)
        return cls(config, shapes, seed=seed)

    def pair(self, key: str) -> tuple[Tensor, Tensor]:
        pkey = key.replace(".", "/")
        return self.a_mats[pkey], self.b_mats[pkey]

    def keys(self) -> list[str]:
        return [k.replace("/", ".") for k in self.a_mats.keys()]


def _target_linears(backbone: DitBackbone, targets) -> dict[str, nn.Linear]:
    found = {}
    for i, block in enumerate(backbone.blocks):
        for target in targets:
            attr = _ATTN_TARGETS[target]
            found[f"blocks.{i}.attn.{attr}"] = getattr(block.attn, attr)
    return found


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, a: Tensor, b: Tensor, scale: float, dropout: float):
        super().__init__()
        self.base = base
        self.a = a
        self.b = b
        self.scale = scale
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.base(x) + self.scale * F.linear(F.linear(self.drop(x), self.a), self.b)


def apply_lora(backbone: DitBackbone, adapter: LoraAdapter) -> DitBackbone:
    """Wrap the targeted projections of a deep copy of the backbone.

    The copy's base parameters are frozen; the adapter's A/B parameters are
    shared with the returned model, so optimizing adapter.parameters()
    trains it. The original backbone is untouched.
    """
    adapted = copy.deepcopy(backbone)
    for p in adapted.parameters():
        p.requires_grad_(False)
    cfg = adapter.lora_config
    for key in adapter.keys():
        block_idx = int(key.split(".")[1])
        attr = key.split(".")[-1]
        attn = adapted.blocks[block_idx].attn
        base = getattr(attn, attr)
        if not isinstance(base, nn.Linear):
            raise ValueError(f"LoRA target {key} is not a plain linear layer")
        a, b = adapter.pair(key)
        if a.shape[1] != base.in_features or b.shape[0] != base.out_features:
            raise ValueError(f"adapter shapes do not match target {key}")
        setattr(attn, attr, LoraLinear(base, a, b, cfg.scale, cfg.dropout))
    return adapted


def merge_lora(backbone: DitBackbone, adapter: LoraAdapter) -> DitBackbone:
    """Fold scale * B @ A into the targeted weights of a fresh plain backbone."""
    merged = copy.deepcopy(backbone)
    cfg = adapter.lora_config
    for key in adapter.keys():
        block_idx = int(key.split(".")[1])
        attr = key.split(".")[-1]
        base = getattr(merged.blocks[block_idx].attn, attr)
        a, b = adapter.pair(key)
        with torch.no_grad():
            base.weight += cfg.scale * (b @ a)
    return merged


def lora_param_count(adapter: LoraAdapter) -> int:
    return sum(p.numel() for p in adapter.parameters())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, state: dict[str, Tensor], meta: dict | None = None) -> None:
    """Version header line (JSON) followed by raw little-endian float32 data."""
    entries = []
    blobs = []
    for name in sorted(state.keys()):
        tensor = state[name].detach().cpu().to(torch.float32)
        entries.append({"name": name, "shape": list(tensor.shape)})
        blobs.append(tensor.numpy().astype("<f4").tobytes())
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "params": entries,
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a recognized checkpoint")
        state = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 4)
            arr = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            state[entry["name"]] = torch.from_numpy(arr)
    return state, header["meta"]


def checkpoint_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_lora(path: str | Path, adapter: LoraAdapter, base_checkpoint: str | Path) -> None:
    """Adapter checkpoint referencing the base model file by content hash."""
    cfg = adapter.lora_config
    save_checkpoint(
        path,
        dict(adapter.state_dict()),
        meta={
            "kind": "lora-adapter",
            "rank": cfg.rank,
            "alpha": cfg.alpha,
            "dropout": cfg.dropout,
            "targets": list(cfg.targets),
            "base_hash": checkpoint_hash(base_checkpoint),
        },
    )


def load_lora(path: str | Path) -> tuple[LoraAdapter, dict]:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "lora-adapter":
        raise ValueError(f"{path} is not a LoRA adapter checkpoint")
    config = LoraConfig(
        rank=meta["rank"],
        alpha=meta["alpha"],
        dropout=meta["dropout"],
        targets=tuple(meta["targets"]),
    )
    shapes = {}
    for key, tensor in state.items():
        if key.startswith("a_mats."):
            pkey = key[len("a_mats."):]
            shapes[pkey.replace("/", ".")] = (state["b_mats." + pkey].shape[0], tensor.shape[1])
    adapter = LoraAdapter(config, shapes)
    adapter.load_state_dict(state)
    return adapter, meta


def state_checksum(module: nn.Module) -> str:
    """Order-stable digest of every parameter's bytes; detects any drift."""
    digest = hashlib.sha256()
    for name, param in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return digest.hexdigest()
