"""Depth-conditioned scene completion: example assembly, training, inference.

A completion example concatenates three token streams along the sequence:
noised latent tokens for every frame, clean depth tokens for every frame,
and clean copies of the reference frames carrying the *same* position ids
as their latent counterparts. The loss is masked to the latent tokens.

Training draws window crops of varying length (re-indexed from frame 0) and
seeded photometric color jitter applied consistently to targets and
references. Both choices keep the references load-bearing: depth alone never
determines color, so the model must read them, which is what lets a model
trained purely on reconstruction complete *edited* references later.

Pixels live in [0,1] at the module boundary and are mapped to [-1,1]
internally so the data scale matches the unit-normal noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from . import synth_world
from .seeding import seed_for
from .dit_backbone import (
    STREAM_DEPTH,
    STREAM_LATENT,
    STREAM_REFERENCE,
    BackboneConfig,
    DitBackbone,
    TokenSequence,
    cat_sequences,
    patchify,
    unpatchify,
)
from .flow_core import euler_sample, fm_loss, interpolate, sample_t, velocity_target
from .synth_world import Scene, Trajectory, ViewFrame

__all__ = [
    "CompletionExample",
    "CompletionTrainConfig",
    "SceneSequence",
    "select_refs",
    "normalize_depth",
    "build_training_example",
    "train_step",
    "build_scene_corpus",
    "train_completion",
    "complete",
    "random_color_jitter",
]

MAX_REFS = 3


def to_signed(x: np.ndarray | Tensor) -> Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.float32) * 2.0 - 1.0


def from_signed(x: Tensor) -> np.ndarray:
    return ((x + 1.0) * 0.5).clamp(0.0, 1.0).numpy().astype(np.float32)


@dataclass
class CompletionExample:
    """One training tuple; target_velocity is zero outside latent positions."""

    token_seq: TokenSequence
    t: float
    target_velocity: Tensor
    ref_indices: list[int]
    n_frames: int
    image_size: tuple[int, int]
    patch_size: int

    def __post_init__(self):
        if 0 not in self.ref_indices:
            raise ValueError("reference indices must contain frame 0")
        if not 1 <= len(self.ref_indices) <= MAX_REFS:
            raise ValueError(f"need 1..{MAX_REFS} references, got {len(self.ref_indices)}")
        latent = self.token_seq.stream_tags == STREAM_LATENT
        if not torch.equal(self.token_seq.loss_mask, latent):
            raise ValueError("loss mask must cover exactly the latent tokens")
        depth_frames = self.token_seq.position_ids[self.token_seq.stream_tags == STREAM_DEPTH, 0]
        if set(depth_frames.tolist()) != set(range(self.n_frames)):
            raise ValueError("depth tokens must be present for every frame")


def select_refs(n_frames: int, seed: int) -> list[int]:
    """Frame 0 plus 0-2 extra frames drawn without replacement, sorted."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    n_extra = min(int(rng.integers(0, 3)), n_frames - 1)
    extras = rng.choice(np.arange(1, n_frames), size=n_extra, replace=False) if n_extra else []
    return sorted([0] + [int(e) for e in extras])


def normalize_depth(depths: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Per-sequence min/max scaling to [0,1]; (dmin, dmax) invert it exactly."""
    depths = np.asarray(depths, dtype=np.float32)
    dmin, dmax = float(depths.min()), float(depths.max())
    if dmax - dmin < 1e-12:
        return np.zeros_like(depths), dmin, dmax
    return (depths - dmin) / (dmax - dmin), dmin, dmax


def denormalize_depth(norm: np.ndarray, dmin: float, dmax: float) -> np.ndarray:
    return np.asarray(norm, dtype=np.float32) * (dmax - dmin) + dmin


def _depth_tokens(depths: np.ndarray, patch_size: int) -> TokenSequence:
    norm, _, _ = normalize_depth(depths)
    depth_rgb = np.repeat(norm[..., None], 3, axis=-1)
    return patchify(to_signed(depth_rgb), patch_size, STREAM_DEPTH)


def build_training_example(
    frames: np.ndarray,
    depths: np.ndarray,
    ref_indices: list[int],
    eps: Tensor,
    t: float,
    patch_size: int,
) -> CompletionExample:
    """Assemble [noised latents | clean depths | clean references].

    Reference tokens reuse their source frames' position ids, so their
    positional embeddings match the corresponding latent and depth tokens
    exactly.
    """
    frames = np.asarray(frames, dtype=np.float32)
    depths = np.asarray(depths, dtype=np.float32)
    if frames.ndim != 4 or depths.shape != frames.shape[:3]:
        raise ValueError("frames must be (F,H,W,3) with aligned (F,H,W) depths")
    n_frames = frames.shape[0]
    if any(not 0 <= r < n_frames for r in ref_indices):
        raise ValueError(f"reference indices {ref_indices} out of range for {n_frames} frames")

    x0 = to_signed(frames)
    eps = torch.as_tensor(eps, dtype=torch.float32)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(x0.shape)}")

    latent = patchify(interpolate(x0, eps, float(t)), patch_size, STREAM_LATENT, loss_mask=True)
    depth = _depth_tokens(depths, patch_size)
    refs = patchify(x0[ref_indices], patch_size, STREAM_REFERENCE, frame_indices=ref_indices)
    seq = cat_sequences([latent, depth, refs])

    target = torch.zeros(len(seq), latent.embeddings.shape[1])
    n_latent = len(latent)
    target[:n_latent] = patchify(velocity_target(x0, eps), patch_size, STREAM_LATENT).embeddings

    h, w = frames.shape[1], frames.shape[2]
    return CompletionExample(
        token_seq=seq,
        t=float(t),
        target_velocity=target,
        ref_indices=list(ref_indices),
        n_frames=n_frames,
        image_size=(w, h),
        patch_size=patch_size,
    )


def train_step(model: DitBackbone, batch: list[CompletionExample], optimizer) -> float:
    """One optimizer step on the masked flow loss; returns the pre-step loss.

    Examples backpropagate one at a time (gradients accumulate to the batch
    mean), so sequences of different lengths batch together and each graph is
    freed before the next forward.
    """
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for ex in batch:
        pred = model(ex.token_seq, ex.t)
        loss = fm_loss(pred, ex.target_velocity, ex.token_seq.loss_mask[:, None])
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite completion loss {loss.item()} "
                f"(batch of {len(batch)}, t values {[ex.t for ex in batch]})"
            )
        (loss / len(batch)).backward()
        total += float(loss.item())
    optimizer.step()
    return total / len(batch)


# ---------------------------------------------------------------------------
# Desk-scale training corpus and loop
# ---------------------------------------------------------------------------


@dataclass
class SceneSequence:
    scene: Scene
    trajectory: Trajectory
    frames: list[ViewFrame]

    @property
    def rgb(self) -> np.ndarray:
        return np.stack([f.rgb for f in self.frames])

    @property
    def depth(self) -> np.ndarray:
        return np.stack([f.depth for f in self.frames])


@dataclass
class CompletionTrainConfig:
    n_scenes: int = 8
    n_frames: int = 16
    image_size: tuple[int, int] = (32, 32)
    n_objects: int = 3
    patch_size: int = 4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    steps: int = 3000
    learning_rate: float = 2e-5
    lr_schedule: str = "constant"  # "constant" or "cosine" (warmup + decay to 10%)
    warmup_steps: int = 0
    batch_size: int = 2
    seed: int = 0
    # example sampler: window crops plus photometric jitter
    min_window: int = 4
    max_window: int = 8
    full_sequence_every: int = 4
    identity_probability: float = 0.25
    # bias applied only on full-length steps: probability that no extra
    # references are drawn, so the single-reference full-sequence case
    # (the hardest configuration) is trained often enough
    full_single_ref_probability: float = 0.0

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


def make_trajectory(rng: np.random.Generator) -> Trajectory:
    span = rng.uniform(0.35, 0.6)
    dy = rng.uniform(-0.08, 0.08)
    return Trajectory(start=(-span / 2, -dy / 2, 0.0), end=(span / 2, dy / 2, 0.0))


def build_scene_corpus(
    seed: int,
    n_scenes: int,
    n_frames: int,
    image_size: tuple[int, int],
    n_objects: int = 3,
) -> list[SceneSequence]:
    corpus = []
    for i in range(n_scenes):
        scene = synth_world.make_scene(seed_for(seed, f"corpus/scene/{i}"), n_objects, image_size)
        rng = np.random.default_rng(seed_for(seed, f"corpus/trajectory/{i}"))
        trajectory = make_trajectory(rng)
        frames = synth_world.render_orbit(scene, n_frames, trajectory, image_size)
        corpus.append(SceneSequence(scene=scene, trajectory=trajectory, frames=frames))
    return corpus


def random_color_jitter(rng: np.random.Generator) -> synth_world.EditSpec:
    """Global diagonal color transform with offsets; the training edit family."""
    scale = rng.uniform(0.35, 1.0, size=3)
    offset = rng.uniform(0.0, 0.45, size=3)
    return synth_world.EditSpec(
        kind=synth_world.EDIT_GLOBAL,
        color_matrix=tuple(map(tuple, np.diag(scale))),
        color_offset=tuple(offset),
    )


def _sample_example(
    corpus: list[SceneSequence],
    cfg: CompletionTrainConfig,
    step: int,
    item: int,
) -> CompletionExample:
    base = seed_for(cfg.seed, f"train-completion/step/{step}/item/{item}")
    rng = np.random.default_rng(base)
    seq = corpus[int(rng.integers(len(corpus)))]
    rgb, depth = seq.rgb, seq.depth

    if rng.random() >= cfg.identity_probability:
        edit = random_color_jitter(rng)
        rgb = np.stack([synth_world.apply_edit_image(f, edit) for f in rgb])

    full_length = bool(cfg.full_sequence_every) and step % cfg.full_sequence_every == 0
    if full_length:
        length = cfg.n_frames
        start = 0
    else:
        length = int(rng.integers(cfg.min_window, min(cfg.max_window, cfg.n_frames) + 1))
        start = int(rng.integers(0, cfg.n_frames - length + 1))
    rgb, depth = rgb[start : start + length], depth[start : start + length]

    if full_length and rng.random() < cfg.full_single_ref_probability:
        refs = [0]
    else:
        refs = select_refs(length, seed_for(base, "refs"))
    gen = torch.Generator().manual_seed(seed_for(base, "eps"))
    eps = torch.randn(rgb.shape, generator=gen)
    t = float(sample_t(1, seed_for(base, "t"))[0])
    return build_training_example(rgb, depth, refs, eps, t, cfg.patch_size)


def make_lr_schedule(optimizer, schedule: str, warmup_steps: int, total_steps: int):
    """Warmup plus either a flat line or a cosine decay to 10% of peak."""
    import math

    def factor(step: int) -> float:
        if warmup_steps and step < warmup_steps:
            return (step + 1) / warmup_steps
        if schedule == "constant":
            return 1.0
        progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
        return 0.1 + 0.45 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def train_completion(
    cfg: CompletionTrainConfig,
    corpus: list[SceneSequence] | None = None,
    log_every: int = 0,
) -> tuple[DitBackbone, list[float]]:
    """Overfit the toy backbone on the synthetic corpus; returns loss history."""
    torch.manual_seed(seed_for(cfg.seed, "train-completion/init"))
    model = DitBackbone(cfg.backbone)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=0.0)
    scheduler = make_lr_schedule(optimizer, cfg.lr_schedule, cfg.warmup_steps, cfg.steps)
    if corpus is None:
        corpus = build_scene_corpus(
            cfg.seed, cfg.n_scenes, cfg.n_frames, cfg.image_size, cfg.n_objects
        )
    history = []
    for step in range(cfg.steps):
        batch = [_sample_example(corpus, cfg, step, i) for i in range(cfg.batch_size)]
        history.append(train_step(model, batch, optimizer))
        scheduler.step()
        if log_every and (step + 1) % log_every == 0:
            window = history[-log_every:]
            print(f"step {step + 1}/{cfg.steps} loss {sum(window) / len(window):.5f}", flush=True)
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def complete(
    model: DitBackbone,
    depth_sequence: np.ndarray,
    ref_views: dict[int, np.ndarray],
    n_steps: int,
    seed: int,
) -> np.ndarray:
    """Generate every frame of a sequence from depth plus 1-3 reference views.

    Frames are indexed locally 0..F-1 (callers slice windows and re-key their
    references accordingly). The provided reference images overwrite the
    generated frames at their indices, as a hard constraint.
    """
    depth_sequence = np.asarray(depth_sequence, dtype=np.float32)
    if depth_sequence.ndim != 3:
        raise ValueError("depth_sequence must be (F,H,W)")
    n_frames, h, w = depth_sequence.shape
    if not 1 <= len(ref_views) <= MAX_REFS:
        raise ValueError(f"need 1..{MAX_REFS} reference views, got {len(ref_views)}")
    for idx, img in ref_views.items():
        if not 0 <= idx < n_frames:
            raise ValueError(f"reference index {idx} outside 0..{n_frames - 1}")
        if np.asarray(img).shape != (h, w, 3):
            raise ValueError(f"reference {idx} has shape {np.asarray(img).shape}, want {(h, w, 3)}")

    patch = model.config.patch_size
    depth_frag = _depth_tokens(depth_sequence, patch)
    ref_indices = sorted(ref_views.keys())
    ref_stack = np.stack([np.asarray(ref_views[i], dtype=np.float32) for i in ref_indices])
    ref_frag = patchify(to_signed(ref_stack), patch, STREAM_REFERENCE, frame_indices=ref_indices)
    n_latent = n_frames * (h // patch) * (w // patch)

    def velocity_fn(x: Tensor, t: float, _cond) -> Tensor:
        latent_frag = patchify(x, patch, STREAM_LATENT, loss_mask=True)
        seq = cat_sequences([latent_frag, depth_frag, ref_frag])
        out = model(seq, t)
        return unpatchify(out[:n_latent], n_frames, (w, h), patch)

    model.eval()
    with torch.no_grad():
        x0_hat = euler_sample(velocity_fn, (n_frames, h, w, 3), None, n_steps, seed)
    frames = from_signed(x0_hat)
    for idx in ref_indices:
        frames[idx] = np.asarray(ref_views[idx], dtype=np.float32)
    return frames
