"""Reference-guided editing: example construction, LoRA training, inference.

A referring example pairs an input concat [unedited view A | edited view B]
with a target concat [edited view A | edited view B]: the model learns to
carry the edit shown on the right half over to the left half. Only the left
half differs between input and target; the right halves are bit-identical.

The toy editor conditions on the clean input concat through a parallel clean
token stream that shares position ids with the noised target stream, the
same mechanism the completion model uses. Prompts ride along as metadata;
the toy model itself is prompt-free and the prompt pathway exists only so a
stronger backend can implement the same interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch
from torch import Tensor

from . import synth_world
from .completion_model import build_scene_corpus, from_signed, to_signed
from .dit_backbone import (
    STREAM_LATENT,
    STREAM_REFERENCE,
    BackboneConfig,
    DitBackbone,
    LoraAdapter,
    LoraConfig,
    TokenSequence,
    apply_lora,
    cat_sequences,
    patchify,
    unpatchify,
)
from .embed_filter import hconcat_images
from .flow_core import euler_sample, fm_loss, interpolate, sample_t, velocity_target
from .seeding import seed_for

__all__ = [
    "ReferringExample",
    "ReferringTrainConfig",
    "ReferringBackend",
    "OracleReferringEditor",
    "ToyReferringBackend",
    "build_referring_example",
    "referring_train_step",
    "build_referring_pool",
    "train_referring",
    "referring_edit",
    "family_edit",
]


@dataclass
class ReferringExample:
    input_image: np.ndarray  # hconcat(view_a, edited_b)
    target_image: np.ndarray  # hconcat(edited_a, edited_b)
    prompt: str = ""

    def __post_init__(self):
        if self.input_image.shape != self.target_image.shape:
            raise ValueError("input and target must share dimensions")
        mid = self.input_image.shape[1] // 2
        if not np.array_equal(self.input_image[:, mid:], self.target_image[:, mid:]):
            raise ValueError("right halves must be pixel-identical")


def build_referring_example(
    ia: np.ndarray,
    ia_edited: np.ndarray,
    ib_edited: np.ndarray,
    prompt: str = "",
) -> ReferringExample:
    for name, img in (("ia", ia), ("ia_edited", ia_edited), ("ib_edited", ib_edited)):
        if np.asarray(img).size == 0:
            raise ValueError(f"{name} is empty")
    return ReferringExample(
        input_image=hconcat_images(ia, ib_edited),
        target_image=hconcat_images(ia_edited, ib_edited),
        prompt=prompt,
    )


def _editor_sequence(latent_state: Tensor, cond_signed: Tensor, patch: int) -> TokenSequence:
    """[noised target tokens | clean conditioning tokens], shared frame-0 ids."""
    latent = patchify(latent_state, patch, STREAM_LATENT, loss_mask=True)
    cond = patchify(cond_signed, patch, STREAM_REFERENCE)
    return cat_sequences([latent, cond])


def _left_half_mask(seq: TokenSequence, width: int, patch: int) -> Tensor:
    latent = seq.stream_tags == STREAM_LATENT
    left = seq.position_ids[:, 2] < (width // 2) // patch
    return latent & left


def referring_train_step(
    lora_model: DitBackbone,
    batch: list[ReferringExample],
    t,
    eps,
    optimizer,
    mask_reference_half: bool = False,
) -> float:
    """One adapter update on the velocity loss over the target concat.

    The loss covers every target position by default; mask_reference_half
    restricts it to the left (propagated) half. Only parameters handed to the
    optimizer move, which for a LoRA-adapted model is the A/B matrices.
    """
    patch = lora_model.config.patch_size
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for i, example in enumerate(batch):
        x0 = to_signed(example.target_image)
        cond = to_signed(example.input_image)
        e = torch.as_tensor(eps[i], dtype=torch.float32)
        if e.shape != x0.shape:
            raise ValueError("eps entries must match the target shape")
        ti = float(t[i])
        seq = _editor_sequence(interpolate(x0, e, ti), cond, patch)
        target = torch.zeros(len(seq), seq.embeddings.shape[1])
        n_latent = (seq.stream_tags == STREAM_LATENT).sum()
        target[:n_latent] = patchify(velocity_target(x0, e), patch, STREAM_LATENT).embeddings
        mask = seq.loss_mask
        if mask_reference_half:
            mask = _left_half_mask(seq, example.target_image.shape[1], patch)
        loss = fm_loss(lora_model(seq, ti), target, mask[:, None])
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite referring loss {loss.item()}")
        (loss / len(batch)).backward()
        total += float(loss.item())
    optimizer.step()
    return total / len(batch)


# ---------------------------------------------------------------------------
# Desk-scale data and training
# ---------------------------------------------------------------------------


def family_edit(lam: float) -> synth_world.EditSpec:
    """Single-parameter global color family; never clamps on [0,1] inputs.

    lam=0 is the identity; lam=1 darkens red strongly and pushes toward blue.
    """
    scale = (1.0 - 0.55 * lam, 1.0 - 0.3 * lam, 1.0 - 0.45 * lam)
    offset = (0.0, 0.12 * lam, 0.4 * lam)
    return synth_world.EditSpec(
        kind=synth_world.EDIT_GLOBAL,
        color_matrix=((scale[0], 0.0, 0.0), (0.0, scale[1], 0.0), (0.0, 0.0, scale[2])),
        color_offset=offset,
    )


@dataclass
class ReferringTrainConfig:
    image_size: tuple[int, int] = (32, 32)
    n_scenes: int = 16
    views_per_scene: int = 6
    n_objects: int = 3
    n_examples: int = 64
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    base_steps: int = 800
    base_learning_rate: float = 1e-3
    base_batch_size: int = 4
    # rank 8 is the desk-scale override of the adapter default (rank 128)
    lora: LoraConfig = field(default_factory=lambda: LoraConfig(rank=8))
    steps: int = 2000
    learning_rate: float = 2e-5
    lr_schedule: str = "constant"  # applies to both phases; "cosine" decays to 10%
    warmup_steps: int = 0
    batch_size: int = 2
    identity_rate: float = 0.15
    mask_reference_half: bool = False
    seed: int = 0


def _corpus_views(cfg: ReferringTrainConfig, seed: int):
    corpus = build_scene_corpus(
        seed, cfg.n_scenes, cfg.views_per_scene, cfg.image_size, cfg.n_objects
    )
    return [[f.rgb for f in seq.frames] for seq in corpus]


def build_referring_pool(cfg: ReferringTrainConfig, seed: int | None = None) -> list[ReferringExample]:
    """Fixed pool of referring examples over the single edit family."""
    seed = cfg.seed if seed is None else seed
    views = _corpus_views(cfg, seed_for(seed, "referring/corpus"))
    pool = []
    for i in range(cfg.n_examples):
        rng = np.random.default_rng(seed_for(seed, f"referring/example/{i}"))
        scene_views = views[int(rng.integers(len(views)))]
        a, b = rng.choice(len(scene_views), size=2, replace=False)
        lam = 0.0 if rng.random() < cfg.identity_rate else float(rng.uniform(0.0, 1.0))
        edit = family_edit(lam)
        ia, ib = scene_views[a], scene_views[b]
        pool.append(
            build_referring_example(
                ia,
                synth_world.apply_edit_image(ia, edit),
                synth_world.apply_edit_image(ib, edit),
                prompt=f"family:{lam:.4f}",
            )
        )
    return pool


def _pretrain_base(cfg: ReferringTrainConfig) -> DitBackbone:
    """Teach the base to reproduce its conditioning image.

    This gives the untrained-adapter editor the behavior a referring trainer
    starts from: shown [view | edited reference], it reproduces the unedited
    view instead of propagating the edit.
    """
    from .completion_model import make_lr_schedule

    torch.manual_seed(seed_for(cfg.seed, "referring/base-init"))
    model = DitBackbone(cfg.backbone)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.base_learning_rate, weight_decay=0.0
    )
    scheduler = make_lr_schedule(optimizer, cfg.lr_schedule, cfg.warmup_steps, cfg.base_steps)
    views = _corpus_views(cfg, seed_for(cfg.seed, "referring/base-corpus"))
    patch = cfg.backbone.patch_size
    for step in range(cfg.base_steps):
        optimizer.zero_grad(set_to_none=True)
        for item in range(cfg.base_batch_size):
            base = seed_for(cfg.seed, f"referring/base/step/{step}/item/{item}")
            rng = np.random.default_rng(base)
            scene_views = views[int(rng.integers(len(views)))]
            a, b = rng.choice(len(scene_views), size=2, replace=False)
            lam = float(rng.uniform(0.0, 1.0))
            edit = family_edit(lam)
            concat = hconcat_images(
                synth_world.apply_edit_image(scene_views[a], edit),
                synth_world.apply_edit_image(scene_views[b], edit),
            )
            x0 = to_signed(concat)
            gen = torch.Generator().manual_seed(seed_for(base, "eps"))
            e = torch.randn(x0.shape, generator=gen)
            ti = float(sample_t(1, seed_for(base, "t"))[0])
            seq = _editor_sequence(interpolate(x0, e, ti), x0, patch)
            target = torch.zeros(len(seq), seq.embeddings.shape[1])
            n_latent = (seq.stream_tags == STREAM_LATENT).sum()
            target[:n_latent] = patchify(velocity_target(x0, e), patch, STREAM_LATENT).embeddings
            loss = fm_loss(model(seq, ti), target, seq.loss_mask[:, None])
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite base-editor loss {loss.item()}")
            (loss / cfg.base_batch_size).backward()
        optimizer.step()
        scheduler.step()
    model.eval()
    return model


def train_referring(
    cfg: ReferringTrainConfig,
    base: DitBackbone | None = None,
    pool: list[ReferringExample] | None = None,
    log_every: int = 0,
) -> tuple[DitBackbone, LoraAdapter, DitBackbone, list[float]]:
    """Pretrain (or reuse) a base editor, then LoRA-train referring editing.

    Returns (base, adapter, adapted model, loss history). The base's weights
    never change during adapter training.
    """
    from .completion_model import make_lr_schedule

    if base is None:
        base = _pretrain_base(cfg)
    if pool is None:
        pool = build_referring_pool(cfg)
    adapter = LoraAdapter.init_for(base, cfg.lora, seed=seed_for(cfg.seed, "referring/lora-init"))
    adapted = apply_lora(base, adapter)
    optimizer = torch.optim.AdamW(adapter.parameters(), lr=cfg.learning_rate, weight_decay=0.0)
    scheduler = make_lr_schedule(optimizer, cfg.lr_schedule, cfg.warmup_steps, cfg.steps)

    history = []
    adapted.train()
    for step in range(cfg.steps):
        base_seed = seed_for(cfg.seed, f"referring/train/step/{step}")
        rng = np.random.default_rng(base_seed)
        batch = [pool[int(i)] for i in rng.integers(len(pool), size=cfg.batch_size)]
        t = sample_t(cfg.batch_size, seed_for(base_seed, "t")).tolist()
        gen = torch.Generator().manual_seed(seed_for(base_seed, "eps"))
        eps = [torch.randn(to_signed(ex.target_image).shape, generator=gen) for ex in batch]
        history.append(
            referring_train_step(
                adapted, batch, t, eps, optimizer, mask_reference_half=cfg.mask_reference_half
            )
        )
        scheduler.step()
        if log_every and (step + 1) % log_every == 0:
            window = history[-log_every:]
            print(f"referring step {step + 1}/{cfg.steps} loss {sum(window) / len(window):.5f}", flush=True)
    adapted.eval()
    return base, adapter, adapted, history


# ---------------------------------------------------------------------------
# Inference and backend contract
# ---------------------------------------------------------------------------


def referring_edit(
    model: DitBackbone,
    image: np.ndarray,
    reference_edited_image: np.ndarray,
    n_steps: int,
    seed: int,
) -> np.ndarray:
    """Edit `image` by example: concat with the edited reference, sample, crop.

    Returns the left half, sized like the input image.
    """
    image = np.asarray(image, dtype=np.float32)
    reference = np.asarray(reference_edited_image, dtype=np.float32)
    if image.shape != reference.shape:
        raise ValueError(f"image {image.shape} and reference {reference.shape} must match")
    patch = model.config.patch_size
    cond = to_signed(hconcat_images(image, reference))
    shape = tuple(cond.shape)

    def velocity_fn(x: Tensor, t: float, _cond) -> Tensor:
        seq = _editor_sequence(x, cond, patch)
        out = model(seq, t)
        n_latent = (seq.stream_tags == STREAM_LATENT).sum()
        return unpatchify(out[:n_latent], 1, (shape[1], shape[0]), patch)[0]

    model.eval()
    with torch.no_grad():
        x0_hat = euler_sample(velocity_fn, shape, None, n_steps, seed)
    out = from_signed(x0_hat)
    return out[:, : image.shape[1]].copy()


class ReferringBackend(Protocol):
    """Editor contract shared by curation and orchestration consumers."""

    name: str

    def edit(self, image: np.ndarray, prompt: str) -> np.ndarray: ...

    def referring_edit(self, image: np.ndarray, reference: np.ndarray) -> np.ndarray: ...


class OracleReferringEditor:
    """Applies a known EditSpec exactly; the commutation-oracle backend."""

    name = "oracle"

    def __init__(self, edit: synth_world.EditSpec):
        self.edit_spec = edit

    def edit(self, image: np.ndarray, prompt: str) -> np.ndarray:
        return synth_world.apply_edit_image(np.asarray(image), self.edit_spec)

    def referring_edit(self, image: np.ndarray, reference: np.ndarray) -> np.ndarray:
        return synth_world.apply_edit_image(np.asarray(image), self.edit_spec)


class ToyReferringBackend:
    """Wraps a trained toy referring model behind the backend contract."""

    name = "toy-referring"

    def __init__(self, model: DitBackbone, n_steps: int = 16, seed: int = 0):
        self.model = model
        self.n_steps = n_steps
        self.seed = seed

    def edit(self, image: np.ndarray, prompt: str) -> np.ndarray:
        raise NotImplementedError(
            "the toy referring model has no prompt pathway; use referring_edit"
        )

    def referring_edit(self, image: np.ndarray, reference: np.ndarray) -> np.ndarray:
        return referring_edit(self.model, image, reference, self.n_steps, self.seed)
