"""Edit-pair curation: sampling, concat editing, similarity filtering, manifest.

A curation sample is built from two views of one scene: both are edited
jointly (through a pluggable editor backend that sees their horizontal
concatenation), split back apart, and scored with a pluggable embedder.
Two rules filter the result, applied in this order:

1. no-edit: the edit barely changed either view (max of the two
   original-vs-edited similarities above tau_noedit) -> discard;
2. inter-view consistency: the two edited views disagree (similarity below
   tau_mv) -> discard.

Everything is a pure function of (inputs, seed); the manifest is a JSONL
file whose bytes are reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from PIL import Image

from .synth_world import EDIT_GLOBAL, EditSpec, apply_edit_image, save_rgb

__all__ = [
    "Verdict",
    "FilterThresholds",
    "SampleScores",
    "CurationSample",
    "ManifestRecord",
    "Manifest",
    "Embedder",
    "ToyEmbedder",
    "toy_embed",
    "cosine",
    "noedit_score",
    "mv_score",
    "filter_sample",
    "curate",
    "make_curation_corpus",
    "hconcat_images",
    "split_halves",
    "EditorBackend",
    "IdentityEditor",
    "SyntheticEditor",
]

EMBED_GRID = 16  # downsample target for the toy embedder


class Verdict(str, Enum):
    KEEP = "keep"
    DISCARD_NOEDIT = "discard_noedit"
    DISCARD_INCONSISTENT = "discard_inconsistent"


@dataclass(frozen=True)
class FilterThresholds:
    tau_noedit: float = 0.95
    tau_mv: float = 0.9

    def __post_init__(self):
        for name, v in (("tau_noedit", self.tau_noedit), ("tau_mv", self.tau_mv)):
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0,1), got {v}")


@dataclass(frozen=True)
class SampleScores:
    s1: float
    s2: float
    s_noedit: float
    s_mv: float

    def __post_init__(self):
        for name in ("s1", "s2", "s_noedit", "s_mv"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [-1,1], got {v}")


@dataclass
class CurationSample:
    scene_id: str
    view_a: np.ndarray
    view_b: np.ndarray
    edited_a: np.ndarray
    edited_b: np.ndarray
    prompt: str
    scores: SampleScores
    verdict: Verdict


@dataclass(frozen=True)
class ManifestRecord:
    sample_index: int
    scene_id: str
    prompt: str
    scores: SampleScores
    paths: dict  # keys: view_a, view_b, edited_a, edited_b (relative paths)


@dataclass
class Manifest:
    header: dict
    records: list[ManifestRecord] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        lines = [json.dumps({"header": self.header, "stats": self.stats}, sort_keys=True)]
        for rec in self.records:
            lines.append(
                json.dumps(
                    {
                        "sample_index": rec.sample_index,
                        "scene_id": rec.scene_id,
                        "prompt": rec.prompt,
                        "s1": _round6(rec.scores.s1),
                        "s2": _round6(rec.scores.s2),
                        "s_noedit": _round6(rec.scores.s_noedit),
                        "s_mv": _round6(rec.scores.s_mv),
                        "paths": rec.paths,
                    },
                    sort_keys=True,
                )
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
        head = json.loads(lines[0])
        records = []
        for line in lines[1:]:
            rec = json.loads(line)
            records.append(
                ManifestRecord(
                    sample_index=rec["sample_index"],
                    scene_id=rec["scene_id"],
                    prompt=rec["prompt"],
                    scores=SampleScores(rec["s1"], rec["s2"], rec["s_noedit"], rec["s_mv"]),
                    paths=rec["paths"],
                )
            )
        return cls(header=head["header"], records=records, stats=head["stats"])


def _round6(v: float) -> float:
    return float(f"{v:.6f}")


# ---------------------------------------------------------------------------
# Embedders
# ---------------------------------------------------------------------------


class Embedder(Protocol):
    name: str
    dimension: int

    def embed(self, image: np.ndarray) -> np.ndarray: ...


def _resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Deterministic float bilinear resize, channel by channel."""
    w, h = size
    out = np.empty((h, w, image.shape[2]), dtype=np.float32)
    for c in range(image.shape[2]):
        chan = Image.fromarray(image[:, :, c].astype(np.float32), mode="F")
        out[:, :, c] = np.asarray(chan.resize((w, h), Image.BILINEAR), dtype=np.float32)
    return out


class ToyEmbedder:
    """Seeded random projection of the downsampled image, l2-normalized.

    The flattened, mean-centered image gets one extra constant component so
    the embedding can never be the zero vector (e.g. for a uniform gray
    image).
    """

    def __init__(self, seed: int = 0, dimension: int = 256, name: str = "toy"):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.name = name
        self.dimension = dimension
        self.seed = seed
        n_features = EMBED_GRID * EMBED_GRID * 3 + 1
        rng = np.random.default_rng(seed)
        self._projection = rng.standard_normal((dimension, n_features)) / np.sqrt(n_features)

    def embed(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.size == 0:
            raise ValueError("cannot embed an empty image")
        if image.ndim == 2:
            image = np.repeat(image[:, :, None], 3, axis=2)
        small = _resize_bilinear(image.astype(np.float32), (EMBED_GRID, EMBED_GRID))
        # The tiny constant component only breaks the tie for images whose
        # centered content is exactly zero; it never sways real similarities.
        features = np.concatenate([small.reshape(-1).astype(np.float64) - 0.5, [1e-6]])
        vec = self._projection @ features
        return vec / np.linalg.norm(vec)


_toy_cache: dict[tuple[int, int], ToyEmbedder] = {}


def toy_embed(image: np.ndarray, seed: int, d: int) -> np.ndarray:
    """Functional form of ToyEmbedder; the projection matrix is cached per (seed, d)."""
    key = (seed, d)
    if key not in _toy_cache:
        _toy_cache[key] = ToyEmbedder(seed=seed, dimension=d)
    return _toy_cache[key].embed(image)


# ---------------------------------------------------------------------------
# Scores and filtering
# ---------------------------------------------------------------------------


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine is undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def noedit_score(ia, ia_edited, ib, ib_edited, embedder: Embedder) -> tuple[float, float, float]:
    """(s1, s2, max(s1, s2)): similarity of each view to its edited counterpart."""
    s1 = cosine(embedder.embed(ia), embedder.embed(ia_edited))
    s2 = cosine(embedder.embed(ib), embedder.embed(ib_edited))
    return s1, s2, max(s1, s2)


def mv_score(ia_edited, ib_edited, embedder: Embedder) -> float:
    """Similarity between the two edited views (inter-view consistency)."""
    return cosine(embedder.embed(ia_edited), embedder.embed(ib_edited))


def filter_sample(scores: SampleScores, thresholds: FilterThresholds) -> Verdict:
    """No-edit check first, then inter-view consistency; a pure decision rule."""
    if scores.s_noedit > thresholds.tau_noedit:
        return Verdict.DISCARD_NOEDIT
    if scores.s_mv < thresholds.tau_mv:
        return Verdict.DISCARD_INCONSISTENT
    return Verdict.KEEP


# ---------------------------------------------------------------------------
# Editor backends
# ---------------------------------------------------------------------------


class EditorBackend(Protocol):
    name: str

    def edit(self, image: np.ndarray, prompt: str) -> np.ndarray: ...


class IdentityEditor:
    """Returns the input unchanged; every sample becomes a no-edit discard."""

    name = "identity"

    def edit(self, image: np.ndarray, prompt: str) -> np.ndarray:
        return np.asarray(image).copy()


def _prompt_rng(prompt: str, seed: int) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}:{prompt}".encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


class SyntheticEditor:
    """Applies a prompt-keyed inverted-palette transform to the whole image.

    Each channel becomes s*(1-x)+b with seeded (s, b). Inverting every
    channel flips the centered content against the original, which pulls the
    original-vs-edited similarity down regardless of how contrast is
    distributed across channels, while leaving the view-to-view content
    geometry untouched (a common affine map per channel cancels in pairwise
    cosines). The map never clamps on [0,1] inputs.
    """

    name = "synthetic"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def edit_spec_for(self, prompt: str) -> EditSpec:
        rng = _prompt_rng(prompt, self.seed)
        scale = rng.uniform(0.3, 0.45, size=3)
        offset = np.array([rng.uniform(0.05, min(0.5, 1.0 - s)) for s in scale])
        return EditSpec(
            kind=EDIT_GLOBAL,
            color_matrix=tuple(map(tuple, np.diag(-scale))),
            color_offset=tuple(scale + offset),
        )

    def edit(self, image: np.ndarray, prompt: str) -> np.ndarray:
        return apply_edit_image(np.asarray(image), self.edit_spec_for(prompt))


# ---------------------------------------------------------------------------
# Concatenation policy
# ---------------------------------------------------------------------------


def _fit_height(image: np.ndarray, height: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h == height:
        return image.astype(np.float32)
    new_w = max(1, round(w * height / h))
    return _resize_bilinear(image.astype(np.float32), (new_w, height))


def hconcat_images(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Equal-height horizontal concat: resize preserving aspect, pad black.

    Both halves are padded to a common width so the concatenation always
    splits exactly at its midpoint.
    """
    a, b = np.asarray(a), np.asarray(b)
    height = max(a.shape[0], b.shape[0])
    a, b = _fit_height(a, height), _fit_height(b, height)
    width = max(a.shape[1], b.shape[1])

    def pad(img):
        missing = width - img.shape[1]
        left = missing // 2
        return np.pad(img, ((0, 0), (left, missing - left), (0, 0)))

    return np.concatenate([pad(a), pad(b)], axis=1)


def split_halves(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    image = np.asarray(image)
    if image.shape[1] % 2 != 0:
        raise ValueError("cannot split an odd-width image at its midpoint")
    mid = image.shape[1] // 2
    return image[:, :mid].copy(), image[:, mid:].copy()


# ---------------------------------------------------------------------------
# Curation pipeline
# ---------------------------------------------------------------------------

ViewCorpus = Sequence[tuple[str, Sequence[np.ndarray]]]

CORPUS_SPAN = (0.08, 0.16)
CORPUS_GATE = 0.95


def _demeaned_channel_floor(views: Sequence[np.ndarray]) -> float:
    """Worst per-channel, per-pair cosine of demeaned downsampled content.

    This value is invariant under any per-channel affine color map applied to
    both views, so it lower-bounds the post-edit inter-view similarity any
    such editor can produce (up to the embedder's projection distortion).
    """
    smalls = [
        _resize_bilinear(np.asarray(v, dtype=np.float32), (EMBED_GRID, EMBED_GRID))
        for v in views
    ]
    floor = 1.0
    for a in range(len(views)):
        for b in range(a + 1, len(views)):
            for c in range(3):
                u = smalls[a][:, :, c].ravel().astype(np.float64)
                w = smalls[b][:, :, c].ravel().astype(np.float64)
                u, w = u - u.mean(), w - w.mean()
                nu, nw = np.linalg.norm(u), np.linalg.norm(w)
                if nu > 1e-9 and nw > 1e-9:
                    floor = min(floor, float(u @ w / (nu * nw)))
    return floor


def make_curation_corpus(
    seed: int,
    n_scenes: int,
    views_per_scene: int,
    image_size: tuple[int, int],
    n_objects: int = 3,
    span: tuple[float, float] = CORPUS_SPAN,
    gate: float = CORPUS_GATE,
    max_tries: int = 2000,
) -> ViewCorpus:
    """Seeded fixture corpus of high-overlap view sets.

    Candidate scenes/trajectories are screened by _demeaned_channel_floor so
    every admitted view pair has enough shared content for consistency
    filtering to be meaningful; candidates are consumed in a deterministic
    seeded order, so the corpus is a pure function of the arguments.
    """
    from .seeding import seed_for
    from .synth_world import Trajectory, make_scene, render_orbit

    corpus: list[tuple[str, list[np.ndarray]]] = []
    k = 0
    while len(corpus) < n_scenes:
        if k >= max_tries:
            raise RuntimeError(f"found only {len(corpus)}/{n_scenes} scenes after {max_tries} tries")
        scene = make_scene(seed_for(seed, f"curate/scene/{k}"), n_objects, image_size)
        rng = np.random.default_rng(seed_for(seed, f"curate/trajectory/{k}"))
        width = rng.uniform(*span)
        dy = rng.uniform(-0.04, 0.04)
        trajectory = Trajectory((-width / 2, -dy / 2, 0.0), (width / 2, dy / 2, 0.0))
        frames = render_orbit(scene, views_per_scene, trajectory, image_size)
        views = [f.rgb for f in frames]
        if _demeaned_channel_floor(views) >= gate:
            corpus.append((f"scene-{len(corpus):03d}", views))
        k += 1
    return corpus


def curate(
    corpus: ViewCorpus,
    editor: EditorBackend,
    prompts: Sequence[str],
    thresholds: FilterThresholds,
    embedder: Embedder,
    seed: int,
    n_samples: int,
    out_dir: str | Path | None = None,
    seed_fn: Callable[[int, str], int] | None = None,
) -> Manifest:
    """Sample, edit, score, and filter n_samples candidate pairs.

    Per-sample randomness is derived from (seed, sample index), so samples
    are independent and the run is order-deterministic; a worker pool could
    process them in any order. Editor failures skip the sample and are
    counted. Kept samples are written as PNGs when out_dir is given.
    """
    if len(corpus) == 0:
        raise ValueError("corpus must contain at least one scene")
    for scene_id, views in corpus:
        if len(views) < 2:
            raise ValueError(f"scene {scene_id!r} needs at least two views")
    if len(prompts) == 0:
        raise ValueError("prompts must be nonempty")

    if seed_fn is None:
        from .seeding import seed_for as seed_fn  # default derivation

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    stats = {v.value: 0 for v in Verdict}
    stats["skipped"] = 0
    records: list[ManifestRecord] = []

    for i in range(n_samples):
        rng = np.random.default_rng(seed_fn(seed, f"curate/sample/{i}"))
        scene_id, views = corpus[int(rng.integers(len(corpus)))]
        ia_idx, ib_idx = rng.choice(len(views), size=2, replace=False)
        view_a, view_b = np.asarray(views[ia_idx]), np.asarray(views[ib_idx])
        prompt = prompts[int(rng.integers(len(prompts)))]

        concat = hconcat_images(view_a, view_b)
        try:
            edited = np.asarray(editor.edit(concat, prompt))
            if edited.shape != concat.shape:
                raise ValueError("editor returned a mismatched shape")
        except Exception:
            stats["skipped"] += 1
            continue
        # Score against the same resize/pad geometry the editor saw.
        half_a, half_b = split_halves(concat)
        edited_a, edited_b = split_halves(edited)

        s1, s2, s_noedit = noedit_score(half_a, edited_a, half_b, edited_b, embedder)
        s_mv = mv_score(edited_a, edited_b, embedder)
        scores = SampleScores(s1=s1, s2=s2, s_noedit=s_noedit, s_mv=s_mv)
        verdict = filter_sample(scores, thresholds)
        stats[verdict.value] += 1

        if verdict is Verdict.KEEP:
            paths = {
                "view_a": f"samples/{i:05d}/view_a.png",
                "view_b": f"samples/{i:05d}/view_b.png",
                "edited_a": f"samples/{i:05d}/edited_a.png",
                "edited_b": f"samples/{i:05d}/edited_b.png",
            }
            if out_dir is not None:
                sample_dir = out_dir / "samples" / f"{i:05d}"
                sample_dir.mkdir(parents=True, exist_ok=True)
                save_rgb(sample_dir / "view_a.png", half_a)
                save_rgb(sample_dir / "view_b.png", half_b)
                save_rgb(sample_dir / "edited_a.png", edited_a)
                save_rgb(sample_dir / "edited_b.png", edited_b)
            records.append(
                ManifestRecord(
                    sample_index=i,
                    scene_id=scene_id,
                    prompt=prompt,
                    scores=scores,
                    paths=paths,
                )
            )

    manifest = Manifest(
        header={
            "embedder": embedder.name,
            "embedder_dim": embedder.dimension,
            "tau_noedit": thresholds.tau_noedit,
            "tau_mv": thresholds.tau_mv,
            "seed": seed,
            "editor": editor.name,
            "n_samples": n_samples,
        },
        records=records,
        stats=stats,
    )
    if out_dir is not None:
        manifest.write(out_dir / "manifest.jsonl")
    return manifest
