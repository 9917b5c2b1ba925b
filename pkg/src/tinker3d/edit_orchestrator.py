"""Few-shot and one-shot edit propagation over rendered view sequences.

Both modes render an orbit, edit a small set of reference views, and fill in
the rest with a completion backend conditioned on the *original* depth maps
(edits here are photometric, so depth is edit-invariant):

- few-shot: K references ({0} plus evenly spaced including the last frame),
  one completion pass over the whole sequence;
- one-shot: only frame 0 is edited; stride-(W-1) windows sweep left to
  right, each completed from its first (already finalized) frame, and each
  window's last frame joins the reference pool.

The resulting ViewSet carries exact poses and depth and exports to a
directory an external 3D reconstruction can consume. Frames are snapped to
their file precision (8-bit rgb, 16-bit depth) when the ViewSet is
assembled, so export/import round-trips are bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from . import synth_world
from .seeding import seed_for
from .synth_world import CameraPose, EditSpec, Scene, Trajectory

__all__ = [
    "PROV_REFERENCE",
    "PROV_GENERATED",
    "PROV_REPLACED",
    "FrameRecord",
    "ViewSet",
    "EditJob",
    "Completer",
    "ModelCompleter",
    "spaced_indices",
    "window_starts",
    "few_shot_edit",
    "one_shot_edit",
    "replace_views",
    "export_viewset",
    "import_viewset",
    "viewsets_equal",
    "save_job",
    "load_job",
]

PROV_REFERENCE = "reference"
PROV_GENERATED = "generated"
PROV_REPLACED = "replaced"


@dataclass
class FrameRecord:
    rgb: np.ndarray
    depth: np.ndarray
    pose: CameraPose
    frame_index: int
    provenance: str


@dataclass
class WindowPlan:
    index: int
    frames: list[int]  # absolute frame indices covered by this window
    refs: list[int]  # absolute indices of the reference frames passed in
    owned: list[int]  # absolute indices first generated by this window


@dataclass
class GenerationContext:
    job: "EditJob"
    completer: "Completer"
    plan: list[WindowPlan]
    depths: np.ndarray  # (N,H,W) original render depths
    edited_refs: dict[int, np.ndarray]
    call_log: list[dict] = field(default_factory=list)


@dataclass
class ViewSet:
    frames: list[FrameRecord]
    depth_scale: float
    context: GenerationContext | None = None

    def __post_init__(self):
        indices = [f.frame_index for f in self.frames]
        if indices != list(range(len(self.frames))):
            raise ValueError("frame indices must be contiguous 0..N-1")

    def __len__(self) -> int:
        return len(self.frames)


MODE_FEW_SHOT = "few_shot"
MODE_ONE_SHOT = "one_shot"


@dataclass
class EditJob:
    scene: Scene
    trajectory: Trajectory
    n_frames: int
    image_size: tuple[int, int]
    edit: EditSpec
    mode: str
    k: int = 3
    window: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (MODE_FEW_SHOT, MODE_ONE_SHOT):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == MODE_FEW_SHOT and self.k < 2:
            raise ValueError("few-shot needs k >= 2")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.n_frames < self.window:
            raise ValueError("n_frames must be >= window")


class Completer(Protocol):
    """Completion backend: fill a (sub)sequence from depth plus references.

    ref_views and the returned frames are keyed/ordered by position within
    the passed window; frame_indices carries the absolute indices so oracle
    stubs can resolve ground truth. Model-backed completers ignore it.
    """

    def complete(
        self,
        depths: np.ndarray,
        ref_views: dict[int, np.ndarray],
        frame_indices: list[int],
        seed: int,
    ) -> np.ndarray: ...


class ModelCompleter:
    """Adapts the trained completion model to the Completer protocol."""

    def __init__(self, model, n_steps: int = 16):
        self.model = model
        self.n_steps = n_steps

    def complete(self, depths, ref_views, frame_indices, seed):
        from .completion_model import complete

        return complete(self.model, depths, ref_views, self.n_steps, seed)


def spaced_indices(n_frames: int, k: int) -> list[int]:
    """{0} plus evenly spaced indices including the final frame (half-up rounding)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k == 1:
        return [0]
    return sorted({int(math.floor(j * (n_frames - 1) / (k - 1) + 0.5)) for j in range(k)})


def window_starts(n_frames: int, window: int) -> list[int]:
    """Stride-(window-1) starts, the last clamped so the window ends at N-1."""
    count = math.ceil((n_frames - 1) / (window - 1))
    return [min(i * (window - 1), n_frames - window) for i in range(count)]


def _edit_frame(job: EditJob, frame: synth_world.ViewFrame) -> np.ndarray:
    if job.edit.kind == synth_world.EDIT_PER_OBJECT:
        mask = synth_world.render_id_map(job.scene, frame.pose)
        return synth_world.apply_edit_image(frame.rgb, job.edit, mask)
    return synth_world.apply_edit_image(frame.rgb, job.edit)


def _assemble(
    job: EditJob,
    frames: list[synth_world.ViewFrame],
    rgb_by_index: dict[int, np.ndarray],
    provenance: dict[int, str],
    context: GenerationContext,
) -> ViewSet:
    depth_scale = float(max(f.depth.max() for f in frames)) / 65535.0
    records = []
    for f in frames:
        depth_q = synth_world.u16_to_depth(
            synth_world.depth_to_u16(f.depth, depth_scale), depth_scale
        )
        records.append(
            FrameRecord(
                rgb=rgb_by_index[f.frame_index],
                depth=depth_q,
                pose=f.pose,
                frame_index=f.frame_index,
                provenance=provenance[f.frame_index],
            )
        )
    return ViewSet(frames=records, depth_scale=depth_scale, context=context)


def few_shot_edit(job: EditJob, completer: Completer, referring_backend=None) -> ViewSet:
    """Edit K sparse references, then one completion pass over the sequence.

    Reference 0 is edited directly from the job's EditSpec; the others go
    through referring_backend (edited against view 0) when one is supplied,
    and otherwise get the same exact EditSpec.
    """
    if not 2 <= job.k <= 3:
        raise ValueError("few-shot k must be in [2, 3] (completion accepts <= 3 references)")
    frames = synth_world.render_orbit(job.scene, job.n_frames, job.trajectory, job.image_size)
    depths = np.stack([f.depth for f in frames])
    ref_indices = spaced_indices(job.n_frames, job.k)

    edited0 = synth_world.quantize_rgb(_edit_frame(job, frames[0]))
    edited_refs = {0: edited0}
    for idx in ref_indices[1:]:
        if referring_backend is not None:
            edited = referring_backend.referring_edit(frames[idx].rgb, edited0)
        else:
            edited = _edit_frame(job, frames[idx])
        edited_refs[idx] = synth_world.quantize_rgb(edited)

    plan = [WindowPlan(index=0, frames=list(range(job.n_frames)), refs=ref_indices, owned=[])]
    context = GenerationContext(
        job=job, completer=completer, plan=plan, depths=depths, edited_refs=edited_refs
    )
    completed = _run_window(context, plan[0], job.seed, edited_refs)
    plan[0].owned = [i for i in range(job.n_frames) if i not in edited_refs]

    rgb_by_index = {}
    provenance = {}
    for i in range(job.n_frames):
        if i in edited_refs:
            rgb_by_index[i] = edited_refs[i]
            provenance[i] = PROV_REFERENCE
        else:
            rgb_by_index[i] = synth_world.quantize_rgb(completed[i])
            provenance[i] = PROV_GENERATED
    return _assemble(job, frames, rgb_by_index, provenance, context)


def one_shot_edit(job: EditJob, completer: Completer) -> ViewSet:
    """Edit frame 0 only and propagate it window by window.

    Window i completes frames [s_i, s_i + W - 1] from its first frame, which
    is always finalized before the window runs; its last frame joins the
    finalized pool. Overlap frames keep their first-generated value.
    """
    frames = synth_world.render_orbit(job.scene, job.n_frames, job.trajectory, job.image_size)
    depths = np.stack([f.depth for f in frames])

    edited0 = synth_world.quantize_rgb(_edit_frame(job, frames[0]))
    finalized: dict[int, np.ndarray] = {0: edited0}
    provenance = {0: PROV_REFERENCE}

    plan = []
    context = GenerationContext(
        job=job, completer=completer, plan=plan, depths=depths, edited_refs={0: edited0}
    )
    for wi, start in enumerate(window_starts(job.n_frames, job.window)):
        indices = list(range(start, start + job.window))
        window = WindowPlan(index=wi, frames=indices, refs=[start], owned=[])
        plan.append(window)
        completed = _run_window(context, window, job.seed, {start: finalized[start]})
        for local, fi in enumerate(indices):
            if fi not in finalized:
                finalized[fi] = synth_world.quantize_rgb(completed[local])
                provenance[fi] = PROV_GENERATED
                window.owned.append(fi)
    return _assemble(job, frames, finalized, provenance, context)


def _run_window(
    context: GenerationContext,
    window: WindowPlan,
    base_seed: int,
    refs_abs: dict[int, np.ndarray],
) -> np.ndarray:
    """Run one completion call with window-local indexing and log it."""
    start = window.frames[0]
    local_refs = {i - start: rgb for i, rgb in refs_abs.items()}
    seed = seed_for(base_seed, f"complete/window/{window.index}")
    context.call_log.append(
        {"window": window.index, "frames": list(window.frames), "refs": sorted(refs_abs.keys())}
    )
    out = context.completer.complete(
        context.depths[window.frames], local_refs, list(window.frames), seed
    )
    out = np.asarray(out)
    if out.shape[0] != len(window.frames):
        raise ValueError("completer returned the wrong number of frames")
    return out


def replace_views(viewset: ViewSet, indices: list[int], seed: int) -> ViewSet:
    """Regenerate the targeted frames with a new seed; touch nothing else.

    Each target's owning window (the one that first generated it) re-runs
    against the pre-replacement state, and only the targeted indices take the
    fresh values. Passing the original generation seed reproduces the
    original frames.
    """
    if viewset.context is None:
        raise ValueError("this ViewSet carries no generation context (imported?)")
    context = viewset.context
    if not indices:
        return ViewSet(
            frames=[replace(f) for f in viewset.frames],
            depth_scale=viewset.depth_scale,
            context=context,
        )
    targets = set(indices)
    for i in targets:
        if not 0 <= i < len(viewset):
            raise ValueError(f"frame index {i} out of range")
        if viewset.frames[i].provenance == PROV_REFERENCE:
            raise ValueError(f"frame {i} is a reference view and cannot be replaced")

    owners: dict[int, list[int]] = {}
    for window in context.plan:
        owned = targets & set(window.owned)
        if owned:
            owners[window.index] = sorted(owned)
    claimed = set().union(*owners.values()) if owners else set()
    if claimed != targets:
        raise ValueError(f"frames {sorted(targets - claimed)} are not generated frames")

    new_rgb: dict[int, np.ndarray] = {}
    for window in context.plan:
        if window.index not in owners:
            continue
        refs_abs = {
            i: (context.edited_refs[i] if i in context.edited_refs else viewset.frames[i].rgb)
            for i in window.refs
        }
        completed = _run_window(context, window, seed, refs_abs)
        start = window.frames[0]
        for fi in owners[window.index]:
            new_rgb[fi] = synth_world.quantize_rgb(completed[fi - start])

    frames = []
    for f in viewset.frames:
        if f.frame_index in new_rgb:
            frames.append(replace(f, rgb=new_rgb[f.frame_index], provenance=PROV_REPLACED))
        else:
            frames.append(replace(f))
    return ViewSet(frames=frames, depth_scale=viewset.depth_scale, context=context)


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------


def export_viewset(viewset: ViewSet, path: str | Path) -> Path:
    """Write frames/NNNN.{rgb,depth}.png plus a JSONL manifest; returns the dir."""
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    sample = viewset.frames[0]
    lines = [
        json.dumps(
            {
                "version": 1,
                "n_frames": len(viewset),
                "depth_scale": viewset.depth_scale,
                "image_size": list(sample.pose.image_size),
            },
            sort_keys=True,
        )
    ]
    for f in viewset.frames:
        rgb_name = f"frames/{f.frame_index:04d}.rgb.png"
        depth_name = f"frames/{f.frame_index:04d}.depth.png"
        synth_world.save_rgb(path / rgb_name, f.rgb)
        synth_world.save_depth(path / depth_name, f.depth, scale=viewset.depth_scale)
        tx, ty, tz = f.pose.translation
        pose_matrix = [
            1.0, 0.0, 0.0, tx,
            0.0, 1.0, 0.0, ty,
            0.0, 0.0, 1.0, tz,
            0.0, 0.0, 0.0, 1.0,
        ]
        lines.append(
            json.dumps(
                {
                    "frame_index": f.frame_index,
                    "rgb": rgb_name,
                    "depth": depth_name,
                    "pose": pose_matrix,
                    "intrinsics": list(f.pose.intrinsics),
                    "provenance": f.provenance,
                },
                sort_keys=True,
            )
        )
    (path / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def import_viewset(path: str | Path) -> ViewSet:
    path = Path(path)
    lines = (path / "manifest.jsonl").read_text(encoding="utf-8").strip().splitlines()
    header = json.loads(lines[0])
    image_size = tuple(header["image_size"])
    frames = []
    for line in lines[1:]:
        rec = json.loads(line)
        rgb = synth_world.load_rgb(path / rec["rgb"])
        depth, _ = synth_world.load_depth(path / rec["depth"])
        pose_matrix = rec["pose"]
        pose = CameraPose(
            translation=(pose_matrix[3], pose_matrix[7], pose_matrix[11]),
            intrinsics=tuple(rec["intrinsics"]),
            image_size=image_size,
        )
        frames.append(
            FrameRecord(
                rgb=rgb,
                depth=depth,
                pose=pose,
                frame_index=rec["frame_index"],
                provenance=rec["provenance"],
            )
        )
    frames.sort(key=lambda f: f.frame_index)
    return ViewSet(frames=frames, depth_scale=float(header["depth_scale"]), context=None)


def viewsets_equal(a: ViewSet, b: ViewSet) -> bool:
    if len(a) != len(b) or a.depth_scale != b.depth_scale:
        return False
    for fa, fb in zip(a.frames, b.frames):
        if fa.frame_index != fb.frame_index or fa.provenance != fb.provenance:
            return False
        if fa.pose != fb.pose:
            return False
        if not (np.array_equal(fa.rgb, fb.rgb) and np.array_equal(fa.depth, fb.depth)):
            return False
    return True


# ---------------------------------------------------------------------------
# Job persistence (for the CLI's replace verb)
# ---------------------------------------------------------------------------


def save_job(job: EditJob, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    synth_world.save_scene(job.scene, directory / "scene.jsonl")
    payload = {
        "trajectory": {"start": list(job.trajectory.start), "end": list(job.trajectory.end)},
        "n_frames": job.n_frames,
        "image_size": list(job.image_size),
        "edit": {
            "kind": job.edit.kind,
            "color_matrix": [list(r) for r in job.edit.color_matrix],
            "color_offset": list(job.edit.color_offset),
            "target_object": job.edit.target_object,
        },
        "mode": job.mode,
        "k": job.k,
        "window": job.window,
        "seed": job.seed,
    }
    (directory / "job.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def load_job(directory: str | Path) -> EditJob:
    directory = Path(directory)
    payload = json.loads((directory / "job.json").read_text(encoding="utf-8"))
    scene = synth_world.load_scene(directory / "scene.jsonl")
    edit = payload["edit"]
    return EditJob(
        scene=scene,
        trajectory=Trajectory(
            start=tuple(payload["trajectory"]["start"]),
            end=tuple(payload["trajectory"]["end"]),
        ),
        n_frames=payload["n_frames"],
        image_size=tuple(payload["image_size"]),
        edit=EditSpec(
            kind=edit["kind"],
            color_matrix=tuple(tuple(r) for r in edit["color_matrix"]),
            color_offset=tuple(edit["color_offset"]),
            target_object=edit["target_object"],
        ),
        mode=payload["mode"],
        k=payload["k"],
        window=payload["window"],
        seed=payload["seed"],
    )
