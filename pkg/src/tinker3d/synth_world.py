"""Synthetic multi-view scenes with exact depth, parallax, and edit oracles.

The world model is deliberately minimal: flat, unshaded, axis-aligned color
billboards viewed by a translation-only pinhole camera, rasterized by
pixel-center point sampling with a z-buffer. Within that model every quantity
a downstream test needs is exact:

- depth maps equal the camera-space z of the winning billboard per pixel,
- pixel footprints shift by fx * dx / z under camera translation,
- photometric edits commute with rendering (editing billboard colors then
  rendering equals rendering then editing pixels), because each billboard is
  a single constant color.

All functions are pure; randomness enters only through explicit seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

__all__ = [
    "Billboard",
    "Scene",
    "CameraPose",
    "Trajectory",
    "ViewFrame",
    "EditSpec",
    "canonical_pose",
    "make_scene",
    "render_view",
    "render_id_map",
    "render_orbit",
    "apply_edit_scene",
    "apply_edit_image",
    "identity_edit",
    "quantize_rgb",
    "save_scene",
    "load_scene",
    "save_rgb",
    "load_rgb",
    "save_depth",
    "load_depth",
]

MIN_IMAGE_SIDE = 16

EDIT_PER_OBJECT = "per_object_recolor"
EDIT_GLOBAL = "global_linear_color"


@dataclass(frozen=True)
class Billboard:
    """Flat axis-aligned rectangle of constant color at a fixed depth."""

    center: tuple[float, float]
    half_extent: tuple[float, float]
    depth: float
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.depth <= 0:
            raise ValueError(f"billboard depth must be > 0, got {self.depth}")
        if self.half_extent[0] <= 0 or self.half_extent[1] <= 0:
            raise ValueError(f"half_extent must be positive, got {self.half_extent}")
        if any(c < 0 or c > 1 for c in self.color):
            raise ValueError(f"color must lie in [0,1]^3, got {self.color}")


@dataclass(frozen=True)
class Scene:
    """A set of billboards plus a background color; the seed records provenance."""

    objects: tuple[Billboard, ...]
    background_color: tuple[float, float, float]
    seed: int

    def __post_init__(self):
        if len(self.objects) < 1:
            raise ValueError("scene needs at least one object")
        depths = [o.depth for o in self.objects]
        if len(set(depths)) != len(depths):
            raise ValueError("object depths must be pairwise distinct")
        if any(c < 0 or c > 1 for c in self.background_color):
            raise ValueError("background color must lie in [0,1]^3")

    @property
    def max_depth(self) -> float:
        return max(o.depth for o in self.objects)


@dataclass(frozen=True)
class CameraPose:
    """Translation-only pinhole camera; orientation is fixed to identity."""

    translation: tuple[float, float, float]
    intrinsics: tuple[float, float, float, float]  # fx, fy, cx, cy
    image_size: tuple[int, int]  # W, H

    def __post_init__(self):
        fx, fy, _, _ = self.intrinsics
        if fx <= 0 or fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={fx}, fy={fy}")


@dataclass(frozen=True)
class Trajectory:
    """Linear camera-translation segment; poses interpolate start -> end."""

    start: tuple[float, float, float]
    end: tuple[float, float, float]


@dataclass(frozen=True)
class ViewFrame:
    """One rendered view: rgb (H,W,3) in [0,1], depth (H,W) in world units."""

    rgb: np.ndarray
    depth: np.ndarray
    pose: CameraPose
    frame_index: int

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        if not np.all(np.isfinite(self.rgb)):
            raise ValueError("rgb contains non-finite values")
        if not np.all(self.depth > 0):
            raise ValueError("depth must be strictly positive everywhere")


@dataclass(frozen=True)
class EditSpec:
    """Photometric edit: color' = clamp(color_matrix @ color + color_offset).

    kind is either a global transform of every pixel/object color or a
    recolor of a single target object.
    """

    kind: str
    color_matrix: tuple
    color_offset: tuple
    target_object: int | None = None

    def __post_init__(self):
        if self.kind not in (EDIT_PER_OBJECT, EDIT_GLOBAL):
            raise ValueError(f"unknown edit kind {self.kind!r}")
        m = np.asarray(self.color_matrix, dtype=np.float64)
        b = np.asarray(self.color_offset, dtype=np.float64)
        if m.shape != (3, 3) or b.shape != (3,):
            raise ValueError("color_matrix must be 3x3 and color_offset length 3")
        if self.kind == EDIT_PER_OBJECT and self.target_object is None:
            raise ValueError("per-object edit requires a target_object index")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.color_matrix, dtype=np.float64)

    @property
    def offset(self) -> np.ndarray:
        return np.asarray(self.color_offset, dtype=np.float64)


def identity_edit() -> EditSpec:
    return EditSpec(
        kind=EDIT_GLOBAL,
        color_matrix=((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)),
        color_offset=(0.0, 0.0, 0.0),
    )


def canonical_pose(image_size: tuple[int, int]) -> CameraPose:
    """Reference camera at the origin with fx = fy = W and a centered principal point."""
    w, h = image_size
    return CameraPose(
        translation=(0.0, 0.0, 0.0),
        intrinsics=(float(w), float(w), w / 2.0, h / 2.0),
        image_size=(int(w), int(h)),
    )


def make_scene(seed: int, n_objects: int, image_size: tuple[int, int]) -> Scene:
    """Deterministically build a scene that is visible from the canonical pose.

    Depths are spread over [2, 5] with sub-spacing jitter, so they are strictly
    distinct by construction. Centers and extents are drawn relative to the
    frustum width at each object's depth, which guarantees every object covers
    at least one pixel at the minimum image size. Colors land on the 8-bit
    grid so unedited renders are losslessly exportable.
    """
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    w, h = image_size
    if w < MIN_IMAGE_SIDE or h < MIN_IMAGE_SIDE:
        raise ValueError(f"image size must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")

    rng = np.random.default_rng(seed)
    if n_objects == 1:
        depths = np.array([2.0 + rng.uniform(0.0, 3.0)])
    else:
        base = np.linspace(2.0, 5.0, n_objects)
        spacing = 3.0 / (n_objects - 1)
        depths = base + rng.uniform(-0.4, 0.4, size=n_objects) * (spacing / 2.0)
        depths = rng.permutation(depths)

    objects = []
    for depth in depths:
        # Frustum half-width at depth z is z/2 for fx = W, cx = W/2. Keeping
        # |center| + extent well inside it leaves every object fully visible
        # even under the small camera translations the orbits use.
        cx = rng.uniform(-0.18, 0.18) * depth
        cy = rng.uniform(-0.18, 0.18) * depth * (h / w)
        he_w = rng.uniform(0.09, 0.18) * depth
        he_h = rng.uniform(0.09, 0.18) * depth
        color = tuple(rng.integers(0, 256, size=3) / 255.0)
        objects.append(
            Billboard(
                center=(float(cx), float(cy)),
                half_extent=(float(he_w), float(he_h)),
                depth=float(depth),
                color=color,
            )
        )
    background = tuple(rng.integers(0, 256, size=3) / 255.0)
    return Scene(objects=tuple(objects), background_color=background, seed=int(seed))


def _rasterize(scene: Scene, pose: CameraPose):
    """Shared z-buffer pass. Returns (rgb, depth, id_map) in camera frame."""
    w, h = pose.image_size
    fx, fy, cx, cy = pose.intrinsics
    tx, ty, tz = pose.translation

    for i, obj in enumerate(scene.objects):
        if obj.depth - tz <= 0:
            raise ValueError(f"object {i} is behind the camera (z={obj.depth}, tz={tz})")

    bg_depth = scene.max_depth + 1.0 - tz
    rgb = np.empty((h, w, 3), dtype=np.float32)
    rgb[:] = np.asarray(scene.background_color, dtype=np.float32)
    depth = np.full((h, w), np.float32(bg_depth), dtype=np.float32)
    id_map = np.full((h, w), -1, dtype=np.int32)

    u_centers = np.arange(w, dtype=np.float64) + 0.5
    v_centers = np.arange(h, dtype=np.float64) + 0.5

    # Far-to-near paint order; distinct depths make the result order-free.
    for i in sorted(range(len(scene.objects)), key=lambda k: -scene.objects[k].depth):
        obj = scene.objects[i]
        zc = obj.depth - tz
        u0 = fx * (obj.center[0] - obj.half_extent[0] - tx) / zc + cx
        u1 = fx * (obj.center[0] + obj.half_extent[0] - tx) / zc + cx
        v0 = fy * (obj.center[1] - obj.half_extent[1] - ty) / zc + cy
        v1 = fy * (obj.center[1] + obj.half_extent[1] - ty) / zc + cy
        col_mask = (u_centers >= u0) & (u_centers < u1)
        row_mask = (v_centers >= v0) & (v_centers < v1)
        mask = np.outer(row_mask, col_mask)
        rgb[mask] = np.asarray(obj.color, dtype=np.float32)
        depth[mask] = np.float32(zc)
        id_map[mask] = i
    return rgb, depth, id_map


def render_view(scene: Scene, pose: CameraPose, frame_index: int = 0) -> ViewFrame:
    """Pinhole render with z-buffer occlusion and exact per-pixel depth."""
    rgb, depth, _ = _rasterize(scene, pose)
    return ViewFrame(rgb=rgb, depth=depth, pose=pose, frame_index=frame_index)


def render_id_map(scene: Scene, pose: CameraPose) -> np.ndarray:
    """(H,W) int32 map of the winning object index per pixel, -1 for background."""
    _, _, id_map = _rasterize(scene, pose)
    return id_map


def render_orbit(
    scene: Scene,
    n_frames: int,
    trajectory: Trajectory,
    image_size: tuple[int, int],
) -> list[ViewFrame]:
    """Render n_frames poses evenly spaced along a linear translation."""
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    base = canonical_pose(image_size)
    start = np.asarray(trajectory.start, dtype=np.float64)
    end = np.asarray(trajectory.end, dtype=np.float64)
    frames = []
    for k in range(n_frames):
        alpha = k / (n_frames - 1)
        t = (1.0 - alpha) * start + alpha * end
        pose = replace(base, translation=(float(t[0]), float(t[1]), float(t[2])))
        frames.append(render_view(scene, pose, frame_index=k))
    return frames


def _edit_color(color: np.ndarray, edit: EditSpec) -> np.ndarray:
    return np.clip(edit.matrix @ color + edit.offset, 0.0, 1.0)


def apply_edit_scene(scene: Scene, edit: EditSpec) -> Scene:
    """Transform object colors (and the background, for global edits)."""
    if edit.kind == EDIT_PER_OBJECT:
        if edit.target_object is None or not 0 <= edit.target_object < len(scene.objects):
            raise ValueError(f"target_object {edit.target_object} out of range")
        objects = tuple(
            replace(o, color=tuple(_edit_color(np.asarray(o.color), edit)))
            if i == edit.target_object
            else o
            for i, o in enumerate(scene.objects)
        )
        return replace(scene, objects=objects)
    objects = tuple(
        replace(o, color=tuple(_edit_color(np.asarray(o.color), edit))) for o in scene.objects
    )
    background = tuple(_edit_color(np.asarray(scene.background_color), edit))
    return replace(scene, objects=objects, background_color=background)


def apply_edit_image(
    rgb: np.ndarray,
    edit: EditSpec,
    object_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Pixel-space form of the same edit; per-object edits need an id map."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H,W,3) image, got shape {rgb.shape}")
    edited = np.clip(
        np.einsum("ij,hwj->hwi", edit.matrix, rgb.astype(np.float64)) + edit.offset,
        0.0,
        1.0,
    ).astype(np.float32)
    if edit.kind == EDIT_GLOBAL:
        return edited
    if object_mask is None:
        raise ValueError("per-object edit on an image requires an object_mask")
    if object_mask.shape != rgb.shape[:2]:
        raise ValueError("object_mask shape must match the image")
    out = rgb.astype(np.float32).copy()
    sel = object_mask == edit.target_object
    out[sel] = edited[sel]
    return out


def quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid exactly as a PNG round-trip would."""
    return _u8_to_float(_float_to_u8(rgb))


def _float_to_u8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def _u8_to_float(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_scene(scene: Scene, path: str | Path) -> None:
    """One header line, then one JSON record per billboard."""
    path = Path(path)
    lines = [
        json.dumps(
            {
                "background_color": list(scene.background_color),
                "seed": scene.seed,
                "n_objects": len(scene.objects),
            },
            sort_keys=True,
        )
    ]
    for obj in scene.objects:
        lines.append(
            json.dumps(
                {
                    "center": list(obj.center),
                    "half_extent": list(obj.half_extent),
                    "depth": obj.depth,
                    "color": list(obj.color),
                },
                sort_keys=True,
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_scene(path: str | Path) -> Scene:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = json.loads(lines[0])
    objects = []
    for line in lines[1:]:
        rec = json.loads(line)
        objects.append(
            Billboard(
                center=tuple(rec["center"]),
                half_extent=tuple(rec["half_extent"]),
                depth=rec["depth"],
                color=tuple(rec["color"]),
            )
        )
    if len(objects) != header["n_objects"]:
        raise ValueError("scene file is truncated")
    return Scene(
        objects=tuple(objects),
        background_color=tuple(header["background_color"]),
        seed=int(header["seed"]),
    )


def save_rgb(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(_float_to_u8(rgb), mode="RGB").save(str(path), format="PNG")


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(str(path)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return _u8_to_float(arr)


def save_depth(path: str | Path, depth: np.ndarray, scale: float | None = None) -> float:
    """16-bit grayscale PNG with depth_world = pixel * scale; scale stored in-file.

    Returns the scale used (max depth / 65535 when not supplied).
    """
    depth = np.asarray(depth)
    if scale is None:
        scale = float(depth.max()) / 65535.0
    if scale <= 0:
        raise ValueError("depth scale must be positive")
    u16 = depth_to_u16(depth, scale)
    info = PngInfo()
    info.add_text("depth_scale", repr(float(scale)))
    Image.fromarray(u16).save(str(path), format="PNG", pnginfo=info)
    return float(scale)


def load_depth(path: str | Path) -> tuple[np.ndarray, float]:
    with Image.open(str(path)) as img:
        scale = float(img.text["depth_scale"])
        u16 = np.asarray(img, dtype=np.uint16)
    return u16_to_depth(u16, scale), scale


def depth_to_u16(depth: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(np.round(depth / scale), 0, 65535).astype(np.uint16)


def u16_to_depth(u16: np.ndarray, scale: float) -> np.ndarray:
    return u16.astype(np.float32) * np.float32(scale)
