"""Procedural multi-view ground truth: textured planes under known rigs.

A scene is a single world plane carrying a seeded wrap-tiled texture,
observed by an inward-looking camera rig. Correspondences between views are
closed-form (plane homography via ray casting), which makes these scenes
the oracle substrate for every epipolar and attention claim: HR renders,
anti-aliased LR counterparts, and exact pixel-to-pixel ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .colmap_io import (CameraIntrinsics, CameraPose, PoseManifest,
                        read_manifest, write_manifest)
from .resample import ResampleConfig, downsample_aa

META_SCHEMA_VERSION = 1

RIG_KINDS = ("ring_inward", "arc", "random_hemisphere")


class PlaneBehindCameraError(Exception):
    """No ray from the view hits the plane in front of the camera."""


def gen_rig(kind: str, n: int, radius: float, seed: int = 0,
            elevation: float = 0.0, width: int = 64, height: int = 64,
            focal=None) -> PoseManifest:
    """Deterministic camera rig, all optical axes toward the origin.

    ring_inward: evenly spaced ring at the given elevation angle (default
    in the xz-plane). arc: quarter circle. random_hemisphere: seeded upper
    hemisphere directions.
    """
    if kind not in RIG_KINDS:
        raise ValueError(f"kind must be one of {RIG_KINDS}")
    if n < 2:
        raise ValueError("need at least 2 cameras")
    focal = float(width) if focal is None else float(focal)
    intr = CameraIntrinsics("PINHOLE", width, height, focal, focal,
                            (width - 1) / 2.0, (height - 1) / 2.0)
    rng = np.random.default_rng(seed)
    centers = []
    if kind == "ring_inward":
        for i in range(n):
            a = 2.0 * np.pi * i / n
            centers.append([radius * np.cos(elevation) * np.cos(a),
                            radius * np.sin(elevation),
                            radius * np.cos(elevation) * np.sin(a)])
    elif kind == "arc":
        for a in np.linspace(-np.pi / 4.0, np.pi / 4.0, n):
            centers.append([radius * np.cos(elevation) * np.cos(a),
                            radius * np.sin(elevation),
                            radius * np.cos(elevation) * np.sin(a)])
    else:
        az = rng.uniform(0.0, 2.0 * np.pi, size=n)
        el = rng.uniform(0.35, 1.35, size=n)
        for a, e in zip(az, el):
            centers.append([radius * np.cos(e) * np.cos(a),
                            radius * np.sin(e),
                            radius * np.cos(e) * np.sin(a)])
    entries = []
    for vid, c in enumerate(centers):
        pose = _look_at(np.asarray(c, dtype=np.float64), vid)
        entries.append((vid, intr, pose))
    cs = np.stack([p.center for _, _, p in entries])
    spread = float(np.max(np.linalg.norm(cs - cs.mean(axis=0), axis=1)))
    return PoseManifest(cameras=entries,
                        scene_scale=spread if spread > 0 else 1.0)


def _look_at(center, view_id, up=(0.0, 1.0, 0.0)):
    fwd = -center / np.linalg.norm(center)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(up, fwd)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(np.array([1.0, 0.0, 0.0]), fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    return CameraPose(rotation=np.stack([right, down, fwd], axis=1),
                      center=center, view_id=view_id)


def _upsample_wrap(grid, size):
    """Periodic bilinear upsampling of a square lattice to size x size."""
    n = grid.shape[0]
    coords = (np.arange(size) + 0.5) * n / size - 0.5
    i0 = np.floor(coords).astype(np.int64)
    f = coords - i0
    i0m = i0 % n
    i1m = (i0 + 1) % n
    rows = (grid[i0m, :] * (1 - f)[:, None] + grid[i1m, :] * f[:, None])
    return (rows[:, i0m] * (1 - f)[None, :] + rows[:, i1m] * f[None, :])


def make_texture(seed: int, size: int = 256) -> np.ndarray:
    """Seeded multi-octave value noise with a high-frequency checker overlay.

    The amplitude decay is shallow on purpose: the fine octaves must stay
    strong enough that local appearance is discriminative, otherwise
    correspondences are ambiguous along epipolar lines. The periodic
    checker is kept weak for the same reason and only tops up the
    highest-frequency band.
    """
    rng = np.random.default_rng(seed)
    acc = np.zeros((size, size))
    total = 0.0
    # mid-band octaves dominate so cross-view matching stays unambiguous,
    # but the two finest keep enough detail above the downsampled band to
    # leave real reconstruction headroom
    for lattice, amp in ((4, 0.4), (8, 0.5), (16, 0.6), (32, 1.0),
                         (64, 1.0), (128, 0.9), (256, 0.9)):
        acc += amp * _upsample_wrap(rng.uniform(size=(lattice, lattice)), size)
        total += amp
    acc /= total
    acc = (acc - acc.min()) / max(acc.max() - acc.min(), 1e-9)
    iy, ix = np.mgrid[0:size, 0:size]
    checker = ((ix // 2 + iy // 2) % 2).astype(np.float64)
    return np.clip(0.93 * acc + 0.05 * checker + 0.01, 0.0, 1.0)


@dataclass
class SynthScene:
    rig: PoseManifest
    plane_normal: np.ndarray
    plane_offset: float
    texture: np.ndarray
    texel_size: float
    factor: int
    seed: int
    hr_images: dict = field(default_factory=dict)
    lr_images: dict = field(default_factory=dict)

    def __post_init__(self):
        self.plane_normal = np.asarray(self.plane_normal, dtype=np.float64)
        self.plane_normal = self.plane_normal / np.linalg.norm(self.plane_normal)
        # in-plane orthonormal frame for texture coordinates
        a = np.array([1.0, 0.0, 0.0])
        if abs(self.plane_normal @ a) > 0.9:
            a = np.array([0.0, 0.0, 1.0])
        e1 = np.cross(self.plane_normal, a)
        self._e1 = e1 / np.linalg.norm(e1)
        self._e2 = np.cross(self.plane_normal, self._e1)

    def intrinsics_at(self, view_id, resolution=None) -> CameraIntrinsics:
        intr, _ = self.rig.get(view_id)
        if resolution is None or resolution == (intr.width, intr.height):
            return intr
        rw, rh = resolution
        sx, sy = rw / intr.width, rh / intr.height
        return CameraIntrinsics(intr.model, rw, rh, intr.fx * sx, intr.fy * sy,
                                (intr.cx + 0.5) * sx - 0.5,
                                (intr.cy + 0.5) * sy - 0.5)


def _sample_texture_wrap(tex, s, t):
    n = tex.shape[0]
    x0 = np.floor(s).astype(np.int64)
    y0 = np.floor(t).astype(np.int64)
    fx = s - x0
    fy = t - y0
    x0m, x1m = x0 % n, (x0 + 1) % n
    y0m, y1m = y0 % n, (y0 + 1) % n
    return (tex[y0m, x0m] * (1 - fx) * (1 - fy)
            + tex[y0m, x1m] * fx * (1 - fy)
            + tex[y1m, x0m] * (1 - fx) * fy
            + tex[y1m, x1m] * fx * fy)


def _cast_to_plane(scene, pose, dirs):
    """Intersect rays (… x 3, world) from pose.center with the scene plane.

    Returns (points, hit) where hit is False for rays parallel to or
    leaving away from the plane.
    """
    n = scene.plane_normal
    denom = dirs @ n
    num = scene.plane_offset - float(pose.center @ n)
    with np.errstate(divide="ignore", invalid="ignore"):
        tvals = np.where(np.abs(denom) > 1e-12, num / denom, -1.0)
    hit = tvals > 1e-9
    points = pose.center + tvals[..., None] * dirs
    return points, hit


def render_plane(scene: SynthScene, view_id, resolution=None) -> np.ndarray:
    """Ray-cast rendering of the textured plane; misses are exact 0."""
    intr = scene.intrinsics_at(view_id, resolution)
    _, pose = scene.rig.get(view_id)
    ys, xs = np.mgrid[0:intr.height, 0:intr.width]
    dirs_cam = np.stack([(xs - intr.cx) / intr.fx,
                         (ys - intr.cy) / intr.fy,
                         np.ones_like(xs, dtype=np.float64)], axis=-1)
    dirs = dirs_cam @ pose.rotation.T
    points, hit = _cast_to_plane(scene, pose, dirs)
    if not hit.any():
        raise PlaneBehindCameraError(f"view {view_id} never sees the plane")
    s = (points @ scene._e1) / scene.texel_size
    t = (points @ scene._e2) / scene.texel_size
    img = _sample_texture_wrap(scene.texture, s, t)
    img[~hit] = 0.0
    return img


def gt_correspondence_batch(scene: SynthScene, view_i, pixels, view_j,
                            resolution=None):
    """Map (N,2) pixels of view_i onto view_j through the plane.

    Returns (coords (N,2), valid (N,)); invalid entries hold NaN. Pixels
    are in the coordinate frame of ``resolution`` (HR by default).
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    intr_i = scene.intrinsics_at(view_i, resolution)
    intr_j = scene.intrinsics_at(view_j, resolution)
    _, pose_i = scene.rig.get(view_i)
    _, pose_j = scene.rig.get(view_j)
    dirs_cam = np.stack([(pixels[:, 0] - intr_i.cx) / intr_i.fx,
                         (pixels[:, 1] - intr_i.cy) / intr_i.fy,
                         np.ones(len(pixels))], axis=-1)
    dirs = dirs_cam @ pose_i.rotation.T
    points, valid = _cast_to_plane(scene, pose_i, dirs)
    cam_j = (points - pose_j.center) @ pose_j.rotation
    valid &= cam_j[:, 2] > 1e-9
    coords = np.full_like(pixels, np.nan)
    ok = valid.copy()
    z = np.where(ok, cam_j[:, 2], 1.0)
    u = intr_j.fx * cam_j[:, 0] / z + intr_j.cx
    v = intr_j.fy * cam_j[:, 1] / z + intr_j.cy
    in_bounds = ((u >= 0) & (u <= intr_j.width - 1)
                 & (v >= 0) & (v <= intr_j.height - 1))
    valid = ok & in_bounds
    coords[valid, 0] = u[valid]
    coords[valid, 1] = v[valid]
    return coords, valid


def gt_correspondence(scene: SynthScene, view_i, pixel, view_j,
                      resolution=None):
    """Single-pixel correspondence; None when invisible in view_j."""
    coords, valid = gt_correspondence_batch(scene, view_i, [pixel], view_j,
                                            resolution)
    return coords[0] if valid[0] else None


def build_scene(kind: str = "ring_inward", n: int = 16, radius: float = 4.0,
                seed: int = 0, width: int = 64, height: int = 64,
                factor: int = 2, elevation: float = 1.0, focal=None,
                plane_normal=(0.0, 1.0, 0.0), plane_offset: float = 0.0,
                texture_size: int = 256, texel_size: float = 0.0625
                ) -> SynthScene:
    """Generate rig, texture, HR renders, and exactly-matching LR images."""
    rig = gen_rig(kind, n, radius, seed, elevation=elevation,
                  width=width, height=height, focal=focal)
    scene = SynthScene(rig=rig, plane_normal=plane_normal,
                       plane_offset=plane_offset,
                       texture=make_texture(seed, texture_size),
                       texel_size=texel_size, factor=factor, seed=seed)
    cfg = ResampleConfig(factor=factor)
    for vid in rig.view_ids():
        hr = render_plane(scene, vid)
        scene.hr_images[vid] = hr
        scene.lr_images[vid] = downsample_aa(hr, cfg)
    return scene


def _to_png(img) -> Image.Image:
    return Image.fromarray(
        (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8), mode="L")


def _from_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def write_scene(scene: SynthScene, out_dir) -> None:
    """poses.json + hr/NNN.png + lr/NNN.png + meta.json."""
    out = Path(out_dir)
    (out / "hr").mkdir(parents=True, exist_ok=True)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    write_manifest(scene.rig, out / "poses.json")
    for vid in scene.rig.view_ids():
        _to_png(scene.hr_images[vid]).save(out / "hr" / f"{vid:03d}.png")
        _to_png(scene.lr_images[vid]).save(out / "lr" / f"{vid:03d}.png")
    meta = {
        "schema_version": META_SCHEMA_VERSION,
        "plane_normal": list(scene.plane_normal),
        "plane_offset": scene.plane_offset,
        "seed": scene.seed,
        "factor": scene.factor,
        "texel_size": scene.texel_size,
        "texture_size": int(scene.texture.shape[0]),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def read_scene(scene_dir) -> SynthScene:
    """Rebuild a scene from disk; images come from the 8-bit PNGs, the
    texture is regenerated from the recorded seed."""
    d = Path(scene_dir)
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("schema_version") != META_SCHEMA_VERSION:
        raise ValueError(f"{d}: unknown scene meta schema")
    rig = read_manifest(d / "poses.json")
    scene = SynthScene(rig=rig, plane_normal=np.array(meta["plane_normal"]),
                       plane_offset=meta["plane_offset"],
                       texture=make_texture(meta["seed"], meta["texture_size"]),
                       texel_size=meta["texel_size"], factor=meta["factor"],
                       seed=meta["seed"])
    for vid in rig.view_ids():
        scene.hr_images[vid] = _from_png(d / "hr" / f"{vid:03d}.png")
        scene.lr_images[vid] = _from_png(d / "lr" / f"{vid:03d}.png")
    return scene
