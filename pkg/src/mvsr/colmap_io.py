"""COLMAP sparse model ingestion and the unified camera-to-world pose manifest.

Reads ``cameras.txt``/``cameras.bin`` and ``images.txt``/``images.bin`` in
COLMAP's on-disk layout (little-endian, u64 record counts, f64 parameters;
2D observation blocks are skipped), converts the world-to-camera poses into
camera-to-world form, and serializes everything into a single ``poses.json``
manifest with an explicit schema version.

Only PINHOLE and SIMPLE_PINHOLE camera models are accepted; distortion
models are rejected rather than silently linearized.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_SCHEMA_VERSION = 1

# COLMAP model_id -> (name, num_params)
_SUPPORTED_MODELS = {0: ("SIMPLE_PINHOLE", 3), 1: ("PINHOLE", 4)}
_MODEL_IDS = {name: mid for mid, (name, _) in _SUPPORTED_MODELS.items()}
# Known COLMAP model names we recognize but refuse.
_KNOWN_UNSUPPORTED = {
    "SIMPLE_RADIAL", "RADIAL", "OPENCV", "OPENCV_FISHEYE", "FULL_OPENCV",
    "FOV", "SIMPLE_RADIAL_FISHEYE", "RADIAL_FISHEYE", "THIN_PRISM_FISHEYE",
}

QUAT_NORM_TOL = 1e-3
ROTATION_TOL = 1e-9


class MalformedFileError(Exception):
    """Truncated, mis-counted, or syntactically invalid model file."""

    def __init__(self, path, detail, line=None, offset=None):
        self.path = str(path)
        self.line = line
        self.offset = offset
        where = ""
        if line is not None:
            where = f" line {line}"
        elif offset is not None:
            where = f" byte offset {offset}"
        super().__init__(f"{self.path}{where}: {detail}")


class UnsupportedModelError(Exception):
    """Camera model other than PINHOLE/SIMPLE_PINHOLE."""


class NonUnitQuaternionError(Exception):
    """Stored rotation quaternion deviates from unit norm beyond tolerance."""


class DanglingCameraRefError(Exception):
    """Image references a camera id absent from the cameras table."""


class DuplicateViewIdError(Exception):
    """Two images share the same id."""


class SchemaVersionMismatchError(Exception):
    """Manifest file carries an unknown schema version."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole calibration. Pixel centers sit at integer coordinates."""

    model: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.model not in _MODEL_IDS:
            raise ValueError(f"unsupported camera model {self.model!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image extents must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside image")
        if self.model == "SIMPLE_PINHOLE" and self.fx != self.fy:
            raise ValueError("SIMPLE_PINHOLE requires fx == fy")

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera-to-world rotation and center.

    ``rotation`` maps camera coordinates to world coordinates; the camera
    looks along its +z axis, so the viewing direction is the third column.
    """

    rotation: np.ndarray
    center: np.ndarray
    view_id: int
    image_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        r = self.rotation
        if r.shape != (3, 3) or self.center.shape != (3,):
            raise ValueError("rotation must be 3x3 and center a 3-vector")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ROTATION_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation determinant is not +1")

    @property
    def view_dir(self) -> np.ndarray:
        """Unit optical axis in world coordinates (third rotation column)."""
        return self.rotation[:, 2].copy()

    def world_to_camera(self):
        """Inverse transform as (R_wc, t_wc)."""
        r_wc = self.rotation.T
        return r_wc, -r_wc @ self.center


@dataclass
class PoseManifest:
    """All cameras of one reconstruction in camera-to-world form."""

    cameras: list = field(default_factory=list)  # (view_id, CameraIntrinsics, CameraPose)
    scene_scale: float = 1.0

    def __post_init__(self):
        ids = [vid for vid, _, _ in self.cameras]
        if len(ids) != len(set(ids)):
            raise DuplicateViewIdError("duplicate view ids in manifest")

    def view_ids(self) -> list:
        return [vid for vid, _, _ in self.cameras]

    def get(self, view_id):
        """(intrinsics, pose) for one view."""
        for vid, intr, pose in self.cameras:
            if vid == view_id:
                return intr, pose
        raise KeyError(f"view id {view_id} not in manifest")


def quaternion_to_rotation(qvec) -> np.ndarray:
    """Rotation matrix from a (qw, qx, qy, qz) unit quaternion."""
    w, x, y, z = np.asarray(qvec, dtype=np.float64)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _read_exact(f, n, path):
    data = f.read(n)
    if len(data) != n:
        raise MalformedFileError(path, f"unexpected end of file, wanted {n} more bytes",
                                 offset=f.tell() - len(data))
    return data


def _intrinsics_from_params(model, width, height, params, path, where):
    try:
        if model == "SIMPLE_PINHOLE":
            f, cx, cy = params
            return CameraIntrinsics(model, width, height, f, f, cx, cy)
        fx, fy, cx, cy = params
        return CameraIntrinsics(model, width, height, fx, fy, cx, cy)
    except ValueError as exc:
        raise MalformedFileError(path, f"invalid intrinsics: {exc}", **where) from exc


def parse_cameras(path, format="text"):
    """Parse ``cameras.txt``/``cameras.bin`` into (id, CameraIntrinsics) pairs.

    Raises MalformedFileError for truncated or syntactically broken input and
    UnsupportedModelError for any model outside PINHOLE/SIMPLE_PINHOLE.
    """
    path = Path(path)
    if format == "text":
        return _parse_cameras_text(path)
    if format == "binary":
        return _parse_cameras_binary(path)
    raise ValueError(f"unknown format {format!r}")


def _parse_cameras_text(path):
    cameras = []
    with open(path, "r") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            elems = line.split()
            if len(elems) < 4:
                raise MalformedFileError(path, "camera line has too few fields", line=lineno)
            model = elems[1]
            if model not in _MODEL_IDS:
                raise UnsupportedModelError(f"{path} line {lineno}: camera model {model!r}")
            num_params = _SUPPORTED_MODELS[_MODEL_IDS[model]][1]
            try:
                cam_id = int(elems[0])
                width, height = int(elems[2]), int(elems[3])
                params = [float(v) for v in elems[4:]]
            except ValueError as exc:
                raise MalformedFileError(path, f"unparseable camera fields: {exc}",
                                         line=lineno) from exc
            if len(params) != num_params:
                raise MalformedFileError(
                    path, f"{model} expects {num_params} params, got {len(params)}",
                    line=lineno)
            cameras.append((cam_id, _intrinsics_from_params(
                model, width, height, params, path, {"line": lineno})))
    return cameras


def _parse_cameras_binary(path):
    cameras = []
    with open(path, "rb") as f:
        (num_cameras,) = struct.unpack("<Q", _read_exact(f, 8, path))
        for _ in range(num_cameras):
            cam_id, model_id, width, height = struct.unpack(
                "<iiQQ", _read_exact(f, 24, path))
            if model_id not in _SUPPORTED_MODELS:
                raise UnsupportedModelError(
                    f"{path}: camera {cam_id} uses model id {model_id}")
            model, num_params = _SUPPORTED_MODELS[model_id]
            params = struct.unpack(
                f"<{num_params}d", _read_exact(f, 8 * num_params, path))
            cameras.append((cam_id, _intrinsics_from_params(
                model, int(width), int(height), params, path,
                {"offset": f.tell()})))
        _check_trailing(f, path)
    return cameras


def _check_trailing(f, path):
    if f.read(1):
        raise MalformedFileError(path, "trailing bytes after declared records",
                                 offset=f.tell() - 1)


def _normalize_quaternion(qvec, path, where):
    norm = float(np.linalg.norm(qvec))
    if abs(norm - 1.0) > QUAT_NORM_TOL:
        raise NonUnitQuaternionError(
            f"{path}{where}: quaternion norm {norm:.6f} deviates from 1")
    return qvec / norm


def parse_images(path, format="text"):
    """Parse ``images.txt``/``images.bin``.

    Returns (image_id, camera_id, qvec, tvec, name) tuples with the raw
    world-to-camera quaternion (qw, qx, qy, qz) and translation; the 2D
    observation lines/blocks are discarded. Quaternions are normalized when
    within QUAT_NORM_TOL of unit norm and rejected otherwise.
    """
    path = Path(path)
    if format == "text":
        return _parse_images_text(path)
    if format == "binary":
        return _parse_images_binary(path)
    raise ValueError(f"unknown format {format!r}")


def _parse_images_text(path):
    images = []
    with open(path, "r") as f:
        lines = f.readlines()
    i = 0
    lineno = 0
    while i < len(lines):
        line = lines[i].strip()
        lineno = i + 1
        i += 1
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        if len(elems) < 10:
            raise MalformedFileError(path, "image line has too few fields", line=lineno)
        try:
            image_id = int(elems[0])
            qvec = np.array([float(v) for v in elems[1:5]])
            tvec = np.array([float(v) for v in elems[5:8]])
            camera_id = int(elems[8])
        except ValueError as exc:
            raise MalformedFileError(path, f"unparseable image fields: {exc}",
                                     line=lineno) from exc
        name = elems[9]
        qvec = _normalize_quaternion(qvec, path, f" line {lineno}")
        images.append((image_id, camera_id, qvec, tvec, name))
        # The following line holds the 2D observations (possibly empty);
        # consume without interpreting. Missing at EOF is accepted.
        if i < len(lines):
            i += 1
    return images


def _parse_images_binary(path):
    images = []
    with open(path, "rb") as f:
        (num_images,) = struct.unpack("<Q", _read_exact(f, 8, path))
        for _ in range(num_images):
            vals = struct.unpack("<idddddddi", _read_exact(f, 64, path))
            image_id = vals[0]
            qvec = np.array(vals[1:5])
            tvec = np.array(vals[5:8])
            camera_id = vals[8]
            chars = []
            while True:
                c = _read_exact(f, 1, path)
                if c == b"\x00":
                    break
                chars.append(c)
            name = b"".join(chars).decode("utf-8")
            (num_points,) = struct.unpack("<Q", _read_exact(f, 8, path))
            _read_exact(f, 24 * num_points, path)  # skip (x, y, point3D_id) triples
            qvec = _normalize_quaternion(qvec, path, f" offset {f.tell()}")
            images.append((image_id, camera_id, qvec, tvec, name))
        _check_trailing(f, path)
    return images


def build_manifest(cams, imgs) -> PoseManifest:
    """Assemble a camera-to-world manifest from parsed cameras and images.

    COLMAP stores world-to-camera (R_wc, t_wc); we keep
    rotation = R_wc^T and center = -R_wc^T t_wc.
    """
    cam_table = dict(cams)
    entries = []
    seen = set()
    for image_id, camera_id, qvec, tvec, name in imgs:
        if image_id in seen:
            raise DuplicateViewIdError(f"image id {image_id} appears twice")
        seen.add(image_id)
        if camera_id not in cam_table:
            raise DanglingCameraRefError(
                f"image {image_id} ({name!r}) references missing camera {camera_id}")
        r_wc = quaternion_to_rotation(qvec)
        rotation = r_wc.T
        center = -r_wc.T @ np.asarray(tvec, dtype=np.float64)
        pose = CameraPose(rotation=rotation, center=center,
                          view_id=image_id, image_name=name)
        entries.append((image_id, cam_table[camera_id], pose))
    entries.sort(key=lambda e: e[0])
    return PoseManifest(cameras=entries, scene_scale=_scene_scale(entries))


def _scene_scale(entries) -> float:
    if len(entries) < 2:
        return 1.0
    centers = np.stack([pose.center for _, _, pose in entries])
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    return radius if radius > 0.0 else 1.0


def write_manifest(manifest: PoseManifest, path) -> None:
    """Serialize to the ``poses.json`` schema. Floats keep full precision."""
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "scene_scale": manifest.scene_scale,
        "cameras": [
            {
                "view_id": vid,
                "image_name": pose.image_name,
                "model": intr.model,
                "width": intr.width,
                "height": intr.height,
                "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                "rotation": [list(row) for row in pose.rotation.tolist()],
                "center": pose.center.tolist(),
            }
            for vid, intr, pose in manifest.cameras
        ],
    }
    text = json.dumps(doc, indent=2)
    if str(path) == "-":
        import sys
        sys.stdout.write(text + "\n")
        return
    Path(path).write_text(text + "\n")


def read_manifest(path) -> PoseManifest:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFileError(path, f"invalid JSON: {exc}") from exc
    version = doc.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise SchemaVersionMismatchError(
            f"{path}: schema version {version!r}, expected {MANIFEST_SCHEMA_VERSION}")
    entries = []
    for cam in doc["cameras"]:
        intr = CameraIntrinsics(cam["model"], cam["width"], cam["height"],
                                cam["fx"], cam["fy"], cam["cx"], cam["cy"])
        pose = CameraPose(rotation=np.array(cam["rotation"]),
                          center=np.array(cam["center"]),
                          view_id=cam["view_id"],
                          image_name=cam["image_name"])
        entries.append((cam["view_id"], intr, pose))
    return PoseManifest(cameras=entries, scene_scale=doc["scene_scale"])
