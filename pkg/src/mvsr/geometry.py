"""Two-view epipolar geometry.

Fundamental matrices from calibrated pose pairs, epipolar lines for pixel
queries, clipping of those lines against the image rectangle, and uniform
sampling of the clipped segments. Everything here runs in double precision;
fundamental matrices are badly conditioned under wide baselines and the
downstream feature math is float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .colmap_io import CameraIntrinsics

BASELINE_DEGENERACY = 1e-9
ZERO_LINE_TOL = 1e-12


class SingularIntrinsicsError(Exception):
    """Focal length numerically zero; K not invertible."""


class DegeneratePairError(Exception):
    """Operation requires a valid fundamental matrix."""


class ZeroLineError(Exception):
    """Query pixel coincides with the epipole; line direction undefined."""


class EmptySegmentError(Exception):
    """Segment does not intersect the image rectangle."""


@dataclass(frozen=True, eq=False)
class FundamentalMatrix:
    m: np.ndarray
    src_view: int
    dst_view: int
    valid: bool


@dataclass(frozen=True, eq=False)
class EpipolarSegment:
    line: tuple
    p0: np.ndarray
    p1: np.ndarray
    inside: bool


def _skew(t):
    return np.array([
        [0.0, -t[2], t[1]],
        [t[2], 0.0, -t[0]],
        [-t[1], t[0], 0.0],
    ])


def relative_motion(pose_i, pose_j):
    """World-to-camera motion (R, t) taking camera-i coordinates to camera-j."""
    r = pose_j.rotation.T @ pose_i.rotation
    t = pose_j.rotation.T @ (pose_i.center - pose_j.center)
    return r, t


def fundamental(cam_i, cam_j, scene_scale: float = 1.0) -> FundamentalMatrix:
    """F mapping pixels of view i to epipolar lines in view j.

    cam_i and cam_j are (CameraIntrinsics, CameraPose) pairs. The pair is
    flagged invalid (not an error) when the baseline is shorter than
    1e-9 * scene_scale; epipolar geometry is undefined under pure rotation.
    """
    intr_i, pose_i = cam_i
    intr_j, pose_j = cam_j
    for intr in (intr_i, intr_j):
        if abs(intr.fx) < 1e-12 or abs(intr.fy) < 1e-12:
            raise SingularIntrinsicsError(f"focal length ~0 in view pair")
    r, t = relative_motion(pose_i, pose_j)
    if np.linalg.norm(t) < BASELINE_DEGENERACY * scene_scale:
        return FundamentalMatrix(m=np.zeros((3, 3)), src_view=pose_i.view_id,
                                 dst_view=pose_j.view_id, valid=False)
    k_i_inv = np.linalg.inv(intr_i.matrix())
    k_j_inv_t = np.linalg.inv(intr_j.matrix()).T
    f = k_j_inv_t @ _skew(t) @ r @ k_i_inv
    f = f / np.linalg.norm(f)
    return FundamentalMatrix(m=f, src_view=pose_i.view_id,
                             dst_view=pose_j.view_id, valid=True)


def epipolar_line(f: FundamentalMatrix, x) -> tuple:
    """Line (a, b, c) in the destination view for source pixel x.

    Normalized to a^2 + b^2 = 1 with canonical sign b > 0 (a > 0 when b = 0).
    """
    if not f.valid:
        raise DegeneratePairError(
            f"views {f.src_view}->{f.dst_view} have no epipolar geometry")
    u, v = float(x[0]), float(x[1])
    a, b, c = f.m @ np.array([u, v, 1.0])
    norm = float(np.hypot(a, b))
    if norm < ZERO_LINE_TOL:
        raise ZeroLineError(f"pixel ({u}, {v}) lies at the epipole")
    a, b, c = a / norm, b / norm, c / norm
    if b < 0.0 or (b == 0.0 and a < 0.0):
        a, b, c = -a, -b, -c
    return (a, b, c)


def clip_to_rect(line, width: int, height: int) -> EpipolarSegment:
    """Clip an a^2+b^2=1 line to the pixel-center rectangle [0,w-1]x[0,h-1].

    Empty intersection yields inside=False; endpoints are ordered by
    increasing x, ties broken by increasing y.
    """
    a, b, c = (float(v) for v in line)
    # Nearest point to the origin and the line direction.
    p = np.array([-c * a, -c * b])
    d = np.array([-b, a])
    t_lo, t_hi = -np.inf, np.inf
    for axis, limit in ((0, width - 1.0), (1, height - 1.0)):
        if abs(d[axis]) < 1e-15:
            if p[axis] < 0.0 or p[axis] > limit:
                return EpipolarSegment(line=(a, b, c), p0=np.zeros(2),
                                       p1=np.zeros(2), inside=False)
            continue
        t0 = (0.0 - p[axis]) / d[axis]
        t1 = (limit - p[axis]) / d[axis]
        if t0 > t1:
            t0, t1 = t1, t0
        t_lo = max(t_lo, t0)
        t_hi = min(t_hi, t1)
    if t_lo > t_hi:
        return EpipolarSegment(line=(a, b, c), p0=np.zeros(2),
                               p1=np.zeros(2), inside=False)
    e0 = p + t_lo * d
    e1 = p + t_hi * d
    if (e0[0], e0[1]) > (e1[0], e1[1]):
        e0, e1 = e1, e0
    return EpipolarSegment(line=(a, b, c), p0=e0, p1=e1, inside=True)


def sample_segment(seg: EpipolarSegment, k: int) -> np.ndarray:
    """k uniformly spaced points from p0 to p1 inclusive, shape (k, 2)."""
    if not seg.inside:
        raise EmptySegmentError("segment lies outside the rectangle")
    if k < 2:
        raise ValueError("need at least 2 samples")
    steps = np.arange(k, dtype=np.float64)[:, None] / (k - 1)
    return seg.p0[None, :] + steps * (seg.p1 - seg.p0)[None, :]


def scale_intrinsics(intr: CameraIntrinsics, stride: int) -> CameraIntrinsics:
    """Intrinsics of the feature map obtained by striding the image.

    Pixel centers sit at integer coordinates, so the principal point maps
    through (c + 0.5)/stride - 0.5 rather than a bare division.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride == 1:
        return intr
    return CameraIntrinsics(
        model=intr.model,
        width=intr.width // stride,
        height=intr.height // stride,
        fx=intr.fx / stride,
        fy=intr.fy / stride,
        cx=(intr.cx + 0.5) / stride - 0.5,
        cy=(intr.cy + 0.5) / stride - 0.5,
    )


def project_point(intr: CameraIntrinsics, pose, point) -> np.ndarray:
    """Pixel coordinates of a world point; z <= 0 (behind camera) raises."""
    x_cam = pose.rotation.T @ (np.asarray(point, dtype=np.float64) - pose.center)
    if x_cam[2] <= 0.0:
        raise ValueError("point is behind the camera")
    return np.array([
        intr.fx * x_cam[0] / x_cam[2] + intr.cx,
        intr.fy * x_cam[1] / x_cam[2] + intr.cy,
    ])


def point_line_distance(line, p) -> float:
    """Unsigned distance from pixel p to an a^2+b^2=1 line."""
    a, b, c = line
    return abs(a * float(p[0]) + b * float(p[1]) + c)
