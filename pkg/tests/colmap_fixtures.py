"""Independent COLMAP sparse-model writers used as round-trip oracles.

These serializers are written directly from the on-disk layout (text tables
and little-endian binary records) and deliberately share no code with the
parser under test.
"""

import struct

import numpy as np

MODEL_IDS = {"SIMPLE_PINHOLE": 0, "PINHOLE": 1}
MODEL_NUM_PARAMS = {"SIMPLE_PINHOLE": 3, "PINHOLE": 4}


def camera_params(model, fx, fy, cx, cy):
    if model == "SIMPLE_PINHOLE":
        assert fx == fy
        return [fx, cx, cy]
    return [fx, fy, cx, cy]


def write_cameras_text(path, cams):
    """cams: list of (cam_id, model, width, height, params)."""
    lines = [
        "# Camera list with one line of data per camera:",
        "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]",
        f"# Number of cameras: {len(cams)}",
    ]
    for cam_id, model, width, height, params in cams:
        fields = [str(cam_id), model, str(width), str(height)]
        fields += [repr(float(p)) for p in params]
        lines.append(" ".join(fields))
    path.write_text("\n".join(lines) + "\n")


def write_cameras_binary(path, cams, model_id_override=None):
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(cams)))
        for cam_id, model, width, height, params in cams:
            model_id = MODEL_IDS[model] if model_id_override is None else model_id_override
            f.write(struct.pack("<iiQQ", cam_id, model_id, width, height))
            f.write(struct.pack(f"<{len(params)}d", *params))


def write_images_text(path, images, obs_line=""):
    """images: list of (image_id, qvec, tvec, camera_id, name)."""
    lines = [
        "# Image list with two lines of data per image:",
        "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
        "#   POINTS2D[] as (X, Y, POINT3D_ID)",
    ]
    for image_id, qvec, tvec, camera_id, name in images:
        fields = [str(image_id)]
        fields += [repr(float(v)) for v in qvec]
        fields += [repr(float(v)) for v in tvec]
        fields += [str(camera_id), name]
        lines.append(" ".join(fields))
        lines.append(obs_line)
    path.write_text("\n".join(lines) + "\n")


def write_images_binary(path, images, points2d=None):
    """points2d: optional list of (x, y, point3d_id) written for every image."""
    pts = points2d or []
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(images)))
        for image_id, qvec, tvec, camera_id, name in images:
            f.write(struct.pack("<idddddddi", image_id, *qvec, *tvec, camera_id))
            f.write(name.encode("utf-8") + b"\x00")
            f.write(struct.pack("<Q", len(pts)))
            for x, y, pid in pts:
                f.write(struct.pack("<ddq", x, y, pid))


def look_at_pose(center, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera (qvec wxyz, tvec) for a camera at ``center`` looking
    at ``target`` with +z forward, +y down-ish (x right, y completes)."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(up, forward)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        right = np.cross(np.array([1.0, 0.0, 0.0]), forward)
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(forward, right)
    # Rows of R_wc are the camera axes expressed in world coordinates.
    r_wc = np.stack([right, down, forward])
    t_wc = -r_wc @ center
    return rotmat_to_quat(r_wc), t_wc


def rotmat_to_quat(r):
    """(qw, qx, qy, qz) from a rotation matrix, w >= 0."""
    m = np.asarray(r, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k]) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def ring_model(n=8, radius=4.0, width=640, height=480, focal=500.0):
    """n cameras on a circle in the xz-plane, all looking at the origin."""
    cams = [(1, "PINHOLE", width, height,
             [focal, focal, width / 2.0, height / 2.0])]
    images = []
    for i in range(n):
        a = 2.0 * np.pi * i / n
        c = np.array([radius * np.cos(a), 0.0, radius * np.sin(a)])
        qvec, tvec = look_at_pose(c, (0.0, 0.0, 0.0))
        images.append((i + 1, qvec, tvec, 1, f"img{i + 1:03d}.png"))
    return cams, images
