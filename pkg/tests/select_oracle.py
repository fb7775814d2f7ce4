"""Brute-force replay of auxiliary view selection, kept independent of the
implementation: conditions via explicit angles (atan2/sin), python-float
arithmetic, and a from-scratch sort/stride/pad pipeline."""

import math

import numpy as np


def replay_selection(manifest, target, cfg):
    """Returns (auxiliary_ids, distances, padded) for strategy 'auxiliary'."""
    _, tp = manifest.get(target)
    scale = manifest.scene_scale if cfg.normalize_pos else 1.0
    d_i = tp.rotation[:, 2]
    finite, infinite = [], []
    for vid in manifest.view_ids():
        if vid == target:
            continue
        _, p = manifest.get(vid)
        u = p.center - tp.center
        d_j = p.rotation[:, 2]
        ahead = float(np.dot(d_i, u)) > 0.0
        nu = math.sqrt(float(np.dot(u, u)))
        if nu == 0.0:
            overlap = False
        else:
            theta = math.atan2(float(np.linalg.norm(np.cross(u, d_j))),
                               float(np.dot(u, d_j)))
            overlap = math.sin(theta) >= 0.5
        d_pos = nu / scale
        cos = float(np.dot(d_i, d_j)) / (
            math.sqrt(float(np.dot(d_i, d_i))) * math.sqrt(float(np.dot(d_j, d_j))))
        mixed = cfg.lambda_pos * d_pos + (1.0 - cfg.lambda_pos) * (1.0 - cos)
        if ahead and overlap:
            finite.append((mixed, vid))
        else:
            infinite.append((mixed, vid))
    finite.sort()
    infinite.sort()
    picks = [(d, vid) for d, vid in
             (finite[i] for i in range(0, len(finite), cfg.stride_l))][:cfg.n_ref]
    padded = False
    if len(picks) < cfg.n_ref:
        padded = True
        used = {vid for _, vid in picks}
        picks += [e for e in finite if e[1] not in used][:cfg.n_ref - len(picks)]
    if len(picks) < cfg.n_ref:
        picks += [(math.inf, vid) for _, vid in infinite[:cfg.n_ref - len(picks)]]
    return [vid for _, vid in picks], [d for d, _ in picks], padded
