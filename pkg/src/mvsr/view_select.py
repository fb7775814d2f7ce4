"""Pose-based auxiliary view selection.

Candidates are filtered by two geometric conditions (candidate ahead of the
target along its optical axis; candidate axis at least 30 degrees off the
baseline), ranked by a mixed position/direction distance, and picked every
l-th position along the sorted list. Degraded rigs fall back to unused and
then to filtered-out candidates so callers always get a fixed-size list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .colmap_io import PoseManifest

SELECTION_SCHEMA_VERSION = 1

STRATEGIES = ("auxiliary", "nearest", "random")


class UnknownViewError(Exception):
    """Target view id not present in the manifest."""


class NotEnoughViewsError(Exception):
    """Fewer candidates than requested auxiliaries, even with fallback."""


@dataclass(frozen=True)
class SelectionConfig:
    lambda_pos: float = 0.5
    n_ref: int = 4
    stride_l: int = 2
    strategy: str = "auxiliary"
    normalize_pos: bool = True
    random_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lambda_pos <= 1.0:
            raise ValueError("lambda_pos must lie in [0, 1]")
        if self.n_ref < 1:
            raise ValueError("n_ref must be >= 1")
        if self.stride_l < 1:
            raise ValueError("stride_l must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")


@dataclass(frozen=True)
class SelectionResult:
    target: int
    auxiliaries: list
    distances: list
    padded: bool


def cond_closer(target, cand) -> bool:
    """Candidate center strictly ahead of the target along its optical axis."""
    return float(target.view_dir @ (cand.center - target.center)) > 0.0


def cond_overlap(target, cand) -> bool:
    """sin of the baseline/candidate-axis angle at least 1/2, inclusive.

    Evaluated as 2*|u x d| >= |u|*|d| to keep the boundary case exact-ish;
    coincident centers fail.
    """
    u = cand.center - target.center
    nu = float(np.linalg.norm(u))
    if nu == 0.0:
        return False
    d = cand.view_dir
    return 2.0 * float(np.linalg.norm(np.cross(u, d))) >= nu * float(np.linalg.norm(d))


def _mixed_distance(target, cand, cfg, scene_scale):
    d_pos = float(np.linalg.norm(target.center - cand.center))
    if cfg.normalize_pos:
        d_pos /= scene_scale
    di, dj = target.view_dir, cand.view_dir
    cos = float(di @ dj) / (float(np.linalg.norm(di)) * float(np.linalg.norm(dj)))
    d_dir = 1.0 - cos
    return cfg.lambda_pos * d_pos + (1.0 - cfg.lambda_pos) * d_dir


def pair_distance(target, cand, cfg: SelectionConfig, scene_scale: float = 1.0):
    """Mixed distance, or inf when either geometric condition fails."""
    if not (cond_closer(target, cand) and cond_overlap(target, cand)):
        return math.inf
    return _mixed_distance(target, cand, cfg, scene_scale)


def select_auxiliary(manifest: PoseManifest, target: int,
                     cfg: SelectionConfig = SelectionConfig()) -> SelectionResult:
    """Pick cfg.n_ref auxiliary views for one target."""
    ids = manifest.view_ids()
    if target not in ids:
        raise UnknownViewError(f"view {target} not in manifest")
    _, tpose = manifest.get(target)
    cands = [(vid, manifest.get(vid)[1]) for vid in ids if vid != target]
    if len(cands) < cfg.n_ref:
        raise NotEnoughViewsError(
            f"{len(cands)} candidates for n_ref={cfg.n_ref}")

    if cfg.strategy == "nearest":
        ranked = sorted(
            ((float(np.linalg.norm(tpose.center - p.center))
              / (manifest.scene_scale if cfg.normalize_pos else 1.0), vid)
             for vid, p in cands))
        picks = ranked[:cfg.n_ref]
        return SelectionResult(target=target,
                               auxiliaries=[vid for _, vid in picks],
                               distances=[d for d, _ in picks], padded=False)

    if cfg.strategy == "random":
        rng = np.random.default_rng(cfg.random_seed)
        pool = sorted(vid for vid, _ in cands)
        chosen = [int(v) for v in rng.choice(pool, size=cfg.n_ref, replace=False)]
        dist = {vid: _mixed_distance(tpose, p, cfg, manifest.scene_scale)
                for vid, p in cands}
        return SelectionResult(target=target, auxiliaries=chosen,
                               distances=[dist[v] for v in chosen], padded=False)

    finite, infinite = [], []
    for vid, pose in cands:
        d = pair_distance(tpose, pose, cfg, manifest.scene_scale)
        raw = _mixed_distance(tpose, pose, cfg, manifest.scene_scale)
        (finite if math.isfinite(d) else infinite).append((d, raw, vid))
    finite.sort(key=lambda e: (e[0], e[2]))
    infinite.sort(key=lambda e: (e[1], e[2]))

    picks = [finite[i] for i in range(0, len(finite), cfg.stride_l)][:cfg.n_ref]
    padded = False
    if len(picks) < cfg.n_ref:
        padded = True
        used = {vid for _, _, vid in picks}
        spare = [e for e in finite if e[2] not in used]
        picks += spare[:cfg.n_ref - len(picks)]
    if len(picks) < cfg.n_ref:
        picks += infinite[:cfg.n_ref - len(picks)]
    return SelectionResult(target=target,
                           auxiliaries=[vid for _, _, vid in picks],
                           distances=[d for d, _, vid in picks],
                           padded=padded)


def _encode_distance(d):
    return "inf" if math.isinf(d) else d


def _decode_distance(d):
    return math.inf if d == "inf" else float(d)


def write_selection_table(results, cfg: SelectionConfig, path) -> None:
    """Serialize per-target selections next to the pose manifest."""
    doc = {
        "schema_version": SELECTION_SCHEMA_VERSION,
        "config": {
            "lambda_pos": cfg.lambda_pos,
            "n_ref": cfg.n_ref,
            "stride_l": cfg.stride_l,
            "strategy": cfg.strategy,
            "normalize_pos": cfg.normalize_pos,
            "random_seed": cfg.random_seed,
        },
        "selections": [
            {
                "target": r.target,
                "auxiliaries": list(r.auxiliaries),
                "distances": [_encode_distance(d) for d in r.distances],
                "padded": r.padded,
            }
            for r in results
        ],
    }
    text = json.dumps(doc, indent=2)
    if str(path) == "-":
        import sys
        sys.stdout.write(text + "\n")
        return
    Path(path).write_text(text + "\n")


def read_selection_table(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SELECTION_SCHEMA_VERSION:
        raise ValueError(f"{path}: unknown selection table schema")
    cfg = SelectionConfig(**doc["config"])
    results = [
        SelectionResult(target=s["target"], auxiliaries=s["auxiliaries"],
                        distances=[_decode_distance(d) for d in s["distances"]],
                        padded=s["padded"])
        for s in doc["selections"]
    ]
    return results, cfg
