"""Epipolar-guided attention across auxiliary views.

For every target feature pixel and auxiliary view, candidate positions are
sampled uniformly along the clipped epipolar line; keys and values are
bilinearly gathered there, scored against a learned query projection, and
the per-view results are merged by a small per-pixel self-attention over
the (query + views) token set. A full cross-attention variant over all
auxiliary positions exists for ablation; both variants meter their
score/aggregate multiply-accumulates so the linear-vs-quadratic scaling
claim is checkable, not anecdotal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Parameter, ShapeMismatchError, Tensor
from .autodiff import _bilinear_weights

ATTENTION_VARIANTS = ("epipolar", "full_cross")


class BudgetExceededError(Exception):
    """full_cross_attend asked to score more positions than the cap allows."""


@dataclass(frozen=True)
class AttentionConfig:
    k_epi: int
    channels: int
    n_heads: int = 1
    variant: str = "epipolar"
    cross_budget: int = 4096  # max feature positions for the ablation variant

    def __post_init__(self):
        if self.k_epi < 2:
            raise ValueError("k_epi must be >= 2")
        if self.channels % self.n_heads:
            raise ValueError("channels must divide evenly over heads")
        if self.variant not in ATTENTION_VARIANTS:
            raise ValueError(f"variant must be one of {ATTENTION_VARIANTS}")


@dataclass
class EpiSampleGrid:
    coords: np.ndarray  # (HW, n_views, k, 2) feature-pixel (u, v)
    valid: np.ndarray   # (HW, n_views) bool
    feat_w: int
    feat_h: int


def build_sample_grid(target_cam, aux_cams, feat_w: int, feat_h: int,
                      stride: int, k: int,
                      scene_scale: float = 1.0) -> EpiSampleGrid:
    """Epipolar sample coordinates for every (feature pixel, aux view).

    Cameras are (intrinsics, pose) at image resolution; intrinsics are
    rescaled to the feature grid by ``stride``. A (pixel, view) entry is
    invalid when the pair is degenerate, the pixel sits at the epipole, or
    the line misses the feature rectangle.
    """
    intr_t, pose_t = target_cam
    sintr_t = geo.scale_intrinsics(intr_t, stride)
    n_views = len(aux_cams)
    hw = feat_w * feat_h
    ys, xs = np.mgrid[0:feat_h, 0:feat_w]
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(hw)], axis=0)
    coords = np.zeros((hw, n_views, k, 2))
    valid = np.zeros((hw, n_views), dtype=bool)
    steps = np.arange(k) / (k - 1)
    for j, (intr_a, pose_a) in enumerate(aux_cams):
        f = geo.fundamental((sintr_t, pose_t),
                            (geo.scale_intrinsics(intr_a, stride), pose_a),
                            scene_scale)
        if not f.valid:
            continue
        lines = (f.m @ pts).T  # (HW, 3)
        norm = np.hypot(lines[:, 0], lines[:, 1])
        ok = norm > geo.ZERO_LINE_TOL
        lines[ok] /= norm[ok, None]
        flip = (lines[:, 1] < 0) | ((lines[:, 1] == 0) & (lines[:, 0] < 0))
        lines[flip] *= -1.0
        a, b, c = lines[:, 0], lines[:, 1], lines[:, 2]
        # vectorized clipping of x*a + y*b + c = 0 against the feature rect
        px = -c * a
        py = -c * b
        dx = -b
        dy = a
        t_lo = np.full(hw, -np.inf)
        t_hi = np.full(hw, np.inf)
        for p_ax, d_ax, lim in ((px, dx, feat_w - 1.0), (py, dy, feat_h - 1.0)):
            par = np.abs(d_ax) < 1e-15
            ok &= ~par | ((p_ax >= 0.0) & (p_ax <= lim))
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (0.0 - p_ax) / d_ax
                t1 = (lim - p_ax) / d_ax
            swap = t0 > t1
            t0s = np.where(swap, t1, t0)
            t1s = np.where(swap, t0, t1)
            t_lo = np.where(par, t_lo, np.maximum(t_lo, t0s))
            t_hi = np.where(par, t_hi, np.minimum(t_hi, t1s))
        ok &= t_lo <= t_hi
        t_lo = np.where(ok, t_lo, 0.0)  # keep invalid rows finite
        t_hi = np.where(ok, t_hi, 0.0)
        e0 = np.stack([px + t_lo * dx, py + t_lo * dy], axis=-1)
        e1 = np.stack([px + t_hi * dx, py + t_hi * dy], axis=-1)
        swap = (e0[:, 0] > e1[:, 0]) | ((e0[:, 0] == e1[:, 0])
                                        & (e0[:, 1] > e1[:, 1]))
        e0[swap], e1[swap] = e1[swap], e0[swap].copy()
        coords[:, j, :, :] = e0[:, None, :] + steps[None, :, None] \
            * (e1 - e0)[:, None, :]
        coords[~ok, j] = 0.0
        valid[:, j] = ok
    return EpiSampleGrid(coords=coords, valid=valid,
                         feat_w=feat_w, feat_h=feat_h)


def gather_operator(feat_h: int, feat_w: int, coords) -> sp.csr_matrix:
    """Sparse (N, H*W) bilinear gather; out-of-bounds rows are all-zero.

    Equivalent to bilinear_sample on the flattened feature map but
    precomputable once per grid and cheap to apply every iteration.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    n = coords.shape[0]
    taps, inside = _bilinear_weights(feat_h, feat_w, coords)
    rows, cols, vals = [], [], []
    for yi, xi, wt in taps:
        w = np.where(inside, wt, 0.0)
        nz = w != 0.0
        rows.append(np.nonzero(nz)[0])
        cols.append((yi * feat_w + xi)[nz])
        vals.append(w[nz])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, feat_h * feat_w))


class GridCache:
    """Memo for sample grids and gather operators, keyed by the caller."""

    def __init__(self):
        self._store = {}

    def get(self, key, build):
        if key not in self._store:
            self._store[key] = build()
        return self._store[key]

    def __len__(self):
        return len(self._store)


class EpiAttention:
    """Learned projections + the epipolar / cross attention forward passes.

    One instance per RET block; holds the query/key/value maps for the
    per-view stage and the QKV maps of the view-aggregation stage.
    """

    def __init__(self, cfg: AttentionConfig, rng, name: str = "est"):
        self.cfg = cfg
        self.name = name
        c = cfg.channels
        # Identity query/key maps at the start: initial scores then depend
        # directly on the input features instead of a random projection,
        # and callers can impose a specific score structure by overriding
        # the query map.
        w_q = np.eye(c, dtype=np.float32)
        self.w_q = Tensor(w_q.copy(), requires_grad=True)
        self.w_k = Tensor(w_q.copy(), requires_grad=True)
        self.w_v = Tensor(ad.kaiming_uniform((c, c), fan_in=c, rng=rng)
                          .astype(np.float32), requires_grad=True)
        self.b_q = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.b_k = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.b_v = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.w_aq = Tensor(ad.kaiming_uniform((c, c), fan_in=c, rng=rng)
                           .astype(np.float32), requires_grad=True)
        self.w_ak = Tensor(ad.kaiming_uniform((c, c), fan_in=c, rng=rng)
                           .astype(np.float32), requires_grad=True)
        self.w_av = Tensor(ad.kaiming_uniform((c, c), fan_in=c, rng=rng)
                           .astype(np.float32), requires_grad=True)
        self.b_aq = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.b_ak = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.b_av = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.mac_count = 0
        # per-view pre-softmax scores from the most recent forward; unlike
        # the softmax weights these share one scale across views, so the
        # global argmax over views and samples is meaningful
        self.last_scores = None

    def parameters(self):
        named = [("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v),
                 ("b_q", self.b_q), ("b_k", self.b_k), ("b_v", self.b_v),
                 ("w_aq", self.w_aq), ("w_ak", self.w_ak), ("w_av", self.w_av),
                 ("b_aq", self.b_aq), ("b_ak", self.b_ak), ("b_av", self.b_av)]
        return [Parameter(t, f"{self.name}.{n}") for n, t in named]

    def _heads(self, x, hw, k):
        """(HW*k, C) -> (h, HW, k, d)."""
        h = self.cfg.n_heads
        d = self.cfg.channels // h
        y = ad.reshape(x, (hw, k, h, d))
        return ad.transpose(y, (2, 0, 1, 3))

    def _attend_gathered(self, qp, keys, values, hw, k):
        """Shared score/softmax/aggregate tail; returns (HW, C) and weights."""
        h = self.cfg.n_heads
        d = self.cfg.channels // h
        qh = ad.transpose(ad.reshape(qp, (hw, 1, h, d)), (2, 0, 1, 3))
        kh = self._heads(keys, hw, k)
        vh = self._heads(values, hw, k)
        logits = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))),
                          1.0 / math.sqrt(d))
        alpha = ad.softmax(logits, axis=-1)
        out = ad.matmul(alpha, vh)  # (h, HW, 1, d)
        out = ad.reshape(ad.transpose(ad.reshape(out, (h, hw, d)), (1, 0, 2)),
                         (hw, h * d))
        self.mac_count += 2 * hw * k * self.cfg.channels
        return out, alpha.data.reshape(h, hw, k), logits.data.reshape(h, hw, k)

    def epi_attend(self, q, aux_feats, grid: EpiSampleGrid, operators=None):
        """Per-view epipolar attention.

        q: (HW, C) target features; aux_feats: (Hf, Wf, C) per view; grid
        aligned with aux_feats order. ``operators`` may carry precomputed
        gather matrices (one per view); they are built on the fly otherwise.
        Returns (per-view (HW, C) outputs, per-view weights, validity).
        """
        hw, c = q.data.shape
        if c != self.cfg.channels:
            raise ShapeMismatchError(f"q has {c} channels, cfg {self.cfg.channels}")
        if grid.coords.shape[1] != len(aux_feats):
            raise ShapeMismatchError("grid views != aux feature count")
        k = grid.coords.shape[2]
        qp = ad.add(ad.matmul(q, self.w_q), self.b_q)
        outs, weights, scores = [], [], []
        validity = grid.valid.astype(np.float32)
        for j, feat in enumerate(aux_feats):
            fh, fw, fc = feat.data.shape
            if fc != c:
                raise ShapeMismatchError("aux channel mismatch")
            op = operators[j] if operators is not None else \
                gather_operator(fh, fw, grid.coords[:, j]).astype(feat.data.dtype)
            flat = ad.reshape(feat, (fh * fw, c))
            keys = ad.sparse_matmul(op, ad.add(ad.matmul(flat, self.w_k),
                                               self.b_k))
            values = ad.sparse_matmul(op, ad.add(ad.matmul(flat, self.w_v),
                                                 self.b_v))
            out, alpha, logit = self._attend_gathered(qp, keys, values, hw, k)
            out = ad.mul(out, Tensor(validity[:, j:j + 1]))
            outs.append(out)
            weights.append(alpha)
            scores.append(logit)
        self.last_scores = scores
        return outs, weights, validity

    def full_cross_attend(self, q, aux_feats):
        """Ablation: score every auxiliary position for every query."""
        hw, c = q.data.shape
        qp = ad.add(ad.matmul(q, self.w_q), self.b_q)
        outs, weights, scores = [], [], []
        for feat in aux_feats:
            fh, fw, fc = feat.data.shape
            if fc != c:
                raise ShapeMismatchError("aux channel mismatch")
            if fh * fw > self.cfg.cross_budget:
                raise BudgetExceededError(
                    f"{fh * fw} positions exceed cap {self.cfg.cross_budget}")
            flat = ad.reshape(feat, (fh * fw, c))
            keys = ad.add(ad.matmul(flat, self.w_k), self.b_k)
            values = ad.add(ad.matmul(flat, self.w_v), self.b_v)
            # one shared key set per view, scored by every query
            h = self.cfg.n_heads
            d = c // h
            qh = ad.transpose(ad.reshape(qp, (hw, h, d)), (1, 0, 2))
            kh = ad.transpose(ad.reshape(keys, (fh * fw, h, d)), (1, 0, 2))
            vh = ad.transpose(ad.reshape(values, (fh * fw, h, d)), (1, 0, 2))
            logits = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))),
                              1.0 / math.sqrt(d))
            alpha = ad.softmax(logits, axis=-1)
            out = ad.matmul(alpha, vh)  # (h, HW, d)
            out = ad.reshape(ad.transpose(out, (1, 0, 2)), (hw, c))
            self.mac_count += 2 * hw * fh * fw * c
            outs.append(out)
            weights.append(alpha.data.copy())
            scores.append(logits.data.copy())
        validity = np.ones((hw, len(aux_feats)), dtype=np.float32)
        self.last_scores = scores
        return outs, weights, validity

    def aggregate_views(self, q, per_view, validity):
        """Per-pixel self-attention over {query} + valid view tokens."""
        hw, c = q.data.shape
        n = len(per_view)
        if validity.shape != (hw, n):
            raise ShapeMismatchError("validity shape mismatch")
        toks = [ad.reshape(q, (hw, 1, c))]
        toks += [ad.reshape(f, (hw, 1, c)) for f in per_view]
        tokens = ad.concat(toks, axis=1)  # (HW, n+1, C)
        keys = ad.add(ad.matmul(tokens, self.w_ak), self.b_ak)
        values = ad.add(ad.matmul(tokens, self.w_av), self.b_av)
        qtok = ad.reshape(ad.add(ad.matmul(q, self.w_aq), self.b_aq),
                          (hw, 1, c))
        logits = ad.scale(ad.matmul(qtok, ad.transpose(keys, (0, 2, 1))),
                          1.0 / math.sqrt(c))
        mask = np.concatenate(
            [np.ones((hw, 1), dtype=np.float32), validity], axis=1)
        logits = ad.add(logits, Tensor(((mask - 1.0) * 1e9)[:, None, :]))
        alpha = ad.softmax(logits, axis=-1)
        out = ad.reshape(ad.matmul(alpha, values), (hw, c))
        any_valid = (validity.any(axis=1)).astype(np.float32)
        return ad.mul(out, Tensor(any_valid[:, None]))

    def forward(self, q, aux_feats, grid=None, operators=None):
        """attend + aggregate under the configured variant; (HW, C) out."""
        if self.cfg.variant == "epipolar":
            outs, weights, validity = self.epi_attend(q, aux_feats, grid,
                                                      operators)
        else:
            outs, weights, validity = self.full_cross_attend(q, aux_feats)
        return self.aggregate_views(q, outs, validity), weights


def export_attention_pgm(path, grid: EpiSampleGrid, weights, query_index: int,
                         view_index: int, head: int = 0) -> None:
    """Paint one query's attention over its sample positions into a PGM."""
    h, w = grid.feat_h, grid.feat_w
    img = np.zeros((h, w))
    alpha = np.asarray(weights[view_index])[head, query_index]  # (k,)
    pts = grid.coords[query_index, view_index]
    if grid.valid[query_index, view_index]:
        for (u, v), a in zip(pts, alpha):
            yi = int(round(v))
            xi = int(round(u))
            if 0 <= yi < h and 0 <= xi < w:
                img[yi, xi] = max(img[yi, xi], a)
    peak = img.max()
    if peak > 0:
        img = img / peak
    data = (img * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
