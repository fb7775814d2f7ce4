"""Multi-view super-resolution network and its training loop.

Three residual blocks extract target features at strides 1/2/4; at each
scale an epipolar attention unit injects detail gathered from auxiliary
views, a small single-image pyramid supplies a prior, and the decoder
fuses both coarse-to-fine into a residual on top of a bicubic upsample.
The global residual means an untrained head leaves the bicubic baseline
untouched, which anchors both debugging and the evaluation deltas.
"""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage

from . import autodiff as ad
from . import resample
from .autodiff import Parameter, ShapeMismatchError, Tensor
from .colmap_io import PoseManifest
from .epiattn import AttentionConfig, EpiAttention, build_sample_grid, gather_operator
from .view_select import SelectionConfig, select_auxiliary


class NonFiniteLossError(Exception):
    """Training loss became NaN or infinite; a diagnostic dump was written."""


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 32
    n_ref: int = 4
    upscale: int = 2
    lambda_per: float = 0.0
    seed: int = 0
    n_heads: int = 1
    k_epi: tuple = (64, 32, 16)  # epipolar samples per scale, finest first
    use_est: bool = True

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.upscale not in (2, 4):
            raise ValueError("upscale must be 2 or 4")
        if self.n_ref < 1:
            raise ValueError("n_ref must be >= 1")
        if len(self.k_epi) != 3 or any(k < 2 for k in self.k_epi):
            raise ValueError("k_epi needs three entries >= 2")
        if self.lambda_per < 0:
            raise ValueError("lambda_per must be >= 0")

    @property
    def block_channels(self):
        c = self.base_channels
        return (c, 2 * c, 4 * c)

    @property
    def strides(self):
        return (1, 2, 4)


@dataclass(frozen=True)
class TrainConfig:
    iters: int
    batch: int = 2
    lr_start: float = 1e-4
    lr_end: float = 1e-7
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.iters < 1 or self.batch < 1 or self.checkpoint_every < 1:
            raise ValueError("iters, batch, checkpoint_every must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")


# tap orders for the patch-filter init, kernel center first; sparse outer
# rings keep the channel count down while widening the context
_TAP_ORDERS = {
    3: ((1, 1), (0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1),
        (2, 2)),
    5: ((2, 2), (1, 1), (1, 2), (1, 3), (2, 1), (2, 3), (3, 1), (3, 2),
        (3, 3), (0, 0), (0, 2), (0, 4), (2, 0), (2, 4), (4, 0), (4, 2),
        (4, 4)),
    7: ((3, 3), (2, 2), (2, 3), (2, 4), (3, 2), (3, 4), (4, 2), (4, 3),
        (4, 4), (1, 1), (1, 3), (1, 5), (3, 1), (3, 5), (5, 1), (5, 3),
        (5, 5), (0, 0), (0, 3), (0, 6), (3, 0), (3, 6), (6, 0), (6, 3),
        (6, 6)),
}


def _tap_kernel(ksize, ky, kx, sigma):
    """Unit-sum kernel reading one tap, optionally through a Gaussian."""
    k = np.zeros((ksize, ksize), dtype=np.float32)
    if sigma <= 0.0:
        k[ky, kx] = 1.0
        return k
    iy, ix = np.mgrid[0:ksize, 0:ksize]
    k = np.exp(-((iy - ky) ** 2 + (ix - kx) ** 2) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)


class Conv:
    """Same-padding convolution layer with bias.

    ``taps=True`` starts the leading output channels as filters that each
    read one input tap (center first), so the layer initially passes local
    patch content through unchanged; the remaining channels get a damped
    random init. ``tap_sigma`` softens every tap into a small Gaussian,
    which suppresses the aliased fine band that differs between views.
    Feature extractors start this way because the attention scores
    downstream need appearance-faithful features from the first iteration.
    """

    def __init__(self, name, cin, cout, rng, ksize=3, zero=False, taps=False,
                 tap_sigma=0.0):
        self.name = name
        shape = (ksize, ksize, cin, cout)
        if zero:
            w = np.zeros(shape, dtype=np.float32)
        else:
            w = ad.kaiming_uniform(shape, fan_in=ksize * ksize * cin,
                                   rng=rng).astype(np.float32)
            if taps and ksize in _TAP_ORDERS:
                order = _TAP_ORDERS[ksize]
                w *= 0.1
                for m in range(min(len(order) * cin, cout)):
                    ky, kx = order[m // cin]
                    w[:, :, :, m] *= 0.0
                    w[:, :, m % cin, m] = _tap_kernel(ksize, ky, kx, tap_sigma)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        self.pad = ksize // 2

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=1, pad=self.pad)

    def parameters(self):
        return [Parameter(self.w, self.name + ".w"),
                Parameter(self.b, self.name + ".b")]


class RetBlock:
    """One per-scale stage: shallow conv, epipolar fusion, residual refine.

    The attention operates on an augmented feature vector that carries
    -|f|^2/2 in an extra channel; with the query map reading that channel
    as a constant, the dot-product scores start out as negative squared
    distances between local patches. Plain correlation ranks keys by
    magnitude instead of similarity, which never localizes.

    At the image-level block the matching features come from a fixed bank
    of Gaussian-softened patch taps and the query/key maps stay frozen, so
    the scores remain an honest photometric matcher for the whole run; a
    second, sharp tap bank rides along in the value channels and supplies
    the sub-pixel detail that the reconstruction actually needs. Leaving
    the score path trainable loses the correspondence within a few hundred
    iterations because nothing in the reconstruction loss asks for it.
    """

    def __init__(self, name, cin, cout, k_epi, n_heads, rng, pool, use_est):
        self.name = name
        self.pool = pool
        self.feat = Conv(name + ".f", cin, cout, rng)
        self.match = self.taps = None
        if use_est:
            if cin == 1:
                self.match = Conv(name + ".m", cin, len(_TAP_ORDERS[7]), rng,
                                  ksize=7, taps=True, tap_sigma=0.7)
                self.taps = Conv(name + ".t", cin, len(_TAP_ORDERS[3]), rng,
                                 ksize=3, taps=True)
                base, extra = len(_TAP_ORDERS[7]), len(_TAP_ORDERS[3])
            else:
                base, extra = cout, 0
            # one channel for the squared norm, plus zero padding to keep
            # the head split even
            raw = base + 1 + extra
            self.est_base = base
            self.est_pad = n_heads * -(-raw // n_heads) - raw
            c1 = raw + self.est_pad
            self.est = EpiAttention(
                AttentionConfig(k_epi=k_epi, channels=c1, n_heads=n_heads),
                rng, name=name + ".est")
            # sharpness of the match: logits spread by
            # g2 * |patch difference|^2 / (2 sqrt(d)). 100 suits taps of
            # [0, 1] images; feature-level variants see larger vectors and
            # must start soft or the softmax saturates
            g2 = 100.0 if cin == 1 else 1.0
            wq = np.zeros((c1, c1), dtype=np.float32)
            wq[:base, :base] = np.float32(g2) * np.eye(base, dtype=np.float32)
            bq = np.zeros(c1, dtype=np.float32)
            bq[base] = g2
            self.est.w_q.data = wq
            self.est.b_q.data = bq
            # fused content enters damped: the residual path stays close to
            # the no-attention network until the matches prove useful
            self.est.w_av.data *= 0.1
            sel = np.zeros((c1, cout), dtype=np.float32)
            sel[:cout, :cout] = np.eye(cout)
            self._sel = Tensor(sel)
        else:
            self.est = None
        self.r1 = Conv(name + ".r1", cout, cout, rng)
        self.r2 = Conv(name + ".r2", cout, cout, rng)

    def est_features(self, t3, extra3=None):
        """Match features (+ content bank) -> norm-augmented attention input."""
        h, w, c = t3.data.shape
        n2 = ad.scale(ad.reshape(ad.sum_(ad.mul(t3, t3), axis=2), (h, w, 1)),
                      -0.5)
        parts = [t3, n2]
        if extra3 is not None:
            parts.append(extra3)
        if self.est_pad:
            parts.append(Tensor(np.zeros((h, w, self.est_pad),
                                         dtype=t3.data.dtype)))
        return ad.concat(parts, axis=-1)

    def forward(self, x, aux, grid=None, operators=None, want_weights=False):
        """Returns (features, advanced aux features, attention weights)."""
        if self.pool:
            x = ad.avgpool2(x)
            aux = [ad.avgpool2(a) for a in aux]
        fx = ad.relu(self.feat(x))
        weights = None
        if self.est is not None:
            if self.match is not None:
                fa = []
                q3 = self.est_features(self.match(x), self.taps(x))
                fan = [self.est_features(self.match(a), self.taps(a))
                       for a in aux]
            else:
                fa = [ad.relu(self.feat(a)) for a in aux]
                q3 = self.est_features(fx)
                fan = [self.est_features(a) for a in fa]
            h, w, c = fx.data.shape
            q = ad.reshape(q3, (h * w, q3.data.shape[2]))
            fused, wts = self.est.forward(q, fan, grid, operators)
            fused = ad.matmul(fused, self._sel)
            x1 = ad.add(fx, ad.reshape(fused, (h, w, c)))
            if want_weights:
                weights = wts
        else:
            fa = []
            x1 = fx
        out = ad.add(x1, self.r2(ad.relu(self.r1(x1))))
        return out, fa, weights

    def parameters(self):
        params = self.feat.parameters()
        if self.est is not None:
            eps = self.est.parameters()
            if self.match is not None:
                # the tap banks and the score maps stay fixed; see the
                # class docstring
                frozen = {id(self.est.w_q), id(self.est.b_q),
                          id(self.est.w_k), id(self.est.b_k)}
                eps = [p for p in eps if id(p.tensor) not in frozen]
            params += eps
        return params + self.r1.parameters() + self.r2.parameters()


def ret_block(x_j, aux_feats, grid_j, params: RetBlock):
    """Single-stage forward: f + epipolar fusion + residual refinement."""
    return params.forward(x_j, aux_feats, grid_j)[0]


def _as_input(img):
    """Image array or Tensor -> (H, W, 1) float32-or-better Tensor."""
    if isinstance(img, Tensor):
        t = img
    else:
        t = Tensor(np.asarray(img, dtype=np.float32))
    if t.data.ndim == 2:
        t = ad.reshape(t, (*t.data.shape, 1))
    if t.data.ndim != 3 or t.data.shape[2] != 1:
        raise ShapeMismatchError(f"expected single-channel image, got {t.shape}")
    return t


class SRNet:
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.base_channels
        chans = cfg.block_channels
        ins = (1, chans[0], chans[1])
        # the epipolar branch runs at the finest scale, where the matcher
        # operates on actual image patches; coarser blocks refine the fused
        # result without their own attention
        self.blocks = [
            RetBlock(f"ret{j}", ins[j], chans[j], cfg.k_epi[j], cfg.n_heads,
                     rng, pool=j > 0, use_est=cfg.use_est and j == 0)
            for j in range(3)
        ]
        self.sip0 = Conv("sip0", 1, chans[0], rng)
        self.sip1 = Conv("sip1", chans[0], chans[1], rng)
        self.sip2 = Conv("sip2", chans[1], chans[2], rng)
        self.fuse2 = Conv("fuse2", 8 * c, 8 * c, rng, ksize=1)
        self.fuse1 = Conv("fuse1", 6 * c, 4 * c, rng, ksize=1)
        self.fuse0 = Conv("fuse0", 3 * c, c, rng, ksize=1)
        self.refine = Conv("refine", c, c, rng)
        self.head = Conv("head", c, cfg.upscale ** 2, rng, zero=True)

    def parameters(self):
        params = []
        for blk in self.blocks:
            params += blk.parameters()
        for layer in (self.sip0, self.sip1, self.sip2, self.fuse2,
                      self.fuse1, self.fuse0, self.refine, self.head):
            params += layer.parameters()
        return params

    def state(self):
        return {p.name: p.tensor.data for p in self.parameters()}

    def load_state(self, mapping):
        for p in self.parameters():
            if p.name not in mapping:
                raise KeyError(f"checkpoint missing parameter {p.name}")
            arr = np.asarray(mapping[p.name], dtype=np.float32)
            if arr.shape != p.tensor.data.shape:
                raise ShapeMismatchError(
                    f"{p.name}: checkpoint {arr.shape} vs model "
                    f"{p.tensor.data.shape}")
            p.tensor.data = arr

    def sip_features(self, lr_target):
        t = _as_input(lr_target)
        s0 = ad.relu(self.sip0(t))
        s1 = ad.relu(self.sip1(ad.avgpool2(s0)))
        s2 = ad.relu(self.sip2(ad.avgpool2(s1)))
        return [s0, s1, s2]

    def msff_decode(self, mvfe_feats, sip_feats, lr_target):
        m0, m1, m2 = mvfe_feats
        s0, s1, s2 = sip_feats
        t = _as_input(lr_target)
        y = ad.relu(self.fuse2(ad.concat([m2, s2], axis=-1)))
        y = ad.pixel_rearrange_up(y, 2)
        y = ad.relu(self.fuse1(ad.concat([m1, s1, y], axis=-1)))
        y = ad.pixel_rearrange_up(y, 2)
        y = ad.relu(self.fuse0(ad.concat([m0, s0, y], axis=-1)))
        y = ad.relu(self.refine(y))
        r = ad.pixel_rearrange_up(self.head(y), self.cfg.upscale)
        h, w, _ = t.data.shape
        up = resample.upsample_bicubic(ad.reshape(t, (h, w)), self.cfg.upscale)
        s = self.cfg.upscale
        return ad.add(r, ad.reshape(up, (h * s, w * s, 1)))

    def forward(self, lr_target, aux_lrs, grids=None, operators=None,
                want_weights=False):
        """SR forward pass; returns (sr Tensor (H*s, W*s, 1), weights).

        ``grids``/``operators`` are per-scale lists aligned with blocks;
        only needed when the epipolar branch is enabled. ``weights`` is a
        per-block list of per-view attention arrays (or None).
        """
        t = _as_input(lr_target)
        if self.cfg.use_est and len(aux_lrs) != self.cfg.n_ref:
            raise ShapeMismatchError(
                f"expected {self.cfg.n_ref} auxiliary views, got {len(aux_lrs)}")
        x = t
        aux = [_as_input(a) for a in aux_lrs]
        mvfe = []
        all_weights = []
        for j, blk in enumerate(self.blocks):
            g = grids[j] if grids is not None else None
            op = operators[j] if operators is not None else None
            x, aux, wts = blk.forward(x, aux, g, op, want_weights)
            mvfe.append(x)
            all_weights.append(wts)
        sip = self.sip_features(t)
        sr = self.msff_decode(mvfe, sip, t)
        return sr, (all_weights if want_weights else None)

    def super_resolve(self, lr_target, aux_lrs, grids=None, operators=None):
        """Inference: clamped [0,1] 2-D array."""
        sr, _ = self.forward(lr_target, aux_lrs, grids, operators)
        return np.clip(sr.data[:, :, 0], 0.0, 1.0)


# fixed finite-difference kernels for the perceptual proxy
_DX = Tensor(np.array([[0, 0, 0], [0, -1, 1], [0, 0, 0]], dtype=np.float32)
             .reshape(3, 3, 1, 1))
_DY = Tensor(np.array([[0, 0, 0], [0, -1, 0], [0, 1, 0]], dtype=np.float32)
             .reshape(3, 3, 1, 1))


def _gradient_magnitude(img):
    return ad.add(ad.abs_(ad.conv2d(img, _DX, stride=1, pad=0)),
                  ad.abs_(ad.conv2d(img, _DY, stride=1, pad=0)))


def loss_sr(pred, hr_gt, cfg: NetworkConfig = None):
    """Mean |pred - gt| plus the optional gradient-magnitude proxy."""
    lam = cfg.lambda_per if cfg is not None else 0.0
    pred = _as_input(pred)
    gt = _as_input(hr_gt)
    if pred.data.shape != gt.data.shape:
        raise ShapeMismatchError(f"{pred.shape} vs {gt.shape}")
    rec = ad.mean(ad.abs_(ad.sub(pred, gt)))
    if lam == 0.0:
        return rec
    per = ad.mean(ad.abs_(ad.sub(_gradient_magnitude(pred),
                                 _gradient_magnitude(gt))))
    return ad.add(rec, ad.scale(per, lam))


def cosine_lr(i: int, cfg: TrainConfig) -> float:
    """Cosine decay from lr_start to lr_end with exact endpoints."""
    if i <= 0 or cfg.iters == 1:
        return cfg.lr_start
    if i >= cfg.iters - 1:
        return cfg.lr_end
    t = i / (cfg.iters - 1)
    return cfg.lr_end + (cfg.lr_start - cfg.lr_end) \
        * (1.0 + math.cos(math.pi * t)) / 2.0


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _ssim_kernel():
    x = np.arange(11, dtype=np.float64) - 5.0
    g = np.exp(-(x ** 2) / (2.0 * 1.5 ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    kern = _ssim_kernel()
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def win(x):
        return scipy.ndimage.convolve(x, kern, mode="reflect")

    mu_a, mu_b = win(a), win(b)
    var_a = win(a * a) - mu_a * mu_a
    var_b = win(b * b) - mu_b * mu_b
    cov = win(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) \
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return float(np.mean(s))


def epi_grids(cams_lr, target, aux_order, lr_w, lr_h, cfg: NetworkConfig,
              scene_scale):
    """Per-scale sample grids + float32 gather operators for one target."""
    grids, ops = [], []
    for j, stride in enumerate(cfg.strides):
        fw, fh = lr_w // stride, lr_h // stride
        grid = build_sample_grid(cams_lr[target],
                                 [cams_lr[a] for a in aux_order],
                                 fw, fh, stride, cfg.k_epi[j], scene_scale)
        grids.append(grid)
        ops.append([gather_operator(fh, fw, grid.coords[:, v])
                    .astype(np.float32)
                    for v in range(len(aux_order))])
    return grids, ops


class _Adam:
    """Adaptive-moment update, beta1=0.9 beta2=0.999 eps=1e-8."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.tensor.data) for p in params]
        self.v = [np.zeros_like(p.tensor.data) for p in params]
        self.t = 0

    def step(self, params, lr):
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(params):
            g = p.tensor.grad
            if g is None:
                g = np.zeros_like(p.tensor.data)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            upd = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + eps)
            p.tensor.data = p.tensor.data - np.float32(lr) * upd
            p.tensor.grad = None


def save_checkpoint(net: SRNet, path, iteration: int) -> None:
    """Write parameters + manifest to a directory; temp-then-rename."""
    path = Path(path)
    tmp = path.parent / (path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    names = []
    for p in net.parameters():
        ad.write_tensor(tmp / (p.name + ".mvtf"), p.tensor.data)
        names.append(p.name)
    cfg = net.cfg
    manifest = {
        "schema": 1,
        "iteration": iteration,
        "config": {
            "base_channels": cfg.base_channels,
            "n_ref": cfg.n_ref,
            "upscale": cfg.upscale,
            "lambda_per": cfg.lambda_per,
            "seed": cfg.seed,
            "n_heads": cfg.n_heads,
            "k_epi": list(cfg.k_epi),
            "use_est": cfg.use_est,
        },
        "parameters": names,
    }
    (tmp / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (manifest dict, {name: array})."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    state = {}
    for name in manifest["parameters"]:
        shaped = ad.read_tensor(path / (name + ".mvtf"))
        state[name] = shaped
    return manifest, state


def net_from_checkpoint(path) -> SRNet:
    manifest, state = load_checkpoint(path)
    c = dict(manifest["config"])
    c["k_epi"] = tuple(c["k_epi"])
    net = SRNet(NetworkConfig(**c))
    net.load_state(state)
    return net


def _dump_diagnostics(out_dir, iteration, loss_value, params):
    report = {"iteration": iteration, "loss": repr(loss_value), "parameters": {}}
    for p in params:
        d = p.tensor.data
        report["parameters"][p.name] = {
            "min": float(np.min(d)),
            "max": float(np.max(d)),
            "nonfinite": int(np.size(d) - np.sum(np.isfinite(d))),
        }
    path = Path(out_dir) / "diagnostics.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def scene_training_data(scene, net_cfg: NetworkConfig, holdout=()):
    """Selection, grids, and image tensors for every usable target view.

    Auxiliary views always come from the non-held-out pool, so held-out
    targets are never sources during training or evaluation.
    """
    views = [vid for vid, _, _ in scene.rig.cameras]
    holdout = [v for v in holdout if v in views]
    train_views = [v for v in views if v not in holdout]
    if len(train_views) < net_cfg.n_ref + 1:
        raise ValueError("not enough training views for the requested n_ref")
    any_lr = scene.lr_images[views[0]]
    lr_h, lr_w = any_lr.shape
    cams_lr = {vid: (scene.intrinsics_at(vid, (lr_w, lr_h)),
                     scene.rig.get(vid)[1]) for vid in views}
    sel_cfg = SelectionConfig(n_ref=net_cfg.n_ref)
    pool_entries = [e for e in scene.rig.cameras if e[0] in train_views]
    data = {}
    for vid in views:
        entries = pool_entries if vid in train_views else \
            sorted(pool_entries + [(vid, *scene.rig.get(vid))],
                   key=lambda e: e[0])
        man = PoseManifest(cameras=entries, scene_scale=scene.rig.scene_scale)
        sel = select_auxiliary(man, vid, sel_cfg)
        aux = list(sel.auxiliaries)
        if net_cfg.use_est:
            grids, ops = epi_grids(cams_lr, vid, aux, lr_w, lr_h, net_cfg,
                                   scene.rig.scene_scale)
        else:
            grids, ops = None, None
        data[vid] = {
            "aux": aux,
            "grids": grids,
            "operators": ops,
            "lr": np.asarray(scene.lr_images[vid], dtype=np.float32),
            "hr": np.asarray(scene.hr_images[vid], dtype=np.float64),
        }
    return data, train_views, holdout


def train(scene, net_cfg: NetworkConfig, train_cfg: TrainConfig, out_dir,
          holdout=(), progress=None) -> SRNet:
    """Train on a synthetic scene; writes checkpoint + metrics.csv.

    Returns the trained network. ``progress`` is an optional callable
    receiving (iteration, lr, loss).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = SRNet(net_cfg)
    params = net.parameters()
    data, train_views, holdout = scene_training_data(scene, net_cfg, holdout)
    eval_view = holdout[0] if holdout else train_views[0]
    rng = np.random.default_rng(net_cfg.seed + 1)
    adam = _Adam(params)
    ckpt_path = out / "checkpoint"
    with open(out / "metrics.csv", "w") as metrics:
        metrics.write("iter,lr,loss,psnr\n")
        for i in range(train_cfg.iters):
            lr = cosine_lr(i, train_cfg)
            batch = rng.choice(train_views,
                               size=min(train_cfg.batch, len(train_views)),
                               replace=False)
            try:
                losses = []
                for vid in batch:
                    d = data[int(vid)]
                    sr, _ = net.forward(d["lr"],
                                        [data[a]["lr"] for a in d["aux"]],
                                        d["grids"], d["operators"])
                    losses.append(loss_sr(sr, d["hr"], net_cfg))
                total = losses[0]
                for extra in losses[1:]:
                    total = ad.add(total, extra)
                total = ad.scale(total, 1.0 / len(losses))
                loss_value = float(total.data)
            except ad.NonFiniteInputError as exc:
                dump = _dump_diagnostics(out, i, float("nan"), params)
                raise NonFiniteLossError(
                    f"non-finite value at iteration {i}; see {dump}") from exc
            if not math.isfinite(loss_value):
                dump = _dump_diagnostics(out, i, loss_value, params)
                raise NonFiniteLossError(
                    f"loss {loss_value} at iteration {i}; see {dump}")
            total.backward()
            adam.step(params, lr)
            at_checkpoint = (i + 1) % train_cfg.checkpoint_every == 0 \
                or i == train_cfg.iters - 1
            psnr_field = ""
            if at_checkpoint:
                d = data[eval_view]
                pred = net.super_resolve(d["lr"],
                                         [data[a]["lr"] for a in d["aux"]],
                                         d["grids"], d["operators"])
                psnr_field = f"{psnr(pred, d['hr']):.6f}"
                save_checkpoint(net, ckpt_path, i + 1)
            metrics.write(f"{i},{lr:.10e},{loss_value:.9e},{psnr_field}\n")
            if progress is not None:
                progress(i, lr, loss_value)
    return net
