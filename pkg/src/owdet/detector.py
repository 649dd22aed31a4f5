"""Toy query-based detector.

Pipeline: two patch-embedding conv stages (im2col as gathers + matmul),
a linear projection to model width d (the grid exposed for feature
distillation), one cross-attention decoder layer over N learned queries
with a residual FFN, then three heads per query: per-class logits
(width n_known + 1, last slot reserved for unknown), a single
objectness logit, and a sigmoid box MLP.

Parameters live in a flat dict keyed "component.name"; the component
prefix drives the freeze policy.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .structures import Prediction

STAGE2_FROZEN = frozenset({"backbone", "decoder", "regression_head"})
TRAINABLE_STAGE2 = frozenset({"projection", "class_head", "binary_head"})


@dataclass
class DetectorConfig:
    image_size: int = 64
    d_model: int = 32
    n_queries: int = 20
    conv1_channels: int = 16
    conv2_channels: int = 32
    patch1: int = 4
    patch2: int = 2
    ffn_hidden: int = 64
    box_hidden: int = 32


@dataclass
class FreezePolicy:
    frozen_components: frozenset = frozenset()

    @classmethod
    def stage2(cls):
        return cls(frozen_components=STAGE2_FROZEN)

    @classmethod
    def none(cls):
        return cls(frozen_components=frozenset())

    @classmethod
    def all_frozen(cls):
        return cls(frozen_components=STAGE2_FROZEN | TRAINABLE_STAGE2)


@dataclass
class ForwardResult:
    class_logits: Tensor    # (N, n_known + 1)
    binary_logits: Tensor   # (N,)
    boxes: Tensor           # (N, 4) in (0, 1)
    query_features: Tensor  # (N, d)
    feature_grid: Tensor    # (gh, gw, d) post-projection
    predictions: list = field(default_factory=list)


def _positional_table(grid, d):
    """Fixed low-order Fourier features of each cell center.

    Attention values are built from translation-equivariant conv features;
    without a positional term the attended output cannot say where the
    object sits and box regression collapses to the dataset mean.
    """
    quarter = d // 4
    if quarter == 0:
        return np.zeros((grid * grid, d))
    coords = (np.arange(grid) + 0.5) / grid
    freqs = np.pi * (np.arange(quarter) + 1.0)
    angles = coords[:, None] * freqs[None, :]
    per_axis = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    ys, xs = np.divmod(np.arange(grid * grid), grid)
    table = np.zeros((grid * grid, d))
    table[:, :2 * quarter] = per_axis[xs]
    table[:, 2 * quarter:4 * quarter] = per_axis[ys]
    return table


def _init_linear(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


class Detector:
    def __init__(self, n_known, config: Optional[DetectorConfig] = None, seed=0,
                 params=None):
        self.config = config or DetectorConfig()
        self.n_known = int(n_known)
        cfg = self.config
        self.grid1 = cfg.image_size // cfg.patch1
        self.grid2 = self.grid1 // cfg.patch2
        self._conv1_idx = self._build_conv1_indices()
        self._conv2_idx = self._build_conv2_indices()
        self._pos = _positional_table(self.grid2, cfg.d_model)
        self.params = params if params is not None else self._init_params(seed)

    # -- parameter construction -------------------------------------------
    def _init_params(self, seed):
        cfg = self.config
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        in1 = cfg.patch1 * cfg.patch1 * 3
        in2 = cfg.patch2 * cfg.patch2 * cfg.conv1_channels
        width = self.n_known + 1
        raw = {
            "backbone.conv1.w": _init_linear(rng, in1, cfg.conv1_channels),
            "backbone.conv1.b": np.zeros(cfg.conv1_channels),
            "backbone.conv2.w": _init_linear(rng, in2, cfg.conv2_channels),
            "backbone.conv2.b": np.zeros(cfg.conv2_channels),
            "projection.w": _init_linear(rng, cfg.conv2_channels, d),
            "projection.b": np.zeros(d),
            "decoder.queries": rng.normal(0.0, 1.0, size=(cfg.n_queries, d)),
            "decoder.wq": _init_linear(rng, d, d),
            "decoder.wk": _init_linear(rng, d, d),
            "decoder.wv": _init_linear(rng, d, d),
            "decoder.ffn1.w": _init_linear(rng, d, cfg.ffn_hidden),
            "decoder.ffn1.b": np.zeros(cfg.ffn_hidden),
            "decoder.ffn2.w": _init_linear(rng, cfg.ffn_hidden, d),
            "decoder.ffn2.b": np.zeros(d),
            "class_head.w": _init_linear(rng, d, width),
            "class_head.b": np.zeros(width),
            "binary_head.w": _init_linear(rng, d, 1),
            "binary_head.b": np.zeros(1),
            "regression_head.w1": _init_linear(rng, d, cfg.box_hidden),
            "regression_head.b1": np.zeros(cfg.box_hidden),
            "regression_head.w2": _init_linear(rng, cfg.box_hidden, cfg.box_hidden),
            "regression_head.b2": np.zeros(cfg.box_hidden),
            "regression_head.w3": _init_linear(rng, cfg.box_hidden, 4),
            "regression_head.b3": np.zeros(4),
        }
        return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}

    def _build_conv1_indices(self):
        cfg = self.config
        s, p = cfg.image_size, cfg.patch1
        g = self.grid1
        idx = np.empty((g * g, p * p * 3), dtype=np.intp)
        for gy in range(g):
            for gx in range(g):
                cell = []
                for py in range(p):
                    for px in range(p):
                        base = ((gy * p + py) * s + (gx * p + px)) * 3
                        cell.extend((base, base + 1, base + 2))
                idx[gy * g + gx] = cell
        return idx

    def _build_conv2_indices(self):
        cfg = self.config
        g1, g2, p, c = self.grid1, self.grid2, cfg.patch2, cfg.conv1_channels
        idx = np.empty((g2 * g2, p * p * c), dtype=np.intp)
        for gy in range(g2):
            for gx in range(g2):
                cell = []
                for py in range(p):
                    for px in range(p):
                        base = ((gy * p + py) * g1 + (gx * p + px)) * c
                        cell.extend(range(base, base + c))
                idx[gy * g2 + gx] = cell
        return idx

    # -- forward -------------------------------------------------------------
    def forward(self, raster):
        cfg = self.config
        img = np.asarray(raster, dtype=np.float64)
        if img.shape != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(f"raster shape {img.shape}, expected "
                             f"({cfg.image_size}, {cfg.image_size}, 3)")
        x = img / 255.0 - 0.5
        p = self.params

        patches1 = x.reshape(-1)[self._conv1_idx]  # constant input
        h1 = ad.relu(ad.add_rowvec(ad.matmul(Tensor(patches1), p["backbone.conv1.w"]),
                                   p["backbone.conv1.b"]))
        patches2 = ad.take_flat(h1, self._conv2_idx, self._conv2_idx.shape)
        h2 = ad.relu(ad.add_rowvec(ad.matmul(patches2, p["backbone.conv2.w"]),
                                   p["backbone.conv2.b"]))
        f = ad.add_rowvec(ad.matmul(h2, p["projection.w"]), p["projection.b"])

        f_pos = ad.add(f, Tensor(self._pos))  # position enters keys and values
        q = ad.matmul(p["decoder.queries"], p["decoder.wq"])
        k = ad.matmul(f_pos, p["decoder.wk"])
        v = ad.matmul(f_pos, p["decoder.wv"])
        attn = ad.softmax_lastdim(ad.scale(ad.matmul(q, ad.transpose(k)),
                                           1.0 / math.sqrt(cfg.d_model)))
        h = ad.add(p["decoder.queries"], ad.matmul(attn, v))
        ffn = ad.add_rowvec(
            ad.matmul(ad.relu(ad.add_rowvec(ad.matmul(h, p["decoder.ffn1.w"]),
                                            p["decoder.ffn1.b"])),
                      p["decoder.ffn2.w"]),
            p["decoder.ffn2.b"])
        qfeat = ad.add(h, ffn)

        class_logits = ad.add_rowvec(ad.matmul(qfeat, p["class_head.w"]),
                                     p["class_head.b"])
        binary = ad.reshape(ad.add_rowvec(ad.matmul(qfeat, p["binary_head.w"]),
                                          p["binary_head.b"]), (cfg.n_queries,))
        r = ad.relu(ad.add_rowvec(ad.matmul(qfeat, p["regression_head.w1"]),
                                  p["regression_head.b1"]))
        r = ad.relu(ad.add_rowvec(ad.matmul(r, p["regression_head.w2"]),
                                  p["regression_head.b2"]))
        boxes = ad.sigmoid(ad.add_rowvec(ad.matmul(r, p["regression_head.w3"]),
                                         p["regression_head.b3"]))
        grid = ad.reshape(f, (self.grid2, self.grid2, cfg.d_model))

        for name, t in (("class logits", class_logits), ("binary logits", binary),
                        ("boxes", boxes), ("query features", qfeat),
                        ("feature grid", grid)):
            if not np.isfinite(t.values).all():
                raise ValueError(f"non-finite activations in {name}")

        preds = [Prediction(class_logits=class_logits.values[i],
                            binary_logit=binary.values[i],
                            box=boxes.values[i],
                            query_feature=qfeat.values[i], index=i)
                 for i in range(cfg.n_queries)]
        return ForwardResult(class_logits=class_logits, binary_logits=binary,
                             boxes=boxes, query_features=qfeat,
                             feature_grid=grid, predictions=preds)

    def predict(self, raster):
        """Forward without recording gradient history."""
        flags = {k: t.requires_grad for k, t in self.params.items()}
        try:
            for t in self.params.values():
                t.requires_grad = False
            return self.forward(raster)
        finally:
            for k, t in self.params.items():
                t.requires_grad = flags[k]

    # -- structural ops --------------------------------------------------------
    def apply_freeze(self, policy: FreezePolicy):
        """Frozen components stop receiving gradients and optimizer updates."""
        for name, t in self.params.items():
            t.requires_grad = name.split(".")[0] not in policy.frozen_components
            t.grad = None

    def expand_class_head(self, new_n_known, seed=0):
        """Widen the class head; old class columns and the unknown column
        keep their values, new columns start near zero."""
        if new_n_known <= self.n_known:
            raise ValueError(f"cannot shrink class head: {self.n_known} -> {new_n_known}")
        rng = np.random.default_rng((seed, new_n_known))
        old_w = self.params["class_head.w"].values
        old_b = self.params["class_head.b"].values
        d = old_w.shape[0]
        w = np.zeros((d, new_n_known + 1))
        b = np.zeros(new_n_known + 1)
        w[:, :self.n_known] = old_w[:, :self.n_known]
        b[:self.n_known] = old_b[:self.n_known]
        w[:, -1] = old_w[:, -1]
        b[-1] = old_b[-1]
        w[:, self.n_known:new_n_known] = rng.normal(0.0, 0.01,
                                                    size=(d, new_n_known - self.n_known))
        grad_flag = self.params["class_head.w"].requires_grad
        self.params["class_head.w"] = Tensor(w, requires_grad=grad_flag)
        self.params["class_head.b"] = Tensor(b, requires_grad=grad_flag)
        self.n_known = new_n_known

    def snapshot_teacher(self):
        """Deep copy detached from gradient tracking."""
        frozen = {k: Tensor(t.values.copy()) for k, t in self.params.items()}
        return Detector(self.n_known, self.config, params=frozen)

    def param_hashes(self):
        import hashlib
        return {k: hashlib.sha256(np.ascontiguousarray(t.values).tobytes()).hexdigest()
                for k, t in self.params.items()}


def _clip_gradients(params, clip_norm):
    """Scale all gradients so their global L2 norm is at most clip_norm."""
    if not clip_norm:
        return
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad ** 2).sum())
    total = total ** 0.5
    if total > clip_norm:
        factor = clip_norm / total
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * factor


class SGD:
    """Plain SGD with optional momentum; skips parameters without gradients."""

    def __init__(self, params, lr, momentum=0.0, clip_norm=None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity = {}

    def step(self):
        _clip_gradients(self.params, self.clip_norm)
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad
            if self.momentum:
                vel = self._velocity.get(name)
                vel = g.copy() if vel is None else self.momentum * vel + g
                self._velocity[name] = vel
                g = vel
            t.values = t.values - self.lr * g

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


class Adam:
    """Adam with bias correction; skips parameters without gradients."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self):
        _clip_gradients(self.params, self.clip_norm)
        b1, b2 = self.betas
        self._t += 1
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad
            m = self._m.get(name, np.zeros_like(g))
            v = self._v.get(name, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            mhat = m / (1 - b1 ** self._t)
            vhat = v / (1 - b2 ** self._t)
            t.values = t.values - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def save_checkpoint(path, detector: Detector, config_hash, extra_meta=None):
    from . import serial
    arrays = {k: detector.params[k].values for k in sorted(detector.params)}
    meta = {"config_hash": config_hash, "n_known": detector.n_known,
            "format": "checkpoint-v1"}
    if extra_meta:
        meta["extra"] = extra_meta
    serial.save_arrays(path, arrays, meta)


def load_checkpoint(path, config: DetectorConfig, expected_config_hash):
    from . import serial
    arrays, meta = serial.load_arrays(path)
    if meta.get("format") != "checkpoint-v1":
        raise ValueError(f"{path}: not a checkpoint")
    if meta["config_hash"] != expected_config_hash:
        raise ValueError(f"{path}: config hash mismatch "
                         f"({meta['config_hash']} != {expected_config_hash})")
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return Detector(meta["n_known"], config, params=params), meta
