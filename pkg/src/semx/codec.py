"""Semantic encoder/decoder built from KAN layers, trained through the channel.

Encoder: KAN(m->h) -> ReLU -> KAN(h->k) -> BatchNorm.
Decoder: KAN(k->h) -> ReLU -> KAN(h->m) -> tanh.

Everything is float64 numpy with explicit backward passes; ``grad_check``
compares them with central finite differences.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .channel import ChannelConfig, transmit
from .errors import ConfigError, SchemaError, ShapeError, StateError, TrainingError

ORDER = 3
GRID_SIZE = 8
GRID_RANGE = (-1.2, 1.2)
MAGIC = b"SEMXCKPT"
CKPT_VERSION = 1
EXTENSIONS = ("linear", "cubic")
_HEADER = struct.Struct("<8sI6I4d")
_ONE_BELOW = float(np.nextafter(1.0, 0.0))


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return sig * (1.0 + x * (1.0 - sig))


def cubic_bspline_pieces(u):
    """Uniform cubic B-spline weights of the 4 bases live on a knot interval, and d/du."""
    u2, u3 = u * u, u * u * u
    w = np.stack([(1 - u) ** 3, 3 * u3 - 6 * u2 + 4, -3 * u3 + 3 * u2 + 3 * u + 1, u3], axis=-1) / 6.0
    dw = np.stack([-(1 - u) ** 2, 3 * u2 - 4 * u, -3 * u2 + 2 * u + 1, u2], axis=-1) / 2.0
    return w, dw


class KanLayer:
    """Kolmogorov-Arnold layer: ``y_j = sum_i base[j,i] silu(x_i) + sum_g spline[j,i,g] B_g(x_i)``.

    ``B_g`` are the ``G + 3`` uniform cubic B-splines on ``grid_range`` split into
    ``G`` intervals. Beyond the grid the boundary piece is continued either to
    first order (``extension="linear"``, default) or as the full cubic.
    """

    def __init__(self, in_dim, out_dim, grid_size=GRID_SIZE, grid_range=GRID_RANGE,
                 base_weights=None, spline_coeffs=None, extension="linear"):
        if extension not in EXTENSIONS:
            raise ConfigError(f"extension must be one of {EXTENSIONS}")
        self.extension = extension
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.grid_size = int(grid_size)
        self.grid_range = (float(grid_range[0]), float(grid_range[1]))
        if self.grid_size < 1 or not self.grid_range[1] > self.grid_range[0]:
            raise ConfigError("invalid spline grid")
        self.h = (self.grid_range[1] - self.grid_range[0]) / self.grid_size
        nb = self.n_basis
        self.base_weights = (np.zeros((out_dim, in_dim)) if base_weights is None
                             else np.array(base_weights, dtype=float).reshape(out_dim, in_dim))
        self.spline_coeffs = (np.zeros((out_dim, in_dim, nb)) if spline_coeffs is None
                              else np.array(spline_coeffs, dtype=float).reshape(out_dim, in_dim, nb))

    @property
    def n_basis(self):
        return self.grid_size + ORDER

    @property
    def knots(self):
        lo = self.grid_range[0]
        return lo + self.h * np.arange(-ORDER, self.grid_size + ORDER + 1)

    def init(self, rng, base_scale=1.0, spline_scale=0.0):
        bound = base_scale / math.sqrt(self.in_dim)
        self.base_weights = rng.uniform(-bound, bound, (self.out_dim, self.in_dim))
        self.spline_coeffs = (rng.normal(0.0, spline_scale, self.spline_coeffs.shape) if spline_scale
                              else np.zeros_like(self.spline_coeffs))
        return self

    def params(self):
        return [("base", self.base_weights), ("spline", self.spline_coeffs)]

    def basis(self, x):
        """Dense basis matrix (B, in, G+3), plus interval index and piece derivatives."""
        u_full = (x - self.grid_range[0]) / self.h
        j = np.clip(np.floor(u_full), 0, self.grid_size - 1).astype(int)
        u = u_full - j
        if self.extension == "linear":
            uc = np.clip(u, 0.0, 1.0)
            w, dw = cubic_bspline_pieces(uc)
            w = w + dw * (u - uc)[..., None]
        else:
            w, dw = cubic_bspline_pieces(u)
        B, n = x.shape
        dense = np.zeros((B, n, self.n_basis))
        idx = j[..., None] + np.arange(ORDER + 1)
        np.put_along_axis(dense, idx, w, axis=2)
        return dense, idx, dw

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"KAN layer expects (*, {self.in_dim}), got {x.shape}")
        dense, idx, dw = self.basis(x)
        sx = silu(x)
        y = sx @ self.base_weights.T + dense.reshape(len(x), -1) @ self.spline_coeffs.reshape(self.out_dim, -1).T
        return y, (x, sx, dense, idx, dw)

    def backward(self, gy, cache):
        x, sx, dense, idx, dw = cache
        B = len(x)
        g_base = gy.T @ sx
        g_spline = (gy.T @ dense.reshape(B, -1)).reshape(self.spline_coeffs.shape)
        m = (gy @ self.spline_coeffs.reshape(self.out_dim, -1)).reshape(B, self.in_dim, self.n_basis)
        gx = silu_grad(x) * (gy @ self.base_weights)
        gx += np.sum(np.take_along_axis(m, idx, axis=2) * dw, axis=2) / self.h
        return gx, [g_base, g_spline]

    def copy(self):
        return KanLayer(self.in_dim, self.out_dim, self.grid_size, self.grid_range,
                        self.base_weights.copy(), self.spline_coeffs.copy(), self.extension)


def kan_forward(layer: KanLayer, x):
    """Evaluate a layer on one vector (in_dim,) or a batch (B, in_dim)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if len(x) != layer.in_dim:
            raise ShapeError(f"expected {layer.in_dim} inputs, got {len(x)}")
        return layer.forward(x[None])[0][0]
    return layer.forward(x)[0]


# --------------------------------------------------------------------------- codec

@dataclass
class CodecParams:
    enc1: KanLayer
    enc2: KanLayer
    dec1: KanLayer
    dec2: KanLayer
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    mode: str = "eval"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def m(self):
        return self.enc1.in_dim

    @property
    def hidden(self):
        return self.enc1.out_dim

    @property
    def k(self):
        return self.enc2.out_dim

    @property
    def grid_size(self):
        return self.enc1.grid_size

    @property
    def extension(self):
        return self.enc1.extension

    def parameters(self):
        """Trainable arrays in checkpoint order (views; updates act in place)."""
        return [
            ("enc1.base", self.enc1.base_weights), ("enc1.spline", self.enc1.spline_coeffs),
            ("enc2.base", self.enc2.base_weights), ("enc2.spline", self.enc2.spline_coeffs),
            ("bn.gamma", self.bn_gamma), ("bn.beta", self.bn_beta),
            ("dec1.base", self.dec1.base_weights), ("dec1.spline", self.dec1.spline_coeffs),
            ("dec2.base", self.dec2.base_weights), ("dec2.spline", self.dec2.spline_coeffs),
        ]

    def arrays(self):
        """All stored arrays in checkpoint order, running statistics included."""
        p = self.parameters()
        return p[:6] + [("bn.running_mean", self.bn_mean), ("bn.running_var", self.bn_var)] + p[6:]

    def copy(self):
        return CodecParams(self.enc1.copy(), self.enc2.copy(), self.dec1.copy(), self.dec2.copy(),
                           self.bn_gamma.copy(), self.bn_beta.copy(), self.bn_mean.copy(),
                           self.bn_var.copy(), self.mode, self.bn_momentum, self.bn_eps)

    def validate(self):
        if self.mode not in ("train", "eval"):
            raise StateError(f"invalid mode {self.mode!r}")
        if (self.enc2.in_dim, self.dec1.in_dim, self.dec1.out_dim, self.dec2.in_dim, self.dec2.out_dim) != \
                (self.hidden, self.k, self.hidden, self.hidden, self.m):
            raise ShapeError("codec layer dimensions are inconsistent")
        for name, a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise StateError(f"non-finite values in {name}")


def init_codec(m=384, hidden=128, k=32, grid_size=GRID_SIZE, rng=None, spline_scale=0.0,
               grid_range=GRID_RANGE, extension="linear") -> CodecParams:
    if not (0 < k <= m and hidden > 0):
        raise ConfigError(f"invalid codec dims m={m}, hidden={hidden}, k={k}")
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = [KanLayer(a, b, grid_size, grid_range, extension=extension).init(rng, spline_scale=spline_scale)
              for a, b in ((m, hidden), (hidden, k), (k, hidden), (hidden, m))]
    return CodecParams(*layers, bn_gamma=np.ones(k), bn_beta=np.zeros(k),
                       bn_mean=np.zeros(k), bn_var=np.ones(k))


def zero_codec(m=384, hidden=128, k=32, grid_size=GRID_SIZE, extension="linear") -> CodecParams:
    layers = [KanLayer(a, b, grid_size, extension=extension)
              for a, b in ((m, hidden), (hidden, k), (k, hidden), (hidden, m))]
    return CodecParams(*layers, bn_gamma=np.zeros(k), bn_beta=np.zeros(k),
                       bn_mean=np.zeros(k), bn_var=np.ones(k))


def bandwidth_ratio(k, m) -> float:
    if k <= 0 or m <= 0:
        raise ConfigError("k and m must be positive")
    if k > m:
        raise ConfigError(f"k={k} > m={m}: expansion is not compression")
    return float(Fraction(int(k), int(m)))


def _encode_batch(p: CodecParams, x, train: bool, update_stats: bool = False):
    a1, c1 = p.enc1.forward(x)
    r1 = np.maximum(a1, 0.0)
    a2, c2 = p.enc2.forward(r1)
    if train:
        mu = a2.mean(axis=0)
        var = a2.var(axis=0)
        inv = 1.0 / np.sqrt(var + p.bn_eps)
        xhat = (a2 - mu) * inv
        if update_stats:
            n = len(a2)
            unbiased = var * n / (n - 1) if n > 1 else var
            p.bn_mean[:] = (1 - p.bn_momentum) * p.bn_mean + p.bn_momentum * mu
            p.bn_var[:] = (1 - p.bn_momentum) * p.bn_var + p.bn_momentum * unbiased
    else:
        inv = 1.0 / np.sqrt(p.bn_var + p.bn_eps)
        xhat = (a2 - p.bn_mean) * inv
    s = p.bn_gamma * xhat + p.bn_beta
    return s, (c1, a1, c2, xhat, inv, train)


def _encode_backward(p: CodecParams, gs, cache):
    c1, a1, c2, xhat, inv, train = cache
    g_gamma = np.sum(gs * xhat, axis=0)
    g_beta = np.sum(gs, axis=0)
    gxh = gs * p.bn_gamma
    if train:
        n = len(gs)
        ga2 = inv / n * (n * gxh - gxh.sum(axis=0) - xhat * np.sum(gxh * xhat, axis=0))
    else:
        ga2 = gxh * inv
    gr1, g_enc2 = p.enc2.backward(ga2, c2)
    ga1 = gr1 * (a1 > 0)
    _, g_enc1 = p.enc1.backward(ga1, c1)
    return g_enc1 + g_enc2 + [g_gamma, g_beta]


def _decode_batch(p: CodecParams, y):
    a3, c3 = p.dec1.forward(y)
    r3 = np.maximum(a3, 0.0)
    a4, c4 = p.dec2.forward(r3)
    out = np.tanh(a4)
    return out, (c3, a3, c4, out)


def _decode_backward(p: CodecParams, gout, cache):
    c3, a3, c4, out = cache
    ga4 = gout * (1.0 - out ** 2)
    gr3, g_dec2 = p.dec2.backward(ga4, c4)
    ga3 = gr3 * (a3 > 0)
    gy, g_dec1 = p.dec1.backward(ga3, c3)
    return gy, g_dec1 + g_dec2


def _clamp_input(x, m):
    x = np.asarray(x, dtype=float)
    one = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != m:
        raise ShapeError(f"codec expects vectors of length {m}, got {x2.shape[1]}")
    n_out = int(np.sum((x2 < -1.0) | (x2 > 1.0)))
    return np.clip(x2, -1.0, 1.0), one, n_out


def encode(x, params: CodecParams):
    """Semantic encoder: (m,) -> (k,), or a batch. Eval mode only."""
    if params.mode != "eval":
        raise StateError("encode called while codec is in train mode")
    x2, one, _ = _clamp_input(x, params.m)
    s, _ = _encode_batch(params, x2, train=False)
    return s[0] if one else s


def decode(y, params: CodecParams):
    """Semantic decoder: (k,) -> (m,) with every component strictly inside (-1, 1)."""
    y = np.asarray(y, dtype=float)
    one = y.ndim == 1
    y2 = np.atleast_2d(y)
    if y2.shape[1] != params.k:
        raise ShapeError(f"decoder expects length {params.k}, got {y2.shape[1]}")
    out, _ = _decode_batch(params, y2)
    out = np.clip(out, -_ONE_BELOW, _ONE_BELOW)
    return out[0] if one else out


# --------------------------------------------------------------------------- channel inside the loop

class _RowChannel:
    """Batch transmission where each row may use its own SNR."""

    def __init__(self, cfg: ChannelConfig, snrs, rng):
        self.cfg, self.snrs, self.rng = cfg, snrs, rng
        self.parts = []

    def forward(self, s):
        if self.snrs is None:
            y, r = transmit(s, self.cfg, self.rng)
            self.parts = [(slice(None), r)]
            return y
        y = np.empty_like(s)
        self.parts = []
        for v in sorted(set(self.snrs.tolist())):
            rows = np.flatnonzero(self.snrs == v)
            y[rows], r = transmit(s[rows], replace(self.cfg, snr_db=v), self.rng)
            self.parts.append((rows, r))
        return y

    def backward(self, gy):
        gs = np.empty_like(gy)
        for rows, r in self.parts:
            gs[rows] = r.backward(gy[rows])
        return gs


def loss_and_grads(params: CodecParams, x, channel=None, update_stats=False):
    """Reconstruction MSE of decode(channel(encode(x))) and gradients per parameter."""
    s, ce = _encode_batch(params, x, train=True, update_stats=update_stats)
    y = channel.forward(s) if channel is not None else s
    out, cd = _decode_batch(params, y)
    diff = out - x
    loss = float(np.mean(diff ** 2))
    gout = 2.0 * diff / diff.size
    gy, g_dec = _decode_backward(params, gout, cd)
    gs = channel.backward(gy) if channel is not None else gy
    g_enc = _encode_backward(params, gs, ce)
    # order: enc1.base, enc1.spline, enc2.base, enc2.spline, gamma, beta, dec1..., dec2...
    return loss, g_enc + g_dec


def reconstruction_mse(params: CodecParams, data, channel: ChannelConfig | None = None, rng=None) -> float:
    """Eval-mode mean squared error of decode(transmit(encode(x)))."""
    x = np.atleast_2d(np.asarray(data, dtype=float))
    s = encode(x, params)
    if channel is not None and not (channel.noiseless and channel.fading == "none"):
        s, _ = transmit(s, channel, rng if rng is not None else np.random.default_rng(channel.seed))
    return float(np.mean((decode(s, params) - x) ** 2))


# --------------------------------------------------------------------------- training

@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    beta2: float = 0.999
    train_snrs: tuple | None = None
    hidden: int = 128
    k: int = 32
    grid_size: int = GRID_SIZE
    extension: str = "linear"
    loss: str = "mse"

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss != "mse":
            raise ConfigError("only the mse loss is supported")


@dataclass
class TrainResult:
    params: CodecParams
    loss_trace: list = field(default_factory=list)
    config: TrainConfig = None
    channel: ChannelConfig = None

    @property
    def final_loss(self):
        return self.loss_trace[-1]


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for _, p in params]
        self.v = [np.zeros_like(p) for _, p in params] if cfg.optimizer == "adam" else None
        self.t = 0

    def step(self, params, grads):
        cfg = self.cfg
        self.t += 1
        for i, ((_, p), g) in enumerate(zip(params, grads)):
            if cfg.optimizer == "adam":
                self.m[i] = cfg.momentum * self.m[i] + (1 - cfg.momentum) * g
                self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g
                mh = self.m[i] / (1 - cfg.momentum ** self.t)
                vh = self.v[i] / (1 - cfg.beta2 ** self.t)
                p -= cfg.lr * mh / (np.sqrt(vh) + 1e-8)
            else:
                self.m[i] = cfg.momentum * self.m[i] + g
                p -= cfg.lr * self.m[i]


def train(dataset, cfg: TrainConfig | None = None, channel: ChannelConfig | None = None,
          params: CodecParams | None = None) -> TrainResult:
    """Mini-batch training of the autoencoder with the channel in the loop.

    All randomness (init, shuffling, per-sample SNR, fading and noise) comes from
    one generator seeded by ``cfg.seed``. Batch-norm running statistics are
    finally replaced by the exact statistics of the training set.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    channel = channel or ChannelConfig(snr_db=math.inf)
    x = np.atleast_2d(np.asarray(dataset, dtype=float))
    if len(x) == 0:
        raise ConfigError("empty training set")
    if np.any(np.abs(x) > 1.0):
        raise ConfigError("training vectors must lie in [-1, 1]")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_codec(x.shape[1], cfg.hidden, cfg.k, cfg.grid_size, rng=rng, extension=cfg.extension)
    params.mode = "train"
    plist = params.parameters()
    opt = _Optimizer(cfg, plist)
    snr_choices = None if cfg.train_snrs is None else np.asarray(cfg.train_snrs, dtype=float)
    use_channel = not (channel.noiseless and channel.fading == "none") or snr_choices is not None

    n = len(x)
    bs = min(cfg.batch_size, n)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        starts = list(range(0, n, bs))
        if len(starts) > 1 and n - starts[-1] < 2:
            starts.pop()
        total = count = 0.0
        for bi, st in enumerate(starts):
            end = n if bi == len(starts) - 1 else st + bs
            xb = x[order[st:end]]
            ch = None
            if use_channel:
                snrs = None if snr_choices is None else snr_choices[rng.integers(len(snr_choices), size=len(xb))]
                ch = _RowChannel(channel, snrs, rng)
            loss, grads = loss_and_grads(params, xb, ch, update_stats=True)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"non-finite loss/gradient at epoch {epoch}, batch {bi}")
            opt.step(plist, grads)
            total += loss * len(xb)
            count += len(xb)
        trace.append(total / count)
    _calibrate_bn(params, x)
    params.mode = "eval"
    return TrainResult(params, trace, cfg, channel)


def _calibrate_bn(params: CodecParams, x):
    a1, _ = params.enc1.forward(x)
    a2, _ = params.enc2.forward(np.maximum(a1, 0.0))
    params.bn_mean[:] = a2.mean(axis=0)
    params.bn_var[:] = a2.var(axis=0)


# --------------------------------------------------------------------------- gradient check

def grad_check(params: CodecParams, x, channel_off: bool = True, h: float = 1e-5, floor: float = 1e-6,
               channel: ChannelConfig | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    relative error = |a - n| / max(|a|, |n|, floor). With a channel, the same
    noise draw is replayed for every evaluation.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = params.copy()

    def make_channel():
        if channel_off or channel is None:
            return None
        return _RowChannel(channel, None, np.random.default_rng(seed))

    _, grads = loss_and_grads(p, x, make_channel())
    worst = 0.0
    for (_, arr), g in zip(p.parameters(), grads):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_and_grads(p, x, make_channel())
            flat[i] = orig - h
            lm, _ = loss_and_grads(p, x, make_channel())
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(params: CodecParams, path, meta: dict | None = None):
    """Binary checkpoint plus JSON sidecar ``<path>.json``.

    Layout: header ``<8sI6I4d`` = magic, version, (m, hidden, k, G, order,
    extension: 0 linear / 1 cubic),
    (grid_lo, grid_hi, bn_eps, bn_momentum); then little-endian float64 arrays
    in :meth:`CodecParams.arrays` order, C-contiguous.
    """
    params.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lo, hi = params.enc1.grid_range
    header = _HEADER.pack(MAGIC, CKPT_VERSION, params.m, params.hidden, params.k, params.grid_size, ORDER,
                          EXTENSIONS.index(params.extension), lo, hi, params.bn_eps, params.bn_momentum)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in params.arrays())
    blob = header + body
    path.write_bytes(blob)
    side = dict(meta or {})
    side.update({"format": "semx-codec", "version": CKPT_VERSION, "m": params.m, "hidden": params.hidden,
                 "k": params.k, "grid_size": params.grid_size, "sha256": hashlib.sha256(blob).hexdigest()})
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, float) and math.isinf(o):
        return "inf"
    raise TypeError(f"not serializable: {type(o)}")


def load_checkpoint(path, kind: str | None = None, schema_version: str | None = None,
                    dims: tuple | None = None):
    """Read a checkpoint; any header, sidecar or dimension mismatch raises SchemaError."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise SchemaError(f"{path}: truncated checkpoint")
    magic, version, m, hidden, k, G, order, ext, lo, hi, eps, mom = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise SchemaError(f"{path}: not a codec checkpoint")
    if version != CKPT_VERSION:
        raise SchemaError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if order != ORDER:
        raise SchemaError(f"{path}: spline order {order} unsupported")
    if dims is not None and (m, k) != tuple(dims):
        raise SchemaError(f"{path}: dims (m={m}, k={k}) do not match expected {tuple(dims)}")
    if ext >= len(EXTENSIONS):
        raise SchemaError(f"{path}: unknown spline extension code {ext}")
    p = zero_codec(m, hidden, k, G, EXTENSIONS[ext])
    for layer in (p.enc1, p.enc2, p.dec1, p.dec2):
        layer.grid_range = (lo, hi)
        layer.h = (hi - lo) / G
    p.bn_eps, p.bn_momentum = eps, mom
    pos = _HEADER.size
    for _, arr in p.arrays():
        nbytes = arr.size * 8
        chunk = blob[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise SchemaError(f"{path}: checkpoint body truncated")
        arr[...] = np.frombuffer(chunk, dtype="<f8").reshape(arr.shape)
        pos += nbytes
    if pos != len(blob):
        raise SchemaError(f"{path}: trailing bytes in checkpoint")
    meta = {}
    side = Path(str(path) + ".json")
    if side.exists():
        meta = json.loads(side.read_text())
    if kind is not None and meta.get("kind") not in (None, kind):
        raise SchemaError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected {kind!r}")
    if schema_version is not None and meta.get("schema_version") not in (None, schema_version):
        raise SchemaError(f"{path}: trained for schema {meta.get('schema_version')!r}, "
                          f"run uses {schema_version!r}")
    p.mode = "eval"
    p.validate()
    return p, meta
