"""Wireless link model ``y = H * s + N``.

Noise power is set per transmitted vector from that vector's empirical mean
power, ``sigma^2 = P_s / 10^(snr_db / 10)``. ``snr_db = inf`` disables noise.
Block fading draws one gain per ``block_len`` real symbols; by default the
real magnitude ``|H|`` of a unit-power complex Gaussian is applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError

NOISELESS = math.inf
FADING_MODES = ("none", "rayleigh_block")


@dataclass
class ChannelConfig:
    snr_db: float = 20.0
    fading: str = "none"
    seed: int = 0
    block_len: int = 32
    complex_pairing: bool = False
    equalize: bool = False
    power_floor: float = 1e-12

    def __post_init__(self):
        self.snr_db = float(self.snr_db)
        if self.fading not in FADING_MODES:
            raise ConfigError(f"fading must be one of {FADING_MODES}, got {self.fading!r}")
        if self.block_len < 1:
            raise ConfigError("block_len must be >= 1")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ConfigError("snr_db must be finite or +inf")

    @property
    def noiseless(self) -> bool:
        return self.snr_db == math.inf

    def to_dict(self):
        d = asdict(self)
        if math.isinf(self.snr_db):
            d["snr_db"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("snr_db"), str):
            d["snr_db"] = float(d["snr_db"])
        return cls(**d)


@dataclass
class ChannelRealization:
    """What the channel did to one batch: gains, noise level, draw count."""

    h: np.ndarray                      # per-symbol gain, real (B, n) or complex (B, n/2)
    noise_var: np.ndarray              # per row
    noise_draws: int = 0
    floored: int = 0
    complex_pairing: bool = False
    equalized: bool = False
    block_gains: np.ndarray = field(default=None, repr=False)

    def apply(self, s):
        """Noiseless channel output for ``s`` (what the receiver would see without N)."""
        s = np.atleast_2d(np.asarray(s, dtype=float))
        if self.equalized:
            return s.copy()
        if self.complex_pairing:
            return _real_view(self.h * _complex_view(s))
        return self.h * s

    def backward(self, grad_y):
        """Gradient w.r.t. ``s`` treating the noise draw as constant."""
        g = np.atleast_2d(np.asarray(grad_y, dtype=float))
        if self.equalized:
            return g.copy()
        if self.complex_pairing:
            return _real_view(np.conj(self.h) * _complex_view(g))
        return self.h * g


def _complex_view(x):
    return x[:, 0::2] + 1j * x[:, 1::2]


def _real_view(z):
    out = np.empty((z.shape[0], 2 * z.shape[1]))
    out[:, 0::2] = z.real
    out[:, 1::2] = z.imag
    return out


def noise_variance(s, snr_db: float, floor: float = 1e-12):
    """Per-row noise variance and the number of rows that hit the power floor."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    if snr_db == math.inf:
        return np.zeros(len(s)), 0
    p = np.mean(s ** 2, axis=1)
    zero = p <= 0.0
    var = p / 10.0 ** (snr_db / 10.0)
    var[zero] = floor
    return var, int(zero.sum())


def transmit(s, cfg: ChannelConfig, stream: np.random.Generator):
    """Send one vector (n,) or a batch (B, n) of independent vectors."""
    s = np.asarray(s, dtype=float)
    one = s.ndim == 1
    s2 = np.atleast_2d(s)
    if not np.all(np.isfinite(s2)):
        raise ValueError("transmitted symbols must be finite")
    B, n = s2.shape
    var, floored = noise_variance(s2, cfg.snr_db, cfg.power_floor)

    if cfg.complex_pairing:
        if n % 2:
            raise ConfigError("complex pairing needs an even symbol count")
        m = n // 2
        blk = max(1, cfg.block_len // 2)
        nb = -(-m // blk)
        if cfg.fading == "rayleigh_block":
            g = (stream.standard_normal((B, nb)) + 1j * stream.standard_normal((B, nb))) / math.sqrt(2.0)
        else:
            g = np.ones((B, nb), dtype=complex)
        h = np.repeat(g, blk, axis=1)[:, :m]
    else:
        nb = -(-n // cfg.block_len)
        if cfg.fading == "rayleigh_block":
            re = stream.standard_normal((B, nb))
            im = stream.standard_normal((B, nb))
            g = np.sqrt((re ** 2 + im ** 2) / 2.0)
        else:
            g = np.ones((B, nb))
        h = np.repeat(g, cfg.block_len, axis=1)[:, :n]

    real = ChannelRealization(h=h, noise_var=var, floored=floored,
                              complex_pairing=cfg.complex_pairing, block_gains=g)
    y = real.apply(s2)
    if not cfg.noiseless:
        noise = stream.standard_normal((B, n)) * np.sqrt(var)[:, None]
        real.noise_draws = B * n
        y = y + noise
    if cfg.equalize:
        y = _equalize(y, h, cfg.complex_pairing)
        real.equalized = True
    return (y[0] if one else y), real


def _equalize(y, h, complex_pairing):
    if complex_pairing:
        return _real_view(_complex_view(y) / h)
    return y / h


def measure_empirical_snr(s_batch, y_batch, realizations) -> float:
    """10 log10 of faded-signal energy over residual energy, pooled over the batch."""
    if isinstance(realizations, ChannelRealization):
        s_batch, y_batch, realizations = [s_batch], [y_batch], [realizations]
    sig = noise = 0.0
    for s, y, r in zip(s_batch, y_batch, realizations):
        clean = r.apply(s)
        sig += float(np.sum(clean ** 2))
        noise += float(np.sum((np.atleast_2d(y) - clean) ** 2))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(sig / noise)
