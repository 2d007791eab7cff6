"""Dense Fourier neural operator with hand-written reverse mode.

The network is a fixed chain ``lift -> L x FourierLayer -> project`` where a
Fourier layer computes ``gelu(spectral_conv(z) + W z + b)``. Each op has a
forward function returning what its backward needs; :class:`FourierModel`
records those caches on a :class:`Tape`.

Arrays are batched: fields are ``(B, C, S, S)`` float64, spectral weights are
``(2, H_out, H_in, M1, M2)`` complex128 (corner block first).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy.special import erf

from . import spectral
from .errors import ConfigurationError, ShapeError, TrainingError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# RNG stream ids; all randomness is derived from (seed, stream)
INIT_STREAM = 0
SHUFFLE_STREAM = 1
PROBE_STREAM = 2
UPCYCLE_STREAM = 3


@dataclass
class FnoConfig:
    in_channels: int = 1
    out_channels: int = 1
    width: int = 32
    layers: int = 4
    modes: tuple[int, int] = (4, 4)
    grid_size: int = 64

    def __post_init__(self):
        self.modes = tuple(int(m) for m in self.modes)
        self.validate()

    def validate(self) -> None:
        if min(self.in_channels, self.out_channels, self.width, self.layers) < 1:
            raise ConfigurationError(f"channel/width/layer counts must be positive: {self}")
        if min(self.modes) < 1:
            raise ConfigurationError(f"modes must be positive, got {self.modes}")
        S = spectral.check_grid_size(self.grid_size)
        m1, m2 = self.modes
        if m1 > S // 2 or m2 > S // 2 + 1:
            raise ConfigurationError(f"modes {self.modes} exceed grid size {S}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = list(self.modes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FnoConfig":
        return cls(**{**d, "modes": tuple(d["modes"])})


# --- pointwise ops -----------------------------------------------------------


def pointwise(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel affine map: ``y[:, o] = sum_c W[o, c] x[:, c] + b[o]``."""
    B, C = x.shape[:2]
    if W.shape[1] != C:
        raise ShapeError(f"weight expects {W.shape[1]} channels, input has {C}")
    y = np.matmul(W, x.reshape(B, C, -1))
    y += b[:, None]
    return y.reshape((B, W.shape[0]) + x.shape[2:])


def pointwise_backward(gy: np.ndarray, x: np.ndarray, W: np.ndarray):
    B = x.shape[0]
    g = gy.reshape(B, gy.shape[1], -1)
    xf = x.reshape(B, x.shape[1], -1)
    gW = np.tensordot(g, xf, axes=([0, 2], [0, 2]))
    gb = g.sum(axis=(0, 2))
    gx = np.matmul(W.T, g).reshape(x.shape)
    return gx, gW, gb


lift = pointwise
project = pointwise
pointwise_path = pointwise


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


# --- spectral convolution ----------------------------------------------------


def spectral_mix(W: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Per-mode channel mixing ``out[..., o, m] = sum_i W[..., o, i, m] z[..., i, m]``.

    Accumulates over input channels in a fixed order with elementwise ops only,
    so every output element is bit-identical regardless of the batch layout it
    is computed in.
    """
    n_in = z.shape[-3]
    if W.shape[-3] != n_in:
        raise ShapeError(f"weights expect {W.shape[-3]} input channels, got {n_in}")
    out = W[..., :, 0, :, :] * z[..., None, 0, :, :]
    for i in range(1, n_in):
        out += W[..., :, i, :, :] * z[..., None, i, :, :]
    return out


def gather_blocks(zh: np.ndarray, modes: tuple[int, int]) -> np.ndarray:
    """``(..., C, S, S//2+1)`` spectrum -> ``(..., 2, C, M1, M2)`` corner blocks."""
    m1, m2 = modes
    S = zh.shape[-2]
    return np.stack([zh[..., :m1, :m2], zh[..., S - m1:, :m2]], axis=-4)


def scatter_blocks(blocks: np.ndarray, S: int) -> np.ndarray:
    m1, m2 = blocks.shape[-2:]
    shape = blocks.shape[:-4] + (blocks.shape[-3], S, S // 2 + 1)
    out = np.zeros(shape, dtype=np.complex128)
    out[..., :m1, :m2] = blocks[..., 0, :, :, :]
    out[..., S - m1:, :m2] = blocks[..., 1, :, :, :]
    return out


def spectral_conv(z: np.ndarray, R: np.ndarray):
    """``IFFT(R . FFT(z))`` on the retained corner blocks, zero elsewhere.

    Returns ``(y, cache)``.
    """
    S = z.shape[-1]
    m1, m2 = R.shape[-2:]
    if m1 > S // 2 or m2 > S // 2 + 1:
        raise ConfigurationError(f"modes {(m1, m2)} exceed grid size {S}")
    zh = spectral.rfft2(z)
    zb = gather_blocks(zh, (m1, m2))
    out = scatter_blocks(spectral_mix(R, zb), S)
    return spectral.irfft2(out, S), zb


def spectral_conv_backward(gy: np.ndarray, zb: np.ndarray, R: np.ndarray):
    S = gy.shape[-1]
    m = R.shape[-2:]
    g_out = gather_blocks(spectral.irfft2_backward(gy), m)  # (B, 2, O, M1, M2)
    gR = np.einsum("bkoxy,bkixy->koixy", g_out, zb.conj())
    g_zb = np.einsum("koixy,bkoxy->bkixy", R.conj(), g_out)
    gz = spectral.rfft2_backward(scatter_blocks(g_zb, S), S)
    return gz, gR


# --- initialization ----------------------------------------------------------


def init_linear(rng: np.random.Generator, fan_out: int, fan_in: int):
    bound = 1.0 / math.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=fan_out)
    return W, b


def init_spectral(rng: np.random.Generator, width: int, modes: tuple[int, int]) -> np.ndarray:
    scale = 1.0 / (width * width)
    shape = (2, width, width) + tuple(modes)
    re = rng.uniform(size=shape)
    im = rng.uniform(size=shape)
    return scale * (re + 1j * im)


def init_fno_params(config: FnoConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, INIT_STREAM])
    H = config.width
    params: dict[str, np.ndarray] = {}
    params["lift.weight"], params["lift.bias"] = init_linear(rng, H, config.in_channels)
    for l in range(config.layers):
        params[f"layers.{l}.spectral"] = init_spectral(rng, H, config.modes)
        W, b = init_linear(rng, H, H)
        params[f"layers.{l}.pointwise.weight"] = W
        params[f"layers.{l}.pointwise.bias"] = b
    params["proj.weight"], params["proj.bias"] = init_linear(rng, config.out_channels, H)
    return params


# --- model -------------------------------------------------------------------


@dataclass
class Tape:
    """Forward record consumed by ``backward``."""

    mode: str
    x: np.ndarray
    layers: list[dict[str, Any]] = field(default_factory=list)
    z_final: np.ndarray | None = None
    gates: list[np.ndarray] | None = None
    active: list[np.ndarray] | None = None


class FourierModel:
    """Shared lift / Fourier-layer / projection chain."""

    kind = "abstract"

    def __init__(self, config: FnoConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    # subclasses implement the spectral part of each Fourier layer
    def _spectral_forward(self, l: int, z: np.ndarray, ctx: dict):
        raise NotImplementedError

    def _spectral_backward(self, l: int, g: np.ndarray, cache: dict, ctx: dict):
        raise NotImplementedError

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[2] != x.shape[3]:
            raise ShapeError(
                f"expected input (B, {self.config.in_channels}, S, S), got {x.shape}"
            )
        spectral.check_grid_size(x.shape[-1])
        return x

    def forward(self, x: np.ndarray, mode: str = "train", **ctx):
        """Run the network; returns ``(y, tape)``."""
        if mode not in ("train", "infer"):
            raise ConfigurationError(f"unknown forward mode {mode!r}")
        x = self._check_input(x)
        p = self.params
        tape = Tape(mode=mode, x=x)
        ctx = dict(ctx, mode=mode)
        self._begin(tape, ctx)
        z = pointwise(x, p["lift.weight"], p["lift.bias"])
        for l in range(self.config.layers):
            s, scache = self._spectral_forward(l, z, ctx)
            a = s + pointwise(z, p[f"layers.{l}.pointwise.weight"], p[f"layers.{l}.pointwise.bias"])
            tape.layers.append({"z": z, "a": a, "spectral": scache})
            self._record(tape, scache)
            z = gelu(a)
        tape.z_final = z
        y = pointwise(z, p["proj.weight"], p["proj.bias"])
        return y, tape

    def _begin(self, tape: Tape, ctx: dict) -> None:
        pass

    def _record(self, tape: Tape, scache: dict) -> None:
        pass

    def predict(self, x: np.ndarray, **kw) -> np.ndarray:
        y, _ = self.forward(x, mode="infer", **kw)
        return y

    __call__ = predict

    def backward(self, grad_y: np.ndarray, tape: Tape | None, **ctx) -> dict[str, np.ndarray]:
        """Gradients of all parameters (and ``"input"``) for the recorded graph."""
        if tape is None:
            raise TrainingError("backward called without a forward tape")
        if tape.mode != "train":
            raise TrainingError("no gradients are defined for an inference-mode tape")
        p = self.params
        grads: dict[str, np.ndarray] = {}
        g, grads["proj.weight"], grads["proj.bias"] = pointwise_backward(
            grad_y, tape.z_final, p["proj.weight"]
        )
        for l in reversed(range(self.config.layers)):
            rec = tape.layers[l]
            ga = gelu_backward(rec["a"], g)
            gz_pw, gW, gb = pointwise_backward(ga, rec["z"], p[f"layers.{l}.pointwise.weight"])
            grads[f"layers.{l}.pointwise.weight"] = gW
            grads[f"layers.{l}.pointwise.bias"] = gb
            gz_sp = self._spectral_backward(l, ga, rec["spectral"], dict(ctx, grads=grads))
            g = gz_pw + gz_sp
        gx, grads["lift.weight"], grads["lift.bias"] = pointwise_backward(
            g, tape.x, p["lift.weight"]
        )
        grads["input"] = gx
        return {k: grads[k] for k in [*p.keys(), "input"]}

    @property
    def n_params(self) -> int:
        return sum(v.size * (2 if np.iscomplexobj(v) else 1) for v in self.params.values())


class FNO(FourierModel):
    kind = "dense"

    def __init__(self, config: FnoConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        super().__init__(config, params if params is not None else init_fno_params(config, seed))
        self.seed = seed

    def _spectral_forward(self, l, z, ctx):
        y, zb = spectral_conv(z, self.params[f"layers.{l}.spectral"])
        return y, {"zb": zb}

    def _spectral_backward(self, l, g, cache, ctx):
        gz, gR = spectral_conv_backward(g, cache["zb"], self.params[f"layers.{l}.spectral"])
        ctx["grads"][f"layers.{l}.spectral"] = gR
        return gz


def fno_forward(x: np.ndarray, model: FourierModel, mode: str = "train", **kw):
    return model.forward(x, mode=mode, **kw)


def fno_backward(grad_y: np.ndarray, tape: Tape | None, model: FourierModel, **kw):
    return model.backward(grad_y, tape, **kw)


# --- counters ----------------------------------------------------------------

# a complex multiply-accumulate is 4 real multiplies and 4 real adds
FLOPS_PER_CMAC = 8
# gelu, residual add and bias add each counted as one flop per element
FLOPS_PER_ACTIVATION = 1


def spectral_params(width: int, modes: tuple[int, int], layers: int, blocks: int = 2) -> int:
    """Real parameter count of the spectral weights (complex counts twice)."""
    return 2 * blocks * width * width * modes[0] * modes[1] * layers


def spectral_cmacs(width: int, modes: tuple[int, int], blocks: int = 2) -> int:
    """Complex multiply-accumulates of one spectral convolution on one sample."""
    return blocks * width * width * modes[0] * modes[1]


def fft_flops(S: int) -> int:
    """Nominal ``5 N log2 N / 2`` cost of one real 2D FFT of an ``S x S`` grid."""
    return 5 * S * S * int(math.log2(S))


def count_params(model_or_config) -> int:
    cfg = getattr(model_or_config, "config", model_or_config)
    H, L = cfg.width, cfg.layers
    dense_linear = (H * cfg.in_channels + H) + L * (H * H + H) + (cfg.out_channels * H + cfg.out_channels)
    return dense_linear + spectral_params(H, cfg.modes, L)


def count_flops(model_or_config, S: int | None = None) -> dict[str, int]:
    """Closed-form forward FLOPs of one sample, broken down by term."""
    cfg = getattr(model_or_config, "config", model_or_config)
    S = S or cfg.grid_size
    H, L, px = cfg.width, cfg.layers, S * S
    terms = {
        "lift": 2 * cfg.in_channels * H * px,
        "spectral": L * FLOPS_PER_CMAC * spectral_cmacs(H, cfg.modes),
        "fft": L * 2 * H * fft_flops(S),
        "pointwise": L * 2 * H * H * px,
        "activation": L * 2 * FLOPS_PER_ACTIVATION * H * px,
        "project": 2 * H * cfg.out_channels * px,
    }
    terms["total"] = sum(terms.values())
    return terms
