"""Frequency-band mixture of experts on top of the dense Fourier layer.

Each Fourier layer keeps the dense spectral weights ``R`` for the base band
``(0, 0)``. Every expert band ``i`` gets weights ``R + alpha * A_i B_i`` with a
low-rank complex factorization per corner block, and a sigmoid gate computed
from the band's own coefficients::

    g_i = sigmoid(<w_i, features(z_band_i)> / tau)
    o_i = g_i * (R + alpha A_i B_i) . z_band_i

Training uses every expert; inference keeps only the top-K gates per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import nn, spectral
from .errors import ConfigurationError, ShapeError
from .spectral import Band, BandBlock, BandLayout


@dataclass
class MoeConfig:
    layout: BandLayout
    expert_bands: list[Band] | None = None
    rank: int = 4
    alpha: float = 1.0
    tau: float = 1.0
    top_k: int = 2

    def __post_init__(self):
        if isinstance(self.layout, dict):
            self.layout = BandLayout.from_dict(self.layout)
        if self.expert_bands is None:
            self.expert_bands = self.layout.expert_band_ids()
        self.expert_bands = [tuple(int(v) for v in b) for b in self.expert_bands]

    @property
    def n_experts(self) -> int:
        return len(self.expert_bands)

    def validate(self, width: int) -> None:
        for b in self.expert_bands:
            self.layout.check_band(b)
            if b == (0, 0):
                raise ConfigurationError("the base band (0, 0) cannot hold an expert")
        if len(set(self.expert_bands)) != self.n_experts:
            raise ConfigurationError("expert bands must be distinct")
        if self.n_experts > self.layout.n_expert_bands:
            raise ConfigurationError(
                f"{self.n_experts} experts exceed the {self.layout.n_expert_bands} expert bands"
            )
        if not 0 <= self.top_k <= self.n_experts:
            raise ConfigurationError(f"top_k={self.top_k} must lie in [0, {self.n_experts}]")
        if self.rank < 1 or 2 * self.rank > width:
            raise ConfigurationError(f"rank {self.rank} must satisfy 1 <= r <= width/2 = {width / 2}")
        if not self.tau > 0:
            raise ConfigurationError(f"gate temperature must be positive, got {self.tau}")

    def to_dict(self) -> dict:
        return {
            "layout": self.layout.to_dict(),
            "expert_bands": [list(b) for b in self.expert_bands],
            "rank": self.rank,
            "alpha": self.alpha,
            "tau": self.tau,
            "top_k": self.top_k,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MoeConfig":
        return cls(
            layout=BandLayout.from_dict(d["layout"]),
            expert_bands=[tuple(b) for b in d["expert_bands"]],
            rank=d["rank"],
            alpha=d["alpha"],
            tau=d["tau"],
            top_k=d["top_k"],
        )


@dataclass
class GateParams:
    w: np.ndarray  # (N, H)
    tau: float = 1.0
    bands: list[Band] = field(default_factory=list)

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError(f"gate temperature must be positive, got {self.tau}")


@dataclass
class ExpertParams:
    A: np.ndarray  # (2, r, H)
    B: np.ndarray  # (2, H, r, P1, P2)
    alpha: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[-2]


@dataclass
class FreqMoELayer:
    """Spectral parameters of one Fourier layer; arrays are stacked over experts."""

    base: np.ndarray  # (2, H, H, P1, P2)
    A: np.ndarray  # (N, 2, r, H)
    B: np.ndarray  # (N, 2, H, r, P1, P2)
    gates: GateParams
    layout: BandLayout
    alpha: float = 1.0
    top_k: int = 2

    @property
    def bands(self) -> list[Band]:
        return self.gates.bands

    @property
    def n_experts(self) -> int:
        return len(self.gates.bands)

    def expert(self, i: int) -> ExpertParams:
        return ExpertParams(self.A[i], self.B[i], self.alpha)


# --- single-band building blocks ---------------------------------------------


def band_features(block: BandBlock | np.ndarray) -> np.ndarray:
    """Per-channel mean magnitude of a band's coefficients over both blocks."""
    values = block.values if isinstance(block, BandBlock) else block
    return np.abs(values).mean(axis=(-3, -2, -1))


def gate_forward(features: np.ndarray, gates: GateParams, band: Band) -> float:
    i = gates.bands.index(tuple(band))
    return float(expit(np.dot(gates.w[i], features) / gates.tau))


def lora_delta(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``delta[..., o, i, m] = sum_k B[..., o, k, m] A[..., k, i]`` (unscaled)."""
    r = A.shape[-2]
    if B.shape[-3] != r:
        raise ShapeError(f"rank mismatch: A has rank {r}, B has {B.shape[-3]}")
    out = B[..., :, 0, None, :, :] * A[..., 0, None, :, None, None]
    for k in range(1, r):
        out += B[..., :, k, None, :, :] * A[..., k, None, :, None, None]
    return out


def materialize_expert(base: np.ndarray, e: ExpertParams) -> np.ndarray:
    """Expert weights ``R + alpha * A B`` with the same shape as ``base``."""
    if e.B.shape[:2] != base.shape[:2] or e.B.shape[-2:] != base.shape[-2:] or e.A.shape[-1] != base.shape[2]:
        raise ShapeError(f"expert factors {e.A.shape}, {e.B.shape} do not fit base {base.shape}")
    return base + e.alpha * lora_delta(e.A, e.B)


def sparsity_loss(gate_values) -> float:
    """Batch mean of the summed gate values.

    Accepts a ``(B, N)`` array, or a list of them (one per layer), in which
    case the per-layer losses are averaged so the bound ``(0, N)`` holds.
    """
    if isinstance(gate_values, (list, tuple)):
        if not gate_values:
            return 0.0
        return float(np.mean([sparsity_loss(g) for g in gate_values]))
    g = np.asarray(gate_values, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    if g.size == 0:
        return 0.0
    return float(g.sum(axis=1).mean())


def sparsity_loss_grad(gate_values: list[np.ndarray], weight: float = 1.0) -> list[np.ndarray]:
    """Gradient of ``weight * sparsity_loss(gate_values)`` w.r.t. every gate."""
    n_layers = len(gate_values)
    return [np.full_like(g, weight / (g.shape[0] * n_layers)) for g in gate_values]


# --- batched layer ------------------------------------------------------------


def _unit_phase(z: np.ndarray) -> np.ndarray:
    mag = np.abs(z)
    out = np.zeros_like(z)
    np.divide(z, mag, out=out, where=mag > 0)
    return out


def top_k_experts(gates: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest gates per row, ties to the lower index."""
    order = np.argsort(-gates, axis=-1, kind="stable")
    return order[..., :k]


def layer_forward(z: np.ndarray, layer: FreqMoELayer, mode: str = "train",
                  top_k: int | None = None, mask_experts: bool = False):
    """Spectral part of a FreqMoE Fourier layer on a batch ``(B, H, S, S)``.

    Returns ``(y, cache)``; ``cache["gates"]`` holds the ``(B, N)`` gate values
    and, in inference mode, ``cache["active"]`` the ``(B, K)`` expert indices.
    """
    S = z.shape[-1]
    layout = layer.layout
    layout.check_grid(S)
    chunk = layout.chunk_modes
    if layer.base.shape[-2:] != chunk:
        raise ShapeError(f"base weights cover {layer.base.shape[-2:]} modes, layout chunk is {chunk}")
    zh = spectral.rfft2(z)
    zb0 = nn.gather_blocks(zh, chunk)
    out = nn.scatter_blocks(nn.spectral_mix(layer.base, zb0), S)
    cache = {"zb0": zb0, "mode": mode, "masked": mask_experts or layer.n_experts == 0}
    B = z.shape[0]
    N = layer.n_experts
    if cache["masked"]:
        cache["gates"] = np.zeros((B, N))
        if mode == "infer":
            cache["active"] = np.zeros((B, 0), dtype=np.int64)
        return spectral.irfft2(out, S), cache

    e1, e2 = np.array(layer.bands).T
    zexp = spectral.gather_bands(zh, layout)[:, e1, e2]  # (B, N, 2, H, P1, P2)
    feats = np.abs(zexp).mean(axis=(2, 4, 5))  # (B, N, H), same as band_features per band
    logits = np.einsum("bnh,nh->bn", feats, layer.gates.w) / layer.gates.tau
    g = expit(logits)
    We = layer.base[None] + layer.alpha * lora_delta(layer.A, layer.B)  # (N, 2, H, H, P1, P2)

    og = np.zeros_like(zexp)
    if mode == "train":
        oe = nn.spectral_mix(We[None], zexp)
        og = g[:, :, None, None, None, None] * oe
        cache.update(zexp=zexp, feats=feats, g=g, We=We, oe=oe)
    else:
        K = layer.top_k if top_k is None else top_k
        if not 0 <= K <= N:
            raise ConfigurationError(f"top_k={K} must lie in [0, {N}]")
        # rank on logits: same order as the gates, but immune to sigmoid saturation
        active = top_k_experts(logits, K)
        if K > 0:
            bi = np.repeat(np.arange(B), K)
            ni = active.ravel()
            oe = nn.spectral_mix(We[ni], zexp[bi, ni])
            og[bi, ni] = g[bi, ni][:, None, None, None, None] * oe
        cache["active"] = active
    cache["gates"] = g

    j1, j2 = layout.grid_chunks
    bands_out = np.zeros((B, j1, j2) + zexp.shape[2:], dtype=np.complex128)
    bands_out[:, e1, e2] = og
    out = out + spectral.scatter_bands(bands_out, layout, S)
    return spectral.irfft2(out, S), cache


def layer_backward(gy: np.ndarray, cache: dict, layer: FreqMoELayer,
                   gate_grad: np.ndarray | None = None):
    """Reverse mode of :func:`layer_forward` (training tapes only).

    ``gate_grad`` is an extra ``dL/dg`` of shape ``(B, N)`` (sparsity loss).
    Returns ``(gz, grads)`` with grads for ``base``, ``A``, ``B`` and ``w``.
    """
    if cache["mode"] != "train":
        raise ShapeError("layer_backward requires a training-mode cache")
    S = gy.shape[-1]
    layout = layer.layout
    chunk = layout.chunk_modes
    G = spectral.irfft2_backward(gy)
    g_out0 = nn.gather_blocks(G, chunk)
    zb0 = cache["zb0"]
    g_base = np.einsum("bkoxy,bkixy->koixy", g_out0, zb0.conj())
    g_zb0 = np.einsum("koixy,bkoxy->bkixy", layer.base.conj(), g_out0)
    Gz = nn.scatter_blocks(g_zb0, S)
    grads = {
        "A": np.zeros_like(layer.A),
        "B": np.zeros_like(layer.B),
        "w": np.zeros_like(layer.gates.w),
    }
    if not cache["masked"]:
        e1, e2 = np.array(layer.bands).T
        G_og = spectral.gather_bands(G, layout)[:, e1, e2]
        g, oe, zexp, We, feats = (cache[k] for k in ("g", "oe", "zexp", "We", "feats"))
        gg = np.real(G_og * oe.conj()).sum(axis=(2, 3, 4, 5))
        if gate_grad is not None:
            gg = gg + gate_grad
        G_oe = g[:, :, None, None, None, None] * G_og
        gWe = np.einsum("bnkoxy,bnkixy->nkoixy", G_oe, zexp.conj())
        g_zexp = np.einsum("nkoixy,bnkoxy->bnkixy", We.conj(), G_oe)
        g_base = g_base + gWe.sum(axis=0)
        g_delta = layer.alpha * gWe
        grads["B"] = np.einsum("nkoixy,nkri->nkorxy", g_delta, layer.A.conj())
        grads["A"] = np.einsum("nkorxy,nkoixy->nkri", layer.B.conj(), g_delta)
        g_logit = gg * g * (1.0 - g)
        tau = layer.gates.tau
        grads["w"] = np.einsum("bn,bnh->nh", g_logit, feats) / tau
        g_feat = g_logit[:, :, None] * layer.gates.w[None] / tau  # (B, N, H)
        p1, p2 = chunk
        g_zexp = g_zexp + (g_feat / (2 * p1 * p2))[:, :, None, :, None, None] * _unit_phase(zexp)
        j1, j2 = layout.grid_chunks
        bands_g = np.zeros((gy.shape[0], j1, j2) + zexp.shape[2:], dtype=np.complex128)
        bands_g[:, e1, e2] = g_zexp
        Gz = Gz + spectral.scatter_bands(bands_g, layout, S)
    grads["base"] = g_base
    return spectral.rfft2_backward(Gz, S), grads


def moe_layer_forward_train(z: np.ndarray, layer: FreqMoELayer):
    """All experts active, gate-scaled. ``z`` is ``(H, S, S)`` or batched."""
    single = z.ndim == 3
    y, cache = layer_forward(z[None] if single else z, layer, mode="train")
    g = cache["gates"]
    return (y[0], g[0]) if single else (y, g)


def moe_layer_forward_infer(z: np.ndarray, layer: FreqMoELayer, K: int):
    """Top-K sparse inference; returns ``(output, active_set)``.

    The active set lists expert band ids in decreasing gate order.
    """
    if K > layer.n_experts:
        raise ConfigurationError(f"K={K} exceeds the {layer.n_experts} experts")
    single = z.ndim == 3
    y, cache = layer_forward(z[None] if single else z, layer, mode="infer", top_k=K)
    active = [[layer.bands[i] for i in row] for row in cache["active"]]
    return (y[0], active[0]) if single else (y, active)


# --- model -------------------------------------------------------------------


def init_lora(rng: np.random.Generator, n: int, width: int, rank: int, chunk: tuple[int, int]):
    scale = 1.0 / np.sqrt(rank)
    shape = (n, 2, rank, width)
    A = scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    B = np.zeros((n, 2, width, rank) + tuple(chunk), dtype=np.complex128)
    return A, B


def param_shapes(config: nn.FnoConfig, moe: MoeConfig) -> dict[str, tuple[int, ...]]:
    """Expected tensor shapes of a FreqMoE model, in parameter order."""
    H, r, N = config.width, moe.rank, moe.n_experts
    chunk = moe.layout.chunk_modes
    shapes = {}
    for name, v in nn.init_fno_params(config, 0).items():
        shapes[name] = v.shape
        if name.endswith(".pointwise.bias"):
            l = name.split(".")[1]
            shapes[f"layers.{l}.experts.A"] = (N, 2, r, H)
            shapes[f"layers.{l}.experts.B"] = (N, 2, H, r) + tuple(chunk)
            shapes[f"layers.{l}.gate.w"] = (N, H)
    return shapes


class FreqMoE(nn.FourierModel):
    kind = "freqmoe"

    def __init__(self, config: nn.FnoConfig, moe: MoeConfig, params: dict[str, np.ndarray]):
        if tuple(config.modes) != moe.layout.chunk_modes:
            raise ConfigurationError(
                f"base modes {config.modes} must equal the layout chunk {moe.layout.chunk_modes}"
            )
        moe.validate(config.width)
        moe.layout.check_grid(config.grid_size)
        super().__init__(config, params)
        self.moe = moe

    def layer(self, l: int) -> FreqMoELayer:
        p = self.params
        return FreqMoELayer(
            base=p[f"layers.{l}.spectral"],
            A=p[f"layers.{l}.experts.A"],
            B=p[f"layers.{l}.experts.B"],
            gates=GateParams(p[f"layers.{l}.gate.w"], self.moe.tau, self.moe.expert_bands),
            layout=self.moe.layout,
            alpha=self.moe.alpha,
            top_k=self.moe.top_k,
        )

    def _begin(self, tape, ctx):
        tape.gates = []
        if ctx["mode"] == "infer":
            tape.active = []

    def _record(self, tape, scache):
        tape.gates.append(scache["gates"])
        if "active" in scache:
            tape.active.append(scache["active"])

    def _spectral_forward(self, l, z, ctx):
        return layer_forward(
            z, self.layer(l), mode=ctx["mode"], top_k=ctx.get("top_k"),
            mask_experts=ctx.get("mask_experts", False),
        )

    def _spectral_backward(self, l, g, cache, ctx):
        gate_grads = ctx.get("gate_grads")
        gz, grads = layer_backward(g, cache, self.layer(l), None if gate_grads is None else gate_grads[l])
        out = ctx["grads"]
        out[f"layers.{l}.spectral"] = grads["base"]
        out[f"layers.{l}.experts.A"] = grads["A"]
        out[f"layers.{l}.experts.B"] = grads["B"]
        out[f"layers.{l}.gate.w"] = grads["w"]
        return gz

    def delta_norms(self) -> np.ndarray:
        """Frobenius norm of ``alpha * A B`` per (layer, expert)."""
        out = np.zeros((self.config.layers, self.moe.n_experts))
        for l in range(self.config.layers):
            lay = self.layer(l)
            d = lay.alpha * lora_delta(lay.A, lay.B)
            out[l] = np.sqrt((np.abs(d) ** 2).reshape(d.shape[0], -1).sum(axis=1))
        return out


def moe_backward(grad_y: np.ndarray, tape, model: FreqMoE, gate_grads=None):
    return model.backward(grad_y, tape, gate_grads=gate_grads)


def gate_records(tape, bands: list[Band]) -> list[dict]:
    """JSON-ready per-sample gate values (and active sets for inference tapes)."""
    records = []
    n_samples = tape.x.shape[0]
    for b in range(n_samples):
        for l, g in enumerate(tape.gates):
            rec = {
                "sample": b,
                "layer": l,
                "gates": {f"{i1},{i2}": float(v) for (i1, i2), v in zip(bands, g[b])},
            }
            if tape.active is not None:
                rec["active"] = [list(bands[i]) for i in tape.active[l][b]]
            records.append(rec)
    return records


# --- counters ----------------------------------------------------------------


def lora_params_per_expert(width: int, rank: int, chunk: tuple[int, int], blocks: int = 2) -> int:
    """Real parameters of one expert in one layer: ``2 * blocks * r*H*(1 + P1*P2)``."""
    return 2 * blocks * rank * width * (1 + chunk[0] * chunk[1])


def gate_params(width: int, n_experts: int) -> int:
    return n_experts * width


def _configs(model_or_configs):
    if isinstance(model_or_configs, tuple):
        return model_or_configs
    return model_or_configs.config, model_or_configs.moe


def active_param_count(model_or_configs, K: int | None = None) -> int:
    """Parameters touched by one inference pass with ``K`` active experts.

    Counts base spectral weights, ``K`` experts' LoRA factors and all gate
    vectors per layer, plus lifting, pointwise and projection weights.
    """
    cfg, moe = _configs(model_or_configs)
    K = moe.top_k if K is None else K
    per_layer = K * lora_params_per_expert(cfg.width, moe.rank, moe.layout.chunk_modes)
    per_layer += gate_params(cfg.width, moe.n_experts)
    return nn.count_params(cfg) + cfg.layers * per_layer


def total_param_count(model_or_configs) -> int:
    cfg, moe = _configs(model_or_configs)
    return active_param_count((cfg, moe), moe.n_experts)


def active_spectral_params(cfg: nn.FnoConfig, moe: MoeConfig, K: int | None = None) -> int:
    K = moe.top_k if K is None else K
    base = nn.spectral_params(cfg.width, moe.layout.chunk_modes, cfg.layers)
    return base + cfg.layers * K * lora_params_per_expert(cfg.width, moe.rank, moe.layout.chunk_modes)


def gating_flops_per_band(width: int, chunk: tuple[int, int]) -> int:
    # |z| (2 mul, 1 add, 1 sqrt) + accumulate over 2*P1*P2 coefficients per
    # channel, then a width-long dot product, the 1/tau scale and a sigmoid
    coeffs = 2 * width * chunk[0] * chunk[1]
    return 5 * coeffs + 2 * width + 1 + 4


def expert_flops_per_band(width: int, chunk: tuple[int, int]) -> int:
    # channel mixing plus scaling each complex output by a real gate
    return nn.FLOPS_PER_CMAC * nn.spectral_cmacs(width, chunk) + 2 * 2 * width * chunk[0] * chunk[1]


def count_moe_flops(model_or_configs, K: int | None = None, S: int | None = None) -> dict[str, int]:
    """Forward FLOPs of one sample under top-K inference.

    Expert weights are assumed pre-materialized, so LoRA products are not
    charged per sample.
    """
    cfg, moe = _configs(model_or_configs)
    K = moe.top_k if K is None else K
    S = S or cfg.grid_size
    chunk = moe.layout.chunk_modes
    terms = nn.count_flops(cfg, S)
    terms.pop("total")
    base = nn.FLOPS_PER_CMAC * nn.spectral_cmacs(cfg.width, chunk)
    terms["spectral"] = cfg.layers * base
    terms["experts"] = cfg.layers * K * expert_flops_per_band(cfg.width, chunk)
    terms["gating"] = cfg.layers * moe.n_experts * gating_flops_per_band(cfg.width, chunk)
    terms["total"] = sum(terms.values())
    return terms
