"""Turn a pretrained dense FNO checkpoint into a FreqMoE checkpoint.

For every Fourier layer the dense spectral weights become the shared base
``R`` (band ``(0, 0)``); each expert band gets LoRA factors with ``A`` random
and ``B = 0`` so that ``R + alpha * A B == R`` exactly, and a zero gate vector
(every gate starts at 0.5). Lifting, pointwise and projection weights are
copied unchanged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import moe as moe_mod
from . import nn
from .errors import ArchitectureError, ConfigurationError
from .serialization import ModelCheckpoint, checkpoint_from_model, model_from_checkpoint
from .spectral import Band, BandLayout


@dataclass
class UpcycleSpec:
    n_experts: int | None = None
    rank: int = 4
    alpha: float = 1.0
    grid_chunks: tuple[int, int] = (8, 8)
    chunk_modes: tuple[int, int] | None = None
    top_k: int = 2
    tau: float = 1.0
    seed: int = 0
    grid_size: int | None = None
    expert_bands: list[Band] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_chunks"] = list(self.grid_chunks)
        d["chunk_modes"] = None if self.chunk_modes is None else list(self.chunk_modes)
        d["expert_bands"] = None if self.expert_bands is None else [list(b) for b in self.expert_bands]
        return d


def select_expert_bands(layout: BandLayout, n: int | None) -> list[Band]:
    """The ``n`` lowest-frequency expert bands, returned in row-major order."""
    candidates = layout.expert_band_ids()
    if n is None:
        return candidates
    if not 0 <= n <= len(candidates):
        raise ConfigurationError(f"n_experts={n} must lie in [0, {len(candidates)}]")
    by_freq = sorted(candidates, key=lambda b: (b[0] ** 2 + b[1] ** 2, b))
    return sorted(by_freq[:n])


def upcycle(base_ckpt: ModelCheckpoint, spec: UpcycleSpec) -> ModelCheckpoint:
    base = model_from_checkpoint(base_ckpt, expect="dense")
    cfg = base.config
    chunk = tuple(spec.chunk_modes) if spec.chunk_modes is not None else tuple(cfg.modes)
    if chunk != tuple(cfg.modes):
        raise ArchitectureError(
            f"base checkpoint has modes {tuple(cfg.modes)} but the layout chunk is {chunk}; "
            "the pretrained mode window must become band (0, 0)"
        )
    layout = BandLayout(chunk, tuple(spec.grid_chunks))
    bands = spec.expert_bands or select_expert_bands(layout, spec.n_experts)
    moe_cfg = moe_mod.MoeConfig(layout, bands, spec.rank, spec.alpha, spec.tau, spec.top_k)
    new_cfg = nn.FnoConfig(**{**cfg.to_dict(), "modes": chunk, "grid_size": spec.grid_size or cfg.grid_size})
    moe_cfg.validate(new_cfg.width)
    layout.check_grid(new_cfg.grid_size)

    rng = np.random.default_rng([spec.seed, nn.UPCYCLE_STREAM])
    N, H = moe_cfg.n_experts, cfg.width
    params: dict[str, np.ndarray] = {}
    for name, value in base.params.items():
        params[name] = value.copy()
        if name.endswith(".pointwise.bias"):
            l = name.split(".")[1]
            A, B = moe_mod.init_lora(rng, N, H, spec.rank, chunk)
            params[f"layers.{l}.experts.A"] = A
            params[f"layers.{l}.experts.B"] = B
            params[f"layers.{l}.gate.w"] = np.zeros((N, H))
    model = moe_mod.FreqMoE(new_cfg, moe_cfg, params)
    provenance = {
        "source": "upcycle",
        "base_config": cfg.to_dict(),
        "base_seed": base_ckpt.header.get("seed"),
        "base_provenance": base_ckpt.header.get("provenance", {}),
    }
    return checkpoint_from_model(model, seed=spec.seed, provenance=provenance, upcycle=spec.to_dict())


def check_compatible(base: nn.FourierModel, moe: moe_mod.FreqMoE) -> None:
    problems = []
    a, b = base.config, moe.config
    for field_name in ("width", "layers", "in_channels", "out_channels"):
        if getattr(a, field_name) != getattr(b, field_name):
            problems.append(f"{field_name}: base {getattr(a, field_name)} vs moe {getattr(b, field_name)}")
    if tuple(a.modes) != moe.moe.layout.chunk_modes:
        problems.append(f"modes: base {tuple(a.modes)} vs moe chunk {moe.moe.layout.chunk_modes}")
    if problems:
        raise ArchitectureError("base and FreqMoE checkpoints do not match: " + "; ".join(problems))


def verify_upcycle(base_ckpt: ModelCheckpoint, moe_ckpt: ModelCheckpoint,
                   probes: int = 8, seed: int = 0) -> dict:
    """Compare a FreqMoE checkpoint against the dense model it came from.

    Reports the largest output deviation between the base model and the
    FreqMoE model with experts masked off, the norm of every expert delta and
    parameter counts.
    """
    base = model_from_checkpoint(base_ckpt, expect="dense")
    moe = model_from_checkpoint(moe_ckpt, expect="freqmoe")
    check_compatible(base, moe)
    S = moe.config.grid_size
    rng = np.random.default_rng([seed, nn.PROBE_STREAM])
    x = rng.standard_normal((probes, base.config.in_channels, S, S))
    y_base = base.predict(x)
    y_moe = moe.predict(x, mask_experts=True)
    norms = moe.delta_norms()
    return {
        "max_deviation": float(np.max(np.abs(y_base - y_moe))),
        "probes": probes,
        "grid_size": S,
        "expert_bands": [list(bnd) for bnd in moe.moe.expert_bands],
        "delta_norms": norms.tolist(),
        "max_delta_norm": float(norms.max()) if norms.size else 0.0,
        "params": {
            "base": nn.count_params(base),
            "active": moe_mod.active_param_count(moe),
            "total": moe_mod.total_param_count(moe),
        },
    }
