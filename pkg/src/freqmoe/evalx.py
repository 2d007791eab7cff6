"""Evaluation: single-step error, rollouts, gate maps and the mode-scaling table."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import moe as moe_mod
from . import nn, pde
from .errors import DataError
from .spectral import BandLayout
from .train import l2_relative_error


def _predict(model, x: np.ndarray, top_k: int | None = None) -> np.ndarray:
    # anything with predict() works; only FreqMoE models take a top_k override
    if top_k is not None and getattr(model, "kind", None) == "freqmoe":
        return model.predict(x, top_k=top_k)
    return model.predict(x)


@dataclass
class SingleStepReport:
    per_sample: np.ndarray
    per_channel: np.ndarray  # (n, C)

    @property
    def mean(self) -> float:
        return float(self.per_sample.mean())

    @property
    def std(self) -> float:
        return float(self.per_sample.std())

    def to_dict(self) -> dict:
        return {
            "mean_l2re": self.mean,
            "std_l2re": self.std,
            "samples": int(self.per_sample.size),
            "per_channel_mean": self.per_channel.mean(axis=0).tolist(),
        }


def eval_single_step(model, inputs: np.ndarray, targets: np.ndarray, batch_size: int = 32,
                     top_k: int | None = None) -> SingleStepReport:
    """Per-sample and per-channel L2RE of one-step predictions (inference path)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(inputs) == 0:
        raise DataError("cannot evaluate an empty dataset")
    per, per_ch = [], []
    for s in range(0, len(inputs), batch_size):
        y = _predict(model, inputs[s:s + batch_size], top_k)
        t = targets[s:s + batch_size]
        per.append(l2_relative_error(y, t, reduce=False))
        # (B, C, S, S) -> (B*C, 1, S, S) gives per-channel errors
        flat = lambda a: a.reshape(a.shape[0] * a.shape[1], -1)
        per_ch.append(l2_relative_error(flat(y), flat(t), reduce=False).reshape(t.shape[:2]))
    return SingleStepReport(np.concatenate(per), np.concatenate(per_ch))


@dataclass
class RolloutResult:
    errors: np.ndarray  # L2RE at steps 1..len(errors)
    requested_steps: int
    truncated: bool = False
    reason: str = ""

    @property
    def steps(self) -> np.ndarray:
        return np.arange(1, len(self.errors) + 1)

    def rows(self) -> list[dict]:
        return [{"step": int(s), "l2re": float(e)} for s, e in zip(self.steps, self.errors)]


def rollout(model, initial_state: np.ndarray, steps: int, meta: pde.PdeDatasetMeta | None = None,
            truth: list[np.ndarray] | None = None, top_k: int | None = None) -> RolloutResult:
    """Feed predictions back as inputs and track L2RE against the reference.

    The reference trajectory is ``truth`` if given, otherwise produced by
    :func:`pde.advance` with ``meta``. A non-finite prediction stops the
    rollout and sets ``truncated``.
    """
    state = np.asarray(initial_state, dtype=np.float64)
    if state.ndim == 2:
        state = state[None]
    if truth is None:
        if meta is None:
            raise DataError("rollout needs either a reference trajectory or dataset metadata")
        truth, ref = [], state[0]
        for _ in range(steps):
            ref = pde.advance(ref, meta)
            truth.append(ref[None])
    elif len(truth) < steps:
        raise DataError(f"reference trajectory has {len(truth)} states, {steps} requested")
    x = state[None]
    errs = []
    for k in range(steps):
        x = _predict(model, x, top_k)
        if not np.all(np.isfinite(x)):
            return RolloutResult(np.array(errs), steps, True, f"non-finite prediction at step {k + 1}")
        ref = np.asarray(truth[k], dtype=np.float64).reshape(x.shape)
        errs.append(float(l2_relative_error(x, ref, reduce=False)[0]))
    return RolloutResult(np.array(errs), steps)


@dataclass
class GateMap:
    """Per-band mean gate and top-K selection frequency on the ``J1 x J2`` grid.

    The base band is reported as 1.0 in both grids; bands without an expert
    are NaN.
    """

    available: bool
    message: str = ""
    mean_gate: np.ndarray | None = None
    active_frequency: np.ndarray | None = None
    per_layer: np.ndarray | None = None  # (L, J1, J2)
    samples: int = 0
    bands: list = field(default_factory=list)

    def to_dict(self) -> dict:
        if not self.available:
            return {"available": False, "message": self.message}
        clean = lambda a: [[None if np.isnan(v) else float(v) for v in row] for row in a]
        return {
            "available": True,
            "samples": self.samples,
            "mean_gate": clean(self.mean_gate),
            "active_frequency": clean(self.active_frequency),
            "per_layer_mean_gate": [clean(a) for a in self.per_layer],
        }

    def rows(self) -> list[dict]:
        if not self.available:
            return []
        j1, j2 = self.mean_gate.shape
        return [
            {"i1": i1, "i2": i2, "mean_gate": self.mean_gate[i1, i2],
             "active_frequency": self.active_frequency[i1, i2]}
            for i1 in range(j1) for i2 in range(j2)
        ]


def gate_activation_map(model, inputs: np.ndarray, batch_size: int = 32,
                        top_k: int | None = None) -> GateMap:
    if getattr(model, "kind", None) != "freqmoe":
        return GateMap(False, "no gates: dense model has no experts")
    inputs = np.asarray(inputs, dtype=np.float64)
    if len(inputs) == 0:
        raise DataError("cannot map gates over an empty dataset")
    layout: BandLayout = model.moe.layout
    bands = model.moe.expert_bands
    N, L = len(bands), model.config.layers
    gate_sum = np.zeros((L, N))
    hits = np.zeros((L, N))
    for s in range(0, len(inputs), batch_size):
        _, tape = model.forward(inputs[s:s + batch_size], mode="infer", top_k=top_k)
        for l in range(L):
            gate_sum[l] += tape.gates[l].sum(axis=0)
            hits[l] += np.bincount(tape.active[l].ravel(), minlength=N)
    n = len(inputs)
    j1, j2 = layout.grid_chunks
    per_layer = np.full((L, j1, j2), np.nan)
    freq = np.full((L, j1, j2), np.nan)
    per_layer[:, 0, 0] = freq[:, 0, 0] = 1.0
    if N:
        e1, e2 = np.array(bands).T
        per_layer[:, e1, e2] = gate_sum / n
        freq[:, e1, e2] = hits / n
    return GateMap(True, "", per_layer.mean(axis=0), freq.mean(axis=0), per_layer, n, list(bands))


# --- mode-scaling benchmark ----------------------------------------------------


def _best_of(fn, repeats: int = 5) -> float:
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_modes(modes: list[int], top_k: int = 2, width: int = 32, layers: int = 4,
                chunk: tuple[int, int] = (4, 4), grid_size: int = 64, rank: int = 4,
                timing: bool = False, seed: int = 0) -> list[dict]:
    """Analytic cost of dense FNO vs FreqMoE as the retained modes grow.

    For each ``M`` the dense model keeps ``(M, M)`` modes; the FreqMoE model
    covers the same window with ``(M/P1) x (M/P2)`` chunks, all expert bands
    gated, and ``min(top_k, N)`` active experts. ``timing`` adds best-of-5
    wall-clock seconds for one forward pass.
    """
    rows = []
    for M in modes:
        if M % chunk[0] or M % chunk[1]:
            raise DataError(f"modes {M} are not a multiple of the chunk {chunk}")
        dense_cfg = nn.FnoConfig(width=width, layers=layers, modes=(M, M), grid_size=grid_size)
        layout = BandLayout(chunk, (M // chunk[0], M // chunk[1]))
        layout.check_grid(grid_size)
        moe_cfg = moe_mod.MoeConfig(layout, rank=rank)
        moe_cfg.top_k = min(top_k, moe_cfg.n_experts)
        base_cfg = nn.FnoConfig(width=width, layers=layers, modes=chunk, grid_size=grid_size)
        df = nn.count_flops(dense_cfg, grid_size)
        mf = moe_mod.count_moe_flops((base_cfg, moe_cfg), moe_cfg.top_k, grid_size)
        row = {
            "modes": M,
            "bands": layout.n_bands,
            "experts": moe_cfg.n_experts,
            "top_k": moe_cfg.top_k,
            "dense_spectral_flops": df["spectral"],
            "dense_total_flops": df["total"],
            "moe_base_flops": mf["spectral"],
            "moe_expert_flops": mf["experts"],
            "moe_gating_flops": mf["gating"],
            "moe_total_flops": mf["total"],
            "dense_params": nn.count_params(dense_cfg),
            "moe_active_params": moe_mod.active_param_count((base_cfg, moe_cfg)),
            "moe_total_params": moe_mod.total_param_count((base_cfg, moe_cfg)),
        }
        if timing:
            rng = np.random.default_rng([seed, nn.PROBE_STREAM])
            x = rng.standard_normal((1, 1, grid_size, grid_size))
            dense = nn.FNO(dense_cfg, seed=seed)
            params = nn.init_fno_params(base_cfg, seed)
            for name, shape in moe_mod.param_shapes(base_cfg, moe_cfg).items():
                if name not in params:
                    params[name] = np.zeros(shape, dtype=np.complex128 if "experts" in name else np.float64)
            sparse = moe_mod.FreqMoE(base_cfg, moe_cfg, params)
            row["dense_seconds"] = _best_of(lambda: dense.predict(x))
            row["moe_seconds"] = _best_of(lambda: sparse.predict(x))
        rows.append(row)
    return rows


# --- writers -----------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path, rows: list[dict], fieldnames: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
