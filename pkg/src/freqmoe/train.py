"""Optimizer, learning-rate schedule, losses and the two training stages.

Stage one (``pretrain``) fits a dense FNO; stage two (``finetune``) trains an
upcycled FreqMoE model with every expert and gate active. Both use Adam with a
warmup + cosine + plateau schedule and the loss ``L2RE + lambda * L_sparse``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import moe as moe_mod
from . import nn
from .errors import ArchitectureError, ConfigurationError, DataError, TrainingError
from .pde import PdeDataset
from .serialization import ModelCheckpoint, checkpoint_from_model


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    warmup_steps: int = 50
    cosine_epochs: int = 70
    steady_epochs: int = 30
    min_lr_ratio: float = 5e-2
    sparsity_weight: float = 0.01
    clip_norm: float | None = 1.0
    freeze_base: bool = False
    burn_in_masked: int = 0
    seed: int = 0
    epochs: int | None = None  # None -> cosine_epochs + steady_epochs
    top_k: int | None = None  # None -> the model's own K

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0 < self.min_lr_ratio <= 1:
            raise ConfigurationError(f"min_lr_ratio must lie in (0, 1], got {self.min_lr_ratio}")
        if not self.sparsity_weight >= 0:
            raise ConfigurationError(f"sparsity weight must be >= 0, got {self.sparsity_weight}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigurationError("Adam needs 0 <= beta < 1 and eps > 0")
        if self.warmup_steps < 0 or self.cosine_epochs < 0 or self.steady_epochs < 0:
            raise ConfigurationError("schedule lengths must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigurationError("clip_norm must be positive or None")
        if self.burn_in_masked < 0:
            raise ConfigurationError("burn_in_masked must be >= 0")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")

    @property
    def total_epochs(self) -> int:
        return self.cosine_epochs + self.steady_epochs if self.epochs is None else self.epochs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    """Adam moments over the real view of each parameter (complex -> re/im pairs)."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


# --- schedule and optimizer -----------------------------------------------------


def lr_at(step: float, epoch: float, cfg: TrainConfig) -> float:
    """Learning rate after ``step`` optimizer steps, at (fractional) ``epoch``.

    Linear warmup over the first ``warmup_steps`` steps multiplies a cosine
    decay from ``lr`` to ``lr * min_lr_ratio`` over ``cosine_epochs``, which is
    then held constant.
    """
    warm = 1.0 if cfg.warmup_steps == 0 else min(1.0, step / cfg.warmup_steps)
    if cfg.cosine_epochs == 0 or epoch >= cfg.cosine_epochs:
        ratio = cfg.min_lr_ratio
    else:
        cos = 0.5 * (1.0 + math.cos(math.pi * max(epoch, 0.0) / cfg.cosine_epochs))
        ratio = cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cos
    return cfg.lr * warm * ratio


def _real_view(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.view(np.float64) if np.iscomplexobj(a) else a


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float, cfg: TrainConfig | None = None,
              names=None) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns a new parameter dict.

    Only ``names`` (default: every parameter) are updated; ``state.step`` is
    advanced once per call.
    """
    cfg = cfg or TrainConfig()
    names = list(params) if names is None else list(names)
    for k in names:
        if grads[k].shape != params[k].shape:
            raise TrainingError(f"gradient for {k!r} has shape {grads[k].shape}, parameter {params[k].shape}")
        if not np.all(np.isfinite(grads[k])):
            raise TrainingError(f"non-finite gradient in {k!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    out = dict(params)
    for k in names:
        g = _real_view(grads[k])
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[k], state.v[k] = m, v
        upd = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p = _real_view(params[k]) - upd
        out[k] = p.view(np.complex128) if np.iscomplexobj(params[k]) else p
    return out


def clip_gradients(grads: dict[str, np.ndarray], names, max_norm: float | None):
    """Scale ``grads[names]`` to global norm ``max_norm``; returns (grads, norm, clipped)."""
    norm = math.sqrt(sum(float(np.sum(np.abs(grads[k]) ** 2)) for k in names))
    if max_norm is None or norm <= max_norm:
        return grads, norm, False
    scale = max_norm / norm
    out = dict(grads)
    for k in names:
        out[k] = grads[k] * scale
    return out, norm, True


# --- losses ----------------------------------------------------------------------


def _sample_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1))


def l2_relative_error(pred: np.ndarray, target: np.ndarray, reduce: bool = True):
    """``||pred - target|| / ||target||`` per sample, averaged unless ``reduce=False``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DataError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    if target.ndim == 0 or target.shape[0] == 0:
        raise DataError("need a non-empty batch")
    tn = _sample_norms(target)
    if np.any(tn == 0):
        raise DataError("relative error is undefined for a zero-norm target")
    per = _sample_norms(pred - target) / tn
    return float(per.mean()) if reduce else per


def l2_relative_error_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of the batch-mean L2RE with respect to ``pred``."""
    d = pred - target
    dn = _sample_norms(d)
    tn = _sample_norms(target)
    if np.any(tn == 0):
        raise DataError("relative error is undefined for a zero-norm target")
    coef = np.zeros_like(dn)
    np.divide(1.0, dn * tn * d.shape[0], out=coef, where=dn > 0)
    return d * coef.reshape((-1,) + (1,) * (d.ndim - 1))


@dataclass
class LossParts:
    total: float
    task: float
    sparsity: float


def total_loss(pred: np.ndarray, target: np.ndarray, gate_values, lam: float) -> LossParts:
    """``L2RE + lam * L_sparse``; ``gate_values`` may be a per-layer list or empty."""
    task = l2_relative_error(pred, target)
    has_gates = gate_values is not None and len(gate_values) > 0
    sparse = moe_mod.sparsity_loss(gate_values) if has_gates else 0.0
    return LossParts(task + lam * sparse, task, sparse)


# --- training loop ---------------------------------------------------------------


def dataset_digest(ds: PdeDataset) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(ds.meta.to_dict(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(ds.targets, dtype="<f8").tobytes())
    return h.hexdigest()


def trainable_names(model: nn.FourierModel, freeze_base: bool) -> list[str]:
    """Parameters updated by the optimizer; freezing keeps only experts and gates."""
    if not freeze_base or model.kind != "freqmoe":
        return list(model.params)
    return [k for k in model.params if ".experts." in k or ".gate." in k]


def evaluate(model: nn.FourierModel, inputs: np.ndarray, targets: np.ndarray,
             batch_size: int = 32, top_k: int | None = None, mask_experts: bool = False) -> dict:
    """Inference-path L2RE and gate statistics over a set of samples."""
    if len(inputs) == 0:
        raise DataError("cannot evaluate on an empty sample set")
    per, gates = [], []
    kw = {}
    if model.kind == "freqmoe":
        kw = {"top_k": top_k, "mask_experts": mask_experts}
    for s in range(0, len(inputs), batch_size):
        y, tape = model.forward(inputs[s:s + batch_size], mode="infer", **kw)
        per.append(l2_relative_error(y, targets[s:s + batch_size], reduce=False))
        if tape.gates:
            gates.append(np.stack(tape.gates))  # (L, B, N)
    per = np.concatenate(per)
    out = {"l2re": float(per.mean()), "per_sample": per}
    if gates:
        out["gates"] = np.concatenate(gates, axis=1)
    return out


def _gate_summary(model, gates: np.ndarray | None) -> dict:
    if model.kind != "freqmoe" or gates is None or gates.shape[-1] == 0:
        return {}
    per_band = gates.mean(axis=(0, 1))
    return {
        "mean_gate": float(per_band.mean()),
        "mean_gate_per_band": {f"{i1},{i2}": float(v) for (i1, i2), v in zip(model.moe.expert_bands, per_band)},
    }


@dataclass
class FitResult:
    model: nn.FourierModel
    history: list[dict]
    checkpoint: ModelCheckpoint


def fit(model: nn.FourierModel, dataset: PdeDataset, cfg: TrainConfig, mode: str = "pretrain",
        log: Callable[[dict], None] | None = None, parent: ModelCheckpoint | None = None) -> FitResult:
    """Train ``model`` in place on the training split of ``dataset``.

    ``log`` receives one JSON-ready dict per epoch (plus an initial epoch-0
    record). The model is updated in place and also returned as a checkpoint.
    """
    if mode not in ("pretrain", "finetune"):
        raise ConfigurationError(f"unknown training mode {mode!r}")
    want = "dense" if mode == "pretrain" else "freqmoe"
    if model.kind != want:
        raise ArchitectureError(f"{mode} needs a {want!r} model, got architecture kind {model.kind!r}")
    S = dataset.meta.grid_size
    if S != model.config.grid_size:
        raise DataError(f"dataset grid {S} does not match the model grid {model.config.grid_size}")
    if dataset.inputs.shape[1] != model.config.in_channels:
        raise DataError(f"dataset has {dataset.inputs.shape[1]} channels, model expects {model.config.in_channels}")
    if mode == "finetune":
        model.moe.layout.check_grid(S)
    train_idx, val_idx = dataset.split()
    if len(train_idx) == 0:
        raise DataError("the training split is empty")
    is_moe = model.kind == "freqmoe"
    names = trainable_names(model, cfg.freeze_base)
    lam = cfg.sparsity_weight if is_moe else 0.0
    xv, yv = dataset.subset(val_idx)
    shuffle = np.random.default_rng([cfg.seed, nn.SHUFFLE_STREAM])
    state = OptimizerState()
    n_batches = -(-len(train_idx) // cfg.batch_size)
    history: list[dict] = []

    def emit(rec):
        history.append(rec)
        if log is not None:
            log(rec)

    def val_record():
        if len(val_idx) == 0:
            return {"val_l2re": None}
        masked = is_moe and state.step < cfg.burn_in_masked
        ev = evaluate(model, xv, yv, cfg.batch_size, cfg.top_k, mask_experts=masked)
        return {"val_l2re": ev["l2re"], **_gate_summary(model, None if masked else ev.get("gates"))}

    emit({"epoch": 0, "step": 0, "lr": 0.0, **val_record()})
    for epoch in range(cfg.total_epochs):
        perm = shuffle.permutation(train_idx)
        sums = {"task": 0.0, "sparsity": 0.0}
        clipped, last_lr, gnorm = 0, 0.0, 0.0
        for bi in range(n_batches):
            idx = perm[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            x, y = dataset.inputs[idx], dataset.targets[idx]
            masked = is_moe and state.step < cfg.burn_in_masked
            ctx = {"mask_experts": masked} if is_moe else {}
            pred, tape = model.forward(x, mode="train", **ctx)
            gates = tape.gates if is_moe and not masked else []
            parts = total_loss(pred, y, gates, lam)
            if not math.isfinite(parts.total):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, step {state.step + 1}")
            gate_grads = moe_mod.sparsity_loss_grad(gates, lam) if gates and lam > 0 else None
            bctx = {"gate_grads": gate_grads} if is_moe else {}
            grads = model.backward(l2_relative_error_grad(pred, y), tape, **bctx)
            grads, gnorm, was_clipped = clip_gradients(grads, names, cfg.clip_norm)
            clipped += was_clipped
            last_lr = lr_at(state.step + 1, epoch + bi / n_batches, cfg)
            model.params.update(adam_step(model.params, grads, state, last_lr, cfg, names))
            sums["task"] += parts.task
            sums["sparsity"] += parts.sparsity
        task = sums["task"] / n_batches
        sparse = sums["sparsity"] / n_batches
        emit({
            "epoch": epoch + 1,
            "step": state.step,
            "lr": last_lr,
            "train_loss": task + lam * sparse,
            "train_task": task,
            "train_sparsity": sparse,
            "sparsity_weight": lam,
            "clipped_steps": clipped,
            "last_grad_norm": gnorm,
            **val_record(),
        })
    provenance = {
        "source": mode,
        "train_config": cfg.to_dict(),
        "dataset": {"sha256": dataset_digest(dataset), "meta": dataset.meta.to_dict()},
        "parent": None if parent is None else parent.header.get("provenance", {}),
    }
    upcycle = None if parent is None else parent.header.get("upcycle")
    ckpt = checkpoint_from_model(model, seed=cfg.seed, provenance=provenance, upcycle=upcycle)
    return FitResult(model, history, ckpt)
