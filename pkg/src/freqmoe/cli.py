"""``freqmoe`` command line: data generation, both training stages, upcycling and analysis.

Every subcommand accepts ``--config FILE`` (a JSON object keyed by option
name); explicit flags override it. Each run merges its resolved options and
input-file hashes into ``<run-dir>/run.json``.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, evalx, nn, pde, train
from . import serialization as ser
from . import upcycle as up
from .errors import ConfigurationError, DataError, FreqMoEError, ValidationError, VerificationError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _pair(text: str) -> tuple[int, int]:
    """Parse ``"4x4"``, ``"4,4"`` or ``"4"`` into an int pair."""
    parts = str(text).lower().replace(",", "x").split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}") from None
    if len(vals) == 1:
        vals *= 2
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}")
    return vals[0], vals[1]


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = train.TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--beta1", type=float, default=d.beta1)
    g.add_argument("--beta2", type=float, default=d.beta2)
    g.add_argument("--eps", type=float, default=d.eps)
    g.add_argument("--warmup-steps", type=int, default=d.warmup_steps)
    g.add_argument("--cosine-epochs", type=int, default=d.cosine_epochs)
    g.add_argument("--steady-epochs", type=int, default=d.steady_epochs)
    g.add_argument("--min-lr-ratio", type=float, default=d.min_lr_ratio)
    g.add_argument("--sparsity-weight", type=float, default=d.sparsity_weight)
    g.add_argument("--clip-norm", type=float, default=d.clip_norm, help="0 disables clipping")
    g.add_argument("--epochs", type=int, default=None, help="default: cosine + steady epochs")
    g.add_argument("--seed", type=int, default=0)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with option defaults")
    p.add_argument("--run-dir", help="where run.json and CSV outputs go (default: next to --out, else .)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="freqmoe", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"freqmoe {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a heat or vorticity dataset")
    _common(p)
    p.add_argument("--problem", choices=["heat", "ns", "ns-vorticity"], default="heat")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--viscosity", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--trajectory-length", type=int, default=10)
    p.add_argument("--v-bar", type=float, default=1.0)
    p.add_argument("--n-modes", type=int, default=4)
    p.add_argument("--k-max", type=int, default=4)
    p.add_argument("--spinup", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("train-base", help="pretrain a dense FNO")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--modes", type=_pair, default=(4, 4))
    _add_train_flags(p)

    p = sub.add_parser("upcycle", help="turn a dense checkpoint into a FreqMoE checkpoint")
    _common(p)
    p.add_argument("--base")
    p.add_argument("--out")
    p.add_argument("--experts", type=int, help="number of expert bands (default: all)")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--chunks", type=_pair, default=(8, 8))
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--grid-size", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("finetune", help="train an upcycled FreqMoE checkpoint")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--freeze-base", action="store_true")
    p.add_argument("--burn-in-masked", type=int, default=0)
    p.add_argument("--top-k", type=int, help="experts used for validation (default: checkpoint K)")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="single-step L2RE")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--split", choices=["val", "train", "all"], default="val")
    p.add_argument("--top-k", type=int)
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("rollout", help="autoregressive error curve against the solver")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--sample", type=int, help="initial-state index (default: first validation sample)")
    p.add_argument("--top-k", type=int)

    p = sub.add_parser("bench-modes", help="dense vs FreqMoE cost as retained modes grow")
    _common(p)
    p.add_argument("--modes", type=_int_list, default=[4, 8, 16, 32])
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--chunk", type=_pair, default=(4, 4))
    p.add_argument("--grid-size", type=int, default=64)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--time", action="store_true", help="add best-of-5 wall-clock seconds")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect-gates", help="per-band gate activation map")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--split", choices=["val", "train", "all"], default="val")
    p.add_argument("--top-k", type=int)
    p.add_argument("--batch-size", type=int, default=32)

    p = sub.add_parser("verify", help="compare an upcycled checkpoint with its base")
    _common(p)
    p.add_argument("--base")
    p.add_argument("--model")
    p.add_argument("--probes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, help="fail (exit 2) if the masked deviation exceeds this")
    return parser


def _parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise ValidationError("no command given; see freqmoe --help")
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ValidationError(f"config file {args.config} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError(f"config file {args.config} must hold a JSON object")
        sp = parser._subparsers._group_actions[0].choices[args.command]
        dests = {a.dest for a in sp._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - dests - {"config", "run_dir"})
        if unknown:
            raise ValidationError(f"config file has options unknown to {args.command}: {unknown}")
        for a in sp._actions:
            if a.dest in cfg and a.type is not None and isinstance(cfg[a.dest], str):
                cfg[a.dest] = a.type(cfg[a.dest])
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise ValidationError(f"{args.command} needs {flags}")


def _run_dir(args) -> Path:
    if args.run_dir:
        return Path(args.run_dir)
    out = getattr(args, "out", None)
    return Path(out).parent if out else Path(".")


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    return v


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    return str(o)


def _record_run(args, inputs: dict, outputs: dict, extra: dict | None = None) -> None:
    run = _run_dir(args)
    path = run / "run.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    options = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("command",)}
    data[args.command] = {
        "options": options,
        "inputs": {k: {"path": str(p), "sha256": ser.file_sha256(p)} for k, p in inputs.items()},
        "outputs": {k: str(p) for k, p in outputs.items()},
        "version": __version__,
        **(extra or {}),
    }
    evalx.write_json(path, data)


def _train_config(args, **extra) -> train.TrainConfig:
    return train.TrainConfig(
        batch_size=args.batch_size, lr=args.lr, beta1=args.beta1, beta2=args.beta2, eps=args.eps,
        warmup_steps=args.warmup_steps, cosine_epochs=args.cosine_epochs, steady_epochs=args.steady_epochs,
        min_lr_ratio=args.min_lr_ratio, sparsity_weight=args.sparsity_weight,
        clip_norm=args.clip_norm if args.clip_norm else None, epochs=args.epochs, seed=args.seed, **extra,
    )


def _metric_logger(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w")

    def log(rec):
        line = json.dumps(rec, sort_keys=True)
        fh.write(line + "\n")
        fh.flush()
        print(line)

    return fh, log


def _flat_history(history: list[dict]) -> list[dict]:
    keys = ["epoch", "step", "lr", "train_loss", "train_task", "train_sparsity", "val_l2re",
            "mean_gate", "clipped_steps"]
    return [{k: r.get(k, "") if r.get(k) is not None else "" for k in keys} for r in history]


def _select(ds: pde.PdeDataset, split: str):
    tr, va = ds.split()
    idx = {"val": va, "train": tr, "all": np.arange(len(ds))}[split]
    if len(idx) == 0:
        raise DataError(f"the {split} split of this dataset is empty")
    return ds.subset(idx)


def _check_pair(model, ds: pde.PdeDataset) -> None:
    if ds.meta.grid_size != model.config.grid_size:
        raise DataError(
            f"dataset grid {ds.meta.grid_size} does not match the checkpoint grid {model.config.grid_size}"
        )


# --- commands -------------------------------------------------------------------


def _summary(report: dict) -> dict:
    return {k: v for k, v in report.items() if k not in ("delta_norms", "expert_bands")}


def cmd_gen_data(args) -> dict:
    _require(args, "out")
    meta = pde.PdeDatasetMeta(
        problem=args.problem, grid_size=args.size, samples=args.samples, seed=args.seed,
        viscosity=args.viscosity, dt=args.dt, trajectory_length=args.trajectory_length,
        v_bar=args.v_bar, n_modes=args.n_modes, k_max=args.k_max, spinup=args.spinup,
    )
    ds = pde.generate_dataset(meta)
    ser.save_dataset(args.out, ds)
    _record_run(args, {}, {"dataset": args.out}, {"meta": ds.meta.to_dict()})
    return {"out": args.out, "samples": len(ds), "solver_substeps": ds.meta.solver_substeps}


def _fit_command(args, model, ds, cfg, mode, parent=None) -> dict:
    run = _run_dir(args)
    fh, log = _metric_logger(run / f"{args.command}.jsonl")
    try:
        result = train.fit(model, ds, cfg, mode, log=log, parent=parent)
    finally:
        fh.close()
    ser.save_checkpoint(args.out, result.checkpoint)
    evalx.write_csv(run / f"{args.command}.csv", _flat_history(result.history))
    return result.history[-1]


def cmd_train_base(args) -> dict:
    _require(args, "data", "out")
    ds = ser.load_dataset(args.data)
    cfg = nn.FnoConfig(ds.inputs.shape[1], ds.targets.shape[1], args.width, args.layers,
                       tuple(args.modes), ds.meta.grid_size)
    model = nn.FNO(cfg, seed=args.seed)
    last = _fit_command(args, model, ds, _train_config(args), "pretrain")
    _record_run(args, {"data": args.data}, {"checkpoint": args.out})
    return last


def cmd_upcycle(args) -> dict:
    _require(args, "base", "out")
    base = ser.load_checkpoint(args.base)
    spec = up.UpcycleSpec(
        n_experts=args.experts, rank=args.rank, alpha=args.alpha, grid_chunks=tuple(args.chunks),
        top_k=args.top_k, tau=args.tau, seed=args.seed, grid_size=args.grid_size,
    )
    ckpt = up.upcycle(base, spec)
    ser.save_checkpoint(args.out, ckpt)
    report = up.verify_upcycle(base, ckpt, seed=args.seed)
    _record_run(args, {"base": args.base}, {"checkpoint": args.out})
    return _summary(report)


def cmd_finetune(args) -> dict:
    _require(args, "model", "data", "out")
    parent = ser.load_checkpoint(args.model)
    model = ser.model_from_checkpoint(parent, expect="freqmoe")
    ds = ser.load_dataset(args.data)
    _check_pair(model, ds)
    cfg = _train_config(args, freeze_base=args.freeze_base, burn_in_masked=args.burn_in_masked,
                        top_k=args.top_k)
    last = _fit_command(args, model, ds, cfg, "finetune", parent=parent)
    _record_run(args, {"model": args.model, "data": args.data}, {"checkpoint": args.out})
    return last


def _load_pair(args):
    model = ser.model_from_checkpoint(ser.load_checkpoint(args.model))
    ds = ser.load_dataset(args.data)
    _check_pair(model, ds)
    if args.top_k is not None and model.kind != "freqmoe":
        raise ConfigurationError("--top-k applies to FreqMoE checkpoints only")
    return model, ds


def cmd_eval(args) -> dict:
    _require(args, "model", "data")
    model, ds = _load_pair(args)
    x, y = _select(ds, args.split)
    rep = evalx.eval_single_step(model, x, y, args.batch_size, args.top_k)
    run = _run_dir(args)
    evalx.write_csv(run / "eval.csv", [{"sample": i, "l2re": float(v)} for i, v in enumerate(rep.per_sample)])
    summary = {"kind": model.kind, "split": args.split, **rep.to_dict()}
    evalx.write_json(run / "eval.json", summary)
    _record_run(args, {"model": args.model, "data": args.data}, {"csv": run / "eval.csv"})
    return summary


def cmd_rollout(args) -> dict:
    _require(args, "model", "data")
    model, ds = _load_pair(args)
    if args.steps < 1:
        raise ConfigurationError("--steps must be >= 1")
    if args.sample is None:
        _, va = ds.split()
        start = int(va[0]) if len(va) else 0
    else:
        start = args.sample
    if not 0 <= start < len(ds):
        raise DataError(f"--sample {start} is outside the dataset (0..{len(ds) - 1})")
    res = evalx.rollout(model, ds.inputs[start], args.steps, meta=ds.meta, top_k=args.top_k)
    run = _run_dir(args)
    evalx.write_csv(run / "rollout.csv", res.rows(), ["step", "l2re"])
    _record_run(args, {"model": args.model, "data": args.data}, {"csv": run / "rollout.csv"})
    return {"sample": start, "steps": len(res.errors), "truncated": res.truncated, "reason": res.reason,
            "final_l2re": float(res.errors[-1]) if len(res.errors) else None}


def cmd_bench_modes(args) -> dict:
    rows = evalx.bench_modes(args.modes, args.top_k, args.width, args.layers, tuple(args.chunk),
                             args.grid_size, args.rank, timing=args.time, seed=args.seed)
    run = _run_dir(args)
    evalx.write_csv(run / "bench-modes.csv", rows)
    _record_run(args, {}, {"csv": run / "bench-modes.csv"})
    return {"rows": len(rows), "csv": str(run / "bench-modes.csv")}


def cmd_inspect_gates(args) -> dict:
    _require(args, "model", "data")
    model, ds = _load_pair(args)
    x, _ = _select(ds, args.split)
    gm = evalx.gate_activation_map(model, x, args.batch_size, args.top_k)
    run = _run_dir(args)
    evalx.write_json(run / "inspect-gates.json", gm.to_dict())
    if gm.available:
        evalx.write_csv(run / "inspect-gates.csv", gm.rows())
    _record_run(args, {"model": args.model, "data": args.data}, {"json": run / "inspect-gates.json"})
    return gm.to_dict() if not gm.available else {"samples": gm.samples, "mean_gate": gm.to_dict()["mean_gate"]}


def cmd_verify(args) -> dict:
    _require(args, "base", "model")
    report = up.verify_upcycle(ser.load_checkpoint(args.base), ser.load_checkpoint(args.model),
                               probes=args.probes, seed=args.seed)
    run = _run_dir(args)
    evalx.write_json(run / "verify.json", report)
    _record_run(args, {"base": args.base, "model": args.model}, {"json": run / "verify.json"})
    if args.tolerance is not None and report["max_deviation"] > args.tolerance:
        raise VerificationError(
            f"masked FreqMoE deviates from its base by {report['max_deviation']:.3e} > {args.tolerance:.3e}"
        )
    return _summary(report)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-base": cmd_train_base,
    "upcycle": cmd_upcycle,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "bench-modes": cmd_bench_modes,
    "inspect-gates": cmd_inspect_gates,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
        result = COMMANDS[args.command](args)
    except (ValidationError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc}: no such file", file=sys.stderr)
        return 1
    except (FreqMoEError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
