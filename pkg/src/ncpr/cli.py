"""``ncpr`` command line: train, simulate, compare, verify.

Exit codes: 0 success, 1 experiment failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .baseline_mpc import MpcController
from .config import ConfigError, ExperimentConfig, load_config
from .neural import CheckpointError, load_checkpoint, mlp_init, save_checkpoint
from .regulator import CpnnController, closed_loop, summary
from .trainer import TrainingAborted, train
from .verify import run_all

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("ncpr")


class UsageError(Exception):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def resolve_config(path: str) -> Path:
    """A file path, or the name of a bundled config (``pendulum.cfg``)."""
    p = Path(path)
    if p.is_file():
        return p
    name = p.name if p.suffix else p.name + ".cfg"
    bundled = resources.files("ncpr") / "configs" / name
    if bundled.is_file():
        return Path(str(bundled))
    raise UsageError(f"config file not found: {path}")


def _load(args) -> ExperimentConfig:
    try:
        cfg = load_config(resolve_config(args.config))
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    if args.seed is not None:
        cfg.raw["seed"] = str(args.seed)
    return cfg


def _outdir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out) if args.out else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(out: Path, name: str, data: str | bytes, outputs: dict) -> Path:
    path = out / name
    raw = data.encode() if isinstance(data, str) else data
    path.write_bytes(raw)
    outputs[name] = _sha256(raw)
    return path


def _manifest(out: Path, command: str, cfg: ExperimentConfig, outputs: dict, checkpoint: bytes | None = None) -> None:
    (out / "effective.cfg").write_text(cfg.canonical())
    rec = {
        "command": command,
        "config_source": cfg.source,
        "config_sha256": cfg.digest(),
        "effective_config": "effective.cfg",
        "seed": cfg.seed,
        "checkpoint_sha256": _sha256(checkpoint) if checkpoint is not None else None,
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _read_checkpoint(path: str, cfg: ExperimentConfig):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    plant, spec = cfg.plant(), cfg.cost()
    try:
        return load_checkpoint(data, p=plant.p, n=spec.horizon, q=plant.q), data
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def cmd_train(args) -> int:
    cfg = _load(args)
    plant, spec = cfg.plant(), cfg.cost()
    tcfg = cfg.train_config()
    params = mlp_init(plant.p, spec.horizon, plant.q, cfg.hidden, cfg.seed, cfg.activation)
    out = _outdir(args, cfg)
    try:
        params, report = train(tcfg, plant, spec, params)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    outputs: dict = {}
    ckpt = save_checkpoint(params)
    _write(out, "checkpoint.cpnn", ckpt, outputs)
    _write(out, "training_curve.csv", report.to_csv(), outputs)
    _manifest(out, "train", cfg, outputs, ckpt)
    print(
        f"trained {cfg.controller} on {plant.name}: {len(report.epoch_loss)} epochs, "
        f"{report.steps} gradient steps, {report.horizon_steps} horizon steps, "
        f"final mean loss {report.epoch_loss[-1]:.6g}, skipped {report.skipped}, "
        f"{report.wall_clock:.1f}s -> {out / 'checkpoint.cpnn'}"
    )
    return EXIT_OK


def _parse_z0(text: str, p: int) -> np.ndarray:
    z0 = np.array([float(x) for x in text.replace(",", " ").split()])
    if z0.shape != (p,):
        raise UsageError(f"--z0 has {z0.size} entries, plant state has {p}")
    return z0


def _build_controller(kind: str, cfg: ExperimentConfig, params=None):
    plant, spec = cfg.plant(), cfg.cost()
    if kind == "mpc":
        box = cfg.test_box()
        if box is None:
            raise UsageError("mpc needs a finite test.box")
        return MpcController(plant, spec, box, cfg.mpc_config())
    return CpnnController(params, spec.R, cfg.test_box())


def _latency(s: dict) -> float:
    return s["latency"]["mean"] if "latency" in s else float("nan")


def cmd_simulate(args) -> int:
    cfg = _load(args)
    plant, spec = cfg.plant(), cfg.cost()
    cases = cfg.cases()
    if args.z0:
        cases = [("override", _parse_z0(args.z0, plant.p), cases[0][2])]
    ckpt = None
    params = None
    if cfg.controller != "mpc":
        if not args.checkpoint:
            raise UsageError("simulate with a CPNN controller needs --checkpoint")
        params, ckpt = _read_checkpoint(args.checkpoint, cfg)
    controller = _build_controller(cfg.controller, cfg, params)
    out = _outdir(args, cfg)
    outputs: dict = {}
    summaries = {}
    for label, z0, zref in cases:
        if z0.shape != (plant.p,):
            raise UsageError(f"case {label}: z0 has {z0.size} entries, plant state has {plant.p}")
        trace = closed_loop(controller, plant, spec, z0, zref, cfg.duration)
        _write(out, f"trajectory_{label}.csv", trace.to_csv(), outputs)
        summaries[label] = summary(trace)
        s = summaries[label]
        print(f"{label}: error={s['convergence_error']:.4f} msd={s['msd_total']:.4f} "
              f"latency_mean={_latency(s) * 1e3:.3f}ms divergent={s['divergent']}")
    _write(out, "summary.json", json.dumps(summaries, indent=2, sort_keys=True) + "\n", outputs)
    _manifest(out, "simulate", cfg, outputs, ckpt)
    return EXIT_FAIL if any(s["divergent"] for s in summaries.values()) else EXIT_OK


COMPARE_COLUMNS = ["controller", "case", "error", "msd", "msd_per_channel", "latency_mean_s", "divergent"]


def cmd_compare(args) -> int:
    cfg = _load(args)
    entries = []
    for item in args.checkpoints:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        params, _ = _read_checkpoint(path, cfg)
        entries.append((label, "cpnn", params))
    if args.mpc:
        entries.append(("MPC", "mpc", None))
    if not entries:
        raise UsageError("compare needs at least one checkpoint or --mpc")
    plant, spec = cfg.plant(), cfg.cost()
    out = _outdir(args, cfg)
    outputs: dict = {}
    rows = []
    for label, kind, params in entries:
        controller = _build_controller(kind, cfg, params)
        for case, z0, zref in cfg.cases():
            row = {"controller": label, "case": case}
            try:
                trace = closed_loop(controller, plant, spec, z0, zref, cfg.duration)
                s = summary(trace)
                _write(out, f"trajectory_{label}_{case}.csv", trace.to_csv(), outputs)
                row.update(error=f"{s['convergence_error']:.6g}", msd=f"{s['msd_total']:.6g}",
                           msd_per_channel=" ".join(f"{m:.6g}" for m in s["msd"]),
                           latency_mean_s=f"{_latency(s):.6g}", divergent=str(s["divergent"]).lower())
            except Exception as exc:  # one failing controller must not spoil the table
                log.error("%s / %s failed: %s", label, case, exc)
                row.update(error="nan", msd="nan", msd_per_channel="", latency_mean_s="nan", divergent="true")
            rows.append(row)
            print(f"{label:>10} {case:>10}  error={row['error']:>10}  msd={row['msd']:>10}  divergent={row['divergent']}")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _write(out, "comparison.csv", buf.getvalue(), outputs)
    _manifest(out, "compare", cfg, outputs)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_all(qp_tol=args.qp_tol, qp_instances=args.qp_instances)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncpr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="config file or bundled name (pendulum.cfg, unicycle.cfg)")
        p.add_argument("--out", help="output directory (default: output.dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if checkpoint:
            p.add_argument("--checkpoint", help="CPNN1 checkpoint file")

    p = sub.add_parser("train", help="train a network")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="closed-loop run of one controller")
    common(p, checkpoint=True)
    p.add_argument("--z0", help="initial state override, e.g. '3.14,0'")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="side-by-side error / MSD table")
    common(p)
    p.add_argument("checkpoints", nargs="*", help="LABEL=PATH checkpoint entries")
    p.add_argument("--mpc", action="store_true", help="include the MPC baseline")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify", help="run the oracle suites")
    p.add_argument("--qp-tol", type=float, default=1e-10, help=argparse.SUPPRESS)
    p.add_argument("--qp-instances", type=int, default=200)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ncpr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"ncpr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
