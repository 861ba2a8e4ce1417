"""Unicycle Case A: a trained network against the single-shooting MPC baseline.

    python3 demos/unicycle_vs_mpc.py --checkpoint runs/unicycle/checkpoint.cpnn

Train the checkpoint first with ``ncpr train --config unicycle.cfg``. The MPC
run solves a 30-step problem every control step and takes a few minutes.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from ncpr.baseline_mpc import MpcController
from ncpr.cli import resolve_config
from ncpr.config import load_config
from ncpr.neural import load_checkpoint
from ncpr.regulator import CpnnController, closed_loop, summary


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    args = ap.parse_args()
    cfg = load_config(resolve_config("unicycle.cfg"))
    plant, spec = cfg.plant(), cfg.cost()
    params = load_checkpoint(Path(args.checkpoint).read_bytes(), p=plant.p, n=spec.horizon, q=plant.q)
    label, z0, z_ref = cfg.cases()[0]

    controllers = {
        "CPNN": CpnnController(params, spec.R, cfg.test_box()),
        "MPC": MpcController(plant, spec, cfg.test_box(), cfg.mpc_config()),
    }
    rows = {}
    for name, ctrl in controllers.items():
        s = summary(closed_loop(ctrl, plant, spec, z0, z_ref, cfg.duration))
        rows[name] = s
        print(f"{name:<5} case {label}: error {s['convergence_error']:.3f}  msd {s['msd_total']:.3f}  "
              f"latency {s['latency']['mean'] * 1e3:.2f} ms/step")
    ratio = rows["MPC"]["latency"]["mean"] / rows["CPNN"]["latency"]["mean"]
    print(f"network + QP is {ratio:.0f}x faster per step")


if __name__ == "__main__":
    main()
