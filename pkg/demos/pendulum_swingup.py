"""Train both pendulum networks with the bundled recipe and swing up from three states.

    python3 demos/pendulum_swingup.py [--epochs 50]

CPNN1 is trained without a box, CPNN2 under the training box; both are
deployed with the wide test box. Takes about a minute at the full recipe.
"""

from __future__ import annotations

import argparse

from ncpr.cli import resolve_config
from ncpr.config import load_config
from ncpr.neural import mlp_init
from ncpr.regulator import CpnnController, closed_loop, summary
from ncpr.trainer import train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    args = ap.parse_args()
    env = {"NCPR_TRAIN__EPOCHS": str(args.epochs)} if args.epochs else {}
    cfg = load_config(resolve_config("pendulum.cfg"), env=env)
    plant, spec = cfg.plant(), cfg.cost()

    for name, constrained in (("CPNN1", False), ("CPNN2", True)):
        params = mlp_init(plant.p, spec.horizon, plant.q, cfg.hidden, cfg.seed, cfg.activation)
        params, report = train(cfg.train_config(constrained), plant, spec, params)
        print(f"{name}: {len(report.epoch_loss)} epochs, loss {report.epoch_loss[0]:.1f} -> "
              f"{report.epoch_loss[-1]:.1f}, {report.wall_clock:.1f}s")
        for label, z0, z_ref in cfg.cases():
            log = closed_loop(CpnnController(params, spec.R, cfg.test_box()), plant, spec, z0, z_ref, cfg.duration)
            s = summary(log)
            print(f"  {label:<12} z0={z0}  final={log.final_state.round(4)}  "
                  f"error={s['convergence_error']:.4f}  msd={s['msd_total']:.3f}")


if __name__ == "__main__":
    main()
