"""Command-line front end for the experiment harness.

Each verb reads and writes artifacts in one output directory, so a
full study is a pipeline of calls against the same --out:

    otfs-isac generate-data   --out runs/desk
    otfs-isac train-predictor --out runs/desk
    otfs-isac eval-predictor  --out runs/desk
    otfs-isac train-preeq     --out runs/desk --rho-c 0.5 --csi perfect
    otfs-isac tradeoff        --out runs/desk
    otfs-isac sweep-power     --out runs/desk
    otfs-isac complexity      --out runs/desk

Without --config the desk-scale defaults apply; --seed overrides the
master seed of a supplied or default config.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex

_COMMANDS = ("generate-data", "train-predictor", "eval-predictor",
             "train-preeq", "sweep-power", "tradeoff", "complexity")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otfs-isac",
        description="Link-level OTFS sensing/communication experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate-data": "simulate trajectories and store the parameter dataset",
        "train-predictor": "fit the per-parameter channel forecasters",
        "eval-predictor": "forecast accuracy table against the baselines",
        "train-preeq": "train one pre-equalizer network",
        "sweep-power": "communication MSE versus transmit SNR table",
        "tradeoff": "communication/sensing tradeoff table over the weight grid",
        "complexity": "receiver complex-multiplication counts",
    }
    for name in _COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, default=None,
                       help="JSON experiment config (default: desk-scale setup)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
        p.add_argument("--out", type=Path, default=Path("runs"),
                       help="artifact directory (default: runs)")
        if name == "train-preeq":
            p.add_argument("--rho-c", type=float, default=0.5,
                           help="communication weight in [0, 1] (default: 0.5)")
            p.add_argument("--csi", choices=ex.CSI_MODES, default="perfect",
                           help="CSI source for the network inputs")
    return parser


def _resolve_config(args) -> ex.ExperimentConfig:
    config = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        config = replace(config, master_seed=args.seed)
    return config


def _say(line: str):
    print(line, flush=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        out = args.out
        if args.command == "generate-data":
            path = ex.cmd_generate_data(config, out)
            _say(f"wrote {path}")
        elif args.command == "train-predictor":
            models = ex.cmd_train_predictor(config, out)
            for name, (_, history) in models.items():
                _say(f"trained {name} forecaster: best val loss "
                     f"{history[-1, 3]:.3e} after {int(history[-1, 0])} epochs")
            _say(f"wrote {out / ex.predictor_file('*')}")
        elif args.command == "eval-predictor":
            rows = ex.cmd_eval_predictor(config, out)
            for param, model, mape in rows:
                _say(f"{param:5s} {model:12s} MAPE {mape:8.3f}%")
            _say(f"wrote {out / ex.MAPE_FILE}")
        elif args.command == "train-preeq":
            trace = ex.cmd_train_preeq(config, out, rho_c=args.rho_c,
                                       csi_mode=args.csi, progress=_say)
            _say(f"final MSE {trace[-1, 1]:.4f}, velocity RMSE "
                 f"{trace[-1, 2]:.4f} m/s")
            _say(f"wrote {out / ex.preeq_file(args.csi, args.rho_c)}")
        elif args.command == "sweep-power":
            rows = ex.cmd_sweep_power(config, out, progress=_say)
            _say(f"wrote {out / ex.POWER_FILE} ({len(rows)} rows)")
        elif args.command == "tradeoff":
            rows = ex.cmd_tradeoff(config, out, progress=_say)
            _say(f"wrote {out / ex.TRADEOFF_FILE} ({len(rows)} rows)")
        elif args.command == "complexity":
            rows = ex.cmd_complexity(config, out)
            for mn, o, conv, pre, red in rows:
                _say(f"MN={mn:4d} order={o}  conventional={conv:>10d}  "
                     f"preeq={pre:>6d}  reduction={red:6.2f}%")
            _say(f"wrote {out / ex.COMPLEXITY_FILE}")
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
