"""Command-line entry point.

Subcommands:
  gen-data   write a phantom dataset plus manifest
  train      train one fold (history CSV, checkpoints)
  eval       score a trained fold's checkpoint (per-case and summary CSVs)
  ablate     run the 4-row uncertainty/consistency ablation grid
  gradcheck  run the finite-difference suite over every loss
  oracle     run the brute-force equivalence suites

Every artifact-producing command persists its fully resolved config and seed
as run.json in the output directory. Exit code 0 means the command completed
and all internal validations passed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment as E
from .config import ConfigError, RunConfig, apply_overrides, config_from_dict, load_config
from .network import load_checkpoint
from .verification import gradient_suite, oracle_suites


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="JSON config file (defaults apply)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config value by dotted path")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if getattr(args, "seed", None) is not None:
        cfg = apply_overrides(cfg, [f"train.seed={args.seed}"])
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    manifest = E.generate_dataset(cfg, args.out)
    E.write_run_json(args.out, cfg, "gen-data", {"manifest": str(manifest)})
    print(f"wrote {cfg.dataset.n_volumes} volumes and {manifest}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    dual = E.train_fold(args.data, cfg, args.fold, out)
    E.write_run_json(out, cfg, "train", {"fold": args.fold, "manifest": str(args.data)})
    _plot_history(out)
    print(f"trained fold {args.fold}: history and checkpoints under {out}")
    return 0


def _cmd_eval(args) -> int:
    run_dir = Path(args.run)
    run_meta = json.loads((run_dir / "run.json").read_text())
    cfg = config_from_dict(run_meta["config"])
    fold = run_meta["fold"]
    manifest = run_meta["manifest"]
    ckpt = Path(args.checkpoint) if args.checkpoint else E.latest_checkpoint(run_dir)
    dual = load_checkpoint(ckpt)
    out = Path(args.out) if args.out else run_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    results = E.eval_fold(manifest, cfg, fold, dual, out)
    E.write_run_json(out, cfg, "eval",
                     {"fold": fold, "manifest": manifest, "checkpoint": str(ckpt)})
    _plot_metrics(results, out)
    for model in E.MODELS:
        s = results[model][1]
        print(f"{model:9s} dice {s.dice_mean:6.2f} ± {s.dice_std:5.2f}   "
              f"jaccard {s.jaccard_mean:6.2f} ± {s.jaccard_std:5.2f}   "
              f"hd95 {s.hd95_mean:6.2f}   asd {s.asd_mean:5.2f}"
              + (f"   ({s.surface_excluded} sentinel)" if s.surface_excluded else ""))
    print(f"wrote {out / 'metrics.csv'} and {out / 'summary.csv'}")
    return 0


ABLATION_GRID = [  # mirrors the published 4-row grid: +une, +reg, both, neither
    ("une_only", True, False),
    ("reg_only", False, True),
    ("both", True, True),
    ("neither", False, False),
]


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, use_une, use_reg in ABLATION_GRID:
        sub_cfg = apply_overrides(cfg, [f"train.use_une={json.dumps(use_une)}",
                                        f"train.use_reg={json.dumps(use_reg)}"])
        sub_dir = out / name
        dual = E.train_fold(args.data, sub_cfg, args.fold, sub_dir)
        results = E.eval_fold(args.data, sub_cfg, args.fold, dual, sub_dir)
        s = results["ensemble"][1]
        rows.append({"row": name, "use_une": use_une, "use_reg": use_reg,
                     "dice_mean": s.dice_mean, "dice_std": s.dice_std,
                     "jaccard_mean": s.jaccard_mean, "jaccard_std": s.jaccard_std,
                     "hd95_mean": s.hd95_mean, "hd95_std": s.hd95_std,
                     "asd_mean": s.asd_mean, "asd_std": s.asd_std})
        print(f"{name:9s} une={int(use_une)} reg={int(use_reg)}  "
              f"dice {s.dice_mean:6.2f} ± {s.dice_std:5.2f}")
    import csv as _csv
    import io as _io
    buf = _io.StringIO()
    w = _csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    from .ioutil import atomic_write_bytes
    atomic_write_bytes(out / "ablation.csv", buf.getvalue().encode())
    E.write_run_json(out, cfg, "ablate", {"fold": args.fold, "manifest": str(args.data),
                                          "grid": [r[0] for r in ABLATION_GRID]})
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradient_suite(args.seed)
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}s}  max rel err {r.value:.3e}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} gradient checks passed "
          f"(tolerance {1e-4:g}, h={1e-5:g})")
    return 1 if failed else 0


def _cmd_oracle(args) -> int:
    results = oracle_suites(args.seed)
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}s}  deviation {r.value:.3e}  {r.detail}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} oracle checks passed")
    return 1 if failed else 0


def _plot_history(run_dir: Path):
    import csv

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(run_dir / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return
    iters = [int(r["iter"]) for r in rows]
    fig, ax = plt.subplots(figsize=(8, 5))
    for col, style in (("total", "-"), ("sup_s", "--"), ("sup_t", "--"),
                       ("unsup_s", ":"), ("unsup_t", ":"), ("reg", "-."),
                       ("une", "-."), ("contrastive", "-.")):
        ax.plot(iters, [float(r[col]) for r in rows], style, label=col, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(ncol=4, fontsize=8)
    plots = run_dir / "plots"
    plots.mkdir(exist_ok=True)
    fig.savefig(plots / "loss_curve.png", dpi=110, bbox_inches="tight")
    plt.close(fig)


def _plot_metrics(results: dict, out_dir: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(E.MODELS))
    for i, metric in enumerate(("dice", "jaccard")):
        means = [getattr(results[m][1], f"{metric}_mean") for m in E.MODELS]
        stds = [getattr(results[m][1], f"{metric}_std") for m in E.MODELS]
        ax.bar(x + (i - 0.5) * 0.35, means, 0.35, yerr=stds, capsize=3, label=metric)
    ax.set_xticks(x, E.MODELS)
    ax.set_ylabel("percent")
    ax.legend()
    plots = out_dir / "plots"
    plots.mkdir(exist_ok=True)
    fig.savefig(plots / "metrics_bar.png", dpi=110, bbox_inches="tight")
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualseg",
                                     description="dual-network semi-supervised 3D segmentation "
                                                 "on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train one fold")
    _add_config_args(p)
    p.add_argument("--data", type=Path, required=True, help="dataset manifest.json")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained fold")
    p.add_argument("--run", type=Path, required=True, help="training run directory")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="checkpoint base path (default: latest)")
    p.add_argument("--out", type=Path, default=None, help="default: <run>/eval")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="run the 4-row loss ablation grid")
    _add_config_args(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("oracle", help="brute-force equivalence suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
