"""Command-line front end.

Usage examples::

    rankcp gen-synth --out data/
    rankcp eval --config exp.cfg --alpha 0.05 --runs 10 --out results/
    rankcp ablate --runs 10 --out ablation/ --plot
    rankcp sweep --alphas 0.1,0.2,0.3 --out sweep/ --plot
    rankcp report ablation/
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, load_config, parse_config_text
from .exceptions import RankCPError
from .gcn import save_params
from .graph import save_dataset
from .pipeline import (VARIANTS, build_graph, read_results_csv, run_experiment, summarize,
                       write_results_csv, write_summary_csv)

COMMANDS = ("train", "eval", "ablate", "sweep", "gen-synth", "report")

# flag -> config key
FLAG_KEYS = {
    "alpha": "cp.alpha",
    "tau": "cp.tau",
    "lambda_": "cp.lambda",
    "kappa": "cp.kappa",
    "score": "cp.score",
    "seed": "run.seed",
    "runs": "run.runs",
    "splits": "run.splits",
    "jobs": "run.jobs",
    "plot": "run.plot",
    "out": "run.out",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="section.key = value config file")
    common.add_argument("--alpha", type=float, help="target miscoverage")
    common.add_argument("--tau", type=float, help="smoothing temperature")
    common.add_argument("--lambda", dest="lambda_", type=float, help="conformity loss weight")
    common.add_argument("--kappa", type=int, choices=(0, 1), help="soft set-size offset")
    common.add_argument("--score", choices=("thr", "aps", "rank"), help="conformity score")
    common.add_argument("--seed", type=int, help="base seed; run r uses seed + r")
    common.add_argument("--runs", type=int, help="number of seeded runs")
    common.add_argument("--splits", type=int, help="calib/eval splits per run")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--plot", action="store_true", default=None, help="write plot images")
    common.add_argument("--out", metavar="DIR", help="output directory")

    parser = argparse.ArgumentParser(prog="rankcp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train models and save checkpoints")
    sub.add_parser("eval", parents=[common], help="train and evaluate; write results.csv")
    ablate = sub.add_parser("ablate", parents=[common], help="run the ablation variants")
    ablate.add_argument("--variants", default=",".join(VARIANTS),
                        help="comma-separated subset of " + ", ".join(VARIANTS))
    sweep = sub.add_parser("sweep", parents=[common], help="inefficiency across alphas")
    sweep.add_argument("--alphas", default="0.1,0.2,0.3", help="comma-separated alphas")
    sub.add_parser("gen-synth", parents=[common], help="write a synthetic SBM dataset")
    report = sub.add_parser("report", help="tabulate results directories")
    report.add_argument("results", metavar="DIR", help="directory holding results.csv files")
    return parser


def parse_config(args: argparse.Namespace) -> ExperimentConfig:
    """Resolve defaults < config file < command-line flags."""
    overrides = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items()
                 if getattr(args, flag, None) is not None}
    return load_config(args.config, overrides)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(cfg: ExperimentConfig, out: Path) -> None:
    (out / "resolved.cfg").write_text(cfg.to_text(), encoding="utf-8")


def _parse_floats(text: str, what: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise RankCPError(f"{what}: expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise RankCPError(f"{what}: empty list")
    return values


def cmd_train(cfg: ExperimentConfig) -> Path:
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    for res in run_experiment(cfg):
        run_dir = out / f"run_{res.run}"
        save_params(res.base_params, run_dir / "base")
        save_params(res.cor_params, run_dir / "correction")
    return out


def cmd_eval(cfg: ExperimentConfig) -> Path:
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    records = [r for res in run_experiment(cfg) for r in res.records]
    write_results_csv(out / "results.csv", records)
    write_summary_csv(out / "summary.csv", summarize(records))
    return out


def cmd_ablate(cfg: ExperimentConfig, variants: Sequence[str]) -> Path:
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    g = build_graph(cfg)
    summaries = {}
    for variant in variants:
        if variant not in VARIANTS:
            raise RankCPError(f"unknown variant {variant!r}")
        vdir = out / variant
        vdir.mkdir(exist_ok=True)
        records = [r for res in run_experiment(cfg, variant, g=g) for r in res.records]
        write_results_csv(vdir / "results.csv", records)
        summaries[variant] = summarize(records)
        write_summary_csv(vdir / "summary.csv", summaries[variant])
    if cfg.run.plot:
        _plot_ablation(summaries, out / "ablation.png")
    return out


def cmd_sweep(cfg: ExperimentConfig, alphas: Sequence[float]) -> Path:
    """Train once per run and evaluate hard CP at every alpha."""
    if not alphas:
        raise RankCPError("sweep needs at least one alpha")
    for a in alphas:
        if not 0 < a < 1:
            raise RankCPError(f"alpha {a} outside (0, 1)")
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    records = [r for res in run_experiment(cfg, alphas=alphas) for r in res.records]
    write_results_csv(out / "results.csv", records)
    rows = summarize(records)
    write_summary_csv(out / "summary.csv", rows)
    if cfg.run.plot:
        _plot_sweep(rows, out / "sweep.png")
    return out


def cmd_gen_synth(cfg: ExperimentConfig) -> Path:
    out = _out_dir(cfg)
    _write_resolved(cfg, out)
    g = build_graph(cfg.replace(**{"dataset.source": "sbm"}))
    save_dataset(g, out)
    return out


def _sd_text(sd: float) -> str:
    text = f"{sd:.3f}"
    return text[1:] if text.startswith("0.") else text


def format_cell(mean: float, sd: float) -> str:
    """``0.955(.005)`` style cell."""
    return f"{mean:.3f}({_sd_text(sd)})"


def _dataset_name(results_path: Path, root: Path) -> str:
    for d in [results_path.parent, *results_path.parent.parents]:
        cfg_path = d / "resolved.cfg"
        if cfg_path.is_file():
            values = parse_config_text(cfg_path.read_text(encoding="utf-8"), str(cfg_path))
            return str(values.get("dataset.name", "-"))
        if d == root:
            break
    return "-"


def cmd_report(results_dir) -> str:
    """Mean(sd) table per dataset and method; ``*`` marks covered cells."""
    root = Path(results_dir)
    if not root.is_dir():
        raise RankCPError(f"results directory not found: {root}")
    paths = sorted(root.rglob("results.csv"))
    if not paths:
        raise RankCPError(f"no results.csv under {root}")
    lines = [f"{'dataset':<12} {'method':<14} {'score':<6} {'alpha':<6} "
             f"{'coverage':<14} {'ineff':<12}"]
    for path in paths:
        method = path.parent.relative_to(root).as_posix()
        method = "." if method == "." else method
        dataset = _dataset_name(path, root)
        for row in summarize(read_results_csv(path)):
            covered = row["coverage_mean"] >= 1 - row["alpha"] - 1e-12
            cov = format_cell(row["coverage_mean"], row["coverage_sd"]) + ("*" if covered else "")
            ineff = format_cell(row["ineff_mean"], row["ineff_sd"])
            lines.append(f"{dataset:<12} {method:<14} {row['score']:<6} {row['alpha']:<6g} "
                         f"{cov:<14} {ineff:<12}")
    lines.append("* covered: mean coverage >= 1 - alpha")
    return "\n".join(lines)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _plot_sweep(rows, path: Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3))
    alphas = [r["alpha"] for r in rows]
    ax.errorbar(alphas, [r["ineff_mean"] for r in rows], yerr=[r["ineff_sd"] for r in rows],
                marker="o", capsize=3)
    ax.set_xlabel("alpha")
    ax.set_ylabel("inefficiency")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_ablation(summaries: Dict[str, list], path: Path) -> None:
    plt = _pyplot()
    names = list(summaries)
    means = [summaries[n][0]["ineff_mean"] for n in names]
    sds = [summaries[n][0]["ineff_sd"] for n in names]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(np.arange(len(names)), means, yerr=sds, capsize=3)
    ax.set_xticks(np.arange(len(names)), names)
    ax.set_ylabel("inefficiency")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            print(cmd_report(args.results))
            return 0
        cfg = parse_config(args)
        if args.command == "train":
            out = cmd_train(cfg)
        elif args.command == "eval":
            out = cmd_eval(cfg)
        elif args.command == "ablate":
            out = cmd_ablate(cfg, [v.strip() for v in args.variants.split(",") if v.strip()])
        elif args.command == "sweep":
            out = cmd_sweep(cfg, _parse_floats(args.alphas, "--alphas"))
        else:
            out = cmd_gen_synth(cfg)
    except RankCPError as err:
        print(f"rankcp {args.command}: error: {err}", file=sys.stderr)
        return 2
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
