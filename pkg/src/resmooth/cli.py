"""``resmooth <cmd> --config <path> [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import lossmodel, netcore, pipelines, plotting, runner, smoothing
from .config import ConfigError, ExperimentConfig, load_config
from .datafile import atomic_write_text, save_dataset

COMMANDS = ("gen-data", "pretrain", "fit-gmm", "train", "collect-daood", "fair-compare", "sweep", "ablate", "plot")

log = logging.getLogger("resmooth")


def _seed(cfg: ExperimentConfig, args) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run '{hint}' first")
    return path


def cmd_gen_data(cfg, args) -> str:
    out = Path(args.out or Path(cfg.output_dir) / "data")
    train_p, test_p = runner.write_data(cfg, out)
    return f"gen-data: wrote {train_p} and {test_p}"


def cmd_pretrain(cfg, args) -> str:
    seed = _seed(cfg, args)
    train, test = runner.load_data(cfg)
    rd = runner.run_dir(cfg, seed, args.out)
    model = runner.stage_pretrain(cfg, seed, train, rd, reuse=False)
    acc, _ = netcore.evaluate(model, test.images, test.labels)
    return f"pretrain: seed={seed} test_acc={acc:.4f} model={rd / 'pretrained.rsmk'}"


def cmd_fit_gmm(cfg, args) -> str:
    seed = _seed(cfg, args)
    train, _ = runner.load_data(cfg)
    rd = runner.run_dir(cfg, seed, args.out)
    f_d = netcore.load_model(_require(rd / "pretrained.rsmk", "pretrain"))
    gmm, table = runner.stage_fit(cfg, seed, train, f_d, rd, reuse=False)
    return (
        f"fit-gmm: seed={seed} mu0={gmm.mu0:.4f} sigma0={gmm.sigma0:.4f} pi0={gmm.pi0:.4f} "
        f"mu1={gmm.mu1:.4f} sigma1={gmm.sigma1:.4f} pi1={gmm.pi1:.4f} records={len(table)}"
    )


def cmd_train(cfg, args) -> str:
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    arts, summary = runner.run_all(cfg, seeds, args.out)
    return (
        f"train: variant={cfg.variant} seeds={seeds} test_acc={summary['test_acc_mean']:.4f}"
        f"+-{summary['test_acc_std']:.4f} config_hash={cfg.config_hash}"
    )


def _reference(cfg, seed, train, root):
    rd = runner.run_dir(cfg, seed, root)
    f_d = runner.stage_pretrain(cfg, seed, train, rd)
    gmm, table = runner.stage_fit(cfg, seed, train, f_d, rd)
    return rd, f_d, gmm, table


def cmd_collect_daood(cfg, args) -> str:
    seed = _seed(cfg, args)
    train, test = runner.load_data(cfg)
    rd, f_d, gmm, _ = _reference(cfg, seed, train, args.out)
    report = {}
    for split, ds in (("train", train), ("test", test)):
        col = pipelines.collect_daood(f_d, gmm, ds, cfg.strategy, cfg.daood_n, seed, cfg.daood_max_attempts)
        save_dataset(col.daid, rd / f"daid_{split}.rsds")
        save_dataset(col.daood, rd / f"daood_{split}.rsds")
        report[split] = {**pipelines.audit_collection(col, f_d, gmm, ds), "attempts": col.attempts}
    atomic_write_text(rd / "daood_audit.json", json.dumps({"config_hash": cfg.config_hash, **report}, sort_keys=True) + "\n")
    t = report["test"]
    return f"collect-daood: seed={seed} n={cfg.daood_n} ood_pass={t['ood_pass_fraction']:.3f} id_pass={t['id_pass_fraction']:.3f}"


def fair_table(cfg, seed, train, test, root=None) -> dict:
    """Accuracy of each fair-compare flag on the clean, DAID and DAOOD test sets."""
    rd, f_d, gmm, _ = _reference(cfg, seed, train, root)
    col = pipelines.collect_daood(f_d, gmm, test, cfg.strategy, cfg.daood_n, seed, cfg.daood_max_attempts)
    rows = {}
    for flag in pipelines.FAIR_FLAGS:
        res = pipelines.fair_compare(f_d, gmm, train, cfg.strategy, flag, cfg.fair_n, cfg.train_cfg(seed), cfg.model, tau=cfg.tau)
        rows[flag] = {
            "test": netcore.evaluate(res.model, test.images, test.labels)[0],
            "daid_test": netcore.evaluate(res.model, col.daid.images, col.daid.labels)[0],
            "daood_test": netcore.evaluate(res.model, col.daood.images, col.daood.labels)[0],
            "consumed": [r.consumed for r in res.history],
        }
    return rows


def cmd_fair_compare(cfg, args) -> str:
    seed = _seed(cfg, args)
    train, test = runner.load_data(cfg)
    rows = fair_table(cfg, seed, train, test, args.out)
    rd = runner.run_dir(cfg, seed, args.out)
    atomic_write_text(rd / "fair_compare.json", json.dumps({"config_hash": cfg.config_hash, "rows": rows}, sort_keys=True) + "\n")
    parts = [f"{k}:test={v['test']:.4f},daid={v['daid_test']:.4f},daood={v['daood_test']:.4f}" for k, v in rows.items()]
    return "fair-compare: " + " ".join(parts)


def _sweep_point(cfg, root, data):
    def point(p, alpha, seed):
        c = replace(cfg, strategy=replace(cfg.strategy, p=p), alpha_max=alpha, config_hash=f"{cfg.config_hash}-p{p:g}-a{alpha:g}")
        return runner.run_seed(c, seed, root, data).final_test_acc

    return point


def _rows_json(param, rows):
    return [{"param": param, "value": r.value, "mean": r.mean, "std": r.std, "n": len(r.scores), "error": r.error} for r in rows]


def cmd_sweep(cfg, args) -> str:
    data = runner.load_data(cfg)
    point = _sweep_point(cfg, args.out, data)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    base = Path(args.out or cfg.output_dir) / cfg.config_hash
    if cfg.sweep_param == "p":
        rows = pipelines.sweep(cfg.sweep_grid, lambda v, s: point(v, cfg.alpha_max, s), seeds)
        out = _rows_json("p", rows)
    elif cfg.sweep_param == "alpha":
        rows = pipelines.sweep(cfg.sweep_grid, lambda v, s: point(cfg.strategy.p, v, s), seeds)
        out = _rows_json("alpha", rows)
    elif cfg.sweep_param == "both":
        p_rows, best_p, a_rows = pipelines.two_phase_search(cfg.sweep_grid, cfg.optimal_grid, point, seeds, cfg.alpha_max)
        out = _rows_json("p", p_rows) + _rows_json("alpha", a_rows)
    else:
        raise ConfigError(f"unknown sweep param {cfg.sweep_param!r}", "param")
    for row in out:
        row["config_hash"] = cfg.config_hash
    atomic_write_text(base / "sweep.jsonl", runner._jsonl(out))
    best = max((r for r in out if r["error"] is None), key=lambda r: r["mean"], default=None)
    failed = sum(r["error"] is not None for r in out)
    tail = f" best {best['param']}={best['value']:g} acc={best['mean']:.4f}" if best else ""
    return f"sweep: rows={len(out)} failed={failed}{tail}"


def ablation_table(cfg, seeds, root=None, data=None) -> dict:
    """Mean/std test accuracy of every smoothing mode plus RS_norm / RS_log."""
    train, test = data if data is not None else runner.load_data(cfg)
    scores: dict = {}
    for seed in seeds:
        rd, f_d, gmm, table = _reference(replace(cfg, variant="resmooth_log"), seed, train, root)
        w = np.atleast_1d(lossmodel.posterior_id(gmm, table.raw_loss))
        tcfg = cfg.train_cfg(seed)

        def rs(mode, g=gmm, weights=w):
            return pipelines.resmooth_train(train, cfg.strategy, f_d, g, mode, tcfg, cfg.model, test, estimate_weights=weights).final_test_acc

        for m in ("uniform_given", "uniform_avg", "random_sampling", "random_split", "reverse", "resmooth"):
            name = "rs_log" if m == "resmooth" else m
            scores.setdefault(name, []).append(rs(smoothing.AlphaMode(m, cfg.alpha_max, seed)))
        # the unified-optimal column is the best constant over the grid
        grid_scores = [rs(smoothing.AlphaMode("uniform_optimal", cfg.alpha_max, seed, a)) for a in cfg.optimal_grid]
        scores.setdefault("uniform_optimal_grid", []).append(grid_scores)
        est_norm = pipelines.estimate_stage(f_d, train, cfg.strategy, seed, "normalized_loss")
        w_norm = np.atleast_1d(lossmodel.posterior_id(est_norm.gmm, est_norm.table.raw_loss))
        scores.setdefault("rs_norm", []).append(rs(smoothing.AlphaMode("resmooth", cfg.alpha_max, seed), est_norm.gmm, w_norm))
    grid = np.array(scores.pop("uniform_optimal_grid"))
    best = int(np.argmax(grid.mean(axis=0)))
    scores["uniform_optimal"] = list(grid[:, best])
    out = {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "scores": [float(x) for x in v]} for k, v in scores.items()}
    out["uniform_optimal"]["alpha"] = cfg.optimal_grid[best]
    return out


def cmd_ablate(cfg, args) -> str:
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    table = ablation_table(cfg, seeds, args.out)
    rows = [{"config_hash": cfg.config_hash, "mode": k, **v} for k, v in table.items()]
    atomic_write_text(Path(args.out or cfg.output_dir) / cfg.config_hash / "ablation.jsonl", runner._jsonl(rows))
    return "ablate: " + " ".join(f"{k}={v['mean']:.4f}" for k, v in table.items())


def cmd_plot(cfg, args) -> str:
    seed = _seed(cfg, args)
    rd = runner.run_dir(cfg, seed, None)
    losses = Path(args.losses) if args.losses else _require(rd / "losses.csv", "fit-gmm")
    gmm = None if args.no_gmm else (Path(args.gmm) if args.gmm else rd / "gmm.txt")
    if gmm is not None and not gmm.exists():
        gmm = None
    out = Path(args.out) / "loss_hist.svg" if args.out else rd / "loss_hist.svg"
    svg, csv = plotting.plot_losses(losses, gmm, out, cfg.plot_bins)
    return f"plot: wrote {svg} and {csv}"


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "fit-gmm": cmd_fit_gmm,
    "train": cmd_train,
    "collect-daood": cmd_collect_daood,
    "fair-compare": cmd_fair_compare,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resmooth", description=__doc__)
    parser.add_argument("command", help=f"one of: {', '.join(COMMANDS)}")
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="run only this seed")
    parser.add_argument("--out", default=None, help="output root (default: output_dir from the config)")
    parser.add_argument("--losses", default=None, help="plot: loss dump to read")
    parser.add_argument("--gmm", default=None, help="plot: mixture parameters to overlay")
    parser.add_argument("--no-gmm", action="store_true", help="plot: histogram only")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command not in HANDLERS:
        print(f"resmooth: error: unknown command {args.command!r} (choose from {', '.join(COMMANDS)})", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        print(HANDLERS[args.command](cfg, args))
    except ConfigError as exc:
        print(f"resmooth: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"resmooth: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
