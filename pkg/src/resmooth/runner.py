"""Run configured experiments and lay out their artifacts on disk:
``<output_dir>/<config_hash>/<seed>/{pretrained.rsmk, losses.csv, gmm.txt,
final.rsmk, metrics.jsonl}``."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import lossmodel, netcore, pipelines
from .config import ExperimentConfig
from .datafile import Dataset, atomic_write_text, load_dataset, save_dataset
from .glyphs import generate_glyphs

log = logging.getLogger(__name__)


@dataclass
class RunArtifacts:
    run_dir: Path
    pretrained: Path
    losses: Path
    gmm: Path
    final: Path
    metrics: Path
    final_test_acc: float
    summary: dict

    def exist(self) -> bool:
        return all(p.exists() for p in (self.pretrained, self.losses, self.gmm, self.final, self.metrics))


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.train_path:
        if not cfg.test_path:
            raise ValueError("a train file needs a matching test file")
        return load_dataset(cfg.train_path), load_dataset(cfg.test_path)
    return generate_glyphs(cfg.glyphs)


def write_data(cfg: ExperimentConfig, out_dir) -> tuple[Path, Path]:
    train, test = generate_glyphs(cfg.glyphs)
    out = Path(out_dir)
    save_dataset(train, out / "train.rsds")
    save_dataset(test, out / "test.rsds")
    return out / "train.rsds", out / "test.rsds"


def run_dir(cfg: ExperimentConfig, seed: int, root=None) -> Path:
    return Path(root or cfg.output_dir) / cfg.config_hash / str(seed)


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _paths(rd: Path) -> dict:
    return {
        "pretrained": rd / "pretrained.rsmk",
        "losses": rd / "losses.csv",
        "gmm": rd / "gmm.txt",
        "final": rd / "final.rsmk",
        "metrics": rd / "metrics.jsonl",
    }


def gmm_space(cfg: ExperimentConfig) -> str:
    return "normalized_loss" if cfg.variant == "resmooth_norm" else "log_loss"


def stage_pretrain(cfg, seed, train, rd: Path, reuse: bool = True) -> netcore.ModelState:
    path = _paths(rd)["pretrained"]
    if reuse and path.exists():
        return netcore.load_model(path)
    result = pipelines.pretrain(train, cfg.pretrain_cfg(seed), cfg.model)
    netcore.save_model(result.model, path)
    return result.model


def stage_fit(cfg, seed, train, f_d, rd: Path, reuse: bool = True):
    """Fit (or reload) the loss mixture; returns (gmm, loss table)."""
    p = _paths(rd)
    if reuse and p["gmm"].exists() and p["losses"].exists():
        return lossmodel.GmmParams.load(p["gmm"]), lossmodel.LossTable.from_csv(p["losses"].read_text())
    est = pipelines.estimate_stage(f_d, train, cfg.strategy, seed, gmm_space(cfg))
    atomic_write_text(p["losses"], est.table.to_csv())
    est.gmm.save(p["gmm"])
    return est.gmm, est.table


def train_variant(cfg: ExperimentConfig, seed: int, train, test, f_d, gmm, table) -> pipelines.TrainResult:
    tcfg = cfg.train_cfg(seed)
    v = cfg.variant
    if v == "baseline_plain":
        return pipelines.train_plain(train, cfg.strategy, tcfg, cfg.model, test)
    if v == "baseline_lsr":
        alpha = cfg.alpha_max if cfg.lsr_alpha is None else cfg.lsr_alpha
        return pipelines.train_plain(train, cfg.strategy, tcfg, cfg.model, test, alpha=alpha)
    if v == "nda_constant":
        return pipelines.nda_train(train, cfg.strategy, cfg.alpha_max, tcfg, cfg.model, test)
    weights = np.atleast_1d(lossmodel.posterior_id(gmm, table.raw_loss))
    return pipelines.resmooth_train(
        train, cfg.strategy, f_d, gmm, cfg.alpha(seed), tcfg, cfg.model, test, estimate_weights=weights, refit=cfg.refit
    )


def run_seed(cfg: ExperimentConfig, seed: int, root=None, data=None) -> RunArtifacts:
    """Pretrain, fit the mixture, train the configured variant, write everything."""
    train, test = data if data is not None else load_data(cfg)
    rd = run_dir(cfg, seed, root)
    p = _paths(rd)
    f_d = stage_pretrain(cfg, seed, train, rd)
    gmm, table = stage_fit(cfg, seed, train, f_d, rd)
    result = train_variant(cfg, seed, train, test, f_d, gmm, table)
    netcore.save_model(result.model, p["final"])
    base = {"config_hash": cfg.config_hash, "seed": seed, "variant": cfg.variant}
    records = [{**base, "record": "epoch", **rec.as_dict()} for rec in result.history]
    summary = {**base, "record": "summary", "final_test_acc": result.final_test_acc, "gmm_pi0": gmm.pi0}
    if cfg.strategy.is_negative and table.origins.any() and not table.origins.all():
        w = np.atleast_1d(lossmodel.posterior_id(gmm, table.raw_loss))
        summary["estimate_auroc"] = lossmodel.auroc(1.0 - w, table.origins)
    records.append(summary)
    atomic_write_text(p["metrics"], _jsonl(records))
    return RunArtifacts(rd, p["pretrained"], p["losses"], p["gmm"], p["final"], p["metrics"], result.final_test_acc, summary)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RESMOOTH_THREADS", "1")))
    except ValueError:
        return 1


def _run_seed_job(args):
    cfg, seed, root = args
    return run_seed(cfg, seed, root)


def run_all(cfg: ExperimentConfig, seeds=None, root=None) -> tuple[list[RunArtifacts], dict]:
    """Run every seed (in worker processes when RESMOOTH_THREADS > 1) and
    write ``summary.jsonl`` with the mean and std over seeds."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    workers = min(worker_count(), len(seeds))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            arts = list(pool.map(_run_seed_job, [(cfg, s, root) for s in seeds]))
    else:
        data = load_data(cfg)
        arts = [run_seed(cfg, s, root, data) for s in seeds]
    accs = [a.final_test_acc for a in arts]
    summary = {
        "config_hash": cfg.config_hash,
        "record": "summary",
        "variant": cfg.variant,
        "seeds": seeds,
        "test_acc_mean": float(np.mean(accs)),
        "test_acc_std": float(np.std(accs)),
    }
    atomic_write_text(Path(root or cfg.output_dir) / cfg.config_hash / "summary.jsonl", _jsonl([summary]))
    return arts, summary


def with_variant(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, **changes)
