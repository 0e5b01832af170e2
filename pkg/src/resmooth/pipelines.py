"""End-to-end training procedures: pretraining on standard augmentation,
mixture estimation, posterior-weighted smoothing, the NDA split loss,
DAID/DAOOD collection, fair-budget comparison and hyperparameter sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import lossmodel, netcore, smoothing
from .datafile import Dataset
from .rasters import AugmentStrategy, augment_image

log = logging.getLogger(__name__)

# stream tags keep the independent random streams of one run apart
_AUG_TAG = 11
_ORDER_TAG = 13
_ALPHA_TAG = 17
_FAIR_TAG = 19
_ESTIMATE_TAG = 23
_COLLECT_TAG = 29

STANDARD = AugmentStrategy("standard")


class BudgetExhaustedError(RuntimeError):
    def __init__(self, n_id: int, n_ood: int, target: int, attempts: int):
        super().__init__(f"attempt budget of {attempts} draws exhausted: collected ID={n_id}, OOD={n_ood}, target={target}")
        self.n_id, self.n_ood = n_id, n_ood


class EmptySplitError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_acc: float | None = None
    auroc: float | None = None
    consumed: int = 0

    def as_dict(self) -> dict:
        d = {"epoch": self.epoch, "lr": self.lr, "train_loss": self.train_loss}
        if self.test_acc is not None:
            d["test_acc"] = self.test_acc
        if self.auroc is not None:
            d["auroc"] = self.auroc
        return d


@dataclass
class TrainResult:
    model: netcore.ModelState
    history: list = field(default_factory=list)

    @property
    def final_test_acc(self) -> float | None:
        return self.history[-1].test_acc if self.history else None


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "mlp1"
    hidden: int = 128

    def __post_init__(self):
        if self.architecture not in netcore.ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.hidden < 1:
            raise ValueError("hidden must be positive")


# ---------------------------------------------------------------------------
# augmentation stream
# ---------------------------------------------------------------------------


def augment_dataset(ds: Dataset, strategy: AugmentStrategy, seed: int, epoch: int = 0, tag: int = _AUG_TAG):
    """One augmentation draw per sample; each draw is seeded by
    (seed, tag, epoch, sample_id), independent of dataset order."""
    out = np.empty_like(ds.images)
    fired = np.zeros(len(ds), dtype=bool)
    for i in range(len(ds)):
        ss = np.random.SeedSequence([seed, tag, epoch, int(ds.sample_ids[i])])
        out[i], fired[i], _ = augment_image(ds.images[i], strategy, ss)
    return out, fired


# ---------------------------------------------------------------------------
# generic loop
# ---------------------------------------------------------------------------

# An objective maps (images, labels, fired, step) to (images, labels,
# alphas, sample_weights) or None to skip the step.
Objective = Callable[[np.ndarray, np.ndarray, np.ndarray, int], "tuple | None"]


def plain_objective(alpha: float = 0.0) -> Objective:
    def objective(x, y, fired, step):
        n = len(y)
        return x, y, np.full(n, alpha), np.full(n, 1.0 / n)

    return objective


def train_loop(
    train: Dataset,
    strategy: AugmentStrategy,
    cfg: netcore.TrainConfig,
    model_spec: ModelSpec,
    objective: Objective,
    test: Dataset | None = None,
    on_epoch_start=None,
    on_epoch_end=None,
) -> TrainResult:
    """Mini-batch SGD over a freshly augmented stream each epoch.

    ``on_epoch_start(epoch, images, fired)`` runs before an epoch's updates;
    ``on_epoch_end(epoch)`` may return extra metrics for that epoch.
    """
    model = netcore.init_model(model_spec.architecture, train.image_shape, train.n_classes, cfg.seed, model_spec.hidden)
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        images, fired = augment_dataset(train, strategy, cfg.seed, epoch)
        if on_epoch_start is not None:
            on_epoch_start(epoch, images, fired)
        order = np.random.default_rng([cfg.seed, _ORDER_TAG, epoch]).permutation(n)
        losses, consumed = [], 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = objective(images[idx], train.labels[idx], fired[idx], step)
            if batch is not None:
                bx, by, alphas, weights = batch
                loss, grads = netcore.loss_and_grad(model, bx, by, alphas, weights)
                model = netcore.sgd_step(model, grads, step, total, cfg)
                losses.append(loss)
                consumed += len(by)
            step += 1
        rec = EpochRecord(
            epoch=epoch + 1,
            lr=netcore.learning_rate(step, total, cfg),
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            consumed=consumed,
        )
        if test is not None:
            rec.test_acc, _ = netcore.evaluate(model, test.images, test.labels)
        if on_epoch_end is not None:
            for k, v in (on_epoch_end(epoch) or {}).items():
                setattr(rec, k, v)
        history.append(rec)
    return TrainResult(model, history)


def train_plain(train, strategy, cfg, model_spec=ModelSpec(), test=None, alpha: float = 0.0) -> TrainResult:
    """Unsmoothed (alpha=0) or uniformly smoothed (LSR) augmented training."""
    return train_loop(train, strategy, cfg, model_spec, plain_objective(alpha), test)


# ---------------------------------------------------------------------------
# the ReSmooth stages
# ---------------------------------------------------------------------------


def pretrain(train: Dataset, cfg: netcore.TrainConfig, model_spec=ModelSpec(), test=None) -> TrainResult:
    """Reference model trained on standard augmentation only."""
    return train_plain(train, STANDARD, cfg, model_spec, test)


@dataclass
class Estimate:
    gmm: lossmodel.GmmParams
    table: lossmodel.LossTable
    augmented_images: np.ndarray


def estimate_stage(f_d: netcore.ModelState, train: Dataset, strategy: AugmentStrategy, seed: int, space: str = "log_loss") -> Estimate:
    """Fit the loss mixture on D plus one seeded augmented draw of D.

    Augmented copies get sample ids offset by ``max(id) + 1``; their
    origin flag is True only where the strategy fired.
    """
    aug_images, fired = augment_dataset(train, strategy, seed, 0, tag=_ESTIMATE_TAG)
    offset = int(train.sample_ids.max()) + 1
    images = np.concatenate([train.images, aug_images])
    labels = np.concatenate([train.labels, train.labels])
    ids = np.concatenate([train.sample_ids, train.sample_ids + offset])
    origin = np.concatenate([np.zeros(len(train), dtype=bool), fired])
    table = lossmodel.collect_log_losses(f_d, images, labels, ids, origin)
    gmm = lossmodel.fit_loss_table(table, space)
    return Estimate(gmm, table, aug_images)


def _reference_posteriors(f_d, gmm, x, y) -> np.ndarray:
    _, raw = netcore.evaluate(f_d, x, y)
    return np.atleast_1d(lossmodel.posterior_id(gmm, raw))


def resmooth_objective(f_d, gmm, mode: smoothing.AlphaMode, uniform_value: float | None = None, sink=None) -> Objective:
    """Alphas from the frozen reference model's posteriors on each batch."""

    def objective(x, y, fired, step):
        w = _reference_posteriors(f_d, gmm, x, y)
        if sink is not None:
            sink.append((w, fired))
        if uniform_value is not None:
            alphas = np.full(len(y), uniform_value)
        else:
            alphas = smoothing.assign_alphas(w, mode, seed=[mode.seed, _ALPHA_TAG, step])
        return x, y, alphas, np.full(len(y), 1.0 / len(y))

    return objective


def resmooth_train(
    train: Dataset,
    strategy: AugmentStrategy,
    f_d: netcore.ModelState,
    gmm: lossmodel.GmmParams,
    mode: smoothing.AlphaMode,
    cfg: netcore.TrainConfig,
    model_spec=ModelSpec(),
    test=None,
    estimate_weights=None,
    refit: bool = False,
) -> TrainResult:
    """Train a new model with posterior-weighted per-sample smoothing.

    ``uniform_avg`` uses one constant: the mean resmooth alpha over
    ``estimate_weights`` (the posteriors of the estimation set).  With
    ``refit`` the mixture is re-estimated on each epoch's stream.
    """
    uniform_value = None
    if mode.mode == "uniform_avg":
        if estimate_weights is None:
            raise ValueError("uniform_avg needs the estimation-set posteriors")
        uniform_value = float(smoothing.assign_alphas(estimate_weights, mode)[0])
    sink: list = []
    state = {"gmm": gmm}

    def start(epoch, images, fired):
        if refit and epoch > 0:
            ids = np.concatenate([train.sample_ids, train.sample_ids + int(train.sample_ids.max()) + 1])
            table = lossmodel.collect_log_losses(
                f_d, np.concatenate([train.images, images]), np.concatenate([train.labels, train.labels]), ids
            )
            state["gmm"] = lossmodel.fit_loss_table(table, gmm.space)

    def end(epoch):
        metrics = {}
        if strategy.is_negative and sink:
            w = np.concatenate([s[0] for s in sink])
            f = np.concatenate([s[1] for s in sink])
            if f.any() and not f.all():
                metrics["auroc"] = lossmodel.auroc(1.0 - w, f)
        sink.clear()
        return metrics

    def objective(x, y, fired, step):
        return resmooth_objective(f_d, state["gmm"], mode, uniform_value, sink)(x, y, fired, step)

    return train_loop(train, strategy, cfg, model_spec, objective, test, start, end)


def nda_objective(alpha: float) -> Objective:
    """Augmented-this-step samples form the OOD group of the split loss."""

    def objective(x, y, fired, step):
        return x, y, np.where(fired, alpha, 0.0), smoothing.loss_neg_weights(fired)

    return objective


def nda_train(train: Dataset, strategy: AugmentStrategy, alpha: float, cfg, model_spec=ModelSpec(), test=None) -> TrainResult:
    if not strategy.is_negative:
        raise ValueError(f"nda training needs jigsaw or rotation, got {strategy.kind!r}")
    return train_loop(train, strategy, cfg, model_spec, nda_objective(alpha), test)


# ---------------------------------------------------------------------------
# DAID / DAOOD collection and the fair comparison
# ---------------------------------------------------------------------------


@dataclass
class Collection:
    daid: Dataset
    daood: Dataset
    attempts: int
    # sample ids of the originals each entry was drawn from
    daid_sources: np.ndarray
    daood_sources: np.ndarray


def collect_daood(
    f_d: netcore.ModelState,
    gmm: lossmodel.GmmParams,
    ds: Dataset,
    strategy: AugmentStrategy,
    n: int,
    seed: int,
    max_attempts: int | None = None,
) -> Collection:
    """Rejection-sample augmented pairs whose original f_d gets right.

    An augmented sample joins the OOD set when its posterior is below 0.5
    and the ID set when above 0.5, until both sets hold ``n`` entries.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    max_attempts = 1000 * n if max_attempts is None else max_attempts
    correct = netcore.forward(f_d, ds.images).labels == ds.labels
    rng = np.random.default_rng([seed, _COLLECT_TAG])
    id_imgs, id_lab, id_src = [], [], []
    ood_imgs, ood_lab, ood_src = [], [], []
    attempts = 0
    chunk = max(16, 4 * n)
    while (len(id_lab) < n or len(ood_lab) < n) and attempts < max_attempts:
        m = min(chunk, max_attempts - attempts)
        picks = rng.integers(len(ds), size=m)
        seeds = rng.integers(2**63 - 1, size=m)
        attempts += m
        # augmentation is evaluated in chunks, but entries are taken in draw order
        aug = np.stack([augment_image(ds.images[j], strategy, int(s))[0] for j, s in zip(picks, seeds)])
        w = _reference_posteriors(f_d, gmm, aug, ds.labels[picks])
        for t, j in enumerate(picks):
            if not correct[j]:
                continue
            if w[t] < 0.5 and len(ood_lab) < n:
                ood_imgs.append(aug[t]), ood_lab.append(ds.labels[j]), ood_src.append(ds.sample_ids[j])
            elif w[t] > 0.5 and len(id_lab) < n:
                id_imgs.append(aug[t]), id_lab.append(ds.labels[j]), id_src.append(ds.sample_ids[j])
    if len(id_lab) < n or len(ood_lab) < n:
        raise BudgetExhaustedError(len(id_lab), len(ood_lab), n, max_attempts)
    shape = ds.image_shape
    daid = Dataset(np.stack(id_imgs).reshape((-1,) + shape), id_lab, ds.n_classes)
    daood = Dataset(np.stack(ood_imgs).reshape((-1,) + shape), ood_lab, ds.n_classes)
    return Collection(daid, daood, attempts, np.array(id_src), np.array(ood_src))


def audit_collection(col: Collection, f_d, gmm, ds: Dataset) -> dict:
    """Re-check every emitted entry against the collection conditions."""
    pos = {int(s): i for i, s in enumerate(ds.sample_ids)}
    correct = netcore.forward(f_d, ds.images).labels == ds.labels
    w_ood = _reference_posteriors(f_d, gmm, col.daood.images, col.daood.labels)
    w_id = _reference_posteriors(f_d, gmm, col.daid.images, col.daid.labels)
    ok_ood = np.array([correct[pos[int(s)]] for s in col.daood_sources]) & (w_ood < 0.5)
    ok_id = np.array([correct[pos[int(s)]] for s in col.daid_sources]) & (w_id > 0.5)
    return {
        "ood_pass_fraction": float(ok_ood.mean()),
        "id_pass_fraction": float(ok_id.mean()),
        "n_ood": len(col.daood),
        "n_id": len(col.daid),
    }


FAIR_FLAGS = ("DAOOD", "DAID", "mixture")


def fair_objective(f_d, gmm, flag: str, n_cap: int, seed: int, tau: float = 0.5, counts=None) -> Objective:
    if flag not in FAIR_FLAGS:
        raise ValueError(f"unknown fair-compare flag {flag!r}")

    def objective(x, y, fired, step):
        w = _reference_posteriors(f_d, gmm, x, y)
        is_id = w >= tau
        id_idx, ood_idx = np.flatnonzero(is_id), np.flatnonzero(~is_id)
        m = min(n_cap, len(id_idx), len(ood_idx))
        if counts is not None:
            counts.append(m)
        if m == 0:
            return None
        pool = {"DAOOD": ood_idx, "DAID": id_idx, "mixture": np.arange(len(y))}[flag]
        rng = np.random.default_rng([seed, _FAIR_TAG, step])
        sel = np.sort(pool[rng.permutation(len(pool))[:m]])
        return x[sel], y[sel], np.zeros(m), np.full(m, 1.0 / m)

    return objective


def fair_compare(
    f_d,
    gmm,
    train: Dataset,
    strategy: AugmentStrategy,
    flag: str,
    n_cap: int,
    cfg,
    model_spec=ModelSpec(),
    test=None,
    tau: float = 0.5,
) -> TrainResult:
    """Plain CE on ``m = min(n, |X_ID|, |X_OOD|)`` samples per step, drawn
    from the flagged source, so every flag consumes the same count."""
    counts: list = []
    result = train_loop(train, strategy, cfg, model_spec, fair_objective(f_d, gmm, flag, n_cap, cfg.seed, tau, counts), test)
    steps = math.ceil(len(train) / cfg.batch_size)
    for e in range(cfg.epochs):
        if sum(counts[e * steps : (e + 1) * steps]) == 0:
            raise EmptySplitError(f"epoch {e + 1}: no step had both ID and OOD samples")
    return result


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    value: float
    scores: list
    error: str | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores)) if self.scores else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.scores)) if self.scores else float("nan")


def sweep(grid, run_point: Callable[[float, int], float], seeds) -> list[SweepRow]:
    """Evaluate ``run_point(value, seed)`` over the grid and seeds.

    A failing grid point is recorded and the remaining points still run.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty sweep grid")
    rows = []
    for value in grid:
        try:
            rows.append(SweepRow(value, [float(run_point(value, s)) for s in seeds]))
        except Exception as exc:  # noqa: BLE001 - reported per grid point
            log.warning("sweep point %s failed: %s", value, exc)
            rows.append(SweepRow(value, [], error=f"{type(exc).__name__}: {exc}"))
    return rows


def best_row(rows: list[SweepRow]) -> SweepRow:
    ok = [r for r in rows if r.error is None]
    if not ok:
        raise RuntimeError("every sweep point failed")
    return max(ok, key=lambda r: r.mean)


def two_phase_search(p_grid, alpha_grid, run_point: Callable[[float, float, int], float], seeds, alpha_fixed: float):
    """Sweep p with alpha fixed, then sweep alpha at the best p."""
    p_rows = sweep(p_grid, lambda p, s: run_point(p, alpha_fixed, s), seeds)
    best_p = best_row(p_rows).value
    a_rows = sweep(alpha_grid, lambda a, s: run_point(best_p, a, s), seeds)
    return p_rows, best_p, a_rows
