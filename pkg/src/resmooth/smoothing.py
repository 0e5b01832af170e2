"""Label smoothing: targets, smoothed cross-entropy, per-sample strengths and
the two batch objectives (sample-wise smoothing and the NDA split loss)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-12

ALPHA_MODES = (
    "resmooth",
    "reverse",
    "uniform_given",
    "uniform_avg",
    "uniform_optimal",
    "random_sampling",
    "random_split",
)


@dataclass(frozen=True)
class SmoothedTarget:
    distribution: np.ndarray
    alpha: float
    true_class: int


@dataclass(frozen=True)
class AlphaMode:
    mode: str = "resmooth"
    alpha_max: float = 0.4
    seed: int = 0
    # only read by uniform_optimal
    constant: float | None = None

    def __post_init__(self):
        if self.mode not in ALPHA_MODES:
            raise ValueError(f"unknown alpha mode {self.mode!r}")
        if not 0.0 <= self.alpha_max <= 1.0:
            raise ValueError(f"alpha_max must lie in [0, 1], got {self.alpha_max}")


def smooth_label(true_class: int, alpha: float, n_classes: int) -> SmoothedTarget:
    if not 0 <= true_class < n_classes:
        raise ValueError(f"class {true_class} outside [0, {n_classes})")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    dist = np.full(n_classes, alpha / n_classes)
    dist[true_class] += 1.0 - alpha
    return SmoothedTarget(dist, alpha, true_class)


def _log_probs(p) -> np.ndarray:
    return np.log(np.maximum(np.asarray(p, dtype=np.float64), EPS))


def cross_entropy(target, p) -> float:
    """H(target, p) with the probability floor applied inside the log."""
    return float(-np.dot(target, _log_probs(p)))


def smoothed_ce(prediction, true_class: int, alpha: float) -> float:
    """(1 - alpha) H(onehot, p) + alpha H(u, p)."""
    logp = _log_probs(prediction)
    return float(-(1.0 - alpha) * logp[true_class] - alpha * logp.mean())


def _batch_smoothed_ce(predictions, true_classes, alphas) -> np.ndarray:
    logp = _log_probs(predictions)
    y = np.asarray(true_classes, dtype=np.int64)
    a = np.asarray(alphas, dtype=np.float64)
    return -(1.0 - a) * logp[np.arange(len(y)), y] - a * logp.mean(axis=1)


def loss_div(predictions, true_classes, alphas) -> float:
    """Mean sample-wise smoothed cross-entropy over a batch."""
    predictions = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    if len(true_classes) == 0:
        raise ValueError("empty batch")
    if not (len(predictions) == len(true_classes) == len(alphas)):
        raise ValueError("predictions, classes and alphas must have equal length")
    return float(_batch_smoothed_ce(predictions, true_classes, alphas).mean())


def loss_neg(id_predictions, id_classes, ood_predictions, ood_classes, alpha: float) -> float:
    """Mean plain CE over the ID group plus mean smoothed CE over the OOD group.

    Each group is normalised by its own size; an empty group adds nothing.
    """
    n_id, n_ood = len(id_classes), len(ood_classes)
    if n_id == 0 and n_ood == 0:
        raise ValueError("both groups are empty")
    total = 0.0
    if n_id:
        total += float(_batch_smoothed_ce(np.atleast_2d(id_predictions), id_classes, np.zeros(n_id)).mean())
    if n_ood:
        total += float(_batch_smoothed_ce(np.atleast_2d(ood_predictions), ood_classes, np.full(n_ood, alpha)).mean())
    return total


def loss_neg_weights(is_ood) -> np.ndarray:
    """Per-sample weights that turn a weighted CE sum into the NDA split loss."""
    is_ood = np.asarray(is_ood, dtype=bool)
    n_ood = int(is_ood.sum())
    n_id = len(is_ood) - n_ood
    w = np.empty(len(is_ood))
    if n_id:
        w[~is_ood] = 1.0 / n_id
    if n_ood:
        w[is_ood] = 1.0 / n_ood
    return w


def assign_alphas(weights, mode: AlphaMode, seed=None) -> np.ndarray:
    """Per-sample smoothing strengths from ID posteriors.

    ``seed`` overrides ``mode.seed`` for the random modes, so a training
    loop can pass a per-step seed.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("posterior weights must lie in [0, 1]")
    a = mode.alpha_max
    base = a * (1.0 - w)
    m = mode.mode
    if m == "resmooth":
        return base
    if m == "reverse":
        return a * w
    if m == "uniform_given":
        return np.full(len(w), a)
    if m == "uniform_avg":
        return np.full(len(w), base.mean() if len(w) else 0.0)
    if m == "uniform_optimal":
        if mode.constant is None:
            raise ValueError("uniform_optimal needs a supplied constant")
        return np.full(len(w), float(mode.constant))
    rng = np.random.default_rng(mode.seed if seed is None else seed)
    if m == "random_sampling":
        return rng.uniform(0.0, a, size=len(w))
    if m == "random_split":
        return rng.permutation(base)
    raise ValueError(f"unknown alpha mode {m!r}")  # pragma: no cover
