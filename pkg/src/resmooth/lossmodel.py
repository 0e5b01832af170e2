"""Per-sample losses under a frozen reference model, a two-component 1-D
Gaussian mixture fitted by EM, and the ID posterior derived from it."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, netcore
from .datafile import atomic_write_text

EPS = 1e-12
SIGMA_FLOOR = 1e-4
SPACES = ("log_loss", "normalized_loss")


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class LossRecord:
    sample_id: int
    origin: str
    raw_loss: float
    log_loss: float


@dataclass
class LossTable:
    """Column-wise loss records, ordered by sample id."""

    sample_ids: np.ndarray
    origins: np.ndarray  # bool, True for augmented
    raw_loss: np.ndarray

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.origins = np.asarray(self.origins, dtype=bool)
        self.raw_loss = np.asarray(self.raw_loss, dtype=np.float64)

    @property
    def log_loss(self) -> np.ndarray:
        return log_transform(self.raw_loss)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __iter__(self):
        logs = self.log_loss
        for i in range(len(self)):
            yield LossRecord(
                int(self.sample_ids[i]), "augmented" if self.origins[i] else "original", float(self.raw_loss[i]), float(logs[i])
            )

    def subset(self, mask) -> "LossTable":
        return LossTable(self.sample_ids[mask], self.origins[mask], self.raw_loss[mask])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("sample_id,origin,raw_loss,log_loss\n")
        for rec in self:
            buf.write(f"{rec.sample_id},{rec.origin},{rec.raw_loss:.17g},{rec.log_loss:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        if rows and set(rows[0]) != {"sample_id", "origin", "raw_loss", "log_loss"}:
            raise ValueError("loss dump has an unexpected header")
        return cls(
            [int(r["sample_id"]) for r in rows],
            [r["origin"] == "augmented" for r in rows],
            [float(r["raw_loss"]) for r in rows],
        )


def log_transform(raw_loss) -> np.ndarray:
    return np.log(np.maximum(np.asarray(raw_loss, dtype=np.float64), EPS))


def collect_log_losses(model: netcore.ModelState, images, labels, sample_ids, augmented=None) -> LossTable:
    """Plain cross-entropy of each sample under ``model``, sorted by sample id."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot collect losses from an empty dataset")
    _, losses = netcore.evaluate(model, images, labels)
    ids = np.asarray(sample_ids, dtype=np.int64)
    aug = np.zeros(len(ids), dtype=bool) if augmented is None else np.asarray(augmented, dtype=bool)
    order = np.argsort(ids, kind="stable")
    return LossTable(ids[order], aug[order], losses[order])


@dataclass(frozen=True)
class GmmParams:
    mu0: float
    sigma0: float
    pi0: float
    mu1: float
    sigma1: float
    pi1: float
    space: str = "log_loss"
    iterations_used: int = 0
    final_log_likelihood: float = float("nan")
    # standardisation constants, used only in normalized_loss space
    shift: float = 0.0
    scale: float = 1.0
    history: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown loss space {self.space!r}")

    def to_text(self) -> str:
        keys = ("mu0", "sigma0", "pi0", "mu1", "sigma1", "pi1", "space", "iterations_used", "final_log_likelihood", "shift", "scale")
        lines = []
        for k in keys:
            v = getattr(self, k)
            lines.append(f"{k} = {v:.17g}" if isinstance(v, float) else f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GmmParams":
        vals = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            vals[key.strip()] = raw.strip()
        required = ("mu0", "sigma0", "pi0", "mu1", "sigma1", "pi1", "space", "iterations_used", "final_log_likelihood")
        missing = [k for k in required if k not in vals]
        if missing:
            raise ValueError(f"GMM file is missing key {missing[0]!r}")
        return cls(
            *(float(vals[k]) for k in ("mu0", "sigma0", "pi0", "mu1", "sigma1", "pi1")),
            space=vals["space"],
            iterations_used=int(vals["iterations_used"]),
            final_log_likelihood=float(vals["final_log_likelihood"]),
            shift=float(vals.get("shift", 0.0)),
            scale=float(vals.get("scale", 1.0)),
        )

    def save(self, path) -> None:
        atomic_write_text(path, self.to_text())

    @classmethod
    def load(cls, path) -> "GmmParams":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def transform(self, raw_loss) -> np.ndarray:
        """Map raw losses into the space the mixture was fitted in."""
        if self.space == "log_loss":
            return log_transform(raw_loss)
        return (np.asarray(raw_loss, dtype=np.float64) - self.shift) / self.scale

    def density(self, x, component: int) -> np.ndarray:
        """pi_k * N(x; mu_k, sigma_k) in the fitted space."""
        mu, sigma, pi = (self.mu0, self.sigma0, self.pi0) if component == 0 else (self.mu1, self.sigma1, self.pi1)
        x = np.asarray(x, dtype=np.float64)
        return pi * np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))


def _initial_params(x: np.ndarray):
    lo, hi = np.percentile(x, [10, 90])
    med = np.median(x)
    below, above = x[x <= med], x[x > med]
    if len(above) == 0:
        above = x[x >= med]
    s0 = max(float(below.std()), SIGMA_FLOOR)
    s1 = max(float(above.std()), SIGMA_FLOOR)
    return np.array([lo, hi], dtype=np.float64), np.array([s0, s1]), np.array([0.5, 0.5])


def fit_gmm_em(values, max_iter: int = 200, tol: float = 1e-6, space: str = "log_loss", shift: float = 0.0, scale: float = 1.0) -> GmmParams:
    """Fit a two-component 1-D Gaussian mixture by EM.

    Convergence is judged on the mean per-sample log-likelihood.  Hitting
    ``max_iter`` is not an error; the last iterate is returned.  Components
    are ordered so that ``mu0 <= mu1``.
    """
    x = np.ascontiguousarray(values, dtype=np.float64)
    if x.ndim != 1 or len(x) < 10:
        raise ValueError("need at least 10 values to fit the mixture")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    if x.max() - x.min() <= 1e-12:
        raise DegenerateFitError("all values are identical; the mixture is degenerate")
    mu, sigma, pi = _initial_params(x)
    n = len(x)
    history = []
    prev = -math.inf
    iterations = 0
    for it in range(max_iter):
        r0, ll = kernels.gmm2_estep(x, mu, sigma, pi)
        history.append(ll)
        if abs(ll - prev) < tol:
            break
        prev = ll
        r1 = 1.0 - r0
        n0, n1 = r0.sum(), r1.sum()
        # a component that lost all mass keeps its previous location
        if n0 > 0:
            mu0 = float(np.dot(r0, x) / n0)
            sigma[0] = max(math.sqrt(float(np.dot(r0, (x - mu0) ** 2)) / n0), SIGMA_FLOOR)
            mu[0] = mu0
        if n1 > 0:
            mu1 = float(np.dot(r1, x) / n1)
            sigma[1] = max(math.sqrt(float(np.dot(r1, (x - mu1) ** 2)) / n1), SIGMA_FLOOR)
            mu[1] = mu1
        pi = np.clip(np.array([n0 / n, n1 / n]), 1e-300, None)
        pi = pi / pi.sum()
        iterations = it + 1
    else:
        _, ll = kernels.gmm2_estep(x, mu, sigma, pi)
        history.append(ll)
    order = (0, 1) if mu[0] <= mu[1] else (1, 0)
    a, b = order
    return GmmParams(
        float(mu[a]), float(sigma[a]), float(pi[a]),
        float(mu[b]), float(sigma[b]), float(1.0 - pi[a]),
        space=space,
        iterations_used=iterations,
        final_log_likelihood=float(history[-1]),
        shift=shift,
        scale=scale,
        history=tuple(history),
    )


def posterior_from_space(params: GmmParams, x) -> np.ndarray:
    """ID posterior for values already in the fitted space."""
    # clip so the quadratic below cannot overflow; the limits are unchanged
    x = np.clip(np.asarray(x, dtype=np.float64), -1e100, 1e100)
    p0, p1 = 1.0 / params.sigma0**2, 1.0 / params.sigma1**2
    # log-odds l1 - l0 as a*x^2 + b*x + c; a is exactly 0 for equal variances
    a = 0.5 * (p0 - p1)
    b = params.mu1 * p1 - params.mu0 * p0
    c = (
        math.log(params.pi1 / params.sigma1)
        - math.log(params.pi0 / params.sigma0)
        - 0.5 * (params.mu1**2 * p1 - params.mu0**2 * p0)
    )
    d = (a * x + b) * x + c if a != 0.0 else b * x + c
    # logistic of the log-odds, evaluated on the stable side
    e = np.exp(-np.abs(d))
    return np.where(d > 0, e / (1.0 + e), 1.0 / (1.0 + e))


def posterior_id(params: GmmParams, raw_loss) -> np.ndarray | float:
    """Probability that a sample with this raw loss belongs to the low-loss component."""
    w = posterior_from_space(params, params.transform(raw_loss))
    return float(w) if np.ndim(w) == 0 else w


def split_hard(table: LossTable, params: GmmParams, tau: float = 0.5) -> tuple[LossTable, LossTable]:
    """Partition records into (ID, OOD); ID iff posterior >= tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    is_id = posterior_id(params, table.raw_loss) >= tau
    is_id = np.atleast_1d(is_id)
    return table.subset(is_id), table.subset(~is_id)


def normalization_stats(raw_loss) -> tuple[float, float]:
    x = np.asarray(raw_loss, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two losses to standardise")
    sd = float(x.std())
    if sd == 0.0 or sd <= 1e-12 * max(1.0, abs(float(x.mean()))):
        raise DegenerateFitError("losses have zero variance")
    return float(x.mean()), sd


def normalized_loss_values(raw_loss) -> np.ndarray:
    """(loss - mean) / std over the given records."""
    x = np.asarray(raw_loss.raw_loss if isinstance(raw_loss, LossTable) else raw_loss, dtype=np.float64)
    mean, sd = normalization_stats(x)
    return (x - mean) / sd


def fit_loss_table(table: LossTable, space: str = "log_loss", **kw) -> GmmParams:
    if space == "log_loss":
        return fit_gmm_em(table.log_loss, space=space, **kw)
    mean, sd = normalization_stats(table.raw_loss)
    return fit_gmm_em((table.raw_loss - mean) / sd, space=space, shift=mean, scale=sd, **kw)


def auroc(scores, positives) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
