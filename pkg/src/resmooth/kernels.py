"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The numba path is used unless ``RESMOOTH_DISABLE_NUMBA=1`` is set or numba
cannot be imported.  Both flavours are always importable under explicit
names (``nb_*`` / ``np_*``) so tests and the benchmark can compare them.
The two flavours agree to rounding, not bitwise; a single run always uses
one flavour throughout, so runs stay bit-reproducible.
"""

import math
import os

import numpy as np

LOG_EPS = math.log(1e-12)

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("RESMOOTH_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _jit(func):
    if _HAVE_NUMBA:
        return njit(cache=True)(func)
    return func


# ---------------------------------------------------------------------------
# smoothed cross-entropy on logits
# ---------------------------------------------------------------------------


def np_smoothed_xent(logits, labels, alphas, weights):
    """Per-sample smoothed CE and the gradient of ``sum_i weights_i * CE_i``.

    Log-probabilities are floored at ``log(1e-12)``; floored entries are
    constant and carry no gradient.
    """
    n, k = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    probs = np.exp(logp)
    target = np.repeat((alphas / k)[:, None], k, axis=1)
    target[np.arange(n), labels] += 1.0 - alphas
    # NaN counts as active so it reaches the loss instead of being floored
    active = ~(logp <= LOG_EPS)
    clamped = np.where(active, logp, LOG_EPS)
    losses = -(target * clamped).sum(axis=1)
    t_act = np.where(active, target, 0.0)
    grad = t_act.sum(axis=1, keepdims=True) * probs - t_act
    grad *= weights[:, None]
    return losses, grad


@_jit
def nb_smoothed_xent(logits, labels, alphas, weights):
    n, k = logits.shape
    losses = np.empty(n)
    grad = np.empty((n, k))
    logp = np.empty(k)
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, k):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(k):
            s += math.exp(logits[i, j] - m)
        lse = math.log(s)
        for j in range(k):
            logp[j] = logits[i, j] - m - lse
        a = alphas[i]
        base = a / k
        y = labels[i]
        loss = 0.0
        t_sum = 0.0
        for j in range(k):
            t = base
            if j == y:
                t += 1.0 - a
            if not logp[j] <= LOG_EPS:
                loss -= t * logp[j]
                t_sum += t
                grad[i, j] = -t
            else:
                loss -= t * LOG_EPS
                grad[i, j] = 0.0
        w = weights[i]
        for j in range(k):
            grad[i, j] = (grad[i, j] + t_sum * math.exp(logp[j])) * w
        losses[i] = loss
    return losses, grad


# ---------------------------------------------------------------------------
# two-component 1-D gaussian mixture, E-step
# ---------------------------------------------------------------------------


def np_gmm2_estep(x, mu, sigma, pi):
    """Responsibilities of component 0 and the mean log-likelihood."""
    l0 = math.log(pi[0]) - math.log(sigma[0]) - 0.5 * math.log(2 * math.pi) - 0.5 * ((x - mu[0]) / sigma[0]) ** 2
    l1 = math.log(pi[1]) - math.log(sigma[1]) - 0.5 * math.log(2 * math.pi) - 0.5 * ((x - mu[1]) / sigma[1]) ** 2
    hi = np.maximum(l0, l1)
    lse = hi + np.log(np.exp(l0 - hi) + np.exp(l1 - hi))
    return np.exp(l0 - lse), float(lse.mean())


@_jit
def nb_gmm2_estep(x, mu, sigma, pi):
    n = x.shape[0]
    r0 = np.empty(n)
    half_log_2pi = 0.5 * math.log(2 * math.pi)
    c0 = math.log(pi[0]) - math.log(sigma[0]) - half_log_2pi
    c1 = math.log(pi[1]) - math.log(sigma[1]) - half_log_2pi
    total = 0.0
    for i in range(n):
        z0 = (x[i] - mu[0]) / sigma[0]
        z1 = (x[i] - mu[1]) / sigma[1]
        l0 = c0 - 0.5 * z0 * z0
        l1 = c1 - 0.5 * z1 * z1
        # logistic form: one exp and one log1p per element
        d = l1 - l0
        e = math.exp(-abs(d))
        if d > 0:
            r0[i] = e / (1.0 + e)
            total += l1 + math.log1p(e)
        else:
            r0[i] = 1.0 / (1.0 + e)
            total += l0 + math.log1p(e)
    return r0, total / n


# ---------------------------------------------------------------------------
# raster kernels
# ---------------------------------------------------------------------------


def np_smooth3(img):
    """3x3 smoothing with weights 1/13 (centre 5); border pixels kept."""
    f = img.astype(np.float64)
    out = f.copy()
    if img.shape[0] < 3 or img.shape[1] < 3:
        return out
    acc = np.zeros_like(f[1:-1, 1:-1])
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            acc = acc + f[1 + dr : f.shape[0] - 1 + dr, 1 + dc : f.shape[1] - 1 + dc] * (5.0 if dr == 0 and dc == 0 else 1.0)
    out[1:-1, 1:-1] = acc / 13.0
    return out


@_jit
def nb_smooth3(img):
    h, w, c = img.shape
    out = np.empty((h, w, c))
    for r in range(h):
        for q in range(w):
            for ch in range(c):
                out[r, q, ch] = img[r, q, ch]
    if h < 3 or w < 3:
        return out
    for r in range(1, h - 1):
        for q in range(1, w - 1):
            for ch in range(c):
                acc = 0.0
                for dr in range(-1, 2):
                    for dc in range(-1, 2):
                        v = float(img[r + dr, q + dc, ch])
                        if dr == 0 and dc == 0:
                            acc += 5.0 * v
                        else:
                            acc += v
                out[r, q, ch] = acc / 13.0
    return out


def np_equalize(img):
    """Per-channel histogram equalisation (PIL-style step lookup table)."""
    out = img.copy()
    for ch in range(img.shape[2]):
        plane = img[:, :, ch]
        hist = np.bincount(plane.ravel(), minlength=256)
        nz = hist[hist > 0]
        step = (int(hist.sum()) - int(nz[-1])) // 255
        if step == 0:
            continue
        lut = (np.cumsum(hist) - hist + step // 2) // step
        out[:, :, ch] = np.clip(lut, 0, 255).astype(np.uint8)[plane]
    return out


@_jit
def nb_equalize(img):
    h, w, c = img.shape
    out = img.copy()
    hist = np.zeros(256, dtype=np.int64)
    lut = np.zeros(256, dtype=np.int64)
    for ch in range(c):
        hist[:] = 0
        for r in range(h):
            for q in range(w):
                hist[img[r, q, ch]] += 1
        last = 0
        for v in range(256):
            if hist[v] > 0:
                last = hist[v]
        step = (h * w - last) // 255
        if step == 0:
            continue
        run = 0
        for v in range(256):
            lv = (run + step // 2) // step
            lut[v] = 255 if lv > 255 else lv
            run += hist[v]
        for r in range(h):
            for q in range(w):
                out[r, q, ch] = lut[img[r, q, ch]]
    return out


if USE_NUMBA:
    smoothed_xent = nb_smoothed_xent
    gmm2_estep = nb_gmm2_estep
    smooth3 = nb_smooth3
    equalize = nb_equalize
else:
    smoothed_xent = np_smoothed_xent
    gmm2_estep = np_gmm2_estep
    smooth3 = np_smooth3
    equalize = np_equalize

BACKEND = "numba" if USE_NUMBA else "numpy"
