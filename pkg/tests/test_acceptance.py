"""Acceptance suite: every criterion at its stated tolerance and time budget.

Run under pytest (one PASS/FAIL line per criterion appears in the terminal
summary) or directly with ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402

from resmooth import cli, config, glyphs, lossmodel, netcore, pipelines, smoothing  # noqa: E402
from resmooth.lossmodel import GmmParams  # noqa: E402
from resmooth.netcore import TrainConfig  # noqa: E402
from resmooth.rasters import AugmentStrategy  # noqa: E402

SEEDS = (0, 1, 2, 3, 4)

# Desk-scale settings for the trend criteria, fixed by calibration runs on
# seeds 0-2 (see the decisions ledger); the criteria then use seeds 0-4.
RANDAUG_TREND = dict(
    glyphs=glyphs.GlyphSpec(noise=0.4, per_class=200, test_per_class=200),
    strategy=AugmentStrategy("rand_augment", p=1.0, magnitude=25),
    model=pipelines.ModelSpec("mlp1", 256),
    train=TrainConfig(epochs=40, lr0=0.1),
    alpha=0.4,
)
ROTATION_TREND = dict(
    glyphs=glyphs.GlyphSpec(noise=0.25, per_class=100, orientation_sensitive=True),
    strategy=AugmentStrategy("rotation", p=0.5),
    model=pipelines.ModelSpec("mlp1", 128),
    train=TrainConfig(epochs=20, lr0=0.05),
    alpha=0.4,
)
FAIR_TREND = dict(
    glyphs=glyphs.GlyphSpec(noise=0.25, per_class=200),
    strategy=AugmentStrategy("rand_augment", p=1.0, magnitude=15),
    model=pipelines.ModelSpec("mlp1", 128),
    train=TrainConfig(epochs=20, lr0=0.05),
    n_cap=32,
    daood_n=200,
)


def _timed(fn):
    t0 = time.perf_counter()
    ok, detail = fn()
    return ok, detail, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# 1-4: numerical properties
# ---------------------------------------------------------------------------


def criterion_1():
    """Smoothing identity over 10 000 random (p, q, alpha) triples."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        k = int(rng.integers(2, 20))
        p = rng.dirichlet(np.ones(k))
        c = int(rng.integers(k))
        a = float(rng.random())
        lhs = smoothing.cross_entropy(smoothing.smooth_label(c, a, k).distribution, p)
        rhs = (1 - a) * smoothing.cross_entropy(np.eye(k)[c], p) + a * smoothing.cross_entropy(np.full(k, 1 / k), p)
        worst = max(worst, abs(lhs - rhs))
    return worst <= 1e-10, f"max |diff| = {worst:.2e} (tol 1e-10)"


def criterion_2():
    """Analytic vs central-difference gradients of the batch objective."""
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(i)
        arch = netcore.ARCHITECTURES[i % 2]
        k = int(rng.integers(2, 6))
        shape = (int(rng.integers(2, 4)), int(rng.integers(2, 4)), 1)
        model = netcore.init_model(arch, shape, k, seed=i, hidden=5)
        x = rng.integers(0, 256, size=(4, *shape), dtype=np.uint8)
        y = rng.integers(0, k, 4)
        a = rng.random(4) * 0.6
        _, grads = netcore.loss_and_grad(model, x, y, a)
        h = 1e-4
        for key, w in model.params.items():
            num = np.zeros_like(w)
            for idx in np.ndindex(w.shape):
                old = w[idx]
                w[idx] = old + h
                up, _ = netcore.loss_and_grad(model, x, y, a)
                w[idx] = old - h
                down, _ = netcore.loss_and_grad(model, x, y, a)
                w[idx] = old
                num[idx] = (up - down) / (2 * h)
            err = np.linalg.norm(grads[key] - num) / max(np.linalg.norm(grads[key]) + np.linalg.norm(num), 1e-300)
            worst = max(worst, err)
    return worst <= 1e-5, f"max relative error = {worst:.2e} over 100 instances (tol 1e-5)"


def criterion_3():
    """EM recovery of 0.7 N(-4, 0.5^2) + 0.3 N(0, 0.7^2) from 20 000 draws."""
    rng = np.random.default_rng(2024)
    comp = rng.random(20_000) < 0.3
    x = np.where(comp, rng.normal(0.0, 0.7, 20_000), rng.normal(-4.0, 0.5, 20_000))
    g = lossmodel.fit_gmm_em(x)
    d_mu = max(abs(g.mu0 + 4.0), abs(g.mu1 - 0.0))
    d_pi = max(abs(g.pi0 - 0.7), abs(g.pi1 - 0.3))
    drop = float(np.min(np.diff(g.history))) if len(g.history) > 1 else 0.0
    ok = d_mu <= 0.05 and d_pi <= 0.03 and drop >= -1e-9
    return ok, f"|dmu| = {d_mu:.4f}, |dpi| = {d_pi:.4f}, min loglik step = {drop:.1e}, {g.iterations_used} iterations"


def criterion_4():
    """Posterior range, monotonicity and symmetric midpoint."""
    rng = np.random.default_rng(7)
    in_range, monotone = True, True
    for _ in range(200):
        mu0 = rng.uniform(-6, 2)
        gap = rng.uniform(0.2, 5)
        s = rng.uniform(0.1, 2)
        pi0 = rng.uniform(0.05, 0.95)
        s1 = rng.uniform(0.1, 2)
        w_any = lossmodel.posterior_id(GmmParams(mu0, s, pi0, mu0 + gap, s1, 1 - pi0), np.exp(rng.uniform(-30, 8, 500)))
        in_range &= bool(np.all((w_any >= 0) & (w_any <= 1)))
        g = GmmParams(mu0, s, pi0, mu0 + gap, s, 1 - pi0)
        mid = mu0 + gap / 2
        span = 30 * s * s / gap
        xs = np.linspace(mid - span, mid + span, 400)
        monotone &= bool(np.all(np.diff(lossmodel.posterior_from_space(g, xs)) < 0))
    sym = GmmParams(-3.0, 0.8, 0.5, 1.0, 0.8, 0.5)
    mid_err = abs(lossmodel.posterior_id(sym, math.exp(-1.0)) - 0.5)
    ok = in_range and monotone and mid_err <= 1e-12
    return ok, f"range ok = {in_range}, strictly decreasing = {monotone}, |w(mid) - 0.5| = {mid_err:.1e}"


# ---------------------------------------------------------------------------
# 5: detection with ground truth
# ---------------------------------------------------------------------------


def criterion_5():
    """Posterior split vs construction labels on a 30% jigsaw stream."""
    train, test = glyphs.generate_glyphs(glyphs.GlyphSpec())
    strategy = AugmentStrategy("jigsaw", p=0.3, grid_k=4)
    scores = []
    for seed in (0, 1, 2):
        f_d = pipelines.pretrain(train, TrainConfig(epochs=30, seed=seed), pipelines.ModelSpec("mlp1", 128)).model
        est = pipelines.estimate_stage(f_d, train, strategy, seed)
        w = lossmodel.posterior_id(est.gmm, est.table.raw_loss)
        scores.append(lossmodel.auroc(1.0 - w, est.table.origins))
    ok = min(scores) >= 0.95
    return ok, "AUROC per seed = " + ", ".join(f"{s:.4f}" for s in scores) + " (min >= 0.95)"


# ---------------------------------------------------------------------------
# 6: reductions
# ---------------------------------------------------------------------------


def criterion_6():
    """alpha_max = 0 == plain and uniform_given == LSR, bit for bit."""
    train, test = glyphs.generate_glyphs(glyphs.GlyphSpec(per_class=30, test_per_class=10))
    strategy = AugmentStrategy("rand_augment", p=0.5, magnitude=12)
    spec = pipelines.ModelSpec("mlp1", 32)
    same = []
    for seed in (0, 1):
        cfg = TrainConfig(epochs=3, seed=seed)
        f_d = pipelines.pretrain(train, cfg, spec).model
        gmm = pipelines.estimate_stage(f_d, train, strategy, seed).gmm
        rs0 = pipelines.resmooth_train(train, strategy, f_d, gmm, smoothing.AlphaMode("resmooth", 0.0), cfg, spec, test)
        plain = pipelines.train_plain(train, strategy, cfg, spec, test)
        ug = pipelines.resmooth_train(train, strategy, f_d, gmm, smoothing.AlphaMode("uniform_given", 0.4), cfg, spec, test)
        lsr = pipelines.train_plain(train, strategy, cfg, spec, test, alpha=0.4)
        same.append(netcore.model_to_bytes(rs0.model) == netcore.model_to_bytes(plain.model))
        same.append(netcore.model_to_bytes(ug.model) == netcore.model_to_bytes(lsr.model))
        same.append([h.as_dict() for h in rs0.history] == [h.as_dict() for h in plain.history])
    return all(same), f"{sum(same)}/{len(same)} model/trajectory comparisons bit-identical"


# ---------------------------------------------------------------------------
# 7-9: scaled trends
# ---------------------------------------------------------------------------


def criterion_7():
    """RandAugment on glyphs: resmooth_log > baseline_lsr > baseline_plain."""
    s = RANDAUG_TREND
    train, test = glyphs.generate_glyphs(s["glyphs"])
    acc = {"plain": [], "lsr": [], "rs": []}
    for seed in SEEDS:
        cfg = replace(s["train"], seed=seed)
        f_d = pipelines.pretrain(train, cfg, s["model"]).model
        gmm = pipelines.estimate_stage(f_d, train, s["strategy"], seed).gmm
        acc["plain"].append(pipelines.train_plain(train, s["strategy"], cfg, s["model"], test).final_test_acc)
        acc["lsr"].append(pipelines.train_plain(train, s["strategy"], cfg, s["model"], test, alpha=s["alpha"]).final_test_acc)
        mode = smoothing.AlphaMode("resmooth", s["alpha"], seed)
        acc["rs"].append(pipelines.resmooth_train(train, s["strategy"], f_d, gmm, mode, cfg, s["model"], test).final_test_acc)
    m = {k: 100 * float(np.mean(v)) for k, v in acc.items()}
    ok = m["rs"] > m["lsr"] > m["plain"] and m["rs"] - m["lsr"] >= 0.5
    return ok, f"RS {m['rs']:.2f} / LSR {m['lsr']:.2f} / plain {m['plain']:.2f}, RS - LSR = {m['rs'] - m['lsr']:.2f} pts"


def criterion_8():
    """Orientation-sensitive glyphs + rotation: nda_constant > plain rotation."""
    s = ROTATION_TREND
    train, test = glyphs.generate_glyphs(s["glyphs"])
    acc = {"plain": [], "nda": []}
    for seed in SEEDS:
        cfg = replace(s["train"], seed=seed)
        acc["plain"].append(pipelines.train_plain(train, s["strategy"], cfg, s["model"], test).final_test_acc)
        acc["nda"].append(pipelines.nda_train(train, s["strategy"], s["alpha"], cfg, s["model"], test).final_test_acc)
    m = {k: 100 * float(np.mean(v)) for k, v in acc.items()}
    return m["nda"] > m["plain"], f"nda_constant {m['nda']:.2f} vs plain rotation {m['plain']:.2f}"


def criterion_9():
    """Fair comparison: DAID model tops DAID test, mixture tops clean test."""
    s = FAIR_TREND
    train, test = glyphs.generate_glyphs(s["glyphs"])
    rows = {f: {"clean": [], "daid": []} for f in pipelines.FAIR_FLAGS}
    for seed in (0, 1, 2):
        cfg = replace(s["train"], seed=seed)
        f_d = pipelines.pretrain(train, cfg, s["model"]).model
        gmm = pipelines.estimate_stage(f_d, train, s["strategy"], seed).gmm
        col = pipelines.collect_daood(f_d, gmm, test, s["strategy"], s["daood_n"], seed)
        for flag in pipelines.FAIR_FLAGS:
            model = pipelines.fair_compare(f_d, gmm, train, s["strategy"], flag, s["n_cap"], cfg, s["model"]).model
            rows[flag]["clean"].append(netcore.evaluate(model, test.images, test.labels)[0])
            rows[flag]["daid"].append(netcore.evaluate(model, col.daid.images, col.daid.labels)[0])
    m = {f: {k: 100 * float(np.mean(v)) for k, v in r.items()} for f, r in rows.items()}
    daid_top = m["DAID"]["daid"] > m["DAOOD"]["daid"] and m["DAID"]["daid"] >= m["mixture"]["daid"]
    mix_top = m["mixture"]["clean"] >= max(m["DAID"]["clean"], m["DAOOD"]["clean"])
    detail = "; ".join(f"{f}: clean {v['clean']:.2f}, DAID {v['daid']:.2f}" for f, v in m.items())
    return daid_top and mix_top, detail


# ---------------------------------------------------------------------------
# 10-11: audit and determinism
# ---------------------------------------------------------------------------


def criterion_10():
    """Every emitted DAOOD entry satisfies the collection condition."""
    train, test = glyphs.generate_glyphs(glyphs.GlyphSpec(per_class=100))
    strategy = AugmentStrategy("rand_augment", p=1.0, magnitude=15)
    f_d = pipelines.pretrain(train, TrainConfig(epochs=15, seed=0), pipelines.ModelSpec("mlp1", 64)).model
    gmm = pipelines.estimate_stage(f_d, train, strategy, 0).gmm
    n = 100
    col = pipelines.collect_daood(f_d, gmm, test, strategy, n, seed=0)
    audit = pipelines.audit_collection(col, f_d, gmm, test)
    # independent recheck straight from the definitions
    pos = {int(s): i for i, s in enumerate(test.sample_ids)}
    pre_ok = netcore.forward(f_d, test.images).labels == test.labels
    w = lossmodel.posterior_id(gmm, netcore.evaluate(f_d, col.daood.images, col.daood.labels)[1])
    direct = all(pre_ok[pos[int(s)]] for s in col.daood_sources) and bool(np.all(w < 0.5))
    ok = audit["ood_pass_fraction"] == 1.0 and direct and len(col.daood) == n and len(col.daid) == n
    return ok, f"OOD pass {audit['ood_pass_fraction']:.0%}, ID pass {audit['id_pass_fraction']:.0%}, sizes {len(col.daid)}/{len(col.daood)} (N = {n})"


DETERMINISM_CONFIG = """
[data]
classes = 5
per_class = 30
test_per_class = 10

[augment]
kind = jigsaw
p = 0.4

[model]
arch = mlp1
hidden = 32

[pretrain]
epochs = 3

[train]
epochs = 3

[resmooth]
variant = resmooth_log

[run]
seeds = 0, 1
"""


def criterion_11(tmp_dir=None):
    """Full pipeline reruns reproduce byte-identical artifacts."""
    import tempfile

    with tempfile.TemporaryDirectory(dir=tmp_dir) as tmp:
        tmp = Path(tmp)
        cfg_path = tmp / "run.ini"
        cfg_path.write_text(DETERMINISM_CONFIG)
        h = config.config_hash_of_file(cfg_path)
        for out in ("a", "b"):
            if cli.main(["train", "--config", str(cfg_path), "--out", str(tmp / out)]) != 0:
                return False, "pipeline run failed"
        names = ("pretrained.rsmk", "losses.csv", "gmm.txt", "final.rsmk", "metrics.jsonl")
        files = [(tmp / "a" / h / str(s) / n, tmp / "b" / h / str(s) / n) for s in (0, 1) for n in names]
        files.append((tmp / "a" / h / "summary.jsonl", tmp / "b" / h / "summary.jsonl"))
        same = sum(a.read_bytes() == b.read_bytes() for a, b in files)
    return same == len(files), f"{same}/{len(files)} artifact files byte-identical across reruns"


CRITERIA = {
    1: ("smoothing identity", criterion_1, 1.0),
    2: ("gradient correctness", criterion_2, 10.0),
    3: ("EM recovery", criterion_3, 1.0),
    4: ("posterior properties", criterion_4, None),
    5: ("detection AUROC (30% jigsaw)", criterion_5, 120.0),
    6: ("reduction equivalences", criterion_6, None),
    7: ("RandAugment trend (RS > LSR > plain)", criterion_7, 900.0),
    8: ("rotation NDA trend", criterion_8, 600.0),
    9: ("fair comparison trend", criterion_9, None),
    10: ("DAOOD collection audit", criterion_10, None),
    11: ("determinism", criterion_11, None),
}


def run_criterion(number: int) -> tuple[bool, str]:
    name, fn, budget = CRITERIA[number]
    ok, detail, seconds = _timed(fn)
    if budget is not None and seconds > budget:
        ok = False
        detail += f"; over the {budget:.0f}s budget"
    line = acceptance_log.record(number, name, ok, detail, seconds)
    return ok, line


SLOW = {5, 7, 8, 9}


@pytest.mark.parametrize(
    "number", [pytest.param(n, marks=pytest.mark.slow) if n in SLOW else n for n in CRITERIA], ids=lambda n: f"criterion_{n}"
)
def test_criterion(number):
    ok, line = run_criterion(number)
    assert ok, line


if __name__ == "__main__":
    wanted = [int(a) for a in sys.argv[1:]] or list(CRITERIA)
    results = [run_criterion(n) for n in wanted]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
