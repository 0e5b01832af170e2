import numpy as np
import pytest

from resmooth import lossmodel, netcore, pipelines, smoothing
from resmooth.datafile import Dataset
from resmooth.lossmodel import GmmParams
from resmooth.netcore import TrainConfig
from resmooth.rasters import AugmentStrategy

FAST = TrainConfig(epochs=2, batch_size=16, lr0=0.1, seed=0)
LINEAR = pipelines.ModelSpec("softmax_linear")
ROT = AugmentStrategy("rotation", p=0.5)


def _same_model(a: netcore.ModelState, b: netcore.ModelState) -> bool:
    return netcore.model_to_bytes(a) == netcore.model_to_bytes(b)


def _same_history(r1, r2) -> bool:
    return [h.as_dict() for h in r1.history] == [h.as_dict() for h in r2.history]


@pytest.fixture(scope="module")
def reference(tiny_glyphs):
    train, _ = tiny_glyphs
    f_d = pipelines.pretrain(train, FAST, LINEAR).model
    est = pipelines.estimate_stage(f_d, train, ROT, seed=0)
    return f_d, est.gmm


class TestPretrain:
    def test_separable_two_class(self):
        rng = np.random.default_rng(0)
        labels = np.repeat([0, 1], 40)
        images = np.where(labels[:, None, None, None] == 1, 200, 40).astype(np.uint8) * np.ones((1, 8, 8, 1), np.uint8)
        images = np.clip(images + rng.integers(-20, 21, images.shape), 0, 255).astype(np.uint8)
        ds = Dataset(images, labels, 2)
        r = pipelines.pretrain(ds, TrainConfig(epochs=10, batch_size=8, lr0=0.5, seed=1), LINEAR)
        acc, _ = netcore.evaluate(r.model, ds.images, ds.labels)
        assert acc >= 0.99

    def test_deterministic(self, tiny_glyphs):
        train, _ = tiny_glyphs
        a = pipelines.pretrain(train, FAST, LINEAR).model
        b = pipelines.pretrain(train, FAST, LINEAR).model
        assert _same_model(a, b)

    def test_zero_epochs_is_init(self, tiny_glyphs):
        train, _ = tiny_glyphs
        r = pipelines.pretrain(train, TrainConfig(epochs=0, seed=5), LINEAR)
        init = netcore.init_model("softmax_linear", train.image_shape, train.n_classes, 5)
        assert _same_model(r.model, init) and r.history == []

    def test_model_spec_validation(self):
        with pytest.raises(ValueError):
            pipelines.ModelSpec("resnet18")


class TestAugmentStream:
    def test_order_independent(self, tiny_glyphs):
        train, _ = tiny_glyphs
        a, fa = pipelines.augment_dataset(train, ROT, seed=3, epoch=1)
        idx = np.arange(len(train))[::-1]
        b, fb = pipelines.augment_dataset(train.subset(idx), ROT, seed=3, epoch=1)
        np.testing.assert_array_equal(a[idx], b)
        np.testing.assert_array_equal(fa[idx], fb)

    def test_epochs_differ(self, tiny_glyphs):
        train, _ = tiny_glyphs
        a, _ = pipelines.augment_dataset(train, ROT, seed=3, epoch=0)
        b, _ = pipelines.augment_dataset(train, ROT, seed=3, epoch=1)
        assert not np.array_equal(a, b)


class TestEstimate:
    def test_ordering_and_ids(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, _ = reference
        est = pipelines.estimate_stage(f_d, train, ROT, seed=0)
        assert est.gmm.mu0 <= est.gmm.mu1
        assert len(est.table) == 2 * len(train)
        assert len(np.unique(est.table.sample_ids)) == len(est.table)
        assert est.table.origins[: len(train)].sum() == 0

    def test_no_augmentation_is_unimodal(self, tiny_glyphs, reference):
        # D' = D under SA alone: the two components should overlap heavily
        train, _ = tiny_glyphs
        f_d, _ = reference
        est = pipelines.estimate_stage(f_d, train, AugmentStrategy("rotation", p=0.0), seed=0)
        assert est.table.origins.sum() == 0


class TestReductions:
    def test_alpha_zero_equals_plain(self, tiny_glyphs, reference):
        train, test = tiny_glyphs
        f_d, gmm = reference
        plain = pipelines.train_plain(train, ROT, FAST, LINEAR, test)
        rs = pipelines.resmooth_train(train, ROT, f_d, gmm, smoothing.AlphaMode("resmooth", 0.0), FAST, LINEAR, test)
        assert _same_model(plain.model, rs.model)
        assert [h.train_loss for h in plain.history] == [h.train_loss for h in rs.history]

    def test_uniform_given_equals_lsr(self, tiny_glyphs, reference):
        train, test = tiny_glyphs
        f_d, gmm = reference
        lsr = pipelines.train_plain(train, ROT, FAST, LINEAR, test, alpha=0.3)
        rs = pipelines.resmooth_train(train, ROT, f_d, gmm, smoothing.AlphaMode("uniform_given", 0.3), FAST, LINEAR, test)
        assert _same_model(lsr.model, rs.model)

    def test_nda_p_zero_equals_sa(self, tiny_glyphs):
        train, _ = tiny_glyphs
        nda = pipelines.nda_train(train, AugmentStrategy("rotation", p=0.0), 0.4, FAST, LINEAR)
        sa = pipelines.pretrain(train, FAST, LINEAR)
        assert _same_model(nda.model, sa.model)

    def test_nda_alpha_zero_single_group_equals_plain(self, tiny_glyphs):
        # with p = 1 every sample is OOD, so the split normalisation is 1/n
        train, _ = tiny_glyphs
        always = AugmentStrategy("rotation", p=1.0)
        nda = pipelines.nda_train(train, always, 0.0, FAST, LINEAR)
        plain = pipelines.train_plain(train, always, FAST, LINEAR)
        assert _same_model(nda.model, plain.model)

    def test_nda_objective_groups(self):
        fired = np.array([True, False, False, True, False])
        _, _, alphas, weights = pipelines.nda_objective(0.4)(None, np.zeros(5, int), fired, 0)
        np.testing.assert_array_equal(alphas, [0.4, 0, 0, 0.4, 0])
        np.testing.assert_allclose(weights, [0.5, 1 / 3, 1 / 3, 0.5, 1 / 3])

    def test_nda_requires_negative_strategy(self, tiny_glyphs):
        train, _ = tiny_glyphs
        with pytest.raises(ValueError):
            pipelines.nda_train(train, AugmentStrategy("rand_augment", p=0.5), 0.4, FAST, LINEAR)


class TestResmooth:
    def test_auroc_reported_for_negative_strategy(self, tiny_glyphs, reference):
        train, test = tiny_glyphs
        f_d, gmm = reference
        r = pipelines.resmooth_train(train, ROT, f_d, gmm, smoothing.AlphaMode(), FAST, LINEAR, test)
        assert all(h.auroc is not None and 0.0 <= h.auroc <= 1.0 for h in r.history)

    def test_uniform_avg_needs_estimate(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, gmm = reference
        with pytest.raises(ValueError):
            pipelines.resmooth_train(train, ROT, f_d, gmm, smoothing.AlphaMode("uniform_avg"), FAST, LINEAR)

    def test_uniform_avg_is_constant_lsr(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, gmm = reference
        w = np.array([0.0, 0.5, 1.0])
        r = pipelines.resmooth_train(train, ROT, f_d, gmm, smoothing.AlphaMode("uniform_avg", 0.4), FAST, LINEAR, estimate_weights=w)
        const = float(np.mean(0.4 * (1.0 - w)))
        lsr = pipelines.train_plain(train, ROT, FAST, LINEAR, alpha=const)
        assert _same_model(r.model, lsr.model)

    def test_refit_runs(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, gmm = reference
        r = pipelines.resmooth_train(train, ROT, f_d, gmm, smoothing.AlphaMode(), FAST, LINEAR, refit=True)
        assert len(r.history) == FAST.epochs

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_aborts(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, gmm = reference
        with pytest.raises(netcore.NonFiniteLossError):
            pipelines.train_plain(train, ROT, TrainConfig(epochs=3, lr0=1e200, seed=0), LINEAR)


class TestCollect:
    def test_audit_and_sizes(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, gmm = reference
        col = pipelines.collect_daood(f_d, gmm, train, AugmentStrategy("rotation", p=1.0), 5, seed=0)
        assert len(col.daid) == len(col.daood) == 5
        audit = pipelines.audit_collection(col, f_d, gmm, train)
        assert audit["ood_pass_fraction"] == 1.0 and audit["id_pass_fraction"] == 1.0

    def test_identity_augmentation_exhausts_budget(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, _ = reference
        # a mixture whose OOD component sits far above every attainable loss
        gmm = GmmParams(-10.0, 3.0, 0.5, 50.0, 1.0, 0.5)
        with pytest.raises(pipelines.BudgetExhaustedError) as info:
            pipelines.collect_daood(f_d, gmm, train, AugmentStrategy("standard"), 3, seed=0, max_attempts=200)
        assert info.value.n_ood == 0 and info.value.n_id == 3

    def test_deterministic(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, gmm = reference
        a = pipelines.collect_daood(f_d, gmm, train, ROT, 3, seed=4)
        b = pipelines.collect_daood(f_d, gmm, train, ROT, 3, seed=4)
        np.testing.assert_array_equal(a.daood.images, b.daood.images)
        assert a.attempts == b.attempts

    def test_rejects_bad_n(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, gmm = reference
        with pytest.raises(ValueError):
            pipelines.collect_daood(f_d, gmm, train, ROT, 0, seed=0)


class TestFairCompare:
    def test_equal_consumption_across_flags(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, gmm = reference
        consumed = {}
        for flag in pipelines.FAIR_FLAGS:
            r = pipelines.fair_compare(f_d, gmm, train, AugmentStrategy("rotation", p=1.0), flag, 4, FAST, LINEAR)
            consumed[flag] = [h.consumed for h in r.history]
        assert consumed["DAID"] == consumed["DAOOD"] == consumed["mixture"]
        assert all(c > 0 for c in consumed["DAID"])

    def test_every_step_takes_m(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, gmm = reference
        counts = []
        obj = pipelines.fair_objective(f_d, gmm, "DAOOD", 3, seed=0, counts=counts)
        x, y = train.images[:16], train.labels[:16]
        out = obj(x, y, np.zeros(16, bool), 0)
        if counts[0]:
            assert len(out[1]) == counts[0] <= 3
        else:
            assert out is None

    def test_empty_split_raises(self, tiny_glyphs, reference):
        train, _ = tiny_glyphs
        f_d, _ = reference
        everything_id = GmmParams(-10.0, 3.0, 0.5, 50.0, 1.0, 0.5)
        with pytest.raises(pipelines.EmptySplitError):
            pipelines.fair_compare(f_d, everything_id, train, ROT, "mixture", 4, FAST, LINEAR)

    def test_unknown_flag(self, reference):
        f_d, gmm = reference
        with pytest.raises(ValueError):
            pipelines.fair_objective(f_d, gmm, "both", 4, 0)


class TestSweep:
    def test_row_count_and_failure_marking(self):
        def point(v, s):
            if v == 2:
                raise RuntimeError("boom")
            return v + s

        rows = pipelines.sweep([1, 2, 3], point, seeds=[0, 1])
        assert len(rows) == 3
        assert rows[1].error.startswith("RuntimeError") and rows[1].scores == []
        assert rows[2].mean == 3.5
        assert pipelines.best_row(rows).value == 3

    def test_single_point_equals_run(self):
        rows = pipelines.sweep([0.3], lambda v, s: v * 10 + s, seeds=[4])
        assert rows[0].scores == [7.0]

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            pipelines.sweep([], lambda v, s: 0.0, [0])

    def test_two_phase(self):
        calls = []

        def point(p, a, s):
            calls.append((p, a))
            return -abs(p - 0.5) - abs(a - 0.3)

        p_rows, best_p, a_rows = pipelines.two_phase_search([0.25, 0.5, 1.0], [0.1, 0.3], point, [0], alpha_fixed=0.4)
        assert best_p == 0.5
        assert calls[:3] == [(0.25, 0.4), (0.5, 0.4), (1.0, 0.4)]
        assert calls[3:] == [(0.5, 0.1), (0.5, 0.3)]
        assert pipelines.best_row(a_rows).value == 0.3

    def test_all_failed(self):
        rows = pipelines.sweep([1], lambda v, s: 1 / 0, [0])
        with pytest.raises(RuntimeError):
            pipelines.best_row(rows)
