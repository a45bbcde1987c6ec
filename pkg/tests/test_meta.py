import csv
import math

import numpy as np
import pytest

from invlearn import meta
from invlearn.data import DatasetBundle, Interactions, derive_seed, generate_synthetic
from invlearn.errors import ConfigError, EmptyInputError, InsufficientDataError
from invlearn.loss import DenoiseConfig
from invlearn.meta import (
    DIRECT,
    INVERSE,
    KEEP,
    TrainConfig,
    choose_direction,
    direction_fractions,
    explore_directions,
    ig_epoch,
    pretrain,
    train,
    write_step_trace,
)
from invlearn.model import init_params, logistic_params
from invlearn.optim import AdamState, adam_step

FAST = dict(batch_size=32, gamma=0.01, embedding_dim=8, pretrain_epochs=3, meta_epochs=3, early_stop_patience=2)


@pytest.fixture(scope="module")
def small():
    bundle, truth = generate_synthetic(60, 60, 4, 0.1, 0.0, seed=0, factor_decay=0.5)
    return bundle, truth


def _single(users, items, labels):
    return Interactions(np.atleast_1d(users), np.atleast_1d(items), np.atleast_1d(labels))


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [dict(gamma=0), dict(alpha=-1), dict(batch_size=0), dict(alpha_ratio=-0.1),
                                    dict(meta_epochs=-1), dict(explore_step="sgd"), dict(test_batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_alpha(self):
        assert TrainConfig(gamma=0.002).effective_alpha == pytest.approx(0.0002)
        assert TrainConfig(gamma=0.002, alpha=0.5).effective_alpha == 0.5

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.embedding_dim, cfg.alpha_ratio, cfg.sampling_rate) == (1024, 32, 0.1, 1.0)


class TestChooseDirection:
    def test_strict_minimum(self):
        assert choose_direction(0.1, 0.2, 0.3) == DIRECT
        assert choose_direction(0.3, 0.2, 0.1) == INVERSE
        assert choose_direction(0.3, 0.1, 0.2) == KEEP

    def test_ties_are_pass(self):
        assert choose_direction(0.1, 0.1, 0.1) == KEEP
        assert choose_direction(0.1, 0.2, 0.1) == KEEP
        assert choose_direction(0.2, 0.2 + 1e-13, 0.3) == KEEP


class TestExplore:
    def test_zero_alpha_passes(self):
        params = init_params("gmf", 5, 5, 3, seed=0, emb_std=0.5)
        test = _single([0, 1], [2, 3], [1, 0])
        chosen, trace, _ = explore_directions(params, [[4, 4], [3, 1]], test, 0.0)
        assert trace.direction == KEEP
        assert trace.loss_direct == trace.loss_keep == trace.loss_inverse
        assert np.array_equal(chosen.flat(), params.flat())

    def test_vanishing_dual_gradient_passes(self):
        # theta = 0 makes the unlabeled prediction exactly 0.5
        params = logistic_params(np.zeros(2), [[1.0]], [[0.0]])
        chosen, trace, (preds, w) = explore_directions(params, [[0, 0]], _single(0, 0, 1), 0.1)
        assert preds[0] == 0.5 and w.w_pos[0] == 0.5
        assert trace.direction == KEEP
        assert np.array_equal(chosen.flat(), params.flat())

    def test_single_instance_logistic_ordering(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            uf, itf = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
            params = logistic_params(rng.normal(size=6), uf, itf)
            test = _single(1, 1, int(rng.integers(0, 2)))
            _, t, _ = explore_directions(params, [[0, 0]], test, 0.05)
            lo, hi = sorted((t.loss_direct, t.loss_inverse))
            assert lo < t.loss_keep < hi
            assert t.direction in (DIRECT, INVERSE)

    def test_commit_is_minimum(self):
        rng = np.random.default_rng(1)
        params = init_params("neumf", 6, 6, 4, seed=1, emb_std=0.5)
        for _ in range(30):
            unl = rng.integers(0, 6, (8, 2))
            test = _single(rng.integers(0, 6, 8), rng.integers(0, 6, 8), rng.integers(0, 2, 8))
            chosen, t, _ = explore_directions(params, unl, test, 0.5)
            assert t.committed_test_loss == min(t.loss_direct, t.loss_keep, t.loss_inverse)
            assert meta.test_loss(chosen, test) == t.committed_test_loss

    def test_purity(self):
        params = init_params("gmf", 6, 6, 4, seed=2, emb_std=0.5)
        state = AdamState.for_params(params, 0.01)
        _, grad0 = meta.loss_and_grad(params, [0, 1], [1, 2], [1, 0], [0, 1])
        params, state = adam_step(params, grad0, state)
        before_params, before_state = params.flat().copy(), state.checksum()
        explore_directions(params, [[3, 3], [4, 5]], _single([0, 1], [1, 2], [1, 0]), 0.1, precondition=state)
        explore_directions(params, [[3, 3], [4, 5]], _single([0, 1], [1, 2], [1, 0]), 0.1)
        assert np.array_equal(params.flat(), before_params)
        assert state.checksum() == before_state

    def test_empty_batches(self):
        params = init_params("gmf", 3, 3, 2, seed=0)
        with pytest.raises(EmptyInputError):
            explore_directions(params, np.zeros((0, 2)), _single(0, 0, 1), 0.1)
        with pytest.raises(EmptyInputError):
            explore_directions(params, [[0, 0]], Interactions.empty(), 0.1)


class TestPretrain:
    def test_zero_epochs_is_identity(self, small):
        bundle, _ = small
        cfg = TrainConfig(**FAST | dict(pretrain_epochs=0))
        params = init_params("gmf", 60, 60, 8, seed=0)
        out, _ = pretrain(params, bundle.train_train, cfg, AdamState.for_params(params, cfg.gamma))
        assert np.array_equal(out.flat(), params.flat())

    def test_loss_decreases_on_separable_data(self):
        rng = np.random.default_rng(0)
        uf, itf = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
        params = logistic_params(np.zeros(4), uf, itf)
        users, items = np.repeat(np.arange(20), 20), np.tile(np.arange(20), 20)
        w_true = np.array([1.0, -2.0, 0.5, 1.5])
        x = np.concatenate([uf[users], itf[items]], axis=1)
        data = Interactions(users, items, (x @ w_true > 0).astype(int))
        cfg = TrainConfig(batch_size=50, gamma=0.05, pretrain_epochs=1)
        state = AdamState.for_params(params, cfg.gamma)
        order = np.random.default_rng(1)
        losses = [meta.test_loss(params, data)]
        for _ in range(3):
            params, state = pretrain(params, data, cfg, state, order)
            losses.append(meta.test_loss(params, data))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_deterministic(self, small):
        bundle, _ = small
        cfg = TrainConfig(**FAST)
        runs = []
        for _ in range(2):
            params = init_params("gmf", 60, 60, 8, seed=0)
            runs.append(pretrain(params, bundle.train_train, cfg, AdamState.for_params(params, cfg.gamma))[0])
        assert np.array_equal(runs[0].flat(), runs[1].flat())

    def test_empty_split(self):
        params = init_params("gmf", 2, 2, 2, seed=0)
        with pytest.raises(InsufficientDataError):
            pretrain(params, Interactions.empty(), TrainConfig(), AdamState.for_params(params, 0.1))


class TestIgEpoch:
    def test_trace_length_and_commit(self, small):
        bundle, _ = small
        cfg = TrainConfig(**FAST)
        params = init_params("gmf", 60, 60, 8, seed=0)
        state = AdamState.for_params(params, cfg.gamma)
        out, state2, traces = ig_epoch(params, state, bundle, cfg, epoch=1)
        assert len(traces) == math.ceil(len(bundle.train_train) / cfg.batch_size)
        assert state2.step_count == len(traces)
        assert all(t.committed_test_loss <= t.loss_keep for t in traces)
        assert [t.step for t in traces] == list(range(len(traces)))

    def test_forced_direct_has_no_trace(self, small):
        bundle, _ = small
        cfg = TrainConfig(**FAST)
        params = init_params("gmf", 60, 60, 8, seed=0)
        log = meta.WeightLog()
        _, state, traces = ig_epoch(params, AdamState.for_params(params, cfg.gamma), bundle, cfg,
                                    force_direct=True, weight_log=log)
        assert traces == []
        cols = log.as_columns()
        steps = math.ceil(len(bundle.train_train) / cfg.batch_size)
        assert len(cols["pred"]) == steps * cfg.batch_size
        assert cols["oracle_label"] is None

    # raw steps are tiny next to Adam's, so Pass only shows up at far larger ratios
    @pytest.mark.parametrize("explore_step, large", [("adam", 100.0), ("raw", 1e5)])
    def test_large_alpha_produces_pass_steps(self, small, explore_step, large):
        bundle, _ = small
        fractions = {}
        for ratio in (0.1, large):
            cfg = TrainConfig(**FAST | dict(alpha_ratio=ratio, explore_step=explore_step))
            res = train("ig", bundle, cfg)
            fractions[ratio] = direction_fractions(res.traces)[KEEP]
        assert fractions[large] > fractions[0.1]
        assert fractions[0.1] < 0.05


class TestTrain:
    @pytest.mark.parametrize("method", ["none", "ns", "tce", "rce", "idl", "ig"])
    def test_every_method_runs(self, small, method):
        bundle, truth = small
        res = train(method, bundle, TrainConfig(**FAST), oracle=truth.oracle_label)
        assert res.method == method
        assert 0 <= res.test.auc <= 1
        assert res.best_epoch >= 0
        assert (len(res.traces) > 0) == (method == "ig")
        assert (res.weights["oracle_label"] is not None and len(res.weights["pred"]) > 0) == \
            (method in ("idl", "ig"))

    def test_none_equals_ns_without_sampling(self, small):
        bundle, _ = small
        cfg = TrainConfig(**FAST | dict(sampling_rate=0.0))
        a, b = train("none", bundle, cfg), train("ns", bundle, cfg)
        assert np.array_equal(a.params.flat(), b.params.flat())

    def test_zero_meta_epochs_is_pretrain_only(self, small):
        bundle, _ = small
        cfg = TrainConfig(**FAST | dict(meta_epochs=0))
        res = train("ig", bundle, cfg)
        params = init_params("gmf", 60, 60, 8, derive_seed(cfg.seed, meta._NS, meta._INIT))
        order = np.random.default_rng(derive_seed(cfg.seed, meta._NS, meta._ORDER))
        expected, _ = pretrain(params, bundle.train_train, cfg, AdamState.for_params(params, cfg.gamma), order)
        assert np.array_equal(res.params.flat(), expected.flat())
        assert res.traces == []

    def test_deterministic(self, small):
        bundle, _ = small
        cfg = TrainConfig(**FAST | dict(seed=3))
        a, b = train("ig", bundle, cfg), train("ig", bundle, cfg)
        assert a.test == b.test and a.history == b.history and a.traces == b.traces

    def test_early_stopping_restores_best(self, small):
        bundle, _ = small
        res = train("none", bundle, TrainConfig(**FAST | dict(meta_epochs=20)))
        best = max(h["val_auc"] for h in res.history)
        assert res.validation.auc == pytest.approx(best, abs=1e-12)
        assert res.history[res.best_epoch]["val_auc"] == best

    def test_repeat_pretrain(self, small):
        bundle, _ = small
        a = train("ig", bundle, TrainConfig(**FAST))
        b = train("ig", bundle, TrainConfig(**FAST | dict(repeat_pretrain=True)))
        assert a.history != b.history

    def test_neumf_backbone(self, small):
        bundle, _ = small
        res = train("ig", bundle, TrainConfig(**FAST | dict(backbone="neumf", mlp_layers=(8, 4))))
        assert res.params.mlp_layers == (8, 4)

    def test_unknown_method(self, small):
        with pytest.raises(ConfigError):
            train("bpr", small[0], TrainConfig(**FAST))

    def test_empty_split(self, small):
        bundle, _ = small
        broken = DatasetBundle(60, 60, bundle.train_train, Interactions.empty(), bundle.validation, bundle.test)
        with pytest.raises(InsufficientDataError):
            train("ig", broken, TrainConfig(**FAST))

    def test_denoise_config_is_used(self, small):
        bundle, _ = small
        cfg = TrainConfig(**FAST)
        a = train("tce", bundle, cfg, DenoiseConfig(method="tce", tce_max_drop=0.0))
        b = train("tce", bundle, cfg, DenoiseConfig(method="tce", tce_max_drop=0.5, tce_warmup_steps=0))
        assert a.history != b.history


class TestTraceExport:
    def test_csv(self, small, tmp_path):
        bundle, _ = small
        res = train("ig", bundle, TrainConfig(**FAST))
        path = tmp_path / "t.csv"
        write_step_trace(path, res.traces)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["epoch", "step", "direction", "loss_direct", "loss_keep", "loss_inverse",
                           "committed_test_loss"]
        assert len(rows) == len(res.traces) + 1
        first = res.traces[0]
        assert float(rows[1][6]) == first.committed_test_loss
        assert rows[1][2] in (DIRECT, KEEP, INVERSE)

    def test_fractions(self):
        mk = lambda d: meta.StepTrace(0, 0, d, 0, 0, 0, 0)  # noqa: E731
        fr = direction_fractions([mk(DIRECT), mk(DIRECT), mk(KEEP), mk(INVERSE)])
        assert fr == {DIRECT: 0.5, KEEP: 0.25, INVERSE: 0.25}
        assert direction_fractions([]) == {DIRECT: 0.0, KEEP: 0.0, INVERSE: 0.0}
