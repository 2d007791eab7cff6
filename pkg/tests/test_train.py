"""Schedule, Adam, losses and the training loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqmoe import moe, pde, serialization, train
from freqmoe.errors import ArchitectureError, ConfigurationError, DataError, TrainingError
from freqmoe.train import TrainConfig
from builders import dense_model, moe_model


class TestSchedule:
    CFG = TrainConfig()

    def test_warmup_midpoint(self):
        assert np.isclose(train.lr_at(25, 0.0, self.CFG), 5e-4)

    def test_end_of_cosine_and_plateau(self):
        assert np.isclose(train.lr_at(10_000, 70, self.CFG), 5e-5, rtol=1e-12)
        assert np.isclose(train.lr_at(10_000, 85, self.CFG), 5e-5, rtol=1e-12)

    def test_peak_and_half_way(self):
        assert train.lr_at(50, 0.0, self.CFG) == 1e-3
        assert np.isclose(train.lr_at(50, 35.0, self.CFG), 1e-3 * (0.05 + 0.95 * 0.5))

    def test_continuous_at_cosine_end(self):
        a = train.lr_at(10_000, 70 - 1e-9, self.CFG)
        b = train.lr_at(10_000, 70, self.CFG)
        assert abs(a - b) < 1e-15

    @settings(max_examples=30, deadline=None)
    @given(e1=st.floats(0, 100), e2=st.floats(0, 100))
    def test_monotone_after_warmup(self, e1, e2):
        lo, hi = sorted((e1, e2))
        assert train.lr_at(100, lo, self.CFG) >= train.lr_at(100, hi, self.CFG)

    def test_config_checks(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(lr=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(sparsity_weight=-1)
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"learning_rate": 1})
        cfg = TrainConfig(epochs=3, clip_norm=None)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        assert TrainConfig().total_epochs == 100


class TestAdam:
    def test_zero_gradient_keeps_parameters(self, rng):
        p = {"a": rng.standard_normal(3), "b": rng.standard_normal(2) + 1j}
        out = train.adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, train.OptimizerState(), 1e-2)
        for k in p:
            assert np.array_equal(out[k], p[k])

    def test_first_step_size(self):
        cfg = TrainConfig()
        p = {"a": np.array([0.0]), "c": np.array([1.0 + 1.0j])}
        g = {"a": np.array([1.0]), "c": np.array([1.0 - 2.0j])}
        out = train.adam_step(p, g, train.OptimizerState(), 0.1, cfg)
        assert np.isclose(out["a"][0], -0.1 / (1 + 1e-8), rtol=1e-15)
        # real and imaginary parts are separate coordinates
        assert np.isclose(out["c"][0], (1 - 0.1 / (1 + 1e-8)) + (1 + 0.1 / (1 + 1e-8)) * 1j)

    def test_only_named_parameters_move(self, rng):
        p = {"a": rng.standard_normal(3), "b": rng.standard_normal(3)}
        g = {k: np.ones(3) for k in p}
        out = train.adam_step(p, g, train.OptimizerState(), 0.1, names=["b"])
        assert out["a"] is p["a"]
        assert not np.allclose(out["b"], p["b"])

    def test_deterministic(self, rng):
        p = {"a": rng.standard_normal(5)}
        gs = [{"a": rng.standard_normal(5)} for _ in range(4)]
        runs = []
        for _ in range(2):
            q, st_ = dict(p), train.OptimizerState()
            for g in gs:
                q = train.adam_step(q, g, st_, 0.01)
            runs.append(q["a"].tobytes())
        assert runs[0] == runs[1]

    def test_non_finite_gradient(self):
        state = train.OptimizerState()
        with pytest.raises(TrainingError):
            train.adam_step({"a": np.zeros(2)}, {"a": np.array([1.0, np.nan])}, state, 0.1)
        assert state.step == 0

    def test_clipping(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0j])}
        out, norm, clipped = train.clip_gradients(g, ["a", "b"], 1.0)
        assert norm == 5.0 and clipped
        assert np.isclose(out["a"][0], 0.6) and np.isclose(out["b"][0], 0.8j)
        assert train.clip_gradients(g, ["a", "b"], None)[2] is False


class TestLosses:
    def test_l2re_examples(self):
        t = np.ones((1, 1, 2, 2))
        assert train.l2_relative_error(t, t) == 0.0
        assert train.l2_relative_error(np.zeros_like(t), t) == 1.0
        assert np.isclose(train.l2_relative_error(1.1 * t, t), 0.1)
        with pytest.raises(DataError):
            train.l2_relative_error(t, np.zeros_like(t))
        with pytest.raises(DataError):
            train.l2_relative_error(t, np.ones((1, 1, 2, 3)))

    def test_l2re_gradient(self, rng):
        p, t = rng.standard_normal((2, 3, 1, 4, 4))
        g = train.l2_relative_error_grad(p, t)
        for idx in [(0, 0, 1, 2), (2, 0, 3, 3), (1, 0, 0, 0)]:
            e = np.zeros_like(p)
            e[idx] = 1e-6
            fd = (train.l2_relative_error(p + e, t) - train.l2_relative_error(p - e, t)) / 2e-6
            assert abs(fd - g[idx]) < 1e-8

    def test_total_loss_decomposition(self):
        t = np.ones((2, 1, 2, 2))
        gates = [np.full((2, 20), 0.5)]
        parts = train.total_loss(1.2 * t, t, gates, 0.01)
        assert np.isclose(parts.task, 0.2) and parts.sparsity == 10.0
        assert np.isclose(parts.total, 0.3)
        assert train.total_loss(t, t, [], 0.5).total == 0.0

    def test_sparsity_term_gradient_through_gates(self, rng):
        """d(lam * L_sparse)/dw via backward matches central differences."""
        _, model = moe_model()
        x = rng.standard_normal((2, 1, 16, 16))
        lam = 0.7

        def f(w):
            model.params["layers.1.gate.w"] = w
            return lam * moe.sparsity_loss(model.forward(x)[1].gates)

        w0 = model.params["layers.1.gate.w"].copy()
        y, tape = model.forward(x)
        g = model.backward(np.zeros_like(y), tape, gate_grads=moe.sparsity_loss_grad(tape.gates, lam))
        for idx in [(0, 0), (2, 3), (1, 1)]:
            e = np.zeros_like(w0)
            e[idx] = 1e-6
            fd = (f(w0 + e) - f(w0 - e)) / 2e-6
            assert abs(fd - g["layers.1.gate.w"][idx]) < 1e-8


def heat_data(n=20, S=16, seed=0):
    return pde.generate_dataset(pde.PdeDatasetMeta("heat", S, n, trajectory_length=5, seed=seed))


def quick_cfg(**kw):
    return TrainConfig(**{"batch_size": 6, "lr": 3e-3, "warmup_steps": 2, "cosine_epochs": 3,
                          "steady_epochs": 0, **kw})


class TestFit:
    def test_pretrain_reduces_error_and_logs(self):
        ds = heat_data()
        model = dense_model(width=6, modes=(4, 4))
        recs = []
        res = train.fit(model, ds, quick_cfg(), log=recs.append)
        assert recs == res.history and len(recs) == 4
        assert recs[-1]["val_l2re"] < recs[0]["val_l2re"]
        assert recs[-1]["step"] == 3 * 3
        assert res.checkpoint.header["provenance"]["source"] == "pretrain"
        assert "mean_gate" not in recs[-1]

    def test_reproducible(self):
        ds = heat_data()
        out = []
        for _ in range(2):
            res = train.fit(dense_model(width=6, modes=(4, 4)), ds, quick_cfg(seed=4))
            out.append(serialization.checkpoint_bytes(res.checkpoint))
        assert out[0] == out[1]

    def test_loss_decomposition_in_log(self):
        _, model = moe_model(randomize=False)
        res = train.fit(model, heat_data(), quick_cfg(sparsity_weight=0.05), mode="finetune")
        for r in res.history[1:]:
            assert r["train_loss"] == r["train_task"] + 0.05 * r["train_sparsity"]
            assert 0 < r["mean_gate"] < 1

    def test_burn_in_starts_from_the_base(self):
        base, model = moe_model(randomize=False)
        ds = heat_data()
        xv, yv = ds.subset(ds.split()[1])
        res = train.fit(model, ds, quick_cfg(burn_in_masked=100), mode="finetune")
        ref = train.evaluate(base, xv, yv)["l2re"]
        assert abs(res.history[0]["val_l2re"] - ref) <= 1e-9
        # experts stay untouched while masked; their gradients are zero
        assert not model.params["layers.0.experts.B"].any()

    def test_sparsity_weight_lowers_gates(self):
        ds = heat_data()
        gates = {}
        for lam in (0.0, 1.0):
            _, model = moe_model(randomize=False)
            res = train.fit(model, ds, quick_cfg(sparsity_weight=lam, lr=1e-2), mode="finetune")
            gates[lam] = res.history[-1]["mean_gate"]
        assert gates[1.0] < gates[0.0]

    def test_freeze_base(self):
        _, model = moe_model(randomize=False)
        before = {k: v.copy() for k, v in model.params.items()}
        train.fit(model, heat_data(), quick_cfg(freeze_base=True), mode="finetune")
        free = set(train.trainable_names(model, True))
        assert free == {k for k in model.params if ".experts." in k or ".gate." in k}
        for k, v in model.params.items():
            if k not in free:
                assert np.array_equal(v, before[k]), k
        assert model.params["layers.0.experts.B"].any()

    def test_wrong_architecture_or_data(self):
        ds = heat_data()
        _, model = moe_model()
        with pytest.raises(ArchitectureError):
            train.fit(model, ds, quick_cfg(), mode="pretrain")
        with pytest.raises(ArchitectureError):
            train.fit(dense_model(), ds, quick_cfg(), mode="finetune")
        with pytest.raises(DataError):
            train.fit(dense_model(grid_size=32), ds, quick_cfg())
        with pytest.raises(ConfigurationError):
            train.fit(dense_model(), ds, quick_cfg(), mode="other")

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        ds = heat_data()
        model = dense_model(width=6, modes=(4, 4))
        model.params["proj.weight"] = model.params["proj.weight"] * np.inf
        with pytest.raises(TrainingError):
            train.fit(model, ds, quick_cfg())
