import numpy as np
import pytest

from flowstraight import data, fields, nn, training
from flowstraight.errors import DivergenceError
from tests.conftest import PointMass


def constant_field_params(value, data_dim=2, n_freqs=2):
    """Zero weights + final bias: the net computes the constant `value`."""
    params = nn.init_mlp(data_dim, hidden=(4,), n_freqs=n_freqs, rng=np.random.default_rng(0))
    for w, b in zip(params.weights, params.biases):
        w[:] = 0.0
        b[:] = 0.0
    params.biases[-1][:] = value
    return params


class TestCfmLoss:
    def test_zero_field_zero_pair(self):
        params = constant_field_params([0.0, 0.0])
        loss, _ = training.cfm_loss(params, [[0.0, 0.0]], [[0.0, 0.0]], 0.3)
        assert loss == 0.0

    def test_zero_field_single_pair_is_squared_norm(self):
        params = constant_field_params([0.0, 0.0])
        for t in (0.0, 0.21, 0.9):
            loss, _ = training.cfm_loss(params, [[0.0, 0.0]], [[3.0, 4.0]], t)
            assert loss == pytest.approx(25.0, rel=1e-15)

    def test_preloaded_straight_field_zero_loss(self):
        # the network is pinned to x1 - x0 of one fixed pair, like wrapping
        # the conditional straight field
        x0, x1 = np.array([0.5, -1.0]), np.array([2.0, 1.5])
        params = constant_field_params(x1 - x0)
        for t in (0.0, 0.4, 1.0):
            loss, _ = training.cfm_loss(params, x0[None], x1[None], t)
            assert loss == pytest.approx(0.0, abs=1e-28)

    def test_batch_permutation_invariance(self, probe_net, rng):
        x0 = rng.normal(size=(16, 2))
        x1 = rng.normal(size=(16, 2))
        t = rng.uniform(size=16)
        loss_a, grads_a = training.cfm_loss(probe_net, x0, x1, t)
        perm = rng.permutation(16)
        loss_b, grads_b = training.cfm_loss(probe_net, x0[perm], x1[perm], t[perm])
        assert loss_a == pytest.approx(loss_b, rel=1e-12)
        assert np.allclose(nn.flatten_grads(grads_a), nn.flatten_grads(grads_b), rtol=1e-10, atol=1e-13)

    def test_shape_mismatch_propagates(self, probe_net):
        with pytest.raises(ValueError):
            training.cfm_loss(probe_net, np.zeros((3, 2)), np.zeros((4, 2)), 0.5)


class TestTrainStage1:
    def test_zero_steps_returns_initial(self, gaussian_coupling):
        params = nn.init_mlp(2, hidden=(8,), n_freqs=2, rng=np.random.default_rng(1))
        cfg = training.TrainConfig(batch_size=8, steps=0, seed=3)
        res = training.train_stage1(params, gaussian_coupling, cfg)
        assert np.array_equal(nn.flatten_params(res.params), nn.flatten_params(params))
        assert res.records == []

    def test_fixed_seed_bitwise_reproducible(self, moons_coupling):
        params = nn.init_mlp(2, hidden=(16,), n_freqs=4, rng=np.random.default_rng(5))
        cfg = training.TrainConfig(batch_size=32, steps=40, seed=11)
        r1 = training.train_stage1(params, moons_coupling, cfg)
        r2 = training.train_stage1(params, moons_coupling, cfg)
        assert np.array_equal(nn.flatten_params(r1.params), nn.flatten_params(r2.params))
        assert np.array_equal(nn.flatten_params(r1.ema.shadow), nn.flatten_params(r2.ema.shadow))
        assert [r.loss for r in r1.records] == [r.loss for r in r2.records]

    def test_loss_decreases_on_oracle_task(self):
        coup = fields.IndependentCoupling(data.GaussianIso(0, 1, 1), data.GaussianIso(0, 1, 1))
        params = nn.init_mlp(1, hidden=(32,), n_freqs=8, rng=np.random.default_rng(2))
        cfg = training.TrainConfig(batch_size=128, steps=400, lr=2e-3, seed=4)
        res = training.train_stage1(params, coup, cfg)
        first = np.mean([r.loss for r in res.records[:50]])
        last = np.mean([r.loss for r in res.records[-50:]])
        assert last < first

    def test_single_pair_training_reaches_tiny_loss(self):
        # replicated conditional-straight data drives the loss under 1e-6
        coup = fields.IndependentCoupling(PointMass([0.2, -0.4]), PointMass([1.0, 0.8]))
        params = nn.init_mlp(2, hidden=(32,), n_freqs=4, rng=np.random.default_rng(3))
        cfg = training.TrainConfig(batch_size=32, steps=2000, lr=1e-2, seed=5)
        res = training.train_stage1(params, coup, cfg)
        assert res.records[-1].loss < 1e-6

    def test_divergence_aborts_with_last_finite_state(self, gaussian_coupling):
        class ExplodingCoupling:
            def __init__(self, inner):
                self.inner = inner
                self.calls = 0
                self.source = inner.source

            def draw(self, n, rng):
                self.calls += 1
                x0, x1 = self.inner.draw(n, rng)
                if self.calls > 3:
                    x1 = x1 + np.inf
                return x0, x1

        coup = ExplodingCoupling(gaussian_coupling)
        params = nn.init_mlp(2, hidden=(8,), n_freqs=2, rng=np.random.default_rng(6))
        cfg = training.TrainConfig(batch_size=8, steps=100, seed=7)
        with pytest.raises(DivergenceError) as err:
            training.train_stage1(params, coup, cfg)
        partial = err.value.partial
        assert partial is not None
        assert len(partial.records) == 3
        assert all(np.isfinite(r.loss) for r in partial.records)


class TestAnalyticOptimum:
    def test_oracle_field_has_conditional_variance_floor(self, rng):
        # plugging the exact marginal field into the conditional residual
        # yields the (positive) conditional variance; into the marginal
        # residual yields ~0. The gap is the objective constant, >= 0.
        oracle = fields.GaussianOracleField(0, 1, 0, 1, dim=1)
        coup = fields.IndependentCoupling(data.GaussianIso(0, 1, 1), data.GaussianIso(0, 1, 1))
        n = 200_000
        t = rng.uniform(size=n)
        x0, x1 = coup.draw(n, rng)
        xt = (1 - t)[:, None] * x0 + t[:, None] * x1
        u_marg = oracle(xt, t)
        u_cond = x1 - x0
        cfm_residual = float(((u_marg - u_cond) ** 2).sum(axis=1).mean())
        fm_residual = 0.0  # the field equals the marginal target identically
        gap = cfm_residual - fm_residual
        assert gap > 0.5  # analytic value is 2 - integral((2t-1)^2/s_t^2) ~ 1.57
        se = ((u_marg - u_cond) ** 2).sum(axis=1).std(ddof=1) / np.sqrt(n)
        assert gap == pytest.approx(2.0 - (2.0 - np.pi / 2.0), abs=4 * se)


class TestGradientEquivalence:
    def test_degenerate_point_masses_give_exactly_zero_diff(self, probe_net):
        # pi0 and pi1 both point masses: the conditional target is the
        # constant c - a and the marginal field is replaced by the same
        # constant, so the two estimators coincide sample by sample.
        a, c = np.array([0.3, -0.2]), np.array([1.0, 0.7])
        coup = fields.IndependentCoupling(PointMass(a), PointMass(c))
        const = c - a

        def marginal(xt, t):
            return np.tile(const, (xt.shape[0], 1))

        rep = training.fm_cfm_gradient_check(probe_net, marginal, coup, 2000, np.random.default_rng(0))
        assert np.all(rep.mean_diff == 0.0)
        assert rep.frac_outside == 0.0
        assert rep.constant_c == 0.0

    def test_frozen_layers_have_zero_gradient_in_both_estimators(self, gaussian_coupling):
        # zero-initialized final layer blocks every upstream path, so all
        # earlier layers' coordinates are exactly zero in both estimators
        params = nn.init_mlp(2, hidden=(8, 8), n_freqs=2, rng=np.random.default_rng(1))
        oracle = fields.GaussianOracleField(0, 1, 0, 1, dim=2)
        rep = training.fm_cfm_gradient_check(params, oracle, gaussian_coupling, 1000, np.random.default_rng(2))
        n_last = params.weights[-1].size + params.biases[-1].size
        frozen = slice(0, params.n_params - n_last)
        assert np.all(rep.grad_fm[frozen] == 0.0)
        assert np.all(rep.grad_cfm[frozen] == 0.0)
        assert np.all(rep.mean_diff[frozen] == 0.0)

    def test_insufficient_samples_reported_inconclusive(self, probe_net, gaussian_coupling):
        oracle = fields.GaussianOracleField(0, 1, 0, 1, dim=2)
        rep = training.fm_cfm_gradient_check(probe_net, oracle, gaussian_coupling, 8, np.random.default_rng(3))
        assert rep.status == "inconclusive"
