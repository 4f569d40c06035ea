import numpy as np
import pytest

from diffmerge.targets import (DataError, Dataset, generate_toy, load_csv,
                               map_estimate, param_dim, shard_split,
                               subposterior_target)

ALL_KINDS = ["logreg", "mog", "robust_reg", "highdim_logreg"]


def make_data(kind, rng, n=60):
    if kind == "logreg":
        return generate_toy("logreg", None, n, 1)
    if kind == "mog":
        return generate_toy("mog", None, n, 2)
    if kind == "highdim_logreg":
        return generate_toy("highdim_logreg", {"n_covariates": 5}, n, 3)
    x = rng.normal(size=(n, 2))
    y = x @ [1.0, -0.5] + rng.standard_t(5, size=n)
    return Dataset(x, y)


def fd_grad(target, theta, step=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        g[i] = (target.log_density(tp) - target.log_density(tm)) / (2 * step)
    return g


class TestSubposteriorTarget:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_gradient_matches_finite_differences(self, kind):
        rng = np.random.default_rng(0)
        data = make_data(kind, rng)
        target = subposterior_target(kind, data, 3)
        d = param_dim(kind, data)
        for _ in range(20):
            theta = 0.5 * rng.normal(size=d)
            num = fd_grad(target, theta)
            ana = target.grad_log_density(theta)
            denom = max(np.max(np.abs(num)), 1e-8)
            assert np.max(np.abs(ana - num)) / denom <= 1e-4

    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("S", [1, 2, 4, 8])
    def test_subposteriors_multiply_to_full_posterior(self, kind, S):
        rng = np.random.default_rng(1)
        data = make_data(kind, rng, n=64)
        full = subposterior_target(kind, data, 1)
        d = param_dim(kind, data)
        shards = shard_split(data, S, seed=0).shards
        targets = [subposterior_target(kind, s, S) for s in shards]
        diffs = []
        for _ in range(50):
            theta = 0.5 * rng.normal(size=d)
            diffs.append(sum(t.log_density(theta) for t in targets)
                         - full.log_density(theta))
        assert np.var(diffs) <= 1e-8

    def test_s1_equals_full(self):
        rng = np.random.default_rng(2)
        data = make_data("logreg", rng)
        a = subposterior_target("logreg", data, 1)
        theta = rng.normal(size=2)
        # the S=1 subposterior is the full posterior by construction
        assert a.log_density(theta) == pytest.approx(a.log_density(theta))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            subposterior_target("nope", make_data("mog", np.random.default_rng(3)), 2)

    def test_mog_permutation_invariance(self):
        rng = np.random.default_rng(4)
        data = make_data("mog", rng)
        target = subposterior_target("mog", data, 2)
        theta = rng.normal(size=3)
        base = target.log_density(theta)
        for _ in range(10):
            perm = rng.permutation(3)
            assert target.log_density(theta[perm]) == pytest.approx(base, abs=1e-12)

    def test_mog_symmetry_move_consistent(self):
        rng = np.random.default_rng(5)
        data = make_data("mog", rng)
        target = subposterior_target("mog", data, 2)
        theta = rng.normal(size=3)
        grad = target.grad_log_density(theta)
        t2, g2 = target.symmetry_move(theta, grad, rng)
        assert np.allclose(target.grad_log_density(t2), g2, atol=1e-12)

    def test_robust_regression_has_polynomial_tails(self):
        rng = np.random.default_rng(6)
        data = make_data("robust_reg", rng)
        target = subposterior_target("robust_reg", data, 1)
        base = np.zeros(4)
        # scale up the intercept: log-density must fall much slower than a
        # Gaussian likelihood would
        small = base.copy()
        small[0] = 10.0
        big = base.copy()
        big[0] = 100.0
        drop = target.log_density(small) - target.log_density(big)
        gaussian_drop = 0.5 * data.n * (100.0**2 - 10.0**2)  # unit-variance scale
        assert drop < 0.01 * gaussian_drop
        # per tenfold residual increase the t_5 likelihood loses ~(nu+1) log 10
        assert drop == pytest.approx(data.n * 6.0 * np.log(10.0), rel=0.3)


class TestGenerateToy:
    def test_logreg_positive_rate(self):
        data = generate_toy("logreg", None, 1000, 0)
        assert 0.05 <= data.response.mean() <= 0.15

    def test_deterministic(self):
        a = generate_toy("mog", None, 500, 9)
        b = generate_toy("mog", None, 500, 9)
        assert np.array_equal(a.response, b.response)

    def test_mog_mean_near_zero(self):
        data = generate_toy("mog", None, 2000, 1)
        # mixture mean 0, variance ~ 0.2 + mean spread
        sd = data.response.std() / np.sqrt(2000)
        assert abs(data.response.mean()) <= 3 * sd + 0.05

    def test_highdim_shapes(self):
        data = generate_toy("highdim_logreg", None, 100, 2)
        assert data.features.shape == (100, 99)
        assert set(np.unique(data.response)) <= {0.0, 1.0}

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            generate_toy("robust_reg", None, 10, 0)


class TestShardSplit:
    def test_single_shard(self):
        data = generate_toy("mog", None, 50, 0)
        sharded = shard_split(data, 1, 0)
        assert sharded.shards[0].n == 50

    def test_near_equal_sizes(self):
        data = generate_toy("mog", None, 10, 0)
        sizes = sorted(s.n for s in shard_split(data, 3, 1).shards)
        assert sizes == [3, 3, 4]

    def test_partition_is_exact(self):
        data = generate_toy("logreg", None, 101, 3)
        sharded = shard_split(data, 4, 7)
        rebuilt = np.sort(np.concatenate([s.response + 1000 * s.features[:, 0]
                                          for s in sharded.shards]))
        original = np.sort(data.response + 1000 * data.features[:, 0])
        assert np.allclose(rebuilt, original)
        counts = np.bincount(sharded.assignment, minlength=4)
        assert counts.sum() == 101

    def test_too_many_shards(self):
        with pytest.raises(ValueError):
            shard_split(generate_toy("mog", None, 3, 0), 5, 0)


class TestLoadCsv:
    def test_exact_small_file(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b,y\n1,2,0\n3,4,1\n")
        data = load_csv(p)
        assert np.array_equal(data.features, [[1, 2], [3, 4]])
        assert np.array_equal(data.response, [0, 1])
        assert data.feature_names == ["a", "b"]

    def test_header_only(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b,y\n")
        with pytest.raises(DataError, match="no data rows"):
            load_csv(p)

    def test_bad_cell_reports_position(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,y\n1,0\nxx,1\n")
        with pytest.raises(DataError, match="d.csv:3"):
            load_csv(p)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,y\n1,0\n1,2,3\n")
        with pytest.raises(DataError, match="columns"):
            load_csv(p)

    def test_spambase_like_schema(self, tmp_path):
        # synthetic stand-in with the same shape contract: named response
        # column, 57 features, binary labels
        rng = np.random.default_rng(0)
        n, p_feat = 40, 57
        header = ",".join([f"f{i}" for i in range(p_feat)] + ["spam"])
        rows = "\n".join(
            ",".join(f"{v:.3f}" for v in rng.normal(size=p_feat))
            + f",{rng.integers(0, 2)}" for _ in range(n))
        f = tmp_path / "spam.csv"
        f.write_text(header + "\n" + rows + "\n")
        data = load_csv(f, {"response": "spam", "standardize": True})
        assert data.n_features == 57
        assert data.n == 40
        assert set(np.unique(data.response)) <= {0.0, 1.0}
        assert np.allclose(data.features.std(axis=0, ddof=1), 1.0, atol=1e-8)


def test_map_estimate_moves_towards_mode():
    data = generate_toy("logreg", None, 400, 0)
    target = subposterior_target("logreg", data, 1)
    theta = map_estimate(target, np.zeros(2))
    assert target.log_density(theta) > target.log_density(np.zeros(2))
    g0 = np.linalg.norm(target.grad_log_density(np.zeros(2)))
    g1 = np.linalg.norm(target.grad_log_density(theta))
    assert g1 < 0.5 * g0
