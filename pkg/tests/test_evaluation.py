import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dits.data import Dataset
from dits.envs import Chain1D, expert_action, make_env
from dits.evaluation import (BehavioralCloningPolicy, align_table,
                             correlation_similarity, evaluate_policy,
                             evaluate_with_report, ks_marginal, ks_statistic,
                             normalized_score, similarity_report,
                             spearman_rho)

from helpers import traj_1d


def brute_force_ks(a, b):
    """O(n^2) ECDF comparison over every sample point."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    best = 0.0
    for v in np.concatenate([a, b]):
        fa = np.sum(a <= v) / len(a)
        fb = np.sum(b <= v) / len(b)
        best = max(best, abs(fa - fb))
    return best


def brute_force_correlation(A, B):
    """Direct formula: Pearson of the upper-triangular correlation entries."""
    def corr_entries(X):
        X = np.asarray(X, dtype=np.float64)
        d = X.shape[1]
        out = []
        for i in range(d):
            for j in range(i + 1, d):
                xi = X[:, i] - X[:, i].mean()
                xj = X[:, j] - X[:, j].mean()
                denom = np.sqrt((xi ** 2).sum() * (xj ** 2).sum())
                out.append((xi * xj).sum() / denom if denom > 0 else 0.0)
        return np.asarray(out)

    ua, ub = corr_entries(A), corr_entries(B)
    if np.array_equal(ua, ub):
        return 1.0
    num = ((ua - ua.mean()) * (ub - ub.mean())).sum()
    den = np.sqrt(((ua - ua.mean()) ** 2).sum() * ((ub - ub.mean()) ** 2).sum())
    return float(num / den)


class _ConstantPolicy:
    def __init__(self, action):
        self.action = np.asarray(action, dtype=np.float32)

    def predict(self, s):
        return self.action


class _ExpertPolicy:
    def __init__(self, env_name):
        self.env_name = env_name

    def predict(self, s):
        return expert_action(self.env_name, np.asarray(s).reshape(-1))


class TestBehavioralCloning:
    def test_learns_linear_policy(self):
        rng = np.random.default_rng(0)
        trajs = []
        for _ in range(20):
            pos = np.cumsum(rng.uniform(-0.5, 0.5, size=11))
            trajs.append(traj_1d(pos, actions=2.0 * pos[:-1]))
        bc = BehavioralCloningPolicy(hidden=(64, 64), steps=3000,
                                     seed=0).fit(Dataset(trajs))
        assert bc.report_["holdout_mse"] < 1e-3

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            BehavioralCloningPolicy().fit(Dataset([], state_dim=1,
                                                  action_dim=1))

    def test_save_load_roundtrip(self, tmp_path):
        trajs = [traj_1d([0.0, 0.5, 1.0])]
        bc = BehavioralCloningPolicy(hidden=(8,), steps=20,
                                     seed=0).fit(Dataset(trajs))
        path = tmp_path / "bc.ckpt"
        bc.save(path)
        loaded = BehavioralCloningPolicy.load(path)
        s = np.array([[0.3]], dtype=np.float32)
        assert np.array_equal(bc.predict(s), loaded.predict(s))


class TestEvaluatePolicy:
    def test_zero_policy_scores_zero_on_chain(self):
        scores = evaluate_policy(Chain1D(), _ConstantPolicy([0.0]),
                                 episodes=3, seed=0)
        assert np.allclose(scores, 0.0)

    def test_expert_policy_near_reference(self):
        env = make_env("chain1d")
        scores = evaluate_policy(env, _ExpertPolicy("chain1d"), episodes=5,
                                 seed=0)
        assert abs(scores.mean() - env.spec.expert_score) \
            <= 0.1 * env.spec.expert_score

    def test_repeatable_bit_identical(self):
        env = make_env("bridge2d")
        policy = _ExpertPolicy("bridge2d")
        a = evaluate_policy(env, policy, episodes=4, seed=7)
        b = evaluate_policy(env, policy, episodes=4, seed=7)
        assert np.array_equal(a, b)

    def test_report_fields(self):
        env = make_env("chain1d")
        report = evaluate_with_report(env, _ConstantPolicy([1.0]),
                                      episodes=3, seed=0)
        assert len(report.scores) == 3
        assert report.normalized_mean == pytest.approx(
            float(np.mean(normalized_score(np.asarray(report.scores),
                                           env.spec.random_score,
                                           env.spec.expert_score))))


class TestNormalizedScore:
    def test_anchors(self):
        assert normalized_score(30.0, 0.0, 30.0) == 100.0
        assert normalized_score(0.0, 0.0, 30.0) == 0.0
        assert normalized_score(15.0, 0.0, 30.0) == 50.0

    def test_invalid_reference(self):
        with pytest.raises(ValueError):
            normalized_score(1.0, 5.0, 5.0)

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_affine_equivariance(self, scores):
        normed = normalized_score(np.asarray(scores), -5.0, 10.0)
        assert float(np.mean(normed)) == pytest.approx(
            normalized_score(float(np.mean(scores)), -5.0, 10.0), abs=1e-9)


class TestKsMarginal:
    def test_identical_samples(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(100, 3))
        assert ks_marginal(a, a.copy()) == 1.0

    def test_disjoint_support(self):
        a = np.linspace(0, 1, 50)[:, None]
        b = np.linspace(10, 11, 50)[:, None]
        assert ks_marginal(a, b) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a = rng.normal(size=200)
            b = rng.normal(loc=rng.uniform(-1, 1), size=150)
            assert ks_statistic(a, b) == pytest.approx(brute_force_ks(a, b),
                                                       abs=1e-12)

    def test_symmetric_and_permutation_invariant(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(80, 2))
        b = rng.normal(size=(60, 2))
        assert ks_marginal(a, b) == pytest.approx(ks_marginal(b, a), abs=1e-15)
        assert ks_marginal(a[rng.permutation(80)], b) \
            == pytest.approx(ks_marginal(a, b), abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ks_marginal(np.zeros((5, 2)), np.zeros((5, 3)))


class TestCorrelationSimilarity:
    def test_identical_samples(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(100, 4))
        assert correlation_similarity(a, a.copy()) == 1.0

    def test_negated_feature_breaks_similarity(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(200, 4))
        a[:, 1] = 0.7 * a[:, 0] + 0.3 * a[:, 1]  # induce correlation
        b = a.copy()
        b[:, 0] = -b[:, 0]
        assert correlation_similarity(a, b) < 1.0

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = rng.normal(size=(120, 4))
            b = rng.normal(size=(90, 4)) + rng.uniform(-1, 1, size=4)
            assert correlation_similarity(a, b) == pytest.approx(
                brute_force_correlation(a, b), abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(50, 3))
        b = rng.normal(size=(50, 3))
        assert correlation_similarity(a, b) \
            == pytest.approx(correlation_similarity(b, a), abs=1e-12)

    def test_report_wrapper(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(40, 3))
        rep = similarity_report(a, a.copy())
        assert rep.marginal == 1.0 and rep.correlation == 1.0
        assert rep.as_dict() == {"marginal": 1.0, "correlation": 1.0}


class TestSpearman:
    def test_monotone_sequences(self):
        assert spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
        assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0

    def test_matches_scipy(self):
        import scipy.stats
        rng = np.random.default_rng(8)
        x = rng.normal(size=30)
        y = rng.normal(size=30)
        assert spearman_rho(x, y) == pytest.approx(
            scipy.stats.spearmanr(x, y).statistic, abs=1e-12)


class TestAlignTable:
    def test_renders_columns(self):
        rows = [{"x": 10, "mean": 1.5, "std": 0.25},
                {"x": 300, "mean": 12.0, "std": 0.5}]
        text = align_table(rows)
        lines = text.splitlines()
        assert lines[0].split() == ["x", "mean", "std"]
        assert len(lines) == 3
