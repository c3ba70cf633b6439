import numpy as np
import pytest

from influencelab import influence, nn


def make_logistic(seed=0, d=6, n=80, n_classes=2, train=True):
    """Convex instance: single affine layer trained (optionally) to optimum."""
    rng = np.random.default_rng(seed)
    w_true = rng.normal(size=(n_classes, d))
    X = rng.uniform(0, 1, (n, d))

    def sample(Xa):
        L = Xa @ w_true.T
        P = np.exp(L - L.max(1, keepdims=True))
        P /= P.sum(1, keepdims=True)
        return np.array([rng.choice(n_classes, p=p) for p in P])

    y = sample(X)
    Xv = rng.uniform(0, 1, (30, d))
    yv = sample(Xv)
    spec = nn.ModelSpec((d, n_classes), activation="relu")
    params = nn.init_params(spec, rng)
    if train:
        params = influence._train_to_optimum(params, X, y, 2000, 1e-7)
    return params, X, y, Xv, yv


identity_hvp = lambda batch, s: s  # quadratic surrogate 0.5 ||theta||^2


class TestLissaConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(depth=0), dict(repetitions=0), dict(scale=-1.0),
        dict(damping=-0.1), dict(batch_size=0),
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            influence.LissaConfig(**kwargs)


class TestValGrad:
    def test_empty_rejected(self):
        params, X, y, *_ = make_logistic(train=False)
        with pytest.raises(ValueError):
            influence.val_grad(params, (X[:0], y[:0]))

    def test_duplicated_point_equals_single(self):
        params, X, y, *_ = make_logistic(train=False)
        single = nn.grad_params(params, X[0], y[0])
        dup = influence.val_grad(params, (np.stack([X[0], X[0]]), np.array([y[0], y[0]])))
        assert np.array_equal(single, dup)

    def test_two_points_midpoint(self):
        params, X, y, *_ = make_logistic(train=False)
        g0 = nn.grad_params(params, X[0], y[0])
        g1 = nn.grad_params(params, X[1], y[1])
        pair = influence.val_grad(params, (X[:2], y[:2]))
        assert np.abs(pair - 0.5 * (g0 + g1)).max() <= 1e-12

    def test_matches_sequential_sum_oracle(self):
        params, X, y, *_ = make_logistic(train=False)
        total = np.zeros(len(params))
        for i in range(8):
            total = total + nn.grad_params(params, X[i], y[i])
        oracle = total / 8
        got = influence.val_grad(params, (X[:8], y[:8]))
        assert np.abs(got - oracle).max() <= 1e-12 * max(1.0, np.abs(oracle).max())


class TestIhvpExact:
    def test_identity_surrogate(self):
        params, X, y, *_ = make_logistic(train=False)
        v = np.random.default_rng(1).normal(size=len(params))
        s = influence.ihvp_exact(params, (X, y), v, hvp_fn=identity_hvp)
        assert np.abs(s - v).max() <= 1e-10

    def test_known_diagonal_quadratic(self):
        # quadratic with Hessian diag(2, 4, 1, ..., 1), v = ones -> s = 1/diag
        params, X, y, *_ = make_logistic(train=False)
        diag = np.ones(len(params))
        diag[0], diag[1] = 2.0, 4.0
        s = influence.ihvp_exact(params, (X, y), np.ones(len(params)),
                                 hvp_fn=lambda b, u: diag * u)
        assert s[0] == pytest.approx(0.5, abs=1e-12)
        assert s[1] == pytest.approx(0.25, abs=1e-12)

    def test_logistic_residual(self):
        params, X, y, Xv, yv = make_logistic(seed=3, d=10, n=200)
        v = influence.val_grad(params, (Xv, yv))
        s = influence.ihvp_exact(params, (X, y), v, damping=0.01)
        resid = nn.hvp(params, (X, y), s) + 0.01 * s - v
        assert np.linalg.norm(resid) <= 1e-8 * np.linalg.norm(v)

    def test_singular_without_damping_reports(self):
        # constant zero feature makes the Hessian singular
        params, X, y, *_ = make_logistic(train=False)
        X = X.copy()
        X[:, 0] = 0.0
        with pytest.raises(influence.NonInvertibleHessianError):
            influence.ihvp_exact(params, (X, y), np.ones(len(params)), damping=0.0)

    def test_dense_limit_enforced(self):
        spec = nn.ModelSpec((60, 40, 10))
        params = nn.init_params(spec, np.random.default_rng(0))
        X = np.random.default_rng(1).uniform(0, 1, (4, 60))
        with pytest.raises(ValueError):
            influence.ihvp_exact(params, (X, np.zeros(4, dtype=int)), np.zeros(len(params)))


class TestIhvpLissa:
    def test_identity_surrogate_one_step(self):
        params, X, y, *_ = make_logistic(train=False)
        v = np.random.default_rng(1).normal(size=len(params))
        cfg = influence.LissaConfig(depth=1, repetitions=1, scale=1.0, damping=0.0)
        s = influence.ihvp_lissa(params, (X, y), v, cfg, hvp_fn=identity_hvp)
        assert np.array_equal(s, v)

    def test_matches_exact_on_logistic(self):
        params, X, y, Xv, yv = make_logistic(seed=5, d=10, n=200)
        v = influence.val_grad(params, (Xv, yv))
        exact = influence.ihvp_exact(params, (X, y), v, damping=0.01)
        cfg = influence.LissaConfig(depth=500, repetitions=4, damping=0.01, batch_size=8)
        est = influence.ihvp_lissa(params, (X, y), v, cfg, rng=np.random.default_rng(2))
        cos = est @ exact / (np.linalg.norm(est) * np.linalg.norm(exact))
        assert cos >= 0.99

    def test_huge_damping_matches_exact(self):
        params, X, y, Xv, yv = make_logistic(seed=7)
        v = influence.val_grad(params, (Xv, yv))
        lam = 50.0  # far above the Hessian norm
        exact = influence.ihvp_exact(params, (X, y), v, damping=lam)
        cfg = influence.LissaConfig(depth=400, repetitions=2, damping=lam,
                                    scale=2 * lam, batch_size=40)
        est = influence.ihvp_lissa(params, (X, y), v, cfg, rng=np.random.default_rng(3))
        assert np.linalg.norm(est - exact) <= 0.05 * np.linalg.norm(exact)
        # and the near-diagonal system solution is ~ v / lam
        assert np.linalg.norm(exact - v / lam) <= 0.1 * np.linalg.norm(v / lam)

    def test_divergence_reports_scale_error_with_trace(self):
        params, X, y, *_ = make_logistic(train=False)
        v = np.ones(len(params))
        cfg = influence.LissaConfig(depth=100, repetitions=1, scale=1.0, damping=0.0)
        with pytest.raises(influence.ScaleTooSmallError) as err:
            influence.ihvp_lissa(params, (X, y), v, cfg,
                                 hvp_fn=lambda b, s: 10.0 * s)
        assert len(err.value.norm_trace) > 0

    def test_deterministic_given_rng(self):
        params, X, y, Xv, yv = make_logistic()
        v = influence.val_grad(params, (Xv, yv))
        cfg = influence.LissaConfig(depth=50, repetitions=2)
        a = influence.ihvp_lissa(params, (X, y), v, cfg, rng=np.random.default_rng(9))
        b = influence.ihvp_lissa(params, (X, y), v, cfg, rng=np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_linear_in_v_with_shared_draws(self):
        params, X, y, Xv, yv = make_logistic()
        rng = np.random.default_rng(4)
        va = rng.normal(size=len(params))
        vb = rng.normal(size=len(params))
        cfg = influence.LissaConfig(depth=60, repetitions=1, scale=2.0)
        run = lambda v: influence.ihvp_lissa(params, (X, y), v, cfg,
                                             rng=np.random.default_rng(77))
        lhs = run(va + vb)
        rhs = run(va) + run(vb)
        assert np.abs(lhs - rhs).max() <= 1e-9 * max(1.0, np.abs(rhs).max())

    def test_zero_vector_short_circuits(self):
        params, X, y, *_ = make_logistic(train=False)
        cfg = influence.LissaConfig(depth=5, repetitions=1)
        out = influence.ihvp_lissa(params, (X, y), np.zeros(len(params)), cfg)
        assert np.array_equal(out, np.zeros(len(params)))


class TestInfluenceScores:
    @pytest.fixture
    def trained(self):
        params, X, y, Xv, yv = make_logistic(seed=2, d=8, n=120)
        s_vec = influence.compute_influence_vector(
            params, (X, y), (Xv, yv), influence.LissaConfig(damping=0.01),
            mask=None, method="exact",
        )
        return params, X, y, Xv, yv, s_vec

    def test_zero_vector_gives_zero_score(self, trained):
        params, X, y, *_ = make_logistic(seed=2, d=8, n=120)
        zero = influence.InfluenceVector(s=np.zeros(len(params)), mask=None,
                                         snapshot_id=nn.params_digest(params))
        assert influence.influence_up_loss(nn.Example(X[0], y[0]), zero, params) == 0.0
        assert np.array_equal(
            influence.influence_pert_loss(nn.Example(X[0], y[0]), zero, params),
            np.zeros(X.shape[1]),
        )

    def test_stale_snapshot_rejected(self, trained):
        params, X, y, _, _, s_vec = trained
        moved = params.replace(params.values + 1e-3)
        with pytest.raises(influence.StaleInfluenceError):
            influence.influence_up_loss(nn.Example(X[0], y[0]), s_vec, moved)
        with pytest.raises(influence.StaleInfluenceError):
            influence.influence_pert_loss(nn.Example(X[0], y[0]), s_vec, moved)

    def test_saturated_example_scores_near_zero(self, trained):
        params, X, y, _, _, s_vec = trained
        # an example the model classifies with near-certain confidence has a
        # vanishing gradient, hence vanishing influence
        logits = nn.forward(params, X)
        margins = logits[np.arange(len(y)), y] - np.sort(logits, axis=1)[:, -2]
        best = int(np.argmax(margins))
        score_best = abs(influence.influence_up_loss(nn.Example(X[best], y[best]), s_vec, params))
        scores = [abs(influence.influence_up_loss(nn.Example(X[i], y[i]), s_vec, params))
                  for i in range(len(y))]
        assert score_best <= np.median(scores)

    def test_pert_loss_needs_full_network_vector(self, trained):
        params, X, y, Xv, yv, _ = trained
        mask = nn.top_layer_mask(params.spec)
        masked_vec = influence.compute_influence_vector(
            params, (X, y), (Xv, yv), influence.LissaConfig(damping=0.01),
            mask=mask, method="exact",
        )
        with pytest.raises(ValueError):
            influence.influence_pert_loss(nn.Example(X[0], y[0]), masked_vec, params)

    def test_pert_loss_finite_difference_slope(self, trained):
        params, X, y, _, _, s_vec = trained
        z = nn.Example(X[3], y[3])
        pert = influence.influence_pert_loss(z, s_vec, params)
        eps = 1e-5
        for k in (0, 3, 5):
            e = np.zeros(X.shape[1])
            e[k] = eps
            up = -(s_vec.s @ nn.grad_params(params, z.x + e, z.y))
            dn = -(s_vec.s @ nn.grad_params(params, z.x - e, z.y))
            slope = (up - dn) / (2 * eps)
            assert abs(pert[k] - slope) <= 1e-3 * max(abs(slope), 1e-6)

    def test_group_additivity_both_scores(self, trained):
        params, X, y, Xv, yv, _ = trained
        cfg = influence.LissaConfig(damping=0.01)
        half = len(yv) // 2
        A = (Xv[:half], yv[:half])
        B = (Xv[half : 2 * half], yv[half : 2 * half])
        union = (Xv[: 2 * half], yv[: 2 * half])
        vecs = {
            name: influence.compute_influence_vector(params, (X, y), group, cfg,
                                                     mask=None, method="exact")
            for name, group in (("A", A), ("B", B), ("U", union))
        }
        z = nn.Example(X[1], y[1])
        up = {k: influence.influence_up_loss(z, v, params) for k, v in vecs.items()}
        assert abs(up["U"] - 0.5 * (up["A"] + up["B"])) <= 1e-10
        pt = {k: influence.influence_pert_loss(z, v, params) for k, v in vecs.items()}
        assert np.abs(pt["U"] - 0.5 * (pt["A"] + pt["B"])).max() <= 1e-10

    def test_reuse_matches_per_point_recomputation(self, trained):
        params, X, y, Xv, yv, s_vec = trained
        cached = [influence.influence_up_loss(nn.Example(X[i], y[i]), s_vec, params)
                  for i in range(10)]
        for i in range(10):
            fresh = influence.compute_influence_vector(
                params, (X, y), (Xv, yv), influence.LissaConfig(damping=0.01),
                mask=None, method="exact",
            )
            again = influence.influence_up_loss(nn.Example(X[i], y[i]), fresh, params)
            assert again == cached[i]


class TestLooOracle:
    def test_nothing_removed_is_exactly_zero(self):
        params, X, y, Xv, yv = make_logistic(seed=1, train=False)
        delta = influence.loo_retrain_oracle(params, (X, y), None, (Xv, yv))
        assert delta == 0.0

    def test_duplicate_removal_near_zero(self):
        # a redundant copy carries ~1/n of the empirical weight; duplicating a
        # confidently-correct point makes that residual weight negligible
        params, X, y, Xv, yv = make_logistic(seed=4, n=400)
        logits = nn.forward(params, X)
        margins = logits[np.arange(len(y)), y] - np.sort(logits, axis=1)[:, -2]
        i = int(np.argmax(margins))
        X2 = np.vstack([X, X[i : i + 1]])
        y2 = np.append(y, y[i])
        delta = influence.loo_retrain_oracle(params, (X2, y2), len(y2) - 1, (Xv, yv))
        assert abs(delta) <= 1e-3

    def test_planted_outlier_lowers_val_loss(self):
        params, X, y, Xv, yv = make_logistic(seed=6, train=False)
        rng = np.random.default_rng(0)
        x_out = np.clip(Xv.mean(axis=0) + rng.uniform(-0.05, 0.05, X.shape[1]), 0, 1)
        wrong = (np.bincount(yv, minlength=2).argmax() + 1) % 2  # mislabel the dense region
        X2 = np.vstack([X, x_out])
        y2 = np.append(y, wrong)
        delta = influence.loo_retrain_oracle(params, (X2, y2), len(y2) - 1, (Xv, yv))
        assert delta < 0

    def test_nonconvex_model_rejected(self):
        spec = nn.ModelSpec((4, 3, 2))
        params = nn.init_params(spec, np.random.default_rng(0))
        X = np.random.default_rng(1).uniform(0, 1, (10, 4))
        y = np.random.default_rng(2).integers(0, 2, 10)
        with pytest.raises(ValueError):
            influence.loo_retrain_oracle(params, (X, y), 0, (X, y))

    def test_influence_sign_matches_keep_direction(self):
        # planted harmful points: positive upweighting influence must pair
        # with a validation-loss drop when the point is removed
        agree = trials = 0
        for seed in range(10):
            params, X, y, Xv, yv = make_logistic(seed=30 + seed, d=5, n=60)
            rng = np.random.default_rng(seed)
            x_bad = np.clip(Xv.mean(axis=0) + rng.uniform(-0.05, 0.05, 5), 0, 1)
            y_bad = (np.bincount(yv, minlength=2).argmax() + 1) % 2
            X2 = np.vstack([X, x_bad])
            y2 = np.append(y, y_bad)
            theta = influence._train_to_optimum(params, X2, y2, 2000, 1e-7)
            s_vec = influence.compute_influence_vector(
                theta, (X2, y2), (Xv, yv), influence.LissaConfig(damping=0.01),
                mask=None, method="exact",
            )
            score = influence.influence_up_loss(nn.Example(x_bad, y_bad), s_vec, theta)
            loo = influence.loo_retrain_oracle(theta, (X2, y2), len(y2) - 1, (Xv, yv))
            trials += 1
            agree += int(np.sign(score) == np.sign(-loo))
        assert agree / trials >= 0.9
