import numpy as np
import pytest

from influencelab import attacks, data, defenses, nn


@pytest.fixture(scope="module")
def victim_setup():
    """Small trained victim on the blob corpus."""
    rng = np.random.default_rng(0)
    corpus = data.synthetic_blobs(600, rng, d=16, n_classes=3, spread=0.12)
    trn, val, tst = data.split(corpus, 400, 100, 100, rng)
    spec = nn.ModelSpec((16, 12, 3), activation="relu", top_layer_count=1)
    cfg = defenses.HintConfig(epochs=25, schedule=(), learning_rate=0.3, batch_size=32)
    victim = defenses.sgd_train(cfg, trn, nn.init_params(spec, np.random.default_rng(1)),
                                np.random.default_rng(2))
    return victim, trn, tst


def row_losses(params, X, y):
    logits = nn.forward(params, X)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return -(shifted[np.arange(len(y)), y] - np.log(np.exp(shifted).sum(axis=1)))


class TestBudget:
    def test_negative_xi_rejected(self):
        with pytest.raises(ValueError):
            attacks.AttackBudget(xi=-0.1)

    def test_default_step_is_quarter_xi(self):
        assert attacks.AttackBudget(xi=0.2).resolved_step == pytest.approx(0.05)


class TestTargetSpec:
    def test_same_class_rejected(self):
        with pytest.raises(ValueError):
            attacks.TargetSpec(nn.Example(np.zeros(4), 1), 1, np.arange(3))


class TestPgd:
    def test_zero_steps_identity(self, victim_setup):
        victim, trn, _ = victim_setup
        z = nn.Example(trn.X[0], int(trn.y[0]))
        out = attacks.pgd_untargeted(victim, z, attacks.AttackBudget(xi=0.1, steps=0))
        assert np.array_equal(out.x, z.x)
        assert out.y == z.y

    def test_constraints_always_hold(self, victim_setup):
        victim, trn, _ = victim_setup
        budget = attacks.AttackBudget(xi=0.1, steps=15)
        Xp = attacks.pgd_untargeted_rows(victim, trn.X[:100], trn.y[:100], budget)
        assert np.abs(Xp - trn.X[:100]).max() <= budget.xi + 1e-12
        assert Xp.min() >= 0.0 and Xp.max() <= 1.0

    def test_raises_victim_loss_on_batch(self, victim_setup):
        victim, trn, _ = victim_setup
        budget = attacks.AttackBudget(xi=0.15, steps=25)
        X, y = trn.X[:200], trn.y[:200]
        Xp = attacks.pgd_untargeted_rows(victim, X, y, budget)
        raised = row_losses(victim, Xp, y) > row_losses(victim, X, y)
        assert raised.mean() >= 0.95

    def test_label_preserved(self, victim_setup):
        victim, trn, _ = victim_setup
        z = nn.Example(trn.X[3], int(trn.y[3]))
        out = attacks.pgd_untargeted(victim, z, attacks.AttackBudget(xi=0.1, steps=5))
        assert out.y == z.y


class TestDap:
    def test_zero_steps_identity(self, victim_setup):
        victim, trn, _ = victim_setup
        z = nn.Example(trn.X[0], int(trn.y[0]))
        out = attacks.dap(victim, z, attacks.AttackBudget(xi=0.1, steps=0))
        assert np.array_equal(out.x, z.x)

    def test_raises_delusive_class_probability(self, victim_setup):
        victim, trn, _ = victim_setup
        budget = attacks.AttackBudget(xi=0.15, steps=25)
        X, y = trn.X[:200], trn.y[:200]
        t = attacks.least_likely_classes(victim, X)
        Xp = attacks.dap_rows(victim, X, y, budget)
        p0 = np.exp(-row_losses(victim, X, t))
        p1 = np.exp(-row_losses(victim, Xp, t))
        assert (p1 > p0).mean() >= 0.90

    def test_constraints(self, victim_setup):
        victim, trn, _ = victim_setup
        budget = attacks.AttackBudget(xi=0.15, steps=25)
        Xp = attacks.dap_rows(victim, trn.X[:50], trn.y[:50], budget)
        assert np.abs(Xp - trn.X[:50]).max() <= budget.xi + 1e-12
        assert Xp.min() >= 0.0 and Xp.max() <= 1.0


class TestDurp:
    def test_classwise_sharing(self):
        rng = np.random.default_rng(0)
        X = np.full((4, 6), 0.5)
        y = np.array([0, 1, 0, 1])
        Xp = attacks.durp((X, y), 0.1, rng, num_classes=2)
        # interior pixels: no clipping, perturbations identical within class
        assert np.array_equal(Xp[0] - X[0], Xp[2] - X[2])
        assert np.array_equal(Xp[1] - X[1], Xp[3] - X[3])
        assert not np.array_equal(Xp[0] - X[0], Xp[1] - X[1])

    def test_zero_xi_identity(self):
        X = np.random.default_rng(1).uniform(0, 1, (5, 4))
        y = np.zeros(5, dtype=int)
        Xp = attacks.durp((X, y), 0.0, np.random.default_rng(2), num_classes=1)
        assert np.array_equal(Xp, X)

    def test_uniform_distribution(self):
        from scipy import stats

        rng = np.random.default_rng(3)
        xi = 0.2
        d = 10_000
        X = np.full((1, d), 0.5)
        Xp = attacks.durp((X, np.zeros(1, dtype=int)), xi, rng, num_classes=1)
        draws = Xp[0] - 0.5
        res = stats.kstest(draws, stats.uniform(loc=-xi, scale=2 * xi).cdf)
        assert res.pvalue > 0.01


class TestFeatureCollision:
    def test_base_equals_target_stays_put(self, victim_setup):
        victim, trn, _ = victim_setup
        base = nn.Example(trn.X[0], int(trn.y[0]))
        out = attacks.feature_collision(victim, base, trn.X[0], iters=50)
        assert np.abs(out.x - base.x).max() <= 1e-6

    def test_feature_distance_decreases_every_run(self, victim_setup):
        victim, trn, tst = victim_setup
        for seed in range(5):
            rng = np.random.default_rng(seed)
            bi, ti = rng.integers(0, len(trn)), rng.integers(0, len(tst))
            base = nn.Example(trn.X[bi], int(trn.y[bi]))
            target_x = tst.X[ti]
            out = attacks.feature_collision(victim, base, target_x, iters=150)
            assert (attacks.feature_distance(victim, out.x, target_x)
                    < attacks.feature_distance(victim, base.x, target_x))

    def test_huge_beta_pins_base(self, victim_setup):
        victim, trn, tst = victim_setup
        base = nn.Example(trn.X[1], int(trn.y[1]))
        out = attacks.feature_collision(victim, base, tst.X[0], iters=50, beta_fc=1e6)
        assert np.abs(out.x - base.x).max() <= 1e-4

    def test_xi_ball_respected_when_given(self, victim_setup):
        victim, trn, tst = victim_setup
        base = nn.Example(trn.X[2], int(trn.y[2]))
        out = attacks.feature_collision(victim, base, tst.X[0], iters=100, xi=0.05)
        assert np.abs(out.x - base.x).max() <= 0.05 + 1e-12

    def test_label_is_base_label(self, victim_setup):
        victim, trn, tst = victim_setup
        base = nn.Example(trn.X[2], int(trn.y[2]))
        out = attacks.feature_collision(victim, base, tst.X[0], iters=10)
        assert out.y == base.y

    def test_nonfinite_objective_aborts(self, victim_setup):
        victim, trn, tst = victim_setup
        bad = victim.replace(np.where(np.arange(len(victim)) == 0, np.nan, victim.values))
        base = nn.Example(trn.X[0], int(trn.y[0]))
        with pytest.raises(attacks.NonFiniteObjectiveError):
            attacks.feature_collision(bad, base, tst.X[0], iters=5)

    def test_needs_hidden_layer(self):
        spec = nn.ModelSpec((4, 2))
        victim = nn.init_params(spec, np.random.default_rng(0))
        with pytest.raises(ValueError):
            attacks.feature_collision(victim, nn.Example(np.zeros(4), 0), np.zeros(4))


class TestGradientMatching:
    def _tspec(self, victim, trn, tst, seed):
        rng = np.random.default_rng(seed)
        y_adv = int(rng.integers(0, 3))
        pool = np.flatnonzero(tst.y != y_adv)
        ti = int(pool[rng.integers(0, len(pool))])
        bases = np.flatnonzero(trn.y == y_adv)[:12]
        return attacks.TargetSpec(nn.Example(tst.X[ti], int(tst.y[ti])), y_adv, bases), bases

    def test_zero_budget_identity(self, victim_setup):
        victim, trn, tst = victim_setup
        tspec, bases = self._tspec(victim, trn, tst, 0)
        rows = (trn.X[bases], trn.y[bases])
        before = attacks.gradient_cosine(victim, rows, tspec)
        Xp = attacks.gradient_matching(victim, rows, tspec, attacks.AttackBudget(xi=0.0, steps=20))
        assert np.array_equal(Xp, trn.X[bases])
        assert attacks.gradient_cosine(victim, (Xp, trn.y[bases]), tspec) == before

    def test_cosine_improves_across_seeds(self, victim_setup):
        victim, trn, tst = victim_setup
        wins = 0
        for seed in range(5):
            tspec, bases = self._tspec(victim, trn, tst, seed)
            rows = (trn.X[bases], trn.y[bases])
            before = attacks.gradient_cosine(victim, rows, tspec)
            Xp = attacks.gradient_matching(
                victim, rows, tspec, attacks.AttackBudget(xi=0.08, steps=120, step_size=0.008)
            )
            after = attacks.gradient_cosine(victim, (Xp, trn.y[bases]), tspec)
            wins += int(after > before)
        assert wins >= 4

    def test_constraints(self, victim_setup):
        victim, trn, tst = victim_setup
        tspec, bases = self._tspec(victim, trn, tst, 3)
        budget = attacks.AttackBudget(xi=0.08, steps=40, step_size=0.01)
        Xp = attacks.gradient_matching(victim, (trn.X[bases], trn.y[bases]), tspec, budget)
        assert np.abs(Xp - trn.X[bases]).max() <= budget.xi + 1e-12
        assert Xp.min() >= 0.0 and Xp.max() <= 1.0

    def test_degenerate_target_rejected(self, victim_setup):
        _, trn, _ = victim_setup
        spec = nn.ModelSpec((16, 3))
        vals = np.zeros(spec.param_count)
        vals[-3] = 1e4  # certain prediction of class 0 -> exactly zero gradient
        sure = nn.make_params(spec, vals)
        tspec = attacks.TargetSpec(nn.Example(trn.X[0], 1), 0, np.arange(3))
        with pytest.raises(attacks.DegenerateTargetError):
            attacks.gradient_matching(sure, (trn.X[:3], trn.y[:3]), tspec,
                                      attacks.AttackBudget(xi=0.05, steps=3))

    def test_deterministic(self, victim_setup):
        victim, trn, tst = victim_setup
        tspec, bases = self._tspec(victim, trn, tst, 1)
        budget = attacks.AttackBudget(xi=0.05, steps=15)
        a = attacks.gradient_matching(victim, (trn.X[bases], trn.y[bases]), tspec, budget)
        b = attacks.gradient_matching(victim, (trn.X[bases], trn.y[bases]), tspec, budget)
        assert np.array_equal(a, b)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        records = [
            {"origin_index": 5, "attack": "pgd", "xi": 0.3, "seed": 11},
            {"origin_index": 9, "attack": "durp", "xi": 0.3, "seed": 11},
        ]
        path = tmp_path / "m.csv"
        attacks.write_manifest(path, records)
        back = attacks.read_manifest(path)
        assert [r["attack"] for r in back] == ["pgd", "durp"]
        assert [int(r["origin_index"]) for r in back] == [5, 9]
