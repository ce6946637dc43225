import math

import numpy as np
import pytest

from gamebarrier.lattice import (KNOCK_IN, KNOCK_OUT, BarrierSpec, MarketModel,
                                 PathPrefix, step_params)
from gamebarrier.payoffs import (MIN_TIME, PER_LEG, PayoffFamily,
                                 default_convention, dynkin_kernel,
                                 gated_discounted, intrinsic)

LN11 = math.log(1.1)


def model(**kw):
    base = dict(s0=100.0, r=0.0, mu=0.0, kappa=LN11, T=1.0)
    base.update(kw)
    return MarketModel(**base)


ALL_FAMILIES = [
    PayoffFamily.game_put(100.0, 2.0),
    PayoffFamily.game_call(100.0, 2.0),
    PayoffFamily.russian(120.0, 0.05),
    PayoffFamily.integral_put(120.0, 0.6, 0.2),
    PayoffFamily.integral_call(80.0, 0.6, 0.2),
]


class TestIntrinsic:
    def test_game_put(self):
        f, d, g = intrinsic(PayoffFamily.game_put(100.0, 2.0),
                            [100.0, 90.9091], [0.0, 1.0])
        assert f == pytest.approx(9.0909, abs=1e-4)
        assert d == 2.0
        assert g == pytest.approx(11.0909, abs=1e-4)

    def test_russian_floor_binds(self):
        f, d, g = intrinsic(PayoffFamily.russian(120.0, 0.05), [100.0], [0.0])
        assert f == 120.0
        assert d == pytest.approx(5.0)

    def test_integral_put_at_start(self):
        f, d, g = intrinsic(PayoffFamily.integral_put(50.0, 1.0, 0.5),
                            [100.0], [0.0])
        assert f == 50.0 and d == 0.0

    def test_integral_left_endpoint_rule(self):
        fam = PayoffFamily.integral_call(0.0, 2.0, 1.0)
        prices = [100.0, 110.0, 90.0]
        times = [0.0, 0.5, 1.0]
        f, d, g = intrinsic(fam, prices, times)
        assert f == pytest.approx(2.0 * (100.0 * 0.5 + 110.0 * 0.5))
        assert d == pytest.approx(1.0 * (100.0 * 0.5 + 110.0 * 0.5))

    def test_rejects_bad_paths(self):
        fam = PayoffFamily.game_put(100.0, 2.0)
        with pytest.raises(ValueError):
            intrinsic(fam, [], [])
        with pytest.raises(ValueError):
            intrinsic(fam, [100.0, -1.0], [0.0, 1.0])

    def test_family_validation(self):
        with pytest.raises(ValueError):
            PayoffFamily("butterfly")
        with pytest.raises(ValueError):
            PayoffFamily.game_put(100.0, -1.0)

    def test_markov_classes(self):
        assert PayoffFamily.game_put(1, 0).markov_class == "level"
        assert PayoffFamily.game_call(1, 0).markov_class == "level"
        assert PayoffFamily.russian(1, 0).markov_class == "level-max"
        assert PayoffFamily.integral_put(1, 0, 0).markov_class == "path"


class TestGatedDiscounted:
    def setup_method(self):
        self.m = model()
        self.sp = step_params(self.m, 1)
        self.fam = PayoffFamily.game_put(100.0, 2.0)
        self.down = PathPrefix((-1,))

    def test_knock_out_down_path(self):
        gp = gated_discounted(self.fam, self.m, self.sp, self.down,
                              BarrierSpec(95.0, math.inf, KNOCK_OUT))
        assert gp.tau == 1
        assert list(gp.y_tilde) == [0.0, 0.0]
        assert gp.x_tilde[0] == 2.0 and gp.x_tilde[1] == 0.0

    def test_knock_in_down_path(self):
        gp = gated_discounted(self.fam, self.m, self.sp, self.down,
                              BarrierSpec(95.0, math.inf, KNOCK_IN))
        assert gp.y_tilde[0] == 0.0
        assert gp.y_tilde[1] == pytest.approx(9.0909, abs=1e-4)
        assert gp.x_tilde[0] == 2.0
        assert gp.x_tilde[1] == pytest.approx(11.0909, abs=1e-4)

    def test_requires_full_path(self):
        with pytest.raises(ValueError):
            gated_discounted(self.fam, self.m, step_params(self.m, 2),
                             self.down, BarrierSpec.none())

    @pytest.mark.parametrize("fam", ALL_FAMILIES)
    def test_complementarity(self, fam):
        # knock-out Y plus knock-in Y is the ungated discounted buyer payoff
        m = model(r=0.03, kappa=0.25)
        n = 9
        sp = step_params(m, n)
        rng = np.random.default_rng(5)
        for _ in range(40):
            signs = tuple(rng.choice([-1, 1], size=n).tolist())
            lo = rng.uniform(60, 95)
            hi = rng.uniform(105, 160)
            out = gated_discounted(fam, m, sp, PathPrefix(signs),
                                   BarrierSpec(lo, hi, KNOCK_OUT))
            inn = gated_discounted(fam, m, sp, PathPrefix(signs),
                                   BarrierSpec(lo, hi, KNOCK_IN))
            ungated = out.disc * out.f
            np.testing.assert_allclose(out.y_tilde + inn.y_tilde, ungated,
                                       atol=1e-12)

    @pytest.mark.parametrize("fam", ALL_FAMILIES)
    def test_barrier_monotonicity(self, fam):
        m = model(r=0.01, kappa=0.3)
        n = 8
        sp = step_params(m, n)
        rng = np.random.default_rng(11)
        for _ in range(25):
            signs = tuple(rng.choice([-1, 1], size=n).tolist())
            narrow = (rng.uniform(80, 95), rng.uniform(105, 130))
            wide = (narrow[0] - rng.uniform(0, 15), narrow[1] + rng.uniform(0, 25))
            pn = gated_discounted(fam, m, sp, PathPrefix(signs),
                                  BarrierSpec(*narrow, KNOCK_OUT))
            pw = gated_discounted(fam, m, sp, PathPrefix(signs),
                                  BarrierSpec(*wide, KNOCK_OUT))
            assert (pw.y_tilde >= pn.y_tilde - 1e-15).all()
            assert (pw.x_tilde >= pn.x_tilde - 1e-15).all()
            qn = gated_discounted(fam, m, sp, PathPrefix(signs),
                                  BarrierSpec(*narrow, KNOCK_IN))
            qw = gated_discounted(fam, m, sp, PathPrefix(signs),
                                  BarrierSpec(*wide, KNOCK_IN))
            assert (qw.y_tilde <= qn.y_tilde + 1e-15).all()

    @pytest.mark.parametrize("fam", ALL_FAMILIES)
    def test_ordering(self, fam):
        m = model(r=0.02, kappa=0.2)
        n = 7
        sp = step_params(m, n)
        rng = np.random.default_rng(3)
        for _ in range(20):
            signs = tuple(rng.choice([-1, 1], size=n).tolist())
            gp = gated_discounted(fam, m, sp, PathPrefix(signs),
                                  BarrierSpec(85, 140, KNOCK_OUT))
            assert (gp.x_tilde >= gp.y_tilde - 1e-15).all()
            assert (gp.y_tilde >= 0.0).all()
            assert (gp.g >= gp.f).all() and (gp.f >= 0.0).all()


class TestDynkinKernel:
    def make(self, direction):
        m = model()
        sp = step_params(m, 3)
        fam = PayoffFamily.game_put(100.0, 2.0)
        return gated_discounted(fam, m, sp, PathPrefix((-1, -1, 1)),
                                BarrierSpec(93.0, 120.0, direction))

    def test_tie_pays_buyer(self):
        gp = self.make(KNOCK_OUT)
        for k in range(4):
            assert dynkin_kernel(gp, k, k) == gp.y_tilde[k]

    def test_knocked_out_per_leg_is_zero(self):
        gp = self.make(KNOCK_OUT)
        assert gp.tau is not None
        for s in range(gp.tau, 4):
            for k in range(gp.tau, 4):
                assert dynkin_kernel(gp, s, k, PER_LEG) == 0.0

    def test_conventions_agree_before_exit(self):
        gp = self.make(KNOCK_OUT)
        for s in range(gp.tau):
            for k in range(gp.tau):
                a = dynkin_kernel(gp, s, k, PER_LEG)
                b = dynkin_kernel(gp, s, k, MIN_TIME)
                assert a == pytest.approx(b, abs=1e-12)

    def test_min_time_seller_leg_ungated(self):
        gp = self.make(KNOCK_OUT)
        s = gp.tau  # seller cancels after the knock-out
        q = dynkin_kernel(gp, s, 3, MIN_TIME)
        assert q == pytest.approx(gp.disc[s] * gp.g[s])

    def test_default_conventions(self):
        assert default_convention(BarrierSpec(1, 2, KNOCK_OUT)) == PER_LEG
        assert default_convention(BarrierSpec(1, 2, KNOCK_IN)) == MIN_TIME

    def test_bounds_checked(self):
        gp = self.make(KNOCK_OUT)
        with pytest.raises(ValueError):
            dynkin_kernel(gp, 4, 0)


class TestLipschitz:
    """Empirical uniform-metric and time-shift bounds for each family."""

    N_PAIRS = 10_000

    @pytest.mark.parametrize("fam", ALL_FAMILIES)
    def test_space_bound(self, fam):
        rng = np.random.default_rng(17)
        steps = 16
        t = 1.25
        times = np.linspace(0.0, t, steps + 1)
        L = fam.lipschitz_bound
        v = 100.0 * np.exp(rng.normal(0, 0.25, size=(self.N_PAIRS, steps + 1)))
        w = v * np.exp(rng.normal(0, 0.10, size=v.shape))
        gap = np.abs(v - w).max(axis=1)
        for i in range(0, self.N_PAIRS, 997):
            fv, dv, _ = intrinsic(fam, v[i], times)
            fw, dw, _ = intrinsic(fam, w[i], times)
            assert abs(fv - fw) + abs(dv - dw) <= L * (t + 1.0) * gap[i] + 1e-9
        # dense check on the full sample via vectorized evaluation
        fv, dv = _eval_paths(fam, v, times)
        fw, dw = _eval_paths(fam, w, times)
        assert (np.abs(fv - fw) + np.abs(dv - dw)
                <= L * (t + 1.0) * gap + 1e-9).all()

    @pytest.mark.parametrize("fam", ALL_FAMILIES)
    def test_time_bound(self, fam):
        rng = np.random.default_rng(23)
        steps = 16
        L = fam.lipschitz_bound
        for _ in range(200):
            t = rng.uniform(0.5, 2.0)
            times = np.linspace(0.0, t, steps + 1)
            v = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.08, steps + 1)))
            i = rng.integers(0, steps)
            j = rng.integers(i + 1, steps + 1)
            fi, di, _ = intrinsic(fam, v[:i + 1], times[:i + 1])
            fj, dj, _ = intrinsic(fam, v[:j + 1], times[:j + 1])
            bound = L * ((times[j] - times[i]) * (1.0 + np.abs(v[:j + 1]).max())
                         + np.abs(v[i:j + 1] - v[i]).max())
            assert abs(fj - fi) + abs(dj - di) <= bound + 1e-9


def _eval_paths(fam, paths, times):
    """Vectorized (F, Delta) at the terminal date of many paths."""
    runmax = paths.max(axis=1)
    dts = np.diff(times)
    acc = (paths[:, :-1] * dts).sum(axis=1)
    f, d = fam.evaluate(paths[:, -1], runmax,
                        fam.f_coef * acc, fam.penalty_coef * acc)
    return f, d
