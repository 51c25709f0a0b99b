import logging
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from vaeood import visible as vis
from vaeood.visible import (
    CatCorrectionTable, VisibleParams, apply_correction, bernoulli_perfect_recon, build_cat_correction,
    categorical_log_pmf, cb_eta_star, cb_lambda_star, cb_log_norm, cb_log_pdf, cb_mean, cb_mean_eta,
    cb_perfect_recon,
)

mpmath.mp.dps = 40
LAMBDAS = [0.01, 0.1, 0.3, 0.5, 0.7, 0.99]


def mp_log_norm(lam):
    """High-precision log C(lambda) straight from the closed form."""
    lam = mpmath.mpf(lam)
    if lam == mpmath.mpf("0.5"):
        return mpmath.log(2)
    return mpmath.log(2 * mpmath.atanh(1 - 2 * lam) / (1 - 2 * lam))


def mp_mean_eta(eta):
    with mpmath.workdps(80):
        eta = mpmath.mpf(eta)
        return -1 / mpmath.expm1(-eta) - 1 / eta


def mp_perfect_log_pdf(x):
    """log p(x; lambda*) with lambda* found by high-precision root finding of mean(eta) = x."""
    x = min(max(x, vis.EPS_X), 1 - vis.EPS_X)
    if abs(x - 0.5) < 1e-15:
        return 0.0
    guess = -1 / x if x < 0.5 else 1 / (1 - x)
    guess = guess if abs(x - 0.5) > 0.05 else 12 * (x - 0.5)
    eta = mpmath.findroot(lambda e: mp_mean_eta(e) - x, guess)
    log_a = mpmath.log(mpmath.expm1(eta) / eta)
    return float(eta * x - log_a)


class TestLogNorm:
    def test_uniform_case(self):
        assert cb_log_norm(0.5) == pytest.approx(math.log(2), abs=1e-15)

    def test_lambda_09(self):
        expected = math.log(2 * math.atanh(-0.8) / -0.8)
        assert cb_log_norm(0.9) == pytest.approx(expected, abs=1e-12)
        assert cb_log_norm(0.9) == pytest.approx(1.01034, abs=1e-5)
        # quadrature of the unnormalised density inverts to the same constant
        z, _ = integrate.quad(lambda x: 0.9**x * 0.1 ** (1 - x), 0, 1, epsabs=1e-14)
        assert cb_log_norm(0.9) == pytest.approx(-math.log(z), abs=1e-10)

    @pytest.mark.parametrize("delta", [1e-6, -1e-6, 1e-9, 2e-4, -2e-4, 3e-4])
    def test_continuity_near_half(self, delta):
        assert cb_log_norm(0.5 + delta) == pytest.approx(float(mp_log_norm(0.5 + delta)), abs=1e-12)
        if abs(delta) <= 1e-6:
            assert abs(cb_log_norm(0.5 + delta) - cb_log_norm(0.5)) < 1e-9

    @given(st.floats(1e-6, 1 - 1e-6))
    def test_matches_high_precision(self, lam):
        assert cb_log_norm(lam) == pytest.approx(float(mp_log_norm(lam)), rel=1e-10, abs=1e-12)

    @pytest.mark.parametrize("lam", [0.0, 1.0, -0.1, 1.5])
    def test_domain(self, lam):
        with pytest.raises(ValueError):
            cb_log_norm(lam)


class TestLogPdf:
    @given(st.floats(0, 1))
    def test_uniform_density(self, x):
        assert cb_log_pdf(x, 0.5) == pytest.approx(0.0, abs=1e-15)

    def test_x1_lambda09(self):
        assert cb_log_pdf(1.0, 0.9) == pytest.approx(1.0103385 + math.log(0.9), abs=1e-6)
        assert cb_log_pdf(1.0, 0.9) == pytest.approx(0.90498, abs=1e-5)

    @pytest.mark.parametrize("lam", LAMBDAS)
    def test_normalizes(self, lam):
        total, _ = integrate.quad(lambda x: math.exp(cb_log_pdf(x, lam)), 0, 1, epsabs=1e-13, epsrel=1e-12)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_x_domain(self):
        with pytest.raises(ValueError):
            cb_log_pdf(1.2, 0.3)


class TestMean:
    def test_half(self):
        assert cb_mean(0.5) == 0.5

    @pytest.mark.parametrize("lam", LAMBDAS + [0.9, 0.4999, 0.50001])
    def test_quadrature(self, lam):
        m, _ = integrate.quad(lambda x: x * math.exp(cb_log_pdf(x, lam)), 0, 1, epsabs=1e-14, epsrel=1e-13)
        assert cb_mean(lam) == pytest.approx(m, abs=1e-8)

    def test_strictly_increasing(self):
        lam = np.linspace(1e-4, 1 - 1e-4, 10**4)
        assert np.all(np.diff(cb_mean(lam)) > 0)

    @given(st.floats(-500, 500).filter(lambda e: abs(e) > 1e-20))
    def test_eta_form_high_precision(self, eta):
        assert cb_mean_eta(eta) == pytest.approx(float(mp_mean_eta(eta)), rel=1e-12, abs=1e-15)

    def test_no_overflow_warnings(self):
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            cb_mean_eta(np.array([-1e5, -50.0, -1e-12, 0.0, 1e-12, 50.0, 1e5]))
            vis.cb_log_partition(np.array([-1e5, -1e-5, 0.0, 1e-5, 1e5]))


class TestLambdaStar:
    def test_half(self):
        assert cb_lambda_star(0.5) == pytest.approx(0.5, abs=1e-15)

    def test_mle_condition_grid(self):
        x = np.linspace(vis.EPS_X, 1 - vis.EPS_X, 1024)
        np.testing.assert_allclose(cb_mean_eta(cb_eta_star(x)), x, atol=1e-9, rtol=0)

    def test_beats_grid_search(self):
        lam_grid = np.linspace(1e-4, 1 - 1e-4, 10**4)
        for x in np.linspace(0.0, 1.0, 41):
            xc = np.clip(x, vis.EPS_X, 1 - vis.EPS_X)
            best_grid = np.max(cb_log_pdf(xc, lam_grid))
            star = vis.cb_log_pdf_eta(xc, cb_eta_star(xc))
            assert star >= best_grid - 1e-12

    def test_x09(self):
        lam = cb_lambda_star(0.9)
        assert cb_mean(lam) == pytest.approx(0.9, abs=1e-9)
        lam_grid = np.linspace(1e-4, 1 - 1e-4, 10**4)
        assert cb_log_pdf(0.9, lam) >= np.max(cb_log_pdf(0.9, lam_grid)) - 1e-12

    def test_near_zero_is_large_positive(self):
        eta = cb_eta_star(0.0)
        assert eta < -1000
        assert vis.cb_log_pdf_eta(vis.EPS_X, eta) > 8.0

    @given(st.floats(0, 1))
    def test_symmetry(self, x):
        assert cb_eta_star(x) == pytest.approx(-cb_eta_star(1 - x), rel=1e-9, abs=1e-9)


class TestBernoulliPerfectRecon:
    def test_zeros(self):
        assert bernoulli_perfect_recon(np.zeros((32, 32, 1))) == 0.0

    def test_half(self):
        assert bernoulli_perfect_recon(np.full((32, 32, 1), 0.5)) == pytest.approx(-1024 * math.log(2), rel=1e-12)

    def test_loop_reference(self, rng):
        x = rng.uniform(size=(4, 4, 1))
        ref = 0.0
        for v in x.ravel():
            ref += v * math.log(v) + (1 - v) * math.log(1 - v)
        assert bernoulli_perfect_recon(x) == pytest.approx(ref, abs=1e-10)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=32))
    def test_non_positive_zero_iff_binary(self, values):
        x = np.array(values).reshape(1, -1, 1)
        val = bernoulli_perfect_recon(x)
        assert val <= 0.0
        binary = all(v in (0.0, 1.0) for v in values)
        # tiny non-binary values round x log x to -0 only below ~1e-300
        if binary:
            assert val == 0.0
        elif all(1e-12 < v < 1 - 1e-12 for v in values):
            assert val < 0.0


class TestCbPerfectRecon:
    def test_half(self):
        assert cb_perfect_recon(np.full((32, 32, 1), 0.5)) == 0.0

    def test_u_shape(self):
        levels = np.linspace(0, 1, 256)
        curve = np.array([cb_perfect_recon(np.full((32, 32, 1), v)) for v in levels])
        assert np.argmin(curve) in (127, 128)
        assert curve[0] == curve.max() or curve[-1] == curve.max()
        assert curve[0] - curve.min() > 5 and curve[-1] - curve.min() > 5
        assert np.all(np.diff(curve[:127]) < 0) and np.all(np.diff(curve[129:]) > 0)

    def test_byte_levels_match_high_precision_solve(self):
        levels = np.arange(256) / 255.0
        oracle = np.array([mp_perfect_log_pdf(v) for v in levels])
        got = np.array([cb_perfect_recon(np.full((1, 1, 1), v)) for v in levels])
        np.testing.assert_allclose(got, oracle, atol=1e-9, rtol=0)

    def test_matches_per_pixel_solve_bitwise(self, rng):
        x = (rng.integers(0, 256, size=(5, 32, 32, 3)) / 255.0).astype(np.float32)
        per_pixel = vis._perfect_log_pdf(x).reshape(5, -1).sum(axis=1)
        assert cb_perfect_recon(x).tobytes() == per_pixel.tobytes()

    def test_continuous_input(self, rng):
        x = rng.uniform(size=(2, 8, 8, 1))
        expected = [sum(mp_perfect_log_pdf(v) for v in img.ravel()) for img in x]
        np.testing.assert_allclose(cb_perfect_recon(x), expected, atol=1e-8)

    def test_batch_shape(self):
        assert np.shape(cb_perfect_recon(np.zeros((3, 32, 32, 1)))) == (3,)


class TestCategorical:
    def test_uniform(self):
        assert categorical_log_pmf(17, np.zeros(256)) == pytest.approx(-5.545177, abs=1e-6)
        assert categorical_log_pmf(17, np.zeros(256)) == pytest.approx(math.log(1 / 256), abs=1e-14)

    def test_saturation(self):
        logits = np.zeros(256)
        logits[200] = 50.0
        assert categorical_log_pmf(200, logits) == pytest.approx(0.0, abs=1e-15)

    def test_normalizes(self, rng):
        for _ in range(20):
            logits = rng.normal(scale=10, size=256)
            total = sum(math.exp(categorical_log_pmf(v, logits)) for v in range(256))
            assert total == pytest.approx(1.0, abs=1e-8)

    def test_bad_byte(self):
        with pytest.raises(ValueError):
            categorical_log_pmf(256, np.zeros(256))


def _numeric_logit_grad(kind, x, logits, h=1e-6):
    g = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += h
        lm[idx] -= h
        g[idx] = (vis.pixel_log_lik(kind, x, lp)[0].sum() - vis.pixel_log_lik(kind, x, lm)[0].sum()) / (2 * h)
    return g


class TestPixelLikelihoods:
    @pytest.mark.parametrize("kind", ["bernoulli", "cb"])
    def test_gradient(self, rng, kind):
        x = rng.uniform(size=(1, 2, 3, 1))
        logits = rng.normal(scale=3, size=x.shape)
        logits[0, 0, 0, 0] = 1e-5  # series branch
        _, grad = vis.pixel_log_lik(kind, x, logits)
        np.testing.assert_allclose(grad, _numeric_logit_grad(kind, x, logits), rtol=1e-5, atol=1e-7)

    def test_categorical_gradient(self, rng):
        x = rng.integers(0, 256, size=(1, 1, 2, 1)) / 255.0
        logits = rng.normal(size=(1, 1, 2, 1, 256))
        _, grad = vis.pixel_log_lik("categorical", x, logits)
        np.testing.assert_allclose(grad, _numeric_logit_grad("categorical", x, logits), rtol=1e-5, atol=1e-8)

    def test_cb_matches_lambda_form(self, rng):
        x = rng.uniform(size=(2, 4, 4, 1))
        logits = rng.normal(size=x.shape)
        ll, _ = vis.cb_log_lik(x, logits)
        np.testing.assert_allclose(ll, cb_log_pdf(x, 1 / (1 + np.exp(-logits))), atol=1e-10)

    def test_cb_lambda_within_clamp(self, rng):
        params = VisibleParams("cb", rng.normal(scale=100, size=(2, 4, 4, 1)))
        assert params.lam.min() >= vis.EPS_LAMBDA * (1 - 1e-9)
        assert params.lam.max() <= 1 - vis.EPS_LAMBDA * (1 - 1e-9)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown visible"):
            vis.pixel_log_lik("gauss", np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)))


class _StubCategorical:
    """Decoder that gives each pixel's own byte a prescribed probability, the rest shared uniformly."""

    def __init__(self, images, p_true):
        self.images, self.p_true = images, p_true

    def encode(self, x):
        idx = np.array([self._index(img) for img in x], dtype=np.float64)
        return idx[:, None], np.zeros((len(x), 1))

    def _index(self, img):
        return next(i for i, ref in enumerate(self.images) if np.array_equal(ref, img))

    def decode(self, z):
        out = []
        for i in z[:, 0].astype(int):
            v = vis.to_bytes(self.images[i])
            p = np.broadcast_to(((1 - self.p_true[i]) / 255.0)[..., None], v.shape + (256,)).copy()
            np.put_along_axis(p, v[..., None], self.p_true[i][..., None], axis=-1)
            out.append(np.log(p))
        return VisibleParams("categorical", np.stack(out))


class TestCatCorrection:
    def test_uniform_decoder(self, rng):
        images = rng.integers(0, 256, size=(3, 4, 4, 1)) / 255.0

        class Uniform:
            def encode(self, x):
                return np.zeros((len(x), 2)), np.zeros((len(x), 2))

            def decode(self, z):
                return VisibleParams("categorical", np.zeros((len(z), 4, 4, 1, 256)))

        table = build_cat_correction(Uniform(), images)
        seen = table.observed
        np.testing.assert_allclose(table.table[seen], math.log(1 / 256), atol=1e-14)

    def test_two_sample_hand_computation(self):
        a = np.array([0, 0, 255, 10]) / 255.0
        b = np.array([0, 255, 255, 255]) / 255.0
        images = np.stack([a, b]).reshape(2, 1, 4, 1)
        p_true = np.array([[0.5, 0.3, 0.9, 0.2], [0.1, 0.6, 0.4, 0.8]]).reshape(2, 1, 4, 1)
        table = build_cat_correction(_StubCategorical(images, p_true), images)
        # per-sample means: A {0: 0.4, 255: 0.9, 10: 0.2}, B {0: 0.1, 255: 0.6}
        assert table.table[0, 0] == pytest.approx(math.log(0.25), abs=1e-12)
        assert table.table[255, 0] == pytest.approx(math.log(0.75), abs=1e-12)
        assert table.table[10, 0] == pytest.approx(math.log(0.2), abs=1e-12)
        assert table.observed.sum() == 3
        assert table.table[1, 0] == pytest.approx(math.log(1 / 256))
        # correction of sample A sums C over its pixels
        assert table.correction(images[0]) == pytest.approx(2 * math.log(0.25) + math.log(0.75) + math.log(0.2))

    def test_deterministic(self):
        images = np.stack([np.array([0, 9, 9, 200]) / 255.0] * 2).reshape(2, 1, 4, 1)
        images[1, 0, 0, 0] = 1.0
        p_true = np.full((2, 1, 4, 1), 0.3)
        t1 = build_cat_correction(_StubCategorical(images, p_true), images)
        t2 = build_cat_correction(_StubCategorical(images, p_true), images)
        assert t1.table.tobytes() == t2.table.tobytes()

    def test_unobserved_warning(self, caplog):
        images = np.zeros((1, 1, 2, 1))
        with caplog.at_level(logging.WARNING):
            table = build_cat_correction(_StubCategorical(images, np.full((1, 1, 2, 1), 0.5)), images)
        assert "255 (value, channel) cells unobserved" in caplog.text
        assert table.table[0, 0] == pytest.approx(math.log(0.5))

    def test_roundtrip(self, tmp_path, rng):
        table = CatCorrectionTable(rng.normal(size=(256, 3)))
        table.save(tmp_path / "t.bin")
        loaded = CatCorrectionTable.load(tmp_path / "t.bin")
        assert loaded.table.tobytes() == table.table.tobytes()
        table.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "value,channel,log_correction" and len(lines) == 1 + 768

    def test_load_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"NOTTABLE" + b"\0" * 20)
        with pytest.raises(ValueError, match="bad magic"):
            CatCorrectionTable.load(tmp_path / "bad.bin")

    def test_requires_categorical(self):
        class Cb:
            def encode(self, x):
                return np.zeros((len(x), 1)), np.zeros((len(x), 1))

            def decode(self, z):
                return VisibleParams("cb", np.zeros((len(z), 1, 1, 1)))

        with pytest.raises(ValueError, match="categorical"):
            build_cat_correction(Cb(), np.zeros((1, 1, 1, 1)))


class TestApplyCorrection:
    def test_half_image_unchanged(self):
        x = np.full((32, 32, 1), 0.5)
        assert apply_correction(-12.5, x, "cb") == -12.5

    def test_model_free(self, rng):
        x = rng.integers(0, 256, size=(32, 32, 1)) / 255.0
        assert apply_correction(-3.0, x, "cb") - (-3.0) == apply_correction(-7.0, x, "cb") - (-7.0)

    @pytest.mark.parametrize("method,recon", [("cb", cb_perfect_recon), ("bernoulli", bernoulli_perfect_recon)])
    def test_exact_flattening(self, method, recon):
        for v in np.linspace(0, 1, 256):
            x = np.full((32, 32, 1), v)
            assert apply_correction(recon(x), x, method) == 0.0

    def test_categorical_needs_table(self):
        with pytest.raises(ValueError, match="table"):
            apply_correction(0.0, np.zeros((2, 2, 1)), "categorical")
