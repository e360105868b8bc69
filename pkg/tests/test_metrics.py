import math
import statistics
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from uunet.metrics import PSNR_CAP, ema, evaluate_images, mse, psnr, psnr_from_mse, ssim, stability

STABILITY_ALTERNATING_GOLDEN = 0.7500012853201052  # [0, 1] * 10, smoothing 0.6, frozen from first run


def sk_ssim(a, b):
    return structural_similarity(
        a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, channel_axis=0
    )


def test_mse_extremes():
    a = np.zeros((3, 8, 8))
    assert mse(a, a) == 0.0
    assert mse(a, np.ones_like(a)) == 1.0
    with pytest.raises(ValueError):
        mse(a, np.zeros((3, 8, 7)))


def test_psnr_closed_form_and_cap():
    assert psnr_from_mse(0.01) == pytest.approx(20.0, abs=1e-12)
    a = np.random.default_rng(0).random((3, 8, 8))
    assert psnr(a, a) == PSNR_CAP == 100.0
    assert psnr_from_mse(1e-11) == 100.0


def test_psnr_halving_adds_log2_db():
    for m in (0.5, 0.1, 1e-3, 1e-6):
        assert psnr_from_mse(m / 2) - psnr_from_mse(m) == pytest.approx(10 * math.log10(2), abs=1e-6)
    assert 10 * math.log10(2) == pytest.approx(3.0103, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-9, 1.0), st.floats(1.01, 100))
def test_psnr_strictly_decreasing(m, factor):
    assert psnr_from_mse(m * factor) < psnr_from_mse(m)


def test_ssim_identity_and_symmetry(rng):
    a, b = rng.random((3, 32, 32)), rng.random((3, 32, 32))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_constant_images_closed_form():
    c1 = (0.01 * 1.0) ** 2
    expected = c1 / (1 + c1)
    assert ssim(np.zeros((1, 16, 16)), np.ones((1, 16, 16))) == pytest.approx(expected, abs=1e-9)


def test_ssim_matches_skimage_on_random_cases(rng):
    for _ in range(20):
        a = rng.random((3, 24, 24))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.5), a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(sk_ssim(a, b), abs=1e-6)


def test_ssim_small_image_warns():
    a = np.random.default_rng(0).random((1, 8, 8))
    with pytest.warns(UserWarning, match="smaller than"):
        v = ssim(a, a)
    assert v == pytest.approx(1.0)


def test_ema_recurrence():
    s = ema([1.0, 0.0, 0.0], 0.6)
    assert list(s) == pytest.approx([1.0, 0.6, 0.36])


def _stability_oracle(curve, smoothing):
    s = [curve[0]]
    for x in curve[1:]:
        s.append(smoothing * s[-1] + (1 - smoothing) * x)
    resid = [x - y for x, y in zip(curve, s)]
    return statistics.pstdev(resid) / statistics.fmean(abs(x) for x in curve)


def test_stability_constant_is_zero():
    assert stability([3.2] * 50).value == 0.0
    assert stability([0.0] * 5).value == 0.0


def test_stability_ema_fixed_point_is_zero():
    # x equal to its own EMA with s_0 = x_0 forces x_t = x_0 for every t
    curve = [0.37] * 30
    assert np.array_equal(ema(curve, 0.6), curve)
    assert stability(curve).value == 0.0


def test_stability_alternating_golden():
    curve = [0.0, 1.0] * 10
    assert stability(curve, 0.6).value == pytest.approx(STABILITY_ALTERNATING_GOLDEN, rel=1e-12)
    assert stability(curve, 0.6).value == pytest.approx(_stability_oracle(curve, 0.6), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-100, 100), min_size=2, max_size=40).filter(lambda c: any(abs(x) > 1e-3 for x in c)),
    st.floats(1e-3, 1e3),
)
def test_stability_scale_invariant(curve, k):
    assert stability([k * x for x in curve]).value == pytest.approx(stability(curve).value, rel=1e-6, abs=1e-9)


def test_stability_validation():
    with pytest.raises(ValueError):
        stability([1.0])
    with pytest.raises(ValueError):
        stability([1.0, 2.0], smoothing=1.0)


def test_evaluate_images_aggregates(rng):
    outs, tgts = rng.random((4, 3, 16, 16)), rng.random((4, 3, 16, 16))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = evaluate_images(outs, tgts)
        assert report.psnr == pytest.approx(np.mean([psnr(o, t) for o, t in zip(outs, tgts)]))
        assert report.ssim == pytest.approx(np.mean([ssim(o, t) for o, t in zip(outs, tgts)]))
    assert report.mse == pytest.approx(float(np.mean((outs - tgts) ** 2)))
    assert report.n_images == 4
    with pytest.raises(ValueError):
        evaluate_images(outs[0], tgts[0])
