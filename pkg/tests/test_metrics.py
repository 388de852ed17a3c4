import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import trapezoid

from nicrb import autodiff as ad
from nicrb import metrics as met
from nicrb.codecs import IdentityCodec
from nicrb.color import lab_to_rgb, rgb_to_lab

from ciede2000_pairs import SHARMA_PAIRS


def rand_img(seed, size=32, c=3):
    return np.random.default_rng(seed).uniform(0, 1, (c, size, size))


# ------------------------------------------------------------------ PSNR / MSE


def test_psnr_uniform_offset_closed_form():
    x = np.random.default_rng(0).uniform(0, 254 / 255, (3, 16, 16))
    value = met.psnr(x, x + 1 / 255)
    assert abs(value - 48.13) <= 0.01
    assert value == pytest.approx(20 * math.log10(255), abs=1e-9)


def test_psnr_cap_and_shape_error():
    x = rand_img(1)
    assert met.psnr(x, x) == met.PSNR_CAP
    with pytest.raises(ad.ShapeError):
        met.psnr(x, x[:, :8])


def test_batched_metrics_are_per_image():
    x = np.stack([rand_img(2), rand_img(3)])
    y = np.clip(x + 0.01, 0, 1)
    assert met.mse(x, y).shape == (2,)
    assert np.allclose(met.psnr(x, y), [met.psnr(x[0], y[0]), met.psnr(x[1], y[1])])


@settings(max_examples=50, deadline=None)
@given(a=arrays(np.float64, (3, 4, 4), elements=st.floats(0, 1)),
       b=arrays(np.float64, (3, 4, 4), elements=st.floats(0, 1)))
def test_mse_symmetric(a, b):
    assert met.mse(a, b) == met.mse(b, a)


@settings(max_examples=50, deadline=None)
@given(m1=st.floats(1e-9, 1.0), m2=st.floats(1e-9, 1.0))
def test_psnr_strictly_decreasing_in_mse(m1, m2):
    x = np.zeros((1, 1, 1))
    p1, p2 = met.psnr(x, x + math.sqrt(m1)), met.psnr(x, x + math.sqrt(m2))
    if m1 < m2 * (1 - 1e-9):
        assert p1 > p2


# ------------------------------------------------------------------ MS-SSIM


def _oracle_ssim_maps(x, y, win, sigma):
    """Brute-force per-window statistics with an explicit 2-D Gaussian window."""
    r = np.arange(win) - (win - 1) / 2
    g1 = np.exp(-r ** 2 / (2 * sigma ** 2))
    g = np.outer(g1, g1)
    g /= g.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ch, h, w = x.shape
    lum_cs = np.zeros((ch, h - win + 1, w - win + 1))
    cs = np.zeros_like(lum_cs)
    for c in range(ch):
        for i in range(h - win + 1):
            for j in range(w - win + 1):
                px, py = x[c, i:i + win, j:j + win], y[c, i:i + win, j:j + win]
                mx, my = np.sum(g * px), np.sum(g * py)
                vx = np.sum(g * (px - mx) ** 2)
                vy = np.sum(g * (py - my) ** 2)
                cov = np.sum(g * (px - mx) * (py - my))
                s = (2 * cov + c2) / (vx + vy + c2)
                lum_cs[c, i, j] = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1) * s
                cs[c, i, j] = s
    return lum_cs.mean(axis=(1, 2)), cs.mean(axis=(1, 2))


def _oracle_ms_ssim(x, y, win=11, sigma=1.5):
    weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]
    scales = 0
    while scales < 5 and min(x.shape[1:]) // 2 ** scales >= win:
        scales += 1
    weights = np.array(weights[:scales]) / sum(weights[:scales])
    prod = np.ones(x.shape[0])
    for j in range(scales):
        ssim_c, cs_c = _oracle_ssim_maps(x, y, win, sigma)
        term = ssim_c if j == scales - 1 else cs_c
        prod *= np.maximum(term, 1e-10) ** weights[j]
        h, w = x.shape[1] // 2 * 2, x.shape[2] // 2 * 2
        x = x[:, :h, :w].reshape(x.shape[0], h // 2, 2, w // 2, 2).mean(axis=(2, 4))
        y = y[:, :h, :w].reshape(y.shape[0], h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return float(prod.mean())


@pytest.mark.parametrize("seed", range(5))
def test_ms_ssim_matches_bruteforce_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.uniform(0, 1, (3, 48, 48))
    y = np.clip(x + rng.normal(0, 0.05 + 0.05 * seed, x.shape), 0, 1)
    assert abs(met.ms_ssim(x, y) - _oracle_ms_ssim(x, y)) < 1e-6


def test_ms_ssim_identity_ordering_and_range():
    x = rand_img(4, 48)
    noisy = np.clip(x + np.random.default_rng(5).normal(0, 0.1, x.shape), 0, 1)
    assert met.ms_ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= met.ms_ssim(x, noisy) < 1.0


def test_ms_ssim_flip_invariant():
    x = rand_img(6, 48)
    y = np.clip(x + np.random.default_rng(7).normal(0, 0.05, x.shape), 0, 1)
    assert met.ms_ssim(x[:, :, ::-1], y[:, :, ::-1]) == pytest.approx(met.ms_ssim(x, y), abs=1e-12)


def test_ms_ssim_too_small_errors():
    x = rand_img(8, 8)
    with pytest.raises(ad.ShapeError):
        met.ms_ssim(x, x)
    assert met.ms_ssim_t(x[None], x[None], win=7).data[0] == pytest.approx(1.0)


def test_ssim_matches_skimage():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(9)
    x = rng.uniform(0, 1, (3, 40, 40))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    ref = skm.structural_similarity(x, y, channel_axis=0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0)
    assert met.ssim(x, y) == pytest.approx(ref, abs=1e-12)


# ------------------------------------------------------------------ CIEDE2000


def test_ciede2000_published_pairs():
    got = met.ciede2000(SHARMA_PAIRS[:, :3], SHARMA_PAIRS[:, 3:6])
    assert np.max(np.abs(got - SHARMA_PAIRS[:, 6])) < 1e-3


def test_ciede2000_symmetric():
    a, b = SHARMA_PAIRS[:, :3], SHARMA_PAIRS[:, 3:6]
    assert np.allclose(met.ciede2000(a, b), met.ciede2000(b, a), atol=1e-12)


lab = st.tuples(st.floats(0, 100), st.floats(-100, 100), st.floats(-100, 100))


@settings(max_examples=100, deadline=None)
@given(p=lab, q=lab)
def test_ciede2000_zero_iff_equal(p, q):
    p, q = np.array(p), np.array(q)
    assert met.ciede2000(p, p) == 0.0
    if not np.allclose(p, q, atol=1e-3):
        assert met.ciede2000(p, q) > 0


def test_color_artifact_constant_image_equals_pair_value():
    lab1 = np.array([50.0, 2.6772, -79.7751])
    lab2 = np.array([50.0, 0.0, -82.7485])
    img1 = lab_to_rgb(np.broadcast_to(lab1[:, None, None], (3, 16, 16)), clip=False)
    img2 = lab_to_rgb(np.broadcast_to(lab2[:, None, None], (3, 16, 16)), clip=False)
    assert np.allclose(rgb_to_lab(img1)[:, 0, 0], lab1, atol=1e-9)
    assert met.color_artifact(img1, img2) == pytest.approx(2.0425, abs=1e-3)
    assert met.color_artifact(img1, img1) == 0.0


def test_hue_rotation_scores_above_noise_of_equal_mse():
    rng = np.random.default_rng(11)
    x = np.clip(rng.uniform(0.2, 0.8, (3, 1, 1)) + rng.normal(0, 0.02, (3, 32, 32)), 0, 1)
    hue = x[[1, 2, 0]]
    err = np.sqrt(met.mse(x, hue))
    noise = np.clip(x + rng.choice([-1.0, 1.0], x.shape) * err, 0, 1)
    scale = np.sqrt(met.mse(x, hue) / met.mse(x, noise))
    noise = x + (noise - x) * scale
    assert met.mse(x, noise) == pytest.approx(met.mse(x, hue), rel=1e-9)
    assert met.color_artifact(x, hue) > met.color_artifact(x, noise)


# ------------------------------------------------------------------ texture


def test_texture_artifact_reference_points():
    from scipy.ndimage import gaussian_filter
    from nicrb.imageio import synthetic_image

    x = synthetic_image(np.random.default_rng(12), 128)
    base = met.blockdct(x, 75.0)
    assert met.texture_artifact(x, base, quality=75.0) == 0.0
    assert met.texture_artifact(x, x) <= 0.0
    blurred = gaussian_filter(x, sigma=(0, 3, 3))
    assert met.texture_artifact(x, blurred) > 0.0
    assert -1 <= met.texture_artifact(x, blurred) <= 1


def test_texture_small_image_single_tile():
    x = rand_img(13, 32)
    assert np.isfinite(met.texture_artifact(x, x))


def test_match_quality_tracks_target_rate():
    x = rand_img(14, 32)
    q = met.match_quality(x, met.blockdct_bpp(x, 40.0))
    assert abs(met.blockdct_bpp(x, q) - met.blockdct_bpp(x, 40.0)) < 0.2


# ------------------------------------------------------------------ Δ-scores


class Blur:
    def __call__(self, x):
        from scipy.ndimage import gaussian_filter
        return gaussian_filter(np.asarray(x), sigma=(0, 1, 1))


@pytest.mark.parametrize("metric", sorted(met.METRICS))
def test_delta_zero_for_identical_input(metric):
    x = rand_img(15)
    if metric == "ms-ssim":
        x = rand_img(15, 48)
    for codec in (Blur(), IdentityCodec()):
        assert met.delta_score(metric, codec, x, x).value == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_identity_codec_delta_psnr_zero(seed):
    x = rand_img(seed, 8)
    xa = np.clip(x + np.random.default_rng(seed + 1).uniform(-0.1, 0.1, x.shape), 0, 1)
    assert met.delta_score("psnr", IdentityCodec(), x, xa).value == 0.0


def test_transfer_score_identities():
    x = rand_img(16)
    xa = np.clip(x + 0.05, 0, 1)
    blur = Blur()
    assert met.transfer_score("psnr", blur, blur, x, xa) == 0.0
    assert met.transfer_score("psnr", blur, IdentityCodec(), x, x) == 0.0


def test_transfer_matrix_zero_diagonal():
    x = rand_img(17)
    xa = np.clip(x + 0.03, 0, 1)
    codecs = {"blur": Blur(), "id": IdentityCodec()}
    names, mat = met.transfer_matrix("psnr", codecs, {"blur": [(x, xa)], "id": [(x, xa)]})
    assert names == ["blur", "id"]
    assert np.all(np.diag(mat) == 0)
    assert mat[0, 1] == pytest.approx(met.transfer_score("psnr", codecs["blur"], codecs["id"], x, xa))


def test_unknown_metric():
    with pytest.raises(ValueError):
        met.get_metric("vmaf")


def test_external_scorer(tmp_path):
    import sys
    script = tmp_path / "score.py"
    script.write_text("import sys\nprint('score', 0.5)\n")
    scorer = met.ExternalScorer([sys.executable, str(script)])
    x = rand_img(18, 8)
    assert met.get_metric(scorer)(x, x) == 0.5
    with pytest.raises(RuntimeError):
        met.ExternalScorer([str(tmp_path / "missing")])(x, x)


# ------------------------------------------------------------------ BSQ-rate


def curve(pairs):
    return [met.RDPoint(b, q) for b, q in pairs]


REF = curve([(0.2, 24.0), (0.4, 27.0), (0.8, 30.0), (1.6, 33.0)])


def test_bsq_rate_identity_half_and_shuffle():
    assert met.bsq_rate(REF, REF) == pytest.approx(1.0, abs=1e-12)
    half = [met.RDPoint(p.bpp / 2, p.quality) for p in REF]
    assert met.bsq_rate(REF, half) == pytest.approx(0.5, abs=1e-12)
    shuffled = [REF[i] for i in (2, 0, 3, 1)]
    assert met.bsq_rate(shuffled, half) == met.bsq_rate(REF, half)


def test_bsq_rate_errors():
    with pytest.raises(ValueError):
        met.bsq_rate(REF, curve([(0.1, 40.0), (0.2, 41.0)]))
    with pytest.raises(ValueError):
        met.bsq_rate(REF[:1], REF)
    with pytest.raises(ValueError):
        met.RDPoint(0.0, 30.0)


def test_bsq_rate_against_numeric_integral():
    cand = curve([(0.3, 25.0), (0.5, 28.0), (1.2, 32.0)])
    lo, hi = 25.0, 32.0
    qs = np.linspace(lo, hi, 200001)
    qr, rr = np.array([p.quality for p in REF]), np.log([p.bpp for p in REF])
    qc, rc = np.array([p.quality for p in cand]), np.log([p.bpp for p in cand])
    ratio = np.exp(np.interp(qs, qc, rc) - np.interp(qs, qr, rr))
    expected = trapezoid(ratio, qs) / (hi - lo)
    assert met.bsq_rate(REF, cand) == pytest.approx(expected, rel=1e-8)


@settings(max_examples=50, deadline=None)
@given(rates=st.lists(st.floats(0.01, 4.0), min_size=2, max_size=6, unique=True),
       q0=st.floats(10, 40))
def test_bsq_rate_self_is_one(rates, q0):
    pts = [met.RDPoint(r, q0 + 3 * i) for i, r in enumerate(sorted(rates))]
    assert met.bsq_rate(pts, pts) == pytest.approx(1.0, abs=1e-12)


# ------------------------------------------------------------------ correlation


def _records(n=30, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        m0, m1 = rng.uniform(1e-4, 1e-2, 2)
        color = rng.uniform(0.1, 5)
        out.append({"delta_psnr": 10 * np.log10(m1 / m0), "delta_mse": m0 - m1,
                    "delta_ms_ssim": rng.normal(), "color_score": color,
                    "texture_score": rng.uniform(-0.1, 0.1)})
    return out


def test_correlation_report_signs_and_diagonal():
    fields, mat = met.correlation_report(_records())
    assert np.allclose(np.diag(mat), 1.0)
    i, j = fields.index("delta_mse"), fields.index("delta_psnr")
    assert mat[i, j] < 0
    assert np.allclose(mat, mat.T)
    _, sp = met.correlation_report(_records(), method="spearman")
    assert sp[i, j] < 0


def test_correlation_constant_column_is_nan_and_filter():
    recs = _records()
    for r in recs:
        r["texture_score"] = 0.0
    fields, mat = met.correlation_report(recs)
    k = fields.index("texture_score")
    assert np.all(np.isnan(mat[k]))
    for r in recs[:25]:
        r["color_score"] = 0.0
    with pytest.raises(ValueError):
        met.correlation_report(recs)
    with pytest.raises(ValueError):
        met.correlation_report(_records(), method="kendall")
