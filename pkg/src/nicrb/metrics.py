"""Full-reference quality metrics, robustness scores and artifact detectors."""

from __future__ import annotations

import math
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import fft, stats

from . import autodiff as ad
from .color import rgb_to_lab, rgb_to_ycbcr, ycbcr_to_rgb

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_K1, SSIM_K2 = 0.01, 0.03
PSNR_CAP = 100.0
MSE_FLOOR = 1e-10


@dataclass(frozen=True)
class FRMetric:
    id: str
    higher_is_better: bool
    fn: Callable[[np.ndarray, np.ndarray], float]

    def __call__(self, x, y) -> float:
        return self.fn(x, y)


def _pairs(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ad.ShapeError("metric", x.shape, y.shape)
    return x, y


def mse(x, y):
    """Mean squared error; per-image array for 4-D batches."""
    x, y = _pairs(x, y)
    if x.ndim == 4:
        return ((x - y) ** 2).mean(axis=(1, 2, 3))
    return float(((x - y) ** 2).mean())


def psnr(x, y):
    """PSNR in dB for a peak of 1, capped at 100 dB."""
    m = np.asarray(mse(x, y))
    out = np.where(m < MSE_FLOOR, PSNR_CAP, 10 * np.log10(1.0 / np.maximum(m, MSE_FLOOR)))
    return float(out) if out.ndim == 0 else out


def linf(x, y):
    x, y = _pairs(x, y)
    return float(np.abs(x - y).max())


def _num_scales(h: int, w: int, win: int, max_scales: int = 5) -> int:
    n = 0
    while n < max_scales and min(h, w) // (2 ** n) >= win:
        n += 1
    return n


def _ssim_terms(x, y, win, sigma):
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    blur = lambda t: ad.gaussian_blur(t, win, sigma)  # noqa: E731
    mx, my = blur(x), blur(y)
    mx2, my2, mxy = mx * mx, my * my, mx * my
    sxx = blur(x * x) - mx2
    syy = blur(y * y) - my2
    sxy = blur(x * y) - mxy
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    lum = (2.0 * mxy + c1) / (mx2 + my2 + c1)
    # per-image, per-channel spatial means
    return ad.mean(lum * cs, axis=(2, 3)), ad.mean(cs, axis=(2, 3))


def ms_ssim_t(x, y, win: int = 11, sigma: float = 1.5, max_scales: int = 5) -> ad.Tensor:
    """Differentiable MS-SSIM for NCHW tensors; returns one value per image.

    The scale count is reduced for small inputs (the coarsest scale must
    still hold one window) and the weights renormalized. Negative
    per-scale terms are clipped at a tiny positive floor before the
    weighted product.
    """
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if x.shape != y.shape or x.ndim != 4:
        raise ad.ShapeError("ms_ssim", x.shape, y.shape)
    n = _num_scales(x.shape[2], x.shape[3], win, max_scales)
    if n == 0:
        raise ad.ShapeError("ms_ssim", x.shape, (win, win), detail="image smaller than one filter window")
    weights = np.array(MS_SSIM_WEIGHTS[:n])
    weights = weights / weights.sum()
    out = None
    for j in range(n):
        ssim_j, cs_j = _ssim_terms(x, y, win, sigma)
        term = ssim_j if j == n - 1 else cs_j
        term = ad.power(ad.clamp(term, 1e-10, None), float(weights[j]))
        out = term if out is None else out * term
        if j < n - 1:
            x, y = ad.downsample2x(x), ad.downsample2x(y)
    return ad.mean(out, axis=1)


def ms_ssim(x, y, win: int = 11, sigma: float = 1.5):
    x, y = _pairs(x, y)
    single = x.ndim == 3
    val = ms_ssim_t(x[None] if single else x, y[None] if single else y, win, sigma).data
    val = np.clip(val, 0.0, 1.0)
    return float(val[0]) if single else val


def ssim(x, y, win: int = 11, sigma: float = 1.5):
    """Single-scale SSIM (Gaussian window, channel-averaged)."""
    x, y = _pairs(x, y)
    single = x.ndim == 3
    xs, ys = (x[None], y[None]) if single else (x, y)
    val = ad.mean(_ssim_terms(ad.Tensor(xs), ad.Tensor(ys), win, sigma)[0], axis=1).data
    return float(val[0]) if single else val


class ExternalScorer:
    """Full-reference scorer run as an external process.

    The command receives two PNG paths (reference, distorted) appended to
    its argument list and must print a single float on stdout.
    """

    def __init__(self, command: Sequence[str], higher_is_better: bool = True, timeout: float = 60.0):
        self.command = list(command)
        self.higher_is_better = higher_is_better
        self.timeout = timeout

    def __call__(self, x, y) -> float:
        from .imageio import save_png

        with tempfile.TemporaryDirectory() as tmp:
            a, b = Path(tmp) / "ref.png", Path(tmp) / "dist.png"
            save_png(a, x)
            save_png(b, y)
            cmd = self.command + [str(a), str(b)]
            try:
                res = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout, check=True)
            except (OSError, subprocess.SubprocessError) as exc:
                raise RuntimeError(f"external scorer failed: {' '.join(cmd)}: {exc}") from exc
            return float(res.stdout.strip().split()[-1])


METRICS: dict[str, FRMetric] = {
    "psnr": FRMetric("psnr", True, psnr),
    "mse": FRMetric("mse", False, mse),
    "ms-ssim": FRMetric("ms-ssim", True, ms_ssim),
    "ssim": FRMetric("ssim", True, ssim),
    "linf": FRMetric("linf", False, linf),
}


def get_metric(metric) -> FRMetric:
    if isinstance(metric, FRMetric):
        return metric
    if isinstance(metric, ExternalScorer):
        return FRMetric("external", metric.higher_is_better, metric)
    try:
        return METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}") from None


@dataclass(frozen=True)
class DeltaScore:
    metric: str
    value: float


def delta_score(metric, codec: Callable, x, x_adv) -> DeltaScore:
    """FR(x, C(x)) - FR(x', C(x')).

    For higher-is-better metrics a positive value means the perturbation
    degraded the reconstruction.
    """
    m = get_metric(metric)
    return DeltaScore(m.id, float(m(x, codec(x)) - m(x_adv, codec(x_adv))))


def transfer_score(metric, codec: Callable, other: Callable, x, x_adv) -> float:
    """FR(C(x), C(x')) - FR(C'(x), C'(x')) for an x' built against C."""
    if other is codec:
        return 0.0
    m = get_metric(metric)
    return float(m(codec(x), codec(x_adv)) - m(other(x), other(x_adv)))


def transfer_matrix(metric, codecs: Mapping[str, Callable],
                    adversarial: Mapping[str, Sequence[tuple[np.ndarray, np.ndarray]]]) -> tuple[list[str], np.ndarray]:
    """Mean transfer score for every (source, destination) codec pair.

    ``adversarial[src]`` lists (x, x') pairs crafted against ``codecs[src]``.
    Rows are sources, columns destinations; the diagonal is zero.
    """
    m = get_metric(metric)
    names = list(codecs)
    out = np.zeros((len(names), len(names)))
    for i, src in enumerate(names):
        pairs = adversarial[src]
        src_fr = [m(codecs[src](x), codecs[src](xa)) for x, xa in pairs]
        for j, dst in enumerate(names):
            if i == j:
                continue
            vals = [s - m(codecs[dst](x), codecs[dst](xa)) for s, (x, xa) in zip(src_fr, pairs)]
            out[i, j] = float(np.mean(vals))
    return names, out


# ------------------------------------------------------------------ colour


def ciede2000(lab1: np.ndarray, lab2: np.ndarray) -> np.ndarray:
    """CIEDE2000 colour difference; Lab values on the last axis."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    l1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    l2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]
    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    cbar7 = ((c1 + c2) / 2) ** 7
    g = 0.5 * (1 - np.sqrt(cbar7 / (cbar7 + 25.0 ** 7)))
    a1p, a2p = (1 + g) * a1, (1 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360
    zero = (c1p * c2p) == 0

    dl = l2 - l1
    dc = c2p - c1p
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, np.where(dh < -180, dh + 360, dh))
    dh = np.where(zero, 0.0, dh)
    dH = 2 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh) / 2)

    lbar = (l1 + l2) / 2
    cbarp = (c1p + c2p) / 2
    hsum = h1p + h2p
    hbar = np.where(np.abs(h1p - h2p) <= 180, hsum / 2,
                    np.where(hsum < 360, (hsum + 360) / 2, (hsum - 360) / 2))
    hbar = np.where(zero, hsum, hbar)
    t = (1 - 0.17 * np.cos(np.radians(hbar - 30)) + 0.24 * np.cos(np.radians(2 * hbar))
         + 0.32 * np.cos(np.radians(3 * hbar + 6)) - 0.20 * np.cos(np.radians(4 * hbar - 63)))
    dtheta = 30 * np.exp(-(((hbar - 275) / 25) ** 2))
    cbarp7 = cbarp ** 7
    rc = 2 * np.sqrt(cbarp7 / (cbarp7 + 25.0 ** 7))
    sl = 1 + 0.015 * (lbar - 50) ** 2 / np.sqrt(20 + (lbar - 50) ** 2)
    sc = 1 + 0.045 * cbarp
    sh = 1 + 0.015 * cbarp * t
    rt = -np.sin(np.radians(2 * dtheta)) * rc
    tl, tc, th = dl / sl, dc / sc, dH / sh
    return np.sqrt(np.maximum(tl ** 2 + tc ** 2 + th ** 2 + rt * tc * th, 0.0))


def _avg_pool(m: np.ndarray, k: int) -> np.ndarray:
    h, w = m.shape[-2] // k, m.shape[-1] // k
    if h == 0 or w == 0:
        return m.mean(axis=(-2, -1), keepdims=True)
    m = m[..., :h * k, :w * k]
    return m.reshape(*m.shape[:-2], h, k, w, k).mean(axis=(-3, -1))


def color_artifact(x_ref, x_test, window: int = 8) -> float:
    """CIEDE2000 map between two RGB images, 8x8 average-pooled, then averaged."""
    x_ref, x_test = _pairs(x_ref, x_test)
    de = ciede2000(np.moveaxis(rgb_to_lab(x_ref), -3, -1), np.moveaxis(rgb_to_lab(x_test), -3, -1))
    return float(_avg_pool(de, window).mean())


# ----------------------------------------------------------------- texture

_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61], [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56], [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77], [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101], [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)
_JPEG_CHROMA = np.full((8, 8), 99.0)
_JPEG_CHROMA[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


def _quant_tables(quality: float) -> list[np.ndarray]:
    q = float(np.clip(quality, 1, 100))
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return [np.maximum(np.floor((t * scale + 50) / 100), 1.0) for t in (_JPEG_LUMA, _JPEG_CHROMA, _JPEG_CHROMA)]


def _blockdct_coeffs(x: np.ndarray, quality: float):
    c, h, w = x.shape
    ph, pw = (-h) % 8, (-w) % 8
    ycc = rgb_to_ycbcr(np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")) * 255.0 - 128.0
    hh, ww = ycc.shape[1] // 8, ycc.shape[2] // 8
    blocks = ycc.reshape(c, hh, 8, ww, 8).transpose(0, 1, 3, 2, 4)
    coef = fft.dctn(blocks, axes=(-2, -1), norm="ortho")
    tables = np.stack(_quant_tables(quality))[:, None, None]
    return np.round(coef / tables), tables, (h, w, hh, ww)


def blockdct(x, quality: float = 75.0) -> np.ndarray:
    """8x8 block-DCT quantize/dequantize baseline (JPEG tables, no subsampling)."""
    x = np.asarray(x, dtype=np.float64)
    q, tables, (h, w, hh, ww) = _blockdct_coeffs(x, quality)
    rec = fft.idctn(q * tables, axes=(-2, -1), norm="ortho")
    ycc = rec.transpose(0, 1, 3, 2, 4).reshape(3, hh * 8, ww * 8)
    rgb = ycbcr_to_rgb((ycc + 128.0) / 255.0)
    return np.clip(rgb[:, :h, :w], 0.0, 1.0)


def blockdct_bpp(x, quality: float = 75.0) -> float:
    """Zeroth-order entropy of the quantized coefficients, per pixel."""
    x = np.asarray(x, dtype=np.float64)
    q, _, (h, w, hh, ww) = _blockdct_coeffs(x, quality)
    per_pos = q.transpose(0, 3, 4, 1, 2).reshape(3 * 64, hh * ww)
    bits = 0.0
    for row in per_pos:
        _, counts = np.unique(row, return_counts=True)
        p = counts / counts.sum()
        bits += -(counts * np.log2(p)).sum()
    return float(bits / (h * w))


def match_quality(x, target_bpp: float, iters: int = 12) -> float:
    """Quality factor whose block-DCT bpp proxy is closest to ``target_bpp``."""
    lo, hi = 1.0, 100.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if blockdct_bpp(x, mid) > target_bpp:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def texture_artifact(x_ref, x_test, quality: float | None = None, target_bpp: float | None = None,
                     tile: int = 64) -> float:
    """Mean over tiles of MS-SSIM(ref, blockdct(ref)) - MS-SSIM(ref, test).

    Positive values mean the test image lost more local structure than
    the block-DCT baseline. The baseline quality is either given, matched
    to ``target_bpp``, or 75.
    """
    x_ref, x_test = _pairs(x_ref, x_test)
    if quality is None:
        quality = match_quality(x_ref, target_bpp) if target_bpp is not None else 75.0
    base = blockdct(x_ref, quality)
    _, h, w = x_ref.shape
    nh, nw = h // tile, w // tile
    if nh == 0 or nw == 0:
        slices = [(slice(None), slice(None))]
    else:
        slices = [(slice(i * tile, (i + 1) * tile), slice(j * tile, (j + 1) * tile))
                  for i in range(nh) for j in range(nw)]
    refs = np.stack([x_ref[:, a, b] for a, b in slices])
    gap = ms_ssim(refs, np.stack([base[:, a, b] for a, b in slices])) - \
        ms_ssim(refs, np.stack([x_test[:, a, b] for a, b in slices]))
    return float(np.mean(gap))


# ------------------------------------------------------------- RD curves


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    quality: float
    metric: str = "psnr"

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"RD point needs bpp > 0, got {self.bpp}")


def _log_rate_curve(points: Sequence[RDPoint]) -> tuple[np.ndarray, np.ndarray]:
    if len(points) < 2:
        raise ValueError("need at least 2 RD points")
    pts = sorted(points, key=lambda p: (p.quality, p.bpp))
    q = np.array([p.quality for p in pts])
    r = np.log(np.array([p.bpp for p in pts]))
    # merge duplicate qualities by averaging log-rate
    uq, inv = np.unique(q, return_inverse=True)
    ur = np.bincount(inv, weights=r) / np.bincount(inv)
    return uq, ur


def bsq_rate(reference: Sequence[RDPoint], candidate: Sequence[RDPoint]) -> float:
    """Mean candidate/reference bitrate ratio over the shared quality range.

    log(bitrate) is interpolated piecewise-linearly in quality for both
    curves and the ratio exp(diff) is integrated exactly on each segment.
    1.0 means parity, below 1 means the candidate saves bits.
    """
    qr, rr = _log_rate_curve(reference)
    qc, rc = _log_rate_curve(candidate)
    lo, hi = max(qr[0], qc[0]), min(qr[-1], qc[-1])
    if not hi > lo:
        raise ValueError("RD curves have no quality overlap")
    knots = np.unique(np.concatenate([[lo, hi], qr[(qr > lo) & (qr < hi)], qc[(qc > lo) & (qc < hi)]]))
    d = np.interp(knots, qc, rc) - np.interp(knots, qr, rr)
    total = 0.0
    for k in range(len(knots) - 1):
        width = knots[k + 1] - knots[k]
        d0, d1 = d[k], d[k + 1]
        if abs(d1 - d0) < 1e-12:
            total += width * math.exp(d0)
        else:
            total += width * (math.exp(d1) - math.exp(d0)) / (d1 - d0)
    return total / (hi - lo)


# ------------------------------------------------------------ correlation

CORRELATION_FIELDS = ("delta_psnr", "delta_mse", "delta_ms_ssim", "color_score", "texture_score")


def _field(rec, name):
    return rec[name] if isinstance(rec, Mapping) else getattr(rec, name)


def correlation_report(records: Iterable, method: str = "pearson", min_records: int = 10,
                       fields: Sequence[str] = CORRELATION_FIELDS) -> tuple[list[str], np.ndarray]:
    """Pairwise correlation of delta scores and artifact scores.

    Records where neither artifact detector fired are dropped first.
    Constant columns give NaN entries.
    """
    rows = [rec for rec in records
            if _field(rec, "color_score") > 0 or _field(rec, "texture_score") > 0]
    if len(rows) < min_records:
        raise ValueError(f"correlation needs >= {min_records} records with artifacts, got {len(rows)}")
    data = np.array([[float(_field(r, f)) for f in fields] for r in rows])
    if method == "spearman":
        data = np.column_stack([stats.rankdata(col) for col in data.T])
    elif method != "pearson":
        raise ValueError(f"unknown correlation method {method!r}")
    k = len(fields)
    out = np.full((k, k), np.nan)
    centered = data - data.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    for i in range(k):
        for j in range(k):
            if norms[i] > 0 and norms[j] > 0:
                out[i, j] = float(np.clip((centered[:, i] @ centered[:, j]) / (norms[i] * norms[j]), -1, 1))
    return list(fields), out
