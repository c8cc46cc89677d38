import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dvmsr.imaging import ImageError, read_png
from dvmsr.metrics import PSNR_CAP, MetricError, cap_psnr, evaluate_pair, psnr, ssim

GOLDEN = Path(__file__).parent / "golden"


def luma255(px):
    px = np.asarray(px, dtype=float)
    if px.ndim == 3 and px.shape[2] == 3:
        return 65.481 * px[..., 0] + 128.553 * px[..., 1] + 24.966 * px[..., 2] + 16.0
    return px.reshape(px.shape[:2]) * 255.0


def psnr_oracle(a, b, border):
    ya, yb = luma255(a), luma255(b)
    h, w = ya.shape
    acc, n = 0.0, 0
    for i in range(border, h - border):
        for j in range(border, w - border):
            acc += (ya[i, j] - yb[i, j]) ** 2
            n += 1
    return 10 * math.log10(255.0**2 / (acc / n))


def ssim_oracle(a, b, border):
    x, y = luma255(a), luma255(b)
    if border:
        x, y = x[border:-border, border:-border], y[border:-border, border:-border]
    t = np.arange(11) - 5.0
    g1 = np.exp(-t * t / (2 * 1.5**2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i : i + 11, j : j + 11], y[i : i + 11, j : j + 11]
            mx, my = (win * px).sum(), (win * py).sum()
            vx = (win * (px - mx) ** 2).sum()
            vy = (win * (py - my) ** 2).sum()
            cxy = (win * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


@pytest.mark.parametrize("border", [0, 4])
def test_psnr_matches_loop_oracle(rng, border):
    a, b = rng.uniform(size=(20, 17, 3)), rng.uniform(size=(20, 17, 3))
    assert abs(psnr(a, b, border) - psnr_oracle(a, b, border)) < 1e-9


@pytest.mark.parametrize("border", [0, 4])
def test_ssim_matches_windowed_oracle(rng, border):
    a = rng.uniform(size=(30, 26, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert abs(ssim(a, b, border) - ssim_oracle(a, b, border)) < 1e-9


def test_identity_cases(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert psnr(a, a) == math.inf
    assert cap_psnr(psnr(a, a)) == PSNR_CAP
    assert ssim(a, a) == 1.0


def test_zero_db_when_differing_by_full_range():
    a = np.zeros((8, 8, 1))
    assert psnr(a, np.ones((8, 8, 1))) == 0.0


def test_ssim_of_complement_is_below_one(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert ssim(a, 1 - a) < 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_metrics_symmetric(seed, border):
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=(19, 19, 3)), r.uniform(size=(19, 19, 3))
    assert psnr(a, b, border) == psnr(b, a, border)
    assert abs(ssim(a, b, border) - ssim(b, a, border)) < 1e-15


def test_errors(rng):
    a = rng.uniform(size=(16, 16, 3))
    with pytest.raises(MetricError):
        psnr(a, a[:15])
    with pytest.raises(MetricError):
        psnr(a, a, border=8)
    with pytest.raises(ImageError):
        ssim(a, a, border=3)


def test_evaluate_pair_quantizes_output(rng):
    hr = rng.integers(0, 256, size=(24, 24, 3)) / 255.0
    rep = evaluate_pair(hr + 0.4 / 255, hr, border=4)
    assert rep.psnr_db == PSNR_CAP and rep.ssim == 1.0 and rep.channel_mode == "Y"


def test_golden_pair_is_bit_stable():
    expected = json.loads((GOLDEN / "metrics.json").read_text())
    sr, hr = read_png(GOLDEN / "sr.png"), read_png(GOLDEN / "hr.png")
    b = expected["border"]
    assert psnr(sr, hr, b) == float.fromhex(expected["psnr_db"])
    assert ssim(sr, hr, b) == float.fromhex(expected["ssim"])
    assert abs(psnr(sr, hr, b) - psnr_oracle(sr.pixels, hr.pixels, b)) < 1e-9
