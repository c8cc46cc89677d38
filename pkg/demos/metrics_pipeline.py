"""
Degradation and benchmark metrics
=================================

MATLAB-style bicubic downscaling, then Y-channel PSNR/SSIM with a border crop.
"""

import numpy as np

from dvmsr.data import degrade, synthetic_images
from dvmsr.imaging import bicubic_resize, quantize_8bit, rgb_to_y
from dvmsr.metrics import evaluate_pair

# benchmark HR images are 8-bit, so quantize the synthetic one the same way
hr = quantize_8bit(synthetic_images(1, 96, np.random.default_rng(3))[0]) / 255
lr = degrade(hr, 4)
print("HR", hr.shape, "-> LR", lr.shape)

# the bicubic baseline: upscale the LR image back
sr = np.clip(bicubic_resize(lr, 4), 0, 1)
rep = evaluate_pair(sr, hr, border=4)
print(f"bicubic x4: PSNR {rep.psnr_db:.3f} dB  SSIM {rep.ssim:.4f}")

# identical images hit the caps
same = evaluate_pair(hr, hr, border=4)
print("identity:", same.psnr_db, same.ssim)

# luma uses the limited-range convention
print("Y(black) =", rgb_to_y(np.zeros((1, 1, 3)))[0, 0, 0] * 255)
print("Y(white) =", rgb_to_y(np.ones((1, 1, 3)))[0, 0, 0] * 255)
