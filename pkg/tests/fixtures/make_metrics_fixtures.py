"""Regenerate ``metrics_reference.npz`` (run once; the output is checked in).

Reference values come from scikit-image: ``peak_signal_noise_ratio`` and
``structural_similarity`` with Gaussian weights (sigma 1.5), population
covariance and ``data_range=1``.
"""

from pathlib import Path

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity


def make(seed: int = 2024, n: int = 10):
    rng = np.random.default_rng(seed)
    a_list, b_list = [], []
    for k in range(n):
        h, w = rng.integers(16, 48, size=2)
        y, x = np.mgrid[0:h, 0:w] / max(h, w)
        base = [
            rng.random((h, w)),
            0.5 + 0.4 * np.sin(6 * x + 3 * y),
            (x > 0.5).astype(float) * 0.8 + 0.1,
        ][k % 3]
        noisy = np.clip(base + rng.uniform(0.01, 0.2) * rng.standard_normal((h, w)), 0, 1)
        a_list.append(base)
        b_list.append(noisy)
    return a_list, b_list


def main():
    a_list, b_list = make()
    psnr = [peak_signal_noise_ratio(a, b, data_range=1.0) for a, b in zip(a_list, b_list)]
    ssim = [
        structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        for a, b in zip(a_list, b_list)
    ]
    arrays = {f"a{k}": a for k, a in enumerate(a_list)} | {f"b{k}": b for k, b in enumerate(b_list)}
    np.savez_compressed(Path(__file__).with_name("metrics_reference.npz"), psnr=psnr, ssim=ssim, **arrays)


if __name__ == "__main__":
    main()
