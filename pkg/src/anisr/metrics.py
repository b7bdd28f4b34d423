"""Image quality metrics and report aggregation.

PSNR and SSIM follow the common reference parameterization: SSIM uses an
11-tap Gaussian window (sigma 1.5), C1 = (0.01 L)^2, C2 = (0.03 L)^2 with no
sample-covariance correction, averaged over the window-valid interior.
Metrics are computed in the LR-anchored normalized frame, so data_range
defaults to 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 100.0  # reported for zero MSE so aggregates stay finite

ROW_COLUMNS = ("volume_id", "slice_index", "orientation", "method", "psnr_db", "ssim")


def psnr(ref, test, data_range: float = 1.0) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    mse = np.mean((ref - test) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(data_range ** 2 / mse), PSNR_CAP_DB))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def ssim(ref, test, data_range: float = 1.0, window_size: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if min(ref.shape) < window_size:
        raise ValueError(
            f"image {ref.shape} smaller than the {window_size}-pixel window")
    win = _gaussian_window(window_size, sigma)

    def filt(img):
        # separable Gaussian; boundary values are discarded by the crop below
        tmp = correlate1d(img, win, axis=0, mode="constant")
        return correlate1d(tmp, win, axis=1, mode="constant")

    mu1, mu2 = filt(ref), filt(test)
    s11 = filt(ref * ref) - mu1 * mu1
    s22 = filt(test * test) - mu2 * mu2
    s12 = filt(ref * test) - mu1 * mu2

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ssim_map = ((2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)) / \
               ((mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2))
    pad = (window_size - 1) // 2
    return float(np.mean(ssim_map[pad:-pad, pad:-pad]))


def fourier_spectrum(img) -> np.ndarray:
    """Centered log-magnitude 2D spectrum scaled to [0, 1] for display."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got rank {img.ndim}")
    mag = np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(img))))
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return mag


@dataclass
class MetricsReport:
    rows: pd.DataFrame
    data_range: float = 1.0
    per_method: pd.DataFrame = field(init=False)
    per_volume: pd.DataFrame = field(init=False)

    def __post_init__(self):
        if len(self.rows) == 0:
            raise ValueError("cannot aggregate an empty set of metric rows")
        self.rows = self.rows.reset_index(drop=True)
        self.per_method = (self.rows.groupby("method")[["psnr_db", "ssim"]]
                           .mean().reset_index())
        self.per_volume = (self.rows.groupby(["method", "volume_id"])
                           [["psnr_db", "ssim"]].mean().reset_index())

    def mean_psnr(self, method: str | None = None) -> float:
        rows = self.rows if method is None else self.rows[self.rows.method == method]
        return float(rows.psnr_db.mean())

    def mean_ssim(self, method: str | None = None) -> float:
        rows = self.rows if method is None else self.rows[self.rows.method == method]
        return float(rows.ssim.mean())

    def to_csv(self, path, append: bool = False):
        mode, header = ("a", False) if append else ("w", True)
        self.rows.to_csv(path, mode=mode, header=header, index=False,
                         columns=list(ROW_COLUMNS))


def metric_row(volume_id, slice_index, orientation, method, ref, test,
               data_range: float = 1.0) -> dict:
    return dict(volume_id=volume_id, slice_index=int(slice_index),
                orientation=orientation, method=method,
                psnr_db=psnr(ref, test, data_range),
                ssim=ssim(ref, test, data_range))


def aggregate_report(rows, data_range: float = 1.0) -> MetricsReport:
    """Build a MetricsReport from an iterable of row dicts (or a DataFrame)."""
    if isinstance(rows, pd.DataFrame):
        df = rows.copy()
    else:
        df = pd.DataFrame(list(rows), columns=list(ROW_COLUMNS))
    if len(df) == 0:
        raise ValueError("cannot aggregate an empty set of metric rows")
    return MetricsReport(rows=df, data_range=data_range)
