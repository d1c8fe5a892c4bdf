"""Matting quality metrics: MAD, MSE, Grad, Conn, dtSSD and core-region variants.

Reporting scales follow the conventions of published matting tables:
MAD/MSE/Grad/Conn are multiplied by 1e3, dtSSD by 1e2. Inputs may be torch
tensors or numpy arrays; frames are (H, W) or (1, H, W), sequences
(T, 1, H, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from skimage import measure

from .core import DegenerateRegionError, trimap_from_segmask

SPATIAL_SCALE = 1e3  # MAD, MSE, Grad, Conn
TEMPORAL_SCALE = 1e2  # dtSSD
GRAD_SIGMA = 1.4
CONN_THRESHOLD_STEP = 0.1
CONN_DISCOUNT = 0.15


def _to_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _frame2d(x, name: str) -> np.ndarray:
    a = _to_array(x)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a single frame, got shape {a.shape}")
    return a


def _sequence(x, name: str) -> np.ndarray:
    a = _to_array(x)
    if a.ndim == 4 and a.shape[1] == 1:
        a = a[:, 0]
    if a.ndim != 3:
        raise ValueError(f"{name} must be a (T, 1, H, W) or (T, H, W) sequence")
    return a


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mad(pred, target) -> float:
    """Mean absolute difference, x1e3."""
    p, t = _to_array(pred), _to_array(target)
    _check_same_shape(p, t)
    # scale before reducing so dyadic-friendly constant offsets stay exact
    return float(np.mean(np.abs(p - t) * SPATIAL_SCALE))


def mse(pred, target) -> float:
    """Mean squared error, x1e3."""
    p, t = _to_array(pred), _to_array(target)
    _check_same_shape(p, t)
    return float(np.mean((p - t) ** 2 * SPATIAL_SCALE))


def _gaussian_derivative_kernels(sigma: float) -> tuple[np.ndarray, np.ndarray]:
    epsilon = 1e-2
    halfsize = int(sigma * math.sqrt(-2.0 * math.log(math.sqrt(2.0 * math.pi) * sigma * epsilon)))
    size = 2 * halfsize + 1
    hx = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            y, x = i - halfsize, j - halfsize
            g = math.exp(-(y * y) / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))
            dg = -x * math.exp(-(x * x) / (2 * sigma * sigma)) / (
                sigma * math.sqrt(2 * math.pi)
            ) / (sigma * sigma)
            hx[i, j] = g * dg
    hx = hx / math.sqrt(np.sum(np.abs(hx) ** 2))
    return hx, hx.T


def _gradient_amplitude(img: np.ndarray, sigma: float) -> np.ndarray:
    hx, hy = _gaussian_derivative_kernels(sigma)
    gx = ndimage.convolve(img, hx, mode="nearest")
    gy = ndimage.convolve(img, hy, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def grad_metric(pred, target) -> float:
    """Squared mismatch of Gaussian-derivative gradient amplitudes, x1e3 per pixel."""
    p = _frame2d(pred, "prediction")
    t = _frame2d(target, "target")
    _check_same_shape(p, t)
    amp_p = _gradient_amplitude(p, GRAD_SIGMA)
    amp_t = _gradient_amplitude(t, GRAD_SIGMA)
    return float(np.sum((amp_p - amp_t) ** 2) / p.size * SPATIAL_SCALE)


def _connectivity_map(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Degree-of-connectedness maps phi(pred), phi(target) over the threshold sweep."""
    thresholds = np.arange(CONN_THRESHOLD_STEP, 1.0, CONN_THRESHOLD_STEP)
    l_map = np.full(pred.shape, -1.0)
    for step, theta in enumerate(thresholds):
        joint = (pred >= theta) & (target >= theta)
        if not joint.any():
            continue
        labels = measure.label(joint, background=0, connectivity=1)
        regions = measure.regionprops(labels)
        largest = regions[int(np.argmax([r.area for r in regions]))]
        omega = np.zeros(pred.shape, dtype=bool)
        omega[largest.coords[:, 0], largest.coords[:, 1]] = True
        newly_cut = (l_map == -1.0) & ~omega
        l_map[newly_cut] = theta - CONN_THRESHOLD_STEP
    l_map[l_map == -1.0] = 1.0
    d_pred = pred - l_map
    d_target = target - l_map
    phi_pred = 1.0 - d_pred * (d_pred >= CONN_DISCOUNT)
    phi_target = 1.0 - d_target * (d_target >= CONN_DISCOUNT)
    return phi_pred, phi_target


def conn_metric(pred, target) -> float:
    """Connectivity error against the largest mutually-connected region, x1e3 per pixel."""
    p = _frame2d(pred, "prediction")
    t = _frame2d(target, "target")
    _check_same_shape(p, t)
    phi_p, phi_t = _connectivity_map(p, t)
    return float(np.sum(np.abs(phi_p - phi_t)) / p.size * SPATIAL_SCALE)


def dtssd(pred_seq, target_seq) -> float:
    """Temporal coherence: RMS mismatch of frame derivatives, x1e2."""
    p = _sequence(pred_seq, "prediction")
    t = _sequence(target_seq, "target")
    _check_same_shape(p, t)
    if p.shape[0] < 2:
        raise ValueError("dtSSD needs at least 2 frames")
    dp = np.diff(p, axis=0)
    dt = np.diff(t, axis=0)
    per_pair = np.sqrt(np.mean((dp - dt) ** 2, axis=(1, 2)))
    return float(np.mean(per_pair) * TEMPORAL_SCALE)


@dataclass
class CoreRegionMetrics:
    mad: float
    mse: float
    dtssd: float


def core_region_metrics(pred_seq, seg_seq, kernel: int) -> CoreRegionMetrics:
    """MAD/MSE/dtSSD restricted to the trimap core, with the mask as GT alpha.

    The per-frame core is fg+bg of trimap_from_segmask(mask, kernel); dtSSD
    pairs use the intersection of consecutive cores.
    """
    p = _sequence(pred_seq, "prediction")
    m = _sequence(seg_seq, "segmentation")
    _check_same_shape(p, m)
    cores = []
    for t in range(m.shape[0]):
        part = trimap_from_segmask(torch.from_numpy(m[t]).float(), kernel)
        core = part.core[0].numpy() > 0.5
        if not core.any():
            raise DegenerateRegionError(
                f"kernel {kernel} leaves no core pixels in frame {t}"
            )
        cores.append(core)
    cores = np.stack(cores)

    diff = p - m
    n_core = cores.sum()
    mad_val = float(np.abs(diff)[cores].sum() / n_core * SPATIAL_SCALE)
    mse_val = float((diff**2)[cores].sum() / n_core * SPATIAL_SCALE)

    if p.shape[0] < 2:
        raise ValueError("core dtSSD needs at least 2 frames")
    pair_vals = []
    for t in range(1, p.shape[0]):
        both = cores[t] & cores[t - 1]
        if not both.any():
            raise DegenerateRegionError(
                f"kernel {kernel} leaves no shared core pixels for pair {t - 1},{t}"
            )
        dp = p[t] - p[t - 1]
        dm = m[t] - m[t - 1]
        pair_vals.append(math.sqrt(float(((dp - dm) ** 2)[both].mean())))
    return CoreRegionMetrics(
        mad=mad_val, mse=mse_val, dtssd=float(np.mean(pair_vals) * TEMPORAL_SCALE)
    )
