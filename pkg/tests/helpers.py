"""Independent brute-force oracles and fixture generators for the test suite.

Everything here is deliberately written with plain loops / elementary numpy so
it shares no code path with the library implementations it checks.
"""

from __future__ import annotations

import math

import numpy as np
import torch


# ---------------------------------------------------------------------------
# finite-difference gradient check


def central_difference_gradient(func, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function at 64-bit precision."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        f_plus = float(func(x))
        flat[i] = orig - eps
        f_minus = float(func(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    """Per-coordinate relative error with a floor for near-zero gradients."""
    a = a.reshape(-1).double()
    b = b.reshape(-1).double()
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max())


def check_gradient(loss_fn, x: torch.Tensor, eps: float = 1e-5, tol: float = 1e-3) -> float:
    """Backprop-vs-finite-difference check; returns the max relative error."""
    xv = x.detach().clone().double().requires_grad_(True)
    loss = loss_fn(xv)
    loss.backward()
    analytic = xv.grad.detach().clone()
    numeric = central_difference_gradient(loss_fn, x, eps=eps)
    err = max_relative_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: max relative error {err:.3e} >= {tol}"
    return err


# ---------------------------------------------------------------------------
# morphology


def erode_brute(mask: np.ndarray, kernel: int) -> np.ndarray:
    """Erosion with outside-the-canvas treated as background."""
    pad = kernel // 2
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            keep = True
            for di in range(-pad, pad + 1):
                for dj in range(-pad, pad + 1):
                    ii, jj = i + di, j + dj
                    inside = 0 <= ii < h and 0 <= jj < w
                    if not inside or mask[ii, jj] == 0:
                        keep = False
            out[i, j] = 1 if keep else 0
    return out


def dilate_brute(mask: np.ndarray, kernel: int) -> np.ndarray:
    pad = kernel // 2
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            hit = False
            for di in range(-pad, pad + 1):
                for dj in range(-pad, pad + 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < h and 0 <= jj < w and mask[ii, jj] == 1:
                        hit = True
            out[i, j] = 1 if hit else 0
    return out


# ---------------------------------------------------------------------------
# Laplacian pyramid by explicit convolution


def _blur_np(x: np.ndarray) -> np.ndarray:
    k1 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    kern = np.outer(k1, k1)
    h, w = x.shape
    padded = np.pad(x, 2, mode="edge")
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            out[i, j] = float(np.sum(kern * padded[i : i + 5, j : j + 5]))
    return out


def laplacian_pyramid_brute(x: np.ndarray, levels: int = 5) -> list[np.ndarray]:
    pyramid = []
    current = x.astype(np.float64)
    for _ in range(levels):
        down = _blur_np(current)[::2, ::2]
        h, w = current.shape
        up = np.zeros((down.shape[0] * 2, down.shape[1] * 2))
        up[::2, ::2] = down * 4.0
        up = _blur_np(up)[:h, :w]
        pyramid.append(current - up)
        current = down
    return pyramid


def laplacian_loss_brute(pred: np.ndarray, target: np.ndarray) -> float:
    pyr_p = laplacian_pyramid_brute(pred)
    pyr_t = laplacian_pyramid_brute(target)
    total = 0.0
    for s, (lp, lt) in enumerate(zip(pyr_p, pyr_t), start=1):
        total += (2.0 ** (s - 1) / 5.0) * float(np.mean(np.abs(lp - lt)))
    return total


# ---------------------------------------------------------------------------
# gradient (Grad) metric by explicit convolution


def _gauss(x: float, sigma: float) -> float:
    return math.exp(-(x * x) / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))


def _dgauss(x: float, sigma: float) -> float:
    return -x * _gauss(x, sigma) / (sigma * sigma)


def grad_metric_brute(pred: np.ndarray, target: np.ndarray, sigma: float = 1.4) -> float:
    epsilon = 1e-2
    halfsize = int(sigma * math.sqrt(-2 * math.log(math.sqrt(2 * math.pi) * sigma * epsilon)))
    size = 2 * halfsize + 1
    hx = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            hx[i, j] = _gauss(i - halfsize, sigma) * _dgauss(j - halfsize, sigma)
    hx = hx / math.sqrt(np.sum(np.abs(hx) ** 2))
    hy = hx.T

    def correlate(img: np.ndarray, kern: np.ndarray) -> np.ndarray:
        h, w = img.shape
        padded = np.pad(img, halfsize, mode="edge")
        out = np.zeros_like(img, dtype=np.float64)
        for i in range(h):
            for j in range(w):
                out[i, j] = float(np.sum(kern * padded[i : i + size, j : j + size]))
        return out

    def amplitude(img):
        gx = correlate(img, hx)
        gy = correlate(img, hy)
        return np.sqrt(gx * gx + gy * gy)

    err = (amplitude(pred.astype(np.float64)) - amplitude(target.astype(np.float64))) ** 2
    return float(err.sum() / pred.size * 1e3)


# ---------------------------------------------------------------------------
# connectivity (Conn) metric by flood fill


def _components_brute(binary: np.ndarray) -> list[set[tuple[int, int]]]:
    """4-connected components in raster-scan discovery order."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    comps = []
    for i in range(h):
        for j in range(w):
            if binary[i, j] and not seen[i, j]:
                stack = [(i, j)]
                seen[i, j] = True
                comp = set()
                while stack:
                    a, b = stack.pop()
                    comp.add((a, b))
                    for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        na, nb = a + da, b + db
                        if 0 <= na < h and 0 <= nb < w and binary[na, nb] and not seen[na, nb]:
                            seen[na, nb] = True
                            stack.append((na, nb))
                comps.append(comp)
    return comps


def conn_metric_brute(pred: np.ndarray, target: np.ndarray) -> float:
    pred = pred.astype(np.float64)
    target = target.astype(np.float64)
    h, w = pred.shape
    l_map = np.full((h, w), -1.0)
    thresholds = np.arange(0.1, 1.0, 0.1)
    for theta in thresholds:
        joint = (pred >= theta) & (target >= theta)
        comps = _components_brute(joint)
        if not comps:
            continue
        sizes = [len(c) for c in comps]
        largest = comps[int(np.argmax(sizes))]
        omega = np.zeros((h, w), dtype=bool)
        for a, b in largest:
            omega[a, b] = True
        for i in range(h):
            for j in range(w):
                if l_map[i, j] == -1.0 and not omega[i, j]:
                    l_map[i, j] = theta - 0.1
    l_map[l_map == -1.0] = 1.0
    d_pred = pred - l_map
    d_target = target - l_map
    phi_pred = 1.0 - d_pred * (d_pred >= 0.15)
    phi_target = 1.0 - d_target * (d_target >= 0.15)
    return float(np.abs(phi_pred - phi_target).sum() / pred.size * 1e3)


# ---------------------------------------------------------------------------
# DDC fixtures: soft-ramp composites with globally constant F and B


def ramp_composite(
    seed: int,
    size: int = 32,
    contrast: float | None = None,
    fb: tuple[float, float] | None = None,
    margin: int = 5,
):
    """Single-channel composite I = alpha*F + (1-alpha)*B with a sheared ramp.

    The shear makes neighboring alpha values distinct; the evaluated band is
    kept `margin` pixels away from the border so every window holds enough
    pure-foreground and pure-background pixels for exact contrast estimation.
    Returns (alpha, image, band) as float64 tensors.
    """
    rng = np.random.default_rng(seed)
    if fb is not None:
        fg, bg = fb
    else:
        if contrast is None:
            contrast = float(rng.uniform(0.3, 0.7))
        bg = float(rng.uniform(0.0, 0.28))
        fg = bg + contrast
    assert 0.0 <= bg < fg <= 1.0

    slope = float(rng.uniform(0.25, 0.45)) * (1 if rng.random() < 0.5 else -1)
    width = float(rng.uniform(2.5, 4.0))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xs + slope * ys if rng.random() < 0.5 else ys + slope * xs
    center = float(u.min() + rng.uniform(0.45, 0.55) * (u.max() - u.min()))
    alpha = np.clip((u - center) / width + 0.5, 0.0, 1.0)
    image = alpha * fg + (1.0 - alpha) * bg

    band = (alpha > 0.01) & (alpha < 0.99)
    interior = np.zeros_like(band)
    interior[margin:-margin, margin:-margin] = True
    band = band & interior
    return (
        torch.from_numpy(alpha),
        torch.from_numpy(image[None]),
        torch.from_numpy(band),
    )
