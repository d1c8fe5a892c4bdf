"""Training objectives: matting, segmentation, change-mask and core supervision.

All losses are differentiable w.r.t. the prediction and return 0-dim tensors.
Single frames are (1, H, W); sequences are (T, 1, H, W).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import RegionPartition

LAPLACIAN_LEVELS = 5
LAPLACIAN_LEVEL_WEIGHTS = tuple(2.0 ** (s - 1) / 5.0 for s in range(1, LAPLACIAN_LEVELS + 1))
LUMINANCE_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class LossWeights:
    """Composition weights: L_mat = l1 + w_lap*lap + w_tc*tc and
    L_cs = w_core*core + w_boundary*boundary."""

    laplacian: float = 5.0
    temporal: float = 1.0
    boundary: float = 1.5
    core: float = 1.0

    def __post_init__(self):
        if min(self.laplacian, self.temporal, self.boundary, self.core) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class DdcConfig:
    """Neighborhood parameters for the boundary consistency losses.

    window:   odd side length of the local search window
    neighbors: number k of color-nearest neighbors per band pixel
    fb_topk:  window pixels averaged for the foreground/background estimates
    fb_floor: lower bound on the estimated contrast (texture-flat windows)
    """

    window: int = 11
    neighbors: int = 5
    fb_topk: int = 5
    fb_floor: float = 1e-3
    luminance: tuple[float, float, float] = LUMINANCE_WEIGHTS

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if not 1 <= self.neighbors < self.window**2 - 1:
            raise ValueError("neighbors must satisfy 1 <= k < window^2 - 1")
        if not 1 <= self.fb_topk <= self.window**2:
            raise ValueError("fb_topk must lie in [1, window^2]")
        if self.fb_floor <= 0:
            raise ValueError("fb_floor must be > 0")


def _frames(x: torch.Tensor, name: str) -> torch.Tensor:
    """Normalize (H, W) / (1, H, W) / (T, 1, H, W) to (T, 1, H, W)."""
    if x.ndim == 2:
        return x.unsqueeze(0).unsqueeze(0)
    if x.ndim == 3:
        return x.unsqueeze(0)
    if x.ndim == 4:
        return x
    raise ValueError(f"{name} has unsupported rank {x.ndim}")


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )


def loss_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference."""
    _check_pair(pred, target)
    return (pred - target).abs().mean()


def _gauss_kernel(dtype: torch.dtype) -> torch.Tensor:
    k = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0], dtype=dtype)
    return (k[:, None] @ k[None, :] / 256.0).reshape(1, 1, 5, 5)


def _blur(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    # replicate padding keeps the blur defined at level-5 sizes as small as 1x1
    return F.conv2d(F.pad(x, (2, 2, 2, 2), mode="replicate"), kernel)


def _pyr_down(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    return _blur(x, kernel)[..., ::2, ::2]


def _pyr_up(x: torch.Tensor, kernel: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    b, c, h, w = x.shape
    up = torch.zeros(b, c, h * 2, w * 2, dtype=x.dtype, device=x.device)
    up[..., ::2, ::2] = x * 4.0
    return _blur(up, kernel)[..., : size[0], : size[1]]


def laplacian_pyramid(x: torch.Tensor, levels: int = LAPLACIAN_LEVELS) -> list[torch.Tensor]:
    """Band-pass pyramid: level s is g_{s-1} - upsample(g_s)."""
    kernel = _gauss_kernel(x.dtype)
    pyramid = []
    current = x
    for _ in range(levels):
        down = _pyr_down(current, kernel)
        up = _pyr_up(down, kernel, current.shape[-2:])
        pyramid.append(current - up)
        current = down
    return pyramid


def loss_laplacian_pyramid(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Five-level pyramid loss with weights 2^(s-1)/5 on per-level L1 means."""
    p = _frames(pred, "prediction")
    t = _frames(target, "target")
    _check_pair(p, t)
    h, w = p.shape[-2:]
    if h < 32 or w < 32:
        raise ValueError(f"need H, W >= 32 for {LAPLACIAN_LEVELS} pyramid levels, got {h}x{w}")
    pyr_p = laplacian_pyramid(p)
    pyr_t = laplacian_pyramid(t)
    loss = p.new_zeros(())
    for weight, lp, lt in zip(LAPLACIAN_LEVEL_WEIGHTS, pyr_p, pyr_t):
        loss = loss + weight * (lp - lt).abs().mean()
    return loss


def loss_temporal_coherence(pred_seq: torch.Tensor, target_seq: torch.Tensor) -> torch.Tensor:
    """RMS mismatch of frame-to-frame differences, averaged over frame pairs."""
    p = _frames(pred_seq, "prediction")
    t = _frames(target_seq, "target")
    _check_pair(p, t)
    if p.shape[0] < 2:
        raise ValueError("temporal coherence needs at least 2 frames")
    dp = p[1:] - p[:-1]
    dt = t[1:] - t[:-1]
    per_pair = ((dp - dt) ** 2).mean(dim=(1, 2, 3)).sqrt()
    return per_pair.mean()


def loss_segmentation(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy plus Dice with +1 smoothing, on logits."""
    _check_pair(logits, target)
    if not torch.logical_or(target == 0, target == 1).all():
        raise ValueError("segmentation target must be binary")
    ce = F.binary_cross_entropy_with_logits(logits, target)
    probs = torch.sigmoid(logits)
    dice = 1.0 - (2.0 * (probs * target).sum() + 1.0) / (probs.sum() + target.sum() + 1.0)
    return ce + dice


def loss_change_mask(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on the change-probability logits."""
    _check_pair(logits, target)
    return F.binary_cross_entropy_with_logits(logits, target)


def _band_neighborhoods(alpha: torch.Tensor, image: torch.Tensor, band: torch.Tensor, cfg: DdcConfig):
    """Gather window patches for every band pixel.

    Returns (alpha_win, image_win, valid) of shapes (w*w, N), (C, w*w, N) and
    (w*w, N); `valid` is False for window slots that fall outside the image.
    """
    c, h, w = image.shape
    pad = cfg.window // 2
    ww = cfg.window * cfg.window
    idx = band.reshape(-1).nonzero(as_tuple=True)[0]
    pad4 = (pad, pad, pad, pad)
    img_win = F.unfold(F.pad(image.unsqueeze(0), pad4), cfg.window)[0]
    alp_win = F.unfold(F.pad(alpha.reshape(1, 1, h, w), pad4), cfg.window)[0]
    ones = torch.ones(1, 1, h, w, dtype=image.dtype)
    valid = F.unfold(F.pad(ones, pad4), cfg.window)[0] > 0.5
    img_win = img_win.reshape(c, ww, h * w)[:, :, idx]
    alp_win = alp_win[:, idx]
    valid = valid[:, idx]
    return alp_win, img_win, valid


def _ddc_loss(
    alpha: torch.Tensor,
    image: torch.Tensor,
    band: torch.Tensor,
    cfg: DdcConfig,
    scaled: bool,
) -> torch.Tensor:
    a = alpha.reshape(alpha.shape[-2], alpha.shape[-1]) if alpha.ndim == 3 else alpha
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"image must be (C, H, W) with C in {{1, 3}}, got {tuple(image.shape)}")
    if a.shape != image.shape[-2:]:
        raise ValueError("alpha and image sizes differ")
    b = band.reshape(a.shape) > 0.5
    if not b.any():
        warnings.warn("empty boundary band: consistency loss defined as 0", RuntimeWarning)
        return (alpha * 0.0).sum()
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")

    alp_win, img_win, valid = _band_neighborhoods(a, image, b, cfg)
    ww = cfg.window * cfg.window
    center = ww // 2
    n_valid = valid.sum(dim=0)
    if int(n_valid.min()) < max(cfg.fb_topk, 2):
        raise ValueError(
            "window too small for neighbor/contrast estimation at the image border"
        )

    center_color = img_win[:, center, :]
    color_dist = ((img_win - center_color.unsqueeze(1)) ** 2).sum(dim=0).sqrt()
    excluded = ~valid
    excluded[center] = True  # a pixel is not its own neighbor
    selectable = color_dist.masked_fill(excluded, float("inf"))
    k = cfg.neighbors
    nn_dist, nn_idx = torch.topk(selectable, k, dim=0, largest=False)
    usable = torch.isfinite(nn_dist)

    alpha_center = alp_win[center]
    alpha_nn = torch.gather(alp_win, 0, nn_idx)
    d_alpha = (alpha_center.unsqueeze(0) - alpha_nn).abs()
    d_color = torch.gather(color_dist, 0, nn_idx)

    if scaled:
        if image.shape[0] == 1:
            lum = img_win[0]
        else:
            wr, wg, wb = cfg.luminance
            lum = wr * img_win[0] + wg * img_win[1] + wb * img_win[2]
        fg = torch.topk(lum.masked_fill(~valid, float("-inf")), cfg.fb_topk, dim=0).values.mean(0)
        bg = torch.topk(lum.masked_fill(~valid, float("inf")), cfg.fb_topk, dim=0, largest=False).values.mean(0)
        contrast = (fg - bg).clamp(min=cfg.fb_floor)
        terms = (d_alpha * contrast.unsqueeze(0) - d_color).abs()
    else:
        terms = (d_alpha - d_color).abs()

    terms = torch.where(usable, terms, terms.new_zeros(()))
    return terms.sum() / alpha_center.shape[0]


def loss_ddc_original(
    alpha: torch.Tensor, image: torch.Tensor, band: torch.Tensor, cfg: DdcConfig | None = None
) -> torch.Tensor:
    """Boundary consistency: |d_alpha - d_color| over color-nearest neighbors.

    For each band pixel, the k window pixels closest in color are its
    neighbors; the loss compares the alpha difference magnitude against the
    RGB distance, summed per pixel and averaged over the band.
    """
    return _ddc_loss(alpha, image, band, cfg or DdcConfig(), scaled=False)


def loss_ddc_scaled(
    alpha: torch.Tensor, image: torch.Tensor, band: torch.Tensor, cfg: DdcConfig | None = None
) -> torch.Tensor:
    """Contrast-scaled boundary consistency: |d_alpha*(F-B) - d_color|.

    F is the mean of the fb_topk largest window luminances, B of the smallest;
    scaling by the estimated contrast makes the color-difference target
    consistent with the compositing model when |F-B| != 1.
    """
    return _ddc_loss(alpha, image, band, cfg or DdcConfig(), scaled=True)


def loss_core_supervision(
    alpha_pred: torch.Tensor,
    seg_target: torch.Tensor,
    image: torch.Tensor,
    partition: RegionPartition,
    ddc: DdcConfig | None = None,
    weights: LossWeights | None = None,
) -> torch.Tensor:
    """Supervise the matting head with segmentation data.

    L1 between prediction and mask over the core region, plus the scaled
    boundary consistency loss over the boundary band, combined as
    w_core * core + w_boundary * boundary.
    """
    weights = weights or LossWeights()
    a = _frames(alpha_pred, "prediction")[0]
    t = _frames(seg_target, "target")[0]
    _check_pair(a, t)
    core = partition.core
    n_core = core.sum()
    if n_core == 0:
        raise ValueError("degenerate partition: no core pixels to supervise")
    core_term = ((a - t).abs() * core).sum() / n_core
    boundary_term = loss_ddc_scaled(a, image, partition.boundary, ddc)
    return weights.core * core_term + weights.boundary * boundary_term


def loss_matting(
    pred_seq: torch.Tensor, target_seq: torch.Tensor, weights: LossWeights | None = None
) -> torch.Tensor:
    """Composite matting objective: L1 + w_lap * pyramid + w_tc * temporal."""
    weights = weights or LossWeights()
    p = _frames(pred_seq, "prediction")
    t = _frames(target_seq, "target")
    total = loss_l1(p, t) + weights.laplacian * loss_laplacian_pyramid(p, t)
    if p.shape[0] >= 2:
        total = total + weights.temporal * loss_temporal_coherence(p, t)
    return total
