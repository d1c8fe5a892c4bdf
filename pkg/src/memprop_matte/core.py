"""Shared data model: clips, mattes, masks and region partitions.

Tensors follow a fixed layout convention:
  video frames   (T, 3, H, W)  float32 in [0, 1]
  alpha mattes   (T, 1, H, W)  float32 in [0, 1]
  binary masks   (T, 1, H, W)  float32 in {0, 1}
  single frames drop the leading T axis, e.g. (1, H, W) for one matte.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
import torch

ENCODER_STRIDE = 16


class DegenerateRegionError(ValueError):
    """A region partition has no pixels left for the requested operation."""


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


def _single_channel(x: torch.Tensor, name: str) -> torch.Tensor:
    """Normalize a (H, W) or (1, H, W) tensor to (1, H, W)."""
    t = torch.as_tensor(x)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3 or t.shape[0] != 1:
        raise ValueError(f"{name} must be (H, W) or (1, H, W), got {tuple(t.shape)}")
    return t


@dataclass
class VideoClip:
    """A sequence of RGB frames, shape (T, 3, H, W) with values in [0, 1]."""

    frames: torch.Tensor
    frame_rate: float = 24.0  # informational only

    def __post_init__(self):
        f = torch.as_tensor(self.frames, dtype=torch.float32)
        if f.ndim != 4 or f.shape[1] != 3:
            raise ValueError(f"frames must be (T, 3, H, W), got {tuple(f.shape)}")
        if f.shape[0] < 1:
            raise ValueError("a clip needs at least one frame")
        _check_finite("frames", f)
        if f.min() < 0 or f.max() > 1:
            raise ValueError("frame values must lie in [0, 1]")
        h, w = f.shape[2], f.shape[3]
        if h % ENCODER_STRIDE or w % ENCODER_STRIDE:
            raise ValueError(
                f"H and W must be divisible by {ENCODER_STRIDE}, got {h}x{w}"
            )
        self.frames = f

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]


@dataclass
class AlphaSequence:
    """Per-frame alpha mattes, shape (T, 1, H, W), clamped to [0, 1]."""

    alpha: torch.Tensor

    def __post_init__(self):
        a = torch.as_tensor(self.alpha, dtype=torch.float32)
        if a.ndim != 4 or a.shape[1] != 1:
            raise ValueError(f"alpha must be (T, 1, H, W), got {tuple(a.shape)}")
        _check_finite("alpha", a)
        self.alpha = a.clamp(0.0, 1.0)

    def __len__(self) -> int:
        return self.alpha.shape[0]


@dataclass
class SegMaskSequence:
    """Per-frame binary segmentation masks, shape (T, 1, H, W), values in {0, 1}."""

    mask: torch.Tensor

    def __post_init__(self):
        m = torch.as_tensor(self.mask, dtype=torch.float32)
        if m.ndim != 4 or m.shape[1] != 1:
            raise ValueError(f"mask must be (T, 1, H, W), got {tuple(m.shape)}")
        if m.shape[0] < 1:
            raise ValueError("mask sequence needs at least one frame")
        if not torch.logical_or(m == 0, m == 1).all():
            raise ValueError("mask values must be exactly 0 or 1")
        self.mask = m

    def __len__(self) -> int:
        return self.mask.shape[0]


@dataclass
class RegionPartition:
    """Disjoint pixel labeling into core foreground / core background / boundary.

    All three masks are (1, H, W) binary tensors; together they cover every
    pixel exactly once.
    """

    core_fg: torch.Tensor
    core_bg: torch.Tensor
    boundary: torch.Tensor

    def __post_init__(self):
        fg = _single_channel(self.core_fg, "core_fg").float()
        bg = _single_channel(self.core_bg, "core_bg").float()
        bd = _single_channel(self.boundary, "boundary").float()
        if fg.shape != bg.shape or fg.shape != bd.shape:
            raise ValueError("partition masks must share one shape")
        total = fg + bg + bd
        if not torch.all(total == 1.0):
            raise ValueError("partition masks must be disjoint and cover all pixels")
        self.core_fg, self.core_bg, self.boundary = fg, bg, bd

    @property
    def core(self) -> torch.Tensor:
        """Union of core foreground and core background."""
        return self.core_fg + self.core_bg


def make_region_partition(
    alpha: torch.Tensor, fg_thresh: float = 0.99, bg_thresh: float = 0.01
) -> RegionPartition:
    """Split one alpha frame into core-fg / core-bg / boundary by thresholds."""
    if not 0.0 <= bg_thresh < fg_thresh <= 1.0:
        raise ValueError(
            f"need 0 <= bg_thresh < fg_thresh <= 1, got ({fg_thresh}, {bg_thresh})"
        )
    a = _single_channel(alpha, "alpha").float()
    _check_finite("alpha", a)
    core_fg = a >= fg_thresh
    core_bg = a <= bg_thresh
    boundary = ~(core_fg | core_bg)
    return RegionPartition(core_fg.float(), core_bg.float(), boundary.float())


def trimap_from_segmask(mask: torch.Tensor, kernel: int) -> RegionPartition:
    """Erode/dilate a binary mask into a trimap-style partition.

    core_fg = erode(mask, kernel), core_bg = complement of dilate(mask, kernel),
    boundary = dilate minus erode. kernel must be odd; kernel 1 is the identity.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    m = _single_channel(mask, "mask").float()
    if not torch.logical_or(m == 0, m == 1).all():
        raise ValueError("mask values must be exactly 0 or 1")
    m_np = m[0].numpy().astype(np.uint8)
    if kernel == 1:
        eroded, dilated = m_np, m_np
    else:
        # outside the canvas counts as background for both operations
        element = np.ones((kernel, kernel), dtype=np.uint8)
        eroded = cv2.erode(m_np, element, borderType=cv2.BORDER_CONSTANT, borderValue=0)
        dilated = cv2.dilate(m_np, element, borderType=cv2.BORDER_CONSTANT, borderValue=0)
    core_fg = torch.from_numpy(eroded).float().unsqueeze(0)
    dil = torch.from_numpy(dilated).float().unsqueeze(0)
    core_bg = 1.0 - dil
    boundary = dil - core_fg
    return RegionPartition(core_fg, core_bg, boundary)


def binarize_alpha(alpha: torch.Tensor, threshold_255: int) -> torch.Tensor:
    """Threshold an alpha frame on the 8-bit scale: mask = (alpha*255 >= t)."""
    if not 0 <= threshold_255 <= 255:
        raise ValueError(f"threshold must lie in [0, 255], got {threshold_255}")
    a = _single_channel(alpha, "alpha").float()
    _check_finite("alpha", a)
    return (a * 255.0 >= threshold_255).float()
