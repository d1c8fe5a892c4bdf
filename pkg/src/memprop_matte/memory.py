"""Alpha memory bank: affinity read-out, change masks and region-adaptive fusion.

Token tensors are (N, C) matrices, optionally with a leading batch axis
(B, N, C). Spatial maps are (C, H', W') or (B, C, H', W') at the 1/16 scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

MEMORY_STRIDE = 16


class EmptyMemoryError(ValueError):
    """Raised when querying a memory bank that holds no tokens."""


def tokens_from_map(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C) or (C, H, W) -> (H*W, C).

    The result is contiguous so downstream matmuls take the same kernel path
    regardless of where the tokens came from (bitwise reproducibility).
    """
    if x.ndim == 3:
        c, h, w = x.shape
        return x.reshape(c, h * w).transpose(0, 1).contiguous()
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(1, 2).contiguous()


def map_from_tokens(t: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """(B, H*W, C) -> (B, C, H, W) or (H*W, C) -> (C, H, W)."""
    if t.ndim == 2:
        return t.transpose(0, 1).reshape(t.shape[1], height, width)
    return t.transpose(1, 2).reshape(t.shape[0], t.shape[2], height, width)


def compute_affinity(
    query: torch.Tensor, keys: torch.Tensor, scale: float | None = None
) -> torch.Tensor:
    """Row-stochastic attention of query tokens over memory key tokens.

    Similarity is the negative squared L2 distance scaled by 1/sqrt(C_k)
    (override via `scale`), normalized with a softmax over the memory axis.
    Accepts (Nq, C)/(N, C) or batched (B, Nq, C)/(B, N, C).
    """
    squeeze = query.ndim == 2
    q = query.unsqueeze(0) if squeeze else query
    k = keys.unsqueeze(0) if squeeze else keys
    if q.ndim != 3 or k.ndim != 3:
        raise ValueError("query and keys must be (N, C) or (B, N, C)")
    if k.shape[-2] == 0:
        raise EmptyMemoryError("memory bank holds no tokens")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"channel mismatch: query C={q.shape[-1]}, keys C={k.shape[-1]}"
        )
    if not torch.isfinite(q).all() or not torch.isfinite(k).all():
        raise ValueError("non-finite values in query or keys")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    # -||q - k||^2 = 2 q.k - ||q||^2 - ||k||^2
    sim = 2.0 * (q @ k.transpose(1, 2)) - (q * q).sum(-1, keepdim=True)
    sim = sim - (k * k).sum(-1).unsqueeze(1)
    sim = sim * scale
    affinity = torch.softmax(sim, dim=-1)
    return affinity.squeeze(0) if squeeze else affinity


def read_memory(affinity: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Weighted sum of memory values: each output token is a convex combination."""
    if affinity.shape[-1] != values.shape[-2]:
        raise ValueError(
            f"affinity has {affinity.shape[-1]} memory columns but values hold "
            f"{values.shape[-2]} tokens"
        )
    return affinity @ values


def ground_truth_change_mask(
    prev_alpha: torch.Tensor,
    cur_alpha: torch.Tensor,
    delta: float | None = None,
    data_kind: str = "matting",
    stride: int = MEMORY_STRIDE,
) -> torch.Tensor:
    """Per-token binary map of where alpha changed between two GT frames.

    The full-resolution change mask is |prev - cur| >= delta (strictly > 0
    when delta is 0, so that "no change" never fires), then area-downsampled
    by `stride` and re-binarized at > 0. Default delta is 0.001 for matting
    data (quantization noise tolerance) and 0 for segmentation data.
    """
    if delta is None:
        if data_kind == "matting":
            delta = 1e-3
        elif data_kind == "segmentation":
            delta = 0.0
        else:
            raise ValueError(f"unknown data_kind {data_kind!r}")
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if prev_alpha.shape != cur_alpha.shape:
        raise ValueError(
            f"shape mismatch: {tuple(prev_alpha.shape)} vs {tuple(cur_alpha.shape)}"
        )
    squeeze_to = prev_alpha.ndim
    prev, cur = prev_alpha.float(), cur_alpha.float()
    while prev.ndim < 4:  # (H,W) / (1,H,W) / (B,1,H,W) all accepted
        prev, cur = prev.unsqueeze(0), cur.unsqueeze(0)
    diff = (prev - cur).abs()
    changed = diff >= delta if delta > 0 else diff > 0
    pooled = F.avg_pool2d(changed.float(), stride)
    binary = (pooled > 0).float()
    while binary.ndim > squeeze_to:
        binary = binary.squeeze(0)
    return binary


def fuse_memory(
    values_mem: torch.Tensor, values_prev: torch.Tensor, change_prob: torch.Tensor
) -> torch.Tensor:
    """Soft merge of bank read-out and last-frame values by change probability.

    P = values_mem * u + values_prev * (1 - u), with u broadcast over channels.
    Maps are (..., C, H, W) with change_prob (..., 1, H, W).
    """
    if values_mem.shape != values_prev.shape:
        raise ValueError(
            f"value shape mismatch: {tuple(values_mem.shape)} vs "
            f"{tuple(values_prev.shape)}"
        )
    if change_prob.shape[-2:] != values_mem.shape[-2:] or change_prob.shape[-3] != 1:
        raise ValueError(
            f"change_prob shape {tuple(change_prob.shape)} does not broadcast over "
            f"values {tuple(values_mem.shape)}"
        )
    if change_prob.min() < 0 or change_prob.max() > 1:
        raise ValueError("change probabilities must lie in [0, 1]")
    return values_mem * change_prob + values_prev * (1.0 - change_prob)


@dataclass
class ChangeProbabilityMap:
    """Predicted per-token change probability with the raw logits retained.

    `probs` is post-sigmoid, (..., 1, H', W'). `logits` is None when the map
    was forced (first frame) rather than predicted.
    """

    probs: torch.Tensor
    logits: torch.Tensor | None = None

    def __post_init__(self):
        if self.probs.min() < 0 or self.probs.max() > 1:
            raise ValueError("change probabilities must lie in [0, 1]")


@dataclass
class LastFrameMemory:
    """Per-frame state refreshed on every frame without exception.

    `value` carries the propagated value stream (the previous frame's fused
    read-out), so forcing the change probability to zero holds the decoded
    value stream constant. `key` and `alpha` feed the change-prediction head.
    """

    key: torch.Tensor
    value: torch.Tensor
    alpha: torch.Tensor


@dataclass
class MemoryBank:
    """Time-stacked key/value tokens updated every `update_interval` frames.

    The first stored frame is the target anchor and is never evicted; beyond
    `capacity` stored frames the oldest non-first frame is dropped.
    """

    update_interval: int = 5
    capacity: int = 8
    _keys: list[torch.Tensor] = field(default_factory=list)
    _values: list[torch.Tensor] = field(default_factory=list)
    _frames: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    def __len__(self) -> int:
        return len(self._frames)

    @property
    def stored_frames(self) -> list[int]:
        return list(self._frames)

    @property
    def keys(self) -> torch.Tensor:
        if not self._keys:
            raise EmptyMemoryError("memory bank holds no tokens")
        return torch.cat(self._keys, dim=-2)

    @property
    def values(self) -> torch.Tensor:
        if not self._values:
            raise EmptyMemoryError("memory bank holds no tokens")
        return torch.cat(self._values, dim=-2)

    @property
    def first_frame_values(self) -> torch.Tensor:
        if not self._values:
            raise EmptyMemoryError("memory bank holds no tokens")
        return self._values[0]

    def add(self, key: torch.Tensor, value: torch.Tensor, frame_index: int) -> None:
        """Store tokens unconditionally (used for the first-frame seed)."""
        if key.shape[-2] != value.shape[-2]:
            raise ValueError(
                f"token count mismatch: keys {key.shape[-2]}, values {value.shape[-2]}"
            )
        self._keys.append(key)
        self._values.append(value)
        self._frames.append(frame_index)
        while len(self._frames) > self.capacity:
            # evict the oldest non-first frame; frame 0 is the target anchor
            del self._keys[1], self._values[1], self._frames[1]

    def update(self, key: torch.Tensor, value: torch.Tensor, frame_index: int) -> bool:
        """Store tokens iff the frame lands on the update cadence.

        Returns True when the bank was modified.
        """
        if frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        if frame_index % self.update_interval != 0 and frame_index != 0:
            return False
        self.add(key, value, frame_index)
        return True
