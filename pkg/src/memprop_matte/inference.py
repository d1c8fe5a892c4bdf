"""Sequential video propagation with memory updates and first-frame warm-up."""

from __future__ import annotations

import torch

from .core import AlphaSequence, VideoClip
from .memory import (
    ChangeProbabilityMap,
    LastFrameMemory,
    MemoryBank,
    compute_affinity,
    fuse_memory,
    map_from_tokens,
    read_memory,
    tokens_from_map,
)
from .network import MattingNetwork

DEFAULT_WARMUP_ITERS = 10
DEFAULT_MEMORY_INTERVAL = 5
DEFAULT_MEMORY_CAPACITY = 8


@torch.no_grad()
def warmup_first_frame(
    frame: torch.Tensor,
    first_mask: torch.Tensor,
    model: MattingNetwork,
    n: int = DEFAULT_WARMUP_ITERS,
    return_history: bool = False,
):
    """Recurrent refinement of the first-frame matte.

    The first frame is run `n` times; each repetition re-encodes the previous
    matte into memory and predicts again, and only the n-th output is kept.
    With n=1 this is the plain single-pass first-frame prediction.
    """
    if n < 1:
        raise ValueError("warm-up needs n >= 1")
    model.eval()
    x = frame.unsqueeze(0)
    pyramid, key = model.encode_frame(x)
    h16, w16 = key.shape[-2:]
    query = tokens_from_map(key)
    alpha = first_mask.float().unsqueeze(0)
    history = []
    for _ in range(n):
        value = model.encode_value(pyramid, alpha)
        value_tokens = tokens_from_map(value)
        affinity = compute_affinity(query, tokens_from_map(key))
        readout = map_from_tokens(read_memory(affinity, value_tokens), h16, w16)
        fused = model.object_fusion(readout, value_tokens)
        alpha, _ = model.decode_alpha(fused, pyramid)
        history.append(alpha[0].clone())
    if return_history:
        return alpha[0], history
    return alpha[0]


@torch.no_grad()
def propagate(
    clip: VideoClip,
    first_mask: torch.Tensor,
    model: MattingNetwork,
    memory_interval: int = DEFAULT_MEMORY_INTERVAL,
    capacity: int = DEFAULT_MEMORY_CAPACITY,
    warmup_iters: int = DEFAULT_WARMUP_ITERS,
    change_override: float | None = None,
) -> AlphaSequence:
    """Propagate a first-frame guidance mask through a clip.

    Frame 0 is refined by the warm-up loop and seeds the alpha memory bank;
    subsequent frames run encode -> affinity read-out -> change prediction ->
    region-adaptive fusion -> object fusion -> decode, with the bank updated
    on the `memory_interval` cadence and the last-frame memory every frame.
    `change_override` pins the change probability of frames >= 1 (testing).
    """
    mask = first_mask if first_mask.ndim == 3 else first_mask.unsqueeze(0)
    if mask.shape[-2:] != clip.frames.shape[-2:]:
        raise ValueError(
            f"mask size {tuple(mask.shape[-2:])} does not match clip "
            f"{tuple(clip.frames.shape[-2:])}"
        )
    if mask.sum() == 0:
        raise ValueError("guidance mask is empty: no target assigned")
    model.eval()

    alpha0 = warmup_first_frame(clip.frames[0], mask, model, n=warmup_iters)

    x0 = clip.frames[0].unsqueeze(0)
    pyramid0, key0 = model.encode_frame(x0)
    h16, w16 = key0.shape[-2:]
    value0 = model.encode_value(pyramid0, alpha0.unsqueeze(0))

    bank = MemoryBank(update_interval=memory_interval, capacity=capacity)
    bank.add(tokens_from_map(key0[0]), tokens_from_map(value0[0]), frame_index=0)
    last = LastFrameMemory(key=key0, value=value0, alpha=alpha0.unsqueeze(0))

    outputs = [alpha0]
    for t in range(1, len(clip)):
        x = clip.frames[t].unsqueeze(0)
        pyramid, key = model.encode_frame(x)
        query = tokens_from_map(key[0])
        affinity = compute_affinity(query, bank.keys)
        readout = map_from_tokens(read_memory(affinity, bank.values), h16, w16).unsqueeze(0)
        if change_override is None:
            change = model.predict_change_probability(key, last.key, last.alpha)
        else:
            change = ChangeProbabilityMap(
                probs=torch.full((1, 1, h16, w16), float(change_override))
            )
        fused = fuse_memory(readout, last.value, change.probs)
        refined = model.object_fusion(fused, bank.first_frame_values)
        alpha, _ = model.decode_alpha(refined, pyramid)
        value = model.encode_value(pyramid, alpha)
        bank.update(tokens_from_map(key[0]), tokens_from_map(value[0]), frame_index=t)
        last = LastFrameMemory(key=key, value=fused, alpha=alpha)
        outputs.append(alpha[0])
    return AlphaSequence(torch.stack(outputs))
