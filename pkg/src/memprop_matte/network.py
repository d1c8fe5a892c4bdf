"""Desk-scale neural blocks for memory-propagation matting.

Small configurable convolutional stacks stand in for full pretrained
backbones; the mechanism, not capacity, is what this package exercises.
All modules are batch-first: frames (B, 3, H, W), maps (B, C, h, w).
"""

from __future__ import annotations

import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ENCODER_STRIDE
from .memory import ChangeProbabilityMap, map_from_tokens, tokens_from_map

CHECKPOINT_FORMAT = "memprop-matte-v1"


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or wrong-format checkpoint files."""


@dataclass
class ModelConfig:
    """Channel widths and block counts for every network component."""

    enc_channels: tuple[int, ...] = (16, 32, 64, 96, 128)  # strides 1,2,4,8,16
    key_channels: int = 32
    value_channels: int = 64
    value_enc_channels: tuple[int, ...] = (8, 16, 32, 64)
    decoder_channels: tuple[int, ...] = (96, 64, 32, 16)  # strides 8,4,2,1
    fusion_blocks: int = 1
    fusion_heads: int = 2
    change_head_channels: int = 32

    def __post_init__(self):
        if len(self.enc_channels) != 5:
            raise ValueError("enc_channels needs 5 entries (strides 1..16)")
        if len(self.value_enc_channels) != 4:
            raise ValueError("value_enc_channels needs 4 entries")
        if len(self.decoder_channels) != 4:
            raise ValueError("decoder_channels needs 4 entries (strides 8..1)")
        widths = (
            *self.enc_channels,
            self.key_channels,
            self.value_channels,
            *self.value_enc_channels,
            *self.decoder_channels,
            self.change_head_channels,
        )
        if any(w < 1 for w in widths):
            raise ValueError("all channel widths must be >= 1")
        if self.fusion_blocks < 0:
            raise ValueError("fusion_blocks must be >= 0")
        if self.fusion_heads < 1 or self.value_channels % self.fusion_heads:
            raise ValueError("fusion_heads must divide value_channels")


@dataclass
class FeaturePyramid:
    """Encoder features at strides 16/8/4/2/1; f16 is the key/query source."""

    f16: torch.Tensor
    f8: torch.Tensor
    f4: torch.Tensor
    f2: torch.Tensor
    f1: torch.Tensor


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)


class FrameEncoder(nn.Module):
    """Five-stage conv stack producing the skip pyramid down to stride 16."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.enc_channels
        self.stage1 = nn.Sequential(_conv(3, c[0]), nn.ReLU(), _conv(c[0], c[0]), nn.ReLU())
        self.stage2 = nn.Sequential(_conv(c[0], c[1], 2), nn.ReLU(), _conv(c[1], c[1]), nn.ReLU())
        self.stage4 = nn.Sequential(_conv(c[1], c[2], 2), nn.ReLU(), _conv(c[2], c[2]), nn.ReLU())
        self.stage8 = nn.Sequential(_conv(c[2], c[3], 2), nn.ReLU(), _conv(c[3], c[3]), nn.ReLU())
        self.stage16 = nn.Sequential(_conv(c[3], c[4], 2), nn.ReLU(), _conv(c[4], c[4]), nn.ReLU())

    def forward(self, frame: torch.Tensor) -> FeaturePyramid:
        f1 = self.stage1(frame)
        f2 = self.stage2(f1)
        f4 = self.stage4(f2)
        f8 = self.stage8(f4)
        f16 = self.stage16(f8)
        return FeaturePyramid(f16=f16, f8=f8, f4=f4, f2=f2, f1=f1)


class ChangeProbHead(nn.Module):
    """Change-probability prediction: one 1x1 conv and two 3x3 convs.

    Input is the concatenation of the current key map, the previous key map
    and the previous alpha matte area-downsampled to the token grid.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cin = 2 * cfg.key_channels + 1
        mid = cfg.change_head_channels
        self.net = nn.Sequential(
            nn.Conv2d(cin, mid, kernel_size=1),
            nn.ReLU(),
            _conv(mid, mid),
            nn.ReLU(),
            _conv(mid, 1),
        )

    def forward(
        self, key_cur: torch.Tensor, key_prev: torch.Tensor, alpha_prev: torch.Tensor
    ) -> torch.Tensor:
        if key_cur.shape != key_prev.shape:
            raise ValueError(
                f"key map shapes differ: {tuple(key_cur.shape)} vs {tuple(key_prev.shape)}"
            )
        alpha_small = F.avg_pool2d(alpha_prev, ENCODER_STRIDE)
        if alpha_small.shape[-2:] != key_cur.shape[-2:]:
            raise ValueError("previous alpha does not match the key grid after pooling")
        return self.net(torch.cat([key_cur, key_prev, alpha_small], dim=1))


class TokenSelfAttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention + feed-forward over value tokens."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm_attn = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, 2 * channels), nn.ReLU(), nn.Linear(2 * channels, channels)
        )

    def forward(
        self, tokens: torch.Tensor, context: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (tokens, attention); context tokens extend keys/values only."""
        b, n, c = tokens.shape
        h = self.heads
        d = c // h
        source = tokens if context is None else torch.cat([tokens, context], dim=1)
        q = self.qkv(self.norm_attn(tokens))[..., :c]
        kv = self.qkv(self.norm_attn(source))[..., c:]
        k, v = kv[..., :c], kv[..., c:]
        m = source.shape[1]
        q = q.reshape(b, n, h, d).transpose(1, 2)
        k = k.reshape(b, m, h, d).transpose(1, 2)
        v = v.reshape(b, m, h, d).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / d**0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        tokens = tokens + self.proj(out)
        tokens = tokens + self.ffn(self.norm_ffn(tokens))
        return tokens, attn


class ObjectFusion(nn.Module):
    """Stack of token self-attention blocks refining the pixel read-out.

    A simplified stand-in for an object-level transformer: with zero blocks
    it is the identity. Optional conditioning tokens (the first-frame value
    tokens) join the attention keys/values of every block.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            TokenSelfAttentionBlock(cfg.value_channels, cfg.fusion_heads)
            for _ in range(cfg.fusion_blocks)
        )

    def forward(
        self,
        readout: torch.Tensor,
        context_tokens: torch.Tensor | None = None,
        return_attn: bool = False,
    ):
        h, w = readout.shape[-2:]
        tokens = tokens_from_map(readout)
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
        if context_tokens is not None and context_tokens.ndim == 2:
            context_tokens = context_tokens.unsqueeze(0)
        attns = []
        for block in self.blocks:
            tokens, attn = block(tokens, context_tokens)
            attns.append(attn)
        if squeeze:
            tokens = tokens.squeeze(0)
        out = map_from_tokens(tokens, h, w)
        if return_attn:
            return out, attns
        return out


class UpsampleStage(nn.Module):
    """Bilinear x2 upsample, concat the skip feature, one 3x3 conv."""

    def __init__(self, cin: int, skip: int, cout: int):
        super().__init__()
        self.conv = _conv(cin + skip, cout)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.relu(self.conv(torch.cat([x, skip], dim=1)))


class MattingDecoder(nn.Module):
    """Four upsampling stages from stride 16 to full resolution.

    Produces a sigmoid-bounded alpha matte plus parallel segmentation logits
    from an independent projection off the shared trunk.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        enc = cfg.enc_channels
        dec = cfg.decoder_channels
        self.stages = nn.ModuleList(
            [
                UpsampleStage(cfg.value_channels, enc[3], dec[0]),  # 16 -> 8
                UpsampleStage(dec[0], enc[2], dec[1]),  # 8 -> 4
                UpsampleStage(dec[1], enc[1], dec[2]),  # 4 -> 2
                UpsampleStage(dec[2], enc[0], dec[3]),  # 2 -> 1
            ]
        )
        self.alpha_proj = _conv(dec[3], 1)
        self.seg_proj = _conv(dec[3], 1)

    def forward(
        self, fused: torch.Tensor, pyramid: FeaturePyramid
    ) -> tuple[torch.Tensor, torch.Tensor]:
        skips = (pyramid.f8, pyramid.f4, pyramid.f2, pyramid.f1)
        x = fused
        for stage, skip in zip(self.stages, skips):
            x = stage(x, skip)
        alpha = torch.sigmoid(self.alpha_proj(x))
        seg_logits = self.seg_proj(x)
        return alpha, seg_logits


class ValueEncoder(nn.Module):
    """Encodes a full-resolution alpha matte together with frame features.

    The matte runs through a stride-16 conv stack; the result is fused with
    the encoder's f16 features by a 1x1 projection into value channels.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.value_enc_channels
        self.alpha_stack = nn.Sequential(
            _conv(1, c[0], 2), nn.ReLU(),
            _conv(c[0], c[1], 2), nn.ReLU(),
            _conv(c[1], c[2], 2), nn.ReLU(),
            _conv(c[2], c[3], 2), nn.ReLU(),
        )
        self.fuse = nn.Conv2d(cfg.enc_channels[4] + c[3], cfg.value_channels, kernel_size=1)

    def forward(self, pyramid: FeaturePyramid, alpha: torch.Tensor) -> torch.Tensor:
        if alpha.min() < 0 or alpha.max() > 1:
            raise ValueError("alpha values must lie in [0, 1]")
        a16 = self.alpha_stack(alpha)
        if a16.shape[-2:] != pyramid.f16.shape[-2:]:
            raise ValueError("alpha resolution does not match the frame features")
        return self.fuse(torch.cat([pyramid.f16, a16], dim=1))


class MattingNetwork(nn.Module):
    """All trainable blocks wired together; propagation loops live elsewhere."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = FrameEncoder(self.cfg)
        self.key_proj = nn.Conv2d(self.cfg.enc_channels[4], self.cfg.key_channels, 1)
        self.change_head = ChangeProbHead(self.cfg)
        self.fusion = ObjectFusion(self.cfg)
        self.decoder = MattingDecoder(self.cfg)
        self.value_encoder = ValueEncoder(self.cfg)

    def encode_frame(self, frame: torch.Tensor) -> tuple[FeaturePyramid, torch.Tensor]:
        """Returns the skip pyramid and the key/query map (B, C_k, H', W')."""
        h, w = frame.shape[-2:]
        if h % ENCODER_STRIDE or w % ENCODER_STRIDE:
            raise ValueError(
                f"frame size must be divisible by {ENCODER_STRIDE}, got {h}x{w}"
            )
        pyramid = self.encoder(frame)
        return pyramid, self.key_proj(pyramid.f16)

    def predict_change_probability(
        self, key_cur: torch.Tensor, key_prev: torch.Tensor, alpha_prev: torch.Tensor
    ) -> ChangeProbabilityMap:
        logits = self.change_head(key_cur, key_prev, alpha_prev)
        return ChangeProbabilityMap(probs=torch.sigmoid(logits), logits=logits)

    def object_fusion(
        self,
        readout: torch.Tensor,
        context_tokens: torch.Tensor | None = None,
        return_attn: bool = False,
    ):
        return self.fusion(readout, context_tokens, return_attn=return_attn)

    def decode_alpha(
        self, fused: torch.Tensor, pyramid: FeaturePyramid
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.decoder(fused, pyramid)

    def encode_value(self, pyramid: FeaturePyramid, alpha: torch.Tensor) -> torch.Tensor:
        return self.value_encoder(pyramid, alpha)


def save_weights(model: MattingNetwork, path: Path, extra: dict | None = None) -> None:
    """Write a flat named-parameter archive with shape metadata and config echo."""
    params = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "params": params,
        "shapes": {name: tuple(a.shape) for name, a in params.items()},
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)


def read_checkpoint(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            payload = pickle.load(fh)
    except FileNotFoundError:
        raise
    except Exception as exc:  # truncated or non-pickle file
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path} is not a {CHECKPOINT_FORMAT!r} checkpoint "
            f"(header: {payload.get('format') if isinstance(payload, dict) else None!r})"
        )
    return payload


def load_weights(path: Path) -> MattingNetwork:
    """Reconstruct a model from an archive written by save_weights."""
    payload = read_checkpoint(path)
    cfg_dict = dict(payload["config"])
    for key in ("enc_channels", "value_enc_channels", "decoder_channels"):
        cfg_dict[key] = tuple(cfg_dict[key])
    model = MattingNetwork(ModelConfig(**cfg_dict))
    state = {name: torch.from_numpy(np.array(a)) for name, a in payload["params"].items()}
    model.load_state_dict(state)
    return model
