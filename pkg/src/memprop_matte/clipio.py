"""On-disk clip layout and manifests.

A clip lives in a directory named after its id:

    <clip_id>/frames/%05d.png   8-bit RGB
    <clip_id>/alpha/%05d.png    16-bit grayscale (lossless alpha round-trip)
    <clip_id>/mask/%05d.png     8-bit binary (0 / 255)

A manifest is a JSON file listing clips with split and data_kind tags; all
paths inside it are relative to the manifest's own directory.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .core import AlphaSequence, SegMaskSequence, VideoClip

FRAME_PATTERN = "%05d.png"
ALPHA_MAX = 65535.0


def save_frame(path: Path, frame: torch.Tensor) -> None:
    """Write one (3, H, W) float frame as an 8-bit RGB PNG."""
    rgb = (frame.clamp(0, 1).numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


def load_frame(path: Path) -> torch.Tensor:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"unable to read frame image: {path}")
    rgb = cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
    return torch.from_numpy(rgb.transpose(2, 0, 1))


def save_alpha_frame(path: Path, alpha: torch.Tensor) -> None:
    """Write one (1, H, W) alpha frame as a 16-bit grayscale PNG."""
    a = (alpha.clamp(0, 1)[0].numpy() * ALPHA_MAX).round().astype(np.uint16)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), a):
        raise OSError(f"failed to write {path}")


def load_alpha_frame(path: Path) -> torch.Tensor:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"unable to read alpha image: {path}")
    if img.ndim != 2:
        raise ValueError(f"alpha image must be single channel: {path}")
    scale = ALPHA_MAX if img.dtype == np.uint16 else 255.0
    return torch.from_numpy(img.astype(np.float32) / scale).unsqueeze(0)


def save_mask_frame(path: Path, mask: torch.Tensor) -> None:
    """Write one (1, H, W) binary mask as an 8-bit PNG with values 0/255."""
    m = (mask[0].numpy() > 0.5).astype(np.uint8) * 255
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), m):
        raise OSError(f"failed to write {path}")


def load_mask_frame(path: Path) -> torch.Tensor:
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise FileNotFoundError(f"unable to read mask image: {path}")
    return torch.from_numpy((img > 127).astype(np.float32)).unsqueeze(0)


def save_clip(
    root: Path,
    clip_id: str,
    clip: VideoClip | None = None,
    alpha: AlphaSequence | None = None,
    mask: SegMaskSequence | None = None,
) -> Path:
    """Write the available streams of a clip under root/clip_id/."""
    clip_dir = Path(root) / clip_id
    if clip is not None:
        for t in range(len(clip)):
            save_frame(clip_dir / "frames" / (FRAME_PATTERN % t), clip.frames[t])
    if alpha is not None:
        for t in range(len(alpha)):
            save_alpha_frame(clip_dir / "alpha" / (FRAME_PATTERN % t), alpha.alpha[t])
    if mask is not None:
        for t in range(len(mask)):
            save_mask_frame(clip_dir / "mask" / (FRAME_PATTERN % t), mask.mask[t])
    return clip_dir


def _sorted_pngs(directory: Path) -> list[Path]:
    return sorted(Path(directory).glob("*.png"))


def load_clip_frames(clip_dir: Path) -> VideoClip:
    paths = _sorted_pngs(Path(clip_dir) / "frames")
    if not paths:
        raise FileNotFoundError(f"no frame images under {clip_dir}/frames")
    return VideoClip(torch.stack([load_frame(p) for p in paths]))


def load_clip_alpha(clip_dir: Path) -> AlphaSequence:
    paths = _sorted_pngs(Path(clip_dir) / "alpha")
    if not paths:
        raise FileNotFoundError(f"no alpha images under {clip_dir}/alpha")
    return AlphaSequence(torch.stack([load_alpha_frame(p) for p in paths]))


def load_clip_mask(clip_dir: Path) -> SegMaskSequence:
    paths = _sorted_pngs(Path(clip_dir) / "mask")
    if not paths:
        raise FileNotFoundError(f"no mask images under {clip_dir}/mask")
    return SegMaskSequence(torch.stack([load_mask_frame(p) for p in paths]))


@dataclass
class ClipEntry:
    """One clip in a manifest; directory paths are relative to the manifest."""

    clip_id: str
    split: str  # train | val | test
    data_kind: str  # matting | segmentation
    num_frames: int
    frames_dir: str
    alpha_dir: str | None = None
    mask_dir: str | None = None

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.data_kind not in ("matting", "segmentation"):
            raise ValueError(f"unknown data_kind {self.data_kind!r}")


@dataclass
class ClipManifest:
    clips: list[ClipEntry] = field(default_factory=list)
    seed: int | None = None

    def by_split(self, split: str) -> list[ClipEntry]:
        return [c for c in self.clips if c.split == split]

    def by_kind(self, data_kind: str, split: str | None = None) -> list[ClipEntry]:
        return [
            c
            for c in self.clips
            if c.data_kind == data_kind and (split is None or c.split == split)
        ]

    def validate(self, root: Path) -> None:
        """Check referenced directories exist and frame counts agree."""
        root = Path(root)
        for entry in self.clips:
            streams = {"frames": entry.frames_dir}
            if entry.alpha_dir:
                streams["alpha"] = entry.alpha_dir
            if entry.mask_dir:
                streams["mask"] = entry.mask_dir
            for name, rel in streams.items():
                directory = root / rel
                count = len(_sorted_pngs(directory))
                if count == 0:
                    raise FileNotFoundError(
                        f"clip {entry.clip_id}: missing {name} images in {directory}"
                    )
                if count != entry.num_frames:
                    raise ValueError(
                        f"clip {entry.clip_id}: {name} stream has {count} frames, "
                        f"manifest says {entry.num_frames}"
                    )


def write_manifest(path: Path, manifest: ClipManifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"seed": manifest.seed, "clips": [asdict(c) for c in manifest.clips]}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(path: Path) -> ClipManifest:
    payload = json.loads(Path(path).read_text())
    clips = [ClipEntry(**c) for c in payload["clips"]]
    return ClipManifest(clips=clips, seed=payload.get("seed"))


def manifest_root(path: Path) -> Path:
    return Path(path).resolve().parent
