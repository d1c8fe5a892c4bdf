import numpy as np
import pytest
import torch

from memprop_matte import clipio
from memprop_matte.core import AlphaSequence, SegMaskSequence, VideoClip


def _toy_streams(t=3, h=16, w=16, seed=0):
    rng = np.random.default_rng(seed)
    clip = VideoClip(torch.from_numpy(rng.random((t, 3, h, w), dtype=np.float32)))
    alpha = AlphaSequence(torch.from_numpy(rng.random((t, 1, h, w), dtype=np.float32)))
    mask = SegMaskSequence(
        torch.from_numpy((rng.random((t, 1, h, w)) > 0.5).astype(np.float32))
    )
    return clip, alpha, mask


def test_roundtrip_all_streams(tmp_path):
    clip, alpha, mask = _toy_streams()
    clipio.save_clip(tmp_path, "clip0", clip=clip, alpha=alpha, mask=mask)
    loaded_clip = clipio.load_clip_frames(tmp_path / "clip0")
    loaded_alpha = clipio.load_clip_alpha(tmp_path / "clip0")
    loaded_mask = clipio.load_clip_mask(tmp_path / "clip0")
    # frames quantized to 8 bit, alpha to 16 bit, masks exactly
    assert (loaded_clip.frames - clip.frames).abs().max() <= 0.5 / 255 + 1e-6
    assert (loaded_alpha.alpha - alpha.alpha).abs().max() <= 0.5 / 65535 + 1e-7
    assert torch.equal(loaded_mask.mask, mask.mask)


def test_alpha_16bit_precision_beats_8bit(tmp_path):
    alpha = AlphaSequence(torch.full((1, 1, 16, 16), 1.0 / 300.0))
    clipio.save_clip(tmp_path, "c", alpha=alpha)
    loaded = clipio.load_clip_alpha(tmp_path / "c")
    assert (loaded.alpha - alpha.alpha).abs().max() < 1.0 / 255.0 / 2


def test_manifest_roundtrip(tmp_path):
    clip, alpha, mask = _toy_streams()
    clipio.save_clip(tmp_path, "clip0", clip=clip, alpha=alpha, mask=mask)
    manifest = clipio.ClipManifest(
        clips=[
            clipio.ClipEntry(
                clip_id="clip0",
                split="train",
                data_kind="matting",
                num_frames=3,
                frames_dir="clip0/frames",
                alpha_dir="clip0/alpha",
                mask_dir="clip0/mask",
            )
        ],
        seed=42,
    )
    path = tmp_path / "manifest.json"
    clipio.write_manifest(path, manifest)
    loaded = clipio.read_manifest(path)
    assert loaded.seed == 42
    assert loaded.clips == manifest.clips
    loaded.validate(tmp_path)


def test_manifest_validate_missing_stream(tmp_path):
    clip, _, _ = _toy_streams()
    clipio.save_clip(tmp_path, "clip0", clip=clip)
    manifest = clipio.ClipManifest(
        clips=[
            clipio.ClipEntry(
                clip_id="clip0",
                split="train",
                data_kind="matting",
                num_frames=3,
                frames_dir="clip0/frames",
                alpha_dir="clip0/alpha",
            )
        ]
    )
    with pytest.raises(FileNotFoundError, match="alpha"):
        manifest.validate(tmp_path)


def test_manifest_validate_count_mismatch(tmp_path):
    clip, alpha, _ = _toy_streams()
    clipio.save_clip(tmp_path, "clip0", clip=clip, alpha=alpha)
    manifest = clipio.ClipManifest(
        clips=[
            clipio.ClipEntry(
                clip_id="clip0",
                split="train",
                data_kind="matting",
                num_frames=5,
                frames_dir="clip0/frames",
                alpha_dir="clip0/alpha",
            )
        ]
    )
    with pytest.raises(ValueError, match="manifest says 5"):
        manifest.validate(tmp_path)


def test_entry_rejects_unknown_tags(tmp_path):
    with pytest.raises(ValueError, match="split"):
        clipio.ClipEntry("c", "training", "matting", 1, "c/frames")
    with pytest.raises(ValueError, match="data_kind"):
        clipio.ClipEntry("c", "train", "video", 1, "c/frames")
