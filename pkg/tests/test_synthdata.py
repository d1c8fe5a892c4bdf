import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch

from memprop_matte import clipio
from memprop_matte.core import make_region_partition
from memprop_matte.synthdata import (
    AugmentationSpec,
    CorpusConfig,
    Primitive,
    RenderError,
    SceneSpec,
    TextureSpec,
    augment_given_mask,
    generate_corpus,
    random_scene,
    render_clip,
    render_scene,
    sample_nonempty_subset,
    sample_training_sequence,
    select_instances,
    synthesize_sequence_from_image,
)


def _disk_scene(soft=2.0, velocity=(0.0, 0.0), radius=8.0, seed=0):
    return SceneSpec(
        seed=seed,
        targets=[
            Primitive(
                kind="disk", center=(32.0, 32.0), size=(radius, 0.0),
                soft_edge=soft, velocity=velocity,
            )
        ],
    )


class TestRenderClip:
    def test_hard_edge_gives_binary_alpha(self):
        clip, alpha, seg = render_clip(_disk_scene(soft=0.0), 3)
        assert torch.logical_or(alpha.alpha == 0, alpha.alpha == 1).all()
        part = make_region_partition(alpha.alpha[0])
        assert part.boundary.sum() == 0

    def test_static_disk_constant_alpha(self):
        _, alpha, _ = render_clip(_disk_scene(), 10)
        for t in range(1, 10):
            assert torch.equal(alpha.alpha[t], alpha.alpha[0])

    def test_soft_annulus_pixel_count(self):
        # radius 8, 2 px soft edge: boundary area ~ 2*pi*8*2 within 30%
        _, alpha, _ = render_clip(_disk_scene(soft=2.0, radius=8.0), 1)
        part = make_region_partition(alpha.alpha[0])
        expected = 2 * np.pi * 8 * 2
        assert 0.7 * expected <= part.boundary.sum().item() <= 1.3 * expected

    def test_exact_layer_reconstruction(self):
        scene = random_scene(seed=21, num_frames=6)
        rendered = render_scene(scene, 6)
        recon = (
            rendered.alpha.alpha * rendered.foreground.unsqueeze(0)
            + (1 - rendered.alpha.alpha) * rendered.background
        )
        assert (recon - rendered.clip.frames).abs().max().item() == 0.0

    def test_bit_reproducible(self):
        scene = random_scene(seed=33, num_frames=4)
        a = render_scene(scene, 4)
        b = render_scene(scene, 4)
        assert torch.equal(a.clip.frames, b.clip.frames)
        assert torch.equal(a.alpha.alpha, b.alpha.alpha)

    def test_target_leaving_canvas_raises(self):
        scene = _disk_scene(velocity=(30.0, 0.0), radius=4.0)
        with pytest.raises(RenderError, match="left the canvas"):
            render_clip(scene, 5)

    def test_seg_gt_uses_midpoint_threshold(self):
        _, alpha, seg = render_clip(_disk_scene(soft=3.0), 1)
        expected = (alpha.alpha[0] * 255 >= 128).float()
        assert torch.equal(seg.mask[0], expected)


class TestAugmentGivenMask:
    @staticmethod
    def _block_mask():
        m = torch.zeros(1, 9, 9)
        m[0, 3:6, 3:6] = 1
        return m

    def test_kernel_one_identity(self):
        spec = AugmentationSpec(kernels=(1,))
        rng = np.random.default_rng(0)
        mask = self._block_mask()
        out = augment_given_mask(mask, spec, rng)
        assert torch.equal(out, mask)

    def test_op_frequencies(self):
        # erosion/dilation 40% each, identity 20%, within 2% over 1e4 draws
        spec = AugmentationSpec()
        rng = np.random.default_rng(99)
        mask = self._block_mask()
        counts = {"erode": 0, "dilate": 0, "identity": 0}
        n = 10_000
        for _ in range(n):
            _, op, _ = augment_given_mask(mask, spec, rng, report=True)
            counts[op] += 1
        assert abs(counts["erode"] / n - 0.4) < 0.02
        assert abs(counts["dilate"] / n - 0.4) < 0.02
        assert abs(counts["identity"] / n - 0.2) < 0.02

    def test_dilate_kernel5_grows_single_pixel_to_block(self):
        mask = torch.zeros(1, 9, 9)
        mask[0, 4, 4] = 1
        spec = AugmentationSpec(erode_p=0.0, dilate_p=1.0, kernels=(5,))
        out = augment_given_mask(mask, spec, np.random.default_rng(1))
        assert out.sum() == 25
        assert torch.all(out[0, 2:7, 2:7] == 1)

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            augment_given_mask(torch.full((1, 4, 4), 0.5), AugmentationSpec(), np.random.default_rng(0))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            AugmentationSpec(erode_p=0.7, dilate_p=0.7)
        with pytest.raises(ValueError):
            AugmentationSpec(kernels=(2,))


class TestSelectInstances:
    def test_single_instance_always_selected(self):
        mask = torch.ones(1, 4, 4)
        for seed in range(20):
            target, rest = select_instances([mask], np.random.default_rng(seed))
            assert torch.equal(target, mask)
            assert rest.sum() == 0

    def test_two_instances_all_subsets_hit(self):
        m1 = torch.zeros(1, 4, 4)
        m1[0, 0, 0] = 1
        m2 = torch.zeros(1, 4, 4)
        m2[0, 3, 3] = 1
        seen = set()
        for seed in range(1000):
            subset = tuple(sample_nonempty_subset(2, np.random.default_rng(seed)))
            seen.add(subset)
        assert seen == {(0,), (1,), (0, 1)}
        target, rest = select_instances([m1, m2], np.random.default_rng(0))
        assert torch.all(target * rest == 0)

    def test_target_disjoint_from_rest(self):
        rng = np.random.default_rng(12)
        masks = []
        for i in range(3):
            m = torch.zeros(1, 6, 6)
            m[0, i * 2, :] = 1
            masks.append(m)
        for seed in range(30):
            target, rest = select_instances(masks, np.random.default_rng(seed))
            assert torch.all(target * rest == 0)
            assert torch.equal(torch.clamp(target + rest, max=1), torch.clamp(sum(masks), max=1))

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            select_instances([], np.random.default_rng(0))


class TestSampleTrainingSequence:
    def test_length3_interval1_consecutive(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            idx = sample_training_sequence(24, 3, 1, rng)
            assert len(idx) == 3
            assert idx[1] - idx[0] == 1 and idx[2] - idx[1] == 1

    def test_length8_interval4_gap_bounds(self):
        rng = np.random.default_rng(1)
        gaps_seen = set()
        for _ in range(1000):
            idx = sample_training_sequence(64, 8, 4, rng)
            assert len(idx) == 8
            assert idx[-1] < 64 and idx[0] >= 0
            for a, b in zip(idx, idx[1:]):
                gap = b - a
                assert 1 <= gap <= 4
                gaps_seen.add(gap)
        assert gaps_seen == {1, 2, 3, 4}

    def test_too_short_clip_rejected(self):
        with pytest.raises(ValueError, match="too short"):
            sample_training_sequence(5, 8, 2, np.random.default_rng(0))

    def test_length_window_enforced(self):
        with pytest.raises(ValueError):
            sample_training_sequence(24, 2, 1, np.random.default_rng(0))


class TestSynthesizeSequence:
    def test_shapes_and_first_frame_identity(self):
        scene = random_scene(seed=44, num_frames=1)
        rendered = render_scene(scene, 1)
        frames, alphas = synthesize_sequence_from_image(
            rendered.clip.frames[0], rendered.alpha.alpha[0], 5,
            AugmentationSpec(), np.random.default_rng(0),
        )
        assert frames.shape == (5, 3, 64, 64)
        assert alphas.shape == (5, 1, 64, 64)
        assert torch.equal(frames[0], rendered.clip.frames[0])
        assert alphas.min() >= 0 and alphas.max() <= 1
        assert not torch.equal(frames[1], frames[0])  # motion applied

    def test_deterministic_under_seed(self):
        scene = random_scene(seed=45, num_frames=1)
        rendered = render_scene(scene, 1)
        args = (rendered.clip.frames[0], rendered.alpha.alpha[0], 4, AugmentationSpec())
        a_frames, a_alphas = synthesize_sequence_from_image(*args, np.random.default_rng(7))
        b_frames, b_alphas = synthesize_sequence_from_image(*args, np.random.default_rng(7))
        assert torch.equal(a_frames, b_frames)
        assert torch.equal(a_alphas, b_alphas)


def _tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


class TestGenerateCorpus:
    def test_default_counts(self, tmp_path):
        manifest_path = generate_corpus(CorpusConfig(seed=1, frames=2), tmp_path / "c")
        manifest = clipio.read_manifest(manifest_path)
        assert len(manifest.by_split("train")) == 8
        assert len(manifest.by_split("val")) == 2
        assert len(manifest.by_split("test")) == 2
        manifest.validate(clipio.manifest_root(manifest_path))
        assert manifest.seed == 1

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = CorpusConfig(
            seed=9, frames=3, train_matting=1, train_segmentation=1,
            val_matting=0, val_segmentation=0, test_matting=1,
        )
        generate_corpus(cfg, tmp_path / "a")
        generate_corpus(cfg, tmp_path / "b")
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")

    def test_segmentation_clips_have_binary_alpha(self, tmp_path):
        cfg = CorpusConfig(
            seed=2, frames=2, train_matting=0, train_segmentation=1,
            val_matting=0, val_segmentation=0, test_matting=0,
        )
        manifest_path = generate_corpus(cfg, tmp_path / "c")
        manifest = clipio.read_manifest(manifest_path)
        entry = manifest.clips[0]
        assert entry.data_kind == "segmentation"
        alpha = clipio.load_clip_alpha(clipio.manifest_root(manifest_path) / entry.clip_id)
        assert torch.logical_or(alpha.alpha == 0, alpha.alpha == 1).all()

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            CorpusConfig(frames=0)
        with pytest.raises(ValueError):
            CorpusConfig(train_matting=1, static_train_matting=2)
