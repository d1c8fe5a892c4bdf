import numpy as np
import pytest
import torch

from memprop_matte.network import MattingNetwork, ModelConfig
from memprop_matte.synthdata import CorpusConfig, generate_corpus
from memprop_matte.training import Trainer, default_stage_config, run_stage


TINY_CONFIG = ModelConfig(
    enc_channels=(4, 6, 8, 10, 12),
    key_channels=4,
    value_channels=8,
    value_enc_channels=(2, 3, 4, 5),
    decoder_channels=(10, 8, 6, 4),
    fusion_blocks=1,
    fusion_heads=2,
    change_head_channels=6,
)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return MattingNetwork(TINY_CONFIG)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """Small deterministic corpus shared by training/inference/CLI tests."""
    out = tmp_path_factory.mktemp("mini_corpus")
    cfg = CorpusConfig(
        seed=11,
        frames=12,
        train_matting=2,
        train_segmentation=1,
        val_matting=0,
        val_segmentation=0,
        test_matting=1,
        static_train_matting=1,
    )
    manifest = generate_corpus(cfg, out)
    return manifest


OVERFIT_CORPUS = CorpusConfig(
    seed=5,
    frames=24,
    train_matting=3,
    train_segmentation=1,
    val_matting=0,
    val_segmentation=0,
    test_matting=0,
    static_train_matting=1,
)
OVERFIT_SEED = 3
STATIC_CLIP_ID = "train_mat_00"


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Stages 1-2 at the desk-scale budgets on a 4-clip corpus.

    Shared by the overfit, memory-stability and warm-up acceptance criteria.
    """
    out = tmp_path_factory.mktemp("overfit")
    manifest = generate_corpus(OVERFIT_CORPUS, out / "corpus")
    stage1 = default_stage_config(1)
    ckpt1, _ = run_stage(stage1, manifest, out / "train", seed=OVERFIT_SEED)
    stage2 = default_stage_config(2)
    ckpt2, _ = run_stage(stage2, manifest, out / "train", seed=OVERFIT_SEED, init_checkpoint=ckpt1)
    from memprop_matte.training import load_model_from_checkpoint

    model = load_model_from_checkpoint(ckpt2)
    return {
        "model": model,
        "manifest": manifest,
        "corpus_dir": out / "corpus",
        "checkpoint": ckpt2,
    }
