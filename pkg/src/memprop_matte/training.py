"""Three-stage training driver with per-stage data routing and core supervision."""

from __future__ import annotations

import csv
import pickle
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import clipio
from .core import binarize_alpha, trimap_from_segmask
from .losses import (
    DdcConfig,
    LossWeights,
    loss_change_mask,
    loss_core_supervision,
    loss_matting,
    loss_segmentation,
)
from .memory import (
    compute_affinity,
    fuse_memory,
    ground_truth_change_mask,
    map_from_tokens,
    read_memory,
    tokens_from_map,
)
from .network import (
    CHECKPOINT_FORMAT,
    CheckpointError,
    MattingNetwork,
    ModelConfig,
    read_checkpoint,
)
from .synthdata import (
    AugmentationSpec,
    augment_given_mask,
    sample_training_sequence,
    synthesize_sequence_from_image,
)

GUIDANCE_BINARIZE_THRESHOLD = 50  # 8-bit threshold for matting guidance masks
FULL_STAGE_ITERATIONS = {1: 85_000, 2: 40_000, 3: 5_000}
STAGE_LEARNING_RATES = {1: 1e-4, 2: 1e-5, 3: 1e-6}
DESK_SCALE = 0.01

LOSS_CSV_COLUMNS = (
    "iteration",
    "stage",
    "data_kind",
    "loss_total",
    "loss_matting",
    "loss_segmentation",
    "loss_core_supervision",
    "loss_change_mask",
    "lr",
)


@dataclass(frozen=True)
class SeqPhase:
    """Sequence sampling within a stage until `frac_end` of the budget."""

    frac_end: float
    length: int
    max_interval: int


@dataclass
class StageConfig:
    stage: int
    iterations: int
    learning_rate: float
    batch_size: int = 4
    weight_decay: float = 1e-3
    phases: tuple[SeqPhase, ...] = (SeqPhase(1.0, 8, 2),)
    core_kernel: int = 5  # trimap kernel for core-supervision partitions

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if not self.phases or abs(self.phases[-1].frac_end - 1.0) > 1e-9:
            raise ValueError("the last sequence phase must end at frac 1.0")

    @property
    def core_supervision(self) -> bool:
        """Segmentation data supervises the matting head in stages 2 and 3."""
        return self.stage >= 2

    @property
    def matting_source(self) -> str:
        """Stage 3 fine-tunes on image matting data synthesized into sequences."""
        return "image" if self.stage == 3 else "video"

    def phase_at(self, iteration: int) -> SeqPhase:
        frac = iteration / self.iterations
        for phase in self.phases:
            if frac < phase.frac_end:
                return phase
        return self.phases[-1]


def default_stage_config(stage: int, scale: float = DESK_SCALE, batch_size: int = 4) -> StageConfig:
    """Stage budgets at a fraction of the full schedule, ratios preserved."""
    iterations = max(1, round(FULL_STAGE_ITERATIONS[stage] * scale))
    phases = (
        (SeqPhase(80.0 / 85.0, 3, 1), SeqPhase(1.0, 8, 2))
        if stage == 1
        else (SeqPhase(1.0, 8, 2),)
    )
    return StageConfig(
        stage=stage,
        iterations=iterations,
        learning_rate=STAGE_LEARNING_RATES[stage],
        batch_size=batch_size,
        phases=phases,
    )


@dataclass(frozen=True)
class LossPlan:
    """Which objectives a batch contributes, by stage and data kind."""

    matting: bool
    segmentation: bool
    core_supervision: bool
    change_mask: bool


def route_batch(data_kind: str, stage: int) -> LossPlan:
    """Stage/data routing: segmentation reaches the matting head in stages 2-3."""
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    if data_kind == "matting":
        return LossPlan(matting=True, segmentation=False, core_supervision=False, change_mask=True)
    if data_kind == "segmentation":
        return LossPlan(
            matting=False, segmentation=True, core_supervision=stage >= 2, change_mask=True
        )
    raise ValueError(f"unknown data_kind {data_kind!r}")


@dataclass
class TrainState:
    iteration: int = 0
    running: dict[str, float] = field(default_factory=dict)


@dataclass
class SequenceOutputs:
    alphas: torch.Tensor  # (B, T, 1, H, W)
    seg_logits: torch.Tensor  # (B, T, 1, H, W)
    change_logits: list[torch.Tensor | None]  # per frame, (B, 1, H', W')


def forward_sequence(
    model: MattingNetwork, frames: torch.Tensor, guidance: torch.Tensor
) -> SequenceOutputs:
    """Differentiable propagation over a training sequence.

    Every predicted frame's value joins the bank; the recurrent matte feedback
    into the value encoder and change head is detached, so the matting head
    only receives gradient from losses applied to it directly.
    """
    batch, length = frames.shape[0], frames.shape[1]
    pyramid, key = model.encode_frame(frames[:, 0])
    h16, w16 = key.shape[-2:]
    seed_value = model.encode_value(pyramid, guidance)
    query = tokens_from_map(key)
    affinity = compute_affinity(query, query)
    readout = map_from_tokens(read_memory(affinity, tokens_from_map(seed_value)), h16, w16)
    fused = model.object_fusion(readout, tokens_from_map(seed_value))
    alpha, seg = model.decode_alpha(fused, pyramid)

    value = model.encode_value(pyramid, alpha.detach())
    bank_keys = [query]
    bank_values = [tokens_from_map(value)]
    prev_stream = value  # propagated value stream P_t
    prev_key, prev_alpha = key, alpha.detach()
    alphas, segs, change_logits = [alpha], [seg], [None]

    for t in range(1, length):
        pyramid, key = model.encode_frame(frames[:, t])
        query = tokens_from_map(key)
        affinity = compute_affinity(query, torch.cat(bank_keys, dim=1))
        readout = map_from_tokens(
            read_memory(affinity, torch.cat(bank_values, dim=1)), h16, w16
        )
        change = model.predict_change_probability(key, prev_key, prev_alpha)
        fused = fuse_memory(readout, prev_stream, change.probs)
        refined = model.object_fusion(fused, bank_values[0])
        alpha, seg = model.decode_alpha(refined, pyramid)
        value = model.encode_value(pyramid, alpha.detach())
        bank_keys.append(query)
        bank_values.append(tokens_from_map(value))
        prev_stream = fused
        prev_key, prev_alpha = key, alpha.detach()
        alphas.append(alpha)
        segs.append(seg)
        change_logits.append(change.logits)

    return SequenceOutputs(
        alphas=torch.stack(alphas, dim=1),
        seg_logits=torch.stack(segs, dim=1),
        change_logits=change_logits,
    )


@dataclass
class _ClipData:
    clip_id: str
    data_kind: str
    frames: torch.Tensor
    alpha: torch.Tensor
    mask: torch.Tensor


def _load_training_clips(manifest_path: Path) -> list[_ClipData]:
    manifest = clipio.read_manifest(manifest_path)
    root = clipio.manifest_root(manifest_path)
    clips = []
    for entry in manifest.by_split("train"):
        clip_dir = root / entry.clip_id
        clips.append(
            _ClipData(
                clip_id=entry.clip_id,
                data_kind=entry.data_kind,
                frames=clipio.load_clip_frames(clip_dir).frames,
                alpha=clipio.load_clip_alpha(clip_dir).alpha,
                mask=clipio.load_clip_mask(clip_dir).mask,
            )
        )
    if not clips:
        raise ValueError(f"manifest {manifest_path} holds no training clips")
    return clips


class Trainer:
    """Single-stage optimizer loop with deterministic, seeded data sampling."""

    def __init__(
        self,
        model: MattingNetwork,
        stage: StageConfig,
        manifest_path: Path,
        seed: int = 0,
        weights: LossWeights | None = None,
        ddc: DdcConfig | None = None,
        augment: AugmentationSpec | None = None,
    ):
        self.model = model
        self.stage = stage
        self.weights = weights or LossWeights()
        self.ddc = ddc or DdcConfig()
        self.augment = augment or AugmentationSpec()
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=stage.learning_rate, weight_decay=stage.weight_decay
        )
        self.rng = np.random.default_rng(seed)
        self.state = TrainState()
        self.manifest_path = Path(manifest_path)
        self.clips = _load_training_clips(self.manifest_path)
        self.by_kind = {
            kind: [c for c in self.clips if c.data_kind == kind]
            for kind in ("matting", "segmentation")
        }
        self.kinds = [k for k in ("matting", "segmentation") if self.by_kind[k]]
        if not self.kinds:
            raise ValueError("training data mix is empty")

    # ---- batch assembly -------------------------------------------------

    def _sample_video_window(self, clip: _ClipData, phase: SeqPhase):
        indices = sample_training_sequence(
            clip.frames.shape[0], phase.length, phase.max_interval, self.rng
        )
        if self.rng.random() < self.augment.reversal_p:
            indices = indices[::-1]
        idx = torch.as_tensor(indices)
        return clip.frames[idx], clip.alpha[idx], clip.mask[idx]

    def _sample_image_sequence(self, clip: _ClipData, phase: SeqPhase):
        t0 = int(self.rng.integers(0, clip.frames.shape[0]))
        frames, alphas = synthesize_sequence_from_image(
            clip.frames[t0], clip.alpha[t0], phase.length, self.augment, self.rng
        )
        masks = torch.stack(
            [binarize_alpha(a, 128) for a in alphas]
        )
        return frames, alphas, masks

    def _build_batch(self, data_kind: str, phase: SeqPhase):
        pool = self.by_kind[data_kind]
        frames_b, alpha_b, mask_b, guidance_b = [], [], [], []
        for _ in range(self.stage.batch_size):
            clip = pool[int(self.rng.integers(0, len(pool)))]
            if data_kind == "matting" and self.stage.matting_source == "image":
                frames, alphas, masks = self._sample_image_sequence(clip, phase)
            else:
                frames, alphas, masks = self._sample_video_window(clip, phase)
            if data_kind == "matting":
                guidance = binarize_alpha(alphas[0], GUIDANCE_BINARIZE_THRESHOLD)
            else:
                guidance = masks[0]
            guidance = augment_given_mask(guidance, self.augment, self.rng)
            frames_b.append(frames)
            alpha_b.append(alphas)
            mask_b.append(masks)
            guidance_b.append(guidance)
        return (
            torch.stack(frames_b),
            torch.stack(alpha_b),
            torch.stack(mask_b),
            torch.stack(guidance_b),
        )

    # ---- losses ---------------------------------------------------------

    def _change_loss(
        self, outputs: SequenceOutputs, change_gt: torch.Tensor, data_kind: str
    ) -> torch.Tensor:
        """BCE over frames 1..T-1 against per-token GT change maps."""
        terms = []
        for t in range(1, change_gt.shape[1]):
            gt = ground_truth_change_mask(
                change_gt[:, t - 1], change_gt[:, t], data_kind=data_kind
            )
            terms.append(loss_change_mask(outputs.change_logits[t], gt))
        return torch.stack(terms).mean()

    def _core_supervision_loss(
        self, outputs: SequenceOutputs, frames: torch.Tensor, masks: torch.Tensor
    ) -> torch.Tensor:
        terms = []
        batch, length = masks.shape[:2]
        for b in range(batch):
            for t in range(length):
                partition = trimap_from_segmask(masks[b, t], self.stage.core_kernel)
                terms.append(
                    loss_core_supervision(
                        outputs.alphas[b, t],
                        masks[b, t],
                        frames[b, t],
                        partition,
                        ddc=self.ddc,
                        weights=self.weights,
                    )
                )
        return torch.stack(terms).mean()

    def step(self) -> dict:
        """One optimizer step; returns the loss-CSV row for this iteration."""
        plan_kind = self.kinds[self.state.iteration % len(self.kinds)]
        phase = self.stage.phase_at(self.state.iteration)
        plan = route_batch(plan_kind, self.stage.stage)
        frames, alphas, masks, guidance = self._build_batch(plan_kind, phase)

        self.model.train()
        outputs = forward_sequence(self.model, frames, guidance)

        parts: dict[str, torch.Tensor] = {}
        if plan.matting:
            parts["loss_matting"] = torch.stack(
                [
                    loss_matting(outputs.alphas[b], alphas[b], self.weights)
                    for b in range(frames.shape[0])
                ]
            ).mean()
        if plan.segmentation:
            seg_terms = [
                loss_segmentation(outputs.seg_logits[b, t], masks[b, t])
                for b in range(frames.shape[0])
                for t in range(frames.shape[1])
            ]
            parts["loss_segmentation"] = torch.stack(seg_terms).mean()
        if plan.core_supervision:
            parts["loss_core_supervision"] = self._core_supervision_loss(outputs, frames, masks)
        if plan.change_mask:
            change_gt = alphas if plan_kind == "matting" else masks
            parts["loss_change_mask"] = self._change_loss(outputs, change_gt, plan_kind)

        total = torch.stack(list(parts.values())).sum()
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()

        self.state.iteration += 1
        row = {
            "iteration": self.state.iteration,
            "stage": self.stage.stage,
            "data_kind": plan_kind,
            "loss_total": float(total.detach()),
            "lr": self.stage.learning_rate,
        }
        for name in ("loss_matting", "loss_segmentation", "loss_core_supervision", "loss_change_mask"):
            row[name] = float(parts[name].detach()) if name in parts else ""
        for name, value in parts.items():
            prev = self.state.running.get(name, float(value.detach()))
            self.state.running[name] = 0.99 * prev + 0.01 * float(value.detach())
        return row

    def run(self, csv_path: Path | None = None, iterations: int | None = None) -> list[dict]:
        """Run until the stage budget (or `iterations` more steps); log CSV rows."""
        if iterations is None:
            target = self.stage.iterations
        else:
            target = self.state.iteration + iterations
        rows = []
        while self.state.iteration < target:
            rows.append(self.step())
        if csv_path is not None:
            write_loss_csv(csv_path, rows)
        return rows

    # ---- checkpointing ---------------------------------------------------

    def save(self, path: Path) -> None:
        save_training_checkpoint(path, self)


def write_loss_csv(path: Path, rows: list[dict], append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists() and append
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_CSV_COLUMNS)
        if not exists:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in LOSS_CSV_COLUMNS})


def _tensors_to_numpy(obj):
    """Encode tensors as numpy and intern strings inside nested containers.

    Raw tensor pickling embeds storage keys derived from memory addresses, and
    pickle memoizes strings by object identity; both would break byte-identical
    checkpoint round-trips.
    """
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": obj.detach().cpu().numpy()}
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_tensors_to_numpy(k): _tensors_to_numpy(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_tensors_to_numpy(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_tensors_to_numpy(v) for v in obj)
    return obj


def _numpy_to_tensors(obj):
    if isinstance(obj, dict):
        if set(obj.keys()) == {"__tensor__"}:
            return torch.from_numpy(np.array(obj["__tensor__"]))
        return {k: _numpy_to_tensors(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_numpy_to_tensors(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_numpy_to_tensors(v) for v in obj)
    return obj


def save_training_checkpoint(path: Path, trainer: Trainer) -> None:
    """Lossless snapshot: parameters, optimizer moments and RNG streams."""
    params = {k: v.detach().cpu().numpy() for k, v in trainer.model.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": "train",
        "config": asdict(trainer.model.cfg),
        "params": params,
        "shapes": {k: tuple(a.shape) for k, a in params.items()},
        "stage": asdict(trainer.stage),
        "iteration": trainer.state.iteration,
        "running": dict(trainer.state.running),
        "optimizer": trainer.optimizer.state_dict(),
        "numpy_rng": trainer.rng.bit_generator.state,
        "torch_rng": torch.get_rng_state().numpy(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(_tensors_to_numpy(payload), fh, protocol=4)


def load_model_from_checkpoint(path: Path) -> MattingNetwork:
    """Build a model from either a weights archive or a training checkpoint."""
    payload = read_checkpoint(path)
    cfg_dict = dict(payload["config"])
    for key in ("enc_channels", "value_enc_channels", "decoder_channels"):
        cfg_dict[key] = tuple(cfg_dict[key])
    model = MattingNetwork(ModelConfig(**cfg_dict))
    state = {k: torch.from_numpy(np.array(a)) for k, a in payload["params"].items()}
    model.load_state_dict(state)
    return model


def resume_trainer(
    path: Path,
    manifest_path: Path,
    weights: LossWeights | None = None,
    ddc: DdcConfig | None = None,
    augment: AugmentationSpec | None = None,
) -> Trainer:
    """Restore a Trainer mid-stage; subsequent losses reproduce bitwise."""
    payload = read_checkpoint(path)
    if payload.get("kind") != "train":
        raise CheckpointError(f"{path} is not a training checkpoint")
    model = load_model_from_checkpoint(path)
    stage_dict = dict(payload["stage"])
    stage_dict["phases"] = tuple(SeqPhase(**p) for p in stage_dict["phases"])
    stage = StageConfig(**stage_dict)
    trainer = Trainer(
        model, stage, manifest_path, seed=0, weights=weights, ddc=ddc, augment=augment
    )
    trainer.optimizer.load_state_dict(_numpy_to_tensors(payload["optimizer"]))
    trainer.rng.bit_generator.state = payload["numpy_rng"]
    trainer.state.iteration = payload["iteration"]
    trainer.state.running = dict(payload["running"])
    torch.set_rng_state(torch.from_numpy(np.array(payload["torch_rng"])))
    return trainer


def run_stage(
    stage: StageConfig,
    manifest_path: Path,
    out_dir: Path,
    seed: int = 0,
    init_checkpoint: Path | None = None,
    weights: LossWeights | None = None,
    ddc: DdcConfig | None = None,
    augment: AugmentationSpec | None = None,
) -> tuple[Path, Path]:
    """Train one stage end to end; returns (checkpoint_path, loss_csv_path)."""
    if stage.stage >= 2 and init_checkpoint is None:
        raise ValueError(f"stage {stage.stage} requires the previous stage's checkpoint")
    if init_checkpoint is not None:
        model = load_model_from_checkpoint(init_checkpoint)
    else:
        torch.manual_seed(seed)
        model = MattingNetwork()
    trainer = Trainer(
        model, stage, manifest_path, seed=seed, weights=weights, ddc=ddc, augment=augment
    )
    out_dir = Path(out_dir)
    csv_path = out_dir / f"stage{stage.stage}_losses.csv"
    trainer.run(csv_path=csv_path)
    ckpt_path = out_dir / f"stage{stage.stage}.ckpt"
    trainer.save(ckpt_path)
    return ckpt_path, csv_path
