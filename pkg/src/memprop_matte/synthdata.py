"""Deterministic synthetic matting/segmentation clips with analytic ground truth.

Scenes composite procedural primitives (anti-aliased disks and rounded
rectangles under affine motion) over textured backgrounds following
I = alpha * F + (1 - alpha) * B, so every ground-truth alpha is exact and the
composite is reconstructible from the stored layers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from . import clipio
from .core import AlphaSequence, SegMaskSequence, VideoClip, binarize_alpha

SEG_BINARIZE_THRESHOLD = 128  # midpoint for rendered data


class RenderError(ValueError):
    """A scene cannot be rendered (e.g. a target primitive left the canvas)."""


@dataclass
class TextureSpec:
    """Smooth random color field: base color plus upsampled low-res noise."""

    base: tuple[float, float, float]
    noise_amp: float = 0.15
    cells: int = 4

    def render(self, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
        noise = rng.uniform(-1.0, 1.0, size=(self.cells, self.cells, 3)).astype(np.float32)
        up = cv2.resize(noise, (width, height), interpolation=cv2.INTER_LINEAR)
        img = np.asarray(self.base, dtype=np.float32) + self.noise_amp * up
        return np.clip(img, 0.0, 1.0).transpose(2, 0, 1)


@dataclass
class Primitive:
    """One animated shape with a closed-form alpha at every frame."""

    kind: str  # "disk" | "rounded_rect"
    center: tuple[float, float]  # (x, y) in pixels at t=0
    size: tuple[float, float]  # (radius, radius) for disks, half extents for rects
    soft_edge: float = 0.0  # transition width in pixels; 0 means hard
    corner_radius: float = 0.0
    angle: float = 0.0  # radians, rects only
    velocity: tuple[float, float] = (0.0, 0.0)  # px per frame
    scale_rate: float = 0.0  # relative growth per frame
    spin: float = 0.0  # radians per frame
    color: tuple[float, float, float] | None = None  # used when painted as distractor

    def __post_init__(self):
        if self.kind not in ("disk", "rounded_rect"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.soft_edge < 0:
            raise ValueError("soft_edge must be >= 0")

    def signed_distance(self, t: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        cx = self.center[0] + self.velocity[0] * t
        cy = self.center[1] + self.velocity[1] * t
        scale = max(1.0 + self.scale_rate * t, 0.05)
        dx = xs - cx
        dy = ys - cy
        if self.kind == "disk":
            return np.sqrt(dx * dx + dy * dy) - self.size[0] * scale
        ang = self.angle + self.spin * t
        cos_a, sin_a = math.cos(-ang), math.sin(-ang)
        xr = cos_a * dx - sin_a * dy
        yr = sin_a * dx + cos_a * dy
        hw, hh = self.size[0] * scale, self.size[1] * scale
        cr = min(self.corner_radius * scale, hw, hh)
        qx = np.abs(xr) - (hw - cr)
        qy = np.abs(yr) - (hh - cr)
        outside = np.sqrt(np.maximum(qx, 0.0) ** 2 + np.maximum(qy, 0.0) ** 2)
        inside = np.minimum(np.maximum(qx, qy), 0.0)
        return outside + inside - cr

    def alpha_frame(self, t: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        d = self.signed_distance(t, xs, ys)
        if self.soft_edge > 0:
            return np.clip(0.5 - d / self.soft_edge, 0.0, 1.0).astype(np.float32)
        return (d <= 0).astype(np.float32)


@dataclass
class SceneSpec:
    """Everything needed to render a clip deterministically."""

    seed: int
    height: int = 64
    width: int = 64
    targets: list[Primitive] = field(default_factory=list)
    distractors: list[Primitive] = field(default_factory=list)
    foreground: TextureSpec = field(default_factory=lambda: TextureSpec((0.8, 0.6, 0.3)))
    background: TextureSpec = field(default_factory=lambda: TextureSpec((0.2, 0.3, 0.5)))

    def __post_init__(self):
        if not self.targets:
            raise ValueError("a scene needs at least one target primitive")


@dataclass
class RenderedClip:
    """A rendered clip together with its compositing layers."""

    clip: VideoClip
    alpha: AlphaSequence
    seg: SegMaskSequence
    foreground: torch.Tensor  # (3, H, W), static per clip
    background: torch.Tensor  # (T, 3, H, W), distractors move


def render_scene(spec: SceneSpec, num_frames: int) -> RenderedClip:
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.seed)
    fg_tex = spec.foreground.render(h, w, rng)
    bg_tex = spec.background.render(h, w, rng)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)

    frames, alphas, segs, backgrounds = [], [], [], []
    for t in range(num_frames):
        alpha = np.zeros((h, w), dtype=np.float32)
        for prim in spec.targets:
            a = prim.alpha_frame(t, xs, ys)
            if a.max() <= 0:
                raise RenderError(
                    f"target primitive left the canvas entirely at frame {t}"
                )
            alpha = 1.0 - (1.0 - alpha) * (1.0 - a)
        background = bg_tex.copy()
        for prim in spec.distractors:
            a = prim.alpha_frame(t, xs, ys)[None]
            color = np.asarray(
                prim.color or (0.5, 0.5, 0.5), dtype=np.float32
            ).reshape(3, 1, 1)
            background = background * (1.0 - a) + color * a
        frame = alpha[None] * fg_tex + (1.0 - alpha[None]) * background
        frames.append(frame)
        alphas.append(alpha[None])
        backgrounds.append(background)
        segs.append(binarize_alpha(torch.from_numpy(alpha), SEG_BINARIZE_THRESHOLD))

    return RenderedClip(
        clip=VideoClip(torch.from_numpy(np.stack(frames))),
        alpha=AlphaSequence(torch.from_numpy(np.stack(alphas))),
        seg=SegMaskSequence(torch.stack(segs)),
        foreground=torch.from_numpy(fg_tex),
        background=torch.from_numpy(np.stack(backgrounds)),
    )


def render_clip(
    spec: SceneSpec, num_frames: int
) -> tuple[VideoClip, AlphaSequence, SegMaskSequence]:
    """Render a scene, returning only the streams that get persisted."""
    rendered = render_scene(spec, num_frames)
    return rendered.clip, rendered.alpha, rendered.seg


def sample_nonempty_subset(n: int, rng: np.random.Generator) -> list[int]:
    """Uniform draw over all 2^n - 1 nonempty index subsets."""
    if n < 1:
        raise ValueError("need at least one element")
    pick = int(rng.integers(1, 2**n))
    return [i for i in range(n) if (pick >> i) & 1]


def select_instances(
    instances: list[torch.Tensor], rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pick a random nonempty subset of instance masks as the target.

    Returns (target_mask, rest_mask); unchosen instances are marked background.
    """
    if not instances:
        raise ValueError("instance list is empty")
    chosen = set(sample_nonempty_subset(len(instances), rng))
    target = torch.zeros_like(instances[0])
    rest = torch.zeros_like(instances[0])
    for i, mask in enumerate(instances):
        if i in chosen:
            target = torch.clamp(target + mask, max=1.0)
        else:
            rest = torch.clamp(rest + mask, max=1.0)
    return target, rest


@dataclass
class AugmentationSpec:
    """Training-time augmentation parameters."""

    max_shift: float = 1.5  # px per frame for image-to-sequence motion
    max_rotate: float = 1.0  # degrees per frame
    max_scale_step: float = 0.01
    reversal_p: float = 0.5
    erode_p: float = 0.4
    dilate_p: float = 0.4
    kernels: tuple[int, ...] = (1, 3, 5)
    max_instances: int = 3

    def __post_init__(self):
        probs = (self.reversal_p, self.erode_p, self.dilate_p)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.erode_p + self.dilate_p > 1.0:
            raise ValueError("erode_p + dilate_p must not exceed 1")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ValueError("morphology kernels must be odd and >= 1")


def augment_given_mask(
    mask: torch.Tensor,
    spec: AugmentationSpec,
    rng: np.random.Generator,
    report: bool = False,
):
    """Randomly erode or dilate a guidance mask (40%/40% by default).

    With report=True also returns (op_name, kernel); a kernel of 1 leaves the
    mask unchanged whichever operation was drawn.
    """
    m = mask if mask.ndim == 3 else mask.unsqueeze(0)
    if not torch.logical_or(m == 0, m == 1).all():
        raise ValueError("mask values must be exactly 0 or 1")
    u = rng.random()
    kernel = int(spec.kernels[int(rng.integers(0, len(spec.kernels)))])
    if u < spec.erode_p:
        op = "erode"
    elif u < spec.erode_p + spec.dilate_p:
        op = "dilate"
    else:
        op = "identity"
    if op == "identity" or kernel == 1:
        out_t = m.clone()
    else:
        element = np.ones((kernel, kernel), dtype=np.uint8)
        m_np = m[0].numpy().astype(np.uint8)
        kwargs = dict(borderType=cv2.BORDER_CONSTANT, borderValue=0)
        out = (
            cv2.erode(m_np, element, **kwargs)
            if op == "erode"
            else cv2.dilate(m_np, element, **kwargs)
        )
        out_t = torch.from_numpy(out).float().unsqueeze(0)
    if report:
        return out_t, op, kernel
    return out_t


def sample_training_sequence(
    num_frames: int, length: int, max_interval: int, rng: np.random.Generator
) -> list[int]:
    """Strictly increasing frame indices with gaps in [1, max_interval]."""
    if not 3 <= length <= 8:
        raise ValueError(f"sequence length must lie in [3, 8], got {length}")
    if max_interval < 1:
        raise ValueError("max_interval must be >= 1")
    if num_frames < length:
        raise ValueError(f"clip with {num_frames} frames is too short for length {length}")
    effective = min(max_interval, (num_frames - 1) // (length - 1))
    gaps = rng.integers(1, effective + 1, size=length - 1)
    span = int(gaps.sum())
    start = int(rng.integers(0, num_frames - span))
    indices = [start]
    for g in gaps:
        indices.append(indices[-1] + int(g))
    return indices


def synthesize_sequence_from_image(
    frame: torch.Tensor,
    alpha: torch.Tensor,
    length: int,
    spec: AugmentationSpec,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Turn one (frame, alpha) pair into a motion-augmented sequence.

    Frame and alpha receive identical cumulative affine warps, so the
    synthesized ground truth stays exact. Returns ((T,3,H,W), (T,1,H,W)).
    """
    img = frame.numpy().transpose(1, 2, 0)
    alp = alpha.reshape(alpha.shape[-2], alpha.shape[-1]).numpy()
    h, w = alp.shape
    center = (w / 2.0, h / 2.0)
    angle, scale = 0.0, 1.0
    shift = np.zeros(2)
    frames, alphas = [frame.clone()], [alpha.reshape(1, h, w).clone()]
    for _ in range(length - 1):
        angle += float(rng.uniform(-spec.max_rotate, spec.max_rotate))
        scale *= 1.0 + float(rng.uniform(-spec.max_scale_step, spec.max_scale_step))
        shift += rng.uniform(-spec.max_shift, spec.max_shift, size=2)
        matrix = cv2.getRotationMatrix2D(center, angle, scale)
        matrix[:, 2] += shift
        warp = lambda a: cv2.warpAffine(
            a, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT101
        )
        frames.append(torch.from_numpy(warp(img).transpose(2, 0, 1)).clamp(0, 1))
        alphas.append(torch.from_numpy(warp(alp)).clamp(0, 1).unsqueeze(0))
    return torch.stack(frames), torch.stack(alphas)


def _random_primitive(
    rng: np.random.Generator,
    height: int,
    width: int,
    num_frames: int,
    soft_edge: float,
    static: bool,
) -> Primitive:
    margin = 0.22 * min(height, width)
    cx = float(rng.uniform(0.35 * width, 0.65 * width))
    cy = float(rng.uniform(0.35 * height, 0.65 * height))
    # cap speed so the primitive cannot drift off canvas over the clip
    vmax = margin / max(num_frames, 1) * 0.8
    vel = (0.0, 0.0) if static else tuple(rng.uniform(-vmax, vmax, size=2).tolist())
    kind = "disk" if rng.random() < 0.6 else "rounded_rect"
    if kind == "disk":
        size = (float(rng.uniform(7.0, 13.0)), 0.0)
    else:
        size = (float(rng.uniform(6.0, 11.0)), float(rng.uniform(6.0, 11.0)))
    return Primitive(
        kind=kind,
        center=(cx, cy),
        size=size,
        soft_edge=soft_edge,
        corner_radius=float(rng.uniform(1.0, 3.0)),
        angle=float(rng.uniform(0.0, math.pi)),
        velocity=vel,
        scale_rate=0.0 if static else float(rng.uniform(-0.003, 0.003)),
        spin=0.0 if static else float(rng.uniform(-0.03, 0.03)),
        color=tuple(rng.uniform(0.1, 0.9, size=3).tolist()),
    )


def random_scene(
    seed: int,
    height: int = 64,
    width: int = 64,
    num_frames: int = 24,
    data_kind: str = "matting",
    static: bool = False,
    max_instances: int = 3,
) -> SceneSpec:
    """Build a randomized scene; segmentation scenes get hard edges.

    When several candidate primitives are drawn, a random nonempty subset
    becomes the target and the rest are demoted to moving distractors.
    """
    rng = np.random.default_rng(seed)
    soft = 0.0 if data_kind == "segmentation" else float(rng.uniform(1.5, 3.0))
    n_candidates = int(rng.integers(1, max_instances + 1))
    candidates = [
        _random_primitive(rng, height, width, num_frames, soft, static)
        for _ in range(n_candidates)
    ]
    if n_candidates == 1:
        chosen = [0]
    else:
        chosen = sample_nonempty_subset(n_candidates, rng)
    targets = [candidates[i] for i in chosen]
    distractors = [c for i, c in enumerate(candidates) if i not in chosen]
    if rng.random() < 0.7:  # an extra hard-edged background distractor
        distractors.append(
            _random_primitive(rng, height, width, num_frames, 0.0, static)
        )
    return SceneSpec(
        seed=int(rng.integers(0, 2**31)),
        height=height,
        width=width,
        targets=targets,
        distractors=distractors,
        foreground=TextureSpec(tuple(rng.uniform(0.55, 0.95, size=3).tolist()), 0.12),
        background=TextureSpec(tuple(rng.uniform(0.05, 0.45, size=3).tolist()), 0.15),
    )


@dataclass
class CorpusConfig:
    """Layout of a generated corpus; counts are clips per split and kind."""

    seed: int = 0
    height: int = 64
    width: int = 64
    frames: int = 24
    train_matting: int = 5
    train_segmentation: int = 3
    val_matting: int = 1
    val_segmentation: int = 1
    test_matting: int = 2
    test_segmentation: int = 0
    static_train_matting: int = 0  # how many train matting clips stay static

    def __post_init__(self):
        counts = (
            self.train_matting, self.train_segmentation, self.val_matting,
            self.val_segmentation, self.test_matting, self.test_segmentation,
        )
        if any(c < 0 for c in counts):
            raise ValueError("clip counts must be >= 0")
        if self.static_train_matting > self.train_matting:
            raise ValueError("static_train_matting exceeds train_matting")
        if self.frames < 1 or self.height % 16 or self.width % 16:
            raise ValueError("frames must be >= 1 and height/width divisible by 16")


def generate_corpus(cfg: CorpusConfig, out_dir: Path, jobs: int = 1) -> Path:
    """Render the configured corpus and write its manifest. Returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan: list[tuple[str, str, str, bool]] = []
    counts = {
        ("train", "matting"): cfg.train_matting,
        ("train", "segmentation"): cfg.train_segmentation,
        ("val", "matting"): cfg.val_matting,
        ("val", "segmentation"): cfg.val_segmentation,
        ("test", "matting"): cfg.test_matting,
        ("test", "segmentation"): cfg.test_segmentation,
    }
    for (split, kind), count in counts.items():
        for i in range(count):
            static = split == "train" and kind == "matting" and i < cfg.static_train_matting
            plan.append((f"{split}_{kind[:3]}_{i:02d}", split, kind, static))

    root_seq = np.random.SeedSequence(cfg.seed)
    child_seeds = [int(s.generate_state(1)[0]) for s in root_seq.spawn(len(plan))]

    def build(item):
        (clip_id, split, kind, static), scene_seed = item
        scene = random_scene(
            scene_seed, cfg.height, cfg.width, cfg.frames, data_kind=kind, static=static
        )
        clip, alpha, seg = render_clip(scene, cfg.frames)
        clipio.save_clip(out_dir, clip_id, clip=clip, alpha=alpha, mask=seg)
        return clipio.ClipEntry(
            clip_id=clip_id,
            split=split,
            data_kind=kind,
            num_frames=cfg.frames,
            frames_dir=f"{clip_id}/frames",
            alpha_dir=f"{clip_id}/alpha",
            mask_dir=f"{clip_id}/mask",
        )

    items = list(zip(plan, child_seeds))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(build, items))
    else:
        entries = [build(item) for item in items]

    manifest = clipio.ClipManifest(clips=entries, seed=cfg.seed)
    manifest_path = out_dir / "manifest.json"
    clipio.write_manifest(manifest_path, manifest)
    return manifest_path
