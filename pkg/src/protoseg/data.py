"""Synthetic segmentation scenes with several appearance modes per class.

Every sample is a pure function of ``(DatasetSpec, sample_id)``. Foreground
objects are circles, rectangles or triangles; the class of an object is
carried by its appearance (one of ``modes_per_class`` colours per class),
not by its shape. The background is class 0 and has its own modes.
"""

from __future__ import annotations

import logging
import struct
import functools
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SHAPES = ("circle", "rectangle", "triangle")


@dataclass(frozen=True)
class DatasetSpec:
    H: int = 64
    W: int = 64
    C: int = 4
    modes_per_class: int = 2
    n_labeled: int = 8
    n_unlabeled: int = 256
    n_val: int = 64
    noise_std: float = 0.06
    # per-object colour offset radius; 0 makes every object of a mode identical
    jitter: float = 0.2
    # minimum distance between any two mode colours
    palette_separation: float = 0.45
    seed: int = 0

    def validate(self) -> None:
        if self.H < 16 or self.W < 16:
            raise ValueError(f"image size must be at least 16x16, got {self.H}x{self.W}")
        if self.C < 2:
            raise ValueError(f"need at least 2 classes, got C={self.C}")
        if self.C > 255:
            raise ValueError("labels are stored as 8-bit integers; C must be <= 255")
        if self.modes_per_class < 1:
            raise ValueError("modes_per_class must be >= 1")
        if min(self.n_labeled, self.n_unlabeled, self.n_val) < 0:
            raise ValueError("split sizes must be non-negative")
        if self.noise_std < 0 or self.jitter < 0:
            raise ValueError("noise_std and jitter must be non-negative")

    @property
    def n_total(self) -> int:
        return self.n_labeled + self.n_unlabeled + self.n_val

    def split_ids(self) -> dict[str, range]:
        a = self.n_labeled
        b = a + self.n_unlabeled
        return {"labeled": range(0, a), "unlabeled": range(a, b), "val": range(b, b + self.n_val)}


@dataclass
class SegSample:
    image: np.ndarray            # (H, W, 3) in [0, 1]
    label: np.ndarray            # (H, W) int64
    sample_id: int = -1
    # appearance mode of every pixel (generator metadata, not used for training)
    modes: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class CutMixPlan:
    rect: tuple[int, int, int, int]   # top, left, height, width
    src_a: int
    src_b: int


@functools.lru_cache(maxsize=32)
def palette(spec: DatasetSpec) -> np.ndarray:
    """Mode colours, shape (C, M, 3).

    Colours are drawn by rejection so that every two modes, of the same
    class or not, keep ``palette_separation`` apart. A class therefore has
    several unrelated looks.
    """
    rng = np.random.default_rng([spec.seed, 0xC0105])
    cols = np.zeros((spec.C, spec.modes_per_class, 3))
    placed: list[np.ndarray] = []
    sep = spec.palette_separation
    for c in range(spec.C):
        for m in range(spec.modes_per_class):
            for attempt in range(10_000):
                cand = rng.uniform(0.1, 0.9, size=3)
                if all(np.linalg.norm(cand - p) >= sep for p in placed):
                    break
                if attempt % 1000 == 999:
                    sep *= 0.9
            cols[c, m] = cand
            placed.append(cand)
    return cols


def _shape_mask(kind: str, cy: float, cx: float, r: float, yy: np.ndarray, xx: np.ndarray,
                angle: float) -> np.ndarray:
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rectangle":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    # triangle: intersection of three half planes around the centre
    inside = np.ones_like(yy, dtype=bool)
    for k in range(3):
        t = angle + 2 * np.pi * k / 3
        ny, nx = np.sin(t), np.cos(t)
        inside &= (yy - cy) * ny + (xx - cx) * nx <= r * 0.6
    return inside


def generate(spec: DatasetSpec, sample_id: int) -> SegSample:
    spec.validate()
    if not 0 <= sample_id < spec.n_total:
        raise ValueError(f"sample_id {sample_id} outside [0, {spec.n_total})")
    rng = np.random.default_rng([spec.seed, sample_id])
    cols = palette(spec)
    H, W, M = spec.H, spec.W, spec.modes_per_class
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    label = np.zeros((H, W), dtype=np.int64)
    modes = np.zeros((H, W), dtype=np.int64)
    bg_mode = int(rng.integers(M))
    image = np.empty((H, W, 3))
    image[:] = np.clip(cols[0, bg_mode] + _jitter(rng, spec.jitter), 0, 1)
    modes[:] = bg_mode

    n_fg = spec.C - 1
    k = int(rng.integers(1, min(3, n_fg) + 1))
    classes = rng.choice(np.arange(1, spec.C), size=k, replace=False)
    occupied = np.zeros((H, W), dtype=bool)
    lo, hi = 0.12 * min(H, W), 0.22 * min(H, W)
    for c in classes:
        for _ in range(50):
            r = rng.uniform(lo, hi)
            cy = rng.uniform(r, H - r)
            cx = rng.uniform(r, W - r)
            kind = SHAPES[int(rng.integers(len(SHAPES)))]
            mask = _shape_mask(kind, cy, cx, r, yy, xx, rng.uniform(0, 2 * np.pi))
            # one pixel of margin so objects never touch
            grown = mask | np.roll(mask, 1, 0) | np.roll(mask, -1, 0) | np.roll(mask, 1, 1) | np.roll(mask, -1, 1)
            if mask.any() and not (grown & occupied).any():
                break
        else:
            continue
        m = int(rng.integers(M))
        image[mask] = np.clip(cols[c, m] + _jitter(rng, spec.jitter), 0, 1)
        label[mask] = c
        modes[mask] = m
        occupied |= mask

    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SegSample(image=image, label=label, sample_id=sample_id, modes=modes)


def _jitter(rng: np.random.Generator, radius: float) -> np.ndarray:
    if radius == 0:
        return np.zeros(3)
    v = rng.normal(size=3)
    return v / np.linalg.norm(v) * radius * rng.uniform() ** (1 / 3)


def load_split(spec: DatasetSpec, split: str) -> list[SegSample]:
    return [generate(spec, i) for i in spec.split_ids()[split]]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(sample: SegSample) -> SegSample:
    return replace(sample,
                   image=sample.image[:, ::-1].copy(),
                   label=sample.label[:, ::-1].copy(),
                   modes=None if sample.modes is None else sample.modes[:, ::-1].copy())


def crop(sample: SegSample, top: int, left: int, h: int, w: int) -> SegSample:
    H, W = sample.label.shape
    if not (0 <= top and 0 <= left and h > 0 and w > 0 and top + h <= H and left + w <= W):
        raise ValueError(f"crop ({top}, {left}, {h}, {w}) outside {H}x{W} frame")
    sl = (slice(top, top + h), slice(left, left + w))
    return replace(sample,
                   image=sample.image[sl].copy(),
                   label=sample.label[sl].copy(),
                   modes=None if sample.modes is None else sample.modes[sl].copy())


def weak_augment(sample: SegSample, seed, crop_size: tuple[int, int] | None = None,
                 flip_prob: float = 0.5, min_crop_frac: float = 0.75) -> SegSample:
    """Random crop of ``crop_size`` then random horizontal flip.

    Pure in ``(sample, seed)``; the same transform hits image and label.
    """
    H, W = sample.label.shape
    ch, cw = crop_size or (H, W)
    if ch > H or cw > W:
        raise ValueError(f"crop size {(ch, cw)} larger than frame {(H, W)}")
    if ch < min_crop_frac * H or cw < min_crop_frac * W:
        raise ValueError(f"crop size {(ch, cw)} below {min_crop_frac:.0%} of frame {(H, W)}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    out = crop(sample, top, left, ch, cw) if (ch, cw) != (H, W) else sample
    if rng.uniform() < flip_prob:
        out = hflip(out)
    return out


def sample_cutmix_plans(batch_size: int, H: int, W: int, rng: np.random.Generator,
                        area_range: tuple[float, float] = (0.25, 0.5)) -> list[CutMixPlan]:
    """One plan per batch slot: slot ``k`` pastes a rectangle of image ``k + shift``."""
    if batch_size < 1:
        return []
    shift = int(rng.integers(1, batch_size)) if batch_size > 1 else 0
    plans = []
    for k in range(batch_size):
        ratio = rng.uniform(*area_range)
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        area = ratio * H * W
        h = int(np.clip(round(np.sqrt(area * aspect)), 1, H))
        w = int(np.clip(round(area / h), 1, W))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        plans.append(CutMixPlan((top, left, h, w), k, (k + shift) % batch_size))
    return plans


def cutmix_mask(plan: CutMixPlan, H: int, W: int) -> np.ndarray:
    top, left, h, w = plan.rect
    if top < 0 or left < 0 or h < 0 or w < 0 or top + h > H or left + w > W:
        raise ValueError(f"CutMix rectangle {plan.rect} outside {H}x{W} frame")
    m = np.zeros((H, W), dtype=bool)
    m[top:top + h, left:left + w] = True
    return m


def cutmix(maps: Sequence[np.ndarray], plans: Sequence[CutMixPlan]) -> list[np.ndarray]:
    """Mix every array in ``maps`` (each shaped (B, H, W, ...)) with the same rectangles.

    Output slot ``k`` equals ``maps[..][plan.src_a]`` outside the rectangle and
    ``maps[..][plan.src_b]`` inside it.
    """
    if not maps:
        return []
    B, H, W = maps[0].shape[:3]
    for arr in maps:
        if arr.shape[:3] != (B, H, W):
            raise ValueError(f"cutmix maps disagree on (B, H, W): {arr.shape[:3]} vs {(B, H, W)}")
    outs = [np.empty((len(plans),) + arr.shape[1:], dtype=arr.dtype) for arr in maps]
    for k, plan in enumerate(plans):
        if not (0 <= plan.src_a < B and 0 <= plan.src_b < B):
            raise ValueError(f"plan {k} references batch index outside [0, {B})")
        mask = cutmix_mask(plan, H, W)
        for arr, out in zip(maps, outs):
            sel = mask.reshape(mask.shape + (1,) * (arr.ndim - 3))
            out[k] = np.where(sel, arr[plan.src_b], arr[plan.src_a])
    return outs


# ---------------------------------------------------------------------------
# flat binary export
# ---------------------------------------------------------------------------

def export_sample(path: str | Path, sample: SegSample, C: int) -> None:
    """Write ``<H,W,C as int32 LE><image float32 LE><label uint8>``."""
    H, W = sample.label.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", H, W, C))
        fh.write(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes())


def import_sample(path: str | Path) -> tuple[SegSample, int]:
    raw = Path(path).read_bytes()
    H, W, C = struct.unpack_from("<3i", raw, 0)
    n_img = H * W * 3 * 4
    expected = 12 + n_img + H * W
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    image = np.frombuffer(raw, dtype="<f4", count=H * W * 3, offset=12).reshape(H, W, 3)
    label = np.frombuffer(raw, dtype=np.uint8, count=H * W, offset=12 + n_img).reshape(H, W)
    return SegSample(image=image.astype(np.float64), label=label.astype(np.int64)), C


def export_dataset(spec: DatasetSpec, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    paths = []
    for split, ids in spec.split_ids().items():
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for i in ids:
            p = d / f"sample_{i:05d}.bin"
            export_sample(p, generate(spec, i), spec.C)
            paths.append(p)
    log.info("exported %d samples to %s", len(paths), out)
    return paths
