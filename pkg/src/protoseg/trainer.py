"""Teacher-student training with linear and prototype predictors.

One semi-supervised step:

1. weakly augment a labeled and an unlabeled batch;
2. the teacher's linear head labels the unlabeled views (confidence gate ``tau``);
3. unlabeled views, pseudo-labels and gates are CutMix-ed with shared rectangles;
4. the student is trained on labeled CE (both heads) plus masked CE on the
   mixed images (both heads);
5. prototypes take an EMA step toward the student features of labeled pixels
   and of gated mixed pixels; the teacher takes an EMA step toward the student.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import numerics as nm
from .data import DatasetSpec, SegSample, cutmix, load_split, sample_cutmix_plans, weak_augment
from .metrics import confusion_matrix, discrimination, miou, sample_per_class
from .model import SegModel, ema_update_teacher, prototype_posterior
from .numerics import SGD, SgdConfig, Tensor
from .protobank import PrototypeBank, init_bank, update as update_bank

log = logging.getLogger(__name__)

CE_EPS = 1e-9
METRIC_COLUMNS = ("epoch", "L_l", "L_u", "val_mIoU_linear", "val_mIoU_proto", "valid_pixel_fraction",
                  "pseudo_label_accuracy", "intra_var", "inter_var")


@dataclass
class TrainConfig:
    tau: float = 0.8
    T: float = 0.1
    alpha: float = 0.99
    K: int = 4
    batch_labeled: int = 2
    batch_unlabeled: int = 4
    epochs: int = 4
    warmup_epochs: int = 20
    lambda_u: float = 1.0
    base_lr: float = 0.02
    warmup_lr: float = 0.05
    weight_decay: float = 1e-4
    momentum: float = 0.9
    poly_power: float = 0.8
    grad_clip: float | None = 2.0
    ema_momentum: float = 0.99
    feat_dim: int = 16
    crop_frac: float = 0.875
    pixels_per_class: int = 1000
    seed: int = 0
    # component switches; the defaults are the full method
    use_linear: bool = True
    use_proto: bool = True
    update_proto: bool = True
    use_unlabeled: bool = True
    pseudo_source: str = "linear"        # "linear" | "prototype"
    indicator: str = "dataflow"          # "dataflow" | "literal"
    per_pixel_proto_update: bool = False
    eval_pixels_per_class: int = 2000
    checkpoint_every: int = 0

    def validate(self) -> None:
        errors = []
        if not 0 < self.tau <= 1:
            errors.append("tau must lie in (0, 1]")
        if self.T <= 0:
            errors.append("T must be positive")
        if self.lambda_u < 0:
            errors.append("lambda_u must be non-negative")
        if not 0 <= self.alpha <= 1:
            errors.append("alpha must lie in [0, 1]")
        if not 0 <= self.ema_momentum <= 1:
            errors.append("ema_momentum must lie in [0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            errors.append("grad_clip must be positive or None")
        if self.K < 1:
            errors.append("K must be positive")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            errors.append("batch sizes must be positive")
        if self.epochs < 0:
            errors.append("epochs must be non-negative")
        if self.warmup_epochs < 1:
            errors.append("warmup_epochs must be at least 1")
        if not 0.75 <= self.crop_frac <= 1:
            errors.append("crop_frac must lie in [0.75, 1]")
        if self.pseudo_source not in ("linear", "prototype"):
            errors.append("pseudo_source must be 'linear' or 'prototype'")
        if self.indicator not in ("dataflow", "literal"):
            errors.append("indicator must be 'dataflow' or 'literal'")
        if not (self.use_linear or self.use_proto):
            errors.append("at least one of use_linear / use_proto must be on")
        if self.pseudo_source == "prototype" and not self.use_proto:
            errors.append("pseudo_source='prototype' needs use_proto")
        if errors:
            raise ValueError("; ".join(errors))

    def crop_size(self, H: int, W: int) -> tuple[int, int]:
        return (max(2, int(H * self.crop_frac) // 2 * 2), max(2, int(W * self.crop_frac) // 2 * 2))


@dataclass
class PseudoLabelMap:
    labels: np.ndarray        # (B, H, W) int
    confidence: np.ndarray    # (B, H, W) in [0, 1]
    valid: np.ndarray         # (B, H, W) bool

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> "PseudoLabelMap":
        return PseudoLabelMap(self.labels[i], self.confidence[i], self.valid[i])


@dataclass
class StepCounters:
    """Running totals used for logging and for the gating audit."""
    labeled_steps: int = 0
    unlabeled_steps: int = 0
    gated_in: int = 0
    gated_out: int = 0
    pseudo_correct: int = 0
    loss_l: list = field(default_factory=list)
    loss_u: list = field(default_factory=list)


@dataclass
class TrainState:
    student: SegModel
    teacher: SegModel
    bank: PrototypeBank | None
    optimizer: SGD | None = None
    step: int = 0
    epoch: int = 0
    counters: StepCounters | None = None

    def entries(self) -> dict[str, np.ndarray]:
        out = {f"student.{k}": v for k, v in self.student.named_arrays().items()}
        out.update({f"teacher.{k}": v for k, v in self.teacher.named_arrays().items()})
        if self.bank is not None:
            out["bank.prototypes"] = self.bank.prototypes
            out["bank.class_of"] = self.bank.class_of
            out["bank.update_counts"] = self.bank.update_counts
        if self.optimizer is not None:
            out.update({f"opt.{k}": v for k, v in self.optimizer.state_arrays().items()})
        out["state.step"] = np.array([self.step, self.epoch], dtype=np.int64)
        return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _flat_probs(probs: Tensor) -> Tensor:
    return nm.reshape(probs, (-1, probs.shape[-1]))


def pixel_ce(probs: Tensor, target: np.ndarray) -> Tensor:
    """Per-pixel clamped CE, flattened to (P,)."""
    return nm.cross_entropy(_flat_probs(probs), np.asarray(target).reshape(-1), eps=CE_EPS)


def masked_mean(losses: Tensor, valid: np.ndarray) -> Tensor:
    """Sum over valid entries divided by max(1, #valid)."""
    w = np.asarray(valid, dtype=np.float64).reshape(-1)
    return nm.mul(nm.sum_(nm.mul(losses, w)), 1.0 / max(1.0, w.sum()))


def image_mean_ce(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Pixel mean within each image, then mean over the batch."""
    per_pixel = nm.reshape(pixel_ce(probs, labels), (labels.shape[0], -1))
    return nm.mean(nm.mean(per_pixel, axis=1))


def labeled_step(images: np.ndarray, labels: np.ndarray, student: SegModel, bank: PrototypeBank | None,
                 cfg: TrainConfig) -> tuple[Tensor, Tensor]:
    """Supervised loss of both heads on a weakly augmented labeled batch.

    Returns ``(L_l, student features)``.
    """
    fmap = student.features(images)
    terms = []
    if cfg.use_linear:
        terms.append(image_mean_ce(student.linear_posterior(fmap), labels))
    if cfg.use_proto and bank is not None:
        terms.append(image_mean_ce(prototype_posterior(bank, fmap, cfg.T), labels))
    return _sum_terms(terms), fmap


def pseudo_label(teacher: SegModel, images: np.ndarray, cfg: TrainConfig) -> PseudoLabelMap:
    """Teacher linear-head argmax, its probability, and the ``>= tau`` gate."""
    probs = teacher.linear_posterior(teacher.features(images)).data
    return _gate(probs, cfg.tau)


def pseudo_label_from_prototypes(teacher: SegModel, bank: PrototypeBank, images: np.ndarray,
                                 cfg: TrainConfig) -> PseudoLabelMap:
    """Pseudo-labels from the prototype head on teacher features (prototype-only ablation)."""
    probs = prototype_posterior(bank, teacher.features(images), cfg.T).data
    return _gate(probs, cfg.tau)


def _gate(probs: np.ndarray, tau: float) -> PseudoLabelMap:
    labels = probs.argmax(axis=-1)
    conf = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    return PseudoLabelMap(labels, conf, conf >= tau)


def unlabeled_step(mixed_images: np.ndarray, mixed_labels: np.ndarray, mixed_valid: np.ndarray,
                   student: SegModel, bank: PrototypeBank | None, cfg: TrainConfig) -> tuple[Tensor, Tensor]:
    """Masked CE of both student heads on CutMix images against mixed pseudo-labels.

    Returns ``(L_u, student features on the mixed images)``. With no valid
    pixel the loss is exactly zero.
    """
    fmap = student.features(mixed_images)
    terms = []
    if cfg.use_linear:
        terms.append(masked_mean(pixel_ce(student.linear_posterior(fmap), mixed_labels), mixed_valid))
    if cfg.use_proto and bank is not None:
        terms.append(masked_mean(pixel_ce(prototype_posterior(bank, fmap, cfg.T), mixed_labels), mixed_valid))
    return _sum_terms(terms), fmap


def _sum_terms(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = nm.add(out, t)
    return out


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------

class _Cycler:
    """Endless reshuffled pass over ``n`` indices."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order: list[int] = []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self.order:
                self.order = list(self.rng.permutation(self.n))
            out.append(int(self.order.pop()))
        return out


def _augment_batch(samples: Sequence[SegSample], idx: Sequence[int], rng: np.random.Generator,
                   crop: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    views = [weak_augment(samples[i], int(rng.integers(2**63)), crop_size=crop) for i in idx]
    return np.stack([v.image for v in views]), np.stack([v.label for v in views])


def _sgd(params, cfg: TrainConfig, lr: float, total: int) -> SGD:
    return SGD(params, SgdConfig(base_lr=lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum,
                                 total_iters=max(1, total), poly_power=cfg.poly_power,
                                 clip_norm=cfg.grad_clip))


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------

def warmup(labeled: Sequence[SegSample], cfg: TrainConfig, student: SegModel | None = None,
           on_epoch: Callable[[int, float], None] | None = None) -> SegModel:
    """Linear-head cross-entropy on the labeled set only."""
    if len(labeled) == 0:
        raise ValueError("warm-up needs a non-empty labeled set")
    if cfg.warmup_epochs < 1:
        raise ValueError("warmup_epochs must be at least 1")
    num_classes = int(max(s.label.max() for s in labeled)) + 1
    if student is None:
        student = SegModel.create(num_classes, cfg.feat_dim, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    H, W = labeled[0].label.shape
    crop = cfg.crop_size(H, W)
    steps = math.ceil(len(labeled) / cfg.batch_labeled)
    opt = _sgd(student.parameters(), cfg, cfg.warmup_lr, steps * cfg.warmup_epochs)
    it = 0
    for epoch in range(cfg.warmup_epochs):
        order = rng.permutation(len(labeled))
        losses = []
        for s in range(steps):
            idx = order[s * cfg.batch_labeled:(s + 1) * cfg.batch_labeled]
            images, labels = _augment_batch(labeled, idx, rng, crop)
            opt.zero_grad()
            loss = image_mean_ce(student.linear_posterior(student.features(images)), labels)
            loss.backward()
            opt.step(it)
            it += 1
            losses.append(loss.item())
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)))
    opt.zero_grad()
    return student


def train_step(state: TrainState, labeled: Sequence[SegSample], unlabeled: Sequence[SegSample],
               l_idx: Sequence[int], u_idx: Sequence[int], rng: np.random.Generator, cfg: TrainConfig,
               counters: StepCounters) -> None:
    """One optimisation step followed by prototype and teacher updates."""
    student, teacher, bank = state.student, state.teacher, state.bank
    H, W = labeled[0].label.shape
    crop = cfg.crop_size(H, W)
    proto_on = cfg.use_proto and bank is not None

    images_l, labels_l = _augment_batch(labeled, l_idx, rng, crop)
    state.optimizer.zero_grad()
    loss_l, fmap_l = labeled_step(images_l, labels_l, student, bank, cfg)
    counters.labeled_steps += 1
    total = loss_l
    update_feats = [fmap_l.data.reshape(-1, student.feat_dim)]
    update_cls = [labels_l.reshape(-1)]

    loss_u_val = 0.0
    if cfg.use_unlabeled and cfg.lambda_u > 0:
        images_u, truth_u = _augment_batch(unlabeled, u_idx, rng, crop)
        if cfg.pseudo_source == "prototype":
            pl = pseudo_label_from_prototypes(teacher, bank, images_u, cfg)
        else:
            pl = pseudo_label(teacher, images_u, cfg)
        plans = sample_cutmix_plans(len(u_idx), crop[0], crop[1], rng)
        mixed_img, mixed_lab, mixed_conf, mixed_valid, mixed_truth = cutmix(
            [images_u, pl.labels, pl.confidence, pl.valid, truth_u], plans)
        if cfg.indicator == "literal":
            probs = teacher.linear_posterior(teacher.features(mixed_img)).data
            conf_mixed = np.take_along_axis(probs, mixed_lab[..., None], axis=-1)[..., 0]
            mixed_valid = conf_mixed >= cfg.tau
        loss_u, fmap_u = unlabeled_step(mixed_img, mixed_lab, mixed_valid, student, bank, cfg)
        counters.unlabeled_steps += 1
        n_in = int(mixed_valid.sum())
        counters.gated_in += n_in
        counters.gated_out += mixed_valid.size - n_in
        counters.pseudo_correct += int((mixed_valid & (mixed_lab == mixed_truth)).sum())
        total = nm.add(total, nm.mul(loss_u, cfg.lambda_u))
        loss_u_val = loss_u.item()
        sel = mixed_valid.reshape(-1)
        update_feats.append(fmap_u.data.reshape(-1, student.feat_dim)[sel])
        update_cls.append(mixed_lab.reshape(-1)[sel])

    total.backward()
    state.optimizer.step(state.step)
    state.optimizer.zero_grad()
    state.step += 1

    if proto_on and cfg.update_proto:
        update_bank(bank, np.concatenate(update_feats), np.concatenate(update_cls),
                    per_pixel=cfg.per_pixel_proto_update)
    ema_update_teacher(teacher, student, cfg.ema_momentum)
    counters.loss_l.append(loss_l.item())
    counters.loss_u.append(loss_u_val)


def steps_per_epoch(spec: DatasetSpec, cfg: TrainConfig) -> int:
    return max(1, math.ceil(spec.n_unlabeled / cfg.batch_unlabeled))


def init_state(cfg: TrainConfig, spec: DatasetSpec, labeled: Sequence[SegSample],
               student: SegModel | None = None) -> TrainState:
    """Warm up (unless a warmed-up ``student`` is given), then build teacher, bank, optimizer."""
    if student is None:
        student = warmup(labeled, cfg, SegModel.create(spec.C, cfg.feat_dim, seed=cfg.seed))
    bank = None
    if cfg.use_proto:
        bank = init_bank(student, labeled, K=cfg.K, pixels_per_class=cfg.pixels_per_class,
                         seed=cfg.seed, alpha=cfg.alpha)
    teacher = student.copy(requires_grad=False)
    total = cfg.epochs * steps_per_epoch(spec, cfg)
    return TrainState(student, teacher, bank, _sgd(student.parameters(), cfg, cfg.base_lr, total))


def train(cfg: TrainConfig, spec: DatasetSpec, out_dir: str | Path | None = None,
          warm_student: SegModel | None = None) -> tuple[TrainState, list[dict]]:
    """Full run: warm-up, prototype initialisation, semi-supervised epochs.

    Writes ``metrics.csv`` and checkpoints under ``out_dir`` when given.
    """
    cfg.validate()
    spec.validate()
    labeled = load_split(spec, "labeled")
    unlabeled = load_split(spec, "unlabeled")
    val = load_split(spec, "val")
    if not labeled:
        raise ValueError("empty labeled set")

    state = init_state(cfg, spec, labeled, warm_student.copy(requires_grad=True) if warm_student else None)
    rng = np.random.default_rng([cfg.seed, 2])
    lab_cycle = _Cycler(len(labeled), rng)
    unl_cycle = _Cycler(max(1, len(unlabeled)), rng)
    n_steps = steps_per_epoch(spec, cfg)
    counters = StepCounters()
    history: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        c = StepCounters()
        for _ in range(n_steps):
            u_idx = unl_cycle.take(cfg.batch_unlabeled) if unlabeled else []
            train_step(state, labeled, unlabeled, lab_cycle.take(cfg.batch_labeled), u_idx, rng, cfg, c)
        state.epoch = epoch + 1
        _merge(counters, c)
        row = _epoch_row(epoch, c, evaluate(state, val, cfg))
        history.append(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        if out is not None:
            write_metrics_csv(out / "metrics.csv", history)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_state(out / f"epoch_{epoch + 1:03d}.pseg", state, cfg, spec)
    if cfg.epochs == 0:
        history.append(_epoch_row(-1, StepCounters(), evaluate(state, val, cfg)))
    state.counters = counters
    if out is not None:
        save_state(out / "final.pseg", state, cfg, spec)
        write_metrics_csv(out / "metrics.csv", history)
    return state, history


def _merge(total: StepCounters, part: StepCounters) -> None:
    for f in ("labeled_steps", "unlabeled_steps", "gated_in", "gated_out", "pseudo_correct"):
        setattr(total, f, getattr(total, f) + getattr(part, f))
    total.loss_l += part.loss_l
    total.loss_u += part.loss_u


def _epoch_row(epoch: int, c: StepCounters, ev: dict) -> dict:
    seen = c.gated_in + c.gated_out
    return {
        "epoch": epoch + 1,
        "L_l": float(np.mean(c.loss_l)) if c.loss_l else math.nan,
        "L_u": float(np.mean(c.loss_u)) if c.loss_u else math.nan,
        "val_mIoU_linear": ev["miou_linear"],
        "val_mIoU_proto": ev["miou_proto"],
        "valid_pixel_fraction": c.gated_in / seen if seen else math.nan,
        "pseudo_label_accuracy": c.pseudo_correct / c.gated_in if c.gated_in else math.nan,
        "intra_var": ev["intra_var"],
        "inter_var": ev["inter_var"],
    }


# ---------------------------------------------------------------------------
# evaluation and persistence
# ---------------------------------------------------------------------------

def predict(model: SegModel, bank: PrototypeBank | None, images: np.ndarray, cfg: TrainConfig,
            chunk: int = 16) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Linear and prototype argmax maps plus features, computed in chunks."""
    lin, pro, feats = [], [], []
    for s in range(0, len(images), chunk):
        f = model.features(images[s:s + chunk])
        lin.append(model.linear_posterior(f).data.argmax(-1))
        if bank is not None:
            pro.append(prototype_posterior(bank, f, cfg.T).data.argmax(-1))
        feats.append(f.data)
    return (np.concatenate(lin), np.concatenate(pro) if pro else None, np.concatenate(feats))


def evaluate(state: TrainState, samples: Sequence[SegSample], cfg: TrainConfig) -> dict:
    """mIoU of both heads on the teacher network, plus feature scatter traces."""
    if not samples:
        return {"miou_linear": math.nan, "miou_proto": math.nan, "intra_var": math.nan,
                "inter_var": math.nan, "disc_ratio": math.nan}
    model = state.teacher
    C = model.num_classes
    images = np.stack([s.image for s in samples])
    truth = np.stack([s.label for s in samples])
    lin, pro, feats = predict(model, state.bank, images, cfg)
    rng = np.random.default_rng([cfg.seed, 3])
    x, y = sample_per_class(feats, truth, cfg.eval_pixels_per_class, rng)
    try:
        d = discrimination(x, y)
        intra, inter, ratio = d.intra_trace, d.inter_trace, d.ratio_or_nan()
    except ValueError:
        intra = inter = ratio = math.nan
    return {
        "miou_linear": miou(confusion_matrix(lin, truth, C)),
        "miou_proto": miou(confusion_matrix(pro, truth, C)) if pro is not None else math.nan,
        "intra_var": intra,
        "inter_var": inter,
        "disc_ratio": ratio,
    }


def write_metrics_csv(path: str | Path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]])


def save_state(path: str | Path, state: TrainState, cfg: TrainConfig, spec: DatasetSpec) -> str:
    meta = {"format": 1, "train_config": dataclasses.asdict(cfg), "dataset_spec": dataclasses.asdict(spec),
            "num_classes": state.student.num_classes, "feat_dim": state.student.feat_dim,
            "K": state.bank.K if state.bank is not None else None}
    return ckpt.save(path, state.entries(), meta)


def load_state(path: str | Path) -> tuple[TrainState, TrainConfig, DatasetSpec]:
    entries, meta = ckpt.load(path)
    if meta is None or "train_config" not in meta:
        raise ckpt.CheckpointError("checkpoint lacks configuration metadata")
    cfg = TrainConfig(**meta["train_config"])
    spec = DatasetSpec(**meta["dataset_spec"])
    C, D = meta["num_classes"], meta["feat_dim"]

    def model(prefix: str, grad: bool) -> SegModel:
        params = {k[len(prefix):]: Tensor(v, requires_grad=grad) for k, v in entries.items() if k.startswith(prefix)}
        return SegModel(params, C, D)

    bank = None
    if "bank.prototypes" in entries:
        bank = PrototypeBank(entries["bank.prototypes"], entries["bank.class_of"], meta["K"], cfg.alpha,
                             entries["bank.update_counts"])
    step, epoch = (int(v) for v in entries["state.step"])
    student = model("student.", True)
    opt = _sgd(student.parameters(), cfg, cfg.base_lr, cfg.epochs * steps_per_epoch(spec, cfg))
    opt.load_state_arrays({k[len("opt."):]: v for k, v in entries.items() if k.startswith("opt.")})
    return TrainState(student, model("teacher.", False), bank, opt, step, epoch), cfg, spec
