"""Feature extractor, linear head and prototype head.

The backbone is deliberately tiny and has no normalisation layers, so the
EMA teacher is just an elementwise average of parameter arrays::

    conv3x3(3->16) relu conv3x3(16->32, s2) relu conv3x3(32->32) relu
    resize-to-input conv1x1(32->D)

All image tensors are NHWC.
"""

from __future__ import annotations

import copy
import hashlib

import numpy as np

from . import numerics as nm
from .numerics import Tensor

BACKBONE_LAYERS = (
    # name, out, in, kernel, stride
    ("conv1", 16, 3, 3, 1),
    ("conv2", 32, 16, 3, 2),
    ("conv3", 32, 32, 3, 1),
    ("proj", None, 32, 1, 1),
)


# fixed input scaling: [0, 1] pixels -> roughly zero mean, unit spread
INPUT_MEAN = 0.5
INPUT_STD = 0.25


class SegModel:
    """Backbone plus a bias-free linear head, parameters held as named tensors."""

    def __init__(self, params: dict[str, Tensor], num_classes: int, feat_dim: int):
        self.params = params
        self.num_classes = num_classes
        self.feat_dim = feat_dim

    @classmethod
    def create(cls, num_classes: int, feat_dim: int = 16, seed: int = 0) -> "SegModel":
        rng = np.random.default_rng([seed, 0x5E6])
        params: dict[str, Tensor] = {}
        for name, out, cin, k, _ in BACKBONE_LAYERS:
            out = feat_dim if out is None else out
            std = np.sqrt(2.0 / (cin * k * k))
            params[f"{name}.w"] = Tensor(rng.normal(0.0, std, size=(out, cin, k, k)), requires_grad=True)
            params[f"{name}.b"] = Tensor(np.zeros(out), requires_grad=True)
        params["head.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / feat_dim), size=(num_classes, feat_dim)),
                                  requires_grad=True)
        return cls(params, num_classes, feat_dim)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data for k in sorted(self.params)}

    def copy(self, requires_grad: bool = False) -> "SegModel":
        params = {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in self.params.items()}
        return SegModel(params, self.num_classes, self.feat_dim)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.named_arrays().items():
            h.update(k.encode())
            h.update(v.tobytes())
        return h.hexdigest()

    def features(self, images) -> Tensor:
        return extract_features(self.params, images)

    def linear_posterior(self, fmap: Tensor) -> Tensor:
        return linear_posterior(self.params["head.w"], fmap)


def extract_features(params: dict[str, Tensor], images) -> Tensor:
    """(N, H, W, 3) images -> (N, H, W, D) features at input resolution."""
    x = nm.as_tensor(images)
    if x.ndim == 3:
        x = nm.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise nm.ShapeError("extract_features", x.shape, ("N", "H", "W", 3))
    size = x.shape[1:3]
    x = nm.mul(nm.sub(x, INPUT_MEAN), 1.0 / INPUT_STD)
    for name, _, _, k, stride in BACKBONE_LAYERS:
        if name == "proj":
            x = nm.bilinear_resize(x, size)
        x = nm.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=k // 2)
        if name != "proj":
            x = nm.relu(x)
    return x


def linear_posterior(head_w, fmap) -> Tensor:
    """Per-pixel softmax of ``w_c . F[a, b]`` over classes; (..., D) -> (..., C)."""
    head_w, fmap = nm.as_tensor(head_w), nm.as_tensor(fmap)
    if head_w.shape[1] != fmap.shape[-1]:
        raise nm.ShapeError("linear_posterior", head_w.shape, fmap.shape)
    return nm.softmax(nm.matmul(fmap, nm.transpose(head_w)), axis=-1)


def class_similarity(prototypes: np.ndarray, fmap, num_classes: int) -> Tensor:
    """Best cosine similarity to any prototype of each class, (..., D) -> (..., C).

    ``prototypes`` is class-major, (C*K, D); it is treated as a constant.
    """
    fmap = nm.as_tensor(fmap)
    lead = fmap.shape[:-1]
    d = fmap.shape[-1]
    if prototypes.shape[1] != d or prototypes.shape[0] % num_classes:
        raise nm.ShapeError("prototype_posterior", prototypes.shape, fmap.shape)
    k = prototypes.shape[0] // num_classes
    flat = nm.reshape(fmap, (-1, d))
    protos = nm.l2_normalize(Tensor(prototypes))
    sims = nm.matmul(nm.l2_normalize(flat), nm.transpose(protos))       # (P, C*K)
    best = nm.max_(nm.reshape(sims, (-1, num_classes, k)), axis=2)        # (P, C)
    return nm.reshape(best, lead + (num_classes,))


def prototype_posterior(bank, fmap, T: float = 0.1) -> Tensor:
    """softmax over classes of (max cosine similarity to the class's prototypes) / T."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    s = class_similarity(bank.prototypes, fmap, bank.num_classes)
    return nm.softmax(nm.mul(s, 1.0 / T), axis=-1)


def ema_update_teacher(teacher: SegModel, student: SegModel, momentum: float) -> SegModel:
    """theta_t <- m * theta_t + (1 - m) * theta_s for every parameter, in place."""
    for name, tp in teacher.params.items():
        sp = student.params[name]
        if tp.shape != sp.shape:
            raise nm.ShapeError("ema_update_teacher", tp.shape, sp.shape)
        if momentum == 1.0:
            continue
        tp.data = momentum * tp.data + (1.0 - momentum) * sp.data
    return teacher


def clone(model: SegModel) -> SegModel:
    return copy.deepcopy(model)
