"""Prototypical-part network with one prototype head per task.

Images are NHWC float arrays in [0, 1].  The shared part of the model is a
small convolutional backbone followed by an add-on of two 1x1 convolutions
and a sigmoid; each task owns a head of ``K * |classes|`` prototype vectors
whose class assignment is a fixed 0/1 matrix.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    pad: int
    channels: int


DEFAULT_BACKBONE = (
    ConvSpec(4, 2, 1, 16),
    ConvSpec(4, 2, 1, 32),
    ConvSpec(2, 1, 0, 32),
)


@dataclass(frozen=True)
class ModelConfig:
    image_shape: tuple[int, int, int] = (32, 32, 3)
    backbone: tuple[ConvSpec, ...] = DEFAULT_BACKBONE
    depth: int = 32  # D, prototype / add-on channel depth
    protos_per_class: int = 3  # K
    eta: float = 1e-4
    input_mean: float = 0.5
    input_std: float = 0.25
    init_gain: float = 1.0

    def __post_init__(self):
        if self.depth <= 0 or self.protos_per_class <= 0:
            raise ModelError("depth and protos_per_class must be positive")
        if not 0.0 < self.eta < 1.0:
            raise ModelError("eta must lie in (0, 1)")
        self.feature_shape  # validates the conv chain

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        h, w, _ = self.image_shape
        for spec in self.backbone:
            h = nx.conv_output_size(h, spec.kernel, spec.stride, spec.pad)
            w = nx.conv_output_size(w, spec.kernel, spec.stride, spec.pad)
        return h, w, self.depth


@dataclass
class PrototypeHead:
    task_id: int
    classes: list[int]
    prototypes: Tensor  # (M, D)
    assignment: np.ndarray = field(default=None)  # (M, C), entries in {0, 1}

    def __post_init__(self):
        m, c = self.prototypes.shape[0], len(self.classes)
        if c == 0 or m % c:
            raise ModelError("prototype count must be K * |classes|")
        if self.assignment is None:
            k = m // c
            self.assignment = np.repeat(np.eye(c), k, axis=0)
        self.assignment = np.array(self.assignment, dtype=np.float64)
        self.assignment.setflags(write=False)
        if self.assignment.shape != (m, c) or not np.all(self.assignment.sum(axis=1) == 1):
            raise ModelError("each prototype must be assigned to exactly one class")

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def proto_class(self) -> np.ndarray:
        """Local class index of every prototype."""
        return self.assignment.argmax(axis=1)


class IcicleModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = nx.make_rng(seed)
        self.backbone: list[tuple[Tensor, Tensor]] = []
        cin = config.image_shape[2]
        for i, spec in enumerate(config.backbone):
            k = spec.kernel
            w = config.init_gain * nx.xavier_normal((k, k, cin, spec.channels), k * k * cin, k * k * spec.channels, rng)
            self.backbone.append(
                (Tensor(w, True, f"backbone{i}.w"), Tensor(np.zeros(spec.channels), True, f"backbone{i}.b"))
            )
            cin = spec.channels
        self.addon: list[tuple[Tensor, Tensor]] = []
        for i in range(2):
            w = config.init_gain * nx.xavier_normal((1, 1, cin, config.depth), cin, config.depth, rng)
            self.addon.append(
                (Tensor(w, True, f"addon{i}.w"), Tensor(np.zeros(config.depth), True, f"addon{i}.b"))
            )
            cin = config.depth
        self.heads: list[PrototypeHead] = []

    # ---- parameter groups
    def backbone_params(self) -> list[Tensor]:
        return [t for pair in self.backbone for t in pair]

    def addon_params(self) -> list[Tensor]:
        return [t for pair in self.addon for t in pair]

    def shared_params(self) -> list[Tensor]:
        return self.backbone_params() + self.addon_params()

    def prototype_params(self) -> list[Tensor]:
        return [h.prototypes for h in self.heads]

    def parameters(self) -> list[Tensor]:
        return self.shared_params() + self.prototype_params()

    def named_parameters(self) -> dict[str, Tensor]:
        out = {p.name: p for p in self.shared_params()}
        for head in self.heads:
            out[head.prototypes.name] = head.prototypes
        return out

    @property
    def classes(self) -> list[int]:
        return [c for head in self.heads for c in head.classes]

    def add_head(self, classes, prototypes: np.ndarray) -> PrototypeHead:
        classes = [int(c) for c in classes]
        if set(classes) & set(self.classes):
            raise ModelError("new head classes overlap existing heads")
        expected = (self.config.protos_per_class * len(classes), self.config.depth)
        prototypes = np.asarray(prototypes, dtype=np.float64)
        if prototypes.shape != expected:
            raise ModelError(f"prototypes must have shape {expected}, got {prototypes.shape}")
        tid = len(self.heads) + 1
        head = PrototypeHead(tid, classes, Tensor(prototypes.copy(), True, f"head{tid}.prototypes"))
        self.heads.append(head)
        return head

    def head_slices(self) -> list[tuple[slice, slice]]:
        """(prototype slice, class slice) of every head in the concatenated output."""
        out, p0, c0 = [], 0, 0
        for head in self.heads:
            out.append((slice(p0, p0 + head.num_prototypes), slice(c0, c0 + len(head.classes))))
            p0 += head.num_prototypes
            c0 += len(head.classes)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            p.data[...] = state[name]


class Snapshot:
    """Read-only deep copy of a model, tagged with the task count at copy time."""

    def __init__(self, model: IcicleModel):
        self.model = copy.deepcopy(model)
        self.task_id = len(model.heads)
        for p in self.model.parameters():
            p.requires_grad = False
            p.grad = None
            p.data.setflags(write=False)

    @property
    def heads(self) -> list[PrototypeHead]:
        return self.model.heads

    def restore(self) -> IcicleModel:
        """Writable copy of the stored model."""
        model = copy.deepcopy(self.model)
        for p in model.parameters():
            p.data = p.data.copy()
            p.requires_grad = True
        return model


def snapshot(model: IcicleModel) -> Snapshot:
    return Snapshot(model)


def _as_model(model) -> IcicleModel:
    return model.model if isinstance(model, Snapshot) else model


# ---------------------------------------------------------------- forward

def forward_features(model, images) -> Tensor:
    """Add-on feature map (N, H, W, D) with values in (0, 1)."""
    m = _as_model(model)
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    single = x.data.ndim == 3
    if single:
        x = nx.reshape(x, (1,) + x.shape)
    if x.shape[1:] != m.config.image_shape:
        raise ModelError(f"image shape {x.shape[1:]} does not match {m.config.image_shape}")
    cfg = m.config
    if cfg.input_mean or cfg.input_std != 1.0:
        x = nx.mul(nx.sub(x, cfg.input_mean), 1.0 / cfg.input_std)
    for spec, (w, b) in zip(m.config.backbone, m.backbone):
        x = nx.relu(nx.conv2d(x, w, b, spec.stride, spec.pad))
    x = nx.relu(nx.conv2d(x, *m.addon[0]))
    x = nx.sigmoid(nx.conv2d(x, *m.addon[1]))
    return nx.reshape(x, x.shape[1:]) if single else x


def similarity(d, eta: float):
    """log((d + 1) / (d + eta)); works on floats and arrays."""
    d = np.asarray(d, dtype=np.float64)
    out = np.log1p(d) - np.log(d + eta)
    return float(out) if out.ndim == 0 else out


def similarity_map(fm, prototype, eta: float) -> np.ndarray:
    """H x W similarities of one prototype against every patch of one feature map."""
    z = fm.data if isinstance(fm, Tensor) else np.asarray(fm)
    p = prototype.data if isinstance(prototype, Tensor) else np.asarray(prototype)
    d = nx.pairwise_l2(Tensor(z.reshape(-1, z.shape[-1])), Tensor(p.reshape(1, -1))).data
    return similarity(d[:, 0], eta).reshape(z.shape[:2])


@dataclass
class ForwardPass:
    """Intermediate results of one batched pass; flattened spatial axis P = H*W."""

    features: Tensor  # (N, H, W, D)
    distances: Tensor  # (N, P, M_total)
    similarities: Tensor  # (N, P, M_total)
    max_sim: Tensor  # (N, M_total)
    argmax: np.ndarray  # (N, M_total) flat patch index of the max
    logits: Tensor  # (N, C_total)
    slices: list[tuple[slice, slice]]


def run(model, images) -> ForwardPass:
    m = _as_model(model)
    if not m.heads:
        raise ModelError("model has no prototype heads")
    fm = forward_features(m, images)
    if fm.data.ndim == 3:
        fm = nx.reshape(fm, (1,) + fm.shape)
    n, h, w, d = fm.shape
    z = nx.reshape(fm, (n, h * w, d))
    protos = nx.concat(m.prototype_params(), axis=0) if len(m.heads) > 1 else m.heads[0].prototypes
    dist = nx.pairwise_l2(z, protos)
    sims = nx.similarity(dist, m.config.eta)
    max_sim, argmax = nx.max_along(sims, axis=1)
    assignment = _block_assignment(m)
    logits = nx.matmul(max_sim, assignment)
    return ForwardPass(fm, dist, sims, max_sim, argmax, logits, m.head_slices())


def _block_assignment(m: IcicleModel) -> np.ndarray:
    total_p = sum(hd.num_prototypes for hd in m.heads)
    total_c = sum(len(hd.classes) for hd in m.heads)
    out = np.zeros((total_p, total_c))
    for hd, (ps, cs) in zip(m.heads, m.head_slices()):
        out[ps, cs] = hd.assignment
    return out


def head_logits(fm, head: PrototypeHead, eta: float):
    """Per-class logits of one head, plus per-prototype max similarity and its (i, j) location.

    ``fm`` is a single (H, W, D) feature map.
    """
    z = fm.data if isinstance(fm, Tensor) else np.asarray(fm, dtype=np.float64)
    if z.shape[-1] != head.prototypes.shape[1]:
        raise ModelError("feature depth does not match prototype depth")
    h, w, d = z.shape
    dist = nx.pairwise_l2(Tensor(z.reshape(h * w, d)), head.prototypes.detach()).data
    sims = similarity(dist, eta)
    idx = np.argmax(sims, axis=0)
    max_sim = sims[idx, np.arange(sims.shape[1])]
    locations = np.stack(np.unravel_index(idx, (h, w)), axis=1)
    return max_sim @ head.assignment, max_sim, locations


def full_forward(model, images) -> Tensor:
    """Concatenated logits over all heads, ordered by task."""
    return run(model, images).logits


def predict_logits(model, images, batch_size: int = 64) -> np.ndarray:
    images = np.asarray(images)
    out = []
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(run(model, images[start:start + batch_size]).logits.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, len(_as_model(model).classes)))


def feature_maps(model, images, batch_size: int = 64) -> np.ndarray:
    images = np.asarray(images)
    out = []
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(forward_features(model, images[start:start + batch_size]).data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- projection

def project_prototypes(model: IcicleModel, head: PrototypeHead, images, labels, batch_size: int = 64) -> PrototypeHead:
    """Replace every prototype of ``head`` by its nearest latent patch of its own class."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    members = [np.flatnonzero(labels == c) for c in head.classes]
    missing = [c for c, idx in zip(head.classes, members) if idx.size == 0]
    if missing:
        raise ModelError(f"no images for classes {missing}; head left unchanged")
    new = head.prototypes.data.copy()
    owner = head.proto_class
    for local, idx in enumerate(members):
        patches = feature_maps(model, images[idx], batch_size)
        patches = patches.reshape(-1, patches.shape[-1])
        rows = np.flatnonzero(owner == local)
        dist = nx.pairwise_l2(Tensor(patches), Tensor(new[rows])).data
        nearest = np.argmin(dist, axis=0)
        new[rows] = patches[nearest]
    head.prototypes.data[...] = new
    return head


def similarity_map_to_bytes(sim_map: np.ndarray, eta: float) -> np.ndarray:
    """Linear map of [0, ln(1/eta)] onto 0..255, rounded half up and clipped."""
    top = math.log(1.0 / eta)
    scaled = np.floor(np.clip(sim_map, 0.0, top) / top * 255.0 + 0.5)
    return scaled.astype(np.uint8)


def similarity_pgm_comment(eta: float) -> str:
    return f"similarity map: byte = floor(clip(sim, 0, ln(1/eta)) / ln(1/eta) * 255 + 0.5), eta={eta!r}"
