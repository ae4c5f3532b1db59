"""Training objectives for the per-task prototype network."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import protonet as pn
from .numerics import Tensor

log = logging.getLogger(__name__)


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    clst: float = 0.8
    sep: float = -0.08
    ir: float = 0.01

    def __post_init__(self):
        if self.ce <= 0:
            raise LossError("cross-entropy weight must be positive")


class RegPlacement(str, enum.Enum):
    FEATURE = "feature"
    DISTANCE = "distance"
    SIMILARITY = "similarity"


def mask_size(gamma: float, h: int, w: int) -> int:
    if not 0.0 < gamma <= 1.0:
        raise LossError("gamma must lie in (0, 1]")
    return max(1, math.floor(gamma * h * w + 0.5))


def top_mask(sim_old: np.ndarray, m: int, axis: int = 1) -> np.ndarray:
    """Binary mask of the ``m`` largest cells along ``axis``; ties go to the lower index."""
    order = np.argsort(-sim_old, axis=axis, kind="stable")
    keep = np.take(order, np.arange(m), axis=axis)
    mask = np.zeros(sim_old.shape, dtype=np.float64)
    np.put_along_axis(mask, keep, 1.0, axis=axis)
    return mask


def global_labels(model, class_ids) -> np.ndarray:
    classes = pn._as_model(model).classes
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([lookup[int(c)] for c in np.atleast_1d(class_ids)], dtype=np.int64)
    except KeyError as exc:
        raise LossError(f"label {exc.args[0]} is not a known class") from None


# ---------------------------------------------------------------- components

def cross_entropy_full(model, images, labels) -> Tensor:
    """Cross-entropy over the concatenated logits of every head (labels are class ids)."""
    fp = pn.run(model, images)
    return nx.softmax_cross_entropy(fp.logits, global_labels(model, labels))


def _proto_owners(model: pn.IcicleModel) -> tuple[np.ndarray, np.ndarray]:
    """Global class index and head index of every prototype."""
    owner_class, owner_head = [], []
    for h, (head, (_, cs)) in enumerate(zip(model.heads, model.head_slices())):
        owner_class.append(head.proto_class + cs.start)
        owner_head.append(np.full(head.num_prototypes, h))
    return np.concatenate(owner_class), np.concatenate(owner_head)


def _class_heads(model: pn.IcicleModel) -> np.ndarray:
    return np.concatenate([np.full(len(hd.classes), h) for h, hd in enumerate(model.heads)])


def _cluster_sep_masks(model: pn.IcicleModel, glabels: np.ndarray):
    owner_class, owner_head = _proto_owners(model)
    label_head = _class_heads(model)[glabels]
    own = owner_class[None, :] == glabels[:, None]
    other = (owner_head[None, :] == label_head[:, None]) & ~own
    return own, other


def _cluster(min_dist: Tensor, own: np.ndarray) -> Tensor:
    value, _ = nx.masked_min(min_dist, own, axis=1)
    return nx.mean(value)


def _separation(min_dist: Tensor, other: np.ndarray) -> Tensor:
    has_other = other.any(axis=1)
    if not has_other.all():
        log.warning("separation cost undefined for a single-class head; using 0")
    if not has_other.any():
        return Tensor(0.0)
    safe = np.where(has_other[:, None], other, True)
    value, _ = nx.masked_min(min_dist, safe, axis=1)
    return nx.mul(nx.sum_(nx.mul(value, has_other.astype(np.float64))), 1.0 / len(has_other))


def _head_min_dist(fm, head: pn.PrototypeHead) -> Tensor:
    fm = fm if isinstance(fm, Tensor) else Tensor(fm)
    if fm.data.ndim == 3:
        fm = nx.reshape(fm, (1,) + fm.shape)
    n, h, w, d = fm.shape
    dist = nx.pairwise_l2(nx.reshape(fm, (n, h * w, d)), head.prototypes)
    return nx.min_along(dist, axis=1)[0]


def _local_labels(head: pn.PrototypeHead, class_label) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(head.classes)}
    try:
        return np.array([lookup[int(c)] for c in np.atleast_1d(class_label)])
    except KeyError as exc:
        raise LossError(f"label {exc.args[0]} is not a class of head {head.task_id}") from None


def cluster_cost(fm, head: pn.PrototypeHead, class_label) -> Tensor:
    """Distance from the closest patch to the closest own-class prototype (batch mean)."""
    local = _local_labels(head, class_label)
    own = head.proto_class[None, :] == local[:, None]
    return _cluster(_head_min_dist(fm, head), own)


def separation_cost(fm, head: pn.PrototypeHead, class_label) -> Tensor:
    """Distance from the closest patch to the closest other-class prototype of the same head."""
    local = _local_labels(head, class_label)
    other = head.proto_class[None, :] != local[:, None]
    return _separation(_head_min_dist(fm, head), other)


def _ir_from_maps(
    placement: RegPlacement,
    gamma: float,
    hw: tuple[int, int],
    sim_old: np.ndarray,
    sim_new: Tensor,
    dist_old: np.ndarray,
    dist_new: Tensor,
    feat_old: np.ndarray,
    feat_new: Tensor,
) -> Tensor:
    """Masked drift penalty; old/new maps are (N, P, M_old), features (N, P, D)."""
    n, p, m_old = sim_old.shape
    mask = top_mask(sim_old, mask_size(gamma, *hw), axis=1)
    if placement is RegPlacement.SIMILARITY:
        diff = nx.abs_(nx.sub(sim_new, sim_old))
    elif placement is RegPlacement.DISTANCE:
        diff = nx.abs_(nx.sub(dist_new, dist_old))
    elif placement is RegPlacement.FEATURE:
        cell = nx.mean(nx.abs_(nx.sub(feat_new, feat_old)), axis=2)  # (N, P)
        weight = mask.sum(axis=2) / mask.sum(axis=(1, 2))[:, None]
        return nx.mul(nx.sum_(nx.mul(cell, weight)), 1.0 / n)
    else:
        raise LossError(f"unknown placement {placement!r}")
    return nx.mul(nx.sum_(nx.mul(diff, mask)), 1.0 / (n * m_old))


def _snapshot_pass(snap, images) -> pn.ForwardPass:
    with nx.no_grad():
        return pn.run(snap, images)


def _ir_term(fp: pn.ForwardPass, old: pn.ForwardPass, gamma: float, placement: RegPlacement) -> Tensor:
    if fp.features.shape[1:3] != old.features.shape[1:3]:
        raise LossError("snapshot and model feature maps differ in spatial shape")
    n, h, w, d = fp.features.shape
    m_old = old.similarities.shape[2]
    keep = (slice(None), slice(None), slice(0, m_old))
    return _ir_from_maps(
        RegPlacement(placement),
        gamma,
        (h, w),
        old.similarities.data,
        nx.index(fp.similarities, keep),
        old.distances.data,
        nx.index(fp.distances, keep),
        old.features.data.reshape(n, h * w, d),
        nx.reshape(fp.features, (n, h * w, d)),
    )


def interpretability_regularization(snap, model, images, gamma: float = 1 / 49, placement="similarity") -> Tensor:
    """Masked change of old-prototype responses between ``snap`` and ``model``.

    The mask keeps, per image and old prototype, the cells where the snapshot's
    similarity is highest.  Averaged over old prototypes and images.  Returns 0
    when the snapshot has no heads.
    """
    if snap is None or not pn._as_model(snap).heads:
        return Tensor(0.0)
    return _ir_term(pn.run(model, images), _snapshot_pass(snap, images), gamma, RegPlacement(placement))


# ---------------------------------------------------------------- total

@dataclass
class LossTerms:
    total: Tensor
    ce: float
    clst: float
    sep: float
    ir: float
    extra: float = 0.0


def total_loss(
    model: pn.IcicleModel,
    snap,
    images,
    labels,
    weights: LossWeights = LossWeights(),
    gamma: float = 1 / 49,
    placement="similarity",
    extra=None,
) -> LossTerms:
    """Weighted batch-mean objective.

    Cluster and separation costs only compare a sample against prototypes of
    the head that owns its class.  ``extra`` is an optional callable
    ``(ForwardPass) -> Tensor`` for method-specific penalties, added unweighted.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise LossError("empty batch")
    glabels = global_labels(model, labels)
    fp = pn.run(model, images)
    ce = nx.softmax_cross_entropy(fp.logits, glabels)
    total = nx.mul(ce, weights.ce)
    own, other = _cluster_sep_masks(model, glabels)
    clst = sep = ir = None
    if weights.clst or weights.sep:
        min_dist, _ = nx.min_along(fp.distances, axis=1)
        if weights.clst:
            clst = _cluster(min_dist, own)
            total = nx.add(total, nx.mul(clst, weights.clst))
        if weights.sep:
            sep = _separation(min_dist, other)
            total = nx.add(total, nx.mul(sep, weights.sep))
    if weights.ir and snap is not None and pn._as_model(snap).heads:
        ir = _ir_term(fp, _snapshot_pass(snap, images), gamma, RegPlacement(placement))
        total = nx.add(total, nx.mul(ir, weights.ir))
    extra_value = 0.0
    if extra is not None:
        term = extra(fp)
        extra_value = term.item()
        total = nx.add(total, term)
    return LossTerms(
        total,
        ce.item(),
        0.0 if clst is None else clst.item(),
        0.0 if sep is None else sep.item(),
        0.0 if ir is None else ir.item(),
        extra_value,
    )
