"""Structural and discriminative losses over attention masks and match scores.

Masks are non-negative tensors of identical shape (normally an H' x W' grid,
but any shape works since every reduction runs over all elements).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

DISC_MODES = ("printed", "log-sigmoid")


@dataclass
class Hyperparams:
    lambda_pc: float = 0.01
    lambda_sib: float = 0.0001
    lr: float = 0.05
    batch_size: int = 8
    negatives_per_image: int | None = None  # None: as many as positives
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_pc", "lambda_sib"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component} = {value}")
        self.component = component


@dataclass(frozen=True)
class LossBreakdown:
    L: float
    L_struct: float
    L_disc: float
    L_PC: float
    L_SIB: float

    def as_row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_same_shape(masks: Sequence[Tensor], what: str) -> None:
    shapes = {m.shape for m in masks}
    if len(shapes) > 1:
        raise ShapeError(f"{what}: mask shapes differ {sorted(shapes)}")


def loss_pc(parent, children: Sequence, count: int) -> Tensor:
    """One parent-child term: squared distance between the parent mask and
    the pixelwise max over its children, divided by the number of pairs."""
    if not children:
        raise ValueError("loss_pc needs at least one child mask")
    parent = ad.as_tensor(parent)
    children = [ad.as_tensor(c) for c in children]
    _check_same_shape([parent, *children], "loss_pc")
    union = children[0] if len(children) == 1 else ad.maximum(children)
    return ad.sqnorm(parent - union) * (1.0 / count)


def sibling_weights(members: Sequence) -> np.ndarray:
    """Per-pixel mean attention over one sibling set."""
    return np.mean([ad.as_tensor(m).data for m in members], axis=0)


def _sibling_term(members: list[Tensor]) -> Tensor:
    if len(members) == 1:
        total = peak = members[0]
    else:
        peak = ad.maximum(members)
        total = members[0]
        for m in members[1:]:
            total = total + m
    weight = total * (1.0 / len(members))
    # pixels where every member is zero contribute nothing
    empty = (total.data == 0).astype(np.float64)
    if empty.any():
        peak = peak + empty
        total = total + empty
    ratio = ad.log(peak) - ad.log(total)
    return ad.tsum(weight * ratio)


def loss_sib(sets: Sequence[Sequence], count: int | None = None) -> Tensor:
    """Sibling exclusivity over ``sets``, normalised by ``count`` (default ``len(sets)``)."""
    if count is None:
        count = len(sets)
    total = None
    for members in sets:
        members = [ad.as_tensor(m) for m in members]
        if not members:
            raise ValueError("loss_sib: empty sibling set")
        _check_same_shape(members, "loss_sib")
        term = _sibling_term(members)
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total * (-1.0 / count)


def _check_labels(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all((labels == 1.0) | (labels == -1.0)):
        raise ValueError(f"labels must be -1 or +1, got {np.unique(labels)}")
    return labels


def loss_disc(score, label) -> Tensor:
    """``-Y * score`` for an already-squashed match score."""
    labels = _check_labels(label)
    return ad.as_tensor(score) * Tensor(-labels)


def batch_disc_loss(logits, labels, mode: str = "printed") -> Tensor:
    """Mean discriminative loss over (image, phrase) pairs given raw dot products.

    ``printed`` is ``-Y * sigmoid(dot)``; ``log-sigmoid`` is
    ``-log sigmoid(Y * dot)``.
    """
    labels = Tensor(_check_labels(labels))
    logits = ad.as_tensor(logits)
    if logits.shape != labels.shape:
        raise ShapeError(f"batch_disc_loss: logits {logits.shape} vs labels {labels.shape}")
    if mode == "printed":
        per_pair = -(ad.sigmoid(logits) * labels)
    elif mode == "log-sigmoid":
        per_pair = -ad.logsigmoid(logits * labels)
    else:
        raise ValueError(f"unknown disc-loss mode {mode!r}; expected one of {DISC_MODES}")
    return ad.tsum(per_pair) * (1.0 / max(labels.data.size, 1))


def combine(l_pc, l_sib, l_disc, h: Hyperparams):
    """Weighted total ``lambda_pc*L_PC + lambda_sib*L_SIB + L_disc`` (tensors or floats)."""
    return h.lambda_pc * l_pc + h.lambda_sib * l_sib + l_disc


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(l_pc, l_sib, l_disc, h: Hyperparams) -> LossBreakdown:
    parts = {"L_PC": _value(l_pc), "L_SIB": _value(l_sib), "L_disc": _value(l_disc)}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    struct = h.lambda_pc * parts["L_PC"] + h.lambda_sib * parts["L_SIB"]
    return LossBreakdown(
        L=combine(parts["L_PC"], parts["L_SIB"], parts["L_disc"], h),
        L_struct=struct,
        L_disc=parts["L_disc"],
        L_PC=parts["L_PC"],
        L_SIB=parts["L_SIB"],
    )


CSV_HEADER = "step,L,L_disc,L_PC,L_SIB"


def csv_line(step: int, b: LossBreakdown) -> str:
    return f"{step},{b.L!r},{b.L_disc!r},{b.L_PC!r},{b.L_SIB!r}"
