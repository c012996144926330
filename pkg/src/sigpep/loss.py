"""Margin-based losses for the long-tailed SP type task.

The type loss subtracts a per-class margin ``delta_j = C / n_j^(1/4)`` from
the true-class cosine logit, scales all logits by ``1/s``, and applies
softmax cross-entropy, optionally weighted per class by class-balanced
weights ``(1 - beta) / (1 - beta^n_j)``.  Cross-entropy and focal baselines
share the same scaling so that ablations differ only in the loss shape.
The joint objective adds the per-position region (cleavage-site) loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .seqio import ClassCounts, NUM_REGION_LABELS, NUM_TYPES

SCHEDULES = ("CB_FROM_START", "DEFERRED_RW", "NONE")
BASELINES = ("CB_LDAM", "CE", "CE_REWEIGHTED", "FOCAL")


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    C: float | None = None          # margin constant; None scales so max margin = max_margin
    max_margin: float = 0.5
    s: float = 0.0625               # logit divisor; 1/s = 16 on cosine logits
    beta: float = 0.9999            # class-balance parameter
    tau: float = 1.0                # weight of the region/CS term
    schedule: str = "CB_FROM_START"
    baseline: str = "CB_LDAM"
    gamma_focal: float = 2.0
    manual_weights: list | None = None
    deferred_fraction: float = 0.6  # uniform-weight fraction of max epochs for DEFERRED_RW

    def __post_init__(self):
        if self.C is not None and self.C <= 0:
            raise LossConfigError(f"C must be > 0, got {self.C}")
        if self.s <= 0:
            raise LossConfigError(f"s must be > 0, got {self.s}")
        if not 0.0 <= self.beta < 1.0:
            raise LossConfigError(f"beta must be in [0, 1), got {self.beta}")
        if self.tau < 0:
            raise LossConfigError(f"tau must be >= 0, got {self.tau}")
        if self.schedule not in SCHEDULES:
            raise LossConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.baseline not in BASELINES:
            raise LossConfigError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")


@dataclass
class MarginTable:
    delta: np.ndarray = field(default_factory=lambda: np.zeros(NUM_TYPES))


def ldam_margins(counts: ClassCounts | np.ndarray, C: float) -> MarginTable:
    """Per-class margins ``C * n_j^(-1/4)``; larger for rarer classes."""
    n = counts.as_array() if isinstance(counts, ClassCounts) else np.asarray(counts)
    if np.any(n < 1):
        raise LossConfigError(f"all class counts must be >= 1, got {n.tolist()}")
    return MarginTable(delta=C * np.asarray(n, dtype=np.float64) ** -0.25)


def margins_for(counts: ClassCounts | np.ndarray, config: LossConfig) -> MarginTable:
    """Margins under the config; with C unset, scale so the max margin is max_margin."""
    n = counts.as_array() if isinstance(counts, ClassCounts) else np.asarray(counts)
    if config.C is not None:
        return ldam_margins(n, config.C)
    c = config.max_margin * float(np.min(n)) ** 0.25
    return ldam_margins(n, c)


def cb_weights(counts: ClassCounts | np.ndarray, beta: float) -> np.ndarray:
    """Class-balanced weights from effective sample numbers, normalized to mean 1."""
    n = counts.as_array() if isinstance(counts, ClassCounts) else np.asarray(counts)
    n = np.asarray(n, dtype=np.float64)
    if beta == 0.0:
        w = np.ones_like(n)
    else:
        w = (1.0 - beta) / (1.0 - np.power(beta, n))
    return w * (len(w) / w.sum())


def _onehot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (k,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def ldam_loss(logits, labels: np.ndarray, margins: MarginTable | np.ndarray,
              s: float, weights: np.ndarray | None = None) -> ad.Tensor:
    """Margin softmax loss over a batch: mean of per-example weighted terms.

    ``logits`` may be a Tensor (differentiable path) or a plain array.
    """
    t = logits if isinstance(logits, ad.Tensor) else ad.constant(np.asarray(logits))
    labels = np.asarray(labels)
    delta = margins.delta if isinstance(margins, MarginTable) else np.asarray(margins)
    dtype = t.data.dtype
    k = t.data.shape[-1]
    onehot = _onehot(labels, k, dtype)
    margin_shift = (onehot * delta[labels][:, None]).astype(dtype)
    adjusted = ad.sub(t, ad.constant(margin_shift))
    scaled = ad.mul(adjusted, np.asarray(1.0 / s, dtype=dtype))
    logp = ad.log(ad.softmax_rows(scaled))
    per = ad.neg(ad.tsum(ad.mul(logp, ad.constant(onehot)), axis=-1))
    if weights is not None:
        per = ad.mul(per, ad.constant(np.asarray(weights)[labels].astype(dtype)))
    return ad.tmean(per)


def baseline_loss(logits, labels: np.ndarray, config: LossConfig) -> ad.Tensor:
    """CE / reweighted-CE / focal baselines, sharing the 1/s logit scaling."""
    t = logits if isinstance(logits, ad.Tensor) else ad.constant(np.asarray(logits))
    labels = np.asarray(labels)
    dtype = t.data.dtype
    k = t.data.shape[-1]
    onehot = _onehot(labels, k, dtype)
    scaled = ad.mul(t, np.asarray(1.0 / config.s, dtype=dtype))
    probs = ad.softmax_rows(scaled)
    logp = ad.log(probs)
    ce = ad.neg(ad.tsum(ad.mul(logp, ad.constant(onehot)), axis=-1))  # (B,)
    if config.baseline == "CE":
        per = ce
    elif config.baseline == "CE_REWEIGHTED":
        if config.manual_weights is None:
            raise LossConfigError("CE_REWEIGHTED requires manual_weights")
        w = np.asarray(config.manual_weights, dtype=np.float64)
        if w.shape != (k,):
            raise LossConfigError(f"manual_weights must have {k} entries, got {w.shape}")
        per = ad.mul(ce, ad.constant(w[labels].astype(dtype)))
    elif config.baseline == "FOCAL":
        py = ad.tsum(ad.mul(probs, ad.constant(onehot)), axis=-1)
        focus = ad.power(ad.sub(ad.constant(np.ones_like(py.data)), py), config.gamma_focal)
        per = ad.mul(focus, ce)
    else:
        raise LossConfigError(f"baseline_loss does not handle {config.baseline!r}")
    return ad.tmean(per)


def type_loss(logits, labels: np.ndarray, counts: ClassCounts | np.ndarray,
              config: LossConfig, weights: np.ndarray | None = None) -> ad.Tensor:
    """Dispatch to the configured type-level loss.

    ``weights`` overrides the schedule-derived class weights (trainer passes
    the active vector each epoch); None means derive from config.
    """
    if config.baseline != "CB_LDAM":
        return baseline_loss(logits, labels, config)
    margins = margins_for(counts, config)
    if weights is None:
        weights = active_weights(counts, config, phase="cb")
    return ldam_loss(logits, labels, margins, config.s, weights)


def active_weights(counts: ClassCounts | np.ndarray, config: LossConfig,
                   phase: str) -> np.ndarray | None:
    """Per-class weight vector for a schedule phase ('uniform' or 'cb')."""
    k = len(counts.as_array()) if isinstance(counts, ClassCounts) else len(counts)
    if config.schedule == "NONE" or phase == "uniform":
        return np.ones(k)
    return cb_weights(counts, config.beta)


def region_loss(region_logits, region_labels: np.ndarray) -> ad.Tensor:
    """Per-position softmax cross-entropy over the 11 region classes.

    PAD positions are included as a legitimate class in the N*L average.
    """
    t = region_logits if isinstance(region_logits, ad.Tensor) else ad.constant(np.asarray(region_logits))
    labels = np.asarray(region_labels)
    dtype = t.data.dtype
    onehot = _onehot(labels, NUM_REGION_LABELS, dtype)
    logp = ad.log(ad.softmax_rows(t))
    total = ad.neg(ad.tsum(ad.mul(logp, ad.constant(onehot))))
    n_pos = int(np.prod(labels.shape))
    return ad.mul(total, np.asarray(1.0 / n_pos, dtype=dtype))


def joint_loss(type_logits, region_logits, type_labels: np.ndarray,
               region_labels: np.ndarray, counts: ClassCounts | np.ndarray,
               config: LossConfig, weights: np.ndarray | None = None) -> ad.Tensor:
    """Type loss plus tau times the region loss."""
    type_labels = np.asarray(type_labels)
    if type_labels.shape[0] == 0:
        raise LossConfigError("batch size is zero")
    ls = type_loss(type_logits, type_labels, counts, config, weights=weights)
    if config.tau == 0.0:
        return ls
    lc = region_loss(region_logits, region_labels)
    return ad.add(ls, ad.mul(lc, np.asarray(config.tau, dtype=lc.data.dtype)))
