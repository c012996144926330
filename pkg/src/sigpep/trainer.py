"""Training loop: Adam with decoupled weight decay, stratified validation
split, early stopping on validation multiclass MCC, and the class-weight
schedule (class-balanced from the start vs deferred reweighting).

Everything is deterministic in (seed, data, config): splits, shuffles, and
parameter updates reproduce bit-identically across runs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import loss as losses
from . import model as m
from .autodiff import ParameterStore
from .embeddings import EmbeddingTable
from .loss import LossConfig
from .metrics import multiclass_mcc
from .seqio import AnnotatedRecord, ClassCounts, NUM_TYPES, SpType, encode


class TrainingAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-3
    weight_decay: float = 1e-3
    max_epochs: int = 300
    batch_size: int = 32
    patience: int = 25
    min_delta: float = 1e-4
    seed: int = 0
    validation_fraction: float = 0.1
    grad_clip: float = 5.0  # global-norm clip; recurrent-training safeguard
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParameterStore, grads: dict, state: AdamState,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is decoupled: theta <- theta * (1 - lr*wd) before the Adam
    delta.  Raises :class:`TrainingAbort` on non-finite gradients.
    """
    for name in params.names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name in params.names():
        theta = params[name]
        g = grads[name].astype(theta.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** t)
        vhat = state.v[name] / (1 - b2 ** t)
        if config.weight_decay:
            theta = theta * (1.0 - config.lr * config.weight_decay)
        theta = theta - config.lr * mhat / (np.sqrt(vhat) + state.eps)
        params[name] = theta.astype(np.float32, copy=False)


def clip_gradients(grads: dict, max_norm: float) -> dict:
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class TrainResult:
    params: ParameterStore
    model_config: m.ModelConfig
    log: list                      # rows (epoch, train_loss, val_mcc, lr, phase)
    best_epoch: int
    best_val_mcc: float
    train_indices: list
    val_indices: list
    class_counts: ClassCounts

    def split_hash(self) -> str:
        import hashlib
        key = ",".join(map(str, self.train_indices)) + "|" + ",".join(map(str, self.val_indices))
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def log_tsv(self) -> str:
        lines = ["epoch\ttrain_loss\tval_mcc\tlr\tschedule_phase"]
        for epoch, tl, vm, lr, phase in self.log:
            lines.append(f"{epoch}\t{tl:.10g}\t{vm:.10g}\t{lr:.10g}\t{phase}")
        return "\n".join(lines) + "\n"


def stratified_split(labels: Sequence[int], fraction: float,
                     seed: int) -> tuple[list, list]:
    """Deterministic per-class split; at least one record of each class stays
    in training."""
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = np.asarray(labels)
    train_idx: list = []
    val_idx: list = []
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        perm = idx[rng.permutation(len(idx))]
        n_val = int(np.floor(fraction * len(idx)))
        n_val = min(n_val, len(idx) - 1)
        val_idx.extend(perm[:n_val].tolist())
        train_idx.extend(perm[n_val:].tolist())
    return sorted(train_idx), sorted(val_idx)


def _embedding_matrix(records: Sequence[AnnotatedRecord],
                      embeddings, config: m.ModelConfig) -> np.ndarray:
    """(N, E) matrix; absent entries are zero vectors."""
    E = config.embedding_input_dim
    out = np.zeros((len(records), E), dtype=np.float32)
    if embeddings is None:
        return out
    lookup: Callable
    if isinstance(embeddings, EmbeddingTable):
        if embeddings.dim != E:
            raise ValueError(f"embedding table dim {embeddings.dim} != model dim {E}")
        lookup = embeddings.get
    elif callable(embeddings):
        lookup = embeddings
    else:
        raise TypeError(f"unsupported embeddings source: {type(embeddings)!r}")
    for i, r in enumerate(records):
        v = lookup(r.id)
        if v is not None:
            out[i] = np.asarray(v, dtype=np.float32)
    return out


def _schedule_phase(epoch: int, config: TrainConfig) -> str:
    lc = config.loss
    if lc.schedule == "NONE":
        return "uniform"
    if lc.schedule == "DEFERRED_RW":
        switch = int(np.floor(lc.deferred_fraction * config.max_epochs))
        return "uniform" if epoch <= switch else "cb"
    return "cb"


def train(records: Sequence[AnnotatedRecord], embeddings,
          config: TrainConfig,
          model_config: m.ModelConfig | None = None) -> TrainResult:
    """Fit the model; returns the best-by-validation parameters and the log."""
    if not records:
        raise ValueError("training set is empty")
    model_config = model_config or m.ModelConfig()
    records = list(records)
    examples = [encode(r) for r in records]
    type_labels = np.array([e.type_label for e in examples], dtype=np.int64)
    region_labels = np.stack([e.region_labels for e in examples])
    emb_matrix = _embedding_matrix(records, embeddings, model_config)

    train_idx, val_idx = stratified_split(type_labels, config.validation_fraction, config.seed)
    counts_map = {SpType(i): 0 for i in range(NUM_TYPES)}
    for i in train_idx:
        counts_map[SpType(int(type_labels[i]))] += 1
    present = {records[i].sp_type for i in range(len(records))}
    for sp, n in counts_map.items():
        if n == 0 and sp in present:
            warnings.warn(f"class {sp.name} empty after split; margin uses count 1")
    counts = ClassCounts(n=counts_map)
    margin_counts = np.maximum(counts.as_array(), 1)

    params = m.init_params(model_config, config.seed)
    state = AdamState()
    shuffle_rng = np.random.Generator(np.random.PCG64(config.seed + 1))

    best_val = -np.inf
    best_epoch = 0
    best_params = params.copy()
    bad_epochs = 0
    log: list = []

    val_examples = [examples[i] for i in val_idx]
    val_emb = emb_matrix[val_idx] if val_idx else None
    val_gold = type_labels[val_idx] if val_idx else type_labels[train_idx]

    for epoch in range(1, config.max_epochs + 1):
        phase = _schedule_phase(epoch, config)
        weights = losses.active_weights(margin_counts, config.loss, phase)
        perm = shuffle_rng.permutation(len(train_idx))
        order = [train_idx[i] for i in perm]
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            bexamples = [examples[i] for i in batch]
            inputs = m.batch_inputs(bexamples, emb_matrix[batch], model_config)
            bt = type_labels[batch]
            br = region_labels[batch]

            def build(inp, P, _bt=bt, _br=br, _w=weights):
                outs = m.build_forward(inp, P, model_config)
                return {"loss": losses.joint_loss(
                    outs["type_logits"], outs["region_logits"], _bt, _br,
                    margin_counts, config.loss, weights=_w)}

            graph = ad.Graph(build, params)
            out = graph.evaluate(inputs)
            batch_losses.append(float(out["loss"]))
            grads = graph.backward(output="loss")
            if config.grad_clip:
                grads = clip_gradients(grads, config.grad_clip)
            adam_step(params, grads, state, config)

        train_loss = float(np.mean(batch_losses)) if batch_losses else 0.0
        if val_examples:
            preds = _predict_types(params, model_config, val_examples, val_emb)
            val_mcc = multiclass_mcc(val_gold.tolist(), preds)
        else:
            # tiny datasets: monitor the training set instead
            preds = _predict_types(params, model_config,
                                   [examples[i] for i in train_idx],
                                   emb_matrix[train_idx])
            val_mcc = multiclass_mcc(val_gold.tolist(), preds)
        log.append((epoch, train_loss, val_mcc, config.lr, phase))

        if val_mcc > best_val + config.min_delta:
            best_val = val_mcc
            best_epoch = epoch
            best_params = params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    return TrainResult(params=best_params, model_config=model_config, log=log,
                       best_epoch=best_epoch, best_val_mcc=float(best_val),
                       train_indices=train_idx, val_indices=val_idx,
                       class_counts=counts)


def _predict_types(params, model_config, examples, emb, batch_size: int = 64) -> list:
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        ce = emb[start:start + batch_size] if emb is not None else None
        for p in m.forward(params, model_config, chunk, ce):
            preds.append(int(p.predicted_type))
    return preds


def ablation_run(records: Sequence[AnnotatedRecord], embeddings,
                 loss_configs: Sequence[LossConfig], base: TrainConfig,
                 model_config: m.ModelConfig | None = None) -> list[dict]:
    """Train one model per loss config with shared seed and splits."""
    if len(loss_configs) < 2:
        raise ValueError("ablation needs at least 2 loss configs")
    results = []
    for lc in loss_configs:
        cfg = TrainConfig(lr=base.lr, weight_decay=base.weight_decay,
                          max_epochs=base.max_epochs, batch_size=base.batch_size,
                          patience=base.patience, min_delta=base.min_delta,
                          seed=base.seed, validation_fraction=base.validation_fraction,
                          grad_clip=base.grad_clip, loss=lc)
        res = train(records, embeddings, cfg, model_config)
        results.append({"loss_config": lc, "result": res,
                        "split_hash": res.split_hash()})
    return results
