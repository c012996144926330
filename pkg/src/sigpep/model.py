"""The SP classifier / cleavage-site tagger architecture.

Pipeline per sequence (L = 70 positions throughout):

    residues (L x 20) -> FC 252 -> [CNN 256 -> CNN 512] (feature path)
                       -> concat group (L x 256) -> BiLSTM 2x128 -> 256
                       -> 2-head attention (d_k = d_v = 128) -> 256
                       -> concat with BiLSTM output -> 512, + CNN path
                       -> BiLSTM 2x256 -> 512
                       -> region head: 3 FC layers -> L x 11
                       -> type head: flatten -> FC 512, external embedding
                          -> 2 FC layers -> 64, concat 576 -> FC 256
                          -> normalized projection -> 6 cosine logits

Type logits are cosine similarities between the fused 256-d feature and
per-class agent vectors, so they always lie in [-1, 1].
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .seqio import (EncodedExample, NUM_REGION_LABELS, NUM_TYPES, RegionLabel,
                    SIGNAL_REGIONS, SpType, MAX_LEN)

CHECKPOINT_MAGIC = b"USPCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumFailure(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


@dataclass
class ModelConfig:
    seq_len: int = MAX_LEN
    residue_dim: int = 20
    group_dim: int = 4
    fc1_units: int = 252
    cnn_channels: tuple = (256, 512)
    cnn_kernels: tuple = (5, 3)
    lstm1_hidden: int = 128
    d_model: int = 256
    heads: int = 2
    d_k: int = 128
    lstm2_hidden: int = 256
    cs_head_widths: tuple = (512, 256, NUM_REGION_LABELS)
    type_reduce: int = 512
    embed_hidden: int = 256
    embed_out: int = 64
    fuse_hidden: int = 256
    num_types: int = NUM_TYPES
    embedding_input_dim: int = 768
    prob_sharpness: float = 16.0  # softmax temperature on cosine logits for type_probs

    def __post_init__(self):
        if self.heads * self.d_k != self.d_model:
            raise ValueError(f"heads*d_k must equal d_model, got {self.heads}*{self.d_k} != {self.d_model}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        d["cnn_kernels"] = list(self.cnn_kernels)
        d["cs_head_widths"] = list(self.cs_head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("cnn_channels", "cnn_kernels", "cs_head_widths"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Prediction:
    type_logits: np.ndarray       # (6,) cosine logits, pre scaling
    type_probs: np.ndarray        # (6,) softmax of sharpened logits
    region_posteriors: np.ndarray  # (L, 11)
    predicted_type: SpType
    predicted_cs: int | None


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    c = config
    L = c.seq_len
    emb = c.fc1_units + c.group_dim           # 256
    c1, c2 = c.cnn_channels
    k1, k2 = c.cnn_kernels
    h1, h2 = c.lstm1_hidden, c.lstm2_hidden
    trunk = 2 * h1 + c.d_model                # 512: attention concat == CNN width
    w1, w2, w3 = c.cs_head_widths
    shapes: dict[str, tuple] = {
        "fc1.w": (c.residue_dim, c.fc1_units), "fc1.b": (c.fc1_units,),
        "cnn1.w": (k1, c.fc1_units, c1), "cnn1.b": (c1,),
        "cnn2.w": (k2, c1, c2), "cnn2.b": (c2,),
    }
    for d in ("fw", "bw"):
        shapes[f"lstm1.{d}.wx"] = (emb, 4 * h1)
        shapes[f"lstm1.{d}.wh"] = (h1, 4 * h1)
        shapes[f"lstm1.{d}.b"] = (4 * h1,)
    for i in range(c.heads):
        shapes[f"attn.h{i}.wq"] = (c.d_model, c.d_k)
        shapes[f"attn.h{i}.wk"] = (c.d_model, c.d_k)
        shapes[f"attn.h{i}.wv"] = (c.d_model, c.d_k)
    shapes["attn.wo"] = (c.heads * c.d_k, c.d_model)
    for d in ("fw", "bw"):
        shapes[f"lstm2.{d}.wx"] = (trunk, 4 * h2)
        shapes[f"lstm2.{d}.wh"] = (h2, 4 * h2)
        shapes[f"lstm2.{d}.b"] = (4 * h2,)
    shapes.update({
        "cs.fc1.w": (2 * h2, w1), "cs.fc1.b": (w1,),
        "cs.fc2.w": (w1, w2), "cs.fc2.b": (w2,),
        "cs.out.w": (w2, w3), "cs.out.b": (w3,),
        "type.reduce.w": (L * 2 * h2, c.type_reduce), "type.reduce.b": (c.type_reduce,),
        "embed.fc1.w": (c.embedding_input_dim, c.embed_hidden), "embed.fc1.b": (c.embed_hidden,),
        "embed.fc2.w": (c.embed_hidden, c.embed_out), "embed.fc2.b": (c.embed_out,),
        "fuse.w": (c.type_reduce + c.embed_out, c.fuse_hidden), "fuse.b": (c.fuse_hidden,),
        "proj.w": (c.num_types, c.fuse_hidden),
    })
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if name.startswith("cnn") and name.endswith(".w"):
        return shape[0] * shape[1]
    if name == "proj.w":
        return shape[1]
    return shape[0]


def init_params(config: ModelConfig, seed: int) -> ParameterStore:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, zero biases,
    LSTM forget-gate bias +1.  Deterministic in (config, seed)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParameterStore()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=np.float32)
            if ".fw." in name or ".bw." in name:
                h = shape[0] // 4
                arr[h:2 * h] = 1.0  # forget gate
        else:
            bound = float(np.sqrt(1.0 / _fan_in(name, shape)))
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        store[name] = arr
    return store


# ---------------------------------------------------------------------------
# forward graph builders


def _fc(x: Tensor, P: dict, name: str, act=None) -> Tensor:
    out = ad.add(ad.matmul(x, P[f"{name}.w"]), P[f"{name}.b"], name=name)
    return act(out) if act else out


def _lstm_direction(xs: Tensor, P: dict, prefix: str, hidden: int,
                    reverse: bool) -> list[Tensor]:
    """Standard LSTM cell unrolled over the length axis; returns per-step (B,H)."""
    B, L, _ = xs.data.shape
    dtype = xs.data.dtype
    wx, wh, b = P[f"{prefix}.wx"], P[f"{prefix}.wh"], P[f"{prefix}.b"]
    h = ad.constant(np.zeros((B, hidden), dtype=dtype))
    c = ad.constant(np.zeros((B, hidden), dtype=dtype))
    H = hidden
    # input projection for all timesteps in one GEMM; the loop only carries h
    xproj = ad.add(ad.matmul(xs, wx), b)
    outs: list[Tensor] = [None] * L  # type: ignore[list-item]
    order = range(L - 1, -1, -1) if reverse else range(L)
    for t in order:
        xt = ad.index(xproj, (slice(None), t, slice(None)))
        pre = ad.add(xt, ad.matmul(h, wh))
        i = ad.sigmoid(ad.index(pre, (slice(None), slice(0, H))))
        f = ad.sigmoid(ad.index(pre, (slice(None), slice(H, 2 * H))))
        g = ad.tanh(ad.index(pre, (slice(None), slice(2 * H, 3 * H))))
        o = ad.sigmoid(ad.index(pre, (slice(None), slice(3 * H, 4 * H))))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        outs[t] = h
    return outs


def bilstm_forward(xs: Tensor, P: dict, layer: str, hidden: int) -> Tensor:
    """Bidirectional LSTM: per position concat of forward and backward states."""
    B, L, _ = xs.data.shape
    fwd = _lstm_direction(xs, P, f"{layer}.fw", hidden, reverse=False)
    bwd = _lstm_direction(xs, P, f"{layer}.bw", hidden, reverse=True)
    steps = [ad.reshape(ad.concat([fwd[t], bwd[t]], axis=-1), (B, 1, 2 * hidden))
             for t in range(L)]
    return ad.concat(steps, axis=1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         key_mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V with padded keys masked out."""
    d_k = q.data.shape[-1]
    scores = ad.mul(ad.matmul(q, k, transpose_b=True),
                    np.asarray(1.0 / np.sqrt(d_k), dtype=q.data.dtype))
    if key_mask is not None:
        # key_mask: (B, L) with 1 = valid; broadcast over query positions
        blocked = (np.asarray(key_mask) == 0)[:, None, :]
        scores = ad.masked_fill(scores, np.broadcast_to(blocked, scores.data.shape), -1e9)
    return ad.matmul(ad.softmax_rows(scores), v)


def multi_head_attention(q_src: Tensor, kv_src: Tensor, P: dict,
                         config: ModelConfig,
                         key_mask: np.ndarray | None = None) -> Tensor:
    heads = []
    for i in range(config.heads):
        qi = ad.matmul(q_src, P[f"attn.h{i}.wq"])
        ki = ad.matmul(kv_src, P[f"attn.h{i}.wk"])
        vi = ad.matmul(kv_src, P[f"attn.h{i}.wv"])
        heads.append(scaled_dot_attention(qi, ki, vi, key_mask))
    return ad.matmul(ad.concat(heads, axis=-1), P["attn.wo"])


def build_forward(inputs: dict[str, Tensor], P: dict, config: ModelConfig,
                  trace: dict | None = None) -> dict[str, Tensor]:
    """The full forward graph on a batch.

    Inputs: residue (B,L,20), group (B,L,4), mask (B,L), embedding (B,E).
    Outputs: type_logits (B,6), region_logits (B,L,11).
    """
    residue, group, emb_in = inputs["residue"], inputs["group"], inputs["embedding"]
    mask = np.asarray(inputs["mask"].data)
    B, L, _ = residue.data.shape

    x = _fc(residue, P, "fc1", act=ad.relu)                              # (B,L,252)
    cnn = ad.relu(ad.conv1d_same(x, P["cnn1.w"], P["cnn1.b"]))
    cnn = ad.relu(ad.conv1d_same(cnn, P["cnn2.w"], P["cnn2.b"]))         # (B,L,512)
    emb = ad.concat([x, group], axis=-1)                                 # (B,L,256)
    # positions past the sequence end contribute zero input downstream
    mask3 = np.broadcast_to(mask[:, :, None], emb.data.shape).astype(emb.data.dtype)
    emb = ad.mul(emb, ad.constant(mask3))
    h1 = bilstm_forward(emb, P, "lstm1", config.lstm1_hidden)            # (B,L,256)
    attn = multi_head_attention(h1, emb, P, config, key_mask=mask)       # (B,L,256)
    trunk = ad.add(ad.concat([attn, h1], axis=-1), cnn)                  # (B,L,512)
    h2 = bilstm_forward(trunk, P, "lstm2", config.lstm2_hidden)          # (B,L,512)

    region = _fc(h2, P, "cs.fc1", act=ad.relu)
    region = _fc(region, P, "cs.fc2", act=ad.relu)
    region_logits = _fc(region, P, "cs.out")                             # (B,L,11)

    flat = ad.reshape(h2, (B, L * 2 * config.lstm2_hidden))
    reduced = _fc(flat, P, "type.reduce", act=ad.relu)                   # (B,512)
    e = _fc(emb_in, P, "embed.fc1", act=ad.relu)
    e = _fc(e, P, "embed.fc2", act=ad.relu)                              # (B,64)
    fused = _fc(ad.concat([reduced, e], axis=-1), P, "fuse", act=ad.relu)  # (B,256)
    feat = ad.l2_normalize_rows(fused)
    agents = ad.l2_normalize_rows(P["proj.w"])
    type_logits = ad.matmul(feat, agents, transpose_b=True)              # (B,6)

    if trace is not None:
        trace.update({
            "fc1": x.data.shape, "cnn": cnn.data.shape, "embed": emb.data.shape,
            "lstm1": h1.data.shape, "attention": attn.data.shape,
            "trunk": trunk.data.shape, "lstm2": h2.data.shape,
            "region_logits": region_logits.data.shape,
            "type_reduce": reduced.data.shape, "embed_adapter": e.data.shape,
            "fused": fused.data.shape, "type_logits": type_logits.data.shape,
        })
    return {"type_logits": type_logits, "region_logits": region_logits}


# ---------------------------------------------------------------------------
# tape-free inference path (same math as build_forward, no autodiff overhead)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    # matches autodiff.sigmoid: (tanh(x/2) + 1) / 2
    half = np.asarray(0.5, dtype=x.dtype)
    return ((np.tanh(half * x) + 1.0) * half).astype(x.dtype, copy=False)


def _np_fc(x: np.ndarray, P, name: str, act: bool = False) -> np.ndarray:
    flat = x.reshape(-1, x.shape[-1]) if x.ndim == 3 else x
    out = flat @ P[f"{name}.w"] + P[f"{name}.b"]
    if x.ndim == 3:
        out = out.reshape(x.shape[:-1] + (-1,))
    return np.maximum(out, 0) if act else out


def _np_conv_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # im2col, identical summation order to the graph op
    K, L = w.shape[0], x.shape[-2]
    Cin, Cout = w.shape[1], w.shape[2]
    pl, pr = (K - 1) // 2, K // 2
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(pl, pr), (0, 0)])
    windows = np.lib.stride_tricks.sliding_window_view(xp, K, axis=-2)
    cols = np.ascontiguousarray(windows.swapaxes(-1, -2)).reshape(-1, K * Cin)
    out = (cols @ w.reshape(K * Cin, Cout)).reshape(x.shape[:-1] + (Cout,))
    return out + b


class FastWeights:
    """Fused / transposed copies of the parameters for the inference path.

    Built once per parameter set; callers reuse it across batches.  All
    rearrangements are value-preserving (concatenated GEMM columns and
    BLAS-transposed operands give bit-identical products).
    """

    def __init__(self, P: ParameterStore, config: ModelConfig):
        self.params = P
        n = config.heads
        self.attn_wq = np.concatenate(
            [P[f"attn.h{i}.wq"] for i in range(n)], axis=1)
        self.attn_wkv = np.concatenate(
            [P[f"attn.h{i}.wk"] for i in range(n)]
            + [P[f"attn.h{i}.wv"] for i in range(n)], axis=1)
        self.lstm = {}
        for layer in ("lstm1", "lstm2"):
            self.lstm[layer] = {
                "wx": np.concatenate([P[f"{layer}.fw.wx"], P[f"{layer}.bw.wx"]], axis=1),
                "b": np.concatenate([P[f"{layer}.fw.b"], P[f"{layer}.bw.b"]]),
                "whT.fw": np.ascontiguousarray(P[f"{layer}.fw.wh"].T),
                "whT.bw": np.ascontiguousarray(P[f"{layer}.bw.wh"].T),
            }
        self.reduce_wT = np.ascontiguousarray(P["type.reduce.w"].T)
        self.agents = _np_l2norm(P["proj.w"])


def _np_lstm(xproj: np.ndarray, whT: np.ndarray, hidden: int, reverse: bool,
             out: np.ndarray) -> None:
    """One LSTM direction given the precomputed input projection (B,L,4H)."""
    B, L, _ = xproj.shape
    H = hidden
    h = np.zeros((B, H), dtype=xproj.dtype)
    c = np.zeros((B, H), dtype=xproj.dtype)
    order = range(L - 1, -1, -1) if reverse else range(L)
    for t in order:
        pre = xproj[:, t] + (whT @ h.T).T
        sif = _np_sigmoid(pre[:, :2 * H])  # input and forget gates in one call
        i, f = sif[:, :H], sif[:, H:]
        g = np.tanh(pre[:, 2 * H:3 * H])
        o = _np_sigmoid(pre[:, 3 * H:])
        c = c * f
        c += i * g
        h = np.tanh(c)
        h *= o
        out[:, t] = h


def _np_bilstm(x: np.ndarray, fw: FastWeights, layer: str, hidden: int) -> np.ndarray:
    B, L, D = x.shape
    H = hidden
    lw = fw.lstm[layer]
    # both directions' input projections in a single GEMM
    xproj = (x.reshape(B * L, D) @ lw["wx"] + lw["b"]).reshape(B, L, 8 * H)
    out = np.empty((B, L, 2 * H), dtype=x.dtype)
    _np_lstm(xproj[:, :, :4 * H], lw["whT.fw"], H, False, out[:, :, :H])
    _np_lstm(xproj[:, :, 4 * H:], lw["whT.bw"], H, True, out[:, :, H:])
    return out


def _np_l2norm(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.where(n >= ad.NORM_EPS, n, 1.0)


def _np_attention(h1: np.ndarray, kv: np.ndarray, fw: FastWeights,
                  config: ModelConfig, mask: np.ndarray) -> np.ndarray:
    B, L, D = h1.shape
    n, dk = config.heads, config.d_k
    P = fw.params
    scale = np.asarray(1.0 / np.sqrt(dk), dtype=h1.dtype)
    # all heads' projections in two GEMMs (query side and key/value side)
    q = (h1.reshape(B * L, -1) @ fw.attn_wq).reshape(B, L, n * dk)
    kvp = (kv.reshape(B * L, -1) @ fw.attn_wkv).reshape(B, L, 2 * n * dk)
    blocked = (mask == 0)[:, None, :]
    any_blocked = bool(blocked.any())
    heads = []
    for i in range(n):
        qi = q[:, :, i * dk:(i + 1) * dk]
        ki = kvp[:, :, i * dk:(i + 1) * dk]
        vi = kvp[:, :, (n + i) * dk:(n + i + 1) * dk]
        scores = np.matmul(qi, ki.swapaxes(-1, -2)) * scale
        if any_blocked:
            scores = np.where(blocked, np.asarray(-1e9, dtype=scores.dtype), scores)
        scores -= scores.max(axis=-1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=-1, keepdims=True)
        heads.append(np.matmul(scores, vi))
    return np.concatenate(heads, axis=-1) @ P["attn.wo"]


def fast_forward(params: ParameterStore | FastWeights, config: ModelConfig,
                 inputs: dict[str, np.ndarray],
                 region_head: bool = True) -> dict[str, np.ndarray]:
    """Inference-only forward pass; numerically matches the graph builder.

    Pass a prebuilt :class:`FastWeights` to amortize weight fusion across
    batches.  ``region_head=False`` skips the per-position head (the type
    logits are unaffected); ``region_logits`` is then absent.
    """
    fw = params if isinstance(params, FastWeights) else FastWeights(params, config)
    P = fw.params
    residue = np.asarray(inputs["residue"], dtype=np.float32)
    group = np.asarray(inputs["group"], dtype=np.float32)
    mask = np.asarray(inputs["mask"])
    emb_in = np.asarray(inputs["embedding"], dtype=np.float32)

    x = _np_fc(residue, P, "fc1", act=True)
    cnn = np.maximum(_np_conv_same(x, P["cnn1.w"], P["cnn1.b"]), 0)
    cnn = np.maximum(_np_conv_same(cnn, P["cnn2.w"], P["cnn2.b"]), 0)
    emb = np.concatenate([x, group], axis=-1)
    emb = emb * mask[:, :, None].astype(emb.dtype)
    h1 = _np_bilstm(emb, fw, "lstm1", config.lstm1_hidden)
    attn = _np_attention(h1, emb, fw, config, mask)
    trunk = np.concatenate([attn, h1], axis=-1) + cnn
    h2 = _np_bilstm(trunk, fw, "lstm2", config.lstm2_hidden)

    B = residue.shape[0]
    flat = h2.reshape(B, -1)
    reduced = np.maximum(flat @ fw.reduce_wT.T + P["type.reduce.b"], 0)
    e = _np_fc(emb_in, P, "embed.fc1", act=True)
    e = _np_fc(e, P, "embed.fc2", act=True)
    fused = _np_fc(np.concatenate([reduced, e], axis=-1), P, "fuse", act=True)
    type_logits = _np_l2norm(fused) @ fw.agents.T
    outs = {"type_logits": type_logits}
    if region_head:
        outs["region_logits"] = region_logits_from_h2(P, h2)
    else:
        outs["h2"] = h2  # callers can run the region head on a row subset
    return outs


def region_logits_from_h2(P, h2: np.ndarray) -> np.ndarray:
    region = _np_fc(h2, P, "cs.fc1", act=True)
    region = _np_fc(region, P, "cs.fc2", act=True)
    return _np_fc(region, P, "cs.out")


def batch_inputs(examples: Sequence[EncodedExample],
                 embeddings: np.ndarray | None,
                 config: ModelConfig) -> dict[str, np.ndarray]:
    """Stack encoded examples into the named input arrays the graph expects.

    ``embeddings`` is (B, E) or None; absent embeddings are zero vectors.
    """
    B = len(examples)
    residue = np.stack([e.residue_onehot for e in examples])
    group = np.stack([e.group_onehot for e in examples])
    mask = np.stack([e.mask for e in examples])
    if embeddings is None:
        emb = np.zeros((B, config.embedding_input_dim), dtype=np.float32)
    else:
        emb = np.asarray(embeddings, dtype=np.float32)
        if emb.shape != (B, config.embedding_input_dim):
            raise ValueError(
                f"embedding batch shape {emb.shape} != ({B}, {config.embedding_input_dim})")
    return {"residue": residue, "group": group, "mask": mask, "embedding": emb}


def forward(params: ParameterStore | FastWeights, config: ModelConfig,
            examples: Sequence[EncodedExample],
            embeddings: np.ndarray | None = None) -> list[Prediction]:
    """Inference on a batch of encoded examples."""
    fw = params if isinstance(params, FastWeights) else FastWeights(params, config)
    outs = fast_forward(fw, config, batch_inputs(examples, embeddings, config))
    logits = outs["type_logits"]
    probs = type_probabilities(logits, config)
    rpost = _softmax_last(outs["region_logits"])
    preds = []
    for b, ex in enumerate(examples):
        sp, cs = decode_arrays(probs[b], rpost[b], ex.length)
        preds.append(Prediction(
            type_logits=logits[b], type_probs=probs[b],
            region_posteriors=rpost[b], predicted_type=sp, predicted_cs=cs))
    return preds


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def type_probabilities(type_logits: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Softmax of the sharpened cosine logits."""
    return _softmax_last(config.prob_sharpness * type_logits)


def decode_arrays(type_probs: np.ndarray, region_posteriors: np.ndarray,
                  length: int) -> tuple[SpType, int | None]:
    """Argmax type (ties to the lower index), then cleavage site from the
    contiguous signal-tagged block at the N-terminus."""
    sp = SpType(int(np.argmax(type_probs)))
    if sp == SpType.NO_SP:
        return sp, None
    tags = np.argmax(region_posteriors, axis=-1)
    cs = 0
    for pos in range(min(length, len(tags))):
        tag = RegionLabel(int(tags[pos]))
        if tag in SIGNAL_REGIONS or tag is RegionLabel.CLEAVAGE:
            cs += 1
        else:
            break
    # an SP call always carries a site; an empty block degrades to position 1
    return sp, max(cs, 1)


def decode(prediction: Prediction, length: int = MAX_LEN) -> tuple[SpType, int | None]:
    return decode_arrays(prediction.type_probs, prediction.region_posteriors, length)


# ---------------------------------------------------------------------------
# checkpoint format


def _checkpoint_payload(params: ParameterStore, config: ModelConfig) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(params: ParameterStore, config: ModelConfig, path) -> None:
    payload = _checkpoint_payload(params, config)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path) -> tuple[ParameterStore, ModelConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = len(CHECKPOINT_MAGIC) + 4
    if len(blob) < head + 4:
        raise TruncatedFile(f"{path}: file too short ({len(blob)} bytes)")
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    payload, (crc,) = blob[head:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumFailure(f"{path}: CRC mismatch")
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise TruncatedFile(f"{path}: truncated payload")
        out = payload[off:off + n]
        off += n
        return out

    (cfg_len,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_dict(json.loads(take(cfg_len).decode()))
    (count,) = struct.unpack("<I", take(4))
    params = ParameterStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        data = np.frombuffer(take(4 * int(np.prod(dims, dtype=np.int64))), dtype="<f4")
        params[name] = data.reshape(dims).copy()
    expected = parameter_shapes(config)
    for name, shape in expected.items():
        if name not in params or params[name].shape != shape:
            got = params[name].shape if name in params else None
            raise ChecksumFailure(
                f"{path}: tensor {name!r} has shape {got}, config requires {shape}")
    return params, config
