"""External embedding ingestion, a deterministic stub provider, and MSA
utilities (pairwise identity, diversity-maximizing subsampling, Neff).

Pretrained protein language models stay outside the process boundary: their
output arrives as TSV or binary embedding files keyed by sequence id.
Per-residue matrices are mean-pooled to one vector per sequence on load.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

BINARY_MAGIC = b"SPEMB1"


class EmbeddingError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    dim: int
    entries: dict = field(default_factory=dict)  # id -> np.ndarray (dim,)

    def get(self, seq_id: str) -> np.ndarray | None:
        return self.entries.get(seq_id)

    def __len__(self):
        return len(self.entries)


def _finish_entry(table: dict, seq_id: str, vec: np.ndarray, dims: set):
    if seq_id in table:
        raise EmbeddingError(f"duplicate id {seq_id!r}")
    if not np.all(np.isfinite(vec)):
        raise EmbeddingError(f"{seq_id!r}: non-finite value")
    table[seq_id] = vec
    dims.add(vec.shape[0])
    if len(dims) > 1:
        raise EmbeddingError(f"inconsistent embedding dims: {sorted(dims)}")


def load_embeddings_tsv(stream: TextIO) -> EmbeddingTable:
    """One line per entry: ``id<TAB>v1<TAB>...<TAB>vD``.

    Per-residue rows named ``id#pos`` are pooled to the column means.
    """
    entries: dict = {}
    dims: set = set()
    pending: dict = {}  # id -> list of per-residue rows
    for ln, line in enumerate(stream, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise EmbeddingError(f"line {ln}: expected id and values")
        key = parts[0]
        try:
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float32)
        except ValueError as e:
            raise EmbeddingError(f"line {ln}: {e}") from None
        if "#" in key:
            seq_id, _pos = key.rsplit("#", 1)
            pending.setdefault(seq_id, []).append(vec)
        else:
            _finish_entry(entries, key, vec, dims)
    for seq_id, rows in pending.items():
        widths = {r.shape[0] for r in rows}
        if len(widths) != 1:
            raise EmbeddingError(f"{seq_id!r}: per-residue rows of differing widths {sorted(widths)}")
        _finish_entry(entries, seq_id, np.mean(rows, axis=0).astype(np.float32), dims)
    if not entries:
        raise EmbeddingError("no embedding entries found")
    return EmbeddingTable(dim=next(iter(dims)), entries=entries)


def load_embeddings_binary(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(BINARY_MAGIC)] != BINARY_MAGIC:
        raise EmbeddingError(f"{path}: bad magic bytes")
    off = len(BINARY_MAGIC)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    entries: dict = {}
    dims: set = set()
    for _ in range(count):
        (id_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        seq_id = blob[off:off + id_len].decode()
        off += id_len
        (dim,) = struct.unpack_from("<I", blob, off)
        off += 4
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).copy()
        off += 4 * dim
        _finish_entry(entries, seq_id, vec, dims)
    if not entries:
        raise EmbeddingError(f"{path}: no entries")
    return EmbeddingTable(dim=next(iter(dims)), entries=entries)


def save_embeddings_binary(table: EmbeddingTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<I", len(table.entries)))
        for seq_id, vec in table.entries.items():
            ib = seq_id.encode()
            fh.write(struct.pack("<I", len(ib)))
            fh.write(ib)
            fh.write(struct.pack("<I", vec.shape[0]))
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def load_embeddings(path) -> EmbeddingTable:
    """Format sniffing: binary magic first, TSV otherwise."""
    with open(path, "rb") as fh:
        head = fh.read(len(BINARY_MAGIC))
    if head == BINARY_MAGIC:
        return load_embeddings_binary(path)
    with open(path, "r", encoding="utf-8") as fh:
        return load_embeddings_tsv(fh)


def stub_embedding(seq_id: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-random unit vector keyed by (id, seed).

    Test substitute for pretrained language models.
    """
    if dim <= 0:
        raise EmbeddingError(f"dim must be positive, got {dim}")
    digest = hashlib.sha256(f"{seed}:{seq_id}".encode()).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


# ---------------------------------------------------------------------------
# MSA utilities


@dataclass
class Msa:
    """Aligned rows over residues plus ``-``; row 0 is the query."""
    rows: list

    def __post_init__(self):
        if not self.rows:
            raise EmbeddingError("MSA must be non-empty")
        width = len(self.rows[0])
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise EmbeddingError(f"MSA row {i} has length {len(row)}, expected {width}")


def parse_msa(stream: TextIO) -> Msa:
    """A2M / aligned-FASTA: keep aligned characters, uppercase, '.' -> '-'."""
    rows = []
    current: list[str] = []
    started = False
    for line in stream:
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            if started:
                rows.append("".join(current))
            current = []
            started = True
        else:
            current.append(line.upper().replace(".", "-"))
    if started:
        rows.append("".join(current))
    return Msa(rows=rows)


def pairwise_identity(a: str, b: str) -> float:
    """Matches over columns where at least one row is non-gap."""
    if len(a) != len(b):
        raise EmbeddingError(f"aligned rows differ in length: {len(a)} vs {len(b)}")
    scored = 0
    matches = 0
    for ca, cb in zip(a, b):
        if ca == "-" and cb == "-":
            continue
        scored += 1
        if ca == cb:
            matches += 1
    if scored == 0:
        return 0.0
    return matches / scored


def _hamming(a: str, b: str) -> int:
    # gap-vs-residue counts as a mismatch
    return sum(1 for ca, cb in zip(a, b) if ca != cb)


def subsample_msa(msa: Msa, target: int = 128) -> Msa:
    """Greedy diversity-maximizing subsampling down to ``target`` rows.

    Keeps row 0, then repeatedly adds the row with the highest mean Hamming
    distance to the kept set; ties break toward the lowest original index.
    Kept rows preserve their original relative order.
    """
    rows = msa.rows
    n = len(rows)
    if n <= target:
        return Msa(rows=list(rows))
    kept = [0]
    kept_set = {0}
    # running sum of distances from each candidate to the kept set
    dist_sum = np.array([_hamming(rows[0], r) for r in rows], dtype=np.float64)
    while len(kept) < target:
        best = -1
        best_mean = -1.0
        for i in range(n):
            if i in kept_set:
                continue
            m = dist_sum[i] / len(kept)
            if m > best_mean:  # strict: ties keep the lowest index
                best, best_mean = i, m
        kept.append(best)
        kept_set.add(best)
        for i in range(n):
            if i not in kept_set:
                dist_sum[i] += _hamming(rows[best], rows[i])
    return Msa(rows=[rows[i] for i in sorted(kept)])


def neff(msa: Msa, weight_floor: float | None = None) -> float:
    """Effective sequence count: sum of 1/weight_i with weight_i the mean
    pairwise identity of row i to all rows (including itself).

    Rows with zero weight are floored at 1/N to keep the sum bounded.
    """
    rows = msa.rows
    n = len(rows)
    floor = (1.0 / n) if weight_floor is None else weight_floor
    total = 0.0
    for i in range(n):
        w = sum(pairwise_identity(rows[i], rows[j]) for j in range(n)) / n
        total += 1.0 / max(w, floor)
    return total
