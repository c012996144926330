"""Shared builders: toy annotated datasets with motif-defined signal
peptides, and small deterministic helpers used across the suite."""

from __future__ import annotations

import io

import numpy as np
import pytest

from sigpep.seqio import (AnnotatedRecord, OrganismGroup, RegionLabel, SpType,
                          parse_annotated_fasta)

CANONICAL = "ACDEFGHIKLMNPQRSTVWY"

# signal annotation character per SP type
SIGNAL_CHAR = {
    SpType.SEC_SPI: "S",
    SpType.SEC_SPII: "L",
    SpType.SEC_SPIII: "P",
    SpType.TAT_SPI: "T",
    SpType.TAT_SPII: "W",
}

# residue triple that dominates each class's signal region: a deliberately
# strong, learnable motif
MOTIF_RESIDUES = {
    SpType.SEC_SPI: "LAF",
    SpType.SEC_SPII: "CGS",
    SpType.SEC_SPIII: "PQN",
    SpType.TAT_SPI: "RDE",
    SpType.TAT_SPII: "KWY",
}

GROUP_CYCLE = [OrganismGroup.EUKARYA, OrganismGroup.GRAM_POSITIVE,
               OrganismGroup.GRAM_NEGATIVE, OrganismGroup.ARCHAEA]


def random_mature(rng: np.random.Generator, length: int) -> str:
    return "".join(CANONICAL[i] for i in rng.integers(0, 20, length))


def make_sp_record(rng: np.random.Generator, idx: int, sp: SpType,
                   group: OrganismGroup, signal_len: int | None = None,
                   total_len: int = 50) -> str:
    """Three lines of the annotated format for one motif-defined SP record."""
    if signal_len is None:
        signal_len = int(rng.integers(10, 21))
    motif = MOTIF_RESIDUES[sp]
    body = "".join(motif[int(j)] for j in rng.integers(0, len(motif), signal_len - 1))
    seq_signal = "M" + body
    mature = random_mature(rng, total_len - signal_len)
    seq = seq_signal + mature
    ann = SIGNAL_CHAR[sp] * signal_len + "O" * (total_len - signal_len)
    return f">{sp.name.lower()}{idx}|{group.name}|{sp.name}|0\n{seq}\n{ann}\n"


def make_no_sp_record(rng: np.random.Generator, idx: int,
                      group: OrganismGroup, total_len: int = 50) -> str:
    seq = "M" + random_mature(rng, total_len - 1)
    ann = "I" * total_len
    return f">nosp{idx}|{group.name}|NO_SP|0\n{seq}\n{ann}\n"


def motif_dataset(counts: dict, seed: int = 0) -> list[AnnotatedRecord]:
    """Generate an annotated dataset with the given per-type counts."""
    rng = np.random.Generator(np.random.PCG64(seed))
    chunks = []
    idx = 0
    for sp, n in counts.items():
        for _ in range(n):
            group = GROUP_CYCLE[idx % 4]
            if sp == SpType.NO_SP:
                chunks.append(make_no_sp_record(rng, idx, group))
            else:
                chunks.append(make_sp_record(rng, idx, sp, group))
            idx += 1
    return parse_annotated_fasta(io.StringIO("".join(chunks)))


@pytest.fixture
def toy_records():
    """32 records: 8 per class over 4 SP classes (the overfit target set)."""
    return motif_dataset({
        SpType.SEC_SPI: 8, SpType.SEC_SPII: 8,
        SpType.TAT_SPI: 8, SpType.TAT_SPII: 8,
    }, seed=11)


@pytest.fixture
def small_mixed_records():
    return motif_dataset({
        SpType.NO_SP: 12, SpType.SEC_SPI: 6, SpType.SEC_SPII: 4,
        SpType.TAT_SPI: 3,
    }, seed=5)


def tiny_model_config():
    """A reduced architecture for fast training-behavior tests.

    Same topology as the default, far fewer units.
    """
    from sigpep.model import ModelConfig
    return ModelConfig(
        seq_len=70, fc1_units=28, cnn_channels=(16, 64), cnn_kernels=(5, 3),
        lstm1_hidden=16, d_model=32, heads=2, d_k=16, lstm2_hidden=16,
        cs_head_widths=(32, 16, 11), type_reduce=32, embed_hidden=16,
        embed_out=8, fuse_hidden=16, embedding_input_dim=24)
