"""Parsing, validation, and tensor encoding of annotated protein sequences.

Annotated records use a 3-line format: a header ``>{id}|{GROUP}|{TYPE}|{partition}``,
the residue string, and a per-residue annotation string.  Plain FASTA is
supported for un-annotated screening input.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, TextIO

import numpy as np

MAX_LEN = 70  # input cut-off: at most this many N-terminal residues are used

CANONICAL = "ACDEFGHIKLMNPQRSTVWY"  # alphabetical; index A=0 .. Y=19
AMBIGUOUS = "XBZUO"                 # encoded as all-zero residue rows
ALPHABET = set(CANONICAL + AMBIGUOUS)

RESIDUE_INDEX = {aa: i for i, aa in enumerate(CANONICAL)}

# byte-value lookup for fast one-hot encoding; -1 marks ambiguous (zero row)
_BYTE_TO_INDEX = np.full(256, -1, dtype=np.int64)
for _aa, _i in RESIDUE_INDEX.items():
    _BYTE_TO_INDEX[ord(_aa)] = _i


class OrganismGroup(enum.Enum):
    EUKARYA = 0
    GRAM_POSITIVE = 1
    GRAM_NEGATIVE = 2
    ARCHAEA = 3
    UNKNOWN = 4  # encodes as the all-zero group vector


class SpType(enum.IntEnum):
    NO_SP = 0
    SEC_SPI = 1
    SEC_SPII = 2
    SEC_SPIII = 3
    TAT_SPI = 4
    TAT_SPII = 5


NUM_TYPES = 6


class RegionLabel(enum.IntEnum):
    SIG_SPI = 0
    SIG_SPII = 1
    SIG_SPIII = 2
    SIG_TATI = 3
    SIG_TATII = 4
    CLEAVAGE = 5
    INTRA = 6
    TM = 7
    EXTRA = 8
    GLOBULAR = 9
    PAD = 10


NUM_REGION_LABELS = 11

# annotation characters, in enum order
REGION_CHARS = "SLPTWCIMOG"
CHAR_TO_REGION = {c: RegionLabel(i) for i, c in enumerate(REGION_CHARS)}
REGION_TO_CHAR = {r: c for c, r in CHAR_TO_REGION.items()}

SIGNAL_REGIONS = frozenset({
    RegionLabel.SIG_SPI, RegionLabel.SIG_SPII, RegionLabel.SIG_SPIII,
    RegionLabel.SIG_TATI, RegionLabel.SIG_TATII,
})

# the signal tag each SP type must open with
TYPE_SIGNAL_REGION = {
    SpType.SEC_SPI: RegionLabel.SIG_SPI,
    SpType.SEC_SPII: RegionLabel.SIG_SPII,
    SpType.SEC_SPIII: RegionLabel.SIG_SPIII,
    SpType.TAT_SPI: RegionLabel.SIG_TATI,
    SpType.TAT_SPII: RegionLabel.SIG_TATII,
}


class ParseError(ValueError):
    pass


class MalformedHeader(ParseError):
    pass


class LengthMismatch(ParseError):
    pass


class UnknownAnnotationCharacter(ParseError):
    pass


class InconsistentType(ParseError):
    pass


class IllegalCharacter(ParseError):
    pass


class EmptySequence(ParseError):
    pass


@dataclass(frozen=True)
class AnnotatedRecord:
    """One protein with gold SP type and per-residue region annotation."""

    id: str
    group: OrganismGroup
    sp_type: SpType
    sequence: str
    annotation: tuple
    partition: str = "0"
    cs_position: int | None = None  # 1-based index of the last signal residue


@dataclass
class EncodedExample:
    residue_onehot: np.ndarray   # (MAX_LEN, 20) float32
    group_onehot: np.ndarray     # (MAX_LEN, 4) float32
    mask: np.ndarray             # (MAX_LEN,) float32
    type_label: int
    region_labels: np.ndarray    # (MAX_LEN,) int, PAD beyond length
    length: int


@dataclass
class ClassCounts:
    n: dict = field(default_factory=dict)  # SpType -> count

    def as_array(self) -> np.ndarray:
        return np.array([self.n.get(SpType(i), 0) for i in range(NUM_TYPES)], dtype=np.int64)

    def total(self) -> int:
        return int(sum(self.n.values()))


def _derive_cs(annotation: Iterable[RegionLabel]) -> int | None:
    """Length of the leading run of signal/cleavage tags, or None."""
    cs = 0
    for tag in annotation:
        if tag in SIGNAL_REGIONS or tag is RegionLabel.CLEAVAGE:
            cs += 1
        else:
            break
    return cs or None


def _validate(rec_id: str, sp_type: SpType, sequence: str, annotation: tuple) -> int | None:
    if len(sequence) == 0:
        raise EmptySequence(f"{rec_id}: empty sequence")
    if len(annotation) != len(sequence):
        raise LengthMismatch(
            f"{rec_id}: annotation length {len(annotation)} != sequence length {len(sequence)}")
    bad = set(sequence) - ALPHABET
    if bad:
        raise IllegalCharacter(f"{rec_id}: illegal residue(s) {sorted(bad)!r}")
    n_cleave = sum(1 for t in annotation if t is RegionLabel.CLEAVAGE)
    if n_cleave > 1:
        raise InconsistentType(f"{rec_id}: more than one cleavage tag")
    if n_cleave == 1:
        ci = annotation.index(RegionLabel.CLEAVAGE)
        if ci == 0 or annotation[ci - 1] not in SIGNAL_REGIONS:
            raise InconsistentType(f"{rec_id}: cleavage tag not preceded by a signal tag")
    has_signal = any(t in SIGNAL_REGIONS for t in annotation)
    if sp_type is SpType.NO_SP:
        if has_signal or n_cleave:
            raise InconsistentType(f"{rec_id}: NO_SP record carries signal tags")
        return None
    want = TYPE_SIGNAL_REGION[sp_type]
    if annotation[0] is not want:
        raise InconsistentType(
            f"{rec_id}: type {sp_type.name} but annotation starts with "
            f"{annotation[0].name}")
    wrong = {t for t in annotation if t in SIGNAL_REGIONS and t is not want}
    if wrong:
        raise InconsistentType(
            f"{rec_id}: annotation mixes signal tags {sorted(t.name for t in wrong)}")
    cs = _derive_cs(annotation)
    if cs is None:
        raise InconsistentType(f"{rec_id}: SP record without a leading signal run")
    return cs


def parse_annotated_fasta(stream: TextIO) -> list[AnnotatedRecord]:
    """Parse the 3-line annotated record format."""
    lines = [ln.rstrip("\n") for ln in stream]
    lines = [ln for ln in lines if ln.strip() != ""]
    if len(lines) % 3 != 0:
        raise MalformedHeader(f"file has {len(lines)} non-empty lines, expected a multiple of 3")
    records = []
    for i in range(0, len(lines), 3):
        header, seq, ann = lines[i], lines[i + 1].strip().upper(), lines[i + 2].strip().upper()
        if not header.startswith(">"):
            raise MalformedHeader(f"line {i + 1}: expected '>' header, got {header[:30]!r}")
        fields = header[1:].split("|")
        if len(fields) != 4:
            raise MalformedHeader(f"line {i + 1}: expected 4 '|'-separated fields, got {len(fields)}")
        rec_id, group_s, type_s, partition = fields
        try:
            group = OrganismGroup[group_s]
        except KeyError:
            raise MalformedHeader(f"{rec_id}: unknown group {group_s!r}") from None
        try:
            sp_type = SpType[type_s]
        except KeyError:
            raise MalformedHeader(f"{rec_id}: unknown SP type {type_s!r}") from None
        try:
            annotation = tuple(CHAR_TO_REGION[c] for c in ann)
        except KeyError as e:
            raise UnknownAnnotationCharacter(f"{rec_id}: unknown annotation character {e.args[0]!r}") from None
        cs = _validate(rec_id, sp_type, seq, annotation)
        records.append(AnnotatedRecord(
            id=rec_id, group=group, sp_type=sp_type, sequence=seq,
            annotation=annotation, partition=partition, cs_position=cs))
    return records


def serialize_annotated(records: Iterable[AnnotatedRecord]) -> str:
    out = []
    for r in records:
        out.append(f">{r.id}|{r.group.name}|{r.sp_type.name}|{r.partition}")
        out.append(r.sequence)
        out.append("".join(REGION_TO_CHAR[t] for t in r.annotation))
    return "\n".join(out) + ("\n" if out else "")


def parse_plain_fasta(stream: TextIO) -> list[tuple[str, str]]:
    return list(iter_plain_fasta(stream))


def iter_plain_fasta(stream: TextIO) -> Iterator[tuple[str, str]]:
    """Stream (id, sequence) pairs from multi-line FASTA; sequences uppercased."""
    name = None
    chunks: list[str] = []

    def finish():
        seq = "".join(chunks)
        if not seq:
            raise EmptySequence(f"{name}: empty sequence")
        bad = set(seq) - ALPHABET
        if bad:
            raise IllegalCharacter(f"{name}: illegal residue(s) {sorted(bad)!r}")
        return name, seq

    for line in stream:
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            if name is not None:
                yield finish()
            name = line[1:].split()[0] if line[1:].strip() else ""
            chunks = []
        else:
            if name is None:
                raise MalformedHeader("sequence data before first '>' header")
            chunks.append(line.upper())
    if name is not None:
        yield finish()


GROUP_ONEHOT = {
    OrganismGroup.EUKARYA: (1.0, 0.0, 0.0, 0.0),
    OrganismGroup.GRAM_POSITIVE: (0.0, 1.0, 0.0, 0.0),
    OrganismGroup.GRAM_NEGATIVE: (0.0, 0.0, 1.0, 0.0),
    OrganismGroup.ARCHAEA: (0.0, 0.0, 0.0, 1.0),
    OrganismGroup.UNKNOWN: (0.0, 0.0, 0.0, 0.0),
}


def encode(record: AnnotatedRecord | str,
           group: OrganismGroup | None = None) -> EncodedExample:
    """Encode a record (or plain sequence) into fixed-length model tensors.

    Sequences longer than :data:`MAX_LEN` are truncated to their first
    :data:`MAX_LEN` residues; ambiguous residues get all-zero rows; the group
    row is replicated down every position (all zeros for UNKNOWN).
    """
    if isinstance(record, AnnotatedRecord):
        sequence = record.sequence
        grp = group if group is not None else record.group
        type_label = int(record.sp_type)
        ann = record.annotation
    else:
        sequence = record.upper()
        if not sequence:
            raise EmptySequence("empty sequence")
        grp = group if group is not None else OrganismGroup.UNKNOWN
        type_label = int(SpType.NO_SP)
        ann = None

    seq = sequence[:MAX_LEN]
    n = len(seq)
    residue = np.zeros((MAX_LEN, 20), dtype=np.float32)
    idx = _BYTE_TO_INDEX[np.frombuffer(seq.encode("latin-1", errors="replace"),
                                       dtype=np.uint8)]
    pos = np.flatnonzero(idx >= 0)
    residue[pos, idx[pos]] = 1.0
    grouph = np.zeros((MAX_LEN, 4), dtype=np.float32)
    grouph[:] = GROUP_ONEHOT[grp]
    mask = np.zeros(MAX_LEN, dtype=np.float32)
    mask[:n] = 1.0
    regions = np.full(MAX_LEN, int(RegionLabel.PAD), dtype=np.int64)
    if ann is not None:
        for i in range(n):
            regions[i] = int(ann[i])
    return EncodedExample(residue_onehot=residue, group_onehot=grouph, mask=mask,
                          type_label=type_label, region_labels=regions, length=n)


def class_counts(records: Iterable[AnnotatedRecord]) -> ClassCounts:
    counts: dict = {SpType(i): 0 for i in range(NUM_TYPES)}
    for r in records:
        counts[r.sp_type] += 1
    return ClassCounts(n=counts)
