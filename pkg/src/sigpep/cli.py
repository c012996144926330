"""Command-line surface: train, predict, eval, and the metagenomic
screening pipeline (confidence filter, known-SP exclusion, dedup, tallies).

Exit codes: 0 success, 1 training/processing abort, 2 malformed input.
The environment variable ``SIGPEP_SEED`` overrides the configured seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator

import numpy as np

from . import model as m
from . import trainer as tr
from .embeddings import EmbeddingTable, load_embeddings, stub_embedding
from .loss import LossConfig
from .metrics import LabeledPrediction, evaluate, score_label_pairs
from .seqio import (ALPHABET, AnnotatedRecord, OrganismGroup, ParseError,
                    SpType, encode, iter_plain_fasta, parse_annotated_fasta)

EXIT_OK = 0
EXIT_ABORT = 1
EXIT_BAD_INPUT = 2


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_BAD_INPUT


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _seed_override(seed: int) -> int:
    env = os.environ.get("SIGPEP_SEED")
    return int(env) if env else seed


def _load_train_config(path) -> tuple[tr.TrainConfig, m.ModelConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    model_cfg = m.ModelConfig.from_dict(raw.pop("model", {}) or {})
    loss_cfg = LossConfig(**(raw.pop("loss", {}) or {}))
    cfg = tr.TrainConfig(loss=loss_cfg, **raw)
    cfg.seed = _seed_override(cfg.seed)
    return cfg, model_cfg


def _config_hash(cfg: tr.TrainConfig, model_cfg: m.ModelConfig) -> str:
    blob = json.dumps({"train": {**asdict(cfg), "loss": asdict(cfg.loss)},
                       "model": model_cfg.to_dict()}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _embedding_source(args, config: m.ModelConfig, seed: int):
    """Returns a lookup callable id -> vector, or None for zero vectors."""
    if getattr(args, "stub_embeddings", False):
        return lambda sid: stub_embedding(sid, config.embedding_input_dim, seed)
    path = getattr(args, "embeddings", None)
    if path is None:
        return None
    table = load_embeddings(path)
    if table.dim != config.embedding_input_dim:
        raise ValueError(
            f"embedding dim {table.dim} != model embedding_input_dim {config.embedding_input_dim}")
    return table.get


def cmd_train(args) -> int:
    try:
        cfg, model_cfg = _load_train_config(args.config)
    except (OSError, ValueError, TypeError) as e:
        return _fail(f"config {args.config}: {e}")
    try:
        with open(args.data, "r", encoding="utf-8") as fh:
            records = parse_annotated_fasta(fh)
    except OSError as e:
        return _fail(f"data {args.data}: {e}")
    except ParseError as e:
        return _fail(f"data {args.data}: {e}")
    embeddings = None
    if args.embeddings:
        try:
            table = load_embeddings(args.embeddings)
        except (OSError, ValueError) as e:
            return _fail(f"embeddings {args.embeddings}: {e}")
        embeddings = table
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        result = tr.train(records, embeddings, cfg, model_cfg)
    except tr.TrainingAbort as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_ABORT
    m.save_checkpoint(result.params, result.model_config, outdir / "checkpoint.bin")
    (outdir / "log.tsv").write_text(result.log_tsv())
    manifest = {
        "config_hash": _config_hash(cfg, model_cfg),
        "seed": cfg.seed,
        "input_digests": {
            "data": _sha256_file(args.data),
            "embeddings": _sha256_file(args.embeddings) if args.embeddings else None,
        },
        "best_epoch": result.best_epoch,
        "best_val_mcc": result.best_val_mcc,
        "split_hash": result.split_hash(),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _predict_batches(params, config, items: Iterator[tuple[str, str]],
                     group: OrganismGroup, lookup, batch_size: int = 64):
    """Yield (id, sequence, Prediction) in input order, batch by batch."""
    batch: list[tuple[str, str]] = []

    def flush():
        examples = [encode(seq, group) for _, seq in batch]
        emb = None
        if lookup is not None:
            emb = np.zeros((len(batch), config.embedding_input_dim), dtype=np.float32)
            for i, (sid, _) in enumerate(batch):
                v = lookup(sid)
                if v is not None:
                    emb[i] = np.asarray(v, dtype=np.float32)
        preds = m.forward(params, config, examples, emb)
        for (sid, seq), p in zip(batch, preds):
            yield sid, seq, p

    for item in items:
        batch.append(item)
        if len(batch) >= batch_size:
            yield from flush()
            batch = []
    if batch:
        yield from flush()


def _parse_group_flag(args) -> OrganismGroup:
    if getattr(args, "no_group", False):
        return OrganismGroup.UNKNOWN
    g = getattr(args, "group", None)
    if g is None:
        return OrganismGroup.UNKNOWN
    try:
        return OrganismGroup[g.upper()]
    except KeyError:
        raise ValueError(f"unknown group {g!r}") from None


def cmd_predict(args) -> int:
    try:
        params, config = m.load_checkpoint(args.checkpoint)
    except (OSError, m.CheckpointError) as e:
        return _fail(f"checkpoint {args.checkpoint}: {e}")
    params = m.FastWeights(params, config)
    try:
        group = _parse_group_flag(args)
        lookup = _embedding_source(args, config, seed=_seed_override(0))
    except ValueError as e:
        return _fail(str(e))
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        with open(args.fasta, "r", encoding="utf-8") as fh:
            for sid, _seq, p in _predict_batches(params, config, iter_plain_fasta(fh),
                                                 group, lookup):
                cs = str(p.predicted_cs) if p.predicted_cs is not None else "-"
                probs = "\t".join(f"{v:.6f}" for v in p.type_probs)
                out.write(f"{sid}\t{p.predicted_type.name}\t{cs}\t{probs}\n")
    except OSError as e:
        return _fail(f"fasta {args.fasta}: {e}")
    except ParseError as e:
        return _fail(f"fasta {args.fasta}: {e}")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        params, config = m.load_checkpoint(args.checkpoint)
    except (OSError, m.CheckpointError) as e:
        return _fail(f"checkpoint {args.checkpoint}: {e}")
    params = m.FastWeights(params, config)
    try:
        with open(args.data, "r", encoding="utf-8") as fh:
            records = parse_annotated_fasta(fh)
    except (OSError, ParseError) as e:
        return _fail(f"data {args.data}: {e}")
    try:
        lookup = _embedding_source(args, config, seed=_seed_override(0))
    except ValueError as e:
        return _fail(str(e))
    group = OrganismGroup.UNKNOWN if args.no_group else None
    labeled = []
    probs = []
    batch = 64
    for start in range(0, len(records), batch):
        chunk = records[start:start + batch]
        examples = [encode(r, group) for r in chunk]
        emb = None
        if lookup is not None:
            emb = np.zeros((len(chunk), config.embedding_input_dim), dtype=np.float32)
            for i, r in enumerate(chunk):
                v = lookup(r.id)
                if v is not None:
                    emb[i] = np.asarray(v, dtype=np.float32)
        for r, p in zip(chunk, m.forward(params, config, examples, emb)):
            labeled.append(LabeledPrediction(
                gold_type=r.sp_type, pred_type=p.predicted_type, group=r.group,
                gold_cs=r.cs_position, pred_cs=p.predicted_cs))
            probs.append(p.type_probs)
    report = evaluate(labeled)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.tsv").write_text(report.to_tsv())
    rows = score_label_pairs(labeled, probs)
    with open(outdir / "scores.tsv", "w", encoding="utf-8") as fh:
        fh.write("type\tscore\tis_gold\n")
        for t, s, y in rows:
            fh.write(f"{t}\t{s:.6f}\t{y}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# screening


@dataclass
class ScreenReport:
    total_input: int = 0
    predicted_sp: int = 0                      # kept candidates
    predicted_sp_raw: int = 0                  # before exclusions
    per_type: dict = field(default_factory=dict)
    per_group: dict = field(default_factory=dict)
    known_sp_matches: int = 0
    duplicates: int = 0
    unknown_group_drops: int = 0
    malformed: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "total_input": self.total_input,
            "predicted_sp": self.predicted_sp,
            "predicted_sp_raw": self.predicted_sp_raw,
            "per_type": self.per_type,
            "per_group": self.per_group,
            "exclusions": {
                "known_sp_matches": self.known_sp_matches,
                "duplicates": self.duplicates,
                "unknown_group_drops": self.unknown_group_drops,
                "malformed": self.malformed,
            },
        }, indent=2, sort_keys=True) + "\n"


def _iter_fasta_tolerant(fh, report: ScreenReport) -> Iterator[tuple[str, str, OrganismGroup]]:
    """Streaming FASTA; malformed records are counted and skipped.

    A trailing ``|GROUP`` in the header carries per-sequence group information.
    """
    name = None
    chunks: list[str] = []

    def finish():
        seq = "".join(chunks).upper()
        group = OrganismGroup.UNKNOWN
        sid = name
        if "|" in sid:
            base, tail = sid.rsplit("|", 1)
            if tail.upper() in OrganismGroup.__members__:
                group = OrganismGroup[tail.upper()]
                sid = base
        if not seq or (set(seq) - ALPHABET):
            report.malformed += 1
            return None
        return sid, seq, group

    for line in fh:
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            if name is not None:
                item = finish()
                if item:
                    yield item
            name = line[1:].split()[0] if line[1:].strip() else ""
            chunks = []
        else:
            if name is None:
                report.malformed += 1
                continue
            chunks.append(line)
    if name is not None:
        item = finish()
        if item:
            yield item


def _load_known_sps(path) -> set[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return {seq for _, seq in iter_plain_fasta(fh)}


def cmd_screen(args) -> int:
    try:
        params, config = m.load_checkpoint(args.checkpoint)
    except (OSError, m.CheckpointError) as e:
        return _fail(f"checkpoint {args.checkpoint}: {e}")
    params = m.FastWeights(params, config)
    known: set[str] = set()
    if args.known_sps:
        try:
            known = _load_known_sps(args.known_sps)
        except (OSError, ParseError) as e:
            return _fail(f"known SPs {args.known_sps}: {e}")
    try:
        lookup = _embedding_source(args, config, seed=_seed_override(0))
    except (OSError, ValueError) as e:
        return _fail(str(e))

    report = ScreenReport()
    seen: set[str] = set()
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    batch_size = args.batch_size

    try:
        fh = open(args.fasta, "r", encoding="utf-8")
    except OSError as e:
        return _fail(f"fasta {args.fasta}: {e}")

    with fh, open(outdir / "candidates.fasta", "w", encoding="utf-8") as cand_fa, \
            open(outdir / "candidates.tsv", "w", encoding="utf-8") as cand_tsv:
        cand_tsv.write("id\ttype\tcs\tprobability\tgroup\n")
        source = _iter_fasta_tolerant(fh, report)
        batch: list[tuple[str, str, OrganismGroup]] = []

        def process(chunk):
            examples = [encode(seq, grp) for _, seq, grp in chunk]
            emb = None
            if lookup is not None:
                emb = np.zeros((len(chunk), config.embedding_input_dim), dtype=np.float32)
                for i, (sid, _, _) in enumerate(chunk):
                    v = lookup(sid)
                    if v is not None:
                        emb[i] = np.asarray(v, dtype=np.float32)
            inputs = m.batch_inputs(examples, emb, config)
            outs = m.fast_forward(params, config, inputs, region_head=False)
            probs = m.type_probabilities(outs["type_logits"], config)
            ptypes = probs.argmax(axis=-1)
            pprob = probs[np.arange(len(chunk)), ptypes]
            # the per-position head is only needed for confident SP calls
            need = np.flatnonzero((ptypes != int(SpType.NO_SP)) & (pprob >= args.min_prob))
            cs_by_row: dict[int, int | None] = {}
            if need.size:
                rlogits = m.region_logits_from_h2(params.params, outs["h2"][need])
                rpost = m._softmax_last(rlogits)
                for j, row in enumerate(need.tolist()):
                    _, cs = m.decode_arrays(probs[row], rpost[j], examples[row].length)
                    cs_by_row[row] = cs
            for row, (sid, seq, grp) in enumerate(chunk):
                ptype = SpType(int(ptypes[row]))
                if ptype == SpType.NO_SP:
                    continue
                prob = float(pprob[row])
                if prob < args.min_prob:
                    continue
                predicted_cs = cs_by_row[row]
                report.predicted_sp_raw += 1
                if args.require_group and grp == OrganismGroup.UNKNOWN:
                    report.unknown_group_drops += 1
                    continue
                sp_prefix = seq[:predicted_cs] if predicted_cs else ""
                if seq in known or (sp_prefix and sp_prefix in known):
                    report.known_sp_matches += 1
                    continue
                if args.dedup:
                    if seq in seen:
                        report.duplicates += 1
                        continue
                    seen.add(seq)
                report.predicted_sp += 1
                report.per_type[ptype.name] = report.per_type.get(ptype.name, 0) + 1
                report.per_group[grp.name] = report.per_group.get(grp.name, 0) + 1
                cand_fa.write(f">{sid}\n{seq}\n")
                cs = predicted_cs if predicted_cs is not None else "-"
                cand_tsv.write(f"{sid}\t{ptype.name}\t{cs}\t{prob:.6f}\t{grp.name}\n")

        for item in source:
            report.total_input += 1
            batch.append(item)
            if len(batch) >= batch_size:
                process(batch)
                batch = []
        if batch:
            process(batch)

    (outdir / "report.json").write_text(report.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sigpep",
        description="Signal peptide classification, cleavage-site tagging, and screening.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from annotated records")
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--data", required=True, help="annotated 3-line record file")
    p.add_argument("--embeddings", default=None, help="embedding TSV or binary file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict types and cleavage sites for FASTA input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fasta", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--stub-embeddings", action="store_true",
                   help="deterministic stub embeddings instead of a file")
    p.add_argument("--group", default=None, help="organism group for all sequences")
    p.add_argument("--no-group", action="store_true", help="force the zero group vector")
    p.add_argument("--out", default=None, help="output TSV (stdout when omitted)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate against gold annotated records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--stub-embeddings", action="store_true")
    p.add_argument("--no-group", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("screen", help="screen a sequence collection for SP candidates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fasta", required=True)
    p.add_argument("--known-sps", default=None, help="FASTA of known SPs to exclude")
    p.add_argument("--min-prob", type=float, default=0.5)
    p.add_argument("--dedup", action="store_true")
    p.add_argument("--require-group", action="store_true",
                   help="drop sequences without group information in the header")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--stub-embeddings", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_screen)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
