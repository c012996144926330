"""End-to-end command-line behavior: train, predict, eval, screen."""

from __future__ import annotations

import json
import os

import numpy as np
import pytest

from conftest import motif_dataset, tiny_model_config
from sigpep import cli
from sigpep.cli import EXIT_BAD_INPUT, EXIT_OK, main
from sigpep.seqio import SpType, serialize_annotated

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


def tiny_model_json() -> dict:
    return tiny_model_config().to_dict()


def train_config_json(**overrides) -> dict:
    cfg = {
        "model": tiny_model_json(),
        "loss": {"tau": 5.0},
        "lr": 0.002,
        "max_epochs": 60,
        "batch_size": 16,
        "patience": 60,
        "validation_fraction": 0.1,
        "seed": 0,
    }
    cfg.update(overrides)
    return cfg


def dataset_records():
    # per-class counts small enough that the validation split is empty, so
    # training monitors (and perfects) the full set
    return motif_dataset({SpType.NO_SP: 8, SpType.SEC_SPI: 6,
                          SpType.SEC_SPII: 6}, seed=3)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A trained tiny model plus its dataset on disk."""
    root = tmp_path_factory.mktemp("cli")
    records = dataset_records()
    data = root / "data.fasta"
    data.write_text(serialize_annotated(records))
    config = root / "config.json"
    config.write_text(json.dumps(train_config_json()))
    out = root / "run"
    rc = main(["train", "--config", str(config), "--data", str(data),
               "--out", str(out)])
    assert rc == EXIT_OK
    return {"root": root, "records": records, "data": data, "config": config,
            "ckpt": out / "checkpoint.bin", "out": out}


def test_train_outputs(workdir):
    assert workdir["ckpt"].exists()
    assert (workdir["out"] / "log.tsv").exists()
    manifest = json.loads((workdir["out"] / "manifest.json").read_text())
    assert manifest["seed"] == 0
    assert len(manifest["split_hash"]) == 16
    assert manifest["input_digests"]["data"]


def test_train_missing_data_exits_2(workdir, capsys):
    missing = workdir["root"] / "nope.fasta"
    rc = main(["train", "--config", str(workdir["config"]),
               "--data", str(missing), "--out", str(workdir["root"] / "x")])
    assert rc == EXIT_BAD_INPUT
    assert "nope.fasta" in capsys.readouterr().err


def test_train_bad_config_exits_2(workdir, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lr": -5}))
    rc = main(["train", "--config", str(bad), "--data", str(workdir["data"]),
               "--out", str(tmp_path / "o")])
    assert rc == EXIT_BAD_INPUT


def test_train_rerun_is_byte_identical(workdir, tmp_path):
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(train_config_json(max_epochs=3, patience=3)))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = main(["train", "--config", str(cfgp), "--data", str(workdir["data"]),
                   "--out", str(out)])
        assert rc == EXIT_OK
        outs.append(out)
    assert (outs[0] / "checkpoint.bin").read_bytes() == (outs[1] / "checkpoint.bin").read_bytes()
    assert (outs[0] / "log.tsv").read_text() == (outs[1] / "log.tsv").read_text()


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv("SIGPEP_SEED", "123")
    assert cli._seed_override(0) == 123
    monkeypatch.delenv("SIGPEP_SEED")
    assert cli._seed_override(7) == 7


# ---------------------------------------------------------------------------
# predict


def test_predict_empty_fasta(workdir, tmp_path):
    empty = tmp_path / "empty.fasta"
    empty.write_text("")
    out = tmp_path / "pred.tsv"
    rc = main(["predict", "--checkpoint", str(workdir["ckpt"]),
               "--fasta", str(empty), "--out", str(out)])
    assert rc == EXIT_OK
    assert out.read_text() == ""


def test_predict_bad_checkpoint(tmp_path, capsys):
    fake = tmp_path / "fake.ckpt"
    fake.write_bytes(b"garbage")
    rc = main(["predict", "--checkpoint", str(fake),
               "--fasta", str(tmp_path / "x.fa"), "--out", str(tmp_path / "o.tsv")])
    assert rc == EXIT_BAD_INPUT
    assert "fake.ckpt" in capsys.readouterr().err


def test_predict_rows_and_no_sp_dash(workdir, tmp_path):
    fasta = tmp_path / "in.fasta"
    recs = workdir["records"]
    lines = []
    for r in recs[:3] + recs[8:11]:  # some NO_SP and some SEC_SPI
        lines.append(f">{r.id}\n{r.sequence}\n")
    fasta.write_text("".join(lines))
    out = tmp_path / "pred.tsv"
    rc = main(["predict", "--checkpoint", str(workdir["ckpt"]),
               "--fasta", str(fasta), "--out", str(out)])
    assert rc == EXIT_OK
    rows = [ln.split("\t") for ln in out.read_text().splitlines()]
    assert len(rows) == 6
    for row in rows:
        assert len(row) == 3 + 6
        probs = [float(v) for v in row[3:]]
        assert abs(sum(probs) - 1.0) <= 1e-4
        if row[1] == "NO_SP":
            assert row[2] == "-"
        else:
            assert row[2].isdigit()
    # the trained model memorizes its training records
    assert [r[1] for r in rows[:3]] == ["NO_SP"] * 3
    assert [r[1] for r in rows[3:]] == ["SEC_SPI"] * 3


def test_predict_no_group_invariant_to_group_flag(workdir, tmp_path):
    fasta = tmp_path / "in.fasta"
    recs = workdir["records"]
    fasta.write_text("".join(f">{r.id}\n{r.sequence}\n" for r in recs[:6]))
    outs = []
    for i, grp in enumerate(["eukarya", "archaea", "gram_positive"]):
        out = tmp_path / f"p{i}.tsv"
        rc = main(["predict", "--checkpoint", str(workdir["ckpt"]),
                   "--fasta", str(fasta), "--group", grp, "--no-group",
                   "--out", str(out)])
        assert rc == EXIT_OK
        outs.append(out.read_text())
    assert outs[0] == outs[1] == outs[2]


def test_predict_unknown_group_rejected(workdir, tmp_path):
    fasta = tmp_path / "in.fasta"
    fasta.write_text(">a\nMAAG\n")
    rc = main(["predict", "--checkpoint", str(workdir["ckpt"]),
               "--fasta", str(fasta), "--group", "martian",
               "--out", str(tmp_path / "o.tsv")])
    assert rc == EXIT_BAD_INPUT


# ---------------------------------------------------------------------------
# eval


def test_eval_self_overfit_report(workdir, tmp_path):
    out = tmp_path / "eval"
    rc = main(["eval", "--checkpoint", str(workdir["ckpt"]),
               "--data", str(workdir["data"]), "--out", str(out)])
    assert rc == EXIT_OK
    lines = (out / "report.tsv").read_text().splitlines()
    table = {}
    for ln in lines:
        grp, sp, metric, val = ln.split("\t")
        table[(grp, sp, metric)] = val
    assert float(table[("OVERALL", "ALL", "mcc")]) == 1.0
    assert float(table[("OVERALL", "ALL", "kappa")]) == 1.0
    assert float(table[("OVERALL", "ALL", "balanced_accuracy")]) == 1.0
    # every populated MCC cell is exactly 1, and absent cells say so
    mcc_cells = [(k, v) for k, v in table.items()
                 if k[2] in ("mcc1", "mcc2") and k[0] != "OVERALL"]
    assert mcc_cells
    for k, v in mcc_cells:
        assert v == "absent" or float(v) == 1.0, (k, v)
    # gold counts reconcile with the dataset: 12 SP records in cells
    recs = workdir["records"]
    n_sp = sum(1 for r in recs if r.sp_type != SpType.NO_SP)
    assert n_sp == 12
    assert (out / "scores.tsv").exists()


def test_eval_missing_data(workdir, tmp_path, capsys):
    rc = main(["eval", "--checkpoint", str(workdir["ckpt"]),
               "--data", str(tmp_path / "gone.fasta"), "--out", str(tmp_path / "e")])
    assert rc == EXIT_BAD_INPUT
    assert "gone.fasta" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# screen


@pytest.fixture()
def screen_inputs(workdir, tmp_path):
    recs = workdir["records"]
    sps = [r for r in recs if r.sp_type != SpType.NO_SP]
    nos = [r for r in recs if r.sp_type == SpType.NO_SP]
    lines = []
    for r in sps[2:]:
        lines.append(f">{r.id}|{r.group.name}\n{r.sequence}\n")
    # a duplicate of one SP sequence under a new id
    lines.append(f">{sps[0].id}|{sps[0].group.name}\n{sps[0].sequence}\n")
    lines.append(f">dup_of_{sps[0].id}|{sps[0].group.name}\n{sps[0].sequence}\n")
    # one sequence that appears only on the known-SP exclusion list
    lines.append(f">known_{sps[1].id}|{sps[1].group.name}\n{sps[1].sequence}\n")
    for r in nos[:4]:
        lines.append(f">{r.id}|{r.group.name}\n{r.sequence}\n")
    # malformed: illegal residue
    lines.append(">bad1|EUKARYA\nMA*G\n")
    fasta = tmp_path / "screen.fasta"
    fasta.write_text("".join(lines))
    known = tmp_path / "known.fasta"
    known.write_text(f">k1\n{sps[1].sequence}\n")
    return {"fasta": fasta, "known": known, "n_sp": len(sps)}


def test_screen_tallies_reconcile(workdir, screen_inputs, tmp_path):
    out = tmp_path / "screen_out"
    rc = main(["screen", "--checkpoint", str(workdir["ckpt"]),
               "--fasta", str(screen_inputs["fasta"]),
               "--known-sps", str(screen_inputs["known"]),
               "--dedup", "--out", str(out)])
    assert rc == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    tsv_lines = (out / "candidates.tsv").read_text().splitlines()[1:]
    # independent recount from the written artifacts
    assert report["predicted_sp"] == len(tsv_lines)
    assert sum(report["per_type"].values()) == report["predicted_sp"]
    assert sum(report["per_group"].values()) == report["predicted_sp"]
    exc = report["exclusions"]
    assert report["predicted_sp_raw"] == (report["predicted_sp"]
                                          + exc["known_sp_matches"]
                                          + exc["duplicates"]
                                          + exc["unknown_group_drops"])
    assert exc["malformed"] == 1
    # the trained model calls its own SP training sequences confidently
    assert exc["duplicates"] == 1
    assert exc["known_sp_matches"] == 1
    # all SP sequences pass once except the known-listed one
    assert report["predicted_sp"] == screen_inputs["n_sp"] - 1
    # candidates.fasta mirrors the TSV
    fa_ids = [ln[1:] for ln in (out / "candidates.fasta").read_text().splitlines()
              if ln.startswith(">")]
    assert fa_ids == [ln.split("\t")[0] for ln in tsv_lines]
    # 12 SP entries (10 originals + duplicate + known copy) + 4 NO_SP pass
    # the streaming parser; the malformed record never reaches the counter
    assert report["total_input"] == screen_inputs["n_sp"] + 5


def test_screen_require_group_drops_unknown(workdir, screen_inputs, tmp_path):
    recs = workdir["records"]
    sps = [r for r in recs if r.sp_type != SpType.NO_SP]
    fasta = tmp_path / "mixed.fasta"
    fasta.write_text(
        f">{sps[0].id}|{sps[0].group.name}\n{sps[0].sequence}\n"
        f">{sps[1].id}\n{sps[1].sequence}\n")  # no group tail
    out = tmp_path / "sg"
    rc = main(["screen", "--checkpoint", str(workdir["ckpt"]),
               "--fasta", str(fasta), "--require-group", "--out", str(out)])
    assert rc == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["exclusions"]["unknown_group_drops"] == 1
    assert report["predicted_sp"] == 1


def test_screen_empty_input(workdir, tmp_path):
    empty = tmp_path / "none.fasta"
    empty.write_text("")
    out = tmp_path / "se"
    rc = main(["screen", "--checkpoint", str(workdir["ckpt"]),
               "--fasta", str(empty), "--out", str(out)])
    assert rc == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["total_input"] == 0 and report["predicted_sp"] == 0
    assert (out / "candidates.tsv").read_text().startswith("id\t")
