from __future__ import annotations

import subprocess
import sys

import pytest

from robust_transfer import harness
from robust_transfer.cli import build_parser, main

SUBCOMMANDS = ["train-source", "fine-tune", "sweep", "attack-eval", "influence", "report", "visualize"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    assert code == 0, out.err
    return out.out


def test_every_subcommand_is_registered():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert sorted(sub.choices) == sorted(SUBCOMMANDS)


def test_module_entry_point_prints_help():
    out = subprocess.run([sys.executable, "-m", "robust_transfer.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and all(name in out.stdout for name in SUBCOMMANDS)


def test_end_to_end_on_a_tiny_grid(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    base = ["--config", tiny_config, "--out", out]

    ckpt = run(capsys, "train-source", *base, "--adversary", "none").splitlines()[0]
    assert ckpt.endswith(".ckpt")

    clean, robust = run(capsys, "attack-eval", *base, "--checkpoint", ckpt, "--eps", 0.5,
                        "--pgd-steps", 2).splitlines()[1].split(",")[-2:]
    assert 0 <= float(robust) <= float(clean) <= 1

    tuned = run(capsys, "fine-tune", *base, "--checkpoint", ckpt, "--subset", 6, "--tag", "natural").split()
    manifest = next(p for p in tuned if p.endswith(".json"))
    checkpoint = next(p for p in tuned if p.endswith(".ckpt"))

    lines = run(capsys, "influence", *base, "--checkpoint", checkpoint, "--manifest", manifest,
                "--k", 1).splitlines()
    assert lines[0] == "model,metric,k,m,match_percent" and len(lines) >= 2

    results = run(capsys, "sweep", *base).strip()
    assert len(harness.read_records(results)) > 0

    delta, curves = run(capsys, "report", *base, "--model-a", "pgd2").split()
    assert delta.endswith(".csv") and curves.endswith(".csv")

    infl = run(capsys, "influence", *base).splitlines()
    assert {row.split(",")[0] for row in infl[1:]} == {"natural", "pgd2"}

    picture = run(capsys, "visualize", "--out", tmp_path / "vis.pgm", "--checkpoint", ckpt,
                  "--steps", 2, "--classes", 0, 1).strip()
    assert harness.read_pnm(picture).shape[0] == 1


def test_errors_exit_with_status_one(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("net.nonsense = 1\n")
    assert main(["sweep", "--config", str(bad)]) == 1
    assert "unknown configuration key" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["influence", "--checkpoint", "x.ckpt"])
