from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from fedmgp import cli
from fedmgp import harness as H
from fedmgp import metrics as MT
from fedmgp import server as S

from conftest import small_config

ARTIFACT_FILES = ("manifest.txt", "backbone.bin", "accuracy.csv", "ledgers.txt", "traces.txt",
                  "contracts.txt", "retention.txt", "accounting.txt", "summary.txt", "status.txt",
                  "global_pool.bin", "client0_local_pool.bin")


def _run(cfg, out):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return H.run_experiment(cfg, out)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    return _run(small_config(seeds=(42, 7)), tmp_path_factory.mktemp("small"))


def test_config_ini_roundtrip_and_overrides():
    cfg = small_config(attached_blocks=(1,), lambda1=0.25)
    text = cfg.to_ini()
    assert "[scenario]" in text and "[fusion]" in text
    back = H.ExperimentConfig.from_ini(text)
    assert back == cfg
    assert H.ExperimentConfig.from_ini(text, seeds=(5,)).seeds == (5,)


def test_config_errors_name_the_key():
    with pytest.raises(H.ConfigError, match=r"run\.bogus: unknown key"):
        H.ExperimentConfig.from_ini("[run]\nbogus = 1\n")
    with pytest.raises(H.ConfigError, match=r"prompts\.clients: belongs in section \[scenario\]"):
        H.ExperimentConfig.from_ini("[prompts]\nclients = 3\n")
    with pytest.raises(H.ConfigError, match="^top_n"):
        H.ExperimentConfig(top_n=20).validate()
    with pytest.raises(H.ConfigError, match="^pool_size"):
        H.ExperimentConfig.from_ini("[prompts]\npool_size = x\n")
    with pytest.raises(H.ConfigError, match="^ablation"):
        H.ExperimentConfig(ablation="w/o everything").validate()


def test_run_writes_every_artifact(small_run):
    assert small_run.complete
    root = small_run.directory
    assert (root / "config.ini").exists() and (root / "status.txt").read_text() == "complete\n"
    for s in small_run.seeds:
        for name in ARTIFACT_FILES:
            assert (s.directory / name).exists(), name


def test_contracts_hold_in_small_run(small_run):
    for s in small_run.seeds:
        lines = (s.directory / "contracts.txt").read_text().splitlines()
        assert "backbone unchanged = 1" in lines
        assert all(l.endswith("= 1") for l in lines if "unchanged =" in l)


def test_ledgers_parse_back(small_run):
    s = small_run.seeds[0]
    blocks = [b for b in (s.directory / "ledgers.txt").read_text().split("round = ") if b]
    ledgers = [S.RoundLedger.from_text("round = " + b) for b in blocks]
    assert [l.round for l in ledgers] == [0, 1] and all(l.complete for l in ledgers)
    assert ledgers == s.ledgers


def test_seed_average_is_arithmetic_mean(small_run):
    summ = H.parse_summary((small_run.directory / "summary.txt").read_text())
    for k, v in summ.items():
        vals = [s.summary[k] for s in small_run.seeds]
        want = math.fsum(vals) / len(vals)
        assert (math.isnan(v) and math.isnan(want)) or abs(v - want) <= 1e-12


def test_report_matches_recomputation(small_run):
    rep = H.report(small_run.directory)
    assert not rep["partial"]
    table = (small_run.directory / "report" / "table.txt").read_text().splitlines()
    header = [l for l in table if l.startswith("seed,")][0]
    assert header == "seed,task0,task1,Average"
    for s in small_run.seeds:
        m = MT.AccuracyMatrix.load(s.directory / "accuracy.csv")
        final = max(m.rounds())
        want = MT.average_task_accuracy(m, final, "global")
        row = [l for l in table if l.startswith(f"seed_{s.seed},")][0].split(",")
        assert row[-1] == f"{100 * want['average']:.2f}"
        for r in m.rounds():
            assert rep["series"][(f"seed_{s.seed}", r)] == (MT.kr_or_nan(MT.kr_temporal, m, r),
                                                          MT.kr_or_nan(MT.kr_spatial, m, r))
        assert rep["series"][(f"seed_{s.seed}", 0)][0] == 1.0


def test_report_flags_partial(small_run, tmp_path):
    import shutil
    dst = tmp_path / "copy"
    shutil.copytree(small_run.directory, dst)
    (dst / "seed_7" / "status.txt").write_text("incomplete\n")
    rep = H.report(dst)
    assert rep["partial"] and "PARTIAL" in rep["text"]


def test_end_to_end_determinism_small(small_run, tmp_path):
    H._BACKBONES.clear()
    again = _run(small_config(seeds=(42, 7)), tmp_path / "again")
    H.report(again.directory)
    H.report(small_run.directory)
    for s0, s1 in zip(small_run.seeds, again.seeds):
        for name in ARTIFACT_FILES:
            assert (s0.directory / name).read_bytes() == (s1.directory / name).read_bytes(), name
    for name in ("table.txt", "kr_series.csv", "accounting.txt"):
        assert (small_run.directory / "report" / name).read_bytes() == (again.directory / "report" / name).read_bytes()


def test_ablation_isolation(tmp_path):
    """Exactly one stage differs from the full method per flag."""
    stages = {}
    for abl in H.ABLATIONS:
        cfg = small_config(ablation=abl, seeds=(3,))
        art = _run(cfg, tmp_path / abl.replace("/", ""))
        assert art.complete
        led = art.seeds[0].ledgers[0]
        traces = (art.seeds[0].directory / "traces.txt").read_text()
        stages[abl] = ("phase global" in traces, "phase local" in traces, led.method)
    full = stages["full"]
    assert full == (True, True, "selective")
    assert stages["w/oGP"] == (False, True, "none")
    assert stages["w/oLP"] == (True, False, "selective")
    assert stages["w/oSPF"] == (True, True, "fedavg")
    for abl in ("w/oGP", "w/oLP", "w/oSPF"):
        diffs = [a != b for a, b in zip(stages[abl], full)]
        # w/oGP also drops fusion since there is no global pool to fuse
        assert sum(diffs) == (2 if abl == "w/oGP" else 1)


def test_asynchronous_mode_runs(tmp_path):
    cfg = small_config(mode="asynchronous", classes=8, private_per_client=2, classes_per_task=2, seeds=(1,))
    assert _run(cfg, tmp_path / "async").complete


def test_evaluation_only_run(tmp_path):
    art = _run(small_config(rounds_per_task=0, seeds=(1,)), tmp_path / "eval")
    assert art.complete and art.seeds[0].ledgers == []
    assert art.seeds[0].matrix.rounds() == [0, 1]


def test_failure_is_persisted_and_flagged(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("injected")
    monkeypatch.setattr(H.S.Server, "aggregate", boom)
    art = _run(small_config(seeds=(1,)), tmp_path / "fail")
    s = art.seeds[0]
    assert not art.complete and "injected" in s.error
    assert (s.directory / "status.txt").read_text() == "incomplete\n" and (s.directory / "error.txt").exists()


def test_sweep_grid(tmp_path):
    grid = H.sweep(small_config(seeds=(1,)), "lambda1", ["0.0", "1.0"], tmp_path)
    assert set(grid) == {0.0, 1.0}
    lines = (tmp_path / "sweep_lambda1" / "grid.csv").read_text().splitlines()
    assert lines[0].startswith("value,") and len(lines) == 3
    with pytest.raises(H.ConfigError):
        H.sweep(small_config(), "depth", [1])


# --------------------------------------------------------------------- cli

def _write_cfg(tmp_path, **kw):
    p = tmp_path / "cfg.ini"
    p.write_text(small_config(**kw).to_ini())
    return p


def test_cli_run_report_partition(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(cfg), "--seed", "5", "--ablation", "w/oSPF", "--out", str(out)]) == 0
    assert (out / "seed_5" / "accuracy.csv").exists()
    assert "ablation = w/oSPF" in (out / "config.ini").read_text()
    assert cli.main(["report", "--artifact", str(out)]) == 0
    assert "Average" in capsys.readouterr().out
    assert cli.main(["partition", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "m.txt")]) == 0
    assert (tmp_path / "m.txt").read_text().startswith("mode = synchronous")


def test_cli_sweep(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    assert cli.main(["sweep", "--config", str(cfg), "--seed", "1", "--axis", "N", "--values", "1,2",
                     "--out", str(tmp_path / "sw")]) == 0
    assert capsys.readouterr().out.startswith("value,")


def test_cli_verify(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.strip().endswith("0 failed")


def test_cli_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[prompts]\ntop_n = 0\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "top_n" in capsys.readouterr().err
    assert cli.main(["report", "--artifact", str(tmp_path / "missing")]) == 2
