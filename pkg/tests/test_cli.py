import csv
import io
import os

import pytest

from lazyckpt.cli import CSV_COLUMNS, CSV_SCHEMA_VERSION, EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main
from lazyckpt.consolidation import MANIFEST_NAME, Manifest

HERE = os.path.dirname(__file__)
SCENARIOS = os.path.join(HERE, os.pardir, "scenarios")
GOLDEN = os.path.join(HERE, "golden")


def scenario(name):
    return os.path.join(SCENARIOS, name)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def write(tmp_path, text, name="s.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_csv_schema_is_versioned():
    # bump CSV_SCHEMA_VERSION and regenerate tests/golden when the columns change
    assert CSV_SCHEMA_VERSION == 1
    assert CSV_COLUMNS == ("strategy", "model", "dp", "checkpoint_every", "blocked_s", "throughput_Bps",
                           "iter_s", "end_to_end_s")


def test_simulate_matches_golden(capsys):
    code, out, _ = run(capsys, "simulate", scenario("table1.ini"))
    assert code == EXIT_OK
    with open(os.path.join(GOLDEN, "table1.csv"), encoding="utf-8", newline="") as fp:
        assert out == fp.read()
    assert len(rows(out)) == 20


def test_simulate_strategy_filter(capsys):
    code, out, _ = run(capsys, "simulate", scenario("table1.ini"), "--strategy", "lazy")
    assert code == EXIT_OK
    lines = out.splitlines()
    assert len(lines) == 6 and all(l.startswith("lazy,") for l in lines[1:])


def test_simulate_csv_file_is_deterministic(capsys, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(capsys, "simulate", scenario("frequency.ini"), "--csv", str(a))[0] == EXIT_OK
    assert run(capsys, "simulate", scenario("frequency.ini"), "--csv", str(b))[0] == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("text", ["[run]\nspeed = 3\n", "[model]\npreset = 1T\n", "[strategy]\nname = x\n"])
def test_simulate_config_errors(capsys, tmp_path, text):
    code, _, err = run(capsys, "simulate", write(tmp_path, text))
    assert code == EXIT_CONFIG and "config error" in err


def test_simulate_missing_file(capsys, tmp_path):
    assert run(capsys, "simulate", str(tmp_path / "nope.ini"))[0] == EXIT_CONFIG


@pytest.mark.parametrize("verb", ["simulate", "bench", "verify", "defaults", "gc"])
def test_help(capsys, verb):
    with pytest.raises(SystemExit) as exc:
        main([verb, "--help"])
    assert exc.value.code == 0
    assert "usage:" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["simulate"], ["verify", "--trials", "many"]])
def test_misuse(capsys, argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_defaults_round_trip(capsys, tmp_path):
    code, out, _ = run(capsys, "defaults")
    assert code == EXIT_OK and "[run]" in out
    path = write(tmp_path, out)
    code, csv_out, _ = run(capsys, "simulate", path, "--strategy", "sync")
    assert code == EXIT_OK and len(rows(csv_out)) == 1


BENCH = "[run]\nstate_size = 8MB\niterations = 3\nt_forward = 0.01\nt_backward = 0.02\nt_update = 0.005\n"


def test_bench_commits_every_step(capsys, tmp_path):
    cfg = write(tmp_path, BENCH)
    code, out, _ = run(capsys, "bench", cfg, "--scratch", str(tmp_path / "scratch"), "--no-fsync")
    assert code == EXIT_OK
    assert "committed=1,2,3" in out and "restore-consistency: ok" in out
    root = next(l.split("=", 1)[1] for l in out.splitlines() if l.startswith("root="))
    assert Manifest.load(os.path.join(root, MANIFEST_NAME)).steps == [1, 2, 3]


def test_bench_kill_injection(capsys, tmp_path):
    cfg = write(tmp_path, BENCH)
    code, out, _ = run(capsys, "bench", cfg, "--scratch", str(tmp_path), "--no-fsync", "--kill-at-step", "2")
    assert code == EXIT_OK
    assert "latest_committed=1" in out and "crashed_at_step=2" in out


def test_bench_buffer_too_small(capsys, tmp_path):
    cfg = write(tmp_path, BENCH + "buffer_capacity = 1MiB\n")
    code, _, err = run(capsys, "bench", cfg, "--scratch", str(tmp_path), "--no-fsync")
    assert code == EXIT_CONFIG and "host buffer" in err


def test_bench_scratch_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("LZCKPT_SCRATCH", str(tmp_path / "env"))
    code, out, _ = run(capsys, "bench", write(tmp_path, BENCH), "--no-fsync")
    assert code == EXIT_OK and f"root={tmp_path / 'env'}" in out


def test_verify_passes(capsys, tmp_path):
    code, out, _ = run(capsys, "verify", "--trials", "10", "--seed", "3", "--scratch", str(tmp_path))
    assert code == EXIT_OK and "10/10" in out


def test_verify_is_reproducible(capsys, tmp_path):
    from lazyckpt.harness import run_verify

    a = run_verify(5, seed=11, scratch=str(tmp_path))
    b = run_verify(5, seed=11, scratch=str(tmp_path))
    assert [r.layout for r in a.results] == [r.layout for r in b.results]


def test_verify_negative_control_fails(capsys, tmp_path):
    code, out, err = run(capsys, "verify", "--trials", "5", "--skip-barrier", "--scratch", str(tmp_path))
    assert code == EXIT_FAIL and "TornSnapshot" in err


def test_gc(capsys, tmp_path):
    (tmp_path / "step-4").mkdir()
    (tmp_path / "keep").mkdir()
    code, out, _ = run(capsys, "gc", str(tmp_path), "--dry-run")
    assert code == EXIT_OK and "would remove step-4" in out and (tmp_path / "step-4").exists()
    code, out, _ = run(capsys, "gc", str(tmp_path))
    assert not (tmp_path / "step-4").exists() and (tmp_path / "keep").exists()


def test_gc_missing_root(capsys, tmp_path):
    assert run(capsys, "gc", str(tmp_path / "nope"))[0] == EXIT_CONFIG
