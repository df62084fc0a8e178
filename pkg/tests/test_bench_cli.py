import csv
import json

import pytest

from detapp import acceptance
from detapp.acceptance import Check
from detapp.bench import BenchConfig, bench_workers, run_benchmark, write_result
from detapp.cli import main
from detapp.errors import ConfigInvalid, EmptyList

SMALL_GEN = {"C": 3, "K": 4, "queries_per_class": 5, "d": 6, "H": 6, "W": 6}


def small_cfg(**kw):
    return BenchConfig(**{"gen": SMALL_GEN, "adapt": {"eta": 5}, "episodes": 2, "ratios": [0.0, 0.25, 0.5], **kw})


def test_one_row_per_ratio(tmp_path):
    res = run_benchmark(small_cfg(), workers=1)
    summary = write_result(res, tmp_path, write_csv=True)
    assert [r["ratio"] for r in summary["rows"]] == [0.0, 0.25, 0.5]
    assert len(res.episodes) == 6
    assert all(0.0 <= e["deta_acc"] <= 1.0 for e in res.episodes)
    assert [(e["ratio"], e["seed"]) for e in res.episodes] == sorted((e["ratio"], e["seed"]) for e in res.episodes)
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert len(rows) == 3
    assert len((tmp_path / "queries.jsonl").read_text().splitlines()) == len(res.queries)
    scores = res.scores_by_noise(0.5)
    assert scores["ood"] and scores["id"]
    assert "timings" not in json.loads((tmp_path / "summary.json").read_text())
    assert len(json.loads((tmp_path / "timings.json").read_text())["adapt"]) == 6


def test_zero_episodes():
    with pytest.raises(EmptyList):
        run_benchmark(small_cfg(episodes=0), workers=1)


def test_bad_config():
    with pytest.raises(ConfigInvalid):
        BenchConfig.from_dict({"episode": 3})
    with pytest.raises(ConfigInvalid):
        run_benchmark({"ratios": [1.2]})


def test_same_summary_from_pool_and_serial(tmp_path):
    write_result(run_benchmark(small_cfg(), workers=1), tmp_path / "a")
    write_result(run_benchmark(small_cfg(), workers=2), tmp_path / "b")
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("DETA_BENCH_THREADS", "1")
    assert bench_workers() == 1
    monkeypatch.setenv("DETA_BENCH_THREADS", "many")
    with pytest.raises(ConfigInvalid):
        bench_workers()


def test_cli_pipeline(tmp_path, capsys):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({**SMALL_GEN, "seed": 4}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "eps"), "--episodes", "2"]) == 0
    ep = tmp_path / "eps" / "episode_0001.json"
    assert json.loads(ep.read_text())["meta"]["seed"] == 5
    acfg = tmp_path / "adapt.json"
    acfg.write_text(json.dumps({"eta": 3}))
    model = tmp_path / "m.json"
    assert main(["adapt", "--episode", str(ep), "--config", str(acfg), "--out", str(model),
                 "--dump-weights", str(tmp_path / "w.jsonl")]) == 0
    for head in ("localncc", "ncc", "mcm"):
        out = tmp_path / f"{head}.jsonl"
        assert main(["eval", "--model", str(model), "--episode", str(ep), "--head", head, "--out", str(out)]) == 0
        lines = [json.loads(x) for x in out.read_text().splitlines()]
        assert set(lines[0]) == {"query_id", "pred", "true", "noise", "score"}
        assert len(lines) == len(json.loads(ep.read_text())["query"])


def test_cli_friedman(tmp_path, capsys):
    f = tmp_path / "r.csv"
    f.write_text(",".join(map(str, acceptance.RANKS_A)) + "\n")
    assert main(["friedman", "--ranks", str(f), "--n", "10"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["chi2"] == pytest.approx(87.396, abs=0.01)
    m = tmp_path / "m.csv"
    m.write_text("1,2,3\n1,3,2\n")
    assert main(["friedman", "--ranks", str(m)]) == 0
    assert json.loads(capsys.readouterr().out) == {"chi2": 3.0, "ff": 3.0}


def test_cli_errors(tmp_path, capsys):
    assert main(["friedman", "--ranks", str(tmp_path / "missing.csv"), "--n", "3"]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("1,1,1\n")
    assert main(["friedman", "--ranks", str(bad), "--n", "3"]) == 2


def test_cli_bench(tmp_path, capsys):
    cfg = tmp_path / "b.json"
    cfg.write_text(json.dumps(small_cfg(episodes=1).to_dict()))
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "o"), "--csv"]) == 0
    assert (tmp_path / "o" / "summary.csv").exists()


@pytest.mark.parametrize("outcome,code", [(True, 0), (False, 1)])
def test_bench_check_exit_code(monkeypatch, capsys, outcome, code):
    fake = (lambda: Check(1, "ok", True, ""), lambda: Check(2, "maybe", outcome, ""))
    monkeypatch.setattr(acceptance, "ALL_CHECKS", fake)
    assert main(["bench", "--check"]) == code
