import csv
import math
import os
import subprocess
import sys
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trustee.bench import zipf
from trustee.bench.cli import main as bench_main
from trustee.bench.locks import LOCKS
from trustee.bench.workload import (
    CSV_FIELDS,
    MODES,
    UsageError,
    WorkloadConfig,
    emit_csv,
    issue_histogram,
    run_fetch_add,
    run_latency,
)


def exact_pmf(n, alpha):
    w = np.array([k ** -alpha for k in range(1, n + 1)])
    return w / w.sum()


# -- zipf -----------------------------------------------------------------------


def test_single_object_always_rank_one():
    assert set(zipf.ZipfSampler(1, 1.3, seed=4).draw(1000).tolist()) == {1}


def test_four_objects_match_exact_fractions():
    draws = zipf.ZipfSampler(4, 1.0, seed=11).draw(400_000)
    freq = np.bincount(draws, minlength=5)[1:] / len(draws)
    assert np.allclose(freq, [12 / 25, 6 / 25, 4 / 25, 3 / 25], atol=0.003)


def test_probabilities_helper_matches_formula():
    assert np.allclose(zipf.zipf_probabilities(7, 0.8), exact_pmf(7, 0.8))


@pytest.mark.parametrize("alpha", [0.7, 1.0, 1.5])
def test_rejection_sampler_matches_exact_pmf(monkeypatch, alpha):
    monkeypatch.setattr(zipf, "TABLE_LIMIT", 0)
    n = 40
    s = zipf.ZipfSampler(n, alpha, seed=3)
    assert s._cdf is None
    draws = s.draw(300_000)
    assert draws.min() >= 1 and draws.max() <= n
    obs = np.bincount(draws, minlength=n + 1)[1:]
    exp = exact_pmf(n, alpha) * len(draws)
    chi2 = float(((obs - exp) ** 2 / exp).sum())
    # 39 degrees of freedom: 99.9% quantile is about 72.1
    assert chi2 < 72.1


def test_huge_key_space_top_fraction():
    n = 10**8
    s = zipf.ZipfSampler(n, 1.0, seed=5)
    draws = s.draw(400_000)
    p1 = zipf.expected_top_fraction(n, 1.0)
    harmonic = math.log(n) + 0.5772156649015329
    assert abs(p1 - 1 / harmonic) < 1e-6
    assert abs((draws == 1).mean() - p1) < 0.005


@given(seed=st.integers(0, 2**32), stream=st.integers(0, 64))
@settings(max_examples=30, deadline=None)
def test_sequences_are_deterministic_per_seed_and_stream(seed, stream):
    a = zipf.object_sequence(100, 200, "zipf", 1.1, seed, stream)
    b = zipf.object_sequence(100, 200, "zipf", 1.1, seed, stream)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() < 100


def test_threads_get_different_streams():
    cfg = WorkloadConfig(threads=3, objects=1000, ops_per_thread=100, distribution="uniform")
    s = cfg.sequences()
    assert not np.array_equal(s[0], s[1]) and not np.array_equal(s[1], s[2])


def test_invalid_sampler_arguments():
    with pytest.raises(ValueError):
        zipf.ZipfSampler(0, 1.0)
    with pytest.raises(ValueError):
        zipf.ZipfSampler(10, 0.0)


# -- locks ----------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(LOCKS))
def test_locks_give_mutual_exclusion(name):
    lock = LOCKS[name]()
    state = {"n": 0, "inside": 0, "overlap": 0}

    def work():
        for _ in range(2000):
            with lock:
                state["inside"] += 1
                if state["inside"] != 1:
                    state["overlap"] += 1
                v = state["n"]
                if _ % 50 == 0:
                    os.sched_yield()  # invite a preemption inside the section
                state["n"] = v + 1
                state["inside"] -= 1

    ths = [threading.Thread(target=work) for _ in range(4)]
    for t in ths:
        t.start()
    for t in ths:
        t.join()
    assert state == {"n": 8000, "inside": 0, "overlap": 0}


def test_mcs_lock_hands_over_many_times():
    lock = LOCKS["mcs"]()
    locks = [LOCKS["mcs"]() for _ in range(3)]
    count = [0]

    def work():
        for i in range(500):
            with locks[i % 3]:  # several locks share the per-thread node pool
                pass
            with lock:
                count[0] += 1

    ths = [threading.Thread(target=work) for _ in range(3)]
    for t in ths:
        t.start()
    for t in ths:
        t.join()
    assert count[0] == 1500


# -- fetch-and-add ----------------------------------------------------------------


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("threads,objects,dist", [(1, 1, "uniform"), (3, 16, "zipf")])
def test_fetch_add_sums_are_exact(mode, threads, objects, dist):
    cfg = WorkloadConfig(threads=threads, objects=objects, distribution=dist, ops_per_thread=2000, mode=mode, seed=9)
    stats = run_fetch_add(cfg)
    assert stats.sum_ok
    assert stats.total_ops == threads * 2000
    assert stats.throughput > 0


@pytest.mark.parametrize("mode", ["trust", "async"])
def test_dedicated_trustees(mode):
    cfg = WorkloadConfig(threads=2, objects=8, ops_per_thread=1000, mode=mode, trustees="dedicated:2")
    stats = run_fetch_add(cfg)
    assert stats.sum_ok and stats.total_ops == 2000


def test_issue_histogram_is_the_bincount_oracle():
    cfg = WorkloadConfig(threads=2, objects=5, ops_per_thread=50, seed=1)
    seqs = cfg.sequences()
    want = np.zeros(5, dtype=np.int64)
    for s in seqs:
        for i in s:
            want[i] += 1
    assert np.array_equal(issue_histogram(cfg), want)


@pytest.mark.parametrize(
    "kw",
    [
        {"mode": "mutex", "trustees": "dedicated:2"},
        {"mode": "trust", "trustees": "dedicated:0"},
        {"mode": "trust", "trustees": "sometimes"},
        {"mode": "lockfree"},
        {"threads": 0},
        {"ops_per_thread": 0},
        {"distribution": "pareto"},
    ],
)
def test_bad_workloads_are_usage_errors(kw):
    with pytest.raises(UsageError):
        WorkloadConfig(**kw)


# -- latency ----------------------------------------------------------------------


def test_zero_load_issues_nothing():
    stats = run_latency(WorkloadConfig(threads=2, mode="trust"), 0)
    assert stats.empty and stats.total_ops == 0
    assert math.isnan(stats.mean_latency)


@pytest.mark.parametrize("mode", ["trust", "async", "mutex"])
def test_paced_run_reports_latency(mode):
    cfg = WorkloadConfig(threads=2, objects=4, ops_per_thread=300, mode=mode)
    stats = run_latency(cfg, offered_load=3000)
    assert stats.sum_ok and stats.total_ops == 600
    assert 0 < stats.mean_latency <= stats.p999_latency
    # the pacer never issues faster than asked
    assert stats.throughput < 3000 * 1.2


# -- csv and cli ------------------------------------------------------------------


def test_one_run_writes_header_and_one_row(tmp_path):
    path = tmp_path / "out.csv"
    emit_csv(run_fetch_add(WorkloadConfig(ops_per_thread=100)), path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].split(",") == CSV_FIELDS


def test_sweep_appends_rows_under_one_header(tmp_path):
    path = tmp_path / "sweep.csv"
    for k in range(10):
        emit_csv(run_fetch_add(WorkloadConfig(ops_per_thread=100, objects=k + 1, mode="mutex")), path)
    assert len(path.read_text().splitlines()) == 11
    emit_csv(run_fetch_add(WorkloadConfig(ops_per_thread=100)), path)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 11 and all(r["sum_ok"] == "True" for r in rows)
    assert [r["objects"] for r in rows[:10]] == [str(k + 1) for k in range(10)]


def test_cli_success_and_usage_error(tmp_path, capsys):
    path = tmp_path / "c.csv"
    assert bench_main(["fna", "--mode", "spin", "--threads", "2", "--ops", "500", "--csv", str(path)]) == 0
    assert "sum=ok" in capsys.readouterr().out
    assert bench_main(["fna", "--mode", "mutex", "--trustees", "dedicated:1"]) == 2
    assert "dedicated" in capsys.readouterr().err
    assert bench_main(["latency", "--load", "0"]) == 0
    assert "no operations issued" in capsys.readouterr().out
    assert len(path.read_text().splitlines()) == 2


def test_cli_entry_point_runs_as_a_module():
    out = subprocess.run(
        [sys.executable, "-m", "trustee.bench", "fna", "--mode", "async", "--ops", "200", "--objects", "3"],
        capture_output=True,
        text=True,
        timeout=120,
    )
    assert out.returncode == 0, out.stderr
    assert "mode=async" in out.stdout
