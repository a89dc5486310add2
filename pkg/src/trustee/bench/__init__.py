"""Fetch-and-add and latency benchmarks with in-repo lock baselines."""

from .locks import LOCKS, MCSLock, Mutex, SpinLock, cpu_relax
from .workload import (
    BenchStats,
    UsageError,
    WorkloadConfig,
    emit_csv,
    issue_histogram,
    run_fetch_add,
    run_latency,
)
from .zipf import ZipfSampler, object_sequence, zipf_probabilities

__all__ = [
    "LOCKS",
    "BenchStats",
    "MCSLock",
    "Mutex",
    "SpinLock",
    "UsageError",
    "WorkloadConfig",
    "ZipfSampler",
    "cpu_relax",
    "emit_csv",
    "issue_histogram",
    "object_sequence",
    "run_fetch_add",
    "run_latency",
    "zipf_probabilities",
]
