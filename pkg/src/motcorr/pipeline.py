"""Batched simulation and detection shared by the CLI and the studies."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .detection import AnalyzerConfig, ClickStream, DetectionGeometry, detect
from .trajectory import EmissionRecord, simulate_atoms


def worker_count() -> int:
    """Worker processes; MOTCORR_WORKERS overrides the CPU count."""
    env = os.environ.get("MOTCORR_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"MOTCORR_WORKERS must be an integer, got {env!r}") from None
        return max(1, n)
    return max(1, os.cpu_count() or 1)


def _batch_seeds(seed: int, n_batches: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n_batches)]


def _run_batch(args):
    spec, env, motion, duration, n, seed, kw = args
    return simulate_atoms(spec, env, motion, duration, n_atoms=n, seed=seed, **kw)


def simulate_batched(spec, env, motion, duration: float, n_atoms: int, seed: int,
                     batch_size: int = 16, workers: int | None = None, **kw):
    """Simulate independent atoms in fixed-size batches.

    Batch composition and seeds depend only on (n_atoms, batch_size, seed), so
    the output is identical for any worker count. Returns per-atom records
    with globally numbered atom indices.
    """
    sizes = [batch_size] * (n_atoms // batch_size)
    if n_atoms % batch_size:
        sizes.append(n_atoms % batch_size)
    seeds = _batch_seeds(seed, len(sizes))
    jobs = [(spec, env, motion, duration, n, s, kw) for n, s in zip(sizes, seeds)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_batch, jobs))
    else:
        results = [_run_batch(j) for j in jobs]
    records, offset = [], 0
    for res in results:
        for rec in res.records:
            records.append(replace(rec, atom=rec.atom + offset))
        offset += len(res.records)
    return records, results


def detection_seed(seed: int, index: int = 0) -> int:
    return int(np.random.SeedSequence([seed, 7919, index]).generate_state(1)[0])


def detect_each(records, geom: DetectionGeometry, analyzer: AnalyzerConfig, seed: int) -> list[ClickStream]:
    """One click stream per record (independent detector noise per record)."""
    return [detect(r, geom, analyzer, detection_seed(seed, i)) for i, r in enumerate(records)]


def superpose(records, n: int) -> list[EmissionRecord]:
    """Group consecutive single-atom records into n-atom records (remainder dropped)."""
    out = []
    for i in range(0, len(records) - n + 1, n):
        out.append(EmissionRecord.merge(records[i:i + n]))
    return out
