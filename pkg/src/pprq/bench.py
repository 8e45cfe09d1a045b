"""Benchmark and bulk-validation harness for the comparison subprotocol.

Runs both protocol parties in-process, measures mean wall time per comparison
across a sweep of domain sizes, checks every outcome against the plaintext
oracle, and reports the analytic per-run success probability
(1 - 2^(m-K))^m alongside the observed rate.  The report path writes a CSV
and, when requested, a timing figure next to it.
"""

from __future__ import annotations

import csv
import math
import os
import random
import time
from dataclasses import dataclass
from multiprocessing import Pool

from .paillier import decrypt, encrypt, generate_primes, keypair_from_primes
from .protocols import run_compare


@dataclass(frozen=True)
class BenchPoint:
    m: int
    trials: int
    correct: int
    mean_seconds: float
    analytic_success: float

    @property
    def correctness_rate(self) -> float:
        return self.correct / self.trials


def analytic_success_probability(m: int, bits: int) -> float:
    """Probability that all m extracted bits are unaffected by blind wraparound."""
    return (1.0 - 2.0 ** (m - bits)) ** m


def _run_trials(pk, sk, m: int, trials: int, rng: random.Random) -> tuple[int, float]:
    correct, elapsed = 0, 0.0
    for _ in range(trials):
        x, y = rng.getrandbits(m), rng.getrandbits(m)
        enc_x, enc_y = encrypt(pk, x, rng=rng), encrypt(pk, y, rng=rng)
        t0 = time.perf_counter()
        result = run_compare(pk, sk, enc_x, enc_y, m, rng_initiator=rng, rng_responder=rng)
        elapsed += time.perf_counter() - t0
        if decrypt(sk, result.c_enc) == (1 if x >= y else 0):
            correct += 1
    return correct, elapsed


def run_sweep(
    bits: int,
    m_list: list[int],
    trials: int,
    rng: random.Random | None = None,
) -> list[BenchPoint]:
    """Timed sweep over domain sizes with a single key; serial for clean means."""
    rng = rng or random.SystemRandom()
    p, q = generate_primes(bits, rng)
    pk, sk = keypair_from_primes(p, q)
    points = []
    for m in m_list:
        correct, elapsed = _run_trials(pk, sk, m, trials, rng)
        points.append(
            BenchPoint(m, trials, correct, elapsed / trials, analytic_success_probability(m, bits))
        )
    return points


def _correctness_worker(args) -> int:
    p, q, m, trials, seed = args
    pk, sk = keypair_from_primes(p, q)
    correct, _ = _run_trials(pk, sk, m, trials, random.Random(seed))
    return correct


def correctness_trials(
    bits: int,
    m: int,
    trials: int,
    seed: int | None = None,
    jobs: int | None = None,
) -> tuple[int, int]:
    """Count correct outcomes over many comparisons, fanning out across cores.

    Returns (correct, trials).  With one core (or jobs=1) this runs inline.
    """
    rng = random.Random(seed) if seed is not None else random.SystemRandom()
    p, q = generate_primes(bits, rng)
    jobs = jobs or os.cpu_count() or 1
    if jobs <= 1:
        pk, sk = keypair_from_primes(p, q)
        correct, _ = _run_trials(pk, sk, m, trials, rng)
        return correct, trials
    per = [trials // jobs] * jobs
    for i in range(trials % jobs):
        per[i] += 1
    tasks = [
        (p, q, m, count, rng.getrandbits(64)) for count in per if count > 0
    ]
    with Pool(processes=len(tasks)) as pool:
        return sum(pool.map(_correctness_worker, tasks)), trials


CSV_FIELDS = ("m", "trials", "correct", "correctness_rate", "mean_seconds", "analytic_success")


def write_csv(points: list[BenchPoint], fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(CSV_FIELDS)
    for pt in points:
        writer.writerow(
            (
                pt.m,
                pt.trials,
                pt.correct,
                f"{pt.correctness_rate:.6f}",
                f"{pt.mean_seconds:.6f}",
                repr(pt.analytic_success),
            )
        )


def render_figure(points: list[BenchPoint], path, bits: int) -> None:
    """Line plot of mean comparison time against the domain size."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ms = [pt.m for pt in points]
    times = [pt.mean_seconds for pt in points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ms, times, marker="o")
    ax.set_xlabel("domain size m (bits)")
    ax.set_ylabel("mean time per comparison (s)")
    ax.set_title(f"Encrypted comparison cost, {bits}-bit key")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def time_ratio(points: list[BenchPoint], m_low: int, m_high: int) -> float:
    """Mean-time ratio between two sweep points (scaling check)."""
    by_m = {pt.m: pt for pt in points}
    if math.isclose(by_m[m_low].mean_seconds, 0.0):
        raise ValueError("degenerate timing at the low point")
    return by_m[m_high].mean_seconds / by_m[m_low].mean_seconds
