"""Per-step latency of the score follower on a synthetic stream."""

import logging
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

from tensorcore.exceptions import ContractViolation
from tracking.services import ScoreTracker

logger = logging.getLogger(__name__)

MIN_STEPS = 100
TREND_WINDOW = 100


@dataclass
class BenchResult:
    latencies: np.ndarray  # seconds per measured step, warmup excluded
    warmup: int
    stride: int = 1

    @property
    def steps(self):
        return len(self.latencies)

    def summary(self):
        ms = self.latencies * 1000.0
        window = min(TREND_WINDOW, len(ms))
        mean = float(ms.mean())
        return {
            "steps": self.steps,
            "warmup": self.warmup,
            "stride": self.stride,
            "mean_ms": mean,
            "median_ms": float(np.median(ms)),
            "p95_ms": float(np.percentile(ms, 95)),
            "cv": float(ms.std() / mean) if mean > 0 else 0.0,
            "first_mean_ms": float(ms[:window].mean()),
            "last_mean_ms": float(ms[-window:].mean()),
        }


def run_benchmark(model, page, steps=1000, warmup=50, stride=1, seed=0):
    """
    Feed ``warmup + steps`` random standardized frames through one tracker
    and time every step after the warmup.
    """
    if steps < 1 or warmup < 0:
        raise ContractViolation(f"need at least one measured step and a non-negative warmup, got {steps}/{warmup}")
    if steps < MIN_STEPS:
        logger.warning(f"Only {steps} measured steps; latency statistics need at least {MIN_STEPS}")
    frames = np.random.default_rng(seed).standard_normal((warmup + steps, model.config.n_bins)).astype(np.float32)
    tracker = ScoreTracker(model, page, stride=stride)
    latencies = np.empty(steps)
    for index, frame in enumerate(frames):
        started = time.perf_counter()
        tracker.step(frame)
        if index >= warmup:
            latencies[index - warmup] = time.perf_counter() - started
    result = BenchResult(latencies, warmup, stride)
    summary = result.summary()
    logger.info(
        f"{steps} steps: mean {summary['mean_ms']:.2f} ms, median {summary['median_ms']:.2f} ms, "
        f"p95 {summary['p95_ms']:.2f} ms, cv {summary['cv']:.3f}"
    )
    return result


def write_latencies(result, path):
    pd.DataFrame({
        "step": np.arange(result.warmup, result.warmup + result.steps),
        "latency_ms": result.latencies * 1000.0,
    }).to_csv(path, index=False)


def write_summary(result, path):
    pd.DataFrame([result.summary()]).to_csv(path, index=False)
