"""Plot-level occupancy error and inference throughput."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import PlotFormatError
from .plotio import Plot

Predictor = Callable[[Plot], np.ndarray]

# published figures on the real dataset, shown next to local results
PUBLISHED_RESULTS = {
    "handcrafted": ((21.9, 20.7, 10.3), 17.6, 20.0),
    "direct": ((17.4, 13.5, 7.7), 12.8, 400.0),
    "ours": ((15.5, 13.6, 7.5), 12.2, 125.0),
}


@dataclass
class EvalReport:
    method: str
    errors: tuple[float, float, float]  # mean absolute error per stratum, percent
    average: float
    throughput: float  # plots per second
    n_plots: int
    threads: int = 1
    timings: list[float] = field(default_factory=list)

    def table(self) -> str:
        return format_table([self])

    def csv(self) -> str:
        return format_csv([self])


def evaluate(method: str, predict: Predictor, dataset: list[Plot], threads: int = 1) -> EvalReport:
    """Per-stratum mean absolute error (percent) of ``predict`` over labeled plots."""
    if not dataset:
        raise ValueError("empty evaluation set")
    for p in dataset:
        if p.labels is None:
            raise PlotFormatError(f"plot {p.plot_id} has no labels")
    truth = np.array([p.labels for p in dataset])
    t0 = time.perf_counter()
    pred = np.array([predict(p) for p in dataset])
    elapsed = time.perf_counter() - t0
    errors = np.abs(pred - truth).mean(axis=0) * 100.0
    return EvalReport(
        method=method,
        errors=tuple(float(e) for e in errors),
        average=float(errors.mean()),
        throughput=len(dataset) / max(elapsed, 1e-12),
        n_plots=len(dataset),
        threads=threads,
        timings=[elapsed],
    )


def benchmark_throughput(predict: Predictor, dataset: list[Plot], repetitions: int = 3) -> tuple[float, list[float]]:
    """Median plots/s over ``repetitions`` timed passes (inference only)."""
    if not dataset:
        raise ValueError("empty benchmark set")
    repetitions = max(int(repetitions), 1)
    rates = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for p in dataset:
            predict(p)
        rates.append(len(dataset) / max(time.perf_counter() - t0, 1e-12))
    return statistics.median(rates), rates


def format_table(reports: list[EvalReport], with_reference: bool = True) -> str:
    head = f"{'Method':<14}{'lower':>8}{'medium':>8}{'higher':>8}{'average':>9}{'plots/s':>10}"
    lines = ["Absolute error, %", head, "-" * len(head)]
    for r in reports:
        lo, me, hi = r.errors
        lines.append(f"{r.method:<14}{lo:>8.1f}{me:>8.1f}{hi:>8.1f}{r.average:>9.1f}{r.throughput:>10.1f}")
    if with_reference:
        lines.append("reference (real data, other hardware):")
        for name, ((lo, me, hi), avg, speed) in PUBLISHED_RESULTS.items():
            lines.append(f"  {name:<12}{lo:>8.1f}{me:>8.1f}{hi:>8.1f}{avg:>9.1f}{speed:>10.0f}")
    return "\n".join(lines) + "\n"


def format_csv(reports: list[EvalReport]) -> str:
    lines = ["method,err_lower,err_medium,err_higher,err_average,plots_per_s,n_plots,threads"]
    for r in reports:
        lines.append(
            f"{r.method},{r.errors[0]:.6f},{r.errors[1]:.6f},{r.errors[2]:.6f},{r.average:.6f},"
            f"{r.throughput:.6f},{r.n_plots},{r.threads}"
        )
    return "\n".join(lines) + "\n"
