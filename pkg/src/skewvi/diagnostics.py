"""Verification oracles and posterior summaries: finite-difference gradient
checks, low-dimensional quadrature, Monte Carlo moment/skewness summaries,
and fit-comparison reports."""

from __future__ import annotations

import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from . import sparse_graph
from .families import NoiseDraw
from .optimizer import FitResult

_CHUNK = 1 << 17


@dataclass
class FdReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    worst: float
    worst_index: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.worst <= self.tol)


def fd_check_gradient(f, grad_f, point, step=1e-5, tol=1e-5) -> FdReport:
    """Compare an analytic gradient against central finite differences.

    Reports the worst per-coordinate relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|); never throws on
    failure, callers inspect .passed.
    """
    point = np.asarray(point, dtype=float)
    analytic = np.asarray(grad_f(point), dtype=float)
    numeric = np.empty_like(point)
    for j in range(len(point)):
        hi = point.copy()
        lo = point.copy()
        hi[j] += step
        lo[j] -= step
        numeric[j] = (f(hi) - f(lo)) / (2.0 * step)
    rel = np.abs(analytic - numeric) / np.maximum(
        1.0, np.maximum(np.abs(analytic), np.abs(numeric))
    )
    worst = int(np.argmax(rel))
    return FdReport(analytic, numeric, rel, float(rel[worst]), worst, tol)


def fd_directional(f, point, direction, step=1e-5):
    """Central finite difference of f along a direction."""
    point = np.asarray(point, dtype=float)
    direction = np.asarray(direction, dtype=float)
    return (f(point + step * direction) - f(point - step * direction)) / (2.0 * step)


def quadrature_normalization(log_density, dims, box, nodes=801) -> float:
    """Simpson integral of exp(log_density) over a box; targets 1 for a
    valid density whose bulk the box covers.

    log_density must accept a (dims, m) array of column points and return
    (m,) log values.
    """
    if dims > 2:
        raise ValueError("quadrature supports dims <= 2 only")
    box = np.asarray(box, dtype=float).reshape(dims, 2)
    grids = [np.linspace(lo, hi, nodes) for lo, hi in box]
    if dims == 1:
        vals = np.exp(log_density(grids[0][None, :]))
        return float(simpson(vals, x=grids[0]))
    gx, gy = np.meshgrid(grids[0], grids[1], indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()])
    vals = np.exp(log_density(pts)).reshape(nodes, nodes)
    inner = simpson(vals, x=grids[1], axis=1)
    return float(simpson(inner, x=grids[0]))


def box_from_samples(draws, pad_sds=4.0):
    """Auto-sized quadrature box: per-coordinate min/max padded by robust sds.

    draws: (dims, m) sampler output.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    q25, q75 = np.percentile(draws, [25, 75], axis=1)
    robust_sd = np.maximum((q75 - q25) / 1.349, 1e-3)
    lo = draws.min(axis=1) - pad_sds * robust_sd
    hi = draws.max(axis=1) + pad_sds * robust_sd
    return np.stack([lo, hi], axis=1)


@dataclass
class SummaryTable:
    """Per-coordinate (name, mean, sd, skewness) estimated from S draws."""

    names: list
    mean: np.ndarray
    sd: np.ndarray
    skewness: np.ndarray
    sample_size: int

    def to_csv(self) -> str:
        lines = ["name,mean,sd,skewness"]
        for i, name in enumerate(self.names):
            lines.append(
                f"{name},{float(self.mean[i])!r},{float(self.sd[i])!r},"
                f"{float(self.skewness[i])!r}"
            )
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str) -> "SummaryTable":
        rows = [r.split(",") for r in text.strip().splitlines()[1:]]
        return SummaryTable(
            names=[r[0] for r in rows],
            mean=np.array([float(r[1]) for r in rows]),
            sd=np.array([float(r[2]) for r in rows]),
            skewness=np.array([float(r[3]) for r in rows]),
            sample_size=-1,
        )


def summarize(family, params, sample_size, seed=0, names=None) -> SummaryTable:
    """Monte Carlo mean/sd/skewness of a fitted family, per coordinate.

    Skewness is the biased moment ratio m3 / m2^(3/2); sample sizes are
    large enough that the small-sample correction is immaterial.
    """
    if sample_size < 1000:
        raise ValueError("sample_size must be at least 1000")
    p = params.p
    rng = np.random.default_rng(seed)
    s1 = np.zeros(p)
    s2 = np.zeros(p)
    s3 = np.zeros(p)
    done = 0
    while done < sample_size:
        m = min(_CHUNK, sample_size - done)
        theta = _sample_batch(family, params, rng, m)
        s1 += theta.sum(axis=1)
        s2 += (theta**2).sum(axis=1)
        s3 += (theta**3).sum(axis=1)
        done += m
    mean = s1 / sample_size
    var = s2 / sample_size - mean**2
    m3 = s3 / sample_size - 3.0 * mean * var - mean**3
    sd = np.sqrt(var)
    skew = m3 / var**1.5
    if names is None:
        names = [f"theta_{i}" for i in range(p)]
    return SummaryTable(list(names), mean, sd, skew, sample_size)


def _sample_batch(family, params, rng, m):
    return family.sample(params, NoiseDraw.draw(rng, params.p, m))


@dataclass
class ComparisonReport:
    """Side-by-side report over fits of one model: final smoothed ELBO per
    method and per-coordinate summary deltas against the first fit."""

    elbo_rows: list  # (family_name, final_moving_average)
    delta_rows: list  # (pair_label, coordinate, d_mean, d_sd, d_skewness)

    def to_csv(self) -> str:
        lines = ["section,label,coordinate,mean_delta,sd_delta,skewness_delta,final_elbo"]
        for name, elbo in self.elbo_rows:
            lines.append(f"elbo,{name},,,,,{float(elbo)!r}")
        for label, coord, dm, ds, dk in self.delta_rows:
            lines.append(
                f"delta,{label},{coord},{float(dm)!r},{float(ds)!r},{float(dk)!r},"
            )
        return "\n".join(lines) + "\n"


def compare_fits(fits, families=None, sample_size=100000, seed=0) -> ComparisonReport:
    """Compare fitted approximations that share one target model.

    fits: list of FitResult.  families: matching Family objects (resolved
    from fit names when omitted).
    """
    if len(fits) < 2:
        raise ValueError("need at least two fits to compare")
    hashes = {f.model_hash for f in fits}
    if len(hashes) != 1:
        raise ValueError("fits do not share one model")
    if families is None:
        from .families import get_family
        families = [get_family(f.family_name) for f in fits]
    tables = [
        summarize(fam, fit.params, sample_size, seed=seed)
        for fam, fit in zip(families, fits)
    ]
    elbo_rows = [(f.family_name, f.trace[-1][2]) for f in fits]
    base = tables[0]
    delta_rows = []
    for fit, table in zip(fits[1:], tables[1:]):
        label = f"{fits[0].family_name}_vs_{fit.family_name}"
        for i in range(len(base.names)):
            delta_rows.append((
                label, i,
                table.mean[i] - base.mean[i],
                table.sd[i] - base.sd[i],
                table.skewness[i] - base.skewness[i],
            ))
    return ComparisonReport(elbo_rows, delta_rows)


class AllocationReport:
    def __init__(self):
        self.dense_materializations = 0
        self.peak_bytes = 0


@contextmanager
def allocation_accounting():
    """Track dense p x p materializations and the peak traced allocation
    over a block; used to assert the sparse path stays sparse."""
    report = AllocationReport()
    before = sparse_graph.counter("dense_materializations")
    tracemalloc.start()
    try:
        yield report
    finally:
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        report.peak_bytes = peak
        report.dense_materializations = (
            sparse_graph.counter("dense_materializations") - before
        )
