"""Monte Carlo experiments: trace-formula curves and convergence studies.

Samples are processed in fixed-size blocks. The block partition, not the
number of workers, determines every floating-point operation, and block
statistics are merged along a fixed pairwise tree, so reports are bitwise
reproducible for any worker count.
"""

from __future__ import annotations

import enum
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from driftlab.integrators import (
    DEFAULT_SETTINGS,
    NonConvergence,
    SchemeId,
    SolverSettings,
    check_scheme,
    step,
)
from driftlab.models import OSCILLATOR, SystemModel, predicted_casimir, predicted_energy
from driftlab.stochastic import DEFAULT_SEED, coarsen_increments, derive_seed, sample_increments

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 1024
TRACE_SAMPLES = 10_000
STRONG_SAMPLES = 1_000
WEAK_SAMPLES = 100_000


class Observable(enum.Enum):
    ENERGY = "energy"
    CASIMIR = "casimir"


class Mode(enum.Enum):
    STRONG = "strong"
    WEAK_M1 = "weak_m1"
    WEAK_M2 = "weak_m2"


@dataclass(frozen=True)
class TraceReport:
    time_grid: np.ndarray
    observable: Observable
    sample_mean: np.ndarray
    std_error: np.ndarray
    predicted: np.ndarray
    scheme: SchemeId
    samples: int


@dataclass(frozen=True)
class ConvergenceReport:
    """Errors against step size with a least-squares log-log slope.

    ``component_errors`` holds per-component errors (shape ``(len(step_sizes), n)``)
    for weak studies; ``errors`` is their maximum over components.
    """

    step_sizes: np.ndarray
    errors: np.ndarray
    fitted_slope: float
    mode: Mode
    scheme: SchemeId
    samples: int
    reference: str
    component_errors: Optional[np.ndarray] = None

    def component_slopes(self) -> np.ndarray:
        if self.component_errors is None:
            raise ValueError("report has no per-component errors")
        return np.array([fit_slope(self.step_sizes, col) for col in self.component_errors.T])


def fit_slope(hs, errs) -> float:
    """Least-squares slope of ``log(err)`` against ``log(h)``."""
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if hs.shape != errs.shape or hs.size < 2:
        raise ValueError("need at least two (h, error) pairs of equal length")
    if np.any(hs <= 0) or np.any(errs <= 0):
        raise ValueError("step sizes and errors must be positive")
    x = np.log(hs)
    y = np.log(errs)
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


# -- deterministic reductions ---------------------------------------------------


def pairwise_sum(values: np.ndarray) -> np.ndarray:
    """Sum along axis 0 by recursive halving; the tree depends only on the length."""
    n = values.shape[0]
    if n <= 8:
        total = values[0].copy()
        for k in range(1, n):
            total += values[k]
        return total
    half = n // 2
    return pairwise_sum(values[:half]) + pairwise_sum(values[half:])


@dataclass(frozen=True)
class _Moments:
    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, values: np.ndarray) -> "_Moments":
        n = values.shape[0]
        mean = pairwise_sum(values) / n
        return cls(n, mean, pairwise_sum((values - mean) ** 2))

    def merge(self, other: "_Moments") -> "_Moments":
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        return _Moments(n, mean, m2)

    def std_error(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.m2 / (self.count - 1) / self.count)


def _merge_tree(parts: Sequence[_Moments]) -> _Moments:
    if len(parts) == 1:
        return parts[0]
    half = len(parts) // 2
    return _merge_tree(parts[:half]).merge(_merge_tree(parts[half:]))


# -- execution ------------------------------------------------------------------


def resolve_workers(workers: Optional[int] = None) -> int:
    """Worker count: explicit value, else ``DRIFTLAB_WORKERS`` (0 means one per CPU)."""
    if workers is None:
        workers = int(os.environ.get("DRIFTLAB_WORKERS", "0") or 0)
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


def _block_ranges(samples: int, block_size: int) -> list[range]:
    if samples < 1:
        raise ValueError("samples must be at least 1")
    return [range(s, min(s + block_size, samples)) for s in range(0, samples, block_size)]


def _map_blocks(fn: Callable, blocks: list, workers: Optional[int]) -> list:
    workers = min(resolve_workers(workers), len(blocks))
    if workers == 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, blocks))


def _num_steps(t_end: float, h: float) -> int:
    if not (h > 0 and t_end > 0):
        raise ValueError("step size and final time must be positive")
    n = int(round(t_end / h))
    if n < 1 or abs(n * h - t_end) > 1e-9 * t_end:
        raise ValueError(f"step size {h} does not divide final time {t_end}")
    return n


def _integrate(
    model: SystemModel,
    scheme: SchemeId,
    h: float,
    half_increments: np.ndarray,
    x0: np.ndarray,
    settings: SolverSettings,
    first_sample: int,
    record: Optional[Callable] = None,
) -> np.ndarray:
    """Run a block of samples over all steps; ``half_increments`` is ``(b, 2N, d)``."""
    x = np.broadcast_to(x0, (half_increments.shape[0], model.dim)).copy()
    if record is not None:
        record(0, x)
    for k in range(half_increments.shape[1] // 2):
        try:
            x = step(
                scheme, model, x, h, half_increments[:, 2 * k], half_increments[:, 2 * k + 1], settings
            )
        except NonConvergence as exc:
            sample = first_sample + (exc.sample or 0)
            raise NonConvergence(exc.residual, exc.iterations, sample=sample, step=k) from exc
        if record is not None:
            record(k + 1, x)
    return x


# -- experiments ----------------------------------------------------------------


def run_trace(
    model: SystemModel,
    scheme,
    h: float,
    t_end: float,
    samples: int = TRACE_SAMPLES,
    seed: int = DEFAULT_SEED,
    observable=Observable.ENERGY,
    *,
    settings: SolverSettings = DEFAULT_SETTINGS,
    workers: Optional[int] = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> TraceReport:
    """Sample mean and standard error of the energy (or Casimir) along the time grid."""
    scheme = SchemeId.parse(scheme)
    observable = Observable(observable)
    check_scheme(scheme, model)
    if observable is Observable.CASIMIR:
        if model.casimir is None:
            raise ValueError(f"model {model.name!r} has no Casimir")
        func = model.casimir
    else:
        func = model.hamiltonian
    n_steps = _num_steps(t_end, h)
    x0 = model.initial_value

    def work(block: range) -> _Moments:
        inc = sample_increments(seed, block, model.wiener_dim, h / 2, 2 * n_steps)
        values = np.empty((len(block), n_steps + 1))

        def record(k, x):
            values[:, k] = func(x)

        _integrate(model, scheme, h, inc, x0, settings, block.start, record)
        return _Moments.of(values)

    stats = _merge_tree(_map_blocks(work, _block_ranges(samples, block_size), workers))
    grid = h * np.arange(n_steps + 1)
    if observable is Observable.CASIMIR:
        predicted = predicted_casimir(model, float(model.casimir(x0)), grid)
    else:
        predicted = predicted_energy(model, float(model.hamiltonian(x0)), grid)
    return TraceReport(grid, observable, stats.mean, stats.std_error(), predicted, scheme, samples)


def _default_reference(model: SystemModel) -> SchemeId:
    return SchemeId.STM if model.name == OSCILLATOR else SchemeId.DP


def _decreasing(h_list) -> np.ndarray:
    hs = np.array(sorted((float(h) for h in h_list), reverse=True))
    if hs.size < 2 or np.any(np.diff(hs) >= 0):
        raise ValueError("need at least two distinct step sizes")
    return hs


def run_strong(
    model: SystemModel,
    scheme,
    h_list,
    h_ref: float,
    t_end: float,
    samples: int = STRONG_SAMPLES,
    seed: int = DEFAULT_SEED,
    reference_scheme=None,
    *,
    settings: SolverSettings = DEFAULT_SETTINGS,
    workers: Optional[int] = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> ConvergenceReport:
    """Root-mean-square error at ``t_end`` against a fine solution on the same path.

    One path per sample is drawn at resolution ``h_ref / 2``; the reference uses
    it directly and each coarse run sees its blockwise sums.
    """
    scheme = SchemeId.parse(scheme)
    ref_scheme = SchemeId.parse(reference_scheme) if reference_scheme else _default_reference(model)
    check_scheme(scheme, model)
    check_scheme(ref_scheme, model)
    hs = _decreasing(h_list)
    if not h_ref < hs[-1]:
        raise ValueError("h_ref must be smaller than every step size")
    n_ref = _num_steps(t_end, h_ref)
    factors = []
    for h in hs:
        _num_steps(t_end, h)
        factor = int(round(h / h_ref))
        if abs(factor * h_ref - h) > 1e-12 * h:
            raise ValueError(f"step size {h} is not a multiple of h_ref {h_ref}")
        factors.append(factor)
    x0 = model.initial_value

    def work(block: range) -> _Moments:
        fine = sample_increments(seed, block, model.wiener_dim, h_ref / 2, 2 * n_ref)
        x_ref = _integrate(model, ref_scheme, h_ref, fine, x0, settings, block.start)
        sq = np.empty((len(block), len(hs)))
        for j, (h, factor) in enumerate(zip(hs, factors)):
            coarse = coarsen_increments(fine, factor, axis=1)
            x_h = _integrate(model, scheme, h, coarse, x0, settings, block.start)
            sq[:, j] = np.sum((x_h - x_ref) ** 2, axis=-1)
        return _Moments.of(sq)

    stats = _merge_tree(_map_blocks(work, _block_ranges(samples, block_size), workers))
    errors = np.sqrt(stats.mean)
    reference = f"{ref_scheme.value} at h_ref={h_ref:g} on the same Brownian path"
    return ConvergenceReport(hs, errors, fit_slope(hs, errors), Mode.STRONG, scheme, samples, reference)


def _convolution_control(model: SystemModel, h: float, n_half: int, t_end: float):
    """Coefficients and exact moments of ``flow(T) x0 + sum_j flow(T - s_j) sigma dW_j``.

    ``s_j`` are the half-step midpoints. The control has known first and second
    moments and tracks a convergent linear scheme pathwise, so subtracting it
    removes most of the sampling noise without biasing the estimate.
    """
    flow = model.linear_flow
    delta = h / 2
    coeffs = np.stack(
        [flow(t_end - (j + 0.5) * delta) @ model.noise.sigma_full for j in range(n_half)]
    )
    mean = flow(t_end) @ model.initial_value
    second = mean**2 + delta * np.sum(coeffs**2, axis=(0, 2))
    return coeffs, mean, second


def _endpoint_moments(
    model, scheme, h, t_end, samples, seed, settings, workers, block_size, antithetic,
    control_variate=False,
) -> tuple[np.ndarray, np.ndarray]:
    n_steps = _num_steps(t_end, h)
    x0 = model.initial_value
    if antithetic and samples % 2:
        raise ValueError("antithetic sampling needs an even sample count")
    if control_variate:
        if model.linear_flow is None:
            raise ValueError(f"control variate needs a linear model, not {model.name!r}")
        coeffs, cv_mean, cv_second = _convolution_control(model, h, 2 * n_steps, t_end)
    n_paths = samples // 2 if antithetic else samples
    # keep antithetic pairs inside one block
    size = max(1, block_size // 2) if antithetic else block_size

    def work(block: range) -> _Moments:
        inc = sample_increments(seed, block, model.wiener_dim, h / 2, 2 * n_steps)
        signs = (1.0, -1.0) if antithetic else (1.0,)
        rows = []
        for sign in signs:
            dw = inc if sign > 0 else -inc
            x = _integrate(model, scheme, h, dw, x0, settings, block.start)
            first, second = x, x**2
            if control_variate:
                z = cv_mean + np.einsum("bjk,jik->bi", dw, coeffs)
                first = first - z + cv_mean
                second = second - z**2 + cv_second
            rows.append(np.concatenate([first, second], axis=-1))
        return _Moments.of(np.concatenate(rows))

    stats = _merge_tree(_map_blocks(work, _block_ranges(n_paths, size), workers))
    return stats.mean[: model.dim], stats.mean[model.dim :]


def run_weak(
    model: SystemModel,
    scheme,
    h_list,
    t_end: float,
    samples: int = WEAK_SAMPLES,
    seed: int = DEFAULT_SEED,
    moments=(Mode.WEAK_M1, Mode.WEAK_M2),
    *,
    reference_h: Optional[float] = None,
    reference_scheme=None,
    antithetic: bool = False,
    control_variate: bool = False,
    settings: SolverSettings = DEFAULT_SETTINGS,
    workers: Optional[int] = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
) -> dict[Mode, ConvergenceReport]:
    """Errors of the first and/or second moments at ``t_end``.

    The target is the model's exact moments when it has them, otherwise a
    Monte Carlo run of ``reference_scheme`` (default DP) at ``reference_h``.
    Every step size gets its own independent family of paths.

    ``antithetic`` pairs each path with its negation. ``control_variate``
    (linear models only) subtracts a stochastic convolution with exactly known
    moments. Both keep the estimator unbiased and only shrink its variance,
    which is what lets weak order 2 show above the Monte Carlo noise floor.
    """
    scheme = SchemeId.parse(scheme)
    check_scheme(scheme, model)
    modes = [Mode(m) for m in moments]
    if not modes or Mode.STRONG in modes:
        raise ValueError("moments must be a non-empty subset of {weak_m1, weak_m2}")
    hs = _decreasing(h_list)
    common = dict(settings=settings, workers=workers, block_size=block_size, antithetic=antithetic)
    if control_variate and model.exact_moments is None:
        raise ValueError("control variate needs a model with exact moments")

    if model.exact_moments is not None:
        exact_m1, exact_m2 = model.exact_moments(model.initial_value, t_end)
        reference = "exact moments"
    elif reference_h is not None:
        ref_scheme = SchemeId.parse(reference_scheme) if reference_scheme else SchemeId.DP
        check_scheme(ref_scheme, model)
        exact_m1, exact_m2 = _endpoint_moments(
            model, ref_scheme, reference_h, t_end, samples, derive_seed(seed, 0), **common
        )
        reference = f"{ref_scheme.value} at h={reference_h:g}, {samples} samples"
    else:
        raise ValueError(f"model {model.name!r} has no exact moments; pass reference_h")

    err1 = np.empty((hs.size, model.dim))
    err2 = np.empty((hs.size, model.dim))
    for j, h in enumerate(hs):
        m1, m2 = _endpoint_moments(
            model, scheme, h, t_end, samples, derive_seed(seed, j + 1),
            control_variate=control_variate, **common,
        )
        err1[j] = np.abs(m1 - exact_m1)
        err2[j] = np.abs(m2 - exact_m2)
        logger.info("weak %s h=%g: m1 err %s, m2 err %s", scheme.value, h, err1[j], err2[j])

    reports = {}
    for mode in modes:
        comp = err1 if mode is Mode.WEAK_M1 else err2
        errors = comp.max(axis=1)
        reports[mode] = ConvergenceReport(
            hs, errors, fit_slope(hs, errors), mode, scheme, samples, reference, comp
        )
    return reports
