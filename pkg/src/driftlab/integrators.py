"""One-step maps for additive-noise Poisson systems.

Every stepper accepts a single state ``(n,)`` or a batch ``(samples, n)``
together with Wiener increments of matching leading shape. Schemes that work
on whole steps consume the sum of the two half-step increments, so a single
half-step-resolution path can drive any scheme.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from driftlab.models import OSCILLATOR, SystemModel, matvec, rotation

Array = np.ndarray


class SchemeId(enum.Enum):
    DP = "dp"
    EM = "em"
    BEM = "bem"
    STM = "stm"
    SPLIT_SYMPLECTIC_EULER = "symp"
    SPLIT_STORMER_VERLET = "stormer_verlet"
    SPLIT_EULER = "split_euler"
    SPLIT_HEUN = "split_heun"

    @classmethod
    def parse(cls, value) -> "SchemeId":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown scheme {value!r}; expected one of {names}") from None


class SplitVariant(enum.Enum):
    SYMPLECTIC_EULER = "symplectic_euler"
    STORMER_VERLET = "stormer_verlet"
    EULER = "euler"
    HEUN = "heun"


_SPLIT_SCHEMES = {
    SchemeId.SPLIT_SYMPLECTIC_EULER: SplitVariant.SYMPLECTIC_EULER,
    SchemeId.SPLIT_STORMER_VERLET: SplitVariant.STORMER_VERLET,
    SchemeId.SPLIT_EULER: SplitVariant.EULER,
    SchemeId.SPLIT_HEUN: SplitVariant.HEUN,
}


@dataclass(frozen=True)
class SolverSettings:
    fp_tolerance: float = 1e-12
    fp_max_iters: int = 100
    quadrature_nodes: int = 3

    def __post_init__(self):
        if not self.fp_tolerance > 0:
            raise ValueError("fp_tolerance must be positive")
        if self.fp_max_iters < 1:
            raise ValueError("fp_max_iters must be at least 1")
        if self.quadrature_nodes not in (1, 2, 3, 4, 5):
            raise ValueError("quadrature_nodes must be between 1 and 5")


DEFAULT_SETTINGS = SolverSettings()


@dataclass(frozen=True)
class StepDiagnostics:
    """Fixed-point statistics of one step; for a batch, the worst sample."""

    fp_iterations: int
    fp_residual: float
    converged: bool


class NonConvergence(RuntimeError):
    """Fixed-point iteration exhausted its budget, usually because ``h`` is too large."""

    def __init__(self, residual: float, iterations: int, sample=None, step=None):
        self.residual = residual
        self.iterations = iterations
        self.sample = sample
        self.step = step
        where = ""
        if sample is not None:
            where += f" at sample {sample}"
        if step is not None:
            where += f" step {step}"
        super().__init__(
            f"fixed-point iteration did not converge{where}: "
            f"residual {residual:.3e} after {iterations} iterations"
        )


@lru_cache(maxsize=None)
def gauss_legendre_unit(nodes: int) -> tuple[Array, Array]:
    """Gauss-Legendre nodes and weights mapped to ``[0, 1]``."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def averaged_gradient(model: SystemModel, y1, y2, settings: SolverSettings = DEFAULT_SETTINGS):
    """``int_0^1 grad H(y1 + s (y2 - y1)) ds``, closed form when the model has one."""
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    if model.discrete_gradient is not None:
        return model.discrete_gradient(y1, y2)
    return quadrature_gradient(model.grad_h, y1, y2, settings.quadrature_nodes)


def quadrature_gradient(grad, y1: Array, y2: Array, nodes: int = 3) -> Array:
    theta, weights = gauss_legendre_unit(nodes)
    diff = y2 - y1
    total = weights[0] * grad(y1 + theta[0] * diff)
    for t, w in zip(theta[1:], weights[1:]):
        total = total + w * grad(y1 + t * diff)
    return total


def _solve_fixed_point(update, y0: Array, settings: SolverSettings):
    """Iterate ``y <- update(y)`` per sample until the scaled max-norm change is small.

    A sample stops being updated once it has converged, so its result does not
    depend on which other samples share the batch.
    """
    y = y0
    batch_shape = y.shape[:-1]
    active = np.ones(batch_shape, dtype=bool)
    residual = np.full(batch_shape, np.inf)
    iterations = 0
    for iterations in range(1, settings.fp_max_iters + 1):
        new = update(y)
        res = np.max(np.abs(new - y), axis=-1) / (1.0 + np.max(np.abs(new), axis=-1))
        y = np.where(active[..., None], new, y)
        residual = np.where(active, res, residual)
        active = active & (res > settings.fp_tolerance)
        if not active.any():
            break
    worst = float(np.max(residual))
    converged = not active.any()
    diag = StepDiagnostics(iterations, worst, converged)
    if not converged:
        sample = int(np.argmax(residual)) if residual.ndim else None
        raise NonConvergence(worst, iterations, sample=sample)
    return y, diag


def ep_midstep(model: SystemModel, y1, h: float, settings: SolverSettings = DEFAULT_SETTINGS):
    """Energy-preserving midstep ``y2 = y1 + h B((y1+y2)/2) DG(y1, y2)``.

    Solved by fixed-point iteration from an explicit Euler predictor. Returns
    ``(y2, StepDiagnostics)``; raises :class:`NonConvergence` if the iteration
    budget runs out.
    """
    y1 = np.asarray(y1, dtype=float)

    def update(y2):
        mid = 0.5 * (y1 + y2)
        return y1 + h * matvec(model.poisson(mid), averaged_gradient(model, y1, y2, settings))

    predictor = y1 + h * model.vector_field(y1)
    return _solve_fixed_point(update, predictor, settings)


def dp_step(
    model: SystemModel,
    x,
    h: float,
    dw_first_half,
    dw_second_half,
    settings: SolverSettings = DEFAULT_SETTINGS,
):
    """Drift-preserving step: half noise kick, energy-preserving midstep, half kick."""
    y1 = np.asarray(x, dtype=float) + model.noise.kick(dw_first_half)
    y2, diag = ep_midstep(model, y1, h, settings)
    return y2 + model.noise.kick(dw_second_half), diag


def em_step(model: SystemModel, x, h: float, dw_full):
    x = np.asarray(x, dtype=float)
    return x + h * model.vector_field(x) + model.noise.kick(dw_full)


def bem_step(model: SystemModel, x, h: float, dw_full, settings: SolverSettings = DEFAULT_SETTINGS):
    """Backward Euler-Maruyama, drift-implicit; the same fixed-point policy as the midstep."""
    x = np.asarray(x, dtype=float)
    base = x + model.noise.kick(dw_full)

    def update(y):
        return base + h * model.vector_field(y)

    return _solve_fixed_point(update, base + h * model.vector_field(x), settings)


def stm_step(model: SystemModel, x, h: float, dw_full):
    """Trigonometric step for the oscillator: noise kick, then the exact rotation."""
    if model.name != OSCILLATOR:
        raise ValueError(f"STM is only defined for the oscillator, not {model.name!r}")
    kicked = np.asarray(x, dtype=float) + model.noise.kick(dw_full)
    rot = rotation(h)
    return matvec(np.broadcast_to(rot, kicked.shape[:-1] + (2, 2)), kicked)


def _split_pq(model: SystemModel, x: Array):
    m = model.dim // 2
    return x[..., :m], x[..., m:]


def _force(model: SystemModel, p: Array, q: Array) -> Array:
    # -dH/dq, which for a separable H depends on q only
    m = q.shape[-1]
    return -model.grad_h(np.concatenate([p, q], axis=-1))[..., m:]


def _velocity(model: SystemModel, p: Array, q: Array) -> Array:
    m = p.shape[-1]
    return model.grad_h(np.concatenate([p, q], axis=-1))[..., :m]


def deterministic_step(model: SystemModel, x: Array, h: float, variant: SplitVariant) -> Array:
    """One step of a classical integrator for ``x' = B(x) grad H(x)``."""
    variant = SplitVariant(variant)
    if variant in (SplitVariant.SYMPLECTIC_EULER, SplitVariant.STORMER_VERLET):
        if not model.separable:
            raise ValueError(f"{variant.value} needs a separable (p, q) model")
        p, q = _split_pq(model, x)
        if variant is SplitVariant.SYMPLECTIC_EULER:
            p = p + h * _force(model, p, q)
            q = q + h * _velocity(model, p, q)
        else:
            p = p + 0.5 * h * _force(model, p, q)
            q = q + h * _velocity(model, p, q)
            p = p + 0.5 * h * _force(model, p, q)
        return np.concatenate([p, q], axis=-1)
    f0 = model.vector_field(x)
    if variant is SplitVariant.EULER:
        return x + h * f0
    f1 = model.vector_field(x + h * f0)
    return x + 0.5 * h * (f0 + f1)


def split_det_step(model: SystemModel, x, h: float, dw_first_half, dw_second_half, variant):
    """Noise half kick, classical deterministic step, noise half kick."""
    y1 = np.asarray(x, dtype=float) + model.noise.kick(dw_first_half)
    y2 = deterministic_step(model, y1, h, variant)
    return y2 + model.noise.kick(dw_second_half)


def check_scheme(scheme: SchemeId, model: SystemModel) -> None:
    """Raise ``ValueError`` if ``scheme`` cannot be applied to ``model``."""
    if scheme is SchemeId.STM and model.name != OSCILLATOR:
        raise ValueError(f"STM is only defined for the oscillator, not {model.name!r}")
    if scheme in (SchemeId.SPLIT_SYMPLECTIC_EULER, SchemeId.SPLIT_STORMER_VERLET) and not model.separable:
        raise ValueError(f"{scheme.value} needs a separable (p, q) model")


def step(
    scheme,
    model: SystemModel,
    x,
    h: float,
    dw_first_half,
    dw_second_half,
    settings: SolverSettings = DEFAULT_SETTINGS,
) -> Array:
    """Advance any scheme by one step from half-step Wiener increments."""
    scheme = SchemeId.parse(scheme)
    if scheme is SchemeId.DP:
        return dp_step(model, x, h, dw_first_half, dw_second_half, settings)[0]
    if scheme in _SPLIT_SCHEMES:
        return split_det_step(model, x, h, dw_first_half, dw_second_half, _SPLIT_SCHEMES[scheme])
    dw_full = np.asarray(dw_first_half, dtype=float) + np.asarray(dw_second_half, dtype=float)
    if scheme is SchemeId.EM:
        return em_step(model, x, h, dw_full)
    if scheme is SchemeId.BEM:
        return bem_step(model, x, h, dw_full, settings)[0]
    return stm_step(model, x, h, dw_full)
