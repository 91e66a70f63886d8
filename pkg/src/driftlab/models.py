"""SDE problem definitions: Poisson structure, Hamiltonian, additive noise, Casimir.

All maps act on the trailing axis, so a state may be a single vector of shape
``(n,)`` or a batch of shape ``(samples, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray

OSCILLATOR = "oscillator"
PENDULUM = "pendulum"
RIGID_BODY = "rigid_body"
MODEL_IDS = (OSCILLATOR, PENDULUM, RIGID_BODY)

RIGID_BODY_INERTIA = (0.345, 0.653, 1.0)

# |q2 - q1| at or below this switches the pendulum discrete gradient to its limit
PENDULUM_DG_THRESHOLD = 1e-8


@dataclass(frozen=True)
class NoiseModel:
    """Constant additive diffusion acting on the full state.

    Attributes:
        sigma_full: ``(n, d)`` diffusion matrix.
        noise_block_hessian: ``(d, d)`` matrix ``sigma_full.T @ hess(H) @ sigma_full``,
            which must not depend on the state.
    """

    sigma_full: Array
    noise_block_hessian: Array

    def __post_init__(self):
        sigma = np.array(self.sigma_full, dtype=float)
        if sigma.ndim != 2:
            raise ValueError("sigma_full must be a 2-D matrix")
        nbh = np.array(self.noise_block_hessian, dtype=float).reshape(
            sigma.shape[1], sigma.shape[1]
        )
        sigma.setflags(write=False)
        nbh.setflags(write=False)
        object.__setattr__(self, "sigma_full", sigma)
        object.__setattr__(self, "noise_block_hessian", nbh)

    @property
    def wiener_dim(self) -> int:
        return self.sigma_full.shape[1]

    def kick(self, dw: Array) -> Array:
        """``sigma_full @ dw`` over the trailing axis, summed in fixed column order."""
        dw = np.asarray(dw, dtype=float)
        sigma = self.sigma_full
        out = sigma[:, 0] * dw[..., 0:1]
        for k in range(1, sigma.shape[1]):
            out = out + sigma[:, k] * dw[..., k : k + 1]
        return out


@dataclass(frozen=True)
class CasimirForm:
    """Quadratic Casimir ``C(X) = X^T A X / 2``."""

    a_matrix: Array

    def __post_init__(self):
        a = np.array(self.a_matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("Casimir matrix must be square")
        if not np.array_equal(a, a.T):
            raise ValueError("Casimir matrix must be symmetric")
        a.setflags(write=False)
        object.__setattr__(self, "a_matrix", a)

    def __call__(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * matvec(self.a_matrix, x), axis=-1)

    def gradient(self, x: Array) -> Array:
        return matvec(self.a_matrix, np.asarray(x, dtype=float))


@dataclass(frozen=True)
class SystemModel:
    """One instance of ``dX = B(X) grad H(X) dt + sigma_full dW``.

    ``separable`` marks a state laid out as ``(p, q)`` with ``H = |p|^2/2 + V(q)``
    and ``B = J``; the partitioned splitting variants need it. ``linear_flow``
    is the exact propagator ``t -> exp(t A)`` of a linear drift ``A x``.
    """

    name: str
    dim: int
    poisson: Callable[[Array], Array]
    hamiltonian: Callable[[Array], Array]
    grad_h: Callable[[Array], Array]
    noise: NoiseModel
    initial_value: Array
    discrete_gradient: Optional[Callable[[Array, Array], Array]] = None
    casimir: Optional[CasimirForm] = None
    exact_moments: Optional[Callable[[Array, float], tuple]] = None
    separable: bool = False
    linear_flow: Optional[Callable[[float], Array]] = None
    hessian: Optional[Callable[[Array], Array]] = field(default=None, repr=False)

    def __post_init__(self):
        x0 = np.array(self.initial_value, dtype=float)
        if x0.shape != (self.dim,):
            raise ValueError(f"initial value must have shape ({self.dim},)")
        if self.noise.sigma_full.shape[0] != self.dim:
            raise ValueError(
                f"sigma_full has {self.noise.sigma_full.shape[0]} rows, "
                f"model dimension is {self.dim}"
            )
        x0.setflags(write=False)
        object.__setattr__(self, "initial_value", x0)

    @property
    def wiener_dim(self) -> int:
        return self.noise.wiener_dim

    def vector_field(self, x: Array) -> Array:
        """Deterministic drift ``B(x) grad H(x)``."""
        x = np.asarray(x, dtype=float)
        return matvec(self.poisson(x), self.grad_h(x))


def matvec(mat: Array, vec: Array) -> Array:
    """Batched ``mat @ vec`` with a fixed, batch-independent summation order."""
    out = mat[..., :, 0] * vec[..., None, 0]
    for j in range(1, mat.shape[-1]):
        out = out + mat[..., :, j] * vec[..., None, j]
    return out


def _canonical_j(x: Array) -> Array:
    j = np.array([[0.0, -1.0], [1.0, 0.0]])
    return np.broadcast_to(j, x.shape[:-1] + (2, 2))


def _scalar_noise(sigma_scale: float) -> Array:
    if not np.isfinite(sigma_scale):
        raise ValueError("sigma_scale must be finite")
    return np.array([[float(sigma_scale)], [0.0]])


def _separable_noise(sigma_full: Array) -> NoiseModel:
    # hess_pp H = identity, so the noise-block Hessian reduces to Sigma^T Sigma
    sigma_p = sigma_full[:1]
    return NoiseModel(sigma_full, sigma_p.T @ sigma_p)


def _check_sigma_rows(sigma_full: Array, dim: int) -> Array:
    sigma_full = np.atleast_2d(np.array(sigma_full, dtype=float))
    if sigma_full.shape[0] != dim:
        raise ValueError(f"sigma must have {dim} rows, got {sigma_full.shape[0]}")
    return sigma_full


def rotation(t: float) -> Array:
    """Flow of ``p' = -q, q' = p`` over time ``t``."""
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def make_oscillator(sigma_scale: float = 1.0, initial_value=(0.0, 1.0)) -> SystemModel:
    """Linear stochastic oscillator ``H = (p^2 + q^2)/2`` with noise on ``p``."""
    sigma_full = _scalar_noise(sigma_scale)

    def hamiltonian(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * x[..., 0] ** 2 + 0.5 * x[..., 1] ** 2

    def grad_h(x):
        return np.array(x, dtype=float)

    def discrete_gradient(y1, y2):
        return 0.5 * (np.asarray(y1, dtype=float) + np.asarray(y2, dtype=float))

    def hessian(x):
        return np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2))

    model = SystemModel(
        name=OSCILLATOR,
        dim=2,
        poisson=_canonical_j,
        hamiltonian=hamiltonian,
        grad_h=grad_h,
        noise=_separable_noise(sigma_full),
        initial_value=initial_value,
        discrete_gradient=discrete_gradient,
        separable=True,
        linear_flow=rotation,
        hessian=hessian,
    )
    object.__setattr__(
        model, "exact_moments", lambda x0, t: exact_oscillator_moments(model, x0, t)
    )
    return model


def make_pendulum(sigma_scale: float = 1.0, initial_value=(1.0, np.sqrt(2.0))) -> SystemModel:
    """Mathematical pendulum ``H = p^2/2 - cos q`` with noise on ``p``."""
    sigma_full = _scalar_noise(sigma_scale)

    def hamiltonian(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * x[..., 0] ** 2 - np.cos(x[..., 1])

    def grad_h(x):
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 0], np.sin(x[..., 1])], axis=-1)

    def discrete_gradient(y1, y2):
        y1 = np.asarray(y1, dtype=float)
        y2 = np.asarray(y2, dtype=float)
        q1, q2 = y1[..., 1], y2[..., 1]
        dq = q2 - q1
        close = np.abs(dq) <= PENDULUM_DG_THRESHOLD
        safe_dq = np.where(close, 1.0, dq)
        gq = np.where(
            close,
            np.sin(0.5 * (q1 + q2)),
            (np.cos(q1) - np.cos(q2)) / safe_dq,
        )
        return np.stack([0.5 * (y1[..., 0] + y2[..., 0]), gq], axis=-1)

    def hessian(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = np.cos(x[..., 1])
        return out

    return SystemModel(
        name=PENDULUM,
        dim=2,
        poisson=_canonical_j,
        hamiltonian=hamiltonian,
        grad_h=grad_h,
        noise=_separable_noise(sigma_full),
        initial_value=initial_value,
        discrete_gradient=discrete_gradient,
        separable=True,
        hessian=hessian,
    )


def make_rigid_body(
    sigma=((0.25,), (0.0,), (0.0,)),
    initial_value=(0.8, 0.6, 0.0),
    inertia=RIGID_BODY_INERTIA,
) -> SystemModel:
    """Free rigid body in angular-momentum form with additive noise.

    Args:
        sigma: ``(3, d)`` diffusion matrix with ``d <= 3``. A flat sequence of
            three numbers is read as a single noise column.
    """
    sigma = np.array(sigma, dtype=float)
    if sigma.ndim == 1:
        sigma = sigma.reshape(-1, 1)
    sigma = _check_sigma_rows(sigma, 3)
    if sigma.shape[1] > 3:
        raise ValueError(f"rigid body accepts at most 3 noise columns, got {sigma.shape[1]}")
    inv_i = 1.0 / np.asarray(inertia, dtype=float)

    def poisson(x):
        x = np.asarray(x, dtype=float)
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        zero = np.zeros_like(x1)
        return np.stack(
            [
                np.stack([zero, -x3, x2], axis=-1),
                np.stack([x3, zero, -x1], axis=-1),
                np.stack([-x2, x1, zero], axis=-1),
            ],
            axis=-2,
        )

    def hamiltonian(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * (
            x[..., 0] ** 2 * inv_i[0] + x[..., 1] ** 2 * inv_i[1] + x[..., 2] ** 2 * inv_i[2]
        )

    def grad_h(x):
        return np.asarray(x, dtype=float) * inv_i

    def discrete_gradient(y1, y2):
        return 0.5 * (np.asarray(y1, dtype=float) + np.asarray(y2, dtype=float)) * inv_i

    def hessian(x):
        return np.broadcast_to(np.diag(inv_i), np.shape(x)[:-1] + (3, 3))

    return SystemModel(
        name=RIGID_BODY,
        dim=3,
        poisson=poisson,
        hamiltonian=hamiltonian,
        grad_h=grad_h,
        noise=NoiseModel(sigma, sigma.T @ np.diag(inv_i) @ sigma),
        initial_value=initial_value,
        discrete_gradient=discrete_gradient,
        casimir=CasimirForm(np.eye(3)),
        hessian=hessian,
    )


def make_model(model_id: str, sigma=None, initial_value=None) -> SystemModel:
    """Build a built-in model by string id.

    ``sigma`` is a scalar for the separable models and a ``(3, d)`` matrix (or a
    scalar acting on ``X_1``) for the rigid body. ``None`` keeps the defaults.
    """
    kwargs = {}
    if initial_value is not None:
        kwargs["initial_value"] = tuple(initial_value)
    if model_id in (OSCILLATOR, PENDULUM):
        factory = make_oscillator if model_id == OSCILLATOR else make_pendulum
        if sigma is None:
            return factory(**kwargs)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.size != 1:
            if sigma.ndim == 2 and sigma.shape[0] != 2:
                raise ValueError(f"sigma must have 2 rows, got {sigma.shape[0]}")
            raise ValueError(f"{model_id} takes a scalar noise on p")
        return factory(float(sigma.reshape(())), **kwargs)
    if model_id == RIGID_BODY:
        if sigma is None:
            return make_rigid_body(**kwargs)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.size == 1:
            sigma = np.array([[float(sigma.reshape(()))], [0.0], [0.0]])
        return make_rigid_body(sigma, **kwargs)
    raise ValueError(f"unknown model id {model_id!r}; expected one of {MODEL_IDS}")


def exact_oscillator_moments(model: SystemModel, x0, t: float) -> tuple[Array, Array]:
    """Exact ``E[X(t)]`` and componentwise ``E[X(t)^2]`` for the linear oscillator.

    With ``dp = -q dt + s dW`` and ``dq = p dt`` the solution is a rotation of the
    initial value plus a Gaussian stochastic convolution; Ito's isometry gives
    the variances ``s^2 int_0^t cos^2`` (for ``p``) and ``s^2 int_0^t sin^2`` (for ``q``).
    """
    if model.name != OSCILLATOR:
        raise ValueError(f"exact moments are only available for the oscillator, not {model.name!r}")
    p0, q0 = np.asarray(x0, dtype=float)
    s2 = model.noise.sigma_full[0, 0] ** 2
    c, s = np.cos(t), np.sin(t)
    mean = np.array([c * p0 - s * q0, s * p0 + c * q0])
    # int_0^t cos^2 = t/2 + sin(2t)/4, int_0^t sin^2 = t/2 - sin(2t)/4
    var = s2 * np.array([0.5 * t + 0.25 * np.sin(2 * t), 0.5 * t - 0.25 * np.sin(2 * t)])
    return mean, mean**2 + var


def predicted_energy(model: SystemModel, h0: float, t):
    """Expected energy from the trace formula: ``h0 + tr(noise_block_hessian) t / 2``."""
    return h0 + 0.5 * np.trace(model.noise.noise_block_hessian) * np.asarray(t, dtype=float)


def predicted_casimir(model: SystemModel, c0: float, t):
    """Expected quadratic Casimir: ``c0 + tr(sigma^T A sigma) t / 2``."""
    if model.casimir is None:
        raise ValueError(f"model {model.name!r} has no Casimir")
    sigma = model.noise.sigma_full
    rate = 0.5 * np.trace(sigma.T @ model.casimir.a_matrix @ sigma)
    return c0 + rate * np.asarray(t, dtype=float)
