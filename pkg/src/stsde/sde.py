"""The forward SDE family: beta schedule, perturbation kernels, drifts, targets.

Three kinds share one diffusion coefficient G(t) = sqrt(beta(t)(1 - e^{-2B(t)}))
and differ in drift: VP and subVP use -1/2 beta(t) x, the graph-aware ST kind
couples nodes through -1/2 beta(t) (x - alpha * A_hat x). Perturbation kernels
are closed-form for VP/subVP; the ST covariance is integrated by RK4, with an
independent eigendecomposition route kept alongside as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Unstable, neighbor_mean_effect, stability_check
from .tensor import ShapeMismatch

SDE_KINDS = ("VP", "subVP", "ST")

T_MIN_DEFAULT = 1e-3


class TOutOfRange(ValueError):
    pass


class ZeroSigma(ValueError):
    pass


class NonSymmetricAdjacency(ValueError):
    pass


@dataclass(frozen=True)
class BetaSchedule:
    """Linear noise schedule beta(t) = beta0 + t (beta1 - beta0) on [0, 1]."""

    beta0: float = 0.1
    beta1: float = 20.0

    def __post_init__(self):
        if not (self.beta0 > 0):
            raise ValueError(f"beta0 must be > 0, got {self.beta0}")
        if not (self.beta1 >= self.beta0):
            raise ValueError(f"beta1 must be >= beta0, got {self.beta1} < {self.beta0}")


def _check_t(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0) or not np.isfinite(t):
        raise TOutOfRange(f"t={t} outside [0, 1]")
    return t


def beta(sched: BetaSchedule, t: float) -> float:
    _check_t(t)
    return sched.beta0 + t * (sched.beta1 - sched.beta0)


def beta_integral(sched: BetaSchedule, t: float) -> float:
    """B(t) = integral of beta from 0 to t."""
    _check_t(t)
    return _beta_integral_raw(sched, t)


def _beta_raw(sched: BetaSchedule, t: float) -> float:
    return sched.beta0 + t * (sched.beta1 - sched.beta0)


def _beta_integral_raw(sched: BetaSchedule, t: float) -> float:
    return sched.beta0 * t + 0.5 * (sched.beta1 - sched.beta0) * t * t


def diffusion_coeff(sched: BetaSchedule, t: float) -> float:
    """G(t) = sqrt(beta(t) (1 - e^{-2 B(t)})); shared by subVP and ST kinds."""
    _check_t(t)
    return _diffusion_raw(sched, t)


def _diffusion_raw(sched: BetaSchedule, t: float) -> float:
    return float(np.sqrt(_beta_raw(sched, t) * (1.0 - np.exp(-2.0 * _beta_integral_raw(sched, t)))))


@dataclass(frozen=True)
class SdeSpec:
    """SDE kind + schedule; ST additionally carries alpha and the normalized adjacency."""

    kind: str
    schedule: BetaSchedule = field(default_factory=BetaSchedule)
    alpha: float = 0.0
    adjacency: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in SDE_KINDS:
            raise ValueError(f"kind must be one of {SDE_KINDS}, got {self.kind!r}")
        if self.kind == "ST":
            if self.adjacency is None:
                raise ValueError("ST spec needs a normalized adjacency")
            a = np.asarray(self.adjacency, dtype=np.float64)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ShapeMismatch(f"adjacency must be square, got {a.shape}")
            if np.max(np.abs(a - a.T)) > 1e-9:
                raise NonSymmetricAdjacency(f"max asymmetry {np.max(np.abs(a - a.T)):.3g}")
            check = stability_check(a, self.alpha)
            if not check["stable"]:
                raise Unstable(
                    f"I - alpha*A has min eigenvalue {check['min_real_eig']:.6g} <= 0 "
                    f"for alpha={self.alpha}"
                )
            object.__setattr__(self, "adjacency", a)

    @property
    def n_nodes(self) -> int:
        if self.adjacency is None:
            raise ValueError("spec has no adjacency")
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class MarginalParams:
    """Perturbation-kernel parameters at time t.

    VP/subVP: mean has x0's shape and std is the scalar sigma(t).
    ST: mean has x0's shape and std is the N x N node covariance V(t).
    """

    mean: np.ndarray
    std: float | np.ndarray


def subvp_marginal(sched: BetaSchedule, x0: np.ndarray, t: float) -> MarginalParams:
    """mean = x0 e^{-B(t)/2}, sigma(t) = 1 - e^{-B(t)}."""
    _check_t(t)
    big_b = _beta_integral_raw(sched, t)
    mean = np.asarray(x0, dtype=np.float64) * np.exp(-0.5 * big_b)
    return MarginalParams(mean=mean, std=float(1.0 - np.exp(-big_b)))


def _vp_marginal(sched: BetaSchedule, x0: np.ndarray, t: float) -> MarginalParams:
    big_b = _beta_integral_raw(sched, t)
    mean = np.asarray(x0, dtype=np.float64) * np.exp(-0.5 * big_b)
    return MarginalParams(mean=mean, std=float(np.sqrt(1.0 - np.exp(-big_b))))


def _st_matrix(spec: SdeSpec) -> np.ndarray:
    return np.eye(spec.n_nodes) - spec.alpha * spec.adjacency


def st_propagator(spec: SdeSpec, t: float) -> np.ndarray:
    """expm(-1/2 B(t) (I - alpha A)) via symmetric eigendecomposition."""
    s = _st_matrix(spec)
    lam, q = np.linalg.eigh(s)
    return (q * np.exp(-0.5 * _beta_integral_raw(spec.schedule, t) * lam)) @ q.T


def st_covariance_rk4(spec: SdeSpec, t: float, step: float = 1e-3) -> np.ndarray:
    """Integrate dV/dt = -1/2 beta (SV + VS^T) + G^2 I from V(0)=0 by RK4.

    Accepts t past 1 (the linear beta extension) for stationary diagnostics;
    the public marginal API stays restricted to [0, 1].
    """
    sched = spec.schedule
    s = _st_matrix(spec)
    n = s.shape[0]
    eye = np.eye(n)

    def rhs(tau: float, v: np.ndarray) -> np.ndarray:
        b = _beta_raw(sched, tau)
        g2 = b * (1.0 - np.exp(-2.0 * _beta_integral_raw(sched, tau)))
        return -0.5 * b * (s @ v + v @ s.T) + g2 * eye

    if t == 0.0:
        return np.zeros((n, n))
    n_steps = max(1, int(np.ceil(t / step)))
    h = t / n_steps
    v = np.zeros((n, n))
    tau = 0.0
    for _ in range(n_steps):
        k1 = rhs(tau, v)
        k2 = rhs(tau + 0.5 * h, v + 0.5 * h * k1)
        k3 = rhs(tau + 0.5 * h, v + 0.5 * h * k2)
        k4 = rhs(tau + h, v + h * k3)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        tau += h
    return 0.5 * (v + v.T)


def st_covariance_closed_form(spec: SdeSpec, t: float) -> np.ndarray:
    """Independent eigendecomposition route for V(t), kept as a cross-check.

    In the eigenbasis of S = I - alpha A with eigenvalue lam, the diagonal
    solves dw/dB = -lam w + (1 - e^{-2B}):
        w(B) = (1 - e^{-lam B})/lam - (e^{-2B} - e^{-lam B})/(lam - 2)
    with the lam -> 0 and lam -> 2 limits handled explicitly.
    """
    s = _st_matrix(spec)
    lam, q = np.linalg.eigh(s)
    big_b = _beta_integral_raw(spec.schedule, t)
    w = np.empty_like(lam)
    for i, l in enumerate(lam):
        # expm1 keeps both terms stable as lam -> 0 or lam -> 2
        t1 = big_b if abs(l) < 1e-14 else -np.expm1(-l * big_b) / l
        d = 2.0 - l
        if abs(d) < 1e-14:
            t2 = big_b * np.exp(-2.0 * big_b)
        else:
            t2 = np.exp(-2.0 * big_b) * np.expm1(d * big_b) / d
        w[i] = t1 - t2
    return (q * w) @ q.T


def st_marginal(spec: SdeSpec, x0: np.ndarray, t: float) -> MarginalParams:
    """Graph-aware kernel: mean by matrix exponential, covariance by RK4."""
    _check_t(t)
    if spec.kind != "ST":
        raise ValueError(f"st_marginal needs an ST spec, got {spec.kind}")
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[0] != spec.n_nodes:
        raise ShapeMismatch(f"x0 first axis {x0.shape[0]} vs {spec.n_nodes} nodes")
    prop = st_propagator(spec, t)
    mean = np.tensordot(prop, x0, axes=([1], [0]))
    return MarginalParams(mean=mean, std=st_covariance_rk4(spec, t))


def drift(spec: SdeSpec, x: np.ndarray, t: float, node_axis: int = -2) -> np.ndarray:
    """f(x, t): -1/2 beta(t) x, with the alpha-weighted neighboring mean
    effect subtracted inside the bracket for the ST kind."""
    _check_t(t)
    x = np.asarray(x, dtype=np.float64)
    b = _beta_raw(spec.schedule, t)
    if spec.kind == "ST":
        m = neighbor_mean_effect(spec.adjacency, x, node_axis)
        return -0.5 * b * (x - spec.alpha * m)
    return -0.5 * b * x


def gaussian_score_target(x_tilde: np.ndarray, mean: np.ndarray, sigma: float) -> np.ndarray:
    """grad log N(x; mean, sigma^2 I) = -(x - mean) / sigma^2."""
    if np.any(np.asarray(sigma) <= 0.0):
        raise ZeroSigma(f"sigma must be positive, got {sigma}")
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if x_tilde.shape != mean.shape:
        raise ShapeMismatch(f"x_tilde {x_tilde.shape} vs mean {mean.shape}")
    return -(x_tilde - mean) / (np.asarray(sigma) ** 2)


def perturb_sample(
    spec: SdeSpec,
    x0: np.ndarray,
    t: float,
    noise: np.ndarray,
    t_min: float = T_MIN_DEFAULT,
    node_axis: int = 0,
):
    """Draw x_tilde = mean + sigma * noise and its score target -noise/sigma.

    The training kernel follows spec.kind: subVP (the default training mode)
    and VP are isotropic; ST uses the diagonal of the RK4 covariance as a
    per-node sigma (diagonal-covariance approximation) and reads the node
    dimension from node_axis. Returns (x_tilde, target_score, sigma) where
    sigma is a scalar for VP/subVP and a length-N vector for ST.
    """
    _check_t(t)
    if t < t_min:
        raise ZeroSigma(f"t={t} below t_min={t_min}: sigma too close to 0")
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ShapeMismatch(f"noise {noise.shape} vs x0 {x0.shape}")
    if spec.kind == "subVP":
        params = subvp_marginal(spec.schedule, x0, t)
        sigma = params.std
        x_tilde = params.mean + sigma * noise
        target = -noise / sigma
        return x_tilde, target, sigma
    if spec.kind == "VP":
        params = _vp_marginal(spec.schedule, x0, t)
        sigma = params.std
        x_tilde = params.mean + sigma * noise
        target = -noise / sigma
        return x_tilde, target, sigma
    x0_nodes_first = np.moveaxis(x0, node_axis, 0)
    noise_nodes_first = np.moveaxis(noise, node_axis, 0)
    params = st_marginal(spec, x0_nodes_first, t)
    sigma_nodes = np.sqrt(np.maximum(np.diag(params.std), 0.0))
    if np.any(sigma_nodes <= 0.0):
        raise ZeroSigma(f"ST kernel at t={t} has a non-positive node variance")
    shape = (spec.n_nodes,) + (1,) * (x0.ndim - 1)
    sig = sigma_nodes.reshape(shape)
    x_tilde = np.moveaxis(params.mean + sig * noise_nodes_first, 0, node_axis)
    target = np.moveaxis(-noise_nodes_first / sig, 0, node_axis)
    return x_tilde, target, sigma_nodes
