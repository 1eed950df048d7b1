"""Graph structure and the node-space operators built from it.

Covers the edge-list loader, symmetric degree normalization with self-loops,
the scaled Laplacian and its Chebyshev polynomial basis, the neighboring mean
effect contraction used by the graph-aware drift, and the stability/stationary
variance checks for the drift matrix I - alpha*A_hat.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeMismatch


class ParseError(ValueError):
    pass


class NodeIdOutOfRange(ValueError):
    pass


class EigFailure(RuntimeError):
    pass


class Unstable(ValueError):
    pass


class SingularSystem(RuntimeError):
    pass


@dataclass(frozen=True)
class Graph:
    """Undirected weighted graph with a dense zero-diagonal adjacency."""

    n_nodes: int
    edges: tuple[tuple[int, int, float], ...]
    adjacency: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = self.adjacency
        if a.shape != (self.n_nodes, self.n_nodes):
            raise ShapeMismatch(f"adjacency {a.shape} vs {self.n_nodes} nodes")
        if np.any(np.diag(a) != 0.0):
            raise ParseError("adjacency must have a zero diagonal")


def graph_from_edges(n_nodes: int, edges) -> Graph:
    """Build a Graph from (from, to, weight) triples, symmetrizing by max."""
    if n_nodes <= 0:
        raise ParseError(f"n_nodes must be positive, got {n_nodes}")
    a = np.zeros((n_nodes, n_nodes))
    clean = []
    for i, j, w in edges:
        i, j, w = int(i), int(j), float(w)
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise NodeIdOutOfRange(f"edge ({i},{j}) outside [0, {n_nodes})")
        if i == j:
            raise ParseError(f"self-loop at node {i} (diagonal must stay zero)")
        if w < 0 or not np.isfinite(w):
            raise ParseError(f"edge ({i},{j}) has invalid weight {w}")
        a[i, j] = max(a[i, j], w)
        a[j, i] = max(a[j, i], w)
        clean.append((i, j, w))
    return Graph(n_nodes=n_nodes, edges=tuple(clean), adjacency=a)


def load_graph(path, n_nodes: int | None = None) -> Graph:
    """Read `from,to,weight` rows (0-based ids, `#` comments) into a Graph.

    When n_nodes is omitted the graph size is max node id + 1.
    """
    edges = []
    max_id = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected `from,to,weight`, got {raw!r}")
            try:
                i, j = int(parts[0]), int(parts[1])
                w = float(parts[2])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if i < 0 or j < 0:
                raise NodeIdOutOfRange(f"{path}:{lineno}: negative node id")
            edges.append((i, j, w))
            max_id = max(max_id, i, j)
    if n_nodes is None:
        if max_id < 0:
            raise ParseError(f"{path}: empty edge file needs an explicit n_nodes")
        n_nodes = max_id + 1
    elif max_id >= n_nodes:
        raise NodeIdOutOfRange(f"{path}: node id {max_id} outside [0, {n_nodes})")
    return graph_from_edges(n_nodes, edges)


def normalize_adjacency(g: Graph) -> np.ndarray:
    """A_hat = D^{-1/2} (A + I) D^{-1/2}, D the degree matrix of A + I."""
    a_loop = g.adjacency + np.eye(g.n_nodes)
    d_inv_sqrt = 1.0 / np.sqrt(a_loop.sum(axis=1))
    return d_inv_sqrt[:, None] * a_loop * d_inv_sqrt[None, :]


def lambda_max_power_iteration(m: np.ndarray, iters: int = 200, tol: float = 1e-10) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    n = m.shape[0]
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        lam_new = float(v @ (m @ v))
        if abs(lam_new - lam) <= tol:
            return lam_new
        lam = lam_new
    return lam


_DENSE_EIG_MAX_N = 512


def scaled_laplacian(g: Graph) -> np.ndarray:
    """L~ = 2L/lambda_max - I with L = I - D^{-1/2} A D^{-1/2}.

    Isolated nodes get D^{-1/2} = 0, leaving the identity row. lambda_max
    comes from the dense symmetric eigensolver at small N; power iteration
    (200 iterations, tol 1e-10) only beyond that, where 200 iterations may
    not resolve near-degenerate top eigenvalues.
    """
    a = g.adjacency
    deg = a.sum(axis=1)
    d_inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = np.eye(g.n_nodes) - d_inv_sqrt[:, None] * a * d_inv_sqrt[None, :]
    lap = 0.5 * (lap + lap.T)
    if g.n_nodes <= _DENSE_EIG_MAX_N:
        try:
            lam_max = float(np.linalg.eigvalsh(lap)[-1])
        except np.linalg.LinAlgError as exc:
            raise EigFailure(str(exc)) from exc
    else:
        lam_max = lambda_max_power_iteration(lap)
    if lam_max <= 0.0:
        lam_max = 1.0  # edgeless corner: L = I would still give lam_max = 1
    return 2.0 * lap / lam_max - np.eye(g.n_nodes)


@dataclass(frozen=True)
class ChebBasis:
    """Chebyshev polynomials T_0..T_{order-1} of the scaled Laplacian."""

    order: int
    polys: tuple[np.ndarray, ...]

    def stacked(self) -> np.ndarray:
        return np.stack(self.polys, axis=0)


def cheb_basis(lap_scaled: np.ndarray, order: int) -> ChebBasis:
    """T_0 = I, T_1 = L~, T_k = 2 L~ T_{k-1} - T_{k-2}."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    n = lap_scaled.shape[0]
    polys = [np.eye(n)]
    if order > 1:
        polys.append(lap_scaled.copy())
    for _ in range(2, order):
        polys.append(2.0 * lap_scaled @ polys[-1] - polys[-2])
    return ChebBasis(order=order, polys=tuple(polys))


def neighbor_mean_effect(a_norm: np.ndarray, x: np.ndarray, node_axis: int) -> np.ndarray:
    """Contract the normalized adjacency with x along its node axis.

    M[..., i, ...] = sum_j a_norm[i, j] * x[..., j, ...]
    """
    x = np.asarray(x)
    n = a_norm.shape[0]
    axis = node_axis % x.ndim
    if x.shape[axis] != n:
        raise ShapeMismatch(f"x axis {node_axis} has length {x.shape[axis]}, adjacency is {n}x{n}")
    out = np.tensordot(a_norm, x, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def stability_check(a_norm: np.ndarray, alpha: float) -> dict:
    """Eigenvalues of I - alpha*a_norm; stable iff the smallest real part > 0."""
    n = a_norm.shape[0]
    s = np.eye(n) - alpha * a_norm
    try:
        if np.allclose(s, s.T, atol=1e-12):
            eigs = np.linalg.eigvalsh(s)
            min_real = float(eigs[0])
        else:
            eigs = np.linalg.eigvals(s)
            min_real = float(eigs.real.min())
    except np.linalg.LinAlgError as exc:
        raise EigFailure(str(exc)) from exc
    return {"stable": min_real > 0.0, "min_real_eig": min_real}


def solve_lyapunov_stationary(a_norm: np.ndarray, alpha: float) -> np.ndarray:
    """Solve (I-aA)V + V(I-aA)^T = 2I by Kronecker vectorization.

    The solution is the stationary variance of the graph-aware forward SDE;
    it must be symmetric positive definite whenever I-aA is stable.
    """
    check = stability_check(a_norm, alpha)
    if not check["stable"]:
        raise Unstable(f"min real eigenvalue {check['min_real_eig']:.6g} <= 0")
    n = a_norm.shape[0]
    s = np.eye(n) - alpha * a_norm
    eye = np.eye(n)
    system = np.kron(eye, s) + np.kron(s, eye)
    rhs = (2.0 * eye).ravel(order="F")
    try:
        v = np.linalg.solve(system, rhs).reshape((n, n), order="F")
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    residual = np.linalg.norm(s @ v + v @ s.T - 2.0 * eye)
    if residual > 1e-8:
        raise SingularSystem(f"stationary solve residual {residual:.3g} > 1e-8")
    return v
