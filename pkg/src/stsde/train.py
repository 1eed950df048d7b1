"""Denoising score-matching training loop with Adam and best-val checkpoints.

The loss draws (t, Z) per window, perturbs the future block with the forward
kernel, and regresses the score network onto the Gaussian score target with
weight lambda(t) = sigma(t)^2, which collapses to mean ||sigma * s_theta + Z||^2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import SeriesDataset, WindowSample, make_windows
from .graph import Graph, cheb_basis, scaled_laplacian
from .model import (
    ModelConfig,
    ScoreModelParams,
    VersionMismatch,
    init_params,
    load_params,
    save_params,
    score_forward_batch,
)
from .sde import SdeSpec, perturb_sample
from .tensor import ShapeMismatch, Tape, Tensor, add, mean_sq, mul

LAMBDA_MODES = ("sigma_sq",)
KERNEL_MODES = ("subvp", "st")
_KERNEL_TO_KIND = {"subvp": "subVP", "st": "ST"}


class EmptyBatch(ValueError):
    pass


class DivergedLoss(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    t_min: float = 1e-3
    lambda_mode: str = "sigma_sq"
    kernel_mode: str = "subvp"
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 1e-5 <= self.learning_rate <= 1e-1:
            raise ValueError(f"learning_rate must lie in [1e-5, 1e-1], got {self.learning_rate}")
        if not 0.0 < self.t_min < 1.0:
            raise ValueError(f"t_min must lie in (0, 1), got {self.t_min}")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ValueError(f"lambda_mode must be one of {LAMBDA_MODES}, got {self.lambda_mode!r}")
        if self.kernel_mode not in KERNEL_MODES:
            raise ValueError(f"kernel_mode must be one of {KERNEL_MODES}, got {self.kernel_mode!r}")
        if self.max_grad_norm <= 0:
            raise ValueError(f"max_grad_norm must be > 0, got {self.max_grad_norm}")


class AdamState:
    """First/second moment tensors plus the step counter, keyed like params."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray], step: int = 0):
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def init_like(cls, tensors: dict[str, Tensor]) -> "AdamState":
        return cls(
            {k: np.zeros_like(t.data) for k, t in tensors.items()},
            {k: np.zeros_like(t.data) for k, t in tensors.items()},
        )


def adam_step(
    tensors: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, Tensor], AdamState]:
    """Bias-corrected Adam update; returns fresh tensors and state."""
    if set(tensors) != set(grads):
        raise ShapeMismatch("gradient keys do not match parameter keys")
    step = state.step + 1
    b1, b2, eps = AdamState.BETA1, AdamState.BETA2, AdamState.EPS
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_tensors: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, tensor in tensors.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != tensor.data.shape:
            raise ShapeMismatch(f"{name}: grad shape {g.shape} vs param {tensor.data.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_tensors[name] = Tensor(tensor.data - update)
        new_m[name] = m
        new_v[name] = v
    return new_tensors, AdamState(new_m, new_v, step)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Global L2 clipping; returns (possibly scaled grads, pre-clip norm)."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def _batch_arrays(batch: list[WindowSample]):
    x_f = np.stack([w.x_f for w in batch])
    x_h = np.stack([w.x_h for w in batch])
    tod = np.stack([w.p_h.time_of_day for w in batch])
    dow = np.stack([w.p_h.day_of_week for w in batch])
    return x_f, x_h, tod, dow


def draw_loss_noise(
    rng: np.random.Generator, batch_size: int, shape: tuple[int, ...], t_min: float
) -> tuple[np.ndarray, np.ndarray]:
    t = rng.uniform(t_min, 1.0, batch_size)
    z = rng.standard_normal((batch_size, *shape))
    return t, z


def dsm_loss_given(
    params: ScoreModelParams,
    batch: list[WindowSample],
    spec: SdeSpec,
    basis,
    t: np.ndarray,
    z: np.ndarray,
    t_min: float = 1e-3,
) -> Tensor:
    """DSM loss with explicit (t, Z) draws: mean ||sigma * s_theta + Z||^2."""
    if len(batch) == 0:
        raise EmptyBatch("dsm_loss needs at least one window")
    x_f, x_h, tod, dow = _batch_arrays(batch)
    b, h, n, d = x_f.shape
    x_tilde = np.empty_like(x_f)
    sigma_full = np.empty_like(x_f)
    for i in range(b):
        # window blocks are [H, N, D], nodes on the middle axis
        xt_i, _, sigma_i = perturb_sample(spec, x_f[i], float(t[i]), z[i], t_min=t_min,
                                          node_axis=-2)
        x_tilde[i] = xt_i
        # scalar sigma for isotropic kernels, per-node vector for the ST kernel
        sig = np.asarray(sigma_i, dtype=np.float64)
        sigma_full[i] = sig.reshape(1, n, 1) if sig.ndim == 1 else sig
    score = score_forward_batch(params, x_tilde, x_h, tod, dow, t, basis)
    residual = add(mul(score, Tensor(np.broadcast_to(sigma_full, score.data.shape).copy())),
                   Tensor(z))
    return mean_sq(residual)


def dsm_loss(
    params: ScoreModelParams,
    batch: list[WindowSample],
    spec: SdeSpec,
    basis,
    rng: np.random.Generator,
    t_min: float = 1e-3,
) -> Tensor:
    """DSM loss with (t, Z) drawn from the given stream."""
    if len(batch) == 0:
        raise EmptyBatch("dsm_loss needs at least one window")
    shape = batch[0].x_f.shape
    t, z = draw_loss_noise(rng, len(batch), shape, t_min)
    return dsm_loss_given(params, batch, spec, basis, t, z, t_min=t_min)


def diverged(val_losses: list[float], initial_val: float, patience: int = 3) -> bool:
    """Divergence rule: NaN anywhere, or > 10x initial for `patience` epochs running."""
    if any(not np.isfinite(v) for v in val_losses):
        return True
    if len(val_losses) < patience:
        return False
    recent = val_losses[-patience:]
    return all(v > 10.0 * initial_val for v in recent)


@dataclass
class TrainResult:
    params: ScoreModelParams
    history: list[tuple[int, float, float]]
    best_epoch: int
    best_val: float
    initial_val: float


def write_loss_curve(history: list[tuple[int, float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, train_loss, val_loss in history:
            writer.writerow([epoch, repr(float(train_loss)), repr(float(val_loss))])


def _grads_of(tape: Tape, tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: tape.grad(t).data for k, t in tensors.items()}


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_ds: SeriesDataset,
    val_ds: SeriesDataset,
    graph: Graph,
    spec: SdeSpec,
) -> TrainResult:
    """Epochs of minibatch DSM updates; keeps the lowest-validation-loss params.

    Expects normalized splits. Fully deterministic in (seed, configs, data).
    """
    if _KERNEL_TO_KIND[train_cfg.kernel_mode] != spec.kind:
        raise ValueError(
            f"kernel_mode {train_cfg.kernel_mode!r} does not match SDE kind {spec.kind!r}"
        )
    basis = cheb_basis(scaled_laplacian(graph), model_cfg.cheb_order)
    windows_train = make_windows(train_ds, model_cfg.history_len, model_cfg.horizon)
    windows_val = make_windows(val_ds, model_cfg.history_len, model_cfg.horizon)

    params = init_params(model_cfg, train_cfg.seed)
    state = AdamState.init_like(params.tensors)

    root = np.random.SeedSequence(train_cfg.seed)
    sq_train, sq_val = root.spawn(2)
    rng_train = np.random.default_rng(sq_train)
    rng_val = np.random.default_rng(sq_val)

    # one fixed (t, Z) draw per validation window keeps epoch losses comparable
    shape = windows_val[0].x_f.shape
    val_t, val_z = draw_loss_noise(rng_val, len(windows_val), shape, train_cfg.t_min)

    def val_loss_of(p: ScoreModelParams) -> float:
        total, count = 0.0, 0
        for lo in range(0, len(windows_val), train_cfg.batch_size):
            chunk = windows_val[lo : lo + train_cfg.batch_size]
            loss = dsm_loss_given(
                p, chunk, spec, basis, val_t[lo : lo + len(chunk)],
                val_z[lo : lo + len(chunk)], t_min=train_cfg.t_min,
            )
            total += float(loss.data) * len(chunk)
            count += len(chunk)
        return total / count

    initial_val = val_loss_of(params)
    best = params.copy()
    best_epoch, best_val = 0, initial_val
    history: list[tuple[int, float, float]] = []
    val_curve: list[float] = []

    for epoch in range(1, train_cfg.epochs + 1):
        order = rng_train.permutation(len(windows_train))
        epoch_total, epoch_count = 0.0, 0
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [windows_train[i] for i in order[lo : lo + train_cfg.batch_size]]
            with Tape() as tape:
                params.watch_all(tape)
                loss = dsm_loss(params, batch, spec, basis, rng_train, t_min=train_cfg.t_min)
                tape.backward(loss)
                grads = _grads_of(tape, params.tensors)
            grads, _ = clip_gradients(grads, train_cfg.max_grad_norm)
            new_tensors, state = adam_step(params.tensors, grads, state, train_cfg.learning_rate)
            params = ScoreModelParams(model_cfg, new_tensors)
            epoch_total += float(loss.data) * len(batch)
            epoch_count += len(batch)

        train_loss = epoch_total / epoch_count
        val_loss = val_loss_of(params)
        history.append((epoch, train_loss, val_loss))
        val_curve.append(val_loss)
        if diverged(val_curve, initial_val):
            raise DivergedLoss(
                f"validation loss diverged at epoch {epoch} "
                f"(latest {val_loss:.4g}, initial {initial_val:.4g})"
            )
        if val_loss < best_val:
            best, best_epoch, best_val = params.copy(), epoch, val_loss

    return TrainResult(best, history, best_epoch, best_val, initial_val)


def save_checkpoint(params: ScoreModelParams, path) -> None:
    save_params(params, path)


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> ScoreModelParams:
    params = load_params(path)
    if expect_config is not None and params.config != expect_config:
        raise VersionMismatch(
            f"checkpoint config {params.config} does not match requested {expect_config}"
        )
    return params
