"""Reverse-time Euler-Maruyama sampling and adaptive SDE selection.

States stay in normalized units throughout the reverse loop; forecast()
denormalizes at the end. Noise is drawn from counter-based streams keyed by
(seed, step, sample), so ensemble size and evaluation order never change any
individual sample's path.

Adaptive selection needs a reference: oracle mode compares both candidate
steps against supplied labels each step; calibration mode replays a selection
schedule that was fixed on held-out data, label-free. Selection MAE is
computed in normalized space; with a single feature that choice is exactly
affine-equivalent to real units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Normalizer, WindowSample
from .graph import Graph, cheb_basis, normalize_adjacency, scaled_laplacian
from .metrics import mae
from .model import ScoreModelParams, score_forward_batch
from .sde import BetaSchedule, SdeSpec, TOutOfRange, diffusion_coeff, drift

SAMPLER_MODES = ("subvp_only", "st_only", "adaptive")
ADAPTIVE_METRICS = ("mae",)
STATE_MAGNITUDE_LIMIT = 1e6


class NonFiniteState(FloatingPointError):
    pass


class MissingLabels(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 1000
    n_samples: int = 30
    alpha: float = 0.0
    mode: str = "subvp_only"
    adaptive_metric: str = "mae"
    denoise_last: bool = True
    oracle_labels: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.mode not in SAMPLER_MODES:
            raise ValueError(f"mode must be one of {SAMPLER_MODES}, got {self.mode!r}")
        if self.adaptive_metric not in ADAPTIVE_METRICS:
            raise ValueError(
                f"adaptive_metric must be one of {ADAPTIVE_METRICS}, got {self.adaptive_metric!r}"
            )


@dataclass(frozen=True)
class ForecastEnsemble:
    """Sampled futures plus the running-best point prediction."""

    samples: np.ndarray
    best_tracked: np.ndarray
    per_step_metric: list[float]
    chosen_kinds: tuple[str, ...] | None = None


def step_noise(seed: int, step: int, sample: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normal draw from the stream keyed by (seed, step, sample)."""
    bits = np.random.Philox(key=seed, counter=[0, step, sample, 0])
    return np.random.Generator(bits).standard_normal(shape)


def _ensemble_noise(seed: int, step: int, n: int, shape: tuple[int, ...]) -> np.ndarray:
    return np.stack([step_noise(seed, step, s, shape) for s in range(n)])


def _init_states(seed: int, n_steps: int, n: int, shape: tuple[int, ...]) -> np.ndarray:
    # step index n_steps is reserved for the t=1 initialization draw
    return _ensemble_noise(seed, n_steps, n, shape)


def reverse_step(
    x: np.ndarray,
    t: float,
    spec: SdeSpec,
    score_fn,
    noise: np.ndarray,
    dt: float,
    denoise: bool = False,
) -> np.ndarray:
    """One reverse Euler-Maruyama update.

    mean = x - (drift(x, t) - G(t)^2 * score) * dt; the stochastic update adds
    G(t) * sqrt(dt) * noise, and denoise=True returns the mean itself.
    """
    if not 0.0 < t <= 1.0:
        raise TOutOfRange(f"reverse step needs t in (0, 1], got {t}")
    x = np.asarray(x, dtype=np.float64)
    d = drift(spec, x, t)
    g = diffusion_coeff(spec.schedule, t)
    s = np.asarray(score_fn(x, t), dtype=np.float64)
    mean = x - (d - g * g * s) * dt
    out = mean if denoise else mean + g * np.sqrt(dt) * np.asarray(noise, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"reverse step at t={t} produced non-finite state")
    return out


def _check_magnitude(states: np.ndarray, t: float) -> None:
    peak = float(np.max(np.abs(states)))
    if peak > STATE_MAGNITUDE_LIMIT:
        raise NonFiniteState(f"state magnitude {peak:.3g} exceeded "
                             f"{STATE_MAGNITUDE_LIMIT:.0e} at t={t}")


class _BestTracker:
    """Running minimum of the step metric and the prediction that achieved it."""

    def __init__(self):
        self.best_metric = np.inf
        self.best_pred: np.ndarray | None = None
        self.trace: list[float] = []

    def update(self, metric: float, pred: np.ndarray) -> None:
        if metric < self.best_metric:
            self.best_metric = metric
            self.best_pred = pred.copy()
        self.trace.append(self.best_metric)


def reverse_trajectory(
    spec: SdeSpec,
    score_fn,
    shape: tuple[int, ...],
    cfg: SamplerConfig,
    seed: int,
    labels: np.ndarray | None = None,
) -> ForecastEnsemble:
    """Pure single-SDE ensemble: n_samples independent reverse paths.

    labels, when given, are only used to track the running-best ensemble-mean
    prediction; they never influence the trajectory itself.
    """
    k = cfg.n_steps
    dt = 1.0 / k
    states = _init_states(seed, k, cfg.n_samples, shape)
    tracker = _BestTracker()
    for i in range(k):
        t = (k - i) / k
        denoise = cfg.denoise_last and i == k - 1
        noise = _ensemble_noise(seed, i, cfg.n_samples, shape)
        states = reverse_step(states, t, spec, score_fn, noise, dt, denoise=denoise)
        _check_magnitude(states, t)
        if labels is not None:
            tracker.update(mae(states.mean(axis=0), labels), states.mean(axis=0))
    best = tracker.best_pred if tracker.best_pred is not None else states.mean(axis=0)
    return ForecastEnsemble(states, best, tracker.trace)


def adaptive_reverse(
    spec_st: SdeSpec,
    spec_subvp: SdeSpec,
    score_fn,
    shape: tuple[int, ...],
    cfg: SamplerConfig,
    seed: int,
    labels: np.ndarray | None = None,
    selection_schedule: tuple[str, ...] | None = None,
) -> ForecastEnsemble:
    """Per-step choice between the ST and sub-VP reverse updates.

    Oracle mode (labels given): both candidates advance from the shared state
    with the same noise; whichever ensemble mean scores better against the
    labels is kept for every sample, ties to sub-VP. Replay mode
    (selection_schedule given): apply the recorded choices label-free.
    """
    if labels is None:
        labels = cfg.oracle_labels
    if labels is None and selection_schedule is None:
        raise MissingLabels("adaptive mode needs oracle labels or a selection schedule")
    k = cfg.n_steps
    if selection_schedule is not None:
        if len(selection_schedule) != k:
            raise ValueError(
                f"selection schedule has {len(selection_schedule)} entries for {k} steps"
            )
        bad = set(selection_schedule) - {"st", "subvp"}
        if bad:
            raise ValueError(f"selection schedule contains unknown kinds {sorted(bad)}")
    dt = 1.0 / k
    states = _init_states(seed, k, cfg.n_samples, shape)
    tracker = _BestTracker()
    chosen: list[str] = []
    for i in range(k):
        t = (k - i) / k
        denoise = cfg.denoise_last and i == k - 1
        noise = _ensemble_noise(seed, i, cfg.n_samples, shape)
        if selection_schedule is not None:
            kind = selection_schedule[i]
            spec = spec_st if kind == "st" else spec_subvp
            states = reverse_step(states, t, spec, score_fn, noise, dt, denoise=denoise)
        else:
            cand_sub = reverse_step(states, t, spec_subvp, score_fn, noise, dt, denoise=denoise)
            cand_st = reverse_step(states, t, spec_st, score_fn, noise, dt, denoise=denoise)
            metric_sub = mae(cand_sub.mean(axis=0), labels)
            metric_st = mae(cand_st.mean(axis=0), labels)
            if metric_st < metric_sub:
                kind, states = "st", cand_st
            else:
                kind, states = "subvp", cand_sub
        _check_magnitude(states, t)
        chosen.append(kind)
        if labels is not None:
            tracker.update(mae(states.mean(axis=0), labels), states.mean(axis=0))
    best = tracker.best_pred if tracker.best_pred is not None else states.mean(axis=0)
    return ForecastEnsemble(states, best, tracker.trace, tuple(chosen))


def model_score_fn(params: ScoreModelParams, window: WindowSample, graph: Graph,
                   n_samples: int):
    """Bind checkpoint, history conditioning, and graph into score_fn(x, t)."""
    cfg = params.config
    basis = cheb_basis(scaled_laplacian(graph), cfg.cheb_order)
    x_h = np.broadcast_to(window.x_h, (n_samples, *window.x_h.shape))
    tod = np.broadcast_to(window.p_h.time_of_day, (n_samples, cfg.history_len))
    dow = np.broadcast_to(window.p_h.day_of_week, (n_samples, cfg.history_len))

    def score_fn(x: np.ndarray, t: float) -> np.ndarray:
        t_vec = np.full(x.shape[0], t)
        return score_forward_batch(params, x, x_h, tod, dow, t_vec, basis).data

    return score_fn


def _check_window(params: ScoreModelParams, window: WindowSample) -> None:
    cfg = params.config
    want_h = (cfg.history_len, cfg.n_nodes, cfg.features)
    want_f = (cfg.horizon, cfg.n_nodes, cfg.features)
    if window.x_h.shape != want_h or window.x_f.shape != want_f:
        raise ConfigMismatch(
            f"window blocks {window.x_h.shape}/{window.x_f.shape} do not match "
            f"checkpoint history {want_h} / future {want_f}"
        )


def build_specs(graph: Graph, alpha: float,
                schedule: BetaSchedule | None = None) -> tuple[SdeSpec, SdeSpec]:
    """(ST, sub-VP) spec pair over the same noise schedule."""
    sched = schedule if schedule is not None else BetaSchedule()
    a_norm = normalize_adjacency(graph)
    return SdeSpec("ST", sched, alpha=alpha, adjacency=a_norm), SdeSpec("subVP", sched)


def forecast(
    params: ScoreModelParams,
    window: WindowSample,
    graph: Graph,
    cfg: SamplerConfig,
    seed: int,
    normalizer: Normalizer | None = None,
    labels: np.ndarray | None = None,
    beta_schedule: BetaSchedule | None = None,
    selection_schedule: tuple[str, ...] | None = None,
) -> ForecastEnsemble:
    """Run the configured sampling mode for one window, then denormalize.

    The window (and labels, if any) must be in normalized units; samples and
    best_tracked come back in real units when a normalizer is given.
    """
    _check_window(params, window)
    mcfg = params.config
    shape = (mcfg.horizon, mcfg.n_nodes, mcfg.features)
    spec_st, spec_subvp = build_specs(graph, cfg.alpha, beta_schedule)
    score_fn = model_score_fn(params, window, graph, cfg.n_samples)

    if cfg.mode == "subvp_only":
        ens = reverse_trajectory(spec_subvp, score_fn, shape, cfg, seed, labels=labels)
    elif cfg.mode == "st_only":
        ens = reverse_trajectory(spec_st, score_fn, shape, cfg, seed, labels=labels)
    else:
        ens = adaptive_reverse(spec_st, spec_subvp, score_fn, shape, cfg, seed,
                               labels=labels, selection_schedule=selection_schedule)

    if normalizer is None:
        return ens
    return ForecastEnsemble(
        normalizer.invert(ens.samples),
        normalizer.invert(ens.best_tracked),
        ens.per_step_metric,
        ens.chosen_kinds,
    )


def persistence_forecast(x_h: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last observed frame: the no-model baseline."""
    x_h = np.asarray(x_h, dtype=np.float64)
    return np.repeat(x_h[-1:], horizon, axis=0)


def write_ensemble_csv(samples: np.ndarray, path, meta: dict | None = None) -> None:
    """One row per (sample, horizon_step, node); features become value columns.

    meta, when given, lands in a `# k=v,...` comment line above the header.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n, h, nodes, d = samples.shape
    value_cols = ["value"] if d == 1 else [f"value_{j}" for j in range(d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta:
            fh.write("# " + ",".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["sample", "horizon_step", "node", *value_cols])
        for s in range(n):
            for t in range(h):
                for v in range(nodes):
                    writer.writerow(
                        [s, t, v, *(repr(float(x)) for x in samples[s, t, v])]
                    )


def read_ensemble_csv(path) -> np.ndarray:
    """Inverse of write_ensemble_csv; returns [n_samples, H, N, D]."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0][:3] != ["sample", "horizon_step", "node"]:
        raise ValueError("not an ensemble CSV: bad header")
    d = len(rows[0]) - 3
    body = rows[1:]
    if not body:
        raise ValueError("ensemble CSV has no rows")
    idx = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in body])
    vals = np.array([[float(x) for x in r[3:]] for r in body])
    n, h, nodes = (int(idx[:, j].max()) + 1 for j in range(3))
    if len(body) != n * h * nodes:
        raise ValueError(f"ensemble CSV has {len(body)} rows, expected {n * h * nodes}")
    out = np.empty((n, h, nodes, d))
    out[idx[:, 0], idx[:, 1], idx[:, 2]] = vals
    return out


def write_adaptive_trace(per_step_metric: list[float], path) -> None:
    """`step,metric` rows of the running-best metric."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "metric"])
        for step, metric in enumerate(per_step_metric):
            writer.writerow([step, repr(float(metric))])


def write_selection_schedule(kinds, path) -> None:
    """`step,kind` rows recording which SDE the adaptive run kept per step."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "kind"])
        for step, kind in enumerate(kinds):
            writer.writerow([step, kind])


def read_selection_schedule(path) -> tuple[str, ...]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0] != ["step", "kind"]:
        raise ValueError("not a selection schedule CSV: bad header")
    kinds = []
    for want_step, row in enumerate(rows[1:]):
        if len(row) != 2 or int(row[0]) != want_step:
            raise ValueError(f"selection schedule rows must be 'step,kind' in order, got {row}")
        kinds.append(row[1])
    return tuple(kinds)
