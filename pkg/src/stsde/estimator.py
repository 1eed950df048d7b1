"""Estimator facade: fit a score network on a series, sample forecast ensembles.

Wraps the functional training and sampling layers in the scikit-learn
parameter convention so the model composes with clone/get_params tooling.
Inputs are [T, N, D] series arrays; forecasts come back in real units.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .data import SeriesDataset, WindowSample, normalize_dataset, split, zscore_fit
from .graph import Graph, graph_from_edges
from .model import ModelConfig, PositionMarkers
from .sampler import SamplerConfig, forecast
from .sde import BetaSchedule, SdeSpec
from .train import TrainConfig, train


def _as_series_array(x, name: str) -> np.ndarray:
    arr = check_array(x, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be [T, N] or [T, N, D], got shape {arr.shape}")
    return arr


def _as_graph(graph, n_nodes: int) -> Graph:
    if isinstance(graph, Graph):
        g = graph
    else:
        a = check_array(graph, dtype=np.float64)
        if a.shape != (n_nodes, n_nodes):
            raise ValueError(f"adjacency must be ({n_nodes}, {n_nodes}), got {a.shape}")
        edges = [(i, j, float(a[i, j]))
                 for i in range(n_nodes) for j in range(i + 1, n_nodes) if a[i, j] != 0.0]
        g = graph_from_edges(n_nodes, edges)
    if g.n_nodes != n_nodes:
        raise ValueError(f"graph has {g.n_nodes} nodes, series has {n_nodes}")
    return g


class ScoreSdeForecaster(BaseEstimator):
    """Probabilistic multi-step forecaster driven by a denoising score network.

    fit() trains on chronological train/validation splits of the series;
    sample() integrates the reverse SDE to draw a forecast ensemble and
    predict() returns that ensemble's mean.
    """

    def __init__(
        self,
        st_channels: int = 32,
        hidden_dim: int = 64,
        embed_dim_time: int = 32,
        embed_dim_pos: int = 16,
        n_res_blocks: int = 2,
        channel_multipliers: tuple[int, ...] = (1, 2),
        cheb_order: int = 3,
        history_len: int = 12,
        horizon: int = 12,
        epochs: int = 90,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        t_min: float = 1e-3,
        kernel_mode: str = "subvp",
        max_grad_norm: float = 1.0,
        n_steps: int = 1000,
        n_samples: int = 30,
        alpha: float = 0.0,
        mode: str = "subvp_only",
        denoise_last: bool = True,
        seed: int = 0,
    ):
        self.st_channels = st_channels
        self.hidden_dim = hidden_dim
        self.embed_dim_time = embed_dim_time
        self.embed_dim_pos = embed_dim_pos
        self.n_res_blocks = n_res_blocks
        self.channel_multipliers = channel_multipliers
        self.cheb_order = cheb_order
        self.history_len = history_len
        self.horizon = horizon
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.t_min = t_min
        self.kernel_mode = kernel_mode
        self.max_grad_norm = max_grad_norm
        self.n_steps = n_steps
        self.n_samples = n_samples
        self.alpha = alpha
        self.mode = mode
        self.denoise_last = denoise_last
        self.seed = seed

    def fit(self, X, y=None, *, graph, steps_per_day: int = 288, start_weekday: int = 0):
        """Train on a [T, N, D] series; graph is a Graph or adjacency matrix."""
        values = _as_series_array(X, "X")
        ds = SeriesDataset(values, steps_per_day=steps_per_day, start_weekday=start_weekday)
        self.graph_ = _as_graph(graph, ds.n_nodes)
        model_cfg = ModelConfig(
            st_channels=self.st_channels,
            hidden_dim=self.hidden_dim,
            embed_dim_time=self.embed_dim_time,
            embed_dim_pos=self.embed_dim_pos,
            n_res_blocks=self.n_res_blocks,
            channel_multipliers=tuple(self.channel_multipliers),
            cheb_order=self.cheb_order,
            history_len=self.history_len,
            horizon=self.horizon,
            n_nodes=ds.n_nodes,
            features=ds.n_features,
            steps_per_day=steps_per_day,
        )
        train_cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            t_min=self.t_min,
            kernel_mode=self.kernel_mode,
            max_grad_norm=self.max_grad_norm,
        )
        train_part, val_part, _ = split(ds)
        self.normalizer_ = zscore_fit(train_part)
        if self.kernel_mode == "st":
            from .graph import normalize_adjacency

            spec = SdeSpec("ST", BetaSchedule(), alpha=self.alpha,
                           adjacency=normalize_adjacency(self.graph_))
        else:
            spec = SdeSpec("subVP", BetaSchedule())
        result = train(
            model_cfg, train_cfg,
            normalize_dataset(train_part, self.normalizer_),
            normalize_dataset(val_part, self.normalizer_),
            self.graph_, spec,
        )
        self.params_ = result.params
        self.history_ = result.history
        self.best_val_ = result.best_val
        self.steps_per_day_ = steps_per_day
        self.start_weekday_ = start_weekday
        return self

    def _window(self, X, t_index: int) -> WindowSample:
        history = _as_series_array(X, "X")
        cfg = self.params_.config
        if history.shape != (cfg.history_len, cfg.n_nodes, cfg.features):
            raise ValueError(
                f"history must be ({cfg.history_len}, {cfg.n_nodes}, {cfg.features}), "
                f"got {history.shape}"
            )
        idx = t_index + np.arange(cfg.history_len)
        tod = idx % self.steps_per_day_
        dow = (self.start_weekday_ + idx // self.steps_per_day_) % 7
        x_h = self.normalizer_.apply(history)
        x_f = np.zeros((cfg.horizon, cfg.n_nodes, cfg.features))
        return WindowSample(x_h=x_h, x_f=x_f, p_h=PositionMarkers(tod, dow))

    def sample(self, X, t_index: int = 0, labels=None) -> np.ndarray:
        """Forecast ensemble [n_samples, horizon, N, D] for the history X.

        t_index is the absolute position of X's first row, which pins the
        time-of-day and day-of-week conditioning. labels feed the adaptive
        mode's oracle selection and must be in real units.
        """
        if not hasattr(self, "params_"):
            raise NotFittedError("this forecaster is not fitted; call fit first")
        window = self._window(X, t_index)
        sampler_cfg = SamplerConfig(
            n_steps=self.n_steps,
            n_samples=self.n_samples,
            alpha=self.alpha,
            mode=self.mode,
            denoise_last=self.denoise_last,
        )
        norm_labels = None
        if labels is not None:
            norm_labels = self.normalizer_.apply(_as_series_array(labels, "labels"))
        ens = forecast(
            self.params_, window, self.graph_, sampler_cfg, seed=self.seed,
            normalizer=self.normalizer_, labels=norm_labels,
        )
        return ens.samples

    def predict(self, X, t_index: int = 0) -> np.ndarray:
        """Ensemble-mean forecast [horizon, N, D] for the history X."""
        return self.sample(X, t_index=t_index).mean(axis=0)
