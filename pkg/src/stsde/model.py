"""Conditional denoising score network over a sensor graph.

The network consumes the noisy future window, the clean history window with
its time-of-day/day-of-week embeddings, the Chebyshev basis of the graph, and
the diffusion time t. History and future are concatenated along the time axis
so node alignment survives graph convolution; an encoder/decoder pair with
stride-2 temporal downsampling and nearest-neighbor upsampling processes the
joined sequence, and the head reads back the last H steps.

Internally everything runs on the [B, C, N, T] layout from tensor.py.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .graph import ChebBasis
from .tensor import (
    ShapeMismatch,
    Tape,
    Tensor,
    add,
    add_channel_bias,
    add_channel_vec,
    add_time_feature,
    cheb_apply,
    channel_mix,
    concat,
    conv_time,
    embedding_rows,
    linear,
    permute,
    reshape,
    row_affine,
    silu,
    slice_time,
    subsample_time,
    time_linear,
    upsample_time,
)

N_DOW = 7  # day-of-week table rows


class InvalidConfig(ValueError):
    pass


class OddDim(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class NonFiniteActivation(FloatingPointError):
    pass


class VersionMismatch(ValueError):
    pass


class CorruptPayload(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters of the score network."""

    st_channels: int = 32
    hidden_dim: int = 64
    embed_dim_time: int = 32
    embed_dim_pos: int = 16
    n_res_blocks: int = 2
    channel_multipliers: tuple[int, ...] = (1, 2)
    cheb_order: int = 3
    history_len: int = 12
    horizon: int = 12
    n_nodes: int = 12
    features: int = 1
    steps_per_day: int = 288

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        ints = {
            "st_channels": self.st_channels,
            "hidden_dim": self.hidden_dim,
            "n_res_blocks": self.n_res_blocks,
            "cheb_order": self.cheb_order,
            "history_len": self.history_len,
            "horizon": self.horizon,
            "n_nodes": self.n_nodes,
            "features": self.features,
            "steps_per_day": self.steps_per_day,
        }
        for name, v in ints.items():
            if not isinstance(v, int) or v < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {v!r}")
        for name, v in (("embed_dim_time", self.embed_dim_time), ("embed_dim_pos", self.embed_dim_pos)):
            if not isinstance(v, int) or v < 2 or v % 2 != 0:
                raise OddDim(f"{name} must be even and >= 2, got {v!r}")
        mults = self.channel_multipliers
        if len(mults) == 0:
            raise InvalidConfig("channel_multipliers must be nonempty")
        if any(m < 1 for m in mults) or any(b < a for a, b in zip(mults, mults[1:])):
            raise InvalidConfig(f"channel_multipliers must be nondecreasing positives, got {mults}")
        t_total = self.history_len + self.horizon
        if t_total % (2 ** (len(mults) - 1)) != 0:
            raise InvalidConfig(
                f"history_len+horizon={t_total} must be divisible by 2^(levels-1)="
                f"{2 ** (len(mults) - 1)} for the down/up-sampling round trip"
            )

    @property
    def n_levels(self) -> int:
        return len(self.channel_multipliers)

    def level_channels(self, i: int) -> int:
        return self.st_channels * self.channel_multipliers[i]


@dataclass(frozen=True)
class PositionMarkers:
    """Per-step time-of-day and day-of-week indices for a history window."""

    time_of_day: np.ndarray
    day_of_week: np.ndarray

    def __post_init__(self):
        tod = np.asarray(self.time_of_day, dtype=np.int64)
        dow = np.asarray(self.day_of_week, dtype=np.int64)
        if tod.shape != dow.shape or tod.ndim != 1:
            raise ShapeMismatch(f"marker shapes {tod.shape} vs {dow.shape}")
        object.__setattr__(self, "time_of_day", tod)
        object.__setattr__(self, "day_of_week", dow)


class ScoreModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def watch_all(self, tape: Tape) -> None:
        for t in self.tensors.values():
            tape.watch(t)

    def copy(self) -> "ScoreModelParams":
        return ScoreModelParams(self.config, {k: Tensor(v.data) for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def _block_param_shapes(in_c: int, out_c: int, k_cheb: int, conditioned: bool):
    shapes = [
        ("tconv1.k", (out_c, in_c, 3), in_c * 3),
        ("tconv1.b", (out_c,), in_c * 3),
    ]
    if conditioned:
        shapes += [("cond.scale", (out_c,), out_c), ("cond.shift", (out_c,), out_c)]
    shapes += [
        ("cheb.w", (out_c, k_cheb * out_c), k_cheb * out_c),
        ("cheb.b", (out_c,), k_cheb * out_c),
        ("tconv2.k", (out_c, out_c, 3), out_c * 3),
        ("tconv2.b", (out_c,), out_c * 3),
    ]
    if in_c != out_c:
        shapes.append(("res.w", (out_c, in_c), in_c))
    return shapes


def _param_inventory(cfg: ModelConfig):
    """Ordered (name, shape, fan_in) list; the single source of truth for init,
    counting, and checkpoint completeness checks."""
    half = cfg.embed_dim_pos // 2
    inv = [
        ("pos.tod", (cfg.steps_per_day, half), half),
        ("pos.dow", (N_DOW, half), half),
        ("pos.proj", (cfg.embed_dim_pos, cfg.features), cfg.embed_dim_pos),
        ("tmlp.w1", (cfg.embed_dim_time, cfg.hidden_dim), cfg.embed_dim_time),
        ("tmlp.b1", (cfg.hidden_dim,), cfg.embed_dim_time),
        ("tmlp.w2", (cfg.hidden_dim, cfg.level_channels(0)), cfg.hidden_dim),
        ("tmlp.b2", (cfg.level_channels(0),), cfg.hidden_dim),
        ("lift.w", (cfg.level_channels(0), cfg.features), cfg.features),
        ("lift.b", (cfg.level_channels(0),), cfg.features),
    ]
    for i in range(cfg.n_levels):
        ch = cfg.level_channels(i)
        prev = cfg.level_channels(i - 1) if i > 0 else ch
        for j in range(cfg.n_res_blocks):
            in_c = prev if j == 0 else ch
            conditioned = i == 0 and j == 0
            for name, shape, fan in _block_param_shapes(in_c, ch, cfg.cheb_order, conditioned):
                inv.append((f"enc{i}.block{j}.{name}", shape, fan))
        if i < cfg.n_levels - 1:
            inv.append((f"down{i}.k", (ch, ch, 3), ch * 3))
            inv.append((f"down{i}.b", (ch,), ch * 3))
    for i in range(cfg.n_levels - 2, -1, -1):
        ch = cfg.level_channels(i)
        above = cfg.level_channels(i + 1)
        inv.append((f"dec{i}.up.k", (above, above, 3), above * 3))
        inv.append((f"dec{i}.up.b", (above,), above * 3))
        for j in range(cfg.n_res_blocks):
            in_c = above + ch if j == 0 else ch
            for name, shape, fan in _block_param_shapes(in_c, ch, cfg.cheb_order, False):
                inv.append((f"dec{i}.block{j}.{name}", shape, fan))
    inv.append(("head.w", (cfg.features, cfg.level_channels(0)), cfg.level_channels(0)))
    inv.append(("head.b", (cfg.features,), cfg.level_channels(0)))
    return inv


def init_params(cfg: ModelConfig, seed: int) -> ScoreModelParams:
    """Scaled-uniform (fan-in) initialization, bit-reproducible from the seed."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape, fan_in in _param_inventory(cfg):
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape))
    return ScoreModelParams(cfg, tensors)


def time_embedding_array(t: float, dim: int) -> np.ndarray:
    if dim % 2 != 0 or dim < 2:
        raise OddDim(f"time embedding dim must be even and >= 2, got {dim}")
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t={t} outside [0, 1]")
    k = np.arange(dim // 2)
    omega = 10000.0 ** (-2.0 * k / dim)
    angle = 1000.0 * t * omega
    return np.concatenate([np.sin(angle), np.cos(angle)])


def time_embedding(t: float, dim: int) -> Tensor:
    """Sinusoidal embedding of diffusion time, t mapped to pseudo-step 1000t."""
    return Tensor(time_embedding_array(t, dim))


def _check_markers(cfg: ModelConfig, tod: np.ndarray, dow: np.ndarray) -> None:
    if tod.size and (tod.min() < 0 or tod.max() >= cfg.steps_per_day):
        raise IndexOutOfRange(f"time_of_day outside [0, {cfg.steps_per_day})")
    if dow.size and (dow.min() < 0 or dow.max() >= N_DOW):
        raise IndexOutOfRange(f"day_of_week outside [0, {N_DOW})")


def position_embedding_batch(params: ScoreModelParams, tod: np.ndarray, dow: np.ndarray) -> Tensor:
    """Lookup [B,L] marker indices -> [B,L,embed_dim_pos] learned rows."""
    cfg = params.config
    tod = np.asarray(tod, dtype=np.int64)
    dow = np.asarray(dow, dtype=np.int64)
    if tod.shape != dow.shape or tod.ndim != 2:
        raise ShapeMismatch(f"marker batches {tod.shape} vs {dow.shape}")
    _check_markers(cfg, tod, dow)
    e_tod = embedding_rows(params["pos.tod"], tod)
    e_dow = embedding_rows(params["pos.dow"], dow)
    return concat(e_tod, e_dow, axis=2)


def position_embedding(params: ScoreModelParams, p: PositionMarkers) -> Tensor:
    """Single-window variant: [L] markers -> [L, embed_dim_pos]."""
    out = position_embedding_batch(params, p.time_of_day[None, :], p.day_of_week[None, :])
    return reshape(out, (out.data.shape[1], out.data.shape[2]))


def st_block(
    params: ScoreModelParams,
    prefix: str,
    x: Tensor,
    cheb_stack: np.ndarray,
    t_cond: Tensor | None = None,
) -> Tensor:
    """Residual spatiotemporal block on [B,C,N,T].

    y = x_res + TConv(SiLU(ChebConv(SiLU(TConv(x)) [+ scale*t_cond + shift])))
    The Chebyshev convolution stacks the K fixed node operators and mixes all
    K*C channels at once, which equals sum_k T_k(L~) x W_k.
    """
    p = params.tensors
    h = add_channel_bias(conv_time(x, p[prefix + ".tconv1.k"]), p[prefix + ".tconv1.b"])
    h = silu(h)
    if t_cond is not None:
        v = row_affine(t_cond, p[prefix + ".cond.scale"], p[prefix + ".cond.shift"])
        h = add_channel_vec(h, v)
    h = channel_mix(cheb_apply(h, cheb_stack), p[prefix + ".cheb.w"], p[prefix + ".cheb.b"])
    h = silu(h)
    h = add_channel_bias(conv_time(h, p[prefix + ".tconv2.k"]), p[prefix + ".tconv2.b"])
    res_key = prefix + ".res.w"
    x_res = channel_mix(x, p[res_key]) if res_key in p else x
    return add(x_res, h)


def _time_cond(params: ScoreModelParams, t: np.ndarray) -> Tensor:
    cfg = params.config
    emb = np.stack([time_embedding_array(float(tb), cfg.embed_dim_time) for tb in t])
    h = linear(Tensor(emb), params["tmlp.w1"], params["tmlp.b1"])
    h = silu(h)
    return linear(h, params["tmlp.w2"], params["tmlp.b2"])


def score_forward_batch(
    params: ScoreModelParams,
    x_tilde_f: np.ndarray,
    x_h: np.ndarray,
    tod: np.ndarray,
    dow: np.ndarray,
    t: np.ndarray,
    cheb: ChebBasis,
) -> Tensor:
    """Batched score network: returns the score estimate as [B,H,N,D]."""
    cfg = params.config
    x_tilde_f = np.asarray(x_tilde_f, dtype=np.float64)
    x_h = np.asarray(x_h, dtype=np.float64)
    b = x_tilde_f.shape[0]
    if x_tilde_f.shape != (b, cfg.horizon, cfg.n_nodes, cfg.features):
        raise ShapeMismatch(f"x_tilde_f {x_tilde_f.shape} vs config "
                            f"{(b, cfg.horizon, cfg.n_nodes, cfg.features)}")
    if x_h.shape != (b, cfg.history_len, cfg.n_nodes, cfg.features):
        raise ShapeMismatch(f"x_h {x_h.shape} vs config "
                            f"{(b, cfg.history_len, cfg.n_nodes, cfg.features)}")
    tod = np.asarray(tod, dtype=np.int64)
    dow = np.asarray(dow, dtype=np.int64)
    if tod.shape != (b, cfg.history_len) or dow.shape != (b, cfg.history_len):
        raise ShapeMismatch(f"markers {tod.shape}/{dow.shape} vs {(b, cfg.history_len)}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.shape != (b,):
        raise ShapeMismatch(f"t {t.shape} vs batch {b}")
    if cheb.order != cfg.cheb_order or cheb.polys[0].shape[0] != cfg.n_nodes:
        raise ShapeMismatch("chebyshev basis does not match config")
    cheb_stack = cheb.stacked()

    xt = Tensor(np.ascontiguousarray(x_tilde_f.transpose(0, 3, 2, 1)))  # [B,D,N,H]
    xh = Tensor(np.ascontiguousarray(x_h.transpose(0, 3, 2, 1)))  # [B,D,N,L]

    pos = position_embedding_batch(params, tod, dow)  # [B,L,Ep]
    xh = add_time_feature(xh, time_linear(pos, params["pos.proj"]))
    x = concat(xh, xt, axis=3)  # history first, then noisy future

    h = add_channel_bias(channel_mix(x, params["lift.w"]), params["lift.b"])
    t_cond = _time_cond(params, t)

    skips: list[Tensor] = []
    for i in range(cfg.n_levels):
        for j in range(cfg.n_res_blocks):
            cond = t_cond if (i == 0 and j == 0) else None
            h = st_block(params, f"enc{i}.block{j}", h, cheb_stack, t_cond=cond)
        if i < cfg.n_levels - 1:
            skips.append(h)
            h = add_channel_bias(conv_time(h, params[f"down{i}.k"]), params[f"down{i}.b"])
            h = subsample_time(h, 2)

    for i in range(cfg.n_levels - 2, -1, -1):
        h = upsample_time(h, 2)
        h = add_channel_bias(conv_time(h, params[f"dec{i}.up.k"]), params[f"dec{i}.up.b"])
        h = concat(h, skips[i], axis=1)
        for j in range(cfg.n_res_blocks):
            h = st_block(params, f"dec{i}.block{j}", h, cheb_stack)

    h = add_channel_bias(channel_mix(h, params["head.w"]), params["head.b"])
    t_total = cfg.history_len + cfg.horizon
    h = slice_time(h, t_total - cfg.horizon, t_total)
    out = permute(h, (0, 3, 2, 1))  # [B,H,N,D]
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteActivation("score network produced non-finite values")
    return out


def score_forward(
    params: ScoreModelParams,
    x_tilde_f: np.ndarray,
    x_h: np.ndarray,
    p_h: PositionMarkers,
    t: float,
    cheb: ChebBasis,
) -> Tensor:
    """Single-window score estimate s_theta(x_tilde_F, x_H, G, t, P_H) -> [H,N,D]."""
    cfg = params.config
    out = score_forward_batch(
        params,
        np.asarray(x_tilde_f)[None],
        np.asarray(x_h)[None],
        p_h.time_of_day[None, :],
        p_h.day_of_week[None, :],
        np.array([t]),
        cheb,
    )
    return reshape(out, (cfg.horizon, cfg.n_nodes, cfg.features))


# ---------------------------------------------------------------------------
# checkpoint serialization

MAGIC = b"STSDNET1"
VERSION = 1

_CONFIG_INT_KEYS = (
    "st_channels", "hidden_dim", "embed_dim_time", "embed_dim_pos", "n_res_blocks",
    "cheb_order", "history_len", "horizon", "n_nodes", "features", "steps_per_day",
)


def _config_to_text(cfg: ModelConfig) -> str:
    lines = [f"{k}={getattr(cfg, k)}" for k in _CONFIG_INT_KEYS]
    lines.append("channel_multipliers=" + ",".join(str(m) for m in cfg.channel_multipliers))
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> ModelConfig:
    kwargs = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key in _CONFIG_INT_KEYS:
            kwargs[key] = int(value)
        elif key == "channel_multipliers":
            kwargs[key] = tuple(int(v) for v in value.split(","))
        else:
            raise CorruptPayload(f"unknown config key {key!r}")
    try:
        return ModelConfig(**kwargs)
    except (InvalidConfig, OddDim, TypeError) as exc:
        raise CorruptPayload(f"bad checkpoint config: {exc}") from exc


def save_params(params: ScoreModelParams, path) -> None:
    """Write the versioned binary checkpoint (header + named f64 tensors)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg_bytes = _config_to_text(params.config).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, tensor in params.tensors.items():
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        arr = tensor.data
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.astype("<f8", copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptPayload(f"unexpected end of checkpoint (wanted {n} bytes, got {len(data)})")
    return data


def load_params(path) -> ScoreModelParams:
    """Read a checkpoint back; bit-identical round trip with save_params."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CorruptPayload("bad magic; not a score-model checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        cfg = _config_from_text(_read_exact(fh, cfg_len).decode("utf-8"))
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, Tensor] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            count = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 8 * count)
            tensors[name] = Tensor(np.frombuffer(payload, dtype="<f8").reshape(dims))
        if fh.read(1):
            raise CorruptPayload("trailing bytes after the last tensor")
    expected = {name: shape for name, shape, _ in _param_inventory(cfg)}
    got = {name: t.data.shape for name, t in tensors.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise CorruptPayload(f"tensor inventory mismatch (missing {missing}, extra {extra})")
    return ScoreModelParams(cfg, tensors)
