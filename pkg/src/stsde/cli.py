"""Command-line pipeline: synth, train, forecast, evaluate, verify.

One config file (flat key=value text or nested JSON) drives every stage.
Precedence: schema defaults < config file < PROGEN_SEED env var (seed keys
only) < command-line overrides. Every command prints the sha256 digest of
the fully resolved config, and all file outputs are deterministic in
(config, seed).

Exit codes: 0 success, 1 usage or config error, 2 numerical divergence,
3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from .data import (
    SeriesDataset,
    load_series_csv,
    make_windows,
    normalize_dataset,
    save_series_csv,
    split,
    synth_generate,
    zscore_fit,
)
from .graph import Graph, load_graph
from .metrics import evaluate_ensemble, write_report
from .model import ModelConfig
from .sampler import (
    ConfigMismatch,
    SamplerConfig,
    forecast,
    read_ensemble_csv,
    read_selection_schedule,
    write_adaptive_trace,
    write_ensemble_csv,
    write_selection_schedule,
)
from .train import (
    DivergedLoss,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_curve,
)
from .sde import BetaSchedule, SdeSpec
from .verify import SUITES, SuiteFailure, run_suite, write_verify_report

# key -> (type tag, default); the single source of truth for RunConfig.
# Tags: int, float, bool, str, ints (comma-separated integer tuple).
_SCHEMA: dict[str, tuple[str, str]] = {
    "data.series": ("str", ""),
    "data.graph": ("str", ""),
    "data.nodes": ("int", "12"),
    "data.features": ("int", "1"),
    "data.split": ("str", "6:2:2"),
    "model.st_channels": ("int", "32"),
    "model.hidden_dim": ("int", "64"),
    "model.embed_dim_time": ("int", "32"),
    "model.embed_dim_pos": ("int", "16"),
    "model.n_res_blocks": ("int", "2"),
    "model.channel_multipliers": ("ints", "1,2"),
    "model.cheb_order": ("int", "3"),
    "model.history_len": ("int", "12"),
    "model.horizon": ("int", "12"),
    "train.epochs": ("int", "90"),
    "train.batch_size": ("int", "32"),
    "train.lr": ("float", "0.001"),
    "train.seed": ("int", "0"),
    "train.t_min": ("float", "0.001"),
    "train.lambda_mode": ("str", "sigma_sq"),
    "train.kernel_mode": ("str", "subvp"),
    "train.max_grad_norm": ("float", "1.0"),
    "sampler.n_steps": ("int", "1000"),
    "sampler.n_samples": ("int", "30"),
    "sampler.alpha": ("float", "0.0"),
    "sampler.mode": ("str", "subvp_only"),
    "sampler.denoise_last": ("bool", "true"),
    "sampler.seed": ("int", "0"),
    "sampler.oracle": ("bool", "false"),
    "sampler.calibration": ("str", ""),
    "sampler.window_index": ("int", "0"),
    "eval.alpha": ("float", "0.1"),
}

_SEED_KEYS = ("train.seed", "sampler.seed")


def _convert(key: str, raw: str):
    if key not in _SCHEMA:
        raise ValueError(f"unknown config key {key!r}")
    tag = _SCHEMA[key][0]
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if tag == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError as exc:
        raise ValueError(f"config key {key}: {exc}") from exc
    return raw


def default_config() -> dict:
    return {key: _convert(key, default) for key, (_, default) in _SCHEMA.items()}


def _stringify(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config_text(text: str) -> dict:
    """Flat `key=value` lines; `#` comments and blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = _convert(key.strip(), value)
    return out


def _flatten_json(obj: dict) -> dict:
    out = {}
    for key, value in obj.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                out[f"{key}.{sub}"] = v
        else:
            out[key] = value
    return out


def load_config(path: str) -> dict:
    """Read a config file; JSON objects (possibly nested one level) or flat text."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        return parse_config_text(text)
    if not isinstance(obj, dict):
        raise ValueError("JSON config must be an object")
    return {k: _convert(k, _stringify(v)) for k, v in _flatten_json(obj).items()}


def resolve_config(file_values: dict, overrides: dict | None = None) -> dict:
    """defaults <- file <- PROGEN_SEED <- explicit overrides; rejects unknown keys."""
    cfg = default_config()
    for key, value in file_values.items():
        if key not in _SCHEMA:
            raise ValueError(f"unknown config key {key!r}")
        cfg[key] = value
    env_seed = os.environ.get("PROGEN_SEED", "")
    if env_seed:
        for key in _SEED_KEYS:
            cfg[key] = _convert(key, env_seed)
    for key, value in (overrides or {}).items():
        cfg[key] = _convert(key, _stringify(value))
    return cfg


def config_digest(cfg: dict) -> str:
    text = "\n".join(f"{k}={_stringify(cfg[k])}" for k in sorted(cfg))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_config(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# stsde run configuration\n")
        for key in _SCHEMA:
            fh.write(f"{key}={_stringify(cfg[key])}\n")


def _parse_set_flags(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = _convert(key.strip(), value)
    return out


def _print_digest(cfg: dict) -> None:
    print(f"resolved config digest: {config_digest(cfg)}")


def _split_ratios(cfg: dict) -> tuple[int, int, int]:
    parts = cfg["data.split"].split(":")
    if len(parts) != 3:
        raise ValueError(f"data.split must be a:b:c, got {cfg['data.split']!r}")
    return tuple(int(p) for p in parts)


def _load_inputs(cfg: dict) -> tuple[SeriesDataset, Graph]:
    if not cfg["data.series"]:
        raise ValueError("data.series is required (path to a series CSV)")
    if not cfg["data.graph"]:
        raise ValueError("data.graph is required (path to an edge-list CSV)")
    ds = load_series_csv(cfg["data.series"], cfg["data.nodes"], cfg["data.features"])
    graph = load_graph(cfg["data.graph"], n_nodes=cfg["data.nodes"])
    return ds, graph


def _model_config(cfg: dict, ds: SeriesDataset) -> ModelConfig:
    return ModelConfig(
        st_channels=cfg["model.st_channels"],
        hidden_dim=cfg["model.hidden_dim"],
        embed_dim_time=cfg["model.embed_dim_time"],
        embed_dim_pos=cfg["model.embed_dim_pos"],
        n_res_blocks=cfg["model.n_res_blocks"],
        channel_multipliers=cfg["model.channel_multipliers"],
        cheb_order=cfg["model.cheb_order"],
        history_len=cfg["model.history_len"],
        horizon=cfg["model.horizon"],
        n_nodes=ds.n_nodes,
        features=ds.n_features,
        steps_per_day=ds.steps_per_day,
    )


def _sibling(path: str, suffix: str) -> str:
    stem, ext = os.path.splitext(path)
    return f"{stem}_{suffix}{ext or '.csv'}"


def cmd_synth(args) -> int:
    if args.nodes < 2:
        raise ValueError(f"--nodes must be >= 2 (graph needs at least one edge), got {args.nodes}")
    if args.steps < 1:
        raise ValueError(f"--steps must be >= 1, got {args.steps}")
    os.makedirs(args.out_dir, exist_ok=True)
    series_path = os.path.join(args.out_dir, "series.csv")
    graph_path = os.path.join(args.out_dir, "graph.csv")
    config_path = os.path.join(args.out_dir, "config.txt")

    ds, graph = synth_generate(args.nodes, args.steps, seed=args.seed)
    save_series_csv(ds, series_path)
    with open(graph_path, "w", encoding="utf-8") as fh:
        fh.write("# from,to,weight\n")
        a = graph.adjacency
        for i in range(graph.n_nodes):
            for j in range(i + 1, graph.n_nodes):
                if a[i, j] != 0.0:
                    fh.write(f"{i},{j},{repr(float(a[i, j]))}\n")

    cfg = resolve_config({}, {
        "data.series": series_path,
        "data.graph": graph_path,
        "data.nodes": args.nodes,
        "train.seed": args.seed,
        "sampler.seed": args.seed,
    })
    write_config(cfg, config_path)
    _print_digest(cfg)
    for path in (series_path, graph_path, config_path):
        print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(load_config(args.config), _parse_set_flags(args.set or []))
    _print_digest(cfg)
    ds, graph = _load_inputs(cfg)
    train_part, val_part, _ = split(ds, _split_ratios(cfg))
    norm = zscore_fit(train_part)
    model_cfg = _model_config(cfg, ds)
    train_cfg = TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.lr"],
        seed=cfg["train.seed"],
        t_min=cfg["train.t_min"],
        lambda_mode=cfg["train.lambda_mode"],
        kernel_mode=cfg["train.kernel_mode"],
        max_grad_norm=cfg["train.max_grad_norm"],
    )
    if train_cfg.kernel_mode == "st":
        from .graph import normalize_adjacency

        spec = SdeSpec("ST", BetaSchedule(), alpha=cfg["sampler.alpha"],
                       adjacency=normalize_adjacency(graph))
    else:
        spec = SdeSpec("subVP", BetaSchedule())
    result = train(
        model_cfg, train_cfg,
        normalize_dataset(train_part, norm), normalize_dataset(val_part, norm),
        graph, spec,
    )
    save_checkpoint(result.params, args.out)
    loss_path = os.path.splitext(args.out)[0] + "_loss.csv"
    write_loss_curve(result.history, loss_path)
    print(f"wrote {args.out}")
    print(f"wrote {loss_path}")
    print(f"best epoch {result.best_epoch}, "
          f"val {repr(float(result.best_val))} (initial {repr(float(result.initial_val))})")
    return 0


def cmd_forecast(args) -> int:
    overrides = _parse_set_flags(args.set or [])
    if args.mode is not None:
        overrides["sampler.mode"] = args.mode
    if args.window_index is not None:
        overrides["sampler.window_index"] = args.window_index
    cfg = resolve_config(load_config(args.config), overrides)
    _print_digest(cfg)
    ds, graph = _load_inputs(cfg)
    train_part, _, test_part = split(ds, _split_ratios(cfg))
    norm = zscore_fit(train_part)
    model_cfg = _model_config(cfg, ds)
    params = load_checkpoint(args.checkpoint)
    if params.config != model_cfg:
        raise ConfigMismatch(
            f"checkpoint config {params.config} does not match the run config {model_cfg}"
        )

    test_norm = normalize_dataset(test_part, norm)
    windows = make_windows(test_norm, model_cfg.history_len, model_cfg.horizon)
    idx = cfg["sampler.window_index"]
    if not 0 <= idx < len(windows):
        raise ValueError(f"window index {idx} outside [0, {len(windows)})")
    window = windows[idx]
    raw_window = make_windows(test_part, model_cfg.history_len, model_cfg.horizon)[idx]

    labels = window.x_f if cfg["sampler.oracle"] else None
    schedule = None
    if cfg["sampler.calibration"]:
        schedule = read_selection_schedule(cfg["sampler.calibration"])
    sampler_cfg = SamplerConfig(
        n_steps=cfg["sampler.n_steps"],
        n_samples=cfg["sampler.n_samples"],
        alpha=cfg["sampler.alpha"],
        mode=cfg["sampler.mode"],
        denoise_last=cfg["sampler.denoise_last"],
    )
    ens = forecast(
        params, window, graph, sampler_cfg, seed=cfg["sampler.seed"],
        normalizer=norm, labels=labels, selection_schedule=schedule,
    )

    meta = {
        "mode": cfg["sampler.mode"],
        "seed": cfg["sampler.seed"],
        "n_steps": cfg["sampler.n_steps"],
        "n_samples": cfg["sampler.n_samples"],
        "oracle": "true" if cfg["sampler.oracle"] else "false",
    }
    write_ensemble_csv(ens.samples, args.out, meta)
    print(f"wrote {args.out}")

    truth = SeriesDataset(
        raw_window.x_f, steps_per_day=ds.steps_per_day, start_weekday=ds.start_weekday,
        start_index=test_part.start_index + idx + model_cfg.history_len,
    )
    truth_path = _sibling(args.out, "truth")
    save_series_csv(truth, truth_path)
    print(f"wrote {truth_path}")

    if cfg["sampler.mode"] == "adaptive":
        if ens.per_step_metric:
            trace_path = _sibling(args.out, "trace")
            write_adaptive_trace(ens.per_step_metric, trace_path)
            print(f"wrote {trace_path}")
        if ens.chosen_kinds is not None:
            sched_path = _sibling(args.out, "schedule")
            write_selection_schedule(ens.chosen_kinds, sched_path)
            print(f"wrote {sched_path}")
    return 0


def cmd_evaluate(args) -> int:
    samples = read_ensemble_csv(args.pred)
    n, h, nodes, d = samples.shape
    truth = load_series_csv(args.truth, n_nodes=nodes, features=d)
    report = evaluate_ensemble(samples, truth.values, alpha=args.alpha)
    write_report(report, args.out, n_samples=n)
    print(f"wrote {args.out}")
    for name in ("mae", "rmse", "crps", "crps_normalized", "mis"):
        print(f"{name}={repr(float(getattr(report, name)))}")
    return 0


def cmd_verify(args) -> int:
    rows = run_suite(args.suite)
    write_verify_report(args.suite, rows, args.out)
    print(f"wrote {args.out}")
    failed = [r.name for r in rows if not r.passed]
    print(f"suite {args.suite}: {len(rows) - len(failed)}/{len(rows)} checks passed")
    if failed:
        raise SuiteFailure(f"suite {args.suite} failed: {', '.join(failed)}")
    return 0


class _Parser(argparse.ArgumentParser):
    # exit code 1 on usage errors; argparse's default of 2 is reserved for
    # numerical divergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stsde", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset, graph, and config")
    p.add_argument("--nodes", type=int, default=12)
    p.add_argument("--steps", type=int, default=2016)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the score network")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("forecast", help="sample a forecast ensemble from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("subvp_only", "st_only", "adaptive"))
    p.add_argument("--window-index", type=int, dest="window_index")
    p.add_argument("--out", required=True, help="ensemble CSV path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.set_defaults(fn=cmd_forecast)

    p = sub.add_parser("evaluate", help="score an ensemble CSV against the truth")
    p.add_argument("--pred", required=True, help="ensemble CSV")
    p.add_argument("--truth", required=True, help="truth series CSV")
    p.add_argument("--alpha", type=float, default=0.1, help="MIS interval level")
    p.add_argument("--out", default="eval_report.csv")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("verify", help="run a numerical verification suite")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--out", required=True, help="pass/fail report CSV")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SuiteFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FloatingPointError as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, DivergedLoss) else 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
