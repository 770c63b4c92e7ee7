"""``dtsformer`` command line: generate, train, evaluate, ablate, analyze.

Runs are driven by a flat ``key = value`` config file whose keys carry a
section prefix (``data.``, ``model.``, ``train.``, ``synthetic.``) plus the
top-level ``seed``. Every command writes ``config.resolved`` into its output
directory (and echoes it on stdout) so a run can be replayed from there.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataflow import (
    ConfigError,
    FlowSeries,
    SyntheticConfig,
    ZScoreScaler,
    generate_synthetic,
    load_csv,
    make_windows,
    write_csv,
    zscore_fit_apply,
)
from .evalbench import (
    VariantSpec,
    build_variant,
    dominant_period,
    export_patch_coverage,
    horizon_reports,
    improvement,
    write_metric_csv,
)
from .fusion import VARIANTS, CheckpointMismatchError, DTSFormer, ModelConfig, StageError, load_checkpoint, save_checkpoint
from .numerics import NumericError
from .training import TrainConfig, evaluate, train

log = logging.getLogger("dtsformer")

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2


# --------------------------------------------------------------------------- config


@dataclass
class DataSection:
    csv: str = ""  # empty: generate the synthetic series described by the synthetic section
    m: int = 24
    n: int = 24
    splits: str = "0.7,0.1,0.2"
    naive_period: int = 48

    def split_tuple(self) -> tuple[float, float, float]:
        try:
            parts = tuple(float(p) for p in self.splits.split(","))
        except ValueError as exc:
            raise ConfigError(f"data.splits must be three comma-separated numbers, got {self.splits!r}") from exc
        if len(parts) != 3:
            raise ConfigError(f"data.splits must have three entries, got {self.splits!r}")
        return parts


@dataclass
class ModelSection:
    scales: int = 3
    d_model: int = 16
    d_k: int = 0
    heads: int = 8
    threshold: float = 0.6
    e_layers: int = 4
    d_ff: int = 256
    variant: str = "FULL"
    fixed_patch_length: int = 6


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    batch_size: int = 64
    patience: int = 40
    max_epochs: int = 200
    min_delta: float = 1e-6


@dataclass
class SyntheticSection:
    length: int = 4096
    base_period: int = 48
    regime_count: int = 3
    spike_rate: float = 1.0
    spike_magnitude: float = 3.0
    noise_std: float = 0.05


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    seed: int = 0

    SECTIONS = ("data", "model", "train", "synthetic")

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        cfg = cls()
        for key, raw in pairs.items():
            if key == "seed":
                cfg.seed = _parse_value(int, raw, key)
                continue
            section, _, name = key.partition(".")
            if section not in cls.SECTIONS or not name:
                raise ConfigError(f"unknown config key: {key}")
            target = getattr(cfg, section)
            types = {f.name: f.type for f in dataclasses.fields(target)}
            if name not in types:
                raise ConfigError(f"unknown config key: {key}")
            setattr(target, name, _parse_value(types[name], raw, key))
        if not cfg.model.d_k:
            cfg.model.d_k = cfg.model.scales * cfg.model.d_model
        return cfg

    def pairs(self) -> list[tuple[str, str]]:
        out = [("seed", str(self.seed))]
        for section in self.SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                out.append((f"{section}.{k}", str(v)))
        return out

    def render(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.pairs())

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(seed=self.seed, **dataclasses.asdict(self.synthetic)).validate()

    def model_config(self, variant: Optional[str] = None) -> ModelConfig:
        kw = dataclasses.asdict(self.model)
        if variant is not None:
            kw["variant"] = variant
        return ModelConfig(input_len=self.data.m, horizon=self.data.n, seed=self.seed, **kw).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **dataclasses.asdict(self.train)).validate()


def _parse_value(typ, raw: str, key: str):
    typ = {"int": int, "float": float, "str": str}.get(typ, typ)
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        pairs[key.strip()] = value.strip()
    return pairs


def load_run_config(path: Optional[str], seed: Optional[int]) -> RunConfig:
    pairs = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        pairs = parse_config_text(text, path)
    cfg = RunConfig.from_pairs(pairs)
    if seed is not None:
        cfg.seed = seed
    return cfg


# --------------------------------------------------------------------------- data plumbing


@dataclass
class PreparedData:
    series: FlowSeries  # normalized, norm set
    raw: np.ndarray
    scaler: ZScoreScaler
    splits: tuple  # (train, val, test) WindowSets


def prepare_data(cfg: RunConfig) -> PreparedData:
    series = load_csv(cfg.data.csv) if cfg.data.csv else generate_synthetic(cfg.synthetic_config())
    splits = cfg.data.split_tuple()
    normed = zscore_fit_apply(series, splits[0])
    scaler = ZScoreScaler()
    scaler.mean_, scaler.scale_ = normed.norm
    windows = make_windows(normed, cfg.data.m, cfg.data.n, splits)
    return PreparedData(normed, series.values, scaler, windows)


def naive_forecast(raw: np.ndarray, anchors: np.ndarray, n: int, period: int):
    """Seasonal-naive forecasts read from the raw series; windows too early for one period are dropped."""
    keep = anchors >= period
    idx = anchors[keep, None] - period + (np.arange(n)[None, :] % period)
    return raw[idx], keep


def _split_by_name(data: PreparedData, name: str):
    return data.splits[("train", "val", "test").index(name)]


def _metric_rows(label, pred, truth):
    return [(label, r) for r in horizon_reports(pred, truth)]


def _naive_rows(data: PreparedData, windows, cfg: RunConfig):
    pred, keep = naive_forecast(data.raw, windows.anchors, cfg.data.n, cfg.data.naive_period)
    if not keep.any():
        log.warning("no window has a full period of history; naive baseline skipped")
        return []
    truth = data.scaler.inverse_transform(windows.target[keep])
    return _metric_rows("NAIVE", pred, truth)


def _fit(cfg: RunConfig, data: PreparedData, variant: Optional[str] = None):
    train_set, val_set, _ = data.splits
    model = build_variant(VariantSpec(variant or cfg.model.variant, cfg.model.fixed_patch_length), cfg.model_config())
    return train(model, train_set, val_set, cfg.train_config(),
                 on_epoch=lambda r: log.info("epoch %d train %.6f val %.6f", r.epoch, r.train_loss, r.val_loss))


def _echo(cfg: RunConfig, out: Path) -> None:
    text = cfg.render()
    (out / "config.resolved").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


# --------------------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, out: Path, args) -> None:
    series = generate_synthetic(cfg.synthetic_config())
    write_csv(series, out / "series.csv")
    _echo(cfg, out)


def cmd_train(cfg: RunConfig, out: Path, args) -> None:
    data = prepare_data(cfg)
    model, history = _fit(cfg, data)
    extra = {"norm": [data.scaler.mean_, data.scaler.scale_], "best_epoch": history.best_epoch,
             "stopping_reason": history.stopping_reason}
    save_checkpoint(model, out / "checkpoint.npz", extra, model.adam_state.moments)
    history.to_csv(out / "history.csv")
    _echo(cfg, out)


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> None:
    data = prepare_data(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.npz"
    model, _ = load_checkpoint(ckpt, expected=cfg.model_config())
    windows = _split_by_name(data, args.split)
    result = evaluate(model, windows, data.scaler)
    rows = _metric_rows(model.config.variant, result.predictions, result.targets)
    rows += _naive_rows(data, windows, cfg)
    write_metric_csv(rows, out / "metrics.csv")
    _echo(cfg, out)


def cmd_ablate(cfg: RunConfig, out: Path, args) -> None:
    data = prepare_data(cfg)
    test = data.splits[2]
    by_variant = {}
    for variant in VARIANTS:
        model, history = _fit(cfg, data, variant)
        result = evaluate(model, test, data.scaler)
        by_variant[variant] = _metric_rows(variant, result.predictions, result.targets)
        history.to_csv(out / f"history_{variant}.csv")
    # interleave so each horizon block lists the four variants together
    rows = [row for group in zip(*by_variant.values()) for row in group]
    write_metric_csv(rows, out / "ablation.csv")
    write_metric_csv(_naive_rows(data, test, cfg), out / "naive.csv")
    with open(out / "improvement.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("variant,horizon_steps,mse_improvement_percent,mae_improvement_percent,mape_improvement_percent\n")
        full = by_variant["FULL"]
        for variant in VARIANTS[1:]:
            for (_, ours), (_, base) in zip(full, by_variant[variant]):
                ratios = [_safe_improvement(getattr(base, k), getattr(ours, k)) for k in ("mse", "mae", "mape_percent")]
                fh.write(f"{variant},{ours.horizon_steps}," + ",".join(f"{r:.6f}" for r in ratios) + "\n")
    _echo(cfg, out)


def _safe_improvement(base: float, ours: float) -> float:
    if base == 0 or math.isnan(base):
        return math.nan
    return improvement(base, ours)


def cmd_analyze(cfg: RunConfig, out: Path, args) -> None:
    data = prepare_data(cfg)
    period = dominant_period(data.raw)
    (out / "period.csv").write_text(f"dominant_period_steps\n{period}\n", encoding="utf-8")
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint, expected=cfg.model_config())
    else:
        model = DTSFormer(cfg.model_config())
    export_patch_coverage(model, out / "coverage.csv")
    _echo(cfg, out)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, help="overrides the config's seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    parser = argparse.ArgumentParser(prog="dtsformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic series CSV")
    sub.add_parser("train", parents=[common], help="train one model, write checkpoint and history")
    ev = sub.add_parser("evaluate", parents=[common], help="per-horizon metrics of a checkpoint")
    ev.add_argument("--checkpoint", help="defaults to OUT/checkpoint.npz")
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    sub.add_parser("ablate", parents=[common], help="train FULL/FP/LM/LT and compare on the test split")
    an = sub.add_parser("analyze", parents=[common], help="dominant period and patch coverage")
    an.add_argument("--checkpoint", help="model whose patches are exported (default: freshly initialized)")
    return parser


def _exit_code(exc: BaseException) -> int:
    cause = exc.__cause__ if isinstance(exc, StageError) and exc.__cause__ is not None else exc
    if isinstance(cause, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(cause, (ValueError, OSError, KeyError, IndexError, CheckpointMismatchError)):
        return EXIT_INPUT
    return EXIT_NUMERIC


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except Exception as exc:  # every failure becomes one stderr line and an exit code
        code = _exit_code(exc)
        message = " ".join(str(exc).split())
        print(f"dtsformer: error: code={code} type={type(exc).__name__} message={message}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
