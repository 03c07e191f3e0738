"""
cPPAP 命令行入口

子命令：synth / preprocess / train / evaluate / ablate / stats / sweep
配置优先级：内置默认值 < JSON 配置文件（--config，或 manifest 旁的 config.json）< 命令行参数

退出码：0 成功；2 参数或配置错误（在任何计算之前检查）；1 运行时错误，
stderr 输出单行 "error: <ExceptionName>: <message>"。
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

from ppap_errors import ConfigurationError, PPAPError
from ppap_model import ABLATION_CONFIGS, ModelConfig, load_checkpoint, parse_config_label
from ppap_settings import configure_logging, worker_count
from ppap_training import (
    AblationReport,
    TrainingConfig,
    aggregate_runs,
    evaluate,
    participant_sweep,
    plot_sweep,
    read_runs_csv,
    run_ablation,
    train,
    write_runs_csv,
)
from soundscape_dataset import (
    CONFIG_SIDECAR,
    generate_synthetic_dataset,
    kfold_split,
    load_manifest,
    preprocess_manifest,
)

logger = logging.getLogger("ppap_cli")

MODEL_FLAGS = ("fusion", "include_participant", "include_visual", "embed_dim", "participant_dim", "dropout_rate")
TRAINING_FLAGS = ("lr", "batch_size", "max_epochs", "patience")
CONFIG_SECTIONS = ("model", "training")


class UsageError(Exception):
    """参数/配置错误，对应退出码 2"""


# ---- 参数解析 ----
def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _config_list(text: str) -> List[str]:
    if text.strip().lower() == "all":
        return list(ABLATION_CONFIGS)
    labels = [v.strip().lower() for v in text.split(",") if v.strip()]
    try:
        for label in labels:
            parse_config_label(label)
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not labels:
        raise argparse.ArgumentTypeError("expected at least one config label")
    return labels


def _dim(text: str) -> Any:
    if text.strip().lower() == "all":
        return "all"
    try:
        return int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--dim must be an integer or 'all', got {text!r}") from exc


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from exc
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _model_options() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group("model")
    group.add_argument("--config", type=Path, help="JSON 配置文件 {\"model\": {...}, \"training\": {...}}")
    group.add_argument("--preset", choices=("published", "miniature"), help="基础架构（默认 published）")
    group.add_argument("--fusion", choices=("ef", "mf", "lf"))
    ip = group.add_mutually_exclusive_group()
    ip.add_argument("--ip", dest="include_participant", action="store_true", default=None, help="包含参与者嵌入")
    ip.add_argument("--ep", dest="include_participant", action="store_false", default=None, help="排除参与者嵌入")
    iv = group.add_mutually_exclusive_group()
    iv.add_argument("--iv", dest="include_visual", action="store_true", default=None, help="包含视觉嵌入")
    iv.add_argument("--ev", dest="include_visual", action="store_false", default=None, help="排除视觉嵌入")
    group.add_argument("--embed-dim", dest="embed_dim", type=_positive_int)
    group.add_argument("--participant-dim", dest="participant_dim", type=_positive_int)
    group.add_argument("--dropout", dest="dropout_rate", type=float)
    return parser


def _training_options() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group("training")
    group.add_argument("--lr", type=float)
    group.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    group.add_argument("--epochs", dest="max_epochs", type=_positive_int)
    group.add_argument("--patience", type=_positive_int)
    return parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppap_cli", description="cPPAP soundscape pleasantness predictor")
    sub = parser.add_subparsers(dest="command", required=True)
    model_opts, training_opts = _model_options(), _training_options()

    p = sub.add_parser("synth", parents=[model_opts], help="生成合成数据集")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_synth, default_preset="miniature")

    p = sub.add_parser("preprocess", parents=[model_opts], help="原始音频/图像 -> .npy 张量缓存")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("train", parents=[model_opts, training_opts], help="训练单个模型")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--val-fold", dest="val_fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("."))
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="评估 checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--fold", type=int, help="只评估该 fold 的样本")
    p.add_argument("--seed", type=int, default=0, help="静音 masker 增益采样的种子")
    p.add_argument("--out", type=Path, default=Path("."))
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[model_opts, training_opts], help="配置 × fold × seed 消融实验")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--configs", type=_config_list, default=list(ABLATION_CONFIGS))
    p.add_argument("--folds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--seeds", type=_int_list, default=list(range(10)))
    p.add_argument("--num-comparisons", dest="num_comparisons", type=_positive_int)
    p.add_argument("--save-checkpoints", dest="save_checkpoints", action="store_true")
    p.add_argument("--out", type=Path, default=Path("."))
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("stats", help="对 runs.csv 做 Kruskal-Wallis + Bonferroni")
    p.add_argument("--runs", type=Path, required=True)
    p.add_argument("--num-comparisons", dest="num_comparisons", type=_positive_int)
    p.add_argument("--out", type=Path, default=Path("."))
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("sweep", help="参与者维度 ceteris-paribus 扫描")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, help="默认使用 checkpoint 中记录的训练 manifest")
    p.add_argument("--dim", type=_dim, required=True)
    p.add_argument("--grid", type=_positive_int, default=11, help="[0, 1] 上等距网格的点数")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", action="store_true", help="同时输出 SVG")
    p.add_argument("--out", type=Path, default=Path("."))
    p.set_defaults(handler=cmd_sweep)
    return parser


# ---- 配置 ----
def _read_config_file(path: Path) -> Dict[str, Dict[str, Any]]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    unknown = sorted(set(data) - set(CONFIG_SECTIONS))
    if unknown:
        raise UsageError(f"unknown config sections in {path}: {', '.join(unknown)}")
    return {section: dict(data.get(section) or {}) for section in CONFIG_SECTIONS}


def resolve_configs(args: argparse.Namespace, manifest: Optional[Path] = None) -> Tuple[ModelConfig, TrainingConfig]:
    """默认值 < 配置文件 < 命令行参数；任何未知键或非法值都在计算前报错。"""
    preset = args.preset or getattr(args, "default_preset", "published")
    sections: Dict[str, Dict[str, Any]] = {"model": {}, "training": {}}
    config_path = args.config
    if config_path is None and manifest is not None and (manifest.parent / CONFIG_SIDECAR).exists():
        config_path = manifest.parent / CONFIG_SIDECAR
    if config_path is not None:
        sections = _read_config_file(config_path)
        logger.info("Using config file %s", config_path)
    base = ModelConfig.miniature() if preset == "miniature" else ModelConfig()
    model_data = {**base.to_dict(), **sections["model"]}
    model_data.update({k: getattr(args, k) for k in MODEL_FLAGS if getattr(args, k, None) is not None})
    training_data = dict(sections["training"])
    training_data.update({k: getattr(args, k) for k in TRAINING_FLAGS if getattr(args, k, None) is not None})
    try:
        model_config = ModelConfig.from_dict(model_data)
        model_config.check_shapes()
        training_config = TrainingConfig.from_dict(training_data)
    except PPAPError as exc:
        raise UsageError(str(exc)) from exc
    return model_config, training_config


# ---- 子命令 ----
console = Console()


def cmd_synth(args: argparse.Namespace) -> int:
    model_config, _ = resolve_configs(args)
    manifest = generate_synthetic_dataset(args.n, args.seed, model_config, out_dir=args.out)
    console.print(f"wrote {len(manifest)} samples to {args.out / 'manifest.csv'}")
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    model_config, _ = resolve_configs(args, args.manifest)
    path = preprocess_manifest(args.manifest, args.out, model_config, workers=worker_count())
    console.print(f"wrote {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    model_config, training = resolve_configs(args, args.manifest)
    manifest = load_manifest(args.manifest, model_config=model_config)
    train_rows, val_rows = kfold_split(manifest, args.val_fold)
    workers = worker_count()
    ckpt = args.out / f"{model_config.label}_fold{args.val_fold}_seed{args.seed}.ckpt"
    result, _ = train(
        model_config, train_rows.samples(workers), val_rows.samples(workers), args.seed,
        training=training, fold=args.val_fold, checkpoint_path=ckpt, progress=sys.stderr.isatty(),
        metadata={"participant_names": manifest.schema.encoded_names,
                  "manifest": str(args.manifest.resolve())},
    )
    write_runs_csv([result], args.out / "runs.csv")
    console.print(f"{result.config} fold={result.fold} seed={result.seed}: val MSE={result.mse:.6f} "
                  f"({result.epochs_run} epochs), checkpoint {ckpt}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, model_config=model.config)
    if args.fold is not None:
        _, manifest = kfold_split(manifest, args.fold)
    result = evaluate(model, manifest.samples(worker_count()), seed=args.seed)
    result.write_csv(args.out / "predictions.csv")
    console.print(f"{model.config.label}: MSE={result.mse:.6f} over {len(result.predictions)} samples")
    return 0


def _report_table(report: AblationReport) -> Table:
    table = Table(title="Ablation")
    for column in ("config", "runs", "MSE mean ± std", "%Δ", "p (adj.)"):
        table.add_column(column)
    for row in report.rows:
        p_text = "" if np.isnan(row.p_adjusted) else f"{row.p_adjusted:.4f}{' *' if row.significant else ''}"
        table.add_row(row.config, f"{row.n_runs}/{row.n_runs + row.n_failed}",
                      f"{row.mean_mse:.4f} ± {row.std_mse:.4f}", f"{row.pct_delta:+.1f}", p_text)
    return table


def cmd_ablate(args: argparse.Namespace) -> int:
    model_config, training = resolve_configs(args, args.manifest)
    manifest = load_manifest(args.manifest, model_config=model_config)
    report = run_ablation(
        manifest.samples(worker_count()), args.seeds, configs=args.configs, folds=args.folds,
        model_config=model_config, training=training,
        checkpoint_dir=args.out / "checkpoints" if args.save_checkpoints else None,
        num_comparisons=args.num_comparisons, progress=sys.stderr.isatty(),
        metadata={"participant_names": manifest.schema.encoded_names,
                  "manifest": str(args.manifest.resolve())},
    )
    write_runs_csv(report.runs, args.out / "runs.csv")
    report.write_csv(args.out / "ablation.csv")
    console.print(_report_table(report))
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    runs = read_runs_csv(args.runs)
    report = aggregate_runs(runs, num_comparisons=args.num_comparisons)
    frame = report.to_frame()[["config", "n_runs", "mean_mse", "std_mse", "h_statistic", "p_value",
                               "p_adjusted", "significant"]]
    args.out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(args.out / "stats.csv", index=False)
    console.print(_report_table(report))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest_path = args.manifest
    if manifest_path is None:
        recorded = model.metadata.get("manifest")
        if not recorded:
            raise UsageError(f"--manifest is required: checkpoint {args.checkpoint} records no manifest")
        manifest_path = Path(recorded)
        logger.info("Using manifest %s recorded in %s", manifest_path, args.checkpoint)
    manifest = load_manifest(manifest_path, model_config=model.config)
    samples = manifest.samples(worker_count())
    grid = np.linspace(0.0, 1.0, args.grid)
    dims = range(model.config.participant_dim) if args.dim == "all" else [args.dim]
    for dim in dims:
        curve = participant_sweep(model, samples, dim, grid, seed=args.seed)
        path = curve.write_csv(args.out / f"sweep_{dim}.csv")
        if args.plot:
            plot_sweep(curve, args.out / f"sweep_{dim}.svg")
        console.print(f"wrote {path}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: ConfigurationError: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
