"""
训练与实验：mini-batch Adam 训练循环、评估、消融实验（配置 × fold × seed）、
Kruskal-Wallis + Bonferroni 显著性检验、参与者维度的 ceteris-paribus 扫描

输出文件：
- runs.csv：每次训练一行（config, fold, seed, status, mse, epochs_run, best_epoch, error, curve）
- ablation.csv：每个配置一行（均值 ± 标准差、相对基线的 %Δ、校正后的 p 值）
- sweep_<dim>.csv：扫描曲线（grid_value, mean_prediction, training_mean）
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from ppap_errors import ConfigurationError, NumericError, TrainingDivergedError, ValidationError
from ppap_layers import Mode
from ppap_loss import Batch, gaussian_nll, mse
from ppap_model import (
    BASELINE_LABEL,
    ABLATION_CONFIGS,
    ContextualPPAP,
    ModelConfig,
    ModelInputs,
    PredictedDistribution,
    load_checkpoint,
    parse_config_label,
    save_checkpoint,
)
from ppap_settings import worker_count
from soundscape_dataset import Sample
from soundscape_features import GainStats, effective_gain
from tensor_autodiff import AdamOptimizer

logger = logging.getLogger(__name__)

SIGNIFICANCE_LEVEL = 0.05


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("max_epochs and patience must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {', '.join(unknown)}")
        try:
            return cls(**dict(data))
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid training config: {exc}") from exc


@dataclass
class RunResult:
    """一次 (config, fold, seed) 训练的结果"""

    config: str
    fold: int
    seed: int
    mse: float
    epochs_run: int
    best_epoch: int = 0
    curve: List[Tuple[int, float, float]] = field(default_factory=list)
    status: str = "ok"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def sort_key(self) -> Tuple[int, str, int, int]:
        order = ABLATION_CONFIGS.index(self.config) if self.config in ABLATION_CONFIGS else len(ABLATION_CONFIGS)
        return order, self.config, self.fold, self.seed


# ---- 数据组装 ----
def _batch_slices(n: int, batch_size: int) -> List[slice]:
    """按 batch_size 切分；末尾只剩 1 个样本时并入前一个 batch。"""
    bounds = list(range(0, n, batch_size)) + [n]
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    if len(slices) > 1 and slices[-1].stop - slices[-1].start == 1:
        tail = slices.pop()
        slices[-1] = slice(slices[-1].start, tail.stop)
    return slices


def draw_gains(samples: Sequence[Sample], stats_: Optional[GainStats], rng: np.random.Generator) -> np.ndarray:
    return np.array([effective_gain(s.is_silent_masker, s.gamma, stats_, rng) for s in samples])


def predict_arrays(model: ContextualPPAP, inputs: ModelInputs, batch_size: int = 32) -> Dict[str, np.ndarray]:
    """评估模式下分块前向，返回 mu / log_sigma（LF 另有 adapted_*）。"""
    parts: Dict[str, List[np.ndarray]] = {"mu": [], "log_sigma": [], "adapted_mu": [], "adapted_log_sigma": []}
    for start in range(0, len(inputs), batch_size):
        out = model.forward_batch(inputs.take(slice(start, start + batch_size)), Mode.EVAL)
        parts["mu"].append(out.mu.data)
        parts["log_sigma"].append(out.log_sigma.data)
        if out.adapted_mu is not None:
            parts["adapted_mu"].append(out.adapted_mu.data)
            parts["adapted_log_sigma"].append(out.adapted_log_sigma.data)
    return {name: np.concatenate(values) for name, values in parts.items() if values}


def _final(arrays: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    if "adapted_mu" in arrays:
        return arrays["adapted_mu"], arrays["adapted_log_sigma"]
    return arrays["mu"], arrays["log_sigma"]


def _distributions(arrays: Dict[str, np.ndarray]) -> List[PredictedDistribution]:
    adapted = "adapted_mu" in arrays
    return [
        PredictedDistribution(
            mu=float(arrays["mu"][i]),
            log_sigma=float(arrays["log_sigma"][i]),
            adapted_mu=float(arrays["adapted_mu"][i]) if adapted else None,
            adapted_log_sigma=float(arrays["adapted_log_sigma"][i]) if adapted else None,
        )
        for i in range(len(arrays["mu"]))
    ]


# ---- 训练 ----
def train(
    model_config: ModelConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    seed: int,
    training: Optional[TrainingConfig] = None,
    fold: int = -1,
    checkpoint_path: Optional[Union[str, Path]] = None,
    progress: bool = False,
    metadata: Optional[Mapping[str, Any]] = None,
) -> Tuple[RunResult, ContextualPPAP]:
    """
    最小化高斯 NLL 训练一个模型

    seed 通过 SeedSequence 派生出四个独立的随机流：初始化、打乱顺序、dropout、静音增益采样。
    保留验证集 J 最好的那一轮参数；连续 patience 轮没有改进则提前停止。

    Args:
        model_config: 模型配置
        train_samples: 训练样本
        val_samples: 验证样本
        seed: 随机种子
        training: 优化超参数
        fold: 仅用于记录
        checkpoint_path: 给出时写出最佳参数的 checkpoint
        progress: 是否显示 tqdm 进度条
        metadata: 额外写入 checkpoint 的信息（如 participant_names）

    Returns:
        (RunResult, 恢复为最佳参数的模型)
    """
    training = training or TrainingConfig()
    if len(train_samples) < 2:
        raise ConfigurationError(f"training needs at least 2 samples, got {len(train_samples)}")
    if not val_samples:
        raise ConfigurationError("validation split is empty")

    init_seq, shuffle_seq, dropout_seq, gain_seq = np.random.SeedSequence(seed).spawn(4)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    gain_rng = np.random.default_rng(gain_seq)

    model = ContextualPPAP(model_config, seed=init_seq)
    optimizer = AdamOptimizer(model.parameters(), lr=training.lr)
    gain_stats = GainStats.from_training([s.gamma for s in train_samples], [s.is_silent_masker for s in train_samples])

    train_inputs = ModelInputs.from_samples(train_samples)
    train_labels = np.array([s.label for s in train_samples])
    # 验证集的静音增益只采样一次，使各轮的验证 J 可比
    val_inputs = replace(ModelInputs.from_samples(val_samples), gamma=draw_gains(val_samples, gain_stats, gain_rng))
    val_labels = np.array([s.label for s in val_samples])

    label = model_config.label
    logger.info("Training %s fold=%d seed=%d on %d/%d samples", label, fold, seed,
                len(train_samples), len(val_samples))
    curve: List[Tuple[int, float, float]] = []
    best_j, best_epoch, best_state, stale = math.inf, 0, model.state_dict(), 0
    epochs = tqdm(range(1, training.max_epochs + 1), desc=label, disable=not progress, leave=False)
    for epoch in epochs:
        gammas = draw_gains(train_samples, gain_stats, gain_rng)
        order = shuffle_rng.permutation(len(train_samples))
        total = 0.0
        for b, part in enumerate(_batch_slices(len(order), training.batch_size)):
            index = order[part]
            batch = replace(train_inputs.take(index), gamma=gammas[index])
            optimizer.zero_grad()
            try:
                out = model.forward_batch(batch, Mode.TRAIN, dropout_rng)
                loss = gaussian_nll(out.final_mu, out.final_log_sigma, train_labels[index])
                loss.backward()
                optimizer.step()
            except NumericError as exc:
                raise TrainingDivergedError(f"{label}: non-finite loss ({exc})", epoch, b) from exc
            total += loss.item() * len(index)
        train_j = total / len(order)

        mu, log_sigma = _final(predict_arrays(model, val_inputs, training.batch_size))
        val_j = gaussian_nll(mu, log_sigma, val_labels).item()
        if not np.isfinite(val_j):
            raise TrainingDivergedError(f"{label}: non-finite validation loss", epoch, -1)
        curve.append((epoch, train_j, val_j))
        if val_j < best_j:
            best_j, best_epoch, best_state, stale = val_j, epoch, model.state_dict(), 0
        else:
            stale += 1
        logger.info("%s fold=%d seed=%d epoch %d: train J=%.5f val J=%.5f best=%.5f",
                    label, fold, seed, epoch, train_j, val_j, best_j)
        if stale >= training.patience:
            logger.warning("%s fold=%d seed=%d: early stop at epoch %d (best epoch %d)",
                           label, fold, seed, epoch, best_epoch)
            break

    model.load_state_dict(best_state)
    arrays = predict_arrays(model, val_inputs, training.batch_size)
    val_mse = mse(Batch(_distributions(arrays), val_labels), model_config.fusion)
    model.metadata.update({
        "label": label,
        "fold": fold,
        "seed": seed,
        "best_epoch": best_epoch,
        "participant_mean": train_inputs.participant.mean(axis=0).tolist(),
        "gain_stats": None if gain_stats is None else gain_stats.to_dict(),
        "training": training.to_dict(),
        **dict(metadata or {}),
    })
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    logger.info("Finished %s fold=%d seed=%d: %d epochs, val MSE=%.5f", label, fold, seed, len(curve), val_mse)
    result = RunResult(config=label, fold=fold, seed=seed, mse=val_mse, epochs_run=len(curve),
                       best_epoch=best_epoch, curve=curve)
    return result, model


def _checkpoint_gain_stats(model: ContextualPPAP) -> Optional[GainStats]:
    data = model.metadata.get("gain_stats")
    return None if data is None else GainStats(**data)


@dataclass
class Evaluation:
    mse: float
    predictions: pd.DataFrame

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.predictions.to_csv(path, index=False)
        return path


def evaluate(model: Union[ContextualPPAP, str, Path], samples: Sequence[Sample],
             seed: int = 0, batch_size: int = 32) -> Evaluation:
    """
    评估模式前向全部样本，MSE 按融合方式选择 μ̂ 或 μ̂′，不对预测做截断

    静音 masker 的增益用 checkpoint 中的训练统计量、以 seed 采样。
    """
    if not isinstance(model, ContextualPPAP):
        model = load_checkpoint(model)
    if not samples:
        raise ConfigurationError("nothing to evaluate")
    rng = np.random.default_rng(seed)
    inputs = replace(ModelInputs.from_samples(samples),
                     gamma=draw_gains(samples, _checkpoint_gain_stats(model), rng))
    labels = np.array([s.label for s in samples])
    arrays = predict_arrays(model, inputs, batch_size)
    fusion = model.config.fusion
    value = mse(Batch(_distributions(arrays), labels), fusion)
    mu_tilde, log_sigma_tilde = _final(arrays)
    frame = pd.DataFrame({
        "id": [s.id for s in samples],
        "label": labels,
        "mu": arrays["mu"],
        "log_sigma": arrays["log_sigma"],
        "mu_tilde": mu_tilde,
        "log_sigma_tilde": log_sigma_tilde,
    })
    logger.info("Evaluated %s on %d samples: MSE=%.5f", model.config.label, len(samples), value)
    return Evaluation(mse=value, predictions=frame)


# ---- 统计检验 ----
@dataclass(frozen=True)
class KruskalResult:
    h_statistic: float
    p_value: float
    p_adjusted: float

    def significant(self, alpha: float = SIGNIFICANCE_LEVEL) -> bool:
        return self.p_adjusted < alpha


def kruskal_wallis_bonferroni(groups: Sequence[Sequence[float]], num_comparisons: int) -> KruskalResult:
    """
    Kruskal-Wallis H 检验（中间秩处理并列并做并列校正，卡方近似 df = 组数 − 1），
    再做 Bonferroni 校正：p_adj = min(1, p · num_comparisons)
    """
    groups = [np.asarray(g, dtype=np.float64).reshape(-1) for g in groups]
    if len(groups) < 2:
        raise ValidationError(f"Kruskal-Wallis needs at least 2 groups, got {len(groups)}")
    if any(g.size == 0 for g in groups):
        raise ValidationError("Kruskal-Wallis groups must be nonempty")
    if num_comparisons < 1:
        raise ValidationError(f"num_comparisons must be >= 1, got {num_comparisons}")
    pooled = np.concatenate(groups)
    if not np.all(np.isfinite(pooled)):
        raise ValidationError("Kruskal-Wallis input contains non-finite values")
    if np.all(pooled == pooled[0]):
        return KruskalResult(0.0, 1.0, 1.0)
    h, p = stats.kruskal(*groups)
    return KruskalResult(float(h), float(p), float(min(1.0, p * num_comparisons)))


# ---- 消融实验 ----
@dataclass
class AblationRow:
    config: str
    n_runs: int
    n_failed: int
    mean_mse: float
    std_mse: float
    pct_delta: float
    h_statistic: float = math.nan
    p_value: float = math.nan
    p_adjusted: float = math.nan
    significant: bool = False

    @property
    def fusion(self) -> str:
        return parse_config_label(self.config)[0].value.upper()

    @property
    def participant(self) -> str:
        return "IP" if parse_config_label(self.config)[1] else "EP"

    @property
    def visual(self) -> str:
        return "IV" if parse_config_label(self.config)[2] else "EV"


REPORT_COLUMNS = ["config", "fusion", "participant", "visual", "n_runs", "n_failed", "mean_mse", "std_mse",
                  "pct_delta", "h_statistic", "p_value", "p_adjusted", "significant"]


@dataclass
class AblationReport:
    rows: List[AblationRow]
    runs: List[RunResult] = field(default_factory=list)
    num_comparisons: int = 0

    def row(self, config: str) -> AblationRow:
        for r in self.rows:
            if r.config == config:
                return r
        raise KeyError(config)

    def to_frame(self) -> pd.DataFrame:
        records = []
        for r in self.rows:
            record = asdict(r)
            record.update(fusion=r.fusion, participant=r.participant, visual=r.visual)
            records.append(record)
        return pd.DataFrame(records, columns=REPORT_COLUMNS)

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "AblationReport":
        frame = pd.read_csv(path)
        missing = [c for c in REPORT_COLUMNS if c not in frame.columns]
        if missing:
            raise ValidationError(f"{path}: missing ablation columns {missing}")
        rows = [
            AblationRow(
                config=str(rec["config"]),
                n_runs=int(rec["n_runs"]),
                n_failed=int(rec["n_failed"]),
                mean_mse=float(rec["mean_mse"]),
                std_mse=float(rec["std_mse"]),
                pct_delta=float(rec["pct_delta"]),
                h_statistic=float(rec["h_statistic"]),
                p_value=float(rec["p_value"]),
                p_adjusted=float(rec["p_adjusted"]),
                significant=bool(rec["significant"]),
            )
            for rec in frame.to_dict("records")
        ]
        return cls(rows=rows)


def aggregate_runs(runs: Sequence[RunResult], configs: Optional[Sequence[str]] = None,
                   num_comparisons: Optional[int] = None, alpha: float = SIGNIFICANCE_LEVEL) -> AblationReport:
    """
    按配置汇总 RunResult：均值、样本标准差（ddof=1）、%Δ = 100·(基线 − 配置)/基线，
    以及每个变体与基线之间的 Kruskal-Wallis 检验（单位为每次运行的 MSE）
    """
    runs = sorted(runs, key=RunResult.sort_key)
    if configs is None:
        configs = list(dict.fromkeys(r.config for r in runs))
    configs = list(configs)
    if num_comparisons is None:
        num_comparisons = max(1, sum(1 for c in configs if c != BASELINE_LABEL))
    values = {c: pd.Series([r.mse for r in runs if r.config == c and r.ok], dtype=float) for c in configs}
    failed = {c: sum(1 for r in runs if r.config == c and not r.ok) for c in configs}
    base = values.get(BASELINE_LABEL)
    base_mean = float(base.mean()) if base is not None and len(base) else math.nan
    if base is None:
        logger.warning("No baseline runs; %%Δ and p-values are left empty")

    rows = []
    for config in configs:
        series = values[config]
        mean = float(series.mean()) if len(series) else math.nan
        row = AblationRow(
            config=config,
            n_runs=int(len(series)),
            n_failed=failed[config],
            mean_mse=mean,
            std_mse=float(series.std(ddof=1)) if len(series) > 1 else math.nan,
            pct_delta=0.0 if config == BASELINE_LABEL else 100.0 * (base_mean - mean) / base_mean,
        )
        if config != BASELINE_LABEL and base is not None and len(base) and len(series):
            test = kruskal_wallis_bonferroni([series.to_numpy(), base.to_numpy()], num_comparisons)
            row.h_statistic, row.p_value, row.p_adjusted = test.h_statistic, test.p_value, test.p_adjusted
            row.significant = test.significant(alpha)
        rows.append(row)
    return AblationReport(rows=rows, runs=list(runs), num_comparisons=num_comparisons)


def _run_one(model_config: ModelConfig, config: str, fold: int, seed: int,
             splits: Dict[int, Tuple[List[Sample], List[Sample]]], training: TrainingConfig,
             checkpoint_dir: Optional[Path], metadata: Optional[Mapping[str, Any]] = None) -> RunResult:
    try:
        train_samples, val_samples = splits[fold]
        path = None if checkpoint_dir is None else checkpoint_dir / f"{config}_fold{fold}_seed{seed}.ckpt"
        result, _ = train(model_config.with_label(config), train_samples, val_samples, seed,
                          training=training, fold=fold, checkpoint_path=path, metadata=metadata)
        return result
    except Exception as exc:
        logger.exception("Run %s fold=%d seed=%d failed", config, fold, seed)
        return RunResult(config=config, fold=fold, seed=seed, mse=math.nan, epochs_run=0,
                         status="failed", error=f"{type(exc).__name__}: {exc}")


def run_ablation(
    samples: Sequence[Sample],
    seeds: Sequence[int],
    configs: Sequence[str] = ABLATION_CONFIGS,
    folds: Sequence[int] = (0, 1, 2, 3, 4),
    model_config: Optional[ModelConfig] = None,
    training: Optional[TrainingConfig] = None,
    workers: Optional[int] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    num_comparisons: Optional[int] = None,
    progress: bool = False,
    metadata: Optional[Mapping[str, Any]] = None,
) -> AblationReport:
    """
    对每个 (config, fold, seed) 训练一次并汇总

    单次运行失败只记录为 status=failed，不影响其他运行；汇总前按 config/fold/seed 排序，
    因此结果与线程完成顺序无关。
    """
    model_config = model_config or ModelConfig()
    training = training or TrainingConfig()
    workers = worker_count() if workers is None else workers
    for config in configs:
        parse_config_label(config)
    if not seeds or not folds:
        raise ConfigurationError("ablation needs at least one seed and one fold")
    present = {s.fold for s in samples}
    splits = {}
    for fold in folds:
        if fold not in present:
            raise ConfigurationError(f"fold {fold} has no samples")
        splits[fold] = ([s for s in samples if s.fold != fold], [s for s in samples if s.fold == fold])
    ckpt_dir = None if checkpoint_dir is None else Path(checkpoint_dir)

    jobs = [(config, fold, seed) for config in configs for fold in folds for seed in seeds]
    logger.info("Ablation: %d configs x %d folds x %d seeds = %d runs on %d workers",
                len(configs), len(folds), len(seeds), len(jobs), workers)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(_run_one, model_config, c, f, s, splits, training, ckpt_dir, metadata)
                   for c, f, s in jobs]
        results = [fut.result() for fut in tqdm(futures, desc="Ablation", disable=not progress)]
    failed = sum(1 for r in results if not r.ok)
    if failed:
        logger.warning("%d of %d ablation runs failed", failed, len(results))
    return aggregate_runs(results, configs, num_comparisons)


# ---- runs.csv ----
RUN_COLUMNS = ["config", "fold", "seed", "status", "mse", "epochs_run", "best_epoch", "error", "curve"]


def write_runs_csv(runs: Sequence[RunResult], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = []
    for r in sorted(runs, key=RunResult.sort_key):
        record = asdict(r)
        record["curve"] = json.dumps([list(point) for point in r.curve])
        records.append(record)
    pd.DataFrame(records, columns=RUN_COLUMNS).to_csv(path, index=False)
    return path


def read_runs_csv(path: Union[str, Path]) -> List[RunResult]:
    frame = pd.read_csv(path, dtype={"config": str, "status": str}, keep_default_na=False)
    missing = [c for c in RUN_COLUMNS if c not in frame.columns]
    if missing:
        raise ValidationError(f"{path}: missing run columns {missing}")
    runs = []
    for rec in frame.to_dict("records"):
        curve_text = str(rec["curve"]).strip()
        runs.append(RunResult(
            config=rec["config"],
            fold=int(rec["fold"]),
            seed=int(rec["seed"]),
            mse=float(rec["mse"]) if str(rec["mse"]).strip() else math.nan,
            epochs_run=int(rec["epochs_run"]),
            best_epoch=int(rec["best_epoch"]),
            curve=[(int(e), float(t), float(v)) for e, t, v in json.loads(curve_text or "[]")],
            status=rec["status"],
            error=str(rec["error"]),
        ))
    return runs


# ---- participant sweep ----
@dataclass
class SweepCurve:
    dim: int
    name: str
    grid: np.ndarray
    mean_prediction: np.ndarray
    training_mean: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "dim": self.dim,
            "piq_name": self.name,
            "grid_value": self.grid,
            "mean_prediction": self.mean_prediction,
            "training_mean": self.training_mean,
        })

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "SweepCurve":
        frame = pd.read_csv(path, dtype={"piq_name": str})
        if frame.empty:
            raise ValidationError(f"{path}: empty sweep file")
        return cls(
            dim=int(frame["dim"].iloc[0]),
            name=str(frame["piq_name"].iloc[0]),
            grid=frame["grid_value"].to_numpy(dtype=float),
            mean_prediction=frame["mean_prediction"].to_numpy(dtype=float),
            training_mean=float(frame["training_mean"].iloc[0]),
        )


def participant_sweep(model: Union[ContextualPPAP, str, Path], samples: Sequence[Sample], dim: int,
                      grid: Sequence[float], seed: int = 0, batch_size: int = 32,
                      participant_mean: Optional[Sequence[float]] = None) -> SweepCurve:
    """
    其余维度固定在训练集均值，只改变 p[dim]，在所有样本上平均 μ̃

    s、m、γ、b 在整个网格上保持不变（静音增益只采样一次）。
    """
    if not isinstance(model, ContextualPPAP):
        model = load_checkpoint(model)
    config = model.config
    if not config.include_participant:
        raise ConfigurationError(
            f"{config.label} was trained without participant embeddings (EP); its output does not depend "
            "on p, so a participant sweep would be constant"
        )
    if not 0 <= dim < config.participant_dim:
        raise ConfigurationError(f"dim must be in 0..{config.participant_dim - 1}, got {dim}")
    grid = np.asarray(list(grid), dtype=np.float64)
    if grid.size == 0 or np.any((grid < 0.0) | (grid > 1.0)):
        raise ConfigurationError("sweep grid must be a nonempty set of points in [0, 1]")
    if participant_mean is None:
        participant_mean = model.metadata.get("participant_mean")
    if participant_mean is None:
        raise ConfigurationError("checkpoint has no participant training means; pass participant_mean")
    mean = np.asarray(participant_mean, dtype=np.float64)
    if not samples:
        raise ConfigurationError("participant sweep needs at least one sample")

    rng = np.random.default_rng(seed)
    base = replace(ModelInputs.from_samples(samples),
                   gamma=draw_gains(samples, _checkpoint_gain_stats(model), rng))
    predictions = []
    for value in grid:
        participant = np.tile(mean, (len(samples), 1))
        participant[:, dim] = value
        mu_tilde, _ = _final(predict_arrays(model, replace(base, participant=participant), batch_size))
        predictions.append(float(mu_tilde.mean()))
    names = model.metadata.get("participant_names") or [f"piq_{i + 1}" for i in range(config.participant_dim)]
    curve = SweepCurve(dim=dim, name=str(names[dim]), grid=grid, mean_prediction=np.array(predictions),
                       training_mean=float(mean[dim]))
    logger.info("Sweep over %s: %d points, prediction range [%.4f, %.4f]", curve.name, grid.size,
                curve.mean_prediction.min(), curve.mean_prediction.max())
    return curve


def participant_sweep_all(model: Union[ContextualPPAP, str, Path], samples: Sequence[Sample],
                          grid: Sequence[float], seed: int = 0, batch_size: int = 32) -> List[SweepCurve]:
    if not isinstance(model, ContextualPPAP):
        model = load_checkpoint(model)
    return [participant_sweep(model, samples, dim, grid, seed=seed, batch_size=batch_size)
            for dim in range(model.config.participant_dim)]


def plot_sweep(curve: SweepCurve, path: Union[str, Path]) -> Path:
    """静态 SVG：扫描曲线 + 训练集均值处的竖线"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(curve.grid, curve.mean_prediction, marker="o")
    ax.axvline(curve.training_mean, linestyle="--", color="grey", label="training mean")
    ax.set_xlabel(curve.name)
    ax.set_ylabel("mean predicted ISO pleasantness")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
