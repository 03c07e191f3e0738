"""
数据集：manifest 读取与逐行校验、5-fold 划分、带已知真值函数的合成数据生成

manifest.csv 列：id, soundscape_path, masker_path, image_path, gamma, silent (0/1),
piq_1..piq_k（原始回答）, label, fold。路径相对 manifest 所在目录；
.npy 路径是预先计算好的张量，其他音频/图像路径会经过 soundscape_features 预处理。
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit
from tqdm import tqdm

from ppap_errors import ConfigurationError, ManifestValidationError, ValidationError
from ppap_model import ModelConfig
from soundscape_features import (
    PiqSchema,
    audio_file_features,
    downsample_image,
    load_image,
)

logger = logging.getLogger(__name__)

BASE_COLUMNS = ["id", "soundscape_path", "masker_path", "image_path", "gamma", "silent", "label", "fold"]
PATH_COLUMNS = ["soundscape_path", "masker_path", "image_path"]
NUM_FOLDS = 5
SCHEMA_SIDECAR = "piq_schema.json"
CONFIG_SIDECAR = "config.json"

# 合成数据的真值函数系数：
# u = 0.6·mean(s) + 0.8·γ·[非静音] + 3.0·(p0 − 0.5) + 0.6·(mean(b) − 0.5)
# y = clip(0.2·(p0 − 0.5) + 1.6·(sigmoid(u) − 0.5) + N(0, 0.05²), −1, 1)
PLANTED_COEFFICIENTS = {"soundscape": 0.6, "gain": 0.8, "participant": 3.0, "image": 0.6}
PLANTED_DIRECT_PARTICIPANT = 0.2
PLANTED_SCALE = 1.6
PLANTED_NOISE = 0.05
SILENT_RATE = 0.2


@dataclass
class Sample:
    id: str
    soundscape: np.ndarray
    masker: np.ndarray
    gamma: float
    participant: np.ndarray
    image: np.ndarray
    label: float
    fold: int
    is_silent_masker: bool = False


def _piq_columns(columns: Sequence[str]) -> List[str]:
    found = [c for c in columns if re.fullmatch(r"piq_\d+", c)]
    return sorted(found, key=lambda c: int(c.split("_")[1]))


@dataclass
class Manifest:
    """
    已校验的 manifest

    frame 保留原始列（字符串），participants 是按 schema 编码后的 [n, M] 矩阵；
    合成数据或已加载过的数据放在 cached_samples 里。
    """

    frame: pd.DataFrame
    base_dir: Path
    schema: PiqSchema
    participants: np.ndarray
    model_config: Optional[ModelConfig] = None
    cached_samples: Optional[List[Sample]] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def ids(self) -> List[str]:
        return self.frame["id"].tolist()

    @property
    def folds(self) -> np.ndarray:
        return self.frame["fold"].astype(int).to_numpy()

    @property
    def piq_columns(self) -> List[str]:
        return _piq_columns(self.frame.columns)

    def subset(self, positions: Sequence[int]) -> "Manifest":
        positions = list(positions)
        cached = None if self.cached_samples is None else [self.cached_samples[i] for i in positions]
        return Manifest(
            frame=self.frame.iloc[positions].reset_index(drop=True),
            base_dir=self.base_dir,
            schema=self.schema,
            participants=self.participants[positions],
            model_config=self.model_config,
            cached_samples=cached,
        )

    def _resolve(self, value: str) -> Path:
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path

    def _load_audio_tensor(self, value: str) -> np.ndarray:
        path = self._resolve(value)
        if path.suffix.lower() == ".npy":
            return np.load(path).astype(np.float64)
        cfg = self.model_config or ModelConfig()
        return audio_file_features(path, frames=cfg.audio_shape[0], n_mels=cfg.audio_shape[1])

    def _load_image_tensor(self, value: str) -> np.ndarray:
        path = self._resolve(value)
        image = load_image(path)
        if path.suffix.lower() == ".npy":
            return image
        cfg = self.model_config or ModelConfig()
        return downsample_image(image, cfg.image_shape[:2])

    def load_sample(self, position: int) -> Sample:
        row = self.frame.iloc[position]
        silent = _parse_silent(row["silent"])
        soundscape = self._load_audio_tensor(row["soundscape_path"])
        if silent and not str(row["masker_path"]).strip():
            masker = np.zeros(soundscape.shape[:2] + (1,))
        else:
            masker = self._load_audio_tensor(row["masker_path"])
        return Sample(
            id=str(row["id"]),
            soundscape=soundscape,
            masker=masker,
            gamma=float(row["gamma"]),
            participant=self.participants[position].copy(),
            image=self._load_image_tensor(row["image_path"]),
            label=float(row["label"]),
            fold=int(row["fold"]),
            is_silent_masker=silent,
        )

    def samples(self, workers: int = 1, progress: bool = False) -> List[Sample]:
        """按行加载全部样本；workers > 1 时用线程池，顺序与 manifest 一致。"""
        if self.cached_samples is not None:
            return self.cached_samples
        positions = range(len(self))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                loaded = list(tqdm(pool.map(self.load_sample, positions), total=len(self),
                                   desc="Loading samples", disable=not progress))
        else:
            loaded = [self.load_sample(i) for i in tqdm(positions, desc="Loading samples", disable=not progress)]
        self.cached_samples = loaded
        return loaded

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False)
        return path


def _parse_silent(value: Any) -> bool:
    text = str(value).strip().lower()
    if text in ("1", "1.0", "true"):
        return True
    if text in ("0", "0.0", "false"):
        return False
    raise ValueError(f"silent flag must be 0 or 1, got {value!r}")


def _resolve_schema(path: Path, schema: Optional[PiqSchema], piq_columns: List[str]) -> PiqSchema:
    if schema is not None:
        return schema
    sidecar = path.parent / SCHEMA_SIDECAR
    if sidecar.exists():
        return PiqSchema.load(sidecar)
    if not piq_columns:
        raise ConfigurationError(f"{path}: no piq_* columns and no {SCHEMA_SIDECAR}")
    logger.warning("No %s next to %s, treating %d PIQ answers as continuous in [0, 1]",
                   SCHEMA_SIDECAR, path, len(piq_columns))
    return PiqSchema.continuous(len(piq_columns))


def load_manifest(path: Union[str, Path], schema: Optional[PiqSchema] = None,
                  model_config: Optional[ModelConfig] = None, check_files: bool = True) -> Manifest:
    """
    读取并逐行校验 manifest.csv

    Args:
        path: manifest 路径
        schema: PIQ 描述；缺省时使用同目录下的 piq_schema.json
        model_config: 用于确定音频帧数、mel 频带数与图像尺寸
        check_files: 是否检查引用的文件存在

    Returns:
        Manifest: 校验通过的 manifest（样本在 samples() 时才真正加载）
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ManifestValidationError([f"cannot read {path}: {exc}"]) from exc
    missing = [c for c in BASE_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestValidationError([f"missing column {c}" for c in missing])
    piq_columns = _piq_columns(frame.columns)
    schema = _resolve_schema(path, schema, piq_columns)
    if len(piq_columns) != len(schema.variables):
        raise ManifestValidationError(
            [f"{len(piq_columns)} piq_* columns but the PIQ schema has {len(schema.variables)} variables"]
        )

    base_dir = path.parent
    problems: List[str] = []
    seen: Dict[str, int] = {}
    participants = np.zeros((len(frame), schema.width))
    for i, row in enumerate(frame.to_dict("records")):
        label_row = f"row {i + 1}"
        sample_id = str(row["id"]).strip()
        if not sample_id:
            problems.append(f"{label_row}: empty id")
        elif sample_id in seen:
            problems.append(f"{label_row}: duplicate id {sample_id!r} (first seen in row {seen[sample_id]})")
        else:
            seen[sample_id] = i + 1
        try:
            gamma = float(row["gamma"])
            if not np.isfinite(gamma):
                raise ValueError
        except ValueError:
            problems.append(f"{label_row}: gamma {row['gamma']!r} is not a finite number")
        try:
            silent = _parse_silent(row["silent"])
        except ValueError as exc:
            problems.append(f"{label_row}: {exc}")
            silent = False
        try:
            label = float(row["label"])
            if not -1.0 <= label <= 1.0:
                problems.append(f"{label_row}: label {label} outside [-1, 1]")
        except ValueError:
            problems.append(f"{label_row}: label {row['label']!r} is not a number")
        try:
            fold = int(str(row["fold"]).strip())
            if not 0 <= fold < NUM_FOLDS:
                raise ValueError
        except ValueError:
            problems.append(f"{label_row}: fold {row['fold']!r} is not in 0..{NUM_FOLDS - 1}")
        for column in PATH_COLUMNS:
            value = str(row[column]).strip()
            if column == "masker_path" and silent and not value:
                continue
            if not value:
                problems.append(f"{label_row}: empty {column}")
            elif check_files:
                target = Path(value) if Path(value).is_absolute() else base_dir / value
                if not target.exists():
                    problems.append(f"{label_row}: {column} {value} does not exist")
        try:
            participants[i] = schema.encode([row[c] for c in piq_columns])
        except ValidationError as exc:
            problems.append(f"{label_row}: {exc}")
    if problems:
        raise ManifestValidationError(problems)

    if model_config is None and (base_dir / CONFIG_SIDECAR).exists():
        model_config = read_model_config(base_dir / CONFIG_SIDECAR)
    logger.info("Loaded manifest %s: %d rows, M=%d", path, len(frame), schema.width)
    return Manifest(frame=frame, base_dir=base_dir, schema=schema, participants=participants,
                    model_config=model_config)


def read_model_config(path: Union[str, Path]) -> Optional[ModelConfig]:
    """读取 {"model": {...}, "training": {...}} 格式配置中的 model 部分。"""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a JSON object")
    model = data.get("model")
    return None if model is None else ModelConfig.from_dict(model)


def kfold_split(manifest: Manifest, val_fold: int) -> Tuple[Manifest, Manifest]:
    """验证集为 fold == val_fold 的行，其余为训练集。"""
    if not 0 <= val_fold < NUM_FOLDS:
        raise ConfigurationError(f"val_fold must be in 0..{NUM_FOLDS - 1}, got {val_fold}")
    folds = manifest.folds
    val_positions = np.flatnonzero(folds == val_fold)
    train_positions = np.flatnonzero(folds != val_fold)
    if val_positions.size == 0:
        raise ConfigurationError(f"fold {val_fold} is empty")
    if train_positions.size == 0:
        raise ConfigurationError(f"no training rows outside fold {val_fold}")
    return manifest.subset(train_positions), manifest.subset(val_positions)


# ---- 合成数据 ----
def planted_pleasantness(soundscape_mean: float, gamma: float, silent: bool, p0: float,
                         image_mean: float, noise: float = 0.0) -> float:
    """合成数据的真值函数 g，对 p0 与 γ 单调不减。"""
    c = PLANTED_COEFFICIENTS
    u = (c["soundscape"] * soundscape_mean
         + c["gain"] * gamma * (0.0 if silent else 1.0)
         + c["participant"] * (p0 - 0.5)
         + c["image"] * (image_mean - 0.5))
    y = PLANTED_DIRECT_PARTICIPANT * (p0 - 0.5) + PLANTED_SCALE * (expit(u) - 0.5) + noise
    return float(np.clip(y, -1.0, 1.0))


def generate_synthetic_dataset(n: int, seed: int, config: Optional[ModelConfig] = None,
                               out_dir: Optional[Union[str, Path]] = None,
                               silent_rate: float = SILENT_RATE) -> Manifest:
    """
    生成 n 个合成样本，标签来自 planted_pleasantness

    Args:
        n: 样本数（>= 10）
        seed: 随机种子，决定全部数据
        config: 张量形状来源，默认 ModelConfig.miniature()
        out_dir: 给出时写出 tensors/*.npy、manifest.csv、piq_schema.json 与 config.json
        silent_rate: 静音 masker 的比例；为 0 时没有需要逐轮重采样增益的样本

    Returns:
        Manifest: 带 cached_samples 的 manifest
    """
    if n < 10:
        raise ConfigurationError(f"synthetic dataset needs n >= 10, got {n}")
    if not 0.0 <= silent_rate <= 1.0:
        raise ConfigurationError(f"silent_rate must be in [0, 1], got {silent_rate}")
    config = config or ModelConfig.miniature()
    rng = np.random.default_rng(seed)
    t, f, c = config.audio_shape
    m_dim = config.participant_dim

    folds = rng.permutation(np.arange(n) % NUM_FOLDS)
    soundscape_level = rng.standard_normal(n)
    masker_level = rng.standard_normal(n)
    image_level = rng.uniform(0.0, 1.0, n)
    silent = rng.random(n) < silent_rate
    gamma = np.where(silent, 0.0, rng.uniform(-1.5, 0.5, n))
    participants = rng.uniform(0.0, 1.0, (n, m_dim))
    label_noise = rng.normal(0.0, PLANTED_NOISE, n)

    samples: List[Sample] = []
    for i in range(n):
        soundscape = soundscape_level[i] + 0.5 * rng.standard_normal((t, f, c))
        if silent[i]:
            masker = np.zeros((t, f, config.masker_channels))
        else:
            masker = masker_level[i] + 0.5 * rng.standard_normal((t, f, config.masker_channels))
        image = np.clip(image_level[i] + 0.1 * rng.standard_normal(config.image_shape), 0.0, 1.0)
        label = planted_pleasantness(float(soundscape.mean()), float(gamma[i]), bool(silent[i]),
                                     float(participants[i, 0]), float(image.mean()), float(label_noise[i]))
        samples.append(Sample(
            id=f"syn-{i:05d}",
            soundscape=soundscape,
            masker=masker,
            gamma=float(gamma[i]),
            participant=participants[i].copy(),
            image=image,
            label=label,
            fold=int(folds[i]),
            is_silent_masker=bool(silent[i]),
        ))

    schema = PiqSchema.continuous(m_dim)
    base_dir = Path(out_dir) if out_dir is not None else Path(".")
    rows = []
    for s in samples:
        row = {
            "id": s.id,
            "soundscape_path": f"tensors/{s.id}_soundscape.npy" if out_dir is not None else "",
            "masker_path": f"tensors/{s.id}_masker.npy" if out_dir is not None else "",
            "image_path": f"tensors/{s.id}_image.npy" if out_dir is not None else "",
            "gamma": repr(s.gamma),
            "silent": "1" if s.is_silent_masker else "0",
        }
        row.update({name: repr(float(v)) for name, v in zip(schema.names, s.participant)})
        row.update({"label": repr(s.label), "fold": str(s.fold)})
        rows.append(row)
    frame = pd.DataFrame(rows, columns=BASE_COLUMNS[:6] + schema.names + BASE_COLUMNS[6:])
    manifest = Manifest(frame=frame, base_dir=base_dir, schema=schema,
                        participants=np.stack([s.participant for s in samples]),
                        model_config=config, cached_samples=samples)
    if out_dir is not None:
        write_dataset(manifest, base_dir)
    logger.info("Generated %d synthetic samples (seed=%d, %d silent maskers)", n, seed, int(silent.sum()))
    return manifest


def write_dataset(manifest: Manifest, out_dir: Union[str, Path]) -> Path:
    """把已加载的样本写成 .npy 张量 + manifest.csv + sidecar 文件，返回 manifest 路径。"""
    out_dir = Path(out_dir)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    frame = manifest.frame.copy()
    for i, sample in enumerate(manifest.samples()):
        for column, suffix, value in (("soundscape_path", "soundscape", sample.soundscape),
                                      ("masker_path", "masker", sample.masker),
                                      ("image_path", "image", sample.image)):
            relative = f"tensors/{sample.id}_{suffix}.npy"
            np.save(out_dir / relative, value)
            frame.at[i, column] = relative
    manifest_path = out_dir / "manifest.csv"
    frame.to_csv(manifest_path, index=False)
    manifest.schema.save(out_dir / SCHEMA_SIDECAR)
    if manifest.model_config is not None:
        (out_dir / CONFIG_SIDECAR).write_text(
            json.dumps({"model": manifest.model_config.to_dict()}, indent=2), encoding="utf-8"
        )
    logger.info("Wrote %d samples to %s", len(frame), out_dir)
    return manifest_path


def preprocess_manifest(path: Union[str, Path], out_dir: Union[str, Path],
                        model_config: Optional[ModelConfig] = None, workers: int = 1) -> Path:
    """原始音频/图像 manifest -> 张量缓存（.npy）manifest"""
    manifest = load_manifest(path, model_config=model_config)
    manifest.samples(workers=workers, progress=True)
    return write_dataset(manifest, out_dir)


def linear_fit_loss(samples: Sequence[Sample], shuffle_dim: Optional[int] = None, seed: int = 0) -> float:
    """
    用最小二乘线性回归拟合标签，返回平均残差平方

    特征：mean(s)、mean(m)、γ·[非静音]、p、mean(b)、常数项；shuffle_dim 给出时先打乱 p 的这一维。
    """
    participants = np.stack([s.participant for s in samples])
    if shuffle_dim is not None:
        rng = np.random.default_rng(seed)
        participants[:, shuffle_dim] = rng.permutation(participants[:, shuffle_dim])
    summary = np.array([
        [s.soundscape.mean(), s.masker.mean(), 0.0 if s.is_silent_masker else s.gamma, s.image.mean(), 1.0]
        for s in samples
    ])
    features = np.hstack([summary, participants])
    labels = np.array([s.label for s in samples])
    coef, *_ = np.linalg.lstsq(features, labels, rcond=None)
    residual = labels - features @ coef
    return float(np.mean(residual * residual))
