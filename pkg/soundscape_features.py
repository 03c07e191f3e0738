"""
原始输入预处理：log-mel 频谱、图像双线性降采样、PIQ 编码、静音 masker 的增益采样
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import librosa
import numpy as np
import soundfile as sf
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import map_coordinates

from ppap_errors import ConfigurationError, InputError, ValidationError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 44100
N_FFT = 4096
HOP_LENGTH = 2048
N_MELS = 64
N_FRAMES = 644
IMAGE_SIZE = (240, 135)
LOG_OFFSET = 1e-10


# ---- 音频 ----
@lru_cache(maxsize=8)
def _mel_filterbank(sr: int, n_fft: int, n_mels: int) -> np.ndarray:
    # HTK 三角滤波器，0 Hz 到 Nyquist，不做面积归一化
    return librosa.filters.mel(sr=sr, n_fft=n_fft, n_mels=n_mels, fmin=0.0, fmax=sr / 2.0, htk=True, norm=None)


def pin_frames(features: np.ndarray, frames: int, fill: float) -> np.ndarray:
    """沿时间轴（第 0 维）居中裁剪到 frames 帧；不足时两侧补 fill。"""
    n = features.shape[0]
    if n >= frames:
        start = (n - frames) // 2
        return features[start:start + frames]
    before = (frames - n) // 2
    pad = [(before, frames - n - before)] + [(0, 0)] * (features.ndim - 1)
    return np.pad(features, pad, constant_values=fill)


def log_mel_spectrogram(
    audio: np.ndarray,
    sr: int = SAMPLE_RATE,
    n_fft: int = N_FFT,
    hop_length: int = HOP_LENGTH,
    n_mels: int = N_MELS,
    frames: Optional[int] = N_FRAMES,
) -> np.ndarray:
    """
    逐声道计算 log(mel(|STFT|) + 1e-10)

    Args:
        audio: [samples] 或 [samples, C] 的波形
        sr: 采样率
        n_fft: 帧长（Hann 窗）
        hop_length: 帧移
        n_mels: mel 频带数 F
        frames: 固定的帧数 T，None 表示不裁剪/补齐

    Returns:
        np.ndarray: [T, F, C]
    """
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim == 1:
        audio = audio[:, None]
    if audio.ndim != 2 or audio.shape[0] == 0 or audio.shape[1] == 0:
        raise InputError(f"audio must be a non-empty [samples, channels] array, got shape {audio.shape}")
    if audio.shape[0] < n_fft:
        raise InputError(f"audio has {audio.shape[0]} samples, shorter than one {n_fft}-sample frame")
    if not np.all(np.isfinite(audio)):
        raise InputError("audio contains non-finite samples")

    mel_basis = _mel_filterbank(int(sr), int(n_fft), int(n_mels))
    channels = []
    for c in range(audio.shape[1]):
        magnitude = np.abs(librosa.stft(audio[:, c], n_fft=n_fft, hop_length=hop_length,
                                        window="hann", center=True, pad_mode="constant"))
        channels.append(np.log(mel_basis @ magnitude + LOG_OFFSET).T)
    features = np.stack(channels, axis=-1)
    if frames is not None:
        features = pin_frames(features, frames, np.log(LOG_OFFSET))
    return features


def load_audio(path: Union[str, Path]) -> Tuple[np.ndarray, int]:
    """读取 WAV/FLAC（soundfile）或 .npy 原始数组，返回 ([samples, C], 采样率)。"""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        try:
            data = np.load(path)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read audio array {path}: {exc}") from exc
        return np.asarray(data, dtype=np.float64), SAMPLE_RATE
    try:
        data, sr = sf.read(str(path), dtype="float64", always_2d=True)
    except (RuntimeError, OSError) as exc:
        raise InputError(f"cannot read audio file {path}: {exc}") from exc
    return data, int(sr)


def audio_file_features(path: Union[str, Path], frames: int = N_FRAMES, n_mels: int = N_MELS) -> np.ndarray:
    audio, sr = load_audio(path)
    if sr != SAMPLE_RATE:
        logger.warning("Audio %s has sample rate %d Hz, expected %d Hz", path, sr, SAMPLE_RATE)
    return log_mel_spectrogram(audio, sr=sr, n_mels=n_mels, frames=frames)


# ---- 图像 ----
def load_image(path: Union[str, Path]) -> np.ndarray:
    """读取 8-bit RGB 图像并缩放到 [0, 1]；.npy 文件按原样读取。"""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        try:
            return np.asarray(np.load(path), dtype=np.float64)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read image array {path}: {exc}") from exc
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def downsample_image(img: np.ndarray, size: Tuple[int, int] = IMAGE_SIZE) -> np.ndarray:
    """
    角点对齐的双线性重采样到 (H, W)

    输出网格的首尾样本点分别落在输入的首尾像素上，因此同尺寸输入原样返回，
    线性梯度图保持线性。
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise InputError(f"image must be [H, W, C], got shape {img.shape}")
    h0, w0, channels = img.shape
    if h0 < 2 or w0 < 2 or channels < 1:
        raise InputError(f"image of shape {img.shape} is too small to resample")
    height, width = int(size[0]), int(size[1])
    if height < 1 or width < 1:
        raise InputError(f"target size must be positive, got {size}")
    rows = np.linspace(0.0, h0 - 1, height)
    cols = np.linspace(0.0, w0 - 1, width)
    grid = np.meshgrid(rows, cols, indexing="ij")
    out = np.empty((height, width, channels))
    for c in range(channels):
        out[..., c] = map_coordinates(img[..., c], grid, order=1, mode="nearest")
    return out


# ---- PIQ ----
class PiqKind(str, Enum):
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"
    BINARY = "binary"


@dataclass(frozen=True)
class PiqVariable:
    """
    单个 PIQ 问题的描述

    continuous 用 (x − min) / (max − min) 归一化到 [0, 1]；categorical 编码成 one-hot；
    binary 编码成一个 {0, 1} 哑变量，levels[1] 记为 1。
    """

    name: str
    kind: PiqKind
    minimum: Optional[float] = None
    maximum: Optional[float] = None
    levels: Tuple[str, ...] = ()

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", PiqKind(self.kind))
        except ValueError as exc:
            raise ConfigurationError(f"PIQ variable {self.name!r}: unknown kind {self.kind!r}") from exc
        object.__setattr__(self, "levels", tuple(str(level) for level in self.levels))
        if self.kind is PiqKind.CONTINUOUS:
            if self.minimum is None or self.maximum is None or not float(self.minimum) < float(self.maximum):
                raise ConfigurationError(f"PIQ variable {self.name!r}: continuous needs min < max")
        elif self.kind is PiqKind.CATEGORICAL:
            if len(self.levels) < 2 or len(set(self.levels)) != len(self.levels):
                raise ConfigurationError(f"PIQ variable {self.name!r}: categorical needs >= 2 distinct levels")
        else:
            if not self.levels:
                object.__setattr__(self, "levels", ("0", "1"))
            if len(self.levels) != 2 or self.levels[0] == self.levels[1]:
                raise ConfigurationError(f"PIQ variable {self.name!r}: binary needs exactly 2 levels")

    @property
    def width(self) -> int:
        return len(self.levels) if self.kind is PiqKind.CATEGORICAL else 1

    def encode(self, value: Any) -> np.ndarray:
        if self.kind is PiqKind.CONTINUOUS:
            try:
                x = float(value)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{self.name}: {value!r} is not a number") from exc
            lo, hi = float(self.minimum), float(self.maximum)
            if not np.isfinite(x) or x < lo or x > hi:
                raise ValidationError(f"{self.name}: {value!r} outside [{lo:g}, {hi:g}]")
            return np.array([(x - lo) / (hi - lo)])
        text = _level_text(value)
        if text not in self.levels:
            raise ValidationError(f"{self.name}: unknown level {value!r}, expected one of {list(self.levels)}")
        if self.kind is PiqKind.BINARY:
            return np.array([float(self.levels.index(text))])
        onehot = np.zeros(len(self.levels))
        onehot[self.levels.index(text)] = 1.0
        return onehot

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"name": self.name, "kind": self.kind.value}
        if self.kind is PiqKind.CONTINUOUS:
            data.update(min=float(self.minimum), max=float(self.maximum))
        else:
            data["levels"] = list(self.levels)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PiqVariable":
        unknown = set(data) - {"name", "kind", "min", "max", "levels"}
        if unknown or "name" not in data or "kind" not in data:
            raise ConfigurationError(f"bad PIQ descriptor {dict(data)!r}")
        return cls(
            name=str(data["name"]),
            kind=data["kind"],
            minimum=data.get("min"),
            maximum=data.get("max"),
            levels=tuple(data.get("levels", ())),
        )


def _level_text(value: Any) -> str:
    # CSV 中的 1 / 1.0 / "1" 都视为同一个水平
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)) and float(value).is_integer():
        return str(int(value))
    return str(value).strip()


@dataclass(frozen=True)
class PiqSchema:
    variables: Tuple[PiqVariable, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        if not self.variables:
            raise ConfigurationError("PIQ schema needs at least one variable")
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate PIQ variable names in {names}")

    @property
    def width(self) -> int:
        """编码后的总长度 M"""
        return sum(v.width for v in self.variables)

    @property
    def names(self) -> List[str]:
        return [v.name for v in self.variables]

    @property
    def encoded_names(self) -> List[str]:
        """参与者向量每一维的名字，categorical 展开为 'name=level'。"""
        out: List[str] = []
        for v in self.variables:
            if v.kind is PiqKind.CATEGORICAL:
                out.extend(f"{v.name}={level}" for level in v.levels)
            else:
                out.append(v.name)
        return out

    def encode(self, answers: Union[Mapping[str, Any], Sequence[Any]]) -> np.ndarray:
        return encode_participant(answers, self)

    def to_json(self) -> str:
        return json.dumps({"variables": [v.to_dict() for v in self.variables]}, ensure_ascii=False, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PiqSchema":
        try:
            data = json.loads(text)
            variables = data["variables"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigurationError(f"bad PIQ schema JSON: {exc}") from exc
        return cls(tuple(PiqVariable.from_dict(v) for v in variables))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PiqSchema":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def continuous(cls, count: int, prefix: str = "piq_") -> "PiqSchema":
        """count 个取值 [0, 1] 的连续变量"""
        return cls(tuple(PiqVariable(f"{prefix}{i + 1}", PiqKind.CONTINUOUS, 0.0, 1.0) for i in range(count)))


def default_piq_schema() -> PiqSchema:
    """五个入选的 PIQ 问题；数值范围只是占位，实际数据请提供 piq_schema.json。"""
    return PiqSchema((
        PiqVariable("education", PiqKind.CONTINUOUS, 1.0, 7.0),
        PiqVariable("landed_property", PiqKind.BINARY, levels=("no", "yes")),
        PiqVariable("acoustic_satisfaction", PiqKind.CONTINUOUS, 1.0, 5.0),
        PiqVariable("noise_sensitivity", PiqKind.CONTINUOUS, 1.0, 5.0),
        PiqVariable("positive_affect", PiqKind.CONTINUOUS, 5.0, 25.0),
    ))


def encode_participant(answers: Union[Mapping[str, Any], Sequence[Any]], schema: PiqSchema) -> np.ndarray:
    """
    按 schema 把原始回答编码成长度 M 的参与者向量

    Args:
        answers: 按变量名索引的映射，或与 schema 变量顺序一致的序列
        schema: PIQ 描述

    Returns:
        np.ndarray: [M]
    """
    if isinstance(answers, Mapping):
        missing = [name for name in schema.names if name not in answers]
        if missing:
            raise ValidationError(f"missing PIQ answers for {missing}")
        values = [answers[name] for name in schema.names]
    else:
        values = list(answers)
        if len(values) != len(schema.variables):
            raise ValidationError(f"expected {len(schema.variables)} PIQ answers, got {len(values)}")
    return np.concatenate([var.encode(value) for var, value in zip(schema.variables, values)])


# ---- 增益 ----
@dataclass(frozen=True)
class GainStats:
    """训练 fold 中非静音 masker 的 log-gain 均值 ν 与标准差 ζ"""

    nu: float
    zeta: float

    def __post_init__(self):
        if not (np.isfinite(self.nu) and np.isfinite(self.zeta)) or self.zeta < 0:
            raise ConfigurationError(f"invalid gain statistics nu={self.nu}, zeta={self.zeta}")

    @classmethod
    def from_training(cls, gammas: Iterable[float], silent: Iterable[bool]) -> Optional["GainStats"]:
        gammas = np.asarray(list(gammas), dtype=np.float64)
        silent = np.asarray(list(silent), dtype=bool)
        audible = gammas[~silent]
        if audible.size == 0:
            return None
        return cls(nu=float(audible.mean()), zeta=float(audible.std()))

    def to_dict(self) -> Dict[str, float]:
        return {"nu": self.nu, "zeta": self.zeta}


def effective_gain(masker_is_silent: bool, gamma: float, stats: Optional[GainStats],
                   rng: np.random.Generator) -> float:
    """非静音返回 γ 本身（不消耗 rng）；静音时从 N(ν, ζ²) 采样。"""
    if not masker_is_silent:
        return float(gamma)
    if stats is None:
        raise ConfigurationError("silent masker needs gain statistics from the training folds")
    return float(stats.nu + stats.zeta * rng.standard_normal())
