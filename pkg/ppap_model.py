"""
aPPAP / cPPAP 模型组装

k = f_s(s), q = f_m(m)；h = f_p(p)（IP）或零向量（EP）；r = f_v(b)（IV）或零向量（EV）。
EF 在特征增强块 f_g 中堆叠 (k, q, Γ, H, R)；MF 把 Concat(z, h, r) 送入输出块 f_o；
LF 沿用 MF 的 f_g，再用输出适配器 A_o 对 (μ̂, log σ̂, h, r) 做事后融合。
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ppap_errors import CheckpointFormatError, ConfigMismatchError, ConfigurationError, DimensionError, NumericError
from ppap_layers import (
    Activation,
    ConvBlock,
    ConvBlockSpec,
    Dense,
    DenseSpec,
    Mode,
    Module,
    dot_product_attention,
    glorot_uniform,
)
from tensor_autodiff import Parameter, Tensor, as_tensor, broadcast_to, concat, matmul, stack

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CPPAP1\0"


class Fusion(str, Enum):
    EF = "ef"
    MF = "mf"
    LF = "lf"


# 消融实验的 10 种配置，第一项为 aPPAP 基线（EP+EV）
ABLATION_CONFIGS: Tuple[str, ...] = (
    "baseline",
    "ip-ev-ef", "ip-ev-mf", "ip-ev-lf",
    "ep-iv-ef", "ep-iv-mf", "ep-iv-lf",
    "ip-iv-ef", "ip-iv-mf", "ip-iv-lf",
)
BASELINE_LABEL = "baseline"


def _pooled(size: int, pools: Sequence[int]) -> int:
    for p in pools:
        size //= p
    return size


@dataclass(frozen=True)
class ModelConfig:
    fusion: Fusion = Fusion.MF
    include_participant: bool = False
    include_visual: bool = False
    audio_shape: Tuple[int, int, int] = (644, 64, 2)
    masker_channels: int = 1
    image_shape: Tuple[int, int, int] = (240, 135, 3)
    participant_dim: int = 5
    embed_dim: int = 128
    audio_filters: Tuple[int, ...] = (16, 32, 48, 64, 64)
    audio_pools: Tuple[Tuple[int, int], ...] = ((2, 2), (2, 2), (2, 2), (2, 2), (2, 2))
    visual_filters: Tuple[int, ...] = (16, 32, 48, 64, 64)
    visual_pools: Tuple[int, ...] = (2, 2, 2, 3, 5)
    output_units: int = 128
    dropout_rate: float = 0.1
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        try:
            object.__setattr__(self, "fusion", Fusion(self.fusion))
        except ValueError as exc:
            raise ConfigurationError(f"unknown fusion {self.fusion!r}") from exc
        object.__setattr__(self, "audio_shape", tuple(int(v) for v in self.audio_shape))
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "audio_filters", tuple(int(v) for v in self.audio_filters))
        object.__setattr__(self, "audio_pools", tuple((int(p[0]), int(p[1])) for p in self.audio_pools))
        object.__setattr__(self, "visual_filters", tuple(int(v) for v in self.visual_filters))
        object.__setattr__(self, "visual_pools", tuple(int(v) for v in self.visual_pools))
        if len(self.audio_filters) != len(self.audio_pools):
            raise ConfigurationError("audio_filters and audio_pools must have the same length")
        if len(self.visual_filters) != len(self.visual_pools):
            raise ConfigurationError("visual_filters and visual_pools must have the same length")
        if self.participant_dim < 1 or self.embed_dim < 1 or self.output_units < 1:
            raise ConfigurationError("participant_dim, embed_dim and output_units must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @classmethod
    def miniature(cls, **overrides) -> "ModelConfig":
        """桌面规模的测试配置：T=64, F=8, 图像 48x27, D=8，输出头 32 个隐藏单元。"""
        base = dict(
            audio_shape=(64, 8, 2),
            image_shape=(48, 27, 3),
            embed_dim=8,
            audio_filters=(4, 4, 4, 4, 4),
            audio_pools=((2, 2), (2, 2), (2, 1), (2, 1), (2, 1)),
            visual_filters=(4, 4, 4, 4, 4),
            visual_pools=(2, 2, 2, 3, 1),
            output_units=32,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def adapter_hidden(self) -> int:
        """2^(⌊log2 M⌋ + 1)"""
        return 1 << self.participant_dim.bit_length()

    @property
    def n_frames(self) -> int:
        return _pooled(self.audio_shape[0], [p[0] for p in self.audio_pools])

    @property
    def label(self) -> str:
        if not self.include_participant and not self.include_visual and self.fusion is Fusion.MF:
            return BASELINE_LABEL
        return "-".join((
            "ip" if self.include_participant else "ep",
            "iv" if self.include_visual else "ev",
            self.fusion.value,
        ))

    def with_label(self, label: str) -> "ModelConfig":
        fusion, ip, iv = parse_config_label(label)
        return replace(self, fusion=fusion, include_participant=ip, include_visual=iv)

    def check_shapes(self) -> None:
        """确认卷积/池化堆叠能得到 N×D 的音频嵌入与长度 D 的视觉嵌入。"""
        t, f, _ = self.audio_shape
        n = _pooled(t, [p[0] for p in self.audio_pools])
        f_out = _pooled(f, [p[1] for p in self.audio_pools])
        if n < 1 or f_out < 1:
            raise DimensionError(f"audio shape {self.audio_shape} pools to zero under {self.audio_pools}")
        if f_out * self.audio_filters[-1] != self.embed_dim:
            raise DimensionError(
                f"audio embedding width {f_out}x{self.audio_filters[-1]} != embed_dim {self.embed_dim}"
            )
        if self.include_visual:
            h, w, _ = self.image_shape
            h_out, w_out = _pooled(h, self.visual_pools), _pooled(w, self.visual_pools)
            if h_out < 1 or w_out < 1:
                raise DimensionError(f"image shape {self.image_shape} pools to zero under {self.visual_pools}")
            if h_out * w_out * self.visual_filters[-1] != self.embed_dim:
                raise DimensionError(
                    f"visual embedding size {h_out}x{w_out}x{self.visual_filters[-1]} != embed_dim {self.embed_dim}"
                )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["fusion"] = self.fusion.value
        return json.loads(json.dumps(data))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {', '.join(unknown)}")
        try:
            return cls(**dict(data))
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid model config: {exc}") from exc


def parse_config_label(label: str) -> Tuple[Fusion, bool, bool]:
    """'ip-ev-lf' -> (Fusion.LF, True, False)；'baseline' 等价于 'ep-ev-mf'。"""
    text = label.strip().lower()
    if text == BASELINE_LABEL:
        return Fusion.MF, False, False
    parts = text.split("-")
    if len(parts) != 3 or parts[0] not in ("ip", "ep") or parts[1] not in ("iv", "ev"):
        raise ConfigurationError(f"bad config label {label!r}, expected e.g. 'ip-ev-lf' or 'baseline'")
    try:
        fusion = Fusion(parts[2])
    except ValueError as exc:
        raise ConfigurationError(f"bad fusion in config label {label!r}") from exc
    return fusion, parts[0] == "ip", parts[1] == "iv"


@dataclass(frozen=True)
class PredictedDistribution:
    """N(μ̂, σ̂²) 的参数；LF 模型另外给出适配器输出 (μ̂′, log σ̂′)。"""

    mu: float
    log_sigma: float
    adapted_mu: Optional[float] = None
    adapted_log_sigma: Optional[float] = None

    def __post_init__(self):
        values = [self.mu, self.log_sigma, self.adapted_mu, self.adapted_log_sigma]
        if not all(np.isfinite(v) for v in values if v is not None):
            raise NumericError(f"non-finite prediction {values}")

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    def point_estimate(self, fusion: Fusion) -> float:
        """μ̃：EF/MF 取 μ̂，LF 取 μ̂′。"""
        if Fusion(fusion) is Fusion.LF:
            if self.adapted_mu is None:
                raise ValueError("late-fusion point estimate needs the adapter output")
            return self.adapted_mu
        return self.mu

    def final(self) -> Tuple[float, float]:
        if self.adapted_mu is not None:
            return self.adapted_mu, self.adapted_log_sigma
        return self.mu, self.log_sigma


@dataclass
class ModelInputs:
    """一个 batch 的模型输入（全部为 float64 ndarray，第一维为 batch）。"""

    soundscape: np.ndarray
    masker: np.ndarray
    gamma: np.ndarray
    participant: np.ndarray
    image: np.ndarray

    def __len__(self) -> int:
        return int(self.gamma.shape[0])

    def take(self, index: Any) -> "ModelInputs":
        return ModelInputs(
            soundscape=self.soundscape[index],
            masker=self.masker[index],
            gamma=self.gamma[index],
            participant=self.participant[index],
            image=self.image[index],
        )

    @classmethod
    def from_samples(cls, samples: Sequence[Any], gammas: Optional[Sequence[float]] = None,
                     participant: Optional[np.ndarray] = None) -> "ModelInputs":
        if not samples:
            raise DimensionError("cannot build model inputs from zero samples")
        gamma = np.array([s.gamma for s in samples] if gammas is None else list(gammas), dtype=np.float64)
        return cls(
            soundscape=np.stack([s.soundscape for s in samples]).astype(np.float64),
            masker=np.stack([s.masker for s in samples]).astype(np.float64),
            gamma=gamma,
            participant=(np.stack([s.participant for s in samples]).astype(np.float64)
                         if participant is None else np.asarray(participant, dtype=np.float64)),
            image=np.stack([s.image for s in samples]).astype(np.float64),
        )


@dataclass
class ForwardOutput:
    mu: Tensor
    log_sigma: Tensor
    adapted_mu: Optional[Tensor] = None
    adapted_log_sigma: Optional[Tensor] = None
    embeddings: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def final_mu(self) -> Tensor:
        return self.mu if self.adapted_mu is None else self.adapted_mu

    @property
    def final_log_sigma(self) -> Tensor:
        return self.log_sigma if self.adapted_log_sigma is None else self.adapted_log_sigma

    def distributions(self) -> List[PredictedDistribution]:
        out = []
        for i in range(self.mu.shape[0]):
            out.append(PredictedDistribution(
                mu=float(self.mu.data[i]),
                log_sigma=float(self.log_sigma.data[i]),
                adapted_mu=None if self.adapted_mu is None else float(self.adapted_mu.data[i]),
                adapted_log_sigma=None if self.adapted_log_sigma is None else float(self.adapted_log_sigma.data[i]),
            ))
        return out


# ---- 子网络 ----
class ConvExtractor(Module):
    """5 个卷积块串联；音频版输出 [B, N, F5*C]，视觉版输出 [B, H5*W5*C]。"""

    def __init__(self, in_channels: int, filters: Sequence[int], pools: Sequence[Tuple[int, int]],
                 config: ModelConfig, rng: np.random.Generator, flatten_time: bool):
        super().__init__()
        self.flatten_time = flatten_time
        channels = in_channels
        for i, (count, pool) in enumerate(zip(filters, pools), start=1):
            spec = ConvBlockSpec(filters=count, pool=tuple(pool), dropout_rate=config.dropout_rate)
            setattr(self, f"block{i}", ConvBlock(channels, spec, rng, config.bn_momentum, config.bn_epsilon))
            channels = count

    def forward(self, x: Tensor, mode: Mode = Mode.EVAL, rng: Optional[np.random.Generator] = None) -> Tensor:
        y = x
        for block in self._modules.values():
            y = block(y, mode, rng)
        batch, height, width, channels = y.shape
        if self.flatten_time:
            return y.reshape(batch, height, width * channels)
        return y.reshape(batch, height * width * channels)


class FeatureAugmentation(Module):
    """f_g：逐位置共享的一维卷积把堆叠维压缩为 1，再接 D->D 线性全连接。"""

    def __init__(self, stacked: int, embed_dim: int, rng: np.random.Generator):
        super().__init__()
        self.stacked = stacked
        self.stack_kernel = Parameter(glorot_uniform((stacked, 1), stacked, 1, rng))
        self.stack_bias = Parameter(np.zeros(1))
        self.dense = Dense(embed_dim, DenseSpec(embed_dim, Activation.LINEAR), rng)

    def forward(self, k: Tensor, q: Tensor, gamma: Tensor,
                h: Optional[Tensor] = None, r: Optional[Tensor] = None) -> Tensor:
        if k.shape != q.shape or k.ndim != 3:
            raise DimensionError(f"f_g expects matching [B, N, D] embeddings, got {k.shape} and {q.shape}")
        batch, frames, dim = k.shape
        if gamma.shape != (batch,):
            raise DimensionError(f"f_g expects one gain per sample, got {gamma.shape}")
        planes = [k, q, broadcast_to(gamma.reshape(batch, 1, 1), (batch, frames, dim))]
        if self.stacked == 5:
            for extra in (h, r):
                if extra is None or extra.shape != (batch, dim):
                    raise DimensionError(f"early fusion expects h and r of shape {(batch, dim)}")
                planes.append(broadcast_to(extra.reshape(batch, 1, dim), (batch, frames, dim)))
        stacked = stack(planes, axis=-1)
        compressed = matmul(stacked.reshape(batch * frames * dim, self.stacked), self.stack_kernel)
        compressed = compressed.reshape(batch, frames, dim) + self.stack_bias
        return self.dense(compressed)


class DenseChain(Module):
    """两层 swish 全连接 + 2 单元线性输出；f_o 与 A_o 共用此结构。"""

    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.dense1 = Dense(in_features, DenseSpec(hidden, Activation.SWISH), rng)
        self.dense2 = Dense(hidden, DenseSpec(hidden, Activation.SWISH), rng)
        self.dense3 = Dense(hidden, DenseSpec(2, Activation.LINEAR), rng)

    @property
    def in_features(self) -> int:
        return self.dense1.in_features

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"expected input length {self.in_features}, got {x.shape[-1]}")
        return self.dense3(self.dense2(self.dense1(x)))


class ContextualPPAP(Module):
    def __init__(self, config: ModelConfig, seed: Union[int, np.random.SeedSequence] = 0):
        super().__init__()
        config.check_shapes()
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "metadata", {})
        rng = np.random.default_rng(seed)
        d = config.embed_dim
        self.f_s = ConvExtractor(config.audio_shape[2], config.audio_filters, config.audio_pools,
                                 config, rng, flatten_time=True)
        self.f_m = ConvExtractor(config.masker_channels, config.audio_filters, config.audio_pools,
                                 config, rng, flatten_time=True)
        if config.include_participant:
            self.f_p = Dense(config.participant_dim, DenseSpec(d, Activation.SWISH), rng)
        if config.include_visual:
            square = [(p, p) for p in config.visual_pools]
            self.f_v = ConvExtractor(config.image_shape[2], config.visual_filters, square,
                                     config, rng, flatten_time=False)
        self.f_g = FeatureAugmentation(5 if config.fusion is Fusion.EF else 3, d, rng)
        self.f_o = DenseChain(3 * d if config.fusion is Fusion.MF else d, config.output_units, rng)
        if config.fusion is Fusion.LF:
            self.a_o = DenseChain(2 + 2 * d, config.adapter_hidden, rng)
        for name, param in self.named_parameters():
            param.name = name

    def _check_inputs(self, inputs: ModelInputs) -> None:
        cfg = self.config
        batch = len(inputs)
        expected = {
            "soundscape": (batch, *cfg.audio_shape),
            "masker": (batch, cfg.audio_shape[0], cfg.audio_shape[1], cfg.masker_channels),
            "participant": (batch, cfg.participant_dim),
            "image": (batch, *cfg.image_shape),
        }
        for name, shape in expected.items():
            actual = getattr(inputs, name).shape
            if actual != shape:
                raise DimensionError(f"{name} has shape {actual}, model expects {shape}")

    def context_embeddings(self, inputs: ModelInputs, mode: Mode = Mode.EVAL,
                           rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
        """返回 (h, r)；被排除的模态直接用零向量替代，不经过提取器。"""
        batch, d = len(inputs), self.config.embed_dim
        if self.config.include_participant:
            h = self.f_p(Tensor(inputs.participant))
        else:
            h = Tensor(np.zeros((batch, d)))
        if self.config.include_visual:
            r = self.f_v(Tensor(inputs.image), mode, rng)
        else:
            r = Tensor(np.zeros((batch, d)))
        return h, r

    def forward_batch(self, inputs: ModelInputs, mode: Mode = Mode.EVAL,
                      rng: Optional[np.random.Generator] = None) -> ForwardOutput:
        mode = Mode(mode)
        self._check_inputs(inputs)
        k = self.f_s(Tensor(inputs.soundscape), mode, rng)
        q = self.f_m(Tensor(inputs.masker), mode, rng)
        h, r = self.context_embeddings(inputs, mode, rng)
        gamma = Tensor(inputs.gamma)
        fusion = self.config.fusion
        if fusion is Fusion.EF:
            v = self.f_g(k, q, gamma, h, r)
        else:
            v = self.f_g(k, q, gamma)
        z = dot_product_attention(q, k, v)
        out = self.f_o(concat([z, h, r], axis=-1) if fusion is Fusion.MF else z)
        result = ForwardOutput(mu=out[:, 0], log_sigma=out[:, 1],
                               embeddings={"k": k, "q": q, "h": h, "r": r, "v": v, "z": z})
        if fusion is Fusion.LF:
            adapted = self.a_o(concat([out, h, r], axis=-1))
            result.adapted_mu, result.adapted_log_sigma = adapted[:, 0], adapted[:, 1]
        return result

    forward = forward_batch

    def predict(self, samples: Sequence[Any], gammas: Optional[Sequence[float]] = None) -> List[PredictedDistribution]:
        """评估模式下逐个 batch 前向，返回每个样本的分布。"""
        return self.forward_batch(ModelInputs.from_samples(samples, gammas), Mode.EVAL).distributions()


# ---- 逐样本的函数式入口 ----
def _add_batch(x: Any) -> Tensor:
    x = as_tensor(x)
    return x.reshape(1, *x.shape)


def extract_audio_embeddings(x: Any, extractor: ConvExtractor, mode: Mode = Mode.EVAL,
                             rng: Optional[np.random.Generator] = None) -> Tensor:
    """[T, F, C] -> [N, D]"""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"expected a [T, F, C] spectrogram, got {x.shape}")
    out = extractor(_add_batch(x), mode, rng)
    return out.reshape(*out.shape[1:])


def extract_participant_embeddings(p: Any, extractor: Dense) -> Tensor:
    """[M] -> [D]，h = swish(W p + b)"""
    p = as_tensor(p)
    if p.shape != (extractor.in_features,):
        raise DimensionError(f"participant vector must have length {extractor.in_features}, got {p.shape}")
    return extractor(p)


def extract_visual_embeddings(b: Any, extractor: ConvExtractor, mode: Mode = Mode.EVAL,
                              rng: Optional[np.random.Generator] = None) -> Tensor:
    """[H, W, C_v] -> [D]"""
    b = as_tensor(b)
    if b.ndim != 3:
        raise DimensionError(f"expected an [H, W, C] image, got {b.shape}")
    out = extractor(_add_batch(b), mode, rng)
    return out.reshape(out.shape[1])


def feature_augment_ef(block: FeatureAugmentation, k: Any, q: Any, gamma: float, h: Any, r: Any) -> Tensor:
    if block.stacked != 5:
        raise DimensionError("early fusion needs a 5-channel feature augmentation block")
    k, q, h, r = (as_tensor(t) for t in (k, q, h, r))
    out = block(_add_batch(k), _add_batch(q), Tensor([gamma]), _add_batch(h), _add_batch(r))
    return out.reshape(*out.shape[1:])


def feature_augment_mf(block: FeatureAugmentation, k: Any, q: Any, gamma: float) -> Tensor:
    if block.stacked != 3:
        raise DimensionError("mid-level fusion needs a 3-channel feature augmentation block")
    k, q = as_tensor(k), as_tensor(q)
    out = block(_add_batch(k), _add_batch(q), Tensor([gamma]))
    return out.reshape(*out.shape[1:])


def output_block(block: DenseChain, z_in: Any) -> PredictedDistribution:
    out = block(as_tensor(z_in)).data
    return PredictedDistribution(mu=float(out[0]), log_sigma=float(out[1]))


def output_adapter_lf(adapter: DenseChain, mu: float, log_sigma: float, h: Any, r: Any) -> PredictedDistribution:
    x = concat([Tensor([mu, log_sigma]), as_tensor(h), as_tensor(r)], axis=0)
    out = adapter(x).data
    return PredictedDistribution(mu=float(out[0]), log_sigma=float(out[1]))


def forward(sample: Any, model: ContextualPPAP, mode: Mode = Mode.EVAL,
            rng: Optional[np.random.Generator] = None, gamma: Optional[float] = None) -> PredictedDistribution:
    gammas = None if gamma is None else [gamma]
    return model.forward_batch(ModelInputs.from_samples([sample], gammas), mode, rng).distributions()[0]


# ---- checkpoint ----
def save_checkpoint(model: ContextualPPAP, path: Path | str, metadata: Optional[Mapping[str, Any]] = None) -> Path:
    """
    写出 checkpoint

    格式：magic "CPPAP1\\0"，8 字节小端 header 长度，UTF-8 JSON header，
    然后按 header 中 tensors 的顺序依次写入小端 float64 数据块（offset 相对数据区起点）。
    """
    path = Path(path)
    entries, blobs, offset = [], [], 0
    tensors = [("parameter", name, p.data) for name, p in model.named_parameters()]
    tensors += [("buffer", name, value) for name, value in model.named_buffers()]
    for kind, name, value in tensors:
        blob = np.ascontiguousarray(value, dtype="<f8").tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(value.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    meta = dict(model.metadata)
    meta.update(metadata or {})
    header = json.dumps(
        {"format": 1, "config": model.config.to_dict(), "metadata": meta, "tensors": entries},
        ensure_ascii=False,
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    logger.info("Saved checkpoint %s (%d tensors, %d bytes of weights)", path, len(entries), offset)
    return path


def _tensor_entries(path: Path, entries: Any, body_len: int) -> List[Tuple[str, Tuple[int, ...], int, int]]:
    """把 header 中的 tensors 列表校验成 (name, shape, offset, nbytes)，数据块必须落在数据区内。"""
    if not isinstance(entries, list):
        raise CheckpointFormatError(f"{path}: corrupt header: tensors must be a list")
    parsed = []
    for i, entry in enumerate(entries):
        try:
            name = entry["name"]
            shape = tuple(int(v) for v in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: corrupt header: tensor entry {i}: {exc!r}") from exc
        if not isinstance(name, str) or any(v < 0 for v in shape):
            raise CheckpointFormatError(f"{path}: corrupt header: tensor entry {i} has a bad name or shape")
        if offset < 0 or nbytes < 0 or offset + nbytes > body_len:
            raise CheckpointFormatError(
                f"{path}: tensor {name} spans bytes [{offset}, {offset + nbytes}) outside the {body_len}-byte data block"
            )
        parsed.append((name, shape, offset, nbytes))
    return parsed


def load_checkpoint(path: Path | str, expected_config: Optional[ModelConfig] = None) -> ContextualPPAP:
    """读取 checkpoint；任何格式问题都在构建模型前抛出 CheckpointFormatError。"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    prefix = len(CHECKPOINT_MAGIC)
    if len(raw) < prefix + 8 or raw[:prefix] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not a cPPAP checkpoint (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[prefix:prefix + 8])
    body_start = prefix + 8 + header_len
    if body_start > len(raw):
        raise CheckpointFormatError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[prefix + 8:body_start].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        entries = header["tensors"]
        metadata = header.get("metadata", {})
        if not isinstance(metadata, dict):
            raise TypeError(f"metadata must be an object, got {type(metadata).__name__}")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ConfigurationError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(
            f"{path}: checkpoint config {config.label} does not match expected {expected_config.label}"
        )
    body = raw[body_start:]
    entries = _tensor_entries(path, entries, len(body))
    total = sum(e[3] for e in entries)
    if len(body) != total:
        raise CheckpointFormatError(f"{path}: expected {total} bytes of tensor data, found {len(body)}")

    try:
        model = ContextualPPAP(config)
    except DimensionError as exc:
        raise CheckpointFormatError(f"{path}: config does not describe a valid model: {exc}") from exc
    expected_shapes = {name: p.shape for name, p in model.named_parameters()}
    expected_shapes.update({name: v.shape for name, v in model.named_buffers()})
    state: Dict[str, np.ndarray] = {}
    for name, shape, start, nbytes in entries:
        if expected_shapes.get(name) != shape:
            raise CheckpointFormatError(f"{path}: tensor {name} has shape {shape}, model expects {expected_shapes.get(name)}")
        count = int(np.prod(shape)) if shape else 1
        if count * 8 != nbytes:
            raise CheckpointFormatError(f"{path}: tensor {name} byte count does not match its shape")
        state[name] = np.frombuffer(body, dtype="<f8", count=count, offset=start).astype(np.float64).reshape(shape)
    if set(state) != set(expected_shapes):
        missing = sorted(set(expected_shapes) - set(state))
        raise CheckpointFormatError(f"{path}: checkpoint is missing tensors {missing[:5]}")
    try:
        model.load_state_dict(state)
    except NumericError as exc:
        raise CheckpointFormatError(f"{path}: non-finite weights: {exc}") from exc
    object.__setattr__(model, "metadata", dict(metadata))
    logger.info("Loaded checkpoint %s (config %s)", path, config.label)
    return model
