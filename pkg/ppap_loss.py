"""
训练目标（高斯负对数似然，"probabilistic" loss）与评估指标 MSE
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from ppap_errors import DimensionError, NumericError
from ppap_model import Fusion, PredictedDistribution
from tensor_autodiff import ArrayLike, Tensor, as_tensor, exp


@dataclass(frozen=True, init=False, eq=False)
class Batch:
    """K 个预测分布与对应标签 y_k ∈ [−1, 1]。"""

    predictions: Tuple[PredictedDistribution, ...]
    labels: np.ndarray

    def __init__(self, predictions: Sequence[PredictedDistribution], labels: ArrayLike):
        labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        if len(predictions) == 0:
            raise DimensionError("a batch needs at least one prediction")
        if len(predictions) != labels.shape[0]:
            raise DimensionError(f"{len(predictions)} predictions but {labels.shape[0]} labels")
        if not np.all(np.isfinite(labels)):
            raise NumericError("non-finite label in batch")
        labels.flags.writeable = False
        object.__setattr__(self, "predictions", tuple(predictions))
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.predictions)

    def mu(self) -> np.ndarray:
        return np.array([p.mu for p in self.predictions])

    def log_sigma(self) -> np.ndarray:
        return np.array([p.log_sigma for p in self.predictions])

    def point_estimates(self, fusion: Fusion) -> np.ndarray:
        return np.array([p.point_estimate(fusion) for p in self.predictions])


def gaussian_nll(mu: ArrayLike, log_sigma: ArrayLike, y: ArrayLike) -> Tensor:
    """
    J = (1/K) Σ_k [ ((y_k − μ̂_k) / σ̂_k)² / 2 + log σ̂_k ]

    可微版本，训练时直接对网络输出调用。
    """
    mu, log_sigma, y = as_tensor(mu), as_tensor(log_sigma), as_tensor(y)
    if not (mu.shape == log_sigma.shape == y.shape) or mu.ndim != 1 or mu.shape[0] == 0:
        raise DimensionError(f"gaussian_nll expects three equal 1-D vectors, got {mu.shape}, {log_sigma.shape}, {y.shape}")
    z = (y - mu) * exp(-log_sigma)
    return (z * z * 0.5 + log_sigma).mean()


def probabilistic_loss(batch: Batch) -> float:
    return gaussian_nll(batch.mu(), batch.log_sigma(), batch.labels).item()


def probabilistic_loss_gradients(batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
    """闭式梯度 (∂J/∂μ̂_k, ∂J/∂log σ̂_k)。"""
    k = len(batch)
    mu, log_sigma, y = batch.mu(), batch.log_sigma(), batch.labels
    inv_var = np.exp(-2.0 * log_sigma)
    d_mu = -(y - mu) * inv_var / k
    d_log_sigma = (1.0 - (y - mu) ** 2 * inv_var) / k
    return d_mu, d_log_sigma


def mse(batch: Batch, fusion: Fusion) -> float:
    """(1/K) Σ (y_k − μ̃_k)²，LF 使用适配器输出 μ̂′。"""
    diff = batch.labels - batch.point_estimates(fusion)
    return float(np.mean(diff * diff))
