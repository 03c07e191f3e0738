"""
cPPAP 工具链统一的异常类型

库代码只负责抛出异常，退出码与单行错误信息由 ppap_cli 统一处理。
"""

from __future__ import annotations

from typing import Iterable, List


class PPAPError(Exception):
    """所有本项目异常的基类"""


class DimensionError(PPAPError, ValueError):
    """张量形状不匹配、窗口大于输入、N=0 等维度问题"""


class DegenerateBatchError(DimensionError):
    """训练模式下 batch norm 的 batch 大小为 1"""


class NumericError(PPAPError, ArithmeticError):
    """前向或反向传播中出现 NaN/Inf"""


class TrainingDivergedError(NumericError):
    """训练损失 J 非有限，附带 epoch 与 batch 位置"""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch={epoch}, batch={batch})")
        self.epoch = epoch
        self.batch = batch


class CheckpointFormatError(PPAPError):
    """checkpoint 文件损坏、截断或与 header 不一致"""


class ConfigMismatchError(CheckpointFormatError):
    """checkpoint 中的 ModelConfig 与期望的不一致"""


class ConfigurationError(PPAPError):
    """配置非法：未知键、空 fold、缺少 gain 统计量等"""


class InputError(PPAPError, ValueError):
    """原始输入（音频/图像）不可用"""


class ValidationError(PPAPError, ValueError):
    """数据校验失败"""


class ManifestValidationError(ValidationError):
    """manifest 逐行校验失败，problems 中每项形如 'row N: ...'"""

    def __init__(self, problems: Iterable[str]):
        self.problems: List[str] = list(problems)
        head = "; ".join(self.problems[:5])
        more = f" (+{len(self.problems) - 5} more)" if len(self.problems) > 5 else ""
        super().__init__(f"{len(self.problems)} manifest problem(s): {head}{more}")
