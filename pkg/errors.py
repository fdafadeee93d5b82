"""MOFFLE 异常层级"""


class MoffleError(Exception):
    """所有项目异常的基类"""


class NonStochasticRow(MoffleError, ValueError):
    """概率表某一行不是合法分布"""


class ShapeMismatch(MoffleError, ValueError):
    pass


class PolicyHorizonMismatch(MoffleError, ValueError):
    """策略覆盖的层数不足以完成请求的采样"""


class EmptyDataset(MoffleError, ValueError):
    pass


class RewardOutOfRange(MoffleError, ValueError):
    pass


class CoordOutOfRange(MoffleError, IndexError):
    pass


class LevelMismatch(MoffleError, ValueError):
    pass


class DimMismatch(MoffleError, ValueError):
    pass


class EmptyClass(MoffleError, ValueError):
    pass


class MissingLevelData(MoffleError, ValueError):
    pass


class GenerationFailed(MoffleError, RuntimeError):
    pass


class ConfigError(MoffleError, ValueError):
    pass


class StageError(MoffleError, RuntimeError):
    """流水线阶段失败，携带阶段名"""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
