"""Progressive channel fusion speaker-embedding toolkit.

Self-contained float64 tensor engine with reverse-mode autodiff, the
ECAPA-style block library with sub-band grouped variants, config-driven
model construction with exact parameter audits, receptive-field analysis,
a toy training kit (circle loss / AAM, Adam, cyclical LR), and EER/minDCF
evaluation.
"""

from .errors import (
    ConfigError,
    ContractError,
    LoadError,
    ShapeError,
    TrainingDiverged,
)
from .models import (
    BlockSpec,
    ModelConfig,
    Network,
    ParamAudit,
    build_ablation,
    build_model,
    count_params,
    load_model,
    save_model,
    time_rf_extent,
)
from .tensor import ConvSpec, Tensor

__all__ = [
    "BlockSpec",
    "ConfigError",
    "ContractError",
    "ConvSpec",
    "LoadError",
    "ModelConfig",
    "Network",
    "ParamAudit",
    "ShapeError",
    "Tensor",
    "TrainingDiverged",
    "build_ablation",
    "build_model",
    "count_params",
    "load_model",
    "save_model",
    "time_rf_extent",
]
