"""Supervised PARAFAC2 factorization of irregular tensors with multi-task heads."""

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    DivergenceError,
    FormatError,
    InsufficientHistory,
    Parafac2Error,
    ShapeError,
    UniquenessError,
)
from .heads import (
    DynamicHead,
    StaticHead,
    TaskSet,
    dynamic_forward,
    dynamic_loss_and_grads,
    pr_auc,
    static_forward,
    static_loss_and_grads,
)
from .model import (
    FactorModel,
    PenaltyConfig,
    fit_score,
    grad_H,
    grad_Q,
    grad_S,
    grad_U,
    grad_V,
    masked_l2_loss,
    nonneg_project,
    reconstruct_slice,
    soft_threshold,
)
from .sdw import SdwState, descent_rate, update_weights
from .tensor import (
    IrregularTensor,
    LabelTable,
    SynthSpec,
    load_labels,
    load_tensor,
    save_labels,
    save_tensor,
    split_tensor,
    synth_generate,
)
from .trainer import (
    FitResult,
    SdwConfig,
    TrainConfig,
    epoch_step,
    evaluate,
    fit,
    fit_heads,
    init_model,
    init_state,
    predict,
    project_slices,
    scaling_probe,
)

__version__ = "0.1.0"
