"""Fine-tuning of classification heads over frozen features with
text-derived reference distributions, plus empirical verifiers for the
displacement bounds that motivate the regularization."""

from .data import (
    FeatureDataset,
    TextProxySet,
    few_shot_subsample,
    long_tail_subsample,
    read_features,
    read_proxies,
    split,
    synth_generate,
    write_features,
    write_proxies,
)
from .estimator import TextTunedClassifier
from .losses import (
    Hyperparams,
    LossOutput,
    class_distributions,
    instance_text_distribution,
    instance_vision_distribution,
    smoothed_targets,
    zero_shot_predict,
)
from .metrics import EvalResult, evaluate, t_test
from .model import (
    FeatureAdapter,
    ModelSnapshot,
    ProjectionHead,
    TesModel,
    VisionClassifier,
    parameter_distance,
)
from .ndcore import (
    GradCheckReport,
    finite_diff_gradient,
    l2_normalize_rows,
    matmul,
    softmax_rows,
)
from .optim import TrainConfig, TrainingTrace, cosine_lr, grid_search, sgd_step, train
from .theory import (
    BoundReport,
    estimate_constants,
    solve_linear_probe,
    verify_corollary1,
    verify_prop1,
    verify_theorem1,
    verify_theorem2,
)

__version__ = "0.1.0"

__all__ = [
    "BoundReport",
    "EvalResult",
    "FeatureAdapter",
    "FeatureDataset",
    "GradCheckReport",
    "Hyperparams",
    "LossOutput",
    "ModelSnapshot",
    "ProjectionHead",
    "TesModel",
    "TextProxySet",
    "TextTunedClassifier",
    "TrainConfig",
    "TrainingTrace",
    "VisionClassifier",
    "class_distributions",
    "cosine_lr",
    "estimate_constants",
    "evaluate",
    "few_shot_subsample",
    "finite_diff_gradient",
    "grid_search",
    "instance_text_distribution",
    "instance_vision_distribution",
    "l2_normalize_rows",
    "long_tail_subsample",
    "matmul",
    "parameter_distance",
    "read_features",
    "read_proxies",
    "sgd_step",
    "smoothed_targets",
    "softmax_rows",
    "solve_linear_probe",
    "split",
    "synth_generate",
    "t_test",
    "train",
    "verify_corollary1",
    "verify_prop1",
    "verify_theorem1",
    "verify_theorem2",
    "write_features",
    "write_proxies",
    "zero_shot_predict",
]
