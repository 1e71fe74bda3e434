"""Loss-based sample weighting for fine-tuning without forgetting."""

__version__ = "0.1.0"

from .exceptions import *  # noqa: F401,F403
from .weighting import (  # noqa: F401
    DEGENERATE_UNIFORM,
    TemperaturePolicy,
    WeightVector,
    compute_weights,
    dro_weights,
    entropic_objective,
    flow_weights,
    normalize_weights,
    select_temperature,
)
from .linear_theory import (  # noqa: F401
    LinearTaskSpec,
    flow_beats_averaging_check,
    flow_trajectory,
    make_task,
    q_eigen,
    simulate_gd,
    vanilla_ft_trajectory,
    weighted_covariance_closed,
    weighted_covariance_general,
    weighted_covariance_mc,
)
from .trainers import (  # noqa: F401
    LabeledDataset,
    MultiHeadModel,
    TrainConfig,
    finetune_multihead,
    flow_multihead,
    weighted_fit,
)
from .bench import BenchmarkSpec, EvalReport, gen_two_task_benchmark, run_comparison  # noqa: F401
