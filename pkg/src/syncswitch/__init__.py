"""Simulated parameter-server SGD with BSP/ASP protocol switching."""

from .config import ConfigError, Experiment, load_config, parse_config
from .estimator import SyncSwitchClassifier
from .kernel import (
    DivergenceError,
    Hyperparams,
    LRSchedule,
    Model,
    make_dataset,
    loss_and_grad,
    sgd_momentum_step,
)
from .metrics import (
    CoverageError,
    SearchSetting,
    SessionPool,
    converged_accuracy,
    final_accuracy,
    monte_carlo_search,
    speedups,
    tta,
)
from .policies import (
    binary_search_timing,
    config_policy,
    make_plan,
    remap_lr_schedule,
    SwitchPlan,
    TimingSearchConfig,
)
from .protocols import ASP, BSP
from .simulator import (
    KernelConfig,
    RunTrace,
    Simulation,
    StragglerInjection,
    SwitchOverheadModel,
    WorkerProfile,
    homogeneous_cluster,
)

__version__ = "0.1.0"
