"""occ-lab: a desk-scale laboratory for joint MTP + RL training dynamics."""

__version__ = "0.1.0"

from .gain import (  # noqa: F401
    GainDecomposition,
    GainInputs,
    UndefinedOptimumError,
    delta_mtp,
    estimate_L,
    gain_at_optimum,
    lambda_star,
    positivity_threshold,
    smoothness_bound_check,
)
from .policy import (  # noqa: F401
    Backend,
    ForwardCounter,
    Head,
    ModelConfig,
    ParamVector,
    TokenLogProbs,
    forward_logprobs,
    grad_logprob,
    init_params,
    sample_sequence,
)
from .proxy import (  # noqa: F401
    ClipMode,
    DeltaVector,
    OccConfig,
    ProxyBackend,
    ProxyStats,
    alignment_proxy,
    logprob_delta,
    occ_lambda,
    proxy_fidelity,
    variance_proxy,
)
from .rlgrad import (  # noqa: F401
    Algo,
    AlgoConfig,
    GradPair,
    RolloutBatch,
    ce_diagonal_decomposition,
    ce_gradient,
    collect_rollouts,
    group_advantages,
    mtp_policy_gradient,
    rl_gradient,
)
from .tasks import Task, TaskName, copy_reverse, sample_prompt, sum_mod, verify  # noqa: F401
from .trainer import (  # noqa: F401
    NonFiniteGradientError,
    Regime,
    RegimeConfig,
    StepRecord,
    TrainConfig,
    TrainerState,
    compare_regimes,
    detect_phase_transition,
    init_state,
    run_experiment,
    train_step,
)
