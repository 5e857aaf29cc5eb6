"""Training loop: regime dispatch, the plain-SGD update, and instrumentation.

One step collects grouped rollouts, then runs ppo_epochs x micro_batches inner
updates of theta <- theta + eta * (g_RL + lambda * g_aux), where the auxiliary
gradient and its coefficient depend on the regime:

* DETACH        -- reward-blind MTP cross-entropy, trunk contribution zeroed,
                   so the MTP head keeps learning while the main model follows
                   exactly the trajectory it would follow with no auxiliary.
* CROSS_ENTROPY -- the same CE gradient, flowing into the shared trunk, with a
                   fixed coefficient.
* POLICY_LOSS   -- the MTP head trained with the main surrogate (advantages,
                   trust region, credit assignment), fixed coefficient.
* OCC           -- POLICY_LOSS's gradient with the coefficient recalibrated
                   from log-prob proxies: once per micro-batch in the first
                   inner epoch (reused by later epochs), so the only extra
                   forward work per step is the two virtual-step batch
                   evaluations.

Exact instrumentation (c, v2, the gain terms, a curvature estimate) is
computed at the step's starting parameters from the plain unclipped
estimators.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import gain
from .policy import Backend, ForwardCounter, Head, ModelConfig, ParamVector, init_params
from .proxy import (
    LAMBDA_CAP,
    OccConfig,
    ProxyBackend,
    ProxyStats,
    alignment_proxy,
    logprob_delta,
    occ_lambda,
    variance_proxy,
)
from .rlgrad import (
    AlgoConfig,
    GradPair,
    RolloutBatch,
    ce_gradient,
    collect_rollouts,
    evaluate_batch,
    mtp_policy_gradient,
    plain_gradient,
    rl_gradient,
)
from .tasks import Task, sum_mod


class Regime(Enum):
    DETACH = "detach"
    CROSS_ENTROPY = "cross_entropy"
    POLICY_LOSS = "policy_loss"
    OCC = "occ"


class NonFiniteGradientError(RuntimeError):
    """A training update produced non-finite values; the run must abort."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite gradient at step {step}: {detail}")
        self.step = step
        self.detail = detail


@dataclass(frozen=True)
class RegimeConfig:
    kind: Regime = Regime.DETACH
    fixed_lambda: float = 0.1  # CROSS_ENTROPY and POLICY_LOSS only
    occ: OccConfig = field(default_factory=OccConfig)

    def __post_init__(self) -> None:
        if not np.isfinite(self.fixed_lambda):
            raise ValueError("fixed_lambda must be finite")


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 1.0  # desk-scale surrogates need unit-ish steps to move logits
    steps: int = 200
    batch: int = 64
    group: int = 8
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    task: Task = field(default_factory=sum_mod)
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    seed: int = 0
    instrument_exact: bool = False
    temperature: float = 1.0
    l_probes: int = 2       # estimate_L probes (instrumented runs only)
    l_fd_step: float = 1e-4

    def __post_init__(self) -> None:
        if self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch % self.group != 0:
            raise ValueError("batch must be divisible by group")
        n_groups = self.batch // self.group
        if n_groups % self.algo.micro_batches != 0:
            raise ValueError("group count must be divisible by micro_batches")
        if self.task.vocab_size != self.model.vocab_size:
            raise ValueError("task vocab_size must match model vocab_size")
        max_ctx = self.task.prompt_len + self.task.response_len - 1
        if max_ctx > self.model.context_window:
            raise ValueError("prompt+response exceed the model context window")


@dataclass
class StepRecord:
    step: int
    mean_reward: float
    lambda_used: float
    c_hat: float | None
    v2_hat: float | None
    c_exact: float | None
    v2_exact: float | None
    first_order: float | None
    second_order: float | None
    delta_mtp: float | None
    grad_norm_rl: float
    grad_norm_mtp: float
    forward_pass_count: int
    L_estimate: float | None
    lambda_cap_hits: int = field(default=0, repr=False, compare=False)
    inner_updates: list | None = field(default=None, repr=False, compare=False)
    exact_grads: tuple | None = field(default=None, repr=False, compare=False)


@dataclass
class TrainerState:
    params: ParamVector
    rng: np.random.Generator
    step: int = 0


def init_state(config: TrainConfig) -> TrainerState:
    params = init_params(config.model, config.seed)
    return TrainerState(params=params, rng=np.random.default_rng([config.seed, 1]))


def _masked_to_segment(grad: np.ndarray, params: ParamVector, name: str) -> np.ndarray:
    out = np.zeros_like(grad)
    lo, hi = params.segments[name]
    out[lo:hi] = grad[lo:hi]
    return out


def _micro_chunks(batch: RolloutBatch, micro_batches: int) -> list[RolloutBatch]:
    n_groups = len(batch.prompts)
    per = n_groups // micro_batches
    return [batch.group_subset(slice(k * per, (k + 1) * per)) for k in range(micro_batches)]


def _realized_base(evals) -> np.ndarray:
    """Baseline realized log-probs in batch_realized_logprobs layout."""
    parts = []
    for ev in evals:
        parts.append(ev.logprobs.main)
        parts.append(ev.logprobs.mtp)
    return np.concatenate(parts) if parts else np.zeros(0)


def train_step(state: TrainerState, config: TrainConfig,
               capture_grads: bool = False) -> tuple[TrainerState, StepRecord]:
    counter = ForwardCounter()
    params = state.params.copy()
    rng = state.rng
    regime = config.regime

    batch = collect_rollouts(params, config.model, config.task, config.batch,
                             config.group, config.temperature, rng, counter)

    # Instrumentation at the step's starting parameters, plain estimators.
    evals0 = evaluate_batch(params, config.model, batch, counter)
    g_rl0 = plain_gradient(params, config.model, batch, Head.MAIN, evals=evals0)
    g_mtp0 = plain_gradient(params, config.model, batch, Head.MTP, evals=evals0)
    g_ce0 = (ce_gradient(params, config.model, batch, evals=evals0)
             if capture_grads else None)
    grad_norm_rl = float(np.linalg.norm(g_rl0))
    grad_norm_mtp = float(np.linalg.norm(g_mtp0))

    c_exact = v2_exact = l_est = None
    c_hat = v2_hat = None
    if config.instrument_exact:
        c_exact = float(np.dot(g_rl0, g_mtp0))
        v2_exact = float(np.dot(g_mtp0, g_mtp0))
        l_est = gain.estimate_L(params, config.model, batch, probes=config.l_probes,
                                fd_step=config.l_fd_step, counter=counter)
        if regime.kind is not Regime.OCC:
            base = _realized_base(evals0)
            d_rl = logprob_delta(params, config.model, batch, g_rl0, config.eta,
                                 regime.occ.proxy_backend, base=base, counter=counter)
            d_mtp = logprob_delta(params, config.model, batch, g_mtp0, config.eta,
                                  regime.occ.proxy_backend, base=base, counter=counter)
            c_hat = alignment_proxy(d_rl, d_mtp)
            v2_hat = variance_proxy(d_mtp)

    chunks = _micro_chunks(batch, config.algo.micro_batches)
    mb_lambda: dict[int, float] = {}
    lambdas_applied: list[float] = []
    cap_hits = 0
    inner_log = [] if capture_grads else None
    occ_c_sum = 0.0
    occ_v2_sum = 0.0

    for epoch in range(config.algo.ppo_epochs):
        for mb_idx, sub in enumerate(chunks):
            evals = evaluate_batch(params, config.model, sub, counter)
            g_rl = rl_gradient(params, config.model, sub, config.algo, evals=evals)

            if regime.kind is Regime.DETACH:
                g_aux = _masked_to_segment(
                    ce_gradient(params, config.model, sub, evals=evals), params, "mtp_head")
                lam = 1.0
            elif regime.kind is Regime.CROSS_ENTROPY:
                g_aux = ce_gradient(params, config.model, sub, evals=evals)
                lam = regime.fixed_lambda
            elif regime.kind is Regime.POLICY_LOSS:
                g_aux = mtp_policy_gradient(params, config.model, sub, config.algo,
                                            evals=evals)
                lam = regime.fixed_lambda
            else:  # OCC
                g_aux = mtp_policy_gradient(params, config.model, sub, config.algo,
                                            evals=evals)
                if epoch == 0:
                    g_rl_p = plain_gradient(params, config.model, sub, Head.MAIN,
                                            evals=evals)
                    g_mtp_p = plain_gradient(params, config.model, sub, Head.MTP,
                                             evals=evals)
                    base = _realized_base(evals)
                    d_rl = logprob_delta(params, config.model, sub, g_rl_p, config.eta,
                                         regime.occ.proxy_backend, base=base,
                                         counter=counter, evals=evals)
                    d_mtp = logprob_delta(params, config.model, sub, g_mtp_p, config.eta,
                                          regime.occ.proxy_backend, base=base,
                                          counter=counter, evals=evals)
                    ch = alignment_proxy(d_rl, d_mtp)
                    vh = variance_proxy(d_mtp)
                    occ_c_sum += ch
                    occ_v2_sum += vh
                    lam_mb = occ_lambda(ch, vh, regime.occ)
                    if abs(lam_mb) >= LAMBDA_CAP:
                        cap_hits += 1
                    mb_lambda[mb_idx] = lam_mb
                lam = mb_lambda[mb_idx]

            update = g_rl + lam * g_aux
            if not np.all(np.isfinite(update)):
                raise NonFiniteGradientError(
                    state.step,
                    f"epoch {epoch} micro-batch {mb_idx}: "
                    f"|g_rl|={np.linalg.norm(g_rl):.3g} lambda={lam:.3g}")
            lambdas_applied.append(lam)
            if inner_log is not None:
                inner_log.append((g_rl.copy(), g_aux.copy(), lam))
            params.values += config.eta * update
            if not np.all(np.isfinite(params.values)):
                raise NonFiniteGradientError(
                    state.step,
                    f"parameters overflowed at epoch {epoch} micro-batch {mb_idx}")

    if regime.kind is Regime.OCC:
        c_hat = occ_c_sum
        v2_hat = occ_v2_sum

    lambda_used = float(np.mean(lambdas_applied))
    first = second = delta = None
    if config.instrument_exact:
        first, second = gain.delta_terms(c_exact, v2_exact, config.eta, l_est,
                                         lambda_used)
        delta = first + second

    record = StepRecord(
        step=state.step,
        mean_reward=float(batch.rewards.mean()),
        lambda_used=lambda_used,
        c_hat=c_hat, v2_hat=v2_hat,
        c_exact=c_exact, v2_exact=v2_exact,
        first_order=first, second_order=second, delta_mtp=delta,
        grad_norm_rl=grad_norm_rl, grad_norm_mtp=grad_norm_mtp,
        forward_pass_count=counter.count,
        L_estimate=l_est,
        lambda_cap_hits=cap_hits,
        inner_updates=inner_log,
        exact_grads=(GradPair(g_rl=g_rl0, g_mtp=g_mtp0, g_ce=g_ce0)
                     if capture_grads else None),
    )
    return TrainerState(params=params, rng=rng, step=state.step + 1), record


def run_experiment(config: TrainConfig, on_step=None,
                   capture_grads: bool = False) -> list[StepRecord]:
    """Run ``config.steps`` sequential steps; deterministic for a given seed."""
    state = init_state(config)
    records: list[StepRecord] = []
    for _ in range(config.steps):
        state, rec = train_step(state, config, capture_grads)
        records.append(rec)
        if on_step is not None:
            on_step(state, rec)
    return records


def regime_label(regime: RegimeConfig) -> str:
    if regime.kind is Regime.OCC:
        return f"occ[{regime.occ.clip_mode.value}]"
    if regime.kind is Regime.DETACH:
        return "detach"
    return f"{regime.kind.value}[lam={regime.fixed_lambda:g}]"


@dataclass
class ComparisonRow:
    regime: str
    seed: int
    final_reward: float


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow]
    summary: dict[str, tuple[float, float, int]]  # label -> (mean, stderr, n)
    final_window: int


def compare_regimes(base: TrainConfig, regimes: list[RegimeConfig], seeds: list[int],
                    final_window: int = 20, labels: list[str] | None = None,
                    runner=None) -> ComparisonReport:
    """Per-(regime, seed) final-window mean rewards with cross-seed summaries.

    ``runner`` lets callers supply a parallel map over configs (must preserve
    order); the default runs sequentially.
    """
    if len(regimes) < 1:
        raise ValueError("need at least one regime")
    if labels is None:
        labels = [regime_label(r) for r in regimes]
    cells = [(label, regime, seed)
             for label, regime in zip(labels, regimes) for seed in seeds]
    configs = [replace(base, regime=regime, seed=seed) for _, regime, seed in cells]
    if runner is None:
        results = [run_experiment(cfg) for cfg in configs]
    else:
        results = list(runner(configs))
    rows = []
    for (label, _, seed), records in zip(cells, results):
        window = records[-final_window:] if records else []
        final = float(np.mean([r.mean_reward for r in window])) if window else float("nan")
        rows.append(ComparisonRow(regime=label, seed=seed, final_reward=final))
    summary = {}
    for label in labels:
        vals = np.array([r.final_reward for r in rows if r.regime == label])
        stderr = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        summary[label] = (float(vals.mean()), stderr, int(vals.size))
    return ComparisonReport(rows=rows, summary=summary, final_window=final_window)


SIGN_TOL = 1e-12  # dead-band so parabola roots are neither positive nor negative


def detect_phase_transition(records: list[StepRecord], lambda_probe: float,
                            eta: float, window: int = 10) -> int | None:
    """First step opening a sustained window of negative gain at lambda_probe,
    preceded by a sustained window of positive gain.

    The gain series is rebuilt from each record's exact instrumentation
    (c_exact, v2_exact, L_estimate); returns None when no such crossing
    pattern exists.
    """
    for name in ("c_exact", "v2_exact", "L_estimate"):
        if any(getattr(r, name) is None for r in records):
            raise ValueError(f"records lack exact instrumentation: {name} missing")
    d = np.array([sum(gain.delta_terms(r.c_exact, r.v2_exact, eta, r.L_estimate,
                                       lambda_probe))
                  for r in records])
    pos = d > SIGN_TOL
    neg = d < -SIGN_TOL
    n = d.size
    if n < 2 * window:
        return None
    # longest positive run ending at or before each index
    run = 0
    pos_window_seen = np.zeros(n, dtype=bool)
    seen = False
    for i in range(n):
        run = run + 1 if pos[i] else 0
        if run >= window:
            seen = True
        pos_window_seen[i] = seen
    for s in range(n - window + 1):
        if neg[s : s + window].all() and s > 0 and pos_window_seen[s - 1]:
            return s
    return None


def records_to_proxy_history(records: list[StepRecord]) -> list[ProxyStats]:
    """ProxyStats view of instrumented step records (for fidelity analysis)."""
    out = []
    for r in records:
        if r.c_hat is None or r.v2_hat is None:
            continue
        out.append(ProxyStats(c_hat=r.c_hat, v2_hat=r.v2_hat, lambda_t=r.lambda_used,
                              c_exact=r.c_exact, v2_exact=r.v2_exact))
    return out
