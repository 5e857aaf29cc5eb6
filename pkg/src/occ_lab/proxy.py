"""Log-probability proxies for gradient alignment, and the adaptive coefficient.

Instead of the exact c = <g_RL, g_MTP> and v2 = ||g_MTP||^2, track per-token
changes of the model's realized log-probs (both heads, all masked response
predictions) under single-objective virtual steps:
delta_g = log pi_{theta + eta g} - log pi_theta. Then

    c_hat  = <delta_RL, delta_MTP>      (alignment proxy)
    v2_hat = ||delta_MTP||^2            (variance proxy)
    lambda = lambda_plus * c_hat / (v2_hat + epsilon)

Measuring through the full model's outputs matters: deltas restricted to the
main head annihilate the auxiliary gradient's head-segment mass, so v2_hat
collapses toward zero and the ratio explodes, while the full-output delta
keeps v2_hat commensurate with ||g_MTP||^2. Sums (not means) over the token
axis keep the ratio batch-size stable since numerator and denominator scale
together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .policy import ForwardCounter, Head, ModelConfig, ParamVector, evaluate_response
from .rlgrad import RolloutBatch, _assemble_gradient, evaluate_batch

log = logging.getLogger(__name__)

LAMBDA_CAP = 100.0  # guards epsilon-dominated blowups when v2_hat is near zero

FIRST_ORDER_STEP = 1e-5


class ClipMode(Enum):
    NO_CLIP = "no_clip"
    CLIP = "clip"


class ProxyBackend(Enum):
    VIRTUAL_STEP = "virtual_step"
    FIRST_ORDER = "first_order"


@dataclass(frozen=True)
class OccConfig:
    lambda_plus: float = 1.0
    epsilon: float = 1e-8
    clip_mode: ClipMode = ClipMode.NO_CLIP
    proxy_backend: ProxyBackend = ProxyBackend.VIRTUAL_STEP

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.lambda_plus <= 0.0:
            raise ValueError("lambda_plus must be positive")


@dataclass
class DeltaVector:
    """Per-prediction realized log-prob changes, concatenated in batch order
    (each response contributes its main-head entries then its MTP entries)."""

    values: np.ndarray
    token_count: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size != self.token_count:
            raise ValueError("token_count must match the number of entries")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("delta entries must be finite")


@dataclass
class ProxyStats:
    c_hat: float
    v2_hat: float
    lambda_t: float
    c_exact: float | None = None
    v2_exact: float | None = None


def batch_realized_logprobs(params: ParamVector, config: ModelConfig,
                            batch: RolloutBatch,
                            counter: ForwardCounter | None = None) -> np.ndarray:
    """Realized log-probs of every masked prediction (main then MTP entries
    per response), concatenated in batch order."""
    parts = []
    for i in range(batch.size):
        lp = evaluate_response(params, config, batch.prompt_of(i),
                               batch.responses[i], counter).logprobs
        parts.append(lp.main)
        parts.append(lp.mtp)
    return np.concatenate(parts) if parts else np.zeros(0)


def logprob_delta(params: ParamVector, config: ModelConfig, batch: RolloutBatch,
                  g: np.ndarray, eta: float,
                  backend: ProxyBackend = ProxyBackend.VIRTUAL_STEP,
                  base: np.ndarray | None = None,
                  counter: ForwardCounter | None = None,
                  evals=None) -> DeltaVector:
    """Per-prediction realized log-prob change under a virtual step
    theta + eta*g, evaluated on a scratch copy.

    ``base`` may carry already-computed log-probs at theta (same layout as
    ``batch_realized_logprobs``) to avoid an extra batch evaluation. The
    FIRST_ORDER backend returns the exact linearization
    eta * <grad log p(prediction), g> per entry instead of re-evaluating; it
    can reuse already-computed ``evals``.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != params.values.shape:
        raise ValueError("gradient shape does not match parameter vector")

    if backend is ProxyBackend.FIRST_ORDER:
        if evals is None:
            evals = evaluate_batch(params, config, batch, counter)
        parts = []
        for ev in evals:
            n = ev.response.size
            k = ev.logprobs.mtp.size
            vals = np.empty(n + k)
            for j in range(n):
                w = np.zeros(n)
                w[j] = 1.0
                grad_j = _assemble_gradient(params, config, [ev], Head.MAIN, [w])
                vals[j] = eta * float(np.dot(grad_j, g))
            for j in range(k):
                w = np.zeros(k)
                w[j] = 1.0
                grad_j = _assemble_gradient(params, config, [ev], Head.MTP, [w])
                vals[n + j] = eta * float(np.dot(grad_j, g))
            parts.append(vals)
        values = np.concatenate(parts) if parts else np.zeros(0)
        return DeltaVector(values=values, token_count=values.size)

    if base is None:
        base = batch_realized_logprobs(params, config, batch, counter)
    stepped = params.with_values(params.values + eta * g)
    new = batch_realized_logprobs(stepped, config, batch, counter)
    return DeltaVector(values=new - base, token_count=new.size)


def alignment_proxy(delta_rl: DeltaVector, delta_mtp: DeltaVector) -> float:
    if delta_rl.token_count != delta_mtp.token_count:
        raise ValueError("delta vectors cover different token counts")
    return float(np.dot(delta_rl.values, delta_mtp.values))


def variance_proxy(delta_mtp: DeltaVector) -> float:
    return float(np.dot(delta_mtp.values, delta_mtp.values))


def occ_lambda(c_hat: float, v2_hat: float, occ: OccConfig) -> float:
    """lambda_plus * c_hat / (v2_hat + epsilon), optionally clipping negative
    alignment to zero; magnitude-capped at LAMBDA_CAP."""
    if v2_hat < 0.0:
        raise ValueError("v2_hat must be nonnegative")
    num = max(0.0, c_hat) if occ.clip_mode is ClipMode.CLIP else c_hat
    lam = occ.lambda_plus * num / (v2_hat + occ.epsilon)
    if abs(lam) > LAMBDA_CAP:
        log.warning("occ lambda %.3g capped to %.1f", lam, np.sign(lam) * LAMBDA_CAP)
        lam = float(np.sign(lam) * LAMBDA_CAP)
    return lam


def proxy_fidelity(history: list[ProxyStats]) -> tuple[float, float]:
    """Pearson correlations of (c_hat, c_exact) and (v2_hat, v2_exact)."""
    rows = [h for h in history if h.c_exact is not None and h.v2_exact is not None]
    if len(rows) < 3:
        raise ValueError("need at least 3 records with exact values")
    c_hat = np.array([h.c_hat for h in rows])
    c_ex = np.array([h.c_exact for h in rows])
    v_hat = np.array([h.v2_hat for h in rows])
    v_ex = np.array([h.v2_exact for h in rows])
    for name, series in (("c_hat", c_hat), ("c_exact", c_ex),
                         ("v2_hat", v_hat), ("v2_exact", v_ex)):
        if series.std() == 0.0:
            raise ValueError(f"{name} series has zero variance; correlation undefined")
    r_c = float(np.corrcoef(c_hat, c_ex)[0, 1])
    r_v = float(np.corrcoef(v_hat, v_ex)[0, 1])
    return r_c, r_v
