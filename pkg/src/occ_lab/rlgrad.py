"""Rollout collection, group-normalized advantages, and exact batch gradients.

Three ascent gradients are exposed, all ParamVector-shaped:

* ``rl_gradient``      -- the RL surrogate on the main head (GRPO / DAPO-lite /
  GSPO-lite),
* ``mtp_policy_gradient`` -- the identical surrogate on the MTP head, reusing
  each response's sequence-level advantage,
* ``ce_gradient``      -- reward-blind ascent on the mean MTP log-likelihood
  (pretraining-style supervision).

The sequence-level advantage is broadcast to every token of a response, and
losses average (not sum) over a response's tokens so gradient magnitudes stay
comparable across response lengths. The plain unclipped estimator used for
instrumentation is available as ``plain_gradient`` even when a clipped
surrogate drives updates, so the diagonal/cross decomposition identities hold
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .policy import (
    ForwardCounter,
    Head,
    ModelConfig,
    ParamVector,
    ResponseEval,
    TokenLogProbs,
    accumulate_logprob_grad,
    evaluate_response,
    sample_sequence,
)
from .tasks import Task, sample_prompt, verify

DEGENERATE_STD = 1e-8  # below this, a reward group carries no signal


class Algo(Enum):
    GRPO = "grpo"
    DAPO_LITE = "dapo_lite"
    GSPO_LITE = "gspo_lite"


@dataclass(frozen=True)
class AlgoConfig:
    algo: Algo = Algo.GRPO
    clip_low: float = 0.2
    clip_high: float | None = None  # defaults to 0.28 for DAPO-lite, else clip_low
    ppo_epochs: int = 2
    micro_batches: int = 2

    def __post_init__(self) -> None:
        if self.clip_high is None:
            high = 0.28 if self.algo is Algo.DAPO_LITE else self.clip_low
            object.__setattr__(self, "clip_high", high)
        if not (0.0 < self.clip_low <= self.clip_high < 1.0):
            raise ValueError("require 0 < clip_low <= clip_high < 1")
        if self.ppo_epochs < 1 or self.micro_batches < 1:
            raise ValueError("ppo_epochs and micro_batches must be >= 1")


@dataclass
class RolloutBatch:
    """G responses per prompt, grouped contiguously, with zero-mean advantages."""

    prompts: list[np.ndarray]
    responses: list[np.ndarray]
    rewards: np.ndarray
    advantages: np.ndarray
    old_logprobs: list[TokenLogProbs]
    group_size: int

    def __post_init__(self) -> None:
        b = len(self.responses)
        if b != len(self.prompts) * self.group_size:
            raise ValueError("|responses| must equal #prompts * group_size")
        for g in range(len(self.prompts)):
            s = self.advantages[g * self.group_size : (g + 1) * self.group_size].sum()
            if abs(s) > 1e-9:
                raise ValueError(f"group {g} advantages sum to {s}, expected 0")

    @property
    def size(self) -> int:
        return len(self.responses)

    def prompt_of(self, i: int) -> np.ndarray:
        return self.prompts[i // self.group_size]

    def group_subset(self, groups: slice) -> "RolloutBatch":
        g = self.group_size
        lo = (groups.start or 0) * g
        hi = groups.stop * g
        return RolloutBatch(
            prompts=self.prompts[groups],
            responses=self.responses[lo:hi],
            rewards=self.rewards[lo:hi],
            advantages=self.advantages[lo:hi],
            old_logprobs=self.old_logprobs[lo:hi],
            group_size=g,
        )


@dataclass
class GradPair:
    g_rl: np.ndarray
    g_mtp: np.ndarray
    g_ce: np.ndarray


def group_advantages(rewards) -> np.ndarray:
    """(r - mean) / std within the group; all zeros when the group is degenerate."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ValueError("group size must be >= 2")
    std = rewards.std()
    if std < DEGENERATE_STD:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


def collect_rollouts(params: ParamVector, config: ModelConfig, task: Task,
                     batch: int, group: int, temperature: float,
                     rng: np.random.Generator,
                     counter: ForwardCounter | None = None) -> RolloutBatch:
    if group < 2:
        raise ValueError("group size must be >= 2")
    if batch % group != 0:
        raise ValueError("batch must be divisible by group size")
    if task.vocab_size != config.vocab_size:
        raise ValueError("task and model vocab sizes differ")
    prompts, responses, old_lps = [], [], []
    rewards = np.empty(batch)
    advantages = np.empty(batch)
    for g in range(batch // group):
        prompt = sample_prompt(task, rng)
        prompts.append(prompt)
        for k in range(group):
            resp, lp = sample_sequence(params, config, prompt, task.response_len,
                                       temperature, rng, counter)
            responses.append(resp)
            old_lps.append(lp)
            rewards[g * group + k] = verify(task, prompt, resp)
        advantages[g * group : (g + 1) * group] = group_advantages(
            rewards[g * group : (g + 1) * group])
    return RolloutBatch(prompts, responses, rewards, advantages, old_lps, group)


def evaluate_batch(params: ParamVector, config: ModelConfig, batch: RolloutBatch,
                   counter: ForwardCounter | None = None) -> list[ResponseEval]:
    return [evaluate_response(params, config, batch.prompt_of(i), batch.responses[i], counter)
            for i in range(batch.size)]


def _token_weights(batch: RolloutBatch, evals: list[ResponseEval], algo: AlgoConfig,
                   head: Head, plain: bool, reward_blind: bool = False):
    """Per-token gradient weights for the chosen surrogate.

    Returns one weight array per response, aligned with that response's main
    (or MTP) realized-token log-probs. ``plain`` selects the unclipped
    estimator regardless of ``algo``; ``reward_blind`` drops advantages (the
    cross-entropy objective).
    """
    b = batch.size
    out = []
    for i in range(b):
        lp = evals[i].logprobs
        new = lp.main if head is Head.MAIN else lp.mtp
        old_lp = batch.old_logprobs[i]
        old = old_lp.main if head is Head.MAIN else old_lp.mtp
        n_tok = new.size
        if n_tok == 0:
            out.append(np.zeros(0))
            continue
        if reward_blind:
            out.append(np.full(n_tok, 1.0 / (b * n_tok)))
            continue
        a = batch.advantages[i]
        if plain or algo.algo is Algo.GRPO:
            out.append(np.full(n_tok, a / (b * n_tok)))
            continue
        lo, hi = 1.0 - algo.clip_low, 1.0 + algo.clip_high
        if algo.algo is Algo.DAPO_LITE:
            ratio = np.exp(new - old)
            clipped = np.clip(ratio, lo, hi)
            active = ratio * a <= clipped * a
            out.append(np.where(active, a * ratio, 0.0) / (b * n_tok))
        else:  # GSPO-lite: geometric-mean sequence ratio
            seq_ratio = float(np.exp(np.mean(new - old)))
            clipped = min(max(seq_ratio, lo), hi)
            active = seq_ratio * a <= clipped * a
            w = (a * seq_ratio / (b * n_tok)) if active else 0.0
            out.append(np.full(n_tok, w))
    return out


def _assemble_gradient(params: ParamVector, config: ModelConfig,
                       evals: list[ResponseEval], head: Head, weights) -> np.ndarray:
    out = np.zeros(params.values.size)
    for ev, w in zip(evals, weights):
        if w.size == 0 or not np.any(w):
            continue
        m = ev.prompt_len
        full_targets = (np.arange(ev.response.size) if head is Head.MAIN
                        else ev.logprobs.mtp_targets)
        offset = 0 if head is Head.MAIN else 1
        # context of length L serves main target L-m and MTP target L+1-m
        by_len = {m + int(j) - offset: k for k, j in enumerate(full_targets)}
        for length, cache in zip(ev.ctx_lens, ev.caches):
            k = by_len.get(length)
            if k is None or w[k] == 0.0:
                continue
            j = int(full_targets[k])
            accumulate_logprob_grad(params, config, cache, head,
                                    int(ev.response[j]), float(w[k]), out)
    return out


def rl_gradient(params: ParamVector, config: ModelConfig, batch: RolloutBatch,
                algo: AlgoConfig, counter: ForwardCounter | None = None,
                evals: list[ResponseEval] | None = None) -> np.ndarray:
    """Ascent gradient of the chosen surrogate on the main head."""
    if evals is None:
        evals = evaluate_batch(params, config, batch, counter)
    w = _token_weights(batch, evals, algo, Head.MAIN, plain=False)
    return _assemble_gradient(params, config, evals, Head.MAIN, w)


def mtp_policy_gradient(params: ParamVector, config: ModelConfig, batch: RolloutBatch,
                        algo: AlgoConfig, counter: ForwardCounter | None = None,
                        evals: list[ResponseEval] | None = None) -> np.ndarray:
    """Same surrogate as ``rl_gradient`` but over the MTP head's tokens."""
    if evals is None:
        evals = evaluate_batch(params, config, batch, counter)
    w = _token_weights(batch, evals, algo, Head.MTP, plain=False)
    return _assemble_gradient(params, config, evals, Head.MTP, w)


def ce_gradient(params: ParamVector, config: ModelConfig, batch: RolloutBatch,
                counter: ForwardCounter | None = None,
                evals: list[ResponseEval] | None = None) -> np.ndarray:
    """Ascent direction on mean MTP log-likelihood over all responses."""
    if evals is None:
        evals = evaluate_batch(params, config, batch, counter)
    w = _token_weights(batch, evals, AlgoConfig(), Head.MTP, plain=True, reward_blind=True)
    return _assemble_gradient(params, config, evals, Head.MTP, w)


def plain_gradient(params: ParamVector, config: ModelConfig, batch: RolloutBatch,
                   head: Head, counter: ForwardCounter | None = None,
                   evals: list[ResponseEval] | None = None) -> np.ndarray:
    """Unclipped advantage-weighted estimator (instrumentation path)."""
    if evals is None:
        evals = evaluate_batch(params, config, batch, counter)
    w = _token_weights(batch, evals, AlgoConfig(), head, plain=True)
    return _assemble_gradient(params, config, evals, head, w)


def surrogate_objective(params: ParamVector, config: ModelConfig, batch: RolloutBatch,
                        algo: AlgoConfig, head: Head = Head.MAIN,
                        counter: ForwardCounter | None = None) -> float:
    """Scalar surrogate value (the quantity the gradients ascend)."""
    evals = evaluate_batch(params, config, batch, counter)
    b = batch.size
    total = 0.0
    lo, hi = 1.0 - algo.clip_low, 1.0 + algo.clip_high
    for i in range(b):
        lp = evals[i].logprobs
        new = lp.main if head is Head.MAIN else lp.mtp
        old_lp = batch.old_logprobs[i]
        old = old_lp.main if head is Head.MAIN else old_lp.mtp
        if new.size == 0:
            continue
        a = batch.advantages[i]
        if algo.algo is Algo.GRPO:
            total += a * float(np.mean(new))
        elif algo.algo is Algo.DAPO_LITE:
            ratio = np.exp(new - old)
            total += float(np.mean(np.minimum(ratio * a, np.clip(ratio, lo, hi) * a)))
        else:
            s = float(np.exp(np.mean(new - old)))
            total += min(s * a, min(max(s, lo), hi) * a)
    return total / b


def mean_mtp_loglik(params: ParamVector, config: ModelConfig, batch: RolloutBatch,
                    counter: ForwardCounter | None = None) -> float:
    evals = evaluate_batch(params, config, batch, counter)
    vals = [float(np.mean(ev.logprobs.mtp)) for ev in evals if ev.logprobs.mtp.size]
    return float(np.sum(vals)) / batch.size


def per_sample_gradients(params: ParamVector, config: ModelConfig, batch: RolloutBatch,
                         head: Head = Head.MAIN,
                         counter: ForwardCounter | None = None) -> np.ndarray:
    """Per-response mean-over-token gradients u_i, stacked as a (B, P) matrix."""
    evals = evaluate_batch(params, config, batch, counter)
    out = np.zeros((batch.size, params.values.size))
    for i, ev in enumerate(evals):
        n_tok = (ev.logprobs.main if head is Head.MAIN else ev.logprobs.mtp).size
        if n_tok == 0:
            continue
        w = [np.full(n_tok, 1.0 / n_tok)]
        out[i] = _assemble_gradient(params, config, [ev], head, w)
    return out


def ce_diagonal_decomposition(u: np.ndarray, advantages) -> tuple[float, float]:
    """Split <g_RL, g_CE> into diagonal and cross-sample parts.

    With g_RL = (1/B) sum_i A_i u_i and g_CE = (1/B) sum_j u_j built from the
    same per-sample gradients, diagonal + cross equals the full inner product:
    diagonal = (1/B^2) sum_i A_i ||u_i||^2, cross covers the i != j pairs.
    """
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    b = u.shape[0]
    norms2 = np.einsum("ip,ip->i", u, u)
    diagonal = float(np.dot(a, norms2)) / (b * b)
    s = u.sum(axis=0)
    cross = (float(np.dot(a, u @ s)) - float(np.dot(a, norms2))) / (b * b)
    return diagonal, cross
