"""Tiny two-headed sequence policies with exact, hand-rolled gradients.

Two backends share one contract: a flat float64 parameter vector carved into
named segments (``trunk`` / ``main_head`` / ``mtp_head``), a forward pass that
returns per-vocab log-distributions for the next token (main head) and the
token after next (MTP head, depth 1), and exact per-token log-prob gradients
that are cheap enough to finite-difference-check coordinate by coordinate.

Prediction indexing: with context ``full[:t+1]`` (tokens 0..t), the main head
scores ``full[t+1]`` and the MTP head scores ``full[t+2]``. A prediction is
*masked in* when its target token lies in the response. For the MTP head the
conditioning position may sit inside the prompt: with a 2-token prompt, the
first response token is MTP-predicted from the first prompt token. This is
what lets single-token-response tasks still train the MTP head.

Temperature is a sampling-only knob: recorded log-probs and all gradients use
the untempered (temperature-1) policy, so importance ratios are exactly 1 at
the sampling parameters and the softmax gradient identity stays clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

SEGMENT_NAMES = ("trunk", "main_head", "mtp_head")

PARAM_BUDGET = 100_000  # keeps coordinate-wise gradient checks tractable

INIT_SCALE = 0.1  # near-uniform early policies so group rewards have variance


class Backend(Enum):
    TABULAR_SOFTMAX = "tabular"
    TINY_MLP = "mlp"


class Head(Enum):
    MAIN = "main"
    MTP = "mtp"


class ForwardCounter:
    """Counts individual context evaluations (one forward = one context)."""

    __slots__ = ("count",)

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int = 1) -> None:
        self.count += n


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 16
    context_window: int = 8
    hidden_dim: int = 32  # TinyMLP only
    backend: Backend = Backend.TABULAR_SOFTMAX
    mtp_depth: int = 1

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.context_window < 2:
            raise ValueError(f"context_window must be >= 2, got {self.context_window}")
        if self.mtp_depth != 1:
            raise ValueError("mtp_depth is fixed at 1 in this artifact")
        if self.backend is Backend.TINY_MLP and self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        n = param_count(self)
        if n > PARAM_BUDGET:
            raise ValueError(f"parameter count {n} exceeds budget {PARAM_BUDGET}")


@dataclass
class ParamVector:
    """Flat parameter vector with named contiguous segments."""

    values: np.ndarray
    segments: dict[str, tuple[int, int]]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ParamVector values must be finite")
        cursor = 0
        for name in SEGMENT_NAMES:
            lo, hi = self.segments[name]
            if lo != cursor or hi < lo:
                raise ValueError("segments must partition the index range in order")
            cursor = hi
        if cursor != self.values.size:
            raise ValueError("segments do not cover the full vector")

    def segment(self, name: str) -> np.ndarray:
        lo, hi = self.segments[name]
        return self.values[lo:hi]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), dict(self.segments))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), dict(self.segments))


@dataclass
class TokenLogProbs:
    """Realized-token log-probs for one (prompt, response) pair.

    ``main[j]`` is the main-head log-prob of response token j given everything
    before it. ``mtp[k]`` is the MTP-head log-prob of response token
    ``mtp_targets[k]``, predicted from two positions earlier; targets whose
    conditioning context would be empty are skipped. ``mask`` marks response
    positions of the full (prompt + response) sequence.
    """

    main: np.ndarray
    mtp: np.ndarray
    mtp_targets: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        if np.any(self.main > 1e-12) or np.any(self.mtp > 1e-12):
            raise ValueError("log-probs must be <= 0")


def tabular_rows(config: ModelConfig) -> int:
    """Rows of each tabular head: one per last-two-token pair, plus a block
    for length-1 contexts that have no previous token."""
    v = config.vocab_size
    return v * v + v


def _tab_row(config: ModelConfig, context: np.ndarray) -> int:
    v = config.vocab_size
    if context.size >= 2:
        return int(context[-2]) * v + int(context[-1])
    return v * v + int(context[-1])


def segment_layout(config: ModelConfig) -> dict[str, tuple[int, int]]:
    v, h = config.vocab_size, config.hidden_dim
    if config.backend is Backend.TABULAR_SOFTMAX:
        # Two pair-conditioned logit tables; no shared trunk. Conditioning on
        # the last two tokens is what makes the bundled tasks representable
        # (a last-token-only table cannot express (a+b) mod V, which would
        # freeze expected reward at chance for every parameter value).
        rows = tabular_rows(config)
        sizes = {"trunk": 0, "main_head": rows * v, "mtp_head": rows * v}
    else:
        # Shared trunk: summed embeddings of the last two tokens -> tanh layer.
        sizes = {"trunk": 2 * v * h + h, "main_head": h * v + v, "mtp_head": h * v + v}
    layout = {}
    cursor = 0
    for name in SEGMENT_NAMES:
        layout[name] = (cursor, cursor + sizes[name])
        cursor += sizes[name]
    return layout


def param_count(config: ModelConfig) -> int:
    layout = segment_layout(config)
    return layout["mtp_head"][1]


def init_params(config: ModelConfig, seed: int) -> ParamVector:
    rng = np.random.default_rng(seed)
    n = param_count(config)
    values = rng.normal(0.0, INIT_SCALE, size=n)
    return ParamVector(values, segment_layout(config))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def _mlp_views(params: ParamVector, config: ModelConfig):
    v, h = config.vocab_size, config.hidden_dim
    trunk = params.segment("trunk")
    w1 = trunk[: 2 * v * h].reshape(2 * v, h)
    b1 = trunk[2 * v * h :]
    heads = {}
    for name in ("main_head", "mtp_head"):
        seg = params.segment(name)
        heads[name] = (seg[: h * v].reshape(h, v), seg[h * v :])
    return w1, b1, heads


def _forward(params: ParamVector, config: ModelConfig, context: np.ndarray,
             counter: ForwardCounter | None = None):
    """Evaluate both heads on one context; returns log-dists plus a backprop cache."""
    context = np.asarray(context, dtype=np.int64)
    if context.ndim != 1 or context.size < 1:
        raise ValueError("context must be a non-empty 1-D token sequence")
    if context.size > config.context_window:
        raise ValueError(
            f"context length {context.size} exceeds context_window {config.context_window}")
    if np.any(context < 0) or np.any(context >= config.vocab_size):
        raise ValueError("context token out of range")
    if counter is not None:
        counter.add()

    if config.backend is Backend.TABULAR_SOFTMAX:
        v = config.vocab_size
        rows = tabular_rows(config)
        row = _tab_row(config, context)
        logp_main = _log_softmax(params.segment("main_head").reshape(rows, v)[row])
        logp_mtp = _log_softmax(params.segment("mtp_head").reshape(rows, v)[row])
        cache = ("tab", row, np.exp(logp_main), np.exp(logp_mtp))
        return logp_main, logp_mtp, cache

    v = config.vocab_size
    w1, b1, heads = _mlp_views(params, config)
    t_last = int(context[-1])
    t_prev = int(context[-2]) if context.size >= 2 else -1
    pre = b1 + w1[v + t_last]
    if t_prev >= 0:
        pre = pre + w1[t_prev]
    hid = np.tanh(pre)
    logp_main = _log_softmax(hid @ heads["main_head"][0] + heads["main_head"][1])
    logp_mtp = _log_softmax(hid @ heads["mtp_head"][0] + heads["mtp_head"][1])
    cache = ("mlp", t_prev, t_last, hid, np.exp(logp_main), np.exp(logp_mtp))
    return logp_main, logp_mtp, cache


def forward_logprobs(params: ParamVector, config: ModelConfig, context,
                     counter: ForwardCounter | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-vocab log-distributions (main head, MTP head) for one context."""
    logp_main, logp_mtp, _ = _forward(params, config, context, counter)
    return logp_main, logp_mtp


def accumulate_logprob_grad(params: ParamVector, config: ModelConfig, cache,
                            head: Head, target: int, weight: float,
                            out: np.ndarray) -> None:
    """Add ``weight * d log p_head(target) / d params`` into ``out`` (flat)."""
    seg_name = "main_head" if head is Head.MAIN else "mtp_head"
    lo, hi = params.segments[seg_name]
    v = config.vocab_size
    if cache[0] == "tab":
        _, row, p_main, p_mtp = cache
        p = p_main if head is Head.MAIN else p_mtp
        dlogits = -weight * p
        dlogits[target] += weight
        out[lo + row * v : lo + (row + 1) * v] += dlogits
        return

    _, t_prev, t_last, hid, p_main, p_mtp = cache
    h = config.hidden_dim
    p = p_main if head is Head.MAIN else p_mtp
    dlogits = -weight * p
    dlogits[target] += weight
    w_head = params.values[lo : lo + h * v].reshape(h, v)
    out[lo : lo + h * v] += np.outer(hid, dlogits).ravel()
    out[lo + h * v : hi] += dlogits
    dpre = (1.0 - hid * hid) * (w_head @ dlogits)
    t0, _ = params.segments["trunk"]
    out[t0 + 2 * v * h : t0 + 2 * v * h + h] += dpre  # b1
    out[t0 + (v + t_last) * h : t0 + (v + t_last + 1) * h] += dpre
    if t_prev >= 0:
        out[t0 + t_prev * h : t0 + (t_prev + 1) * h] += dpre


def mtp_target_indices(prompt_len: int, response_len: int) -> np.ndarray:
    """Response indices whose MTP prediction has a non-empty context."""
    j = np.arange(response_len)
    return j[prompt_len + j >= 2]


@dataclass
class ResponseEval:
    """Both-head realized log-probs for one response, plus backprop caches.

    ``caches[k]`` belongs to the context ``full[:ctx_lens[k]]``; that context's
    main-head prediction targets response index ``ctx_lens[k] - m`` and its
    MTP prediction targets ``ctx_lens[k] + 1 - m`` (when those land in the
    response).
    """

    prompt_len: int
    response: np.ndarray
    logprobs: TokenLogProbs
    ctx_lens: list[int] = field(repr=False)
    caches: list = field(repr=False)


def evaluate_response(params: ParamVector, config: ModelConfig, prompt, response,
                      counter: ForwardCounter | None = None) -> ResponseEval:
    """Sweep every needed context once; fill realized log-probs for both heads."""
    prompt = np.asarray(prompt, dtype=np.int64)
    response = np.asarray(response, dtype=np.int64)
    m, n = prompt.size, response.size
    full = np.concatenate([prompt, response])
    targets = mtp_target_indices(m, n)
    main = np.empty(n)
    mtp = np.empty(targets.size)
    ctx_lens, caches = [], []
    first_len = m + int(targets[0]) - 1 if targets.size else m
    for length in range(first_len, m + n):
        logp_main, logp_mtp, cache = _forward(params, config, full[:length], counter)
        ctx_lens.append(length)
        caches.append(cache)
        j_main = length - m
        if 0 <= j_main < n:
            main[j_main] = logp_main[full[length]]
        j_mtp = length + 1 - m
        if 0 <= j_mtp < n and m + j_mtp >= 2:
            mtp[np.searchsorted(targets, j_mtp)] = logp_mtp[full[length + 1]]
    mask = np.zeros(m + n, dtype=bool)
    mask[m:] = True
    lp = TokenLogProbs(main=main, mtp=mtp, mtp_targets=targets, mask=mask)
    return ResponseEval(prompt_len=m, response=response, logprobs=lp,
                        ctx_lens=ctx_lens, caches=caches)


def response_logprobs(params: ParamVector, config: ModelConfig, prompt, response,
                      counter: ForwardCounter | None = None) -> TokenLogProbs:
    return evaluate_response(params, config, prompt, response, counter).logprobs


def response_main_logprobs(params: ParamVector, config: ModelConfig, prompt, response,
                           counter: ForwardCounter | None = None) -> np.ndarray:
    """Main-head realized log-probs only (the cheap sweep used by virtual steps)."""
    prompt = np.asarray(prompt, dtype=np.int64)
    response = np.asarray(response, dtype=np.int64)
    m, n = prompt.size, response.size
    full = np.concatenate([prompt, response])
    out = np.empty(n)
    for j in range(n):
        logp_main, _, _ = _forward(params, config, full[: m + j], counter)
        out[j] = logp_main[full[m + j]]
    return out


def sample_sequence(params: ParamVector, config: ModelConfig, prompt, max_len: int,
                    temperature: float, rng: np.random.Generator,
                    counter: ForwardCounter | None = None) -> tuple[np.ndarray, TokenLogProbs]:
    """Autoregressively sample ``max_len`` tokens from the main head.

    ``temperature == 0.0`` is the argmax (greedy) limit. Recorded log-probs for
    both heads are those of the untempered policy.
    """
    if temperature < 0.0:
        raise ValueError("temperature must be >= 0")
    prompt = np.asarray(prompt, dtype=np.int64)
    m, n = prompt.size, max_len
    targets = mtp_target_indices(m, n)
    tokens = np.empty(n, dtype=np.int64)
    main = np.empty(n)
    mtp = np.empty(targets.size)

    # MTP prediction of response token j is made from full[:m+j-1]; the j=0
    # context (when valid) is the only one the sampling sweep does not visit.
    pending_mtp: dict[int, np.ndarray] = {}
    if targets.size and targets[0] == 0:
        _, logp_mtp, _ = _forward(params, config, prompt[: m - 1], counter)
        pending_mtp[0] = logp_mtp

    context = prompt
    for j in range(n):
        logp_main, logp_mtp, _ = _forward(params, config, context, counter)
        if j + 1 < n and m + j + 1 >= 2:
            pending_mtp[j + 1] = logp_mtp
        if temperature == 0.0:
            tok = int(np.argmax(logp_main))
        else:
            probs = np.exp(_log_softmax(logp_main / temperature))
            probs = probs / probs.sum()
            tok = int(rng.choice(config.vocab_size, p=probs))
        tokens[j] = tok
        main[j] = logp_main[tok]
        context = np.concatenate([context, [tok]])

    for k, j in enumerate(targets):
        mtp[k] = pending_mtp[int(j)][tokens[j]]
    mask = np.zeros(m + n, dtype=bool)
    mask[m:] = True
    return tokens, TokenLogProbs(main=main, mtp=mtp, mtp_targets=targets, mask=mask)


def grad_logprob(params: ParamVector, config: ModelConfig, prompt, response,
                 head: Head, position: int,
                 counter: ForwardCounter | None = None) -> np.ndarray:
    """Exact gradient of one realized-token log-prob w.r.t. the full vector.

    ``position`` is the prediction position t (absolute index into
    prompt+response): the context is ``full[:t+1]``; the main head's target is
    ``full[t+1]`` and the MTP head's is ``full[t+2]``. The target must be a
    response token.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    response = np.asarray(response, dtype=np.int64)
    m, n = prompt.size, response.size
    full = np.concatenate([prompt, response])
    offset = 1 if head is Head.MAIN else 2
    target_pos = position + offset
    if not (m <= target_pos < m + n):
        raise ValueError(f"position {position} does not target a response token")
    if position < 0:
        raise ValueError("prediction context would be empty")
    _, _, cache = _forward(params, config, full[: position + 1], counter)
    out = np.zeros(params.values.size)
    accumulate_logprob_grad(params, config, cache, head, int(full[target_pos]), 1.0, out)
    return out
