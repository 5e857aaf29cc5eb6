"""Synthetic prompt distributions with verifiable binary rewards.

Each task pairs a uniform prompt space with a pure verifier; exactly one
response per prompt earns reward 1, so a uniform policy's expected reward is
``vocab_size ** -response_len``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class TaskName(Enum):
    SUM_MOD = "sum_mod"
    COPY_REVERSE = "copy_reverse"


@dataclass(frozen=True)
class Task:
    name: TaskName
    vocab_size: int
    prompt_len: int
    response_len: int


def sum_mod(vocab_size: int = 16, response_len: int = 1) -> Task:
    """Prompt [a, b]; reward 1 iff response[0] == (a + b) mod vocab.

    Tokens past the first are unscored; with response_len >= 2 they give the
    lookahead head targets that are predictable from the visible prompt pair,
    which is what creates genuine cross-head gradient alignment.
    """
    return Task(TaskName.SUM_MOD, vocab_size, prompt_len=2, response_len=response_len)


def copy_reverse(vocab_size: int = 16, prompt_len: int = 3) -> Task:
    """The correct response is the prompt reversed."""
    return Task(TaskName.COPY_REVERSE, vocab_size, prompt_len, response_len=prompt_len)


def make_task(name: TaskName, vocab_size: int, prompt_len: int | None = None,
              response_len: int | None = None) -> Task:
    if name is TaskName.SUM_MOD:
        return sum_mod(vocab_size, response_len if response_len is not None else 1)
    return copy_reverse(vocab_size, prompt_len if prompt_len is not None else 3)


def sample_prompt(task: Task, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, task.vocab_size, size=task.prompt_len)


def verify(task: Task, prompt, response) -> float:
    prompt = np.asarray(prompt, dtype=np.int64)
    response = np.asarray(response, dtype=np.int64)
    if response.size != task.response_len:
        raise ValueError(
            f"response length {response.size} != task response_len {task.response_len}")
    if task.name is TaskName.SUM_MOD:
        want = (int(prompt[0]) + int(prompt[1])) % task.vocab_size
        return 1.0 if int(response[0]) == want else 0.0
    return 1.0 if np.array_equal(response, prompt[::-1]) else 0.0


def rewarded_first_token(task: Task, prompt) -> int:
    """The scored token every rewarded response must start with."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if task.name is TaskName.SUM_MOD:
        return (int(prompt[0]) + int(prompt[1])) % task.vocab_size
    return int(prompt[-1])


def correct_response(task: Task, prompt) -> np.ndarray:
    """A rewarded response (for SumMod the unscored tail is zero-filled)."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if task.name is TaskName.SUM_MOD:
        out = np.zeros(task.response_len, dtype=np.int64)
        out[0] = rewarded_first_token(task, prompt)
        return out
    return prompt[::-1].copy()
