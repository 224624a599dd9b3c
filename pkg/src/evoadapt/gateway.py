"""Prompt construction, chat-endpoint client and response parsing.

Prompts follow the population-prompting convention: thoughts go inside a
brace, code inside a fenced block, and the operator kind only changes the
novelty instruction.  Parsing is the inverse of :func:`render_algorithm`.
"""

from __future__ import annotations

import math
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import requests

from .errors import AuthError, GatewayError, InvalidPromptSpec, NoCode, NoThoughts

FS_SIGNATURE = "feat_selection(clip_weights, train_feats, w0, w1, topk)"
LOGITS_SIGNATURE = (
    "compute_logits(train_feats, train_labels, test_feats, clip_weights, "
    "indices, alpha0, alpha1, alpha2)"
)
JOINT_INNER_SIGNATURE = (
    "compute_logits_with_fs(train_feats, train_labels, test_feats, clip_weights, "
    "indices, alpha0, alpha1, alpha2)"
)
JOINT_SIGNATURE = (
    "compute_logits(train_feats, train_labels, test_feats, clip_weights, "
    "w0, w1, topk, alpha0, alpha1, alpha2)"
)

_TASK_INTRO = (
    "You are designing a training-free adaptation algorithm for a pre-trained "
    "vision-language model applied to few-shot image classification. "
    "Image features, training labels and class text embeddings are given; "
    "no gradient-based training is allowed."
)

_TASK_DEFINITION = {
    "feature_selection": (
        _TASK_INTRO + " The task is to select the best feature channels using "
        "the class text embeddings and the few-shot training image features."
    ),
    "logits_computation": (
        _TASK_INTRO + " The task is to devise a good function for computing the "
        "classification logits of test images from the few-shot training "
        "features, the training labels, the class text embeddings and the "
        "test features."
    ),
    "joint": (
        _TASK_INTRO + " The task has two steps: first select important feature "
        "channels, then compute the classification logits of test images using "
        "the selected channels. Only design the `feat_selection` and "
        "`compute_logits_with_fs` functions; keep the given `compute_logits` "
        "wrapper that calls them."
    ),
}

_IO_BLOCK = {
    "feature_selection": """\
Inputs:
  clip_weights: class text embeddings, shape (d, C), one L2-normalized column per class
  train_feats: few-shot training image features, shape (M, d), M = shots * C, rows L2-normalized and ordered class by class
  w0, w1: scalar weighting hyper-parameters
  topk: the number of feature channels to keep
Output:
  indices: an integer tensor of the topk selected channel indices, values in [0, d), no duplicates""",
    "logits_computation": """\
Inputs:
  train_feats: few-shot training image features, shape (M, d), M = shots * C, rows L2-normalized and ordered class by class
  train_labels: integer class labels, shape (M,), values in [0, C)
  test_feats: test image features, shape (N, d), rows L2-normalized
  clip_weights: class text embeddings, shape (d, C), one L2-normalized column per class
  indices: indices of selected feature channels (the function may ignore them)
  alpha0, alpha1, alpha2: positive scalar hyper-parameters (not all must be used)
Output:
  logits: classification scores, shape (N, C)""",
    "joint": """\
Inputs:
  train_feats: few-shot training image features, shape (M, d), M = shots * C, rows L2-normalized and ordered class by class
  train_labels: integer class labels, shape (M,), values in [0, C)
  test_feats: test image features, shape (N, d), rows L2-normalized
  clip_weights: class text embeddings, shape (d, C), one L2-normalized column per class
  w0, w1: scalar weighting hyper-parameters for feature selection
  topk: the number of feature channels to keep
  alpha0, alpha1, alpha2: positive scalar hyper-parameters (not all must be used)
Output:
  logits: classification scores, shape (N, C)""",
}

_SIGNATURE = {
    "feature_selection": FS_SIGNATURE,
    "logits_computation": LOGITS_SIGNATURE,
    "joint": JOINT_SIGNATURE,
}

_FUNC_NAME = {
    "feature_selection": "feat_selection",
    "logits_computation": "compute_logits",
    "joint": "compute_logits",
}

_NOVELTY = {
    "crossover": (
        "Please create a new algorithm that has a totally different form from "
        "the given algorithms."
    ),
    "mutation": (
        "Please create a new algorithm whose form is modified from the given "
        "algorithm; generate a novel algorithm as much as possible."
    ),
}

CONSTRAINTS = (
    "Do not use random operations in the code. "
    "Avoid deep nested loops. "
    "Do not introduce learnable variables; the algorithm must be training-free. "
    "Pay attention to the readability of the generated code."
)

TRUNCATION_FLAG = "[parent code truncated to fit the prompt budget]"
DEFAULT_CHAR_BUDGET = 24000


@dataclass(frozen=True)
class ParentAlgorithm:
    thoughts: str
    code: str


@dataclass(frozen=True)
class PromptSpec:
    operator: str                      # crossover | mutation
    stage: str                         # feature_selection | logits_computation | joint
    parents: Sequence[ParentAlgorithm]
    char_budget: int = DEFAULT_CHAR_BUDGET

    def validate(self) -> None:
        if self.operator not in _NOVELTY:
            raise InvalidPromptSpec(f"unknown operator {self.operator!r}")
        if self.stage not in _TASK_DEFINITION:
            raise InvalidPromptSpec(f"unknown stage {self.stage!r}")
        if self.operator == "crossover" and len(self.parents) < 2:
            raise InvalidPromptSpec("crossover needs at least 2 parents")
        if self.operator == "mutation" and len(self.parents) != 1:
            raise InvalidPromptSpec("mutation needs exactly 1 parent")
        if self.char_budget < 1000:
            raise InvalidPromptSpec("char budget unreasonably small")


def _parent_listing(parents: Sequence[ParentAlgorithm], dropped_code: int) -> str:
    chunks = []
    for i, parent in enumerate(parents):
        if i < dropped_code:
            code_block = TRUNCATION_FLAG
        else:
            code_block = f"```python\n{parent.code}\n```"
        chunks.append(
            f"No.{i + 1} algorithm's thoughts and code are:\n"
            f"{parent.thoughts}\n{code_block}"
        )
    return "\n\n".join(chunks)


def build_prompt(spec: PromptSpec) -> str:
    """Deterministic prompt text; oldest parents lose their code listing first
    when the character budget overflows."""
    spec.validate()
    n = len(spec.parents)
    for dropped in range(0, n + 1):
        listing = _parent_listing(spec.parents, dropped)
        text = (
            f"{_TASK_DEFINITION[spec.stage]}\n\n"
            f"I have {n} existing algorithm(s) with their thoughts and codes as follows:\n\n"
            f"{listing}\n\n"
            f"{_NOVELTY[spec.operator]}\n\n"
            "First, describe the thoughts of your new algorithm in one sentence. "
            "The description must be inside a brace. "
            "Next, implement it in Python as a function named "
            f"`{_FUNC_NAME[spec.stage]}`, defined exactly as:\n\n"
            f"{_SIGNATURE[spec.stage]}\n\n"
            f"{_IO_BLOCK[spec.stage]}\n\n"
            f"{CONSTRAINTS}\n"
            "Do not give additional explanations."
        )
        if len(text) <= spec.char_budget or dropped == n:
            return text
    raise AssertionError("unreachable")


def render_algorithm(thoughts: str, code: str) -> str:
    """Inverse of parse_algorithm on well-formed pairs."""
    return f"{{{thoughts}}}\n```python\n{code}\n```"


_CODE_FENCE = re.compile(r"```[ \t]*[A-Za-z0-9_+-]*[ \t]*\n(.*?)```", re.DOTALL)
_THOUGHTS = re.compile(r"\{(.*?)\}", re.DOTALL)


def parse_algorithm(response: str) -> tuple[str, str]:
    """Extract (thoughts, code): first brace span and first fenced code block."""
    m = _THOUGHTS.search(response)
    if m is None or not m.group(1).strip():
        raise NoThoughts("no brace-delimited thoughts found")
    thoughts = m.group(1).strip()
    c = _CODE_FENCE.search(response)
    if c is None or not c.group(1).strip():
        raise NoCode("no fenced code block found")
    code = c.group(1)
    if code.endswith("\n"):
        code = code[:-1]
    return thoughts, code


@dataclass
class ChatUsage:
    input_tokens: int
    output_tokens: int
    wall_time_s: float = 0.0


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


class UsageCounter:
    """Thread-safe running totals over gateway calls."""

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0
        self.input_tokens = 0
        self.output_tokens = 0

    def record(self, usage: ChatUsage) -> None:
        with self._lock:
            self.calls += 1
            self.input_tokens += usage.input_tokens
            self.output_tokens += usage.output_tokens

    def snapshot(self) -> tuple[int, int, int]:
        with self._lock:
            return self.calls, self.input_tokens, self.output_tokens


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "EVOADAPT_API_KEY"
    timeout_s: float = 60.0
    max_retries: int = 3
    temperature: float = 1.0


class HttpGateway:
    """OpenAI-compatible chat-completions client with simple backoff."""

    def __init__(self, config: EndpointConfig, session: Optional[requests.Session] = None,
                 sleep=time.sleep):
        self.config = config
        self.usage = UsageCounter()
        self._session = session or requests.Session()
        self._sleep = sleep

    def complete(self, prompt: str) -> tuple[str, ChatUsage]:
        cfg = self.config
        url = cfg.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
        }
        start = time.monotonic()
        last_error: Exception | None = None
        for attempt in range(cfg.max_retries):
            try:
                resp = self._session.post(url, json=body, headers=headers,
                                          timeout=cfg.timeout_s)
            except requests.RequestException as exc:
                last_error = exc
            else:
                if resp.status_code in (401, 403):
                    raise AuthError(f"endpoint rejected credentials ({resp.status_code})")
                if resp.status_code == 200:
                    return self._finish(prompt, resp, start)
                last_error = GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            if attempt + 1 < cfg.max_retries:
                self._sleep(min(0.5 * 2**attempt, 8.0))
        raise GatewayError(f"gave up after {cfg.max_retries} attempts: {last_error}")

    def _finish(self, prompt: str, resp, start: float) -> tuple[str, ChatUsage]:
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion payload: {exc}") from None
        reported = payload.get("usage") or {}
        usage = ChatUsage(
            input_tokens=int(reported.get("prompt_tokens", estimate_tokens(prompt))),
            output_tokens=int(reported.get("completion_tokens", estimate_tokens(text))),
            wall_time_s=time.monotonic() - start,
        )
        self.usage.record(usage)
        return text, usage


class ScriptedGateway:
    """Deterministic offline gateway: replays a response list, cycling at the end."""

    def __init__(self, script: Sequence[str]):
        if not script:
            raise ValueError("script must be non-empty")
        self.script = list(script)
        self.usage = UsageCounter()
        self._calls = 0
        self.prompts: list[str] = []

    def complete(self, prompt: str) -> tuple[str, ChatUsage]:
        text = self.script[self._calls % len(self.script)]
        self._calls += 1
        self.prompts.append(prompt)
        usage = ChatUsage(
            input_tokens=estimate_tokens(prompt),
            output_tokens=estimate_tokens(text),
            wall_time_s=0.0,
        )
        self.usage.record(usage)
        return text, usage
