"""Context-aware decoding.

Each step asks the backend for two logit vectors, one conditioned on the
crash context and one without it, and samples from

    softmax((1 + alpha) * conditioned - alpha * unconditioned)

which is the normalized form of ``p_ctx * (p_ctx / p_noctx) ** alpha``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .token_model import LogitSource, PromptBundle, TokenDistribution

DEFAULT_ALPHA = 0.7


class DecodeError(RuntimeError):
    """Backend failure mid-decode; ``trace`` holds every completed step."""

    def __init__(self, message: str, trace: DecodeTrace) -> None:
        super().__init__(message)
        self.trace = trace


def _as_vector(x) -> np.ndarray:
    if isinstance(x, TokenDistribution):
        return x.logits
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("logits must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValueError("logits contain non-finite values")
    return arr


def combine_logits(conditioned, unconditioned, alpha: float) -> TokenDistribution:
    a = _as_vector(conditioned)
    b = _as_vector(unconditioned)
    if a.shape != b.shape:
        raise ValueError(f"logit length mismatch: {a.size} vs {b.size}")
    if not alpha >= 0:
        raise ValueError("alpha must be nonnegative")
    return TokenDistribution((1.0 + alpha) * a - alpha * b)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def cad_distribution(conditioned, unconditioned, alpha: float) -> np.ndarray:
    return softmax(combine_logits(conditioned, unconditioned, alpha).logits)


def pmi_reweighted(p_conditioned, p_unconditioned, alpha: float) -> np.ndarray:
    """Normalize ``p_c * (p_c / p_u) ** alpha`` directly from probabilities.

    Computed in log space so that tiny probabilities do not underflow; this is
    the reference the logit-space route is checked against.
    """
    pc = np.asarray(p_conditioned, dtype=np.float64)
    pu = np.asarray(p_unconditioned, dtype=np.float64)
    log_w = np.log(pc) + alpha * (np.log(pc) - np.log(pu))
    return softmax(log_w)


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True)
class Sample:
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class CadConfig:
    alpha: float = DEFAULT_ALPHA
    max_tokens: int = 256
    stop_tokens: frozenset[int] = frozenset()
    selection: Greedy | Sample = Greedy()

    def __post_init__(self) -> None:
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be at least 1")
        object.__setattr__(self, "stop_tokens", frozenset(self.stop_tokens))


@dataclass(frozen=True)
class DecodeStep:
    conditioned: np.ndarray
    unconditioned: np.ndarray
    combined: np.ndarray
    token: int

    def to_json(self) -> dict:
        return {
            "conditioned": self.conditioned.tolist(),
            "unconditioned": self.unconditioned.tolist(),
            "combined": self.combined.tolist(),
            "token": self.token,
        }


@dataclass(frozen=True)
class DecodeTrace:
    steps: tuple[DecodeStep, ...] = ()
    alpha: float = DEFAULT_ALPHA
    query_text: str = ""
    context_text: str = ""

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def tokens(self) -> list[int]:
        return [s.token for s in self.steps]

    def check(self, atol: float = 1e-9) -> bool:
        """Every combined vector reproduces its inputs through the CAD identity."""
        for s in self.steps:
            expected = (1.0 + self.alpha) * s.conditioned - self.alpha * s.unconditioned
            if not np.allclose(s.combined, expected, rtol=0.0, atol=atol):
                return False
        return True

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"step": i, "alpha": self.alpha, **s.to_json()}) + "\n" for i, s in enumerate(self.steps))


def write_trace(trace: DecodeTrace, path: str | Path) -> None:
    Path(path).write_text(trace.to_jsonl(), encoding="utf-8")


def read_trace(path: str | Path) -> DecodeTrace:
    steps = []
    alpha = DEFAULT_ALPHA
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        alpha = rec["alpha"]
        steps.append(
            DecodeStep(
                np.array(rec["conditioned"]),
                np.array(rec["unconditioned"]),
                np.array(rec["combined"]),
                int(rec["token"]),
            )
        )
    return DecodeTrace(tuple(steps), alpha)


def greedy_choice(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(logits))


def decode(source: LogitSource, bundle: PromptBundle, config: CadConfig = CadConfig()) -> tuple[list[int], DecodeTrace]:
    """Autoregressively decode until a stop token or ``max_tokens``.

    The stop token, when emitted, is recorded in the trace but not returned
    in the sequence.
    """
    rng = np.random.default_rng(config.selection.seed) if isinstance(config.selection, Sample) else None
    prefix = list(bundle.prefix)
    steps: list[DecodeStep] = []
    out: list[int] = []

    def _trace() -> DecodeTrace:
        return DecodeTrace(tuple(steps), config.alpha, bundle.query_text, bundle.context_text)

    for _ in range(config.max_tokens):
        step_bundle = bundle.with_prefix(prefix)
        try:
            cond = source.logits_with_context(step_bundle).logits
            uncond = source.logits_without_context(step_bundle).logits
        except Exception as exc:
            raise DecodeError(f"backend failed at step {len(steps)}: {exc}", _trace()) from exc
        combined = combine_logits(cond, uncond, config.alpha).logits
        if rng is None:
            token = greedy_choice(combined)
        else:
            probs = softmax(combined / config.selection.temperature)
            token = int(rng.choice(probs.size, p=probs))
        steps.append(DecodeStep(cond, uncond, combined, token))
        if token in config.stop_tokens:
            break
        out.append(token)
        prefix.append(token)
    return out, _trace()


def decode_plain(source: LogitSource, bundle: PromptBundle, max_tokens: int, stop_tokens: Iterable[int] = ()) -> list[int]:
    """Ordinary greedy decoding on the context-conditioned logits only."""
    stops = set(stop_tokens)
    prefix = list(bundle.prefix)
    out: list[int] = []
    for _ in range(max_tokens):
        token = greedy_choice(source.logits_with_context(bundle.with_prefix(prefix)).logits)
        if token in stops:
            break
        out.append(token)
        prefix.append(token)
    return out


def stop_ids(source: LogitSource, words: Sequence[str]) -> frozenset[int]:
    return frozenset(source.vocabulary.index(w) for w in words if w in source.vocabulary)
