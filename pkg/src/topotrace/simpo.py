"""Next-token-prediction and SimPO objectives on a bigram softmax policy.

The policy is a ``(V + 1) x V`` logit table: row ``r < V`` holds the logits
of the next token after token ``r``; row ``V`` is the begin-of-sequence
context. Everything here is float64 and hand-differentiated so the
gradients can be checked against central finite differences.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from topotrace.errors import EmptyDataset, TokenOutOfRange, ValidationError

DEFAULT_BETA = 2.0
DEFAULT_GAMMA = 0.5


@dataclass
class ToyPolicy:
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=np.float64)
        v1, v = self.theta.shape
        if v1 != v + 1 or v < 1:
            raise ValidationError(f"logit table must be (V+1) x V, got {self.theta.shape}")
        if not np.all(np.isfinite(self.theta)):
            raise ValidationError("logit table has non-finite entries")

    @classmethod
    def uniform(cls, vocab_size: int) -> ToyPolicy:
        return cls(np.zeros((vocab_size + 1, vocab_size)))

    @classmethod
    def random(cls, vocab_size: int, rng: np.random.Generator, scale: float = 1.0) -> ToyPolicy:
        return cls(rng.normal(0.0, scale, size=(vocab_size + 1, vocab_size)))

    @property
    def vocab_size(self) -> int:
        return self.theta.shape[1]

    @property
    def bos(self) -> int:
        return self.theta.shape[1]

    def log_probs(self) -> np.ndarray:
        m = self.theta.max(axis=1, keepdims=True)
        z = self.theta - m
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    def copy(self) -> ToyPolicy:
        return ToyPolicy(self.theta.copy())


@dataclass(frozen=True)
class SimpoConfig:
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")


@dataclass(frozen=True)
class PreferenceExample:
    context: str
    winner: tuple[int, ...]
    loser: tuple[int, ...]


def _check_tokens(policy: ToyPolicy, y: Sequence[int]) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.size == 0:
        raise TokenOutOfRange("token sequence must be a non-empty 1-d list")
    if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() >= policy.vocab_size:
        raise TokenOutOfRange(f"tokens must be integers in [0, {policy.vocab_size})")
    return arr.astype(np.int64)


def _contexts(policy: ToyPolicy, y: np.ndarray) -> np.ndarray:
    return np.concatenate(([policy.bos], y[:-1]))


def bigram_counts(policy: ToyPolicy, y: Sequence[int]) -> np.ndarray:
    """``C[prev, next]`` transition counts of ``y`` (BOS row included)."""
    arr = _check_tokens(policy, y)
    c = np.zeros_like(policy.theta)
    np.add.at(c, (_contexts(policy, arr), arr), 1.0)
    return c


def sequence_logprob(policy: ToyPolicy, y: Sequence[int]) -> float:
    arr = _check_tokens(policy, y)
    return float(policy.log_probs()[_contexts(policy, arr), arr].sum())


def sequence_avg_logprob(policy: ToyPolicy, y: Sequence[int]) -> float:
    """Per-token average log-probability ``log pi(y) / |y|``."""
    return sequence_logprob(policy, y) / len(y)


def avg_logprob_grad(policy: ToyPolicy, y: Sequence[int]) -> np.ndarray:
    # d/dtheta[r, :] of sum_t log softmax(theta[prev_t])[y_t] = counts[r] - n_r * p[r]
    c = bigram_counts(policy, y)
    n_ctx = c.sum(axis=1, keepdims=True)
    return (c - n_ctx * policy.probs()) / len(y)


def ntp_loss(policy: ToyPolicy, y: Sequence[int]) -> float:
    """Summed (not averaged) negative log-likelihood of ``y``."""
    return -sequence_logprob(policy, y)


def ntp_grad(policy: ToyPolicy, y: Sequence[int]) -> np.ndarray:
    return -len(y) * avg_logprob_grad(policy, y)


def softplus(x: float) -> float:
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def log_sigmoid(z: float) -> float:
    return -softplus(-z)


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def margin(policy: ToyPolicy, ex: PreferenceExample, cfg: SimpoConfig) -> float:
    """Argument of the log-sigmoid: ``beta * (avg_w - avg_l) - gamma``."""
    return cfg.beta * (sequence_avg_logprob(policy, ex.winner) - sequence_avg_logprob(policy, ex.loser)) - cfg.gamma


def _check_batch(batch: Sequence[PreferenceExample]) -> None:
    if not batch:
        raise EmptyDataset("preference batch is empty")


def simpo_loss(policy: ToyPolicy, batch: Sequence[PreferenceExample], cfg: SimpoConfig) -> float:
    _check_batch(batch)
    total = 0.0
    for ex in batch:
        total += softplus(-margin(policy, ex, cfg))
    return total / len(batch)


def simpo_grad(policy: ToyPolicy, batch: Sequence[PreferenceExample], cfg: SimpoConfig) -> np.ndarray:
    """Exact gradient of :func:`simpo_loss` with respect to ``policy.theta``.

    Per pair, d/dz softplus(-z) = -sigmoid(-z) and dz/dtheta is
    ``beta * (grad avg_w - grad avg_l)``. Rows never used as a context stay 0.
    """
    _check_batch(batch)
    g = np.zeros_like(policy.theta)
    for ex in batch:
        z = margin(policy, ex, cfg)
        diff = avg_logprob_grad(policy, ex.winner) - avg_logprob_grad(policy, ex.loser)
        g += (-sigmoid(-z) * cfg.beta) * diff
    return g / len(batch)


def finite_diff_grad(loss_fn: Callable[[ToyPolicy], float], policy: ToyPolicy, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(L(theta + h e) - L(theta - h e)) / 2h`` entry by entry."""
    if not h > 0:
        raise ValueError("step must be positive")
    base = policy.theta
    g = np.zeros_like(base)
    probe = policy.copy()
    for idx in np.ndindex(base.shape):
        probe.theta[idx] = base[idx] + h
        up = loss_fn(probe)
        probe.theta[idx] = base[idx] - h
        down = loss_fn(probe)
        probe.theta[idx] = base[idx]
        g[idx] = (up - down) / (2 * h)
    return g


def simpo_loss_extended(policy: ToyPolicy, batch: Sequence[PreferenceExample], cfg: SimpoConfig) -> float:
    """Independent evaluation of the SimPO loss in ``np.longdouble``.

    Per-step probabilities are formed directly from exponentials rather than
    through :func:`sequence_avg_logprob`. Used as the finite-difference
    target so the oracle's rounding noise sits well below the check's floor.
    """
    _check_batch(batch)
    theta = policy.theta.astype(np.longdouble)
    bos = policy.bos

    def avg(y: Sequence[int]) -> np.longdouble:
        acc = np.longdouble(0)
        prev = bos
        for tok in y:
            row = theta[prev]
            m = row.max()
            acc += row[tok] - m - np.log(np.exp(row - m).sum())
            prev = tok
        return acc / np.longdouble(len(y))

    total = np.longdouble(0)
    beta, gamma = np.longdouble(cfg.beta), np.longdouble(cfg.gamma)
    for ex in batch:
        z = beta * (avg(ex.winner) - avg(ex.loser)) - gamma
        # softplus(-z), piecewise for stability
        total += (-z + np.log1p(np.exp(z))) if z < 0 else np.log1p(np.exp(-z))
    return total / np.longdouble(len(batch))


GRAD_RTOL = 1e-6
GRAD_ATOL = 1e-10


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, rtol: float = GRAD_RTOL, atol: float = GRAD_ATOL
) -> float:
    """Largest entry-wise ``|a - n| / max(|a|, |n|, atol / rtol)``.

    A value ``<= rtol`` means every entry satisfies
    ``|a - n| <= max(rtol * max(|a|, |n|), atol)``, i.e. a relative check
    with an absolute floor for entries that are (near) zero.
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    return float((diff / scale).max()) if diff.size else 0.0


@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    n_instances: int
    worst_instance: int


def random_instance(rng: np.random.Generator, max_vocab: int = 8, max_len: int = 6, batch_size: int = 3):
    v = int(rng.integers(2, max_vocab + 1))
    policy = ToyPolicy.random(v, rng)
    batch = []
    for k in range(int(rng.integers(1, batch_size + 1))):
        tw = int(rng.integers(1, max_len + 1))
        tl = int(rng.integers(1, max_len + 1))
        batch.append(
            PreferenceExample(f"x{k}", tuple(int(i) for i in rng.integers(0, v, tw)), tuple(int(i) for i in rng.integers(0, v, tl)))
        )
    cfg = SimpoConfig(beta=float(rng.uniform(0.5, 4.0)), gamma=float(rng.uniform(-1.0, 2.0)))
    return policy, batch, cfg


def gradient_check(n_instances: int = 100, seed: int = 0, h: float = 1e-5) -> GradCheck:
    rng = np.random.default_rng(seed)
    worst, worst_i = 0.0, -1
    for i in range(n_instances):
        policy, batch, cfg = random_instance(rng)
        analytic = simpo_grad(policy, batch, cfg)
        numeric = finite_diff_grad(lambda p: simpo_loss_extended(p, batch, cfg), policy, h)
        err = max_relative_error(analytic, numeric)
        if err > worst:
            worst, worst_i = err, i
    return GradCheck(worst, n_instances, worst_i)


# training


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    mean_margin: float


@dataclass
class TrainResult:
    policy: ToyPolicy
    metrics: list[StepMetrics] = field(default_factory=list)


def evaluate(policy: ToyPolicy, batch: Sequence[PreferenceExample], cfg: SimpoConfig) -> tuple[float, float]:
    margins = [margin(policy, ex, cfg) for ex in batch]
    loss = sum(softplus(-m) for m in margins) / len(margins)
    return loss, sum(margins) / len(margins)


def train(
    policy: ToyPolicy,
    batch: Sequence[PreferenceExample],
    cfg: SimpoConfig,
    steps: int,
    learning_rate: float,
    seed: int = 0,
    batch_size: int | None = None,
) -> TrainResult:
    """Gradient descent on the SimPO loss.

    Full-batch by default. With ``batch_size`` set, each step draws a
    minibatch from a ``seed``-ed generator. Step ``k`` metrics are measured on
    the whole dataset after the ``k``-th update; step 0 is the starting point.
    """
    if not batch:
        raise EmptyDataset("no preference pairs to train on")
    if steps < 0:
        raise ValidationError("steps must be non-negative")
    rng = np.random.default_rng(seed)
    current = policy.copy()
    loss, m = evaluate(current, batch, cfg)
    metrics = [StepMetrics(0, loss, m)]
    for step in range(1, steps + 1):
        if batch_size is None or batch_size >= len(batch):
            mb = batch
        else:
            mb = [batch[i] for i in sorted(rng.choice(len(batch), size=batch_size, replace=False))]
        current.theta -= learning_rate * simpo_grad(current, mb, cfg)
        loss, m = evaluate(current, batch, cfg)
        metrics.append(StepMetrics(step, loss, m))
    return TrainResult(current, metrics)


def train_ntp(
    policy: ToyPolicy, sequences: Sequence[Sequence[int]], steps: int, learning_rate: float
) -> ToyPolicy:
    """Supervised warm start: gradient descent on the mean per-sequence NTP loss."""
    if not sequences:
        raise EmptyDataset("no sequences for next-token pretraining")
    current = policy.copy()
    for _ in range(steps):
        g = np.zeros_like(current.theta)
        for y in sequences:
            g += ntp_grad(current, y)
        current.theta -= learning_rate * g / len(sequences)
    return current


def greedy_decode(policy: ToyPolicy, length: int) -> list[int]:
    out = []
    prev = policy.bos
    for _ in range(length):
        prev = int(np.argmax(policy.theta[prev]))
        out.append(prev)
    return out


# data


class HashingTokenizer:
    """Maps whitespace-separated words to ``[0, V)`` by SHA-256, stable across runs."""

    def __init__(self, vocab_size: int, max_tokens: int | None = None):
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens

    def __call__(self, text: str) -> tuple[int, ...]:
        words = text.split()
        if self.max_tokens is not None:
            words = words[: self.max_tokens]
        ids = tuple(int.from_bytes(hashlib.sha256(w.encode("utf-8")).digest()[:8], "big") % self.vocab_size for w in words)
        if not ids:
            raise ValidationError("cannot tokenize empty text")
        return ids


def pairs_to_batch(pair_objs: Iterable[dict], tokenizer: HashingTokenizer) -> list[PreferenceExample]:
    return [
        PreferenceExample(o.get("question_id", ""), tokenizer(o["winner"]["text"]), tokenizer(o["loser"]["text"]))
        for o in pair_objs
    ]


def separable_pairs(vocab_size: int = 6, n_pairs: int = 12, length: int = 6, seed: int = 0) -> list[PreferenceExample]:
    """Pairs where every winner contains the bigram ``0 -> 1`` and no loser does."""
    if vocab_size < 3 or length < 3:
        raise ValidationError("separable dataset needs vocab_size >= 3 and length >= 3")
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_pairs):
        w = [int(t) for t in rng.integers(2, vocab_size, length)]
        at = int(rng.integers(0, length - 1))
        w[at], w[at + 1] = 0, 1
        loser = [int(t) for t in rng.integers(0, vocab_size, length)]
        for i in range(1, length):
            if loser[i - 1] == 0 and loser[i] == 1:
                loser[i] = 2
        out.append(PreferenceExample(f"sep{k}", tuple(w), tuple(loser)))
    return out


def write_metrics_csv(path: str | os.PathLike, metrics: Sequence[StepMetrics]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "loss", "mean_margin"))
    for m in metrics:
        w.writerow((m.step, repr(m.loss), repr(m.mean_margin)))
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


CHECKPOINT_MAGIC = "# topotrace bigram policy v1"


def save_checkpoint(path: str | os.PathLike, policy: ToyPolicy) -> None:
    v = policy.vocab_size
    lines = [CHECKPOINT_MAGIC, f"vocab_size {v}", f"shape {v + 1} {v}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in policy.theta]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | os.PathLike) -> ToyPolicy:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a policy checkpoint")
    v = int(lines[1].split()[1])
    rows, cols = (int(x) for x in lines[2].split()[1:3])
    if (rows, cols) != (v + 1, v):
        raise ValidationError(f"{path}: inconsistent shape header")
    theta = np.array([[float(x) for x in ln.split()] for ln in lines[3 : 3 + rows]])
    if theta.shape != (rows, cols):
        raise ValidationError(f"{path}: expected {rows}x{cols} values")
    return ToyPolicy(theta)
