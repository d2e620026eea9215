"""Reward model: a linear head over pooled LM hidden states.

The head emits 7 emotion logits plus arousal and valence (tanh-squashed). The
scalar reward of a response is the circumplex reward of the predicted point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .affect import LABELS, AffectPoint, CircumplexTable, EmotionLabel, circumplex_reward
from .checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from .lm import GPT, pack_pairs
from .nn import Tensor

N_EMOTIONS = len(LABELS)
N_OUT = N_EMOTIONS + 2
POOLING_MODES = ("last", "mean")


class RewardHead:
    def __init__(self, d_model: int, seed: int | None = 0, pooling: str = "mean"):
        if pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        self.d_model = d_model
        self.pooling = pooling
        if seed is None:
            w = np.zeros((d_model, N_OUT))
        else:
            w = np.random.default_rng(seed).normal(0.0, 0.02, size=(d_model, N_OUT))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(N_OUT), requires_grad=True)

    @classmethod
    def zeros(cls, d_model: int, pooling: str = "mean") -> RewardHead:
        return cls(d_model, seed=None, pooling=pooling)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def copy(self) -> RewardHead:
        new = RewardHead.zeros(self.d_model, self.pooling)
        new.weight.data = self.weight.data.copy()
        new.bias.data = self.bias.data.copy()
        return new

    def forward(self, features) -> tuple[Tensor, Tensor]:
        """Emotion logits (N, 7) and squashed (arousal, valence) (N, 2)."""
        out = nn.matmul(features, self.weight) + self.bias
        return out[:, :N_EMOTIONS], nn.tanh(out[:, N_EMOTIONS:])

    def blocks(self) -> dict[str, np.ndarray]:
        return {"reward_head.weight": self.weight.data, "reward_head.bias": self.bias.data}


@dataclass(frozen=True)
class RewardScore:
    distribution: tuple[float, ...]
    point: AffectPoint
    reward: float

    @property
    def emotion(self) -> EmotionLabel:
        return LABELS[int(np.argmax(self.distribution))]


def _pool(h: np.ndarray, plens: np.ndarray, rlens: np.ndarray, pooling: str) -> np.ndarray:
    rows = np.arange(h.shape[0])
    if pooling == "last":
        return h[rows, plens + rlens - 1]
    out = np.empty((h.shape[0], h.shape[2]))
    for b in rows:
        out[b] = h[b, plens[b] : plens[b] + rlens[b]].mean(axis=0)
    return out


def pooled_features(
    model: GPT,
    prompts: Sequence[Sequence[int]],
    responses: Sequence[Sequence[int]],
    pooling: str = "mean",
    chunk: int = 256,
) -> np.ndarray:
    """(N, d_model) pooled final-layer states over each response."""
    if pooling not in POOLING_MODES:
        raise ValueError(f"pooling must be one of {POOLING_MODES}")
    parts = []
    with nn.no_grad():
        for s in range(0, len(prompts), chunk):
            batch = pack_pairs(prompts[s : s + chunk], responses[s : s + chunk])
            h = model.hidden(batch.tokens).data
            parts.append(_pool(h, batch.prompt_lens, batch.resp_lens, pooling))
    return np.concatenate(parts, axis=0)


def pool_embedding(model: GPT, prompt: Sequence[int], response: Sequence[int], pooling: str = "last") -> np.ndarray:
    """Pooled final-layer state of one (prompt, response) pair; ``last`` takes the last response token."""
    if len(response) == 0:
        raise ValueError("empty response")
    return pooled_features(model, [list(prompt)], [list(response)], pooling)[0]


def _scores_from_features(head: RewardHead, feats: np.ndarray) -> list[RewardScore]:
    if feats.shape[1] != head.d_model:
        raise ValueError(f"feature width {feats.shape[1]} does not match reward head d_model {head.d_model}")
    with nn.no_grad():
        logits, av = head.forward(Tensor._wrap(feats))
    probs = nn.softmax(logits.data, axis=-1)
    out = []
    for p, (a, v) in zip(probs, av.data):
        point = AffectPoint(float(a), float(v))
        out.append(RewardScore(tuple(float(x) for x in p), point, circumplex_reward(point)))
    return out


def score_batch(model: GPT, head: RewardHead, prompts, responses) -> list[RewardScore]:
    if head.d_model != model.config.d_model:
        raise ValueError("reward head d_model does not match the language model")
    return _scores_from_features(head, pooled_features(model, prompts, responses, head.pooling))


def score(model: GPT, head: RewardHead, prompt, response, table: CircumplexTable | None = None) -> RewardScore:
    """Emotion distribution, predicted affect point, and its circumplex reward.

    ``table`` is accepted for interface symmetry; the reward depends only on the
    predicted point.
    """
    return score_batch(model, head, [list(prompt)], [list(response)])[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class RewardTrainConfig:
    steps: int = 400
    lr: float = 1e-2
    mu: float = 1.0
    batch_size: int | None = None
    holdout: float = 0.2
    freeze_lm: bool = True
    lm_lr: float = 1e-4
    seed: int = 0


@dataclass
class RewardMetrics:
    train_loss: list[float] = field(default_factory=list)
    heldout_accuracy: float = float("nan")
    heldout_av_mae: float = float("nan")
    n_train: int = 0
    n_heldout: int = 0


def head_loss(head: RewardHead, features, labels: np.ndarray, targets: np.ndarray, mu: float) -> Tensor:
    """Cross-entropy on the emotion class plus mu * mean squared (arousal, valence) error."""
    logits, av = head.forward(features)
    ce = nn.cross_entropy(logits, labels)
    diff = av - targets
    return ce + (diff * diff).mean() * mu


def _targets(labels: np.ndarray, table: CircumplexTable) -> np.ndarray:
    return np.array([[table[LABELS[i]].arousal, table[LABELS[i]].valence] for i in labels], dtype=np.float64)


def _split(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = int(round(n * holdout)) if n > 1 else 0
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def evaluate_head(head: RewardHead, feats: np.ndarray, labels: np.ndarray, table: CircumplexTable) -> tuple[float, float]:
    """(accuracy, mean absolute (arousal, valence) error) against table targets."""
    with nn.no_grad():
        logits, av = head.forward(Tensor._wrap(feats))
    acc = float((logits.data.argmax(axis=1) == labels).mean())
    mae = float(np.abs(av.data - _targets(labels, table)).mean())
    return acc, mae


def train_head(
    head: RewardHead,
    features: np.ndarray,
    labels: Sequence[EmotionLabel] | np.ndarray,
    table: CircumplexTable,
    config: RewardTrainConfig,
) -> RewardMetrics:
    """Fit the head on fixed features. Held-out metrics use a seeded split."""
    feats = np.asarray(features, dtype=np.float64)
    y = np.array([lab.index if isinstance(lab, EmotionLabel) else int(lab) for lab in labels], dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty reward-model dataset")
    if feats.shape != (len(y), head.d_model):
        raise ValueError(f"features must have shape ({len(y)}, {head.d_model}), got {feats.shape}")
    tr, ho = _split(len(y), config.holdout, config.seed)
    targets = _targets(y, table)
    rng = np.random.default_rng(config.seed + 1)
    opt = nn.Adam(head.parameters(), lr=config.lr)
    metrics = RewardMetrics(n_train=len(tr), n_heldout=len(ho))
    for _ in range(config.steps):
        idx = tr
        if config.batch_size is not None and config.batch_size < len(tr):
            idx = np.sort(rng.choice(tr, size=config.batch_size, replace=False))
        opt.zero_grad()
        loss = head_loss(head, Tensor._wrap(feats[idx]), y[idx], targets[idx], config.mu)
        nn.backward(loss)
        opt.step()
        metrics.train_loss.append(loss.item())
    eval_idx = ho if len(ho) else tr
    metrics.heldout_accuracy, metrics.heldout_av_mae = evaluate_head(head, feats[eval_idx], y[eval_idx], table)
    return metrics


def train_reward_model(
    model: GPT,
    head: RewardHead,
    dataset: Sequence[tuple[Sequence[int], Sequence[int], EmotionLabel]],
    table: CircumplexTable,
    config: RewardTrainConfig,
) -> RewardMetrics:
    """Train on (prompt, response, gold label) triples.

    With ``freeze_lm`` (default) the LM body is untouched and features are computed
    once; otherwise the LM is fine-tuned jointly at ``lm_lr``.
    """
    if not dataset:
        raise ValueError("empty reward-model dataset")
    prompts = [list(d[0]) for d in dataset]
    responses = [list(d[1]) for d in dataset]
    labels = np.array([d[2].index for d in dataset], dtype=np.int64)
    if config.freeze_lm:
        feats = pooled_features(model, prompts, responses, head.pooling)
        return train_head(head, feats, labels, table, config)

    if model.frozen:
        raise ValueError("cannot fine-tune a frozen snapshot; set freeze_lm")
    tr, ho = _split(len(labels), config.holdout, config.seed)
    targets = _targets(labels, table)
    rng = np.random.default_rng(config.seed + 1)
    head_opt = nn.Adam(head.parameters(), lr=config.lr)
    lm_opt = nn.Adam(model.parameters(), lr=config.lm_lr)
    metrics = RewardMetrics(n_train=len(tr), n_heldout=len(ho))
    bs = config.batch_size or 64
    for _ in range(config.steps):
        idx = tr if bs >= len(tr) else np.sort(rng.choice(tr, size=bs, replace=False))
        batch = pack_pairs([prompts[i] for i in idx], [responses[i] for i in idx])
        h = model.hidden(batch.tokens)
        rows = np.arange(len(idx))
        if head.pooling == "last":
            pooled = h[rows, batch.prompt_lens + batch.resp_lens - 1]
        else:
            w = np.zeros(batch.tokens.shape)
            for r in rows:
                p, n = batch.prompt_lens[r], batch.resp_lens[r]
                w[r, p : p + n] = 1.0 / n
            pooled = (h * w[:, :, None]).sum(axis=1)
        head_opt.zero_grad()
        lm_opt.zero_grad()
        loss = head_loss(head, pooled, labels[idx], targets[idx], config.mu)
        nn.backward(loss)
        head_opt.step()
        lm_opt.step()
        metrics.train_loss.append(loss.item())
    eval_idx = ho if len(ho) else tr
    feats = pooled_features(model, [prompts[i] for i in eval_idx], [responses[i] for i in eval_idx], head.pooling)
    metrics.heldout_accuracy, metrics.heldout_av_mae = evaluate_head(head, feats, labels[eval_idx], table)
    return metrics


def save_reward_checkpoint(model: GPT, head: RewardHead, path: str | Path) -> None:
    save_checkpoint(model, path, extra=head.blocks(), meta={"reward_head": {"pooling": head.pooling}})


def load_reward_checkpoint(path: str | Path) -> tuple[GPT, RewardHead]:
    model, extra, meta = read_checkpoint(path)
    if "reward_head.weight" not in extra or "reward_head.bias" not in extra:
        raise CheckpointError(f"{path}: no reward head blocks in checkpoint")
    pooling = meta.get("reward_head", {}).get("pooling", "mean")
    head = RewardHead.zeros(model.config.d_model, pooling)
    w, b = extra["reward_head.weight"], extra["reward_head.bias"]
    if w.shape != head.weight.shape or b.shape != head.bias.shape:
        raise CheckpointError(f"{path}: reward head shape mismatch")
    head.weight.data = w.copy()
    head.bias.data = b.copy()
    return model, head


def reward_accuracy_by_label(scores: Sequence[RewardScore], labels: Sequence[EmotionLabel]) -> float:
    if not scores:
        return math.nan
    return sum(s.emotion is lab for s, lab in zip(scores, labels)) / len(scores)
