"""Simulated user: a lexicon emotion oracle plus simulated affect channels and SAM ratings."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .affect import (
    AffectPoint,
    CircumplexTable,
    EmotionLabel,
    combine_rewards,
    fuse_affect,
    label_reward,
    sam_to_unit,
)
from .lexicon import EmotionLexicon
from .seeding import derive_seed
from .text import PROMPT_TEMPLATES, TOPICS, Vocabulary, decode, encode, tokenize

CHANNEL_WEIGHTS = (("speech", 0.5), ("face", 0.3), ("gesture", 0.2))


def classify_emotion_lexicon(text: str, lexicon: EmotionLexicon) -> EmotionLabel:
    """Label with the largest summed word weight; Neutral when nothing matches."""
    totals: dict[EmotionLabel, float] = {}
    for tok, n in sorted(Counter(tokenize(text)).items()):
        hit = lexicon.entries.get(tok)
        if hit is not None:
            label, weight = hit
            totals[label] = totals.get(label, 0.0) + weight * n
    if not totals:
        return EmotionLabel.NEUTRAL
    best = max(totals.values())
    for label in lexicon.priority:
        if totals.get(label) == best:
            return label
    raise AssertionError("priority order does not cover all labels")


def simulate_channels(
    label: EmotionLabel, table: CircumplexTable, noise: float, seed: int
) -> list[tuple[AffectPoint, float]]:
    """Speech, face and gesture estimates: table point plus clamped uniform noise."""
    if noise < 0:
        raise ValueError("noise must be >= 0")
    base = table[label]
    rng = np.random.default_rng(seed)
    out = []
    for _, weight in CHANNEL_WEIGHTS:
        if noise == 0:
            out.append((base, weight))
            continue
        da, dv = rng.uniform(-noise, noise, size=2)
        a = min(1.0, max(-1.0, base.arousal + da))
        v = min(1.0, max(-1.0, base.valence + dv))
        out.append((AffectPoint(a, v), weight))
    return out


def sam_rating(reward: float) -> int:
    """Simulated 1..9 self-assessment from an extrinsic label reward."""
    if reward == 0:
        return 5
    scaled = 5.0 + 4.0 * math.copysign(min(1.0, abs(reward) / math.sqrt(2.0)), reward)
    return int(min(9, max(1, math.floor(scaled + 0.5))))


@dataclass(frozen=True)
class UserFeedback:
    label: EmotionLabel
    fused: AffectPoint
    sam: int
    reward: float


def respond(
    text: str,
    lexicon: EmotionLexicon,
    table: CircumplexTable,
    lam: float = 1.0,
    noise: float = 0.0,
    seed: int = 0,
) -> UserFeedback:
    label = classify_emotion_lexicon(text, lexicon)
    fused = fuse_affect(simulate_channels(label, table, noise, seed))
    extrinsic = label_reward(label, table)
    rating = sam_rating(extrinsic)
    return UserFeedback(label, fused, rating, combine_rewards(extrinsic, sam_to_unit(rating), lam))


def prompt_pool(seed: int, n: int) -> list[str]:
    """``n`` opener prompts drawn from the corpus topic templates."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    combos = [t.format(topic=topic) for t in PROMPT_TEMPLATES for topic in TOPICS]
    if n <= len(combos):
        return [combos[i] for i in rng.permutation(len(combos))[:n]]
    return [combos[i] for i in rng.integers(len(combos), size=n)]


@dataclass
class LexiconEnv:
    """Prompt pool plus oracle judgement of token-level responses."""

    vocab: Vocabulary
    lexicon: EmotionLexicon
    table: CircumplexTable
    prompts: list[str]
    lam: float = 1.0
    noise: float = 0.0
    seed: int = 0
    max_response_len: int = 12
    prompt_tokens: list[list[int]] = field(init=False)

    def __post_init__(self):
        self.prompt_tokens = [encode(p, self.vocab) for p in self.prompts]

    @classmethod
    def build(cls, vocab, lexicon=None, table=None, n_prompts: int = 64, seed: int = 0, lam=1.0, noise=0.0):
        return cls(
            vocab,
            lexicon or EmotionLexicon.default(),
            table or CircumplexTable.default(),
            prompt_pool(derive_seed(seed, "prompts"), n_prompts),
            lam,
            noise,
            seed,
        )

    def feedback(self, response: Sequence[int], index: int = 0) -> UserFeedback:
        text = decode(response, self.vocab)
        return respond(text, self.lexicon, self.table, self.lam, self.noise, derive_seed(self.seed, "user", index))

    def reward(self, prompt: Sequence[int], response: Sequence[int], index: int = 0) -> float:
        return self.feedback(response, index).reward
