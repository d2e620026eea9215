"""Russell-circumplex affect: labels, (arousal, valence) points and rewards.

The scalar reward of a point is its distance from the neutral origin, signed by
valence, so pleasant emotions score positive and unpleasant ones negative.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

SQRT2 = math.sqrt(2.0)


class EmotionLabel(str, enum.Enum):
    ANGER = "Anger"
    DISGUST = "Disgust"
    SADNESS = "Sadness"
    JOY = "Joy"
    NEUTRAL = "Neutral"
    SURPRISE = "Surprise"
    FEAR = "Fear"

    @classmethod
    def parse(cls, text: str) -> EmotionLabel:
        key = text.strip().lower()
        for label in cls:
            if label.value.lower() == key:
                return label
        raise ValueError(f"unknown emotion label {text!r}")

    @property
    def index(self) -> int:
        return LABELS.index(self)


# Fixed class order for reward-head logits and histograms.
LABELS: tuple[EmotionLabel, ...] = tuple(EmotionLabel)


@dataclass(frozen=True)
class AffectPoint:
    arousal: float
    valence: float

    def __post_init__(self):
        for name in ("arousal", "valence"):
            v = getattr(self, name)
            if not (math.isfinite(v) and -1.0 <= v <= 1.0):
                raise ValueError(f"{name} {v!r} outside [-1, 1]")

    def norm(self) -> float:
        return math.hypot(self.arousal, self.valence)


class CircumplexTable(Mapping[EmotionLabel, AffectPoint]):
    """Total, immutable map from the seven labels to circumplex coordinates."""

    def __init__(self, points: Mapping[EmotionLabel, AffectPoint]):
        missing = [lab.value for lab in LABELS if lab not in points]
        if missing:
            raise ValueError(f"circumplex table missing labels: {', '.join(missing)}")
        neutral = points[EmotionLabel.NEUTRAL]
        if neutral.arousal != 0.0 or neutral.valence != 0.0:
            raise ValueError("Neutral must map to (0, 0)")
        self._points = {lab: points[lab] for lab in LABELS}

    def __getitem__(self, label: EmotionLabel) -> AffectPoint:
        return self._points[label]

    def __iter__(self):
        return iter(self._points)

    def __len__(self) -> int:
        return len(self._points)

    @classmethod
    def parse(cls, text: str) -> CircumplexTable:
        """Parse ``Label = arousal, valence`` lines; ``#`` starts a comment."""
        points: dict[EmotionLabel, AffectPoint] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'label = arousal, valence'")
            key, value = (s.strip() for s in line.split("=", 1))
            label = EmotionLabel.parse(key)
            if label in points:
                raise ValueError(f"line {lineno}: duplicate label {label.value}")
            parts = [s.strip() for s in value.split(",")]
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected two coordinates")
            points[label] = AffectPoint(float(parts[0]), float(parts[1]))
        return cls(points)

    @classmethod
    def load(cls, path: str | Path) -> CircumplexTable:
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> CircumplexTable:
        text = resources.files("affectrl.data").joinpath("circumplex.txt").read_text(encoding="utf-8")
        return cls.parse(text)

    def dumps(self) -> str:
        return "".join(f"{lab.value} = {p.arousal!r}, {p.valence!r}\n" for lab, p in self._points.items())


def circumplex_reward(point: AffectPoint) -> float:
    """sign(V) * sqrt(A^2 + V^2), with sign(0) taken as +."""
    if not (-1.0 <= point.arousal <= 1.0 and -1.0 <= point.valence <= 1.0):
        raise ValueError("affect point outside [-1, 1]^2")
    magnitude = math.sqrt(point.arousal * point.arousal + point.valence * point.valence)
    return -magnitude if point.valence < 0 else magnitude


def label_reward(label: EmotionLabel, table: CircumplexTable) -> float:
    return circumplex_reward(table[label])


def fuse_affect(estimates: Iterable[tuple[AffectPoint, float]]) -> AffectPoint:
    """Confidence-weighted mean of per-channel estimates, clamped to the unit square."""
    estimates = list(estimates)
    if not estimates:
        raise ValueError("no affect estimates to fuse")
    if any(w < 0 or not math.isfinite(w) for _, w in estimates):
        raise ValueError("fusion weights must be finite and non-negative")
    total = math.fsum(w for _, w in estimates)
    if total <= 0:
        raise ValueError("total fusion weight is zero")
    if all(p == estimates[0][0] for p, _ in estimates):
        return estimates[0][0]  # exact: the mean of identical points
    a = math.fsum(p.arousal * (w / total) for p, w in estimates)
    v = math.fsum(p.valence * (w / total) for p, w in estimates)
    return AffectPoint(min(1.0, max(-1.0, a)), min(1.0, max(-1.0, v)))


def sam_to_unit(rating: int) -> float:
    """Map a 1..9 self-assessment-manikin rating onto [-1, 1]."""
    if isinstance(rating, bool) or int(rating) != rating or not 1 <= rating <= 9:
        raise ValueError(f"SAM rating must be an integer in 1..9, got {rating!r}")
    return (int(rating) - 5) / 4.0


def combine_rewards(extrinsic: float, intrinsic: float, lam: float) -> float:
    """lam * extrinsic + (1 - lam) * intrinsic."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * extrinsic + (1.0 - lam) * intrinsic
