"""Word -> (emotion, weight) lexicon shared by the corpus generator and the simulated user."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .affect import LABELS, EmotionLabel

# Ties go to the earlier label. Neutral loses every tie so any emotional word wins.
DEFAULT_PRIORITY: tuple[EmotionLabel, ...] = (
    EmotionLabel.JOY,
    EmotionLabel.SURPRISE,
    EmotionLabel.ANGER,
    EmotionLabel.FEAR,
    EmotionLabel.DISGUST,
    EmotionLabel.SADNESS,
    EmotionLabel.NEUTRAL,
)


@dataclass(frozen=True)
class EmotionLexicon:
    entries: Mapping[str, tuple[EmotionLabel, float]]
    priority: Sequence[EmotionLabel] = field(default=DEFAULT_PRIORITY)

    def __post_init__(self):
        if sorted(self.priority, key=lambda lab: lab.value) != sorted(LABELS, key=lambda lab: lab.value):
            raise ValueError("priority must order all seven labels exactly once")
        for word, (_, weight) in self.entries.items():
            if not weight > 0:
                raise ValueError(f"lexicon weight for {word!r} must be positive")

    def words_for(self, label: EmotionLabel) -> list[str]:
        return sorted(w for w, (lab, _) in self.entries.items() if lab is label)

    @classmethod
    def parse(cls, text: str, priority: Sequence[EmotionLabel] = DEFAULT_PRIORITY) -> EmotionLexicon:
        entries: dict[str, tuple[EmotionLabel, float]] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            if not raw.strip() or raw.lstrip().startswith("#"):
                continue
            parts = raw.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"lexicon line {lineno}: expected word<TAB>label<TAB>weight")
            word = parts[0].strip().lower()
            try:
                label = EmotionLabel.parse(parts[1])
            except ValueError as exc:
                raise ValueError(f"lexicon line {lineno}: {exc}") from None
            weight = float(parts[2])
            if not weight > 0:
                raise ValueError(f"lexicon line {lineno}: weight must be > 0, got {parts[2]}")
            if word in entries:
                raise ValueError(f"lexicon line {lineno}: duplicate word {word!r}")
            entries[word] = (label, weight)
        return cls(entries, tuple(priority))

    @classmethod
    def load(cls, path: str | Path) -> EmotionLexicon:
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> EmotionLexicon:
        return cls.parse(resources.files("affectrl.data").joinpath("lexicon.tsv").read_text(encoding="utf-8"))
