"""Tokenisation, vocabularies, MELD-format ingestion and a synthetic dialogue corpus."""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .affect import LABELS, EmotionLabel
from .lexicon import EmotionLexicon

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")

_TOKEN_RE = re.compile(r"[^\W_]+(?:'[^\W_]+)*|[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split into word runs and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


@dataclass(frozen=True)
class Utterance:
    dialogue_id: int
    utterance_id: int
    speaker: str
    text: str
    emotion: EmotionLabel

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("utterance text is empty")

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["emotion"] = self.emotion.value
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> Utterance:
        return cls(
            int(rec["dialogue_id"]),
            int(rec["utterance_id"]),
            str(rec["speaker"]),
            str(rec["text"]),
            EmotionLabel.parse(rec["emotion"]),
        )


class Vocabulary:
    """Contiguous token ids; ids 0..3 are PAD, UNK, BOS, EOS."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def dumps(self) -> str:
        return "".join(t + "\n" for t in self.itos)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def _texts(corpus) -> Iterable[str]:
    for item in corpus:
        yield item.text if isinstance(item, Utterance) else item


def build_vocab(corpus: Iterable[str | Utterance], max_size: int = 512) -> Vocabulary:
    """Keep the most frequent tokens; ties broken lexicographically."""
    if max_size < len(RESERVED) + 1:
        raise ValueError(f"max_size must be at least {len(RESERVED) + 1}")
    counts: Counter[str] = Counter()
    for text in _texts(corpus):
        counts.update(tokenize(text))
    for tok in RESERVED:
        counts.pop(tok, None)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - len(RESERVED)]]
    return Vocabulary(list(RESERVED) + kept)


def encode(text: str, vocab: Vocabulary, bos: bool = True, eos: bool = True) -> list[int]:
    ids = [vocab.id(t) for t in tokenize(text)]
    return ([BOS] if bos else []) + ids + ([EOS] if eos else [])


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise ValueError(f"token id {i} outside vocabulary of size {len(vocab)}")
        if i in (PAD, BOS, EOS):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


# ---------------------------------------------------------------------------
# MELD CSV
# ---------------------------------------------------------------------------

MELD_COLUMNS = ("Utterance", "Emotion", "Speaker", "Dialogue_ID", "Utterance_ID")


class CorpusError(ValueError):
    pass


def load_meld_csv(path: str | Path) -> list[Utterance]:
    """Read a MELD-style CSV. Extra columns are ignored."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CorpusError(f"{path}: missing header row")
        header = [h.strip() for h in reader.fieldnames]
        for col in MELD_COLUMNS:
            if col not in header:
                raise CorpusError(f"{path}: missing required column {col!r}")
        reader.fieldnames = header
        out = []
        for rownum, row in enumerate(reader, 1):
            try:
                emotion = EmotionLabel.parse(row["Emotion"] or "")
            except ValueError:
                raise CorpusError(f"{path}: row {rownum}: bad emotion label {row['Emotion']!r}") from None
            try:
                out.append(
                    Utterance(
                        int(row["Dialogue_ID"]),
                        int(row["Utterance_ID"]),
                        (row["Speaker"] or "").strip(),
                        (row["Utterance"] or "").strip(),
                        emotion,
                    )
                )
            except (TypeError, ValueError) as exc:
                raise CorpusError(f"{path}: row {rownum}: {exc}") from None
    return out


def write_jsonl(utterances: Iterable[Utterance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u in utterances:
            fh.write(json.dumps(u.to_record(), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[Utterance]:
    with open(path, encoding="utf-8") as fh:
        return [Utterance.from_record(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

TOPICS = (
    "school", "weekend", "movie", "game", "dinner", "trip", "music", "party",
    "homework", "park", "book", "class", "dog", "weather", "holiday", "robot",
)
SPEAKERS = ("Alex", "Sam", "Robin", "Casey", "Jordan", "Taylor")
PROMPT_TEMPLATES = (
    "how was the {topic} ?",
    "tell me about your {topic} .",
    "what do you think of the {topic} ?",
    "how do you feel about the {topic} ?",
    "did you go to the {topic} ?",
)
REPLY_TEMPLATES = (
    "the {topic} was {w} , really {w2} !",
    "i feel {w} about the {topic} , so {w2} .",
    "{w} , the {topic} was {w2} .",
    "my {topic} today was {w} and {w2} .",
    "that {topic} made me {w} , {w2} !",
    "{w} ! what a {w2} {topic} .",
)


def synth_corpus(seed: int, n_dialogues: int, lexicon: EmotionLexicon | None = None) -> list[Utterance]:
    """Template dialogues: a neutral opener, then 2-4 replies with uniformly drawn emotions.

    Every reply carries two lexicon words of its own label, so the lexicon oracle
    and the label agree by construction, and predicting the second word requires
    the model to carry the emotion forward.
    """
    if n_dialogues < 1:
        raise ValueError("n_dialogues must be >= 1")
    lexicon = lexicon or EmotionLexicon.default()
    words = {lab: lexicon.words_for(lab) for lab in LABELS}
    rng = np.random.default_rng(seed)
    out: list[Utterance] = []
    for d in range(n_dialogues):
        a, b = rng.choice(len(SPEAKERS), size=2, replace=False)
        speakers = (SPEAKERS[a], SPEAKERS[b])
        topic = TOPICS[rng.integers(len(TOPICS))]
        opener = PROMPT_TEMPLATES[rng.integers(len(PROMPT_TEMPLATES))].format(topic=topic)
        out.append(Utterance(d, 0, speakers[0], opener, EmotionLabel.NEUTRAL))
        for u in range(1, 1 + int(rng.integers(2, 5))):
            label = LABELS[rng.integers(len(LABELS))]
            pool = words[label]
            w, w2 = pool[rng.integers(len(pool))], pool[rng.integers(len(pool))]
            text = REPLY_TEMPLATES[rng.integers(len(REPLY_TEMPLATES))].format(topic=topic, w=w, w2=w2)
            out.append(Utterance(d, u, speakers[u % 2], text, label))
    return out


def dialogue_pairs(utterances: Sequence[Utterance]) -> list[tuple[Utterance | None, Utterance]]:
    """(previous utterance, utterance) within each dialogue; openers pair with ``None``."""
    pairs = []
    prev: Utterance | None = None
    for u in utterances:
        if prev is None or prev.dialogue_id != u.dialogue_id:
            prev = None
        pairs.append((prev, u))
        prev = u
    return pairs


def pair_tokens(prev: Utterance | str | None, reply: Utterance | str, vocab: Vocabulary) -> tuple[list[int], list[int]]:
    """Prompt is ``BOS prev EOS`` (or just ``BOS``); response is ``reply EOS``."""
    prompt = [BOS] if prev is None else encode(prev.text if isinstance(prev, Utterance) else prev, vocab)
    reply_text = reply.text if isinstance(reply, Utterance) else reply
    return prompt, encode(reply_text, vocab, bos=False)


def label_histogram(utterances: Iterable[Utterance]) -> dict[str, int]:
    counts = Counter(u.emotion for u in utterances)
    return {lab.value: counts.get(lab, 0) for lab in LABELS}
