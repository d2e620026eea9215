"""Decoder-only transformer LM: causal forward pass, sequence log-probs, training and sampling."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .nn import Tensor
from .text import EOS, PAD

MASK_FILL = -1e9


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.dropout != 0.0:
            raise ValueError("dropout is not supported at desk scale; use 0")

    def to_dict(self) -> dict:
        return asdict(self)


class GPT:
    """Pre-norm transformer decoder with learned positions and a separate LM head.

    Parameters live in an ordered name -> Tensor dict so checkpoints and optimizers
    see them in a fixed order.
    """

    def __init__(self, config: LmConfig, seed: int = 0):
        self.config = config
        self.frozen = False
        rng = np.random.default_rng(seed)
        d, V = config.d_model, config.vocab_size
        std = 0.02
        resid_std = std / math.sqrt(2 * config.n_layers)

        def normal(shape, s=std):
            return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

        def const(shape, value):
            return Tensor(np.full(shape, value), requires_grad=True)

        p: dict[str, Tensor] = {}
        p["tok_emb"] = normal((V, d))
        p["pos_emb"] = normal((config.max_seq_len, d))
        for i in range(config.n_layers):
            pre = f"h{i}."
            p[pre + "ln1.g"] = const((d,), 1.0)
            p[pre + "ln1.b"] = const((d,), 0.0)
            for name in ("q", "k", "v"):
                p[pre + f"attn.w{name}"] = normal((d, d))
                p[pre + f"attn.b{name}"] = const((d,), 0.0)
            p[pre + "attn.wo"] = normal((d, d), resid_std)
            p[pre + "attn.bo"] = const((d,), 0.0)
            p[pre + "ln2.g"] = const((d,), 1.0)
            p[pre + "ln2.b"] = const((d,), 0.0)
            p[pre + "mlp.wfc"] = normal((d, 4 * d))
            p[pre + "mlp.bfc"] = const((4 * d,), 0.0)
            p[pre + "mlp.wproj"] = normal((4 * d, d), resid_std)
            p[pre + "mlp.bproj"] = const((d,), 0.0)
        p["ln_f.g"] = const((d,), 1.0)
        p["ln_f.b"] = const((d,), 0.0)
        p["lm_head"] = normal((d, V))
        self.params = p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if list(state) != list(self.params):
            raise ValueError("parameter names do not match the model layout")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    def copy(self) -> GPT:
        new = copy.copy(self)
        new.frozen = False
        new.params = {k: Tensor(t.data, requires_grad=True) for k, t in self.params.items()}
        return new

    # -- forward ----------------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] == 0:
            raise ValueError("empty token sequence")
        if tokens.shape[1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError("token id outside vocabulary")
        return tokens

    def hidden(self, tokens) -> Tensor:
        """Final-layer (post layer-norm) hidden states, shape (B, T, d_model)."""
        tokens = self._check_tokens(tokens)
        B, T = tokens.shape
        cfg = self.config
        p = self.params
        H = cfg.n_heads
        hd = cfg.d_model // H
        scale = 1.0 / math.sqrt(hd)
        future = np.triu(np.ones((T, T), dtype=bool), k=1)

        x = nn.embedding(p["tok_emb"], tokens) + p["pos_emb"][:T]
        for i in range(cfg.n_layers):
            pre = f"h{i}."
            h = nn.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

            def heads(name):
                t = h @ p[pre + f"attn.w{name}"] + p[pre + f"attn.b{name}"]
                return t.reshape(B, T, H, hd).transpose(0, 2, 1, 3)

            q, k, v = heads("q"), heads("k"), heads("v")
            att = (q @ k.transpose(0, 1, 3, 2)) * scale
            att = nn.softmax(nn.masked_fill(att, future, MASK_FILL), axis=-1)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            x = x + (y @ p[pre + "attn.wo"] + p[pre + "attn.bo"])
            h = nn.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            h = nn.gelu(h @ p[pre + "mlp.wfc"] + p[pre + "mlp.bfc"])
            x = x + (h @ p[pre + "mlp.wproj"] + p[pre + "mlp.bproj"])
        return nn.layer_norm(x, p["ln_f.g"], p["ln_f.b"])

    def logits_from_hidden(self, h: Tensor) -> Tensor:
        return h @ self.params["lm_head"]

    def __call__(self, tokens) -> Tensor:
        return self.logits_from_hidden(self.hidden(tokens))


def snapshot(model: GPT) -> GPT:
    """Frozen deep copy used as the reference policy: read-only arrays, no gradients."""
    ref = model.copy()
    for t in ref.params.values():
        t.requires_grad = False
        t.data.flags.writeable = False
    ref.frozen = True
    return ref


def forward_logits(model: GPT, tokens: Sequence[int]) -> np.ndarray:
    """Next-token logits at every position of a single sequence, shape (len, vocab)."""
    with nn.no_grad():
        return model(np.asarray(tokens, dtype=np.int64)[None, :]).data[0]


# ---------------------------------------------------------------------------
# batching and log-probabilities
# ---------------------------------------------------------------------------


@dataclass
class PackedPairs:
    """Right-padded prompt+response rows and the positions that score each response token."""

    tokens: np.ndarray  # (B, T) token ids
    pos: np.ndarray  # (B, R) position whose logits predict response token j
    targets: np.ndarray  # (B, R) response token ids
    mask: np.ndarray  # (B, R) 1.0 where the response token exists
    prompt_lens: np.ndarray
    resp_lens: np.ndarray


def pack_pairs(prompts: Sequence[Sequence[int]], responses: Sequence[Sequence[int]]) -> PackedPairs:
    if len(prompts) != len(responses) or not prompts:
        raise ValueError("need equally many (non-zero) prompts and responses")
    plens = np.array([len(x) for x in prompts])
    rlens = np.array([len(y) for y in responses])
    if plens.min() < 1:
        raise ValueError("empty prompt")
    if rlens.min() < 1:
        raise ValueError("empty response")
    B = len(prompts)
    T = int((plens + rlens).max())
    R = int(rlens.max())
    tokens = np.full((B, T), PAD, dtype=np.int64)
    pos = np.zeros((B, R), dtype=np.int64)
    targets = np.full((B, R), PAD, dtype=np.int64)
    mask = np.zeros((B, R))
    for b, (x, y) in enumerate(zip(prompts, responses)):
        tokens[b, : len(x)] = x
        tokens[b, len(x) : len(x) + len(y)] = y
        pos[b, : len(y)] = np.arange(len(x) - 1, len(x) - 1 + len(y))
        targets[b, : len(y)] = y
        mask[b, : len(y)] = 1.0
    return PackedPairs(tokens, pos, targets, mask, plens, rlens)


def response_logprobs(model: GPT, batch: PackedPairs, hidden: Tensor | None = None) -> Tensor:
    """Per-response-token log pi(y_j | x, y_<j), shape (B, R); padded slots are garbage-masked by ``batch.mask``."""
    h = model.hidden(batch.tokens) if hidden is None else hidden
    rows = np.arange(batch.tokens.shape[0])[:, None]
    h_resp = h[rows, batch.pos]  # (B, R, d)
    logp = nn.log_softmax(model.logits_from_hidden(h_resp), axis=-1)
    return nn.gather_last(logp, batch.targets)


def batch_logprobs(model: GPT, prompts, responses) -> np.ndarray:
    """No-grad per-token log-probs, (B, R) with zeros in padded slots."""
    batch = pack_pairs(prompts, responses)
    with nn.no_grad():
        lp = response_logprobs(model, batch).data
    return lp * batch.mask


def sequence_log_prob(model: GPT, prompt: Sequence[int], response: Sequence[int]) -> float:
    """log p(y | x) as the chain-rule sum of per-token log-probabilities."""
    if len(response) == 0:
        raise ValueError("empty response")
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    lp = batch_logprobs(model, [list(prompt)], [list(response)])
    return float(lp[0, : len(response)].sum())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class LmTrainConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 3e-3
    grad_clip: float = 1.0
    seed: int = 0


def lm_loss(model: GPT, batch: PackedPairs) -> Tensor:
    logp = response_logprobs(model, batch)
    return -(logp * batch.mask).sum() / float(batch.mask.sum())


def train_lm(
    model: GPT,
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    config: LmTrainConfig,
) -> list[float]:
    """Minibatch next-token cross-entropy on response tokens. Returns the per-step loss curve."""
    if not pairs:
        raise ValueError("empty training corpus")
    if model.frozen:
        raise ValueError("cannot train a frozen snapshot")
    rng = np.random.default_rng(config.seed)
    opt = nn.Adam(model.parameters(), lr=config.lr)
    n = len(pairs)
    curve: list[float] = []
    for _ in range(config.steps):
        if config.batch_size >= n:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=config.batch_size, replace=False)
        batch = pack_pairs([pairs[i][0] for i in idx], [pairs[i][1] for i in idx])
        opt.zero_grad()
        loss = lm_loss(model, batch)
        nn.backward(loss)
        if config.grad_clip:
            nn.clip_grad_norm(opt.params, config.grad_clip)
        opt.step()
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError("non-finite LM training loss")
        curve.append(value)
    return curve


def mean_nll(model: GPT, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], chunk: int = 256) -> float:
    """Mean negative log-likelihood per response token."""
    total, count = 0.0, 0
    for s in range(0, len(pairs), chunk):
        part = pairs[s : s + chunk]
        lp = batch_logprobs(model, [p[0] for p in part], [p[1] for p in part])
        total -= float(lp.sum())
        count += sum(len(p[1]) for p in part)
    return total / count


def unigram_perplexity(responses: Iterable[Sequence[int]]) -> float:
    """Perplexity of the maximum-likelihood unigram model on the same tokens."""
    counts: dict[int, int] = {}
    for y in responses:
        for t in y:
            counts[int(t)] = counts.get(int(t), 0) + 1
    n = sum(counts.values())
    if n == 0:
        raise ValueError("no tokens")
    entropy = -math.fsum(c / n * math.log(c / n) for c in counts.values())
    return math.exp(entropy)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_token(logits: np.ndarray, temperature: float, top_k: int, rng: np.random.Generator) -> int:
    """Top-k truncation, then temperature-scaled renormalisation; temperature 0 is argmax."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if not 1 <= top_k <= logits.shape[-1]:
        raise ValueError(f"top_k must lie in [1, {logits.shape[-1]}]")
    if temperature == 0 or top_k == 1:
        return int(np.argmax(logits))
    order = np.argsort(-logits, kind="stable")[:top_k]
    probs = nn.softmax(logits[order] / temperature)
    cdf = np.cumsum(probs)
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return int(order[min(j, top_k - 1)])


def generate_batch(
    model: GPT,
    prompts: Sequence[Sequence[int]],
    max_new: int,
    temperature: float,
    top_k: int,
    rngs: Sequence[np.random.Generator],
) -> list[list[int]]:
    """Sample one continuation per prompt; row ``i`` draws only from ``rngs[i]``.

    A row stops after emitting EOS, after ``max_new`` tokens, or at ``max_seq_len``.
    Rows are independent, so the result equals running :func:`generate` per row.
    """
    if any(len(p) == 0 for p in prompts):
        raise ValueError("empty prompt")
    limit = model.config.max_seq_len
    seqs = [list(p) for p in prompts]
    out: list[list[int]] = [[] for _ in prompts]
    active = [len(s) < limit and max_new > 0 for s in seqs]
    with nn.no_grad():
        while any(active):
            rows = [i for i, a in enumerate(active) if a]
            L = max(len(seqs[i]) for i in rows)
            tokens = np.full((len(rows), L), PAD, dtype=np.int64)
            for r, i in enumerate(rows):
                tokens[r, : len(seqs[i])] = seqs[i]
            last = np.array([len(seqs[i]) - 1 for i in rows])
            h = model.hidden(tokens).data[np.arange(len(rows)), last]
            logits = h @ model.params["lm_head"].data
            for r, i in enumerate(rows):
                tok = sample_token(logits[r], temperature, top_k, rngs[i])
                seqs[i].append(tok)
                out[i].append(tok)
                if tok == EOS or len(out[i]) >= max_new or len(seqs[i]) >= limit:
                    active[i] = False
    return out


def generate(
    model: GPT,
    prompt: Sequence[int],
    max_new: int,
    temperature: float = 1.0,
    top_k: int | None = None,
    seed: int = 0,
) -> list[int]:
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    k = model.config.vocab_size if top_k is None else top_k
    return generate_batch(model, [prompt], max_new, temperature, k, [np.random.default_rng(seed)])[0]
