"""PPO fine-tuning of the LM policy against a KL-penalised emotion reward.

Each episode samples responses from the policy, scores them, spreads a per-token
KL penalty over the response with the scalar reward on the last token, estimates
advantages with GAE against a linear value head, and runs clipped-surrogate
updates. The KL coefficient is either fixed or adapted toward a target.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .affect import combine_rewards, sam_to_unit
from .lm import GPT, PackedPairs, batch_logprobs, generate_batch, pack_pairs, response_logprobs
from .nn import Tensor
from .reward_model import RewardHead, RewardTrainConfig, pooled_features, score_batch, train_head
from .seeding import derive_seed, rng_for
from .text import EOS

log = logging.getLogger(__name__)

BETA_MIN, BETA_MAX = 1e-4, 10.0

RewardFn = Callable[[Sequence[Sequence[int]], Sequence[Sequence[int]]], Sequence[float]]


@dataclass
class PpoConfig:
    beta: float = 0.05
    beta_mode: str = "fixed"
    kl_target: float = 6.0
    clip_eps: float = 0.2
    lr: float = 1e-3
    value_lr: float = 1e-2
    episodes: int = 50
    rollouts_per_episode: int = 64
    ppo_epochs: int = 4
    minibatch_size: int = 32
    gamma: float = 1.0
    gae_lambda: float = 0.95
    max_response_len: int = 12
    vf_coef: float = 1.0
    grad_clip: float = 1.0
    refresh_reward_model: bool = False
    refresh_steps: int = 20
    transcripts_per_episode: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.beta_mode not in ("fixed", "adaptive"):
            raise ValueError("beta_mode must be 'fixed' or 'adaptive'")
        if self.beta_mode == "adaptive" and self.beta <= 0:
            raise ValueError("adaptive beta needs a positive starting value")
        if self.kl_target <= 0:
            raise ValueError("kl_target must be > 0")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.episodes < 0 or self.rollouts_per_episode < 1 or self.ppo_epochs < 1 or self.minibatch_size < 1:
            raise ValueError("episodes >= 0; rollouts, epochs and minibatch size >= 1")
        if self.max_response_len < 1:
            raise ValueError("max_response_len must be >= 1")


@dataclass
class Rollout:
    prompt: list[int]
    response: list[int]
    logp: np.ndarray
    ref_logp: np.ndarray
    reward: float
    values: np.ndarray = field(default=None)
    advantages: np.ndarray = field(default=None)
    returns: np.ndarray = field(default=None)
    shaped: np.ndarray = field(default=None)

    @property
    def kl_terms(self) -> np.ndarray:
        return self.logp - self.ref_logp


class ValueHead:
    """Linear value baseline on (detached) policy hidden states."""

    def __init__(self, d_model: int):
        self.weight = Tensor(np.zeros((d_model, 1)), requires_grad=True)
        self.bias = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, h) -> Tensor:
        out = nn.matmul(h, self.weight) + self.bias
        return out.reshape(out.shape[:-1])


# ---------------------------------------------------------------------------
# reward shaping and KL control
# ---------------------------------------------------------------------------


def shaped_reward(r: float, logp_policy: float, logp_ref: float, beta: float) -> float:
    """r - beta * (log pi - log p)."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if not (math.isfinite(logp_policy) and math.isfinite(logp_ref)):
        raise ValueError("log-probabilities must be finite")
    if logp_policy == logp_ref or beta == 0:
        return r
    return r - beta * (logp_policy - logp_ref)


def estimate_kl(rollouts: Sequence[Rollout]) -> float:
    """Mean over rollouts of the summed per-token log ratio (nats per sequence)."""
    if not rollouts:
        raise ValueError("no rollouts")
    return math.fsum(float(np.sum(r.logp - r.ref_logp)) for r in rollouts) / len(rollouts)


def adapt_beta(beta: float, measured_kl: float, kl_target: float) -> float:
    """Halve below target/1.5, double above target*1.5, clamp to [1e-4, 10]."""
    if measured_kl < kl_target / 1.5:
        beta = beta / 2.0
    elif measured_kl > kl_target * 1.5:
        beta = beta * 2.0
    return min(BETA_MAX, max(BETA_MIN, beta))


def per_token_rewards(reward: float, kl_terms: np.ndarray, beta: float) -> np.ndarray:
    """-beta * log ratio at each token, terminal reward added to the last one."""
    out = -beta * np.asarray(kl_terms, dtype=np.float64) if beta else np.zeros(len(kl_terms))
    out[-1] += reward
    return out


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and returns; the value after the last token is 0."""
    T = len(rewards)
    adv = np.zeros(T)
    last = 0.0
    for t in reversed(range(T)):
        next_v = values[t + 1] if t + 1 < T else 0.0
        delta = rewards[t] + gamma * next_v - values[t]
        last = delta + gamma * lam * last
        adv[t] = last
    return adv, adv + values


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


def model_reward_fn(rm_model: GPT, head: RewardHead, env=None) -> RewardFn:
    """Reward-model score, blended with the simulated SAM rating when ``env.lam < 1``."""

    def fn(prompts, responses):
        rewards = [s.reward for s in score_batch(rm_model, head, prompts, responses)]
        if env is not None and env.lam < 1.0:
            rewards = [
                combine_rewards(r, sam_to_unit(env.feedback(y, i).sam), env.lam)
                for i, (r, y) in enumerate(zip(rewards, responses))
            ]
        return rewards

    return fn


def env_reward_fn(env) -> RewardFn:
    def fn(prompts, responses):
        return [env.reward(x, y, i) for i, (x, y) in enumerate(zip(prompts, responses))]

    return fn


def _safe_rewards(reward_fn: RewardFn, prompts, responses) -> list[float | None]:
    try:
        vals = list(reward_fn(prompts, responses))
        if len(vals) != len(prompts):
            raise ValueError("reward function returned the wrong number of rewards")
    except Exception:
        vals = []
        for x, y in zip(prompts, responses):
            try:
                vals.append(float(reward_fn([x], [y])[0]))
            except Exception as exc:  # one bad rollout must not kill the episode
                log.warning("reward function failed on a rollout: %s", exc)
                vals.append(None)
    return [v if v is not None and math.isfinite(v) else None for v in vals]


def collect_rollouts(
    policy: GPT,
    reference: GPT,
    reward_fn: RewardFn,
    prompts: Sequence[Sequence[int]],
    config: PpoConfig,
    value_head: ValueHead | None = None,
    beta: float | None = None,
    episode: int = 0,
) -> tuple[list[Rollout], int]:
    """Sample, score and shape one batch. Returns (rollouts, number of failed rollouts)."""
    if not prompts:
        raise ValueError("empty prompt pool")
    beta = config.beta if beta is None else beta
    n = config.rollouts_per_episode
    pick = rng_for(config.seed, "prompt-pick", episode).integers(len(prompts), size=n)
    batch_prompts = [list(prompts[i]) for i in pick]
    rngs = [rng_for(config.seed, f"rollout/{episode}", i) for i in range(n)]
    V = policy.config.vocab_size
    responses = generate_batch(policy, batch_prompts, config.max_response_len, 1.0, V, rngs)

    rewards = _safe_rewards(reward_fn, batch_prompts, responses)
    keep = [i for i, r in enumerate(rewards) if r is not None]
    failed = n - len(keep)
    if not keep:
        return [], failed
    batch_prompts = [batch_prompts[i] for i in keep]
    responses = [responses[i] for i in keep]
    rewards = [rewards[i] for i in keep]

    packed = pack_pairs(batch_prompts, responses)
    with nn.no_grad():
        h = policy.hidden(packed.tokens)
        logp = response_logprobs(policy, packed, hidden=h).data
        ref_logp = response_logprobs(reference, packed).data
        if value_head is not None:
            rows = np.arange(len(keep))[:, None]
            values = value_head(h.data[rows, packed.pos]).data
        else:
            values = np.zeros_like(logp)

    out = []
    for b, (x, y, r) in enumerate(zip(batch_prompts, responses, rewards)):
        L = len(y)
        ro = Rollout(x, y, logp[b, :L].copy(), ref_logp[b, :L].copy(), float(r), values[b, :L].copy())
        ro.shaped = per_token_rewards(ro.reward, ro.kl_terms, beta)
        ro.advantages, ro.returns = gae(ro.shaped, ro.values, config.gamma, config.gae_lambda)
        out.append(ro)
    return out, failed


# ---------------------------------------------------------------------------
# update
# ---------------------------------------------------------------------------


def surrogate_loss(
    policy: GPT, batch: PackedPairs, old_logp: np.ndarray, advantages: np.ndarray, clip_eps: float
) -> tuple[Tensor, Tensor, Tensor]:
    """Negative clipped surrogate averaged over response tokens, plus (hidden, ratio)."""
    h = policy.hidden(batch.tokens)
    logp = response_logprobs(policy, batch, hidden=h)
    ratio = nn.exp(logp - old_logp)
    unclipped = ratio * advantages
    clipped = nn.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    obj = nn.minimum(unclipped, clipped)
    loss = -(obj * batch.mask).sum() / float(batch.mask.sum())
    return loss, h, ratio


def value_loss(value_head: ValueHead, h: np.ndarray, batch: PackedPairs, returns: np.ndarray) -> Tensor:
    rows = np.arange(h.shape[0])[:, None]
    v = value_head(Tensor._wrap(h[rows, batch.pos]))
    err = v - returns
    return (err * err * batch.mask).sum() * (0.5 / float(batch.mask.sum()))


@dataclass
class PpoOptimizers:
    policy: nn.Adam
    value: nn.Adam

    @classmethod
    def create(cls, policy: GPT, value_head: ValueHead, config: PpoConfig) -> PpoOptimizers:
        return cls(nn.Adam(policy.parameters(), lr=config.lr), nn.Adam(value_head.parameters(), lr=config.value_lr))


@dataclass
class UpdateStats:
    surrogate_loss: float
    value_loss: float
    clip_fraction: float
    kl: float
    whitened: bool


def _pad(arrays: Sequence[np.ndarray], R: int) -> np.ndarray:
    out = np.zeros((len(arrays), R))
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
    return out


def whiten(adv: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, bool]:
    """Zero-mean, unit-variance over valid tokens; left as is when the variance is ~0."""
    vals = adv[mask > 0]
    std = float(vals.std())
    if vals.size < 2 or std < 1e-8:
        return adv, False
    return (adv - vals.mean()) / std * mask, True


def ppo_update(
    policy: GPT,
    value_head: ValueHead,
    rollouts: Sequence[Rollout],
    config: PpoConfig,
    optimizers: PpoOptimizers | None = None,
    reference: GPT | None = None,
    episode: int = 0,
) -> UpdateStats:
    if not rollouts:
        raise ValueError("no rollouts to update on")
    if policy.frozen:
        raise ValueError("cannot update a frozen snapshot")
    opt = optimizers or PpoOptimizers.create(policy, value_head, config)
    packed = pack_pairs([r.prompt for r in rollouts], [r.response for r in rollouts])
    R = packed.targets.shape[1]
    old_logp = _pad([r.logp for r in rollouts], R)
    returns = _pad([r.returns for r in rollouts], R)
    adv, whitened = whiten(_pad([r.advantages for r in rollouts], R), packed.mask)

    B = len(rollouts)
    rng = rng_for(config.seed, "minibatch", episode)
    s_losses, v_losses, clipped, counted = [], [], 0.0, 0.0
    for _ in range(config.ppo_epochs):
        perm = rng.permutation(B)
        for s in range(0, B, config.minibatch_size):
            idx = np.sort(perm[s : s + config.minibatch_size])
            sub = PackedPairs(
                packed.tokens[idx], packed.pos[idx], packed.targets[idx], packed.mask[idx],
                packed.prompt_lens[idx], packed.resp_lens[idx],
            )
            opt.policy.zero_grad()
            opt.value.zero_grad()
            loss_pi, h, ratio = surrogate_loss(policy, sub, old_logp[idx], adv[idx], config.clip_eps)
            loss_v = value_loss(value_head, h.data, sub, returns[idx])
            total = loss_pi + loss_v * config.vf_coef
            nn.backward(total)
            if config.grad_clip:
                nn.clip_grad_norm(opt.policy.params, config.grad_clip)
            opt.policy.step()
            opt.value.step()
            s_losses.append(loss_pi.item())
            v_losses.append(loss_v.item())
            outside = (np.abs(ratio.data - 1.0) > config.clip_eps) * sub.mask
            clipped += float(outside.sum())
            counted += float(sub.mask.sum())

    kl = float("nan")
    if reference is not None:
        lp = batch_logprobs(policy, [r.prompt for r in rollouts], [r.response for r in rollouts])
        ref = batch_logprobs(reference, [r.prompt for r in rollouts], [r.response for r in rollouts])
        kl = float((lp - ref).sum(axis=1).mean())
    return UpdateStats(float(np.mean(s_losses)), float(np.mean(v_losses)), clipped / max(counted, 1.0), kl, whitened)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpisodeRecord:
    episode: int
    mean_reward: float
    mean_env_reward: float
    positive_fraction: float
    mean_kl: float
    beta: float
    clip_fraction: float
    surrogate_loss: float
    value_loss: float
    failed: int
    transcripts: list[dict] = field(default_factory=list)

    METRIC_KEYS = (
        "episode", "mean_reward", "mean_env_reward", "positive_fraction", "mean_kl",
        "beta", "clip_fraction", "surrogate_loss", "value_loss", "failed",
    )

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in self.METRIC_KEYS}


@dataclass
class TrainResult:
    policy: GPT
    value_head: ValueHead
    history: list[EpisodeRecord]
    aborted: bool = False


def train(
    policy: GPT,
    reference: GPT,
    reward_model: tuple[GPT, RewardHead] | None,
    env,
    config: PpoConfig,
    metrics_path: str | Path | None = None,
    on_episode: Callable[[EpisodeRecord, GPT], None] | None = None,
) -> TrainResult:
    """Run the episode loop in place on ``policy``.

    ``reward_model`` is a (frozen LM, head) pair; ``None`` drives PPO with the
    environment oracle directly. ``env`` supplies prompts and oracle feedback.
    On a non-finite loss the policy is restored to the last good parameters and
    the loop stops.
    """
    if reference.config != policy.config:
        raise ValueError("reference and policy configs differ")
    value_head = ValueHead(policy.config.d_model)
    opt = PpoOptimizers.create(policy, value_head, config)
    if reward_model is not None:
        rm_lm, head = reward_model
        reward_fn = model_reward_fn(rm_lm, head, env)
    else:
        reward_fn = env_reward_fn(env)
    beta = config.beta
    history: list[EpisodeRecord] = []
    aborted = False
    fh = open(metrics_path, "w", encoding="utf-8", newline="\n") if metrics_path else None
    try:
        for ep in range(config.episodes):
            good = {k: t.data for k, t in policy.params.items()}
            rollouts, failed = collect_rollouts(
                policy, reference, reward_fn, env.prompt_tokens, config, value_head, beta, ep
            )
            if not rollouts:
                log.error("episode %d: every rollout failed to score; stopping", ep)
                aborted = True
                break
            if config.refresh_reward_model and reward_model is not None:
                _refresh_reward_model(rm_lm, head, rollouts, env, config, ep)
            stats = ppo_update(policy, value_head, rollouts, config, opt, episode=ep)
            if not (math.isfinite(stats.surrogate_loss) and math.isfinite(stats.value_loss)) or not all(
                np.isfinite(t.data).all() for t in policy.params.values()
            ):
                log.error("episode %d: non-finite loss; restoring last good parameters", ep)
                for k, arr in good.items():
                    policy.params[k].data = arr
                aborted = True
                break
            feedback = [env.feedback(r.response, i) for i, r in enumerate(rollouts)]
            env_rewards = [f.reward for f in feedback]
            rec = EpisodeRecord(
                episode=ep,
                mean_reward=float(np.mean([r.reward for r in rollouts])),
                mean_env_reward=float(np.mean(env_rewards)),
                positive_fraction=float(np.mean([env.table[f.label].valence > 0 for f in feedback])),
                mean_kl=estimate_kl(rollouts),
                beta=beta,
                clip_fraction=stats.clip_fraction,
                surrogate_loss=stats.surrogate_loss,
                value_loss=stats.value_loss,
                failed=failed,
                transcripts=[
                    {"prompt": r.prompt, "response": r.response, "reward": r.reward, "label": f.label.value}
                    for r, f in list(zip(rollouts, feedback))[: config.transcripts_per_episode]
                ],
            )
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec.metrics(), sort_keys=True) + "\n")
                fh.flush()
            if on_episode:
                on_episode(rec, policy)
            log.info(
                "episode %d reward %.3f env %.3f kl %.3f beta %.4g clip %.3f",
                ep, rec.mean_reward, rec.mean_env_reward, rec.mean_kl, beta, rec.clip_fraction,
            )
            if config.beta_mode == "adaptive":
                beta = adapt_beta(beta, max(rec.mean_kl, 0.0), config.kl_target)
    finally:
        if fh:
            fh.close()
    return TrainResult(policy, value_head, history, aborted)


def _refresh_reward_model(rm_lm: GPT, head: RewardHead, rollouts, env, config: PpoConfig, episode: int) -> None:
    """Refit the head on this episode's responses, labelled by the simulated user."""
    prompts = [r.prompt for r in rollouts]
    responses = [r.response for r in rollouts]
    feats = pooled_features(rm_lm, prompts, responses, head.pooling)
    labels = [env.feedback(y, i).label for i, y in enumerate(responses)]
    cfg = RewardTrainConfig(steps=config.refresh_steps, holdout=0.0, seed=derive_seed(config.seed, "refresh", episode))
    train_head(head, feats, labels, env.table, cfg)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def expected_reward(policy, env, n_samples: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of r(x, y), x uniform over the prompt pool.

    ``policy`` is a GPT (sampled at temperature 1) or a callable
    ``(prompt_tokens, rng) -> response_tokens``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    prompts = env.prompt_tokens
    pick = rng_for(seed, "eval-prompts").integers(len(prompts), size=n_samples)
    chosen = [list(prompts[i]) for i in pick]
    rngs = [rng_for(seed, "eval-sample", i) for i in range(n_samples)]
    if isinstance(policy, GPT):
        responses = generate_batch(policy, chosen, env_max_len(env), 1.0, policy.config.vocab_size, rngs)
    else:
        responses = [policy(x, g) for x, g in zip(chosen, rngs)]
    rewards = np.array([env.reward(x, y, i) for i, (x, y) in enumerate(zip(chosen, responses))])
    m = float(rewards.mean())
    se = float(rewards.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return m, se


def env_max_len(env) -> int:
    return getattr(env, "max_response_len", 12)


def sample_responses(policy: GPT, prompts, max_len: int, seed: int, name: str = "sample") -> list[list[int]]:
    rngs = [rng_for(seed, name, i) for i in range(len(prompts))]
    return generate_batch(policy, prompts, max_len, 1.0, policy.config.vocab_size, rngs)


def strip_eos(tokens: Sequence[int]) -> list[int]:
    return [t for t in tokens if t != EOS]
