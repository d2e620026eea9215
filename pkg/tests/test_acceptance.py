"""Acceptance gate: one test per criterion, each recording a pass/fail line for the terminal summary."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from affectrl import lm, nn, ppo, text
from affectrl.affect import LABELS, AffectPoint, CircumplexTable, EmotionLabel, label_reward
from affectrl.checkpoint import load_checkpoint
from affectrl.cli import _env, _ppo_config, main
from affectrl.config import resolve
from affectrl.lexicon import EmotionLexicon
from affectrl.lm import GPT, LmConfig
from affectrl.reward_model import RewardHead, RewardTrainConfig, head_loss, load_reward_checkpoint, train_head
from affectrl.seeding import derive_seed
from affectrl.sim_env import classify_emotion_lexicon, respond
from helpers import ACCEPTANCE, separable_clusters, toy_categorical_kl


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n} failed: {detail}"


# ---------------------------------------------------------------------------
# 1. chain rule
# ---------------------------------------------------------------------------


def test_criterion_1_chain_rule():
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        V = int(rng.integers(5, 20))
        d = int(rng.choice([8, 16]))
        model = GPT(LmConfig(V, d_model=d, n_layers=int(rng.integers(1, 3)), n_heads=2, max_seq_len=16), seed=i)
        x = list(rng.integers(V, size=int(rng.integers(1, 6))))
        y = list(rng.integers(V, size=int(rng.integers(1, 8))))
        steps = [nn.log_softmax(lm.forward_logits(model, x + y[:j])[-1])[y[j]] for j in range(len(y))]
        worst = max(worst, abs(lm.sequence_log_prob(model, x, y) - math.fsum(steps)))

    uni = GPT(LmConfig(vocab_size=4, d_model=8, n_layers=1, n_heads=2, max_seq_len=8), seed=0)
    uni.params["lm_head"].data[:] = 0.0
    u = lm.sequence_log_prob(uni, [2], [1, 0, 3])
    ok = worst <= 1e-10 and abs(u - (-4.158883)) <= 1e-6 and abs(u - 3 * math.log(0.25)) <= 1e-9
    record(1, ok, f"max |chain - stepwise| = {worst:.2e} over 100 models; uniform vocab-4 |y|=3 -> {u:.9f}")


# ---------------------------------------------------------------------------
# 2. gradients
# ---------------------------------------------------------------------------


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    model = GPT(LmConfig(vocab_size=9, d_model=16, n_layers=2, n_heads=2, max_seq_len=10), seed=1)
    prompts, responses = [[2, 4], [2], [2, 5, 6]], [[5, 6, 3], [7, 3], [8, 3]]
    batch = lm.pack_pairs(prompts, responses)
    errs = {"lm": nn.grad_check(lambda: lm.lm_loss(model, batch), model.parameters())}

    head = RewardHead(16, seed=2)
    feats = rng.normal(size=(6, 16))
    labels = rng.integers(7, size=6)
    targets = rng.uniform(-1, 1, size=(6, 2))
    errs["reward_head"] = nn.grad_check(lambda: head_loss(head, feats, labels, targets, 1.0), head.parameters())

    vh = ppo.ValueHead(16)
    vh.weight.data = rng.normal(size=(16, 1))
    with nn.no_grad():
        h = model.hidden(batch.tokens).data
    returns = rng.normal(size=batch.mask.shape)
    errs["value_head"] = nn.grad_check(lambda: ppo.value_loss(vh, h, batch, returns), vh.parameters())

    old = lm.batch_logprobs(model, prompts, responses) + rng.normal(0, 0.3, size=batch.mask.shape)
    adv = rng.normal(size=batch.mask.shape)
    errs["surrogate"] = nn.grad_check(
        lambda: ppo.surrogate_loss(model, batch, old, adv, 0.2)[0], model.parameters()
    )
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record(2, worst <= 1e-4 and elapsed < 120, f"max relative error {worst:.1e} ({detail}); {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 3. circumplex reward
# ---------------------------------------------------------------------------


def test_criterion_3_reward_properties():
    table = CircumplexTable.default()
    problems = []
    for lab in LABELS:
        r = label_reward(lab, table)
        v = table[lab].valence
        if abs(r) > math.sqrt(2):
            problems.append(f"{lab.value} |r|>sqrt2")
        if lab is EmotionLabel.NEUTRAL:
            if r != 0.0:
                problems.append("Neutral != 0")
        elif np.sign(r) != np.sign(v):
            problems.append(f"{lab.value} sign")
    joy = label_reward(EmotionLabel.JOY, table)
    if abs(joy - 0.94340) > 1e-5:
        problems.append(f"Joy {joy}")
    record(3, not problems, f"Joy -> {joy:.5f}; all 7 labels bounded and valence-signed" if not problems else "; ".join(problems))


# ---------------------------------------------------------------------------
# 4. shaped-reward identities
# ---------------------------------------------------------------------------


def test_criterion_4_shaped_reward():
    rng = np.random.default_rng(4)
    n = 10_000
    r = rng.normal(0, 2, n)
    a = rng.normal(-5, 5, n)
    b = rng.normal(-5, 5, n)
    beta = rng.exponential(1.0, n)
    same = all(ppo.shaped_reward(r[i], a[i], a[i], beta[i]) == r[i] for i in range(n))
    zero = all(ppo.shaped_reward(r[i], a[i], b[i], 0.0) == r[i] for i in range(n))
    record(4, same and zero, f"{n} random draws: equal log-probs exact={same}, beta=0 exact={zero}")


# ---------------------------------------------------------------------------
# 5. reward-model learnability
# ---------------------------------------------------------------------------


def test_criterion_5_reward_model_learnability():
    t0 = time.process_time()
    feats, labels = separable_clusters(1000, 16, seed=0)
    head = RewardHead(16, seed=0)
    m = train_head(head, feats, labels, CircumplexTable.default(), RewardTrainConfig(steps=400, lr=3e-2))
    cpu = time.process_time() - t0
    ok = m.heldout_accuracy >= 0.90 and m.heldout_av_mae <= 0.10 and cpu <= 120
    record(5, ok, f"held-out accuracy {m.heldout_accuracy:.3f}, (A,V) MAE {m.heldout_av_mae:.3f}, {cpu:.1f}s CPU")


# ---------------------------------------------------------------------------
# desk pipeline shared by criteria 6 and 7
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Prepare, train the LM and train the reward model at the default desk config via the CLI."""
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    for stage in (["prepare", "--synthetic"], ["train-lm"], ["train-reward"]):
        assert main([*stage, "--out", str(out)]) == 0
    return out, time.perf_counter() - t0


def _desk_env(out: Path):
    cfg = resolve(None, {"out_dir": str(out)})
    return cfg, _env(cfg, text.Vocabulary.load(out / "vocab.txt"))


def test_criterion_6_end_to_end_uplift(desk):
    out, prep_time = desk
    t0 = time.perf_counter()
    cfg, env = _desk_env(out)
    reference = load_checkpoint(out / "lm.ckpt")
    n_ref = 10 * cfg.rollouts  # same number of samples as the final 10 episodes
    ref_mean, ref_se = ppo.expected_reward(reference, env, n_ref, derive_seed(cfg.seed, "reference-eval"))
    assert main(["ppo", "--out", str(out)]) == 0
    history = [json.loads(line) for line in (out / "ppo_metrics.jsonl").read_text().splitlines()]
    total = prep_time + time.perf_counter() - t0
    final = float(np.mean([h["mean_env_reward"] for h in history[-10:]]))
    uplift = final - ref_mean
    vocab = len(text.Vocabulary.load(out / "vocab.txt"))
    ok = len(history) == 50 and vocab <= 512 and uplift >= 0.3 and total <= 15 * 60
    record(
        6,
        ok,
        f"reference {ref_mean:+.3f} (se {ref_se:.3f}), final-10 mean {final:+.3f}, uplift {uplift:+.3f}; "
        f"vocab {vocab}; {total / 60:.1f} min",
    )


def _ppo_run(out: Path, **overrides):
    cfg, env = _desk_env(out)
    policy = load_checkpoint(out / "lm.ckpt")
    reference = lm.snapshot(policy)
    pc = _ppo_config(cfg)
    for k, v in overrides.items():
        setattr(pc, k, v)
    res = ppo.train(policy, reference, load_reward_checkpoint(out / "reward.ckpt"), env, pc)
    return pc, res.history, _final_kl(policy, reference, env, cfg.max_response_len)


def _final_kl(policy, reference, env, max_len: int, n: int = 1024) -> float:
    """KL(policy || reference) in nats per sequence, measured on n fresh samples from a fixed stream."""
    rng = np.random.default_rng(derive_seed(0, "final-kl"))
    prompts = [env.prompt_tokens[i] for i in rng.integers(len(env.prompt_tokens), size=n)]
    responses = ppo.sample_responses(policy, prompts, max_len, derive_seed(0, "final-kl-samples"))
    diff = lm.batch_logprobs(policy, prompts, responses) - lm.batch_logprobs(reference, prompts, responses)
    return float(diff.sum(axis=1).mean())


def test_criterion_7_kl_control(desk):
    out, _ = desk
    final_kl, mean_reward = {}, {}
    for beta in (1.0, 0.01, 100.0, 0.0):
        _, hist, final_kl[beta] = _ppo_run(out, beta=beta)
        mean_reward[beta] = float(np.mean([h.mean_reward for h in hist]))
    pc, hist, _ = _ppo_run(out, beta_mode="adaptive")
    lo, hi = pc.kl_target / 1.5, pc.kl_target * 1.5
    band = float(np.mean([lo <= h.mean_kl <= hi for h in hist[-20:]]))
    checks = {
        "KL(b=1) <= KL(b=0.01)": final_kl[1.0] <= final_kl[0.01],
        "KL(b=100) < 0.05": final_kl[100.0] < 0.05,
        "reward(b=0) >= reward(b=100)": mean_reward[0.0] >= mean_reward[100.0],
        "adaptive in band >= 60%": band >= 0.6,
    }
    detail = (
        f"final KL b=0.01 {final_kl[0.01]:.3f}, b=1 {final_kl[1.0]:.3f}, b=100 {final_kl[100.0]:.4f}; "
        f"mean reward b=0 {mean_reward[0.0]:+.3f} vs b=100 {mean_reward[100.0]:+.3f}; "
        f"adaptive (target {pc.kl_target:g}) in [{lo:.1f}, {hi:.1f}] for {band:.0%} of last 20"
    )
    failed = [k for k, v in checks.items() if not v]
    record(7, not failed, detail + ("" if not failed else f"; failed: {', '.join(failed)}"))


# ---------------------------------------------------------------------------
# 8. oracle consistency
# ---------------------------------------------------------------------------


def test_criterion_8_oracle_consistency():
    lex = EmotionLexicon.default()
    table = CircumplexTable.default()
    rng = np.random.default_rng(8)
    pool = sorted(lex.entries) + ["the", "park", "was", "and", ",", "!", "robot", "today", "very"]
    mismatches = 0
    for i in range(1000):
        words = rng.choice(pool, size=int(rng.integers(0, 10)))
        sentence = " ".join(words) or "."
        fb = respond(sentence, lex, table, lam=1.0, noise=0.0, seed=i)
        expected = label_reward(classify_emotion_lexicon(sentence, lex), table)
        mismatches += fb.reward != expected or fb.fused != AffectPoint(table[fb.label].arousal, table[fb.label].valence)

    exact, rollouts = toy_categorical_kl(100_000, seed=0)
    per = np.array([np.sum(r.kl_terms) for r in rollouts])
    se = float(per.std(ddof=1) / math.sqrt(len(per)))
    est = ppo.estimate_kl(rollouts)
    ok = mismatches == 0 and abs(est - exact) <= 3 * se
    record(
        8,
        ok,
        f"{mismatches} reward mismatches in 1000 texts; KL estimate {est:.5f} vs exact {exact:.5f} "
        f"({abs(est - exact) / se:.2f} se)",
    )


# ---------------------------------------------------------------------------
# 9. reproducibility
# ---------------------------------------------------------------------------

SMALL = [
    "--set", "dialogues=80", "--set", "d_model=32", "--set", "lm_steps=60", "--set", "rm_steps=100",
    "--set", "episodes=3", "--set", "rollouts=16", "--set", "minibatch_size=8", "--set", "eval_samples=32",
    "--set", "checkpoint_every=1", "--seed", "11",
]


def test_criterion_9_reproducibility(tmp_path):
    def pipeline(out: Path) -> None:
        for stage in (["prepare", "--synthetic"], ["train-lm"], ["train-reward"], ["ppo"], ["eval"]):
            assert main([*stage, "--out", str(out), *SMALL]) == 0

    a, b = tmp_path / "a", tmp_path / "b"
    pipeline(a)
    pipeline(b)
    # Also re-run each stage in place from its written config snapshot.
    for stage in ("train-lm", "train-reward", "ppo", "eval"):
        before = {p.name: p.read_bytes() for p in a.iterdir() if p.is_file()}
        assert main([stage, "--config", str(a / f"{stage}.config.txt")]) == 0
        changed = [n for n, data in before.items() if (a / n).read_bytes() != data]
        assert not changed, f"{stage} rerun changed {changed}"
    def content(path: Path) -> bytes:
        data = path.read_bytes()
        if path.name.endswith(".config.txt"):  # snapshots name their own output directory
            data = b"".join(line for line in data.splitlines(True) if not line.startswith(b"out_dir ="))
        return data

    names = sorted(p.name for p in a.iterdir())
    differing = [n for n in names if content(a / n) != content(b / n)]
    record(
        9,
        not differing and names == sorted(p.name for p in b.iterdir()),
        f"{len(names)} artifacts byte-compared across two runs and in-place reruns "
        f"(config snapshots minus their out_dir line); differing: {differing or 'none'}",
    )
