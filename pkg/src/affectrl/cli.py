"""Command-line pipeline: prepare -> train-lm -> train-reward -> ppo -> eval / chat.

Exit codes: 0 success, 1 runtime failure (including missing upstream artifacts),
2 usage, configuration or input-data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import lm, ppo, text
from .affect import CircumplexTable
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, resolve
from .lexicon import EmotionLexicon
from .reward_model import (
    RewardHead,
    RewardTrainConfig,
    load_reward_checkpoint,
    save_reward_checkpoint,
    train_reward_model,
)
from .seeding import derive_seed, rng_for
from .sim_env import LexiconEnv, prompt_pool

log = logging.getLogger("affectrl")

CORPUS = "corpus.jsonl"
VOCAB = "vocab.txt"
SUMMARY = "data_summary.json"
LM_CKPT = "lm.ckpt"
RM_CKPT = "reward.ckpt"
POLICY_CKPT = "policy.ckpt"


class UsageError(Exception):
    pass


class MissingArtifact(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingArtifact(f"missing required file: {path}")
    return path


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _lexicon(cfg: RunConfig) -> EmotionLexicon:
    return EmotionLexicon.load(cfg.lexicon) if cfg.lexicon else EmotionLexicon.default()


def _table(cfg: RunConfig) -> CircumplexTable:
    return CircumplexTable.load(cfg.circumplex) if cfg.circumplex else CircumplexTable.default()


def _load_data(out: Path) -> tuple[list[text.Utterance], text.Vocabulary]:
    utts = text.read_jsonl(_require(out / CORPUS))
    vocab = text.Vocabulary.load(_require(out / VOCAB))
    return utts, vocab


def _pairs(utts, vocab, max_len: int) -> list[tuple[list[int], list[int]]]:
    out = []
    for prev, u in text.dialogue_pairs(utts):
        x, y = text.pair_tokens(prev, u, vocab)
        if len(x) + len(y) <= max_len:
            out.append((x, y))
    return out


def _env(cfg: RunConfig, vocab: text.Vocabulary) -> LexiconEnv:
    env = LexiconEnv(
        vocab,
        _lexicon(cfg),
        _table(cfg),
        prompt_pool(derive_seed(cfg.seed, "prompts"), cfg.n_prompts),
        cfg.lam,
        cfg.noise,
        derive_seed(cfg.seed, "user"),
        cfg.max_response_len,
    )
    budget = cfg.max_seq_len - cfg.max_response_len
    if any(len(p) > budget for p in env.prompt_tokens):
        raise ConfigError("prompt pool does not fit max_seq_len - max_response_len")
    return env


def _ppo_config(cfg: RunConfig) -> ppo.PpoConfig:
    return ppo.PpoConfig(
        beta=cfg.beta,
        beta_mode=cfg.beta_mode,
        kl_target=cfg.kl_target,
        clip_eps=cfg.clip_eps,
        lr=cfg.ppo_lr,
        value_lr=cfg.value_lr,
        episodes=cfg.episodes,
        rollouts_per_episode=cfg.rollouts,
        ppo_epochs=cfg.ppo_epochs,
        minibatch_size=cfg.minibatch_size,
        gamma=cfg.gamma,
        gae_lambda=cfg.gae_lambda,
        max_response_len=cfg.max_response_len,
        refresh_reward_model=cfg.refresh_reward_model,
        seed=derive_seed(cfg.seed, "ppo"),
    )


def _stage_dir(cfg: RunConfig, stage: str) -> Path:
    out = cfg.out_path()
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / f"{stage}.config.txt")
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig, args) -> int:
    if bool(args.meld) == bool(args.synthetic):
        raise UsageError("prepare needs exactly one of --meld CSV or --synthetic")
    if args.meld:
        try:
            utts = text.load_meld_csv(args.meld)
        except FileNotFoundError:
            raise UsageError(f"cannot read {args.meld}") from None
    else:
        utts = text.synth_corpus(derive_seed(cfg.seed, "corpus"), cfg.dialogues, _lexicon(cfg))
    if not utts:
        raise UsageError("input corpus has no utterances")
    out = _stage_dir(cfg, "prepare")
    vocab = text.build_vocab(utts, cfg.vocab_max)
    text.write_jsonl(utts, out / CORPUS)
    vocab.save(out / VOCAB)
    n_tokens = sum(len(text.tokenize(u.text)) for u in utts)
    summary = {
        "utterances": len(utts),
        "dialogues": len({u.dialogue_id for u in utts}),
        "tokens": n_tokens,
        "vocab_size": len(vocab),
        "labels": text.label_histogram(utts),
    }
    (out / SUMMARY).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"prepared {len(utts)} utterances, vocab {len(vocab)} -> {out}")
    return 0


def cmd_train_lm(cfg: RunConfig, args) -> int:
    utts, vocab = _load_data(cfg.out_path())
    out = _stage_dir(cfg, "train-lm")
    pairs = _pairs(utts, vocab, cfg.max_seq_len)
    lm_cfg = lm.LmConfig(len(vocab), cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.max_seq_len)
    model = lm.GPT(lm_cfg, seed=derive_seed(cfg.seed, "lm-init"))
    curve = lm.train_lm(
        model,
        pairs,
        lm.LmTrainConfig(cfg.lm_steps, cfg.lm_batch_size, cfg.lm_lr, seed=derive_seed(cfg.seed, "lm-train")),
    )
    save_checkpoint(model, out / LM_CKPT)
    _write_jsonl(out / "lm_metrics.jsonl", ({"step": i, "loss": v} for i, v in enumerate(curve)))
    nll = lm.mean_nll(model, pairs)
    uni = lm.unigram_perplexity(y for _, y in pairs)
    final = {"pairs": len(pairs), "train_perplexity": float(np.exp(nll)), "unigram_perplexity": uni}
    (out / "lm_summary.json").write_text(json.dumps(final, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"LM trained: perplexity {final['train_perplexity']:.3f} (unigram {uni:.3f}) -> {out / LM_CKPT}")
    return 0


def cmd_train_reward(cfg: RunConfig, args) -> int:
    out_dir = cfg.out_path()
    utts, vocab = _load_data(out_dir)
    model = load_checkpoint(_require(out_dir / LM_CKPT))
    out = _stage_dir(cfg, "train-reward")
    dataset = []
    for prev, u in text.dialogue_pairs(utts):
        x, y = text.pair_tokens(prev, u, vocab)
        if len(x) + len(y) <= cfg.max_seq_len:
            dataset.append((x, y, u.emotion))
    head = RewardHead(model.config.d_model, seed=derive_seed(cfg.seed, "rm-init"), pooling=cfg.rm_pooling)
    metrics = train_reward_model(
        model,
        head,
        dataset,
        _table(cfg),
        RewardTrainConfig(
            steps=cfg.rm_steps,
            lr=cfg.rm_lr,
            mu=cfg.rm_mu,
            holdout=cfg.rm_holdout,
            freeze_lm=cfg.rm_freeze_lm,
            seed=derive_seed(cfg.seed, "rm-train"),
        ),
    )
    save_reward_checkpoint(model, head, out / RM_CKPT)
    _write_jsonl(out / "reward_metrics.jsonl", ({"step": i, "loss": v} for i, v in enumerate(metrics.train_loss)))
    summary = {
        "heldout_accuracy": metrics.heldout_accuracy,
        "heldout_av_mae": metrics.heldout_av_mae,
        "n_train": metrics.n_train,
        "n_heldout": metrics.n_heldout,
    }
    (out / "reward_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"reward model: held-out accuracy {metrics.heldout_accuracy:.3f}, (A,V) MAE {metrics.heldout_av_mae:.3f}")
    return 0


def cmd_ppo(cfg: RunConfig, args) -> int:
    out_dir = cfg.out_path()
    _, vocab = _load_data(out_dir)
    policy = load_checkpoint(_require(Path(args.lm) if args.lm else out_dir / LM_CKPT))
    reward_model = None
    if cfg.reward_source == "model":
        reward_model = load_reward_checkpoint(_require(Path(args.reward) if args.reward else out_dir / RM_CKPT))
    out = _stage_dir(cfg, "ppo")
    reference = lm.snapshot(policy)
    env = _env(cfg, vocab)
    pcfg = _ppo_config(cfg)

    def on_episode(rec: ppo.EpisodeRecord, model: lm.GPT) -> None:
        if cfg.checkpoint_every and (rec.episode + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out / f"policy_ep{rec.episode + 1:04d}.ckpt")

    result = ppo.train(policy, reference, reward_model, env, pcfg, out / "ppo_metrics.jsonl", on_episode)
    save_checkpoint(result.policy, out / POLICY_CKPT)
    _write_jsonl(
        out / "ppo_transcripts.jsonl",
        (
            {"episode": rec.episode, "prompt": text.decode(t["prompt"], vocab),
             "response": text.decode(t["response"], vocab), "reward": t["reward"], "label": t["label"]}
            for rec in result.history
            for t in rec.transcripts
        ),
    )
    if result.history:
        last = result.history[-1]
        print(f"PPO finished {len(result.history)} episodes: reward {last.mean_reward:.3f}, KL {last.mean_kl:.3f}")
    else:
        print("PPO ran 0 episodes; policy unchanged")
    if result.aborted:
        print("PPO aborted early; last good policy saved", file=sys.stderr)
        return 1
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.samples is not None and args.samples < 1:
        raise UsageError("--samples must be >= 1")
    n = args.samples if args.samples is not None else cfg.eval_samples
    if n < 1:
        raise UsageError("eval_samples must be >= 1")
    out_dir = cfg.out_path()
    _, vocab = _load_data(out_dir)
    policy = load_checkpoint(_require(Path(args.policy) if args.policy else out_dir / POLICY_CKPT))
    reference = load_checkpoint(_require(Path(args.reference) if args.reference else out_dir / LM_CKPT))
    if policy.config != reference.config:
        raise UsageError("policy and reference checkpoints have different model configs")
    out = _stage_dir(cfg, "eval")
    env = _env(cfg, vocab)
    mean, se = ppo.expected_reward(policy, env, n, derive_seed(cfg.seed, "eval"))

    rng = rng_for(cfg.seed, "eval-kl")
    pick = rng.integers(len(env.prompt_tokens), size=n)
    prompts = [env.prompt_tokens[i] for i in pick]
    responses = ppo.sample_responses(policy, prompts, cfg.max_response_len, derive_seed(cfg.seed, "eval-kl"))
    lp = lm.batch_logprobs(policy, prompts, responses)
    ref = lm.batch_logprobs(reference, prompts, responses)
    kl_each = (lp - ref).sum(axis=1)
    records = []
    positive = 0
    for i, (x, y) in enumerate(zip(prompts, responses)):
        fb = env.feedback(y, i)
        positive += env.table[fb.label].valence > 0
        records.append(
            {"index": i, "prompt": text.decode(x, vocab), "response": text.decode(y, vocab),
             "label": fb.label.value, "reward": fb.reward, "kl": float(kl_each[i])}
        )
    summary = {
        "samples": n,
        "expected_reward": mean,
        "expected_reward_se": se,
        "kl": float(kl_each.mean()),
        "positive_valence_fraction": positive / n,
    }
    _write_jsonl(out / "eval.jsonl", records)
    (out / "eval_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    lines = [
        f"expected reward   {mean:+.4f} +/- {se:.4f} (n={n})",
        f"KL to reference   {summary['kl']:.4f} nats/sequence",
        f"positive valence  {summary['positive_valence_fraction']:.3f}",
        "",
        "sample transcripts:",
    ]
    lines += [f"  > {r['prompt']}\n    {r['response']}  [{r['label']}, {r['reward']:+.3f}]" for r in records[:5]]
    report = "\n".join(lines) + "\n"
    (out / "eval_summary.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return 0


def cmd_chat(cfg: RunConfig, args) -> int:
    out_dir = cfg.out_path()
    vocab = text.Vocabulary.load(_require(out_dir / VOCAB))
    policy = load_checkpoint(_require(Path(args.policy) if args.policy else out_dir / POLICY_CKPT))
    env = _env(cfg, vocab)
    log_path = Path(args.log) if args.log else out_dir / "chat_log.txt"
    top_k = cfg.top_k or policy.config.vocab_size
    budget = policy.config.max_seq_len - cfg.max_response_len
    stream = args.input if args.input is not None else sys.stdin.buffer
    turn = 0
    with open(log_path, "a", encoding="utf-8", newline="\n") as logf:
        while True:
            print("you> ", end="", flush=True)
            raw = stream.readline()
            if not raw:
                print()
                break
            try:
                line = raw.decode("utf-8").strip()
            except UnicodeDecodeError:
                print("warning: skipped a line that is not valid UTF-8", file=sys.stderr)
                continue
            if not line:
                continue
            prompt = text.encode(line, vocab)
            if len(prompt) > budget:
                prompt = [text.BOS] + prompt[-(budget - 1):]
            reply = lm.generate(policy, prompt, cfg.max_response_len, cfg.temperature, top_k,
                                derive_seed(cfg.seed, "chat", turn))
            fb = env.feedback(reply, turn)
            shown = text.decode(reply, vocab)
            print(f"bot> {shown}")
            print(f"     [{fb.label.value}] reward {fb.reward:+.5f}")
            logf.write(json.dumps({"turn": turn, "user": line, "bot": shown, "label": fb.label.value,
                                   "reward": fb.reward}, sort_keys=True) + "\n")
            turn += 1
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train-lm": cmd_train_lm,
    "train-reward": cmd_train_reward,
    "ppo": cmd_ppo,
    "eval": cmd_eval,
    "chat": cmd_chat,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", help=f"output directory (default ${'AFFECTRL_OUT'} or ./runs)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="affectrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="build corpus and vocabulary")
    p.add_argument("--meld", help="MELD-format CSV")
    p.add_argument("--synthetic", action="store_true", help="generate the synthetic corpus")
    p.add_argument("--dialogues", type=int, help="synthetic dialogue count")

    sub.add_parser("train-lm", parents=[common], help="train the language model")
    sub.add_parser("train-reward", parents=[common], help="train the reward head")

    p = sub.add_parser("ppo", parents=[common], help="PPO fine-tuning")
    p.add_argument("--episodes", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--beta-mode", choices=("fixed", "adaptive"))
    p.add_argument("--lm", help="input LM checkpoint (default OUT/lm.ckpt)")
    p.add_argument("--reward", help="reward checkpoint (default OUT/reward.ckpt)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a policy")
    p.add_argument("--samples", type=int)
    p.add_argument("--policy", help="policy checkpoint (default OUT/policy.ckpt)")
    p.add_argument("--reference", help="reference checkpoint (default OUT/lm.ckpt)")

    p = sub.add_parser("chat", parents=[common], help="interactive chat")
    p.add_argument("--policy", help="policy checkpoint (default OUT/policy.ckpt)")
    p.add_argument("--log", help="transcript log (default OUT/chat_log.txt)")
    p.set_defaults(input=None)
    return parser


def _overrides(args) -> dict[str, object]:
    over: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    over["out_dir"] = args.out
    over["seed"] = args.seed
    for flag, key in (("dialogues", "dialogues"), ("episodes", "episodes"), ("beta", "beta"), ("beta_mode", "beta_mode")):
        if getattr(args, flag, None) is not None:
            over[key] = getattr(args, flag)
    return over


def main(argv: Sequence[str] | None = None, stdin=None) -> int:
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if stdin is not None:
            args.input = stdin
        cfg = resolve(args.config, _overrides(args))
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, text.CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MissingArtifact, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
