import numpy as np
import pytest

from affectrl import nn, text
from affectrl.affect import LABELS, CircumplexTable, EmotionLabel, circumplex_reward
from affectrl.lm import GPT, LmConfig
from affectrl.reward_model import (
    RewardHead,
    RewardTrainConfig,
    head_loss,
    load_reward_checkpoint,
    pool_embedding,
    pooled_features,
    save_reward_checkpoint,
    score,
    score_batch,
    train_head,
    train_reward_model,
)
from helpers import separable_clusters

TABLE = CircumplexTable.default()


class TestPooling:
    def test_deterministic_and_shape(self, tiny_model):
        a = pool_embedding(tiny_model, [2, 4], [5, 6, 3])
        b = pool_embedding(tiny_model, [2, 4], [5, 6, 3])
        assert a.shape == (16,)
        assert np.array_equal(a, b)

    def test_append_changes_last(self, tiny_model):
        a = pool_embedding(tiny_model, [2, 4], [5, 6])
        b = pool_embedding(tiny_model, [2, 4], [5, 6, 7])
        assert not np.allclose(a, b)

    def test_last_is_final_hidden(self, tiny_model):
        with nn.no_grad():
            h = tiny_model.hidden(np.array([[2, 4, 5, 6]])).data[0]
        np.testing.assert_array_equal(pool_embedding(tiny_model, [2, 4], [5, 6], "last"), h[-1])
        np.testing.assert_allclose(pool_embedding(tiny_model, [2, 4], [5, 6], "mean"), h[2:].mean(axis=0))

    def test_batch_matches_single(self, tiny_model):
        feats = pooled_features(tiny_model, [[2, 4], [2]], [[5, 6, 3], [7, 3]], "mean")
        np.testing.assert_allclose(feats[1], pool_embedding(tiny_model, [2], [7, 3], "mean"), atol=1e-12)

    def test_empty_response(self, tiny_model):
        with pytest.raises(ValueError):
            pool_embedding(tiny_model, [2], [])


class TestScore:
    def test_zero_head(self, tiny_model):
        s = score(tiny_model, RewardHead.zeros(16), [2], [5, 3], TABLE)
        np.testing.assert_allclose(s.distribution, [1 / 7] * 7)
        assert (s.point.arousal, s.point.valence) == (0.0, 0.0)
        assert s.reward == 0.0

    def test_reward_consistent(self, tiny_model, rng):
        head = RewardHead(16, seed=4)
        head.weight.data = rng.normal(size=head.weight.shape)
        for s in score_batch(tiny_model, head, [[2]] * 5, [[i + 4, 3] for i in range(5)]):
            assert abs(s.reward - circumplex_reward(s.point)) <= 1e-12
            assert abs(sum(s.distribution) - 1.0) < 1e-12

    def test_dimension_mismatch(self, tiny_model):
        with pytest.raises(ValueError):
            score(tiny_model, RewardHead(8), [2], [5, 3])


class TestTraining:
    def test_separable_clusters(self):
        feats, labels = separable_clusters(1000, 16, seed=0)
        head = RewardHead(16, seed=0)
        m = train_head(head, feats, labels, TABLE, RewardTrainConfig(steps=400, lr=3e-2))
        assert m.heldout_accuracy >= 0.95
        assert m.n_train == 800 and m.n_heldout == 200

    def test_loss_moving_average_non_increasing(self):
        feats, labels = separable_clusters(300, 16, seed=1)
        m = train_head(RewardHead(16, seed=1), feats, labels, TABLE, RewardTrainConfig(steps=200, lr=1e-2))
        ma = np.convolve(m.train_loss, np.ones(10) / 10, mode="valid")
        assert np.all(np.diff(ma) <= 1e-12)

    def test_only_joy_regresses_to_table(self, rng):
        feats = rng.normal(size=(200, 8))
        labels = [EmotionLabel.JOY] * 200
        head = RewardHead(8, seed=0)
        train_head(head, feats, labels, TABLE, RewardTrainConfig(steps=400, lr=3e-2, holdout=0.0))
        with nn.no_grad():
            _, av = head.forward(nn.Tensor(feats))
        assert np.abs(av.data - [0.5, 0.8]).max() < 0.05

    def test_zero_steps_unchanged(self, rng):
        head = RewardHead(8, seed=3)
        before = head.weight.data.copy(), head.bias.data.copy()
        train_head(head, rng.normal(size=(10, 8)), [EmotionLabel.JOY] * 10, TABLE, RewardTrainConfig(steps=0))
        assert np.array_equal(head.weight.data, before[0]) and np.array_equal(head.bias.data, before[1])

    def test_empty_dataset(self, tiny_model):
        with pytest.raises(ValueError):
            train_reward_model(tiny_model, RewardHead(16), [], TABLE, RewardTrainConfig())

    def test_head_loss_gradient(self, rng):
        head = RewardHead(6, seed=2)
        x = rng.normal(size=(5, 6))
        y = rng.integers(7, size=5)
        tgt = rng.uniform(-1, 1, size=(5, 2))
        assert nn.grad_check(lambda: head_loss(head, x, y, tgt, 1.0), head.parameters()) < 1e-4

    def test_lm_frozen_by_default(self):
        utts = text.synth_corpus(0, 10)
        v = text.build_vocab(utts)
        model = GPT(LmConfig(len(v), d_model=16, n_layers=1, n_heads=2, max_seq_len=48), seed=0)
        before = {k: a.copy() for k, a in model.state_dict().items()}
        data = [(*text.pair_tokens(p, u, v), u.emotion) for p, u in text.dialogue_pairs(utts)]
        train_reward_model(model, RewardHead(16), data, TABLE, RewardTrainConfig(steps=20))
        assert all(np.array_equal(before[k], a) for k, a in model.state_dict().items())

    def test_joint_finetune_moves_lm(self):
        utts = text.synth_corpus(0, 6)
        v = text.build_vocab(utts)
        model = GPT(LmConfig(len(v), d_model=16, n_layers=1, n_heads=2, max_seq_len=48), seed=0)
        before = model.state_dict()["lm_head"].copy()
        tok = model.state_dict()["tok_emb"].copy()
        data = [(*text.pair_tokens(p, u, v), u.emotion) for p, u in text.dialogue_pairs(utts)]
        m = train_reward_model(model, RewardHead(16), data, TABLE, RewardTrainConfig(steps=5, freeze_lm=False))
        assert not np.array_equal(model.state_dict()["tok_emb"], tok)
        assert np.array_equal(model.state_dict()["lm_head"], before)  # head of the LM gets no gradient
        assert len(m.train_loss) == 5

    def test_trained_on_corpus_scores_joy_positive(self):
        utts = text.synth_corpus(0, 120)
        v = text.build_vocab(utts)
        model = GPT(LmConfig(len(v), d_model=16, n_layers=1, n_heads=2, max_seq_len=48), seed=0)
        data = [(*text.pair_tokens(p, u, v), u.emotion) for p, u in text.dialogue_pairs(utts)]
        head = RewardHead(16, seed=0)
        cfg = RewardTrainConfig(steps=150, lr=3e-2, lm_lr=3e-3, batch_size=64, freeze_lm=False)
        m = train_reward_model(model, head, data, TABLE, cfg)
        assert m.heldout_accuracy >= 0.9
        prompt = text.encode("how was the park ?", v)
        s = score(model, head, prompt, text.encode("the park was happy , really wonderful !", v, bos=False))
        assert s.emotion is EmotionLabel.JOY
        assert s.reward > 0


def test_checkpoint_roundtrip(tiny_model, tmp_path):
    head = RewardHead(16, seed=9, pooling="last")
    save_reward_checkpoint(tiny_model, head, tmp_path / "r.ckpt")
    model, back = load_reward_checkpoint(tmp_path / "r.ckpt")
    assert back.pooling == "last"
    assert np.array_equal(back.weight.data, head.weight.data)
    assert np.array_equal(model.state_dict()["lm_head"], tiny_model.state_dict()["lm_head"])
