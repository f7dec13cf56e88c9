import math

import numpy as np
import pytest

from mlsent import tensor as T
from mlsent.data import PAD, build_vocab, encode_batch
from mlsent.encoder import PRESETS, EncoderConfig, cls_pool, encode_forward, init_encoder, mlm_logits, preset
from mlsent.fixtures import make_sentences
from mlsent.tensor import ForwardMode, Tensor
from mlsent.training import TrainConfig, mask_tokens, masked_recovery_accuracy, mlm_loss, pretrain


def _batch(cfg, rng, b=2, lengths=(5, 9)):
    ids = np.zeros((b, cfg.max_len), dtype=np.int64)
    for r, n in enumerate(lengths[:b]):
        ids[r, 0] = 2
        ids[r, 1 : n + 1] = rng.integers(5, cfg.vocab_size, size=n)
        ids[r, n + 1] = 3
    return ids


def test_shapes():
    cfg = EncoderConfig(vocab_size=40, max_len=16)
    params = init_encoder(cfg, 0)
    ids = _batch(cfg, np.random.default_rng(0))
    hidden = encode_forward(params, cfg, ids)
    assert hidden.shape == (2, 16, 64)
    assert cls_pool(hidden).shape == (2, 64)
    assert np.array_equal(cls_pool(hidden).data[1], hidden.data[1, 0])
    assert mlm_logits(hidden, params, cfg).shape == (2, 16, 40)


def test_rejects_wrong_sequence_length():
    cfg = EncoderConfig(vocab_size=40, max_len=16)
    with pytest.raises(ValueError, match="16"):
        encode_forward(init_encoder(cfg, 0), cfg, np.zeros((2, 12), dtype=np.int64))


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, hidden_size=10, num_attention_heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, max_len=2)
    assert preset("bert-large", 100).hidden_size == 1024 and "roberta-base" in PRESETS


def test_initialisation_scheme():
    cfg = EncoderConfig(vocab_size=200)
    params = init_encoder(cfg, 0)
    assert np.all(params["layer0.ln1.gamma"].data == 1) and np.all(params["layer1.ln2.beta"].data == 0)
    assert abs(params["emb.token"].data.std() - 0.02) < 0.002
    assert "mlm.w" in params
    assert "mlm.w" not in init_encoder(EncoderConfig(vocab_size=200, tie_mlm=True), 0)


def test_eval_mode_is_deterministic_and_training_mode_uses_dropout():
    cfg = EncoderConfig(vocab_size=40, max_len=16)
    params = init_encoder(cfg, 0)
    ids = _batch(cfg, np.random.default_rng(1))
    a = encode_forward(params, cfg, ids).data
    b = encode_forward(params, cfg, ids).data
    assert np.array_equal(a, b)
    t1 = encode_forward(params, cfg, ids, ForwardMode(True, 4, 0)).data
    t2 = encode_forward(params, cfg, ids, ForwardMode(True, 4, 0)).data
    t3 = encode_forward(params, cfg, ids, ForwardMode(True, 4, 1)).data
    assert np.array_equal(t1, t2) and not np.array_equal(t1, t3)


@pytest.mark.parametrize("seed", range(4))
def test_pad_positions_are_never_attended(seed):
    cfg = EncoderConfig(vocab_size=40, max_len=16)
    params = init_encoder(cfg, seed)
    rng = np.random.default_rng(seed)
    ids = _batch(cfg, rng)
    base = encode_forward(params, cfg, ids).data
    # PAD ids define the key mask, so perturb what sits in the PAD slots instead
    params2 = dict(params)
    emb = params["emb.token"].data.copy()
    emb[PAD] += rng.normal(size=emb.shape[1])
    params2["emb.token"] = Tensor(emb)
    out = encode_forward(params2, cfg, ids).data
    live = ids != PAD
    assert np.max(np.abs(out[live] - base[live])) < 1e-12


def test_every_parameter_receives_gradient():
    cfg = EncoderConfig(vocab_size=30, hidden_size=16, num_layers=2, num_attention_heads=2, ff_size=24, max_len=10)
    params = init_encoder(cfg, 0)
    rng = np.random.default_rng(0)
    ids = _batch(cfg, rng, lengths=(4, 8))
    weights = Tensor(rng.normal(size=(2, 10, 30)))
    loss = T.tensor_sum(mlm_logits(encode_forward(params, cfg, ids), params, cfg) * weights)
    grads = T.gradients(loss, params)
    dead = [name for name, g in grads.items() if not np.any(g != 0)]
    assert dead == []


def test_untrained_mlm_loss_near_log_vocab():
    corpus = make_sentences(60, seed=2)
    vocab = build_vocab(corpus)
    cfg = EncoderConfig(vocab_size=len(vocab), max_len=24)
    params = init_encoder(cfg, 0)
    ids = encode_batch(corpus.texts, vocab, cfg.max_len)
    outcome = mask_tokens(ids, 0.15, 3, cfg.vocab_size)
    loss = mlm_loss(params, cfg, outcome).item()
    assert abs(loss - math.log(len(vocab))) < 0.1 * math.log(len(vocab))


def test_one_sentence_overfit_recovers_every_masked_token():
    corpus = make_sentences(1, seed=9)
    vocab = build_vocab(corpus)
    cfg = EncoderConfig(vocab_size=len(vocab), hidden_size=32, num_layers=1, num_attention_heads=2, ff_size=64, max_len=16)
    params = init_encoder(cfg, 0)
    train_cfg = TrainConfig.pretrain_defaults(epochs=500, lr=3e-3, batch_size=1)
    pretrain(params, cfg, corpus, vocab, train_cfg)
    ids = encode_batch(corpus.texts, vocab, cfg.max_len)
    assert masked_recovery_accuracy(params, cfg, ids) == 1.0
