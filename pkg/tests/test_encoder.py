import numpy as np
import pytest

import gspeech.numerics as nx
from gspeech.ctc import Alphabet, ctc_greedy_decode, ctc_loss
from gspeech.data import synth_dataset
from gspeech.encoder import (EncoderConfig, EncoderConfigError, EncoderTrainConfig, TrainingDiverged,
                             block_mask, block_self_attention, conformer_forward, encoder_param_shapes,
                             init_encoder, self_conditioned_loss, train_encoder)
from gspeech.gradsuite import block_conformer
from gspeech.numerics import MissingTensorError, NamedTensorStore, Tensor, grad_check


def toy(**kw):
    return EncoderConfig.toy(output_dim=6, **kw)


def toy_params(cfg, seed=0):
    return {k: Tensor(v) for k, v in init_encoder(cfg, seed).items()}


def test_block_mask_examples():
    m = block_mask(5, 2)
    blocks = [{j for j in range(5) if m[i, j]} for i in range(5)]
    assert blocks == [{0, 1}, {0, 1}, {2, 3}, {2, 3}, {4}]
    assert block_mask(7, 7).all() and block_mask(7, 100).all()
    with pytest.raises(ValueError):
        block_mask(3, 0)


def test_full_scale_block_is_200_frames():
    assert EncoderConfig().block_frames == 200


def test_table2_shapes():
    cfg = EncoderConfig(num_layers=10, hidden_dim=1024, num_heads=8, head_size=128, conv_kernel=15,
                        output_dim=42)
    shapes = encoder_param_shapes(cfg)
    assert shapes["enc.input.w"] == (160, 1024)
    assert shapes["enc.out.w"] == (1024, 42)
    assert shapes["enc.layer9.conv.dw.k"] == (15, 1024)
    assert cfg.intermediate_layer == 5


def test_config_invariants():
    with pytest.raises(EncoderConfigError):
        EncoderConfig(hidden_dim=64, num_heads=4, head_size=8)
    with pytest.raises(EncoderConfigError):
        EncoderConfig.toy(conv_kernel=4)
    with pytest.raises(EncoderConfigError):
        EncoderConfig.toy(w_inter=0.5, w_final=0.6)
    assert EncoderConfig.toy(num_layers=3).intermediate_layer == 2


def test_toy_forward_shapes():
    cfg = toy()
    out = conformer_forward(cfg, toy_params(cfg), np.random.default_rng(0).normal(size=(12, 160)))
    assert out.hidden.shape == (12, 64)
    assert out.inter_logits.shape == (12, 6) and out.final_logits.shape == (12, 6)


def test_missing_tensor_is_named():
    cfg = toy()
    p = toy_params(cfg)
    del p["enc.layer1.conv.dw.k"]
    with pytest.raises(MissingTensorError, match="enc.layer1.conv.dw.k"):
        conformer_forward(cfg, p, np.zeros((4, 160)))


def _per_block_attention(x, p, cfg, bf):
    outs = []
    for s in range(0, x.shape[0], bf):
        seg = Tensor(x.data[s:s + bf])
        outs.append(block_self_attention(seg, p, "enc.layer0.mhsa", cfg, block_frames=10 ** 6).data)
    return np.concatenate(outs, axis=0)


@pytest.mark.parametrize("T", [5, 200, 401])
@pytest.mark.parametrize("bf", [2, 200])
def test_block_attention_equals_independent_blocks(T, bf):
    cfg = toy()
    p = toy_params(cfg, seed=T)
    x = Tensor(np.random.default_rng(T + bf).normal(size=(T, 64)))
    full = block_self_attention(x, p, "enc.layer0.mhsa", cfg, block_frames=bf).data
    assert np.max(np.abs(full - _per_block_attention(x, p, cfg, bf))) <= 1e-6


def test_perturbing_block_two_leaves_block_one():
    cfg = toy()
    p = toy_params(cfg)
    x = np.random.default_rng(3).normal(size=(8, 64))
    y = x.copy()
    y[4:] += np.random.default_rng(4).normal(size=(4, 64))
    a = block_self_attention(Tensor(x), p, "enc.layer0.mhsa", cfg, block_frames=4).data
    b = block_self_attention(Tensor(y), p, "enc.layer0.mhsa", cfg, block_frames=4).data
    assert np.array_equal(a[:4], b[:4])
    assert not np.allclose(a[4:], b[4:])


def test_attention_rows_are_convex():
    cfg = toy()
    p = toy_params(cfg)
    w = []
    block_self_attention(Tensor(np.random.default_rng(5).normal(size=(9, 64))), p, "enc.layer0.mhsa",
                         cfg, block_frames=4, weights_out=w)
    a = w[0]
    assert np.all(a >= 0)
    assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(a[:, :4, 4:] < 1e-12)  # nothing leaks across blocks


@pytest.mark.parametrize("seed", range(3))
def test_conformer_layer_gradient(seed):
    assert block_conformer(seed) <= 1e-3


def test_self_conditioned_loss_weights():
    rng = np.random.default_rng(0)
    inter, final = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4)))
    target = [1, 2]
    li = ctc_loss(nx.log_softmax(inter, -1), target).loss.item()
    lf = ctc_loss(nx.log_softmax(final, -1), target).loss.item()
    assert self_conditioned_loss(inter, final, target).item() == pytest.approx(0.2 * li + 0.8 * lf)
    assert self_conditioned_loss(inter, final, target, 0.0, 1.0).item() == pytest.approx(lf)


def test_self_conditioned_loss_gradient():
    rng = np.random.default_rng(1)
    inter, final = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4)))
    err = grad_check(lambda: self_conditioned_loss(inter, final, [3, 1, 3]), [inter, final])
    assert err <= 1e-4


def test_self_conditioning_feeds_back():
    # changing the feedback map changes the final logits but not the intermediate ones
    cfg = toy()
    p = toy_params(cfg)
    x = np.random.default_rng(6).normal(size=(10, 160))
    a = conformer_forward(cfg, p, x)
    bump = np.random.default_rng(7).normal(size=p["enc.fb.w"].shape)
    p["enc.fb.w"] = Tensor(p["enc.fb.w"].data + bump)
    b = conformer_forward(cfg, p, x)
    assert np.array_equal(a.inter_logits.data, b.inter_logits.data)
    assert not np.allclose(a.final_logits.data, b.final_logits.data)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(0, 8, chars="abcde", max_len=4)


def test_zero_steps_returns_init(tiny_data):
    waves, recs = tiny_data
    cfg = toy()
    init = init_encoder(cfg, 3)
    res = train_encoder(cfg, waves, recs, Alphabet.from_chars("abcde"), EncoderTrainConfig(steps=0),
                        init=init)
    assert res.params.digest() == init.digest() and res.steps_done == 0


def test_lr_curve_is_triangular(tiny_data):
    waves, recs = tiny_data
    tc = EncoderTrainConfig(steps=20, batch_size=4)
    res = train_encoder(toy(), waves, recs, Alphabet.from_chars("abcde"), tc)
    lrs = [r["lr"] for r in res.log_rows]
    peak = int(np.argmax(lrs))
    assert peak == round(0.3 * 20)
    assert lrs[0] == pytest.approx(1e-4) and lrs[peak] == pytest.approx(1e-3)
    assert all(np.diff(lrs[:peak + 1]) > 0) and all(np.diff(lrs[peak:]) < 0)
    assert lrs[-1] > 1e-5  # floor reached only at the final step count


def test_divergence_aborts_with_last_good(tiny_data):
    waves, recs = tiny_data
    cfg = toy()
    init = init_encoder(cfg, 0)
    init["enc.out.b"] = np.full(6, np.nan)
    with pytest.raises(TrainingDiverged) as info:
        train_encoder(cfg, waves, recs, Alphabet.from_chars("abcde"), EncoderTrainConfig(steps=3),
                      init=init)
    assert info.value.last_good is not None


def test_toy_training_learns_transcripts():
    waves, recs = synth_dataset(0, 16)
    alpha = Alphabet.from_chars("abcdefghij")
    cfg = EncoderConfig.toy(output_dim=len(alpha))
    res = train_encoder(cfg, waves, recs, alpha, EncoderTrainConfig(steps=200, batch_size=8))
    first = np.mean([r["loss_final"] for r in res.log_rows[:10]])
    last = np.mean([r["loss_final"] for r in res.log_rows[-10:]])
    assert last < 0.2 * first
    from gspeech.audio import encoder_features
    p = nx.params_from_store(res.params, trainable=lambda n: False)
    ok = sum(ctc_greedy_decode(nx.log_softmax(conformer_forward(cfg, p, encoder_features(waves[r.id]))
                                              .final_logits, -1), alpha) == r.text for r in recs)
    assert ok >= 14


def test_resume_replays_identically(tmp_path, tiny_data):
    waves, recs = tiny_data
    alpha = Alphabet.from_chars("abcde")
    tc = EncoderTrainConfig(steps=12, batch_size=4, num_parts=2)
    cold = train_encoder(toy(), waves, recs, alpha, tc, checkpoint_dir=tmp_path,
                         keep_epoch_checkpoints=True)
    ck = tmp_path / "encoder_epoch001.gspc"
    done = int(NamedTensorStore.load(ck)["optim.step"][0])
    assert 0 < done < 12
    resumed = train_encoder(toy(), waves, recs, alpha, tc, resume=ck)
    assert [r["loss_final"] for r in resumed.log_rows] == [r["loss_final"] for r in cold.log_rows[done:]]
    assert resumed.params.digest() == cold.params.digest()
