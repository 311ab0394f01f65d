import math

import numpy as np
import pytest

from metainstruct.gradcore import ContractError, DimensionError, Tensor, finite_difference_check
from metainstruct.seq2seq import (Batch, LayerAddress, ModelConfig, Seq2SeqLM, apply_delta, list_target_layers,
                                  make_batch, matrix_shape)
from metainstruct.tokenizer import ByteTokenizer


def tiny(**kw):
    base = dict(d_model=16, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, ff_dim=32,
                max_encoder_positions=64, max_decoder_positions=32)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def lm():
    model = Seq2SeqLM(tiny())
    return model, model.init_params(np.random.default_rng(0), dtype=np.float64)


def test_tokenizer_round_trip():
    tok = ByteTokenizer()
    assert tok.decode(tok.encode("héllo, wörld")) == "héllo, wörld"
    assert tok.decode([tok.BOS, *tok.encode("ab"), tok.EOS]) == "ab"
    with pytest.raises(IndexError):
        tok.index_token(tok.n_index_tokens)


def test_make_batch_layout():
    tok = ByteTokenizer()
    b = make_batch(tok, ["xy", "z"], ["ab", "c"], "P:")
    prefix = tok.encode("P:")
    assert b.tgt_in[0].tolist() == [tok.BOS, *prefix, *tok.encode("ab")]
    assert b.tgt_out[0].tolist() == [Batch.IGNORE] * 2 + tok.encode("ab") + [tok.EOS]
    assert b.tgt_out[1, -1] == Batch.IGNORE
    assert b.src[1].tolist() == [tok.encode("z")[0], tok.PAD]


def test_initial_loss_near_log_vocab(lm):
    model, params = lm
    tok = model.tok
    b = make_batch(tok, ["hello world"] * 4, ["dlrow olleh"] * 4, "[Output]:")
    assert abs(model.loss(params, b).item() - math.log(tok.vocab_size)) < 0.5


def test_forward_shape(lm):
    model, params = lm
    b = make_batch(model.tok, ["abc", "de"], ["x", "yz"], "")
    assert model.forward(params, b.src, b.tgt_in).shape == (2, b.tgt_in.shape[1], model.config.vocab_size)


def test_over_length_inputs_raise(lm):
    model, params = lm
    with pytest.raises(ContractError):
        model.encode(params, np.zeros((1, 65), dtype=np.int64))
    mem, mask = model.encode(params, np.zeros((1, 4), dtype=np.int64))
    with pytest.raises(ContractError):
        model.decode_hidden(params, mem, mask, np.zeros((1, 33), dtype=np.int64))


def test_padding_does_not_change_predictions(lm):
    model, params = lm
    tok = model.tok
    short = np.array([tok.encode("abc")])
    padded = np.array([tok.encode("abc") + [tok.PAD] * 5])
    tgt = np.array([[tok.BOS, *tok.encode("q")]])
    a = model.forward(params, short, tgt).data
    b = model.forward(params, padded, tgt).data
    assert np.allclose(a, b, atol=1e-10)


def test_decoder_is_causal(lm):
    model, params = lm
    tok = model.tok
    src = np.array([tok.encode("abc")])
    t1 = np.array([[tok.BOS, 10, 20, 30]])
    t2 = np.array([[tok.BOS, 10, 99, 98]])
    a = model.forward(params, src, t1).data
    b = model.forward(params, src, t2).data
    assert np.allclose(a[:, :2], b[:, :2], atol=1e-10)
    assert not np.allclose(a[:, 2:], b[:, 2:])


def test_model_gradient_matches_finite_differences(lm):
    model, params = lm
    b = make_batch(model.tok, ["ab c", "d"], ["cb", "d d"], "O:")
    name = "main.decoder.layer0.cross_attn.v_proj.weight"

    def f(w):
        view = dict(params)
        view[name] = w
        return model.loss(view, b)

    idx = np.random.default_rng(0).choice(params[name].size, size=12, replace=False).tolist()
    assert finite_difference_check(f, params[name], eps=1e-6, indices=idx) < 1e-4


def test_greedy_decode_respects_budget(lm):
    model, params = lm
    tok = model.tok
    outs = model.greedy_decode(params, np.array([tok.encode("abc")]), tok.encode("O:"), max_len=6)
    assert len(outs) == 1 and len(outs[0]) <= 4
    with pytest.raises(ContractError):
        model.greedy_decode(params, np.array([tok.encode("abc")]), tok.encode("O:"), max_len=2)


def test_target_layer_enumeration():
    cfg = tiny(n_encoder_layers=2, n_decoder_layers=3)
    assert len(list_target_layers(cfg, "encoder")) == 2 * 6
    assert len(list_target_layers(cfg, "decoder")) == 3 * 10
    assert len(list_target_layers(cfg, "both")) == 42
    addr = LayerAddress("decoder", 1, "ff.fc1")
    assert LayerAddress.parse(str(addr)) == addr
    assert matrix_shape(cfg, addr) == (cfg.ff_dim, cfg.d_model)
    with pytest.raises(ValueError):
        list_target_layers(cfg, "middle")


def test_apply_delta_leaves_base_untouched(lm):
    model, params = lm
    addr = LayerAddress("decoder", 0, "self_attn.q_proj")
    before = params.fingerprint()
    d = Tensor(np.ones(matrix_shape(model.config, addr)))
    view = apply_delta(params, {addr: d})
    assert np.allclose(view[addr.param_name()].data, params[addr.param_name()].data + 1)
    assert params.fingerprint() == before
    with pytest.raises(DimensionError):
        apply_delta(params, {addr: Tensor(np.ones((3, 3)))})
    with pytest.raises(KeyError):
        apply_delta(params, {LayerAddress("decoder", 7, "ff.fc1"): d})


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(ff_dim=0)


def test_sequence_losses_match_batch_loss(lm):
    model, params = lm
    b = make_batch(model.tok, ["a", "b"], ["xyz", "xyz"], "")
    per = model.sequence_losses(params, b)
    assert abs(per.mean() - model.loss(params, b).item()) < 1e-10


def test_batch_permutation_permutes_logits(lm):
    model, params = lm
    b = make_batch(model.tok, ["abc", "de", "fghi"], ["x", "yz", "w"], "O:")
    perm = [2, 0, 1]
    a = model.forward(params, b.src, b.tgt_in).data
    p = model.forward(params, b.src[perm], b.tgt_in[perm]).data
    assert np.allclose(a[perm], p, atol=1e-12)


def test_single_row_loss_matches_batched_row(lm):
    model, params = lm
    enc, out = ["abc", "de", "fghi"], ["x", "yz", "wvu"]
    per = model.sequence_losses(params, make_batch(model.tok, enc, out, "O:"))
    for k in range(3):
        alone = model.loss(params, make_batch(model.tok, [enc[k]], [out[k]], "O:")).item()
        assert abs(alone - per[k]) < 1e-6


def test_one_token_budget(lm):
    model, params = lm
    prefix = model.tok.encode("O:")
    outs = model.greedy_decode(params, np.array([model.tok.encode("abc")]), prefix, max_len=len(prefix) + 1)
    assert len(outs[0]) <= 1


def test_overfit_one_pair_decodes_it():
    from metainstruct.gradcore import adam
    from metainstruct.metatrain import standard_step
    model = Seq2SeqLM(tiny(d_model=32, ff_dim=64))
    params = model.init_params(np.random.default_rng(0))
    b = make_batch(model.tok, ["h e l l o"], ["o l l e h"], "[Output]:")
    opt = adam(3e-3)
    for _ in range(200):
        standard_step(model, params, [b], opt)
    prefix = model.tok.encode("[Output]:")
    out = model.greedy_decode(params, b.src, prefix, max_len=30)
    assert model.tok.decode(out[0]) == "o l l e h"


def test_delta_add_then_subtract_recovers_base(lm):
    model, params = lm
    addr = LayerAddress("decoder", 0, "ff.fc1")
    d = Tensor(np.random.default_rng(1).normal(size=matrix_shape(model.config, addr)))
    back = apply_delta(apply_delta(params, {addr: d}), {addr: Tensor(-d.data)})
    b = make_batch(model.tok, ["abc"], ["cba"], "O:")
    assert np.allclose(model.forward(back, b.src, b.tgt_in).data, model.forward(params, b.src, b.tgt_in).data,
                       atol=1e-6)


def test_zero_delta_is_identity(lm):
    model, params = lm
    deltas = {a: Tensor(np.zeros(matrix_shape(model.config, a))) for a in list_target_layers(model.config, "both")}
    b = make_batch(model.tok, ["abc"], ["cba"], "O:")
    assert np.array_equal(model.forward(apply_delta(params, deltas), b.src, b.tgt_in).data,
                          model.forward(params, b.src, b.tgt_in).data)


def test_delta_gradient_matches_finite_differences(lm):
    model, params = lm
    addr = LayerAddress("decoder", 0, "self_attn.o_proj")
    b = make_batch(model.tok, ["ab c"], ["c ba"], "O:")
    f = lambda d: model.loss(apply_delta(params, {addr: d}), b)  # noqa: E731
    d0 = Tensor(np.random.default_rng(2).normal(0.0, 0.1, matrix_shape(model.config, addr)))
    assert finite_difference_check(f, d0, eps=1e-6, indices=list(range(0, 256, 17))) < 1e-4


# -- segment positions ----------------------------------------------------------------------

def test_segment_positions_ignore_instruction_length():
    model = Seq2SeqLM(tiny(encoder_positions="segment"))
    params = model.init_params(np.random.default_rng(0), dtype=np.float64)
    tok = model.tok
    short, long = tok.encode("ab:"), tok.encode("abcdefg:")
    inp = tok.encode("xyz")
    src = np.array([short + inp + [tok.PAD] * 5, long + inp])
    emb = model._embed(params, src, "encoder", np.array([len(short), len(long)])).data
    assert np.allclose(emb[0, len(short):len(short) + 3], emb[1, len(long):], atol=1e-12)


def test_segment_mode_gradient_and_validation():
    model = Seq2SeqLM(tiny(encoder_positions="segment"))
    params = model.init_params(np.random.default_rng(0), dtype=np.float64)
    b = make_batch(model.tok, ["ab:cd", "abcd:e"], ["dc", "e"], "O:", input_starts=[3, 5])
    name = "main.encoder.input_pos"

    def f(w):
        view = dict(params)
        view[name] = w
        return model.loss(view, b)

    assert finite_difference_check(f, params[name], eps=1e-6, indices=list(range(0, 16 * 4, 3))) < 1e-4
    with pytest.raises(ContractError):
        model.encode(params, b.src, starts=np.array([99, 0]))
    with pytest.raises(ValueError):
        ModelConfig(encoder_positions="rotary")
