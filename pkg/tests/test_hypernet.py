import numpy as np
import pytest

from metainstruct.gradcore import Tensor, finite_difference_check, ops
from metainstruct.hypernet import HNetConfig, HyperNetwork, ProjectionVectors, make_delta
from metainstruct.metatrain import Trainer, TrainConfig, prepare_tasks
from metainstruct.seq2seq import LayerAddress, ModelConfig, Seq2SeqLM, make_batch, matrix_shape
from metainstruct.synth import synth_suite


def micro(d=8, **kw):
    base = dict(d_model=d, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, ff_dim=2 * d,
                max_encoder_positions=96, max_decoder_positions=24)
    base.update(kw)
    return ModelConfig(**base)


def build(cfg=None, hidden=6, seed=0, dtype=np.float64, **hkw):
    cfg = cfg or micro()
    model = Seq2SeqLM(cfg)
    hnet = HyperNetwork(cfg, HNetConfig(hidden_dim=hidden, **hkw))
    rng = np.random.default_rng(seed)
    params = model.init_params(rng, dtype).merged(hnet.init_params(rng, dtype))
    return model, hnet, params


def randomize_heads(hnet, params, rng, scale=0.3):
    for name in params:
        if name.startswith("hnet.ff.") and not name.endswith(("w1", "b1")):
            params[name].data[...] = rng.normal(0.0, scale, params[name].shape)


def vecs(m, n, rng, eta=None):
    g = lambda k: Tensor(rng.normal(size=k))  # noqa: E731
    return ProjectionVectors(g(m), g(m), g(n), g(n), Tensor([eta]) if eta is not None else g(1))


def test_delta_shape_and_rank_two():
    rng = np.random.default_rng(0)
    d = make_delta(vecs(7, 5, rng)).data
    assert d.shape == (7, 5)
    s = np.linalg.svd(d, compute_uv=False)
    assert s[2] < 1e-6 * s[0]


def test_closed_gate():
    rng = np.random.default_rng(1)
    v = vecs(6, 4, rng, eta=-20.0)
    bound = 1e-8 * max(np.abs(v.gamma.data).max(), np.abs(v.delta.data).max())
    assert np.abs(make_delta(v).data).max() < bound


def test_uniform_alpha_zero_delta_gives_equal_rows():
    rng = np.random.default_rng(2)
    v = vecs(5, 3, rng)
    v.alpha = Tensor(np.zeros(5))
    v.delta = Tensor(np.zeros(3))
    d = make_delta(v).data
    expected = 1 / (1 + np.exp(-v.eta.data[0])) / 5 * v.gamma.data
    assert np.allclose(d, expected[None, :].repeat(5, axis=0), atol=1e-14)


def test_gate_monotone():
    rng = np.random.default_rng(3)
    v = vecs(4, 4, rng)
    norms = []
    for eta in (2.0, 0.0, -2.0, -5.0, -10.0):
        v.eta = Tensor([eta])
        norms.append(np.linalg.norm(make_delta(v).data))
    assert all(a > b for a, b in zip(norms, norms[1:]))


def test_project_shapes_and_bias_at_origin():
    cfg = ModelConfig(d_model=64, n_heads=4, n_encoder_layers=1, n_decoder_layers=1, ff_dim=256,
                      max_encoder_positions=32, max_decoder_positions=32)
    hnet = HyperNetwork(cfg, HNetConfig(hidden_dim=8))
    params = hnet.init_params(np.random.default_rng(0))
    addr = LayerAddress("decoder", 0, "ff.fc2")
    assert matrix_shape(cfg, addr) == (64, 256)
    for name in params:
        if name.startswith(f"hnet.ff.{addr}.") and name.endswith(".bias"):
            params[name].data[...] = np.random.default_rng(1).normal(size=params[name].shape)
    v = hnet.project(params, Tensor(np.zeros(64, dtype=np.float32)), addr)
    assert v.alpha.shape == v.beta.shape == (64,)
    assert v.gamma.shape == v.delta.shape == (256,)
    assert v.eta.shape == (1,)
    assert np.array_equal(v.gamma.data, params[hnet.ff_name(addr, "gamma.bias")].data)
    with pytest.raises(KeyError):
        hnet.project(params, Tensor(np.zeros(64)), LayerAddress("encoder", 0, "ff.fc1"))


def test_head_parameters_scale_linearly():
    hnet = HyperNetwork(micro(d=16), HNetConfig(hidden_dim=4))
    for addr in hnet.targets:
        m, n = matrix_shape(hnet.main_config, addr)
        assert hnet.head_param_count(addr) == (2 * m + 2 * n + 1) * 4


def test_project_gradient_through_tanh():
    model, hnet, params = build()
    rng = np.random.default_rng(4)
    randomize_heads(hnet, params, rng)
    addr = hnet.targets[3]

    def f(h):
        v = hnet.project(params, h, addr)
        return ops.sum(make_delta(v) * Tensor(np.arange(np.prod(matrix_shape(hnet.main_config, addr)))
                                             .reshape(matrix_shape(hnet.main_config, addr)) / 10.0))

    assert finite_difference_check(f, Tensor(rng.normal(size=8)), eps=1e-6) < 1e-4


def test_encode_instruction_contract():
    model, hnet, params = build()
    h = hnet.encode_instruction(params, "Reverse the letters.")
    assert h.shape == (len(hnet.targets), 8)
    again = hnet.encode_instruction(params, "Reverse the letters.")
    assert np.array_equal(h.data, again.data)
    # distinct index tokens give distinct states per target
    assert len({tuple(np.round(r, 12)) for r in h.data}) == len(hnet.targets)


def test_fresh_heads_leave_model_unchanged():
    model, hnet, params = build()
    before = params.fingerprint()
    view = hnet.task_adapt(params, params, "Sort the letters.")
    b = make_batch(model.tok, ["abc"], ["cba"], "[Output]:")
    base = model.forward(params, b.src, b.tgt_in).data
    adapted = model.forward(view, b.src, b.tgt_in).data
    assert np.max(np.abs(base - adapted)) < 1e-12
    assert params.fingerprint() == before


def test_pipeline_gradient_into_hnet_lm():
    model, hnet, params = build(hidden=5)
    randomize_heads(hnet, params, np.random.default_rng(5), scale=0.5)
    b = make_batch(model.tok, ["ab"], ["ba"], "O:")
    name = "hnet.lm.encoder.layer0.self_attn.v_proj.weight"

    def f(w):
        view = dict(params)
        view[name] = w
        return model.loss(hnet.task_adapt(view, view, "Rev."), b)

    assert finite_difference_check(f, params[name], eps=1e-6, indices=list(range(0, 64, 5))) < 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        HNetConfig(hidden_dim=0)
    with pytest.raises(ValueError):
        HNetConfig(selector="middle")
    with pytest.raises(ValueError):
        HNetConfig(state_mode="first")


def test_last_state_mode_repeats_one_state():
    model, hnet, params = build(state_mode="last")
    h = hnet.encode_instruction(params, "x").data
    assert np.allclose(h, h[:1].repeat(h.shape[0], axis=0))


def test_training_makes_instructions_matter():
    cfg = micro(d=16, max_encoder_positions=192, max_decoder_positions=40)
    model = Seq2SeqLM(cfg)
    hnet = HyperNetwork(cfg, HNetConfig(hidden_dim=16))
    rng = np.random.default_rng(0)
    params = model.init_params(rng).merged(hnet.init_params(rng))
    tasks = synth_suite(0, n_tasks=2, instances_per_task=30, min_len=4, max_len=6)
    tcfg = TrainConfig(method="hnet", outer_lr=1e-3, batch_size=5, hnet_schedule="joint", epochs=5)
    train = prepare_tasks(tasks, tcfg)
    history = Trainer(model, params, train, tcfg, hnet=hnet).train()
    assert len(history) >= 50

    h = [hnet.encode_instruction(params, t.instruction).data for t in train]
    assert np.linalg.norm(h[0] - h[1]) > 0
    d = [hnet.deltas(params, t.instruction) for t in train]
    assert max(np.linalg.norm(d[0][a].data - d[1][a].data) for a in hnet.targets) > 0
