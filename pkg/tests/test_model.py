import dataclasses

import numpy as np
import pytest

from ssmd.layers import sinusoidal_pe
from ssmd.model import (
    ConformerBlock,
    ConvFrontend,
    Encoder,
    ModelConfig,
    OutputLayer,
    SDBlock,
    build_model,
    model_forward,
)
from ssmd.numerics import NumericsError, Tensor, grad_check, ops

TOY = dict(n_mels=8, d_model=16, d_memory=12, d_ivec=4, n_speakers=2, t_chunk=20, conv_channels=2,
           enc_layers=1, dec_layers=2, heads=2, memory_rows=4, conv_kernel=5, combine_width=8, combine_heads=2,
           n_experts=2, slots_per_expert=2)


def toy_cfg(**kw):
    args = dict(TOY)
    args.update(kw)
    return ModelConfig(**args)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def weighted(y, seed=0):
    return ops.sum(ops.mul(y, np.random.default_rng(seed).standard_normal(y.shape)))


def toy_inputs(cfg, seed=0, B=None):
    rng = np.random.default_rng(seed)
    lead = () if B is None else (B,)
    X = rng.standard_normal((*lead, cfg.t_chunk, cfg.n_mels))
    S = (rng.random((*lead, cfg.n_speakers, cfg.t_chunk)) > 0.5).astype(float)
    iv = rng.standard_normal((*lead, cfg.n_speakers, cfg.d_ivec))
    return X, S, iv


# -- config ----------------------------------------------------------------------


def test_config_validation_and_parsing():
    with pytest.raises(ValueError):
        ModelConfig(d_model=64, d_memory=40, d_ivec=16)
    with pytest.raises(ValueError):
        ModelConfig(ssmoe_layers=(7,))
    cfg = ModelConfig.from_dict({"ssmoe_layers": "4, 6", "dropout": "0.2", "literal_combine": "true",
                                 "expert_hidden": "none", "t_chunk": "64"})
    assert cfg.ssmoe_layers == (4, 6) and cfg.dropout == 0.2 and cfg.literal_combine and cfg.t_chunk == 64
    with pytest.raises(KeyError):
        ModelConfig.from_dict({"bogus": 1})
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_paper_config_dims():
    cfg = ModelConfig.paper()
    assert (cfg.d_model, cfg.d_memory, cfg.d_ivec, cfg.enc_layers, cfg.dec_layers) == (512, 384, 128, 6, 6)


# -- front-end -------------------------------------------------------------------


def test_frontend_shape_and_time_preserved():
    fe = ConvFrontend(40, 4, 32, seed=0)
    assert fe(T(np.random.default_rng(0).standard_normal((2, 13, 40)))).shape == (2, 13, 32)


def test_frontend_zero_input_gives_bias_rows():
    fe = ConvFrontend(10, 3, 8, seed=1)
    fe.proj.bias.data[...] = np.arange(8.0)
    out = fe(T(np.zeros((1, 6, 10)))).data[0]
    np.testing.assert_allclose(out, np.tile(np.arange(8.0), (6, 1)), atol=1e-15)


def test_frontend_errors():
    with pytest.raises(ValueError):
        ConvFrontend(3, 2, 4)
    with pytest.raises(NumericsError):
        ConvFrontend(8, 2, 4)(T(np.zeros((1, 5, 9))))


def test_frontend_gradcheck():
    fe = ConvFrontend(6, 2, 4, seed=2)
    fe.conv1_b.data[...] = 0.1
    fe.conv2_b.data[...] = -0.1
    X = T(np.random.default_rng(3).standard_normal((1, 4, 6)), grad=True)
    assert grad_check(lambda ps: weighted(fe(X)), fe.parameters() + [X], max_coords=15) < 1e-4


# -- encoder ---------------------------------------------------------------------


def test_encoder_shape_and_batch_independence():
    cfg = toy_cfg(enc_layers=2)
    enc = Encoder(cfg)
    x = np.random.default_rng(4).standard_normal((3, 9, 16))
    y = enc(T(x)).data
    assert y.shape == x.shape
    perm = [2, 0, 1]
    np.testing.assert_allclose(enc(T(x[perm])).data, y[perm], atol=1e-12)


def test_encoder_short_sequence_pads():
    enc = Encoder(toy_cfg(conv_kernel=15))
    assert enc(T(np.random.default_rng(5).standard_normal((1, 3, 16)))).shape == (1, 3, 16)


def test_mhsa_rows_sum_to_one():
    blk = ConformerBlock(16, 4, 4, 5, seed=0, name="encoder.L1")
    blk(T(np.random.default_rng(6).standard_normal((2, 7, 16))))
    w = blk.mhsa._weights
    assert w.shape == (2, 4, 7, 7)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_conformer_block_gradcheck():
    blk = ConformerBlock(8, 2, 2, 3, seed=1, name="encoder.L1")
    x = T(np.random.default_rng(7).standard_normal((1, 5, 8)), grad=True)
    assert grad_check(lambda ps: weighted(blk(x)), blk.parameters() + [x], max_coords=10) < 1e-4


# -- decoder block ---------------------------------------------------------------


def sd_inputs(seed=8, N=3, Tn=6, d=16):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((N, d)), rng.standard_normal((N, d)), rng.standard_normal((Tn, d)),
            sinusoidal_pe(Tn, d))


@pytest.mark.parametrize("beta,moved", [(1.0, "E_A"), (0.0, "E_D")])
def test_fusion_endpoints(beta, moved):
    blk = SDBlock(toy_cfg(), 1)
    blk.beta1.value.data[...] = beta
    E_D, E_A, _, _ = sd_inputs()
    q = blk.fused_query1(T(E_D), T(E_A)).data
    bump = np.random.default_rng(9).standard_normal(E_D.shape)
    if moved == "E_A":
        q2 = blk.fused_query1(T(E_D), T(E_A + bump)).data
    else:
        q2 = blk.fused_query1(T(E_D + bump), T(E_A)).data
    np.testing.assert_array_equal(q, q2)


def test_sd_block_speaker_equivariance():
    for placement in ((), (1,)):
        blk = SDBlock(toy_cfg(ssmoe_layers=placement), 1)
        E_D, E_A, E_enc, pe = sd_inputs()
        perm = [2, 0, 1]
        a = blk(T(E_D), T(E_A), T(E_enc), pe).data
        b = blk(T(E_D[perm]), T(E_A[perm]), T(E_enc), pe).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)


@pytest.mark.parametrize("placement", [(), (1,)])
def test_sd_block_gradcheck(placement):
    blk = SDBlock(toy_cfg(ssmoe_layers=placement), 1)
    blk.eval()
    E_D, E_A, E_enc, pe = sd_inputs(N=2, Tn=4)
    E_D, E_A, E_enc = T(E_D, grad=True), T(E_A, grad=True), T(E_enc, grad=True)
    err = grad_check(lambda ps: weighted(blk(E_D, E_A, E_enc, pe)), blk.parameters() + [E_D, E_A, E_enc],
                     max_coords=6)
    assert err < 1e-4


# -- output layer ----------------------------------------------------------------


def test_output_zero_weights_half():
    out = OutputLayer(8, 5)
    out.proj.weight.data[...] = 0
    Y = out(T(np.random.default_rng(10).standard_normal((3, 8)))).data
    np.testing.assert_array_equal(Y, 0.5)


def test_output_loop_oracle_and_range():
    out = OutputLayer(4, 6, seed=3)
    out.proj.bias.data[...] = np.random.default_rng(11).standard_normal(6)
    E = np.random.default_rng(12).standard_normal((2, 4))
    Y = out(T(E)).data
    W, b = out.proj.weight.data, out.proj.bias.data
    for n in range(2):
        for t in range(6):
            z = sum(E[n, k] * W[k, t] for k in range(4)) + b[t]
            assert abs(Y[n, t] - 1 / (1 + np.exp(-z))) < 1e-12
    assert ((Y > 0) & (Y < 1)).all()
    with pytest.raises(NumericsError):
        out(T(np.zeros((2, 5))))


def test_output_layer_gradcheck():
    out = OutputLayer(4, 3, seed=4)
    E = T(np.random.default_rng(13).standard_normal((2, 4)), grad=True)
    assert grad_check(lambda ps: weighted(out(E)), out.parameters() + [E]) < 1e-4


# -- full model ------------------------------------------------------------------


def test_parameter_naming_scheme():
    names = [n for n, _ in build_model(toy_cfg(ssmoe_layers=(2,))).named_parameters()]
    prefixes = {n.split(".")[0] for n in names}
    assert prefixes == {"frontend", "encoder", "dim", "memory", "decoder", "output"}
    for expected in ("encoder.L1.mhsa.q.weight", "dim.b3.w_k2.weight", "memory.bank", "decoder.ED",
                     "decoder.L1.ffn.w_in.weight", "decoder.L2.ssmoe.phi", "decoder.L2.ssmoe.shared.w_out.bias",
                     "decoder.L2.ssmoe.expert2.w_in.weight", "decoder.L2.ssmoe.combine.proj.weight",
                     "output.proj.weight"):
        assert expected in names


def test_model_forward_shape_deterministic_batched():
    cfg = toy_cfg()
    m = build_model(cfg)
    X, S, iv = toy_inputs(cfg)
    a = model_forward(X, S, iv, m).array
    assert a.shape == (2, 20) and ((a > 0) & (a < 1)).all()
    np.testing.assert_array_equal(a, model_forward(X, S, iv, build_model(cfg)).array)
    Xb, Sb, ivb = toy_inputs(cfg, seed=1, B=3)
    batched = m(Xb, Sb, ivb).Y.data
    np.testing.assert_allclose(batched[1], m(Xb[1], Sb[1], ivb[1]).Y.data, atol=1e-12)


def test_model_rejects_bad_shapes():
    cfg = toy_cfg()
    m = build_model(cfg)
    X, S, iv = toy_inputs(cfg)
    with pytest.raises(NumericsError):
        m(X[:10], S[:, :10], iv)
    with pytest.raises(NumericsError):
        m(X, S[:1], iv[:1])


def test_errors_carry_module_tag():
    cfg = toy_cfg()
    m = build_model(cfg)
    X, S, iv = toy_inputs(cfg)
    with pytest.raises(NumericsError, match=r"\[frontend\]"):
        m(X[:, :7], S, iv)


def test_speaker_permutation_equivariance():
    cfg = toy_cfg(n_speakers=3, ssmoe_layers=(2,))
    m = build_model(cfg)
    X, S, iv = toy_inputs(cfg, seed=2)
    perm = [1, 2, 0]
    a = m(X, S, iv).Y.data
    b = m(X, S[perm], iv[perm]).Y.data
    np.testing.assert_allclose(b, a[perm], atol=1e-9)


def test_end_to_end_gradcheck_conv_weights():
    cfg = toy_cfg(dec_layers=1)
    m = build_model(cfg)
    m.eval()
    X, S, iv = toy_inputs(cfg, seed=3)
    w = [m.frontend.conv1_w, m.frontend.conv2_w]
    assert grad_check(lambda ps: weighted(m(X, S, iv).Y), w, max_coords=10) < 1e-4


def test_padded_speaker_slot_uses_memory_mean():
    cfg = toy_cfg()
    m = build_model(cfg)
    X, S, iv = toy_inputs(cfg, seed=4)
    S[1] = 0
    iv[1] = 0
    E_A = m(X, S, iv).extras["E_A"]
    np.testing.assert_allclose(E_A[1, :12], m.memory.bank.data.mean(axis=0), atol=1e-15)
    assert not E_A[1, 12:].any()


def baseline_param_count(c: ModelConfig) -> int:
    D, C, K = c.d_model, c.conv_channels, c.conv_kernel
    f_out = (c.n_mels - 1) // 2 + 1
    front = 9 * C + C + 9 * C * C + C + f_out * C * D + D
    ff = 2 * D + D * 4 * D + 4 * D + 4 * D * D + D
    mhsa = 2 * D + 4 * D * D + 3 * D
    conv = 2 * D + 2 * D * D + 2 * D + K * D + D + D * D + D
    enc = c.enc_layers * (2 * ff + mhsa + conv + 2 * D)
    dim = c.dim_blocks * (2 * D * D + 3 * c.d_memory * D)
    mem = c.memory_rows * c.d_memory
    sd = 3 + 11 * D * D + 20 * D  # 8 biased and 3 bias-free projections, 7 norms (2 without shift)
    geglu = D * 4 * D + 4 * D + 2 * D * D + D
    dec = D + c.dec_layers * (sd + geglu) + 2 * D
    out = D * c.t_chunk + c.t_chunk
    return front + enc + dim + mem + dec + out


@pytest.mark.parametrize("cfg", [toy_cfg(), ModelConfig()])
def test_parameter_count_matches_analytic_baseline(cfg):
    assert build_model(cfg).num_parameters() == baseline_param_count(cfg)


def test_moe_hyperparameters_irrelevant_without_placement():
    a = build_model(toy_cfg(n_experts=6, slots_per_expert=4))
    b = build_model(toy_cfg(n_experts=2, slots_per_expert=1, combine_width=32))
    sa, sb = a.state_dict(), b.state_dict()
    assert list(sa) == list(sb) and all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_moe_placement_leaves_other_inits_untouched():
    base = build_model(toy_cfg()).state_dict()
    moe = build_model(toy_cfg(ssmoe_layers=(2,))).state_dict()
    for k, v in base.items():
        if not k.startswith("decoder.L2.ffn"):
            np.testing.assert_array_equal(moe[k], v)


def test_replace_keeps_dataclass_semantics():
    cfg = toy_cfg()
    assert dataclasses.replace(cfg, ssmoe_layers=[2, 1]).ssmoe_layers == (1, 2)
