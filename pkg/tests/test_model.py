import numpy as np
import pytest

from qctc import autograd as ag
from qctc.ctc import Vocab
from qctc.errors import UsageError
from qctc.model import (
    EncoderOutput,
    ModelConfig,
    Seq2Seq,
    ar_decoder_forward,
    encoder_forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

VIN = Vocab(9)
VOUT = Vocab(7)


def make(kind="lqt_parallel", seed=0, **kw):
    vout = VOUT.with_bos_eos() if kind == "autoregressive" else VOUT
    base = dict(d_model=16, n_heads=4, n_enc_layers=2, n_dec_layers=2, n_queries=6, max_src_len=24, max_tgt_len=10)
    base.update(kw)
    return Seq2Seq(ModelConfig(VIN, vout, kind, **base), seed=seed)


def perturb(model, scale=0.5, seed=1):
    """Larger random weights so outputs depend visibly on inputs."""
    rng = np.random.default_rng(seed)
    model.params = {k: v + rng.normal(size=v.shape) * scale for k, v in model.params.items()}
    return model


def test_init_statistics():
    p = init_params(make().config, seed=3)
    assert np.all(p["enc.0.ln1.g"] == 1) and np.all(p["enc.0.ln1.b"] == 0)
    assert np.all(p["dec.query_pos_bias"] == 0)
    w = np.concatenate([p[k].ravel() for k in p if k.endswith(".w1") or k.endswith(".wq")])
    assert abs(w.std() - 0.02) < 0.002


def test_init_is_seeded():
    a, b, c = (init_params(make().config, s) for s in (1, 1, 2))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["enc.tok_emb"], c["enc.tok_emb"])


def test_encoder_determinism_and_shape():
    m = perturb(make())
    s1 = m.encode([1, 2, 3, 4, 5]).states
    s2 = m.encode([1, 2, 3, 4, 5]).states
    assert s1.shape == (5, 16)
    assert np.array_equal(s1, s2)


def test_encoder_uses_positions():
    m = perturb(make())
    a = m.encode([1, 2, 3, 4]).states
    b = m.encode([4, 3, 2, 1]).states
    # token 1 at position 0 vs position 3
    assert not np.allclose(a[0], b[3])


def test_encoder_batch_padding_is_invisible():
    m = perturb(make())
    single = m.encode([3, 1, 4]).states
    batched = m.encode_batch([[3, 1, 4], [1, 5, 8, 2, 6, 5]])[0].states
    np.testing.assert_allclose(single, batched, atol=1e-12)


def test_source_length_limits():
    m = make(max_src_len=4)
    with pytest.raises(UsageError):
        m.encode([1, 2, 3, 4, 5])
    with pytest.raises(UsageError):
        m.encode([])


def test_parallel_grid_shape_and_single_pass():
    m = perturb(make())
    for src in ([1, 2], [1, 2, 3, 4, 5, 6, 7, 8]):
        enc = m.encode(src)
        before = m.counters.passes
        grid = m.decode_parallel(enc)
        assert grid.shape == (6, VOUT.size)
        assert m.counters.passes == before + 1


def test_zeroed_cross_attention_ignores_encoder():
    m = perturb(make())
    for k in m.params:
        if ".cross." in k:
            m.params[k] = np.zeros_like(m.params[k])
    g1 = m.decode_parallel(m.encode([1, 2, 3]))
    g2 = m.decode_parallel(m.encode([7, 8, 2, 2, 5]))
    assert np.array_equal(g1, g2)


def test_queries_attend_bidirectionally():
    m = perturb(make())
    enc = m.encode([1, 2, 3])
    g1 = m.decode_parallel(enc)
    m.params["dec.query_tokens"][-1] += np.random.default_rng(0).normal(size=16)  # not a constant shift, which LayerNorm removes
    g2 = m.decode_parallel(enc)
    assert not np.allclose(g1[0], g2[0])


def test_pos_bias_shapes():
    assert make("lqt_parallel").params["dec.query_pos_bias"].shape == (6, 6)
    assert make("encoder_output_parallel").params["dec.query_pos_bias"].shape == (24, 24)


def test_encoder_output_grid_has_l_rows_and_deterministic():
    m = perturb(make("encoder_output_parallel"))
    enc = m.encode([1, 2, 3, 4, 5])
    g = m.decode_parallel_encoder_input(enc)
    assert g.shape == (5, VOUT.size)
    assert np.array_equal(g, m.decode_parallel_encoder_input(enc))


def test_decoder_flops_grow_with_source_for_encoder_input_only():
    lqt = make("lqt_parallel")
    eo = make("encoder_output_parallel")
    src = list(np.arange(20) % 8 + 1)  # L = 20 > N = 6
    for m in (lqt, eo):
        m.counters.reset()
        m.decode_grid(m.encode(src))
    assert eo.counters.flops > lqt.counters.flops
    lqt.counters.reset()
    lqt.decode_grid(lqt.encode(src[:3]))
    short = lqt.counters.flops
    lqt.counters.reset()
    lqt.decode_grid(lqt.encode(src))
    assert lqt.counters.flops > short  # cross-attention still reads L keys


def test_kind_mismatch_is_usage_error():
    m = make("lqt_parallel")
    enc = m.encode([1, 2])
    with pytest.raises(UsageError):
        m.decode_parallel_encoder_input(enc)
    with pytest.raises(UsageError):
        m.decode_ar_step(enc, [0])


def test_ar_step_depends_on_last_prefix_token_and_counts_passes():
    m = perturb(make("autoregressive"))
    bos = m.config.vocab_out.bos_id
    enc = m.encode([1, 2, 3])
    m.counters.reset()
    a = m.decode_ar_step(enc, [bos, 1, 2])
    b = m.decode_ar_step(enc, [bos, 1, 3])
    assert m.counters.passes == 2
    assert not np.allclose(a, b)
    assert np.array_equal(a, m.decode_ar_step(enc, [bos, 1, 2]))
    with pytest.raises(UsageError):
        m.decode_ar_step(enc, [1, 2])


def test_ar_decoder_is_causal():
    m = perturb(make("autoregressive"))
    cfg = m.config
    P = m.tensors()
    with ag.no_grad():
        enc, mask = encoder_forward(P, cfg, np.array([[1, 2, 3]]), [3])
        bos = cfg.vocab_out.bos_id
        x = ar_decoder_forward(P, cfg, enc, mask, np.array([[bos, 1, 2, 3]])).data
        y = ar_decoder_forward(P, cfg, enc, mask, np.array([[bos, 1, 5, 6]])).data
    np.testing.assert_allclose(x[0, :2], y[0, :2], atol=1e-12)
    assert not np.allclose(x[0, 2:], y[0, 2:])


def test_ar_batched_prefixes_match_single():
    m = perturb(make("autoregressive"))
    bos = m.config.vocab_out.bos_id
    enc = m.encode([4, 4, 2])
    both = m.ar_logits(enc, [[bos, 1], [bos, 2]])
    np.testing.assert_allclose(both[1], m.decode_ar_step(enc, [bos, 2]), atol=1e-12)


@pytest.mark.parametrize("kind", ["lqt_parallel", "encoder_output_parallel", "autoregressive"])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, kind):
    m = perturb(make(kind, seed=4))
    path = save_checkpoint(m, tmp_path / "m.json")
    back = load_checkpoint(path)
    assert back.config == m.config
    assert list(back.params) == list(m.params)
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()
    save_checkpoint(back, tmp_path / "again.json")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "again.bin").read_bytes()


def test_bad_checkpoint_is_usage_error(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(UsageError):
        load_checkpoint(p)


def test_config_validation():
    with pytest.raises(UsageError):
        ModelConfig(VIN, VOUT, "autoregressive")
    with pytest.raises(UsageError):
        ModelConfig(VIN, VOUT, "lqt_parallel", d_model=10, n_heads=4)
    with pytest.raises(UsageError):
        ModelConfig(VIN, VOUT, "mystery")


def test_encoder_output_type():
    assert EncoderOutput(np.zeros((3, 4))).src_len == 3
