import numpy as np
import pytest
from pmodlab import numerics
from pmodlab.models import (Model, ModelConfig, TokenSequence, KvCache, CheckpointError, Modality, CHECKPOINT_MAGIC,
                            block_forward, layer_params, apply_rope, cross_entropy)


def _fd_check(model, seq, positions, labels, rel_error, per_tensor = 12, seed = 0):
    """Compare analytic gradients with central differences on a few entries of every tensor."""
    loss, dlogits, _, acts = model.loss(seq, positions, labels)
    grads = model.backward(acts, dlogits)
    rng = np.random.default_rng(seed)
    for name, value in model.params.items():
        idx = rng.choice(value.size, size = min(per_tensor, value.size), replace = False)
        def f(v, name = name):
            return model.with_params({**model.params, name: v}).loss(seq, positions, labels)[0]
        numeric = numerics.fd_grad(f, value, indices = idx)
        assert rel_error(grads[name].flat[idx], numeric.flat[idx]) < 1e-4, name
        assert np.abs(grads[name].flat[idx] - numeric.flat[idx]).max() < 1e-6, name


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_layers = 2, d_model = 10, n_heads = 4, d_ff = 8, vocab_size = 4, max_seq = 8)
    with pytest.raises(ValueError):
        ModelConfig(n_layers = 0, d_model = 8, n_heads = 2, d_ff = 8, vocab_size = 4, max_seq = 8)
    with pytest.raises(ValueError):
        ModelConfig(n_layers = 1, d_model = 6, n_heads = 2, d_ff = 8, vocab_size = 4, max_seq = 8)
    assert ModelConfig(n_layers = 1, d_model = 16, n_heads = 4, d_ff = 8, vocab_size = 4, max_seq = 8).head_dim == 4


def test_token_sequence_invariants():
    seq = TokenSequence.build(np.zeros((3, 4)), np.zeros((2, 4)), start = 5)
    assert (seq.n_vision, seq.n_text, len(seq)) == (3, 2, 5)
    np.testing.assert_array_equal(seq.positions, np.arange(5, 10))
    with pytest.raises(ValueError):
        TokenSequence(np.zeros((2, 4)), [Modality.TEXT, Modality.VISION], [0, 1])
    with pytest.raises(ValueError):
        TokenSequence(np.zeros((2, 4)), [0, 1], [1, 1])
    with pytest.raises(ValueError):
        TokenSequence(np.zeros((2, 4)), [0, 1, 1], [0, 1, 2])
    sub = seq.subset(np.array([0, 2, 4]))
    np.testing.assert_array_equal(sub.positions, [5, 7, 9])


def test_init_is_deterministic(tiny_config):
    a, b = Model.init(tiny_config, 3), Model.init(tiny_config, 3)
    assert list(a.params) == list(b.params)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert not np.array_equal(a.params['lm_head'], Model.init(tiny_config, 4).params['lm_head'])


def test_zero_params_give_zero_logits(tiny_config):
    model = Model.init(tiny_config, 0)
    model = model.with_params({k: np.zeros_like(v) for k, v in model.params.items()})
    logits, _ = model.forward(TokenSequence.build(np.zeros((0, 16)), np.ones((1, 16))))
    np.testing.assert_array_equal(logits, np.zeros((1, tiny_config.vocab_size)))


def test_lm_head_permutation(tiny_config, make_seq):
    model = Model.init(tiny_config, 1)
    seq = make_seq(16, 4, 3, seed = 1)
    perm = np.random.default_rng(0).permutation(tiny_config.vocab_size)
    logits, _ = model.forward(seq)
    permuted, _ = model.with_params({**model.params, 'lm_head': model.params['lm_head'][perm]}).forward(seq)
    np.testing.assert_allclose(permuted, logits[:, perm], atol = 1e-12)


def test_forward_is_causal(tiny_config, make_seq):
    model = Model.init(tiny_config, 2)
    seq = make_seq(16, 5, 4, seed = 2)
    logits, _ = model.forward(seq)
    emb = seq.embeddings.copy()
    emb[6:] += np.random.default_rng(9).normal(size = (3, 16))
    changed, _ = model.forward(seq.with_embeddings(emb))
    np.testing.assert_allclose(changed[:6], logits[:6], atol = 1e-12)
    assert not np.allclose(changed[6:], logits[6:])


def test_rope_inverse_and_position_zero():
    x = np.random.default_rng(0).normal(size = (3, 2, 8))
    pos = np.array([0, 4, 9])
    back = apply_rope(apply_rope(x, pos, 10000.0), pos, 10000.0, inverse = True)
    np.testing.assert_allclose(back, x, atol = 1e-12)
    np.testing.assert_allclose(apply_rope(x, pos, 10000.0)[0], x[0], atol = 1e-15)


def test_cross_entropy_uniform():
    loss, dlogits = cross_entropy(np.zeros((3, 4)), [2], [1])
    assert loss == pytest.approx(np.log(4))
    np.testing.assert_allclose(dlogits[2], [0.25, -0.75, 0.25, 0.25])
    assert np.all(dlogits[:2] == 0)


def test_backward_matches_finite_differences(tiny_config, make_seq, rel_error):
    model = Model.init(tiny_config, 5)
    seq = make_seq(16, 4, 3, seed = 5)
    _fd_check(model, seq, [4, 6], [3, 17], rel_error)


def test_backward_is_linear_in_upstream(tiny_config, make_seq):
    model = Model.init(tiny_config, 6)
    seq = make_seq(16, 3, 2, seed = 6)
    _, acts = model.forward(seq)
    zero = model.backward(acts, np.zeros((5, tiny_config.vocab_size)))
    assert all(np.all(g == 0) for g in zero.values())
    up = np.random.default_rng(1).normal(size = (5, tiny_config.vocab_size))
    one, two = model.backward(acts, up), model.backward(acts, 2 * up)
    for name in one:
        np.testing.assert_allclose(two[name], 2 * one[name], rtol = 1e-12, atol = 1e-14)
    with pytest.raises(ValueError):
        model.backward(acts, np.zeros((4, tiny_config.vocab_size)))


def test_forward_errors(tiny_config):
    model = Model.init(tiny_config, 0)
    with pytest.raises(ValueError):
        model.forward(TokenSequence.build(np.zeros((60, 16)), np.zeros((5, 16))))
    broken = model.with_params({**model.params, 'layers.0.wq': np.full((16, 16), np.nan)})
    with pytest.raises(ValueError):
        broken.forward(TokenSequence.build(np.zeros((1, 16)), np.zeros((1, 16))))
    with pytest.raises(ValueError):
        model.forward(TokenSequence.build(np.zeros((1, 16)), np.zeros((1, 16))), KvCache(3))


def test_block_counts_visible_pairs(tiny_config):
    lp = layer_params(Model.init(tiny_config, 0).params, 0)
    x = np.random.default_rng(0).normal(size = (5, 16))
    with numerics.count_ops() as counter:
        block_forward(tiny_config, lp, x, np.arange(5))
    d, dff = tiny_config.d_model, tiny_config.d_ff
    assert counter.macs == 5 * (4 * d * d + 3 * d * dff) + 2 * 15 * d


def test_decode_matches_full_forward(tiny_config, make_seq):
    model = Model.init(tiny_config, 7)
    seq = make_seq(16, 6, 4, seed = 7)
    full, _ = model.forward(seq)
    _, cache = model.prefill(seq.subset(np.arange(8)))
    assert cache.entry_counts == [8, 8]
    for i in (8, 9):
        logits = model.decode_step(cache, seq.subset(np.array([i])))
        np.testing.assert_allclose(logits[0], full[i], atol = 1e-9)
    assert cache.entry_counts == [10, 10]
    assert cache.nbytes(16) == 2 * 16 * 2 * 20


def test_decode_on_empty_cache(tiny_config):
    model = Model.init(tiny_config, 8)
    token = model.embed_tokens(3, 0)
    full, _ = model.forward(token)
    np.testing.assert_allclose(model.decode_step(KvCache(2), token), full, atol = 1e-9)


def test_decode_step_errors(tiny_config, make_seq):
    model = Model.init(tiny_config, 9)
    seq = make_seq(16, 3, 2, seed = 9)
    _, cache = model.prefill(seq)
    with pytest.raises(ValueError):
        model.decode_step(cache, model.embed_tokens([1, 2], 5))
    with pytest.raises(ValueError):
        model.decode_step(cache, model.embed_tokens(1, 4))
    with pytest.raises(ValueError):
        model.decode_step(cache, TokenSequence(np.zeros((1, 16)), [Modality.VISION], [5]))
    with pytest.raises(ValueError):
        model.decode_step(KvCache(3), model.embed_tokens(1, 5))


def test_greedy_generation_matches_repeated_forward(tiny_config, make_seq):
    model = Model.init(tiny_config, 10)
    seq = make_seq(16, 4, 2, seed = 10)
    generated = model.generate(seq, 8)
    current, expected = seq, []
    for _ in range(8):
        logits, _ = model.forward(current)
        expected.append(int(np.argmax(logits[-1])))
        current = current.concat(model.embed_tokens(expected[-1], int(current.positions[-1]) + 1))
    assert generated.tolist() == expected


def test_checkpoint_round_trip(tiny_config, make_seq, tmp_path):
    model = Model.init(tiny_config, 11)
    model.description['note'] = 'round trip'
    path = str(tmp_path / 'model.ckpt')
    model.write(path)
    loaded = Model.load(path)
    assert type(loaded) is Model
    assert loaded.config == tiny_config
    assert loaded.description == {'note': 'round trip'}
    assert all(loaded.params[k].tobytes() == model.params[k].tobytes() for k in model.params)
    seq = make_seq(16, 3, 2, seed = 11)
    assert loaded.forward(seq)[0].tobytes() == model.forward(seq)[0].tobytes()
    again = str(tmp_path / 'again.ckpt')
    loaded.write(again)
    assert open(path, 'rb').read() == open(again, 'rb').read()


def test_checkpoint_errors(tiny_config, tmp_path):
    path = tmp_path / 'model.ckpt'
    Model.init(tiny_config, 0).write(str(path))
    raw = path.read_bytes()
    assert raw.startswith(CHECKPOINT_MAGIC)
    bad = tmp_path / 'bad.ckpt'
    bad.write_bytes(b'NOTACKPT' + raw[8:])
    with pytest.raises(CheckpointError):
        Model.load(str(bad))
    bad.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        Model.load(str(bad))
    bad.write_bytes(raw + b'\x00')
    with pytest.raises(CheckpointError):
        Model.load(str(bad))
    with pytest.raises(FileNotFoundError):
        Model.load(str(tmp_path / 'missing.ckpt'))
