import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfat.errors import ContractError, DimensionError, FormatError, UnsupportedVersionError
from hfat.model import (
    Checkpoint,
    MlpSpec,
    ModelWeights,
    checkpoint_bytes,
    forward,
    init_weights,
    load_checkpoint,
    logits,
    param_grads,
    parse_checkpoint,
    predict,
    save_checkpoint,
)

from oracles import central_fd, np_ce, np_kl, np_mlp_logits, rel_err


def small_model(seed=0, sizes=(3, 5, 4)):
    return init_weights(MlpSpec(sizes), seed)


def test_init_statistics_match_he_normal():
    w = init_weights(MlpSpec((400, 300, 2)), 0)
    assert w.params[0].std() == pytest.approx(np.sqrt(2 / 400), rel=0.02)
    assert w.params[2].std() == pytest.approx(np.sqrt(2 / 300), rel=0.1)
    assert not w.params[1].any() and not w.params[3].any()


def test_init_is_seeded():
    a, b, c = small_model(1), small_model(1), small_model(2)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert not np.array_equal(a.params[0], c.params[0])


def test_forward_matches_plain_numpy():
    w = small_model(3)
    x = np.random.default_rng(0).standard_normal((6, 3))
    np.testing.assert_allclose(forward(w, x).data, np_mlp_logits(w.params, x), rtol=1e-14)
    np.testing.assert_array_equal(logits(w, x), forward(w, x).data)


def test_param_grads_match_finite_differences():
    rng = np.random.default_rng(4)
    w = small_model(4)
    x, y = rng.standard_normal((8, 3)), rng.integers(0, 4, 8)
    _, grads = param_grads(w, x, y)
    for k, p in enumerate(w.params):
        def f(v, k=k):
            ps = list(w.params)
            ps[k] = v
            return np_ce(np_mlp_logits(ps, x), y)
        assert rel_err(grads[k], central_fd(f, p)) < 1e-5


def test_predict_ties_go_to_smallest_class():
    spec = MlpSpec((2, 3))
    w = ModelWeights(spec, (np.zeros((2, 3)), np.array([1.0, 1.0, 0.0])), 0)
    np.testing.assert_array_equal(predict(w, np.ones((4, 2))), [0, 0, 0, 0])


def test_weights_are_read_only():
    w = small_model()
    with pytest.raises(ValueError):
        w.params[0][0, 0] = 1.0


def test_axpy_leaves_original_untouched():
    w = small_model()
    before = [p.copy() for p in w.params]
    w2 = w.axpy(0.5, [np.ones_like(p) for p in w.params])
    assert all(np.array_equal(p, q) for p, q in zip(w.params, before))
    np.testing.assert_allclose(w2.params[0], before[0] + 0.5)


def test_incongruent_arrays_rejected():
    w = small_model()
    with pytest.raises(ContractError):
        w.axpy(1.0, [np.ones((2, 2))])


def test_wrong_input_dim_raises():
    with pytest.raises(DimensionError):
        logits(small_model(), np.ones((2, 4)))
    with pytest.raises(DimensionError):
        forward(small_model(), np.ones(3))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    w = small_model(5)
    ck = Checkpoint(w.spec, w, epoch=7, seed=11)
    path = save_checkpoint(ck, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert (back.epoch, back.seed, back.spec) == (7, 11, w.spec)
    assert all(np.array_equal(p, q) for p, q in zip(w.params, back.weights.params))
    assert checkpoint_bytes(back) == path.read_bytes()
    assert not list(tmp_path.glob(".tmp-*"))


def test_checkpoint_layout():
    w = small_model(0, (2, 2))
    raw = checkpoint_bytes(Checkpoint(w.spec, w, 3, 9))
    magic, version, epoch, seed, n = struct.unpack_from("<8sIqqI", raw)
    assert (magic, version, epoch, seed, n) == (b"HFATCKPT", 1, 3, 9, 2)
    body = np.frombuffer(raw[32 + 8:], dtype="<f8")
    np.testing.assert_array_equal(body[:4], w.params[0].ravel())


@pytest.mark.parametrize("mutate, err", [
    (lambda r: b"NOTACKPT" + r[8:], FormatError),
    (lambda r: r[:-8], FormatError),
    (lambda r: r + b"\0" * 8, FormatError),
    (lambda r: r[:10], FormatError),
    (lambda r: r[:8] + struct.pack("<I", 2) + r[12:], UnsupportedVersionError),
])
def test_corrupt_checkpoints_rejected(mutate, err):
    w = small_model()
    raw = checkpoint_bytes(Checkpoint(w.spec, w, 1))
    with pytest.raises(err):
        parse_checkpoint(mutate(raw))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**31), st.integers(0, 10**6))
def test_checkpoint_round_trip_property(sizes, seed, epoch):
    w = init_weights(MlpSpec(tuple(sizes)), seed)
    back = parse_checkpoint(checkpoint_bytes(Checkpoint(w.spec, w, epoch, seed)))
    assert back.epoch == epoch and back.spec == w.spec
    assert all(np.array_equal(p, q) for p, q in zip(w.params, back.weights.params))


def test_kl_of_model_outputs_matches_numpy():
    from hfat import autodiff as ad
    w = small_model(6)
    x = np.random.default_rng(1).standard_normal((4, 3))
    z1, z2 = logits(w, x), logits(w, x + 0.1)
    assert ad.kl_divergence(ad.Tensor(z1), ad.Tensor(z2)).item() == pytest.approx(np_kl(z1, z2), rel=1e-12)
