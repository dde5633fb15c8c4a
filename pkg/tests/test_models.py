import numpy as np
import pytest

from evlab import models as M
from evlab import tensor as T
from evlab.errors import DimensionError, PersistenceError, UsageError
from evlab.rng import Rng
from evlab.tensor import Tensor


@pytest.fixture(scope="module")
def small_net():
    return M.build_parallel_conv_net(4, Rng(1))


def test_raster_width_invariant_across_channel_counts():
    for c in (8, 12, 60):
        net = M.build_parallel_conv_net(c, Rng(0))
        assert net.params["norm0.gamma"].data.shape == (M.RASTER_WIDTH,)
        assert M.RASTER_WIDTH == 4096
        emb = M.penultimate_embedding(net, np.zeros((c, 256)))
        assert emb.shape == (M.EMBEDDING_WIDTH,) == (128,)


def test_parameter_count_matches_independent_formula():
    for c in (4, 8, 60):
        net = M.build_parallel_conv_net(c, Rng(2))
        assert M.count_parameters(net) == M.expected_parallel_conv_parameter_count(c)
    assert M.expected_parallel_conv_parameter_count(60) == 4_377_569


def test_forward_prob_zero_input_at_init(small_net):
    p = M.forward_prob(small_net, np.zeros((4, 256)))
    assert p.shape == ()
    assert p.item() == 0.5


def test_forward_prob_in_open_interval_and_deterministic(small_net):
    x = Rng(3).uniform(-20, 20, size=(4, 256))
    a = M.forward_prob(small_net, x)
    b = M.forward_prob(small_net, x)
    assert 0.0 < a.item() < 1.0
    assert a.data.tobytes() == b.data.tobytes()


def test_forward_prob_batched_matches_single(small_net):
    x = Rng(4).uniform(-5, 5, size=(3, 4, 256))
    batch = M.forward_prob(small_net, x)
    assert batch.shape == (3,)
    singles = [M.forward_prob(small_net, x[i]).item() for i in range(3)]
    assert np.allclose(batch.data, singles, atol=1e-12)


def test_forward_prob_channel_mismatch(small_net):
    with pytest.raises(DimensionError):
        M.forward_prob(small_net, np.zeros((5, 256)))
    with pytest.raises(DimensionError):
        M.forward_prob(small_net, np.zeros((4, 128)))


def test_embedding_identical_inputs_identical(small_net):
    x = Rng(5).uniform(-1, 1, size=(4, 256))
    a = M.penultimate_embedding(small_net, x)
    b = M.penultimate_embedding(small_net, x)
    assert a.data.tobytes() == b.data.tobytes()


def test_embedding_changes_with_upstream_parameter():
    net = M.build_parallel_conv_net(2, Rng(6))
    x = Rng(7).uniform(-1, 1, size=(2, 256))
    before = M.penultimate_embedding(net, x).data.copy()
    net.params["conv3.weight"].data[0, 0, 0] += 0.25
    after = M.penultimate_embedding(net, x).data
    assert not np.allclose(before, after)


def test_gradient_reaches_input(small_net):
    x = Tensor(Rng(8).uniform(-1, 1, size=(4, 256)), requires_grad=True)
    T.backward(M.forward_prob(small_net, x))
    assert x.grad is not None
    assert np.abs(x.grad).max() > 0.0


def test_ffnn_architecture():
    net = M.build_ffnn(4, Rng(9))
    p = M.forward_prob(net, Rng(10).uniform(-1, 1, size=(4, 256)))
    assert 0.0 < p.item() < 1.0
    assert net.params["fc1.weight"].data.shape == (1024, 4 * 256)
    assert net.params["fc2.weight"].data.shape == (256, 1024)


def test_decoder_output_length():
    dec = M.build_decoder(4, Rng(11))
    out = M.decode_embedding(dec, Tensor(np.zeros(128)))
    assert out.shape == (4 * 256,)
    batch = M.decode_embedding(dec, Tensor(np.zeros((5, 128))))
    assert batch.shape == (5, 4 * 256)


def test_siamese_prob_equal_inputs_is_sigmoid_of_shift(small_net):
    x = Rng(12).uniform(-1, 1, size=(4, 256))
    scale = Tensor(1.0, requires_grad=True)
    shift = Tensor(0.3, requires_grad=True)
    p = M.siamese_prob(small_net, x, x, scale, shift)
    assert abs(p.item() - 1.0 / (1.0 + np.exp(-0.3))) < 1e-12


def test_freeze_through_penultimate_trains_exactly_final_layer(small_net):
    net = M.apply_freeze(small_net.copy(), M.FreezePolicy.THROUGH_PENULTIMATE)
    trainable = net.trainable()
    assert set(trainable) == {"fc3.weight", "fc3.bias"}
    assert M.count_parameters(net, trainable_only=True) == 129


def test_freeze_last_two_dense(small_net):
    net = M.apply_freeze(small_net.copy(), M.FreezePolicy.LAST_TWO_DENSE)
    assert set(net.trainable()) == {"fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias"}


def test_frozen_parameter_unchanged_after_steps(small_net):
    net = M.apply_freeze(small_net.copy(), M.FreezePolicy.THROUGH_PENULTIMATE)
    before = net.params["conv7.weight"].data.tobytes()
    state = T.AdamState(lr=0.1)
    rng = Rng(13)
    for _ in range(100):
        x = rng.uniform(-1, 1, size=(2, 4, 256))
        net.zero_grad()
        T.backward(T.bce_loss(M.forward_prob(net, x), np.array([1.0, 0.0])))
        T.adam_step(net.params, state, frozen=net.frozen)
    assert net.params["conv7.weight"].data.tobytes() == before
    assert net.params["fc3.weight"].data.tobytes() != before


def test_weight_round_trip_bit_exact(tmp_path, small_net):
    path = tmp_path / "net.evlw"
    M.save_weights(small_net, path)
    loaded = M.load_weights(path)
    assert loaded.kind == "parallel_conv"
    assert loaded.c_in == 4
    assert list(loaded.params) == list(small_net.params)
    for name, p in small_net.params.items():
        assert loaded.params[name].data.tobytes() == p.data.tobytes()
    second = tmp_path / "again.evlw"
    M.save_weights(loaded, second)
    assert path.read_bytes() == second.read_bytes()


def test_weight_round_trip_other_kinds(tmp_path):
    for build in (M.build_ffnn, M.build_decoder):
        net = build(3, Rng(14))
        path = tmp_path / f"{net.kind}.evlw"
        M.save_weights(net, path)
        loaded = M.load_weights(path)
        assert loaded.kind == net.kind
        assert loaded.c_in == 3


def test_load_rejects_corruption(tmp_path, small_net):
    path = tmp_path / "net.evlw"
    M.save_weights(small_net, path)
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.evlw"
    bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(PersistenceError) as err:
        M.load_weights(bad_magic)
    assert err.value.field == "magic"

    truncated = tmp_path / "short.evlw"
    truncated.write_bytes(bytes(raw[:len(raw) - 16]))
    with pytest.raises(PersistenceError):
        M.load_weights(truncated)


def test_layer_plan_is_json_ready(small_net):
    import json

    plan = M.layer_plan(small_net)
    assert plan[0] == {"layer": "conv1d_same", "kernel": 3, "filters": 32, "in_channels": 4}
    assert plan[-1] == {"layer": "sigmoid"}
    json.dumps(plan)


def test_bad_builder_arguments():
    with pytest.raises(UsageError):
        M.build_parallel_conv_net(0, Rng(0))
    with pytest.raises(UsageError):
        M.apply_freeze(M.build_ffnn(2, Rng(0)), M.FreezePolicy.NONE)
    with pytest.raises(UsageError):
        M.penultimate_embedding(M.build_ffnn(2, Rng(0)), np.zeros((2, 256)))
