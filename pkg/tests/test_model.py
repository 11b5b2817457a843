import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedreg.errors import ConfigError, NumericError
from fedreg.nn.losses import cross_entropy
from fedreg.nn.model import (
    Conv,
    Dense,
    ModelSpec,
    Output,
    backward,
    default_cnn_spec,
    forward,
    init_state,
    state_from_bytes,
    state_to_bytes,
    zero_grads,
)
from fedreg.rng import INIT, stream
from oracles import fd_param_grads, max_rel_err


def tiny_spec(projection_dim=8):
    return ModelSpec(
        input_shape=(2, 4, 4),
        layers=(Conv(2), Dense(4), Output(2)),
        extraction_points=(0, 1),
        projection_dim=projection_dim,
    )


def test_param_shapes_hand_count():
    spec = tiny_spec()
    shapes = spec.param_shapes()
    # conv: 2x2x3x3 + 2; dense: 4x(2*2*2) + 4; output: 2x4 + 2
    assert shapes["layer0.w"] == (2, 2, 3, 3)
    assert shapes["layer1.w"] == (4, 8)
    assert shapes["layer2.w"] == (2, 4)
    # head 0 on the 8-wide conv output, head 1 on the 4-wide dense output
    assert shapes["head0.w1"] == (8, 8) and shapes["head0.w2"] == (8, 8)
    assert shapes["head1.w1"] == (4, 4) and shapes["head1.w2"] == (8, 4)
    assert spec.param_count() == 36 + 2 + 32 + 4 + 8 + 2 + (64 + 8 + 64 + 8) + (16 + 4 + 32 + 8)


def test_default_spec_geometry():
    spec = default_cnn_spec()
    assert spec.extraction_points == (0, 1, 2, 3, 4)
    assert spec.extraction_dims() == [8 * 16 * 16, 16 * 8 * 8, 32 * 4 * 4, 128, 96]
    assert spec.head_dims(0) == (2048, 256, 256)
    assert spec.head_dims(4) == (96, 96, 256)


@pytest.mark.parametrize("layers,points,msg", [
    ((Conv(2), Dense(3)), (0,), "Output"),
    ((Output(2), Dense(3), Output(2)), (1,), "last position"),
    ((Conv(2), Output(2)), (1,), "conv/dense"),
    ((Conv(2), Output(2)), (0, 0), "increasing"),
    ((Dense(3), Conv(2), Output(2)), (0,), "conv layer after dense"),
    ((Conv(2), Conv(2), Conv(2), Output(2)), (0,), "pooled away"),
    ((Conv(2, kernel=4), Output(2)), (0,), "odd"),
])
def test_spec_validation_errors(layers, points, msg):
    with pytest.raises(ConfigError, match=msg):
        ModelSpec(input_shape=(1, 4, 4), layers=tuple(layers), extraction_points=points)


def test_spec_needs_an_extraction_point():
    with pytest.raises(ConfigError, match="extraction point"):
        ModelSpec(input_shape=(1, 4, 4), layers=(Conv(2), Output(2)), extraction_points=())


def test_init_is_deterministic_and_bounded():
    spec = tiny_spec()
    a = init_state(spec, stream(5, INIT))
    b = init_state(spec, stream(5, INIT))
    c = init_state(spec, stream(6, INIT))
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert not all(np.array_equal(a.params[n], c.params[n]) for n in a.params)
    fan_in = 8  # dense layer1 weight
    assert np.abs(a.params["layer1.w"]).max() <= np.sqrt(6.0 / fan_in)
    assert np.abs(a.params["layer1.b"]).max() <= 1.0 / np.sqrt(fan_in)


def test_forward_shapes_and_extraction_layout():
    spec = tiny_spec()
    state = init_state(spec, stream(0, INIT))
    x = np.random.default_rng(0).random((3, 2, 4, 4))
    logits, exts, trace = forward(spec, state, x)
    assert logits.shape == (3, 2)
    assert [e.shape for e in exts] == [(3, 8), (3, 4)]
    assert trace.batch_size == 3
    # extraction 0 is the flattened post-pool conv output feeding layer 1
    np.testing.assert_array_equal(
        exts[0], trace.layer_caches[1][1][0]
    )


def test_forward_rejects_wrong_input_shape():
    spec = tiny_spec()
    state = init_state(spec, stream(0, INIT))
    with pytest.raises(ConfigError, match="does not match spec input"):
        forward(spec, state, np.zeros((2, 1, 4, 4)))


def test_forward_flags_nonfinite_with_layer_index():
    spec = tiny_spec()
    state = init_state(spec, stream(0, INIT))
    x = np.full((1, 2, 4, 4), np.inf)
    with np.errstate(invalid="ignore"):
        with pytest.raises(NumericError, match="layer 0"):
            forward(spec, state, x)


def test_backward_matches_finite_differences_with_injection():
    spec = tiny_spec()
    state = init_state(spec, stream(1, INIT))
    rng = np.random.default_rng(2)
    x = rng.random((3, 2, 4, 4))
    y = np.array([0, 1, 1])
    r0 = rng.standard_normal((3, 8))
    r1 = rng.standard_normal((3, 4))

    def loss():
        logits, exts, _ = forward(spec, state, x)
        ce, _ = cross_entropy(logits, y)
        return float(ce + (exts[0] * r0).sum() + (exts[1] * r1).sum())

    logits, exts, trace = forward(spec, state, x)
    _, dlogits = cross_entropy(logits, y)
    grads = backward(trace, dlogits, [r0, r1])
    fd = fd_param_grads(loss, state)
    for name in state.params:
        if name.startswith("head"):
            np.testing.assert_array_equal(grads[name], 0.0)
        else:
            assert max_rel_err(fd[name], grads[name]) < 1e-5, name


def test_backward_rejects_mismatched_upstreams():
    spec = tiny_spec()
    state = init_state(spec, stream(1, INIT))
    x = np.random.default_rng(0).random((2, 2, 4, 4))
    logits, _, trace = forward(spec, state, x)
    with pytest.raises(ConfigError, match="dlogits"):
        backward(trace, np.zeros((2, 3)))
    with pytest.raises(ConfigError, match="per extraction point"):
        backward(trace, np.zeros((2, 2)), [np.zeros((2, 8))])


def test_zero_grads_covers_every_parameter():
    spec = tiny_spec()
    g = zero_grads(spec)
    assert g.keys() == spec.param_shapes().keys()
    assert all((v == 0).all() for v in g.values())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_state_serialization_round_trips(seed):
    spec = tiny_spec()
    state = init_state(spec, stream(seed, INIT))
    blob = state_to_bytes(spec, state)
    assert len(blob) == spec.param_count() * 8
    back = state_from_bytes(spec, blob)
    for name in state.params:
        np.testing.assert_array_equal(state.params[name], back.params[name])


def test_state_from_bytes_validates_length():
    spec = tiny_spec()
    with pytest.raises(ConfigError, match="bytes"):
        state_from_bytes(spec, b"\x00" * 8)
