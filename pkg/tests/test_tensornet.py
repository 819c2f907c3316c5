import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppbfl import tensornet
from ppbfl.data import Dataset, synth_blobs
from ppbfl.errors import EmptyDataset, InvalidSchema, MalformedModel, ShapeMismatch
from ppbfl.tensornet import Layer, ModelParams, deserialize, init_model, serialize


@pytest.fixture(scope="module")
def blobs2():
    return synth_blobs(2, 500, 2, 0.1, seed=7)


def test_init_deterministic_and_shapes():
    a = init_model([(4, 2), (3, 4)], seed=1)
    assert a == init_model([(4, 2), (3, 4)], seed=1)
    assert a != init_model([(4, 2), (3, 4)], seed=2)
    assert [l.weights.size for l in a.layers] == [8, 12]
    assert a.schema_id == "dense:4x2,3x4"
    for l in a.layers:
        assert np.all(np.abs(l.weights) <= 1 / np.sqrt(l.cols))


@pytest.mark.parametrize("schema", [[(0, 2)], [(3, 0)], []])
def test_init_rejects_bad_schema(schema):
    with pytest.raises(InvalidSchema):
        init_model(schema, 0)


def test_params_are_immutable():
    m = init_model([(2, 2)], 0)
    with pytest.raises(ValueError):
        m.layers[0].weights[0] = 1.0


def test_zero_epochs_is_a_no_op(blobs2):
    m = init_model(tensornet.dense_schema(2, 8, 2), 0)
    out, rep = tensornet.train_local(m, blobs2, 0, 0.05, 1.0, 0)
    assert out == m and rep.duration == 0 and rep.samples_seen == 0


def test_training_separable_blobs(blobs2):
    m = init_model(tensornet.dense_schema(2, 8, 2), 3)
    out, rep = tensornet.train_local(m, blobs2, 5, 0.05, 1.0, 0)
    assert tensornet.evaluate(out, blobs2) > 0.9
    assert rep.samples_seen == 5 * len(blobs2)
    assert rep.duration == pytest.approx(rep.samples_seen)


def test_loss_non_increasing_first_three_epochs():
    data = synth_blobs(10, 40, 20, 0.25, seed=11)
    m = init_model(tensornet.dense_schema(20, 32, 10), 0)
    _, rep = tensornet.train_local(m, data, 3, 0.05, 1.0, 5)
    start = tensornet.loss(m, data)
    losses = [start, *rep.epoch_losses]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_capacity_scales_duration(blobs2):
    m = init_model(tensornet.dense_schema(2, 8, 2), 0)
    _, slow = tensornet.train_local(m, blobs2, 2, 0.05, 1.0, 0)
    _, fast = tensornet.train_local(m, blobs2, 2, 0.05, 2.0, 0)
    assert fast.duration == slow.duration / 2


def test_training_bit_reproducible(blobs2):
    m = init_model(tensornet.dense_schema(2, 8, 2), 0)
    a, _ = tensornet.train_local(m, blobs2, 3, 0.05, 1.0, 42)
    b, _ = tensornet.train_local(m, blobs2, 3, 0.05, 1.0, 42)
    assert serialize(a) == serialize(b)


def test_train_shape_mismatch(blobs2):
    with pytest.raises(ShapeMismatch):
        tensornet.train_local(init_model([(8, 3), (2, 8)], 0), blobs2, 1, 0.05, 1.0, 0)


def test_evaluate_base_rate_and_memorisation():
    x = np.eye(10)
    data = Dataset(x, np.arange(10), 10)
    constant = ModelParams((Layer(10, 10, np.zeros(100), np.eye(10)[3] * 5),))
    assert tensornet.evaluate(constant, data) == 0.1
    memorise = ModelParams((Layer(10, 10, np.eye(10).ravel(), np.zeros(10)),))
    assert tensornet.evaluate(memorise, data) == 1.0
    with pytest.raises(EmptyDataset):
        tensornet.evaluate(constant, data.subset([]))


def test_average_is_elementwise_mean():
    ms = [init_model([(3, 2)], s) for s in range(3)]
    avg = tensornet.average(ms)
    expected = (ms[0].layers[0].pool + ms[1].layers[0].pool + ms[2].layers[0].pool) / 3
    np.testing.assert_allclose(avg.layers[0].pool, expected, rtol=4 * np.finfo(float).eps)


def test_serialize_layout():
    m = ModelParams((Layer(1, 2, [1.0, -2.0], [0.5]),))
    blob = serialize(m)
    sid = b"dense:1x2"
    assert blob[:4] == len(sid).to_bytes(4, "little")
    assert blob[4 : 4 + len(sid)] == sid
    rest = blob[4 + len(sid) :]
    assert rest[:8] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(rest[8:], "<f8").tolist() == [1.0, -2.0, 0.5]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), hidden=st.integers(1, 6))
def test_roundtrip_bit_exact(seed, hidden):
    m = init_model([(hidden, 3), (2, hidden)], seed)
    assert serialize(deserialize(serialize(m))) == serialize(m)
    assert deserialize(serialize(m)) == m


def test_equal_models_equal_bytes():
    assert serialize(init_model([(2, 2)], 5)) == serialize(init_model([(2, 2)], 5))


@pytest.mark.parametrize("cut", [0, 3, 10, 20, -1])
def test_truncated_bytes_rejected(cut):
    blob = serialize(init_model([(2, 2)], 0))
    with pytest.raises(MalformedModel):
        deserialize(blob[:cut])


def test_flipping_any_byte_changes_or_rejects():
    m = init_model([(2, 3)], 1)
    blob = serialize(m)
    for i in range(len(blob)):
        mutated = bytearray(blob)
        mutated[i] ^= 0x01
        try:
            out = deserialize(bytes(mutated))
        except MalformedModel:
            continue
        assert out != m
