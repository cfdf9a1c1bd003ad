import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bevscan.tensor import (CheckpointError, Linear, ShapeError, Tape, Tensor, load_tensors, no_grad, ops,
                            save_tensors, use_tape)
from bevscan.tensor.gradcheck import check_gradients

from oracles import conv1d_causal_loops, conv2d_loops, upsample2x_oracle


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# matmul -------------------------------------------------------------------

def test_matmul_identity(rng):
    m = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_matmul_hand_case():
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_gradient_5x7x3(rng):
    a, b = leaf(rng.normal(size=(5, 7))), leaf(rng.normal(size=(7, 3)))
    assert check_gradients(lambda: ops.matmul(a, b), [a, b]) <= 1e-6


def test_matmul_backward_formula(rng):
    a, b = leaf(rng.normal(size=(4, 2))), leaf(rng.normal(size=(2, 5)))
    g = rng.normal(size=(4, 5))
    ops.matmul(a, b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=0, atol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=0, atol=1e-14)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# conv2d -------------------------------------------------------------------

def test_conv2d_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 9.0))


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 3, 7), (2, 2, 5)])
def test_conv2d_matches_loops(rng, stride, padding, k):
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    ref = conv2d_loops(x, w, b, stride, padding)
    assert out.shape == ref.shape
    np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-10)


def test_conv2d_output_size_formula(rng):
    for h, k, s, p in [(10, 3, 2, 1), (11, 3, 2, 1), (7, 5, 1, 0), (8, 1, 2, 0)]:
        out = ops.conv2d(Tensor(np.zeros((1, 1, h, h))), Tensor(np.zeros((1, 1, k, k))), stride=s, padding=p)
        assert out.shape[2] == (h + 2 * p - k) // s + 1


def test_conv2d_errors():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_stem_reduces_448x800_to_quarter(rng):
    from bevscan.blocks import ImageEncoder, OsaStageConfig
    enc = ImageEncoder(OsaStageConfig(stem_channels=(2, 2), stage_channels=(2, 2, 2),
                                      layer_widths=(2, 2, 2), layers_per_block=1), rng)
    with no_grad():
        out = enc.run_stem(Tensor(np.zeros((1, 3, 448, 800))))
    assert out.shape[2:] == (112, 200)


# conv1d -------------------------------------------------------------------

def test_conv1d_identity_kernel(rng):
    x = rng.normal(size=(1, 3, 7))
    np.testing.assert_array_equal(ops.conv1d_causal(Tensor(x), Tensor(np.ones((3, 1)))).data, x)


def test_conv1d_delay_kernel(rng):
    x = rng.normal(size=(1, 2, 6))
    out = ops.conv1d_causal(Tensor(x), Tensor(np.tile([1.0, 0.0], (2, 1)))).data
    np.testing.assert_array_equal(out[:, :, 0], 0.0)
    np.testing.assert_array_equal(out[:, :, 1:], x[:, :, :-1])


def test_conv1d_matches_loops(rng):
    x, w, b = rng.normal(size=(2, 3, 11)), rng.normal(size=(3, 4)), rng.normal(size=3)
    out = ops.conv1d_causal(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, conv1d_causal_loops(x, w, b), rtol=0, atol=1e-10)


def test_conv1d_is_causal(rng):
    x, w = rng.normal(size=(1, 2, 10)), rng.normal(size=(2, 4))
    base = ops.conv1d_causal(Tensor(x), Tensor(w)).data
    x2 = x.copy()
    x2[:, :, 6] += 1.0
    changed = np.abs(ops.conv1d_causal(Tensor(x2), Tensor(w)).data - base).max(axis=(0, 1)) > 0
    assert not changed[:6].any() and changed[6]


def test_conv1d_rejects_empty_kernel():
    with pytest.raises(ShapeError):
        ops.conv1d_causal(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((2, 0))))


# activations ----------------------------------------------------------------

def test_hsigmoid_values():
    np.testing.assert_array_equal(ops.hsigmoid(Tensor([0.0, 3.0, -3.0])).data, [0.5, 1.0, 0.0])


def test_silu_zero():
    assert ops.silu(Tensor(0.0)).data == 0.0


def test_softplus_gradient_at_zero():
    x = leaf([0.0])
    ops.softplus(x).backward(np.ones(1))
    h = 1e-5
    fd = (np.logaddexp(0, h) - np.logaddexp(0, -h)) / (2 * h)
    assert x.grad[0] == pytest.approx(0.5, abs=1e-15)
    assert x.grad[0] == pytest.approx(fd, abs=1e-10)


def test_relu_and_hsigmoid_kink_subgradient_is_zero():
    x = leaf([0.0])
    ops.sum(ops.relu(x)).backward()
    assert x.grad[0] == 0.0
    x = leaf([-3.0, 3.0])
    ops.sum(ops.hsigmoid(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


@given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)))
def test_activation_ranges(v):
    s = ops.sigmoid(Tensor(v)).data
    assert np.all((s >= 0) & (s <= 1))
    hs = ops.hsigmoid(Tensor(v)).data
    assert np.all((hs >= 0) & (hs <= 1))
    assert np.all(ops.softplus(Tensor(v)).data >= 0)
    np.testing.assert_allclose(ops.silu(Tensor(v)).data, v * s, rtol=1e-12, atol=1e-300)


# pooling and resampling ----------------------------------------------------

def test_pooling_of_constant():
    x = Tensor(np.full((2, 3, 4, 5), 1.75))
    np.testing.assert_array_equal(ops.global_avg_pool(x).data, 1.75)
    np.testing.assert_array_equal(ops.channel_max(x).data, 1.75)
    np.testing.assert_array_equal(ops.channel_mean(x).data, 1.75)
    assert ops.channel_max(x).shape == (2, 1, 4, 5)


def test_upsample_single_pixel():
    np.testing.assert_array_equal(ops.upsample2x(Tensor(np.full((1, 1, 1, 1), 2.5))).data, np.full((1, 1, 2, 2), 2.5))


def test_upsample_matches_interpolation_oracle():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = ops.upsample2x(Tensor(img[None, None])).data[0, 0]
    np.testing.assert_allclose(out, upsample2x_oracle(img), rtol=0, atol=1e-12)


def test_upsample_random_matches_oracle(rng):
    img = rng.normal(size=(5, 7))
    out = ops.upsample2x(Tensor(img[None, None])).data[0, 0]
    np.testing.assert_allclose(out, upsample2x_oracle(img), rtol=0, atol=1e-12)


# softmax / concat ----------------------------------------------------------

def test_softmax_uniform_row():
    np.testing.assert_allclose(ops.softmax_lastdim(Tensor(np.full((2, 8), 3.0))).data, 1 / 8, rtol=0, atol=1e-15)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 9)), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(v):
    np.testing.assert_allclose(ops.softmax_lastdim(Tensor(v)).data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_softmax_gradient(rng):
    x = leaf(rng.normal(size=(3, 6)))
    assert check_gradients(lambda: ops.softmax_lastdim(x), [x]) <= 1e-6


def test_concat_shapes_and_order(rng):
    a, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 4, 4))
    out = ops.concat([Tensor(a), Tensor(b)], axis=1)
    assert out.shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(out.data[:, :2], a)
    np.testing.assert_array_equal(out.data[:, 2:], b)


def test_concat_errors():
    with pytest.raises(ShapeError):
        ops.concat([Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2)))], axis=2)
    with pytest.raises(ShapeError):
        ops.concat([Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 3)))], axis=1)


def test_elementwise_rejects_general_broadcast():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3,))))
    out = ops.mul(Tensor(np.ones((2, 3))), Tensor(2.0))
    np.testing.assert_array_equal(out.data, 2.0)


# tape semantics ---------------------------------------------------------

def test_tape_visits_in_reverse_recording_order():
    tape = Tape()
    x = leaf([1.0, 2.0])
    with use_tape(tape):
        a = ops.mul(x, 2.0)
        b = ops.exp(a)
        c = ops.sum(b)
    recorded = [n.out for n in tape.nodes]
    assert recorded == [a, b, c]
    visited = tape.backward(c)
    assert visited == [c, b, a]


def test_backward_populates_exactly_requires_grad_leaves(rng):
    w = leaf(rng.normal(size=(3, 2)))
    frozen = Tensor(rng.normal(size=(4, 3)))
    y = ops.sum(ops.tanh(ops.matmul(frozen, w)))
    y.backward()
    assert w.grad is not None and w.grad.shape == w.shape
    assert frozen.grad is None


def test_clearing_tape_frees_intermediate_gradients():
    x = leaf([0.5, -1.0])
    tape = Tape()
    with use_tape(tape):
        mid = ops.square(x)
        out = ops.sum(mid)
    tape.backward(out, retain_graph=True)
    assert mid.grad is not None
    tape.clear()
    assert mid.grad is None and len(tape) == 0
    assert x.grad is not None


def test_leaf_gradients_accumulate():
    x = leaf([1.0, 2.0])
    ops.sum(ops.mul(x, 3.0)).backward()
    ops.sum(ops.mul(x, 3.0)).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_no_grad_records_nothing():
    tape = Tape()
    x = leaf([1.0])
    with use_tape(tape), no_grad():
        ops.exp(x)
    assert len(tape) == 0


def test_ops_are_pure(rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    a = ops.conv2d(x, w, padding=1).data
    b = ops.conv2d(x, w, padding=1).data
    assert a.tobytes() == b.tobytes()


def test_composition_backward_terminates(rng):
    lin = Linear(4, 3, rng)
    x = leaf(rng.normal(size=(5, 4)))
    y = ops.softmax_lastdim(ops.silu(lin(x)))
    ops.sum(ops.concat([y, ops.square(y)], axis=1)).backward()
    for p in [x, lin.weight, lin.bias]:
        assert p.grad is not None and np.all(np.isfinite(p.grad))


# checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    tensors = {"enc.w": rng.normal(size=(3, 4, 2)).astype(np.float32), "scalar": np.float32(2.5),
               "ünïcode.name": rng.normal(size=(7,)).astype(np.float32), "empty": np.zeros((0, 3), np.float32)}
    path = tmp_path / "t.ckpt"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        v = np.asarray(v)
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(path, {"ab": np.array([[1.0, 2.0]], np.float32)})
    raw = path.read_bytes()
    assert raw[:8] == b"BEVSCAN1"
    assert raw[8:12] == (1).to_bytes(4, "little")
    assert raw[12:14] == (2).to_bytes(2, "little") and raw[14:16] == b"ab"
    assert raw[16] == 2 and raw[17:25] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[25:], "<f4").tolist() == [1.0, 2.0]


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(path, {"w": np.ones((4, 4), np.float32)})
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_tensors(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "short")
