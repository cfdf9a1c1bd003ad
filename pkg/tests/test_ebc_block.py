import numpy as np
import pytest

from bevscan.ebc import EBCBlock, patchify, unpatchify
from bevscan.geometry import BevGrid
from bevscan.tensor import Tensor, ops
from bevscan.tensor.core import ShapeError
from bevscan.tensor.gradcheck import check_gradients

from oracles import ebc_straight_line

KINDS = ("forward", "forward_surround", "backward_surround")


def perturbed_block(grid, d, seed, **kw):
    rng = np.random.default_rng(seed)
    blk = EBCBlock(grid, d, rng, **kw)
    for p in blk.parameters():
        p.data = p.data + rng.normal(0, 0.2, p.shape)
    return blk


def test_token_count_full_grid():
    assert patchify(Tensor(np.zeros((1, 200, 200)))).shape == (10_000, 4)


def test_patch_raster_order_on_four_cells():
    f = np.arange(16.0).reshape(1, 4, 4)
    tok = patchify(Tensor(f)).data
    # patch (row, col) top-left cells: (0,0)->0, (0,1)->2, (1,0)->8, (1,1)->10
    assert tok[:, 0].tolist() == [0.0, 2.0, 8.0, 10.0]
    assert tok[0].tolist() == [0.0, 1.0, 4.0, 5.0]


def test_canonical_projection_pair_round_trips_exactly():
    f = np.random.default_rng(0).normal(size=(3, 6, 8))
    eye = Tensor(np.eye(12))
    back = unpatchify(ops.matmul(ops.matmul(patchify(Tensor(f)), eye), eye), 6, 8).data
    np.testing.assert_array_equal(back, f)


def test_odd_dims_rejected():
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros((2, 5, 4))))


def test_zero_weights_give_residual_identity():
    blk = EBCBlock(BevGrid(8, 8), 4, np.random.default_rng(0))
    for p in blk.parameters():
        p.data[...] = 0.0
    f = np.random.default_rng(1).normal(size=(4, 8, 8))
    np.testing.assert_array_equal(blk(Tensor(f)).data, f)


@pytest.mark.parametrize("kind", ["forward_surround", "backward_surround"])
def test_branch_output_is_restored_to_raster_order(kind):
    blk = EBCBlock(BevGrid(8, 8), 2, np.random.default_rng(0), branches=(kind,))
    assert not np.array_equal(blk.orders[kind].order, np.arange(16))
    seen = {}

    def pointwise(x):  # stands in for the scan: each token only sees itself
        seen["x"] = x.data.copy()
        return ops.mul(x, 3.0)

    blk.branches[kind] = pointwise
    x = np.zeros((16, 2))
    x[5] = [7.0, -1.0]  # sentinel in raster patch 5
    out = blk._run_branch(kind, Tensor(x)).data
    np.testing.assert_array_equal(out[5], [21.0, -3.0])
    assert np.count_nonzero(out) == 2
    # the branch itself saw the sentinel at its scan position
    pos = int(blk.orders[kind].inverse[5])
    np.testing.assert_array_equal(seen["x"][pos], [7.0, -1.0])


@pytest.mark.parametrize("seed", range(3))
def test_matches_straight_line_reference(seed):
    blk = perturbed_block(BevGrid(8, 8, 1, (-50, 50), (-50, 50)), 4, seed, d_inner=6, n_state=3)
    f = np.random.default_rng(100 + seed).normal(size=(4, 8, 8))
    np.testing.assert_allclose(blk(Tensor(f)).data, ebc_straight_line(blk, f), atol=1e-9, rtol=0)


@pytest.mark.parametrize("kind", KINDS)
def test_branch_is_causal_in_its_scan_order(kind):
    grid = BevGrid(8, 8, 1, (-40, 40), (-40, 40))
    blk = perturbed_block(grid, 3, 7, branches=(kind,))
    perm = blk.orders[kind]
    f = np.random.default_rng(8).normal(size=(3, 8, 8))
    base = blk.branch_outputs(Tensor(f))[kind].data
    t = 6
    patch = int(perm.order[t])
    r, c = divmod(patch, 4)
    g = f.copy()
    g[:, 2 * r:2 * r + 2, 2 * c:2 * c + 2] += 1.0
    moved = blk.branch_outputs(Tensor(g))[kind].data
    pos = perm.inverse  # scan position of every raster patch
    before = pos < t
    np.testing.assert_array_equal(moved[before], base[before])
    assert np.abs(moved[~before] - base[~before]).max() > 0


def test_gradient_wrt_input_small_grid():
    blk = perturbed_block(BevGrid(4, 4, 1), 4, 3)
    f = Tensor(np.random.default_rng(4).normal(size=(4, 4, 4)), requires_grad=True)
    assert check_gradients(lambda: blk(f), [f]) <= 1e-4


def test_rejects_wrong_channel_count():
    blk = EBCBlock(BevGrid(4, 4), 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        blk(Tensor(np.zeros((3, 4, 4))))


def test_stable_discretisation_at_init():
    blk = EBCBlock(BevGrid(8, 8), 4, np.random.default_rng(0))
    f = Tensor(np.random.default_rng(1).normal(size=(4, 8, 8)))
    x, _ = blk._tokens(f)
    for br in blk.branches.values():
        p = br.scan_inputs(x)
        abar = np.exp(p["delta"].data[:, :, None] * p["a"].data[None])
        assert (abar > 0).all() and (abar < 1).all()
        assert 0.005 < np.exp(np.log(p["delta"].data).mean()) < 0.5
