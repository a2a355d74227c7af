import numpy as np
import pytest

from gradreg import tensor as T
from gradreg.gradcheck import check, op_cases, run_suite, summarize


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def grad_of(fn, *arrays, dtype=np.float64):
    ts = [T.Tensor(np.asarray(a, dtype=dtype), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = fn(*ts)
    tape.backward(out)
    return [t.grad for t in ts]


# ---------------------------------------------------------------- conv3d


def test_conv_dirac_kernel_is_identity(rng):
    x = rng.standard_normal((3, 5, 6, 7)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        w[c, c, 1, 1, 1] = 1.0
    y = T.conv3d(T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(3, np.float32)), stride=1, padding=1)
    np.testing.assert_array_equal(y.data, x)


def test_conv_all_ones_center_is_27():
    y = T.conv3d(T.Tensor(np.ones((1, 3, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3, 3))), None, stride=1, padding=1)
    assert y.data[0, 1, 1, 1] == 27.0


@pytest.mark.parametrize("n,k,s,p", [(8, 3, 1, 1), (8, 2, 2, 0), (9, 3, 2, 1), (7, 3, 1, 0)])
def test_conv_output_extent(n, k, s, p):
    y = T.conv3d(T.Tensor(np.zeros((2, n, n, n))), T.Tensor(np.zeros((4, 2, k, k, k))), stride=s, padding=p)
    expect = (n + 2 * p - k) // s + 1
    assert y.shape == (4, expect, expect, expect)


def test_conv_channel_mismatch_reports_dims():
    with pytest.raises(ValueError, match="Cin=2.*Cin=3"):
        T.conv3d(T.Tensor(np.zeros((2, 4, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3, 3))), padding=1)


def test_conv_sum_gradient_single_precision(rng):
    # sum(output) at float32, rtol 1e-3
    res = check(lambda x, w: T.tsum(T.conv3d(x, w, None, 1, 1)),
                [rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((2, 2, 3, 3, 3)) * 0.3],
                [0, 1], seed=0, dtype=np.float32)
    assert res.passed, res


# ---------------------------------------------------------------- activations & norms


def test_leaky_relu_values():
    y = T.leaky_relu(T.Tensor(np.array([2.5, -1.0, 0.0])), 0.2)
    np.testing.assert_allclose(y.data, [2.5, -0.2, 0.0])


def test_leaky_relu_kink_gradient_is_one():
    (g,) = grad_of(lambda x: T.tsum(T.leaky_relu(x, 0.2)), np.array([0.0, -3.0]))
    np.testing.assert_array_equal(g, [1.0, 0.2])


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ValueError):
        T.leaky_relu(T.Tensor(np.zeros(2)), 1.5)


def test_instance_norm_constant_channel():
    y = T.instance_norm(T.Tensor(np.full((1, 3, 3, 3), 7.0, np.float32)), 1e-5)
    assert np.abs(y.data).max() < 1e-2


def test_instance_norm_standardizes(rng):
    y = T.instance_norm(T.Tensor(rng.standard_normal((3, 4, 4, 4)) * 5 + 2), 1e-5).data
    for c in range(3):
        assert abs(y[c].mean()) < 1e-5
        assert abs(y[c].var() - 1) < 1e-3


# ---------------------------------------------------------------- cumsum / upsample / sampling


def test_cumsum_exclusive_values():
    y = T.cumsum_exclusive(T.Tensor(np.ones(4)), axis=0)
    np.testing.assert_array_equal(y.data, [0, 1, 2, 3])
    np.testing.assert_array_equal(T.cumsum_exclusive(T.Tensor(np.zeros((3, 4))), axis=1).data, 0)


def test_cumsum_exclusive_gradient_counts_later_entries():
    (g,) = grad_of(lambda x: T.tsum(T.cumsum_exclusive(x, 0)), np.arange(6.0))
    np.testing.assert_array_equal(g, [5, 4, 3, 2, 1, 0])


def test_upsample_repeats_each_voxel():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    y = T.upsample_nearest2x(T.Tensor(x)).data
    assert y.shape == (1, 4, 4, 4)
    np.testing.assert_array_equal(y[0, ::2, ::2, ::2], x[0])
    np.testing.assert_array_equal(y[0, 1::2, 1::2, 1::2], x[0])


def test_trilinear_identity_is_exact(rng):
    vol = rng.standard_normal((2, 5, 6, 7)).astype(np.float32)
    grid = np.indices((5, 6, 7)).astype(np.float32)
    np.testing.assert_array_equal(T.trilinear_sample(T.Tensor(vol), T.Tensor(grid)).data, vol)


def test_trilinear_midpoint():
    vol = np.zeros((1, 2, 1, 1))
    vol[0, 0], vol[0, 1] = 3.0, 5.0
    coords = np.zeros((3, 1, 1, 1))
    coords[0] = 0.5
    assert T.trilinear_sample(T.Tensor(vol), T.Tensor(coords)).data.item() == 4.0


def test_trilinear_clamps_out_of_bounds():
    vol = np.arange(4.0).reshape(1, 4, 1, 1)
    coords = np.zeros((3, 2, 1, 1))
    coords[0, :, 0, 0] = [-3.0, 10.0]
    np.testing.assert_array_equal(T.trilinear_sample(T.Tensor(vol), T.Tensor(coords)).data.ravel(), [0.0, 3.0])


# ---------------------------------------------------------------- elementwise & tape


def test_sub_self_and_sigmoid_zero():
    x = T.Tensor(np.array([1.5, -2.0]))
    np.testing.assert_array_equal(T.sub(x, x).data, 0)
    assert T.sigmoid(T.Tensor(np.array(0.0))).data == 0.5


def test_broadcast_only_scalar():
    with pytest.raises(ValueError):
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.array(1.0))).data, 1)


def test_square_gradient():
    (g,) = grad_of(lambda x: T.mul(x, x), np.array(3.0))
    assert g == 6.0


def test_sum_of_positive_leaky_relu_has_unit_gradient(rng):
    (g,) = grad_of(lambda x: T.tsum(T.leaky_relu(x, 0.2)), rng.uniform(0.1, 2, (3, 4)))
    np.testing.assert_array_equal(g, 1.0)


def test_non_scalar_root_rejected():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_untaped_root_rejected():
    with pytest.raises(ValueError):
        T.backward(T.Tensor(np.array(1.0)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_is_an_error():
    with pytest.raises(FloatingPointError, match="log"):
        T.log(T.Tensor(np.array([-1.0])))


def test_tape_records_in_topological_order(rng):
    x = T.Tensor(rng.standard_normal(4), requires_grad=True)
    with T.Tape() as tape:
        y = T.tsum(T.sigmoid(T.mul(x, x)))
    nodes = {id(out): i for i, (out, _, _, _) in enumerate(tape.records)}
    for i, (_, inputs, _, _) in enumerate(tape.records):
        assert all(nodes.get(id(t), -1) < i for t in inputs)
    assert y.node_id == len(tape) - 1


def test_replayed_backward_is_identical(rng):
    x = T.Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((2, 1, 3, 3, 3)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.mean(T.square(T.leaky_relu(T.instance_norm(T.conv3d(x, w, None, 1, 1)), 0.2)))
    g1 = {k: v.copy() for k, v in ((id(t), t.grad) for t in tape.backward(loss))}
    g2 = {id(t): v for t, v in tape.backward(loss).items()}
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_random_five_op_chain(rng):
    fn = lambda a, b: T.mean(T.sigmoid(T.mul(T.sub(a, b), T.add(T.square(a), 1.0))))
    res = check(fn, [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))], [0, 1], seed=3)
    assert res.passed


def test_no_tape_means_no_recording():
    x = T.Tensor(np.ones(2), requires_grad=True)
    y = T.mul(x, x)
    assert y._tape is None and not y.requires_grad


# ---------------------------------------------------------------- finite-difference suite


@pytest.mark.parametrize("op", list(op_cases(np.random.default_rng(0))))
def test_gradcheck_double_precision(op):
    results = run_suite(seeds=range(20), ops={op})
    failed = [r for r in results if not r.passed]
    assert len(results) == 20 and not failed, failed


def test_gradcheck_detects_corruption():
    results = run_suite(seeds=range(2), ops={"conv3d", "trilinear_sample"}, corrupt="trilinear_sample")
    summary = summarize(results)
    assert summary["trilinear_sample"]["failed"] == 2
    assert summary["conv3d"]["failed"] == 0
