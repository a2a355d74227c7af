import numpy as np
import pytest

from gradreg import tensor as T
from gradreg.deformation import field_from_raw, identity_grid
from gradreg.gradcheck import grad_close, numerical_grad
from gradreg.network import NetConfig, RegistrationNet, count_parameters, init_parameters, parameter_shapes


@pytest.fixture
def small_net():
    return RegistrationNet(NetConfig(channels=(4, 8, 8), ds_levels=3), seed=1)


@pytest.fixture
def pair():
    rng = np.random.default_rng(2)
    return rng.random((1, 16, 16, 16)).astype(np.float32), rng.random((1, 16, 16, 16)).astype(np.float32)


def _randomize_heads(net, seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    for name, p in net.params.items():
        if name.startswith("head"):
            p.data = (rng.standard_normal(p.shape) * scale).astype(p.dtype)


def test_hand_counted_parameters():
    # enc: 8*27+8 + 8*8*8+8 + 16*8*27+16 + 16*16*8+16 ; dec: 8*16*27 + 8*8*27 ; heads: 2 * 3*8*27
    cfg = NetConfig(channels=(8, 16), ds_levels=2)
    assert count_parameters(init_parameters(cfg)) == 224 + 520 + 3472 + 2064 + 3456 + 1728 + 1296 == 12760


def test_output_shapes(small_net, pair):
    raw_mf, raw_fm = small_net.symmetric_forward(*pair)
    assert [r.shape for r in raw_mf] == [(3, 16, 16, 16), (3, 8, 8, 8), (3, 4, 4, 4)]
    assert [r.shape for r in raw_fm] == [r.shape for r in raw_mf]


def test_rejects_indivisible_extent(small_net):
    with pytest.raises(ValueError, match="divisible by 8"):
        small_net.symmetric_forward(np.zeros((1, 12, 16, 16)), np.zeros((1, 12, 16, 16)))


def test_rejects_shape_mismatch(small_net):
    with pytest.raises(ValueError):
        small_net.symmetric_forward(np.zeros((1, 16, 16, 16)), np.zeros((1, 8, 16, 16)))


def test_ds_levels_bounds():
    with pytest.raises(ValueError):
        NetConfig(channels=(4, 8), ds_levels=3)


def test_heads_start_at_zero(small_net, pair):
    raw_mf, _ = small_net.symmetric_forward(*pair)
    for r in raw_mf:
        assert not r.data.any()


def test_swapping_inputs_swaps_outputs(small_net, pair):
    _randomize_heads(small_net)
    mf, fm = small_net.symmetric_forward(*pair)
    fm2, mf2 = small_net.symmetric_forward(pair[1], pair[0])
    for a, b in zip(mf + fm, mf2 + fm2):
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)


def test_self_pair_is_exact_identity(small_net, pair):
    _randomize_heads(small_net)
    mf, fm = small_net.symmetric_forward(pair[0], pair[0])
    for r in mf + fm:
        np.testing.assert_array_equal(r.data, 0.0)
    np.testing.assert_array_equal(field_from_raw(mf[0]).data, identity_grid((16, 16, 16)))


def test_end_to_end_gradient_double_precision():
    cfg = NetConfig(channels=(2, 2), ds_levels=2)
    params = init_parameters(cfg, seed=4, dtype=np.float64, zero_heads=False)
    net = RegistrationNet(cfg, params)
    rng = np.random.default_rng(9)
    mv, fx = rng.random((1, 4, 4, 4)), rng.random((1, 4, 4, 4))
    proj = [rng.standard_normal((3, 4 // 2 ** s, 4 // 2 ** s, 4 // 2 ** s)) for s in range(2)]

    def loss():
        mf, fm = net.symmetric_forward(mv, fx)
        out = None
        for r, q in zip(mf + fm, proj + proj):
            t = T.tsum(T.mul(r, T.Tensor(q)))
            out = t if out is None else T.add(out, t)
        return out

    with T.Tape() as tape:
        root = loss()
    tape.backward(root)
    for name in ("enc0.conv.weight", "enc1.down.bias", "dec0.conv.weight", "head1.weight"):
        p = params[name]
        numeric = numerical_grad(lambda: float(loss().data), p.data, 1e-5)
        ok, err, _ = grad_close(p.grad, numeric, 1e-6)
        assert ok, (name, err)


def test_parameter_names_are_stable():
    names = list(parameter_shapes(NetConfig(channels=(4, 8), ds_levels=1)))
    assert names == ["enc0.conv.weight", "enc0.conv.bias", "enc0.down.weight", "enc0.down.bias",
                     "enc1.conv.weight", "enc1.conv.bias", "enc1.down.weight", "enc1.down.bias",
                     "dec1.conv.weight", "dec0.conv.weight", "head0.weight"]
