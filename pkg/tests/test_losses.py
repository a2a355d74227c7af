import warnings

import numpy as np
import pytest

from gradreg import tensor as T
from gradreg.losses import (
    DICE_EPS,
    LossWeights,
    NoAvailableLabelsWarning,
    PairTargets,
    mse,
    ncc,
    partial_dice,
    similarity,
    smoothness,
    soft_dice,
    total_loss,
)
from gradreg.network import NetConfig, RegistrationNet
from gradreg.volume_io import LabelMap, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(3)


def _onehot(labels, k):
    return np.eye(k)[labels].transpose(3, 0, 1, 2)


def test_mse_hand_value():
    assert mse(np.array([1.0, 2.0]), np.array([0.0, 4.0])).item() == 2.5


def test_ncc_perfect_and_anti(rng):
    a = rng.random((1, 4, 4, 4))
    assert abs(ncc(a, 3 * a + 1).item()) < 1e-12
    assert abs(ncc(a, -a).item() - 2.0) < 1e-12


def test_ncc_constant_input_is_one(rng):
    assert ncc(np.full((1, 3, 3, 3), 0.4), rng.random((1, 3, 3, 3))).item() == 1.0


def test_unknown_similarity():
    with pytest.raises(ValueError, match="ssd"):
        similarity("ssd")


def test_dice_perfect_prediction_is_zero(rng):
    hot = _onehot(rng.integers(0, 3, (4, 4, 4)), 3)
    assert soft_dice(hot, hot).item() < 1e-6


def test_dice_hand_value():
    # class 1: pred mass 2 on target voxels, 2 elsewhere, target size 4 -> dice 2*2/(4+4)
    target = np.zeros((2, 1, 1, 8))
    target[1, 0, 0, :4] = 1
    target[0] = 1 - target[1]
    pred = np.zeros_like(target)
    pred[1, 0, 0, [0, 1, 4, 5]] = 1
    pred[0] = 1 - pred[1]
    expected = 1 - (2 * 2 + DICE_EPS) / (4 + 4 + DICE_EPS)
    assert abs(soft_dice(pred, target).item() - expected) < 1e-12


def test_missing_class_gets_no_gradient(rng):
    hot = _onehot(rng.integers(0, 3, (4, 4, 4)), 3)
    pred = T.Tensor(rng.uniform(0.1, 0.9, hot.shape), requires_grad=True)
    with T.Tape() as tape:
        loss = partial_dice(pred, hot, np.array([True, True, False]))
    tape.backward(loss)
    assert not pred.grad[2].any()
    assert pred.grad[1].any()


def test_no_available_class_warns():
    with pytest.warns(NoAvailableLabelsWarning):
        out = partial_dice(np.ones((2, 2, 2, 2)), np.ones((2, 2, 2, 2)), np.array([True, False]))
    assert out.item() == 0.0


def test_smoothness_zero_at_identity_increment():
    assert smoothness(T.Tensor(np.ones((3, 2, 2, 2)))).item() == 0.0
    assert smoothness(T.Tensor(np.full((3, 2, 2, 2), 1.5))).item() == 0.25


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(gamma=-1)


def _case(rng, n=8, k=3):
    m = Volume(rng.random((1, n, n, n)).astype(np.float32))
    f = Volume(rng.random((1, n, n, n)).astype(np.float32))
    return m, f, LabelMap(rng.integers(0, k, (n,) * 3), k), LabelMap(rng.integers(0, k, (n,) * 3), k)


def test_total_loss_is_swap_invariant(rng):
    m, f, ms, fs = _case(rng)
    net = RegistrationNet(NetConfig(channels=(4, 4, 4), ds_levels=3), seed=0)
    for name, p in net.params.items():
        if name.startswith("head"):
            p.data = rng.standard_normal(p.shape).astype(np.float32) * 0.3
    w = LossWeights(1, 1, 0.1)
    mf, fm = net.symmetric_forward(m, f)
    a, _ = total_loss(m, f, (ms, fs), mf, fm, w)
    b, _ = total_loss(f, m, (fs, ms), fm, mf, w)
    assert a.item() == b.item()


def test_report_keys_and_total(rng):
    m, f, ms, fs = _case(rng)
    zeros = [T.Tensor(np.zeros((3,) + (8 // 2 ** s,) * 3, np.float32)) for s in range(3)]
    loss, rep = total_loss(m, f, (ms, fs), zeros, zeros, LossWeights())
    assert set(rep.terms) == {"mf/sim", "mf/sup", "mf/smo", "fm/sim", "fm/sup", "fm/smo", "total"}
    assert rep.terms["mf/smo"] == 0.0
    assert rep.terms["total"] == pytest.approx(loss.item())


def test_unsupervised_pair_skips_dice(rng):
    m, f, _, _ = _case(rng)
    zeros = [T.Tensor(np.zeros((3,) + (8 // 2 ** s,) * 3, np.float32)) for s in range(3)]
    _, rep = total_loss(m, f, None, zeros, zeros, LossWeights())
    assert "mf/sup" not in rep.terms


def test_head_count_must_match_weights(rng):
    m, f, ms, fs = _case(rng)
    zeros = [T.Tensor(np.zeros((3, 8, 8, 8), np.float32))]
    with pytest.raises(ValueError, match="deep-supervision"):
        total_loss(m, f, (ms, fs), zeros, zeros, LossWeights())


def test_cached_targets_match_rebuilt(rng):
    m, f, ms, fs = _case(rng)
    zeros = [T.Tensor(np.zeros((3,) + (8 // 2 ** s,) * 3, np.float32)) for s in range(3)]
    tg = PairTargets.build(m, f, ms, fs, 3)
    a, _ = total_loss(m, f, (ms, fs), zeros, zeros, LossWeights(), targets=tg)
    b, _ = total_loss(f, m, (fs, ms), zeros, zeros, LossWeights(), targets=tg.swapped())
    c, _ = total_loss(m, f, (ms, fs), zeros, zeros, LossWeights())
    assert a.item() == b.item() == c.item()


def test_fully_available_runs_without_warning(rng):
    m, f, ms, fs = _case(rng)
    zeros = [T.Tensor(np.zeros((3,) + (8 // 2 ** s,) * 3, np.float32)) for s in range(3)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        total_loss(m, f, (ms, fs), zeros, zeros, LossWeights())


def test_partial_with_full_availability_equals_soft(rng):
    hot = _onehot(rng.integers(0, 4, (3, 4, 5)), 4)
    pred = rng.uniform(0.05, 0.95, hot.shape)
    assert partial_dice(pred, hot, np.ones(4, bool)).item() == soft_dice(pred, hot).item()
