import math

import numpy as np
import pytest
import torch

from cephmark.data import Frame, LandmarkSet
from cephmark.errors import ContractError
from cephmark.targets import (
    TargetConfig,
    TargetMaps,
    heat_loss,
    make_targets,
    offset_loss,
    total_loss,
)


def _single(points, extent=(128, 128), radius=8, dtype=torch.float64):
    landmarks = LandmarkSet(points=np.asarray(points, dtype=np.float64), frame=Frame.NETWORK)
    return make_targets(landmarks, extent, TargetConfig(radius=radius), dtype=dtype)


def test_pixel_at_landmark():
    t = _single([[20.0, 30.0]])
    assert t.heat[0, 30, 20] == 1.0
    assert t.offsets[0, 0, 30, 20] == 0.0
    assert t.offsets[0, 1, 30, 20] == 0.0


def test_pixel_at_radius_boundary():
    t = _single([[40.0, 50.0]], radius=8)
    # pixel at l - (R, 0): offset (1, 0) and heat 1
    assert t.heat[0, 50, 32] == 1.0
    assert t.offsets[0, 0, 50, 32] == 1.0
    assert t.offsets[0, 1, 50, 32] == 0.0


def test_pixel_just_outside_disk():
    t = _single([[40.0, 50.0]], radius=8)
    # pixel at distance 9 > R
    assert t.heat[0, 50, 31] == 0.0
    assert t.mask[0, 50, 31] == 0.0


def test_mask_equals_heat_equals_disk():
    rng = np.random.default_rng(0)
    pts = rng.uniform(20, 100, size=(3, 2))
    t = _single(pts, radius=8)
    for k, (lx, ly) in enumerate(pts):
        ys, xs = np.mgrid[0:128, 0:128]
        inside = (xs - lx) ** 2 + (ys - ly) ** 2 <= 64.0
        np.testing.assert_array_equal(t.heat[k].numpy(), inside.astype(np.float64))
        np.testing.assert_array_equal(t.mask[k].numpy(), inside.astype(np.float64))


def test_interior_disk_population_r40():
    t = _single([[100.0, 100.0]], extent=(200, 200), radius=40)
    population = int(t.mask.sum())
    # brute-force lattice count
    ys, xs = np.mgrid[0:200, 0:200]
    expect = np.count_nonzero((xs - 100.0) ** 2 + (ys - 100.0) ** 2 <= 1600.0)
    assert population == expect
    assert abs(population - math.pi * 1600) <= 0.01 * math.pi * 1600


def test_offset_roundtrip_exact_dyadic_radius():
    rng = np.random.default_rng(1)
    for radius in (4, 8, 16):
        # dyadic-lattice coordinates keep (l - x) exactly representable, so the
        # round-trip through the power-of-two radius is bit-exact
        pts = np.round(rng.uniform(radius + 1, 100 - radius - 1, size=(2, 2)) * 2**20) / 2**20
        t = _single(pts, extent=(100, 100), radius=radius)
        mask = t.mask.numpy().astype(bool)
        ys, xs = np.mgrid[0:100, 0:100]
        for k, (lx, ly) in enumerate(pts):
            m = mask[k]
            back_x = xs[m] + radius * t.offsets[k, 0].numpy()[m]
            back_y = ys[m] + radius * t.offsets[k, 1].numpy()[m]
            assert np.all(back_x == lx)
            assert np.all(back_y == ly)


def test_offset_roundtrip_r40_near_exact():
    rng = np.random.default_rng(2)
    pts = rng.uniform(45, 150, size=(2, 2))
    t = _single(pts, extent=(200, 200), radius=40)
    mask = t.mask.numpy().astype(bool)
    ys, xs = np.mgrid[0:200, 0:200]
    for k, (lx, ly) in enumerate(pts):
        m = mask[k]
        np.testing.assert_allclose(xs[m] + 40 * t.offsets[k, 0].numpy()[m], lx, atol=1e-12)
        np.testing.assert_allclose(ys[m] + 40 * t.offsets[k, 1].numpy()[m], ly, atol=1e-12)


def test_offset_magnitude_bounded_inside_mask():
    t = _single([[64.0, 64.0]], radius=8)
    assert float(t.offsets.abs().max()) <= 1.0


def test_center_landmark_dihedral_symmetry():
    t = _single([[32.0, 32.0]], extent=(65, 65), radius=8)
    heat = t.heat[0].numpy()
    np.testing.assert_array_equal(heat, heat.T)
    np.testing.assert_array_equal(heat, np.flip(heat, axis=0))
    np.testing.assert_array_equal(heat, np.flip(heat, axis=1))
    off_x = t.offsets[0, 0].numpy()
    off_y = t.offsets[0, 1].numpy()
    # x-flip negates the x offsets and preserves the y offsets
    np.testing.assert_array_equal(off_x, -np.flip(off_x, axis=1))
    np.testing.assert_array_equal(off_y, np.flip(off_y, axis=1))
    # transposition swaps the two channels
    np.testing.assert_array_equal(off_x, off_y.T)


def test_out_of_bounds_landmark_rejected():
    with pytest.raises(ContractError):
        _single([[200.0, 10.0]], extent=(128, 128))


def test_wrong_frame_rejected():
    landmarks = LandmarkSet(points=np.array([[10.0, 10.0]]), frame=Frame.ORIGINAL)
    with pytest.raises(ContractError):
        make_targets(landmarks, (64, 64), TargetConfig(radius=8))


def test_heat_loss_perfect_prediction():
    t = _single([[30.0, 30.0]])
    loss = heat_loss(t.heat.clone(), t)
    assert float(loss) <= 1e-6


def test_heat_loss_half_probability():
    t = _single([[30.0, 30.0]])
    loss = heat_loss(torch.full_like(t.heat, 0.5), t)
    assert float(loss) == pytest.approx(math.log(2.0), rel=1e-12)


def test_heat_loss_single_pixel_value():
    maps = TargetMaps(
        heat=torch.ones(1, 1, 1, dtype=torch.float64),
        offsets=torch.zeros(1, 2, 1, 1, dtype=torch.float64),
        mask=torch.ones(1, 1, 1, dtype=torch.float64),
    )
    loss = heat_loss(torch.full((1, 1, 1), 0.25, dtype=torch.float64), maps)
    assert float(loss) == pytest.approx(-math.log(0.25), rel=1e-12)


def test_offset_loss_exact_and_constant_shift():
    t = _single([[40.0, 40.0]])
    assert float(offset_loss(t.offsets.clone(), t)) == 0.0
    shifted = t.offsets + 0.3
    assert float(offset_loss(shifted, t)) == pytest.approx(0.3, rel=1e-12)


def test_offset_loss_hand_computed_mean():
    mask = torch.zeros(1, 2, 2, dtype=torch.float64)
    mask[0, 0, 0] = 1.0
    mask[0, 1, 1] = 1.0
    target = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    pred = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    pred[0, 0, 0, 0] = 0.1
    pred[0, 1, 0, 0] = 0.2
    pred[0, 0, 1, 1] = 0.3
    pred[0, 1, 1, 1] = 0.4
    maps = TargetMaps(heat=mask.clone(), offsets=target, mask=mask)
    assert float(offset_loss(pred, maps)) == pytest.approx(0.25, rel=1e-12)


def test_offset_loss_empty_mask_is_zero():
    maps = TargetMaps(
        heat=torch.zeros(1, 4, 4),
        offsets=torch.zeros(1, 2, 4, 4),
        mask=torch.zeros(1, 4, 4),
    )
    assert float(offset_loss(torch.randn(1, 2, 4, 4), maps)) == 0.0


def test_total_loss_values():
    cfg = TargetConfig(radius=8, alpha=2.0 / 3.0)
    assert float(total_loss(torch.tensor(3.0), torch.tensor(0.0), cfg)) == pytest.approx(2.0)
    assert float(total_loss(torch.tensor(0.0), torch.tensor(3.0), cfg)) == pytest.approx(1.0)
    for alpha in (0.1, 0.5, 0.9):
        cfg2 = TargetConfig(radius=8, alpha=alpha)
        v = torch.tensor(1.7)
        assert float(total_loss(v, v, cfg2)) == pytest.approx(1.7)


def test_total_loss_monotone():
    cfg = TargetConfig(radius=8)
    base = float(total_loss(torch.tensor(1.0), torch.tensor(1.0), cfg))
    assert float(total_loss(torch.tensor(1.5), torch.tensor(1.0), cfg)) > base
    assert float(total_loss(torch.tensor(1.0), torch.tensor(1.5), cfg)) > base


def test_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    t = _single([[20.0, 22.0]], extent=(48, 48), radius=8)
    cfg = TargetConfig(radius=8)
    pred_heat = torch.rand(1, 48, 48, dtype=torch.float64).clamp(0.05, 0.95).requires_grad_(True)
    pred_off = torch.randn(1, 2, 48, 48, dtype=torch.float64).requires_grad_(True)
    loss = total_loss(heat_loss(pred_heat, t), offset_loss(pred_off, t), cfg)
    loss.backward()
    h = 1e-6
    rng = np.random.default_rng(3)
    for tensor in (pred_heat, pred_off):
        flat = tensor.detach().reshape(-1)
        grad = tensor.grad.reshape(-1)
        for idx in rng.choice(flat.numel(), size=25, replace=False):
            orig = float(flat[idx])
            flat[idx] = orig + h
            lp = float(total_loss(heat_loss(pred_heat.detach(), t), offset_loss(pred_off.detach(), t), cfg))
            flat[idx] = orig - h
            lm = float(total_loss(heat_loss(pred_heat.detach(), t), offset_loss(pred_off.detach(), t), cfg))
            flat[idx] = orig
            numeric = (lp - lm) / (2 * h)
            analytic = float(grad[idx])
            denom = max(abs(numeric), abs(analytic), 1e-8)
            assert abs(numeric - analytic) / denom < 1e-6
