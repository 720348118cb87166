import numpy as np
import pytest

from ctqubits import clock, dimer as dm
from ctqubits.constants import MU_B
from ctqubits.spin_core import EXPERIMENTAL, PRESET_GAPS, SpinSystemParams, preset


def test_first_ct(params):
    pt = clock.first_ct(params)
    assert pt.b_min_mt == pytest.approx(24.0, abs=0.1)
    assert pt.f_ct == pytest.approx(9.1, rel=1e-6)
    assert pt.level_pair == clock.CT_PAIR


def test_four_anticrossings(params):
    pts = clock.find_anticrossings(params, b_range=(0.0, 300.0))
    np.testing.assert_allclose([p.b_min_mt for p in pts], [24, 72, 120, 168], atol=1e-3)


def test_mirrored_range(params):
    neg = clock.find_anticrossings(params, b_range=(-50.0, 0.0))
    assert len(neg) == 1
    assert neg[0].b_min_mt == pytest.approx(-24.0, abs=1e-3)
    assert neg[0].f_ct == pytest.approx(clock.first_ct(params).f_ct, rel=1e-9)


def test_two_level_toy():
    # Effective doublet with I = 1/2: (D/2) sx + (g mu_B B 4 + A 4 / 2 * (-1)) sz per sector
    from ctqubits.spin_core import AngularMomentumSpec
    p = SpinSystemParams(a_z=0.4, cf={(4, 4): 2.0}, nuclear=AngularMomentumSpec(0.5))
    pts = clock.find_anticrossings(p, level_pair=(1, 2), b_range=(0.0, 50.0))
    bmin = 0.4 * 0.5 / (1.25 * MU_B) * 1e3
    assert pts[0].b_min_mt == pytest.approx(bmin, abs=1e-4)
    assert pts[0].f_ct == pytest.approx(2.0, abs=1e-9)


def test_local_minimality(params):
    for p in clock.find_anticrossings(params, b_range=(0.0, 200.0)):
        gap = clock.gap_function(params)
        step = clock.PRESCAN_STEP_MT
        assert gap(p.b_min_mt - step) >= p.f_ct and gap(p.b_min_mt + step) >= p.f_ct


def test_no_ct_in_range(params):
    assert clock.find_anticrossings(params, b_range=(30.0, 60.0)) == []
    assert clock.first_ct(params, b_range=(30.0, 40.0)) is None


def test_zero_field_pairs(params):
    ev = clock.energies_on_grid(params, [0.0])[0]
    # at B = 0 the +-M_I sectors are degenerate: levels come in pairs
    np.testing.assert_allclose(ev[0::2], ev[1::2], atol=1e-9)


def test_level_diagram_tracking(params):
    diag = clock.level_diagram(params, np.linspace(0, 50, 201))
    assert diag.energies.shape == (201, 16)
    assert diag.min_overlap >= 0.9


def test_level_diagram_coarse_grid_raises(params):
    with pytest.raises(clock.GridTooCoarseError):
        clock.level_diagram(params, [0.0, 300.0])


def test_level_diagram_rejects_bad_grid(params):
    with pytest.raises(ValueError):
        clock.level_diagram(params, [])
    with pytest.raises(ValueError):
        clock.level_diagram(params, [0.0, 2.0, 1.0])


def test_ct_scales_with_az(params):
    b1 = clock.first_ct(params, b_range=(0, 100)).b_min_mt
    b2 = clock.first_ct(params.replace(a_z=2 * params.a_z), b_range=(0, 100)).b_min_mt
    assert b2 / b1 == pytest.approx(2.0, rel=1e-6)


def test_calibrate_recovers_preset():
    start = preset().replace(a_z=0.7).with_cf((4, 4), 8.0)
    targets = clock.CalibrationTarget({"b_min_mt": (24.0, 1.0), "f_ct": (9.1, 1.0)})
    res = clock.calibrate(start, targets, ["a_z", "gap"], tol=1e-7)
    assert res.residual < 1e-6
    assert res.params.a_z == pytest.approx(preset().a_z, rel=1e-5)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))
    assert "residual" in res.report()


def test_calibrate_fixed_point(params):
    targets = clock.CalibrationTarget({"b_min_mt": (24.0, 1.0), "f_ct": (PRESET_GAPS[EXPERIMENTAL], 1.0)})
    res = clock.calibrate(params, targets, ["a_z", "gap"])
    assert res.params == params and res.iterations == 0


def test_calibrate_infeasible(params):
    targets = clock.CalibrationTarget({"b_min_mt": (24.0, 1.0), "f_ct": (0.0, 1.0)})
    with pytest.raises(clock.CalibrationError) as info:
        clock.calibrate(params, targets, ["gap", "a_z"], max_iter=30)
    assert info.value.best_residual > 0


def test_calibration_target_validation():
    with pytest.raises(ValueError):
        clock.CalibrationTarget({})
    with pytest.raises(ValueError):
        clock.CalibrationTarget({"nonsense": (1.0, 1.0)})


def test_protection_profile_ct(params):
    prof = clock.protection_profile(params, clock.CT_PAIR, [24.0])
    assert abs(prof.df_db[0]) < 1e-6
    assert prof.d2f_db2[0] > 1e-4


def test_protection_profile_constant_toy():
    prof = clock.protection_profile_fn(lambda b: 5.0, [0.0, 10.0, 20.0])
    assert np.all(prof.df_db == 0) and np.all(prof.d2f_db2 == 0)
    assert prof.flat_points(1e-9, 1e-9).all()


def test_dimer_flip_flop_flatter_than_ct(params, dimer):
    single = clock.protection_profile(params, clock.CT_PAIR, [24.0]).d2f_db2[0]
    pair = clock.protection_profile_fn(lambda b: dm.flip_flop_splitting(dimer, b), [24.0], h=0.05).d2f_db2[0]
    assert abs(pair) < abs(single)
