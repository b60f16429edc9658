import dataclasses
import math

import numpy as np
import pytest

from retina_risk import synthcohort as sc
from retina_risk.errors import ConfigurationError, ContractError


@pytest.fixture(scope="module")
def big_cohort():
    return sc.sample_population(10_000, seed=2024)


def test_population_moments(big_cohort):
    age = np.array([r.age for r in big_cohort])
    sbp = np.array([r.sbp for r in big_cohort])
    male = np.mean([r.gender_male for r in big_cohort])
    assert abs(age.mean() - 56.9) <= 0.3
    assert abs(sbp.mean() - 136.89) <= 0.6
    assert abs(male - 0.449) <= 0.015


def test_moment_fidelity_four_standard_errors(big_cohort):
    n = len(big_cohort)
    for name, m in sc.CohortParams().factors.items():
        v = np.array([getattr(r, name) for r in big_cohort])
        assert abs(v.mean() - m.mean) <= 4 * v.std() / math.sqrt(n), name


def test_record_invariants(big_cohort):
    for r in big_cohort[:2000]:
        r.check()
        assert 40 <= r.age <= 70 and r.dbp < r.sbp
    ids = [r.id for r in big_cohort]
    assert len(set(ids)) == len(ids)


def test_single_and_deterministic():
    [one] = sc.sample_population(1, seed=5)
    one.check()
    assert sc.sample_population(50, seed=9) == sc.sample_population(50, seed=9)
    assert sc.sample_population(50, seed=9) != sc.sample_population(50, seed=10)
    with pytest.raises(ContractError):
        sc.sample_population(0)


def test_invalid_params():
    bad = dataclasses.replace(sc.CohortParams(), male_fraction=1.5)
    with pytest.raises(ConfigurationError):
        sc.sample_population(10, bad)


# --- rendering ------------------------------------------------------------------


def base_record(**kw):
    rec = sc.sample_population(1, seed=1)[0]
    fixed = dict(age=55.0, sbp=130.0, dbp=80.0, bmi=27.0, hba1c=7.0, gender_male=False,
                 current_smoker=False, ethnicity="white")
    fixed.update(kw)
    return dataclasses.replace(rec, **fixed)


def test_render_deterministic_and_shapes():
    rec = base_record()
    a, b = sc.render_fundus(rec, 3), sc.render_fundus(rec, 3)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.image.shape == (3, 64, 64)
    for m in (a.vessel_mask, a.optic_disc_mask, a.perivascular_mask, a.fundus_mask):
        assert m.shape == (64, 64)
    assert a.image.min() >= 0 and a.image.max() <= 1


def test_mask_invariants():
    for seed, rec in enumerate(sc.sample_population(20, seed=4)):
        s = sc.render_fundus(rec, seed)
        assert not (s.perivascular_mask & s.vessel_mask).any()
        assert s.fundus_mask.any()
        assert not s.image[:, ~s.fundus_mask].any()


def mean_run_length(mask):
    """Average length of horizontal runs of True pixels."""
    runs = []
    for row in mask:
        n = 0
        for v in row:
            if v:
                n += 1
            elif n:
                runs.append(n)
                n = 0
        if n:
            runs.append(n)
    return sum(runs) / len(runs)


def test_sbp_increases_vessel_width():
    widths = []
    for sbp in (100.0, 130.0, 160.0, 190.0):
        rec = base_record(sbp=sbp, dbp=70.0)
        widths.append(np.mean([mean_run_length(sc.render_fundus(rec, s).vessel_mask) for s in range(4)]))
    assert all(b > a for a, b in zip(widths, widths[1:]))
    lo = mean_run_length(sc.render_fundus(base_record(sbp=110.0), 0).vessel_mask)
    hi = mean_run_length(sc.render_fundus(base_record(sbp=180.0), 0).vessel_mask)
    assert hi > lo


@pytest.mark.parametrize("field,a,b,masks", [
    ("current_smoker", False, True, ("vessel",)),
    ("hba1c", 5.0, 14.0, ("perivascular",)),
    ("gender_male", False, True, ("optic_disc",)),
    ("age", 42.0, 68.0, ("vessel", "perivascular")),
    ("sbp", 100.0, 200.0, ("vessel", "perivascular")),
])
def test_mask_exactness(field, a, b, masks):
    for seed in range(3):
        sa = sc.render_fundus(base_record(**{field: a}), seed)
        sb = sc.render_fundus(base_record(**{field: b}), seed)
        changed = (sa.image != sb.image).any(axis=0)
        allowed = np.zeros_like(changed)
        for m in masks:
            allowed |= getattr(sa, m + "_mask") | getattr(sb, m + "_mask")
        assert changed.any()
        assert not (changed & ~allowed).any()


# --- MACE ------------------------------------------------------------------------


def test_mace_rate_calibrated():
    recs = sc.sample_population(50_000, seed=77)
    rate = np.mean([r.mace_within_5_years for r in recs])
    assert 0.006 <= rate <= 0.012


def test_mace_degenerate_half():
    params = dataclasses.replace(sc.CohortParams(), hazard={k: 0.0 for k in sc.DEFAULT_HAZARD},
                                 intercept=0.0)
    recs = sc.sample_population(4000, params, seed=1)
    assert abs(np.mean([r.mace_within_5_years for r in recs]) - 0.5) < 0.03


def test_default_intercept_matches_calibration():
    # bisection against the 1e6-sample Monte Carlo reproduces the frozen constant
    assert sc.calibrate_intercept(sc.CohortParams(), samples=10**6) == pytest.approx(
        sc.DEFAULT_INTERCEPT, abs=1e-8)


# --- split ------------------------------------------------------------------------


def test_split_sizes_and_disjoint():
    recs = sc.sample_population(100, seed=3)
    tr, tu, va = sc.split_dataset(recs, 0.8, 0.1, seed=1)
    assert (len(tr), len(tu), len(va)) == (80, 10, 10)
    ids = [set(r.id for r in p) for p in (tr, tu, va)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set().union(*ids) == {r.id for r in recs}
    assert sc.split_dataset(recs, 0.8, 0.1, seed=1) == (tr, tu, va)


def test_split_single_patient():
    recs = sc.sample_population(1, seed=3)
    parts = sc.split_dataset(recs, 0.8, 0.1)
    assert sum(len(p) for p in parts) == 1
    with pytest.raises(ContractError):
        sc.split_dataset([], 0.8, 0.1)


def test_images_follow_patients():
    recs = sc.sample_population(30, seed=8)
    imgs = sc.render_cohort(recs, seed=8)
    assert len(imgs) == 60
    parts = [imgs.subset(p) for p in sc.split_dataset(recs, 0.6, 0.2, seed=2)]
    owners = [set(p.records[i].id for i in p.patient_index) for p in parts]
    assert sum(len(p) for p in parts) == 60
    assert not (owners[0] & owners[1] or owners[0] & owners[2] or owners[1] & owners[2])
    for p in parts:
        for i in range(len(p.records)):
            assert np.sum(p.patient_index == i) == 2
