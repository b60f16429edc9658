"""Synthetic fundus cohort: population sampler, renderer and outcome simulator.

Every risk factor is written into one known anatomical structure so that
attention maps can be graded against an exact answer:

=============  ==========================================  ==================
factor         image effect                                designated mask
=============  ==========================================  ==================
age            vessel tortuosity (mostly a fine sinuous     vessels + halo
               wiggle) and a central light reflex in the
               main vessels
sbp            vessel caliber                               vessels + halo
current smoker vessel hue shift toward blue                 vessels
gender         optic disc diameter and vertical elongation  optic disc
hba1c          brightness of the perivascular halo          perivascular band
bmi            linear illumination gradient                 whole fundus
dbp            radial illumination gradient                 whole fundus
ethnicity      global fundus pigmentation                   whole fundus
=============  ==========================================  ==================

Total cholesterol is never rendered; it only feeds the outcome model and
the SCORE comparator.
"""

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import optimize, stats

from . import seeding
from .errors import ConfigurationError, ContractError

ETHNICITIES = ("black", "asian_pi", "white", "other")

# log-odds per standard deviation of each standardized covariate
DEFAULT_HAZARD = {
    "age": 0.85,
    "sbp": 0.45,
    "current_smoker": 0.35,
    "gender_male": 0.55,
    "total_cholesterol": 0.30,
    "bmi": 0.15,
}
# calibrated by calibrate_intercept(CohortParams()) with 10**6 samples, seed 0;
# marginal 5-year event rate 105/11835
DEFAULT_INTERCEPT = -5.404416619021504
TARGET_EVENT_RATE = 105 / 11835


@dataclass(frozen=True)
class FactorMoments:
    mean: float
    sd: float
    lo: float
    hi: float


def _default_factors():
    # UK Biobank clinical validation column; HbA1c from EyePACS-2K (the only
    # source reporting it); cholesterol is a hidden covariate with a
    # population-typical value.
    return {
        "age": FactorMoments(56.9, 8.2, 40.0, 70.0),
        "bmi": FactorMoments(27.37, 4.79, 15.0, 60.0),
        "sbp": FactorMoments(136.89, 18.3, 80.0, 220.0),
        "dbp": FactorMoments(81.76, 9.87, 40.0, 130.0),
        "hba1c": FactorMoments(8.2, 2.13, 4.0, 16.0),
        "total_cholesterol": FactorMoments(5.7, 1.1, 2.5, 10.0),
    }


@dataclass(frozen=True)
class CohortParams:
    factors: dict = field(default_factory=_default_factors)
    male_fraction: float = 0.449
    smoker_fraction: float = 0.0987
    ethnicity_fractions: tuple = (0.013, 0.036, 0.901, 0.042)
    prior_event_rate: float = 91 / 12026
    hazard: dict = field(default_factory=lambda: dict(DEFAULT_HAZARD))
    intercept: float = DEFAULT_INTERCEPT
    image_size: int = 64
    images_per_patient: int = 2

    def validate(self):
        for name, m in self.factors.items():
            if not m.sd > 0:
                raise ConfigurationError(f"{name}: standard deviation must be positive")
            if not m.lo < m.mean < m.hi:
                raise ConfigurationError(f"{name}: mean {m.mean} outside support [{m.lo}, {m.hi}]")
        for name in ("male_fraction", "smoker_fraction", "prior_event_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name}={v} not in [0, 1]")
        fr = np.asarray(self.ethnicity_fractions, dtype=float)
        if len(fr) != len(ETHNICITIES) or (fr < 0).any() or fr.sum() <= 0:
            raise ConfigurationError("ethnicity_fractions must be 4 nonnegative weights")
        if set(self.hazard) != set(DEFAULT_HAZARD):
            raise ConfigurationError(f"hazard keys must be {sorted(DEFAULT_HAZARD)}")
        if self.image_size < 16 or self.image_size % 4:
            raise ConfigurationError("image_size must be a multiple of 4 and at least 16")
        if self.images_per_patient < 1:
            raise ConfigurationError("images_per_patient must be >= 1")
        return self


@dataclass(frozen=True)
class PatientRecord:
    id: str
    age: float
    gender_male: bool
    current_smoker: bool
    bmi: float
    sbp: float
    dbp: float
    hba1c: float
    ethnicity: str
    total_cholesterol: float
    prior_cardiac_event: bool
    mace_within_5_years: bool

    def check(self):
        ok = (40 <= self.age <= 70 and 80 <= self.sbp <= 220 and 40 <= self.dbp <= 130
              and self.dbp < self.sbp and 15 <= self.bmi <= 60 and 4 <= self.hba1c <= 16
              and self.ethnicity in ETHNICITIES)
        if not ok:
            raise ContractError(f"record {self.id} violates population invariants")
        return self


@dataclass(frozen=True)
class FundusScene:
    image: np.ndarray            # [3,H,W] float64 in [0,1]
    vessel_mask: np.ndarray      # [H,W] bool
    optic_disc_mask: np.ndarray
    perivascular_mask: np.ndarray
    fundus_mask: np.ndarray
    patient_id: str


# ---------------------------------------------------------------------------
# population


@lru_cache(maxsize=None)
def parent_normal(mean, sd, lo, hi):
    """(mu, sigma) of the normal whose truncation to [lo, hi] has the given mean and sd."""

    def moments(theta):
        mu, log_sigma = theta
        sigma = math.exp(log_sigma)
        a, b = (lo - mu) / sigma, (hi - mu) / sigma
        m, v = stats.truncnorm.stats(a, b, loc=mu, scale=sigma, moments="mv")
        return [(float(m) - mean) / sd, (math.sqrt(float(v)) - sd) / sd]

    sol = optimize.least_squares(moments, [mean, math.log(sd)], xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if max(abs(r) for r in sol.fun) > 1e-6:
        raise ConfigurationError(
            f"no truncated normal on [{lo}, {hi}] has mean {mean} and sd {sd}")
    return float(sol.x[0]), float(math.exp(sol.x[1]))


def _truncated(rng, m, n):
    """Rejection sampling from the parent normal of ``m``."""
    mu, sigma = parent_normal(m.mean, m.sd, m.lo, m.hi)
    out = np.empty(n)
    filled = 0
    while filled < n:
        draw = rng.normal(mu, sigma, size=max(2 * (n - filled), 16))
        draw = draw[(draw >= m.lo) & (draw <= m.hi)][: n - filled]
        out[filled:filled + len(draw)] = draw
        filled += len(draw)
    return out


def standardized_covariates(records, params):
    """Matrix [n, 6] of covariates standardized by the configured moments.

    Column order follows ``DEFAULT_HAZARD``.
    """
    f = params.factors
    cols = []
    for name in DEFAULT_HAZARD:
        if name in ("current_smoker", "gender_male"):
            p = params.smoker_fraction if name == "current_smoker" else params.male_fraction
            x = np.array([float(getattr(r, name)) for r in records])
            cols.append((x - p) / math.sqrt(p * (1 - p)))
        else:
            x = np.array([getattr(r, name) for r in records], dtype=float)
            cols.append((x - f[name].mean) / f[name].sd)
    return np.column_stack(cols)


def mace_probability(records, params):
    z = standardized_covariates(records, params)
    beta = np.array([params.hazard[k] for k in DEFAULT_HAZARD])
    return 1.0 / (1.0 + np.exp(-(params.intercept + z @ beta)))


def simulate_mace(record, params, seed):
    """Bernoulli 5-year MACE draw for one patient."""
    p = mace_probability([record], params)[0]
    return bool(seeding.derive_rng(seed, seeding.MACE).random() < p)


def sample_population(n, params=None, seed=0):
    """Draw ``n`` patients at the configured moments; deterministic per seed."""
    params = (params or CohortParams()).validate()
    if n < 1:
        raise ContractError("population size must be >= 1")
    rng = seeding.derive_rng(seed, seeding.POPULATION)
    f = params.factors
    age = _truncated(rng, f["age"], n)
    bmi = _truncated(rng, f["bmi"], n)
    sbp = _truncated(rng, f["sbp"], n)
    dbp = _truncated(rng, f["dbp"], n)
    # enforce dbp < sbp by redrawing offending diastolic values
    while (bad := dbp >= sbp).any():
        dbp[bad] = _truncated(rng, f["dbp"], int(bad.sum()))
    hba1c = _truncated(rng, f["hba1c"], n)
    chol = _truncated(rng, f["total_cholesterol"], n)
    male = rng.random(n) < params.male_fraction
    smoker = rng.random(n) < params.smoker_fraction
    fr = np.asarray(params.ethnicity_fractions, dtype=float)
    eth = rng.choice(len(ETHNICITIES), size=n, p=fr / fr.sum())
    prior = rng.random(n) < params.prior_event_rate
    width = max(6, len(str(n)))
    records = []
    for i in range(n):
        rec = PatientRecord(
            id=f"P{i:0{width}d}", age=float(age[i]), gender_male=bool(male[i]),
            current_smoker=bool(smoker[i]), bmi=float(bmi[i]), sbp=float(sbp[i]),
            dbp=float(dbp[i]), hba1c=float(hba1c[i]), ethnicity=ETHNICITIES[eth[i]],
            total_cholesterol=float(chol[i]), prior_cardiac_event=bool(prior[i]),
            mace_within_5_years=False)
        records.append(rec)
    p = mace_probability(records, params)
    for i, rec in enumerate(records):
        u = seeding.derive_rng(seed, seeding.MACE, i).random()
        records[i] = replace(rec, mace_within_5_years=bool(u < p[i]))
    return records


def calibrate_intercept(params=None, target=TARGET_EVENT_RATE, samples=10**6, seed=0, tol=1e-10):
    """Bisect the hazard intercept so the Monte Carlo marginal event rate hits ``target``.

    Uses one fixed covariate sample (common random numbers), so the rate is
    monotone in the intercept and bisection is exact up to ``tol``.
    """
    params = params or CohortParams()
    rng = seeding.derive_rng(seed, seeding.MACE, 0xCA1)
    f = params.factors
    cols = []
    for name in DEFAULT_HAZARD:
        if name in ("current_smoker", "gender_male"):
            p = params.smoker_fraction if name == "current_smoker" else params.male_fraction
            x = (rng.random(samples) < p).astype(float)
            cols.append((x - p) / math.sqrt(p * (1 - p)))
        else:
            cols.append((_truncated(rng, f[name], samples) - f[name].mean) / f[name].sd)
    lp = np.column_stack(cols) @ np.array([params.hazard[k] for k in DEFAULT_HAZARD])

    def rate(b0):
        return float(np.mean(1.0 / (1.0 + np.exp(-(b0 + lp)))))

    lo, hi = -30.0, 10.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def split_dataset(records, train_frac=0.8, tune_frac=0.1, seed=0):
    """Partition patients into (train, tune, validation); deterministic per seed.

    Splitting is by patient record, so every image of a patient follows it.
    """
    if not records:
        raise ContractError("cannot split an empty cohort")
    if not (train_frac > 0 and tune_frac > 0 and train_frac + tune_frac < 1):
        raise ContractError("fractions must be positive with train_frac + tune_frac < 1")
    n = len(records)
    order = seeding.derive_rng(seed, seeding.SPLIT).permutation(n)
    n_train = int(round(train_frac * n))
    n_tune = min(int(round(tune_frac * n)), n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_tune], order[n_train + n_tune:])
    return tuple([records[i] for i in sorted(p)] for p in parts)


# ---------------------------------------------------------------------------
# renderer

_PIGMENT = {"white": 1.0, "black": 0.62, "asian_pi": 0.78, "other": 0.88}
_BACKGROUND = np.array([0.80, 0.38, 0.16])
_VESSEL_TINT = np.array([0.55, 0.42, 0.45])
_SMOKER_TINT = np.array([0.47, 0.40, 0.64])
_HALO_COLOR = np.array([0.24, 0.22, 0.08])
_DISC_COLOR = np.array([0.98, 0.88, 0.60])
_NOISE_SD = 0.02
_HALO_WIDTH = 2.0
_REFLEX_HALFWIDTH = 0.6
_REFLEX_GAIN = 0.22
_TREE_DEPTH = 4
# (base angle, relative length) of the four main arcades, image coords (y down)
_ROOTS = ((-2.45, 0.36), (2.45, 0.36), (-0.85, 0.20), (0.85, 0.20))


def _unit(x, lo, hi):
    return min(max((x - lo) / (hi - lo), 0.0), 1.0)


def tortuosity(age):
    """Relative amplitude of the large-scale midpoint displacement.

    Kept shallow in age so that most of the age signal sits in the local
    wiggle and reflex, inside the vessels, rather than in the tree layout.
    """
    return 0.12 + 0.08 * _unit(age, 40.0, 70.0)


def wiggle_amplitude(age, size=64):
    """Amplitude in pixels of the short-wavelength centerline wiggle."""
    return size / 64 * (0.3 + 1.5 * _unit(age, 40.0, 70.0))


def vessel_halfwidth(sbp, size=64):
    """Half-width in pixels of a root vessel; children taper by 0.78 per level."""
    return size / 64 * (0.8 + 1.7 * _unit(sbp, 80.0, 220.0))


def _midpoint_offsets(u, amp):
    """Perpendicular offsets at 9 equally spaced knots by 3 levels of midpoint displacement."""
    off = np.zeros(9)
    k = 0
    step = 8
    level_amp = amp
    while step > 1:
        half = step // 2
        for left in range(0, 8, step):
            off[left + half] = 0.5 * (off[left] + off[left + step]) + level_amp * u[k]
            k += 1
        step = half
        level_amp *= 0.5
    return off


def _vessel_points(rng, origin, size, tort, wiggle_amp):
    """Dense centerline samples (y, x, depth) of the whole vessel tree.

    The number of random draws is independent of the factor values, so two
    renders with the same seed share every geometric choice except those
    scaled by ``tort`` and ``wiggle_amp``.
    """
    pts = []
    wavelength = 5.0 * size / 64

    def segment(p0, theta, length, depth):
        u = rng.uniform(-1.0, 1.0, size=11)
        theta = theta + 0.15 * u[0]
        length = length * (0.85 + 0.15 * u[1])
        direction = np.array([math.sin(theta), math.cos(theta)])
        normal = np.array([-direction[1], direction[0]])
        knots = _midpoint_offsets(u[2:9], tort * length * 0.5)
        n = max(int(length * 2.5), 8)
        s = np.linspace(0.0, 1.0, n)
        off = np.interp(s, np.linspace(0.0, 1.0, 9), knots)
        phase = math.pi * u[9]
        off = off + wiggle_amp * np.sin(2 * math.pi * s * length / wavelength + phase) * np.minimum(1.0, 4 * s)
        xy = p0[None, :] + s[:, None] * length * direction[None, :] + off[:, None] * normal[None, :]
        pts.append(np.column_stack([xy, np.full(n, depth)]))
        if depth + 1 < _TREE_DEPTH:
            spread = 0.38 + 0.22 * u[10]
            end = xy[-1]
            segment(end, theta - spread, length * 0.68, depth + 1)
            segment(end, theta + spread, length * 0.68, depth + 1)

    for base, rel in _ROOTS:
        segment(np.asarray(origin, dtype=float), base, rel * size, 0)
    return np.concatenate(pts)


def _stamp_field(points, halfwidths, size, reach):
    """max over centerline samples of (halfwidth - distance), on pixels within ``reach``."""
    field = np.full(size * size, -np.inf)
    r = int(math.ceil(reach))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    dy, dx = dy.ravel(), dx.ravel()
    cy = np.rint(points[:, 0]).astype(int)
    cx = np.rint(points[:, 1]).astype(int)
    py = cy[:, None] + dy[None, :]
    px = cx[:, None] + dx[None, :]
    d = np.hypot(py - points[:, 0:1], px - points[:, 1:2])
    val = halfwidths[:, None] - d
    inside = (py >= 0) & (py < size) & (px >= 0) & (px < size)
    np.maximum.at(field, (py * size + px)[inside], val[inside])
    return field.reshape(size, size)


def render_fundus(record, seed, size=64):
    """Render one fundus photograph of ``record`` with exact anatomical masks."""
    rng = seeding.derive_rng(seed, seeding.RENDER)
    noise = rng.normal(size=(3, size, size))
    jitter = rng.normal(size=3)

    c = (size - 1) / 2.0
    radius = 0.47 * size
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    rr = np.hypot(yy - c, xx - c) / radius
    fundus = rr <= 1.0

    # optic disc on the nasal (right) side
    dcy = c + 0.02 * size * jitter[0]
    dcx = c + 0.27 * size + 0.02 * size * jitter[1]
    male = float(record.gender_male)
    r_disc = size * (0.070 + 0.022 * male) * (1.0 + 0.04 * jitter[2])
    aspect = 1.0 + 0.18 * male
    ry, rx = r_disc * math.sqrt(aspect), r_disc / math.sqrt(aspect)
    rho = np.hypot((yy - dcy) / ry, (xx - dcx) / rx)
    disc = (rho <= 1.0) & fundus

    # vessel tree
    age_unit = _unit(record.age, 40.0, 70.0)
    pts = _vessel_points(rng, (dcy, dcx), size, tortuosity(record.age), wiggle_amplitude(record.age, size))
    hw = vessel_halfwidth(record.sbp, size) * 0.78 ** pts[:, 2]
    field = _stamp_field(pts, hw, size, reach=vessel_halfwidth(220.0, size) + _HALO_WIDTH + 1)
    vessel = (field > 0) & fundus & ~disc
    halo = (field > -_HALO_WIDTH) & fundus & ~disc & ~vessel

    # background with nonlocalized factors
    f = CohortParams().factors
    z_bmi = (record.bmi - f["bmi"].mean) / f["bmi"].sd
    z_dbp = (record.dbp - f["dbp"].mean) / f["dbp"].sd
    along = ((yy - c) + (xx - c)) / (math.sqrt(2) * radius)
    illum = (1.0 - 0.25 * rr**2) * (1.0 + 0.10 * np.clip(z_bmi, -3, 3) * along) \
        * (1.0 + 0.12 * np.clip(z_dbp, -3, 3) * (rr**2 - 0.5))
    base = _BACKGROUND * _PIGMENT[record.ethnicity]
    img = base[:, None, None] * illum[None]

    glow = _unit(record.hba1c, 4.0, 16.0)
    img = np.where(halo[None], img + glow * _HALO_COLOR[:, None, None], img)
    tint = _SMOKER_TINT if record.current_smoker else _VESSEL_TINT
    img = np.where(vessel[None], img * tint[:, None, None], img)
    # central light reflex along the main vessels brightens with age; the band
    # has a fixed width so it carries no caliber information
    main = pts[:, 2] <= 1
    band = _stamp_field(pts[main], np.full(int(main.sum()), _REFLEX_HALFWIDTH * size / 64), size,
                        reach=_REFLEX_HALFWIDTH * size / 64 + 1)
    reflex = vessel & (band > 0)
    img = np.where(reflex[None], img + _REFLEX_GAIN * age_unit, img)
    disc_px = _DISC_COLOR[:, None, None] * (1.0 - 0.15 * np.minimum(rho, 1.0) ** 2)[None]
    img = np.where(disc[None], disc_px, img)

    img = img + _NOISE_SD * noise
    img = np.where(fundus[None], np.clip(img, 0.0, 1.0), 0.0)
    for a in (img, vessel, disc, halo, fundus):
        a.setflags(write=False)
    return FundusScene(img, vessel, disc, halo, fundus, record.id)


def image_seed(seed, patient_index, image_index):
    return seeding.derive_seed(seed, seeding.RENDER, patient_index, image_index)


@dataclass
class CohortImages:
    """8-bit images for a list of patients; ``patient_index[i]`` indexes ``records``."""

    records: list
    images: np.ndarray           # [N,3,H,W] uint8
    patient_index: np.ndarray    # [N] int

    def __len__(self):
        return len(self.images)

    def subset(self, keep_records):
        ids = {r.id for r in keep_records}
        old = [i for i, r in enumerate(self.records) if r.id in ids]
        remap = {o: n for n, o in enumerate(old)}
        rows = np.array([k for k, p in enumerate(self.patient_index) if p in remap], dtype=int)
        return CohortImages([self.records[o] for o in old], self.images[rows],
                            np.array([remap[p] for p in self.patient_index[rows]], dtype=int))


def quantize(image):
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_cohort(records, seed, params=None, indices=None):
    """Render ``images_per_patient`` images per record, quantized to 8 bits.

    ``indices`` gives each record's position in the original cohort (for
    seed derivation); defaults to ``range(len(records))``.
    """
    params = params or CohortParams()
    per = params.images_per_patient
    size = params.image_size
    indices = range(len(records)) if indices is None else indices
    images = np.empty((len(records) * per, 3, size, size), dtype=np.uint8)
    owner = np.repeat(np.arange(len(records)), per)
    k = 0
    for rec, idx in zip(records, indices):
        for j in range(per):
            images[k] = quantize(render_fundus(rec, image_seed(seed, idx, j), size).image)
            k += 1
    return CohortImages(list(records), images, owner)
