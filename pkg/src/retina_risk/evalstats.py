"""Evaluation metrics, patient-level bootstrap, SCORE comparator and report tables."""

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import seeding
from .errors import ContractError, DataError, FitError, MetricError, RangeError, \
    UndefinedMetricError, UnstableMetricError

# ---------------------------------------------------------------------------
# point metrics


def _pair(pred, actual):
    p = np.asarray(pred, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    if len(p) != len(a):
        raise ContractError(f"length mismatch: {len(p)} predictions vs {len(a)} actuals")
    if len(p) == 0:
        raise ContractError("metric needs at least one sample")
    return p, a


def mae(pred, actual):
    p, a = _pair(pred, actual)
    return float(np.mean(np.abs(p - a)))


def r2(pred, actual):
    p, a = _pair(pred, actual)
    if len(a) < 2:
        raise ContractError("R² needs at least two samples")
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("R² undefined for constant actuals")
    return 1.0 - float(np.sum((a - p) ** 2)) / ss_tot


def auc(scores, labels):
    """Area under the ROC curve by the trapezoid rule over distinct thresholds.

    Tied scores form one ROC step, which is the Mann-Whitney convention of
    counting ties as one half.
    """
    s, y = _pair(scores, labels)
    y = y.astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each block of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0, tp] / n_pos
    fpr = np.r_[0, fp] / n_neg
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def kappa(pred_labels, actual_labels, k=None):
    """Unweighted Cohen's kappa."""
    p = np.asarray(pred_labels).ravel()
    a = np.asarray(actual_labels).ravel()
    if len(p) != len(a) or len(p) == 0:
        raise ContractError("kappa needs equal, nonzero lengths")
    classes = np.unique(np.r_[p, a])
    idx = {c: i for i, c in enumerate(classes)}
    m = len(classes) if k is None else max(k, len(classes))
    conf = np.zeros((m, m))
    for x, y in zip(p, a):
        conf[idx[x], idx[y]] += 1
    return kappa_from_confusion(conf)


def kappa_from_confusion(conf):
    conf = np.asarray(conf, dtype=float)
    n = conf.sum()
    p_o = np.trace(conf) / n
    p_e = float(conf.sum(axis=0) @ conf.sum(axis=1)) / n**2
    if p_e >= 1.0:
        raise UndefinedMetricError("kappa undefined when chance agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


def baseline_mae(actual, reference_mean=None):
    """MAE of the constant predictor ``reference_mean`` (default: the actuals' own mean)."""
    a = np.asarray(actual, dtype=float).ravel()
    if len(a) == 0:
        raise ContractError("baseline needs at least one sample")
    ref = a.mean() if reference_mean is None else float(reference_mean)
    return float(np.mean(np.abs(a - ref)))


# ---------------------------------------------------------------------------
# patient aggregation


@dataclass
class PatientPrediction:
    patient_id: str
    values: dict            # head -> float, or probability vector for categorical heads
    labels: dict            # head -> label (float or class index)
    available: dict         # head -> bool


def aggregate_by_patient(patient_ids, predictions, labels=None, available=None):
    """Average image-level predictions per patient, preserving first-seen order.

    ``predictions`` maps head -> array with one row per image.  ``labels``
    and ``available`` (same layout) must agree within a patient.
    """
    ids = list(patient_ids)
    order, groups = [], {}
    for i, pid in enumerate(ids):
        if pid not in groups:
            groups[pid] = []
            order.append(pid)
        groups[pid].append(i)
    labels = labels or {}
    available = available or {}
    out = []
    for pid in order:
        rows = groups[pid]
        vals = {h: np.asarray(v)[rows].mean(axis=0) for h, v in predictions.items()}
        vals = {h: (float(v) if np.ndim(v) == 0 else v) for h, v in vals.items()}
        labs, avail = {}, {}
        for h, v in labels.items():
            col = np.asarray(v)[rows]
            if not (col == col[0]).all():
                raise DataError(f"conflicting {h} labels for patient {pid}")
            labs[h] = col[0].item() if hasattr(col[0], "item") else col[0]
        for h, v in available.items():
            col = np.asarray(v)[rows]
            if not (col == col[0]).all():
                raise DataError(f"conflicting {h} availability for patient {pid}")
            avail[h] = bool(col[0])
        out.append(PatientPrediction(pid, vals, labs, avail))
    return out


# ---------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class ConfidenceInterval:
    point: float
    lo: float
    hi: float
    replicates: int = 2000
    skipped: int = 0

    @property
    def half_width(self):
        return (self.hi - self.lo) / 2.0

    def as_dict(self):
        return {"point": self.point, "lo": self.lo, "hi": self.hi,
                "replicates": self.replicates, "skipped": self.skipped}


def _take(data, idx):
    if isinstance(data, (list, tuple)) and not isinstance(data, np.ndarray) \
            and data and isinstance(data[0], np.ndarray):
        return type(data)(d[idx] for d in data)
    if isinstance(data, np.ndarray):
        return data[idx]
    return [data[i] for i in idx]


def _length(data):
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], np.ndarray):
        return len(data[0])
    return len(data)


def bootstrap_ci(metric_fn, patients, replicates=2000, seed=0, max_undefined=0.10):
    """Percentile bootstrap over patients.

    ``patients`` is a sequence of per-patient items, or a tuple of arrays
    sharing a leading patient axis; ``metric_fn`` receives a resample of the
    same form.  Replicate ``r`` draws its indices from its own generator
    derived from ``(seed, r)``, so results do not depend on scheduling.
    Replicates where the metric is undefined are skipped and counted.
    """
    n = _length(patients)
    if n == 0:
        raise ContractError("bootstrap needs at least one patient")
    point = float(metric_fn(patients))
    values = []
    skipped = 0
    for r in range(replicates):
        idx = seeding.derive_rng(seed, seeding.BOOTSTRAP, r).integers(0, n, size=n)
        try:
            values.append(float(metric_fn(_take(patients, idx))))
        except UndefinedMetricError:
            skipped += 1
    if skipped > max_undefined * replicates:
        raise UnstableMetricError(f"{skipped} of {replicates} bootstrap replicates undefined")
    lo, hi = np.percentile(values, [2.5, 97.5])
    return ConfidenceInterval(point, float(lo), float(hi), replicates, skipped)


# ---------------------------------------------------------------------------
# SCORE (Conroy et al., Eur Heart J 2003): Weibull baseline survival
#   S0(a) = exp(-exp(alpha) * (a - 20)**p)
# per sex and endpoint, scaled by exp(w) with
#   w = b_chol * (chol - 6) + b_sbp * (sbp - 120) + b_smoker * smoker
# 10-year risk = sum over endpoints of 1 - S(age + 10) / S(age).

SCORE_ALPHA_P = {
    # region: {(endpoint, sex): (alpha, p)}
    "low": {
        ("chd", "male"): (-22.1, 4.71), ("chd", "female"): (-29.8, 6.36),
        ("non_chd", "male"): (-26.7, 5.64), ("non_chd", "female"): (-31.0, 6.62),
    },
    "high": {
        ("chd", "male"): (-21.0, 4.62), ("chd", "female"): (-28.7, 6.23),
        ("non_chd", "male"): (-25.7, 5.47), ("non_chd", "female"): (-30.0, 6.42),
    },
}
SCORE_BETA = {
    # endpoint: (current smoker, cholesterol per mmol/L, SBP per mmHg)
    "chd": (0.71, 0.24, 0.018),
    "non_chd": (0.63, 0.02, 0.022),
}
SCORE_RANGE = {"age": (40.0, 75.0), "sbp": (80.0, 220.0), "total_cholesterol": (2.5, 10.0)}


def score_risk(age, male, smoker, sbp, total_cholesterol, region="low"):
    """SCORE 10-year risk of fatal cardiovascular disease, in [0, 1]."""
    for name, v in (("age", age), ("sbp", sbp), ("total_cholesterol", total_cholesterol)):
        lo, hi = SCORE_RANGE[name]
        if not lo <= v <= hi:
            raise RangeError(f"{name}={v} outside SCORE range [{lo}, {hi}]")
    if region not in SCORE_ALPHA_P:
        raise RangeError(f"unknown SCORE region {region!r}")
    sex = "male" if male else "female"
    risk = 0.0
    for endpoint, (b_smoke, b_chol, b_sbp) in SCORE_BETA.items():
        alpha, p = SCORE_ALPHA_P[region][(endpoint, sex)]
        w = b_chol * (total_cholesterol - 6.0) + b_sbp * (sbp - 120.0) + b_smoke * float(smoker)
        s_now = math.exp(-math.exp(alpha) * (age - 20.0) ** p)
        s_later = math.exp(-math.exp(alpha) * (age - 10.0) ** p)
        risk += 1.0 - (s_later / s_now) ** math.exp(w)
    return min(max(risk, 0.0), 1.0)


def score_record(record, region="low"):
    return score_risk(record.age, record.gender_male, record.current_smoker, record.sbp,
                      record.total_cholesterol, region)


# ---------------------------------------------------------------------------
# logistic regression


# bound on standardized logistic weights; a weight of 30 per SD already
# saturates the sigmoid across any realistic feature range
WEIGHT_CAP = 30.0


@dataclass(frozen=True)
class LogisticFit:
    weights: np.ndarray
    intercept: float
    iterations: int
    grad_norm: float

    def decision(self, features):
        return np.asarray(features, dtype=float) @ self.weights + self.intercept

    def predict_proba(self, features):
        return nx._stable_sigmoid(self.decision(features))


def fit_logistic(features, labels, max_iter=500, tol=1e-6, weight_cap=WEIGHT_CAP):
    """Maximum-likelihood logistic regression.

    The log-likelihood gradient comes from the numerics backward pass; each
    ascent step scales it by the inverse of the analytic Hessian (a Newton
    step) and backtracks until the likelihood improves.  Features are
    standardized internally and the returned weights apply to the raw
    features.  Standardized weights are boxed to ``[-weight_cap,
    weight_cap]`` so (quasi-)separable data stops at the cap instead of
    drifting forever; convergence is judged on the projected gradient.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(labels, dtype=float).ravel()
    if len(y) != len(x):
        raise ContractError("features and labels differ in length")
    if min(int(y.sum()), int(len(y) - y.sum())) < 2:
        raise ContractError("logistic fit needs at least 2 samples per class")
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    const = sd == 0
    sd = np.where(const, 1.0, sd)
    z = (x - mu) / sd
    z[:, const] = 0.0
    n, d = z.shape
    zt = nx.Tensor(z)
    yt = nx.Tensor(y)
    design = np.column_stack([z, np.ones(n)])
    lo = np.r_[np.full(d, -weight_cap), -np.inf]
    hi = np.r_[np.full(d, weight_cap), np.inf]

    def nll_and_grad(theta):
        tape = nx.Tape()
        w = tape.watch("w", theta[:d])
        b = tape.watch("b", theta[d:])
        logits = nx.dense(zt, nx.reshape(w, (1, d)), b)
        loss = nx.mean(nx.bce_with_logits(nx.reshape(logits, (n,)), yt))
        g = nx.backward(tape, loss)
        tape.release()
        return loss.item(), np.r_[g["w"].data, g["b"].data]

    def projected_norm(theta, g):
        return float(np.linalg.norm(theta - np.clip(theta - g, lo, hi)))

    prev = y.mean()
    theta = np.r_[np.zeros(d), math.log(prev / (1 - prev))]
    f, g = nll_and_grad(theta)
    it = 0
    for it in range(1, max_iter + 1):
        gn = projected_norm(theta, g)
        if gn < tol:
            break
        # coordinates pinned at the cap with the gradient pushing outward stay put
        pinned = ((theta <= lo) & (g > 0)) | ((theta >= hi) & (g < 0))
        free = ~pinned
        p = nx._stable_sigmoid(design @ theta)
        hess = (design * (p * (1 - p))[:, None]).T @ design / n
        hf = hess[np.ix_(free, free)] + 1e-12 * np.eye(int(free.sum()))
        direction = np.zeros_like(theta)
        direction[free] = np.linalg.lstsq(hf, g[free], rcond=None)[0]
        t = 1.0
        while True:
            cand = np.clip(theta - t * direction, lo, hi)
            fc, gc = nll_and_grad(cand)
            if fc <= f + 1e-4 * float(g @ (cand - theta)):
                break
            t *= 0.5
            if t < 1e-12:
                raise FitError("line search failed", grad_norm=gn)
        theta, f, g = cand, fc, gc
    gn = projected_norm(theta, g)
    if gn >= tol:
        raise FitError(f"no convergence after {max_iter} iterations (|grad|={gn:.3g})", grad_norm=gn)
    w_std = theta[:d]
    w_std = np.where(const, 0.0, w_std)
    weights = w_std / sd
    intercept = float(theta[d] - np.sum(w_std * mu / sd))
    return LogisticFit(weights, intercept, it, gn)


# ---------------------------------------------------------------------------
# report tables


@dataclass
class MetricReport:
    """(task, metric) -> ConfidenceInterval, plus Table-2 style baselines."""

    entries: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)

    def add(self, task, metric, ci, baseline=None):
        self.entries[(task, metric)] = ci
        if baseline is not None:
            self.baselines[(task, metric)] = baseline

    def to_json(self):
        out = {}
        for (task, metric), ci in self.entries.items():
            d = ci.as_dict()
            d["baseline"] = self.baselines.get((task, metric))
            out.setdefault(task, {})[metric] = d
        return json.dumps(out, indent=2, sort_keys=True)

    def to_text(self):
        rows = [("Task", "Metric", "Algorithm (95% CI)", "Baseline")]
        for (task, metric), ci in self.entries.items():
            base = self.baselines.get((task, metric))
            rows.append((task, metric, f"{ci.point:.4f} ({ci.lo:.4f}-{ci.hi:.4f})",
                         "" if base is None else f"{base:.4f}"))
        return _align(rows)


def _align(rows):
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def parse_text_report(text):
    """Point estimates from :meth:`MetricReport.to_text` keyed by (task, metric)."""
    out = {}
    for line in text.splitlines()[1:]:
        parts = line.split()
        if len(parts) >= 3:
            out[(parts[0], parts[1])] = float(parts[2])
    return out


def continuous_report(pred, actual, replicates=2000, seed=0, reference_mean=None):
    """MAE and R² with CIs for one task; baselines use the evaluation mean by default."""
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    ref = actual.mean() if reference_mean is None else reference_mean

    def mae_fn(d):
        return mae(d[0], d[1])

    def r2_fn(d):
        return r2(d[0], d[1])

    mae_ci = bootstrap_ci(mae_fn, (pred, actual), replicates, seed)
    r2_ci = bootstrap_ci(r2_fn, (pred, actual), replicates, seed)
    base_r2 = r2(np.full_like(actual, ref), actual)
    return mae_ci, r2_ci, baseline_mae(actual, ref), base_r2


MACE_ROWS = (
    "Age",
    "Systolic blood pressure (SBP)",
    "Body mass index (BMI)",
    "Gender",
    "Current smoker",
    "Algorithm",
    "Age + SBP + BMI + gender + current smoker",
    "Algorithm + age + SBP + BMI + gender + current smoker",
    "Systematic Coronary Risk Evaluation (SCORE)",
    "Algorithm + SCORE",
)


@dataclass
class MaceTable:
    rows: dict                 # label -> ConfidenceInterval
    cohort_size: int
    excluded: int
    events: int
    fit_size: int
    eval_size: int
    eval_events: int

    def to_json(self):
        return json.dumps({
            "cohort_size": self.cohort_size, "excluded_prior_event": self.excluded,
            "events": self.events, "fit_size": self.fit_size, "eval_size": self.eval_size,
            "eval_events": self.eval_events,
            "rows": [{"model": k, **v.as_dict()} for k, v in self.rows.items()],
        }, indent=2)

    def to_text(self):
        lines = [f"Patients: {self.cohort_size}; excluded for prior cardiac event: {self.excluded}; "
                 f"MACE events: {self.events}",
                 f"Fit partition: {self.fit_size}; evaluation partition: {self.eval_size} "
                 f"({self.eval_events} events)", ""]
        rows = [("Model", "AUC (95% CI)")]
        rows += [(k, f"{v.point:.4f} ({v.lo:.4f}-{v.hi:.4f})") for k, v in self.rows.items()]
        return "\n".join(lines) + "\n" + _align(rows)


def mace_table(records, algorithm_probs, replicates=2000, seed=0, region="low"):
    """Table-3 analog: AUC with bootstrap CI for each covariate / model combination.

    Patients with a prior cardiac event are excluded.  Every row is a
    logistic fit on a seeded half of the cohort and is evaluated on the
    other half.
    """
    probs = np.asarray(algorithm_probs, dtype=float)
    if len(probs) != len(records):
        raise ContractError("one algorithm probability per patient is required")
    keep = [i for i, r in enumerate(records) if not r.prior_cardiac_event]
    excluded = len(records) - len(keep)
    recs = [records[i] for i in keep]
    probs = probs[keep]
    y = np.array([r.mace_within_5_years for r in recs], dtype=float)
    cov = {
        "age": np.array([r.age for r in recs]),
        "sbp": np.array([r.sbp for r in recs]),
        "bmi": np.array([r.bmi for r in recs]),
        "gender": np.array([float(r.gender_male) for r in recs]),
        "smoker": np.array([float(r.current_smoker) for r in recs]),
        "algorithm": np.log(np.clip(probs, 1e-12, 1.0)) - np.log(np.clip(1.0 - probs, 1e-12, 1.0)),
        "score": np.array([score_record(r, region) for r in recs]),
    }
    columns = {
        MACE_ROWS[0]: ["age"], MACE_ROWS[1]: ["sbp"], MACE_ROWS[2]: ["bmi"],
        MACE_ROWS[3]: ["gender"], MACE_ROWS[4]: ["smoker"], MACE_ROWS[5]: ["algorithm"],
        MACE_ROWS[6]: ["age", "sbp", "bmi", "gender", "smoker"],
        MACE_ROWS[7]: ["algorithm", "age", "sbp", "bmi", "gender", "smoker"],
        MACE_ROWS[8]: ["score"], MACE_ROWS[9]: ["algorithm", "score"],
    }
    perm = seeding.derive_rng(seed, seeding.FIT_SPLIT).permutation(len(recs))
    fit_idx = np.sort(perm[: len(recs) // 2])
    eval_idx = np.sort(perm[len(recs) // 2:])
    rows = {}
    for label, names in columns.items():
        x = np.column_stack([cov[c] for c in names])
        try:
            model = fit_logistic(x[fit_idx], y[fit_idx])
            scores = model.decision(x[eval_idx])
            rows[label] = bootstrap_ci(lambda d: auc(d[0], d[1]), (scores, y[eval_idx]),
                                       replicates, seed)
        except (MetricError, ContractError) as exc:
            raise type(exc)(f"{label}: {exc}") from exc
    return MaceTable(rows, len(records), excluded, int(y.sum()), len(fit_idx), len(eval_idx),
                     int(y[eval_idx].sum()))


def calibration_scatter(pred, actual, bin_count=10):
    """Equal-width bins over the actual range: (center, mean pred, mean actual, count).

    Empty bins carry NaN means.
    """
    if bin_count < 2:
        raise ContractError("calibration needs at least 2 bins")
    p, a = _pair(pred, actual)
    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bin_count + 1)
    which = np.clip(np.searchsorted(edges, a, side="right") - 1, 0, bin_count - 1)
    out = []
    for b in range(bin_count):
        sel = which == b
        cnt = int(sel.sum())
        center = float((edges[b] + edges[b + 1]) / 2)
        if cnt:
            out.append((center, float(p[sel].mean()), float(a[sel].mean()), cnt))
        else:
            out.append((center, math.nan, math.nan, 0))
    return out


def calibration_csv(bins):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_center", "mean_pred", "mean_actual", "count"])
    for center, mp, ma, cnt in bins:
        w.writerow([repr(center), "nan" if math.isnan(mp) else repr(mp),
                    "nan" if math.isnan(ma) else repr(ma), cnt])
    return buf.getvalue()
