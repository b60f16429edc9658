"""Command-line pipeline: synth, train, eval, attend, score, report."""

import argparse
import json
import os
import shutil
import sys
from dataclasses import dataclass, fields, replace
from types import SimpleNamespace

import numpy as np

from . import attention as att
from . import evalstats as es
from . import formats as fmt
from . import riskmodels as rm
from . import synthcohort as sc
from . import training as tr
from .errors import ConfigurationError, ContractError, DataError, RetinaRiskError

SEED_ENV = "RETINA_RISK_SEED"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_patients: int = 100
    image_size: int = 64
    images_per_patient: int = 2
    train_frac: float = 0.8
    tune_frac: float = 0.1
    learning_rate: float = 0.01
    batch_size: int = 32
    max_steps: int = 5000
    eval_every: int = 100
    patience: int = 5
    ensemble_size: int = 10
    momentum: float = 0.9
    replicates: int = 2000
    heatmaps: int = 100
    enrichment: float = 2.0
    calibration_bins: int = 10
    mace_intercept: float = sc.DEFAULT_INTERCEPT
    score_region: str = "low"
    baseline_reference: str = "evaluation"

    def validate(self):
        if self.n_patients < 1:
            raise ConfigurationError("n_patients must be >= 1")
        if self.baseline_reference not in ("evaluation", "training"):
            raise ConfigurationError("baseline_reference must be 'evaluation' or 'training'")
        if not (0 < self.train_frac and 0 <= self.tune_frac and self.train_frac + self.tune_frac <= 1):
            raise ConfigurationError("split fractions must be positive and sum to at most 1")
        self.train_config().validate()
        self.cohort_params().validate()
        return self

    def train_config(self):
        return tr.TrainConfig(self.learning_rate, self.batch_size, self.eval_every, self.patience,
                              self.max_steps, self.ensemble_size, self.seed, self.momentum)

    def cohort_params(self):
        return sc.CohortParams(image_size=self.image_size, images_per_patient=self.images_per_patient,
                               intercept=self.mace_intercept)


CONFIG_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def load_config(path=None, overrides=None):
    """Defaults < RETINA_RISK_SEED < config file < flags."""
    values = {}
    if os.environ.get(SEED_ENV):
        values["seed"] = fmt.coerce("seed", os.environ[SEED_ENV], int)
    if path:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        values.update(fmt.parse_config_text(text, CONFIG_TYPES))
    for key, value in (overrides or {}).items():
        if key not in CONFIG_TYPES:
            raise ConfigurationError(f"unknown setting {key!r}")
        values[key] = fmt.coerce(key, value, CONFIG_TYPES[key]) if isinstance(value, str) else value
    return RunConfig(**values).validate()


def echo_config(cfg, out):
    with open(os.path.join(out, "config.txt"), "w") as f:
        f.write(fmt.format_config(cfg))


# ---------------------------------------------------------------------------
# cohort directories


def cmd_synth(cfg, out):
    params = cfg.cohort_params()
    records = sc.sample_population(cfg.n_patients, params, cfg.seed)
    fmt.ensure_dir(os.path.join(out, "images"))
    fmt.ensure_dir(os.path.join(out, "masks"))
    files = []
    for i, rec in enumerate(records):
        names = []
        for j in range(params.images_per_patient):
            scene = sc.render_fundus(rec, sc.image_seed(cfg.seed, i, j), params.image_size)
            stem = f"{rec.id}_{j}"
            fmt.write_ppm(os.path.join(out, "images", stem + ".ppm"), sc.quantize(scene.image))
            for name in ("vessel", "optic_disc", "perivascular", "fundus"):
                fmt.write_pgm(os.path.join(out, "masks", f"{stem}_{name}.pgm"),
                              getattr(scene, name + "_mask"))
            names.append(f"images/{stem}.ppm")
        files.append(names)
    fmt.write_manifest(os.path.join(out, "manifest.csv"), records, files)
    with open(os.path.join(out, "summary.txt"), "w") as f:
        f.write(population_summary(records))
    echo_config(cfg, out)
    return records


def population_summary(records):
    lines = [f"patients\t{len(records)}"]
    for name in ("age", "bmi", "sbp", "dbp", "hba1c", "total_cholesterol"):
        v = np.array([getattr(r, name) for r in records])
        lines.append(f"{name}\t{v.mean():.2f} ({v.std():.2f})")
    for name in ("gender_male", "current_smoker", "prior_cardiac_event", "mace_within_5_years"):
        v = np.array([getattr(r, name) for r in records], dtype=float)
        lines.append(f"{name}\t{100 * v.mean():.2f}%")
    for e in sc.ETHNICITIES:
        lines.append(f"ethnicity_{e}\t{100 * np.mean([r.ethnicity == e for r in records]):.2f}%")
    return "\n".join(lines) + "\n"


def load_cohort(cohort):
    records, files = fmt.read_manifest(os.path.join(cohort, "manifest.csv"))
    images, owner = [], []
    for i, names in enumerate(files):
        for name in names:
            images.append(fmt.read_ppm(os.path.join(cohort, name)))
            owner.append(i)
    if not images:
        raise DataError(f"{cohort}: cohort has no images")
    return sc.CohortImages(records, np.stack(images), np.array(owner, dtype=int)), files


def split_cohort(cfg, data):
    train, tune, val = sc.split_dataset(data.records, cfg.train_frac, cfg.tune_frac, cfg.seed)
    return data.subset(train), data.subset(tune), data.subset(val)


def load_scene(cohort, image_file):
    stem = os.path.splitext(os.path.basename(image_file))[0]
    masks = {}
    for name in ("vessel", "optic_disc", "perivascular", "fundus"):
        path = os.path.join(cohort, "masks", f"{stem}_{name}.pgm")
        if not os.path.exists(path):
            raise DataError(f"missing mask {path}")
        masks[name + "_mask"] = fmt.read_pgm(path) > 127
    return SimpleNamespace(**masks)


# ---------------------------------------------------------------------------
# train


def build_spec(kind, image_size):
    if kind == "continuous":
        return rm.build_continuous_model(image_size)
    if kind == "classification":
        return rm.build_classification_model(image_size)
    if kind.startswith("attention:"):
        return rm.build_attention_model(kind.split(":", 1)[1], image_size)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def history_csv(history):
    lines = ["step,train_loss,tune_metric,improved"]
    lines += [f"{p.step},{p.train_loss!r},{p.tune_metric!r},{int(p.improved)}" for p in history.points]
    return "\n".join(lines) + "\n"


def history_summary(history):
    return {"seed": history.seed, "best_step": history.best_step, "stop_step": history.stop_step,
            "stopped_early": history.stopped_early}


def cmd_train(cfg, cohort, out, kind):
    data, _ = load_cohort(cohort)
    train, tune, _ = split_cohort(cfg, data)
    if len(train) == 0 or len(tune) == 0:
        raise DataError("train and tune partitions must be nonempty")
    spec = build_spec(kind, cfg.image_size)
    tcfg = cfg.train_config()
    if spec.family == "attention":
        tcfg = replace(tcfg, ensemble_size=1)
    fmt.ensure_dir(out)
    try:
        members = tr.train_ensemble(spec, train, tune, tcfg)
    except RetinaRiskError:
        shutil.rmtree(out, ignore_errors=True)
        raise
    names = []
    for i, m in enumerate(members):
        name = f"member_{i:02d}.ckpt"
        fmt.save_checkpoint(os.path.join(out, name), m, history_summary(m.history))
        with open(os.path.join(out, f"history_{i:02d}.csv"), "w") as f:
            f.write(history_csv(m.history))
        names.append(name)
    with open(os.path.join(out, "ensemble.txt"), "w") as f:
        f.write(f"kind = {kind}\n" + "".join(f"member = {n}\n" for n in names))
    echo_config(cfg, out)
    return members


def load_ensemble(directory):
    path = os.path.join(directory, "ensemble.txt")
    try:
        with open(path) as f:
            lines = [l.split("=", 1) for l in f.read().splitlines() if "=" in l]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    kind = next(v.strip() for k, v in lines if k.strip() == "kind")
    members = []
    for k, v in lines:
        if k.strip() == "member":
            ck = fmt.load_checkpoint(os.path.join(directory, v.strip()))
            members.append(tr.TrainedModel(ck["spec"], ck["params"], ck["standardization"],
                                           None, ck["unavailable"]))
    if not members:
        raise DataError(f"{directory}: no ensemble members")
    return kind, members


# ---------------------------------------------------------------------------
# eval / score


def patient_predictions(members, data):
    preds = tr.predict_ensemble(members, data.images)
    ids = [data.records[i].id for i in data.patient_index]
    pats = es.aggregate_by_patient(ids, preds)
    by_id = {p.patient_id: p for p in pats}
    return [by_id[r.id] for r in data.records if r.id in by_id]


def evaluation_report(cfg, members, val, train=None):
    spec = members[0].spec
    recs = [r for r in val.records if r.id in {val.records[i].id for i in val.patient_index}]
    pats = patient_predictions(members, val)
    report = es.MetricReport()
    calib = {}
    for h in spec.heads:
        keep = [k for k, r in enumerate(recs) if rm.label_available(r, h.name, members[0].unavailable)]
        if not keep:
            continue
        labels = np.array([rm.record_label(recs[k], h.name) for k in keep])
        values = np.array([pats[k].values[h.name] for k in keep])
        if h.kind == "continuous":
            ref = None
            if cfg.baseline_reference == "training" and train is not None:
                ref = float(np.mean([rm.record_label(r, h.name) for r in train.records]))
            mae_ci, r2_ci, base_mae, base_r2 = es.continuous_report(values, labels, cfg.replicates,
                                                                     cfg.seed, ref)
            report.add(h.name, "MAE", mae_ci, base_mae)
            report.add(h.name, "R2", r2_ci, base_r2)
            if h.name in ("age", "sbp"):
                calib[h.name] = es.calibration_scatter(values, labels, cfg.calibration_bins)
        elif h.kind == "binary":
            ci = es.bootstrap_ci(lambda d: es.auc(d[0], d[1]), (values, labels), cfg.replicates, cfg.seed)
            report.add(h.name, "AUC", ci, 0.5)
        else:
            pred = values.argmax(axis=1)

            def kappa_fn(d, k=h.classes):
                return es.kappa(d[0], d[1], k)

            ci = es.bootstrap_ci(kappa_fn, (pred, labels.astype(int)), cfg.replicates, cfg.seed)
            report.add(h.name, "kappa", ci, 0.0)
    return report, calib


def cmd_eval(cfg, cohort, out, checkpoints):
    data, _ = load_cohort(cohort)
    train, _, val = split_cohort(cfg, data)
    if len(val) == 0:
        raise DataError("validation partition is empty")
    _, members = load_ensemble(checkpoints)
    report, calib = evaluation_report(cfg, members, val, train)
    fmt.ensure_dir(out)
    with open(os.path.join(out, "report.json"), "w") as f:
        f.write(report.to_json())
    with open(os.path.join(out, "report.txt"), "w") as f:
        f.write(report.to_text())
    for name, bins in calib.items():
        with open(os.path.join(out, f"calibration_{name}.csv"), "w") as f:
            f.write(es.calibration_csv(bins))
    echo_config(cfg, out)
    return report


def cmd_score(cfg, cohort, out, checkpoints):
    data, _ = load_cohort(cohort)
    _, _, val = split_cohort(cfg, data)
    _, members = load_ensemble(checkpoints)
    if "mace" not in members[0].spec.head_names:
        raise ConfigurationError("score needs a model with a mace head")
    pats = patient_predictions(members, val)
    probs = np.array([p.values["mace"] for p in pats])
    table = es.mace_table(val.records, probs, cfg.replicates, cfg.seed, cfg.score_region)
    fmt.ensure_dir(out)
    with open(os.path.join(out, "mace.json"), "w") as f:
        f.write(table.to_json())
    with open(os.path.join(out, "mace.txt"), "w") as f:
        f.write(table.to_text())
    echo_config(cfg, out)
    return table


# ---------------------------------------------------------------------------
# attend / report


def cmd_attend(cfg, cohort, out, checkpoint_dirs):
    data, files = load_cohort(cohort)
    _, _, val = split_cohort(cfg, data)
    val_ids = {r.id for r in val.records}
    rows = [(r, f) for r, fs in zip(data.records, files) if r.id in val_ids for f in fs]
    rows = rows[:cfg.heatmaps]
    if not rows:
        raise DataError("no validation images to attend")
    images = np.stack([fmt.read_ppm(os.path.join(cohort, f)) for _, f in rows])
    scenes = [load_scene(cohort, f) for _, f in rows]
    maps_by_task, scenes_by_task = {}, {}
    for directory in checkpoint_dirs:
        _, members = load_ensemble(directory)
        spec, params = members[0].spec, members[0].params
        if spec.family != "attention":
            raise ConfigurationError(f"{directory} is not an attention model")
        task = spec.head.name
        maps = att.extract_heatmaps(spec, params, images, [r.id for r, _ in rows])
        odir = fmt.ensure_dir(os.path.join(out, "overlays", task))
        for (r, f), img, hm in zip(rows, images, maps):
            stem = os.path.splitext(os.path.basename(f))[0]
            fmt.write_ppm(os.path.join(odir, stem + ".ppm"), att.overlay_export(img, hm))
        maps_by_task[task] = maps
        scenes_by_task[task] = scenes
    report = att.grade_attention(maps_by_task, scenes_by_task, cfg.enrichment)
    with open(os.path.join(out, "attention.txt"), "w") as f:
        f.write(report.to_text())
    with open(os.path.join(out, "attention.json"), "w") as f:
        f.write(json.dumps({"fractions": report.fractions, "counts": report.counts},
                           indent=2, sort_keys=True))
    echo_config(cfg, out)
    return report


def cmd_report(cfg, out, inputs):
    """Collect the text tables of earlier runs into one summary file."""
    parts = []
    for directory in inputs:
        for name in ("summary.txt", "report.txt", "mace.txt", "attention.txt"):
            path = os.path.join(directory, name)
            if os.path.exists(path):
                with open(path) as f:
                    parts.append(f"== {os.path.basename(os.path.normpath(directory))}/{name}\n{f.read()}")
    if not parts:
        raise DataError("no reports found in the given directories")
    fmt.ensure_dir(out)
    with open(os.path.join(out, "summary_report.txt"), "w") as f:
        f.write("\n".join(parts))
    echo_config(cfg, out)


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="retina-risk", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="global seed (overrides config and environment)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort directory")
    s.add_argument("--n", type=int, help="number of patients")
    s = sub.add_parser("train", parents=[common], help="train an ensemble or attention model")
    s.add_argument("--cohort", required=True)
    s.add_argument("--model", required=True, help="continuous | classification | attention:<task>")
    for name, helptext in (("eval", "continuous-head metrics with bootstrap CIs"), ("score", "MACE discrimination table")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--cohort", required=True)
        s.add_argument("--checkpoints", required=True, help="directory written by train")
    s = sub.add_parser("attend", parents=[common], help="heatmap overlays and localization grades")
    s.add_argument("--cohort", required=True)
    s.add_argument("--checkpoints", required=True, nargs="+", help="attention model directories")
    s = sub.add_parser("report", parents=[common], help="collect text reports into one file")
    s.add_argument("inputs", nargs="+")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        if args.seed is not None:
            overrides["seed"] = args.seed
        if getattr(args, "n", None) is not None:
            overrides["n_patients"] = args.n
        cfg = load_config(args.config, overrides)
        fmt.ensure_dir(args.out)
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.cohort, args.out, args.model)
        elif args.command == "eval":
            cmd_eval(cfg, args.cohort, args.out, args.checkpoints)
        elif args.command == "score":
            cmd_score(cfg, args.cohort, args.out, args.checkpoints)
        elif args.command == "attend":
            cmd_attend(cfg, args.cohort, args.out, args.checkpoints)
        else:
            cmd_report(cfg, args.out, args.inputs)
    except RetinaRiskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
