"""Minibatch SGD with early stopping on a tune split, and seeded ensembles."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import evalstats
from . import numerics as nx
from . import riskmodels as rm
from . import seeding
from .errors import ConfigurationError, ContractError, NonFiniteError, TrainingError, \
    UndefinedMetricError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    eval_every: int = 100
    patience: int = 5
    max_steps: int = 5000
    ensemble_size: int = 10
    seed: int = 0
    momentum: float = 0.9

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1 or self.ensemble_size < 1 or self.patience < 1:
            raise ConfigurationError("batch_size, ensemble_size and patience must be >= 1")
        if not 1 <= self.eval_every <= self.max_steps:
            raise ConfigurationError("need 1 <= eval_every <= max_steps")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        return self


@dataclass
class EvalPoint:
    step: int
    train_loss: float
    tune_metric: float
    improved: bool


@dataclass
class TrainHistory:
    seed: int
    points: list = field(default_factory=list)
    best_step: int = 0
    stop_step: int = 0
    stopped_early: bool = False
    higher_is_better: bool = False

    @property
    def best_metric(self):
        for p in self.points:
            if p.step == self.best_step:
                return p.tune_metric
        return None


@dataclass
class TrainedModel:
    spec: object
    params: dict
    standardization: rm.Standardization
    history: TrainHistory
    unavailable: tuple = ()

    def predict(self, images):
        return rm.predict(self.spec, self.params, images, self.standardization)


# ---------------------------------------------------------------------------
# tune metric


def tune_metric(spec, params, standardization, tune_set, unavailable=()):
    """Patient-level tune score and whether higher is better.

    Models with any continuous head are scored by mean MAE in standardized
    units over continuous heads; otherwise by mean AUC over binary heads.
    """
    preds = rm.predict(spec, params, tune_set.images, standardization)
    records = [tune_set.records[i] for i in tune_set.patient_index]
    targets, mask = rm.targets_for(spec, records, standardization, unavailable)
    ids = [r.id for r in records]
    heads = {h.name: h for h in spec.heads}
    cont = [n for n, h in heads.items() if h.kind == "continuous" and mask[n].any()]
    if cont:
        scores = []
        for n in cont:
            enc = standardization.encode(n, preds[n])
            pats = evalstats.aggregate_by_patient(ids, {n: enc}, {n: targets[n]}, {n: mask[n]})
            use = [p for p in pats if p.available[n]]
            scores.append(evalstats.mae([p.values[n] for p in use], [p.labels[n] for p in use]))
        return float(np.mean(scores)), False
    scores = []
    for n, h in heads.items():
        if h.kind != "binary" or not mask[n].any():
            continue
        pats = evalstats.aggregate_by_patient(ids, {n: preds[n]}, {n: targets[n]}, {n: mask[n]})
        use = [p for p in pats if p.available[n]]
        try:
            scores.append(evalstats.auc([p.values[n] for p in use], [p.labels[n] for p in use]))
        except UndefinedMetricError:
            continue
    if not scores:
        # categorical-only model: fall back to accuracy
        n = next(n for n, h in heads.items() if h.kind == "categorical")
        pred = preds[n].argmax(axis=1)
        return float(np.mean(pred == targets[n].argmax(axis=1))), True
    return float(np.mean(scores)), True


# ---------------------------------------------------------------------------
# training loop


def _batches(n, batch_size, seed):
    """Endless stream of index batches; each epoch is a fresh seeded permutation."""
    epoch = 0
    while True:
        order = seeding.derive_rng(seed, seeding.BATCH, epoch).permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]
        epoch += 1


def _train_steps(spec, train_set, tune_set, config, evaluate=None, unavailable=(), member=None):
    """Generator that performs one SGD step per ``next`` and returns the TrainedModel."""
    config.validate()
    if len(train_set) == 0:
        raise ContractError("empty training set")
    unavailable = tuple(unavailable)
    standardization = rm.Standardization.fit(train_set.records, spec.head_names, unavailable)
    records = [train_set.records[i] for i in train_set.patient_index]
    targets, mask = rm.targets_for(spec, records, standardization, unavailable)
    if evaluate is None:
        def evaluate(p):
            return tune_metric(spec, p, standardization, tune_set, unavailable)

    params = rm.init_parameters(spec, seeding.derive_rng(config.seed, seeding.INIT))
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history = TrainHistory(seed=config.seed)
    best_params, best_metric, bad = params, None, 0
    running, running_n = 0.0, 0
    batches = _batches(len(train_set), config.batch_size, config.seed)
    step = 0
    while step < config.max_steps:
        idx = next(batches)
        bmask = {k: v[idx] for k, v in mask.items()}
        if not any(m.any() for m in bmask.values()):
            continue
        step += 1
        # overflow surfaces as NonFiniteError, so numpy's warnings are redundant
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                tape = nx.Tape()
                out = rm.raw_outputs(spec, params, train_set.images[idx], tape)
                loss = rm.multitask_loss(spec, out, {k: v[idx] for k, v in targets.items()}, bmask)
                grads = nx.backward(tape, loss)
                tape.release()
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingError(f"non-finite value at step {step}: {exc}",
                                    step=step, member=member) from exc
            for k in velocity:
                velocity[k] = config.momentum * velocity[k] + grads[k].data
            params = nx.sgd_step(params, velocity, config.learning_rate)
        if not all(np.isfinite(v).all() for v in params.values()):
            raise TrainingError(f"parameters diverged at step {step}", step=step, member=member)
        running += loss.item()
        running_n += 1

        if step % config.eval_every == 0 or step == config.max_steps:
            metric, higher = evaluate(params)
            history.higher_is_better = higher
            improved = best_metric is None or (metric > best_metric if higher else metric < best_metric)
            history.points.append(EvalPoint(step, running / running_n, float(metric), improved))
            running, running_n = 0.0, 0
            if improved:
                best_params, best_metric, bad = params, metric, 0
                history.best_step = step
            else:
                bad += 1
                if bad >= config.patience:
                    history.stopped_early = True
                    break
        yield step
    history.stop_step = step
    return TrainedModel(spec, best_params, standardization, history, unavailable)


def _drain(gen):
    while True:
        try:
            next(gen)
        except StopIteration as stop:
            return stop.value


def train(spec, train_set, tune_set, config=TrainConfig(), evaluate=None, unavailable=()):
    """Train one model; returns the parameters from the best tune evaluation.

    ``evaluate(params) -> (metric, higher_is_better)`` overrides the default
    tune metric.  ``unavailable`` names heads whose labels are all masked.
    """
    return _drain(_train_steps(spec, train_set, tune_set, config, evaluate, unavailable))


def member_seed(seed, i):
    return seeding.derive_seed(seed, seeding.MEMBER, i)


def train_ensemble(spec, train_set, tune_set, config=TrainConfig(), unavailable=(),
                   schedule="sequential", members=None):
    """Train ``config.ensemble_size`` members with derived seeds.

    Each member sees only its own derived seed, so ``schedule`` ("sequential"
    or "interleaved", one step per member in turn) does not change results.
    ``members`` restricts training to a subset of member indices.
    """
    config.validate()
    which = list(range(config.ensemble_size)) if members is None else list(members)
    gens = {i: _train_steps(spec, train_set, tune_set,
                            replace(config, seed=member_seed(config.seed, i)),
                            unavailable=unavailable, member=i) for i in which}
    done = {}
    try:
        if schedule == "sequential":
            for i in which:
                done[i] = _drain(gens[i])
        elif schedule == "interleaved":
            live = list(which)
            while live:
                for i in list(live):
                    try:
                        next(gens[i])
                    except StopIteration as stop:
                        done[i] = stop.value
                        live.remove(i)
        else:
            raise ConfigurationError(f"unknown schedule {schedule!r}")
    except TrainingError as exc:
        if exc.member is None:
            exc.member = i
        raise
    return [done[i] for i in which]


def predict_ensemble(members, images):
    """Mean of member outputs per head (values or probabilities)."""
    if not members:
        raise ContractError("empty ensemble")
    spec = rm.describe(members[0].spec)
    for m in members[1:]:
        if rm.describe(m.spec) != spec:
            raise ContractError("ensemble members have different model specs")
    outs = [m.predict(images) for m in members]
    return {k: np.mean([o[k] for o in outs], axis=0) for k in outs[0]}
