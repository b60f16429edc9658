"""Multi-task prediction networks and per-task soft-attention networks.

Two prediction families are kept apart: one model for the continuous risk
factors and one for the binary/categorical outcomes, so squared-error and
cross-entropy losses never share a network.  Continuous targets are
standardized with training-set statistics; binary heads emit logits.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .synthcohort import ETHNICITIES

CONTINUOUS_TASKS = ("age", "bmi", "sbp", "dbp", "hba1c")
BINARY_TASKS = ("gender", "smoker", "mace")
ALL_TASKS = CONTINUOUS_TASKS + BINARY_TASKS + ("ethnicity",)

_LOSS_FOR_KIND = {
    "continuous": "squared_error",
    "binary": "binary_cross_entropy",
    "categorical": "categorical_cross_entropy",
}

# record attribute behind each task
_RECORD_FIELD = {
    "age": "age", "bmi": "bmi", "sbp": "sbp", "dbp": "dbp", "hba1c": "hba1c",
    "gender": "gender_male", "smoker": "current_smoker", "mace": "mace_within_5_years",
    "ethnicity": "ethnicity",
}


@dataclass(frozen=True)
class TaskHead:
    name: str
    kind: str
    classes: int = 1

    def __post_init__(self):
        if self.name not in _RECORD_FIELD:
            raise ContractError(f"unknown task {self.name!r}")
        if self.kind not in _LOSS_FOR_KIND:
            raise ContractError(f"unknown head kind {self.kind!r}")
        if (self.kind == "categorical") != (self.classes > 1):
            raise ContractError("only categorical heads have more than one class")

    @property
    def loss_kind(self):
        return _LOSS_FOR_KIND[self.kind]

    @property
    def outputs(self):
        return self.classes


def head_for(task):
    if task in CONTINUOUS_TASKS:
        return TaskHead(task, "continuous")
    if task in BINARY_TASKS:
        return TaskHead(task, "binary")
    return TaskHead("ethnicity", "categorical", len(ETHNICITIES))


@dataclass(frozen=True)
class Layer:
    kind: str          # conv | relu | pool | flatten | dense
    size: int = 0      # filters for conv, units for dense
    kernel: int = 3


DEFAULT_TRUNK = (
    Layer("conv", 8), Layer("relu"), Layer("pool"),
    Layer("conv", 16), Layer("relu"), Layer("pool"),
    Layer("flatten"), Layer("dense", 32), Layer("relu"),
)
ATTENTION_TRUNK = DEFAULT_TRUNK[:6]


def _walk(input_shape, trunk):
    """Yield (index, layer, input shape, output shape) through ``trunk``."""
    shape = tuple(input_shape)
    for i, layer in enumerate(trunk):
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ContractError(f"conv layer {i} needs a spatial input, got {shape}")
            out = (layer.size, shape[1], shape[2])
        elif layer.kind == "pool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ContractError(f"pool layer {i} needs even spatial dims, got {shape}")
            out = (shape[0], shape[1] // 2, shape[2] // 2)
        elif layer.kind == "flatten":
            out = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise ContractError(f"dense layer {i} needs a flat input, got {shape}")
            out = (layer.size,)
        elif layer.kind == "relu":
            out = shape
        else:
            raise ContractError(f"unknown layer kind {layer.kind!r}")
        yield i, layer, shape, out
        shape = out


def _trunk_shapes(input_shape, trunk):
    shapes = {}
    out = tuple(input_shape)
    for i, layer, shape, out in _walk(input_shape, trunk):
        if layer.kind == "conv":
            shapes[f"trunk.{i}.kernel"] = (layer.size, shape[0], layer.kernel, layer.kernel)
            shapes[f"trunk.{i}.bias"] = (layer.size,)
        elif layer.kind == "dense":
            shapes[f"trunk.{i}.weight"] = (layer.size, shape[0])
            shapes[f"trunk.{i}.bias"] = (layer.size,)
    return shapes, out


@dataclass(frozen=True)
class ModelSpec:
    family: str                 # continuous | classification
    heads: tuple
    trunk: tuple = DEFAULT_TRUNK
    input_shape: tuple = (3, 64, 64)

    def __post_init__(self):
        kinds = {h.kind for h in self.heads}
        if not self.heads:
            raise ContractError("a model needs at least one head")
        if "continuous" in kinds and len(kinds) > 1:
            raise ContractError("continuous and binary/categorical heads cannot share a model")
        expected = "continuous" if "continuous" in kinds else "classification"
        if self.family != expected:
            raise ContractError(f"family {self.family!r} does not match heads ({expected})")
        _, out = _trunk_shapes(self.input_shape, self.trunk)
        if len(out) != 1:
            raise ContractError("trunk must end in a feature vector")

    @property
    def feature_size(self):
        return _trunk_shapes(self.input_shape, self.trunk)[1][0]

    def parameter_shapes(self):
        shapes, _ = _trunk_shapes(self.input_shape, self.trunk)
        for h in self.heads:
            shapes[f"head.{h.name}.weight"] = (h.outputs, self.feature_size)
            shapes[f"head.{h.name}.bias"] = (h.outputs,)
        return shapes

    @property
    def parameter_count(self):
        return sum(int(np.prod(s)) for s in self.parameter_shapes().values())

    @property
    def head_names(self):
        return tuple(h.name for h in self.heads)


@dataclass(frozen=True)
class AttentionSpec:
    """Small conv stack, a 1x1 attention scorer over the final grid, one head."""

    head: TaskHead
    trunk: tuple = ATTENTION_TRUNK
    input_shape: tuple = (3, 64, 64)
    attention_hidden: int = 8
    family: str = field(default="attention", init=False)

    def __post_init__(self):
        _, out = _trunk_shapes(self.input_shape, self.trunk)
        if len(out) != 3:
            raise ContractError("attention trunk must end in a spatial feature map")

    @property
    def grid(self):
        return _trunk_shapes(self.input_shape, self.trunk)[1]

    @property
    def heads(self):
        return (self.head,)

    @property
    def head_names(self):
        return (self.head.name,)

    def parameter_shapes(self):
        shapes, (c, _, _) = _trunk_shapes(self.input_shape, self.trunk)
        shapes["attention.hidden.kernel"] = (self.attention_hidden, c, 1, 1)
        shapes["attention.hidden.bias"] = (self.attention_hidden,)
        shapes["attention.score.kernel"] = (1, self.attention_hidden, 1, 1)
        shapes["attention.score.bias"] = (1,)
        shapes[f"head.{self.head.name}.weight"] = (self.head.outputs, c)
        shapes[f"head.{self.head.name}.bias"] = (self.head.outputs,)
        return shapes

    @property
    def parameter_count(self):
        return sum(int(np.prod(s)) for s in self.parameter_shapes().values())


def build_continuous_model(image_size=64, trunk=DEFAULT_TRUNK):
    return ModelSpec("continuous", tuple(head_for(t) for t in CONTINUOUS_TASKS), trunk,
                     (3, image_size, image_size))


def build_classification_model(image_size=64, trunk=DEFAULT_TRUNK):
    heads = (head_for("gender"), head_for("smoker"), head_for("ethnicity"), head_for("mace"))
    return ModelSpec("classification", heads, trunk, (3, image_size, image_size))


def build_attention_model(task, image_size=64):
    return AttentionSpec(head_for(task), input_shape=(3, image_size, image_size))


def describe(spec):
    """JSON-ready description of a spec (inverse: :func:`spec_from_description`)."""
    d = {
        "family": spec.family,
        "input_shape": list(spec.input_shape),
        "trunk": [[l.kind, l.size, l.kernel] for l in spec.trunk],
        "heads": [[h.name, h.kind, h.classes] for h in spec.heads],
    }
    if isinstance(spec, AttentionSpec):
        d["attention_hidden"] = spec.attention_hidden
    return d


def spec_from_description(d):
    trunk = tuple(Layer(k, s, ks) for k, s, ks in d["trunk"])
    heads = tuple(TaskHead(n, k, c) for n, k, c in d["heads"])
    if d["family"] == "attention":
        return AttentionSpec(heads[0], trunk, tuple(d["input_shape"]), d["attention_hidden"])
    return ModelSpec(d["family"], heads, trunk, tuple(d["input_shape"]))


def init_parameters(spec, rng):
    """He-normal weights, zero biases; head and attention-score weights start small.

    Attention-model heads are the exception: their pooled inputs vanish under
    the near-uniform initial attention, so a unit-scale head still starts with
    outputs near zero while giving the attention scorer a usable gradient.
    """
    params = {}
    for name, shape in spec.parameter_shapes().items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        std = math.sqrt(2.0 / fan_in)
        if name.startswith("head.") or name.startswith("attention.score"):
            std = 0.1 / math.sqrt(fan_in)
        if name.startswith("head.") and spec.family == "attention":
            std = 1.0
        params[name] = rng.normal(0.0, std, size=shape)
    for v in params.values():
        v.setflags(write=False)
    return params


# ---------------------------------------------------------------------------
# forward passes


def as_batch(images, spec=None):
    """float64 batch in [0,1] from uint8 or float images, shape [B,3,H,W]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    arr = arr.astype(np.float64) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float64)
    if spec is not None and arr.shape[1:] != tuple(spec.input_shape):
        raise DimensionError(f"batch shape {arr.shape[1:]} != model input {tuple(spec.input_shape)}")
    return arr


def _tracked(params, tape):
    if tape is None:
        return {k: nx.Tensor(v) for k, v in params.items()}
    return tape.watch_all(params)


def _run_trunk(trunk, q, x):
    for i, layer in enumerate(trunk):
        if layer.kind == "conv":
            x = nx.conv2d(x, q[f"trunk.{i}.kernel"], padding=layer.kernel // 2, bias=q[f"trunk.{i}.bias"])
        elif layer.kind == "relu":
            x = nx.relu(x)
        elif layer.kind == "pool":
            x = nx.meanpool2(x)
        elif layer.kind == "flatten":
            x = nx.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        elif layer.kind == "dense":
            x = nx.dense(x, q[f"trunk.{i}.weight"], q[f"trunk.{i}.bias"])
    return x


def _head_output(head, q, features):
    out = nx.dense(features, q[f"head.{head.name}.weight"], q[f"head.{head.name}.bias"])
    if head.kind == "categorical":
        return out
    return nx.reshape(out, (out.shape[0],))


def forward(spec, params, batch, tape=None):
    """Raw head outputs: standardized values, logits, or class logits [B,k].

    With ``tape`` the parameters are watched so a loss can be differentiated.
    """
    x = nx.Tensor(as_batch(batch, spec) - 0.5)
    q = _tracked(params, tape)
    features = _run_trunk(spec.trunk, q, x)
    return {h.name: _head_output(h, q, features) for h in spec.heads}


def attention_forward(spec, params, batch, tape=None):
    """Return (head output, heatmap [B,h,w]) for an attention model."""
    x = nx.Tensor(as_batch(batch, spec) - 0.5)
    q = _tracked(params, tape)
    # per-map standardization: under uniform attention the pooled features
    # are exactly zero, so any signal the head sees must come from where the
    # attention looks
    fmap = nx.spatial_standardize(_run_trunk(spec.trunk, q, x))   # [B,C,h,w]
    b, c, gh, gw = fmap.shape
    hidden = nx.relu(nx.conv2d(fmap, q["attention.hidden.kernel"], bias=q["attention.hidden.bias"]))
    score = nx.conv2d(hidden, q["attention.score.kernel"], bias=q["attention.score.bias"])
    weights = nx.softmax(nx.reshape(score, (b, gh * gw)))
    pooled = nx.weighted_pool(nx.reshape(fmap, (b, c, gh * gw)), weights)
    out = _head_output(spec.head, q, pooled)
    return out, nx.reshape(weights, (b, gh, gw))


def raw_outputs(spec, params, batch, tape=None):
    if isinstance(spec, AttentionSpec):
        out, _ = attention_forward(spec, params, batch, tape)
        return {spec.head.name: out}
    return forward(spec, params, batch, tape)


# ---------------------------------------------------------------------------
# labels and losses


@dataclass(frozen=True)
class Standardization:
    """Per-task (mean, sd) of continuous training targets."""

    stats: dict

    @classmethod
    def fit(cls, records, tasks, unavailable=()):
        stats = {}
        for t in tasks:
            if t not in CONTINUOUS_TASKS:
                continue
            if t in unavailable:
                stats[t] = (0.0, 1.0)
                continue
            v = np.array([getattr(r, _RECORD_FIELD[t]) for r in records], dtype=float)
            sd = float(v.std())
            stats[t] = (float(v.mean()), sd if sd > 0 else 1.0)
        return cls(stats)

    def encode(self, task, values):
        m, s = self.stats[task]
        return (np.asarray(values, dtype=float) - m) / s

    def decode(self, task, values):
        m, s = self.stats[task]
        return np.asarray(values, dtype=float) * s + m


def record_label(record, task):
    v = getattr(record, _RECORD_FIELD[task])
    if task == "ethnicity":
        return ETHNICITIES.index(v)
    return float(v)


def label_available(record, task, unavailable=()):
    if task in unavailable:
        return False
    if task == "mace":
        return not record.prior_cardiac_event
    return True


def targets_for(spec, records, standardization=None, unavailable=()):
    """(targets, mask) per head for a list of (per-image) records."""
    targets, mask = {}, {}
    for h in spec.heads:
        raw = np.array([record_label(r, h.name) for r in records])
        if h.kind == "continuous":
            targets[h.name] = standardization.encode(h.name, raw)
        elif h.kind == "binary":
            targets[h.name] = raw.astype(float)
        else:
            targets[h.name] = np.eye(h.classes)[raw.astype(int)]
        mask[h.name] = np.array([label_available(r, h.name, unavailable) for r in records], dtype=float)
    return targets, mask


def per_sample_loss(head, output, target):
    t = nx.Tensor(target)
    if head.kind == "continuous":
        return nx.square(nx.sub(output, t))
    if head.kind == "binary":
        return nx.bce_with_logits(output, t)
    return nx.categorical_cross_entropy(output, t)


def multitask_loss(spec, outputs, targets, mask):
    """Mean head loss over available (head, sample) pairs; masked pairs contribute nothing."""
    count = sum(float(np.sum(mask[h.name])) for h in spec.heads)
    if count == 0:
        raise ContractError("every label in the batch is masked")
    total = None
    for h in spec.heads:
        m = np.asarray(mask[h.name], dtype=float)
        if not m.any():
            continue
        losses = per_sample_loss(h, outputs[h.name], targets[h.name])
        term = nx.total(nx.mul(losses, nx.Tensor(m)))
        total = term if total is None else nx.add(total, term)
    return nx.scale(total, 1.0 / count)


# ---------------------------------------------------------------------------
# inference


def _activate(head, raw, standardization):
    if head.kind == "continuous":
        return standardization.decode(head.name, raw)
    if head.kind == "binary":
        return nx._stable_sigmoid(raw)
    z = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(spec, params, images, standardization=None, batch_size=128):
    """De-standardized values and probabilities per head for all ``images``."""
    chunks = {h.name: [] for h in spec.heads}
    for start in range(0, len(images), batch_size):
        raw = raw_outputs(spec, params, images[start:start + batch_size])
        for h in spec.heads:
            chunks[h.name].append(_activate(h, raw[h.name].data, standardization))
    return {k: np.concatenate(v) for k, v in chunks.items()}


def heatmaps(spec, params, images, batch_size=128):
    """Attention grids [N,h,w] for ``images``."""
    out = []
    for start in range(0, len(images), batch_size):
        _, hm = attention_forward(spec, params, images[start:start + batch_size])
        out.append(hm.data)
    return np.concatenate(out)
