import numpy as np
import pytest
from scipy import signal

from retina_risk import evalstats as es
from retina_risk import numerics as nx
from retina_risk import riskmodels as rm
from retina_risk import synthcohort as sc
from retina_risk.errors import ContractError, DimensionError


def count_by_walk(input_shape, trunk, heads):
    """Independent parameter count: walk shapes layer by layer."""
    c, h, w = input_shape
    flat = None
    total = 0
    for layer in trunk:
        if layer.kind == "conv":
            total += layer.size * c * layer.kernel**2 + layer.size
            c = layer.size
        elif layer.kind == "pool":
            h, w = h // 2, w // 2
        elif layer.kind == "flatten":
            flat = c * h * w
        elif layer.kind == "dense":
            total += layer.size * flat + layer.size
            flat = layer.size
    return total + sum((flat + 1) * hd.outputs for hd in heads)


def test_continuous_model_heads_and_count():
    spec = rm.build_continuous_model(64)
    assert spec.head_names == ("age", "bmi", "sbp", "dbp", "hba1c")
    assert all(h.loss_kind == "squared_error" for h in spec.heads)
    assert spec.parameter_count == count_by_walk((3, 64, 64), spec.trunk, spec.heads)


def test_classification_model_heads():
    spec = rm.build_classification_model(64)
    kinds = {h.name: h.kind for h in spec.heads}
    assert kinds == {"gender": "binary", "smoker": "binary", "ethnicity": "categorical", "mace": "binary"}
    eth = next(h for h in spec.heads if h.name == "ethnicity")
    assert eth.classes == len(sc.ETHNICITIES)
    assert spec.parameter_count == count_by_walk((3, 64, 64), spec.trunk, spec.heads)


def test_attention_smaller_and_identical_architecture():
    a, b = rm.build_attention_model("age"), rm.build_attention_model("gender")
    assert a.parameter_count < rm.build_continuous_model().parameter_count
    assert a.trunk == b.trunk and a.attention_hidden == b.attention_hidden
    # conv stack + 1x1 hidden + 1x1 score + head
    assert a.parameter_count == (8 * 27 + 8) + (16 * 72 + 16) + (8 * 16 + 8) + (8 + 1) + (16 + 1)


def test_head_separation():
    with pytest.raises(ContractError):
        rm.ModelSpec("continuous", (rm.head_for("age"), rm.head_for("gender")))
    with pytest.raises(ContractError):
        rm.ModelSpec("classification", (rm.head_for("age"),))


def test_describe_round_trip():
    for spec in (rm.build_continuous_model(), rm.build_classification_model(), rm.build_attention_model("sbp")):
        assert rm.spec_from_description(rm.describe(spec)) == spec


def zero_heads(spec, params):
    p = dict(params)
    for h in spec.heads:
        p[f"head.{h.name}.weight"] = np.zeros_like(params[f"head.{h.name}.weight"])
        p[f"head.{h.name}.bias"] = np.arange(h.outputs, dtype=float) + 0.25
    return p


def test_zero_head_outputs_bias():
    spec = rm.build_continuous_model(16)
    p = zero_heads(spec, rm.init_parameters(spec, np.random.default_rng(0)))
    out = rm.forward(spec, p, np.zeros((2, 3, 16, 16)))
    for h in spec.heads:
        np.testing.assert_array_equal(out[h.name].data, [0.25, 0.25])


def test_forward_batch_independence():
    spec = rm.build_classification_model(16)
    p = rm.init_parameters(spec, np.random.default_rng(1))
    batch = np.random.default_rng(2).random((4, 3, 16, 16))
    batch[3] = batch[1]
    full = rm.forward(spec, p, batch)
    one = rm.forward(spec, p, batch[2:3])
    for name in spec.head_names:
        np.testing.assert_allclose(full[name].data[2], one[name].data[0], rtol=1e-12, atol=1e-14)
        np.testing.assert_array_equal(full[name].data[1], full[name].data[3])
    with pytest.raises(DimensionError):
        rm.forward(spec, p, np.zeros((1, 3, 8, 8)))


def test_forward_matches_interpreter():
    trunk = (rm.Layer("conv", 4), rm.Layer("relu"), rm.Layer("flatten"))
    spec = rm.ModelSpec("continuous", (rm.head_for("age"),), trunk, (3, 6, 6))
    p = rm.init_parameters(spec, np.random.default_rng(3))
    x = np.random.default_rng(4).random((2, 3, 6, 6))
    got = rm.forward(spec, p, x)["age"].data
    for b in range(2):
        xin = np.pad(x[b] - 0.5, ((0, 0), (1, 1), (1, 1)))
        fmap = np.stack([signal.correlate(xin, p["trunk.0.kernel"][o], mode="valid")[0]
                         + p["trunk.0.bias"][o] for o in range(4)])
        feat = np.maximum(fmap, 0).ravel()
        expect = p["head.age.weight"][0] @ feat + p["head.age.bias"][0]
        assert got[b] == pytest.approx(expect, rel=1e-12)


def test_output_ranges():
    spec = rm.build_classification_model(16)
    p = rm.init_parameters(spec, np.random.default_rng(5))
    imgs = (np.random.default_rng(6).random((5, 3, 16, 16)) * 255).astype(np.uint8)
    out = rm.predict(spec, p, imgs, rm.Standardization({}))
    assert ((out["gender"] > 0) & (out["gender"] < 1)).all()
    np.testing.assert_allclose(out["ethnicity"].sum(axis=1), 1.0, rtol=1e-12)


def test_untrained_gender_auc_null():
    spec = rm.build_classification_model(16)
    p = rm.init_parameters(spec, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    imgs = (rng.random((2000, 3, 16, 16)) * 255).astype(np.uint8)
    labels = rng.permutation(np.r_[np.ones(1000), np.zeros(1000)])
    scores = rm.predict(spec, p, imgs, rm.Standardization({}))["gender"]
    assert abs(es.auc(scores, labels) - 0.5) <= 0.05


# --- losses ---------------------------------------------------------------------


def two_head_spec():
    trunk = (rm.Layer("pool"), rm.Layer("flatten"))
    return rm.ModelSpec("continuous", (rm.head_for("age"), rm.head_for("sbp")), trunk, (1, 2, 2))


def test_multitask_loss_hand_case():
    spec = two_head_spec()
    outputs = {"age": nx.Tensor([1.0, 2.0]), "sbp": nx.Tensor([0.5, -1.0])}
    targets = {"age": np.array([0.0, 0.0]), "sbp": np.array([0.0, 3.0])}
    mask = {"age": np.array([1.0, 1.0]), "sbp": np.array([1.0, 0.0])}
    loss = rm.multitask_loss(spec, outputs, targets, mask)
    assert loss.item() == pytest.approx((1.0 + 4.0 + 0.25) / 3, rel=1e-15)
    perfect = rm.multitask_loss(spec, {"age": nx.Tensor([0.0, 0.0]), "sbp": nx.Tensor([0.0, 3.0])},
                                targets, mask)
    assert perfect.item() == 0.0
    with pytest.raises(ContractError):
        rm.multitask_loss(spec, outputs, targets, {"age": np.zeros(2), "sbp": np.zeros(2)})


def grads_for(spec, params, x, targets, mask):
    tape = nx.Tape()
    out = rm.forward(spec, params, x, tape)
    return nx.backward(tape, rm.multitask_loss(spec, out, targets, mask))


def test_masked_head_gets_zero_gradient_and_linearity():
    spec = two_head_spec()
    p = rm.init_parameters(spec, np.random.default_rng(9))
    x = np.random.default_rng(10).random((3, 1, 2, 2))
    targets = {"age": np.array([0.1, -0.3, 0.7]), "sbp": np.array([1.0, 0.0, -1.0])}
    full = {"age": np.ones(3), "sbp": np.ones(3)}
    only_age = {"age": np.ones(3), "sbp": np.zeros(3)}
    only_sbp = {"age": np.zeros(3), "sbp": np.ones(3)}
    g = grads_for(spec, p, x, targets, only_age)
    assert not g["head.sbp.weight"].data.any() and not g["head.sbp.bias"].data.any()
    # loss normalizes by the pair count: full = (3*L_age + 3*L_sbp)/6
    ga, gs = grads_for(spec, p, x, targets, only_age), grads_for(spec, p, x, targets, only_sbp)
    gf = grads_for(spec, p, x, targets, full)
    for k in gf:
        np.testing.assert_allclose(gf[k].data, 0.5 * (ga[k].data + gs[k].data), rtol=1e-12, atol=1e-15)


def test_mace_masked_for_prior_event():
    recs = sc.sample_population(400, seed=3)
    spec = rm.build_classification_model()
    _, mask = rm.targets_for(spec, recs)
    for r, m in zip(recs, mask["mace"]):
        assert m == (0.0 if r.prior_cardiac_event else 1.0)


# --- attention -------------------------------------------------------------------


def test_attention_heatmap_simplex():
    spec = rm.build_attention_model("age", 32)
    p = rm.init_parameters(spec, np.random.default_rng(11))
    _, hm = rm.attention_forward(spec, p, np.random.default_rng(12).random((3, 3, 32, 32)))
    assert hm.shape == (3, 8, 8)
    assert (hm.data >= 0).all()
    np.testing.assert_allclose(hm.data.sum(axis=(1, 2)), 1.0, atol=1e-9)


def equivariant_attention(size):
    """Untrained attention model with zero biases: no padding artifacts on a zero background."""
    spec = rm.build_attention_model("age", size)
    p = rm.init_parameters(spec, np.random.default_rng(13))
    p = {k: (np.zeros_like(v) if k.endswith("bias") else v) for k, v in p.items()}
    # score favors strong hidden activations so the bright feature wins
    p["attention.score.kernel"] = np.abs(p["attention.score.kernel"]) * 50
    p["attention.hidden.kernel"] = np.abs(p["attention.hidden.kernel"])
    return spec, p


def test_attention_uniform_input():
    spec, p = equivariant_attention(32)
    p = dict(p, **{"trunk.0.kernel": np.zeros_like(p["trunk.0.kernel"])})
    _, hm = rm.attention_forward(spec, p, np.full((1, 3, 32, 32), 0.5))
    np.testing.assert_allclose(hm.data, 1 / 64, atol=1e-6)


def test_attention_equivariance():
    spec, p = equivariant_attention(32)
    # input is centered by -0.5 in forward, so 0.5 is the neutral background
    def bright_at(y, x):
        img = np.full((1, 3, 32, 32), 0.5)
        img[0, :, y:y + 4, x:x + 4] = 1.0
        return img
    _, h0 = rm.attention_forward(spec, p, bright_at(8, 8))
    _, h1 = rm.attention_forward(spec, p, bright_at(16, 12))
    a0 = np.unravel_index(np.argmax(h0.data[0]), h0.shape[1:])
    a1 = np.unravel_index(np.argmax(h1.data[0]), h1.shape[1:])
    assert (a1[0] - a0[0], a1[1] - a0[1]) == (2, 1)
