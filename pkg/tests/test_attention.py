import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retina_risk import attention as att
from retina_risk import formats as fmt
from retina_risk import riskmodels as rm
from retina_risk import synthcohort as sc
from retina_risk.errors import ContractError, DimensionError


def bilinear_oracle(grid, H, W):
    """Per-pixel bilinear interpolation at pixel centers, clamped at the edges."""
    h, w = grid.shape
    out = np.zeros((H, W))
    for i in range(H):
        y = min(max((i + 0.5) * h / H - 0.5, 0), h - 1)
        y0 = int(np.floor(y))
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(W):
            x = min(max((j + 0.5) * w / W - 0.5, 0), w - 1)
            x0 = int(np.floor(x))
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * grid[y0, x0] + (1 - fy) * fx * grid[y0, x1]
                         + fy * (1 - fx) * grid[y1, x0] + fy * fx * grid[y1, x1])
    return out / out.sum()


def test_upsample_sums_to_one_and_uniform():
    up = att.upsample(np.full((4, 4), 1 / 16), (16, 16))
    assert abs(up.sum() - 1) <= 1e-6
    np.testing.assert_allclose(up, 1 / 256, atol=1e-6)


def test_upsample_delta_matches_oracle():
    grid = np.zeros((4, 4))
    grid[1, 2] = 1.0
    up = att.upsample(grid, (16, 16))
    np.testing.assert_allclose(up, bilinear_oracle(grid, 16, 16), atol=1e-12)
    # mass concentrates in the cell's footprint
    assert up[4:8, 8:12].sum() > 0.5
    rng = np.random.default_rng(0)
    g = rng.random((5, 3))
    np.testing.assert_allclose(att.upsample(g, (20, 12)), bilinear_oracle(g, 20, 12), atol=1e-12)


def test_localization_examples():
    uniform = np.full((10, 10), 0.01)
    mask = np.zeros((10, 10), bool)
    mask[0] = True
    assert att.localization_score(uniform, mask) == pytest.approx(0.10)
    point = np.zeros((10, 10))
    point[0, 3] = 1.0
    assert att.localization_score(point, mask) == 1.0
    with pytest.raises(DimensionError):
        att.localization_score(uniform, np.zeros((5, 5), bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_localization_brute_force_and_partition(seed):
    rng = np.random.default_rng(seed)
    w = rng.random((8, 8))
    w /= w.sum()
    mask = rng.random((8, 8)) < 0.3
    brute = sum(w[i, j] for i in range(8) for j in range(8) if mask[i, j])
    assert att.localization_score(w, mask) == pytest.approx(brute, rel=1e-12)
    labels = rng.integers(0, 4, size=(8, 8))
    parts = sum(att.localization_score(w, labels == k) for k in range(4))
    assert parts == pytest.approx(1.0, abs=1e-12)


@pytest.fixture(scope="module")
def scenes():
    recs = sc.sample_population(12, seed=5)
    return [sc.render_fundus(r, i) for i, r in enumerate(recs)]


def test_grade_uniform_never_enriched(scenes):
    maps = [np.full((64, 64), 1 / 4096)] * len(scenes)
    rep = att.grade_attention({"bmi": maps}, {"bmi": scenes})
    for f in att.FEATURES:
        assert rep.fractions["bmi"][f] == 0.0
    assert rep.fractions["bmi"]["nonspecific"] == 1.0


def test_grade_vessel_masks(scenes):
    maps = [s.vessel_mask / s.vessel_mask.sum() for s in scenes]
    rep = att.grade_attention({"age": maps}, {"age": scenes})
    assert rep.fractions["age"]["vessels"] == 1.0
    assert rep.fractions["age"]["nonspecific"] == 0.0


def test_grade_order_invariant_and_errors(scenes):
    rng = np.random.default_rng(1)
    maps = [rng.random((64, 64)) ** 8 for _ in scenes]
    maps = [m / m.sum() for m in maps]
    a = att.grade_attention({"x": maps}, {"x": scenes})
    perm = rng.permutation(len(scenes))
    b = att.grade_attention({"x": [maps[i] for i in perm]}, {"x": [scenes[i] for i in perm]})
    assert a.fractions == b.fractions
    with pytest.raises(ContractError):
        att.grade_attention({"x": maps}, {"x": scenes[:-1]})


def test_border_heatmap_is_nonspecific(scenes):
    s = scenes[0]
    border = att.border_mask(s.fundus_mask) & ~s.vessel_mask & ~s.optic_disc_mask & ~s.perivascular_mask
    hm = border / border.sum()
    assert att.highlights(hm, s)["nonspecific"]


def test_untrained_attention_rarely_enriched():
    recs = sc.sample_population(100, seed=6)
    data = sc.render_cohort(recs, seed=6)
    images = data.images[::2]
    scenes = [sc.render_fundus(r, sc.image_seed(6, i, 0)) for i, r in enumerate(recs)]
    spec = rm.build_attention_model("age")
    params = rm.init_parameters(spec, np.random.default_rng(0))
    maps = att.extract_heatmaps(spec, params, images)
    rep = att.grade_attention({"age": maps}, {"age": scenes})
    for f in att.FEATURES:
        assert rep.fractions["age"][f] < 0.20


def test_extract_heatmap_single():
    spec = rm.build_attention_model("sbp", 32)
    params = rm.init_parameters(spec, np.random.default_rng(1))
    img = (np.random.default_rng(2).random((3, 32, 32)) * 255).astype(np.uint8)
    hm = att.extract_heatmap(spec, params, img, "P1")
    assert hm.weights.shape == (32, 32) and hm.task == "sbp"
    assert abs(hm.weights.sum() - 1) <= 1e-6 and (hm.weights >= 0).all()
    with pytest.raises(ContractError):
        att.extract_heatmap(rm.build_continuous_model(32), {}, img)


def test_overlay(tmp_path):
    img = np.random.default_rng(3).random((3, 16, 16))
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    plain = att.overlay_export(img, np.zeros((16, 16)))
    for c in range(3):
        np.testing.assert_allclose(plain[c], gray)
    hm = np.zeros((16, 16))
    hm[3, 4] = 1.0
    assert att.overlay_export(img, hm)[1, 3, 4] == 1.0
    q = sc.quantize(att.overlay_export(img, hm))
    path = tmp_path / "o.ppm"
    fmt.write_ppm(path, q)
    assert np.array_equal(fmt.read_ppm(path), q)
