"""Heatmap extraction, localization grading and overlay rasters for attention models."""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import riskmodels as rm
from .errors import ContractError, DimensionError

FEATURES = ("vessels", "optic_disc", "perivascular")
_MASK_FIELD = {"vessels": "vessel_mask", "optic_disc": "optic_disc_mask",
               "perivascular": "perivascular_mask"}


@dataclass(frozen=True)
class Heatmap:
    weights: np.ndarray      # [H,W], nonnegative, sums to 1
    task: str
    patient_id: str = ""


def bilinear_matrix(n_in, n_out):
    """[n_out, n_in] interpolation weights, sampling at pixel centers with edge clamping."""
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample(grid, size):
    """Bilinear upsample of a [h,w] grid to ``size`` = (H, W), renormalized to sum 1."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2:
        raise DimensionError(f"heatmap grid must be 2-D, got shape {grid.shape}")
    H, W = size
    up = bilinear_matrix(grid.shape[0], H) @ grid @ bilinear_matrix(grid.shape[1], W).T
    up = np.maximum(up, 0.0)
    total = up.sum()
    if total <= 0:
        return np.full((H, W), 1.0 / (H * W))
    return up / total


def extract_heatmap(spec, params, image, patient_id=""):
    """Heatmap at image resolution for one image ([3,H,W], uint8 or float)."""
    if spec.family != "attention":
        raise ContractError("extract_heatmap needs an attention model")
    image = np.asarray(image)
    if image.shape != tuple(spec.input_shape):
        raise DimensionError(f"image shape {image.shape} does not match model input {spec.input_shape}")
    grid = rm.heatmaps(spec, params, image[None])[0]
    return Heatmap(upsample(grid, image.shape[1:]), spec.head.name, patient_id)


def extract_heatmaps(spec, params, images, patient_ids=None):
    grids = rm.heatmaps(spec, params, images)
    ids = patient_ids if patient_ids is not None else [""] * len(grids)
    size = images.shape[2:]
    return [Heatmap(upsample(g, size), spec.head.name, pid) for g, pid in zip(grids, ids)]


def localization_score(heatmap, mask):
    """Attention mass inside ``mask``."""
    w = heatmap.weights if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if w.shape != mask.shape:
        raise DimensionError(f"heatmap {w.shape} and mask {mask.shape} differ")
    return float(w[mask].sum())


def border_mask(fundus_mask, width=3.0):
    """Pixels within ``width`` of the circular fundus border (either side)."""
    fm = np.asarray(fundus_mask, dtype=bool)
    inside = ndimage.distance_transform_edt(fm)
    outside = ndimage.distance_transform_edt(~fm)
    return ((inside > 0) & (inside <= width)) | ((outside > 0) & (outside <= width))


def entropy_ratio(weights):
    w = np.asarray(weights, dtype=float).ravel()
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum() / np.log(w.size))


@dataclass
class AttentionGradeReport:
    """task -> feature -> fraction of heatmaps highlighting the feature."""

    fractions: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def percent(self, task, feature):
        return 100.0 * self.fractions[task][feature]

    def to_text(self):
        cols = FEATURES + ("nonspecific",)
        lines = ["task\t" + "\t".join(cols) + "\tM"]
        for task, fr in self.fractions.items():
            lines.append(task + "\t" + "\t".join(f"{100 * fr[c]:.0f}%" for c in cols)
                         + f"\t{self.counts[task]}")
        return "\n".join(lines) + "\n"


def highlights(heatmap, scene, enrichment=2.0, entropy_fraction=0.9, border_width=3.0):
    """Feature -> bool for one heatmap against its scene's masks."""
    w = heatmap.weights if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=float)
    out = {}
    for f in FEATURES:
        mask = getattr(scene, _MASK_FIELD[f], None)
        if mask is None:
            raise ContractError(f"scene lacks the {f} mask")
        area = float(np.mean(mask))
        out[f] = area > 0 and localization_score(w, mask) >= enrichment * area
    diffuse = entropy_ratio(w) >= entropy_fraction
    on_border = localization_score(w, border_mask(scene.fundus_mask, border_width)) >= 0.5
    out["nonspecific"] = not any(out[f] for f in FEATURES) and (diffuse or on_border)
    return out


def grade_attention(heatmaps_by_task, scenes_by_task, enrichment=2.0):
    """Per-task fraction of heatmaps that highlight each feature.

    ``heatmaps_by_task[task]`` and ``scenes_by_task[task]`` are parallel lists.
    """
    report = AttentionGradeReport()
    for task, maps in heatmaps_by_task.items():
        scenes = scenes_by_task.get(task)
        if scenes is None or len(scenes) != len(maps):
            raise ContractError(f"need one scene per heatmap for task {task}")
        if not maps:
            raise ContractError(f"no heatmaps for task {task}")
        tally = {f: 0 for f in FEATURES + ("nonspecific",)}
        for hm, scene in zip(maps, scenes):
            for f, hit in highlights(hm, scene, enrichment).items():
                tally[f] += int(hit)
        report.fractions[task] = {f: c / len(maps) for f, c in tally.items()}
        report.counts[task] = len(maps)
    return report


def overlay_export(image, heatmap, gain=None):
    """Grayscale image with the heatmap added to the green channel, clipped to [0,1].

    ``image`` is [3,H,W] in [0,1] (uint8 is rescaled).  The heatmap is scaled
    by ``gain`` (default: so its maximum maps to 1).
    """
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img / 255.0
    w = heatmap.weights if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=float)
    if img.shape[1:] != w.shape:
        raise DimensionError(f"image {img.shape} and heatmap {w.shape} differ")
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    if gain is None:
        peak = w.max()
        gain = 1.0 / peak if peak > 0 else 0.0
    out = np.stack([gray, gray + gain * w, gray])
    return np.clip(out, 0.0, 1.0)
