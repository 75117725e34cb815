"""Minimal 2-D radiomic texture features over quantized ROIs.

Six families with a fixed 24-feature catalog: first-order intensity
statistics, gray-level co-occurrence (GLCM), run lengths (GLRLM), size
zones (GLSZM), dependence counts (GLDM), and neighborhood gray-tone
differences (NGTDM). Quantization uses a fixed bin count over the in-ROI
intensity range, so all texture features are invariant to affine intensity
rescaling of the ROI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import label as cc_label

from .errors import DimensionError, SpecificationError
from .metrics import ccc

DEFAULT_BINS = 32
NGTDM_EPS = 1e-8

FAMILIES: dict[str, list[str]] = {
    "first_order": ["mean", "variance", "skewness", "kurtosis", "energy", "entropy"],
    "glcm": ["contrast", "correlation", "energy", "homogeneity"],
    "glrlm": ["short_run_emphasis", "long_run_emphasis", "gray_level_nonuniformity",
              "run_length_nonuniformity", "run_percentage"],
    "glszm": ["small_zone_emphasis", "large_zone_emphasis", "zone_percentage"],
    "gldm": ["small_dependence_emphasis", "large_dependence_emphasis",
             "dependence_nonuniformity"],
    "ngtdm": ["coarseness", "contrast", "busyness"],
}

FEATURE_CATALOG: tuple[str, ...] = tuple(
    f"{family}.{name}" for family, names in FAMILIES.items() for name in names
)

_EIGHT_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class QuantizedROI:
    levels: np.ndarray     # int array, 0 outside the ROI, 1..n_g inside
    mask: np.ndarray       # bool ROI mask
    n_g: int
    bin_edges: np.ndarray


def quantize_roi(image: np.ndarray, roi_mask: np.ndarray, n_g: int = DEFAULT_BINS) -> QuantizedROI:
    """Fixed-bin-count quantization over the in-ROI intensity range.

    The top bin is right-closed, so the ROI maximum maps to level n_g; a
    constant ROI maps everything to level 1.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(roi_mask).astype(bool)
    if image.shape != mask.shape:
        raise DimensionError(f"roi mask {mask.shape} != image {image.shape}")
    if n_g < 2:
        raise SpecificationError(f"n_g must be >= 2, got {n_g}")
    if not mask.any():
        raise SpecificationError("empty ROI")
    vals = image[mask]
    lo, hi = vals.min(), vals.max()
    levels = np.zeros(image.shape, dtype=np.int64)
    if hi == lo:
        levels[mask] = 1
        edges = np.array([lo, hi])
    else:
        edges = np.linspace(lo, hi, n_g + 1)
        binned = np.floor((image - lo) / (hi - lo) * n_g).astype(np.int64) + 1
        levels[mask] = np.clip(binned[mask], 1, n_g)
    return QuantizedROI(levels=levels, mask=mask, n_g=n_g, bin_edges=edges)


def first_order_features(image: np.ndarray, roi_mask: np.ndarray) -> dict[str, float]:
    """Mean, population variance, skewness, excess kurtosis, energy, entropy."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(roi_mask).astype(bool)
    if image.shape != mask.shape:
        raise DimensionError(f"roi mask {mask.shape} != image {image.shape}")
    if not mask.any():
        raise SpecificationError("empty ROI")
    v = image[mask]
    mean = v.mean()
    var = np.mean((v - mean) ** 2)
    if var > 0:
        std = np.sqrt(var)
        skew = np.mean((v - mean) ** 3) / std**3
        kurt = np.mean((v - mean) ** 4) / var**2 - 3.0
    else:
        skew = 0.0
        kurt = 0.0
    energy = float(np.sum(v**2))
    q = quantize_roi(image, mask, DEFAULT_BINS)
    counts = np.bincount(q.levels[q.mask], minlength=DEFAULT_BINS + 1)[1:]
    p = counts[counts > 0] / counts.sum()
    entropy = float(-np.sum(p * np.log2(p)))
    return {"mean": float(mean), "variance": float(var), "skewness": float(skew),
            "kurtosis": float(kurt), "energy": energy, "entropy": entropy}


_GLCM_OFFSETS = [(0, 1), (1, 0), (1, 1), (1, -1)]


def _cooccurrence(q: QuantizedROI, offset: tuple[int, int]) -> np.ndarray:
    dy, dx = offset
    h, w = q.levels.shape
    counts = np.zeros((q.n_g, q.n_g), dtype=np.float64)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    a = q.levels[ys, xs]
    b = q.levels[max(0, dy):min(h, h + dy), max(0, dx):min(w, w + dx)]
    valid = (a > 0) & (b > 0)
    np.add.at(counts, (a[valid] - 1, b[valid] - 1), 1.0)
    return counts + counts.T


def glcm_features(q: QuantizedROI) -> dict[str, float]:
    """Contrast, correlation, energy, homogeneity from the offset-averaged GLCM."""
    mats = []
    for offset in _GLCM_OFFSETS:
        counts = _cooccurrence(q, offset)
        total = counts.sum()
        if total > 0:
            mats.append(counts / total)
    if not mats:
        raise SpecificationError("no valid co-occurrence pairs in ROI")
    p = np.mean(mats, axis=0)
    i = np.arange(1, q.n_g + 1, dtype=np.float64)
    ii, jj = np.meshgrid(i, i, indexing="ij")
    contrast = float(np.sum((ii - jj) ** 2 * p))
    p_i = p.sum(axis=1)
    mu_i = float(np.sum(i * p_i))
    var_i = float(np.sum((i - mu_i) ** 2 * p_i))
    p_j = p.sum(axis=0)
    mu_j = float(np.sum(i * p_j))
    var_j = float(np.sum((i - mu_j) ** 2 * p_j))
    denom = np.sqrt(var_i * var_j)
    if denom == 0.0:
        correlation = 1.0  # perfectly predictable texture
    else:
        correlation = float(np.sum((ii - mu_i) * (jj - mu_j) * p) / denom)
    energy = float(np.sum(p**2))
    homogeneity = float(np.sum(p / (1.0 + (ii - jj) ** 2)))
    return {"contrast": contrast, "correlation": correlation, "energy": energy,
            "homogeneity": homogeneity}


_GLRLM_DIRECTIONS = [(0, 1), (1, 0), (1, 1), (1, -1)]


def _run_length_matrix(q: QuantizedROI, direction: tuple[int, int]) -> np.ndarray:
    dy, dx = direction
    h, w = q.levels.shape
    max_len = max(h, w)
    rlm = np.zeros((q.n_g, max_len), dtype=np.float64)
    # start cells have no in-grid predecessor along the direction
    for y0 in range(h):
        for x0 in range(w):
            py, px = y0 - dy, x0 - dx
            if 0 <= py < h and 0 <= px < w:
                continue
            level, length = 0, 0
            y, x = y0, x0
            while 0 <= y < h and 0 <= x < w:
                cur = q.levels[y, x]
                if cur == level and cur > 0:
                    length += 1
                else:
                    if level > 0:
                        rlm[level - 1, length - 1] += 1
                    level, length = cur, (1 if cur > 0 else 0)
                y += dy
                x += dx
            if level > 0:
                rlm[level - 1, length - 1] += 1
    return rlm


def glrlm_features(q: QuantizedROI) -> dict[str, float]:
    """Run-length features averaged over the four 2-D directions."""
    if not q.mask.any():
        raise SpecificationError("empty ROI")
    n_pixels = int(q.mask.sum())
    acc = {name: 0.0 for name in FAMILIES["glrlm"]}
    for direction in _GLRLM_DIRECTIONS:
        rlm = _run_length_matrix(q, direction)
        n_runs = rlm.sum()
        lengths = np.arange(1, rlm.shape[1] + 1, dtype=np.float64)
        acc["short_run_emphasis"] += float(np.sum(rlm / lengths**2) / n_runs)
        acc["long_run_emphasis"] += float(np.sum(rlm * lengths**2) / n_runs)
        acc["gray_level_nonuniformity"] += float(np.sum(rlm.sum(axis=1) ** 2) / n_runs)
        acc["run_length_nonuniformity"] += float(np.sum(rlm.sum(axis=0) ** 2) / n_runs)
        acc["run_percentage"] += float(n_runs / n_pixels)
    return {name: value / len(_GLRLM_DIRECTIONS) for name, value in acc.items()}


def glszm_features(q: QuantizedROI) -> dict[str, float]:
    """Size-zone features over 8-connected equal-level zones."""
    if not q.mask.any():
        raise SpecificationError("empty ROI")
    n_pixels = int(q.mask.sum())
    structure = np.ones((3, 3), dtype=int)
    zone_sizes: list[int] = []
    for level in np.unique(q.levels[q.mask]):
        labeled, n_zones = cc_label(q.levels == level, structure=structure)
        zone_sizes.extend(np.bincount(labeled.ravel())[1:n_zones + 1].tolist())
    sizes = np.asarray(zone_sizes, dtype=np.float64)
    n_zones = sizes.size
    return {
        "small_zone_emphasis": float(np.sum(1.0 / sizes**2) / n_zones),
        "large_zone_emphasis": float(np.sum(sizes**2) / n_zones),
        "zone_percentage": float(n_zones / n_pixels),
    }


def gldm_features(q: QuantizedROI) -> dict[str, float]:
    """Dependence features: a pixel depends on equal-level in-ROI 8-neighbors."""
    if not q.mask.any():
        raise SpecificationError("empty ROI")
    h, w = q.levels.shape
    same_count = np.zeros((h, w), dtype=np.float64)
    for dy, dx in _EIGHT_NEIGHBORS:
        shifted = np.zeros_like(q.levels)
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        shifted[ys, xs] = q.levels[max(0, dy):min(h, h + dy), max(0, dx):min(w, w + dx)]
        same_count += ((shifted == q.levels) & (shifted > 0) & q.mask).astype(np.float64)
    dependence = (same_count + 1.0)[q.mask]
    total = dependence.size
    dep_hist = np.bincount(dependence.astype(np.int64), minlength=10)[1:]
    d = np.arange(1, dep_hist.size + 1, dtype=np.float64)
    return {
        "small_dependence_emphasis": float(np.sum(dep_hist / d**2) / total),
        "large_dependence_emphasis": float(np.sum(dep_hist * d**2) / total),
        "dependence_nonuniformity": float(np.sum(dep_hist.astype(np.float64) ** 2) / total),
    }


def ngtdm_features(q: QuantizedROI) -> dict[str, float]:
    """Neighborhood gray-tone difference features: coarseness, contrast, busyness."""
    h, w = q.levels.shape
    s = np.zeros(q.n_g + 1, dtype=np.float64)
    n = np.zeros(q.n_g + 1, dtype=np.float64)
    neighbor_sum = np.zeros((h, w), dtype=np.float64)
    neighbor_cnt = np.zeros((h, w), dtype=np.float64)
    for dy, dx in _EIGHT_NEIGHBORS:
        shifted = np.zeros_like(q.levels)
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        shifted[ys, xs] = q.levels[max(0, dy):min(h, h + dy), max(0, dx):min(w, w + dx)]
        inside = shifted > 0
        neighbor_sum += np.where(inside, shifted, 0)
        neighbor_cnt += inside
    valid = q.mask & (neighbor_cnt > 0)
    if not valid.any():
        raise SpecificationError("no ROI pixel has an in-ROI neighbor")
    means = neighbor_sum[valid] / neighbor_cnt[valid]
    lv = q.levels[valid]
    np.add.at(s, lv, np.abs(lv - means))
    np.add.at(n, lv, 1.0)
    total = n.sum()
    p = n / total
    present = np.flatnonzero(n > 0)
    n_gp = present.size
    sum_ps = float(np.sum(p * s))
    coarseness = 1.0 / max(sum_ps, NGTDM_EPS)
    if n_gp <= 1:
        contrast = 0.0
    else:
        diffs = 0.0
        for i in present:
            for j in present:
                diffs += p[i] * p[j] * (i - j) ** 2
        contrast = float(diffs / (n_gp * (n_gp - 1)) * (s.sum() / total))
    denom = 0.0
    for i in present:
        for j in present:
            if i != j:
                denom += abs(i * p[i] - j * p[j])
    busyness = float(sum_ps / denom) if denom > 0 else 0.0
    return {"coarseness": coarseness, "contrast": contrast, "busyness": busyness}


def feature_vector(image: np.ndarray, roi_mask: np.ndarray,
                   n_g: int = DEFAULT_BINS) -> dict[str, float]:
    """All 24 catalog features as an ordered {family.name: value} map."""
    q = quantize_roi(image, roi_mask, n_g)
    extractors = {
        "first_order": lambda: first_order_features(image, roi_mask),
        "glcm": lambda: glcm_features(q),
        "glrlm": lambda: glrlm_features(q),
        "glszm": lambda: glszm_features(q),
        "gldm": lambda: gldm_features(q),
        "ngtdm": lambda: ngtdm_features(q),
    }
    out: dict[str, float] = {}
    for family, names in FAMILIES.items():
        try:
            values = extractors[family]()
        except SpecificationError as exc:
            raise SpecificationError(f"{family}: {exc}") from exc
        for name in names:
            out[f"{family}.{name}"] = values[name]
    return out


@dataclass(frozen=True)
class CCCReport:
    per_feature: dict[str, float]
    per_family: dict[str, tuple[float, float]]  # family -> (mean, population std)
    overall: float


def ccc_report(reference: list[dict[str, float]], test: list[dict[str, float]]) -> CCCReport:
    """Feature-wise CCC across a cohort with class-wise and overall averages."""
    if len(reference) != len(test):
        raise SpecificationError(
            f"cohort sizes differ: {len(reference)} vs {len(test)}")
    if len(reference) < 2:
        raise SpecificationError(f"cohorts need >= 2 subjects, got {len(reference)}")
    catalogs = {tuple(v.keys()) for v in reference} | {tuple(v.keys()) for v in test}
    if catalogs != {FEATURE_CATALOG}:
        raise SpecificationError("feature catalogs do not match the 24-feature catalog")
    per_feature = {}
    for fid in FEATURE_CATALOG:
        ref_series = np.array([v[fid] for v in reference])
        test_series = np.array([v[fid] for v in test])
        per_feature[fid] = ccc(ref_series, test_series)
    per_family = {}
    for family, names in FAMILIES.items():
        vals = np.array([per_feature[f"{family}.{name}"] for name in names])
        per_family[family] = (float(vals.mean()), float(vals.std()))
    overall = float(np.mean(list(per_feature.values())))
    return CCCReport(per_feature=per_feature, per_family=per_family, overall=overall)
