"""Deterministic synthetic image pairs with spatially heterogeneous degradation.

Generates elliptical "body" phantoms with band-limited interior texture and
bright blob lesions, then degrades them with per-pixel blur/noise/gain
fields. Every output is a pure function of its seed, so datasets are
bit-reproducible. Intensities live in [-1, 1]; masks are exact {0, 1}.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter

from .arrayio import read_arrays, write_arrays
from .errors import DimensionError, FormatError, SpecificationError

MANIFEST_VERSION = 1
PAIR_SUFFIX = ".rap"

# Display-only affine map to a pseudo Hounsfield window; training and all
# metrics operate on the normalized [-1, 1] scale.
PSEUDO_HU_SCALE = 1024.0


def to_pseudo_hu(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * PSEUDO_HU_SCALE


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    size: tuple[int, int] = (32, 32)
    n_lesions: int = 3
    lesion_radius_range: tuple[float, float] = (2.0, 4.0)
    background_texture_scale: float = 2.0
    intensity_range: tuple[float, float] = (0.05, 0.95)
    # restrict lesion centers to one image quadrant (0=TL, 1=TR, 2=BL, 3=BR);
    # None places them anywhere in the body
    lesion_quadrant: int | None = None
    # seed-driven variability of the body ellipse (center shift and axis
    # spread as a fraction of the image size); 0 fixes the geometry
    body_jitter: float = 0.03
    # mean ellipse semi-axis as a fraction of each image dimension; values
    # above ~0.5 push the body out to the frame corners
    body_scale: float = 0.39

    def validate(self) -> None:
        if self.lesion_quadrant is not None and self.lesion_quadrant not in (0, 1, 2, 3):
            raise SpecificationError(
                f"lesion_quadrant: expected None or 0..3, got {self.lesion_quadrant}")
        if not 0.0 <= self.body_jitter <= 0.08:
            raise SpecificationError(
                f"body_jitter: must be in [0, 0.08], got {self.body_jitter}")
        if not 0.2 <= self.body_scale <= 0.75:
            raise SpecificationError(
                f"body_scale: must be in [0.2, 0.75], got {self.body_scale}")
        h, w = self.size
        if h < 16 or w < 16:
            raise SpecificationError(f"size: both dimensions must be >= 16, got {self.size}")
        if self.n_lesions < 0:
            raise SpecificationError(f"n_lesions: must be >= 0, got {self.n_lesions}")
        lo, hi = self.lesion_radius_range
        if not (0 < lo <= hi):
            raise SpecificationError(
                f"lesion_radius_range: need 0 < lo <= hi, got {self.lesion_radius_range}")
        if 2 * hi >= min(h, w):
            raise SpecificationError(
                f"lesion_radius_range: radius {hi} does not fit inside image {self.size}")
        ilo, ihi = self.intensity_range
        if not (0.0 <= ilo < ihi <= 1.0):
            raise SpecificationError(
                f"intensity_range: need 0 <= lo < hi <= 1, got {self.intensity_range}")
        if self.background_texture_scale <= 0:
            raise SpecificationError(
                f"background_texture_scale: must be > 0, got {self.background_texture_scale}")


@dataclass
class DegradationField:
    """Per-pixel degradation maps; all share the image shape."""

    blur_sigma_map: np.ndarray
    noise_sigma_map: np.ndarray
    contrast_gain_map: np.ndarray
    seed: int

    def validate(self, shape: tuple[int, int] | None = None) -> None:
        maps = {
            "blur_sigma_map": self.blur_sigma_map,
            "noise_sigma_map": self.noise_sigma_map,
            "contrast_gain_map": self.contrast_gain_map,
        }
        ref = shape or self.blur_sigma_map.shape
        for name, m in maps.items():
            if m.shape != tuple(ref):
                raise DimensionError(f"{name} shape {m.shape} != image shape {tuple(ref)}")
            if not np.all(np.isfinite(m)):
                raise SpecificationError(f"{name} contains non-finite values")
        if np.any(self.blur_sigma_map < 0):
            raise SpecificationError("blur_sigma_map must be >= 0")
        if np.any(self.noise_sigma_map < 0):
            raise SpecificationError("noise_sigma_map must be >= 0")
        if np.any(self.contrast_gain_map <= 0):
            raise SpecificationError("contrast_gain_map must be > 0")


@dataclass(frozen=True)
class ImagePair:
    x_A: np.ndarray      # degraded source, float32 in [-1, 1]
    x_B: np.ndarray      # clean target,   float32 in [-1, 1]
    body_mask: np.ndarray    # uint8 {0, 1}
    lesion_mask: np.ndarray  # uint8 {0, 1}
    pair_id: str

    def validate(self) -> None:
        shape = self.x_A.shape
        for name in ("x_B", "body_mask", "lesion_mask"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(f"{name} shape {arr.shape} != x_A shape {shape}")
        for name in ("x_A", "x_B"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise SpecificationError(f"{name} contains non-finite values")
            if arr.min() < -1.0 or arr.max() > 1.0:
                raise SpecificationError(f"{name} intensities outside [-1, 1]")
        for name in ("body_mask", "lesion_mask"):
            arr = getattr(self, name)
            if not np.isin(arr, (0, 1)).all():
                raise SpecificationError(f"{name} is not binary")


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build (target, lesion_mask, body_mask) for a phantom spec.

    The target is a smooth ellipse on a dark background with low-amplitude
    band-limited texture inside the body and ``n_lesions`` non-overlapping
    bright blobs. Deterministic under ``spec.seed``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    lo, hi = spec.intensity_range
    span = hi - lo

    bj = spec.body_jitter
    cy = h / 2 + rng.uniform(-bj / 2, bj / 2) * h
    cx = w / 2 + rng.uniform(-bj / 2, bj / 2) * w
    a = rng.uniform(0.39 - bj, 0.39 + bj) * h
    b = rng.uniform(0.39 - bj, 0.39 + bj) * w
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2
    body_mask = (r2 <= 1.0).astype(np.uint8)

    body_soft = gaussian_filter(body_mask.astype(np.float64), sigma=1.0)
    base = lo + 0.5 * span
    img = lo + (base - lo) * body_soft

    texture = gaussian_filter(rng.standard_normal((h, w)), spec.background_texture_scale)
    t_std = texture.std()
    if t_std > 0:
        texture /= t_std
    img += 0.06 * span * texture * body_soft

    lesion_mask = np.zeros((h, w), dtype=np.uint8)
    placed: list[tuple[float, float, float]] = []
    r_lo, r_hi = spec.lesion_radius_range
    y_lo, y_hi, x_lo, x_hi = 0.0, float(h), 0.0, float(w)
    if spec.lesion_quadrant is not None:
        y_lo, y_hi = (0.0, h / 2) if spec.lesion_quadrant in (0, 1) else (h / 2, float(h))
        x_lo, x_hi = (0.0, w / 2) if spec.lesion_quadrant in (0, 2) else (w / 2, float(w))
    for _ in range(spec.n_lesions):
        ok = False
        for _attempt in range(1000):
            radius = rng.uniform(r_lo, r_hi)
            ly = rng.uniform(max(radius + 1, y_lo), min(h - radius - 1, y_hi))
            lx = rng.uniform(max(radius + 1, x_lo), min(w - radius - 1, x_hi))
            # the whole disk must sit inside the body ellipse
            margin = ((ly - cy) / (a - radius)) ** 2 + ((lx - cx) / (b - radius)) ** 2
            if a <= radius or b <= radius or margin > 1.0:
                continue
            # keep lesions separated so connected components stay distinct
            if any((ly - py) ** 2 + (lx - px) ** 2 <= (radius + pr + 2.0) ** 2
                   for py, px, pr in placed):
                continue
            placed.append((ly, lx, radius))
            dist = np.sqrt((yy - ly) ** 2 + (xx - lx) ** 2)
            inside = dist <= radius
            lesion_mask[inside] = 1
            profile = np.cos(0.5 * np.pi * np.clip(dist / radius, 0.0, 1.0)) ** 2
            img = np.where(inside, img + (hi - base) * profile, img)
            ok = True
            break
        if not ok:
            raise SpecificationError(
                f"n_lesions: could not place {spec.n_lesions} non-overlapping lesions "
                f"of radius {spec.lesion_radius_range} inside a {spec.size} body")

    img = np.clip(img, lo, hi)
    target = np.clip(2.0 * img - 1.0, -1.0, 1.0).astype(np.float32)
    return target, lesion_mask, body_mask


def _blur_bank(target: np.ndarray, blur_map: np.ndarray) -> np.ndarray:
    """Spatially varying blur via per-pixel interpolation over <= 4 fixed-sigma copies."""
    s_max = float(blur_map.max())
    if s_max == 0.0:
        return target.astype(np.float64)
    sigmas = [0.0, s_max / 3.0, 2.0 * s_max / 3.0, s_max]
    bank = [target.astype(np.float64)]
    bank += [gaussian_filter(target.astype(np.float64), s) for s in sigmas[1:]]
    pos = np.clip(blur_map / (s_max / 3.0), 0.0, 3.0)
    j = np.minimum(pos.astype(np.int64), 2)
    frac = pos - j
    stacked = np.stack(bank)
    rows, cols = np.indices(target.shape)
    lower = stacked[j, rows, cols]
    upper = stacked[j + 1, rows, cols]
    return (1.0 - frac) * lower + frac * upper


def degrade(target: np.ndarray, degradation: DegradationField) -> np.ndarray:
    """Apply gain * blur(target) + noise, clipped to [-1, 1]."""
    target = np.asarray(target)
    if degradation.blur_sigma_map.shape != target.shape:
        raise DimensionError(
            f"degradation maps {degradation.blur_sigma_map.shape} != target {target.shape}")
    degradation.validate(target.shape)
    blurred = _blur_bank(target, np.asarray(degradation.blur_sigma_map, dtype=np.float64))
    rng = np.random.default_rng(degradation.seed)
    noise = rng.standard_normal(target.shape) * degradation.noise_sigma_map
    source = degradation.contrast_gain_map * blurred + noise
    return np.clip(source, -1.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class DegradationSpec:
    """Template realized into a per-pair DegradationField.

    ``hot_quadrant`` elevates blur/noise in one image quadrant
    (0=top-left, 1=top-right, 2=bottom-left, 3=bottom-right); -1 picks a
    quadrant at random per pair, None degrades uniformly.
    """

    base_blur_sigma: float = 0.4
    base_noise_sigma: float = 0.03
    hot_quadrant: int | None = None
    hot_blur_sigma: float = 1.5
    hot_noise_sigma: float = 0.15
    gain_range: tuple[float, float] = (1.0, 1.0)
    jitter: float = 0.15  # per-pair relative variation of the sigma levels
    body_only: bool = True  # degrade only inside the body mask

    def validate(self) -> None:
        for name in ("base_blur_sigma", "base_noise_sigma", "hot_blur_sigma",
                     "hot_noise_sigma"):
            if getattr(self, name) < 0:
                raise SpecificationError(f"{name}: must be >= 0")
        if self.hot_quadrant is not None and self.hot_quadrant not in (-1, 0, 1, 2, 3):
            raise SpecificationError(
                f"hot_quadrant: expected None, -1, or 0..3, got {self.hot_quadrant}")
        glo, ghi = self.gain_range
        if not (0 < glo <= ghi):
            raise SpecificationError(f"gain_range: need 0 < lo <= hi, got {self.gain_range}")
        if not 0 <= self.jitter < 1:
            raise SpecificationError(f"jitter: must be in [0, 1), got {self.jitter}")

    def realize(self, shape: tuple[int, int], seed: int,
                mask: np.ndarray | None = None) -> DegradationField:
        """Build the per-pixel maps; with ``mask`` (e.g. the body mask) the
        blur/noise elevation is confined to mask pixels."""
        self.validate()
        rng = np.random.default_rng(seed)
        h, w = shape
        scale = 1.0 + self.jitter * rng.uniform(-1.0, 1.0)
        blur = np.full(shape, self.base_blur_sigma * scale)
        noise = np.full(shape, self.base_noise_sigma * scale)
        quadrant = self.hot_quadrant
        if quadrant == -1:
            quadrant = int(rng.integers(0, 4))
        if quadrant is not None:
            rows = slice(0, h // 2) if quadrant in (0, 1) else slice(h // 2, h)
            cols = slice(0, w // 2) if quadrant in (0, 2) else slice(w // 2, w)
            blur[rows, cols] = self.hot_blur_sigma * scale
            noise[rows, cols] = self.hot_noise_sigma * scale
        if mask is not None:
            keep = np.asarray(mask, dtype=bool)
            blur = np.where(keep, blur, 0.0)
            noise = np.where(keep, noise, 0.0)
        glo, ghi = self.gain_range
        if ghi > glo:
            gain_noise = gaussian_filter(rng.standard_normal(shape), max(h, w) / 8.0)
            lo_, hi_ = gain_noise.min(), gain_noise.max()
            unit = (gain_noise - lo_) / (hi_ - lo_) if hi_ > lo_ else np.zeros(shape)
            gain = glo + (ghi - glo) * unit
        else:
            gain = np.full(shape, glo)
        return DegradationField(blur, noise, gain, seed=int(rng.integers(0, 2**63 - 1)))


def write_pair(pair: ImagePair, path: str | os.PathLike) -> None:
    pair.validate()
    arrays = {
        "x_A": pair.x_A.astype(np.float32),
        "x_B": pair.x_B.astype(np.float32),
        "body_mask": pair.body_mask.astype(np.uint8),
        "lesion_mask": pair.lesion_mask.astype(np.uint8),
    }
    write_arrays(path, arrays, meta={"pair_id": pair.pair_id})


def read_pair(path: str | os.PathLike) -> ImagePair:
    arrays, meta = read_arrays(path)
    missing = {"x_A", "x_B", "body_mask", "lesion_mask"} - arrays.keys()
    if missing:
        raise FormatError(f"pair file missing arrays {sorted(missing)}")
    pair = ImagePair(
        x_A=arrays["x_A"], x_B=arrays["x_B"],
        body_mask=arrays["body_mask"], lesion_mask=arrays["lesion_mask"],
        pair_id=str(meta.get("pair_id", "")),
    )
    pair.validate()
    return pair


def _split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    ftrain, fval, ftest = fractions
    if not np.isclose(ftrain + fval + ftest, 1.0):
        raise SpecificationError(f"split fractions must sum to 1, got {fractions}")
    n_val = int(round(n * fval))
    n_test = int(round(n * ftest))
    if n >= 3:
        n_val = max(n_val, 1)
        n_test = max(n_test, 1)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise SpecificationError(f"split {fractions} leaves no training pairs for n={n}")
    return n_train, n_val, n_test


def build_dataset(n_pairs: int, spec_template: PhantomSpec,
                  degradation_template: DegradationSpec, out_dir: str | os.PathLike,
                  seed: int, splits: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> dict:
    """Generate pair files plus a manifest with disjoint train/val/test splits."""
    if n_pairs < 1:
        raise SpecificationError(f"n_pairs: must be >= 1, got {n_pairs}")
    spec_template.validate()
    degradation_template.validate()
    out_dir = os.fspath(out_dir)
    pairs_dir = os.path.join(out_dir, "pairs")
    try:
        os.makedirs(pairs_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir!r}: {exc}") from exc

    n_train, n_val, _ = _split_counts(n_pairs, splits)
    perm = np.random.default_rng(np.random.SeedSequence([seed, n_pairs])).permutation(n_pairs)
    split_of = {}
    for rank, idx in enumerate(perm):
        split_of[int(idx)] = ("train" if rank < n_train
                              else "val" if rank < n_train + n_val else "test")

    entries = []
    for i in range(n_pairs):
        phantom_seed = int(np.random.SeedSequence([seed, i, 0]).generate_state(1)[0])
        degrade_seed = int(np.random.SeedSequence([seed, i, 1]).generate_state(1)[0])
        pair_id = f"pair{i:04d}-{phantom_seed:08x}"
        spec = PhantomSpec(
            seed=phantom_seed, size=spec_template.size,
            n_lesions=spec_template.n_lesions,
            lesion_radius_range=spec_template.lesion_radius_range,
            background_texture_scale=spec_template.background_texture_scale,
            intensity_range=spec_template.intensity_range,
        )
        target, lesion_mask, body_mask = generate_phantom(spec)
        degradation = degradation_template.realize(
            spec.size, degrade_seed,
            mask=body_mask if degradation_template.body_only else None)
        source = degrade(target, degradation)
        pair = ImagePair(source, target, body_mask, lesion_mask, pair_id)
        rel_path = os.path.join("pairs", pair_id + PAIR_SUFFIX)
        write_pair(pair, os.path.join(out_dir, rel_path))
        entries.append({"pair_id": pair_id, "path": rel_path, "split": split_of[i]})

    manifest = {"version": MANIFEST_VERSION, "seed": seed, "pairs": entries}
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def load_manifest(path: str | os.PathLike) -> dict:
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.get('version')!r}")
    return manifest


def manifest_pairs(manifest: dict, manifest_path: str | os.PathLike,
                   split: str | None = None) -> list[ImagePair]:
    """Load the pairs of one split (or all pairs) referenced by a manifest."""
    base = os.path.dirname(os.fspath(manifest_path))
    out = []
    for entry in manifest["pairs"]:
        if split is not None and entry["split"] != split:
            continue
        out.append(read_pair(os.path.join(base, entry["path"])))
    return out
