"""Naive brute-force texture enumerators used as independent oracles.

Everything here is written with explicit Python loops over pixels, pairs,
runs, zones, and neighborhoods — deliberately sharing no code with the
vectorized extractors under test.
"""

import math


def _in_roi(levels, y, x):
    h = len(levels)
    w = len(levels[0])
    return 0 <= y < h and 0 <= x < w and levels[y][x] > 0


def naive_glcm(levels, n_g):
    """Offset-averaged symmetric GLCM features via exhaustive pair enumeration."""
    offsets = [(0, 1), (1, 0), (1, 1), (1, -1)]
    h, w = len(levels), len(levels[0])
    mats = []
    for dy, dx in offsets:
        counts = [[0.0] * n_g for _ in range(n_g)]
        total = 0
        for y in range(h):
            for x in range(w):
                if levels[y][x] > 0 and _in_roi(levels, y + dy, x + dx):
                    i, j = levels[y][x], levels[y + dy][x + dx]
                    counts[i - 1][j - 1] += 1
                    counts[j - 1][i - 1] += 1
                    total += 2
        if total:
            mats.append([[c / total for c in row] for row in counts])
    if not mats:
        raise ValueError("no pairs")
    p = [[sum(m[i][j] for m in mats) / len(mats) for j in range(n_g)] for i in range(n_g)]

    contrast = sum((i - j) ** 2 * p[i - 1][j - 1]
                   for i in range(1, n_g + 1) for j in range(1, n_g + 1))
    p_i = [sum(p[i][j] for j in range(n_g)) for i in range(n_g)]
    p_j = [sum(p[i][j] for i in range(n_g)) for j in range(n_g)]
    mu_i = sum((i + 1) * p_i[i] for i in range(n_g))
    mu_j = sum((j + 1) * p_j[j] for j in range(n_g))
    var_i = sum((i + 1 - mu_i) ** 2 * p_i[i] for i in range(n_g))
    var_j = sum((j + 1 - mu_j) ** 2 * p_j[j] for j in range(n_g))
    if var_i * var_j == 0:
        correlation = 1.0
    else:
        correlation = sum((i + 1 - mu_i) * (j + 1 - mu_j) * p[i][j]
                          for i in range(n_g) for j in range(n_g)) / math.sqrt(var_i * var_j)
    energy = sum(p[i][j] ** 2 for i in range(n_g) for j in range(n_g))
    homogeneity = sum(p[i][j] / (1.0 + (i - j) ** 2)
                      for i in range(n_g) for j in range(n_g))
    return {"contrast": contrast, "correlation": correlation, "energy": energy,
            "homogeneity": homogeneity}


def naive_glrlm(levels, n_g):
    """Run enumeration by walking every line in each of the four directions."""
    directions = [(0, 1), (1, 0), (1, 1), (1, -1)]
    h, w = len(levels), len(levels[0])
    n_pixels = sum(1 for y in range(h) for x in range(w) if levels[y][x] > 0)
    feats = {"short_run_emphasis": 0.0, "long_run_emphasis": 0.0,
             "gray_level_nonuniformity": 0.0, "run_length_nonuniformity": 0.0,
             "run_percentage": 0.0}
    for dy, dx in directions:
        runs = []  # (level, length)
        for y0 in range(h):
            for x0 in range(w):
                if 0 <= y0 - dy < h and 0 <= x0 - dx < w:
                    continue  # not a line start
                y, x = y0, x0
                cur, run_len = 0, 0
                while 0 <= y < h and 0 <= x < w:
                    lv = levels[y][x]
                    if lv > 0 and lv == cur:
                        run_len += 1
                    else:
                        if cur > 0:
                            runs.append((cur, run_len))
                        cur, run_len = lv, (1 if lv > 0 else 0)
                    y, x = y + dy, x + dx
                if cur > 0:
                    runs.append((cur, run_len))
        n_runs = len(runs)
        feats["short_run_emphasis"] += sum(1.0 / l**2 for _, l in runs) / n_runs
        feats["long_run_emphasis"] += sum(float(l**2) for _, l in runs) / n_runs
        by_level = {}
        by_length = {}
        for lv, l in runs:
            by_level[lv] = by_level.get(lv, 0) + 1
            by_length[l] = by_length.get(l, 0) + 1
        feats["gray_level_nonuniformity"] += sum(c**2 for c in by_level.values()) / n_runs
        feats["run_length_nonuniformity"] += sum(c**2 for c in by_length.values()) / n_runs
        feats["run_percentage"] += n_runs / n_pixels
    return {k: v / len(directions) for k, v in feats.items()}


def naive_glszm(levels, n_g):
    """Zones found by explicit flood fill over 8-connected equal-level pixels."""
    h, w = len(levels), len(levels[0])
    seen = [[False] * w for _ in range(h)]
    sizes = []
    for y in range(h):
        for x in range(w):
            if levels[y][x] == 0 or seen[y][x]:
                continue
            lv = levels[y][x]
            stack = [(y, x)]
            seen[y][x] = True
            size = 0
            while stack:
                cy, cx = stack.pop()
                size += 1
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if (0 <= ny < h and 0 <= nx < w and not seen[ny][nx]
                                and levels[ny][nx] == lv):
                            seen[ny][nx] = True
                            stack.append((ny, nx))
            sizes.append(size)
    n_zones = len(sizes)
    n_pixels = sum(1 for y in range(h) for x in range(w) if levels[y][x] > 0)
    return {
        "small_zone_emphasis": sum(1.0 / s**2 for s in sizes) / n_zones,
        "large_zone_emphasis": sum(float(s**2) for s in sizes) / n_zones,
        "zone_percentage": n_zones / n_pixels,
    }


def naive_gldm(levels, n_g):
    """Dependence counting by explicit neighbor loops."""
    h, w = len(levels), len(levels[0])
    deps = []
    for y in range(h):
        for x in range(w):
            if levels[y][x] == 0:
                continue
            d = 1
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy == dx == 0:
                        continue
                    if _in_roi(levels, y + dy, x + dx) and \
                            levels[y + dy][x + dx] == levels[y][x]:
                        d += 1
            deps.append(d)
    total = len(deps)
    by_dep = {}
    for d in deps:
        by_dep[d] = by_dep.get(d, 0) + 1
    return {
        "small_dependence_emphasis": sum(c / d**2 for d, c in by_dep.items()) / total,
        "large_dependence_emphasis": sum(c * d**2 for d, c in by_dep.items()) / total,
        "dependence_nonuniformity": sum(c**2 for c in by_dep.values()) / total,
    }


def naive_ngtdm(levels, n_g):
    """Neighborhood gray-tone differences by explicit per-pixel loops."""
    h, w = len(levels), len(levels[0])
    s = {i: 0.0 for i in range(1, n_g + 1)}
    n = {i: 0 for i in range(1, n_g + 1)}
    for y in range(h):
        for x in range(w):
            if levels[y][x] == 0:
                continue
            neigh = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy == dx == 0:
                        continue
                    if _in_roi(levels, y + dy, x + dx):
                        neigh.append(levels[y + dy][x + dx])
            if not neigh:
                continue
            mean = sum(neigh) / len(neigh)
            s[levels[y][x]] += abs(levels[y][x] - mean)
            n[levels[y][x]] += 1
    total = sum(n.values())
    if total == 0:
        raise ValueError("no valid pixels")
    p = {i: n[i] / total for i in n}
    present = [i for i in n if n[i] > 0]
    sum_ps = sum(p[i] * s[i] for i in present)
    coarseness = 1.0 / max(sum_ps, 1e-8)
    n_gp = len(present)
    if n_gp <= 1:
        contrast = 0.0
    else:
        pair_sum = sum(p[i] * p[j] * (i - j) ** 2 for i in present for j in present)
        contrast = pair_sum / (n_gp * (n_gp - 1)) * (sum(s[i] for i in present) / total)
    denom = sum(abs(i * p[i] - j * p[j]) for i in present for j in present if i != j)
    busyness = sum_ps / denom if denom > 0 else 0.0
    return {"coarseness": coarseness, "contrast": contrast, "busyness": busyness}


def naive_first_order(values, n_g=32):
    """First-order statistics from plain Python arithmetic."""
    vals = [float(v) for v in values]
    n = len(vals)
    mean = sum(vals) / n
    var = sum((v - mean) ** 2 for v in vals) / n
    if var > 0:
        std = math.sqrt(var)
        skew = sum((v - mean) ** 3 for v in vals) / n / std**3
        kurt = sum((v - mean) ** 4 for v in vals) / n / var**2 - 3.0
    else:
        skew = kurt = 0.0
    energy = sum(v**2 for v in vals)
    lo, hi = min(vals), max(vals)
    if hi == lo:
        entropy = 0.0
    else:
        counts = {}
        for v in vals:
            b = min(int((v - lo) / (hi - lo) * n_g), n_g - 1)
            counts[b] = counts.get(b, 0) + 1
        entropy = -sum((c / n) * math.log2(c / n) for c in counts.values())
    return {"mean": mean, "variance": var, "skewness": skew, "kurtosis": kurt,
            "energy": energy, "entropy": entropy}
