"""Progressive enhancement rollout: coarse MeanFlow updates plus tile-gated
local micro-steps under a refinement controller's budgets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import binary_erosion, binary_fill_holes, gaussian_filter, label

from .errors import SpecificationError, DimensionError


@dataclass(frozen=True)
class Schedule:
    """Descending rollout times t_0 = 1 > ... > t_K = 0."""

    K: int
    times: tuple[float, ...]

    def __post_init__(self):
        if self.K < 1:
            raise SpecificationError(f"K must be >= 1, got {self.K}")
        if len(self.times) != self.K + 1:
            raise SpecificationError("schedule needs K + 1 times")
        if self.times[0] != 1.0 or self.times[-1] != 0.0:
            raise SpecificationError(f"schedule endpoints must be 1 and 0, got {self.times}")
        if any(a <= b for a, b in zip(self.times, self.times[1:])):
            raise SpecificationError(f"times must be strictly decreasing, got {self.times}")


def make_schedule(K: int) -> Schedule:
    """Uniform descending schedule t_k = 1 - k/K."""
    if K < 1:
        raise SpecificationError(f"K must be >= 1, got {K}")
    return Schedule(K=K, times=tuple((K - k) / K for k in range(K + 1)))


@dataclass(frozen=True)
class TileGrid:
    tile_size: int
    n_rows: int
    n_cols: int
    image_shape: tuple[int, int]

    @classmethod
    def for_image(cls, image_shape: tuple[int, int], tile_size: int) -> "TileGrid":
        if tile_size < 2:
            raise SpecificationError(f"tile_size must be >= 2, got {tile_size}")
        h, w = image_shape
        return cls(tile_size=tile_size,
                   n_rows=math.ceil(h / tile_size),
                   n_cols=math.ceil(w / tile_size),
                   image_shape=(h, w))

    def upsample(self, tile_values: np.ndarray) -> np.ndarray:
        """Nearest-neighbor expansion of per-tile values to pixel resolution."""
        if tile_values.shape != (self.n_rows, self.n_cols):
            raise DimensionError(
                f"tile grid {tile_values.shape} != ({self.n_rows}, {self.n_cols})")
        h, w = self.image_shape
        full = np.kron(tile_values, np.ones((self.tile_size, self.tile_size),
                                            dtype=tile_values.dtype))
        return full[:h, :w]

    def tile_reduce(self, image: np.ndarray, fn=np.mean) -> np.ndarray:
        """Per-tile reduction of a pixel image (partial edge tiles included)."""
        out = np.zeros((self.n_rows, self.n_cols), dtype=np.float64)
        for row in range(self.n_rows):
            for col in range(self.n_cols):
                ys = slice(row * self.tile_size, min((row + 1) * self.tile_size,
                                                     self.image_shape[0]))
                xs = slice(col * self.tile_size, min((col + 1) * self.tile_size,
                                                     self.image_shape[1]))
                out[row, col] = fn(image[ys, xs])
        return out


@dataclass
class RefinementAction:
    """One controller decision: gates, per-tile budgets, global budget, stop."""

    tile_select: np.ndarray   # (R, C) in [0, 1]; {0,1} for realized actions
    tile_budget: np.ndarray   # (R, C) ints in [0, m_max]
    global_budget: int
    stop: int

    def validate(self, grid: TileGrid, m_max: int) -> None:
        dims = (grid.n_rows, grid.n_cols)
        if self.tile_select.shape != dims or self.tile_budget.shape != dims:
            raise DimensionError(
                f"action grids {self.tile_select.shape}/{self.tile_budget.shape} != {dims}")
        if np.any(self.tile_select < 0) or np.any(self.tile_select > 1):
            raise SpecificationError("tile_select values must lie in [0, 1]")
        if np.any(self.tile_budget < 0) or np.any(self.tile_budget > m_max):
            raise SpecificationError(f"tile budgets must lie in [0, {m_max}]")
        if np.any((self.tile_select == 0) & (self.tile_budget > 0)):
            raise SpecificationError("tile_budget must be 0 wherever tile_select is 0")
        if self.global_budget < 0:
            raise SpecificationError("global_budget must be >= 0")
        if self.stop not in (0, 1):
            raise SpecificationError(f"stop must be 0 or 1, got {self.stop}")


@dataclass(frozen=True)
class RolloutConfig:
    K: int = 4
    tile_size: int = 4
    m_max: int = 3
    gamma_local: float = 0.25
    feather: bool = False
    init_seed: int = 0

    def validate(self) -> None:
        if self.K < 1:
            raise SpecificationError(f"K must be >= 1, got {self.K}")
        if self.m_max < 1:
            raise SpecificationError(f"m_max must be >= 1, got {self.m_max}")
        if not 0.0 < self.gamma_local <= 1.0:
            raise SpecificationError(
                f"gamma_local must be in (0, 1], got {self.gamma_local}")
        if self.tile_size < 2:
            raise SpecificationError(f"tile_size must be >= 2, got {self.tile_size}")


class TorchFlowAdapter:
    """numpy-facing view of a torch flow network: (x, x_A, r, t) -> u."""

    def __init__(self, net):
        self.net = net

    def __call__(self, x: np.ndarray, x_A: np.ndarray, r: float, t: float) -> np.ndarray:
        with torch.no_grad():
            xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None, None]
            xa = torch.from_numpy(np.ascontiguousarray(x_A, dtype=np.float32))[None, None]
            u = self.net(xt, xa, torch.tensor([float(r)]), torch.tensor([float(t)]))
        return u[0, 0].numpy()


class _CountingFlow:
    def __init__(self, flow):
        self.flow = flow
        self.evals = 0

    def __call__(self, x, x_A, r, t):
        self.evals += 1
        return self.flow(x, x_A, r, t)


def _as_flow(net):
    return net if callable(net) and not isinstance(net, torch.nn.Module) \
        else TorchFlowAdapter(net)


def coarse_step(net, x_k: np.ndarray, x_A: np.ndarray,
                t_k: float, t_next: float) -> np.ndarray:
    """x_coarse = x_k - (t_k - t_{k+1}) * u(x_k, x_A, t_{k+1}, t_k)."""
    if t_next > t_k:
        raise SpecificationError(f"need t_{{k+1}} <= t_k, got {t_next} > {t_k}")
    if x_k.shape != x_A.shape:
        raise DimensionError(f"x_k {x_k.shape} != x_A {x_A.shape}")
    if t_next == t_k:
        return x_k.copy()
    flow = _as_flow(net)
    u = flow(x_k, x_A, t_next, t_k)
    return (x_k - np.float32(t_k - t_next) * u).astype(np.float32)


def build_masks(action: RefinementAction, grid: TileGrid, m_max: int,
                feather: bool = False) -> list[np.ndarray]:
    """Soft gate masks M^(1..m_max); M^(m) opens tiles with budget >= m.

    Masks are pixelwise non-increasing in m. With feathering, support pixels
    on a gate boundary (4-neighbor outside the support) take the half-way
    value of a 1-pixel cosine ramp.
    """
    action.validate(grid, m_max)
    masks = []
    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    for m in range(1, m_max + 1):
        gate = np.where(action.tile_budget >= m, action.tile_select, 0.0)
        mask = grid.upsample(gate.astype(np.float32))
        if feather:
            support = mask > 0
            interior = binary_erosion(support, structure=cross, border_value=1)
            ring = support & ~interior
            # cosine ramp sampled half a pixel into the gate: cos^2(pi/4) = 1/2
            mask = np.where(ring, 0.5 * mask, mask).astype(np.float32)
        masks.append(mask)
    return masks


def micro_step(net, x_prev: np.ndarray, x_A: np.ndarray, t_k: float, t_next: float,
               mask: np.ndarray, gamma_local: float) -> np.ndarray:
    """Masked local update with a reduced increment dt = gamma * (t_k - t_{k+1}).

    Pixels with mask exactly 0 are returned bit-identical.
    """
    if np.any(mask < 0) or np.any(mask > 1):
        raise SpecificationError("mask values must lie in [0, 1]")
    if mask.shape != x_prev.shape:
        raise DimensionError(f"mask {mask.shape} != image {x_prev.shape}")
    if t_next > t_k:
        raise SpecificationError(f"need t_{{k+1}} <= t_k, got {t_next} > {t_k}")
    flow = _as_flow(net)
    dt_local = np.float32(gamma_local * (t_k - t_next))
    u = flow(x_prev, x_A, t_next, t_k)
    updated = (x_prev - (mask.astype(np.float32) * dt_local) * u).astype(np.float32)
    return np.where(mask > 0, updated, x_prev)


def allocate_budgets(action: RefinementAction, select_prob: np.ndarray) -> np.ndarray:
    """Cap the summed per-tile budgets at the global budget.

    Tiles are served in descending selection probability with row-major
    tie-break; the last served tile may be truncated.
    """
    flat_budget = action.tile_budget.ravel().astype(np.int64)
    flat_gate = action.tile_select.ravel()
    prob = select_prob.ravel()
    order = np.lexsort((np.arange(prob.size), -prob))
    effective = np.zeros_like(flat_budget)
    remaining = int(action.global_budget)
    for idx in order:
        if remaining <= 0:
            break
        if flat_gate[idx] == 0 or flat_budget[idx] == 0:
            continue
        grant = min(int(flat_budget[idx]), remaining)
        effective[idx] = grant
        remaining -= grant
    return effective.reshape(action.tile_budget.shape)


def body_mask_from_image(x_A: np.ndarray, threshold: float = -0.5) -> np.ndarray:
    """Threshold heuristic for externally supplied images without a stored mask."""
    smooth = gaussian_filter(np.asarray(x_A, dtype=np.float64), 1.0)
    mask = binary_fill_holes(smooth > threshold)
    labeled, n = label(mask)
    if n > 1:
        sizes = np.bincount(labeled.ravel())
        sizes[0] = 0
        mask = labeled == sizes.argmax()
    return mask.astype(np.uint8)


@dataclass
class RolloutStep:
    k: int
    t_k: float
    t_next: float
    stop: int
    global_budget: int
    tile_select: np.ndarray
    tile_budget: np.ndarray
    effective_budget: np.ndarray
    executed_micro_steps: int   # number of gated network evaluations (levels)
    eval_count: int             # coarse + micro evaluations of this step
    log_prob: float = 0.0
    value: float = 0.0
    entropy: float = 0.0
    features: np.ndarray | None = None
    state_after: np.ndarray | None = None


@dataclass
class RolloutTrace:
    steps: list[RolloutStep] = field(default_factory=list)
    initial_state: np.ndarray | None = None
    grid_shape: tuple[int, int] = (0, 0)

    @property
    def total_evals(self) -> int:
        return sum(s.eval_count for s in self.steps)

    @property
    def total_micro_steps(self) -> int:
        return sum(s.executed_micro_steps for s in self.steps)

    def to_json(self) -> str:
        payload = {
            "grid_shape": list(self.grid_shape),
            "steps": [{
                "t_k": s.t_k,
                "stop": s.stop,
                "global_budget": s.global_budget,
                "tile_select": np.asarray(s.tile_select, dtype=float).ravel().tolist(),
                "tile_budget": np.asarray(s.tile_budget, dtype=int).ravel().tolist(),
                "effective_tile_budget":
                    np.asarray(s.effective_budget, dtype=int).ravel().tolist(),
                "executed_micro_steps": s.executed_micro_steps,
                "eval_count": s.eval_count,
            } for s in self.steps],
            "total_evals": self.total_evals,
            "total_micro_steps": self.total_micro_steps,
        }
        return json.dumps(payload, sort_keys=True)


def enhance(net, controller, x_A: np.ndarray, config: RolloutConfig,
            rng: np.random.Generator | None = None,
            body_mask: np.ndarray | None = None,
            mode: str = "greedy",
            record_states: bool = False,
            init_rng: np.random.Generator | None = None
            ) -> tuple[np.ndarray, RolloutTrace]:
    """Run the progressive enhancement rollout.

    Starts from seeded standard-normal noise at t = 1. Each step applies a
    coarse update; with a controller, tile-gated micro-steps follow under
    the allocated budgets, and a stop decision ends the rollout after the
    coarse result. Without a controller this is the pure CMF baseline.
    ``init_rng``, when given, draws only the initial noise, decoupling it
    from the action-sampling stream (common random numbers for training).
    """
    config.validate()
    x_A = np.ascontiguousarray(x_A, dtype=np.float32)
    if rng is None:
        rng = np.random.default_rng(config.init_seed)
    flow = _CountingFlow(_as_flow(net))
    schedule = make_schedule(config.K)
    grid = TileGrid.for_image(x_A.shape, config.tile_size)
    if body_mask is None and controller is not None:
        body_mask = body_mask_from_image(x_A)

    x = (init_rng or rng).standard_normal(x_A.shape).astype(np.float32)
    trace = RolloutTrace(initial_state=x.copy() if record_states else None,
                         grid_shape=(grid.n_rows, grid.n_cols))

    for k in range(config.K):
        t_k, t_next = schedule.times[k], schedule.times[k + 1]
        evals_before = flow.evals
        u = flow(x, x_A, t_next, t_k)
        x_coarse = (x - np.float32(t_k - t_next) * u).astype(np.float32)

        if controller is None:
            x = x_coarse
            trace.steps.append(RolloutStep(
                k=k, t_k=t_k, t_next=t_next, stop=0, global_budget=0,
                tile_select=np.zeros((grid.n_rows, grid.n_cols)),
                tile_budget=np.zeros((grid.n_rows, grid.n_cols), dtype=np.int64),
                effective_budget=np.zeros((grid.n_rows, grid.n_cols), dtype=np.int64),
                executed_micro_steps=0, eval_count=flow.evals - evals_before,
                state_after=x.copy() if record_states else None))
            continue

        from .controller import extract_state_features  # deferred: avoids module cycle

        features = extract_state_features(x_A, x, x_coarse, u, body_mask, k, config.K)
        decision = controller.act(features, rng, mode)
        action = decision.action
        action.validate(grid, config.m_max)

        if action.stop:
            x = x_coarse
            trace.steps.append(RolloutStep(
                k=k, t_k=t_k, t_next=t_next, stop=1,
                global_budget=action.global_budget,
                tile_select=action.tile_select, tile_budget=action.tile_budget,
                effective_budget=np.zeros_like(action.tile_budget),
                executed_micro_steps=0, eval_count=flow.evals - evals_before,
                log_prob=decision.log_prob, value=decision.value,
                entropy=decision.entropy,
                features=features if record_states else None,
                state_after=x.copy() if record_states else None))
            break

        effective = allocate_budgets(action, decision.select_prob)
        exec_action = RefinementAction(
            tile_select=action.tile_select, tile_budget=effective,
            global_budget=action.global_budget, stop=0)
        masks = build_masks(exec_action, grid, config.m_max, config.feather)
        x = x_coarse
        executed = 0
        for mask in masks:
            if not np.any(mask > 0):
                continue
            x = micro_step(flow, x, x_A, t_k, t_next, mask, config.gamma_local)
            executed += 1
        trace.steps.append(RolloutStep(
            k=k, t_k=t_k, t_next=t_next, stop=0,
            global_budget=action.global_budget,
            tile_select=action.tile_select, tile_budget=action.tile_budget,
            effective_budget=effective,
            executed_micro_steps=executed, eval_count=flow.evals - evals_before,
            log_prob=decision.log_prob, value=decision.value,
            entropy=decision.entropy,
            features=features if record_states else None,
            state_after=x.copy() if record_states else None))

    return x, trace
