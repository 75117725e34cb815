"""Tile-refinement policy: state features, actor-critic heads, and action
sampling with exact log-probabilities for policy-gradient training."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .arrayio import read_arrays, write_arrays
from .errors import DimensionError, FormatError, NumericalError, SpecificationError
from .rollout import RefinementAction, TileGrid

PROB_CLAMP = 1e-6

FEATURE_CHANNELS = ("source", "state", "difference", "update_direction",
                    "body_mask", "step_fraction", "residual")


def extract_state_features(x_A: np.ndarray, x_k: np.ndarray, x_coarse: np.ndarray,
                           u: np.ndarray, body_mask: np.ndarray,
                           k: int, K: int) -> np.ndarray:
    """7-channel controller input stack, shape (7, H, W) float32."""
    arrays = {"x_k": x_k, "x_coarse": x_coarse, "u": u, "body_mask": body_mask}
    for name, arr in arrays.items():
        if np.asarray(arr).shape != x_A.shape:
            raise DimensionError(f"{name} shape {np.asarray(arr).shape} != {x_A.shape}")
    if not 0 <= k < K:
        raise SpecificationError(f"need 0 <= k < K, got k={k}, K={K}")
    stack = np.stack([
        x_A,
        x_k,
        x_k - x_A,
        u,
        np.asarray(body_mask, dtype=np.float32),
        np.full_like(x_A, k / K),
        np.abs(x_coarse - x_k),
    ]).astype(np.float32)
    if not np.all(np.isfinite(stack)):
        raise NumericalError("non-finite state features")
    return stack


@dataclass(frozen=True)
class ControllerConfig:
    feature_width: int = 32
    B_max: int = 16
    m_max: int = 3
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.B_max < 0:
            raise SpecificationError(f"B_max must be >= 0, got {self.B_max}")
        if self.m_max < 1:
            raise SpecificationError(f"m_max must be >= 1, got {self.m_max}")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise SpecificationError("coefficients must be >= 0")
        if self.feature_width < 4:
            raise SpecificationError(f"feature_width must be >= 4, got {self.feature_width}")


@dataclass
class ActionDistribution:
    """Factorized policy output; probabilities clamped to (1e-6, 1 - 1e-6)."""

    tile_select_prob: torch.Tensor    # (R, C)
    tile_budget_logits: torch.Tensor  # (R, C, m_max + 1)
    global_budget_logits: torch.Tensor  # (B_max + 1,)
    stop_prob: torch.Tensor           # scalar

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.tile_select_prob.shape)


class ControllerNet(nn.Module):
    """Conv trunk pooled to the tile grid feeding spatial, global, and value heads."""

    def __init__(self, config: ControllerConfig):
        super().__init__()
        config.validate()
        self.config = config
        w = config.feature_width
        self.trunk = nn.Sequential(
            nn.Conv2d(len(FEATURE_CHANNELS), w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.spatial_head = nn.Conv2d(w, 1 + (config.m_max + 1), 1)
        self.global_head = nn.Sequential(
            nn.Linear(w, w), nn.SiLU(),
            nn.Linear(w, (config.B_max + 1) + 1),
        )
        self.value_head = nn.Sequential(
            nn.Linear(w, w), nn.SiLU(),
            nn.Linear(w, 1),
        )

    def forward(self, features: torch.Tensor, grid_shape: tuple[int, int]):
        h = self.trunk(features)
        h = F.adaptive_avg_pool2d(h, grid_shape)
        spatial = self.spatial_head(h)            # (B, 1 + m_max + 1, R, C)
        pooled = h.mean(dim=(2, 3))               # (B, w)
        global_out = self.global_head(pooled)     # (B, B_max + 2)
        value = self.value_head(pooled)[:, 0]     # (B,)
        return spatial, global_out, value


def policy_forward(controller: "Controller", features: np.ndarray | torch.Tensor
                   ) -> tuple[ActionDistribution, torch.Tensor]:
    """Single-state forward pass returning the action distribution and value."""
    if isinstance(features, np.ndarray):
        features = torch.from_numpy(np.ascontiguousarray(features, dtype=np.float32))
    if features.ndim != 3 or features.shape[0] != len(FEATURE_CHANNELS):
        raise DimensionError(
            f"features must be ({len(FEATURE_CHANNELS)}, H, W), got {tuple(features.shape)}")
    grid = TileGrid.for_image(tuple(features.shape[1:]), controller.tile_size)
    spatial, global_out, value = controller.net(features[None],
                                                (grid.n_rows, grid.n_cols))
    m_max = controller.net.config.m_max
    select_prob = torch.sigmoid(spatial[0, 0]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    budget_logits = spatial[0, 1:1 + m_max + 1].permute(1, 2, 0)
    global_logits = global_out[0, :-1]
    stop_prob = torch.sigmoid(global_out[0, -1]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    dist = ActionDistribution(select_prob, budget_logits, global_logits, stop_prob)
    for tensor in (dist.tile_budget_logits, dist.global_budget_logits):
        if not torch.isfinite(tensor).all():
            raise NumericalError("non-finite policy logits")
    return dist, value[0]


def _categorical_sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(np.searchsorted(cdf, rng.uniform() * cdf[-1], side="right")
               .clip(0, probs.size - 1))


def sample_action(dist: ActionDistribution, rng: np.random.Generator,
                  mode: str = "sample") -> tuple[RefinementAction, float, float]:
    """Draw (or greedily decode) an action; returns (action, log_prob, entropy)."""
    if mode not in ("sample", "greedy"):
        raise SpecificationError(f"mode must be 'sample' or 'greedy', got {mode!r}")
    p_sel = dist.tile_select_prob.detach().numpy()
    budget_probs = torch.softmax(dist.tile_budget_logits.detach(), dim=-1).numpy()
    global_probs = torch.softmax(dist.global_budget_logits.detach(), dim=-1).numpy()
    p_stop = float(dist.stop_prob.detach())

    rows, cols = p_sel.shape
    if mode == "sample":
        gates = (rng.random((rows, cols)) < p_sel).astype(np.float64)
        budgets = np.zeros((rows, cols), dtype=np.int64)
        for row in range(rows):
            for col in range(cols):
                if gates[row, col]:
                    budgets[row, col] = _categorical_sample(budget_probs[row, col], rng)
        global_budget = _categorical_sample(global_probs, rng)
        stop = int(rng.uniform() < p_stop)
    else:
        gates = (p_sel > 0.5).astype(np.float64)
        budgets = np.where(gates > 0, budget_probs.argmax(axis=-1), 0).astype(np.int64)
        global_budget = int(global_probs.argmax())
        stop = int(p_stop > 0.5)

    action = RefinementAction(tile_select=gates, tile_budget=budgets,
                              global_budget=global_budget, stop=stop)
    with torch.no_grad():
        log_prob = float(action_log_prob(dist, action))
        entropy = float(action_entropy(dist, action))
    return action, log_prob, entropy


def action_log_prob(dist: ActionDistribution, action: RefinementAction) -> torch.Tensor:
    """Differentiable log-probability of a realized action.

    Budget terms are skipped for unselected tiles (their budgets are forced
    to zero rather than sampled).
    """
    if tuple(action.tile_select.shape) != dist.grid_shape:
        raise DimensionError(
            f"action grid {action.tile_select.shape} != dist grid {dist.grid_shape}")
    n_global = dist.global_budget_logits.shape[0]
    if not 0 <= action.global_budget < n_global:
        raise DimensionError(
            f"global budget {action.global_budget} outside 0..{n_global - 1}")
    gates = torch.from_numpy(np.ascontiguousarray(action.tile_select, dtype=np.float32))
    budgets = torch.from_numpy(np.ascontiguousarray(action.tile_budget, dtype=np.int64))
    p = dist.tile_select_prob
    logp = (gates * torch.log(p) + (1.0 - gates) * torch.log1p(-p)).sum()
    budget_logp = torch.log_softmax(dist.tile_budget_logits, dim=-1)
    chosen = budget_logp.gather(-1, budgets[..., None])[..., 0]
    logp = logp + (chosen * gates).sum()
    logp = logp + torch.log_softmax(dist.global_budget_logits, dim=-1)[action.global_budget]
    sp = dist.stop_prob
    logp = logp + (action.stop * torch.log(sp) + (1 - action.stop) * torch.log1p(-sp))
    return logp


def action_entropy(dist: ActionDistribution, action: RefinementAction) -> torch.Tensor:
    """Entropy of the factorized policy under the same masking convention."""
    p = dist.tile_select_prob
    ent = -(p * torch.log(p) + (1 - p) * torch.log1p(-p)).sum()
    budget_logp = torch.log_softmax(dist.tile_budget_logits, dim=-1)
    budget_ent = -(budget_logp.exp() * budget_logp).sum(dim=-1)
    gates = torch.from_numpy(np.ascontiguousarray(action.tile_select, dtype=np.float32))
    ent = ent + (budget_ent * gates).sum()
    global_logp = torch.log_softmax(dist.global_budget_logits, dim=-1)
    ent = ent - (global_logp.exp() * global_logp).sum()
    sp = dist.stop_prob
    ent = ent - (sp * torch.log(sp) + (1 - sp) * torch.log1p(-sp))
    return ent


@dataclass
class Decision:
    """One controller output inside a rollout."""

    action: RefinementAction
    log_prob: float
    value: float
    entropy: float
    select_prob: np.ndarray  # used for budget-ranking tie-breaks


class Controller:
    """Learned policy: wraps the network with the rollout-facing act() API."""

    def __init__(self, config: ControllerConfig, tile_size: int):
        self.config = config
        self.tile_size = tile_size
        torch.manual_seed(config.seed)
        self.net = ControllerNet(config)

    def act(self, features: np.ndarray, rng: np.random.Generator,
            mode: str = "greedy") -> Decision:
        with torch.no_grad():
            dist, value = policy_forward(self, features)
        action, log_prob, entropy = sample_action(dist, rng, mode)
        return Decision(action=action, log_prob=log_prob, value=float(value),
                        entropy=entropy,
                        select_prob=dist.tile_select_prob.detach().numpy().copy())

    def parameters(self):
        return self.net.parameters()


class FixedGridPolicy:
    """Shared plumbing for the non-learned baseline policies."""

    def __init__(self, tile_size: int, m_max: int):
        self.tile_size = tile_size
        self.m_max = m_max

    def _grid(self, features: np.ndarray) -> TileGrid:
        return TileGrid.for_image(tuple(features.shape[1:]), self.tile_size)


class ZeroBudget(FixedGridPolicy):
    """All-zero budgets, never stops: the degenerate-equivalence baseline."""

    def act(self, features, rng, mode="greedy") -> Decision:
        grid = self._grid(features)
        dims = (grid.n_rows, grid.n_cols)
        action = RefinementAction(tile_select=np.zeros(dims),
                                  tile_budget=np.zeros(dims, dtype=np.int64),
                                  global_budget=0, stop=0)
        return Decision(action, 0.0, 0.0, 0.0, np.zeros(dims))


class UniformBudget(FixedGridPolicy):
    """Every tile selected with budget `per_tile`; never stops."""

    def __init__(self, tile_size: int, m_max: int, per_tile: int = 1):
        super().__init__(tile_size, m_max)
        if not 0 <= per_tile <= m_max:
            raise SpecificationError(f"per_tile must be in [0, {m_max}]")
        self.per_tile = per_tile

    def act(self, features, rng, mode="greedy") -> Decision:
        grid = self._grid(features)
        dims = (grid.n_rows, grid.n_cols)
        action = RefinementAction(
            tile_select=np.ones(dims),
            tile_budget=np.full(dims, self.per_tile, dtype=np.int64),
            global_budget=int(self.per_tile * grid.n_rows * grid.n_cols),
            stop=0)
        return Decision(action, 0.0, 0.0, 0.0, np.ones(dims))


class RandomPolicy(FixedGridPolicy):
    """Uniformly random gates/budgets; stop probability 0.05."""

    def __init__(self, tile_size: int, m_max: int, B_max: int = 16):
        super().__init__(tile_size, m_max)
        self.B_max = B_max

    def act(self, features, rng, mode="sample") -> Decision:
        grid = self._grid(features)
        dims = (grid.n_rows, grid.n_cols)
        gates = (rng.random(dims) < 0.5).astype(np.float64)
        budgets = np.where(gates > 0,
                           rng.integers(0, self.m_max + 1, size=dims), 0).astype(np.int64)
        action = RefinementAction(
            tile_select=gates, tile_budget=budgets,
            global_budget=int(rng.integers(0, self.B_max + 1)),
            stop=int(rng.random() < 0.05))
        return Decision(action, 0.0, 0.0, 0.0, rng.random(dims))


CONTROLLER_CHECKPOINT_VERSION = 1


def save_controller_checkpoint(controller: Controller, path, episodes: int) -> None:
    meta = {
        "kind": "controller",
        "format_version": CONTROLLER_CHECKPOINT_VERSION,
        "config": asdict(controller.config),
        "tile_size": controller.tile_size,
        "seed": controller.config.seed,
        "episodes": episodes,
    }
    arrays = {name: tensor.detach().cpu().numpy().astype(np.float32)
              for name, tensor in controller.net.state_dict().items()}
    write_arrays(path, arrays, meta)


def load_controller_checkpoint(path) -> tuple[Controller, dict]:
    arrays, meta = read_arrays(path)
    if meta.get("kind") != "controller":
        raise FormatError(f"not a controller checkpoint: kind={meta.get('kind')!r}")
    if meta.get("format_version") != CONTROLLER_CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    controller = Controller(ControllerConfig(**meta["config"]), tile_size=meta["tile_size"])
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    controller.net.load_state_dict(state)
    controller.net.eval()
    return controller, meta
