"""Reinforcement learning for the refinement controller: quality-improvement
rewards, GAE advantages, and PPO clipped-surrogate updates against a frozen
enhancement backbone."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import sobel

from .controller import (
    Controller,
    ControllerConfig,
    action_entropy,
    action_log_prob,
    policy_forward,
)
from .errors import ContractError, NumericalError, SpecificationError
from .metrics import PSNR_CAP_DB, psnr, ssim
from .rollout import RefinementAction, RolloutConfig, enhance


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.01        # cost per executed micro-step (network evaluation)
    psnr_scale: float = 40.0   # dB divisor normalizing PSNR into ~[0, 1]
    ssim_weight: float = 1.0   # beta
    focus_weight: float = 0.1  # kappa
    data_range: float = 2.0    # images live in [-1, 1]

    def validate(self) -> None:
        for name in ("alpha", "psnr_scale", "ssim_weight", "focus_weight", "data_range"):
            if getattr(self, name) < 0:
                raise SpecificationError(f"{name} must be >= 0")
        if self.psnr_scale == 0 or self.data_range == 0:
            raise SpecificationError("psnr_scale and data_range must be > 0")


def focus_gradient(x: np.ndarray, body_mask: np.ndarray) -> float:
    """Tenengrad focus measure: mean squared gradient magnitude over the mask."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(body_mask).astype(bool)
    if not mask.any():
        raise SpecificationError("body mask selects no pixels")
    gy = sobel(x, axis=0)
    gx = sobel(x, axis=1)
    return float(np.mean((gx**2 + gy**2)[mask]))


def quality_score(x: np.ndarray, x_B: np.ndarray, body_mask: np.ndarray,
                  config: RewardConfig) -> float:
    """Q = PSNR/psnr_scale + beta * SSIM - kappa * |FG(x) - FG(x_B)|.

    PSNR is capped at 60 dB so exact matches stay finite.
    """
    config.validate()
    p = min(psnr(x, x_B, max_value=config.data_range).db, PSNR_CAP_DB)
    q = p / config.psnr_scale
    if config.ssim_weight:
        q += config.ssim_weight * ssim(x, x_B, config.data_range)
    if config.focus_weight:
        q -= config.focus_weight * abs(focus_gradient(x, body_mask)
                                       - focus_gradient(x_B, body_mask))
    return float(q)


def step_reward(x_k: np.ndarray, x_next: np.ndarray, x_B: np.ndarray,
                executed_micro_steps: int, body_mask: np.ndarray,
                config: RewardConfig) -> float:
    """r_k = Q(x_{k+1}) - Q(x_k) - alpha * executed micro-steps."""
    delta = quality_score(x_next, x_B, body_mask, config) \
        - quality_score(x_k, x_B, body_mask, config)
    return float(delta - config.alpha * executed_micro_steps)


@dataclass
class Trajectory:
    """Per-step records from one enhancement episode."""

    features: list[np.ndarray] = field(default_factory=list)
    actions: list[RefinementAction] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    terminals: list[bool] = field(default_factory=list)
    micro_steps: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)

    def validate(self) -> None:
        n = len(self.rewards)
        for name in ("features", "actions", "log_probs", "values", "terminals"):
            if len(getattr(self, name)) != n:
                raise SpecificationError(f"trajectory field {name} length mismatch")
        if not all(np.isfinite(r) for r in self.rewards):
            raise NumericalError("non-finite rewards in trajectory")


@dataclass(frozen=True)
class PPOConfig:
    clip_epsilon: float = 0.2
    gae_lambda: float = 0.95
    discount_gamma: float = 0.99
    epochs_per_batch: int = 4
    minibatch_size: int = 64
    learning_rate: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    n_episodes: int = 300
    seed: int = 0
    episodes_per_update: int = 8
    single_thread: bool = True

    def validate(self) -> None:
        if self.clip_epsilon <= 0:
            raise SpecificationError(f"clip_epsilon must be > 0, got {self.clip_epsilon}")
        for name in ("gae_lambda", "discount_gamma"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SpecificationError(f"{name} must be in [0, 1]")
        if self.epochs_per_batch < 1 or self.minibatch_size < 1 or self.n_episodes < 1:
            raise SpecificationError("epochs, minibatch size, and episodes must be >= 1")
        if self.episodes_per_update < 1:
            raise SpecificationError("episodes_per_update must be >= 1")


def compute_advantages(trajectory: Trajectory, config: PPOConfig
                       ) -> tuple[np.ndarray, np.ndarray]:
    """GAE over one episode: A_k = delta_k + gamma * lambda * A_{k+1}.

    delta_k = r_k + gamma * V_{k+1} * (1 - terminal_k) - V_k. Returns raw
    (unnormalized) advantages and returns = A + V; batch normalization is a
    separate step applied across an update batch.
    """
    if len(trajectory) == 0:
        raise SpecificationError("empty trajectory")
    trajectory.validate()
    rewards = np.asarray(trajectory.rewards, dtype=np.float64)
    values = np.asarray(trajectory.values, dtype=np.float64)
    terminals = np.asarray(trajectory.terminals, dtype=np.float64)
    n = len(rewards)
    advantages = np.zeros(n)
    next_adv = 0.0
    for k in range(n - 1, -1, -1):
        next_value = values[k + 1] if k + 1 < n else 0.0
        delta = rewards[k] + config.discount_gamma * next_value * (1.0 - terminals[k]) \
            - values[k]
        next_adv = delta + config.discount_gamma * config.gae_lambda * next_adv
        advantages[k] = next_adv
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance batch normalization; skipped for size-1 or
    zero-variance batches."""
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.size <= 1:
        return advantages
    std = advantages.std()
    if std == 0.0:
        return advantages  # constant batch: centering would erase the signal
    return (advantages - advantages.mean()) / std


def clipped_surrogate(ratio: torch.Tensor, advantage: torch.Tensor,
                      clip_epsilon: float) -> torch.Tensor:
    """-mean(min(ratio * A, clip(ratio, 1-eps, 1+eps) * A))."""
    unclipped = ratio * advantage
    clipped = torch.clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage
    return -torch.minimum(unclipped, clipped).mean()


@dataclass
class PPOLosses:
    policy: float
    value: float
    entropy: float
    total: float


def ppo_update(controller: Controller, batch: list[Trajectory], config: PPOConfig,
               optimizer: torch.optim.Optimizer,
               rng: np.random.Generator) -> PPOLosses:
    """One PPO pass: epochs x minibatches, a gradient step per minibatch."""
    config.validate()
    if not batch:
        raise SpecificationError("empty trajectory batch")
    features, actions, old_log_probs, advantages, returns = [], [], [], [], []
    for traj in batch:
        adv, ret = compute_advantages(traj, config)
        features.extend(traj.features)
        actions.extend(traj.actions)
        old_log_probs.extend(traj.log_probs)
        advantages.extend(adv.tolist())
        returns.extend(ret.tolist())
    advantages = normalize_advantages(np.asarray(advantages))
    returns = np.asarray(returns)
    old_log_probs = np.asarray(old_log_probs)
    n = len(actions)

    agg = {"policy": 0.0, "value": 0.0, "entropy": 0.0, "total": 0.0}
    n_steps = 0
    for _ in range(config.epochs_per_batch):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            ratios, values_new, entropies = [], [], []
            for i in idx:
                dist, value = policy_forward(controller, features[i])
                logp_new = action_log_prob(dist, actions[i])
                ratios.append(torch.exp(logp_new - float(old_log_probs[i])))
                values_new.append(value)
                entropies.append(action_entropy(dist, actions[i]))
            ratio = torch.stack(ratios)
            value_pred = torch.stack(values_new)
            entropy = torch.stack(entropies).mean()
            adv = torch.from_numpy(advantages[idx]).to(torch.float32)
            ret = torch.from_numpy(returns[idx]).to(torch.float32)
            policy_loss = clipped_surrogate(ratio, adv, config.clip_epsilon)
            value_loss = ((value_pred - ret) ** 2).mean()
            total = policy_loss + config.value_coef * value_loss \
                - config.entropy_coef * entropy
            if not torch.isfinite(total):
                raise NumericalError(
                    f"non-finite PPO loss: policy={policy_loss.item()}, "
                    f"value={value_loss.item()}, entropy={entropy.item()}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            agg["policy"] += float(policy_loss.item())
            agg["value"] += float(value_loss.item())
            agg["entropy"] += float(entropy.item())
            agg["total"] += float(total.item())
            n_steps += 1
    return PPOLosses(policy=agg["policy"] / n_steps, value=agg["value"] / n_steps,
                     entropy=agg["entropy"] / n_steps, total=agg["total"] / n_steps)


def backbone_checksum(net: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(net.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def collect_trajectory(net, controller, pair, rollout_config: RolloutConfig,
                       reward_config: RewardConfig, rng: np.random.Generator,
                       mode: str = "sample",
                       init_rng: np.random.Generator | None = None
                       ) -> tuple[Trajectory, float]:
    """Run one stochastic episode and score it against the known target."""
    _, trace = enhance(net, controller, pair.x_A, rollout_config, rng=rng,
                       body_mask=pair.body_mask, mode=mode, record_states=True,
                       init_rng=init_rng)
    traj = Trajectory()
    prev_state = trace.initial_state
    prev_q = quality_score(prev_state, pair.x_B, pair.body_mask, reward_config)
    total = 0.0
    for i, step in enumerate(trace.steps):
        q = quality_score(step.state_after, pair.x_B, pair.body_mask, reward_config)
        reward = (q - prev_q) - reward_config.alpha * step.executed_micro_steps
        traj.features.append(step.features)
        traj.actions.append(RefinementAction(
            tile_select=step.tile_select, tile_budget=step.tile_budget,
            global_budget=step.global_budget, stop=step.stop))
        traj.log_probs.append(step.log_prob)
        traj.values.append(step.value)
        traj.rewards.append(reward)
        traj.terminals.append(i == len(trace.steps) - 1)
        traj.micro_steps.append(step.executed_micro_steps)
        prev_q = q
        total += reward
    return traj, total


@dataclass
class EpisodeRecord:
    episode: int
    total_reward: float
    length: int
    micro_steps: int


@dataclass
class UpdateRecord:
    episode: int              # 1-based index of the last episode in the batch
    mean_reward: float        # mean total episode reward across the batch
    mean_episode_length: float
    mean_micro_steps: float
    losses: PPOLosses


@dataclass
class ControllerTrainResult:
    controller: Controller
    episodes: list[EpisodeRecord]
    updates: list[UpdateRecord]


def train_controller(net, pairs, rollout_config: RolloutConfig,
                     ppo_config: PPOConfig, reward_config: RewardConfig,
                     controller_config: ControllerConfig | None = None
                     ) -> ControllerTrainResult:
    """PPO training against the frozen backbone.

    The backbone's parameter checksum is asserted unchanged; a change is a
    hard ContractError.
    """
    ppo_config.validate()
    reward_config.validate()
    rollout_config.validate()
    if not pairs:
        raise SpecificationError("training split is empty")
    if ppo_config.single_thread:
        torch.set_num_threads(1)
    if controller_config is None:
        controller_config = ControllerConfig(m_max=rollout_config.m_max,
                                             seed=ppo_config.seed)
    if controller_config.m_max != rollout_config.m_max:
        raise SpecificationError(
            f"controller m_max {controller_config.m_max} != rollout m_max "
            f"{rollout_config.m_max}")

    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    checksum_before = backbone_checksum(net)

    controller = Controller(controller_config, tile_size=rollout_config.tile_size)
    optimizer = torch.optim.Adam(controller.parameters(), lr=ppo_config.learning_rate)
    rng = np.random.default_rng(ppo_config.seed)

    episodes: list[EpisodeRecord] = []
    updates: list[UpdateRecord] = []
    batch: list[Trajectory] = []
    batch_records: list[EpisodeRecord] = []
    for episode in range(1, ppo_config.n_episodes + 1):
        pair_index = int(rng.integers(0, len(pairs)))
        pair = pairs[pair_index]
        # common random numbers: the init noise is fixed per pair so the
        # value head absorbs per-state quality and advantages expose the
        # refinement effect; exploration stays on the main stream
        init_rng = np.random.default_rng([ppo_config.seed, pair_index])
        traj, total = collect_trajectory(net, controller, pair, rollout_config,
                                         reward_config, rng, mode="sample",
                                         init_rng=init_rng)
        record = EpisodeRecord(episode=episode, total_reward=total,
                               length=len(traj), micro_steps=sum(traj.micro_steps))
        episodes.append(record)
        batch.append(traj)
        batch_records.append(record)
        if len(batch) >= ppo_config.episodes_per_update or episode == ppo_config.n_episodes:
            losses = ppo_update(controller, batch, ppo_config, optimizer, rng)
            updates.append(UpdateRecord(
                episode=episode,
                mean_reward=float(np.mean([r.total_reward for r in batch_records])),
                mean_episode_length=float(np.mean([r.length for r in batch_records])),
                mean_micro_steps=float(np.mean([r.micro_steps for r in batch_records])),
                losses=losses))
            batch, batch_records = [], []

    if backbone_checksum(net) != checksum_before:
        raise ContractError("frozen backbone parameters changed during controller training")
    controller.net.eval()
    return ControllerTrainResult(controller=controller, episodes=episodes,
                                 updates=updates)


def evaluate_policy(net, policy, pairs, rollout_config: RolloutConfig,
                    reward_config: RewardConfig, n_rollouts: int, seed: int = 0,
                    mode: str = "greedy") -> float:
    """Mean total episode reward of a policy over seeded evaluation rollouts.

    The initial noise of rollout i depends only on (seed, i), so different
    policies evaluated with the same seed see identical start states
    (paired comparison).
    """
    if n_rollouts < 1:
        raise SpecificationError("n_rollouts must be >= 1")
    rng = np.random.default_rng(seed)
    totals = []
    for i in range(n_rollouts):
        pair = pairs[i % len(pairs)]
        _, total = collect_trajectory(net, policy, pair, rollout_config,
                                      reward_config, rng, mode=mode,
                                      init_rng=np.random.default_rng([seed, i]))
        totals.append(total)
    return float(np.mean(totals))
