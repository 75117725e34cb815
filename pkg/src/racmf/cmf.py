"""MeanFlow training objective: intermediate states, JVP consistency target,
one-step reconstruction, and the combined backbone loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .arrayio import read_arrays, write_arrays
from .backbone import BackboneConfig, FlowUNet, TimePair
from .errors import DimensionError, FormatError, NumericalError, SpecificationError

CHECKPOINT_VERSION = 1


def _as_batch_scalar(value, like: torch.Tensor) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(dtype=like.dtype, device=like.device)
    return torch.full((like.shape[0],), float(value), dtype=like.dtype, device=like.device)


def make_intermediate(x_B: torch.Tensor, e: torch.Tensor, t) -> torch.Tensor:
    """x_t = (1 - t) * x_B + t * e, elementwise."""
    if x_B.shape != e.shape:
        raise DimensionError(f"x_B {tuple(x_B.shape)} != e {tuple(e.shape)}")
    tt = _as_batch_scalar(t, x_B)
    if torch.any(tt < 0) or torch.any(tt > 1):
        raise SpecificationError(f"t must lie in [0, 1], got {tt.tolist()}")
    tt = tt.reshape(-1, *([1] * (x_B.ndim - 1)))
    return (1.0 - tt) * x_B + tt * e


@dataclass(frozen=True)
class TrainingSample:
    """One supervised MeanFlow example; x_t and v are derived fields."""

    x_A: torch.Tensor
    x_B: torch.Tensor
    e: torch.Tensor
    r: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor
    v: torch.Tensor

    @classmethod
    def make(cls, x_A, x_B, e, r, t) -> "TrainingSample":
        if not (x_A.shape == x_B.shape == e.shape):
            raise DimensionError(
                f"shapes differ: {tuple(x_A.shape)}, {tuple(x_B.shape)}, {tuple(e.shape)}")
        r = _as_batch_scalar(r, x_B)
        t = _as_batch_scalar(t, x_B)
        if torch.any(r < 0) or torch.any(r > t) or torch.any(t > 1):
            raise SpecificationError("need 0 <= r <= t <= 1 per batch element")
        return cls(x_A=x_A, x_B=x_B, e=e, r=r, t=t,
                   x_t=make_intermediate(x_B, e, t), v=e - x_B)


def meanflow_target(net, x_t: torch.Tensor, x_A: torch.Tensor,
                    r, t, v: torch.Tensor,
                    return_primal: bool = False):
    """u* = v - (t - r) * du/dt with du/dt taken along the trajectory tangent.

    The derivative is the JVP of (x, tau) -> u_theta(x, x_A, r, tau) at
    (x_t, t) with tangent (v, 1); r is held fixed. The returned target is
    detached so no gradient flows through it. With ``return_primal`` the
    differentiable primal u_theta(x_t, x_A, r, t) is returned as well,
    saving a forward pass in the loss.
    """
    r = _as_batch_scalar(r, x_t)
    t = _as_batch_scalar(t, x_t)

    def fn(x, tau):
        return net(x, x_A, r, tau)

    u, du_dt = torch.func.jvp(fn, (x_t, t), (v, torch.ones_like(t)))
    if not torch.isfinite(du_dt).all():
        raise NumericalError("non-finite JVP in MeanFlow target "
                             f"(|du/dt| max={du_dt.abs().max().item()})")
    width = (t - r).reshape(-1, *([1] * (x_t.ndim - 1)))
    u_star = (v - width * du_dt).detach()
    return (u_star, u) if return_primal else u_star


def meanflow_loss(u_pred: torch.Tensor, u_star: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over pixels and batch."""
    if u_pred.shape != u_star.shape:
        raise DimensionError(f"u_pred {tuple(u_pred.shape)} != u* {tuple(u_star.shape)}")
    return (u_pred - u_star).abs().mean()


def reconstruct_one_step(net, x_t: torch.Tensor, x_A: torch.Tensor, t) -> torch.Tensor:
    """x_hat0 = x_t - t * u_theta(x_t, x_A, 0, t)."""
    t = _as_batch_scalar(t, x_t)
    if torch.any(t < 0) or torch.any(t > 1):
        raise SpecificationError(f"t must lie in [0, 1], got {t.tolist()}")
    u = net(x_t, x_A, torch.zeros_like(t), t)
    return x_t - t.reshape(-1, *([1] * (x_t.ndim - 1))) * u


def image_loss(x_hat: torch.Tensor, x_B: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error."""
    if x_hat.shape != x_B.shape:
        raise DimensionError(f"x_hat {tuple(x_hat.shape)} != x_B {tuple(x_B.shape)}")
    return (x_hat - x_B).abs().mean()


def base_loss(sample: TrainingSample, net, config: BackboneConfig):
    """L_base = L_mf + lambda1 * L_img; returns (total, L_mf, L_img)."""
    u_star, u_pred = meanflow_target(net, sample.x_t, sample.x_A, sample.r,
                                     sample.t, sample.v, return_primal=True)
    l_mf = meanflow_loss(u_pred, u_star)
    x_hat = reconstruct_one_step(net, sample.x_t, sample.x_A, sample.t)
    l_img = image_loss(x_hat, sample.x_B)
    return l_mf + config.lambda1 * l_img, l_mf, l_img


def sample_time_pair(rng: np.random.Generator, config: BackboneConfig) -> TimePair:
    """t ~ U(0,1); r = t with probability r_equals_t_prob, else r ~ U(0, t)."""
    t = float(rng.uniform())
    if rng.uniform() < config.r_equals_t_prob:
        r = t
    else:
        r = float(rng.uniform(0.0, t))
    return TimePair(r, t)


@dataclass(frozen=True)
class StepLoss:
    step: int
    total: float
    mf: float
    img: float


def _pairs_to_tensors(pairs) -> tuple[torch.Tensor, torch.Tensor]:
    xs_a = torch.stack([torch.from_numpy(np.ascontiguousarray(p.x_A, dtype=np.float32))
                        for p in pairs])[:, None]
    xs_b = torch.stack([torch.from_numpy(np.ascontiguousarray(p.x_B, dtype=np.float32))
                        for p in pairs])[:, None]
    return xs_a, xs_b


def train_backbone(pairs, config: BackboneConfig):
    """Optimize the backbone on (source, target) pairs.

    Deterministic under the config seed in single-thread mode. Returns
    (net, history); aborts with NumericalError if a loss goes non-finite.
    """
    config.validate()
    if not pairs:
        raise SpecificationError("training split is empty")
    if config.single_thread:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    net = FlowUNet(config)
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed + 1)
    xs_a, xs_b = _pairs_to_tensors(pairs)

    history: list[StepLoss] = []
    for step in range(config.steps):
        idx = torch.from_numpy(rng.integers(0, len(pairs), size=config.batch_size))
        x_a, x_b = xs_a[idx], xs_b[idx]
        e = torch.randn(x_b.shape, generator=noise_gen)
        time_pairs = [sample_time_pair(rng, config) for _ in range(config.batch_size)]
        r = torch.tensor([tp.r for tp in time_pairs], dtype=torch.float32)
        t = torch.tensor([tp.t for tp in time_pairs], dtype=torch.float32)
        sample = TrainingSample.make(x_a, x_b, e, r, t)
        total, l_mf, l_img = base_loss(sample, net, config)
        if not torch.isfinite(total):
            raise NumericalError(
                f"non-finite loss at step {step}: "
                f"L_mf={l_mf.item()}, L_img={l_img.item()}")
        opt.zero_grad()
        total.backward()
        opt.step()
        history.append(StepLoss(step, float(total.item()), float(l_mf.item()),
                                float(l_img.item())))
    net.eval()
    return net, history


def evaluate_image_loss(net, pairs, seed: int = 0,
                        times: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)) -> float:
    """Deterministic held-out L_img: fixed noise per pair, fixed time grid."""
    if not pairs:
        raise SpecificationError("evaluation split is empty")
    xs_a, xs_b = _pairs_to_tensors(pairs)
    gen = torch.Generator().manual_seed(seed)
    e = torch.randn(xs_b.shape, generator=gen)
    losses = []
    with torch.no_grad():
        for t in times:
            x_t = make_intermediate(xs_b, e, t)
            x_hat = reconstruct_one_step(net, x_t, xs_a, t)
            losses.append(float(image_loss(x_hat, xs_b).item()))
    return float(np.mean(losses))


def save_backbone_checkpoint(net: FlowUNet, path, steps: int) -> None:
    """Atomic single-file checkpoint: JSON metadata + named parameter arrays."""
    meta = {
        "kind": "backbone",
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "seed": net.config.seed,
        "steps": steps,
    }
    arrays = {name: tensor.detach().cpu().numpy().astype(np.float32)
              for name, tensor in net.state_dict().items()}
    write_arrays(path, arrays, meta)


def load_backbone_checkpoint(path) -> tuple[FlowUNet, dict]:
    arrays, meta = read_arrays(path)
    if meta.get("kind") != "backbone":
        raise FormatError(f"not a backbone checkpoint: kind={meta.get('kind')!r}")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    config = BackboneConfig(**meta["config"])
    net = FlowUNet(config)
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    net.load_state_dict(state)
    net.eval()
    return net, meta
