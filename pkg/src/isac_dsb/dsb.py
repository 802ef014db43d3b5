"""Diffusion Schrodinger bridge between normalized point clouds (i = 0) and channel latents (i = N).

Networks act on tensors of shape ``(B, *event)``; for the sensing pipeline the
event is ``(M, 5)``.  Both bridge networks are residual maps
``F(i, X) = X + s * h(ctx(i), X)`` with a concatsquash MLP ``h``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .nnet import ConcatSquashMLP, MlpSpec, flush_denormals, make_adam, timestep_context


class NonFiniteState(FloatingPointError):
    def __init__(self, step: int, direction: str):
        super().__init__(f"non-finite state at step {step} of the {direction} rollout")
        self.step = step
        self.direction = direction


class BridgeDiverged(RuntimeError):
    """Training blew up; ``last_good`` holds the most recent healthy network states."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class GammaSchedule:
    """Step sizes ``gamma_0..gamma_N``; the transition between X_i and X_{i+1} uses ``gamma_{i+1}``."""

    gammas: tuple[float, ...]

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float)
        if g.ndim != 1 or len(g) < 2:
            raise ValueError("schedule needs at least gamma_0 and gamma_1")
        if np.any(g < 0) or not np.all(np.isfinite(g)):
            raise ValueError("step sizes must be finite and non-negative")

    @classmethod
    def linear_updown(cls, N: int, g_min: float = 0.001, g_max: float = 0.05) -> "GammaSchedule":
        """Linear ``g_min -> g_max`` over the first half, ``g_max -> g_min`` over the second."""
        if N < 2 or g_min <= 0 or g_max < g_min:
            raise ValueError("need N >= 2 and 0 < g_min <= g_max")
        half = N // 2
        up = np.linspace(g_min, g_max, half + 1)
        down = np.linspace(g_max, g_min, N - half + 1)[1:]
        return cls(tuple(float(v) for v in np.concatenate([up, down])))

    @classmethod
    def constant(cls, N: int, value: float) -> "GammaSchedule":
        """``value = 0`` gives the noiseless test mode."""
        return cls((float(value),) * (N + 1))

    @property
    def N(self) -> int:
        return len(self.gammas) - 1

    def __getitem__(self, i: int) -> float:
        return self.gammas[i]

    def total_variance(self) -> float:
        return 2.0 * math.fsum(self.gammas[1:])


# --------------------------------------------------------------------------- networks


class BridgeNet(nn.Module):
    """``X + scale * h(ctx(i / N), flatten(X))`` reshaped back to the event shape."""

    def __init__(self, event_shape, n_steps: int, hidden=(512, 512), ctx_dim: int = 32, scale: float = 1.0, activation="softplus"):
        super().__init__()
        self.event_shape = tuple(event_shape)
        self.n_steps = int(n_steps)
        self.ctx_dim = ctx_dim
        self.scale = float(scale)
        dim = int(np.prod(self.event_shape))
        self.net = ConcatSquashMLP(MlpSpec((dim, *hidden, dim), ctx_dim, activation))

    def displacement(self, i, X: torch.Tensor) -> torch.Tensor:
        """The raw network output ``h``, same shape as ``X``."""
        lead = X.shape[: X.ndim - len(self.event_shape)]
        if tuple(X.shape[len(lead) :]) != self.event_shape:
            raise ValueError(f"state shape {tuple(X.shape)} does not end in {self.event_shape}")
        i = torch.as_tensor(i, dtype=X.dtype)
        ctx = timestep_context(i, self.n_steps, self.ctx_dim)
        if ctx.ndim == 1:
            ctx = ctx.expand(*lead, self.ctx_dim)
        out = self.net(X.reshape(*lead, -1), ctx)
        return out.reshape(X.shape)

    def forward(self, i, X: torch.Tensor) -> torch.Tensor:
        return X + self.scale * self.displacement(i, X)


def backward_from_forward(F: BridgeNet) -> BridgeNet:
    """Backward net initialized as the reverse of a flow-matching forward net: ``X - h / N``."""
    B = copy.deepcopy(F)
    B.scale = -abs(F.scale)
    return B


# --------------------------------------------------------------------------- samplers

Sampler = "callable(n, torch.Generator) -> Tensor"


def tensor_sampler(data: torch.Tensor):
    """Uniform draws with replacement from the rows of ``data``."""
    data = torch.as_tensor(data)

    def draw(n: int, gen: torch.Generator) -> torch.Tensor:
        idx = torch.randint(len(data), (n,), generator=gen)
        return data[idx]

    return draw


def paired_sampler(X0: torch.Tensor, XN: torch.Tensor):
    """Row-aligned pairs (the same target's cloud and latent)."""
    X0, XN = torch.as_tensor(X0), torch.as_tensor(XN)
    if len(X0) != len(XN):
        raise ValueError("paired endpoints differ in length")

    def draw(n: int, gen: torch.Generator):
        idx = torch.randint(len(X0), (n,), generator=gen)
        return X0[idx], XN[idx]

    return draw


def independent_sampler(data_sampler, prior_sampler):
    def draw(n: int, gen: torch.Generator):
        return data_sampler(n, gen), prior_sampler(n, gen)

    return draw


def _gen(seed) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2**63))
    return g


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)


# --------------------------------------------------------------------------- flow matching


@dataclass
class FmResult:
    model: BridgeNet
    losses: list = field(default_factory=list)


def fm_loss(model: BridgeNet, X0: torch.Tensor, XN: torch.Tensor, i: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``|M(i, X_i) - (X_N - X_0)|_F^2`` on the straight-line interpolant."""
    N = model.n_steps
    t = (i.to(X0.dtype) / N).reshape(-1, *([1] * (X0.ndim - 1)))
    Xi = (1 - t) * X0 + t * XN
    err = model.displacement(i, Xi) - (XN - X0)
    return err.pow(2).flatten(1).sum(1).mean()


@flush_denormals()
def fm_pretrain(
    model: BridgeNet,
    pair_sampler,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 128,
    seed: int = 0,
    rounds: int = 1,
    callback=None,
) -> FmResult:
    """Flow-matching initialization of the forward network.

    ``model.scale`` is set to ``1/N`` so the returned network is the forward map
    ``F(i, X) = X + M(i, X) / N`` whose noiseless rollout follows the learned flow.
    """
    N = model.n_steps
    model.scale = 1.0 / N
    res = FmResult(model)
    for r in range(rounds):
        opt = make_adam(model.parameters(), lr=lr)
        gen = _gen(_seed(seed, 11, r))
        ref = None
        for step in range(steps):
            X0, XN = pair_sampler(batch_size, gen)
            i = torch.randint(N, (len(X0),), generator=gen)
            opt.zero_grad()
            loss = fm_loss(model, X0, XN, i)
            loss.backward()
            opt.step()
            val = loss.item()
            res.losses.append(val)
            ref = val if ref is None else ref
            window = res.losses[-50:]
            if not math.isfinite(val) or (len(window) == 50 and np.mean(window) > 10 * ref):
                raise BridgeDiverged(f"flow matching diverged at round {r} step {step} (loss {val:.3g})")
            if callback is not None:
                callback(r, step, val)
    return res


# --------------------------------------------------------------------------- rollouts


@dataclass
class BridgeState:
    traj: torch.Tensor  # (N+1, B, *event); traj[i] = X_i
    direction: str

    @property
    def X0(self) -> torch.Tensor:
        return self.traj[0]

    @property
    def XN(self) -> torch.Tensor:
        return self.traj[-1]


def _step_noise(shape, gen, dtype):
    return torch.randn(shape, generator=gen, dtype=dtype)


@torch.no_grad()
def forward_rollout(F, schedule: GammaSchedule, X0, seed: int = 0, final_noise: bool = True, noise: bool = True) -> BridgeState:
    """``X_{i+1} = F(i, X_i) + sqrt(2 gamma_{i+1}) eps`` for i = 0..N-1."""
    X = torch.as_tensor(X0)
    gen = _gen(seed)
    out = [X]
    N = schedule.N
    for i in range(N):
        nxt = F(i, X)
        if noise and (final_noise or i < N - 1):
            nxt = nxt + math.sqrt(2.0 * schedule[i + 1]) * _step_noise(X.shape, gen, X.dtype)
        if not torch.all(torch.isfinite(nxt)):
            raise NonFiniteState(i + 1, "forward")
        out.append(nxt)
        X = nxt
    return BridgeState(torch.stack(out), "forward")


@torch.no_grad()
def backward_rollout(B, schedule: GammaSchedule, XN, seed: int = 0, last_step_noiseless: bool = True, noise: bool = True) -> BridgeState:
    """``X_{i-1} = B(i, X_i) + sqrt(2 gamma_i) eps`` for i = N..1."""
    X = torch.as_tensor(XN)
    gen = _gen(seed)
    N = schedule.N
    out = [None] * (N + 1)
    out[N] = X
    for i in range(N, 0, -1):
        prev = B(i, X)
        if noise and not (last_step_noiseless and i == 1):
            prev = prev + math.sqrt(2.0 * schedule[i]) * _step_noise(X.shape, gen, X.dtype)
        if not torch.all(torch.isfinite(prev)):
            raise NonFiniteState(i - 1, "backward")
        out[i - 1] = prev
        X = prev
    return BridgeState(torch.stack(out), "backward")


# --------------------------------------------------------------------------- IPF half-epochs


def _pair_batch(traj: torch.Tensor, gen: torch.Generator, pairs_per_traj: int | None):
    """Transitions (i, X_i, X_{i+1}) from a trajectory batch; i uniform in 0..N-1."""
    N = traj.shape[0] - 1
    Bsz = traj.shape[1]
    if pairs_per_traj is None:
        i = torch.arange(N).repeat_interleave(Bsz)
        b = torch.arange(Bsz).repeat(N)
    else:
        i = torch.randint(N, (Bsz * pairs_per_traj,), generator=gen)
        b = torch.arange(Bsz).repeat(pairs_per_traj)
    return i, traj[i, b], traj[i + 1, b]


def backward_loss(B, i, Xi, Xi1) -> torch.Tensor:
    """Mean of ``|B(i+1, X_{i+1}) - X_i|_F^2``."""
    return (B(i + 1, Xi1) - Xi).pow(2).flatten(1).sum(1).mean()


def forward_loss(F, i, Xi, Xi1) -> torch.Tensor:
    """Mean of ``|F(i, X_i) - X_{i+1}|_F^2``."""
    return (F(i, Xi) - Xi1).pow(2).flatten(1).sum(1).mean()


def train_backward_epoch(
    F, B, schedule, data_sampler, steps: int, opt, batch_size: int = 64, seed: int = 0, pairs_per_traj: int | None = None
) -> list[float]:
    """Regress ``B(i+1, X_{i+1})`` onto ``X_i`` along forward rollouts started at data samples."""
    gen = _gen(_seed(seed, 21))
    losses = []
    for step in range(steps):
        X0 = data_sampler(batch_size, gen)
        traj = forward_rollout(F, schedule, X0, seed=_seed(seed, 22, step)).traj
        i, Xi, Xi1 = _pair_batch(traj, gen, pairs_per_traj)
        opt.zero_grad()
        loss = backward_loss(B, i, Xi, Xi1)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if not math.isfinite(losses[-1]):
            raise BridgeDiverged(f"backward loss non-finite at step {step}")
    return losses


def train_forward_epoch(
    B, F, schedule, prior_sampler, steps: int, opt, batch_size: int = 64, seed: int = 0,
    pairs_per_traj: int | None = None, final_noise: bool = True,
) -> list[float]:
    """Regress ``F(i, X_i)`` onto ``X_{i+1}`` along backward rollouts started at prior samples."""
    gen = _gen(_seed(seed, 31))
    losses = []
    for step in range(steps):
        XN = prior_sampler(batch_size, gen)
        traj = backward_rollout(B, schedule, XN, seed=_seed(seed, 32, step), last_step_noiseless=not final_noise).traj
        i, Xi, Xi1 = _pair_batch(traj, gen, pairs_per_traj)
        opt.zero_grad()
        loss = forward_loss(F, i, Xi, Xi1)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if not math.isfinite(losses[-1]):
            raise BridgeDiverged(f"forward loss non-finite at step {step}")
    return losses


@dataclass
class DsbHistory:
    rows: list = field(default_factory=list)  # (epoch, direction, mean_loss, val_metric)

    def to_csv(self) -> str:
        lines = ["epoch,direction,mean_loss,val_metric"]
        for ep, d, loss, val in self.rows:
            v = "" if val is None else repr(float(val))
            lines.append(f"{ep},{d},{float(loss)!r},{v}")
        return "\n".join(lines) + "\n"


@dataclass
class BridgeNetworks:
    F: BridgeNet
    B: BridgeNet
    schedule: GammaSchedule

    def state(self) -> dict:
        return {"F": copy.deepcopy(self.F.state_dict()), "B": copy.deepcopy(self.B.state_dict())}

    def load_state(self, st: dict):
        self.F.load_state_dict(st["F"])
        self.B.load_state_dict(st["B"])


@flush_denormals()
def dsb_train(
    nets: BridgeNetworks,
    data_sampler,
    prior_sampler,
    epochs: int,
    steps_per_half: int,
    lr: float = 1e-4,
    batch_size: int = 64,
    seed: int = 0,
    pairs_per_traj: int | None = None,
    final_noise: bool = True,
    validate=None,
    checkpoint=None,
    start: tuple[int, str] = (0, "backward"),
    history: DsbHistory | None = None,
) -> DsbHistory:
    """Alternating IPF: each epoch trains B on forward rollouts, then F on backward rollouts.

    ``validate(direction, nets)`` returns a metric logged with each half-epoch;
    ``checkpoint(epoch, direction, nets)`` is called after each healthy half-epoch.
    Every half-epoch starts a fresh Adam state and draws its randomness from
    ``(seed, epoch, direction)``, so training resumed at ``start`` from a saved
    half-epoch reproduces an uninterrupted run.  Rows are appended to ``history``
    (a fresh one by default) before ``checkpoint`` runs.
    """
    hist = DsbHistory() if history is None else history
    last_good = nets.state()
    halves = [(n, d) for n in range(epochs) for d in ("backward", "forward")]
    if start not in halves:
        raise ValueError(f"resume point {start} outside {epochs} epochs")
    for n, direction in halves[halves.index(start) :]:
        try:
            if direction == "backward":
                opt = make_adam(nets.B.parameters(), lr=lr)
                losses = train_backward_epoch(
                    nets.F, nets.B, nets.schedule, data_sampler, steps_per_half, opt, batch_size, _seed(seed, n, 1), pairs_per_traj
                )
            else:
                opt = make_adam(nets.F.parameters(), lr=lr)
                losses = train_forward_epoch(
                    nets.B, nets.F, nets.schedule, prior_sampler, steps_per_half, opt, batch_size, _seed(seed, n, 2),
                    pairs_per_traj, final_noise,
                )
        except (BridgeDiverged, NonFiniteState) as exc:
            raise BridgeDiverged(f"epoch {n} {direction}: {exc}", last_good) from exc
        val = validate(direction, nets) if validate is not None else None
        hist.rows.append((n, direction, float(np.mean(losses)), val))
        last_good = nets.state()
        if checkpoint is not None:
            checkpoint(n, direction, nets)
    return hist


# --------------------------------------------------------------------------- scenario pipelines


@dataclass
class LatentStandardizer:
    """Elementwise affine map making the training latents zero-mean, unit-variance."""

    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def fit(cls, Z: torch.Tensor, floor: float = 1e-6) -> "LatentStandardizer":
        Z = torch.as_tensor(Z)
        return cls(Z.mean(0), Z.std(0).clamp_min(floor))

    def forward(self, Z):
        return (torch.as_tensor(Z) - self.mean) / self.std

    def inverse(self, Zs):
        return torch.as_tensor(Zs) * self.std + self.mean


def add_cloud_noise(cloud_n: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise on a normalized cloud at ``snr_db`` relative to its mean square."""
    cloud_n = np.asarray(cloud_n, dtype=float)
    power = float(np.mean(cloud_n**2))
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    return cloud_n + sigma * rng.standard_normal(cloud_n.shape)


def sense(H_est, position, nets: BridgeNetworks, model, standardizer: LatentStandardizer, norm, seed: int = 0,
          perturb_start: bool = False, final_noise: bool = False):
    """Scenario 1: channel estimate -> latent -> backward bridge -> (normalized cloud, physical cloud)."""
    from .pointcloud import denormalize

    H = torch.as_tensor(np.asarray(H_est))[None]
    pos = np.asarray(position, dtype=float)[None]
    with torch.no_grad():
        Z = standardizer.forward(model.encode(H, pos))
    if perturb_start:
        Z = Z + math.sqrt(2.0 * nets.schedule[nets.schedule.N]) * torch.randn(Z.shape, generator=_gen(_seed(seed, 41)), dtype=Z.dtype)
    X0 = backward_rollout(nets.B, nets.schedule, Z, seed=seed, last_step_noiseless=not final_noise).X0[0]
    cloud_n = X0.numpy().astype(float)
    return cloud_n, denormalize(cloud_n, norm.at(position))


def reconstruct(cloud_n, position, nets: BridgeNetworks, model, standardizer: LatentStandardizer, seed: int = 0,
                final_noise: bool = False) -> np.ndarray:
    """Scenario 2: normalized cloud -> forward bridge -> latent -> decoded ``K x N_r x N_t`` channel."""
    X0 = torch.as_tensor(np.asarray(cloud_n), dtype=torch.get_default_dtype())[None]
    ZN = forward_rollout(nets.F, nets.schedule, X0, seed=seed, final_noise=final_noise).XN
    with torch.no_grad():
        H = model.decode(standardizer.inverse(ZN), np.asarray(position, dtype=float)[None])
    return H[0].numpy()
