"""Channel <-> latent-cloud autoencoder conditioned on the (known) target position."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .nnet import flush_denormals, make_adam, sinusoidal_embed


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AutoencoderSpec:
    K: int
    n_r: int
    n_t: int
    M: int
    d_pos: int = 48
    channels: int = 64
    down_blocks: int = 3
    # channel amplitude falls roughly as 1/R^2; inputs are multiplied by (R / ref_range)^2 * gain
    ref_range: float = 15.0
    gain: float = 1.0
    skip: bool = True
    # with the array geometry the free-space propagation d_r d_t exp(j k (d_r + d_t)) is divided out as well
    tx_pos: list | None = None
    rx_pos: list | None = None
    wavenumbers: list | None = None

    def __post_init__(self):
        if self.d_pos % 3 or (self.d_pos // 3) % 2:
            raise ValueError("d_pos must be divisible by 3 with an even share per coordinate")
        if min(self.K, self.n_r, self.n_t, self.M) <= 0:
            raise ValueError("dimensions must be positive")
        geo = (self.tx_pos, self.rx_pos, self.wavenumbers)
        if any(g is not None for g in geo):
            if any(g is None for g in geo):
                raise ValueError("tx_pos, rx_pos and wavenumbers go together")
            if np.shape(self.tx_pos) != (self.n_t, 3) or np.shape(self.rx_pos) != (self.n_r, 3) or len(self.wavenumbers) != self.K:
                raise ValueError("array geometry does not match n_t, n_r, K")

    @property
    def geometric(self) -> bool:
        return self.wavenumbers is not None

    def to_dict(self) -> dict:
        return asdict(self)


def positional_embedding(position, d_pos: int, n_r: int, n_t: int) -> torch.Tensor:
    """``(..., d_pos, n_r, n_t)`` tensor: each coordinate embedded in ``d_pos/3`` channels, constant over the plane."""
    if d_pos % 3:
        raise ValueError("d_pos must be divisible by 3")
    pos = torch.as_tensor(np.asarray(position), dtype=torch.get_default_dtype())
    emb = sinusoidal_embed(pos, d_pos, vector=True)
    return emb[..., None, None].expand(*emb.shape, n_r, n_t)


def complex_to_planes(H) -> torch.Tensor:
    """Complex ``(..., K, N_r, N_t)`` -> real ``(..., 2K, N_r, N_t)``: real parts then imaginary parts."""
    H = torch.as_tensor(H)
    return torch.cat([H.real, H.imag], dim=-3).to(torch.get_default_dtype())


def planes_to_complex(X: torch.Tensor) -> torch.Tensor:
    K = X.shape[-3] // 2
    return torch.complex(X[..., :K, :, :], X[..., K:, :, :])


def _conv_out(n: int) -> int:
    return (n - 1) // 2 + 1  # kernel 3, stride 2, padding 1


class ChannelAutoencoder(nn.Module):
    def __init__(self, spec: AutoencoderSpec):
        super().__init__()
        self.spec = spec
        C, K, D = spec.channels, spec.K, spec.d_pos
        act = nn.Softplus

        self.transfer = nn.Sequential(
            nn.Conv2d(2 * K + D, C, 3, padding=1), act(), nn.Conv2d(C, C, 3, padding=1), act()
        )
        sizes = [(spec.n_r, spec.n_t)]
        down = []
        for _ in range(spec.down_blocks):
            down += [nn.Conv2d(C, C, 3, stride=2, padding=1), act()]
            sizes.append(tuple(_conv_out(s) for s in sizes[-1]))
        self.down = nn.Sequential(*down)
        self.sizes = sizes
        flat_feat = C * sizes[-1][0] * sizes[-1][1]
        flat_in = 2 * K * spec.n_r * spec.n_t
        # one latent slot carries the log-RMS of the compensated channel, the rest its direction
        q = 5 * spec.M - 1
        self.enc_dense = nn.Linear(flat_feat + (flat_in if spec.skip else 0), q)

        self.dec_dense = nn.Sequential(nn.Linear(q, flat_feat), act())
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(C, C, 3, stride=2, padding=1) for _ in range(spec.down_blocks)
        )
        self.up_act = act()
        self.reverse = nn.Sequential(
            nn.Conv2d(C + D, C, 3, padding=1), act(), nn.Conv2d(C, 2 * K, 3, padding=1)
        )
        self.dec_skip = nn.Linear(q, flat_in) if spec.skip else None

    # position-dependent propagation compensation, part of the channel transferring step
    def compensation(self, position) -> torch.Tensor:
        """Complex factor ``(..., K, N_r, N_t)`` (real ``(..., 1, 1, 1)`` without geometry) applied to H."""
        s = self.spec
        pos = torch.as_tensor(np.asarray(position), dtype=torch.float64)
        if not s.geometric:
            r = torch.linalg.norm(pos, dim=-1)
            return (s.gain * (r / s.ref_range) ** 2)[..., None, None, None]
        d_r = torch.linalg.norm(torch.as_tensor(s.rx_pos, dtype=torch.float64) - pos[..., None, :], dim=-1)
        d_t = torch.linalg.norm(torch.as_tensor(s.tx_pos, dtype=torch.float64) - pos[..., None, :], dim=-1)
        amp = s.gain * d_r[..., :, None] * d_t[..., None, :] / s.ref_range**2
        path = d_r[..., :, None] + d_t[..., None, :]
        k = torch.as_tensor(s.wavenumbers, dtype=torch.float64)[:, None, None]
        return amp[..., None, :, :] * torch.exp(-1j * k * path[..., None, :, :])

    def _to_planes(self, H, position) -> torch.Tensor:
        H = torch.as_tensor(H)
        c = self.compensation(position)
        return complex_to_planes(H.to(torch.complex128) * c)

    def _from_planes(self, X, position) -> torch.Tensor:
        H = planes_to_complex(X.to(torch.float64)) / self.compensation(position)
        return H.to(torch.complex128 if X.dtype == torch.float64 else torch.complex64)

    def encode(self, H, position) -> torch.Tensor:
        """Complex ``(B, K, N_r, N_t)`` channel + ``(B, 3)`` position -> ``(B, M, 5)`` latent."""
        s = self.spec
        H = torch.as_tensor(H)
        if tuple(H.shape[-3:]) != (s.K, s.n_r, s.n_t):
            raise ValueError(f"channel shape {tuple(H.shape[-3:])} does not match autoencoder spec")
        U, log_rms = self._direction(H, position)
        pos = torch.as_tensor(np.asarray(position), dtype=U.dtype)
        pe = positional_embedding(pos, s.d_pos, s.n_r, s.n_t)
        feat = self.down(self.transfer(torch.cat([U, pe], dim=-3)))
        flat = feat.flatten(-3)
        if s.skip:
            flat = torch.cat([flat, U.flatten(-3)], dim=-1)
        z = torch.cat([log_rms[..., None], self.enc_dense(flat)], dim=-1)
        return z.reshape(*U.shape[:-3], s.M, 5)

    def _direction(self, H, position):
        """Compensated planes split into a unit-RMS direction and its log-RMS."""
        X = self._to_planes(H, position)
        rms = X.pow(2).flatten(-3).mean(-1).sqrt().clamp_min(1e-150)
        U = X / rms[..., None, None, None]
        dt = torch.get_default_dtype()
        return U.to(dt), rms.log().to(dt)

    def decode(self, Z, position) -> torch.Tensor:
        """``(B, M, 5)`` latent + position -> complex ``(B, K, N_r, N_t)`` channel."""
        s = self.spec
        Z = torch.as_tensor(Z, dtype=torch.get_default_dtype())
        if Z.shape[-2:] != (s.M, 5):
            raise ValueError(f"latent shape {tuple(Z.shape[-2:])} is not ({s.M}, 5)")
        pos = torch.as_tensor(np.asarray(position), dtype=Z.dtype)
        log_rms, z = Z.flatten(-2)[..., 0], Z.flatten(-2)[..., 1:]
        h = self.dec_dense(z).reshape(*z.shape[:-1], s.channels, *self.sizes[-1])
        for n, layer in enumerate(self.up):
            target = self.sizes[-2 - n]
            h = self.up_act(layer(h, output_size=target))
        pe = positional_embedding(pos, s.d_pos, s.n_r, s.n_t)
        X = self.reverse(torch.cat([h, pe], dim=-3))
        if self.dec_skip is not None:
            X = X + self.dec_skip(z).reshape(X.shape)
        return self._from_planes(X * log_rms.exp()[..., None, None, None], position)

    def forward(self, H, position):
        return self.decode(self.encode(H, position), position)


@torch.no_grad()
def init_from_pca(model: ChannelAutoencoder, H, position) -> float:
    """Start the linear skip paths at the PCA of the compensated training channels.

    The encoder's skip block becomes the projection of the unit-RMS direction on
    its top ``5M - 1`` principal axes and the decoder's skip maps back onto their
    span; the convolutional branches are zeroed at their outputs so the initial
    model is exactly the optimal linear autoencoder of the directions.  Returns the
    fraction of direction energy (about the mean) left out.
    """
    s = model.spec
    if not s.skip:
        raise ValueError("PCA initialization needs the skip paths")
    X = model._direction(torch.as_tensor(H), position)[0].flatten(-3).to(torch.float64)
    mu = X.mean(0)
    _, sv, Vh = torch.linalg.svd(X - mu, full_matrices=False)
    q = 5 * s.M - 1
    V = torch.zeros(q, X.shape[1], dtype=torch.float64)
    V[: min(q, len(Vh))] = Vh[:q]
    n_feat = model.enc_dense.in_features - X.shape[1]
    dt = model.enc_dense.weight.dtype
    model.enc_dense.weight.zero_()
    model.enc_dense.weight[:, n_feat:] = V.to(dt)
    model.enc_dense.bias.copy_((-V @ mu).to(dt))
    model.dec_skip.weight.copy_(V.T.to(dt))
    model.dec_skip.bias.copy_(mu.to(dt))
    last = model.reverse[-1]
    last.weight.zero_()
    last.bias.zero_()
    energy = sv.pow(2)
    return float(energy[q:].sum() / energy.sum()) if energy.sum() > 0 else 0.0


def nmse_loss(H: torch.Tensor, H_hat: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the linear-scale ratio ``|H - H_hat|^2 / |H|^2``."""
    err = (H - H_hat).abs().pow(2).flatten(1).sum(1)
    ref = H.abs().pow(2).flatten(1).sum(1)
    return (err / ref).mean()


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (epoch, train_nmse_db, val_nmse_db)

    @property
    def val_db(self) -> list[float]:
        return [r[2] for r in self.rows]


def _db(x: float) -> float:
    return 10.0 * math.log10(max(x, 1e-30))


def evaluate_nmse(model: ChannelAutoencoder, H, pos, batch: int = 256) -> float:
    """Mean linear NMSE of the round trip over a dataset."""
    model.eval()
    total = 0.0
    with torch.no_grad():
        for a in range(0, len(H), batch):
            Hb = torch.as_tensor(H[a : a + batch])
            total += nmse_loss(Hb, model(Hb, pos[a : a + batch])).item() * len(Hb)
    return total / len(H)


@flush_denormals()
def train_autoencoder(
    model: ChannelAutoencoder,
    H_train,
    pos_train,
    H_val=None,
    pos_val=None,
    epochs: int = 200,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    noise_snr_db: float | None = None,
    lr_decay: float = 1.0,
    time_budget_s: float | None = None,
    callback=None,
) -> TrainHistory:
    """Minimize mean NMSE with Adam; deterministic given ``seed``.

    With ``noise_snr_db`` the inputs (not the targets) receive complex Gaussian
    noise at that per-sample SNR.  Aborts with :class:`TrainingDiverged` when the
    validation NMSE exceeds 10x its initial value, the reference being floored at
    1 (the zero predictor) so a near-exact initialization does not trip it.
    """
    import time

    if len(H_train) == 0:
        raise ValueError("empty training set")
    dtype = torch.get_default_dtype()
    cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    H_train = torch.as_tensor(np.asarray(H_train)).to(cdtype)
    pos_train = np.asarray(pos_train, dtype=float)
    if H_val is None:
        H_val, pos_val = H_train, pos_train
    H_val = torch.as_tensor(np.asarray(H_val)).to(cdtype)
    pos_val = np.asarray(pos_val, dtype=float)

    opt = make_adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=lr_decay)
    hist = TrainHistory()
    initial = evaluate_nmse(model, H_val, pos_val)
    limit = 10 * max(initial, 1.0)
    n = len(H_train)
    t0 = time.monotonic()
    for epoch in range(1, epochs + 1):
        model.train()
        rng = np.random.default_rng([seed, epoch])
        perm = rng.permutation(n)
        tot = 0.0
        for a in range(0, n, batch_size):
            idx = perm[a : a + batch_size]
            Hb = H_train[idx]
            Hin = Hb
            if noise_snr_db is not None:
                p = Hb.abs().pow(2).flatten(1).mean(1)
                sig = torch.sqrt(p / 10 ** (noise_snr_db / 10) / 2)[:, None, None, None]
                g = torch.as_tensor(rng.standard_normal((2,) + tuple(Hb.shape)), dtype=dtype)
                Hin = Hb + torch.complex(g[0], g[1]) * sig
            opt.zero_grad()
            loss = nmse_loss(Hb, model(Hin, pos_train[idx]))
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
        sched.step()
        val = evaluate_nmse(model, H_val, pos_val)
        if not math.isfinite(val) or val > limit:
            raise TrainingDiverged(f"validation NMSE {val:.3g} exceeded {limit:.3g} at epoch {epoch}")
        hist.rows.append((epoch, _db(tot / n), _db(val)))
        if callback is not None:
            callback(epoch, hist.rows[-1])
        if time_budget_s is not None and time.monotonic() - t0 > time_budget_s:
            break
    return hist
