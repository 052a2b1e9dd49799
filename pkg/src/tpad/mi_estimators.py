"""CLUB (variational upper bound) and MINE (Donsker-Varadhan lower bound)
mutual-information estimators with their fitting steps."""

from __future__ import annotations

import math
import warnings

import numpy as np
import torch
from torch import Tensor, nn

from .errors import BatchError, EstimatorError, ShapeError
from .nn_core import DTYPE, Adam, Mlp, as_tensor

LOGVAR_CLAMP = 8.0
_LOG_2PI = math.log(2.0 * math.pi)


class ClubEstimator(nn.Module):
    """Diagonal Gaussian q(w | z) with mean and log-variance networks."""

    def __init__(self, d_z: int, d_w: int, d_hidden: int, gen: torch.Generator, lr: float = 1e-3):
        super().__init__()
        self.mu_net = Mlp([d_z, d_hidden, d_w], gen)
        self.logvar_net = Mlp([d_z, d_hidden, d_w], gen)
        self.opt = Adam(dict(self.named_parameters()), lr=lr)
        self.n_fit_steps = 0

    def mu_logvar(self, z: Tensor) -> tuple[Tensor, Tensor]:
        return self.mu_net(z), self.logvar_net(z).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)

    def log_likelihood(self, z: Tensor, w: Tensor) -> Tensor:
        """Per-sample log q(w_i | z_i)."""
        mu, logvar = self.mu_logvar(z)
        return (-0.5 * (w - mu) ** 2 / logvar.exp() - 0.5 * logvar - 0.5 * _LOG_2PI).sum(-1)


def club_fit_step(est: ClubEstimator, z, w) -> float:
    """One ascent step on the mean log-likelihood of detached samples."""
    z, w = as_tensor(z).detach(), as_tensor(w).detach()
    if z.shape[0] < 2:
        raise BatchError("CLUB fitting needs at least 2 samples")
    ll = est.log_likelihood(z, w).mean()
    value = float(ll.detach())
    if not math.isfinite(value):
        raise EstimatorError(f"non-finite CLUB likelihood {value}")
    est.opt.step(-ll)
    est.n_fit_steps += 1
    return value


def club_estimate(est: ClubEstimator, z, w) -> Tensor:
    """(1/N) sum_i [log q(w_i|z_i) - (1/N) sum_j log q(w_j|z_i)].

    The inner mean over j only needs the first two moments of w, so the cost
    is O(N d) rather than O(N^2 d).
    """
    z, w = as_tensor(z), as_tensor(w)
    if z.shape[0] < 2 or w.shape[0] != z.shape[0]:
        raise BatchError("CLUB estimate needs N >= 2 aligned samples")
    mu, logvar = est.mu_logvar(z)
    inv_var = torch.exp(-logvar)
    positive = (-0.5 * (w - mu) ** 2 * inv_var).sum(-1)
    m1, m2 = w.mean(0), (w**2).mean(0)
    negative = (-0.5 * (m2 - 2.0 * mu * m1 + mu**2) * inv_var).sum(-1)
    return (positive - negative).mean()


class MineEstimator(nn.Module):
    """Score network f(a, b) on concatenated inputs, plus a log-space EMA of the
    marginal partition term used for bias-corrected fitting gradients."""

    def __init__(
        self, d_a: int, d_b: int, d_hidden: int, gen: torch.Generator,
        lr: float = 1e-3, ema_decay: float = 0.99,
    ):
        super().__init__()
        self.f_net = Mlp([d_a + d_b, d_hidden, d_hidden, 1], gen)
        self.opt = Adam(dict(self.named_parameters()), lr=lr)
        self.ema_decay = ema_decay
        self.log_ema: float | None = None
        self.n_fit_steps = 0

    def score(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[0] != b.shape[0]:
            raise ShapeError("score inputs must be aligned")
        return self.f_net(torch.cat([a, b], dim=-1)).squeeze(-1)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random cyclic permutation (Sattolo); no index maps to itself."""
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def _log_mean_exp(x: Tensor) -> Tensor:
    return torch.logsumexp(x, dim=0) - math.log(x.shape[0])


def mine_estimate(est: MineEstimator, a, b, b_marginal) -> Tensor:
    """mean f(a, b) - log mean exp f(a, b_marginal)."""
    a, b, b_marginal = as_tensor(a), as_tensor(b), as_tensor(b_marginal)
    if a.shape[0] < 1 or b_marginal.shape[0] != a.shape[0]:
        raise BatchError("MINE needs nonempty aligned joint and marginal batches")
    if a.shape[0] > 1 and torch.equal(b.min(0).values, b.max(0).values):
        warnings.warn("all rows of b are equal; the shuffled marginal equals the joint", RuntimeWarning)
    return est.score(a, b).mean() - _log_mean_exp(est.score(a, b_marginal))


def mine_fit_step(est: MineEstimator, a, b, b_marginal) -> float:
    """One ascent step on the bound, with the partition-term gradient divided by
    its moving average instead of the current batch value."""
    a, b, b_marginal = (as_tensor(t).detach() for t in (a, b, b_marginal))
    joint = est.score(a, b).mean()
    lme = _log_mean_exp(est.score(a, b_marginal))
    value = float((joint - lme).detach())
    if not math.isfinite(value):
        raise EstimatorError(f"non-finite MINE bound {value}")
    cur = float(lme.detach())
    if est.log_ema is None:
        est.log_ema = cur
    else:
        d = est.ema_decay
        est.log_ema = float(np.logaddexp(math.log(d) + est.log_ema, math.log1p(-d) + cur))
    surrogate = joint - torch.exp(lme - est.log_ema)
    est.opt.step(-surrogate)
    est.n_fit_steps += 1
    return value


def fit_club(est: ClubEstimator, z, w, steps: int, batch_size: int, rng: np.random.Generator) -> list[float]:
    z, w = as_tensor(z).detach(), as_tensor(w).detach()
    n = z.shape[0]
    trace = []
    for _ in range(steps):
        idx = torch.from_numpy(rng.choice(n, size=min(batch_size, n), replace=False))
        trace.append(club_fit_step(est, z[idx], w[idx]))
    return trace


def fit_mine(est: MineEstimator, a, b, steps: int, batch_size: int, rng: np.random.Generator) -> list[float]:
    a, b = as_tensor(a).detach(), as_tensor(b).detach()
    n = a.shape[0]
    trace = []
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        perm = derangement(len(idx), rng)
        ia, ib = torch.from_numpy(idx), torch.from_numpy(idx[perm])
        trace.append(mine_fit_step(est, a[ia], b[ia], b[ib]))
    return trace


def gaussian_mi(rho: float, dim: int = 1) -> float:
    """Analytic MI (nats) of ``dim`` independent bivariate Gaussian pairs."""
    return -0.5 * dim * math.log(1.0 - rho**2)


def correlated_gaussians(n: int, rho: float, rng: np.random.Generator, dim: int = 1) -> tuple[Tensor, Tensor]:
    x = rng.normal(size=(n, dim))
    y = rho * x + math.sqrt(1.0 - rho**2) * rng.normal(size=(n, dim))
    return torch.from_numpy(x), torch.from_numpy(y)
