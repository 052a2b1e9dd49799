"""Shared fitting protocol for the Gaussian MI checks: fit on one sample, read
the bound on an independent sample of the same size."""

import numpy as np

from tpad.mi_estimators import (
    ClubEstimator, MineEstimator, club_estimate, correlated_gaussians, derangement, fit_club, fit_mine, mine_estimate,
)
from tpad.nn_core import derive_seed, make_generator

N = 4096
CLUB_STEPS, MINE_STEPS, BATCH = 300, 700, 512


def fitted_readings(rho: float, seed: int, n: int = N, mine_steps: int = MINE_STEPS) -> tuple[float, float]:
    rng = np.random.default_rng(derive_seed(seed, "gauss", rho))
    x, y = correlated_gaussians(n, rho, rng)
    xh, yh = correlated_gaussians(n, rho, rng)
    club = ClubEstimator(1, 1, 32, make_generator(derive_seed(seed, "club")), lr=5e-3)
    fit_club(club, x, y, CLUB_STEPS, BATCH, rng)
    mine = MineEstimator(1, 1, 64, make_generator(derive_seed(seed, "mine")), lr=2e-3)
    fit_mine(mine, x, y, mine_steps, BATCH, rng)
    perm = derangement(n, rng)
    return float(club_estimate(club, xh, yh).detach()), float(mine_estimate(mine, xh, yh, yh[perm]).detach())
