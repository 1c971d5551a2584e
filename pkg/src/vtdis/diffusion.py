"""Forward/reverse trajectory simulation and exact joint log-densities.

The forward chain adds independent Gaussian increments,
``x_n = x_{n-1} + sqrt(t_n^2 - t_{n-1}^2) xi``, so the conditional target
kernel is ``N(x_n; x_{n-1}, (t_n^2 - t_{n-1}^2) I)``.  The reverse sampler
draws ``x_{n-1}`` around the Bayes posterior mean

    mean = (t_{n-1}^2 / t_n^2) x_n + (1 - t_{n-1}^2 / t_n^2) x0_hat

with a per-step proposal covariance (tuned or baseline) whose natural
scale is the posterior variance t_{n-1}^2 (t_n^2 - t_{n-1}^2) / t_n^2.
The terminal prior is N(0, T^2 I) regardless of the forward marginal; the
mismatch is part of what the trajectory importance weight corrects.

Log weights follow the target-over-proposal convention

    log w = log pi(x_0) + sum_n log q(x_n | x_{n-1})
            - log p(x_N) - sum_n log p(x_{n-1} | x_n).

Particle systems run entirely on the zero-center-of-mass subspace: pass a
``ComProjection`` and all kernels become projected Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import equivariant as eq
from . import gaussians as ga
from .schedule import TimeGrid


# ---------------------------------------------------------------------------
# elementary kernels
# ---------------------------------------------------------------------------

def _iso_logpdf(delta: np.ndarray, var: float, proj=None) -> np.ndarray:
    d = delta.shape[1] if proj is None else proj.subspace_dim
    q = np.sum(delta * delta, axis=1)
    return -0.5 * d * (ga.LOG_2PI + np.log(var)) - 0.5 * q / var


def forward_kernel_log_density(x_next, x_prev, n: int, grid: TimeGrid,
                               proj=None):
    """log q(x_n | x_{n-1}) = log N(x_n; x_{n-1}, (t_n^2 - t_{n-1}^2) I)."""
    xn = np.atleast_2d(np.asarray(x_next, dtype=float))
    xp = np.atleast_2d(np.asarray(x_prev, dtype=float))
    out = _iso_logpdf(xn - xp, grid.forward_var(n), proj)
    return float(out[0]) if np.asarray(x_next).ndim == 1 else out


def ddpm_posterior(x_n, x0_hat, n: int, grid: TimeGrid):
    """Posterior mean and base variance of x_{n-1} given (x_n, x0_hat)."""
    if n < 1:
        raise ValueError("posterior undefined at n = 0")
    r = grid.mean_ratio(n)
    mean = r * np.asarray(x_n, dtype=float) \
        + (1.0 - r) * np.asarray(x0_hat, dtype=float)
    return mean, grid.ddpm_var(n)


def prior_log_density(x, t_max: float, proj=None):
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    out = _iso_logpdf(x2, t_max * t_max, proj)
    return float(out[0]) if np.asarray(x).ndim == 1 else out


class StepKernel:
    """Sampling and density for one reverse step's proposal covariance.

    Wraps a :class:`~vtdis.gaussians.Covariance`; with a projection the
    kernel lives on the zero-CoM subspace (isotropic and particle-block
    structures only).
    """

    def __init__(self, cov: ga.Covariance, proj: eq.ComProjection | None):
        if proj is not None and cov.kind not in ("isotropic", "kron_block"):
            raise ValueError(
                f"{cov.kind} covariance is not defined on the CoM subspace")
        self.cov = cov
        self.proj = proj

    def logpdf(self, x: np.ndarray, mean: np.ndarray) -> np.ndarray:
        cov, proj = self.cov, self.proj
        if proj is None:
            return ga._log_density_delta(np.atleast_2d(x - mean), cov)
        if cov.kind == "isotropic":
            return eq.com_gaussian_log_density(x, mean, cov.eta, proj,
                                               scale=cov.base_variance)
        return eq.com_gaussian_log_density(x, mean, cov.block, proj,
                                           scale=cov.base_variance)

    def _draw(self, z: np.ndarray, mean: np.ndarray) -> np.ndarray:
        """Map standard normals (one row per sample) to a sample."""
        cov, proj = self.cov, self.proj
        s = cov.base_variance
        if proj is not None:
            if cov.kind == "isotropic":
                noise = eq.com_project(z, proj)
                return mean + np.sqrt(s * cov.eta) * noise
            m1, n = proj.n_particles - 1, proj.spatial_dim
            lb = np.linalg.cholesky(proj.reduced_block(cov.block))
            corr = np.sqrt(s) * np.einsum("ij,bjn->bin",
                                          lb, z.reshape(-1, m1, n))
            return mean + proj.to_ambient(corr.reshape(z.shape[0], m1 * n))
        if cov.kind == "isotropic":
            return mean + np.sqrt(s * cov.eta) * z
        if cov.kind == "diagonal":
            return mean + np.sqrt(s * cov.etas) * z
        if cov.kind == "full_factor":
            return mean + np.sqrt(s) * (z @ cov.factor.T)
        if cov.kind == "low_rank":
            k = cov.lr_factor.shape[1]
            zk, zd = z[:, :k], z[:, k:]
            return mean + np.sqrt(s) * (zk @ cov.lr_factor.T
                                        + np.sqrt(cov.lr_ridge) * zd)
        m, n = cov.block.shape[0], cov.spatial_dim
        lb = np.linalg.cholesky(cov.block)
        corr = np.einsum("ij,bjn->bin", lb, z.reshape(-1, m, n))
        return mean + np.sqrt(s) * corr.reshape(z.shape[0], m * n)

    def noise_dim(self, ambient_dim: int) -> int:
        if self.proj is not None and self.cov.kind == "kron_block":
            return self.proj.subspace_dim
        if self.cov.kind == "low_rank":
            return ambient_dim + self.cov.lr_factor.shape[1]
        return ambient_dim

    def sample(self, rng, mean: np.ndarray) -> np.ndarray:
        """One draw per row of ``mean``; ``rng`` is a generator or a list
        of per-row generators (the latter reproduces row-by-row runs)."""
        nd = self.noise_dim(mean.shape[1])
        z = _draw_normals(rng, mean.shape[0], nd)
        return self._draw(z, mean)


def _draw_normals(rng, rows: int, cols: int) -> np.ndarray:
    if isinstance(rng, (list, tuple)):
        if len(rng) != rows:
            raise ValueError("need one generator per row")
        return np.stack([g.standard_normal(cols) for g in rng])
    return rng.standard_normal((rows, cols))


def baseline_covariances(grid: TimeGrid) -> list[ga.Covariance]:
    """The untuned sampler: unit isotropic scaling of the posterior
    variance at every step."""
    return [ga.Covariance.isotropic(1.0, grid.ddpm_var(n))
            for n in range(1, grid.n_steps + 1)]


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """States x_0..x_N with cached joint log-densities.

    ``log_q_cond`` is the product of forward kernels only (the target
    factor pi(x_0) is added by :func:`trajectory_log_weight` so both
    conventions stay available); ``log_p_joint`` includes the terminal
    prior.
    """

    states: np.ndarray          # (N+1, dim)
    grid: TimeGrid
    log_q_cond: float
    log_p_joint: float

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]


def trajectory_log_weight(traj: Trajectory, target,
                          direction: str = "target_over_proposal") -> float:
    """Trajectory importance weight; pi may be unnormalized."""
    log_pi = float(np.asarray(target.log_density(traj.x0)))
    lw = log_pi + traj.log_q_cond - traj.log_p_joint
    if direction == "target_over_proposal":
        return lw
    if direction == "proposal_over_target":
        return -lw
    raise ValueError(f"unknown direction {direction!r}")


def reverse_sample_batch(rng, model, covs: list[ga.Covariance],
                         grid: TimeGrid, count: int | None = None,
                         proj: eq.ComProjection | None = None):
    """Sample ``count`` reverse trajectories, streaming.

    Returns ``(x0, log_q_cond, log_p_joint)`` with batch-shaped log
    densities; states other than x_0 are not kept.  ``rng`` may be a list
    of per-trajectory generators, in which case results are identical to
    running trajectories one at a time.
    """
    n_steps = grid.n_steps
    if len(covs) != n_steps:
        raise ValueError(f"need {n_steps} step covariances, got {len(covs)}")
    if count is None:
        if not isinstance(rng, (list, tuple)):
            raise ValueError("count is required with a single generator")
        count = len(rng)
    kernels = [StepKernel(c, proj) for c in covs]
    d = model.dim
    t_max = grid.t_max

    z = _draw_normals(rng, count, d)
    if proj is not None:
        z = eq.com_project(z, proj)
    x = t_max * z
    log_p = prior_log_density(x, t_max, proj)
    log_q = np.zeros(count)

    for n in range(n_steps, 0, -1):
        t_n = grid.times[n]
        x0_hat = model.denoise(x, t_n)
        if np.isnan(x0_hat).any():
            raise FloatingPointError(f"denoiser produced NaN at step {n}")
        mean, _ = ddpm_posterior(x, x0_hat, n, grid)
        x_prev = kernels[n - 1].sample(rng, mean)
        log_p += kernels[n - 1].logpdf(x_prev, mean)
        log_q += _iso_logpdf(x - x_prev, grid.forward_var(n), proj)
        x = x_prev

    return x, log_q, log_p


def reverse_sample_trajectory(rng, model, covs: list[ga.Covariance],
                              grid: TimeGrid,
                              proj: eq.ComProjection | None = None
                              ) -> Trajectory:
    """Single full trajectory with all states retained."""
    n_steps = grid.n_steps
    if len(covs) != n_steps:
        raise ValueError(f"need {n_steps} step covariances, got {len(covs)}")
    kernels = [StepKernel(c, proj) for c in covs]
    d = model.dim
    t_max = grid.t_max

    z = rng.standard_normal(d)[None, :]
    if proj is not None:
        z = eq.com_project(z, proj)
    x = t_max * z
    states = np.empty((n_steps + 1, d))
    states[n_steps] = x[0]
    log_p = float(prior_log_density(x, t_max, proj)[0])
    log_q = 0.0

    for n in range(n_steps, 0, -1):
        x0_hat = model.denoise(x, grid.times[n])
        if np.isnan(x0_hat).any():
            raise FloatingPointError(f"denoiser produced NaN at step {n}")
        mean, _ = ddpm_posterior(x, x0_hat, n, grid)
        x_prev = kernels[n - 1].sample(rng, mean)
        log_p += float(kernels[n - 1].logpdf(x_prev, mean)[0])
        log_q += float(_iso_logpdf(x - x_prev, grid.forward_var(n), proj)[0])
        states[n - 1] = x_prev[0]
        x = x_prev

    return Trajectory(states=states, grid=grid, log_q_cond=log_q,
                      log_p_joint=log_p)


def forward_sample_trajectory(rng, x0, grid: TimeGrid,
                              proj: eq.ComProjection | None = None,
                              noise: np.ndarray | None = None) -> Trajectory:
    """Forward-noised trajectory from a given x_0.

    ``noise`` (N, dim) overrides the random increments when provided
    (testing hook); joint densities are cached exactly as in the reverse
    direction so weights compose.  The reverse-kernel part of
    ``log_p_joint`` is left at the prior only; use
    :func:`recompute_log_densities` to fill it for given covariances.
    """
    x0 = np.asarray(x0, dtype=float)
    d = x0.shape[0]
    n_steps = grid.n_steps
    states = np.empty((n_steps + 1, d))
    states[0] = x0
    log_q = 0.0
    x = x0[None, :]
    for n in range(1, n_steps + 1):
        z = (rng.standard_normal(d) if noise is None else noise[n - 1])[None, :]
        if proj is not None:
            z = eq.com_project(z, proj)
        x_next = x + np.sqrt(grid.forward_var(n)) * z
        log_q += float(_iso_logpdf(x_next - x, grid.forward_var(n), proj)[0])
        states[n] = x_next[0]
        x = x_next
    log_prior = float(prior_log_density(x, grid.t_max, proj)[0])
    return Trajectory(states=states, grid=grid, log_q_cond=log_q,
                      log_p_joint=log_prior)


def recompute_log_densities(traj: Trajectory, model,
                            covs: list[ga.Covariance],
                            proj: eq.ComProjection | None = None
                            ) -> tuple[float, float]:
    """Joint log-densities recomputed from stored states (cache check)."""
    grid = traj.grid
    kernels = [StepKernel(c, proj) for c in covs]
    log_q = 0.0
    log_p = float(prior_log_density(traj.states[-1][None, :], grid.t_max,
                                    proj)[0])
    for n in range(1, grid.n_steps + 1):
        x_n = traj.states[n][None, :]
        x_prev = traj.states[n - 1][None, :]
        log_q += float(_iso_logpdf(x_n - x_prev, grid.forward_var(n), proj)[0])
        x0_hat = model.denoise(x_n, grid.times[n])
        mean, _ = ddpm_posterior(x_n, x0_hat, n, grid)
        log_p += float(kernels[n - 1].logpdf(x_prev, mean)[0])
    return log_q, log_p


# ---------------------------------------------------------------------------
# forward-path residual batches (shared by the tuner and the bound metrics)
# ---------------------------------------------------------------------------

@dataclass
class ForwardBatch:
    """Forward trajectories reduced to what proposal densities need.

    ``deltas[n-1]`` holds x_{n-1} - posterior_mean(x_n, x0_hat) for step n;
    the denoiser predictions are baked in, so evaluating a candidate set
    of step covariances touches no score model.
    """

    deltas: np.ndarray       # (N, B, dim)
    log_q_cond: np.ndarray   # (B,)
    log_prior: np.ndarray    # (B,)

    @property
    def n_steps(self) -> int:
        return self.deltas.shape[0]

    @property
    def count(self) -> int:
        return self.deltas.shape[1]


def forward_residuals(rng, x0: np.ndarray, model, grid: TimeGrid,
                      proj: eq.ComProjection | None = None) -> ForwardBatch:
    """Noise a batch of x_0 forward and collect per-step residuals."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    b, d = x0.shape
    n_steps = grid.n_steps
    deltas = np.empty((n_steps, b, d))
    log_q = np.zeros(b)
    x = x0
    for n in range(1, n_steps + 1):
        z = rng.standard_normal((b, d))
        if proj is not None:
            z = eq.com_project(z, proj)
        x_next = x + np.sqrt(grid.forward_var(n)) * z
        log_q += _iso_logpdf(x_next - x, grid.forward_var(n), proj)
        x0_hat = model.denoise(x_next, grid.times[n])
        mean, _ = ddpm_posterior(x_next, x0_hat, n, grid)
        deltas[n - 1] = x - mean
        x = x_next
    log_prior = prior_log_density(x, grid.t_max, proj)
    return ForwardBatch(deltas=deltas, log_q_cond=log_q, log_prior=log_prior)
