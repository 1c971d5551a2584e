"""Time discretizations of the noise interval [eps, T].

Grids are strictly increasing, t_0 = eps > 0 through t_N = T, following
the variance-exploding convention where the marginal noise scale at time
t is t itself.  Per-step derived constants:

* ``forward_var(n)  = t_n^2 - t_{n-1}^2``   (forward transition variance)
* ``ddpm_var(n)     = t_{n-1}^2 (t_n^2 - t_{n-1}^2) / t_n^2``
  (the Bayes-posterior variance used by the reverse sampler)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray
    kind: str = "custom"
    rho: float | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.shape[0] < 2:
            raise ValueError("grid needs at least two time points")
        if t[0] <= 0:
            raise ValueError("eps must be positive")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def n_steps(self) -> int:
        return self.times.shape[0] - 1

    @property
    def eps(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def forward_var(self, n: int) -> float:
        """Variance of the forward kernel q(x_n | x_{n-1}), n in 1..N."""
        if not 1 <= n <= self.n_steps:
            raise ValueError(f"step index {n} outside 1..{self.n_steps}")
        return float(self.times[n] ** 2 - self.times[n - 1] ** 2)

    def ddpm_var(self, n: int) -> float:
        """Reverse-posterior base variance at step n, n in 1..N."""
        if not 1 <= n <= self.n_steps:
            raise ValueError(f"step index {n} outside 1..{self.n_steps}")
        tp, tn = self.times[n - 1], self.times[n]
        return float(tp * tp * (tn * tn - tp * tp) / (tn * tn))

    def mean_ratio(self, n: int) -> float:
        """t_{n-1}^2 / t_n^2, the weight of x_n in the posterior mean."""
        if not 1 <= n <= self.n_steps:
            raise ValueError(f"step index {n} outside 1..{self.n_steps}")
        return float(self.times[n - 1] ** 2 / self.times[n] ** 2)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "steps": self.n_steps,
             "eps": self.eps, "t_max": self.t_max}
        if self.rho is not None:
            d["rho"] = self.rho
        return d


def geometric_grid(n_steps: int, eps: float, t_max: float) -> TimeGrid:
    """t_n = eps * (T/eps)^(n/N): constant ratio between consecutive times."""
    _validate(n_steps, eps, t_max)
    n = np.arange(n_steps + 1, dtype=float)
    t = eps * (t_max / eps) ** (n / n_steps)
    t[0], t[-1] = eps, t_max
    return TimeGrid(t, kind="geometric")


def karras_grid(n_steps: int, eps: float, t_max: float, rho: float) -> TimeGrid:
    """Power-interpolated grid, t_n = (eps^(1/rho) + (n/N)(T^(1/rho) - eps^(1/rho)))^rho.

    rho = 1 gives linear spacing; rho -> infinity approaches the geometric
    grid.  Endpoints are exact for any rho.
    """
    _validate(n_steps, eps, t_max)
    if not (np.isfinite(rho) and rho > 0):
        raise ValueError("rho must be positive")
    u = np.arange(n_steps + 1, dtype=float) / n_steps
    a = np.exp(np.log(eps) / rho)
    b = np.exp(np.log(t_max) / rho)
    t = np.exp(rho * np.log(a + u * (b - a)))
    t[0], t[-1] = eps, t_max
    return TimeGrid(t, kind="karras", rho=float(rho))


def grid_from_dict(d: dict) -> TimeGrid:
    kind = d["kind"]
    if kind == "geometric":
        return geometric_grid(int(d["steps"]), float(d["eps"]), float(d["t_max"]))
    if kind == "karras":
        return karras_grid(int(d["steps"]), float(d["eps"]), float(d["t_max"]),
                           float(d["rho"]))
    raise ValueError(f"unknown grid kind {kind!r}")


def _validate(n_steps: int, eps: float, t_max: float) -> None:
    if n_steps < 1:
        raise ValueError("need at least one step")
    if not (0 < eps < t_max):
        raise ValueError("require 0 < eps < t_max")
