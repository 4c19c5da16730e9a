"""Explicit finite-difference reference solver for advection-diffusion.

This module is the independent numerical route against which the learned
surrogate is checked: central second differences for diffusion, first-order
upwinding for advection, explicit Euler in time.  Both schemes are written
in flux-telescoping form, so on a periodic domain total mass is conserved to
rounding error per step.

`analytic_gaussian` is the closed-form advected point-source solution

    C(x, t) = (4 pi D (t + t_off))^(-d/2) * exp(-|x - x0 - v t|^2 / (4 D (t + t_off)))

with `t_offset` setting the diffusion age (hence the width) at t = 0.  Its
exact partial derivatives are coded directly from the formula in
`analytic_gaussian_derivs`, independent of any network machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Grid", "SolverError", "stability_limits", "solve_ade_fd",
    "analytic_gaussian", "analytic_gaussian_derivs", "gaussian_on_grid",
]

BOUNDARIES = ("periodic", "zero-flux")

# Explicit stepping is run below the formal stability bound by this factor.
STABILITY_SAFETY = 0.9


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform node-centered grid.  Node i along axis a sits at
    origin[a] + i * spacing[a]; fields are indexed with axes in `dims` order."""

    dims: tuple[int, ...]
    spacing_mm: tuple[float, ...]
    origin_mm: tuple[float, ...] = ()
    boundary: str = "periodic"

    def __post_init__(self) -> None:
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm) if self.origin_mm \
            else (0.0,) * len(dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)
        if not dims:
            raise SolverError("grid needs at least one axis")
        if any(n < 3 for n in dims):
            raise SolverError(f"every axis needs >= 3 nodes, got {dims}")
        if len(spacing) != len(dims) or any(not (s > 0.0) for s in spacing):
            raise SolverError(f"bad spacing {spacing} for dims {dims}")
        if len(origin) != len(dims):
            raise SolverError(f"origin {origin} does not match dims {dims}")
        if self.boundary not in BOUNDARIES:
            raise SolverError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin_mm[axis] + self.spacing_mm[axis] * np.arange(self.dims[axis])

    def points(self) -> np.ndarray:
        """All node coordinates as an (N, d) array, C-order over `dims`."""
        mesh = np.meshgrid(*(self.axis_coords(a) for a in range(self.ndim)), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_volume(self) -> float:
        return float(np.prod(self.spacing_mm))


def stability_limits(grid: Grid, D: float, v) -> tuple[float, float]:
    """(diffusive, advective) timestep bounds, inf where the term is absent.

    Diffusion: dt <= min_a dx_a^2 / (2 d D); advection: dt <= min_a dx_a / |v_a|.
    """
    vel = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if vel.shape != (grid.ndim,):
        raise SolverError(f"velocity must have {grid.ndim} components, got shape {vel.shape}")
    if D < 0.0:
        raise SolverError(f"D must be >= 0, got {D}")
    diff_limit = math.inf
    if D > 0.0:
        diff_limit = min(s * s / (2.0 * grid.ndim * D) for s in grid.spacing_mm)
    adv_limit = math.inf
    for s, vi in zip(grid.spacing_mm, vel):
        if vi != 0.0:
            adv_limit = min(adv_limit, s / abs(vi))
    return diff_limit, adv_limit


def _shift(c: np.ndarray, axis: int, step: int, boundary: str) -> np.ndarray:
    """Neighbor values along `axis`; `step` +1 looks forward, -1 backward."""
    if boundary == "periodic":
        return np.roll(c, -step, axis=axis)
    # zero-flux: replicate the edge value (zero-gradient ghost)
    out = np.roll(c, -step, axis=axis)
    idx = [slice(None)] * c.ndim
    src = [slice(None)] * c.ndim
    if step > 0:
        idx[axis] = slice(-1, None)
        src[axis] = slice(-1, None)
    else:
        idx[axis] = slice(0, 1)
        src[axis] = slice(0, 1)
    out[tuple(idx)] = c[tuple(src)]
    return out


def solve_ade_fd(grid: Grid, c0: np.ndarray, D: float, v, dt: float,
                 steps: int) -> list[np.ndarray]:
    """March `steps` explicit Euler steps; returns the field after each step.

    Rejects timesteps above STABILITY_SAFETY times the formal bounds, with
    the computed limits in the message.
    """
    c = np.ascontiguousarray(c0, dtype=np.float64)
    if c.shape != grid.dims:
        raise SolverError(f"initial field has shape {c.shape}, grid is {grid.dims}")
    if not np.all(np.isfinite(c)):
        raise SolverError("initial field has non-finite values")
    if steps < 1:
        raise SolverError(f"steps must be >= 1, got {steps}")
    if not (dt > 0.0):
        raise SolverError(f"dt must be positive, got {dt}")
    vel = np.atleast_1d(np.asarray(v, dtype=np.float64))
    diff_limit, adv_limit = stability_limits(grid, D, vel)
    if dt > STABILITY_SAFETY * diff_limit or dt > STABILITY_SAFETY * adv_limit:
        raise SolverError(
            f"dt={dt:g} violates stability: diffusive limit "
            f"{STABILITY_SAFETY * diff_limit:g}, advective limit "
            f"{STABILITY_SAFETY * adv_limit:g} (safety factor {STABILITY_SAFETY})")

    out: list[np.ndarray] = []
    c = c.copy()
    for step in range(steps):
        rate = np.zeros_like(c)
        for axis in range(grid.ndim):
            dx = grid.spacing_mm[axis]
            fwd = _shift(c, axis, +1, grid.boundary)
            bwd = _shift(c, axis, -1, grid.boundary)
            if D > 0.0:
                rate += D * (fwd - 2.0 * c + bwd) / (dx * dx)
            vi = vel[axis]
            if vi > 0.0:
                rate -= vi * (c - bwd) / dx
            elif vi < 0.0:
                rate -= vi * (fwd - c) / dx
        c = c + dt * rate
        if not np.all(np.isfinite(c)):
            raise SolverError(f"non-finite field at step {step}")
        out.append(c.copy())
    return out


# -- closed-form reference solution ---------------------------------------

def _gaussian_inputs(x, t, D: float, v, x0, t_offset: float):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1)
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    vel = np.atleast_1d(np.asarray(v, dtype=np.float64))
    d = x0.size
    if x.shape[-1] != d or vel.shape != (d,):
        raise SolverError(
            f"inconsistent dimensions: x {x.shape}, x0 {x0.shape}, v {vel.shape}")
    if not (D > 0.0):
        raise SolverError(f"D must be positive, got {D}")
    t = np.asarray(t, dtype=np.float64)  # scalar or one time per point
    if t.ndim not in (0, 1) or (t.ndim == 1 and t.shape[0] != x.shape[0]):
        raise SolverError(f"t must be scalar or per-point, got shape {t.shape}")
    age = t + float(t_offset)
    if not np.all(age > 0.0):
        raise SolverError(f"t + t_offset must be positive, got minimum {age.min()}")
    return x, t, vel, x0, d, age


def analytic_gaussian(x, t, D: float, v, x0, t_offset: float = 0.0) -> np.ndarray:
    """Advected Gaussian at points x, shape (..., d); t is one shared time or,
    for 2-d x of shape (n, d), one time per point."""
    x, t, vel, x0, d, age = _gaussian_inputs(x, t, D, v, x0, t_offset)
    u = x - x0 - vel * np.expand_dims(t, -1) if np.ndim(t) else x - x0 - vel * t
    r2 = np.sum(u * u, axis=-1)
    a = 4.0 * D * age
    return (math.pi * a) ** (-0.5 * d) * np.exp(-r2 / a)


@dataclass
class GaussianDerivs:
    value: np.ndarray   # (...,)
    dt: np.ndarray      # (...,)
    grad: np.ndarray    # (..., d)
    lap: np.ndarray     # (...,)


def analytic_gaussian_derivs(x, t, D: float, v, x0,
                             t_offset: float = 0.0) -> GaussianDerivs:
    """Exact dC/dt, grad C and lap C of the advected Gaussian.

    Coded straight from the closed form:
        grad C = -2 u / a * C,              u = x - x0 - v t,  a = 4 D (t + t_off)
        lap C  = (4 |u|^2 / a^2 - 2 d / a) * C
        dC/dt  = (2 u.v / a - 2 d D / a + 4 D |u|^2 / a^2) * C
    """
    x, t, vel, x0, d, age = _gaussian_inputs(x, t, D, v, x0, t_offset)
    u = x - x0 - vel * np.expand_dims(t, -1) if np.ndim(t) else x - x0 - vel * t
    r2 = np.sum(u * u, axis=-1)
    a = 4.0 * D * age
    c = (math.pi * a) ** (-0.5 * d) * np.exp(-r2 / a)
    grad = (-2.0 / np.expand_dims(a, -1) if np.ndim(a) else -2.0 / a) \
        * u * c[..., None]
    lap = (4.0 * r2 / (a * a) - 2.0 * d / a) * c
    dt = (2.0 * np.sum(u * vel, axis=-1) / a - 2.0 * d * D / a
          + 4.0 * D * r2 / (a * a)) * c
    return GaussianDerivs(c, dt, grad, lap)


def gaussian_on_grid(grid: Grid, t, D: float, v, x0,
                     t_offset: float = 0.0) -> np.ndarray:
    """Sample the advected Gaussian at every grid node; shape = grid.dims."""
    c = analytic_gaussian(grid.points(), t, D, v, x0, t_offset)
    return c.reshape(grid.dims)
