"""Advection-diffusion residual, training losses and Peclet-number analysis.

The governing equation is dC/dt + v . grad(C) = D * lap(C).  Given a
derivative bundle from the network module, `ade_residual` assembles the
residual r = dC/dt + v . grad(C) - D * lap(C) on the same tape, with the
transport coefficients recorded as trainable leaves.

D is parameterized through its logarithm by default, which keeps it
structurally positive during optimization; a raw-D mode exists for
experiments that want the coefficient itself as the optimization variable.
The velocity is a per-axis vector by default; a scalar mode contracts one
shared speed against the sum of the spatial derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, as_tensor
from .network import DerivBundle

__all__ = [
    "PhysicsParams", "PhysicsRefs", "PhysicsError", "PecletReport",
    "record_physics", "ade_residual", "loss_ade", "loss_data", "total_loss",
    "peclet", "classify_regime", "make_peclet_report", "format_peclet_report",
    "REGIME_ADVECTION", "REGIME_DIFFUSION", "REGIME_MIXED", "DEFAULT_L_C_MM",
]

REGIME_ADVECTION = "Advection"
REGIME_DIFFUSION = "Diffusion"
REGIME_MIXED = "Mixed"

# Characteristic length for the Peclet number: 0.1 mm (100 um).
DEFAULT_L_C_MM = 0.1


class PhysicsError(ValueError):
    pass


@dataclass
class PhysicsParams:
    """Trainable transport coefficients.

    `d_value` is log(D) when `log_parameterized` (the default, keeping D > 0
    structurally) and D itself otherwise.  `velocity` has shape (d,) in
    vector mode and shape () in scalar mode.
    """

    d_value: float
    velocity: np.ndarray
    log_parameterized: bool = True
    scalar_velocity: bool = False

    def __post_init__(self) -> None:
        self.d_value = float(self.d_value)
        if not math.isfinite(self.d_value):
            raise PhysicsError(f"non-finite diffusion parameter {self.d_value}")
        if not self.log_parameterized and self.d_value <= 0.0:
            raise PhysicsError(f"raw-D mode needs D > 0, got {self.d_value}")
        self.velocity = as_tensor(self.velocity)
        if self.scalar_velocity:
            if self.velocity.shape != ():
                raise PhysicsError(f"scalar velocity mode needs a scalar, got shape {self.velocity.shape}")
        elif self.velocity.ndim != 1 or self.velocity.size < 1:
            raise PhysicsError(f"velocity must be a (d,) vector, got shape {self.velocity.shape}")
        if not np.all(np.isfinite(self.velocity)):
            raise PhysicsError("non-finite velocity")

    @classmethod
    def from_initial(cls, d_init: float, v_init: float, spatial_dim: int,
                     log_parameterized: bool = True,
                     scalar_velocity: bool = False) -> "PhysicsParams":
        """Start from a diffusion coefficient and one speed applied to every axis."""
        if d_init <= 0.0:
            raise PhysicsError(f"initial D must be positive, got {d_init}")
        d_value = math.log(d_init) if log_parameterized else float(d_init)
        vel = np.float64(v_init) if scalar_velocity else np.full(spatial_dim, float(v_init))
        return cls(d_value, vel, log_parameterized, scalar_velocity)

    @property
    def D(self) -> float:
        return math.exp(self.d_value) if self.log_parameterized else self.d_value

    @property
    def speed(self) -> float:
        return float(np.abs(self.velocity)) if self.scalar_velocity \
            else float(np.linalg.norm(self.velocity))

    def velocity_vector(self, spatial_dim: int) -> np.ndarray:
        """The velocity as a (d,) vector regardless of mode."""
        if self.scalar_velocity:
            return np.full(spatial_dim, float(self.velocity))
        return self.velocity.copy()


@dataclass
class PhysicsRefs:
    """Tape ids of the recorded coefficients (all trainable leaves)."""

    d_param: int                 # log(D) or D, per `log_parameterized`
    velocity: list[int]          # one scalar leaf per axis (one total in scalar mode)
    log_parameterized: bool
    scalar_velocity: bool


def record_physics(tape: Tape, params: PhysicsParams) -> PhysicsRefs:
    d_param = tape.leaf(np.float64(params.d_value), trainable=True)
    if params.scalar_velocity:
        vel = [tape.leaf(np.float64(params.velocity), trainable=True)]
    else:
        vel = [tape.leaf(np.float64(c), trainable=True) for c in params.velocity]
    return PhysicsRefs(d_param, vel, params.log_parameterized, params.scalar_velocity)


def diffusion_node(tape: Tape, refs: PhysicsRefs) -> int:
    """Node holding D itself (exp of the leaf in log mode)."""
    return tape.exp(refs.d_param) if refs.log_parameterized else refs.d_param


def ade_residual(bundle: DerivBundle, refs: PhysicsRefs) -> int:
    """Record r = dC/dt + v . grad(C) - D * lap(C); returns the (batch, 1) node."""
    tape = bundle.tape
    d = bundle.spatial_dim
    if refs.scalar_velocity:
        gsum = bundle.grad[0]
        for g in bundle.grad[1:]:
            gsum = tape.add(gsum, g)
        adv = tape.mul(refs.velocity[0], gsum)
    else:
        if len(refs.velocity) != d:
            raise PhysicsError(
                f"velocity has {len(refs.velocity)} components for a {d}-dimensional bundle")
        adv = tape.mul(refs.velocity[0], bundle.grad[0])
        for vi, gi in zip(refs.velocity[1:], bundle.grad[1:]):
            adv = tape.add(adv, tape.mul(vi, gi))
    diff = tape.mul(diffusion_node(tape, refs), bundle.lap)
    return tape.add(bundle.dt, tape.sub(adv, diff))


def loss_ade(tape: Tape, residual: int) -> int:
    """Mean squared residual over the whole collocation batch."""
    if tape.value(residual).size == 0:
        raise PhysicsError("empty residual batch")
    return tape.mean(tape.square(residual))


def loss_data(tape: Tape, predictions: int, measurements) -> int:
    """Mean squared mismatch between predictions and measured concentrations."""
    pred = tape.value(predictions)
    meas = as_tensor(measurements).reshape(-1, 1)
    if meas.size == 0:
        raise PhysicsError("empty measurement batch")
    if pred.shape != meas.shape:
        raise PhysicsError(f"predictions {pred.shape} vs measurements {meas.shape}")
    return tape.mean(tape.square(tape.sub(predictions, tape.leaf(meas))))


def total_loss(tape: Tape, l_ade: int, l_data: int,
               w_ade: float, w_data: float) -> int:
    if w_ade < 0.0 or w_data < 0.0:
        raise PhysicsError(f"loss weights must be >= 0, got ({w_ade}, {w_data})")
    return tape.add(tape.scale(l_ade, w_ade), tape.scale(l_data, w_data))


# -- transport regime ------------------------------------------------------

def peclet(D: float, speed: float, L_c: float = DEFAULT_L_C_MM) -> float:
    """Pe = L_c * speed / D."""
    if not (D > 0.0):
        raise PhysicsError(f"D must be positive, got {D}")
    if not (L_c > 0.0):
        raise PhysicsError(f"L_c must be positive, got {L_c}")
    if speed < 0.0:
        raise PhysicsError(f"speed must be >= 0, got {speed}")
    return L_c * speed / D


def classify_regime(pe: float) -> str:
    if pe < 0.0 or not math.isfinite(pe):
        raise PhysicsError(f"Peclet number must be finite and >= 0, got {pe}")
    if pe > 1.0:
        return REGIME_ADVECTION
    if pe < 1.0:
        return REGIME_DIFFUSION
    return REGIME_MIXED


@dataclass
class PecletReport:
    D_mm2_s: float
    speed_mm_s: float
    L_c_mm: float
    Pe: float
    regime: str

    def to_dict(self) -> dict:
        return {"D_mm2_s": self.D_mm2_s, "speed_mm_s": self.speed_mm_s,
                "L_c_mm": self.L_c_mm, "Pe": self.Pe, "regime": self.regime}


def make_peclet_report(D: float, velocity, L_c: float = DEFAULT_L_C_MM) -> PecletReport:
    """Analyze recovered coefficients; `velocity` is a scalar speed or a vector."""
    vel = np.atleast_1d(as_tensor(velocity))
    speed = float(np.linalg.norm(vel))
    pe = peclet(D, speed, L_c)
    return PecletReport(float(D), speed, float(L_c), pe, classify_regime(pe))


def format_peclet_report(report: PecletReport) -> str:
    lines = [f"D_mm2_s = {report.D_mm2_s:.6e}",
             f"speed_mm_s = {report.speed_mm_s:.6e}",
             f"L_c_mm = {report.L_c_mm:.6e}",
             f"Pe = {report.Pe:.4f}",
             f"regime = {report.regime}"]
    return "\n".join(lines) + "\n"
