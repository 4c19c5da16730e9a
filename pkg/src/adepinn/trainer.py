"""Full-batch training loop for the inverse transport problem.

Each epoch rebuilds the computation tape: the surrogate's derivative pass on
the collocation points feeds the equation residual, the plain forward pass
on the data points feeds the measurement mismatch, and one reverse sweep
yields gradients for every weight matrix, bias, the diffusion parameter and
the velocity components.  Updates use Adam with bias correction and a linear
warmup followed by cosine annealing of the learning rate.  Weight decay is
decoupled and applies only to the weight matrices, never to biases or to
the transport coefficients.

Training opens with a data-first phase: the residual weight is zero and the
diffusion coefficient is held at its initial value while the surrogate
fits the measured frames alone, then the weight ramps linearly to w_ade as
the coefficient unfreezes (both phase lengths fixed up front, both
overridable).  Joint optimization from the first epoch instead lets the
coefficients chase the equation residual of an untrained surrogate — with
Adam's per-parameter step normalization moving them at full schedule speed
in essentially arbitrary directions — and, worse, lets the residual teach
the surrogate to cohere with whatever the coefficients currently claim.

Physical initial values for D and v are converted through the batch's
ScaleRecord before optimization starts, and every telemetry row reports the
coefficients mapped back to physical units.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from . import network, physics
from .autodiff import Tape, TapeError
from .data import (SampleBatch, ScaleRecord, nondimensionalize_coefficients,
                   redimensionalize)
from .fdsolver import Grid
from .network import MlpParams
from .physics import PhysicsParams, PhysicsRefs

__all__ = [
    "TrainingConfig", "AdamState", "TrainRecord", "ConfigError",
    "TrainingAborted", "lr_schedule", "ade_weight", "adam_step", "train",
    "predict", "mse",
]


class ConfigError(ValueError):
    pass


_allocator_tuned = False


def _tune_allocator() -> None:
    """Keep multi-megabyte array buffers recyclable on the heap.

    A full-batch epoch allocates and frees dozens of arrays of a few MB each.
    glibc serves blocks that large through mmap and unmaps them on free, so
    every epoch would re-fault the same pages in; raising the mmap and trim
    thresholds lets freed blocks be reused directly.  Best effort: silently
    does nothing where mallopt is unavailable (non-glibc platforms).
    """
    global _allocator_tuned
    if _allocator_tuned:
        return
    _allocator_tuned = True
    try:
        import ctypes
        libc = ctypes.CDLL(None)
        m_trim_threshold, m_mmap_threshold = -1, -3
        libc.mallopt(m_mmap_threshold, 1 << 26)
        libc.mallopt(m_trim_threshold, 1 << 26)
    except Exception:
        pass


class TrainingAborted(RuntimeError):
    """Raised when the loss or a parameter stops being finite.

    Carries the failing epoch and the telemetry recorded so far."""

    def __init__(self, epoch: int, detail: str, record: "TrainRecord | None"):
        super().__init__(f"training aborted at epoch {epoch}: {detail}")
        self.epoch = epoch
        self.record = record


@dataclass
class TrainingConfig:
    epochs: int = 30000
    lr0: float = 0.01
    warmup_epochs: int = 500
    weight_decay: float = 1e-4
    w_ade: float = 100.0
    w_data: float = 1.0
    w_ade_ramp_epochs: int | None = None   # None: follow warmup_epochs
    freeze_d_epochs: int | None = None     # None: follow warmup_epochs
    k_ade: int = 5000
    k_data: int = 5000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    d_init_mm2_s: float = 1e-4
    v_init_mm_s: float = 1e-3
    hidden: tuple[int, ...] = (32, 32, 32, 32)
    scalar_velocity: bool = False
    log_parameterized_d: bool = True
    resample_every: int = 0
    with_replacement: bool = False

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs} vs {self.epochs}")
        if not (self.lr0 > 0.0):
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.w_ade < 0.0 or self.w_data < 0.0:
            raise ConfigError(f"loss weights must be >= 0, got ({self.w_ade}, {self.w_data})")
        # The warm-start window doubles as the default phase length: the
        # surrogate settles onto the measured frames alone for one window,
        # then the residual ramps in over the next while D starts to move.
        if self.w_ade_ramp_epochs is None:
            self.w_ade_ramp_epochs = self.warmup_epochs
        if self.freeze_d_epochs is None:
            self.freeze_d_epochs = self.warmup_epochs
        if not 0 <= self.w_ade_ramp_epochs <= self.epochs:
            raise ConfigError(
                f"need 0 <= w_ade_ramp_epochs <= epochs, got {self.w_ade_ramp_epochs}")
        if not 0 <= self.freeze_d_epochs < self.epochs:
            raise ConfigError(
                f"need 0 <= freeze_d_epochs < epochs, got {self.freeze_d_epochs}")
        if self.freeze_d_epochs + self.w_ade_ramp_epochs > self.epochs:
            raise ConfigError(
                "freeze_d_epochs + w_ade_ramp_epochs must not exceed epochs, "
                f"got {self.freeze_d_epochs} + {self.w_ade_ramp_epochs} "
                f"> {self.epochs}")
        if self.k_ade < 1 or self.k_data < 1:
            raise ConfigError(f"k_ade and k_data must be >= 1, got ({self.k_ade}, {self.k_data})")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {b}")
        if not (self.eps > 0.0):
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if not (self.d_init_mm2_s > 0.0):
            raise ConfigError(f"d_init_mm2_s must be positive, got {self.d_init_mm2_s}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden}")
        if self.resample_every < 0:
            raise ConfigError(f"resample_every must be >= 0, got {self.resample_every}")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainingConfig":
        if not isinstance(raw, dict):
            raise ConfigError("training config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = list(val) if isinstance(val, tuple) else val
        return out


def lr_schedule(epoch: int, config: TrainingConfig) -> float:
    """Linear warmup to lr0, then cosine annealing to zero at the last epoch."""
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        return config.lr0 * (epoch + 1) / config.warmup_epochs
    span = config.epochs - config.warmup_epochs
    return config.lr0 * 0.5 * (1.0 + math.cos(math.pi * (epoch - config.warmup_epochs) / span))


def ade_weight(epoch: int, config: TrainingConfig) -> float:
    """Residual weight at an epoch: zero through the data-first phase, then a
    linear ramp up to w_ade starting when the diffusion coefficient unfreezes.

    Order matters.  A residual applied while D is pinned teaches the
    surrogate to satisfy the equation with the pinned (wrong) coefficient,
    and D then reads that self-consistent fiction back at unfreeze.  Kept at
    zero until the surrogate answers only to the data, the residual meets an
    honest fit, and the coefficients race to the values it implies while the
    weight is still too small to bend the fit.  With both phases zero the
    weight is constant from the first epoch.
    """
    start = config.freeze_d_epochs
    if epoch < start:
        return 0.0
    if config.w_ade_ramp_epochs <= 0:
        return config.w_ade
    return config.w_ade * min(1.0, (epoch - start + 1) / config.w_ade_ramp_epochs)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr: float, config: TrainingConfig,
              decay_keys: frozenset[str] = frozenset()) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place on the parameter arrays.

    Decoupled weight decay (p -= lr * wd * p) is applied only to keys in
    `decay_keys`.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {key!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m[key]
        v = state.v[key]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        if key in decay_keys and config.weight_decay > 0.0:
            update = update + lr * config.weight_decay * p
        p -= update
    return params


@dataclass
class TrainRecord:
    """Per-epoch telemetry plus the final model state."""

    epoch: np.ndarray
    lr: np.ndarray
    loss: np.ndarray
    loss_ade: np.ndarray
    loss_data: np.ndarray
    d_mm2_s: np.ndarray          # (E,) physical diffusion coefficient
    v_mm_s: np.ndarray           # (E, d) physical velocity components
    params: MlpParams
    phys: PhysicsParams          # final coefficients in scaled space
    scale: ScaleRecord
    spatial_dim: int
    config: TrainingConfig

    @property
    def n_epochs(self) -> int:
        return int(self.epoch.size)

    @property
    def final_d_mm2_s(self) -> float:
        return float(self.d_mm2_s[-1])

    @property
    def final_v_mm_s(self) -> np.ndarray:
        return self.v_mm_s[-1].copy()

    @property
    def final_speed_mm_s(self) -> float:
        return float(np.linalg.norm(self.v_mm_s[-1]))

    def csv_header(self) -> list[str]:
        cols = ["epoch", "lr", "loss", "loss_ade", "loss_data", "D"]
        if self.config.scalar_velocity:
            return cols + ["v"]
        return cols + [f"v{i}" for i in range(self.v_mm_s.shape[1])]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.csv_header())
            for i in range(self.n_epochs):
                row = [str(int(self.epoch[i])), f"{self.lr[i]:.17g}",
                       f"{self.loss[i]:.17g}", f"{self.loss_ade[i]:.17g}",
                       f"{self.loss_data[i]:.17g}", f"{self.d_mm2_s[i]:.17g}"]
                if self.config.scalar_velocity:
                    row.append(f"{self.v_mm_s[i][0]:.17g}")
                else:
                    row += [f"{v:.17g}" for v in self.v_mm_s[i]]
                writer.writerow(row)

    @staticmethod
    def read_csv(path) -> dict[str, np.ndarray]:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            cols = {name: [] for name in header}
            for row in reader:
                for name, cell in zip(header, row):
                    cols[name].append(float(cell))
        return {name: np.asarray(vals) for name, vals in cols.items()}


def _record_phys_leaves(tape: Tape, params: dict[str, np.ndarray],
                        config: TrainingConfig) -> PhysicsRefs:
    d_leaf = tape.leaf(params["d_param"], trainable=True)
    if config.scalar_velocity:
        vel = [tape.leaf(params["v"], trainable=True)]
    else:
        vel = [tape.leaf(params["v"][i], trainable=True)
               for i in range(params["v"].size)]
    return PhysicsRefs(d_leaf, vel, config.log_parameterized_d, config.scalar_velocity)


def train(config: TrainingConfig, batch: SampleBatch, resampler=None,
          log_every: int = 0) -> TrainRecord:
    """Run the inverse problem on one sample batch.

    `resampler`, if given, is called as resampler(epoch) every
    config.resample_every epochs to draw fresh points.  The run is
    deterministic for a fixed config and batch.
    """
    _tune_allocator()
    d = batch.spatial_dim
    layer_dims = [d + 1, *config.hidden, 1]
    mlp = network.init_glorot(layer_dims, config.seed)
    d_hat0, v_hat0 = nondimensionalize_coefficients(
        config.d_init_mm2_s, config.v_init_mm_s, batch.scale)
    params: dict[str, np.ndarray] = {}
    for l in range(mlp.n_layers):
        params[f"W{l}"] = mlp.weights[l]
        params[f"b{l}"] = mlp.biases[l]
    d0 = math.log(d_hat0) if config.log_parameterized_d else float(d_hat0)
    params["d_param"] = np.asarray(d0, dtype=np.float64)
    params["v"] = np.asarray(float(v_hat0)) if config.scalar_velocity \
        else np.full(d, float(v_hat0))
    decay_keys = frozenset(f"W{l}" for l in range(mlp.n_layers))
    state = AdamState.zeros_like(params)

    ep = np.arange(config.epochs)
    lr_hist = np.zeros(config.epochs)
    loss_hist = np.zeros(config.epochs)
    ade_hist = np.zeros(config.epochs)
    data_hist = np.zeros(config.epochs)
    d_hist = np.zeros(config.epochs)
    v_hist = np.zeros((config.epochs, d))

    def snapshot(n: int) -> TrainRecord:
        phys = PhysicsParams(float(params["d_param"]), params["v"].copy(),
                             config.log_parameterized_d, config.scalar_velocity)
        return TrainRecord(ep[:n].copy(), lr_hist[:n].copy(), loss_hist[:n].copy(),
                           ade_hist[:n].copy(), data_hist[:n].copy(),
                           d_hist[:n].copy(), v_hist[:n].copy(),
                           mlp.copy(), phys, batch.scale, d, config)

    for epoch in range(config.epochs):
        if resampler is not None and config.resample_every > 0 and epoch > 0 \
                and epoch % config.resample_every == 0:
            batch = resampler(epoch)
        lr = lr_schedule(epoch, config)
        try:
            tape = Tape()
            refs = network.record_params(tape, mlp)
            phys_refs = _record_phys_leaves(tape, params, config)
            bundle = network.derivs_on_tape(tape, refs, batch.collocation)
            residual = physics.ade_residual(bundle, phys_refs)
            l_ade = physics.loss_ade(tape, residual)
            pred = network.forward_on_tape(tape, refs, batch.data_points)
            l_data = physics.loss_data(tape, pred, batch.data_values)
            total = physics.total_loss(tape, l_ade, l_data,
                                       ade_weight(epoch, config), config.w_data)
            grads_by_id = tape.backward(total)
        except TapeError as exc:
            last = float(loss_hist[epoch - 1]) if epoch > 0 else float("nan")
            raise TrainingAborted(
                epoch, f"{exc} (last finite loss {last:g})", snapshot(epoch)) from exc

        grads = {f"W{l}": grads_by_id[refs.weights[l]] for l in range(mlp.n_layers)}
        grads.update({f"b{l}": grads_by_id[refs.biases[l]] for l in range(mlp.n_layers)})
        grads["d_param"] = grads_by_id[phys_refs.d_param]
        if epoch < config.freeze_d_epochs:
            # Adam normalizes per parameter, so even a tiny residual weight
            # would move D at full schedule speed while the surrogate is
            # still settling; hold D until the network describes the data.
            grads["d_param"] = np.zeros_like(params["d_param"])
        if config.scalar_velocity:
            grads["v"] = grads_by_id[phys_refs.velocity[0]]
        else:
            grads["v"] = np.array([float(grads_by_id[i]) for i in phys_refs.velocity])

        lr_hist[epoch] = lr
        loss_hist[epoch] = float(tape.value(total))
        ade_hist[epoch] = float(tape.value(l_ade))
        data_hist[epoch] = float(tape.value(l_data))
        d_hat = math.exp(float(params["d_param"])) if config.log_parameterized_d \
            else float(params["d_param"])
        v_hat = np.full(d, float(params["v"])) if config.scalar_velocity else params["v"]
        d_phys, v_phys = redimensionalize(d_hat, v_hat, batch.scale)
        d_hist[epoch] = d_phys
        v_hist[epoch] = v_phys

        adam_step(state, params, grads, lr, config, decay_keys)
        if not all(np.all(np.isfinite(p)) for p in params.values()):
            raise TrainingAborted(
                epoch, f"non-finite parameters after update (loss {loss_hist[epoch]:g})",
                snapshot(epoch + 1))
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            print(f"epoch {epoch:6d}  lr {lr:.5f}  loss {loss_hist[epoch]:.6e}  "
                  f"D {d_phys:.4e}  |v| {np.linalg.norm(v_phys):.4e}")

    return snapshot(config.epochs)


def predict(params: MlpParams, scale: ScaleRecord, times_s, grid: Grid,
            chunk: int = 65536) -> np.ndarray:
    """Evaluate the surrogate on every grid node at the given physical times.

    Returns scaled (normalized) concentrations with shape (len(times), *grid.dims).
    """
    times = np.atleast_1d(np.asarray(times_s, dtype=np.float64))
    pts = grid.points() / scale.X_s_mm
    n = pts.shape[0]
    out = np.empty((times.size,) + grid.dims)
    for k, t in enumerate(times):
        t_hat = (t - scale.t0_s) / scale.T_s_s
        vals = np.empty(n)
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            block = np.column_stack([pts[lo:hi], np.full(hi - lo, t_hat)])
            vals[lo:hi] = network.forward(params, block)[:, 0]
        out[k] = vals.reshape(grid.dims)
    return out


def mse(a, b, roi: np.ndarray | None = None) -> float:
    """Mean squared difference, optionally restricted to a boolean mask."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    if roi is None:
        return float(np.mean((a - b) ** 2))
    roi = np.asarray(roi, dtype=bool)
    if roi.shape != a.shape:
        raise ConfigError(f"roi mask has shape {roi.shape}, operands {a.shape}")
    if not roi.any():
        raise ConfigError("roi mask is empty")
    return float(np.mean((a[roi] - b[roi]) ** 2))
