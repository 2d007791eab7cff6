"""Synthetic periodic PDE data on ``[0, 2*pi)^2``.

Two problems are provided:

``heat``
    ``u_t = nu * lap(u)``, advanced exactly in Fourier space. Inputs are
    smooth Gaussian random fields.
``ns-vorticity``
    incompressible 2D Navier-Stokes in vorticity form,
    ``w_t + u . grad(w) = nu * lap(w) + f``, pseudo-spectral with 2/3-rule
    dealiasing and classical RK4. Initial conditions are a handful of
    sinusoidal velocity modes with amplitude ``v_bar / |k|**2``, projected to
    be divergence free.

Grid axis 0 is ``x``, axis 1 is ``y``; ``field[i, j] = f(2*pi*i/S, 2*pi*j/S)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np

from . import spectral
from .errors import ConfigurationError, DataError

PROBLEMS = ("heat", "ns-vorticity")
CFL_TARGET = 0.25
CFL_LIMIT = 0.5


class CflWarning(UserWarning):
    pass


@dataclass
class PdeDatasetMeta:
    problem: str
    grid_size: int
    samples: int
    seed: int = 0
    channels: int = 1
    viscosity: float | None = None
    dt: float | None = None
    trajectory_length: int = 10
    v_bar: float = 1.0
    n_modes: int = 4
    k_max: int = 4
    spinup: int = 0
    solver_substeps: int = 1

    def __post_init__(self):
        if self.problem == "ns":
            self.problem = "ns-vorticity"
        if self.problem not in PROBLEMS:
            raise ConfigurationError(f"unknown problem {self.problem!r}; choose from {PROBLEMS}")
        defaults = {"heat": (1e-2, 1.0), "ns-vorticity": (1e-3, 0.25)}[self.problem]
        if self.viscosity is None:
            self.viscosity = defaults[0]
        if self.dt is None:
            self.dt = defaults[1]
        self.validate()

    def validate(self) -> None:
        spectral.check_grid_size(self.grid_size)
        if not (self.viscosity > 0 and self.dt > 0):
            raise ConfigurationError("viscosity and dt must be positive")
        if self.samples < 1 or self.trajectory_length < 1:
            raise ConfigurationError("samples and trajectory_length must be positive")
        if self.channels != 1:
            raise ConfigurationError("only single-channel problems are provided")
        if self.solver_substeps < 1 or self.spinup < 0:
            raise ConfigurationError("solver_substeps must be >= 1 and spinup >= 0")

    @property
    def n_trajectories(self) -> int:
        return -(-self.samples // self.trajectory_length)

    @property
    def solver_dt(self) -> float:
        return self.dt / self.solver_substeps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["solver_dt"] = self.solver_dt
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PdeDatasetMeta":
        d = {k: v for k, v in d.items() if k != "solver_dt"}
        return cls(**d)


@dataclass
class FieldSample:
    input: np.ndarray
    target: np.ndarray


@dataclass
class PdeDataset:
    meta: PdeDatasetMeta
    inputs: np.ndarray  # (n, C, S, S)
    targets: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, i: int) -> FieldSample:
        return FieldSample(self.inputs[i], self.targets[i])

    def trajectory_ids(self) -> np.ndarray:
        return np.arange(len(self)) // self.meta.trajectory_length

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        """Train / validation sample indices, 90/10 by whole trajectories."""
        n_traj = self.meta.n_trajectories
        n_val = 0 if n_traj < 2 else max(1, round(0.1 * n_traj))
        traj = self.trajectory_ids()
        val = traj >= n_traj - n_val
        return np.flatnonzero(~val), np.flatnonzero(val)

    def subset(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[idx], self.targets[idx]


# --- operators ---------------------------------------------------------------


@lru_cache(maxsize=16)
def _operators(S: int):
    kx, ky = spectral.wavenumbers(S)
    kx = np.broadcast_to(kx, (S, S // 2 + 1)).copy()
    ky = np.broadcast_to(ky, (S, S // 2 + 1)).copy()
    k2 = kx**2 + ky**2
    inv_k2 = np.zeros_like(k2)
    inv_k2[k2 > 0] = 1.0 / k2[k2 > 0]
    dealias = (np.abs(kx) < S / 3) & (np.abs(ky) < S / 3)
    for a in (kx, ky, k2, inv_k2, dealias):
        a.setflags(write=False)
    return kx, ky, k2, inv_k2, dealias


def grid(S: int) -> tuple[np.ndarray, np.ndarray]:
    x = 2 * np.pi * np.arange(S) / S
    return np.meshgrid(x, x, indexing="ij")


def heat_step_analytic(field: np.ndarray, nu: float, dt: float) -> np.ndarray:
    """Exact heat-equation propagator: each mode times ``exp(-nu |k|^2 dt)``."""
    field = np.asarray(field, dtype=np.float64)
    S = spectral.check_grid_size(field.shape[-1])
    _, _, k2, _, _ = _operators(S)
    return spectral.irfft2(spectral.rfft2(field) * np.exp(-nu * k2 * dt), S)


def velocity_from_vorticity(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    S = w.shape[-1]
    kx, ky, _, inv_k2, _ = _operators(S)
    psi = spectral.rfft2(w) * inv_k2
    return spectral.irfft2(1j * ky * psi, S), spectral.irfft2(-1j * kx * psi, S)


def divergence(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    S = u.shape[-1]
    kx, ky, _, _, _ = _operators(S)
    return spectral.irfft2(1j * kx * spectral.rfft2(u) + 1j * ky * spectral.rfft2(v), S)


def vorticity(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    S = u.shape[-1]
    kx, ky, _, _, _ = _operators(S)
    return spectral.irfft2(1j * kx * spectral.rfft2(v) - 1j * ky * spectral.rfft2(u), S)


def kinetic_energy(w: np.ndarray) -> float:
    u, v = velocity_from_vorticity(w)
    return 0.5 * float(np.mean(u * u + v * v))


def enstrophy(w: np.ndarray) -> float:
    return 0.5 * float(np.mean(w * w))


def _ns_rhs(wh: np.ndarray, nu: float, fh, S: int) -> np.ndarray:
    kx, ky, k2, inv_k2, dealias = _operators(S)
    wd = wh * dealias
    psi = wd * inv_k2
    u = spectral.irfft2(1j * ky * psi, S)
    v = spectral.irfft2(-1j * kx * psi, S)
    wx = spectral.irfft2(1j * kx * wd, S)
    wy = spectral.irfft2(1j * ky * wd, S)
    rhs = -spectral.rfft2(u * wx + v * wy) * dealias - nu * k2 * wh
    if fh is not None:
        rhs = rhs + fh
    return rhs


def _rk4(wh, nu, dt, fh, S):
    k1 = _ns_rhs(wh, nu, fh, S)
    k2 = _ns_rhs(wh + 0.5 * dt * k1, nu, fh, S)
    k3 = _ns_rhs(wh + 0.5 * dt * k2, nu, fh, S)
    k4 = _ns_rhs(wh + dt * k3, nu, fh, S)
    return wh + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def cfl_number(w: np.ndarray, dt: float) -> float:
    u, v = velocity_from_vorticity(w)
    h = 2 * np.pi / w.shape[-1]
    return float(np.max(np.sqrt(u * u + v * v))) * dt / h


def ns_vorticity_step(w: np.ndarray, nu: float, dt: float, forcing: np.ndarray | None = None,
                      steps: int = 1) -> np.ndarray:
    """Advance vorticity by ``steps`` RK4 steps of size ``dt``.

    The mean vorticity (and forcing mean) is removed so the stream function is
    well defined. Warns with :class:`CflWarning` when the initial CFL number
    exceeds 0.5.
    """
    w = np.asarray(w, dtype=np.float64)
    S = spectral.check_grid_size(w.shape[-1])
    if not np.all(np.isfinite(w)):
        raise DataError("vorticity contains NaN or infinite values")
    cfl = cfl_number(w, dt)
    if cfl > CFL_LIMIT:
        warnings.warn(f"CFL number {cfl:.3f} exceeds {CFL_LIMIT}", CflWarning, stacklevel=2)
    wh = spectral.rfft2(w)
    wh[..., 0, 0] = 0.0
    fh = None
    if forcing is not None:
        fh = spectral.rfft2(np.asarray(forcing, dtype=np.float64))
        fh[..., 0, 0] = 0.0
    for _ in range(steps):
        wh = _rk4(wh, nu, dt, fh, S)
    return spectral.irfft2(wh, S)


# --- initial conditions ------------------------------------------------------


@dataclass
class TurbulentField:
    u: np.ndarray
    v: np.ndarray
    vorticity: np.ndarray
    wavevectors: np.ndarray
    amplitudes: np.ndarray


def sample_wavevectors(rng: np.random.Generator, n: int, k_max: int) -> np.ndarray:
    out = []
    while len(out) < n:
        k = rng.integers(-k_max, k_max + 1, size=2)
        if k.any():
            out.append(k)
    return np.array(out, dtype=np.int64)


def helmholtz_project(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Remove the compressible (curl-free) part of a periodic velocity field."""
    S = u.shape[-1]
    kx, ky, _, inv_k2, _ = _operators(S)
    uh, vh = spectral.rfft2(u), spectral.rfft2(v)
    kdotu = (kx * uh + ky * vh) * inv_k2
    return spectral.irfft2(uh - kx * kdotu, S), spectral.irfft2(vh - ky * kdotu, S)


def turbulent_init(S: int, n_modes: int = 4, v_bar: float = 1.0, seed: int = 0,
                   k_max: int = 4, wavevectors=None, d: int = 2) -> TurbulentField:
    """Sum of ``n_modes`` sinusoidal velocity modes, made divergence free.

    Mode ``i`` has wavevector ``k_i``, random phase and a random sign along
    ``k_i``'s perpendicular with amplitude ``v_bar / |k_i|**d``; a random
    compressive component along ``k_i`` is added and then removed by the
    spectral Helmholtz projection. Random draws do not depend on ``S``, so one
    seed gives the same flow at every resolution.
    """
    S = spectral.check_grid_size(S)
    if S < 16:
        raise ConfigurationError(f"turbulent_init needs S >= 16, got {S}")
    rng = np.random.default_rng([seed, 11])
    if wavevectors is None:
        ks = sample_wavevectors(rng, n_modes, k_max)
    else:
        ks = np.atleast_2d(np.asarray(wavevectors, dtype=np.int64))
    if np.abs(ks).max() >= S / 3:
        raise ConfigurationError(f"wavevectors up to {np.abs(ks).max()} are not resolved on S={S}")
    phases = rng.uniform(0.0, 2 * np.pi, size=len(ks))
    signs = rng.choice([-1.0, 1.0], size=len(ks))
    compressive = rng.uniform(-1.0, 1.0, size=len(ks))
    X, Y = grid(S)
    u = np.zeros((S, S))
    v = np.zeros((S, S))
    amps = []
    for k, phi, s, c in zip(ks, phases, signs, compressive):
        kn = math.hypot(*k)
        amp = v_bar / kn**d
        khat = k / kn
        direction = s * np.array([-khat[1], khat[0]]) + c * khat
        wave = np.sin(k[0] * X + k[1] * Y + phi)
        u += amp * direction[0] * wave
        v += amp * direction[1] * wave
        amps.append(amp)
    u, v = helmholtz_project(u, v)
    return TurbulentField(u, v, vorticity(u, v), ks, np.array(amps))


def gaussian_random_field(S: int, rng: np.random.Generator, slope: float = 3.0) -> np.ndarray:
    """Unit-RMS periodic random field with amplitude spectrum ``(1 + |k|^2)^(-slope/2)``."""
    _, _, k2, _, _ = _operators(S)
    noise = spectral.rfft2(rng.standard_normal((S, S)))
    f = spectral.irfft2(noise * (1.0 + k2) ** (-slope / 2), S)
    f -= f.mean()
    return f / np.sqrt(np.mean(f * f))


# --- datasets ----------------------------------------------------------------


def initial_state(meta: PdeDatasetMeta, trajectory: int) -> np.ndarray:
    S = meta.grid_size
    if meta.problem == "heat":
        rng = np.random.default_rng([meta.seed, trajectory, 7])
        return gaussian_random_field(S, rng)
    tf = turbulent_init(S, meta.n_modes, meta.v_bar, seed=meta.seed * 100003 + trajectory, k_max=meta.k_max)
    return tf.vorticity


def advance(field: np.ndarray, meta: PdeDatasetMeta) -> np.ndarray:
    """Advance a state by one sample interval ``meta.dt`` with the generating solver."""
    if meta.problem == "heat":
        return heat_step_analytic(field, meta.viscosity, meta.dt)
    return ns_vorticity_step(field, meta.viscosity, meta.solver_dt, steps=meta.solver_substeps)


def choose_substeps(meta: PdeDatasetMeta, states: list[np.ndarray]) -> int:
    if meta.problem == "heat":
        return 1
    h = 2 * np.pi / meta.grid_size
    umax = 0.0
    for w in states:
        u, v = velocity_from_vorticity(w)
        umax = max(umax, float(np.max(np.sqrt(u * u + v * v))))
    return max(1, math.ceil(meta.dt * umax / (CFL_TARGET * h)))


def generate_dataset(meta: PdeDatasetMeta) -> PdeDataset:
    """Roll trajectories and emit consecutive ``(state_t, state_t+dt)`` pairs.

    For the vorticity problem the solver substep count is picked from the CFL
    condition on the initial states and recorded in the returned metadata.
    """
    meta = replace(meta)
    starts = [initial_state(meta, t) for t in range(meta.n_trajectories)]
    meta.solver_substeps = choose_substeps(meta, starts)
    S = meta.grid_size
    inputs = np.empty((meta.samples, 1, S, S))
    targets = np.empty_like(inputs)
    i = 0
    for state in starts:
        for _ in range(meta.spinup):
            state = advance(state, meta)
        for _ in range(meta.trajectory_length):
            if i == meta.samples:
                break
            nxt = advance(state, meta)
            inputs[i, 0], targets[i, 0] = state, nxt
            state = nxt
            i += 1
    return PdeDataset(meta, inputs, targets)
