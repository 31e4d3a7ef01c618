"""Classical molecular dynamics reference and Green's-function estimators.

Trajectories are thermalized with a BAOAB Langevin integrator and then
propagated with plain velocity Verlet (NVE), because the Green's function
is an equilibrium NVE correlation:

    D(k, w) = 1/kT int_0^inf dt e^{iwt} <du(k,t)/dt u(-k,0)>

Every trajectory draws all of its random numbers from its own Philox stream
spawned from the master seed, in fixed-size chunks, so results do not depend
on batch size or on how batches are scheduled.
"""

import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.signal import czt

from .errors import ConfigurationError, IncommensurateError

try:
    from . import _kernels
except ImportError:  # pragma: no cover - numba missing
    _kernels = None
from .lattice import MatrixGF
from .model import (
    chain_forces,
    chain_potential,
    effective_couplings,
    matter_forces,
    matter_potential,
)
from .stencil import stencil_band

log = logging.getLogger(__name__)

STABILITY_LIMIT = 0.1
DRIFT_WARNING = 1e-4
_NOISE_CHUNK = 1024


@dataclass(frozen=True)
class MdOptions:
    """Integration, sampling and estimator controls (atomic units)."""

    dt: float = 4.0
    n_equil_steps: int = 8192
    n_prod_steps: int = 2**15
    n_trajectories: int = 100
    friction: float = 1e-3
    seed: int = 20240901
    stride: int = 2
    window: str = "exponential"
    tau_damp: float = None  # None: 1/delta of the target broadening
    max_lag: int = None  # in records; None: half the record length
    batch_size: int = 8
    threads: int = 1
    n_blocks: int = 10

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive", key="dt")
        if self.n_trajectories < 1:
            raise ConfigurationError("need at least one trajectory", key="n_trajectories")
        if self.stride < 1 or self.n_prod_steps < 2 * self.stride:
            raise ConfigurationError("production too short for the record stride", key="stride")
        if self.window not in ("exponential", "hann", "none"):
            raise ConfigurationError(f"unknown window {self.window!r}", key="window")
        if self.friction <= 0:
            raise ConfigurationError("friction must be positive", key="friction")

    @property
    def n_records(self):
        return self.n_prod_steps // self.stride

    @property
    def record_dt(self):
        return self.dt * self.stride


# --------------------------------------------------------------------- systems


class MatterChainSystem:
    """Isolated anharmonic matter chain; one coordinate per cell."""

    name = "matter-chain"
    n_coords = 1

    def __init__(self, params):
        self.params = params
        self.n_cells = params.n_sites
        self.n_dof = params.n_sites
        self.d_se = effective_couplings(params)["d_se"]

    def forces(self, q):
        return matter_forces(self.params, q) - 2.0 * self.d_se * q

    def potential(self, q):
        return matter_potential(self.params, q) + self.d_se * np.sum(q**2, axis=-1)

    def max_frequency(self):
        p = self.params
        return np.sqrt(p.omega_m**2 + 4.0 * p.Omega_m**2 + 2.0 * self.d_se)

    def stiffness(self):
        p = self.params
        return np.full(self.n_dof, p.omega_m**2 + 2.0 * p.Omega_m**2 + 2.0 * self.d_se)

    def observed(self, q):
        return q[..., :, None]

    def kernel(self):
        p = self.params
        args = (p.omega_m**2 + 2.0 * self.d_se, p.g, p.Omega_m**2)
        return _kernels.chain_baoab, _kernels.chain_nve, args, self.n_cells


class CoupledChainSystem:
    """Full cavity + matter lattice. Stiff: the photon zone edge is ~2c/a."""

    name = "coupled-chain"
    n_coords = 2

    def __init__(self, params):
        if params.matter_only:
            raise ConfigurationError("coupled-chain MD needs a coupled model")
        self.params = params
        self.n_cells = params.n_sites
        self.n_dof = 2 * params.n_sites

    def _split(self, q):
        n = self.n_cells
        return q[..., :n], q[..., n:]

    def forces(self, q):
        fx, fr = chain_forces(self.params, *self._split(q))
        return np.concatenate([fx, fr], axis=-1)

    def potential(self, q):
        return chain_potential(self.params, *self._split(q))

    def max_frequency(self):
        p = self.params
        c = effective_couplings(p)
        photon = p.omega_0**2 + (p.c / p.a) ** 2 * stencil_band(p.stencil_order, np.pi)
        matter = p.omega_m**2 + 4.0 * p.Omega_m**2 + 2.0 * c["d_se"]
        # Gershgorin bound on the 2x2 Bloch matrix
        return float(np.sqrt(max(photon, matter) + c["G_lm"]))

    def stiffness(self):
        p = self.params
        c = effective_couplings(p)
        photon = p.omega_0**2 + 2.0 * (p.c / p.a) ** 2
        matter = p.omega_m**2 + 2.0 * p.Omega_m**2 + 2.0 * c["d_se"]
        return np.concatenate([np.full(self.n_cells, photon), np.full(self.n_cells, matter)])

    def observed(self, q):
        x, r = self._split(q)
        return np.stack([x, r], axis=-1)


class ImpurityBathSystem:
    """One anharmonic coordinate bilinearly coupled to harmonic bath modes.

    ``V = 1/2 w_loc^2 r^2 + 1/2 g r^4 + sum_b [1/2 w_b^2 y_b^2 + c_b y_b r]``
    """

    name = "impurity-bath"
    n_cells = 1
    n_coords = 1

    def __init__(self, onsite, g, bath_frequencies, bath_couplings):
        self.onsite = float(onsite)
        self.g = float(g)
        self.wb = np.asarray(bath_frequencies, dtype=float)
        self.cb = np.asarray(bath_couplings, dtype=float)
        self.n_dof = 1 + len(self.wb)

    def forces(self, q):
        r = q[..., :1]
        y = q[..., 1:]
        f = np.empty_like(q)
        f[..., :1] = -(self.onsite * r + 2.0 * self.g * r**3) - (y @ self.cb)[..., None]
        f[..., 1:] = -(self.wb**2) * y - self.cb * r
        return f

    def potential(self, q):
        r = q[..., 0]
        y = q[..., 1:]
        return (
            0.5 * self.onsite * r**2
            + 0.5 * self.g * r**4
            + 0.5 * np.sum(self.wb**2 * y**2, axis=-1)
            + r * (y @ self.cb)
        )

    def max_frequency(self):
        top = self.wb.max() if len(self.wb) else 0.0
        return float(max(np.sqrt(self.onsite), top))

    def stiffness(self):
        return np.concatenate([[self.onsite], self.wb**2])

    def initial_positions(self, z, kT):
        """Map standard normals ``z`` to the harmonic Gibbs distribution.

        Uses the full coupled force-constant matrix, so bath modes start
        correlated with the impurity as in equilibrium.
        """
        k = np.diag(self.stiffness())
        k[0, 1:] = k[1:, 0] = self.cb
        chol = np.linalg.cholesky(k)  # K = L L^T, cov = kT K^-1
        return np.sqrt(kT) * solve_triangular(chol, z.T, lower=True, trans="T").T

    def observed(self, q):
        return q[..., :1, None]

    def kernel(self):
        args = (self.onsite, self.g, np.ascontiguousarray(self.wb**2), np.ascontiguousarray(self.cb))
        return _kernels.impurity_baoab, _kernels.impurity_nve, args, 1


def make_system(params, kind="matter-chain"):
    if kind == "matter-chain":
        return MatterChainSystem(params)
    if kind == "coupled-chain":
        return CoupledChainSystem(params)
    raise ConfigurationError(f"unknown MD system {kind!r}")


# ---------------------------------------------------------------- integration


@dataclass
class Trajectory:
    """Recorded observed coordinates of one trajectory.

    ``u`` and ``v`` have shape ``(n_records, n_cells, n_coords)``.
    """

    index: int
    dt: float
    stride: int
    u: np.ndarray
    v: np.ndarray
    energy_drift: float
    drift_warning: bool

    @property
    def times(self):
        return np.arange(self.u.shape[0]) * self.dt * self.stride


def trajectory_streams(seed, n):
    """Independent counter-based generators, one per trajectory."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def check_stability(system, opts):
    w_max = system.max_frequency()
    if opts.dt * w_max > STABILITY_LIMIT:
        raise ConfigurationError(
            f"dt={opts.dt:.4g} too large: dt*Omega_max={opts.dt * w_max:.3g} > "
            f"{STABILITY_LIMIT} (Omega_max={w_max:.5g} a.u.)",
            key="dt",
        )
    return w_max


def _energy(system, q, v):
    return 0.5 * np.sum(v**2, axis=-1) + system.potential(q)


def use_compiled():
    """Whether the compiled kernels are in use (numba present, not disabled)."""
    return _kernels is not None and not os.environ.get("VIBPOL_NO_JIT")


def _compiled(system):
    if not use_compiled() or not hasattr(system, "kernel"):
        return None
    return system.kernel()


def _initial_positions(system, gens, kT):
    z = np.stack([g.standard_normal(system.n_dof) for g in gens])
    if hasattr(system, "initial_positions"):
        return system.initial_positions(z, kT)
    return z * np.sqrt(kT / system.stiffness())


def _run_batch_compiled(system, kernel, kT, opts, indices, gens):
    baoab, nve, args, n_obs = kernel
    m, n, dt = len(indices), system.n_dof, opts.dt
    q = _initial_positions(system, gens, kT)
    v = np.stack([g.standard_normal(n) for g in gens]) * np.sqrt(kT)
    f = np.ascontiguousarray(system.forces(q))
    c1 = np.exp(-opts.friction * dt)
    c2 = np.sqrt((1.0 - c1 * c1) * kT)
    done = 0
    while done < opts.n_equil_steps:
        length = min(_NOISE_CHUNK, opts.n_equil_steps - done)
        noise = np.stack([g.standard_normal((length, n)) for g in gens], axis=1)
        noise *= c2
        baoab(q, v, f, *args, dt, c1, noise)
        done += length
    nrec = opts.n_records
    n_steps = nrec * opts.stride
    e_every = max(1, min(8, n_steps // 512))
    u_rec = np.empty((nrec, m, n_obs))
    v_rec = np.empty((nrec, m, n_obs))
    energies = np.empty(((n_steps + e_every - 1) // e_every, m))
    nve(q, v, f, *args, dt, n_steps, opts.stride, e_every, u_rec, v_rec, energies)
    obs_shape = system.observed(q).shape[1:]
    return (
        u_rec.reshape((nrec, m) + obs_shape),
        v_rec.reshape((nrec, m) + obs_shape),
        energies,
        e_every,
        n_steps,
    )


def _run_batch(system, kT, opts, indices, gens):
    kernel = _compiled(system)
    if kernel is not None:
        u_rec, v_rec, energies, e_every, n_steps = _run_batch_compiled(
            system, kernel, kT, opts, indices, gens
        )
        return _finish_batch(u_rec, v_rec, energies, e_every, n_steps, opts, indices)
    m = len(indices)
    n = system.n_dof
    dt = opts.dt
    q = _initial_positions(system, gens, kT)
    v = np.stack([g.standard_normal(n) for g in gens]) * np.sqrt(kT)
    f = system.forces(q)

    # BAOAB thermalization
    c1 = np.exp(-opts.friction * dt)
    c2 = np.sqrt((1.0 - c1 * c1) * kT)
    half, hdt = 0.5 * dt, 0.5 * dt
    done = 0
    while done < opts.n_equil_steps:
        length = min(_NOISE_CHUNK, opts.n_equil_steps - done)
        noise = np.stack([g.standard_normal((length, n)) for g in gens], axis=1)
        noise *= c2
        for i in range(length):
            v += half * f
            q += hdt * v
            v *= c1
            v += noise[i]
            q += hdt * v
            f = system.forces(q)
            v += half * f
        done += length

    nrec = opts.n_records
    obs_shape = system.observed(q).shape[1:]
    u_rec = np.empty((nrec, m) + obs_shape)
    v_rec = np.empty((nrec, m) + obs_shape)
    n_steps = nrec * opts.stride
    e_every = max(1, min(8, n_steps // 512))
    energies = []
    for i in range(n_steps):
        if i % opts.stride == 0:
            j = i // opts.stride
            u_rec[j] = system.observed(q)
            v_rec[j] = system.observed(v)
        if i % e_every == 0:
            energies.append(_energy(system, q, v))
        v += half * f
        q += dt * v
        f = system.forces(q)
        v += half * f
    return _finish_batch(u_rec, v_rec, np.array(energies), e_every, n_steps, opts, indices)


def _finish_batch(u_rec, v_rec, energies, e_every, n_steps, opts, indices):
    # secular drift from a least-squares linear trend over the production run;
    # the bounded O(dt^2) shadow-energy oscillation of Verlet averages out
    steps = np.arange(len(energies)) * e_every
    slope = np.polyfit(steps, energies, 1)[0]
    drift = np.abs(slope) * n_steps / np.abs(energies.mean(axis=0))

    out = []
    for b, idx in enumerate(indices):
        warn = bool(drift[b] > DRIFT_WARNING)
        if warn:
            log.warning("trajectory %d: relative energy drift %.2e", idx, drift[b])
        out.append(
            Trajectory(
                index=idx,
                dt=opts.dt,
                stride=opts.stride,
                u=np.ascontiguousarray(u_rec[:, b]),
                v=np.ascontiguousarray(v_rec[:, b]),
                energy_drift=float(drift[b]),
                drift_warning=warn,
            )
        )
    return out


def run_trajectories(params, system, opts):
    """Thermalize and propagate ``opts.n_trajectories`` independent trajectories.

    ``system`` is a system object or one of ``"matter-chain"`` /
    ``"coupled-chain"``. Yields :class:`Trajectory` objects in index order;
    batches of ``opts.batch_size`` are integrated together (vectorized) and
    optionally spread over ``opts.threads`` worker threads.
    """
    if isinstance(system, str):
        system = make_system(params, system)
    check_stability(system, opts)
    kT = params.kT
    gens = trajectory_streams(opts.seed, opts.n_trajectories)
    batches = [
        list(range(s, min(s + opts.batch_size, opts.n_trajectories)))
        for s in range(0, opts.n_trajectories, opts.batch_size)
    ]

    def work(idx):
        return _run_batch(system, kT, opts, idx, [gens[i] for i in idx])

    threads = int(os.environ.get("VIBPOL_THREADS", opts.threads))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            # bounded look-ahead keeps memory to ~threads batches
            pending = []
            for idx in batches:
                pending.append(pool.submit(work, idx))
                if len(pending) >= threads:
                    yield from pending.pop(0).result()
            for fut in pending:
                yield from fut.result()
    else:
        for idx in batches:
            yield from work(idx)


# ------------------------------------------------------------------ estimator


@dataclass
class CorrelationEstimate:
    """Trajectory-averaged ``<du_a(k,t)/dt u_b(-k,0)>``."""

    times: np.ndarray
    k: np.ndarray
    values: np.ndarray  # (n_lag, nk, nc, nc)
    stderr: np.ndarray
    n_trajectories: int
    meta: dict = field(default_factory=dict)


def _window(opts, times, delta):
    if opts.window == "none":
        return np.ones_like(times)
    if opts.window == "hann":
        return 0.5 * (1.0 + np.cos(np.pi * times / times[-1]))
    tau = opts.tau_damp if opts.tau_damp is not None else 1.0 / delta
    return np.exp(-times / tau)


def one_sided_transform(series, dt, omega):
    """``dt * sum_n' series[n] exp(i omega t_n)`` along axis 0 (trapezoid at t=0).

    Uses a chirp-z transform for uniform ``omega`` grids.
    """
    series = np.array(series, dtype=complex)
    series[0] *= 0.5
    omega = np.asarray(omega, dtype=float)
    n_w = len(omega)
    if n_w > 1:
        step = omega[1] - omega[0]
        uniform = np.allclose(np.diff(omega), step, rtol=1e-9, atol=0)
    else:
        step, uniform = 0.0, True
    if uniform:
        a = np.exp(-1j * omega[0] * dt)
        w = np.exp(1j * step * dt)
        out = czt(series, m=n_w, w=w, a=a, axis=0)
    else:
        t = np.arange(series.shape[0]) * dt
        out = np.tensordot(np.exp(1j * np.outer(omega, t)), series, axes=(1, 0))
    return dt * out


def _commensurate_indices(k, n_cells, a):
    m = np.asarray(k, dtype=float) * n_cells * a / (2.0 * np.pi)
    mi = np.rint(m)
    if np.any(np.abs(m - mi) > 1e-6):
        allowed = 2.0 * np.pi * np.arange(-(n_cells // 2) + 1, n_cells // 2 + 1) / (n_cells * a)
        raise IncommensurateError(
            f"k-points {np.asarray(k)[np.abs(m - mi) > 1e-6]} are not commensurate with "
            f"{n_cells} cells; allowed k = 2 pi m/(N a): {np.array2string(allowed, precision=5)}"
        )
    return mi.astype(int) % n_cells


def estimate_gf(trajectories, params, kpoints, omega, opts, delta):
    """Green's function ``D(k, omega + i delta)`` from MD trajectories.

    Site displacements are Fourier transformed to ``u(k,t)``; correlations are
    averaged over all time origins with the time-reversal-symmetrized estimator
    ``(<du(t) u*(0)> - <u(t) du*(0)>)/2``, windowed (exponential window with
    ``tau = 1/delta`` reproduces a Lorentzian broadening ``delta``) and
    transformed one-sidedly. Standard errors come from ``opts.n_blocks``
    blocks of trajectories.

    Returns ``(MatrixGF, CorrelationEstimate)``.
    """
    kpoints = np.atleast_1d(np.asarray(kpoints, dtype=float))
    omega = np.asarray(omega, dtype=float)
    kT = params.kT
    nrec = opts.n_records
    n_lag = opts.max_lag or nrec // 2
    if n_lag > nrec:
        raise ConfigurationError("max_lag exceeds the record length", key="max_lag")
    nfft = 1 << int(np.ceil(np.log2(2 * nrec)))
    norm = (nrec - np.arange(n_lag))[:, None, None, None]

    n_blocks = max(1, min(opts.n_blocks, opts.n_trajectories))
    block_sum = None
    block_count = np.zeros(n_blocks)
    kidx = None
    n_traj = 0
    drifts = []
    for traj in trajectories:
        n_cells = traj.u.shape[1]
        if kidx is None:
            kidx = _commensurate_indices(kpoints, n_cells, params.a)
        uk = np.fft.fft(traj.u, axis=1)[:, kidx] / np.sqrt(n_cells)  # (t, nk, nc)
        vk = np.fft.fft(traj.v, axis=1)[:, kidx] / np.sqrt(n_cells)
        fu = np.fft.fft(uk, n=nfft, axis=0)
        fv = np.fft.fft(vk, n=nfft, axis=0)
        cross = fv[..., :, None] * fu[..., None, :].conj() - fu[..., :, None] * fv[..., None, :].conj()
        corr = 0.5 * np.fft.ifft(cross, axis=0)[:n_lag] / norm
        b = traj.index * n_blocks // opts.n_trajectories
        if block_sum is None:
            block_sum = np.zeros((n_blocks,) + corr.shape, dtype=complex)
        block_sum[b] += corr
        block_count[b] += 1
        n_traj += 1
        drifts.append(traj.energy_drift)
    if n_traj == 0:
        raise ConfigurationError("no trajectories supplied")

    used = block_count > 0
    block_mean = block_sum[used] / block_count[used][:, None, None, None, None]
    mean_corr = block_sum[used].sum(axis=0) / n_traj
    dt_rec = opts.record_dt
    times = np.arange(n_lag) * dt_rec
    win = _window(opts, times, delta)[:, None, None, None]

    spec = one_sided_transform(mean_corr * win, dt_rec, omega) / kT  # (nw, nk, nc, nc)
    nb = block_mean.shape[0]
    if nb > 1:
        blocks = np.stack([one_sided_transform(c * win, dt_rec, omega) / kT for c in block_mean])
        err = (blocks.real.std(axis=0, ddof=1) + 1j * blocks.imag.std(axis=0, ddof=1)) / np.sqrt(nb)
        c_err = (
            block_mean.real.std(axis=0, ddof=1) + 1j * block_mean.imag.std(axis=0, ddof=1)
        ) / np.sqrt(nb)
    else:
        err = np.full(spec.shape, np.nan + 1j * np.nan)
        c_err = np.full(mean_corr.shape, np.nan + 1j * np.nan)

    meta = {
        "estimator": "md",
        "n_trajectories": n_traj,
        "n_blocks": int(nb),
        "window": opts.window,
        "tau_damp": opts.tau_damp if opts.tau_damp is not None else 1.0 / delta,
        "n_lag": n_lag,
        "record_dt": dt_rec,
        "max_energy_drift": float(np.max(drifts)),
        "stderr": np.moveaxis(err, 0, 1),
    }
    gf = MatrixGF(
        k=kpoints, omega=omega, values=np.moveaxis(spec, 0, 1), delta=delta, basis="site", meta=meta
    )
    est = CorrelationEstimate(
        times=times, k=kpoints, values=mean_corr, stderr=c_err, n_trajectories=n_traj
    )
    return gf, est


# -------------------------------------------------------------------- dumping

DUMP_MAGIC = b"VIBPTRJ\0"
DUMP_VERSION = 1
_HEADER = struct.Struct("<8sIdIQQQQ")


def write_trajectory_dump(path, trajectories):
    """Binary dump: header then per trajectory ``u`` and ``v`` as ``<f8``.

    Header (little endian): magic[8], version u32, dt f64, stride u32,
    n_cells u64, n_coords u64, n_trajectories u64, n_records u64.
    """
    trajs = list(trajectories)
    if not trajs:
        raise ConfigurationError("nothing to dump")
    t0 = trajs[0]
    nrec, n_cells, n_coords = t0.u.shape
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(DUMP_MAGIC, DUMP_VERSION, t0.dt, t0.stride, n_cells, n_coords, len(trajs), nrec)
        )
        for t in trajs:
            fh.write(np.ascontiguousarray(t.u, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(t.v, dtype="<f8").tobytes())


def read_trajectory_dump(path):
    with open(path, "rb") as fh:
        magic, version, dt, stride, n_cells, n_coords, n_traj, nrec = _HEADER.unpack(
            fh.read(_HEADER.size)
        )
        if magic != DUMP_MAGIC or version != DUMP_VERSION:
            raise ConfigurationError(f"{path}: not a trajectory dump (version {version})")
        shape = (nrec, n_cells, n_coords)
        size = nrec * n_cells * n_coords
        out = []
        for i in range(n_traj):
            u = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            v = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            out.append(Trajectory(i, dt, stride, u, v, float("nan"), False))
    return out
