"""Compiled integrator kernels for the matter chain and the impurity bath.

Each kernel advances a batch ``q, v, f`` of shape ``(m, n)`` in place, one
trajectory after another, with the same splitting as the vectorized numpy
path in :mod:`vibpol.md`. Langevin noise is drawn outside (per-trajectory
streams) and passed in pre-scaled.
"""

import numba
import numpy as np

_jit = numba.njit(cache=True, fastmath=True, nogil=True)


@_jit
def _chain_force(q, t, n, w2, g, W2, f):
    for j in range(n):
        left = q[t, j - 1] if j > 0 else q[t, n - 1]
        right = q[t, j + 1] if j < n - 1 else q[t, 0]
        x = q[t, j]
        f[t, j] = -(w2 * x + 2.0 * g * x * x * x + W2 * (2.0 * x - left - right))


@_jit
def _chain_energy(q, v, t, n, w2, g, W2):
    e = 0.0
    for j in range(n):
        x = q[t, j]
        bond = x - (q[t, j + 1] if j < n - 1 else q[t, 0])
        e += 0.5 * (v[t, j] * v[t, j] + w2 * x * x + g * x * x * x * x + W2 * bond * bond)
    return e


@_jit
def chain_baoab(q, v, f, w2, g, W2, dt, c1, noise):
    m, n = q.shape
    h = 0.5 * dt
    for t in range(m):
        for i in range(noise.shape[0]):
            for j in range(n):
                vj = v[t, j] + h * f[t, j]
                q[t, j] += h * vj
                vj = c1 * vj + noise[i, t, j]
                q[t, j] += h * vj
                v[t, j] = vj
            _chain_force(q, t, n, w2, g, W2, f)
            for j in range(n):
                v[t, j] += h * f[t, j]


@_jit
def chain_nve(q, v, f, w2, g, W2, dt, n_steps, stride, e_every, u_rec, v_rec, energies):
    m, n = q.shape
    h = 0.5 * dt
    for t in range(m):
        for i in range(n_steps):
            if i % stride == 0:
                r = i // stride
                for j in range(n):
                    u_rec[r, t, j] = q[t, j]
                    v_rec[r, t, j] = v[t, j]
            if i % e_every == 0:
                energies[i // e_every, t] = _chain_energy(q, v, t, n, w2, g, W2)
            for j in range(n):
                v[t, j] += h * f[t, j]
                q[t, j] += dt * v[t, j]
            _chain_force(q, t, n, w2, g, W2, f)
            for j in range(n):
                v[t, j] += h * f[t, j]


@_jit
def _impurity_energy(q, v, t, n, onsite, g, wb2, cb):
    r = q[t, 0]
    e = 0.5 * v[t, 0] * v[t, 0] + 0.5 * onsite * r * r + 0.5 * g * r * r * r * r
    for b in range(1, n):
        y = q[t, b]
        e += 0.5 * v[t, b] * v[t, b] + 0.5 * wb2[b - 1] * y * y + cb[b - 1] * y * r
    return e


@_jit
def _impurity_force(q, t, n, onsite, g, wb2, cb, f):
    r = q[t, 0]
    s = 0.0
    for b in range(1, n):
        y = q[t, b]
        f[t, b] = -wb2[b - 1] * y - cb[b - 1] * r
        s += cb[b - 1] * y
    f[t, 0] = -(onsite * r + 2.0 * g * r * r * r) - s


@_jit
def impurity_baoab(q, v, f, onsite, g, wb2, cb, dt, c1, noise):
    m, n = q.shape
    h = 0.5 * dt
    for t in range(m):
        for i in range(noise.shape[0]):
            for j in range(n):
                vj = v[t, j] + h * f[t, j]
                q[t, j] += h * vj
                vj = c1 * vj + noise[i, t, j]
                q[t, j] += h * vj
                v[t, j] = vj
            _impurity_force(q, t, n, onsite, g, wb2, cb, f)
            for j in range(n):
                v[t, j] += h * f[t, j]


@_jit
def impurity_nve(q, v, f, onsite, g, wb2, cb, dt, n_steps, stride, e_every, u_rec, v_rec, energies):
    m, n = q.shape
    h = 0.5 * dt
    for t in range(m):
        for i in range(n_steps):
            if i % stride == 0:
                u_rec[i // stride, t, 0] = q[t, 0]
                v_rec[i // stride, t, 0] = v[t, 0]
            if i % e_every == 0:
                energies[i // e_every, t] = _impurity_energy(q, v, t, n, onsite, g, wb2, cb)
            for j in range(n):
                v[t, j] += h * f[t, j]
                q[t, j] += dt * v[t, j]
            _impurity_force(q, t, n, onsite, g, wb2, cb, f)
            for j in range(n):
                v[t, j] += h * f[t, j]


def warmup():
    """Compile all kernels on tiny inputs."""
    z = np.zeros((1, 2))
    e = np.zeros((1, 1))
    rec = np.zeros((1, 1, 2))
    noise = np.zeros((1, 1, 2))
    one = np.ones(1)
    chain_baoab(z, z.copy(), z.copy(), 1.0, 0.0, 0.0, 0.1, 1.0, noise)
    chain_nve(z, z.copy(), z.copy(), 1.0, 0.0, 0.0, 0.1, 1, 1, 1, rec, rec.copy(), e)
    impurity_baoab(z, z.copy(), z.copy(), 1.0, 0.0, one, one, 0.1, 1.0, noise)
    impurity_nve(z, z.copy(), z.copy(), 1.0, 0.0, one, one, 0.1, 1, 1, 1, rec, rec.copy(), e)
