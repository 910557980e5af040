"""Reproducible Gaussian increments from a counter-based generator.

Every increment is a pure function of ``(master_seed, experiment, tag,
particle, draw)``: the first and third are hashed into a Philox4x32-10
key, the particle and draw indices form the counter.  No generator state
is carried between calls, so any slice of the noise (one particle over
many draws, or many particles at one draw) can be produced independently
and in any order with bitwise-identical results.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "philox4x32",
    "stream_key",
    "standard_normals",
    "standard_uniforms",
    "NoiseStream",
    "NoiseBank",
    "gaussian_increments",
    "coarsen",
    "BridgedPath",
]

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_TWO_PI = 2.0 * np.pi


def philox4x32(counter, key, rounds=10):
    """Philox4x32 block function on arrays of counters.

    Parameters
    ----------
    counter : sequence of 4 integer arrays
        Counter words ``c0..c3`` (each < 2**32), broadcast together.
    key : sequence of 2 ints
        Key words ``k0, k1``.

    Returns
    -------
    tuple of 4 uint64 arrays holding 32-bit output words.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK32 for c in counter)
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT32) ^ c1 ^ k0,
            p1 & _MASK32,
            (p0 >> _SHIFT32) ^ c3 ^ k1,
            p0 & _MASK32,
        )
    return c0, c1, c2, c3


def stream_key(master_seed, experiment, tag):
    """Two 32-bit key words from a stable hash of the stream identity."""
    if not 0 <= int(master_seed) < 2**64:
        raise ConfigError("master_seed must be a 64-bit unsigned integer")
    text = repr((int(master_seed), experiment, str(tag))).encode()
    digest = hashlib.blake2b(text, digest_size=8).digest()
    word = int.from_bytes(digest, "little")
    return word & 0xFFFFFFFF, word >> 32


def _unit_interval(hi, lo):
    # 53 random bits mapped to (0, 1]
    bits = ((hi << _SHIFT32) | lo) >> np.uint64(11)
    return (bits + np.uint64(1)).astype(np.float64) * (1.0 / 9007199254740992.0)


def standard_normals(key, particles, draws, dim):
    """Standard normal deviates indexed by particle and draw.

    ``particles`` and ``draws`` are integer arrays broadcast to a common
    shape ``S``; the result has shape ``S + (dim,)``.  Each counter block
    yields two deviates through the Box-Muller map.
    """
    p = np.asarray(particles, dtype=np.uint64)
    n = np.asarray(draws, dtype=np.uint64)
    p, n = np.broadcast_arrays(p, n)
    n_lo = n & _MASK32
    n_hi = n >> _SHIFT32
    nb = (dim + 1) // 2
    out = np.empty(p.shape + (2 * nb,))
    for b in range(nb):
        w0, w1, w2, w3 = philox4x32((p, n_lo, n_hi, b), key)
        u1 = _unit_interval(w0, w1)
        u2 = _unit_interval(w2, w3)
        rad = np.sqrt(-2.0 * np.log(u1))
        ang = _TWO_PI * u2
        out[..., 2 * b] = rad * np.cos(ang)
        out[..., 2 * b + 1] = rad * np.sin(ang)
    return out[..., :dim]


def standard_uniforms(key, particles, draws, dim):
    """Uniform deviates on (0, 1] indexed like :func:`standard_normals`.

    Each counter block yields two deviates; the block index is offset so
    uniforms never reuse the words behind the normals of the same key.
    """
    p = np.asarray(particles, dtype=np.uint64)
    n = np.asarray(draws, dtype=np.uint64)
    p, n = np.broadcast_arrays(p, n)
    nb = (dim + 1) // 2
    out = np.empty(p.shape + (2 * nb,))
    for b in range(nb):
        w0, w1, w2, w3 = philox4x32((p, n & _MASK32, n >> _SHIFT32, 0x80000000 + b), key)
        out[..., 2 * b] = _unit_interval(w0, w1)
        out[..., 2 * b + 1] = _unit_interval(w2, w3)
    return out[..., :dim]


@dataclass(frozen=True)
class NoiseStream:
    """Increments of one Brownian motion driving one particle.

    ``stream_id`` is ``(experiment, particle_index, tag)`` with tag ``"W"``
    or ``"B"``.  Draw ``k`` is the increment over ``[k dt, (k+1) dt]``.
    """

    master_seed: int
    stream_id: tuple
    dim: int
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if len(self.stream_id) != 3:
            raise ConfigError("stream_id must be (experiment, particle, tag)")

    @property
    def key(self):
        experiment, _, tag = self.stream_id
        return stream_key(self.master_seed, experiment, tag)

    def increments(self, count, start=0):
        return gaussian_increments(self, count, start)


def gaussian_increments(stream, count, start=0):
    """Rows ``start .. start+count-1`` of the stream, each ``N(0, dt I)``."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    if not stream.dt > 0:
        raise ConfigError("dt must be > 0")
    particle = stream.stream_id[1]
    draws = np.arange(start, start + count, dtype=np.uint64)
    z = standard_normals(stream.key, particle, draws, stream.dim)
    return np.sqrt(stream.dt) * z


class NoiseBank:
    """All particle streams of one experiment and tag, sliced by draw.

    ``increments(draw, first, count)`` returns the increments of particles
    ``first .. first+count-1`` at one draw index and agrees bitwise with
    the per-particle :class:`NoiseStream` view of the same numbers.
    """

    def __init__(self, master_seed, experiment, tag, dim, dt):
        if not dt > 0:
            raise ConfigError("dt must be > 0")
        self.master_seed = int(master_seed)
        self.experiment = experiment
        self.tag = str(tag)
        self.dim = int(dim)
        self.dt = float(dt)
        self.key = stream_key(master_seed, experiment, tag)
        self._scale = np.sqrt(self.dt)

    def stream(self, particle):
        return NoiseStream(self.master_seed, (self.experiment, particle, self.tag),
                           self.dim, self.dt)

    def normals(self, draws, first, count):
        """Standard normals of shape ``(len(draws), count, dim)``."""
        p = np.arange(first, first + count, dtype=np.uint64)
        d = np.asarray(draws, dtype=np.uint64)
        return standard_normals(self.key, p[None, :], d[:, None], self.dim)

    def increments(self, draw, first, count):
        return self._scale * self.normals([draw], first, count)[0]

    def coarse_increments(self, coarse_draw, factor, first, count):
        """Sum of ``factor`` consecutive fine draws, i.e. one draw at step factor*dt."""
        draws = np.arange(coarse_draw * factor, (coarse_draw + 1) * factor)
        fine = self._scale * self.normals(draws, first, count)
        return coarsen(fine, factor)[0]


def _prime_factors(n):
    out, p = [], 2
    while p * p <= n:
        while n % p == 0:
            out.append(p)
            n //= p
        p += 1
    if n > 1:
        out.append(n)
    return out


def coarsen(increments, factor):
    """Sum consecutive groups of ``factor`` rows along the first axis.

    The reduction runs through the prime factors of ``factor`` in ascending
    order, so for power-of-two factors nested coarsenings are bitwise equal
    to a single one.
    """
    x = np.asarray(increments, dtype=float)
    factor = int(factor)
    if factor < 1:
        raise ConfigError("factor must be >= 1")
    if x.shape[0] % factor:
        raise ConfigError(f"factor {factor} does not divide {x.shape[0]} rows")
    for p in _prime_factors(factor):
        x = x.reshape((x.shape[0] // p, p) + x.shape[1:])
        acc = x[:, 0].copy()
        for j in range(1, p):
            acc += x[:, j]
        x = acc
    return x if factor > 1 else x.copy()


class BridgedPath:
    """Brownian paths on a base grid, refined by Brownian bridges.

    Grid increments come from the ``tag`` bank at step ``dt``, so a run on
    an arbitrary increasing time grid shares the path of every fixed-step
    run built on the same bank.  Values strictly inside a grid cell are
    sampled from the bridge between known points, using fresh normals from
    the ``tag + "-bridge"`` stream keyed by the call index.

    Parameters
    ----------
    shape : tuple
        ``(R, N, d)``; system ``r`` particle ``i`` uses stream id
        ``first + r * N + i``.
    """

    def __init__(self, master_seed, experiment, tag, dt, shape, first=0):
        if not dt > 0:
            raise ConfigError("dt must be > 0")
        self.shape = tuple(shape)
        R, N, d = self.shape
        self.dt = float(dt)
        self.grid_key = stream_key(master_seed, experiment, tag)
        self.bridge_key = stream_key(master_seed, experiment, str(tag) + "-bridge")
        self.particles = (first + np.arange(R * N, dtype=np.uint64)).reshape(R, N)
        self.cell = np.zeros(R, dtype=np.int64)
        self.time = np.zeros(R)
        self.pending = self._cell_increment(self.cell)

    def _cell_increment(self, cells):
        d = self.shape[-1]
        z = standard_normals(self.grid_key, self.particles,
                             np.asarray(cells, dtype=np.uint64)[:, None], d)
        return np.sqrt(self.dt) * z

    def increments(self, step_index, t, h):
        """Increments ``W(t + h) - W(t)`` per system; ``t`` must be the current time."""
        h = np.broadcast_to(np.asarray(h, dtype=float), self.cell.shape)
        t_new = self.time + h
        dt = self.dt
        target = np.floor(t_new / dt).astype(np.int64)
        target = np.maximum(target, self.cell)
        R, N, d = self.shape
        z = standard_normals(self.bridge_key, self.particles,
                             np.uint64(step_index), d)
        inc = np.zeros(self.shape)

        same = target == self.cell
        right = (self.cell + 1) * dt
        span = np.where(same, right - self.time, 1.0)
        frac = np.where(same, h / span, 0.0)
        var = np.where(same, np.clip(h * (right - t_new), 0.0, None) / span, 0.0)
        part = frac[:, None, None] * self.pending + np.sqrt(var)[:, None, None] * z
        inc = np.where(same[:, None, None], part, self.pending)
        new_pending = np.where(same[:, None, None], self.pending - part, 0.0)

        moved = ~same
        if moved.any():
            steps = int((target - self.cell)[moved].max())
            for s in range(1, steps + 1):
                cells = self.cell + s
                live = moved & (cells <= target)
                if not live.any():
                    break
                full = self._cell_increment(np.where(live, cells, 0))
                whole = live & (cells < target)
                last = live & (cells == target)
                u = np.clip(t_new - cells * dt, 0.0, dt)
                fr = np.where(last, u / dt, 0.0)
                vr = np.where(last, u * (dt - u) / dt, 0.0)
                piece = fr[:, None, None] * full + np.sqrt(vr)[:, None, None] * z
                inc = inc + np.where(whole[:, None, None], full,
                                     np.where(last[:, None, None], piece, 0.0))
                new_pending = np.where(last[:, None, None], full - piece, new_pending)
        self.pending = new_pending
        self.cell = target
        self.time = t_new
        return inc
