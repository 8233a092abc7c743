"""Seeded Brownian increments and Euler chains shared across the backward solve.

Randomness comes from Philox counter streams keyed by (seed, purpose, time
index); normals are produced by inverse-CDF on the raw 64-bit stream, so the
draw for (t, path, coordinate) sits at a fixed counter offset and any path
segment can be regenerated independently and bit-reproducibly.
"""

import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtri

from .errors import ConfigurationError

__all__ = [
    "SamplePaths",
    "simulate",
    "initial_sampler_point",
    "initial_sampler_uniform",
    "brownian_increments",
    "uniform_subsample",
    "dump_paths",
]

# purpose tags partition the Philox key space
_PURPOSE_INCREMENTS = 0
_PURPOSE_INITIAL = 1
_PURPOSE_SUBSAMPLE = 2

_STATE_FLOOR = 1e-6


def _stream_key(seed, purpose, tag):
    return (int(seed) & (2 ** 64 - 1)) << 64 | (int(purpose) << 48) | (int(tag) & (2 ** 48 - 1))


def _raw_uniforms(seed, purpose, tag, n):
    bg = np.random.Philox(key=_stream_key(seed, purpose, tag))
    raw = bg.random_raw(n)
    return (raw.astype(np.float64) + 0.5) * 2.0 ** -64


def brownian_increments(seed, t_index, n_paths, d, h, first_path=0):
    """Increments dW(t, path, coord) ~ N(0, h) for paths [first_path, first_path+n).

    Each path owns a block-aligned region of the counter stream (Philox
    emits four 64-bit words per counter value), so any path range can be
    generated independently and matches the full-batch draw bit for bit.
    """
    blocks_per_path = (d + 3) // 4
    stride = 4 * blocks_per_path
    key = _stream_key(seed, _PURPOSE_INCREMENTS, t_index)
    bg = np.random.Philox(key=key)
    if first_path:
        bg.advance(first_path * blocks_per_path)
    raw = bg.random_raw(n_paths * stride).reshape(n_paths, stride)[:, :d]
    u = (raw.astype(np.float64) + 0.5) * 2.0 ** -64
    return np.sqrt(h) * ndtri(u)


def uniform_subsample(seed, t_index, n, upper):
    """n i.i.d. uniform indices in [0, upper), seeded independently of path noise."""
    u = _raw_uniforms(seed, _PURPOSE_SUBSAMPLE, t_index, n)
    return np.minimum((u * upper).astype(np.int64), upper - 1)


def initial_sampler_point(x0):
    """All paths start at x0."""
    x0 = np.asarray(x0, dtype=float)

    def sample(seed, n):
        return np.tile(x0, (n, 1))

    sample.descriptor = {"kind": "point", "x0": x0.tolist()}
    return sample


def initial_sampler_uniform(x0, half_width):
    """Paths start i.i.d. uniform on the box x0 +/- half_width (componentwise)."""
    x0 = np.asarray(x0, dtype=float)
    hw = np.broadcast_to(np.asarray(half_width, dtype=float), x0.shape)
    if np.all(hw == 0.0):
        return initial_sampler_point(x0)

    def sample(seed, n):
        u = _raw_uniforms(seed, _PURPOSE_INITIAL, 0, n * x0.shape[0])
        u = u.reshape(n, x0.shape[0])
        return x0 + (2.0 * u - 1.0) * hw

    sample.descriptor = {"kind": "uniform", "x0": x0.tolist(), "half_width": hw.tolist()}
    return sample


@dataclass(frozen=True)
class SamplePaths:
    """Euler chains of all retained generators on one shared noise sample.

    increments[t, path] holds W_{t+h} - W_t; states[mbar][t, path] the chain
    X(t) of retained mode mbar.  All retained modes share the increments and
    the initial draw.  `floored_events` counts coordinates clipped at the
    positivity floor during the Euler recursion.
    """

    seed: int
    h: float
    n_paths: int
    increments: np.ndarray  # (steps, n_paths, d)
    states: dict  # mbar -> (steps + 1, n_paths, d)
    initial_descriptor: dict
    floored_events: int

    @property
    def n_steps(self):
        return self.increments.shape[0]

    @property
    def dim(self):
        return self.increments.shape[2]


def simulate(spec, generator, n_paths, h, seed, initial_sampler,
             floor_states=True, increments=None) -> SamplePaths:
    """Draw the shared noise sample and run the Euler chain per retained mode.

    X(t+h) = X(t) + fbar(X(t)) h + sigbar(X(t)) dW(t); the recursion is
    bit-reproducible given the seed.  With `floor_states`, coordinates are
    clipped at 1e-6 after each step (multiplicative benchmark dynamics
    degenerate at 0) and the clip count is reported on the result.
    `increments` injects a fixed (steps, n_paths, d) noise array (test hook,
    e.g. forcing dW = 0).
    """
    d = spec.dimension
    ratio = spec.horizon / h
    n_steps = int(round(ratio))
    if abs(ratio - n_steps) > 1e-9 or n_steps < 1:
        raise ConfigurationError(f"horizon/h = {ratio} is not a positive integer")
    if n_paths < 1:
        raise ConfigurationError("need at least one path")

    if increments is not None:
        increments = np.array(increments, dtype=float)
        if increments.shape != (n_steps, n_paths, d):
            raise ConfigurationError(
                f"injected increments have shape {increments.shape}, "
                f"want {(n_steps, n_paths, d)}")
    else:
        increments = np.empty((n_steps, n_paths, d))
        for t in range(n_steps):
            increments[t] = brownian_increments(seed, t, n_paths, d, h)

    x0 = np.asarray(initial_sampler(seed, n_paths), dtype=float)
    if x0.shape != (n_paths, d):
        raise ConfigurationError(
            f"initial sampler returned shape {x0.shape}, want {(n_paths, d)}")

    floored = 0
    states = {}
    for mbar in generator.retained:
        X = np.empty((n_steps + 1, n_paths, d))
        X[0] = x0
        for t in range(n_steps):
            cur = X[t]
            if generator.fbar is not None:
                drift = np.stack([generator.drift_at(mbar, cur[i]) for i in range(n_paths)])
            else:
                drift = 0.0
            nxt = cur + drift * h + _apply_sigbar(generator, mbar, cur, increments[t])
            if floor_states:
                low = nxt < _STATE_FLOOR
                floored += int(low.sum())
                nxt = np.where(low, _STATE_FLOOR, nxt)
            X[t + 1] = nxt
        X.flags.writeable = False
        states[mbar] = X
    increments.flags.writeable = False

    return SamplePaths(
        seed=int(seed), h=float(h), n_paths=int(n_paths),
        increments=increments, states=states,
        initial_descriptor=dict(getattr(initial_sampler, "descriptor", {})),
        floored_events=floored,
    )


def _apply_sigbar(generator, mbar, x_batch, dw_batch):
    """sigbar(x_i) dW_i for a batch of states.

    The diagonal multiplicative generators carry (lam, sigmas) metadata;
    the elementwise fast path reproduces diag-matrix multiplication bit for
    bit because the zero off-diagonal terms add exactly.
    """
    info = generator.info
    if generator.constant_ratio and "sigmas" in info:
        scale = np.sqrt(info["lam"]) * (np.asarray(info["sigmas"]) * x_batch)
        return scale * dw_batch
    mats = np.stack([np.asarray(generator.sigbar(mbar, x), dtype=float) for x in x_batch])
    return np.einsum("nde,ne->nd", mats, dw_batch)


def dump_paths(paths: SamplePaths, mbar, path_out):
    """Binary dump: header (seed, d, n_paths, steps) then little-endian float64
    states, time-major, then path-major, then coordinate."""
    X = paths.states[mbar]
    header = struct.pack("<qqqq", paths.seed, paths.dim, paths.n_paths, paths.n_steps)
    with open(path_out, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())
