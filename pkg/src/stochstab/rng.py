"""Counter-based Gaussian increments.

Every Brownian increment is a pure function of ``(master_seed, path_index,
step_index)``: the pair ``(master_seed, path_index)`` selects a Philox key and
the step index selects a fixed block of counters.  Paths can therefore be
generated in any order, in any chunking, and still come out bit-identical.
"""

from __future__ import annotations

import numpy as np

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def path_key(master_seed: int, path_index: int) -> int:
    """128-bit Philox key for one path."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(path_index),))
    lo, hi = ss.generate_state(2, dtype=np.uint64)
    return int(lo) | (int(hi) << 64)


def _blocks_per_step(dim: int) -> int:
    # one Philox block = 4 uint64 = 2 Box-Muller pairs = 4 normals
    return max(1, -(-dim // 4))


def _uniform_open(raw: np.ndarray) -> np.ndarray:
    # 53-bit mantissa mapped into (0, 1]; log() never sees zero
    return ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53


def standard_normals(master_seed: int, path_index: int, start_step: int,
                     n_steps: int, dim: int) -> np.ndarray:
    """Standard normal draws of shape ``(n_steps, dim)`` for steps
    ``start_step .. start_step + n_steps - 1``."""
    if n_steps < 0 or start_step < 0:
        raise ValueError("step range must be nonnegative")
    bps = _blocks_per_step(dim)
    if n_steps == 0:
        return np.empty((0, dim))
    bg = np.random.Philox(key=path_key(master_seed, path_index), counter=start_step * bps)
    raw = bg.random_raw(4 * bps * n_steps).reshape(n_steps, 2 * bps, 2)
    u1 = _uniform_open(raw[..., 0])
    u2 = _uniform_open(raw[..., 1])
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([rad * np.cos(_TWO_PI * u2), rad * np.sin(_TWO_PI * u2)], axis=-1)
    return z[:, :dim]


def brownian_increments(master_seed: int, path_index: int, n_steps: int, dim: int,
                        dt: float, start_step: int = 0) -> np.ndarray:
    """Increments ``dB_n ~ N(0, dt I)`` for one path."""
    return np.sqrt(dt) * standard_normals(master_seed, path_index, start_step, n_steps, dim)
