"""Counter-based seed derivation.

Every random draw in the package is keyed by a root seed plus a tuple of
integer counters (round, step, sample index, ...).  Derived streams are
independent of call order, so work can be reordered or parallelised
without changing results.
"""

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def _key(parts):
    out = []
    for p in parts:
        if isinstance(p, str):
            # stable, hash-seed independent
            out.append(int.from_bytes(p.encode("utf-8")[:8].ljust(8, b"\0"), "little"))
            out.append(len(p))
        else:
            out.append(int(p) & _MASK64)
    return tuple(out)


def derive_seed(seed: int, *keys) -> int:
    """Return a 63-bit seed for the stream identified by ``keys``."""
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=_key(keys))
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return ((int(hi) << 32) | int(lo)) & ((1 << 63) - 1)


def numpy_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(derive_seed(seed, *keys)))


def torch_generator(seed: int, *keys) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(derive_seed(seed, *keys))
    return g
