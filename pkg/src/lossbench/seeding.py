"""Deterministic derivation of child seeds."""
import numpy as np


def mix(*parts) -> int:
    """Fold ints (or nested sequences of ints) into one 63-bit seed."""
    flat = []
    for p in parts:
        if isinstance(p, (list, tuple, np.ndarray)):
            flat.extend(int(x) for x in np.ravel(p))
        else:
            flat.append(int(p))
    state = np.random.SeedSequence([x & 0xFFFFFFFFFFFFFFFF for x in flat]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
