"""Named counter-based random streams.

All randomness in a run derives from one 64-bit seed. A stream is identified
by a name plus integer counters (epoch, jet index, view, ...), so the numbers a
jet receives do not depend on how many other jets were processed before it or
by which worker.
"""
import numpy as np

STREAMS = {
    "init": 1,
    "augment": 2,
    "dropout": 3,
    "masking": 4,
    "split": 5,
    "shuffle": 6,
    "synthetic": 7,
    "finetune": 8,
    "reference": 9,
    "gmm": 10,
}


def stream(seed, name, *counters):
    """Philox generator keyed by ``(seed, name, *counters)``."""
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    key = (STREAMS[name],) + tuple(int(c) for c in counters)
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
