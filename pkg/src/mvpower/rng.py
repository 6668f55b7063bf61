"""Counter-derived random streams.

Every simulated dataset gets its own Philox generator keyed by
``(master seed, phase, index, ...)``, so results do not depend on how work
is split across processes or in which order tasks finish.
"""

import numpy as np

PILOT = 0
NULL = 1
ALT = 2
NESTED = 3
CURVE = 4
COPULA = 5


def stream(seed: int, phase: int, *index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(phase), *(int(i) for i in index)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, phase: int, *index: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(phase), *(int(i) for i in index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
