"""Latin hypercube sampling on the unit cube."""

import numpy as np


def latin_hypercube(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Return an ``(n, dim)`` stratified sample of ``[0, 1)^dim``.

    Each column places exactly one point in each of the ``n`` strata
    ``[k/n, (k+1)/n)``; strata are matched across columns by independent
    random permutations.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    u = rng.random((n, dim))
    strata = np.empty((n, dim), dtype=np.int64)
    for j in range(dim):
        strata[:, j] = rng.permutation(n)
    return (strata + u) / n
