from typing import Dict, Mapping

import numpy as np
from scipy.stats import rankdata


def competition_ranks(scores: Mapping[str, float], decimals: int = 4) -> Dict[str, int]:
    """
    Rank entries by score, 1 = best.

    Scores equal after rounding to `decimals` share the smaller rank and the
    next rank skips ("1, 1, 3").
    """
    if not scores:
        return {}
    names = list(scores)
    rounded = np.round(np.array([scores[name] for name in names], dtype=np.float64), decimals)
    ranks = rankdata(-rounded, method="min")
    return {name: int(rank) for name, rank in zip(names, ranks)}
