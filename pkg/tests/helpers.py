"""Shared oracles for the test suite."""
import numpy as np

from varsig.detect import detect_squares
from varsig.exact import selected


def grid_membership(path, config, conditioning, observed, grid):
    """Replay the detector at every grid point: 1 where the event is selected."""
    config = config.with_intervals(path.base.T)
    out = np.empty(len(grid), dtype=bool)
    for i, phi in enumerate(grid):
        cps = detect_squares(path.squares_at(phi), config).changepoints
        out[i] = selected(cps, path.window.tau_hat, observed, conditioning)
    return out


def grid_disagreements(S, path, config, conditioning, observed, n=1000, margin=1e-8):
    """Grid points (away from endpoints of ``S``) where ``S`` and replay disagree."""
    grid = (np.arange(n) + 0.5) / n
    ends = S.endpoints()
    if ends.size:
        keep = np.min(np.abs(grid[:, None] - ends[None, :]), axis=1) > margin
        grid = grid[keep]
    replay = grid_membership(path, config, conditioning, observed, grid)
    member = np.asarray(S.contains(grid), dtype=bool)
    return grid[member != replay]
