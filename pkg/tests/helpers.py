"""Shared oracles for the test suite."""

import itertools

import numpy as np


def relative_errors(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def truncated_l1_vertices(x, rho):
    """Superset of the vertices of {z in [0,1]^d : |z - x|_1 <= rho}, feasible ones only.

    At a vertex every coordinate sits on a box face (0 or 1) or on a kink of
    the L1 ball (z_i = x_i), except at most one coordinate that absorbs the
    remaining L1 budget. Enumerate all such points and keep the feasible ones.
    """
    x = np.asarray(x, dtype=np.float64)
    d = len(x)
    choices = np.stack([np.zeros(d), np.ones(d), x])  # (3, d)
    combos = np.array(list(itertools.product(range(3), repeat=d)))
    base = choices[combos, np.arange(d)]  # (3^d, d)
    cands = [base]
    for free in range(d):
        rest = base.copy()
        others = np.abs(rest - x).sum(axis=1) - np.abs(rest[:, free] - x[free])
        left = rho - others
        ok = left >= 0
        for sign in (1.0, -1.0):
            z = rest[ok].copy()
            z[:, free] = x[free] + sign * left[ok]
            cands.append(z)
    cands = np.concatenate(cands)
    keep = (np.abs(cands - x).sum(axis=1) <= rho + 1e-12) & (cands >= 0).all(axis=1) & (cands <= 1).all(axis=1)
    return cands[keep]


def l1_vertex_optimum(g, x, rho):
    return float((truncated_l1_vertices(x, rho) @ np.asarray(g)).max())


# acceptance criterion -> (passed, detail), printed at the end of the session
ACCEPTANCE = {}
