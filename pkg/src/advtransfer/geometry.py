"""Constraint sets for the attacks: ball projections, pixel clamping, random
starts, and the linear maximization oracle over a box-truncated L1 ball.

Batch convention: a scalar ``eps`` treats the whole array as one
perturbation; a 1-D ``eps`` of length N treats axis 0 as a batch with one
radius per example.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from advtransfer.errors import InvalidArgument
from advtransfer.tensor import PIXEL_MAX


class Family(str, Enum):
    LINF = "linf"
    L2 = "l2"
    L1 = "l1"
    JPEG = "jpeg"
    ELASTIC = "elastic"

    def __str__(self):
        return self.value


# Base ladders and step counts for 3x224x224 inputs; desk-scale runs rescale
# the ladders by a calibrated factor.
TABLE1 = {
    Family.LINF: {"base": 1.0, "size": 6, "train_steps": 10, "eval_steps": 50},
    Family.L2: {"base": 150.0, "size": 6, "train_steps": 10, "eval_steps": 50},
    Family.L1: {"base": 9562.5, "size": 7, "train_steps": 10, "eval_steps": 50},
    Family.JPEG: {"base": 0.03125, "size": 6, "train_steps": 10, "eval_steps": 50},
    Family.ELASTIC: {"base": 0.25, "size": 7, "train_steps": 30, "eval_steps": 100},
}


def geometric_ladder(base, size):
    return [base * 2.0**i for i in range(size)]


@dataclass(frozen=True)
class PerturbationBudget:
    family: Family
    epsilon: object  # float, or per-example array
    steps: int = 1
    step_rule: str = "eps/sqrt(steps)"

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if np.any(np.asarray(self.epsilon) < 0):
            raise InvalidArgument("epsilon must be non-negative")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidArgument("steps must be a positive integer")
        if self.step_rule != "eps/sqrt(steps)":
            raise InvalidArgument(f"unknown step rule {self.step_rule!r}")

    @property
    def step_size(self):
        return np.asarray(self.epsilon, dtype=np.float64) / math.sqrt(self.steps)


def _radius(eps, shape):
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps < 0):
        raise InvalidArgument("epsilon must be non-negative")
    if eps.ndim == 0:
        return eps
    if eps.shape != (shape[0],):
        raise InvalidArgument(f"per-example epsilon of shape {eps.shape} does not match batch {shape[0]}")
    return eps.reshape((-1,) + (1,) * (len(shape) - 1))


def _reduce_axes(eps, ndim):
    return None if np.ndim(eps) == 0 else tuple(range(1, ndim))


_TINY = 1e-100


def norm(delta, p, eps_like=0.0):
    """Lp norm of ``delta`` (per example when ``eps_like`` is 1-D)."""
    delta = np.asarray(delta, dtype=np.float64)
    axes = _reduce_axes(eps_like, delta.ndim)
    if p == np.inf:
        return np.abs(delta).max(axis=axes)
    if p == 2:
        peak = np.abs(delta).max(axis=axes, keepdims=True) if delta.size else np.zeros((1,) * delta.ndim)
        if np.all((peak == 0) | (peak > _TINY)):
            return np.sqrt((delta**2).sum(axis=axes))
        # rescale so squares of very small entries do not underflow
        peak = np.where(peak == 0, 1.0, peak)
        return np.squeeze(peak, axis=axes) * np.sqrt(((delta / peak) ** 2).sum(axis=axes))
    if p == 1:
        return np.abs(delta).sum(axis=axes)
    raise InvalidArgument(f"unsupported norm {p}")


def project_linf(delta, eps):
    r = _radius(eps, np.shape(delta))
    return np.clip(delta, -r, r)


def project_l2(delta, eps):
    delta = np.asarray(delta, dtype=np.float64)
    r = _radius(eps, delta.shape)
    n = norm(delta, 2, eps)
    if np.ndim(eps):
        n = n.reshape(r.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(n > r, r / n, 1.0)
    return delta * scale


def clamp_pixels(x):
    return np.clip(x, 0.0, PIXEL_MAX)


def _l1_direction(shape, rng):
    """Uniform point on the unit L1 sphere (per example for batched shapes)."""
    mags = rng.exponential(size=shape)
    signs = rng.choice([-1.0, 1.0], size=shape)
    return signs * mags


def random_init(budget, shape, rng):
    """Random perturbation inside the budget's constraint set.

    Linf, JPEG and elastic draw i.i.d. uniform coordinates on [-eps, eps].
    L2 draws a uniform direction with radius eps * u**(1/d). L1 draws a
    uniform point on the L1 sphere of radius eps * u; callers clip it against
    the pixel box, which can only shrink it.
    """
    shape = tuple(shape)
    eps = budget.epsilon
    r = _radius(eps, shape)
    batched = np.ndim(eps) > 0
    per = shape[1:] if batched else shape
    d = int(np.prod(per))
    n_draws = shape[0] if batched else 1
    fam = budget.family
    if fam in (Family.LINF, Family.JPEG, Family.ELASTIC):
        return rng.uniform(-1.0, 1.0, size=shape) * r
    if fam == Family.L2:
        g = rng.standard_normal(size=shape)
        gn = norm(g, 2, eps)
        u = rng.uniform(size=n_draws) ** (1.0 / d)
        if batched:
            gn = gn.reshape(r.shape)
            u = u.reshape(r.shape)
        else:
            u = u[0]
        return project_l2(g / gn * u * r, eps)
    if fam == Family.L1:
        v = _l1_direction(shape, rng)
        vn = norm(v, 1, eps)
        u = rng.uniform(size=n_draws)
        if batched:
            vn = vn.reshape(r.shape)
            u = u.reshape(r.shape)
        else:
            u = u[0]
        out = v / vn * u * r
        # rounding can leave the norm an ulp above the radius
        on = norm(out, 1, eps)
        if batched:
            on = on.reshape(r.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = out * np.where(on > r, r / on, 1.0)
        return out
    raise InvalidArgument(f"unknown family {fam}")


def l1_lmo_moves(g, x, rho):
    """Per-coordinate moves of the truncated-L1-ball oracle.

    ``g`` and ``x`` are (N, d) with ``x`` in [0, 1]; ``rho`` has shape (N,).
    Returns ``m`` such that ``x + m`` maximizes ``g . z`` over
    {z in [0,1]^d : |z - x|_1 <= rho}.
    """
    n, d = g.shape
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (n,))
    # stable sort on -|g| breaks ties by the lowest index
    order = np.argsort(-np.abs(g), axis=1, kind="stable")
    bound = np.where(g > 0, 1.0 - x, -x)
    b_sorted = np.take_along_axis(bound, order, axis=1)
    cum = np.cumsum(np.abs(b_sorted), axis=1)
    k_star = (cum <= rho[:, None]).sum(axis=1)
    moved_sorted = np.where(np.arange(d)[None, :] < k_star[:, None], b_sorted, 0.0)
    rows = np.nonzero(k_star < d)[0]
    if rows.size:
        ks = k_star[rows]
        spent = np.where(ks > 0, cum[rows, np.maximum(ks - 1, 0)], 0.0)
        idx = order[rows, ks]
        gi = g[rows, idx]
        step = (rho[rows] - spent) * np.sign(gi)
        cap = np.abs(b_sorted[rows, ks])
        moved_sorted[rows, ks] = np.clip(step, -cap, cap)
    moves = np.empty_like(moved_sorted)
    np.put_along_axis(moves, order, moved_sorted, axis=1)
    return moves


def l1_lmo(g, x, rho):
    """Maximizer of ``g . z`` over the L1 ball of radius ``rho`` around ``x``
    intersected with [0, 1]^d.

    Coordinates are visited in order of decreasing |g|; each is pushed to the
    box edge favoured by the sign of g until the budget runs out, and the
    next coordinate takes the remainder.
    """
    g = np.asarray(g, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.asarray(rho) < 0):
        raise InvalidArgument("rho must be non-negative")
    if g.shape != x.shape:
        raise InvalidArgument(f"gradient shape {g.shape} != point shape {x.shape}")
    if np.any(x < 0) or np.any(x > 1):
        raise InvalidArgument("x must lie in [0, 1]^d")
    single = g.ndim == 1
    g2 = g.reshape(1, -1) if single else g.reshape(g.shape[0], -1)
    x2 = x.reshape(g2.shape)
    out = x2 + l1_lmo_moves(g2, x2, rho)
    return out[0] if single else out.reshape(g.shape)
