"""Targeted attacks and attacked-accuracy evaluation.

All attacks work on batches: ``x`` is (N, 3, H, W), ``y_target`` is (N,),
and the budget's epsilon is a scalar or a per-example (N,) array. A single
(3, H, W) image is accepted and promoted to a batch of one.
"""

from dataclasses import dataclass, field

import numpy as np

from advtransfer.errors import InvalidArgument
from advtransfer.geometry import (
    TABLE1,
    Family,
    PerturbationBudget,
    clamp_pixels,
    l1_lmo_moves,
    norm,
    project_l2,
    project_linf,
    random_init,
)
from advtransfer.model import cross_entropy, loss_and_input_gradient
from advtransfer.tensor import PIXEL_MAX


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss: np.ndarray
    pred: np.ndarray
    success: np.ndarray
    residual: np.ndarray
    aux: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pred)


def _promote(x, y_target, eps):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    n = len(x)
    y_target = np.broadcast_to(np.asarray(y_target, dtype=np.int64), (n,)).copy()
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,)).copy()
    if np.any(eps < 0):
        raise InvalidArgument("epsilon must be non-negative")
    return x, y_target, eps, single


def _per_example(v, ndim):
    return v.reshape((-1,) + (1,) * (ndim - 1))


def _finish(model, x, x_adv, y_target, residual, aux=None):
    logits = model.forward(x_adv)
    loss = cross_entropy(logits, y_target)
    pred = logits.argmax(axis=1)
    return AttackResult(x_adv, loss, pred, pred == y_target, residual, aux or {})


def targeted_grad_fn(model, y_target):
    """Gradient of the per-example targeted loss w.r.t. the input images."""

    def grad(x_cur):
        return loss_and_input_gradient(model, x_cur, y_target)[1]

    return grad


def pgd_optimize(grad_fn, x, eps, family, steps, rng, trace=None, init=None):
    """Projected gradient descent on a perturbation of ``x``.

    ``grad_fn`` maps the current point (N, ...) to the gradient of the
    objective being minimized. The step is sign(g) for Linf and g/|g|_2 for
    L2, scaled by eps/sqrt(steps); each step is followed by projection onto
    the ball. The start is a random point of the ball unless ``init`` gives
    one. Returns the final perturbation (not clamped).
    """
    family = Family(family)
    if family not in (Family.LINF, Family.L2):
        raise InvalidArgument(f"PGD supports linf and l2, not {family}")
    n = len(x)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,))
    budget = PerturbationBudget(family, eps, steps)
    step = _per_example(budget.step_size, x.ndim)
    delta = random_init(budget, x.shape, rng) if init is None else np.array(init, dtype=np.float64)
    for _ in range(steps):
        g = grad_fn(x + delta)
        if family == Family.LINF:
            delta = project_linf(delta - step * np.sign(g), eps)
        else:
            gn = _per_example(norm(g, 2, eps), x.ndim)
            # direction undefined for a vanishing gradient: skip the step
            safe = np.where(gn < 1e-20, 1.0, gn)
            direction = np.where(gn < 1e-20, 0.0, g / safe)
            delta = project_l2(delta - step * direction, eps)
        if trace is not None:
            trace.append(delta.copy())
    return delta


def pgd_attack(model, x, y_target, budget, rng):
    family = Family(budget.family)
    if family not in (Family.LINF, Family.L2):
        raise InvalidArgument(f"pgd_attack needs a linf or l2 budget, got {family}")
    x, y_target, eps, single = _promote(x, y_target, budget.epsilon)
    delta = pgd_optimize(targeted_grad_fn(model, y_target), x, eps, family, budget.steps, rng)
    x_adv = clamp_pixels(x + delta)
    p = np.inf if family == Family.LINF else 2
    result = _finish(model, x, x_adv, y_target, norm(x_adv - x, p, eps))
    return _unbatch(result) if single else result


def frank_wolfe(grad_fn, x0, rho, steps, rng, gaps=None):
    """Frank-Wolfe maximization over {z in [0,1]^d : |z - x0|_1 <= rho}.

    ``x0`` is (N, d) in [0, 1]; ``grad_fn`` returns the gradient of the
    objective being maximized at an (N, d) point. Iterates are running
    averages of oracle points, x_t = (1 - 1/t) x_{t-1} + (1/t) xhat_t, with a
    random feasible start. The perturbation is tracked directly so that
    rho = 0 returns exactly zero. When ``gaps`` is a list, the duality gap
    g . (xhat_t - x_{t-1}) is appended every step.
    """
    n, d = x0.shape
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (n,))
    start = random_init(PerturbationBudget(Family.L1, rho, steps), x0.shape, rng)
    delta = np.clip(x0 + start, 0.0, 1.0) - x0
    delta = np.where(rho[:, None] > 0, delta, 0.0)
    for t in range(1, steps + 1):
        g = grad_fn(x0 + delta)
        moves = l1_lmo_moves(g, x0, rho)
        if gaps is not None:
            gaps.append((g * (moves - delta)).sum(axis=1))
        delta = (1.0 - 1.0 / t) * delta + moves / t
    return delta


def fw_l1_attack(model, x, y_target, budget, rng):
    """L1 attack by Frank-Wolfe in [0, 1] pixel space.

    The budget's epsilon is in [0, 255] units and divided by 255 for the
    optimization; the objective maximized is the negated targeted loss.
    """
    if Family(budget.family) != Family.L1:
        raise InvalidArgument(f"fw_l1_attack needs an l1 budget, got {budget.family}")
    x, y_target, eps, single = _promote(x, y_target, budget.epsilon)
    shape = x.shape
    x0 = (x / PIXEL_MAX).reshape(len(x), -1)

    def grad(z):
        g = loss_and_input_gradient(model, (z * PIXEL_MAX).reshape(shape), y_target)[1]
        return -PIXEL_MAX * g.reshape(len(x), -1)

    delta = frank_wolfe(grad, x0, eps / PIXEL_MAX, budget.steps, rng)
    x_adv = clamp_pixels(x + PIXEL_MAX * delta.reshape(shape))
    result = _finish(model, x, x_adv, y_target, norm(x_adv - x, 1, eps))
    return _unbatch(result) if single else result


def _unbatch(result):
    aux = {k: (v[0] if isinstance(v, np.ndarray) and v.ndim else v) for k, v in result.aux.items()}
    return AttackResult(
        result.x_adv[0],
        float(result.loss[0]),
        int(result.pred[0]),
        bool(result.success[0]),
        float(result.residual[0]),
        aux,
    )


def attack_fn(family):
    from advtransfer import elastic, jpeg

    return {
        Family.LINF: pgd_attack,
        Family.L2: pgd_attack,
        Family.L1: fw_l1_attack,
        Family.JPEG: jpeg.jpeg_attack,
        Family.ELASTIC: elastic.elastic_attack,
    }[Family(family)]


def attack_options(family, quality):
    """Extra keyword arguments an attack of ``family`` takes."""
    return {"quality": quality} if Family(family) == Family.JPEG else {}


def run_attack(model, x, y_target, family, eps, steps, rng, **kwargs):
    """Dispatch a targeted attack of ``family`` at radius ``eps``."""
    budget = PerturbationBudget(Family(family), eps, steps)
    return attack_fn(family)(model, x, y_target, budget, rng, **kwargs)


def eval_steps(family):
    return TABLE1[Family(family)]["eval_steps"]


def train_steps(family):
    return TABLE1[Family(family)]["train_steps"]


def sample_targets(y, num_classes, rng):
    """Uniform draw from the incorrect classes for every label in ``y``."""
    if num_classes < 2:
        raise InvalidArgument("need at least two classes to pick an incorrect target")
    y = np.asarray(y)
    return (y + rng.integers(1, num_classes, size=y.shape)) % num_classes


def evaluate_accuracy(model, data, family, eps, rng, steps=None, batch_size=100, **kwargs):
    """Accuracy on ``data`` after a targeted attack with a random wrong target.

    Scores the true label, not the target. Uses the evaluation step count
    unless ``steps`` is given; ``kwargs`` go to the attack.
    """
    if len(data) == 0:
        raise InvalidArgument("cannot evaluate on an empty dataset")
    steps = eval_steps(family) if steps is None else steps
    targets = sample_targets(data.labels, data.num_classes, rng)
    correct = 0
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        res = run_attack(model, data.images[sl], targets[sl], family, eps, steps, rng, **kwargs)
        correct += int((res.pred == data.labels[sl]).sum())
    return correct / len(data)
