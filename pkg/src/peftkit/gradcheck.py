"""Central-difference verification of analytic gradients.

The oracle used throughout the test suite: analytic gradients from the
tape are compared against (f(x+eps) - f(x-eps)) / 2eps coordinate by
coordinate, reporting max |g_an - g_fd| / max(1, |g_fd|).
"""

from __future__ import annotations

from array import array
from typing import Callable, Iterable

from peftkit.errors import ContractError, DomainError
from peftkit.tensor import Tape, Tensor, active_tape

DEFAULT_EPS = 1e-5


def _check_no_outer_tape():
    if active_tape() is not None:
        raise ContractError(
            "gradient checking must run without an active tape: "
            "finite-difference evaluations would pollute it"
        )


def _check_deterministic(evaluate: Callable[[], Tensor]) -> None:
    a = evaluate()
    b = evaluate()
    if a.data.tobytes() != b.data.tobytes():
        raise ContractError(
            "function is not deterministic under fixed inputs; "
            "finite-difference oracle is invalid"
        )


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = DEFAULT_EPS) -> float:
    """Max relative error between analytic and central-difference grads.

    ``f`` must map the tensor to a deterministic scalar. ``x`` is
    restored to its original contents and flags before returning.
    """
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    _check_no_outer_tape()
    _check_deterministic(lambda: f(x))

    saved_flag = x.requires_grad
    saved_grad = x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
            tape.backward(y)
        analytic = array("d", x.grad)
    finally:
        x.requires_grad = saved_flag
        x.grad = saved_grad

    worst = 0.0
    for i in range(x.numel):
        orig = x.data[i]
        x.data[i] = orig + eps
        fp = f(x).item()
        x.data[i] = orig - eps
        fm = f(x).item()
        x.data[i] = orig
        g_fd = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - g_fd) / max(1.0, abs(g_fd))
        if err > worst:
            worst = err
    return worst


def gradcheck_params(loss_fn: Callable[[], Tensor],
                     params: Iterable[tuple[str, Tensor]],
                     eps: float = DEFAULT_EPS) -> tuple[float, dict[str, float]]:
    """Check analytic grads of a parameterized loss, one parameter at a time.

    ``loss_fn`` recomputes the scalar loss from the parameters' current
    contents. Returns (max error over all parameters, per-name errors).
    """
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    _check_no_outer_tape()
    params = list(params)
    _check_deterministic(loss_fn)

    for _, t in params:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {name: array("d", t.grad) for name, t in params}

    report: dict[str, float] = {}
    for name, t in params:
        worst = 0.0
        for i in range(t.numel):
            orig = t.data[i]
            t.data[i] = orig + eps
            fp = loss_fn().item()
            t.data[i] = orig - eps
            fm = loss_fn().item()
            t.data[i] = orig
            g_fd = (fp - fm) / (2.0 * eps)
            err = abs(analytic[name][i] - g_fd) / max(1.0, abs(g_fd))
            if err > worst:
                worst = err
        report[name] = worst
    overall = max(report.values()) if report else 0.0
    return overall, report


def composed_gradcheck(composed, tokens, targets,
                       eps: float = DEFAULT_EPS) -> tuple[float, dict[str, float]]:
    """Gradient-check a composed model's loss w.r.t. every trainable
    tensor of its module."""
    def loss_fn():
        return composed.loss(tokens, targets)

    params = [(p.name, p.tensor) for p in composed.trainable_tensors()]
    return gradcheck_params(loss_fn, params, eps)
