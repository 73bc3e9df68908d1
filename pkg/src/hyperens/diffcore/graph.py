"""Graph-level entry points: run a computation on a fresh tape, differentiate it,
and check its gradients against central finite differences."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tape, TapeError, Tensor


def forward(graph, inputs):
    """Evaluate ``graph(**inputs)`` on a new tape and return the output tensor.

    ``graph`` is any callable composed of tensor operations. Raises
    :class:`NonFiniteError` if the output holds NaN or infinity.
    """
    with Tape():
        out = graph(**inputs)
    if not isinstance(out, Tensor):
        raise TypeError(f"graph returned {type(out).__name__}, expected Tensor")
    if not np.all(np.isfinite(out.values)):
        raise NonFiniteError(f"non-finite output from node {out.op!r}")
    return out


def backward(output, params=None):
    """Populate ``.grad`` on every parameter reachable from a scalar output.

    Parameters listed in ``params`` that do not participate receive zeros.
    Returns the list of gradients aligned with ``params`` when given, else
    the raw ``{id: grad}`` mapping.
    """
    tape = output._tape
    if tape is None:
        if params is None:
            raise TapeError("output is not attached to a tape")
        if output.values.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
        for p in params:
            p.grad = np.zeros_like(p.values)
        return [p.grad for p in params]
    grads = tape.backward(output, params=params)
    if params is None:
        return grads
    return [grads[id(p)] for p in params]


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    non_checkable: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self):
        return all(err < self.tolerance for err in self.errors.values())

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in self.errors.items()]
        lines += [f"{name}: non-checkable" for name in self.non_checkable]
        return "\n".join(lines)


def _ancestors_of_nondiff(tape):
    found = set()
    nondiff = [n for n in tape.nodes if not n.differentiable]
    stack = [p for n in nondiff for p in n._parents]
    while stack:
        t = stack.pop()
        if id(t) in found:
            continue
        found.add(id(t))
        stack.extend(t._parents)
    return found, [n.op for n in nondiff]


def grad_check(graph, inputs, tolerance=1e-4, step=1e-5, params=None):
    """Compare tape gradients with central differences for each parameter.

    The error per parameter is ``max|g_tape - g_fd| / max(max|g_tape|, max|g_fd|, 1e-10)``.
    Parameters feeding a non-differentiable node (e.g. argmax) are reported
    as non-checkable and excluded from the verdict.
    """
    if params is None:
        params = {k: v for k, v in inputs.items() if isinstance(v, Tensor) and v.requires_grad}
    with Tape() as tape:
        out = graph(**inputs)
    if out.values.size != 1:
        raise TapeError("grad_check needs a scalar graph output")
    excluded, nondiff_ops = _ancestors_of_nondiff(tape)
    analytic = tape.backward(out, params=list(params.values()))

    report = GradCheckReport(tolerance=tolerance)
    report.non_checkable.extend(nondiff_ops)
    for name, p in params.items():
        if id(p) in excluded:
            report.non_checkable.append(name)
            continue
        g = analytic[id(p)]
        fd = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = graph(**inputs).item()
            flat[i] = orig - step
            down = graph(**inputs).item()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * step)
        scale = max(np.abs(g).max(initial=0.0), np.abs(fd).max(initial=0.0), 1e-10)
        report.errors[name] = float(np.abs(g - fd).max(initial=0.0) / scale)
    return report
