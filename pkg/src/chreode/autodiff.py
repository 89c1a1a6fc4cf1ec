"""Reverse-mode differentiation helpers built on ``torch.autograd``.

The operator needs the input gradient of a learned potential, and the
training loss then differentiates that gradient with respect to the
parameters. ``grad_wrt_input`` therefore always records the backward pass
as a graph (``create_graph=True``) unless the caller opts out for pure
inference.

Every recorded node is checked against a whitelist of operations whose
first and second derivatives are well defined. Anything else (sign, round,
argmax, sorting...) raises :class:`UnsupportedOperationError` naming the
offending operation instead of silently producing a zero or a
discontinuous gradient.
"""

import re
import warnings

import torch

from .exceptions import NumericalError, UnsupportedOperationError

DTYPE = torch.float64

# Elementwise math and reductions with smooth (or piecewise-linear, for
# max-with-constant) derivatives.
_MATH_OPS = {
    "Add", "Sub", "Mul", "Div", "Neg", "Rsub", "Reciprocal",
    "Mm", "Addmm", "Bmm", "Baddbmm", "Mv", "Dot", "Matmul", "Linear",
    "Exp", "Expm1", "Log", "Tanh", "Softplus", "Sin", "Cos", "Pow", "Sqrt", "Rsqrt",
    "Sum", "Mean", "Logsumexp", "Softmax", "LogSoftmax",
    "Clamp", "ClampMin", "Relu", "Maximum",
}
# Shape and indexing plumbing; derivatives are permutations/copies.
_STRUCTURAL_OPS = {
    "View", "Reshape", "ReshapeAlias", "UnsafeView", "Unsqueeze", "Squeeze",
    "Expand", "Permute", "Transpose", "T", "Select", "Slice", "Index",
    "Cat", "Stack", "Split", "SplitWithSizes", "Unbind", "Clone", "Copy",
    "Copies", "AsStrided", "Alias", "Diagonal", "Flatten", "Repeat",
    "ToCopy", "Contiguous", "AccumulateGrad",
}
# Fused loss kernels defined in ``losses``; first-order only.
_FUSED_OPS = {"KernelBankMean", "SinkhornCost"}

SUPPORTED_OPS = frozenset(_MATH_OPS | _STRUCTURAL_OPS | _FUSED_OPS)

_SUFFIX = re.compile(r"(Backward\d*|BackwardBackward\d*)$")


def op_name(node):
    """Canonical operation name of an autograd node (``MulBackward0`` -> ``Mul``)."""
    name = type(node).__name__
    if name.startswith("torch::autograd::"):
        name = name.split("::")[-1]
    return _SUFFIX.sub("", name)


def recorded_ops(output):
    """Set of operation names reachable from ``output`` in its autograd graph."""
    seen, names = set(), set()
    stack = [output.grad_fn] if output.grad_fn is not None else []
    while stack:
        node = stack.pop()
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        names.add(op_name(node))
        stack.extend(nxt for nxt, _ in node.next_functions)
    return names


def check_supported(output):
    for name in sorted(recorded_ops(output)):
        if name not in SUPPORTED_OPS:
            raise UnsupportedOperationError(name)


def input_gradient(out, z, create_graph=True, check_ops=True):
    """Gradient of ``out.sum()`` with respect to ``z`` for an already built ``out``."""
    if check_ops:
        check_supported(out)
    if not out.requires_grad:
        return torch.zeros_like(z)
    (grad,) = torch.autograd.grad(out.sum(), z, create_graph=create_graph, allow_unused=True)
    return torch.zeros_like(z) if grad is None else grad


def grad_wrt_input(f, z, create_graph=True, check_ops=True):
    """Gradient of a row-wise scalar function with respect to its input.

    ``f`` maps an ``(n, d)`` tensor to ``(n,)`` (or a single row to a
    scalar) with rows treated independently; the result has the shape of
    ``z``. With ``create_graph`` the returned tensor stays attached to the
    graph of every parameter used inside ``f``.
    """
    if not z.requires_grad:
        z = z.detach().requires_grad_(True)
    return input_gradient(f(z), z, create_graph=create_graph, check_ops=check_ops)


def grad_wrt_params(loss, params):
    """``dloss/dparam`` for every entry of ``params`` (dict or sequence).

    Parameters that the loss does not depend on get an exact zero
    gradient. A non-finite gradient raises :class:`NumericalError` whose
    ``provenance`` names the first backward node that produced it.
    """
    named = params if isinstance(params, dict) else dict(enumerate(params))
    tensors = list(named.values())
    if not torch.isfinite(loss).all():
        raise NumericalError("loss is not finite", provenance="forward")
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=True)
    else:
        grads = [None] * len(tensors)
    out = {}
    for (name, p), g in zip(named.items(), grads):
        out[name] = torch.zeros_like(p) if g is None else g
    bad = [name for name, g in out.items() if not torch.isfinite(g).all()]
    if bad:
        raise NumericalError(
            f"non-finite gradient for parameters {bad}", provenance=_locate_nonfinite(loss, tensors)
        )
    return out if isinstance(params, dict) else [out[i] for i in range(len(tensors))]


def _locate_nonfinite(loss, tensors):
    # Replay the backward pass under anomaly detection to name the node.
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            with torch.autograd.detect_anomaly(check_nan=True):
                torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=True)
    except RuntimeError as exc:
        match = re.search(r"Function '(\w+)' returned nan", str(exc))
        return match.group(1) if match else str(exc).splitlines()[0]
    return "unknown (non-finite value did not reproduce under anomaly mode)"


def stop_gradient(x):
    return x.detach()
