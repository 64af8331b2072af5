"""Named-leaf computation graphs and the finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..errors import NonScalarOutputError, UnboundLeafError
from .tensor import Tensor


class ComputationGraph:
    """A differentiable program over named leaf tensors.

    `build` maps leaf tensors to output tensors; running it records the
    operator applications in topological order (define-by-run), so a fresh
    acyclic graph is traced for every evaluation.
    """

    def __init__(
        self,
        build: Callable[[dict[str, Tensor]], dict[str, Tensor]],
        leaves: tuple[str, ...],
        outputs: tuple[str, ...],
    ):
        self.build = build
        self.leaves = tuple(leaves)
        self.outputs = tuple(outputs)

    def _bind(self, bindings: Mapping[str, np.ndarray], requires_grad: frozenset[str]) -> dict[str, Tensor]:
        missing = [name for name in self.leaves if name not in bindings]
        if missing:
            raise UnboundLeafError(f"unbound leaves: {', '.join(sorted(missing))}")
        return {
            name: Tensor(bindings[name], requires_grad=name in requires_grad, op=f"leaf:{name}")
            for name in self.leaves
        }

    def _run(self, leaf_tensors: dict[str, Tensor]) -> dict[str, Tensor]:
        produced = self.build(leaf_tensors)
        missing = [name for name in self.outputs if name not in produced]
        if missing:
            raise UnboundLeafError(f"graph did not produce outputs: {', '.join(sorted(missing))}")
        return produced


def evaluate(graph: ComputationGraph, bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Run the graph forward; deterministic for identical bindings."""
    leaf_tensors = graph._bind(bindings, frozenset())
    produced = graph._run(leaf_tensors)
    return {name: np.array(produced[name].data) for name in graph.outputs}


def gradient(
    graph: ComputationGraph,
    bindings: Mapping[str, np.ndarray],
    wrt: set[str] | frozenset[str],
    output: str | None = None,
) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of a scalar output w.r.t. the named leaves."""
    wrt = frozenset(wrt)
    unknown = wrt - set(graph.leaves)
    if unknown:
        raise UnboundLeafError(f"gradient requested for unknown leaves: {', '.join(sorted(unknown))}")
    if output is None:
        if len(graph.outputs) != 1:
            raise NonScalarOutputError("graph has multiple outputs; name the one to differentiate")
        output = graph.outputs[0]
    leaf_tensors = graph._bind(bindings, wrt)
    produced = graph._run(leaf_tensors)
    out = produced[output]
    out.backward()
    grads = {}
    for name in wrt:
        leaf = leaf_tensors[name]
        grads[name] = np.array(leaf.grad) if leaf.grad is not None else np.zeros_like(leaf.data)
    return grads


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / (2h), per coordinate.

    The independent oracle for `gradient`: it never touches the reverse-mode
    machinery, only repeated forward evaluations of f.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
