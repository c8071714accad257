"""Dense float64 kernels and a minimal reverse-mode gradient tape.

Tensors are plain ``numpy.ndarray`` values (row-major float64); every
public operation validates shapes and finiteness so NaN/Inf never leak
silently into a training run. The :class:`GradTape` records primitive
ops eagerly and replays them in reverse for gradients; a tape is built
once, differentiated once, and thrown away.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "ContractError",
    "NumericError",
    "matmul",
    "elementwise",
    "GradTape",
    "backward",
    "AdamState",
    "adam_init",
    "adam_step",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class DomainError(ValueError):
    """Operand values lie outside an operation's numeric domain."""


class ContractError(ValueError):
    """An API precondition was violated."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


def _as_tensor(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise DomainError("tensor contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product of two 2-d tensors with explicit shape checking."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("matmul overflowed to non-finite values")
    return out


_UNARY = {
    "tanh": np.tanh,
    "exp": np.exp,
    "neg": np.negative,
    "log": np.log,
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def _broadcast_ok(a: np.ndarray, b: np.ndarray) -> bool:
    # Only scalar-vs-tensor and equal-shape broadcasting are supported.
    return a.shape == b.shape or a.size == 1 or b.size == 1


def elementwise(op: str, *args) -> np.ndarray:
    """Pointwise op in {add, sub, mul, tanh, exp, log, neg}.

    log of a non-positive input raises :class:`DomainError` instead of
    producing NaN; any op whose result overflows raises
    :class:`NumericError`.
    """
    if op in _UNARY:
        if len(args) != 1:
            raise ContractError(f"{op} takes one argument")
        a = _as_tensor(args[0])
        if op == "log" and np.any(a <= 0.0):
            raise DomainError("log of non-positive input")
        with np.errstate(over="ignore"):
            out = _UNARY[op](a)
    elif op in _BINARY:
        if len(args) != 2:
            raise ContractError(f"{op} takes two arguments")
        a = _as_tensor(args[0])
        b = _as_tensor(args[1])
        if not _broadcast_ok(a, b):
            raise ShapeError(
                f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar"
            )
        with np.errstate(over="ignore"):
            out = _BINARY[op](a, b)
    else:
        raise ContractError(f"unknown elementwise op {op!r}")
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    return out


class _Node:
    __slots__ = ("op", "inputs", "value", "aux")

    def __init__(self, op, inputs, value, aux=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.aux = aux


class GradTape:
    """Eager computation tape with one reverse pass.

    Nodes are appended in topological order by construction. Leaves are
    either constants or parameters; ``parameters`` collects the ids of
    trainable leaves so callers can fetch their gradients after
    :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.parameters: set[int] = set()

    # -- leaves ----------------------------------------------------------

    def _push(self, op, inputs, value, aux=None) -> int:
        self.nodes.append(_Node(op, inputs, value, aux))
        return len(self.nodes) - 1

    def constant(self, value) -> int:
        return self._push("const", (), np.asarray(value, dtype=np.float64))

    def parameter(self, value) -> int:
        nid = self._push("param", (), np.asarray(value, dtype=np.float64))
        self.parameters.add(nid)
        return nid

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    # -- primitives ------------------------------------------------------

    def _val(self, nid: int) -> np.ndarray:
        if not 0 <= nid < len(self.nodes):
            raise ContractError(f"node {nid} is not on this tape")
        return self.nodes[nid].value

    def add(self, a, b):
        va, vb = self._val(a), self._val(b)
        if not _broadcast_ok(va, vb):
            raise ShapeError(f"add: shapes {va.shape} and {vb.shape}")
        return self._push("add", (a, b), va + vb)

    def sub(self, a, b):
        va, vb = self._val(a), self._val(b)
        if not _broadcast_ok(va, vb):
            raise ShapeError(f"sub: shapes {va.shape} and {vb.shape}")
        return self._push("sub", (a, b), va - vb)

    def mul(self, a, b):
        va, vb = self._val(a), self._val(b)
        if not _broadcast_ok(va, vb):
            raise ShapeError(f"mul: shapes {va.shape} and {vb.shape}")
        return self._push("mul", (a, b), va * vb)

    def neg(self, a):
        return self._push("neg", (a,), -self._val(a))

    def tanh(self, a):
        return self._push("tanh", (a,), np.tanh(self._val(a)))

    def exp(self, a):
        return self._push("exp", (a,), np.exp(self._val(a)))

    def log(self, a):
        va = self._val(a)
        if np.any(va <= 0.0):
            raise DomainError("log of non-positive input")
        return self._push("log", (a,), np.log(va))

    def matmul(self, a, b):
        va, vb = self._val(a), self._val(b)
        if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
            raise ShapeError(f"matmul: shapes {va.shape} x {vb.shape}")
        return self._push("matmul", (a, b), va @ vb)

    def bias_add(self, mat, vec):
        """Row-broadcast add of a length-h vector onto an (n, h) matrix."""
        vm, vv = self._val(mat), self._val(vec)
        if vm.ndim != 2 or vv.shape != (vm.shape[1],):
            raise ShapeError(f"bias_add: shapes {vm.shape} and {vv.shape}")
        return self._push("bias_add", (mat, vec), vm + vv)

    def gather_cols(self, a, idx):
        """Column permutation; idx must be a permutation of range(d)."""
        va = self._val(a)
        idx = np.asarray(idx, dtype=np.intp)
        return self._push("gather_cols", (a,), va[..., idx], aux=idx)

    def clip(self, a, lo: float, hi: float):
        va = self._val(a)
        return self._push("clip", (a,), np.clip(va, lo, hi), aux=(lo, hi))

    def sum(self, a):
        return self._push("sum", (a,), np.asarray(np.sum(self._val(a))))

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss node.

        Returns gradients for every node reached in the sweep, keyed by
        node id. Node values are never mutated, so a second call yields
        bit-identical results.
        """
        lv = self._val(loss)
        if lv.size != 1:
            raise ContractError(f"loss must be scalar, got shape {lv.shape}")
        grads: dict[int, np.ndarray] = {loss: np.ones_like(lv)}

        def accumulate(nid, g, shape):
            # unbroadcast a gradient back onto a scalar operand
            if g.shape != shape:
                g = np.asarray(np.sum(g)).reshape(shape)
            if nid in grads:
                grads[nid] = grads[nid] + g
            else:
                grads[nid] = g

        for nid in range(loss, -1, -1):
            if nid not in grads:
                continue
            node = self.nodes[nid]
            g = grads[nid]
            op = node.op
            if op in ("const", "param"):
                continue
            if op == "add":
                a, b = node.inputs
                accumulate(a, g, self.nodes[a].value.shape)
                accumulate(b, g, self.nodes[b].value.shape)
            elif op == "sub":
                a, b = node.inputs
                accumulate(a, g, self.nodes[a].value.shape)
                accumulate(b, -g, self.nodes[b].value.shape)
            elif op == "mul":
                a, b = node.inputs
                accumulate(a, g * self.nodes[b].value, self.nodes[a].value.shape)
                accumulate(b, g * self.nodes[a].value, self.nodes[b].value.shape)
            elif op == "neg":
                (a,) = node.inputs
                accumulate(a, -g, self.nodes[a].value.shape)
            elif op == "tanh":
                (a,) = node.inputs
                accumulate(a, g * (1.0 - node.value * node.value),
                           self.nodes[a].value.shape)
            elif op == "exp":
                (a,) = node.inputs
                accumulate(a, g * node.value, self.nodes[a].value.shape)
            elif op == "log":
                (a,) = node.inputs
                accumulate(a, g / self.nodes[a].value, self.nodes[a].value.shape)
            elif op == "matmul":
                a, b = node.inputs
                accumulate(a, g @ self.nodes[b].value.T, self.nodes[a].value.shape)
                accumulate(b, self.nodes[a].value.T @ g, self.nodes[b].value.shape)
            elif op == "bias_add":
                m, v = node.inputs
                accumulate(m, g, self.nodes[m].value.shape)
                accumulate(v, g.sum(axis=0), self.nodes[v].value.shape)
            elif op == "gather_cols":
                (a,) = node.inputs
                idx = node.aux
                ga = np.zeros_like(self.nodes[a].value)
                ga[..., idx] = g
                accumulate(a, ga, ga.shape)
            elif op == "clip":
                (a,) = node.inputs
                lo, hi = node.aux
                va = self.nodes[a].value
                accumulate(a, g * ((va >= lo) & (va <= hi)), va.shape)
            elif op == "sum":
                (a,) = node.inputs
                accumulate(a, np.broadcast_to(g, self.nodes[a].value.shape).copy(),
                           self.nodes[a].value.shape)
            else:  # pragma: no cover
                raise ContractError(f"no gradient rule for op {op!r}")
        return grads


def backward(tape: GradTape, loss: int) -> dict[int, np.ndarray]:
    """Functional alias for :meth:`GradTape.backward`."""
    return tape.backward(loss)


class AdamState:
    """First/second moment accumulators plus the step counter."""

    def __init__(self, m, v, step=0):
        self.m = m
        self.v = v
        self.step = step


def adam_init(params) -> AdamState:
    return AdamState([np.zeros_like(p) for p in params],
                     [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One Adam update with bias correction; returns (new_params, state)."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and state must have matching lengths")
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(
                f"param {i}: shapes {p.shape}, grad {g.shape}, "
                f"moment {state.m[i].shape} disagree"
            )
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / (1.0 - beta1 ** t)
        v_hat = state.v[i] / (1.0 - beta2 ** t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out, state
