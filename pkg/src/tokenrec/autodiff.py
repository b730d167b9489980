"""Reverse-mode autodiff over float64 numpy arrays on a linear tape.

The tape records every primitive in execution order. backward() walks the
records strictly in reverse, accumulating gradients. replay() reruns the
recorded forward program on the current leaf values, bit-exactly, which is
also what re-arms backward after a backward pass.

Primitives operate on arrays of any batch rank; matmul broadcasts leading
dims like numpy. Gradients for broadcast inputs are reduced back to the
input shape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .numeric import MASK_THRESHOLD, NumericsError, flops_note, matmul_mas


class Node:
    __slots__ = ("value", "index", "needs_grad")

    def __init__(self, value: np.ndarray, index: int, needs_grad: bool) -> None:
        self.value = value
        self.index = index
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape


class _Record:
    __slots__ = ("out", "inputs", "fwd", "bwd")

    def __init__(self, out, inputs, fwd, bwd) -> None:
        self.out = out
        self.inputs = inputs
        self.fwd = fwd
        self.bwd = bwd


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tape:
    """Linear record of differentiable array ops."""

    def __init__(self) -> None:
        self._nodes: list[Node] = []
        self._records: list[_Record] = []
        self._param_names: dict[str, int] = {}
        self._backward_done = False

    # -- leaves ------------------------------------------------------------

    def _new_node(self, value: np.ndarray, needs_grad: bool) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), len(self._nodes), needs_grad)
        self._nodes.append(node)
        return node

    def param(self, name: str, value: np.ndarray) -> Node:
        if name in self._param_names:
            raise NumericsError(f"parameter registered twice on tape: {name}")
        node = self._new_node(value, needs_grad=True)
        self._param_names[name] = node.index
        return node

    def constant(self, value: np.ndarray) -> Node:
        return self._new_node(value, needs_grad=False)

    # -- op plumbing --------------------------------------------------------

    def _apply(self, inputs: Sequence[Node], fwd: Callable, bwd: Callable) -> Node:
        values = [n.value for n in inputs]
        out = self._new_node(fwd(*values), needs_grad=any(n.needs_grad for n in inputs))
        self._records.append(_Record(out.index, tuple(n.index for n in inputs), fwd, bwd))
        return out

    # -- primitives ----------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        def fwd(av, bv):
            if av.shape[-1] != bv.shape[-2]:
                raise NumericsError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
            flops_note(matmul_mas(av.shape, bv.shape))
            if av.ndim > 2 and bv.ndim == 2:
                # one big dgemm instead of a loop of per-batch dgemms
                flat = av.reshape(-1, av.shape[-1]) @ bv
                return flat.reshape(av.shape[:-1] + (bv.shape[-1],))
            return np.matmul(av, bv)

        def bwd(g, out, av, bv, need):
            da = db = None
            if need[0]:
                if bv.ndim == 2:
                    da = (g.reshape(-1, g.shape[-1]) @ bv.T).reshape(av.shape)
                else:
                    da = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
            if need[1]:
                if bv.ndim == 2 and av.ndim > 2:
                    db = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    db = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
            return (da, db)

        return self._apply((a, b), fwd, bwd)

    def add(self, a: Node, b: Node) -> Node:
        def bwd(g, out, av, bv, need):
            return (
                _unbroadcast(g, av.shape) if need[0] else None,
                _unbroadcast(g, bv.shape) if need[1] else None,
            )

        return self._apply((a, b), lambda av, bv: av + bv, bwd)

    def mul(self, a: Node, b: Node) -> Node:
        def bwd(g, out, av, bv, need):
            return (
                _unbroadcast(g * bv, av.shape) if need[0] else None,
                _unbroadcast(g * av, bv.shape) if need[1] else None,
            )

        return self._apply((a, b), lambda av, bv: av * bv, bwd)

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._apply(
            (a,),
            lambda av: av * c,
            lambda g, out, av, need: (g * c if need[0] else None,),
        )

    def sigmoid(self, a: Node) -> Node:
        # tanh form: stable in both tails and a single vectorized pass
        def fwd(av):
            return 0.5 * (np.tanh(0.5 * av) + 1.0)

        def bwd(g, out, av, need):
            return (g * out * (1.0 - out) if need[0] else None,)

        return self._apply((a,), fwd, bwd)

    def swish(self, a: Node) -> Node:
        # bwd reads the sigmoid the forward stashed; replay reruns fwd and
        # refreshes the stash, so the pair stays consistent
        cell: dict = {}

        def fwd(av):
            s = 0.5 * (np.tanh(0.5 * av) + 1.0)
            cell["sig"] = s
            return av * s

        def bwd(g, out, av, need):
            if not need[0]:
                return (None,)
            s = cell["sig"]
            return (g * (s + av * s * (1.0 - s)),)

        return self._apply((a,), fwd, bwd)

    def rsqrt_mean_square(self, a: Node, eps: float) -> Node:
        """1/sqrt(mean(x^2, last axis) + eps), keepdims. The RMSNorm kernel."""
        eps = float(eps)

        def fwd(av):
            return 1.0 / np.sqrt(np.mean(np.square(av), axis=-1, keepdims=True) + eps)

        def bwd(g, out, av, need):
            if not need[0]:
                return (None,)
            d = av.shape[-1]
            coeff = g * (out * out * out)  # shape (..., 1), cheap before broadcast
            coeff *= -1.0 / d
            return (coeff * av,)

        return self._apply((a,), fwd, bwd)

    def softmax_masked(self, scores: Node, mask: np.ndarray | None = None) -> Node:
        """Softmax over the last axis; entries <= MASK_THRESHOLD are masked.

        `mask` is an optional constant additive term (broadcastable to the
        scores) folded into the forward pass; it receives no gradient. A
        fully masked row raises (empty visibility row) rather than
        producing NaN.
        """
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64)

        def fwd(sv):
            e = sv + mask if mask is not None else sv.copy()
            row_max = np.max(e, axis=-1, keepdims=True)
            if np.any(row_max <= MASK_THRESHOLD):
                raise NumericsError("empty visibility row: softmax over fully masked row")
            e -= row_max
            np.exp(e, out=e)
            e /= np.sum(e, axis=-1, keepdims=True)
            return e

        def bwd(g, out, sv, need):
            if not need[0]:
                return (None,)
            dot = np.einsum("...j,...j->...", out, g)[..., None]
            t = g - dot
            t *= out
            return (t,)

        return self._apply((scores,), fwd, bwd)

    def rope(self, x: Node, cos: np.ndarray, sin: np.ndarray) -> Node:
        """Rotate consecutive coordinate pairs (2j, 2j+1) of the last axis.

        cos/sin have shape broadcastable to x[..., ::2]; they are captured
        constants, not tape nodes.
        """
        cos = np.asarray(cos, dtype=np.float64)
        sin = np.asarray(sin, dtype=np.float64)

        def fwd(xv):
            x1 = xv[..., 0::2]
            x2 = xv[..., 1::2]
            out = np.empty_like(xv)
            out[..., 0::2] = x1 * cos - x2 * sin
            out[..., 1::2] = x1 * sin + x2 * cos
            return out

        def bwd(g, out, xv, need):
            if not need[0]:
                return (None,)
            g1 = g[..., 0::2]
            g2 = g[..., 1::2]
            dx = np.empty_like(g)
            dx[..., 0::2] = g1 * cos + g2 * sin
            dx[..., 1::2] = -g1 * sin + g2 * cos
            return (dx,)

        return self._apply((x,), fwd, bwd)

    def gather(self, table: Node, indices: np.ndarray) -> Node:
        """Row gather along axis 0; backward scatter-adds into the table."""
        idx = np.asarray(indices, dtype=np.int64)

        def fwd(tv):
            if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
                raise NumericsError(
                    f"gather index out of range for table with {tv.shape[0]} rows"
                )
            return tv[idx]

        def bwd(g, out, tv, need):
            if not need[0]:
                return (None,)
            dt = np.zeros_like(tv)
            np.add.at(dt, idx, g)
            return (dt,)

        return self._apply((table,), fwd, bwd)

    def concat(self, parts: Sequence[Node], axis: int = 0) -> Node:
        sizes = [p.value.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def fwd(*vals):
            return np.concatenate(vals, axis=axis)

        def bwd(g, out, *rest):
            vals, need = rest[:-1], rest[-1]
            grads = []
            for i in range(len(vals)):
                if need[i]:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(offsets[i], offsets[i + 1])
                    grads.append(np.ascontiguousarray(g[tuple(sl)]))
                else:
                    grads.append(None)
            return tuple(grads)

        return self._apply(tuple(parts), fwd, bwd)

    def reshape(self, a: Node, shape: tuple) -> Node:
        shape = tuple(shape)
        return self._apply(
            (a,),
            lambda av: np.reshape(av, shape),
            lambda g, out, av, need: (np.reshape(g, av.shape) if need[0] else None,),
        )

    def transpose(self, a: Node, axes: tuple) -> Node:
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return self._apply(
            (a,),
            lambda av: np.transpose(av, axes),
            lambda g, out, av, need: (np.transpose(g, inv) if need[0] else None,),
        )

    def cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        """Mean negative log-likelihood of integer labels; returns a 0-d node."""
        lab = np.asarray(labels, dtype=np.int64)
        if lab.ndim != 1:
            raise NumericsError(f"labels must be 1-D, got shape {lab.shape}")
        if lab.size == 0:
            raise NumericsError("empty supervision set: no positions carry loss")

        def fwd(lv):
            if lv.ndim != 2 or lv.shape[0] != lab.shape[0]:
                raise NumericsError(
                    f"logits shape {lv.shape} does not match {lab.shape[0]} labels"
                )
            if lab.min() < 0 or lab.max() >= lv.shape[1]:
                raise NumericsError("label outside action vocabulary")
            m = np.max(lv, axis=1, keepdims=True)
            z = lv - m
            lse = np.log(np.sum(np.exp(z), axis=1))
            picked = z[np.arange(lab.shape[0]), lab]
            return np.asarray(np.mean(lse - picked))

        def bwd(g, out, lv, need):
            if not need[0]:
                return (None,)
            m = np.max(lv, axis=1, keepdims=True)
            e = np.exp(lv - m)
            p = e / np.sum(e, axis=1, keepdims=True)
            p[np.arange(lab.shape[0]), lab] -= 1.0
            return (p * (float(g) / lab.shape[0]),)

        return self._apply((logits,), fwd, bwd)

    # -- driver ---------------------------------------------------------------

    def backward(self, out: Node) -> None:
        """Accumulate gradients of `out` (a 0-d node) into the tape."""
        if self._backward_done:
            raise NumericsError(
                "backward requested twice without re-forward (replay the tape first)"
            )
        if out.value.ndim != 0:
            raise NumericsError("backward target must be a scalar node")
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[out.index] = np.ones_like(out.value)
        for rec in reversed(self._records):
            g = grads[rec.out]
            if g is None:
                continue
            in_nodes = [self._nodes[i] for i in rec.inputs]
            need = tuple(n.needs_grad for n in in_nodes)
            if not any(need):
                continue
            contribs = rec.bwd(g, self._nodes[rec.out].value, *[n.value for n in in_nodes], need)
            for idx, c in zip(rec.inputs, contribs):
                if c is None:
                    continue
                if grads[idx] is None:
                    grads[idx] = c
                else:
                    grads[idx] = grads[idx] + c
        self._grads = grads
        self._backward_done = True

    def grad(self, node: Node) -> np.ndarray:
        if not self._backward_done:
            raise NumericsError("no backward pass has run")
        g = self._grads[node.index]
        return np.zeros_like(node.value) if g is None else g

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradient per named parameter; zeros for parameters off the loss path."""
        return {name: self.grad(self._nodes[idx]) for name, idx in self._param_names.items()}

    def param_node(self, name: str) -> Node:
        """The leaf node registered under `name`."""
        if name not in self._param_names:
            raise NumericsError(f"no parameter named {name} on tape")
        return self._nodes[self._param_names[name]]

    def replay(self, changed: Sequence[Node] | None = None) -> None:
        """Recompute recorded ops in order on current leaf values.

        With `changed`, only ops downstream of those leaf nodes are
        recomputed; callers pass it after modifying a leaf's array in
        place, and every other node keeps its stored value.
        """
        if changed is None:
            for rec in self._records:
                vals = [self._nodes[i].value for i in rec.inputs]
                self._nodes[rec.out].value = rec.fwd(*vals)
        else:
            affected = bytearray(len(self._nodes))
            for n in changed:
                affected[n.index] = 1
            for rec in self._records:
                if any(affected[i] for i in rec.inputs):
                    vals = [self._nodes[i].value for i in rec.inputs]
                    self._nodes[rec.out].value = rec.fwd(*vals)
                    affected[rec.out] = 1
        self._backward_done = False


def grad(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Backward pass returning {param name: gradient}."""
    tape.backward(loss)
    return tape.gradients()
