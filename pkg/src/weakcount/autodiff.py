"""Minimal reverse-mode autodiff over dense float64 arrays.

Provides exactly the operations a small convolutional density regressor
needs: same-padded 2-D convolution (optionally dilated), convolution with a
fixed non-trainable kernel, ReLU, reductions, scalar arithmetic, a
stop-gradient primitive, and an Adam optimizer. Graphs are rebuilt on every
forward pass (define-by-run); ``backward`` walks the recorded parents once
in reverse topological order.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Adam",
    "add",
    "scale",
    "relu",
    "sum_all",
    "abs_scalar",
    "sq_diff_sum",
    "conv2d",
    "kernel_convolve",
    "detach",
    "backward",
]


class Tensor:
    """A value node in the implicit tape: float64 data plus an accumulated grad.

    ``requires_grad`` marks trainable leaves; op outputs inherit it from their
    parents. Gradients accumulate into ``grad`` during :func:`backward` and
    only into tensors that require grad.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, parents=(), backprop=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backprop = backprop
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data, parents, backprop) -> Tensor:
    # Prune branches no gradient can reach: the output is then a plain leaf.
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backprop=backprop)
    return Tensor(data)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of identical shape."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backprop(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _make(a.data + b.data, (a, b), backprop)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply a tensor by a constant real."""
    c = float(c)

    def backprop(g):
        if x.requires_grad:
            x.grad += c * g

    return _make(c * x.data, (x,), backprop)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backprop(g):
        if x.requires_grad:
            x.grad += g * (out > 0.0)

    return _make(out, (x,), backprop)


def sum_all(x: Tensor) -> Tensor:
    """Sum over all elements; the discrete integral of a density map."""

    def backprop(g):
        if x.requires_grad:
            x.grad += g

    return _make(np.asarray(x.data.sum()), (x,), backprop)


def abs_scalar(x: Tensor) -> Tensor:
    """Absolute value of a scalar tensor; subgradient at 0 is fixed to 0."""
    if x.data.ndim != 0:
        raise ValueError(f"abs_scalar: expected a scalar, got shape {x.data.shape}")

    def backprop(g):
        if x.requires_grad:
            x.grad += np.sign(x.data) * g

    return _make(np.abs(x.data), (x,), backprop)


def sq_diff_sum(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences over all elements."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"sq_diff_sum: shape mismatch {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data

    def backprop(g):
        if a.requires_grad:
            a.grad += 2.0 * g * diff
        if b.requires_grad:
            b.grad -= 2.0 * g * diff

    return _make(np.asarray((diff * diff).sum()), (a, b), backprop)


def _im2col(x: np.ndarray, kh: int, kw: int, dilation: int):
    """Unfold (C,H,W) into (C*kh*kw, H*W) patch columns under same-size zero padding."""
    c, h, w = x.shape
    ph = dilation * (kh - 1) // 2
    pw = dilation * (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    taps = np.lib.stride_tricks.sliding_window_view(xp, (h, w), axis=(1, 2))
    taps = taps[:, ::dilation, ::dilation]  # (c, kh, kw, h, w)
    return np.ascontiguousarray(taps).reshape(c * kh * kw, h * w)


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, dilation: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch columns back onto (C,H,W)."""
    c, h, w = shape
    ph = dilation * (kh - 1) // 2
    pw = dilation * (kw - 1) // 2
    dxp = np.zeros((c, h + 2 * ph, w + 2 * pw))
    dtaps = dcols.reshape(c, kh, kw, h, w)
    for a in range(kh):
        for b in range(kw):
            dxp[:, a * dilation:a * dilation + h, b * dilation:b * dilation + w] += dtaps[:, a, b]
    if ph or pw:
        return dxp[:, ph:ph + h, pw:pw + w]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Same-padded stride-1 cross-correlation of (C_in,H,W) with (C_out,C_in,kH,kW).

    Gradients flow to input, weight, and bias. Kernel sides must be odd so the
    zero padding preserves the spatial size exactly.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4 or bias.data.ndim != 1:
        raise ValueError("conv2d: expected input (C,H,W), weight (O,C,kH,kW), bias (O,)")
    c_out, c_in, kh, kw = weight.data.shape
    if x.data.shape[0] != c_in:
        raise ValueError(f"conv2d: input has {x.data.shape[0]} channels, weight expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel sides must be odd, got {kh}x{kw}")
    if bias.data.shape[0] != c_out:
        raise ValueError(f"conv2d: bias has {bias.data.shape[0]} entries, weight expects {c_out}")
    dilation = int(dilation)
    if dilation < 1:
        raise ValueError("conv2d: dilation must be >= 1")

    _, h, w = x.data.shape
    cols = _im2col(x.data, kh, kw, dilation)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols + bias.data[:, None]).reshape(c_out, h, w)

    def backprop(g):
        gmat = g.reshape(c_out, -1)
        if weight.requires_grad:
            weight.grad += (gmat @ cols.T).reshape(weight.data.shape)
        if bias.requires_grad:
            bias.grad += gmat.sum(axis=1)
        if x.requires_grad:
            x.grad += _col2im(wmat.T @ gmat, x.data.shape, kh, kw, dilation)

    return _make(out, (x, weight, bias), backprop)


def kernel_convolve(x: Tensor, kernel) -> Tensor:
    """Same-padded cross-correlation of a (1,H,W) map with a constant 2-D kernel.

    The kernel is a fixed grid, never a graph node: gradients flow to the
    input only.
    """
    k = np.asarray(kernel, dtype=np.float64)
    if x.data.ndim != 3 or x.data.shape[0] != 1:
        raise ValueError(f"kernel_convolve: expected a (1,H,W) map, got {x.data.shape}")
    if k.ndim != 2:
        raise ValueError(f"kernel_convolve: kernel must be 2-D, got shape {k.shape}")
    kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel_convolve: kernel sides must be odd, got {kh}x{kw}")

    _, h, w = x.data.shape
    cols = _im2col(x.data, kh, kw, 1)
    out = (k.reshape(1, -1) @ cols).reshape(1, h, w)

    def backprop(g):
        if x.requires_grad:
            dcols = k.reshape(-1, 1) @ g.reshape(1, -1)
            x.grad += _col2im(dcols, x.data.shape, kh, kw, 1)

    return _make(out, (x,), backprop)


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: same data, no history; backward through consumers
    contributes nothing to ``x`` or its ancestors."""
    return Tensor(x.data)


def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar loss.

    Zeroes the grads of every reachable tensor first, then seeds the loss
    grad with 1 and visits each node exactly once in reverse topological
    order. A second call on the same loss (without re-running the forward
    pass) is rejected.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._backward_ran:
        raise RuntimeError("backward: already ran for this graph; rebuild the forward pass")
    loss._backward_ran = True

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    for node in topo:
        node.grad[...] = 0.0
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backprop is not None:
            node._backprop(node.grad)


class Adam(object):
    """Adam with bias correction over a fixed parameter list.

    ``step`` applies the update from the currently accumulated grads and
    zeroes them afterwards. Moment arrays mirror the parameter shapes and
    ``step_count`` increases by one per applied step.
    """

    def __init__(self, params, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        if learning_rate <= 0 or epsilon <= 0:
            raise ValueError("Adam: learning_rate and epsilon must be positive")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("Adam: betas must lie in [0, 1)")
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.second_moment = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.first_moment, self.second_moment):
            if p.data.shape != m.shape:
                raise ValueError(
                    f"Adam: parameter shape {p.data.shape} no longer matches state {m.shape}")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            p.grad[...] = 0.0
