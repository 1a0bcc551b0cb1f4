"""Differentiable operations over :class:`saane.tensor.Tensor`.

Feature maps are ``C x H x W``. Broadcasting aligns axes from the left, so a
length-``C`` vector multiplies every position of a ``C x H x W`` map, and a
``1 x H x W`` map multiplies every channel.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from typing_extensions import Literal

from .tensor import ShapeError, Tensor, record

__all__ = [
    "PoolMode",
    "conv2d",
    "pool_spatial",
    "pool_channel",
    "matvec",
    "mlp2",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul_broadcast",
    "add_scalar",
    "scale",
    "concat",
    "stack",
    "mean",
    "sum_all",
    "l2_distance",
    "stable_sigmoid",
]

#: The reducers available to pooling operations
PoolMode = Literal["avg", "max"]


def _check_mode(mode: str) -> None:
    if mode not in ("avg", "max"):
        raise ValueError(f"invalid pooling mode: {mode!r} (expected 'avg' or 'max')")


def _check_map(tensor: Tensor, name: str = "input") -> None:
    if tensor.ndim != 3:
        raise ShapeError(f"{name} must be a C x H x W feature map, got shape {tensor.shape}")


def conv2d(
    x: Tensor, weights: Tensor, padding: int, bias: Optional[Tensor] = None
) -> Tensor:
    """Cross-correlate a feature map with a bank of square filters, zero-padded.

    :param x: A ``C_in x H x W`` feature map
    :param weights: A ``C_out x C_in x K x K`` filter bank with odd ``K``
    :param padding: Must equal ``(K - 1) / 2`` so that the output keeps ``H x W``
    :param bias: An optional length ``C_out`` bias
    :returns: A ``C_out x H x W`` feature map
    :raises ShapeError: if the shapes are inconsistent
    """
    _check_map(x)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ShapeError(f"weights must be C_out x C_in x K x K, got shape {weights.shape}")
    c_out, c_in, k, _ = weights.shape
    if k % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got weights of shape {weights.shape}")
    if padding != (k - 1) // 2:
        raise ShapeError(f"padding must be {(k - 1) // 2} for kernel size {k}, got {padding}")
    if c_in != x.shape[0]:
        raise ShapeError(
            f"weights of shape {weights.shape} do not match input of shape {x.shape}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias of shape {bias.shape} does not match weights of shape {weights.shape}")

    w = weights.data
    if k == 1:
        matrix = w[:, :, 0, 0]
        out = np.tensordot(matrix, x.data, axes=(1, 0))
        windows = None
    else:
        padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(padded, (k, k), axis=(1, 2))
        out = np.einsum("oikl,ihwkl->ohw", w, windows, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(grad: np.ndarray) -> List[Optional[np.ndarray]]:
        if k == 1:
            grad_w = np.tensordot(grad, x.data, axes=((1, 2), (1, 2)))[:, :, None, None]
            grad_x = np.tensordot(w[:, :, 0, 0], grad, axes=(0, 0))
        else:
            grad_w = np.einsum("ohw,ihwkl->oikl", grad, windows, optimize=True)
            padded_grad = np.pad(grad, ((0, 0), (padding, padding), (padding, padding)))
            grad_windows = sliding_window_view(padded_grad, (k, k), axis=(1, 2))
            grad_x = np.einsum(
                "ohwkl,oikl->ihw", grad_windows, w[:, :, ::-1, ::-1], optimize=True
            )
        rv = [grad_x, grad_w]
        if bias is not None:
            rv.append(grad.sum(axis=(1, 2)))
        return rv

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return record(out, inputs, backward)


def pool_spatial(x: Tensor, mode: PoolMode) -> Tensor:
    """Reduce each channel over all ``H x W`` positions, giving a length ``C`` vector."""
    _check_map(x)
    _check_mode(mode)
    c, h, w = x.shape
    flat = x.data.reshape(c, h * w)
    if mode == "avg":
        out = flat.mean(axis=1)

        def backward(grad: np.ndarray) -> List[np.ndarray]:
            return [np.broadcast_to(grad[:, None, None] / (h * w), x.shape).copy()]

    else:
        index = flat.argmax(axis=1)
        out = flat[np.arange(c), index]

        def backward(grad: np.ndarray) -> List[np.ndarray]:
            rv = np.zeros_like(flat)
            rv[np.arange(c), index] = grad
            return [rv.reshape(x.shape)]

    return record(out, (x,), backward)


def pool_channel(x: Tensor, mode: PoolMode) -> Tensor:
    """Reduce over the channels at every position, giving a ``1 x H x W`` map."""
    _check_map(x)
    _check_mode(mode)
    c = x.shape[0]
    if mode == "avg":
        out = x.data.mean(axis=0, keepdims=True)

        def backward(grad: np.ndarray) -> List[np.ndarray]:
            return [np.broadcast_to(grad / c, x.shape).copy()]

    else:
        index = x.data.argmax(axis=0)[None]
        out = np.take_along_axis(x.data, index, axis=0)

        def backward(grad: np.ndarray) -> List[np.ndarray]:
            rv = np.zeros_like(x.data)
            np.put_along_axis(rv, index, grad, axis=0)
            return [rv]

    return record(out, (x,), backward)


def matvec(w: Tensor, x: Tensor) -> Tensor:
    """Multiply an ``M x N`` matrix by a length ``N`` vector."""
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot multiply matrix of shape {w.shape} by vector of shape {x.shape}")

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [np.outer(grad, x.data), w.data.T @ grad]

    return record(w.data @ x.data, (w, x), backward)


def relu(x: Tensor) -> Tensor:
    """Clamp negative values to zero."""
    mask = x.data > 0

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [grad * mask]

    return record(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), backward)


def stable_sigmoid(values: np.ndarray) -> np.ndarray:
    """Evaluate the logistic function without overflowing for large magnitudes.

    The result lies strictly inside (0, 1) even where the logistic rounds to 0 or 1.
    """
    values = np.asarray(values)
    dtype = values.dtype if np.issubdtype(values.dtype, np.floating) else np.dtype(np.float64)
    z = np.exp(-np.abs(values))
    out = np.where(values >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(dtype, copy=False)
    low = np.nextafter(dtype.type(0), dtype.type(1))
    high = np.nextafter(dtype.type(1), dtype.type(0))
    return np.clip(out, low, high)


def sigmoid(x: Tensor) -> Tensor:
    """Apply the logistic function elementwise."""
    out = stable_sigmoid(x.data)

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [grad * out * (1.0 - out)]

    return record(out, (x,), backward)


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Apply a two-layer perceptron with a rectified hidden layer and a linear output.

    :returns: ``w2 . relu(w1 . x + b1) + b2``
    """
    if w1.ndim != 2 or b1.shape != (w1.shape[0],):
        raise ShapeError(f"hidden layer weights {w1.shape} and bias {b1.shape} are inconsistent")
    if w2.ndim != 2 or w2.shape[1] != w1.shape[0] or b2.shape != (w2.shape[0],):
        raise ShapeError(
            f"output layer weights {w2.shape} and bias {b2.shape} do not follow hidden layer {w1.shape}"
        )
    hidden = relu(add(matvec(w1, x), b1))
    return add(matvec(w2, hidden), b2)


def _aligned(a_shape: Tuple[int, ...], b_shape: Tuple[int, ...]):
    ndim = max(len(a_shape), len(b_shape))
    a_aligned = tuple(a_shape) + (1,) * (ndim - len(a_shape))
    b_aligned = tuple(b_shape) + (1,) * (ndim - len(b_shape))
    out_shape = []
    for a_extent, b_extent in zip(a_aligned, b_aligned):
        if a_extent != b_extent and a_extent != 1 and b_extent != 1:
            raise ShapeError(f"shapes {a_shape} and {b_shape} are not broadcastable")
        out_shape.append(max(a_extent, b_extent))
    return a_aligned, b_aligned, tuple(out_shape)


def _unbroadcast(grad: np.ndarray, aligned: Tuple[int, ...], shape: Tuple[int, ...]) -> np.ndarray:
    axes = tuple(
        axis for axis, extent in enumerate(aligned) if extent == 1 and grad.shape[axis] != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a: Tensor, b: Tensor, forward, grad_a, grad_b) -> Tensor:
    a_aligned, b_aligned, _ = _aligned(a.shape, b.shape)
    a_data = a.data.reshape(a_aligned)
    b_data = b.data.reshape(b_aligned)

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [
            _unbroadcast(grad_a(grad, a_data, b_data), a_aligned, a.shape),
            _unbroadcast(grad_b(grad, a_data, b_data), b_aligned, b.shape),
        ]

    return record(forward(a_data, b_data), (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Add two tensors elementwise with broadcasting."""
    return _binary(
        a,
        b,
        np.add,
        lambda grad, _a, _b: grad,
        lambda grad, _a, _b: grad,
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Subtract two tensors elementwise with broadcasting."""
    return _binary(
        a,
        b,
        np.subtract,
        lambda grad, _a, _b: grad,
        lambda grad, _a, _b: -grad,
    )


def mul_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Multiply two tensors elementwise, copying values along size-1 axes."""
    return _binary(
        a,
        b,
        np.multiply,
        lambda grad, _a, b_data: grad * b_data,
        lambda grad, a_data, _b: grad * a_data,
    )


def add_scalar(x: Tensor, value: float) -> Tensor:
    """Add a constant to every element."""

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [grad]

    return record((x.data + value).astype(x.dtype, copy=False), (x,), backward)


def scale(x: Tensor, value: float) -> Tensor:
    """Multiply every element by a constant."""

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [grad * value]

    return record((x.data * value).astype(x.dtype, copy=False), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    if not tensors:
        raise ShapeError("cannot concatenate an empty sequence of tensors")
    try:
        out = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    except ValueError as e:
        shapes = ", ".join(str(tensor.shape) for tensor in tensors)
        raise ShapeError(f"cannot concatenate shapes {shapes} along axis {axis}") from e
    boundaries = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return list(np.split(grad, boundaries, axis=axis))

    return record(out, tuple(tensors), backward)


def stack(scalars: Sequence[Tensor]) -> Tensor:
    """Collect single-element tensors into a vector."""
    if not scalars:
        raise ShapeError("cannot stack an empty sequence of tensors")
    for tensor in scalars:
        if tensor.data.size != 1:
            raise ShapeError(f"can only stack single-element tensors, got shape {tensor.shape}")
    out = np.array([tensor.data.reshape(-1)[0] for tensor in scalars])

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [np.full(tensor.shape, grad[i], dtype=grad.dtype) for i, tensor in enumerate(scalars)]

    return record(out, tuple(scalars), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a scalar."""

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [np.full(x.shape, grad, dtype=x.dtype)]

    return record(np.asarray(x.data.sum()), (x,), backward)


def mean(x: Tensor) -> Tensor:
    """Average every element into a scalar."""
    n = x.data.size

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [np.full(x.shape, grad / n, dtype=x.dtype)]

    return record(np.asarray(x.data.mean()), (x,), backward)


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Get the Euclidean distance between two tensors of identical shape.

    The gradient at zero distance is taken to be zero.
    """
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    distance = np.sqrt(np.sum(diff * diff))

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        if distance == 0:
            zero = np.zeros_like(diff)
            return [zero, zero]
        direction = diff * (grad / distance)
        return [direction, -direction]

    return record(np.asarray(distance), (a, b), backward)
