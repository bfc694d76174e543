"""Reference implementations used to check simulator output bit-for-bit.

Nothing here touches the fabric.  Every reduction is an explicit left fold
in single precision, so the order of operands is part of the contract:

* dot products (matmul, convolution) start from the first product and add
  the rest in the order given (ascending index unless an order is passed);
* max-pooling keeps the first value of its window and replaces it only when
  a later value is strictly greater (so NaN never wins and -0.0 survives
  against +0.0 if it arrived first);
* dense layers, which run on the host, start their sums from +0.0.
"""

from __future__ import annotations

import numpy as np

from .workloads import CnnSpec, ShapeError, as_f32

F32 = np.float32


def _fold_products(terms: list[np.ndarray]) -> np.ndarray:
    """Sum equal-shape product arrays left to right in float32 (first term is the seed)."""
    acc = terms[0].astype(F32)
    with np.errstate(all="ignore"):
        for t in terms[1:]:
            acc = (acc + t).astype(F32)
    return acc


def matmul_ref(a, b, order=None) -> np.ndarray:
    """Single-precision A @ B; ``order`` lists the k indices in summation order."""
    a = as_f32(a, 2, "A")
    b = as_f32(b, 2, "B")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    ks = list(range(a.shape[1])) if order is None else list(order)
    if sorted(ks) != list(range(a.shape[1])):
        raise ValueError("order must be a permutation of the inner dimension")
    with np.errstate(all="ignore"):
        terms = [np.outer(a[:, k], b[k, :]).astype(F32) for k in ks]
    return _fold_products(terms)


def conv_ref(images, filters, stride: int = 1, padding: int = 0, order=None) -> np.ndarray:
    """Cross-correlation of (B,C,H,W) images with (F,C,k,k) filters -> (B,F,Ho,Wo).

    Terms are folded in (channel, kernel row, kernel column) order by default.
    """
    x = as_f32(images, name="images")
    w = as_f32(filters, name="filters")
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if w.ndim == 3:
        w = w[:, None]
    bsz, c, h, wd = x.shape
    f, c2, k, k2 = w.shape
    if c2 != c or k != k2:
        raise ShapeError(f"filters {w.shape} do not match images {x.shape}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("filter larger than padded image")
    idx = [(ci, ky, kx) for ci in range(c) for ky in range(k) for kx in range(k)]
    if order is not None:
        idx = [idx[i] for i in order]
    terms = []
    with np.errstate(all="ignore"):
        for ci, ky, kx in idx:
            patch = x[:, ci, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride]
            terms.append((patch[:, None, :, :] * w[None, :, ci, ky, kx, None, None]).astype(F32))
    return _fold_products(terms)


def conv2d_ref(image, filt, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Single image, single filter: (H,W) * (k,k) -> (Ho,Wo)."""
    return conv_ref(as_f32(image, 2)[None, None], as_f32(filt, 2)[None, None], stride, padding)[0, 0]


def conv3d_ref(images, filters, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Multi-channel convolution: (B,C,H,W) * (F,C,k,k) -> (B,F,Ho,Wo)."""
    return conv_ref(as_f32(images, 4), as_f32(filters, 4), stride, padding)


def relu_ref(x) -> np.ndarray:
    x = as_f32(x)
    return np.where(x > 0, x, F32(0.0)).astype(F32)


def maxpool_ref(x, size: int = 2, stride: int = 1) -> np.ndarray:
    """Max-pool over the last two axes with the strict first-wins rule (row-major window scan)."""
    x = as_f32(x)
    h, w = x.shape[-2:]
    if size > h or size > w or (h - size) % stride or (w - size) % stride:
        raise ShapeError(f"pool {size}/{stride} does not tile {h}x{w}")
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    best = None
    for dy in range(size):
        for dx in range(size):
            v = x[..., dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride]
            best = v.copy() if best is None else np.where(v > best, v, best)
    return best.astype(F32)


def dense_ref(x, weights, bias=None) -> np.ndarray:
    """(B, in) x (out, in)^T, summing from +0.0 in ascending input order."""
    x = as_f32(x, 2)
    w = as_f32(weights, 2)
    out = np.zeros((x.shape[0], w.shape[0]), dtype=F32)
    with np.errstate(all="ignore"):
        for b in range(x.shape[0]):
            for o in range(w.shape[0]):
                acc = F32(0.0)
                for i in range(w.shape[1]):
                    acc = F32(acc + F32(x[b, i] * w[o, i]))
                if bias is not None:
                    acc = F32(acc + F32(bias[o]))
                out[b, o] = acc
    return out


def softmax_ref(x) -> np.ndarray:
    """Row softmax computed in double precision, rounded once to single."""
    z = np.asarray(x, dtype=np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return (z / z.sum(axis=-1, keepdims=True)).astype(F32)


def cnn_features_ref(spec: CnnSpec) -> np.ndarray:
    """Convolution stage output (B, F, Po, Qo): conv, optional RELU, optional pool."""
    y = conv_ref(spec.images, spec.filters, spec.stride, spec.padding)
    if spec.relu:
        y = relu_ref(y)
    if spec.pool is not None:
        y = maxpool_ref(y, *spec.pool)
    return y


def cnn_forward_ref(spec: CnnSpec) -> np.ndarray:
    """Full network output, one row per image."""
    x = cnn_features_ref(spec).reshape(spec.batch, -1)
    for layer in spec.dense:
        x = dense_ref(x, layer.weights, layer.bias)
        if layer.activation == "relu":
            x = relu_ref(x)
        elif layer.activation == "softmax":
            x = softmax_ref(x)
    return x
