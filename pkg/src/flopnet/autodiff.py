"""Reverse-mode automatic differentiation over dense numpy arrays.

Exactly the primitives a gated convolutional classifier needs: matmul,
conv2d (im2col + matmul), 2x2 max pooling, relu, bias add, channel
scaling, flatten, and softmax cross-entropy. Layout is NCHW, stride and
total padding are explicit, and there is no broadcasting beyond the bias
and channel-scale cases, which keeps the tape easy to audit.

Reductions written here accumulate in float64 even when activations are
stored in float32; matmul accumulation is delegated to BLAS.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import as_strided

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_ids = itertools.count()


class Tensor:
    """A dense array with a tape identity. Shape is fixed at creation."""

    __slots__ = ("data", "id", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.id = next(_ids)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Ordered record of primitive ops, replayed once in reverse.

    Operations are appended in forward (topological) order, so a single
    reversed sweep propagates adjoints. One backward pass per forward
    pass; call reset() or build a new tape for the next step.
    """

    def __init__(self):
        self._nodes = []
        self._spent = False

    def record(self, out, inputs, backward_fn):
        """inputs: list of (tensor_id, wants_grad); backward_fn(g) returns
        one gradient array (or None) per input, in the same order."""
        self._nodes.append((out.id, inputs, backward_fn))

    def __len__(self):
        return len(self._nodes)

    def reset(self):
        self._nodes.clear()
        self._spent = False

    def backward(self, loss, params=None):
        """Propagate from a scalar loss; returns {tensor id: gradient array}.

        Parameters listed in `params` that the loss does not reach get an
        explicit zero gradient.
        """
        if self._spent:
            raise RuntimeError("backward() already ran on this tape; run a new forward pass")
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
        self._spent = True

        grads = {loss.id: np.ones_like(loss.data)}
        for out_id, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(out_id, None)
            if g is None:
                continue  # this op's output never reached the loss
            input_grads = backward_fn(g)
            for (tid, wants_grad), gi in zip(inputs, input_grads):
                if not wants_grad or gi is None:
                    continue
                if tid in grads:
                    grads[tid] += gi
                else:
                    grads[tid] = gi
        if params is not None:
            for p in params:
                if p.id not in grads:
                    grads[p.id] = np.zeros_like(p.data)
        return grads


def _result(data, inputs, tape, backward_fn):
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if tape is not None and out.requires_grad:
        tape.record(out, [(t.id, t.requires_grad) for t in inputs], backward_fn)
    return out


def matmul(a, b, tape=None):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        return [g @ b.data.T, a.data.T @ g]

    return _result(out_data, [a, b], tape, backward)


def pad_amounts(padding):
    # `padding` is the TOTAL padding per spatial dim (int or (ph, pw)).
    if isinstance(padding, int):
        ph = pw = padding
    else:
        ph, pw = padding
    if ph < 0 or pw < 0:
        raise ValueError(f"conv2d: negative padding {padding}")
    return ph, pw


def _im2col(xp, kh, kw, stride, oh, ow):
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    # rows ordered (n, oh, ow), columns (c, kh, kw)
    return win.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def conv2d(x, w, stride=1, padding=0, tape=None):
    """NCHW convolution; w is (filters, in_channels, kh, kw).

    `padding` is total padding per dim, split before/after (before gets
    the smaller half). Output dims follow floor((I - K + P) / stride) + 1.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} (input) x {w.shape} (kernel)")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ph, pw = pad_amounts(padding)
    if h + ph < kh or wd + pw < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + ph}x{wd + pw}"
        )
    oh = (h - kh + ph) // stride + 1
    ow = (wd - kw + pw) // stride + 1

    pads = ((0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    xp = np.pad(x.data, pads) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(f, -1)
    out_data = (cols @ wmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    xp_shape = xp.shape

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        dw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros(xp_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
            dx = dxp[:, :, pads[2][0] : pads[2][0] + h, pads[3][0] : pads[3][0] + wd]
        return [dx, dw]

    return _result(out_data, [x, w], tape, backward)


def maxpool2x2(x, tape=None):
    """Non-overlapping 2x2 max pooling; ties resolve to the first element."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2x2: expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    oh, ow = h // 2, w // 2
    quads = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = quads.argmax(axis=-1)
    out_data = np.take_along_axis(quads, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dq = np.zeros_like(quads)
        np.put_along_axis(dq, idx[..., None], g[..., None], axis=-1)
        return [dq.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)]

    return _result(out_data, [x], tape, backward)


def relu(x, tape=None):
    out_data = np.maximum(x.data, 0)

    def backward(g):
        return [g * (x.data > 0)]

    return _result(out_data, [x], tape, backward)


def _channel_axes(x, v, opname):
    # 4D activations carry channels on axis 1; 2D activations on axis 1 too.
    if v.data.ndim != 1:
        raise ValueError(f"{opname}: vector must be 1-D, got shape {v.shape}")
    if x.data.ndim == 4:
        if x.shape[1] != v.shape[0]:
            raise ValueError(f"{opname}: incompatible shapes {x.shape} x {v.shape}")
        return v.data[None, :, None, None], (0, 2, 3)
    if x.data.ndim == 2:
        if x.shape[1] != v.shape[0]:
            raise ValueError(f"{opname}: incompatible shapes {x.shape} x {v.shape}")
        return v.data[None, :], (0,)
    raise ValueError(f"{opname}: expected 2-D or 4-D input, got shape {x.shape}")


def add_bias(x, b, tape=None):
    bb, axes = _channel_axes(x, b, "add_bias")
    out_data = x.data + bb

    def backward(g):
        db = g.sum(axis=axes, dtype=np.float64).astype(g.dtype) if b.requires_grad else None
        return [g, db]

    return _result(out_data, [x, b], tape, backward)


def scale_channels(x, s, tape=None):
    """Multiply each channel (4-D input) or each feature column (2-D input)
    by one gate value."""
    ss, axes = _channel_axes(x, s, "scale_channels")
    out_data = x.data * ss

    def backward(g):
        dx = g * ss if x.requires_grad else None
        ds = (g * x.data).sum(axis=axes, dtype=np.float64).astype(g.dtype) if s.requires_grad else None
        return [dx, ds]

    return _result(out_data, [x, s], tape, backward)


def flatten(x, tape=None):
    n = x.shape[0]
    out_data = x.data.reshape(n, -1)
    in_shape = x.shape

    def backward(g):
        return [g.reshape(in_shape)]

    return _result(out_data, [x], tape, backward)


def softmax_cross_entropy(logits, labels, tape=None):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: expected (batch, classes) logits, got {logits.shape}")
    y = np.asarray(labels)
    if y.shape != (z.shape[0],):
        raise ValueError(
            f"softmax_cross_entropy: labels shape {y.shape} does not match batch {z.shape}"
        )
    n, k = z.shape
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"softmax_cross_entropy: labels outside [0, {k})")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True, dtype=np.float64)
    log_probs = (z - zmax) - np.log(sez).astype(z.dtype)
    nll = -log_probs[np.arange(n), y]
    out_data = np.asarray(nll.mean(dtype=np.float64), dtype=z.dtype)

    def backward(g):
        probs = (ez / sez).astype(z.dtype)
        probs[np.arange(n), y] -= 1
        return [probs * (g / n)]

    return _result(out_data, [logits], tape, backward)
