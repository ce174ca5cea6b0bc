"""Differentiable kernels used by the model and the loss suite.

Each kernel computes its forward result with numpy and hands
``make_result`` a closure producing one gradient per input.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse
from scipy.special import erf

from src.engine.tensor import as_tensor, make_result, unbroadcast
from src.utils.errors import ShapeError

PAD = -1
LAYER_NORM_EPS = 1e-5
_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from e
    x, y = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2))
        gb = np.matmul(np.swapaxes(x, -1, -2), g)
        return unbroadcast(ga, x.shape), unbroadcast(gb, y.shape)
    return make_result(out, (a, b), backward, 'matmul')


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored as [in, out]."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, 'concat')


def masked_fill(x, keep, value=-np.inf):
    """Entries where ``keep`` is False become ``value``; their gradient is zero."""
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, x.data, value)

    def backward(g):
        return (unbroadcast(np.where(keep, g, 0.0), x.shape),)
    return make_result(out, (x,), backward, 'masked_fill', allow_inf=True)


def softmax_lastdim(x):
    """Softmax over the last axis; -inf logits get probability exactly 0."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    d = x.data
    peak = np.max(d, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(d - peak)
    total = e.sum(axis=-1, keepdims=True)
    y = e / np.where(total == 0.0, 1.0, total)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return make_result(y, (x,), backward, 'softmax')


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    C = x.shape[-1]
    if gain.shape != (C,) or bias.shape != (C,):
        raise ShapeError(f"layer_norm over {C} channels got gain {gain.shape}, bias {bias.shape}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    centered = d - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gain.data + bias.data

    def backward(g):
        g_hat = g * gain.data
        gx = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                        - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        g_gain = unbroadcast(g * x_hat, (C,))
        g_bias = unbroadcast(g, (C,))
        return gx, g_gain, g_bias
    return make_result(out, (x, gain, bias), backward, 'layer_norm')


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / _SQRT_2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * d * d)
        return (g * (cdf + d * pdf),)
    return make_result(d * cdf, (x,), backward, 'gelu')


def tanh(x):
    return x.tanh()


def norm_lastdim(x, keepdims=False):
    """Euclidean norm over the last axis; the gradient at a zero vector is 0."""
    d = x.data
    n = np.sqrt((d * d).sum(axis=-1, keepdims=True))

    def backward(g):
        if not keepdims:
            g = g[..., None]
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * d / safe, 0.0),)
    return make_result(n if keepdims else n[..., 0], (x,), backward, 'norm')


def gather_rows(x, indices, pad=PAD):
    """``x[..., indices, :]`` with ``pad`` entries yielding zero rows.

    ``x`` is [..., V, C]; ``indices`` may have any shape S and the result is
    [..., *S, C]. Gradients of repeated indices add up.
    """
    idx = np.asarray(indices, dtype=np.int64)
    V, C = x.shape[-2], x.shape[-1]
    valid = idx != pad
    if np.any(idx[valid] < 0) or np.any(idx[valid] >= V):
        raise ShapeError(f"gather index out of range for {V} rows")
    safe = np.where(valid, idx, 0)
    out = x.data[..., safe, :] * valid[..., None]
    lead = x.shape[:-2]
    n = idx.size
    # scatter matrix: row v collects every output slot that read v
    scatter = sparse.csr_matrix((valid.ravel().astype(x.data.dtype), (safe.ravel(), np.arange(n))),
                                shape=(V, n))

    def backward(g):
        g = g.reshape(lead + (n, C))
        moved = np.moveaxis(g, -2, 0).reshape(n, -1)
        gx = np.asarray(scatter @ moved).reshape((V,) + lead + (C,))
        return (np.moveaxis(gx, 0, -2),)
    return make_result(out, (x,), backward, 'gather_rows')


def sparse_apply(matrix, x):
    """Apply a fixed sparse (V_out x V_in) matrix along the vertex axis of [..., V_in, C]."""
    V_out, V_in = matrix.shape
    if x.shape[-2] != V_in:
        raise ShapeError(f"sparse transform expects {V_in} vertices, got {x.shape[-2]}")
    matrix = sparse.csr_matrix(matrix, dtype=x.data.dtype)
    transposed = matrix.T.tocsr()

    def apply(m, d, rows):
        moved = np.moveaxis(d, -2, 0)
        out = np.asarray(m @ moved.reshape(moved.shape[0], -1)).reshape((rows,) + moved.shape[1:])
        return np.moveaxis(out, 0, -2)

    out = apply(matrix, x.data, V_out)

    def backward(g):
        return (apply(transposed, g, V_in),)
    return make_result(out, (x,), backward, 'sparse_apply')


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of [B, C, H, W] with [O, C, kh, kw] weights."""
    B, C, H, W = x.shape
    O, C_w, kh, kw = weight.shape
    if C != C_w:
        raise ShapeError(f"conv2d expects {C_w} input channels, got {C}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum('bchwij,ocij->bohw', windows, weight.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    Ho, Wo = out.shape[2], out.shape[3]
    w = weight.data

    def backward(g):
        gw = np.einsum('bohw,bchwij->ocij', g, windows, optimize=True)
        g_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                g_padded[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    np.einsum('bohw,oc->bchw', g, w[:, :, i, j], optimize=True)
        gx = g_padded[:, :, padding:padding + H, padding:padding + W]
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads
    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, 'conv2d')


def upsample_nearest(x, factor=2):
    """Nearest-neighbour upsampling of [B, C, H, W] by an integer factor."""
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)
    return make_result(out, (x,), backward, 'upsample')


def _axis_coordinates(normalized, size):
    """Align-corners texel coordinate, lower index, fraction and in-range mask."""
    if size == 1:
        zeros = np.zeros_like(normalized)
        return zeros.astype(np.int64), zeros, np.zeros_like(normalized, dtype=bool)
    position = (normalized + 1.0) * 0.5 * (size - 1)
    inside = (position >= 0.0) & (position <= size - 1)
    position = np.clip(position, 0.0, size - 1)
    lower = np.minimum(np.floor(position).astype(np.int64), size - 2)
    return lower, position - lower, inside


def bilinear_sample(feature_map, points):
    """Sample [B, C, H, W] maps at [B, N, 2] normalized (x, y) points -> [B, N, C].

    -1 is the centre of the first texel and +1 the centre of the last;
    points outside are clamped to the border.
    """
    B, C, H, W = feature_map.shape
    if points.shape[0] != B or points.shape[-1] != 2:
        raise ShapeError(f"points of shape {points.shape} do not match feature map {feature_map.shape}")
    fm = feature_map.data
    p = points.data
    x0, wx, inside_x = _axis_coordinates(p[..., 0], W)
    y0, wy, inside_y = _axis_coordinates(p[..., 1], H)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    b = np.arange(B)[:, None]

    f00 = fm[b, :, y0, x0]
    f01 = fm[b, :, y0, x1]
    f10 = fm[b, :, y1, x0]
    f11 = fm[b, :, y1, x1]
    wx_, wy_ = wx[..., None], wy[..., None]
    out = ((1 - wx_) * (1 - wy_) * f00 + wx_ * (1 - wy_) * f01
           + (1 - wx_) * wy_ * f10 + wx_ * wy_ * f11)

    def backward(g):
        g_map = np.zeros_like(fm)
        corners = ((y0, x0, (1 - wx_) * (1 - wy_)), (y0, x1, wx_ * (1 - wy_)),
                   (y1, x0, (1 - wx_) * wy_), (y1, x1, wx_ * wy_))
        for yy, xx, weight in corners:
            np.add.at(g_map, (b, slice(None), yy, xx), g * weight)
        d_dx = ((1 - wy_) * (f01 - f00) + wy_ * (f11 - f10)) * (0.5 * (W - 1))
        d_dy = ((1 - wx_) * (f10 - f00) + wx_ * (f11 - f01)) * (0.5 * (H - 1))
        g_points = np.stack([(g * d_dx).sum(-1) * inside_x, (g * d_dy).sum(-1) * inside_y], axis=-1)
        return g_map, g_points
    return make_result(out, (feature_map, points), backward, 'bilinear_sample')


def stack_tensors(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % (tensors[0].ndim + 1)
    expanded = [t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)
