"""Minimal reverse-mode tensor engine for U-Net style training.

A :class:`Tensor` wraps a numpy array plus a gradient buffer and a backward
closure; calling ``backward()`` on a scalar result walks the recorded graph in
reverse topological order. The op set is deliberately small: 3x3 same-size
convolution, relu, 2x2 max pooling, nearest-neighbour 2x upsampling, channel
concatenation, a weighted per-channel binary cross-entropy on logits, and
constant multiply / full sum for building scalar probes of intermediate
tensors.
Everything runs on the CPU, in float32 or float64, with no hidden sources of
nondeterminism.

Image tensors use (N, C, H, W) layout throughout.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        """Reverse-mode pass seeded with d(self)/d(self) = 1; self must be scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar tensor, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()

        def visit(node: Tensor) -> None:
            if id(node) in visited:
                return
            visited.add(id(node))
            for parent in node._parents:
                visit(parent)
            topo.append(node)

        visit(self)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad[...] = 1.0
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def sum(self) -> "Tensor":
        """Sum of every element, as a scalar tensor."""
        out = _make_node(np.array(self.data.sum()), (self,), None)

        def backward() -> None:
            _accumulate(self, np.broadcast_to(out.grad, self.data.shape))

        out._backward = backward if out.requires_grad else None
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor with a name path such as ``enc0.conv1.weight``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.data.dtype})"


def _make_node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _accumulate(parent: Tensor, grad: np.ndarray) -> None:
    if parent.requires_grad:
        if parent.grad is None:
            parent.grad = np.array(grad, copy=True)
        else:
            parent.grad += grad


# ---------------------------------------------------------------------------
# convolution


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C*9, N*H*(W+2)) patch matrix over a zero-padded 3x3 window.

    Column index runs over a grid two columns wider than the image; positions
    u < W are output pixels, u in {W, W+1} are junk the caller slices off
    after the GEMM. The widened grid makes every patch plane a single flat
    shifted copy of the padded image, which is far cheaper than per-row slice
    copies.
    """
    n, c, h, w = x.shape
    hp, wp = h + 2, w + 2
    # two trailing slack elements keep the largest shift in bounds
    buf = np.zeros((n, c, hp * wp + 2), dtype=x.dtype)
    buf[:, :, :hp * wp].reshape(n, c, hp, wp)[:, :, 1:-1, 1:-1] = x
    span = h * wp
    cols = np.empty((c, 9, n, span), dtype=x.dtype)
    for k in range(9):
        off = (k // 3) * wp + k % 3
        cols[:, k] = buf[:, :, off:off + span].transpose(1, 0, 2)
    return cols.reshape(c * 9, n * span)


def _conv3_raw(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Same-size 3x3 convolution of (N, C, H, W) by (Cout, C, 3, 3), one GEMM."""
    n, _, h, w = x.shape
    cout = weight.shape[0]
    cols = _im2col3(x)
    # orient the GEMM so the pixel axis is M; N*H*(W+2) >> Cout on every layer
    out2 = cols.T @ weight.reshape(cout, -1).T
    return np.ascontiguousarray(
        out2.reshape(n, h, w + 2, cout)[:, :, :w].transpose(0, 3, 1, 2)
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution with zero padding 1 (output spatial size == input).

    ``x`` is (N, Cin, H, W), ``weight`` is (Cout, Cin, 3, 3), ``bias`` is (Cout,).
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be (N, C, H, W), got shape {x.shape}")
    if weight.data.ndim != 4 or weight.data.shape[2:] != (3, 3):
        raise ValueError(f"conv2d weight must be (Cout, Cin, 3, 3), got shape {weight.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has Cin={x.data.shape[1]} "
            f"but weight expects Cin={weight.data.shape[1]} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    cout = weight.data.shape[0]
    if bias.data.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {bias.shape}")

    out_data = _conv3_raw(x.data, weight.data)
    out_data += bias.data.reshape(1, cout, 1, 1)
    out = _make_node(out_data, (x, weight, bias), None)

    def backward() -> None:
        g = out.grad
        n, cin, h, w = x.data.shape
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if not (weight.requires_grad or x.requires_grad):
            return
        # both remaining gradients are GEMMs against the patch matrix of g;
        # sharing it (instead of retaining the forward patch matrix) keeps
        # every large buffer short-lived, which the allocator rewards
        gcols = _im2col3(g)
        if weight.requires_grad:
            # dw[o,c,dy,dx] = sum over pixels of g[o] times x[c] shifted by
            # (1-dy, 1-dx), i.e. rows (o, 2-dy, 2-dx) of gcols dotted with x
            # embedded on the widened grid (junk columns hit zeros)
            x2 = np.zeros((cin, n, h, w + 2), dtype=g.dtype)
            x2[:, :, :, :w] = x.data.transpose(1, 0, 2, 3)
            dw_rot = gcols @ x2.reshape(cin, -1).T
            dw = dw_rot.reshape(cout, 3, 3, cin)[:, ::-1, ::-1].transpose(0, 3, 1, 2)
            _accumulate(weight, np.ascontiguousarray(dw))
        if x.requires_grad:
            # gradient w.r.t. the input of a same-padded 3x3 conv is itself a
            # same-padded 3x3 conv of g with the kernel rotated 180 degrees
            # and in/out channels swapped
            w_rot2 = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            dx2 = gcols.T @ w_rot2.T
            _accumulate(x, dx2.reshape(n, h, w + 2, cin)[:, :, :w].transpose(0, 3, 1, 2))

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# element-wise and shape ops


def relu(x: Tensor) -> Tensor:
    out = _make_node(np.maximum(x.data, 0), (x,), None)

    def backward() -> None:
        _accumulate(x, out.grad * (x.data > 0))

    out._backward = backward if out.requires_grad else None
    return out


def mul(x: Tensor, factor) -> Tensor:
    """Elementwise product with a constant; no gradient flows into ``factor``.

    ``factor`` must broadcast to ``x.shape`` without enlarging it.
    """
    f = np.asarray(factor, dtype=x.data.dtype)
    if np.broadcast_shapes(x.data.shape, f.shape) != x.data.shape:
        raise ValueError(f"factor shape {f.shape} does not broadcast to {x.shape}")
    out = _make_node(x.data * f, (x,), None)

    def backward() -> None:
        _accumulate(x, out.grad * f)

    out._backward = backward if out.requires_grad else None
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Gradient routes to the window argmax;
    ties go to the first cell in row-major window order."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2 input must be (N, C, H, W), got shape {x.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(
            f"maxpool2 requires even spatial dims, got {h}x{w}; pad the input first"
        )
    h2, w2 = h // 2, w // 2
    # windows flattened in row-major order: (0,0), (0,1), (1,0), (1,1)
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = windows.argmax(axis=-1)
    out = _make_node(np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0], (x,), None)

    def backward() -> None:
        g = out.grad
        scatter = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(scatter, arg[..., None], g[..., None], axis=-1)
        dx = scatter.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, dx)

    out._backward = backward if out.requires_grad else None
    return out


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of both spatial dims."""
    if x.data.ndim != 4:
        raise ValueError(f"upsample2 input must be (N, C, H, W), got shape {x.shape}")
    out = _make_node(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,), None)

    def backward() -> None:
        n, c, h, w = x.data.shape
        _accumulate(x, out.grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    out._backward = backward if out.requires_grad else None
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; N, H, W must match."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects (N, C, H, W) tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(
            f"concat_channels requires matching N, H, W: got {a.shape} and {b.shape}"
        )
    ca = a.data.shape[1]
    out = _make_node(np.concatenate([a.data, b.data], axis=1), (a, b), None)

    def backward() -> None:
        _accumulate(a, out.grad[:, :ca])
        _accumulate(b, out.grad[:, ca:])

    out._backward = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# loss


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def weighted_bce_with_logits(
    logits: Tensor,
    targets: np.ndarray,
    pos_weights: np.ndarray,
    channel_mask: np.ndarray | None = None,
) -> Tensor:
    """Per-channel binary cross-entropy on logits with a positive-class weight.

    Mean over all cells of ``-(w_k * y * log sigmoid(z) + (1-y) * log(1 - sigmoid(z)))``,
    evaluated in log-sum-exp form so large logits do not overflow.

    ``logits`` is (N, K, H, W); ``targets`` is a binary array of the same
    shape; ``pos_weights`` is (K,) or (N, K) and strictly positive.
    ``channel_mask``, when given, is a boolean (N, K) array; channels marked
    False are excluded from the loss entirely (both sum and denominator),
    which is how samples with absent landmarks are handled.
    """
    z = logits.data
    if z.ndim != 4:
        raise ValueError(f"logits must be (N, K, H, W), got shape {logits.shape}")
    if not np.isfinite(z).all():
        raise ValueError("non-finite logit passed to weighted_bce_with_logits")
    y = np.asarray(targets)
    if y.shape != z.shape:
        raise ValueError(f"targets shape {y.shape} does not match logits shape {z.shape}")
    if y.dtype != np.bool_:
        if not np.isin(y, (0, 1)).all():
            raise ValueError("targets must be binary (0/1)")
    y = y.astype(z.dtype, copy=False)

    n, k, h, w = z.shape
    wts = np.asarray(pos_weights, dtype=z.dtype)
    if wts.shape == (k,):
        wts = np.broadcast_to(wts, (n, k))
    elif wts.shape != (n, k):
        raise ValueError(f"pos_weights must have shape ({k},) or ({n}, {k}), got {wts.shape}")

    if channel_mask is None:
        mask = None
        included = np.float64(n * k * h * w)
    else:
        mask = np.asarray(channel_mask, dtype=bool)
        if mask.shape != (n, k):
            raise ValueError(f"channel_mask must have shape ({n}, {k}), got {mask.shape}")
        included = np.float64(np.count_nonzero(mask) * h * w)
        if included == 0:
            raise ValueError("channel_mask excludes every channel")
    checked = wts if mask is None else wts[mask]
    if not (checked > 0).all():
        raise ValueError("pos_weights must be strictly positive")

    wb = wts[:, :, None, None]
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    cell = wb * y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    if mask is not None:
        cell *= mask[:, :, None, None]
    loss = cell.sum(dtype=np.float64) / included
    out = _make_node(np.asarray(loss, dtype=z.dtype), (logits,), None)

    def backward() -> None:
        s = _sigmoid(z)
        dz = wb * y * (s - 1.0) + (1.0 - y) * s
        if mask is not None:
            dz *= mask[:, :, None, None]
        dz *= out.grad / included
        _accumulate(logits, dz.astype(z.dtype, copy=False))

    out._backward = backward if out.requires_grad else None
    return out
