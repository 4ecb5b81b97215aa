"""Minimal reverse-mode differentiation tape over numpy tensors.

A ``Tape`` records a DAG of ``Node`` objects in creation order; parents always
have strictly smaller ids. ``backward`` walks the node list once in strictly
decreasing id order, accumulating vector-Jacobian products, so gradients are
bit-deterministic for identical tapes. A tape is single-use: one forward build
followed by at most one ``backward``; training loops rebuild it each step.

Values are float32 by default; construct ``Tape(dtype=np.float64)`` when
finite-difference headroom is needed (gradcheck does this).

Subgradient conventions, fixed for determinism:

* ``abs`` at 0 has gradient 0,
* ``clamp`` passes gradient only strictly inside (lo, hi),
* ``pool_max_axis`` routes the gradient to the lowest-index maximum.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field
from scipy.special import expit

from .errors import ContractError, ShapeError


class Node:
    """One value in the computation DAG."""

    __slots__ = ("tape", "id", "value", "requires_grad", "parents")

    def __init__(self, tape, nid, value, requires_grad, parents):
        self.tape = tape
        self.id = nid
        self.value = value
        self.requires_grad = requires_grad
        # parents: tuple of (parent Node, vjp) where vjp(grad_out) returns the
        # gradient contribution for that parent, matching its value's shape.
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        return self.tape.grad_of(self)

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered op recorder with per-node gradient buffers."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self._grads = None  # populated by backward

    # -- construction -------------------------------------------------------

    def leaf(self, value, requires_grad=False) -> Node:
        """Wrap a constant or parameter tensor as a graph input."""
        v = np.ascontiguousarray(value, dtype=self.dtype)
        if not np.isfinite(v).all():
            raise ContractError("leaf value contains NaN or Inf")
        return self._append(v, requires_grad, ())

    def op(self, value, parents) -> Node:
        """Record a new node; ``parents`` is a sequence of (node, vjp)."""
        v = np.asarray(value, dtype=self.dtype)
        track = [(p, fn) for p, fn in parents if p.requires_grad]
        return self._append(v, bool(track), tuple(track))

    def _append(self, value, requires_grad, parents):
        if self._grads is not None:
            raise ContractError("tape already consumed by backward; build a new one")
        node = Node(self, len(self.nodes), value, requires_grad, parents)
        self.nodes.append(node)
        return node

    # -- backward ------------------------------------------------------------

    def backward(self, root: Node):
        """Populate gradient buffers of every requires_grad node reachable from root.

        ``root`` must be scalar (a single value). Single-shot: a second call on
        the same tape raises.
        """
        if root.tape is not self:
            raise ContractError("root node belongs to a different tape")
        if root.value.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        if self._grads is not None:
            raise ContractError("backward already ran on this tape")
        grads = [None] * len(self.nodes)
        grads[root.id] = np.ones_like(root.value)
        for node in reversed(self.nodes):
            g = grads[node.id]
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = np.asarray(vjp(g), dtype=self.dtype)
                if grads[parent.id] is None:
                    grads[parent.id] = np.zeros_like(parent.value)
                grads[parent.id] += contrib
        self._grads = grads

    def grad_of(self, node: Node):
        """Gradient buffer of ``node`` (zeros if untouched by the root)."""
        if self._grads is None:
            raise ContractError("backward has not run")
        g = self._grads[node.id]
        return np.zeros_like(node.value) if g is None else g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _binary_shapes(a: Node, b: Node):
    """Equal dims, or one side scalar (size 1). Returns reducers for each side."""
    if a.shape == b.shape:
        return (lambda g: g), (lambda g: g)
    if a.value.size == 1:
        return (lambda g: np.sum(g).reshape(a.shape)), (lambda g: g)
    if b.value.size == 1:
        return (lambda g: g), (lambda g: np.sum(g).reshape(b.shape))
    raise ShapeError(f"operand dims differ: {a.shape} vs {b.shape}")


def add(a: Node, b: Node) -> Node:
    ra, rb = _binary_shapes(a, b)
    return a.tape.op(a.value + b.value, [(a, ra), (b, rb)])


def sub(a: Node, b: Node) -> Node:
    ra, rb = _binary_shapes(a, b)
    return a.tape.op(a.value - b.value, [(a, ra), (b, lambda g: -rb(g))])


def mul(a: Node, b: Node) -> Node:
    ra, rb = _binary_shapes(a, b)
    av, bv = a.value, b.value
    return a.tape.op(av * bv, [(a, lambda g: ra(g * bv)), (b, lambda g: rb(g * av))])


def div(a: Node, b: Node) -> Node:
    ra, rb = _binary_shapes(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return a.tape.op(out, [(a, lambda g: ra(g / bv)),
                           (b, lambda g: rb(-g * av / (bv * bv)))])


def smul(a: Node, s: float) -> Node:
    """Multiply by a python scalar constant."""
    s = float(s)
    return a.tape.op(a.value * s, [(a, lambda g: g * s)])


def sadd(a: Node, s: float) -> Node:
    """Add a python scalar constant."""
    return a.tape.op(a.value + float(s), [(a, lambda g: g)])


def neg(a: Node) -> Node:
    return smul(a, -1.0)


def abs_(a: Node) -> Node:
    sign = np.sign(a.value)  # 0 at 0: subgradient convention
    return a.tape.op(np.abs(a.value), [(a, lambda g: g * sign)])


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    return a.tape.op(t, [(a, lambda g: g * (1.0 - t * t))])


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape.op(np.where(mask, a.value, 0), [(a, lambda g: g * mask)])


def clamp(a: Node, lo: float, hi: float) -> Node:
    if not lo < hi:
        raise ContractError(f"clamp needs lo < hi, got [{lo}, {hi}]")
    inside = (a.value > lo) & (a.value < hi)  # gradient 0 at the boundary
    return a.tape.op(np.clip(a.value, lo, hi), [(a, lambda g: g * inside)])


def maximum_s(a: Node, s: float) -> Node:
    """max(a, s) against a scalar constant; gradient 0 at/below the threshold."""
    above = a.value > s
    return a.tape.op(np.maximum(a.value, s), [(a, lambda g: g * above)])


def exp(a: Node) -> Node:
    e = np.exp(a.value)
    return a.tape.op(e, [(a, lambda g: g * e)])


def sigmoid(a: Node) -> Node:
    s = expit(a.value)
    return a.tape.op(s, [(a, lambda g: g * s * (1.0 - s))])


def softplus(a: Node) -> Node:
    out = np.logaddexp(0.0, a.value)  # overflow-safe log(1 + e^v)
    s = expit(a.value)
    return a.tape.op(out, [(a, lambda g: g * s)])


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: Node) -> Node:
    return a.tape.op(np.sum(a.value, keepdims=False).reshape(()),
                     [(a, lambda g: np.broadcast_to(g, a.shape).copy())])


def mean_(a: Node) -> Node:
    n = a.value.size
    return a.tape.op(np.mean(a.value).reshape(()),
                     [(a, lambda g: np.broadcast_to(g / n, a.shape).copy())])


def pool_mean_axis(a: Node, axis: int) -> Node:
    axis = _check_axis(a, axis)
    n = a.shape[axis]
    return a.tape.op(np.mean(a.value, axis=axis),
                     [(a, lambda g: np.repeat(np.expand_dims(g / n, axis), n, axis=axis))])


def pool_max_axis(a: Node, axis: int) -> Node:
    axis = _check_axis(a, axis)
    idx = np.argmax(a.value, axis=axis)  # first (lowest-index) max on ties
    out = np.max(a.value, axis=axis)

    def vjp(g):
        grad = np.zeros_like(a.value)
        np.put_along_axis(grad, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        return grad

    return a.tape.op(out, [(a, vjp)])


def _check_axis(a: Node, axis: int) -> int:
    if not -a.value.ndim <= axis < a.value.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {a.shape}")
    return axis % a.value.ndim


def reshape(a: Node, dims) -> Node:
    dims = tuple(dims)
    if int(np.prod(dims)) != a.value.size:
        raise ShapeError(f"cannot reshape {a.shape} to {dims}")
    return a.tape.op(a.value.reshape(dims), [(a, lambda g: g.reshape(a.shape))])


def take_row(a: Node, index: int) -> Node:
    """Select one row along the leading axis."""
    if not 0 <= index < a.shape[0]:
        raise ShapeError(f"row {index} out of range for shape {a.shape}")

    def vjp(g):
        grad = np.zeros_like(a.value)
        grad[index] = g
        return grad

    return a.tape.op(a.value[index].copy(), [(a, vjp)])


def take_scalar(a: Node, index) -> Node:
    """Select one element as a 0-d node."""
    idx = tuple(index) if isinstance(index, (tuple, list)) else (index,)

    def vjp(g):
        grad = np.zeros_like(a.value)
        grad[idx] = g
        return grad

    return a.tape.op(np.asarray(a.value[idx]).reshape(()), [(a, vjp)])


def stack_rows(rows) -> Node:
    """Stack equal-shape nodes along a new leading axis."""
    if not rows:
        raise ContractError("stack_rows needs at least one node")
    tape = rows[0].tape
    shape = rows[0].shape
    for r in rows:
        if r.shape != shape:
            raise ShapeError(f"row shapes differ: {shape} vs {r.shape}")
    value = np.stack([r.value for r in rows], axis=0)

    def make_vjp(i):
        return lambda g: g[i]

    return tape.op(value, [(r, make_vjp(i)) for i, r in enumerate(rows)])


def bias_add(x: Node, b: Node) -> Node:
    """Add a per-channel bias [C] to a [C, H, W] map."""
    if b.value.ndim != 1 or x.value.ndim != 3 or b.shape[0] != x.shape[0]:
        raise ShapeError(f"bias {b.shape} incompatible with map {x.shape}")
    return x.tape.op(x.value + b.value[:, None, None],
                     [(x, lambda g: g), (b, lambda g: g.sum(axis=(1, 2)))])


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

def conv2d(x: Node, k: Node, stride=(1, 1), pad=(0, 0)) -> Node:
    """Cross-correlation of [C_in, H, W] with [C_out, C_in, kh, kw], zero padding.

    Output extents must divide exactly: H' = (H + 2*pad_h - kh)/stride_h + 1.
    Gradients flow to both the input and the kernel.
    """
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    ph, pw = (pad, pad) if np.isscalar(pad) else pad
    if x.value.ndim != 3 or k.value.ndim != 4:
        raise ShapeError(f"conv2d expects 3D input and 4D kernel, got {x.shape}, {k.shape}")
    cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError("kernel larger than padded input")
    if (h + 2 * ph - kh) % sh or (w + 2 * pw - kw) % sw:
        raise ShapeError(
            f"stride {sh, sw} does not divide padded extents for kernel {kh, kw}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1

    xp = np.pad(x.value, ((0, 0), (ph, ph), (pw, pw)))
    # patches[cin, kh, kw, ho, wo] as a strided view; contract with the kernel
    s = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, shape=(cin, kh, kw, ho, wo),
        strides=(s[0], s[1], s[2], s[1] * sh, s[2] * sw), writeable=False)
    out = np.tensordot(k.value, patches, axes=([1, 2, 3], [0, 1, 2]))

    def vjp_x(g):
        gx = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                # g[cout, ho, wo] x k[cout, cin, i, j] -> [cin, ho, wo]
                gx[:, i:i + ho * sh:sh, j:j + wo * sw:sw] += np.tensordot(
                    k.value[:, :, i, j], g, axes=(0, 0))
        if ph or pw:
            gx = gx[:, ph:ph + h, pw:pw + w]
        return gx

    def vjp_k(g):
        return np.tensordot(g, patches, axes=([1, 2], [3, 4]))

    return x.tape.op(out, [(x, vjp_x), (k, vjp_k)])


def avg_downsample2d(x: Node, fh: int, fw: int) -> Node:
    """Area-mean downsample of the trailing two axes by integer factors."""
    if x.value.ndim not in (2, 3):
        raise ShapeError(f"expected 2D or 3D input, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if h % fh or w % fw:
        raise ShapeError(f"extents {h}x{w} not divisible by {fh}x{fw}")
    squeeze = x.value.ndim == 2
    v = x.value[None] if squeeze else x.value
    c = v.shape[0]
    blocks = v.reshape(c, h // fh, fh, w // fw, fw)
    out = blocks.mean(axis=(2, 4))

    def vjp(g):
        gv = g[None] if squeeze else g
        gx = np.repeat(np.repeat(gv, fh, axis=1), fw, axis=2) / (fh * fw)
        return gx[0] if squeeze else gx

    return x.tape.op(out[0] if squeeze else out, [(x, vjp)])


def upsample_linear_1d(x: Node, factor: int) -> Node:
    """Horizontal endpoint-aligned linear upsampling of [C, W2] to [C, W2*factor].

    Output position w maps to source position w*(W2-1)/(W-1); exact at both
    endpoints. Backward is the transposed interpolation.
    """
    factor = int(factor)
    if factor < 1:
        raise ContractError(f"factor must be >= 1, got {factor}")
    if x.value.ndim != 2:
        raise ShapeError(f"expected [C, W2], got {x.shape}")
    c, w2 = x.shape
    if factor == 1:
        return x.tape.op(x.value.copy(), [(x, lambda g: g)])
    if w2 < 2:
        raise ContractError("source width must be >= 2 when factor > 1")
    w = w2 * factor
    pos = np.arange(w) * (w2 - 1) / (w - 1)
    i0 = np.minimum(pos.astype(np.int64), w2 - 2)
    frac = (pos - i0).astype(x.tape.dtype)
    out = x.value[:, i0] * (1.0 - frac) + x.value[:, i0 + 1] * frac

    def vjp(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx.T, i0, (g * (1.0 - frac)).T)
        np.add.at(gx.T, i0 + 1, (g * frac).T)
        return gx

    return x.tape.op(out, [(x, vjp)])


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    name: str
    max_rel_err: float
    n_checked: int
    n_excluded: int
    failures: list = field(default_factory=list)  # (input_idx, flat_idx, rel_err)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} "
                f"({self.n_checked} elements checked, {self.n_excluded} boundary-excluded)")


def gradcheck(fn, inputs, h=1e-5, tol=1e-4, name="fn", exclude=None, sample=None, rng=None):
    """Compare analytic gradients of ``fn`` against f64 central differences.

    ``fn(tape, *nodes)`` must return a scalar node. ``inputs`` is a list of
    arrays; each becomes a requires_grad leaf on a float64 tape. Relative
    error per element is |a - n| / max(1e-8, |a| + |n|).

    ``exclude`` optionally carries one boolean mask per input marking known
    subgradient/boundary points; those are reported but not counted as
    failures. ``sample`` limits the check to that many elements per input,
    drawn with ``rng`` (numpy Generator) for large parameter sets.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    tape = Tape(dtype=np.float64)
    nodes = [tape.leaf(x, requires_grad=True) for x in inputs]
    root = fn(tape, *nodes)
    if root.value.size != 1:
        raise ContractError("gradcheck target must be scalar-valued")
    tape.backward(root)
    analytic = [n.grad.copy() for n in nodes]

    def eval_at(xs):
        t = Tape(dtype=np.float64)
        ns = [t.leaf(x) for x in xs]
        return float(fn(t, *ns).value)

    max_rel = 0.0
    n_checked = 0
    n_excluded = 0
    failures = []
    for i, x in enumerate(inputs):
        flat_ids = np.arange(x.size)
        if sample is not None and x.size > sample:
            gen = rng if rng is not None else np.random.default_rng(0)
            flat_ids = np.sort(gen.choice(x.size, size=sample, replace=False))
        mask = None if exclude is None or exclude[i] is None else np.asarray(exclude[i]).ravel()
        for j in flat_ids:
            j = int(j)
            xs = [v.copy() for v in inputs]
            xs[i].ravel()[j] += h
            f_plus = eval_at(xs)
            xs[i].ravel()[j] -= 2 * h
            f_minus = eval_at(xs)
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic[i].ravel()[j])
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if mask is not None and mask[j]:
                n_excluded += 1
                continue
            n_checked += 1
            max_rel = max(max_rel, rel)
            if rel > tol:
                failures.append((i, j, rel))
    return GradcheckReport(name=name, max_rel_err=max_rel, n_checked=n_checked,
                           n_excluded=n_excluded, failures=failures, tol=tol)
