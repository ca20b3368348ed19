"""Minimal deterministic n-d array engine with reverse-mode autodiff.

Every value is a float64 numpy buffer wrapped in a TensorValue node. Ops
record their parents and a vector-Jacobian closure; backward() walks the
graph once in topological order and accumulates d(loss)/d(node) into the
persistent .grad of every node that requires gradients. Broadcasting is
restricted to identical shapes or tensor-vs-scalar; structured row ops
(softmax_rows, layernorm_rows, ...) exist as dedicated fused kernels.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import kernels as K
from .errors import ContractError, DimensionError, DomainError

NORM_EPS = 1e-12
LAYERNORM_EPS = 1e-5


class SeededRng:
    """Deterministic random stream: same seed and call sequence, same output.

    Backed by PCG64, whose stream is stable across platforms for a fixed
    numpy version. `derive` builds an independent child stream from a key
    without consuming this one, so per-sample seeds stay order-independent.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self.calls = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, shape=None):
        self.calls += 1
        return self._gen.uniform(low, high, size=shape)

    def normal(self, loc, scale, shape=None):
        self.calls += 1
        return self._gen.normal(loc, scale, size=shape)

    def integers(self, low, high, shape=None):
        """Uniform integers in [low, high)."""
        self.calls += 1
        return self._gen.integers(low, high, size=shape)

    def derive(self, *keys) -> "SeededRng":
        tag = f"{self.seed}|" + "|".join(str(k) for k in keys)
        digest = hashlib.sha256(tag.encode()).digest()
        return SeededRng(int.from_bytes(digest[:8], "little"))


class TensorValue:
    """A float64 array participating in a reverse-mode autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @staticmethod
    def _result(data, parents, vjp):
        out = TensorValue.__new__(TensorValue)
        out.data = data
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"TensorValue(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- graph traversal ----

    def backward(self):
        """Accumulate d(self)/d(node) into .grad across the reachable graph.

        self must be scalar. Repeated calls without zeroing add up, so
        trainers zero their parameters' grads between steps.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            return

        topo: list[TensorValue] = []
        visited = set()
        stack: list[tuple[TensorValue, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = pending.get(id(parent))
                pending[id(parent)] = pg if acc is None else acc + pg

    def zero_grad(self):
        self.grad = None

    # ---- binary elementwise ops (same shape or tensor-vs-scalar) ----

    def __add__(self, other):
        return _binary(self, _coerce(other), np.add, lambda a, b, out, g: (g, g))

    def __radd__(self, other):
        return _coerce(other).__add__(self)

    def __sub__(self, other):
        return _binary(self, _coerce(other), np.subtract, lambda a, b, out, g: (g, -g))

    def __rsub__(self, other):
        return _coerce(other).__sub__(self)

    def __mul__(self, other):
        return _binary(
            self, _coerce(other), np.multiply,
            lambda a, b, out, g: (g * b.data, g * a.data),
        )

    def __rmul__(self, other):
        return _coerce(other).__mul__(self)

    def __truediv__(self, other):
        return _binary(
            self, _coerce(other), np.divide,
            lambda a, b, out, g: (g / b.data, -g * a.data / (b.data * b.data)),
        )

    def __rtruediv__(self, other):
        return _coerce(other).__truediv__(self)

    def __neg__(self):
        return _binary(self, _coerce(-1.0), np.multiply, lambda a, b, out, g: (-g, None))

    # ---- reductions ----

    def sum(self) -> "TensorValue":
        shape = self.data.shape
        return TensorValue._result(
            np.array(self.data.sum()),
            (self,),
            lambda g: (np.full(shape, float(g)),),
        )

    def mean(self) -> "TensorValue":
        shape = self.data.shape
        n = self.data.size
        return TensorValue._result(
            np.array(self.data.mean()),
            (self,),
            lambda g: (np.full(shape, float(g) / n),),
        )


def _coerce(value) -> TensorValue:
    if isinstance(value, TensorValue):
        return value
    return TensorValue(float(value))


def _binary(a: TensorValue, b: TensorValue, fwd, vjp_pair) -> TensorValue:
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(
            f"elementwise op needs matching shapes or a scalar side, "
            f"got {a.data.shape} and {b.data.shape}"
        )

    def vjp(g):
        ga, gb = vjp_pair(a, b, None, g)
        if ga is not None and ga.shape != a.data.shape:
            ga = np.array(ga.sum()).reshape(a.data.shape)
        if gb is not None and gb.shape != b.data.shape:
            gb = np.array(gb.sum()).reshape(b.data.shape)
        return ga, gb

    return TensorValue._result(fwd(a.data, b.data), (a, b), vjp)


def scalar_mul(x: TensorValue, c: float) -> TensorValue:
    return x * float(c)


# ---- structured ops ----


def matmul(a: TensorValue, b: TensorValue) -> TensorValue:
    """Standard 2-d matrix product; gradient flows to both inputs."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul needs (m,n)x(n,p), got {a.data.shape} and {b.data.shape}"
        )

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return TensorValue._result(a.data @ b.data, (a, b), vjp)


def transpose(x: TensorValue) -> TensorValue:
    # returns a view; graphs are ephemeral and nothing mutates op outputs
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-d tensor, got shape {x.data.shape}")
    return TensorValue._result(x.data.T, (x,), lambda g: (g.T,))


def relu(x: TensorValue) -> TensorValue:
    mask = x.data > 0
    return TensorValue._result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: TensorValue) -> TensorValue:
    out_data = np.exp(x.data)
    return TensorValue._result(out_data, (x,), lambda g: (g * out_data,))


def log(x: TensorValue) -> TensorValue:
    if np.any(x.data <= 0.0):
        raise DomainError(f"log of non-positive input (min {x.data.min()})")
    xd = x.data
    return TensorValue._result(np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x: TensorValue) -> TensorValue:
    """log(1 + e^x), computed without overflow for large |x|."""
    xd = x.data
    out_data = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    t = np.exp(-np.abs(xd))
    sig = np.where(xd >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    return TensorValue._result(out_data, (x,), lambda g: (g * sig,))


def l2_norm(x: TensorValue) -> TensorValue:
    """Euclidean norm over all elements; gradient is zero at the origin."""
    xd = x.data
    n = float(np.sqrt((xd * xd).sum()))

    def vjp(g):
        if n <= NORM_EPS:
            return (np.zeros_like(xd),)
        return (float(g) * xd / n,)

    return TensorValue._result(np.array(n), (x,), vjp)


def l1_mean(a: TensorValue, b: TensorValue) -> TensorValue:
    """Mean over all elements of |a - b|; sign(0) taken as 0 in the gradient."""
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"l1_mean needs matching shapes, got {a.data.shape} and {b.data.shape}"
        )
    diff = a.data - b.data
    grad_unit = np.sign(diff) / diff.size

    def vjp(g):
        scaled = float(g) * grad_unit
        return scaled, -scaled

    return TensorValue._result(np.array(np.abs(diff).mean()), (a, b), vjp)


def cosine_sim(u: TensorValue, v: TensorValue) -> TensorValue:
    """Cosine similarity of the flattened inputs.

    When either norm is at most NORM_EPS the value is 0 by convention and
    the node is treated as locally constant (zero gradient): the true cosine
    has a jump there, so no finite slope is faithful.
    """
    a = u.data.reshape(-1)
    b = v.data.reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(
            f"cosine_sim needs matching sizes, got {u.data.shape} and {v.data.shape}"
        )
    na = float(np.sqrt(a @ a))
    nb = float(np.sqrt(b @ b))
    if na <= NORM_EPS or nb <= NORM_EPS:
        return TensorValue._result(np.array(0.0), (u, v), lambda g: (None, None))
    c = float(a @ b) / (na * nb)

    def vjp(g):
        gu = float(g) * (b / (na * nb) - c * a / (na * na))
        gv = float(g) * (a / (na * nb) - c * b / (nb * nb))
        return gu.reshape(u.data.shape), gv.reshape(v.data.shape)

    return TensorValue._result(np.array(c), (u, v), vjp)


def softmax_rows(x: TensorValue) -> TensorValue:
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-d tensor, got {x.data.shape}")
    y = K.softmax_rows(np.ascontiguousarray(x.data))
    return TensorValue._result(y, (x,), lambda g: (K.softmax_rows_grad(y, np.ascontiguousarray(g)),))


def logsumexp_rows(x: TensorValue) -> TensorValue:
    """Row-wise log-sum-exp, returned as a column (m, 1)."""
    if x.data.ndim != 2:
        raise DimensionError(f"logsumexp_rows needs a 2-d tensor, got {x.data.shape}")
    xd = np.ascontiguousarray(x.data)
    lse = K.logsumexp_rows(xd)

    def vjp(g):
        return (K.logsumexp_rows_grad(xd, lse, np.ascontiguousarray(g[:, 0])),)

    return TensorValue._result(lse.reshape(-1, 1), (x,), vjp)


def layernorm_rows(x: TensorValue, gain: TensorValue, bias: TensorValue) -> TensorValue:
    """Per-row layer normalization with learnable gain and bias vectors."""
    if x.data.ndim != 2 or gain.data.shape != (x.data.shape[1],) or bias.data.shape != (x.data.shape[1],):
        raise DimensionError(
            f"layernorm_rows needs x (m,n) with gain/bias (n,), got "
            f"{x.data.shape}, {gain.data.shape}, {bias.data.shape}"
        )
    y, xhat, inv_std = K.layernorm_rows(
        np.ascontiguousarray(x.data), gain.data, bias.data, LAYERNORM_EPS
    )

    def vjp(g):
        return K.layernorm_rows_grad(xhat, inv_std, gain.data, np.ascontiguousarray(g))

    return TensorValue._result(y, (x, gain, bias), vjp)


def unit_rows(x: TensorValue) -> TensorValue:
    """L2-normalize rows (or a single vector); tiny norms are eps-clamped."""
    flat = x.data.ndim == 1
    xd = x.data.reshape(1, -1) if flat else x.data
    if xd.ndim != 2:
        raise DimensionError(f"unit_rows needs a 1-d or 2-d tensor, got {x.data.shape}")
    y, norms = K.unit_rows(np.ascontiguousarray(xd), NORM_EPS)

    def vjp(g):
        g2 = g.reshape(1, -1) if flat else np.ascontiguousarray(g)
        dx = K.unit_rows_grad(y, norms, g2)
        return (dx.reshape(x.data.shape),)

    return TensorValue._result(y.reshape(x.data.shape), (x,), vjp)


def mean_axis0(x: TensorValue) -> TensorValue:
    """Average the rows of an (m, n) tensor into one (n,) vector."""
    if x.data.ndim != 2:
        raise DimensionError(f"mean_axis0 needs a 2-d tensor, got {x.data.shape}")
    m = x.data.shape[0]
    return TensorValue._result(
        x.data.mean(axis=0),
        (x,),
        lambda g: (np.tile(g / m, (m, 1)),),
    )


def stack_rows(rows) -> TensorValue:
    """Stack 1-d tensors of equal length into an (m, n) tensor."""
    rows = tuple(rows)
    if not rows:
        raise DimensionError("stack_rows needs at least one row")
    n = rows[0].data.shape
    for r in rows:
        if r.data.ndim != 1 or r.data.shape != n:
            raise DimensionError(
                f"stack_rows needs equal-length vectors, got {[r.data.shape for r in rows]}"
            )

    def vjp(g):
        return tuple(g[i] for i in range(len(rows)))

    return TensorValue._result(np.stack([r.data for r in rows]), rows, vjp)


def add_rowvec(x: TensorValue, v: TensorValue) -> TensorValue:
    """Add a length-n vector to every row of an (m, n) tensor."""
    if x.data.ndim != 2 or v.data.shape != (x.data.shape[1],):
        raise DimensionError(
            f"add_rowvec needs x (m,n) and v (n,), got {x.data.shape} and {v.data.shape}"
        )
    return TensorValue._result(
        x.data + v.data,
        (x, v),
        lambda g: (g, g.sum(axis=0)),
    )


# ---- verification oracle ----


def grad_check(f, params, h=1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    f rebuilds and returns a scalar TensorValue from the current contents of
    params (a sequence of TensorValue leaves). Error per coordinate is
    |g_auto - g_fd| / max(1, |g_fd|). Inputs should be generic points: ops
    with kinks or value conventions (relu at 0, cosine at a zero vector) are
    not finite-differentiable at those special points.
    """
    if h <= 0:
        raise ContractError(f"grad_check needs h > 0, got {h}")
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    autos = []
    for p in params:
        if p.grad is None:
            autos.append(np.zeros_like(p.data))
        else:
            autos.append(p.grad.copy())
        p.grad = None

    worst = 0.0
    for p, ga in zip(params, autos):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gfd = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - gfd) / max(1.0, abs(gfd))
            if err > worst:
                worst = err
    return worst
