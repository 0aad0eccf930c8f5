"""Minimal reverse-mode autodiff and the small networks built on it.

Everything is float64 numpy.  A :class:`Tensor` records the op that produced
it while gradient recording is enabled; :meth:`Tensor.backward` walks the tape
in reverse topological order.  :class:`Network` builds one of a few fixed
architectures from a JSON-serializable descriptor so checkpoints can be
rebuilt without pickling code.
"""
from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
CHECKPOINT_MAGIC = b"TINYNET\x00"
CHECKPOINT_VERSION = 1

_GRAD_ENABLED = True


class UsageError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.data.shape:
            raise ShapeError(f"output gradient shape {grad.shape} != output shape {self.shape}")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg

    # operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x[..., i] @ w[i, o]``."""
    x, w = as_tensor(x), as_tensor(w)

    def back(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _make(x.data @ w.data, (x, w), back)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(data, tensors, back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def square(a: Tensor) -> Tensor:
    return _make(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    y = a.data * s
    return _make(y, (a,), lambda g: (g * (s + y * (1.0 - s)),))


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS = {"silu": silu, "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "identity": identity}


# losses ---------------------------------------------------------------------

def mse(pred: Tensor, target, weight=None) -> Tensor:
    diff = pred - as_tensor(target)
    sq = square(diff)
    if weight is not None:
        sq = sq * as_tensor(weight)
    return mean(sq)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; numerically stable in the logits."""
    x = logits.data
    t = np.asarray(targets, dtype=DTYPE)
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    return _make(np.asarray(loss.mean()), (logits,), lambda g: (g * (_sigmoid(x) - t) / n,))


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy over the last axis; ``labels`` are integer ids."""
    x = logits.data
    labels = np.asarray(labels)
    lp = log_softmax(x)
    picked = np.take_along_axis(lp, labels[..., None], axis=-1)[..., 0]
    w = np.ones_like(picked) if mask is None else np.asarray(mask, dtype=DTYPE)
    denom = max(w.sum(), 1.0)

    def back(g):
        p = np.exp(lp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (w / denom)[..., None],)

    return _make(np.asarray(-(picked * w).sum() / denom), (logits,), back)


# embeddings -----------------------------------------------------------------

def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard transformer-style embedding of (possibly fractional) timesteps."""
    t = np.asarray(t, dtype=DTYPE).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=DTYPE) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


# network ----------------------------------------------------------------------

class Network:
    """Descriptor-built network with a flat, ordered parameter store.

    Architectures (``arch["kind"]``):

    ``mlp``
        Dense stack on the last axis.  ``pool="sum"`` sums the outputs over
        axis 1, which turns a per-element head into a set function.
    ``cell``
        Shared per-cell network for grids: inputs ``x`` (B, N, K) and
        ``cond`` (B, N, C), a learned per-cell position embedding, residual
        blocks with feature-wise scale/shift from the time + vector condition,
        and a mean-pooled global context added inside every block.
    ``flat``
        Flattened-grid MLP with the same conditioning; output reshaped to
        (B, N, K).
    """

    def __init__(self, arch: dict, seed: int = 0):
        self.arch = dict(arch)
        self.params: dict[str, Tensor] = {}
        self._output: Tensor | None = None
        rng = np.random.default_rng(seed)
        kind = arch["kind"]
        if kind == "mlp":
            self._build_mlp(rng)
        elif kind in ("cell", "flat"):
            self._build_denoiser(rng)
        else:
            raise ValueError(f"unknown architecture {kind!r}")

    # construction -------------------------------------------------------
    def _dense(self, name: str, n_in: int, n_out: int, rng, scale: float = 1.0):
        w = rng.standard_normal((n_in, n_out)) * (scale / math.sqrt(n_in))
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b")

    def _build_mlp(self, rng):
        a = self.arch
        dims = [a["in"], *a.get("hidden", []), a["out"]]
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            self._dense(f"l{i}", dims[i], dims[i + 1], rng, a.get("out_scale", 1.0) if last else 1.0)

    def _build_denoiser(self, rng):
        a = self.arch
        n, k, c = a["cells"], a["x_ch"], a["cond_ch"]
        h, e = a["hidden"], a.get("emb", a["hidden"])
        self._dense("emb0", a.get("t_dim", 32) + a.get("vec_dim", 0), e, rng)
        self._dense("emb1", e, e, rng)
        if a["kind"] == "cell":
            self._dense("inp", k + c, h, rng)
            if a.get("pos", True):
                self.params["pos"] = Tensor(rng.standard_normal((n, h)) * 0.1, True, "pos")
        else:
            self._dense("inp", n * (k + c), h, rng)
        for i in range(a.get("depth", 2)):
            self._dense(f"film{i}", e, 2 * h, rng, scale=0.1)
            self._dense(f"blk{i}", h, h, rng)
            if a["kind"] == "cell" and a.get("context", True):
                self._dense(f"ctx{i}", h, h, rng, scale=0.5)
        n_out = k if a["kind"] == "cell" else n * k
        self._dense("out", h, n_out, rng, scale=a.get("out_scale", 1.0))

    # forward ------------------------------------------------------------
    def _lin(self, x: Tensor, name: str) -> Tensor:
        w = self.params[f"{name}.w"]
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"layer {name!r} expects {w.shape[0]} input features, got {x.shape[-1]}")
        return matmul(x, w) + self.params[f"{name}.b"]

    def forward(self, **inputs) -> Tensor:
        """Run the network; the output is retained so :meth:`backward` can follow."""
        kind = self.arch["kind"]
        if kind == "mlp":
            out = self._forward_mlp(inputs["x"])
        else:
            out = self._forward_denoiser(inputs["x"], inputs["t"], inputs["cond"], inputs.get("vec"))
        self._output = out
        return out

    __call__ = forward

    def _forward_mlp(self, x) -> Tensor:
        a = self.arch
        act = ACTIVATIONS[a.get("act", "silu")]
        h = as_tensor(x)
        n_layers = len(a.get("hidden", [])) + 1
        for i in range(n_layers):
            h = self._lin(h, f"l{i}")
            if i < n_layers - 1:
                h = act(h)
        if a.get("pool") == "sum":
            h = tsum(h, axis=1)
        return h

    def _forward_denoiser(self, x, t, cond, vec) -> Tensor:
        a = self.arch
        act = ACTIVATIONS[a.get("act", "silu")]
        x, cond = as_tensor(x), as_tensor(cond)
        n, k = a["cells"], a["x_ch"]
        if x.shape[1:] != (n, k):
            raise ShapeError(f"layer 'inp' expects x of shape (B, {n}, {k}), got {x.shape}")
        if cond.shape[1:] != (n, a["cond_ch"]):
            raise ShapeError(f"layer 'inp' expects cond of shape (B, {n}, {a['cond_ch']}), got {cond.shape}")
        batch = x.shape[0]
        temb = sinusoidal_embedding(np.broadcast_to(np.asarray(t, dtype=DTYPE), (batch,)),
                                    a.get("t_dim", 32))
        parts = [Tensor(temb)]
        if a.get("vec_dim", 0):
            v = np.zeros((batch, a["vec_dim"])) if vec is None else vec
            v = as_tensor(v)
            if v.shape != (batch, a["vec_dim"]):
                raise ShapeError(f"layer 'emb0' expects vec of shape ({batch}, {a['vec_dim']}), got {v.shape}")
            parts.append(v)
        emb = act(self._lin(concat(parts, -1), "emb0"))
        emb = act(self._lin(emb, "emb1"))
        cell = a["kind"] == "cell"
        inp = concat([x, cond], -1)
        if cell:
            h = self._lin(inp, "inp")
            if "pos" in self.params:
                h = h + self.params["pos"]
        else:
            h = self._lin(reshape(inp, (batch, -1)), "inp")
        hdim = a["hidden"]
        for i in range(a.get("depth", 2)):
            film = self._lin(emb, f"film{i}")
            scale, shift = film[:, :hdim], film[:, hdim:]
            if cell:
                scale = reshape(scale, (batch, 1, hdim))
                shift = reshape(shift, (batch, 1, hdim))
            z = act(h * (scale + 1.0) + shift)
            z = self._lin(z, f"blk{i}")
            if cell and a.get("context", True):
                z = z + self._lin(mean(z, axis=1, keepdims=True), f"ctx{i}")
            h = h + z
        out = self._lin(act(h), "out")
        if not cell:
            out = reshape(out, (batch, n, k))
        return out

    # gradients ------------------------------------------------------------
    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def backward(self, output_gradient) -> dict:
        """Back-propagate ``output_gradient`` from the last forward output."""
        if self._output is None:
            raise UsageError("backward called before forward")
        if not self._output._parents and not self._output.requires_grad:
            raise UsageError("last forward ran without gradient recording")
        self._output.backward(output_gradient)
        return self.grads()

    def grads(self) -> dict:
        return {k: (np.zeros_like(p.data) if p.grad is None else p.grad)
                for k, p in self.params.items()}

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy(self) -> "Network":
        return load(save(self))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])


# optimizer --------------------------------------------------------------------

@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> dict:
        """One bias-corrected adaptive-moment update, in place; returns ``params``."""
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {k!r} at step {self.t + 1}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            p = params[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_step(opt: Adam, params: dict, grads: dict) -> dict:
    return opt.step(params, grads)


# checkpoints ------------------------------------------------------------------

def save(net: Network) -> bytes:
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": net.arch,
        "params": [[k, list(p.shape)] for k, p in net.params.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in net.params.values())
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hb)) + hb + body


def load(blob: bytes) -> Network:
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a tinynet checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", blob, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {CHECKPOINT_VERSION}")
    off += 8
    if len(blob) < off + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("header version mismatch")
    off += hlen
    net = Network(header["arch"], seed=0)
    for name, shape in header["params"]:
        if name not in net.params or list(net.params[name].shape) != shape:
            raise CheckpointError(f"parameter {name!r} does not match the architecture")
        size = int(np.prod(shape)) * 8
        if len(blob) < off + size:
            raise CheckpointError("truncated checkpoint parameter block")
        net.params[name].data = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=off) \
            .astype(DTYPE).reshape(shape)
        off += size
    if off != len(blob):
        raise CheckpointError("trailing bytes after parameter block")
    return net


def save_file(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save(net))


def load_file(path) -> Network:
    with open(path, "rb") as fh:
        return load(fh.read())


# gradient checking --------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(net: Network, loss_fn, tolerance: float = 1e-4, step: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn(net)`` with central differences.

    ``loss_fn`` must be deterministic and return a scalar :class:`Tensor`.
    ``max_entries`` samples that many entries per parameter (all if None).
    """
    net.zero_grad()
    loss_fn(net).backward()
    analytic = net.grads()
    rng = np.random.default_rng(seed)
    per_param = {}
    for name, p in net.params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            with no_grad():
                up = float(loss_fn(net).data)
            flat[j] = orig - step
            with no_grad():
                down = float(loss_fn(net).data)
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, float(rel_error(analytic[name].reshape(-1)[j], numeric)))
        per_param[name] = worst
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, tolerance)
