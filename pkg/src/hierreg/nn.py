"""Shared MLPs, Adam optimizer, gradient checking, and weight file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, concat, softmax

__all__ = [
    "SharedMlp", "init_shared_mlp", "shared_mlp_forward", "shared_mlp_backward",
    "sigmoid", "maxpool_cluster", "AdamState", "adam_step",
    "GradCheckReport", "gradcheck", "save_weights", "load_weights",
    "WEIGHTS_MAGIC",
]

WEIGHTS_MAGIC = b"HRGN"
WEIGHTS_VERSION = 1


def glorot_uniform(rng: np.random.Generator, c_in: int, c_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (c_in + c_out))
    return rng.uniform(-limit, limit, size=(c_in, c_out))


@dataclass
class SharedMlp:
    """A stack of affine layers applied pointwise to every row of the input.

    `weights[i]` has shape (C_in, C_out); `activations[i]` is "relu" or
    "none". The same parameters are shared across all rows/clusters.
    """

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ValueError("MLP layer dimensions do not chain")
        for act in self.activations:
            if act not in ("relu", "none"):
                raise ValueError(f"unknown activation {act!r}")

    @property
    def parameters(self):
        return list(self.weights) + list(self.biases)

    def __call__(self, x: Tensor) -> Tensor:
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = x @ w + b
            if act == "relu":
                x = x.relu()
        return x


def init_shared_mlp(widths, rng, final_activation="none") -> SharedMlp:
    """Build a SharedMlp for `widths` = (C_in, h1, ..., C_out), ReLU hidden."""
    weights, biases, acts = [], [], []
    for i in range(len(widths) - 1):
        weights.append(Tensor(glorot_uniform(rng, widths[i], widths[i + 1]),
                              requires_grad=True))
        biases.append(Tensor(np.zeros(widths[i + 1]), requires_grad=True))
        acts.append("relu" if i < len(widths) - 2 else final_activation)
    return SharedMlp(weights, biases, acts)


def shared_mlp_forward(mlp: SharedMlp, x) -> tuple:
    """Apply `mlp` to rows of `x`; returns (output, cache) for backward."""
    xt = x if isinstance(x, Tensor) else Tensor(x, requires_grad=True)
    if xt.shape[-1] != mlp.weights[0].shape[0]:
        raise ValueError("input width does not match first MLP layer")
    out = mlp(xt)
    return out, (mlp, xt, out)


def shared_mlp_backward(cache, upstream) -> tuple:
    """Gradients of a cached forward pass given the upstream gradient.

    Returns (input_gradient, [(dW, db), ...] per layer).
    """
    mlp, xt, out = cache
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != out.data.shape:
        raise ValueError("upstream gradient shape mismatch")
    for p in mlp.parameters:
        p.zero_grad()
    xt.zero_grad()
    out.backward(upstream)
    param_grads = [(w.grad, b.grad) for w, b in zip(mlp.weights, mlp.biases)]
    return xt.grad, param_grads


def sigmoid(x):
    """Logistic function; accepts floats or tensors."""
    if isinstance(x, Tensor):
        return x.sigmoid()
    return float(Tensor(np.asarray(x, dtype=np.float64)).sigmoid().data)


def maxpool_cluster(features) -> tuple:
    """Columnwise max over the rows of a K x C block.

    Returns (pooled, argmax_rows); ties go to the lowest row index.
    """
    ft = features if isinstance(features, Tensor) else Tensor(features)
    if ft.ndim < 2 or ft.shape[-2] < 1:
        raise ValueError("expected at least one row to pool")
    pooled = ft.max(axis=-2)
    arg = np.argmax(ft.data, axis=-2)
    return pooled, arg


@dataclass
class AdamState:
    """First/second moment accumulators for a named parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One Adam update over a name -> Tensor dict, in place.

    Entries missing from `grads` are treated as zero-gradient.
    """
    state.step += 1
    t = state.step
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        mhat = state.m[name] / (1 - state.beta1 ** t)
        vhat = state.v[name] / (1 - state.beta2 ** t)
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_input: int
    worst_coord: tuple
    message: str = ""


def gradcheck(fn, inputs, tol=1e-4, h=1e-5, sample=None, seed=0) -> GradCheckReport:
    """Compare analytic gradients of scalar `fn(*inputs)` to central differences.

    With `sample` set, only that many randomly chosen coordinates per
    input are perturbed, which keeps checks tractable for large weights.
    """
    tensors = [x if isinstance(x, Tensor) else Tensor(x, requires_grad=True)
               for x in inputs]
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    out = fn(*tensors)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    rng = np.random.default_rng(seed)
    f0 = float(fn(*tensors).data)
    worst = (0.0, -1, ())
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        if sample is not None and flat.size > sample:
            coords = rng.choice(flat.size, size=sample, replace=False)
        else:
            coords = range(flat.size)
        for ci in coords:
            orig = flat[ci]
            ana = analytic[ti].reshape(-1)[ci]
            # piecewise-smooth functions (argmax pooling, sample selection)
            # occasionally put a switch inside the +/-h interval, where the
            # central difference is meaningless; a smaller step disambiguates
            # that from a genuinely wrong gradient, which fails at every step
            for step in (h, h / 10.0, h / 100.0):
                flat[ci] = orig + step
                fp = float(fn(*tensors).data)
                flat[ci] = orig - step
                fm = float(fn(*tensors).data)
                flat[ci] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    coord = np.unravel_index(ci, t.data.shape)
                    return GradCheckReport(np.inf, False, ti, coord,
                                           f"non-finite evaluation at input {ti} coord {coord}")
                num = (fp - fm) / (2 * step)
                rel = abs(num - ana) / max(abs(num), abs(ana), 1e-3)
                if rel > tol:
                    # on a kink (relu boundary, pooling tie) the central
                    # difference is meaningless; the backward pass picks one
                    # branch, so accept a match with either one-sided slope
                    sp, sm = (fp - f0) / step, (f0 - fm) / step
                    rel = min(rel,
                              abs(sp - ana) / max(abs(sp), abs(ana), 1e-3),
                              abs(sm - ana) / max(abs(sm), abs(ana), 1e-3))
                if rel <= tol:
                    break
            if rel > worst[0]:
                worst = (rel, ti, np.unravel_index(ci, t.data.shape))
    return GradCheckReport(worst[0], worst[0] <= tol, worst[1], worst[2])


# -- weight serialization --------------------------------------------------


def save_weights(path, tensors: dict, _extra_header: bytes = None):
    """Write named tensors to the binary weights format.

    Layout: magic "HRGN", uint32 version, uint32 tensor count, then per
    tensor a length-prefixed UTF-8 name, uint32 rank, uint32 dims, and
    row-major little-endian float32 data. Names are written sorted so the
    file is a deterministic function of the contents.
    """
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        if _extra_header is not None:
            f.write(struct.pack("<I", 2))
            f.write(struct.pack("<I", len(_extra_header)))
            f.write(_extra_header)
        else:
            f.write(struct.pack("<I", WEIGHTS_VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = tensors[name]
            data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<I", d))
            f.write(data.astype("<f4").tobytes(order="C"))


def load_weights(path, _with_header: bool = False):
    """Read a weights file back into a name -> float64 ndarray dict."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"bad magic {magic!r} in weights file")
        version, = struct.unpack("<I", f.read(4))
        header = None
        if version == 2:
            hlen, = struct.unpack("<I", f.read(4))
            header = f.read(hlen)
        elif version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {version}")
        count, = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            nlen, = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            rank, = struct.unpack("<I", f.read(4))
            dims = struct.unpack("<" + "I" * rank, f.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims)
            out[name] = data.astype(np.float64)
    if _with_header:
        return out, header
    return out
