"""Dense float64 tensors with reverse-mode automatic differentiation.

The canonical feature-map layout is 4-D (batch, channels, height, width),
but the same Tensor class also carries vectors (architecture logits,
selection masks) and scalars (losses, latency costs).

Gradients are recorded on an explicit :class:`Tape`.  Entering a tape makes
it the active recorder; ops append closures in execution order, which is a
valid topological order, so one reverse sweep in :meth:`Tape.backward`
populates ``grad`` for every reachable tensor that requires it.  Outside a
tape context all ops run in pure inference mode.

Every op checks its output for NaN/Inf and raises instead of propagating
garbage; disable via ``set_strict_finite`` only for throwaway experiments.
"""

from __future__ import annotations

import numpy as np

_STRICT_FINITE = True


def set_strict_finite(flag: bool) -> bool:
    """Toggle NaN/Inf checking on op outputs. Returns the previous value."""
    global _STRICT_FINITE
    prev = _STRICT_FINITE
    _STRICT_FINITE = bool(flag)
    return prev


class TensorError(ValueError):
    """Shape mismatch, non-finite value, or invalid op argument."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _STRICT_FINITE and not np.all(np.isfinite(arr)):
        raise TensorError(f"non-finite values produced by {what}")


class Tensor:
    """A numpy float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


# --------------------------------------------------------------------------
# Tape

_ACTIVE_TAPES: list["Tape"] = []


def active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Not shareable across threads; one tape per search run.  ``backward``
    consumes and clears the record.
    """

    def __init__(self):
        self._steps: list[tuple[Tensor, object]] = []

    def __len__(self):
        return len(self._steps)

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, backward_fn) -> None:
        self._steps.append((out, backward_fn))

    def clear(self) -> None:
        self._steps.clear()

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and sweep the record in reverse.

        The loss must be a finite scalar produced on this tape.
        """
        if loss.data.shape != ():
            raise TensorError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        if not np.isfinite(loss.data):
            raise TensorError("backward on non-finite loss")
        if not self._steps or self._steps[-1][0] is not loss:
            # The loss does not have to be the literal last record, but it
            # must appear somewhere on this tape.
            if not any(out is loss for out, _ in self._steps):
                raise TensorError("loss was not produced on this tape")
        loss.grad = np.ones((), dtype=np.float64)
        for out, fn in reversed(self._steps):
            g = out.grad
            if g is None:
                continue  # dead branch, nothing flowed back
            fn(g)
        self.clear()


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # own the buffer; g may alias an upstream gradient
        t.grad = np.array(g, dtype=np.float64)
    else:
        np.add(t.grad, g, out=t.grad)


def _make(out_data: np.ndarray, inputs: tuple, backward_fn, name: str) -> Tensor:
    _check_finite(out_data, name)
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg)
    tape = active_tape()
    if rg and tape is not None:
        tape.record(out, backward_fn)
    return out


# --------------------------------------------------------------------------
# Parameter registry


class ParamStore:
    """Named registry of every trainable tensor and persistent buffer.

    Kinds: ``weight`` (network weights), ``arch`` (architecture logits),
    ``buffer`` (non-trainable state such as normalization running stats).
    Ids are unique; registration order is deterministic and is relied on
    for seeded initialization.
    """

    KINDS = ("weight", "arch", "buffer")

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, str]] = {}

    def create(self, name: str, data, kind: str = "weight") -> Tensor:
        if kind not in self.KINDS:
            raise TensorError(f"unknown param kind {kind!r}")
        if name in self._entries:
            raise TensorError(f"duplicate parameter id {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=(kind != "buffer"))
        self._entries[name] = (t, kind)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name][0]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self, kind: str | None = None):
        return [n for n, (_, k) in self._entries.items() if kind is None or k == kind]

    def tensors(self, kind: str | None = None):
        return [t for t, k in self._entries.values() if kind is None or k == kind]

    def items(self, kind: str | None = None):
        return [(n, t) for n, (t, k) in self._entries.items() if kind is None or k == kind]

    def zero_grad(self) -> None:
        for t, _ in self._entries.values():
            t.grad = None

    def num_values(self, kind: str | None = None) -> int:
        return int(sum(t.size for t in self.tensors(kind)))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, (t, _) in self._entries.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._entries) - set(arrays)
        extra = set(arrays) - set(self._entries)
        if missing or extra:
            raise TensorError(
                f"parameter set mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}"
            )
        for n, arr in arrays.items():
            t = self._entries[n][0]
            if t.data.shape != arr.shape:
                raise TensorError(f"shape mismatch for {n!r}: {t.data.shape} vs {arr.shape}")
            t.data[...] = arr


# --------------------------------------------------------------------------
# Elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise TensorError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise TensorError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), backward, "scale")


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)

    def backward(g):
        _accum(a, g)

    return _make(a.data + c, (a,), backward, "add_const")


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape

    def backward(g):
        _accum(a, np.full(shape, float(g), dtype=np.float64))

    return _make(np.sum(a.data), (a,), backward, "sum_all")


def log_scalar(a: Tensor) -> Tensor:
    if a.data.shape != ():
        raise TensorError(f"log_scalar expects a scalar, got shape {a.data.shape}")
    if not a.data > 0:
        raise TensorError(f"log_scalar of non-positive value {float(a.data)}")

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward, "log_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def softmax1d(a: Tensor) -> Tensor:
    """Numerically stable softmax of a vector (max-subtraction)."""
    if a.data.ndim != 1:
        raise TensorError(f"softmax1d expects a vector, got shape {a.data.shape}")
    if _STRICT_FINITE and not np.all(np.isfinite(a.data)):
        raise TensorError("softmax1d on non-finite input")
    z = a.data - np.max(a.data)
    e = np.exp(z)
    y = e / np.sum(e)

    def backward(g):
        _accum(a, y * (g - np.dot(g, y)))

    return _make(y, (a,), backward, "softmax1d")


def concat_channels(tensors: list[Tensor]) -> Tensor:
    if not tensors:
        raise TensorError("concat_channels of empty list")
    for t in tensors:
        if t.data.ndim != 4:
            raise TensorError(f"concat_channels expects 4-D tensors, got {t.data.shape}")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if (s[0], s[2], s[3]) != (base[0], base[2], base[3]):
            raise TensorError(f"concat_channels shape mismatch: {base} vs {s}")
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[:, lo:hi])

    return _make(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward, "concat_channels")


def weighted_sum(tensors: list[Tensor], weights: Tensor) -> Tensor:
    """Mixture sum_k w[k] * T_k over same-shape tensors.

    Gradient w.r.t. each T_k is w[k]*g; gradient w.r.t. w[k] is <g, T_k>.
    This is the masked-candidate mixture used on every searched edge.
    """
    if weights.data.ndim != 1 or len(tensors) != weights.data.shape[0]:
        raise TensorError(
            f"weighted_sum needs one weight per tensor: {len(tensors)} tensors, weights {weights.data.shape}"
        )
    base = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != base:
            raise TensorError(f"weighted_sum shape mismatch: {base} vs {t.data.shape}")
    w = weights.data
    out = w[0] * tensors[0].data
    for k in range(1, len(tensors)):
        out += w[k] * tensors[k].data

    def backward(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, g * w[k])
        if weights.requires_grad:
            dw = np.array([np.vdot(g, t.data) for t in tensors])
            _accum(weights, dw)

    return _make(out, tuple(tensors) + (weights,), backward, "weighted_sum")


def weighted_scalar_sum(weights: Tensor, scalars: list[Tensor]) -> Tensor:
    """sum_k w[k] * s_k for scalar tensors s_k (latency bookkeeping)."""
    if weights.data.ndim != 1 or len(scalars) != weights.data.shape[0]:
        raise TensorError(
            f"weighted_scalar_sum needs one weight per scalar: {len(scalars)} scalars, weights {weights.data.shape}"
        )
    for s in scalars:
        if s.data.shape != ():
            raise TensorError(f"weighted_scalar_sum expects scalars, got shape {s.data.shape}")
    w = weights.data
    vals = np.array([s.data for s in scalars])
    out = np.sum(w * vals)

    def backward(g):
        for k, s in enumerate(scalars):
            if s.requires_grad:
                _accum(s, g * w[k])
        if weights.requires_grad:
            _accum(weights, g * vals)

    return _make(out, tuple(scalars) + (weights,), backward, "weighted_scalar_sum")


def dot_const(weights: Tensor, vec) -> Tensor:
    """Dot product of a weight vector with a constant cost vector."""
    vec = np.asarray(vec, dtype=np.float64)
    if weights.data.shape != vec.shape:
        raise TensorError(f"dot_const shape mismatch: {weights.data.shape} vs {vec.shape}")

    def backward(g):
        _accum(weights, g * vec)

    return _make(np.dot(weights.data, vec), (weights,), backward, "dot_const")


def subsample2(a: Tensor) -> Tensor:
    """Stride-2 spatial subsampling (the skip connection on reduction edges)."""
    if a.data.ndim != 4:
        raise TensorError(f"subsample2 expects a 4-D tensor, got {a.data.shape}")
    in_shape = a.data.shape

    def backward(g):
        gx = np.zeros(in_shape, dtype=np.float64)
        gx[:, :, ::2, ::2] = g
        _accum(a, gx)

    return _make(np.ascontiguousarray(a.data[:, :, ::2, ::2]), (a,), backward, "subsample2")


def crop_hw(a: Tensor, height: int, width: int) -> Tensor:
    """Crop trailing rows/cols (upsample chains may overshoot odd sizes)."""
    if a.data.ndim != 4:
        raise TensorError(f"crop_hw expects a 4-D tensor, got {a.data.shape}")
    b, c, h, w = a.data.shape
    if height > h or width > w:
        raise TensorError(f"crop_hw target {(height, width)} exceeds input {(h, w)}")
    if (height, width) == (h, w):
        return a
    in_shape = a.data.shape

    def backward(g):
        gx = np.zeros(in_shape, dtype=np.float64)
        gx[:, :, :height, :width] = g
        _accum(a, gx)

    return _make(np.ascontiguousarray(a.data[:, :, :height, :width]), (a,), backward, "crop_hw")
