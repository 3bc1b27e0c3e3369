"""Dense-tensor engine with tape-based reverse-mode differentiation.

The primitive set is closed on purpose: every model in this package is a
composition of the operations below, so each backward rule can be audited in
isolation. Values are numpy arrays in double precision; a ``Tensor`` is a node
holding a forward value and a lazily allocated gradient buffer, and a ``Tape``
records nodes in execution order so the backward sweep can replay them in
reverse exactly once.

Operations accept either a single instance (vector ``(n,)``, row matrix
``(K, n)``) or a batch with one extra leading axis. No other broadcasting
exists; the two sanctioned broadcast forms are ``add_vec``/``mul_vec``
(a vector combined across the rows of a matrix) and ``add_scalar``.
"""

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's preconditions."""


class VocabularyError(ValueError):
    """A token or answer id falls outside the known vocabulary."""


class Tensor:
    """A node in a recorded computation: forward value plus gradient buffer.

    ``grad`` is ``None`` until the backward sweep first writes to it, which is
    equivalent to a zero-initialized buffer. Instances are immutable once
    published to readers; only the training loop mutates parameter values, and
    only between steps.
    """

    __slots__ = ("value", "grad", "_backward")

    def __init__(self, value, dtype=DTYPE):
        # fast path: op outputs are already float64 arrays
        if type(value) is np.ndarray and value.dtype == dtype:
            self.value = value
        else:
            self.value = np.asarray(value, dtype=dtype)
        self.grad = None
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def constant(value):
    """Wrap an array as a leaf node (input data, masks, fixed coefficients)."""
    return Tensor(value)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Single-writer: a tape belongs to one logical training thread, and
    ``backward`` may run at most once. Passing ``tape=None`` to any operation
    evaluates it without recording (pure forward, used by the
    finite-difference checker and by evaluation).
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def _record(self, node):
        self._nodes.append(node)

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss):
        """Propagate d(loss)/d(node) to every node recorded on this tape.

        ``loss`` must be a scalar node produced while recording on this tape.
        Nodes whose value never reached the loss keep ``grad is None``.
        """
        if loss.value.shape != ():
            raise InvalidArgumentError(
                f"backward requires a scalar loss, got shape {loss.value.shape}")
        if self._consumed:
            raise InvalidArgumentError("tape already replayed; record a fresh pass")
        self._consumed = True
        loss.grad = np.ones((), dtype=loss.value.dtype)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _accum(tensor, grad):
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.value.dtype, copy=True)
    else:
        tensor.grad += grad


def _make(tape, value, backward):
    out = Tensor(value)
    out._backward = backward
    tape._record(out)
    return out


def _check_finite(value, op):
    if not np.all(np.isfinite(value)):
        raise InvalidArgumentError(f"{op} produced non-finite values")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(tape, a, b):
    """Elementwise sum of two same-shape tensors."""
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    value = a.value + b.value

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(tape, value, backward)


def add_vec(tape, m, v):
    """Add a vector across the rows of ``m`` (the row-broadcast form).

    ``v`` either matches ``m`` exactly or has shape ``m.shape[:-2] +
    m.shape[-1:]``, in which case it is added to every row.
    """
    if v.value.shape == m.value.shape:
        return add(tape, m, v)
    if m.value.ndim < 2 or v.value.shape != m.value.shape[:-2] + m.value.shape[-1:]:
        raise ShapeError(
            f"add_vec: cannot broadcast vector {v.value.shape} over rows of {m.value.shape}")
    value = m.value + v.value[..., None, :]

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(m, g)
        _accum(v, g.sum(axis=-2))

    return _make(tape, value, backward)


def add_scalar(tape, x, s):
    """Add a scalar tensor to every entry of ``x``."""
    if s.value.shape != ():
        raise ShapeError(f"add_scalar: expected scalar, got shape {s.value.shape}")
    value = x.value + s.value

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(x, g)
        _accum(s, g.sum())

    return _make(tape, value, backward)


def mul(tape, a, b):
    """Hadamard product of two same-shape tensors."""
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes {a.value.shape} and {b.value.shape} differ")
    value = a.value * b.value

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _make(tape, value, backward)


def mul_vec(tape, m, v):
    """Multiply the rows of ``m`` elementwise by a vector (row-broadcast)."""
    if v.value.shape == m.value.shape:
        return mul(tape, m, v)
    if m.value.ndim < 2 or v.value.shape != m.value.shape[:-2] + m.value.shape[-1:]:
        raise ShapeError(
            f"mul_vec: cannot broadcast vector {v.value.shape} over rows of {m.value.shape}")
    vexp = v.value[..., None, :]
    value = m.value * vexp

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(m, g * vexp)
        _accum(v, (g * m.value).sum(axis=-2))

    return _make(tape, value, backward)


def scale_rows(tape, m, w):
    """Scale each row of ``m`` by the matching entry of ``w``.

    ``m`` has shape ``(..., K, n)`` and ``w`` shape ``(..., K)``.
    """
    if m.value.ndim < 2 or w.value.shape != m.value.shape[:-1]:
        raise ShapeError(
            f"scale_rows: weights {w.value.shape} do not match rows of {m.value.shape}")
    wexp = w.value[..., None]
    value = m.value * wexp

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(m, g * wexp)
        _accum(w, (g * m.value).sum(axis=-1))

    return _make(tape, value, backward)


def one_minus(tape, x):
    """Compute ``1 - x`` elementwise (gate complement)."""
    value = 1.0 - x.value

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(x, -g)

    return _make(tape, value, backward)


def scale(tape, x, c):
    """Multiply by a Python-level constant ``c`` (not a trainable node)."""
    value = x.value * c

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(x, g * c)

    return _make(tape, value, backward)


def tanh(tape, x):
    value = np.tanh(x.value)

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(x, (1.0 - value * value) * g)

    return _make(tape, value, backward)


def sigmoid(tape, x):
    # computed through tanh for stability at large |x|
    value = 0.5 * (np.tanh(0.5 * x.value) + 1.0)

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(x, value * (1.0 - value) * g)

    return _make(tape, value, backward)


# ---------------------------------------------------------------------------
# linear-algebra primitives


def affine(tape, x, w, b=None):
    """``W @ x + b`` for a vector ``x`` of shape ``(n,)`` or a batch ``(B, n)``.

    ``w`` has shape ``(m, n)`` and optional ``b`` shape ``(m,)``.
    """
    if w.value.ndim != 2:
        raise ShapeError(f"affine: weight must be a matrix, got shape {w.value.shape}")
    m_dim, n_dim = w.value.shape
    if x.value.ndim not in (1, 2) or x.value.shape[-1] != n_dim:
        raise ShapeError(
            f"affine: weight {w.value.shape} expects input of length {n_dim}, got {x.value.shape}")
    if b is not None and b.value.shape != (m_dim,):
        raise ShapeError(
            f"affine: weight {w.value.shape} expects bias of length {m_dim}, got {b.value.shape}")
    value = x.value @ w.value.T
    if b is not None:
        value = value + b.value

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(x, g @ w.value)
        if x.value.ndim == 1:
            _accum(w, np.outer(g, x.value))
            if b is not None:
                _accum(b, g)
        else:
            _accum(w, g.T @ x.value)
            if b is not None:
                _accum(b, g.sum(axis=0))

    return _make(tape, value, backward)


def rows_affine(tape, m, w, b=None):
    """Apply ``W @ row + b`` to every row of ``m``.

    ``m`` has shape ``(..., K, n)``, ``w`` shape ``(h, n)``, output
    ``(..., K, h)``.
    """
    if w.value.ndim != 2:
        raise ShapeError(f"rows_affine: weight must be a matrix, got {w.value.shape}")
    h_dim, n_dim = w.value.shape
    if m.value.ndim < 2 or m.value.shape[-1] != n_dim:
        raise ShapeError(
            f"rows_affine: weight {w.value.shape} expects rows of length {n_dim}, got {m.value.shape}")
    if b is not None and b.value.shape != (h_dim,):
        raise ShapeError(
            f"rows_affine: weight {w.value.shape} expects bias of length {h_dim}, got {b.value.shape}")
    value = m.value @ w.value.T
    if b is not None:
        value = value + b.value

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(m, g @ w.value)
        _accum(w, g.reshape(-1, h_dim).T @ m.value.reshape(-1, n_dim))
        if b is not None:
            _accum(b, g.reshape(-1, h_dim).sum(axis=0))

    return _make(tape, value, backward)


def matvec_last(tape, m, v):
    """Contract the last axis of ``m`` with the vector ``v``."""
    if v.value.ndim != 1 or m.value.shape[-1] != v.value.shape[0]:
        raise ShapeError(
            f"matvec_last: cannot contract {m.value.shape} with {v.value.shape}")
    value = m.value @ v.value

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(m, g[..., None] * v.value)
        _accum(v, np.tensordot(g, m.value, axes=(tuple(range(g.ndim)),
                                                 tuple(range(g.ndim)))))

    return _make(tape, value, backward)


def outer(tape, a, b):
    """Outer product of two vectors, ``out[i, j] = a[i] * b[j]``.

    Batched form maps ``(B, m) x (B, n) -> (B, m, n)``.
    """
    if a.value.size == 0 or b.value.size == 0:
        raise InvalidArgumentError("outer: operands must be nonempty")
    if a.value.ndim != b.value.ndim or a.value.ndim not in (1, 2):
        raise ShapeError(f"outer: shapes {a.value.shape} and {b.value.shape} incompatible")
    if a.value.ndim == 2 and a.value.shape[0] != b.value.shape[0]:
        raise ShapeError(
            f"outer: batch sizes differ, {a.value.shape} vs {b.value.shape}")
    value = a.value[..., :, None] * b.value[..., None, :]

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(a, (g * b.value[..., None, :]).sum(axis=-1))
        _accum(b, (g * a.value[..., :, None]).sum(axis=-2))

    return _make(tape, value, backward)


# ---------------------------------------------------------------------------
# reductions and normalizers


def softmax(tape, x):
    """Shift-stable softmax over the last axis.

    Output entries sum to one along that axis and are strictly positive
    whenever the score spread stays under ~745 (beyond that, exp underflows
    to zero even in double precision; the max-shift keeps the large end
    finite for any input magnitude).
    """
    if x.value.size == 0:
        raise InvalidArgumentError("softmax: input is empty")
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)
    _check_finite(value, "softmax")

    if tape is None:
        return Tensor(value)

    def backward(g):
        inner = (g * value).sum(axis=-1, keepdims=True)
        _accum(x, value * (g - inner))

    return _make(tape, value, backward)


def mean_over_rows(tape, m):
    """Mean of the rows of ``m``: ``(..., K, n) -> (..., n)``."""
    if m.value.ndim < 2:
        raise ShapeError(f"mean_over_rows: expected a matrix, got shape {m.value.shape}")
    k = m.value.shape[-2]
    if k == 0:
        raise InvalidArgumentError("mean_over_rows: matrix has no rows")
    value = m.value.mean(axis=-2)

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(m, np.broadcast_to(g[..., None, :] / k, m.value.shape))

    return _make(tape, value, backward)


def weighted_row_sum(tape, m, w, prefactor=1.0):
    """``prefactor * sum_k w[k] * m[k, :]`` over the row axis.

    ``m`` has shape ``(..., K, n)`` and ``w`` shape ``(..., K)``.
    """
    if m.value.ndim < 2 or w.value.shape != m.value.shape[:-1]:
        raise ShapeError(
            f"weighted_row_sum: weights {w.value.shape} do not match rows of {m.value.shape}")
    value = prefactor * np.einsum("...k,...kn->...n", w.value, m.value)

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(m, prefactor * w.value[..., None] * g[..., None, :])
        _accum(w, prefactor * (m.value * g[..., None, :]).sum(axis=-1))

    return _make(tape, value, backward)


def mean_all(tape, x):
    """Scalar mean over every entry of ``x`` (batch-loss reduction)."""
    if x.value.size == 0:
        raise InvalidArgumentError("mean_all: input is empty")
    n = x.value.size
    value = x.value.mean()

    if tape is None:
        return Tensor(value)

    def backward(g):
        _accum(x, np.full(x.value.shape, g / n, dtype=x.value.dtype))

    return _make(tape, value, backward)


# ---------------------------------------------------------------------------
# lookup and loss


def embedding_lookup(tape, table, ids):
    """Select rows of an embedding table by integer id.

    Mathematically identical to multiplying the table by one-hot vectors.
    ``ids`` may be a scalar, ``(T,)``, or ``(B,)`` integer array.
    """
    ids = np.asarray(ids)
    if table.value.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be a matrix, got {table.value.shape}")
    vocab = table.value.shape[0]
    flat = np.atleast_1d(ids)
    bad = np.where((flat < 0) | (flat >= vocab))[0]
    if bad.size:
        raise VocabularyError(
            f"embedding_lookup: id {int(flat[bad[0]])} at position {int(bad[0])} "
            f"outside vocabulary of size {vocab}")
    value = table.value[ids]

    if tape is None:
        return Tensor(value)

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.value)
        np.add.at(table.grad, ids, g)

    return _make(tape, value, backward)


def cross_entropy(tape, scores, labels):
    """Negative log-likelihood of ``labels`` under softmax of ``scores``.

    Fused log-sum-exp form; never materializes probabilities in the forward
    value. ``scores`` is ``(A,)`` with an int label, or ``(B, A)`` with
    ``(B,)`` labels (the output is then the per-example loss vector).
    """
    labels = np.asarray(labels)
    if scores.value.ndim == 1:
        if labels.shape != ():
            raise ShapeError(f"cross_entropy: scalar label expected, got shape {labels.shape}")
    elif scores.value.ndim == 2:
        if labels.shape != (scores.value.shape[0],):
            raise ShapeError(
                f"cross_entropy: labels {labels.shape} do not match scores {scores.value.shape}")
    else:
        raise ShapeError(f"cross_entropy: scores must be 1- or 2-d, got {scores.value.shape}")
    a = scores.value.shape[-1]
    flat_labels = np.atleast_1d(labels)
    if np.any((flat_labels < 0) | (flat_labels >= a)):
        bad = flat_labels[(flat_labels < 0) | (flat_labels >= a)][0]
        raise InvalidArgumentError(f"cross_entropy: label {int(bad)} outside {a} classes")
    shifted = scores.value - scores.value.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, np.expand_dims(labels, -1), axis=-1).squeeze(-1)
    value = log_z - picked
    _check_finite(value, "cross_entropy")

    if tape is None:
        return Tensor(value)

    def backward(g):
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.expand_dims(labels, -1), 1.0, axis=-1)
        _accum(scores, np.expand_dims(g, -1) * (p - onehot))

    return _make(tape, value, backward)


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(f, params, grads, eps=1e-5):
    """Compare analytic gradients against central differences of ``f``.

    ``f`` is a zero-argument callable returning a float and closing over the
    arrays in ``params`` (name -> ndarray, perturbed in place during probing).
    ``grads`` maps the same names to the analytic gradient arrays. Returns
    ``(max_relative_error, per_name)`` where each coordinate's error is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not (0.0 < eps <= 1e-2):
        raise InvalidArgumentError(f"finite_difference_check: eps {eps} outside (0, 1e-2]")
    per_name = {}
    worst = 0.0
    for name, array in params.items():
        analytic = grads[name]
        if analytic.shape != array.shape:
            raise ShapeError(
                f"finite_difference_check: gradient shape {analytic.shape} does not "
                f"match parameter {name} shape {array.shape}")
        flat = array.reshape(-1)
        aflat = analytic.reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f())
            flat[i] = orig - eps
            f_minus = float(f())
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise InvalidArgumentError(
                    f"finite_difference_check: non-finite evaluation while probing {name}")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1.0, abs(aflat[i]), abs(numeric))
            err = abs(aflat[i] - numeric) / denom
            if err > worst_here:
                worst_here = err
        per_name[name] = worst_here
        worst = max(worst, worst_here)
    return worst, per_name
