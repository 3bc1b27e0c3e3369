"""Optimization: Adam with gradient clipping, dropout, and checkpointing.

The parameter store owns every trainable array together with its gradient
buffer and Adam moment estimates. Training is a single logical writer: one
step records a tape, pulls gradients into the store, clips the global norm,
and applies Adam. All randomness flows from one seed through named
sub-streams (init / shuffle / dropout / data), so two runs with identical
seed, config, and data produce bitwise-identical parameters.

Checkpoints are a self-describing little-endian binary: magic ``CVAC``,
version, entry count, then three sequences of named arrays (values, first
moments, second moments) followed by the global step counter.
"""

import struct
import zlib
from dataclasses import dataclass, fields, replace

import numpy as np

from .tensor import InvalidArgumentError, ShapeError


class CheckpointFormatError(ValueError):
    """Checkpoint bytes violate the container format."""


def substream(seed, *tags):
    """Derive a named random generator from the run seed.

    Tags (strings or ints) select independent streams deterministically, so
    e.g. initialization and shuffling never share draws and variants trained
    from the same seed share initialization for identically named parameters.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(zlib.crc32(tag.encode("utf-8")))
        else:
            entropy.append(int(tag) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def glorot_uniform(shape, rng):
    """Fan-scaled uniform init, range +/- sqrt(6 / (fan_in + fan_out)).

    A weight vector of length n is treated as an (1, n) map; keeps
    pre-softmax scores O(1) at initialization so no softmax saturates.
    """
    if len(shape) == 2:
        fan_in, fan_out = shape[1], shape[0]
    elif len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_in = fan_out = 1
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


class ParameterStore:
    """Named trainable tensors with paired gradient and moment buffers."""

    def __init__(self):
        self._params = {}
        self.step = 0

    def add(self, name, value):
        if name in self._params:
            raise InvalidArgumentError(f"parameter {name!r} already registered")
        value = np.asarray(value, dtype=np.float64)
        self._params[name] = Param(name, value, np.zeros_like(value),
                                   np.zeros_like(value), np.zeros_like(value))
        return self._params[name]

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def values(self):
        return {name: p.value for name, p in self._params.items()}

    def zero_grads(self):
        for p in self._params.values():
            p.grad[...] = 0.0

    def set_grads_from(self, leaves):
        """Assign gradients pulled from the leaf tensors of one tape pass."""
        for name, p in self._params.items():
            leaf = leaves[name]
            if leaf.grad is None:
                p.grad[...] = 0.0
            else:
                p.grad[...] = leaf.grad

    def grad_norm(self):
        total = 0.0
        for p in self._params.values():
            total += float(np.sum(p.grad * p.grad))
        return float(np.sqrt(total))


def clip_gradients(store, max_norm):
    """Scale all gradients so the global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise InvalidArgumentError(f"clip norm must be positive, got {max_norm}")
    norm = store.grad_norm()
    if norm > max_norm:
        factor = max_norm / norm
        for name in store.names():
            store[name].grad *= factor
    return norm


def adam_step(store, config):
    """One Adam update with bias correction; zeroes gradients afterwards."""
    for name in store.names():
        p = store[name]
        if not np.all(np.isfinite(p.grad)):
            raise InvalidArgumentError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    t = store.step
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name in store.names():
        p = store[name]
        p.m[...] = b1 * p.m + (1.0 - b1) * p.grad
        p.v[...] = b2 * p.v + (1.0 - b2) * (p.grad * p.grad)
        m_hat = p.m / bias1
        v_hat = p.v / bias2
        p.value[...] = p.value - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        p.grad[...] = 0.0


def dropout_mask(shape, rate, rng):
    """Pre-scaled keep mask for inverted dropout."""
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def apply_dropout(x, rate, mode, rng=None):
    """Inverted dropout on an array; identity outside training mode."""
    if mode not in ("train", "eval"):
        raise InvalidArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if mode == "eval" or rate == 0.0:
        if not 0.0 <= rate < 1.0:
            raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
        return x.copy()
    return x * dropout_mask(x.shape, rate, rng)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    """Optimizer and loop settings; all fields may come from a config file.

    The defaults are the conventional full-scale settings (batch 256 as in
    the training regime the model targets; lr/clip/dropout are standard
    values, not published ones). Desk-scale runs override them; see
    ``configs/desk.cfg``.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 30
    clip_norm: float = 10.0
    dropout: float = 0.5
    seed: int = 0
    profile: str = "desk"

    def validate(self):
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise InvalidArgumentError("Adam betas must lie in (0, 1)")
        if self.learning_rate < 0 or self.eps <= 0:
            raise InvalidArgumentError("learning rate must be >= 0 and eps > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgumentError("batch size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError("dropout rate must be in [0, 1)")
        if self.clip_norm <= 0:
            raise InvalidArgumentError("clip norm must be positive")
        if self.profile not in ("desk", "full"):
            raise InvalidArgumentError(f"unknown profile {self.profile!r}")
        return self


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_config_file(path):
    """Read flat ``key = value`` lines into a TrainConfig."""
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgumentError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in _CONFIG_TYPES:
                raise InvalidArgumentError(f"{path}:{lineno}: unknown config key {key!r}")
            overrides[key] = val
    return apply_overrides(TrainConfig(), overrides)


def apply_overrides(config, overrides):
    """Apply string-valued overrides (from a file or CLI flags)."""
    converted = {}
    for key, val in overrides.items():
        if val is None:
            continue
        kind = _CONFIG_TYPES[key]
        if kind in ("int", int):
            converted[key] = int(val)
        elif kind in ("float", float):
            converted[key] = float(val)
        else:
            converted[key] = str(val)
    return replace(config, **converted).validate()


# ---------------------------------------------------------------------------
# epoch loop


def train_epoch(model, dataset, config, epoch):
    """Run one epoch of shuffled minibatch training; returns (loss, accuracy).

    The shuffle order and dropout draws derive from (seed, epoch) alone, so a
    run resumed from an epoch-boundary checkpoint replays the identical
    schedule. Aborts with the failing batch index if the loss goes non-finite.
    """
    n = dataset.size()
    if n == 0:
        raise InvalidArgumentError("train_epoch: dataset is empty")
    order = substream(config.seed, "shuffle", epoch).permutation(n)
    drop_rng = substream(config.seed, "dropout", epoch)
    total_loss = 0.0
    total_correct = 0
    for batch_index, start in enumerate(range(0, n, config.batch_size)):
        groups = dataset.gather(order[start:start + config.batch_size])
        count = sum(g.labels.size for g in groups)
        loss_value, predictions, labels = model.train_step_forward_backward(
            groups, dropout_rate=config.dropout, dropout_rng=drop_rng)
        if not np.isfinite(loss_value):
            raise InvalidArgumentError(
                f"non-finite loss in epoch {epoch}, batch {batch_index}")
        clip_gradients(model.store, config.clip_norm)
        adam_step(model.store, config)
        total_loss += loss_value * count
        total_correct += int(np.sum(predictions == labels))
    return total_loss / n, total_correct / n


# ---------------------------------------------------------------------------
# checkpoint format


_MAGIC = b"CVAC"
_VERSION = 1


def _write_entry(fh, name, array):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", array.ndim))
    for dim in array.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(array.astype("<f8", copy=False).tobytes(order="C"))


def save_checkpoint(store, path):
    """Serialize values, Adam moments, and the step counter."""
    names = store.names()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(names)))
        for attr in ("value", "m", "v"):
            for name in names:
                _write_entry(fh, name, getattr(store[name], attr))
        fh.write(struct.pack("<Q", store.step))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, count, what):
        if self.offset + count > len(self.data):
            raise CheckpointFormatError(
                f"{self.path}: truncated while reading {what} at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))[0]


def _read_entry(reader):
    name_len = reader.unpack("<H", "name length")
    name = reader.take(name_len, "name").decode("utf-8")
    rank = reader.unpack("<B", f"rank of {name}")
    shape = tuple(reader.unpack("<I", f"dim of {name}") for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = reader.take(count * 8, f"payload of {name}")
    array = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return name, array


def load_checkpoint(path):
    """Parse a checkpoint into ({name: (value, m, v)}, step)."""
    with open(path, "rb") as fh:
        data = fh.read()
    reader = _Reader(data, path)
    if reader.take(4, "magic") != _MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic at byte 0")
    version = reader.unpack("<I", "version")
    if version != _VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    count = reader.unpack("<I", "entry count")
    sections = []
    for _ in range(3):
        section = {}
        for _ in range(count):
            name, array = _read_entry(reader)
            if name in section:
                raise CheckpointFormatError(f"{path}: duplicate entry {name!r}")
            section[name] = array
        sections.append(section)
    step = reader.unpack("<Q", "step counter")
    if reader.offset != len(data):
        raise CheckpointFormatError(
            f"{path}: {len(data) - reader.offset} trailing bytes at {reader.offset}")
    values, first, second = sections
    if set(first) != set(values) or set(second) != set(values):
        raise CheckpointFormatError(f"{path}: moment sections do not match values")
    entries = {name: (values[name], first[name], second[name]) for name in values}
    return entries, step


def restore_checkpoint(store, path):
    """Load a checkpoint into an existing store, validating names and shapes."""
    entries, step = load_checkpoint(path)
    names = set(store.names())
    if set(entries) != names:
        missing = sorted(names - set(entries))
        extra = sorted(set(entries) - names)
        raise ShapeError(
            f"checkpoint does not match architecture: missing {missing}, unexpected {extra}")
    for name, (value, m, v) in entries.items():
        p = store[name]
        if value.shape != p.value.shape:
            raise ShapeError(
                f"checkpoint parameter {name!r} has shape {value.shape}, "
                f"model expects {p.value.shape}")
        p.value[...] = value
        p.m[...] = m
        p.v[...] = v
        p.grad[...] = 0.0
    store.step = step
