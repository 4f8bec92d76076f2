"""Library of per-layer modules, paths through it, and commit/freeze."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numeric import (
    DTYPE,
    DimensionError,
    glorot_uniform,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
)


class FrozenModuleError(ValueError):
    """Raised on any attempt to modify a frozen module."""


class InvalidPathError(ValueError):
    pass


class ModuleId(NamedTuple):
    layer: int
    slot: int

    def __str__(self):
        return f"{self.layer}:{self.slot}"


class Path(tuple):
    """One ModuleId per layer, in depth order."""

    def __new__(cls, ids):
        ids = tuple(ModuleId(*i) for i in ids)
        for depth, mid in enumerate(ids):
            if mid.layer != depth:
                raise InvalidPathError(f"module {mid} sits at position {depth}")
        return super().__new__(cls, ids)

    @property
    def module_ids(self):
        return tuple(self)

    def __repr__(self):
        return "Path(" + ", ".join(str(m) for m in self) + ")"


class NeuralModule:
    """A dense layer occupying one slot of the library."""

    def __init__(self, mid: ModuleId, weight: np.ndarray, bias: np.ndarray):
        self.id = mid
        self._weight = np.array(weight, dtype=DTYPE)
        self._bias = np.array(bias, dtype=DTYPE)
        self.frozen = False
        self.origin_task = None

    @property
    def weight(self) -> np.ndarray:
        return self._weight

    @weight.setter
    def weight(self, value):
        self._assign("_weight", value)

    @property
    def bias(self) -> np.ndarray:
        return self._bias

    @bias.setter
    def bias(self, value):
        self._assign("_bias", value)

    def _assign(self, name, value):
        if self.frozen:
            raise FrozenModuleError(f"module {self.id} is frozen")
        cur = getattr(self, name)
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != cur.shape:
            raise DimensionError(f"shape {value.shape} != {cur.shape}")
        cur[...] = value

    @property
    def shape(self):
        return self._weight.shape

    @property
    def n_params(self) -> int:
        return self._weight.size + self._bias.size

    def freeze(self, task):
        if self.frozen:
            raise FrozenModuleError(f"module {self.id} already frozen")
        # own the memory: trainers may have bound these arrays to a shared buffer
        self._weight = self._weight.copy()
        self._bias = self._bias.copy()
        self._weight.setflags(write=False)
        self._bias.setflags(write=False)
        self.frozen = True
        self.origin_task = task

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self._weight.tobytes())
        h.update(self._bias.tobytes())
        return h.hexdigest()

    def get_params(self):
        return self._weight.copy(), self._bias.copy()

    def set_params(self, weight, bias):
        self.weight = weight
        self.bias = bias

    def __repr__(self):
        state = "frozen" if self.frozen else "trainable"
        return f"NeuralModule({self.id}, {self.shape}, {state})"


@dataclass
class ForwardCache:
    """Activations kept by a training-mode forward pass."""

    path: Path
    layer_inputs: dict  # layer -> input matrix, from the lowest trainable layer upward
    pre_activations: dict  # hidden layer -> pre-ReLU matrix
    lowest_trainable: int | None
    logits: np.ndarray = None


class ModuleLibrary:
    """Per-layer collections of modules plus the task -> path registry.

    ``input_dim`` feeds layer 0, hidden layers are ``hidden_dim`` wide, and the
    last layer is a task-specific classification head whose width is chosen
    at spawn time.
    """

    def __init__(self, input_dim: int, hidden_dim: int = 64, n_layers: int = 4):
        if n_layers < 1:
            raise ValueError("need at least one layer")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.layers: list[dict[int, NeuralModule]] = [{} for _ in range(n_layers)]
        self._next_slot = [0] * n_layers
        self.task_paths: dict = {}
        self._commit_checksums: dict = {}

    # -- structure -------------------------------------------------------
    def layer_in_dim(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.hidden_dim

    def layer_out_dim(self, layer: int, n_classes: int | None = None) -> int:
        if layer == self.n_layers - 1:
            if n_classes is None:
                raise ValueError("head width requires n_classes")
            return n_classes
        return self.hidden_dim

    def __getitem__(self, mid) -> NeuralModule:
        mid = ModuleId(*mid)
        try:
            return self.layers[mid.layer][mid.slot]
        except (IndexError, KeyError):
            raise InvalidPathError(f"no module {mid} in library") from None

    def __contains__(self, mid) -> bool:
        mid = ModuleId(*mid)
        return 0 <= mid.layer < self.n_layers and mid.slot in self.layers[mid.layer]

    def modules(self):
        for layer in self.layers:
            yield from layer.values()

    def n_modules(self, layer: int | None = None) -> int:
        if layer is None:
            return sum(len(lay) for lay in self.layers)
        return len(self.layers[layer])

    def n_params(self) -> int:
        return sum(m.n_params for m in self.modules())

    def validate_path(self, path) -> Path:
        path = path if isinstance(path, Path) else Path(path)
        if len(path) != self.n_layers:
            raise InvalidPathError(f"path has {len(path)} modules, library has {self.n_layers} layers")
        out = self.input_dim
        for mid in path:
            mod = self[mid]
            if mod.shape[0] != out:
                raise InvalidPathError(f"module {mid} expects width {mod.shape[0]}, got {out}")
            out = mod.shape[1]
        return path

    # -- growth and commit -----------------------------------------------
    def spawn_new_module(self, layer: int, seed, n_classes: int | None = None) -> ModuleId:
        """Add a fresh, trainable, Glorot-initialised module at ``layer``."""
        if not 0 <= layer < self.n_layers:
            raise ValueError(f"layer {layer} outside [0, {self.n_layers})")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        fan_in = self.layer_in_dim(layer)
        fan_out = self.layer_out_dim(layer, n_classes)
        mid = ModuleId(layer, self._next_slot[layer])
        self._next_slot[layer] += 1
        self.layers[layer][mid.slot] = NeuralModule(
            mid, glorot_uniform(fan_in, fan_out, rng), np.zeros(fan_out, dtype=DTYPE)
        )
        return mid

    def clone_module(self, source, layer_seed=None) -> ModuleId:
        """Fresh trainable copy of ``source`` (used by baselines that warm-start)."""
        src = self[source]
        mid = ModuleId(src.id.layer, self._next_slot[src.id.layer])
        self._next_slot[mid.layer] += 1
        self.layers[mid.layer][mid.slot] = NeuralModule(mid, src.weight, src.bias)
        return mid

    def discard_module(self, mid):
        mod = self[mid]
        if mod.frozen:
            raise FrozenModuleError(f"cannot discard frozen module {mid}")
        for t, p in self.task_paths.items():
            if mod.id in p:
                raise ValueError(f"module {mid} is bound to task {t}")
        del self.layers[mod.id.layer][mod.id.slot]

    def commit_path(self, path, task):
        """Freeze the trainable modules of ``path``, bind it to ``task`` and
        drop every other trainable module."""
        if task in self.task_paths:
            raise ValueError(f"task {task!r} already committed")
        path = self.validate_path(path)
        for mid in path:
            mod = self[mid]
            if not mod.frozen:
                mod.freeze(task)
        for mod in list(self.modules()):
            if not mod.frozen and mod.id not in path:
                bound = any(mod.id in p for p in self.task_paths.values())
                if not bound:
                    del self.layers[mod.id.layer][mod.id.slot]
        self.task_paths[task] = path
        for mid in path:
            self._commit_checksums.setdefault(mid, self[mid].checksum())
        return self

    def bind_path(self, path, task):
        """Register ``task -> path`` without freezing (shared-model baselines)."""
        if task in self.task_paths:
            raise ValueError(f"task {task!r} already bound")
        self.task_paths[task] = self.validate_path(path)
        return self

    def frozen_checksums(self) -> dict:
        return {m.id: m.checksum() for m in self.modules() if m.frozen}

    def verify_frozen(self) -> bool:
        """True when every frozen module still matches its commit-time checksum."""
        return all(self[mid].checksum() == digest for mid, digest in self._commit_checksums.items()
                   if self[mid].frozen)

    # -- computation -----------------------------------------------------
    def forward(self, path, x, train: bool = False):
        return forward_path(self, path, x, train)

    def predict(self, path, x) -> np.ndarray:
        _, logits = forward_path(self, path, x)
        return logits.argmax(axis=1)

    def accuracy(self, path, x, y) -> float:
        if len(y) == 0:
            return 0.0
        return float((self.predict(path, x) == np.asarray(y)).mean())


def forward_path(library: ModuleLibrary, path, x, train: bool = False):
    """Apply the path's modules in depth order.

    Returns ``(activations, logits)``: in eval mode ``activations`` is the list
    of post-nonlinearity outputs of each hidden layer; with ``train=True`` it is
    a :class:`ForwardCache` holding what :func:`backward_path` needs.
    """
    path = library.validate_path(path)
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != library.input_dim:
        raise DimensionError(f"input shape {x.shape} does not match width {library.input_dim}")
    mods = [library[m] for m in path]
    last = len(mods) - 1
    lowest = next((i for i, m in enumerate(mods) if not m.frozen), None)
    acts, inputs, pres = [], {}, {}
    h = x
    for i, mod in enumerate(mods):
        if train and lowest is not None and i >= lowest:
            inputs[i] = h
        z = linear_forward(h, mod.weight, mod.bias)
        if i == last:
            h = z
        else:
            if train and lowest is not None and i >= lowest:
                pres[i] = z
            h = relu_forward(z)
            acts.append(h)
    if train:
        return ForwardCache(path, inputs, pres, lowest, h), h
    return acts, h


def backward_path(library: ModuleLibrary, cache: ForwardCache | None, loss_grad) -> dict:
    """Gradients ``{ModuleId: (grad_weight, grad_bias)}`` for trainable modules only."""
    if not isinstance(cache, ForwardCache):
        raise RuntimeError("backward_path requires a training-mode forward_path cache")
    grads = {}
    if cache.lowest_trainable is None:
        return grads
    g = np.asarray(loss_grad, dtype=DTYPE)
    last = len(cache.path) - 1
    for i in range(last, cache.lowest_trainable - 1, -1):
        mod = library[cache.path[i]]
        if i != last:
            g = relu_backward(cache.pre_activations[i], g)
        gin, gw, gb = linear_backward(cache.layer_inputs[i], mod.weight, g)
        if not mod.frozen:
            if mod.id in grads:
                pw, pb = grads[mod.id]
                gw, gb = pw + gw, pb + gb
            grads[mod.id] = (gw, gb)
        g = gin
    return grads


# -- snapshot container -------------------------------------------------------
SNAPSHOT_MAGIC = b"MNTDPSNP"
SNAPSHOT_VERSION = 1


def write_snapshot(fh, library: ModuleLibrary, extra: dict | None = None, meta: dict | None = None):
    """Binary snapshot: magic, version, JSON header, then raw float64 blobs.

    ``extra`` maps names to arrays (learner state such as Fisher diagonals,
    replay buffers or path logits) stored in the same container.
    """
    blobs = []
    offset = 0

    def add(arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entry = {"offset": offset, "nbytes": len(raw), "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|=")}
        blobs.append(raw)
        offset += len(raw)
        return entry

    modules = []
    for mod in library.modules():
        modules.append({
            "layer": mod.id.layer,
            "slot": mod.id.slot,
            "frozen": mod.frozen,
            "origin_task": mod.origin_task,
            "weight": add(mod.weight),
            "bias": add(mod.bias),
        })
    header = {
        "version": SNAPSHOT_VERSION,
        "input_dim": library.input_dim,
        "hidden_dim": library.hidden_dim,
        "n_layers": library.n_layers,
        "next_slot": library._next_slot,
        "modules": modules,
        "task_paths": [[task, [list(m) for m in p]] for task, p in library.task_paths.items()],
        "extra": {name: add(np.asarray(arr)) for name, arr in sorted((extra or {}).items())},
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    fh.write(SNAPSHOT_MAGIC)
    fh.write(struct.pack("<II", SNAPSHOT_VERSION, len(hbytes)))
    fh.write(hbytes)
    for raw in blobs:
        fh.write(raw)


def read_snapshot(fh):
    """Inverse of :func:`write_snapshot`; returns ``(library, extra, meta)``."""
    data = fh.read()
    if data[:8] != SNAPSHOT_MAGIC:
        raise ValueError("not a module-library snapshot")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    header = json.loads(data[16:16 + hlen])
    body = memoryview(data)[16 + hlen:]

    def get(entry):
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        return np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).astype(dt.newbyteorder("="))

    lib = ModuleLibrary(header["input_dim"], header["hidden_dim"], header["n_layers"])
    lib._next_slot = list(header["next_slot"])
    for m in header["modules"]:
        mid = ModuleId(m["layer"], m["slot"])
        mod = NeuralModule(mid, get(m["weight"]), get(m["bias"]))
        lib.layers[mid.layer][mid.slot] = mod
        if m["frozen"]:
            mod.freeze(m["origin_task"])
    for task, ids in header["task_paths"]:
        lib.task_paths[task] = Path(ids)
        for mid in lib.task_paths[task]:
            if lib[mid].frozen:
                lib._commit_checksums.setdefault(mid, lib[mid].checksum())
    extra = {name: get(e) for name, e in header["extra"].items()}
    return lib, extra, header["meta"]


def snapshot_bytes(library, extra=None, meta=None) -> bytes:
    buf = io.BytesIO()
    write_snapshot(buf, library, extra, meta)
    return buf.getvalue()


def load_snapshot_bytes(raw: bytes):
    return read_snapshot(io.BytesIO(raw))
