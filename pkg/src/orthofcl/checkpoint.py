"""Binary checkpoints of the global model and the client memories.

Layout, all integers little-endian::

    b"DOLF"  version:u8  count:u32
    count x ( name_len:u16  name:utf-8  ndim:u8  dims:u32[ndim]  data:f64[prod(dims)] )

Tensors are stored in C order. Integer metadata (task sizes, memory
dimensions, the backbone shape) is stored as float64 tensors too, which is
exact for the small values involved.
"""

import logging
import struct
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from orthofcl.errors import ConfigError, FormatError, StateError, VersionError
from orthofcl.memory import MemoryBank, Projection, StoredSide, SubspaceMemory
from orthofcl.model import (
    Backbone,
    BackboneConfig,
    LayerAdapters,
    LayerWeights,
    LoraAdapter,
    ModelState,
)

logger = logging.getLogger(__name__)

MAGIC = b"DOLF"
VERSION = 1

_LAYER_FIELDS = ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2")


@dataclass(eq=False)
class Checkpoint:
    """A loaded checkpoint."""

    model: ModelState
    memories: dict[int, MemoryBank]


def _model_tensors(model: ModelState) -> list[tuple[str, np.ndarray]]:
    cfg = model.backbone.config
    meta = np.array(
        [
            cfg.embed_dim,
            cfg.num_layers,
            cfg.num_tokens,
            cfg.input_dim,
            cfg.mlp_hidden,
            model.task_index,
            model.adapters is not None,
        ],
        dtype=np.float64,
    )

    return [
        ("model.meta", meta),
        ("model.task_sizes", np.array(model.task_sizes, dtype=np.float64)),
        *model.tensors(),
    ]


def _memory_tensors(memories: dict[int, MemoryBank]) -> list[tuple[str, np.ndarray]]:
    out = []
    for client_id in sorted(memories):
        bank = memories[client_id]
        for layer, p in bank.keys():
            mem = bank[(layer, p)]
            prefix = f"memory.{client_id}.{layer}.{p.value}"
            side = 0.0 if mem.stored_side is StoredSide.GRADIENT_SPACE else 1.0
            out.append(
                (f"{prefix}.meta", np.array([mem.ambient_dim, mem.memory_dim, side]))
            )
            out.append((f"{prefix}.basis", mem.basis))

    return out


def encode_tensors(tensors: list[tuple[str, np.ndarray]]) -> bytes:
    """Serialize named tensors in the checkpoint layout.

    Parameters
    ----------
    tensors : list[tuple[str, np.ndarray]]
        (name, tensor) pairs, written in order.

    Returns
    -------
    bytes
        The checkpoint bytes.
    """

    parts = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]

    for name, tensor in tensors:
        raw = name.encode()
        tensor = np.asarray(tensor, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{tensor.ndim}I", tensor.ndim, *tensor.shape))
        parts.append(np.ascontiguousarray(tensor).tobytes())

    return b"".join(parts)


def encode(model: ModelState, memories: dict[int, MemoryBank] | None = None) -> bytes:
    """Serialize a model and client memories.

    Parameters
    ----------
    model : ModelState
        The model.
    memories : dict[int, MemoryBank] | None, optional
        The memory bank of every client, by default None.

    Returns
    -------
    bytes
        The checkpoint bytes.
    """

    return encode_tensors(_model_tensors(model) + _memory_tensors(memories or {}))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(
                f"truncated checkpoint: {what} needs {size} bytes, "
                f"{len(self.data) - self.offset} left",
                self.offset,
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint: bad magic", 0)

    (version,) = reader.unpack("<B", "version")
    if version != VERSION:
        raise VersionError(
            f"checkpoint version {version} is not supported (expected {VERSION})", 4
        )

    (count,) = reader.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    offsets: dict[str, int] = {}

    for _ in range(count):
        start = reader.offset
        (name_len,) = reader.unpack("<H", "name length")
        try:
            name = reader.take(name_len, "name").decode()
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", start + 2) from None

        (ndim,) = reader.unpack("<B", f"rank of {name}")
        shape = reader.unpack(f"<{ndim}I", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(8 * size, f"data of {name}")
        if size == 0:
            tensors[name] = np.zeros(shape)
        else:
            values = np.frombuffer(raw, dtype="<f8").reshape(shape)
            tensors[name] = values.astype(np.float64)
        offsets[name] = start

    if reader.offset != len(data):
        raise FormatError("trailing bytes after the last tensor", reader.offset)

    return tensors, offsets


def decode(data: bytes) -> dict[str, np.ndarray]:
    """Read the named tensors of checkpoint bytes.

    Parameters
    ----------
    data : bytes
        The checkpoint bytes.

    Returns
    -------
    dict[str, np.ndarray]
        The tensors by name, in file order.

    Raises
    ------
    FormatError
        If the magic is wrong, the data is truncated or has trailing bytes,
        with the byte offset.
    VersionError
        If the version byte is not supported.
    """

    return _read(data)[0]


class _Tensors:
    """Decoded tensors that report bad content at the offset of its record."""

    def __init__(self, data: bytes) -> None:
        self.arrays, self.offsets = _read(data)

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def offset(self, name: str) -> int:
        return self.offsets.get(name, 0)

    def get(self, name: str, shape: tuple[int, ...] | None = None) -> np.ndarray:
        try:
            arr = self.arrays[name]
        except KeyError:
            raise FormatError(f"checkpoint has no tensor {name!r}", 0) from None

        if shape is not None and arr.shape != shape:
            raise FormatError(
                f"tensor {name!r} has shape {arr.shape}, expected {shape}",
                self.offsets[name],
            )

        return arr

    def integers(self, name: str, size: int) -> list[int]:
        arr = self.get(name, (size,))
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise FormatError(
                f"tensor {name!r} should hold integers", self.offset(name)
            )

        return arr.astype(np.int64).tolist()


def _rebuild_model(tensors: _Tensors) -> ModelState:
    fields = tensors.integers("model.meta", 7)
    d, layers, tokens, input_dim, hidden, task_index, has_adapters = fields
    try:
        cfg = BackboneConfig(
            embed_dim=d,
            num_layers=layers,
            num_tokens=tokens,
            input_dim=input_dim,
            mlp_hidden=hidden,
        )
    except ConfigError as exc:
        offset = tensors.offset("model.meta")
        raise FormatError(f"bad backbone shape: {exc}", offset) from None

    def frozen(name: str, shape: tuple[int, ...]) -> np.ndarray:
        arr = tensors.get(name, shape)
        arr.setflags(write=False)
        return arr

    shapes = {
        "w_q": (d, d),
        "w_k": (d, d),
        "w_v": (d, d),
        "w_o": (d, d),
        "w_1": (cfg.mlp_hidden, d),
        "w_2": (d, cfg.mlp_hidden),
    }
    backbone = Backbone(
        config=cfg,
        patch_embed=frozen("backbone.patch_embed", (d, cfg.patch_dim)),
        cls_token=frozen("backbone.cls_token", (d,)),
        layers=tuple(
            LayerWeights(
                **{
                    f: frozen(f"backbone.layer{i}.{f}", shapes[f])
                    for f in _LAYER_FIELDS
                }
            )
            for i in range(layers)
        ),
    )

    adapters = None
    if has_adapters:
        layer_adapters = []
        for i in range(layers):
            pair = []
            for p in Projection:
                name = f"adapter.layer{i}.{p.value}.a"
                a = tensors.get(name)
                if a.ndim != 2 or a.shape[0] != d:
                    raise FormatError(
                        f"tensor {name!r} has shape {a.shape}, expected ({d}, r)",
                        tensors.offset(name),
                    )
                a.setflags(write=False)
                b = tensors.get(f"adapter.layer{i}.{p.value}.b", (a.shape[1], d))
                pair.append(LoraAdapter(a=a, b=b))
            layer_adapters.append(LayerAdapters(*pair))
        adapters = tuple(layer_adapters)

    sizes = tensors.get("model.task_sizes")
    task_sizes = tuple(tensors.integers("model.task_sizes", sizes.size))
    if any(s < 0 for s in task_sizes) or not 0 <= task_index <= len(task_sizes):
        raise FormatError("inconsistent task sizes", tensors.offset("model.task_sizes"))

    return ModelState(
        backbone=backbone,
        merged_k=tuple(
            tensors.get(f"merged.layer{i}.key", (d, d)) for i in range(layers)
        ),
        merged_v=tuple(
            tensors.get(f"merged.layer{i}.value", (d, d)) for i in range(layers)
        ),
        adapters=adapters,
        head=tensors.get("head", (sum(task_sizes), d)),
        task_index=task_index,
        task_sizes=task_sizes,
    )


def _memory_key(name: str, layers: int, offset: int) -> tuple[int, int, Projection]:
    parts = name.split(".")
    try:
        if len(parts) != 5:
            raise ValueError(name)
        client_id, layer, p = int(parts[1]), int(parts[2]), Projection(parts[3])
    except ValueError:
        raise FormatError(f"bad memory tensor name {name!r}", offset) from None

    if client_id < 0 or not 0 <= layer < layers:
        raise FormatError(f"memory tensor {name!r} is out of range", offset)

    return client_id, layer, p


def _rebuild_memories(
    tensors: _Tensors, dim: int, layers: int
) -> dict[int, MemoryBank]:
    memories: dict[int, MemoryBank] = {}
    for name in tensors:
        parts = name.split(".")
        if parts[0] != "memory" or parts[-1] != "meta":
            continue

        offset = tensors.offset(name)
        client_id, layer, p = _memory_key(name, layers, offset)
        ambient, memory_dim, side = tensors.integers(name, 3)
        if ambient != dim or not 0 <= memory_dim <= dim or side not in (0, 1):
            raise FormatError(f"bad memory metadata in {name!r}", offset)

        stored = StoredSide.COMPLEMENT if side else StoredSide.GRADIENT_SPACE
        width = dim - memory_dim if side else memory_dim
        prefix = ".".join(parts[:-1])
        bank = memories.setdefault(client_id, MemoryBank(dim, layers))
        bank[(layer, p)] = SubspaceMemory(
            ambient_dim=ambient,
            stored_side=stored,
            basis=tensors.get(f"{prefix}.basis", (dim, width)),
            memory_dim=memory_dim,
        )

    return memories


def save_checkpoint(
    path: str | Path,
    model: ModelState,
    memories: dict[int, MemoryBank] | None = None,
) -> None:
    """Write a checkpoint file.

    Parameters
    ----------
    path : str | Path
        The file.
    model : ModelState
        The model.
    memories : dict[int, MemoryBank] | None, optional
        The memory bank of every client, by default None.
    """

    path = Path(path)
    path.write_bytes(encode(model, memories))
    logger.info("checkpoint written to %s", path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint file.

    Parameters
    ----------
    path : str | Path
        The file.

    Returns
    -------
    Checkpoint
        The model and client memories, bit-equal to those saved.

    Raises
    ------
    FormatError
        If the file is not a well-formed checkpoint.
    VersionError
        If the version byte is not supported.
    """

    tensors = _Tensors(Path(path).read_bytes())
    model = _rebuild_model(tensors)
    cfg = model.backbone.config

    return Checkpoint(
        model=model,
        memories=_rebuild_memories(tensors, cfg.embed_dim, cfg.num_layers),
    )


def checkpoint_io(
    path: str | Path,
    direction: str,
    model: ModelState | None = None,
    memories: dict[int, MemoryBank] | None = None,
) -> Checkpoint | None:
    """Save or load a checkpoint.

    Parameters
    ----------
    path : str | Path
        The file.
    direction : str
        `"save"` or `"load"`.
    model : ModelState | None, optional
        The model to save.
    memories : dict[int, MemoryBank] | None, optional
        The memories to save.

    Returns
    -------
    Checkpoint | None
        The loaded checkpoint, or `None` after saving.

    Raises
    ------
    StateError
        If saving without a model, or on an unknown direction.
    """

    if direction == "save":
        if model is None:
            raise StateError("There is no model to save.")
        save_checkpoint(path, model, memories)
        return None

    if direction == "load":
        return load_checkpoint(path)

    raise StateError(f"Unknown checkpoint direction {direction!r}.")
