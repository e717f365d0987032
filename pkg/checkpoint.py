"""
Versioned binary checkpoints for HitterModel.

Layout: magic b"HITR", format version (u32), config blob (u32 length +
canonical JSON), then per parameter: name length (u32), UTF-8 name, rank (u32),
dims (u32 each) and the fp32 little-endian payload. All integers are
little-endian.
"""

import json
import os
import struct

import numpy as np

from errors import CheckpointError
from logger import get_logger
from model import HitterConfig, HitterModel

logger = get_logger(__name__)

MAGIC = b"HITR"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


def canonical_json(payload):
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, model, extra=None):
    """
    Write a model checkpoint atomically.

    Args:
        path (str): destination file
        model (HitterModel): model to save
        extra (dict, optional): additional JSON-serialisable metadata (vocab, epoch, ...)
    """
    config = model.config_dict()
    if extra:
        config["extra"] = extra
    blob = canonical_json(config).encode("utf-8")

    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(blob)), blob]
    for name, param in model.named_parameters():
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(param.ndim))
        parts.extend(_U32.pack(dim) for dim in param.shape)
        parts.append(np.ascontiguousarray(param.data, dtype="<f4").tobytes())

    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as handle:
        handle.write(b"".join(parts))
    os.replace(tmp_path, path)
    logger.debug(f"Saved checkpoint {path} ({model.parameter_count()} parameters)")


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size, what):
        if self.offset + size > len(self.data):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]

    @property
    def exhausted(self):
        return self.offset >= len(self.data)


def read_checkpoint(path):
    """
    Parse a checkpoint file without touching any model.

    Returns:
        tuple[dict, dict]: config blob and {name: np.ndarray float32}
    """
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as handle:
        reader = _Reader(handle.read(), path)

    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    blob = reader.take(reader.u32("config length"), "config")
    try:
        config = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt config blob: {e}") from None

    tensors = {}
    while not reader.exhausted:
        name = reader.take(reader.u32("name length"), "name").decode("utf-8")
        rank = reader.u32(f"rank of {name}")
        dims = tuple(reader.u32(f"dims of {name}") for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        payload = reader.take(4 * count, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return config, tensors


def model_from_config(config, seed=0):
    cfg = HitterConfig(**config["model"])
    return HitterModel(cfg, config["num_entities"], config["num_relations"], seed=seed)


def load_checkpoint(path, model=None):
    """
    Load a checkpoint into ``model`` (or a model rebuilt from the stored config).

    Every tensor is validated before any parameter is written, so a failed
    load leaves the model untouched.

    Returns:
        tuple[HitterModel, dict]: the model and the stored config blob
    """
    config, tensors = read_checkpoint(path)
    if model is None:
        model = model_from_config(config)

    for name, param in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}", tensor_name=name)
        if tensors[name].shape != param.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: checkpoint {tensors[name].shape}, model {param.shape}",
                tensor_name=name,
            )
    expected = {name for name, _ in model.named_parameters()}
    unexpected = [name for name in tensors if name not in expected]
    if unexpected:
        raise CheckpointError(f"{path}: unexpected tensor {unexpected[0]}", tensor_name=unexpected[0])

    for name, param in model.named_parameters():
        param.data[...] = tensors[name]
    logger.info(f"Loaded checkpoint {path}")
    return model, config


def checkpoint_roundtrip(model, path):
    """Save then load ``model`` into a freshly built copy and return the copy."""
    save_checkpoint(path, model)
    restored, _ = load_checkpoint(path)
    return restored
