"""
Single-file model checkpoints.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
then the raw little-endian tensor payloads back to back. The header carries the
model metadata needed to rebuild the graph, a manifest (name, shape, dtype, byte
offset, byte count) and the quantizer state of wrapped models.
"""

import json
import struct
from pathlib import Path

import numpy as np
import structlog

from components.quantizer import ModelQuantizer
from engine.tensor import Tensor
from models.generator import GeneratorSpec, build_generator
from models.graph import BNStore
from models.resnet import build_resnet_tiny
from utils.errors import DataError

log = structlog.get_logger(__name__)

MAGIC = b"LRQCKPT1"
FORMAT_VERSION = 1


def _le_dtype(dtype):
    return np.dtype(dtype).newbyteorder("<")


def save_checkpoint(model, path):
    """Write parameters, buffers, the BN store and quantizer state of `model` to `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = model.named_arrays()
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=_le_dtype(arrays[name].dtype))
        data = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                         "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format": FORMAT_VERSION,
        "meta": model.meta,
        "bn_eps": model.bn_eps,
        "bn_momentum": model.bn_momentum,
        "stats_updates": model.stats_updates,
        "quant": None if model.quant is None else model.quant.state(),
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for data in chunks:
            fh.write(data)
    log.info("checkpoint_saved", path=str(path), tensors=len(manifest), payload_bytes=offset)
    return path


def read_header(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + header_len > len(raw):
        raise DataError(f"{path}: header truncated at byte offset {len(raw)}")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint header: {e}") from e
    return header, raw[16 + header_len:]


def _rebuild(meta):
    family = meta.get("family")
    if family == "resnet":
        return build_resnet_tiny(meta["depth_class"], meta["num_classes"], meta["width_mult"],
                                 meta["image_size"], seed=meta.get("seed", 0))
    if family == "generator":
        return build_generator(GeneratorSpec.from_dict(meta["spec"]), seed=meta.get("seed", 0))
    raise DataError(f"Unknown model family '{family}' in checkpoint")


def load_checkpoint(path, expected_family=None):
    """Rebuild the model graph from the header and restore every array bit-exactly."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    header, payload = read_header(path)
    meta = header["meta"]
    if expected_family is not None and meta.get("family") != expected_family:
        raise DataError(f"{path}: expected a {expected_family} checkpoint, found {meta.get('family')}")

    arrays = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise DataError(f"{path}: tensor '{entry['name']}' truncated at byte offset {len(payload)}")
        buf = payload[entry["offset"]:end]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)

    model = _rebuild(meta)
    model.meta = meta
    model.bn_eps = header["bn_eps"]
    model.bn_momentum = header["bn_momentum"]
    model.stats_updates = header["stats_updates"]

    store = {}
    for name, arr in arrays.items():
        kind, rest = name.split(".", 1)
        if kind == "param":
            if rest not in model.params or model.params[rest].shape != arr.shape:
                raise DataError(f"{path}: parameter '{rest}' does not fit the rebuilt graph")
            model.params[rest] = Tensor(arr, requires_grad=True)
        elif kind == "buffer":
            model.buffers[rest] = arr
        elif kind == "bn_store":
            index, stat = rest.split(".")
            store.setdefault(int(index), {})[stat] = arr
    if store:
        model.bn_store = BNStore({k: (v["mean"], v["var"]) for k, v in store.items()}, model.bn_eps)
    if header.get("quant") is not None:
        model.quant = ModelQuantizer.from_state(header["quant"])
    log.info("checkpoint_loaded", path=str(path), family=meta.get("family"), tensors=len(arrays))
    return model
