"""Binary model files.

Layout::

    b"GRUV"  | u8 format version | u32 LE header length | UTF-8 JSON header |
    float64 little-endian tensor data, in header order

The header records the cell kind, gate variant, dimensions, activation, loss,
optional embedding vocabulary and the name and shape of every tensor.
"""
import json
import struct

import numpy as np

from .cells import CellDims, CellKind, EmbeddingTable, GateVariant, make_params, tensor_shapes
from .linalg import Activation
from .train import HeadParams, LossKind, Model

MAGIC = b"GRUV"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def model_header(model):
    cell = model.cell
    return {
        "cell_kind": cell.kind.value,
        "variant": cell.variant.value if cell.variant is not None else None,
        "n": cell.dims.n,
        "m": cell.dims.m,
        "classes": int(model.head.W_out.shape[0]),
        "activation": Activation(model.activation).value,
        "loss_kind": LossKind(model.loss_kind).value,
        "vocab": model.embedding.vocab if model.embedding is not None else None,
        "pad_id": model.pad_id,
        "tensors": [[name, list(t.shape)] for name, t in model.named_tensors().items()],
    }


def dumps(model):
    header = json.dumps(model_header(model), sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in model.named_tensors().values())
    return MAGIC + struct.pack("<BI", FORMAT_VERSION, len(header)) + header + payload


def save_model(model, path):
    with open(path, "wb") as f:
        f.write(dumps(model))


def loads(blob):
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, header_len = struct.unpack("<BI", blob[4:9])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    if len(blob) < 9 + header_len:
        raise ModelFormatError("model file truncated inside header")
    try:
        header = json.loads(blob[9:9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from None

    offset = 9 + header_len
    arrays = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise ModelFormatError(f"model file truncated in tensor {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise ModelFormatError(f"{len(blob) - offset} trailing bytes after tensor data")

    kind = CellKind(header["cell_kind"])
    variant = GateVariant(header["variant"]) if header["variant"] else None
    dims = CellDims(header["n"], header["m"])
    try:
        cell = make_params(kind, dims, {k: arrays[f"cell.{k}"] for k in tensor_shapes(kind, dims, variant)}, variant)
        head = HeadParams(arrays["head.W_out"], arrays["head.b_out"])
        embedding = EmbeddingTable(arrays["embedding"]) if header["vocab"] else None
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"model tensors inconsistent with header: {exc}") from None
    return Model(cell, head, Activation(header["activation"]), LossKind(header["loss_kind"]), embedding,
                 header["pad_id"])


def load_model(path):
    with open(path, "rb") as f:
        return loads(f.read())
