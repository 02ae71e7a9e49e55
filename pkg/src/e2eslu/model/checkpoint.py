"""Checkpoint file format.

Layout::

    E2ESLU-CHECKPOINT 1\\n
    <one line of JSON: config, vocabulary text, training meta, tensor manifest>\\n
    <float32 little-endian blobs, in manifest order>

Tensors are stored as float32, so a float32 checkpoint round-trips bit for bit.
"""
import json

import numpy as np

from ..errors import ParseError
from ..tagcodec import Vocabulary
from .network import Checkpoint, NetworkConfig

MAGIC = b"E2ESLU-CHECKPOINT"
VERSION = 1


def save_checkpoint(ckpt: Checkpoint, path):
    manifest = []
    blobs = []
    for kind, tensors in (("param", ckpt.params), ("buffer", ckpt.buffers)):
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            manifest.append({"name": name, "kind": kind, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
    header = {
        "format_version": VERSION,
        "config": ckpt.config.to_dict(),
        "vocabulary": ckpt.vocabulary.to_text(),
        "training_meta": ckpt.meta,
        "tensors": manifest,
    }
    with open(path, "wb") as f:
        f.write(MAGIC + b" %d\n" % VERSION)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        first = f.readline()
        if not first.startswith(MAGIC):
            raise ParseError("not a checkpoint file", 1, path)
        try:
            version = int(first.split()[1])
        except (IndexError, ValueError):
            raise ParseError("bad checkpoint version line", 1, path) from None
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}", 1, path)
        try:
            header = json.loads(f.readline().decode("utf-8"))
        except ValueError as e:
            raise ParseError(f"bad checkpoint header: {e}", 2, path) from None
        params, buffers = {}, {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            data = f.read(4 * n)
            if len(data) != 4 * n:
                raise ParseError(f"truncated tensor {entry['name']}", None, path)
            arr = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
            (params if entry["kind"] == "param" else buffers)[entry["name"]] = arr
        if f.read(1):
            raise ParseError("trailing bytes after the last tensor", None, path)
    cfg = NetworkConfig.from_dict(header["config"])
    vocab = Vocabulary.from_text(header["vocabulary"], path)
    return Checkpoint(cfg, vocab, params, buffers, header.get("training_meta", {}))
