"""On-disk formats.

Every file starts with a one-line versioned header beginning with ``#``.

Dataset (``train.csv`` / ``dev.csv``)::

    # phsa-dataset v1
    # uid,T,d_in,features[T*d_in row-major],labels[T]
    0,37,16,0.123,...,4,4,4,...

Checkpoint (binary)::

    b"PHSA-CKPT v1\\n"
    8-byte little-endian length N
    N bytes of UTF-8 JSON (sorted keys): format_version, run_config, step,
        epoch, tensors=[{name, shape, dtype, offset, nbytes}, ...]
    raw little-endian tensor bytes, concatenated in the listed order

Reports are comma-separated text with a column header after the version line.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .task import Utterance

DATASET_HEADER = "# phsa-dataset v1"
DATASET_FIELDS = "# uid,T,d_in,features[T*d_in row-major],labels[T]"
CKPT_MAGIC = b"PHSA-CKPT v1\n"
CKPT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow its documented layout."""


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# --------------------------------------------------------------------------
# dataset
# --------------------------------------------------------------------------

def write_dataset(path: str | Path, data: Sequence[Utterance]) -> None:
    lines = [DATASET_HEADER, DATASET_FIELDS]
    for u in data:
        T, d = u.features.shape
        cells = [str(u.uid), str(T), str(d)]
        cells += [repr(v) for v in u.features.astype(np.float64).reshape(-1).tolist()]
        cells += [str(int(v)) for v in u.labels]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path: str | Path) -> list[Utterance]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != DATASET_HEADER:
        raise FormatError(f"{path}: missing header {DATASET_HEADER!r}")
    data = []
    for n, line in enumerate(lines[1:], start=2):
        if not line or line.startswith("#"):
            continue
        cells = line.split(",")
        try:
            uid, T, d = int(cells[0]), int(cells[1]), int(cells[2])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}:{n}: bad record prefix") from exc
        if len(cells) != 3 + T * d + T:
            raise FormatError(f"{path}:{n}: expected {3 + T * d + T} fields, got {len(cells)}")
        feats = np.array(cells[3: 3 + T * d], dtype=np.float64).reshape(T, d)
        labels = np.array(cells[3 + T * d:], dtype=np.int64)
        data.append(Utterance(uid, feats, labels))
    return data


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    run_config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": CKPT_VERSION,
        "run_config": ckpt.run_config,
        "step": int(ckpt.step),
        "epoch": int(ckpt.epoch),
        "tensors": entries,
    }, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint")
    pos = len(CKPT_MAGIC)
    (n,) = struct.unpack("<Q", raw[pos: pos + 8])
    pos += 8
    header = json.loads(raw[pos: pos + n])
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')}")
    body = raw[pos + n:]
    tensors = {}
    for e in header["tensors"]:
        chunk = body[e["offset"]: e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise FormatError(f"{path}: tensor {e['name']} is truncated")
        tensors[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return Checkpoint(header["run_config"], tensors, header["step"], header["epoch"])


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def write_table(path: str | Path, kind: str, columns: Sequence[str], rows: Iterable[Sequence],
                notes: Sequence[str] = ()) -> None:
    lines = [f"# phsa-{kind} v1", ",".join(columns)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    lines += [f"# {note}" for note in notes]
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path: str | Path) -> tuple[list[str], list[list[str]]]:
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    return lines[0].split(","), [l.split(",") for l in lines[1:]]


def write_attention_map(path: str | Path, layer: int, head: int, a: np.ndarray) -> None:
    T = a.shape[0]
    lines = ["# phsa-attention-map v1", "layer,head,T", f"{layer},{head},{T}"]
    lines += [",".join(repr(float(v)) for v in row) for row in np.asarray(a, dtype=np.float64)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_attention_map(path: str | Path) -> tuple[int, int, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# phsa-attention-map"):
        raise FormatError(f"{path}: missing attention-map header")
    layer, head, T = (int(v) for v in lines[2].split(","))
    a = np.array([[float(v) for v in l.split(",")] for l in lines[3: 3 + T]])
    return layer, head, a
