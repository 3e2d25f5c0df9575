"""Tensor files: the ``TNSR`` binary format and ``i1,...,im,value`` triplet CSV.

Binary layout: the 4 magic bytes ``TNSR``, a little-endian u32 order ``m``,
``m`` little-endian u32 dims, then ``d*`` little-endian float64 values with
the last index varying fastest.
"""

from __future__ import annotations

import csv
import os
import struct
from typing import Sequence

import numpy as np

from .tensor_core import TuckerFactors

MAGIC = b"TNSR"


class TensorFormatError(ValueError):
    """A tensor or observation file could not be parsed."""

    def __init__(self, path, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = str(path)


def write_tensor(path, T: np.ndarray) -> None:
    T = np.asarray(T, dtype=np.float64)
    if T.ndim < 1:
        raise ValueError("cannot store a 0-order tensor")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", T.ndim))
        fh.write(struct.pack(f"<{T.ndim}I", *T.shape))
        fh.write(np.ascontiguousarray(T).astype("<f8").tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise TensorFormatError(path, "missing TNSR magic bytes")
    if len(raw) < 8:
        raise TensorFormatError(path, "truncated header")
    (m,) = struct.unpack_from("<I", raw, 4)
    head = 8 + 4 * m
    if m == 0 or len(raw) < head:
        raise TensorFormatError(path, f"bad order {m} or truncated dims")
    dims = struct.unpack_from(f"<{m}I", raw, 8)
    n = int(np.prod(dims))
    if len(raw) != head + 8 * n:
        raise TensorFormatError(path, f"expected {n} values for dims {dims}, got {(len(raw) - head) / 8:g}")
    return np.frombuffer(raw, dtype="<f8", offset=head).astype(np.float64).reshape(dims)


def read_triplets(path, dims: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    """Parse a triplet CSV into ``(indices, values, dims)``.

    Without ``dims`` each mode size is one more than the largest index seen.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except UnicodeDecodeError as exc:
        raise TensorFormatError(path, "not a text file") from exc
    if not rows:
        raise TensorFormatError(path, "empty file")
    header = [h.strip() for h in rows[0]]
    m = len(header) - 1
    if m < 1 or header[-1] != "value" or header[:-1] != [f"i{k + 1}" for k in range(m)]:
        raise TensorFormatError(path, f"header must be i1,...,im,value, got {','.join(header)}")
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    idx = np.zeros((len(body), m), dtype=np.int64)
    vals = np.zeros(len(body))
    for line, r in enumerate(body, start=2):
        if len(r) != m + 1:
            raise TensorFormatError(path, f"line {line}: expected {m + 1} fields")
        try:
            idx[line - 2] = [int(c) for c in r[:m]]
            vals[line - 2] = float(r[m])
        except ValueError as exc:
            raise TensorFormatError(path, f"line {line}: {exc}") from exc
    if np.any(idx < 0):
        raise TensorFormatError(path, "negative index")
    if dims is None:
        if not len(body):
            raise TensorFormatError(path, "no entries and no dims given")
        dims = tuple(int(v) + 1 for v in idx.max(axis=0))
    else:
        dims = tuple(int(d) for d in dims)
        if len(dims) != m:
            raise TensorFormatError(path, f"{m} index columns but {len(dims)} dims")
        if len(body) and np.any(idx >= np.array(dims)):
            raise TensorFormatError(path, f"index outside dims {dims}")
    return idx, vals, dims


def triplets_to_dense(indices: np.ndarray, values: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Dense tensor with the listed entries; a repeated index keeps its last value."""
    T = np.zeros(tuple(dims))
    if len(values):
        T[tuple(np.asarray(indices).T)] = values
    return T


def write_triplets(path, T: np.ndarray, skip_zeros: bool = True) -> None:
    T = np.asarray(T, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"i{k + 1}" for k in range(T.ndim)] + ["value"])
        for idx in np.ndindex(*T.shape):
            v = T[idx]
            if skip_zeros and v == 0.0:
                continue
            w.writerow([*idx, repr(float(v))])


def write_observations(path, indices: np.ndarray, values: np.ndarray) -> None:
    indices = np.asarray(indices)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"i{k + 1}" for k in range(indices.shape[1])] + ["value"])
        for row, v in zip(indices.tolist(), values):
            w.writerow([*row, repr(float(v))])


def load_tensor(path, dims: Sequence[int] | None = None) -> np.ndarray:
    """Read either format, sniffing the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return read_tensor(path)
    idx, vals, dims = read_triplets(path, dims)
    return triplets_to_dense(idx, vals, dims)


def save_factors(out_dir, F: TuckerFactors) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, "core.tnsr")]
    write_tensor(paths[0], F.core)
    for k, U in enumerate(F.factors):
        paths.append(os.path.join(out_dir, f"factor_{k + 1}.tnsr"))
        write_tensor(paths[-1], U)
    return paths


def load_factors(out_dir) -> TuckerFactors:
    core = read_tensor(os.path.join(out_dir, "core.tnsr"))
    factors = tuple(read_tensor(os.path.join(out_dir, f"factor_{k + 1}.tnsr")) for k in range(core.ndim))
    return TuckerFactors(core, factors)
