"""Deterministic dataset generation, splitting, and on-disk format.

Pairs are drawn shard by shard (SHARD_SIZE rows per shard) from keyed
streams (seed, "data", split, shard_index), so generation parallelizes
across shards, any pair is addressable by position, and streamed
generation reproduces whole-array generation bit for bit.

On-disk container: a JSON header (format version, seed, counts, the prior
and measurement model inline, their hash, array directory, payload
SHA-256) followed by the raw little-endian float64 payload.

    magic "PCGD" | uint32 header length | header JSON (utf-8) | payload

Round trips are bit-exact; loads verify the checksum and, when the caller
supplies the prior it expects, the prior hash.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChecksumMismatchError,
    InvalidArgumentError,
    PriorMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .gaussian_world import (
    GaussianPrior,
    MeasurementModel,
    canonical_json,
    measurement_from_dict,
    measurement_to_dict,
    prior_from_dict,
    prior_to_dict,
    sample_pairs,
)
from .rng import ALGORITHM_ID, stream

MAGIC = b"PCGD"
FORMAT_VERSION = 1
SHARD_SIZE = 4096

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Split:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.shape != self.y.shape or self.x.ndim != 2:
            raise InvalidArgumentError("split arrays must share shape (n, d)")

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class DatasetHandle:
    prior: GaussianPrior
    mm: MeasurementModel
    train: Split
    val: Split
    test: Split
    seed: int
    counts: tuple[int, int, int]

    @property
    def dim(self) -> int:
        return self.prior.dim

    def split(self, name: str) -> Split:
        if name not in SPLIT_NAMES:
            raise InvalidArgumentError("unknown split %r" % (name,))
        return getattr(self, name)


def prior_hash(prior: GaussianPrior, mm: MeasurementModel) -> str:
    doc = {"prior": prior_to_dict(prior), "mm": measurement_to_dict(mm)}
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def _generate_split(
    prior: GaussianPrior, mm: MeasurementModel, n: int, seed: int, split: str
) -> Split:
    xs = np.empty((n, prior.dim))
    ys = np.empty((n, prior.dim))
    for shard, start in enumerate(range(0, n, SHARD_SIZE)):
        m = min(SHARD_SIZE, n - start)
        rng = stream(seed, "data", split, shard)
        x, y = sample_pairs(prior, mm, m, rng)
        xs[start : start + m] = x
        ys[start : start + m] = y
    return Split(x=xs, y=ys)


def generate_dataset(
    prior: GaussianPrior,
    mm: MeasurementModel,
    counts: tuple[int, int, int],
    seed: int,
) -> DatasetHandle:
    """Draw train/val/test splits of the given sizes, deterministically."""
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or any(c <= 0 for c in counts):
        raise InvalidArgumentError("counts must be three positive sizes")
    splits = {
        name: _generate_split(prior, mm, c, seed, name)
        for name, c in zip(SPLIT_NAMES, counts)
    }
    return DatasetHandle(
        prior=prior, mm=mm, seed=int(seed), counts=counts, **splits
    )


def save_dataset(handle: DatasetHandle, path) -> None:
    arrays = []
    payload = bytearray()
    for name in SPLIT_NAMES:
        sp = handle.split(name)
        for field in ("x", "y"):
            arr = np.ascontiguousarray(getattr(sp, field), dtype="<f8")
            arrays.append(
                {
                    "name": "%s_%s" % (name, field),
                    "dtype": "<f8",
                    "shape": list(arr.shape),
                    "offset": len(payload),
                    "nbytes": arr.nbytes,
                }
            )
            payload.extend(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "rng": ALGORITHM_ID,
        "seed": handle.seed,
        "counts": list(handle.counts),
        "dim": handle.dim,
        "prior": prior_to_dict(handle.prior),
        "mm": measurement_to_dict(handle.mm),
        "prior_hash": prior_hash(handle.prior, handle.mm),
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
        "arrays": arrays,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_dataset(path, expected_prior: GaussianPrior | None = None,
                 expected_mm: MeasurementModel | None = None) -> DatasetHandle:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise VersionMismatchError("not a dataset container (bad magic %r)" % magic)
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise TruncatedFileError("header length field missing")
        (hlen,) = struct.unpack("<I", raw_len)
        blob = fh.read(hlen)
        if len(blob) < hlen:
            raise TruncatedFileError("header truncated")
        header = json.loads(blob.decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise VersionMismatchError(
                "unsupported dataset format_version %r" % header.get("format_version")
            )
        payload = fh.read()
    expected_bytes = sum(a["nbytes"] for a in header["arrays"])
    if len(payload) < expected_bytes:
        raise TruncatedFileError(
            "payload has %d bytes, header declares %d" % (len(payload), expected_bytes)
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise ChecksumMismatchError("payload checksum mismatch")

    prior = prior_from_dict(header["prior"])
    mm = measurement_from_dict(header["mm"])
    if expected_prior is not None:
        want = prior_hash(expected_prior, expected_mm if expected_mm is not None else mm)
        if want != header["prior_hash"]:
            raise PriorMismatchError(
                "dataset was generated under a different prior/measurement model"
            )

    def pull(name: str) -> np.ndarray:
        meta = next(a for a in header["arrays"] if a["name"] == name)
        arr = np.frombuffer(
            payload, dtype=meta["dtype"], count=meta["nbytes"] // 8,
            offset=meta["offset"],
        )
        return arr.reshape(meta["shape"]).copy()

    splits = {
        name: Split(x=pull("%s_x" % name), y=pull("%s_y" % name))
        for name in SPLIT_NAMES
    }
    return DatasetHandle(
        prior=prior,
        mm=mm,
        seed=int(header["seed"]),
        counts=tuple(header["counts"]),
        **splits,
    )
