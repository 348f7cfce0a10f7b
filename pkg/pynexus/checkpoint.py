"""Binary checkpoint format.

Layout (little-endian)::

    b"NEXUS1\\n"
    <config header: sorted key=value pairs separated by spaces> b"\\n"
    uint32 number of parameters
    per parameter: uint16 path length, UTF-8 path, uint8 rank, rank × uint32 dims,
                   values as <f8
    8-byte BLAKE2b digest of all value bytes
"""

import hashlib
import logging
import struct
from pathlib import Path

import numpy as np

from pynexus.model import NexusConfig, NexusParams, parameter_specs
from pynexus.tensor import DiffArray, parameter


logger = logging.getLogger("pynexus.checkpoint")

MAGIC = b"NEXUS1\n"
DIGEST_SIZE = 8


class CheckpointMismatchError(Exception):
    pass


def config_hash(config: NexusConfig) -> str:
    return hashlib.sha1(config.header().encode()).hexdigest()


def encode_checkpoint(params: NexusParams) -> bytes:
    parts = [MAGIC, params.config.header().encode() + b"\n"]
    parts.append(struct.pack("<I", len(params)))
    digest = hashlib.blake2b(digest_size=DIGEST_SIZE)
    for path, array in params.items():
        raw_path = path.encode()
        parts.append(struct.pack("<H", len(raw_path)) + raw_path)
        parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        values = array.values.astype("<f8").tobytes()
        digest.update(values)
        parts.append(values)
    parts.append(digest.digest())
    return b"".join(parts)


def decode_checkpoint(data: bytes, expected: NexusConfig | None = None) -> NexusParams:
    if not data.startswith(MAGIC):
        raise CheckpointMismatchError("Not a NEXUS checkpoint (bad magic)")
    pos = len(MAGIC)
    end = data.find(b"\n", pos)
    if end < 0:
        raise CheckpointMismatchError("Truncated checkpoint header")
    header = data[pos:end].decode()
    try:
        config = NexusConfig.from_header(header)
    except ValueError as e:
        raise CheckpointMismatchError(f"Invalid config header: {e}") from e
    if expected is not None and config_hash(config) != config_hash(expected):
        raise CheckpointMismatchError(
            f"Checkpoint config {config_hash(config)[:12]} does not match "
            f"the expected config {config_hash(expected)[:12]}"
        )
    pos = end + 1
    digest = hashlib.blake2b(digest_size=DIGEST_SIZE)
    arrays: dict[str, DiffArray] = {}
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        for _ in range(count):
            (length,) = struct.unpack_from("<H", data, pos)
            pos += 2
            path = data[pos : pos + length].decode()
            pos += length
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n_bytes = 8 * int(np.prod(shape))
            raw = data[pos : pos + n_bytes]
            if len(raw) != n_bytes:
                raise CheckpointMismatchError(f"Truncated values of {path}")
            digest.update(raw)
            arrays[path] = parameter(np.frombuffer(raw, "<f8").reshape(shape))
            pos += n_bytes
    except struct.error as e:
        raise CheckpointMismatchError(f"Truncated checkpoint: {e}") from e
    if data[pos:] != digest.digest():
        raise CheckpointMismatchError("Checkpoint checksum mismatch")
    params = NexusParams(config, arrays)
    expected_paths = {spec.path for spec in parameter_specs(config)}
    if set(arrays) != expected_paths:
        raise CheckpointMismatchError(
            f"Parameters {sorted(set(arrays) ^ expected_paths)} do not match config"
        )
    for spec in parameter_specs(config):
        if arrays[spec.path].shape != spec.shape:
            raise CheckpointMismatchError(
                f"Parameter {spec.path} has shape {arrays[spec.path].shape}, "
                f"the config needs {spec.shape}"
            )
    return params


def save_checkpoint(path: Path, params: NexusParams) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params))
    logger.info(f"Checkpoint with {params.count()} parameters written to {path}")


def load_checkpoint(path: Path, expected: NexusConfig | None = None) -> NexusParams:
    logger.debug(f"Loading checkpoint {path.absolute()}")
    return decode_checkpoint(path.read_bytes(), expected)
