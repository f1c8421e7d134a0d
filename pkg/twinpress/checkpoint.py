"""
Binary twin checkpoints.

Layout: three little-endian int64 header fields (cluster_id, version, W)
followed by the encoded ParameterVector (u64 length, f64 values).
"""

import logging
import os
from dataclasses import dataclass

import numpy as np

from twinpress.errors import ParseError, RunIOError
from twinpress.forecast import ParameterVector, decode_parameters, encode_parameters

HEADER_DTYPE = "<i8"
HEADER_BYTES = 3 * 8


@dataclass(frozen=True)
class TwinCheckpoint:
    cluster_id: int
    version: int
    window: int
    params: ParameterVector


def encode_checkpoint(checkpoint: TwinCheckpoint) -> bytes:
    header = np.array([checkpoint.cluster_id, checkpoint.version, checkpoint.window], dtype=HEADER_DTYPE)
    return header.tobytes() + encode_parameters(checkpoint.params)


def decode_checkpoint(payload: bytes) -> TwinCheckpoint:
    """Parse checkpoint bytes.

    Raises:
        ParseError: If the payload is truncated, has trailing bytes, or its
            parameter count disagrees with the header window
    """
    if len(payload) < HEADER_BYTES:
        raise ParseError("checkpoint shorter than its header")
    cluster_id, version, window = (int(v) for v in np.frombuffer(payload[:HEADER_BYTES], dtype=HEADER_DTYPE))
    params, consumed = decode_parameters(payload[HEADER_BYTES:])
    if HEADER_BYTES + consumed != len(payload):
        raise ParseError(f"checkpoint has {len(payload) - HEADER_BYTES - consumed} trailing bytes")
    if len(params) != window + 1:
        raise ParseError(f"checkpoint header says W={window} but holds {len(params)} parameters")
    return TwinCheckpoint(cluster_id=cluster_id, version=version, window=window, params=params)


def save_checkpoint(checkpoint: TwinCheckpoint, path: str) -> None:
    try:
        with open(path, "wb") as f:
            f.write(encode_checkpoint(checkpoint))
    except OSError as e:
        raise RunIOError(f"cannot write checkpoint {path}: {e}") from e
    logging.debug(f"Saved checkpoint cluster={checkpoint.cluster_id} version={checkpoint.version} to {path}")


def load_checkpoint(path: str) -> TwinCheckpoint:
    if not os.path.exists(path):
        raise RunIOError(f"checkpoint {path} does not exist")
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
