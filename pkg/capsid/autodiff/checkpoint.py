"""
CAPW checkpoint format.

Single little-endian file:
    magic "CAPW" | version u32 | n_tensors u32
    then per tensor: name_len u32 | name (utf-8) | rank u32 | dims u32 * rank | float64 values

Tensor order is preserved on both sides.
"""
from __future__ import annotations

from pathlib import Path
import struct
from typing import Mapping

import numpy as np

from capsid.core.errors import ContractError

MAGIC = b"CAPW"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
	parts = [_HEADER.pack(MAGIC, VERSION, len(tensors))]
	for name, value in tensors.items():
		value = np.asarray(value, dtype=np.float64)
		encoded = name.encode("utf-8")
		parts.append(_U32.pack(len(encoded)))
		parts.append(encoded)
		parts.append(_U32.pack(value.ndim))
		parts.extend(_U32.pack(d) for d in value.shape)
		parts.append(value.astype("<f8").tobytes(order="C"))
	return b"".join(parts)


def decode_checkpoint(payload: bytes) -> dict[str, np.ndarray]:
	"""
	Decode a CAPW payload into an ordered name -> array mapping.

	This is a pure function for easy testing - no side effects.
	"""
	if len(payload) < _HEADER.size:
		raise ContractError("checkpoint shorter than its header")
	magic, version, count = _HEADER.unpack_from(payload, 0)
	if magic != MAGIC:
		raise ContractError(f"bad checkpoint magic {magic!r}")
	if version != VERSION:
		raise ContractError(f"unsupported checkpoint version {version}")
	offset = _HEADER.size

	def read_u32() -> int:
		nonlocal offset
		if offset + 4 > len(payload):
			raise ContractError(f"truncated checkpoint at byte {offset}")
		(value,) = _U32.unpack_from(payload, offset)
		offset += 4
		return value

	tensors: dict[str, np.ndarray] = {}
	for _ in range(count):
		length = read_u32()
		name = payload[offset:offset + length].decode("utf-8")
		offset += length
		shape = tuple(read_u32() for _ in range(read_u32()))
		size = int(np.prod(shape)) if shape else 1
		if offset + 8 * size > len(payload):
			raise ContractError(f"truncated values for tensor {name!r}")
		values = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
		tensors[name] = values.astype(np.float64).reshape(shape)
		offset += 8 * size
	if offset != len(payload):
		raise ContractError(f"{len(payload) - offset} trailing bytes after {count} tensors")
	return tensors


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> Path:
	target = Path(path)
	target.parent.mkdir(parents=True, exist_ok=True)
	target.write_bytes(encode_checkpoint(tensors))
	return target


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
	return decode_checkpoint(Path(path).read_bytes())
