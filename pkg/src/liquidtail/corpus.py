"""Byte-level vocabulary, corpus batching, and the checkpoint file format.

The vocabulary is the 256 raw bytes plus BOS/EOS/PAD, so encode/decode is a
bijection over byte strings and needs no external tokenizer assets.

Checkpoints are a single binary file: magic "TMCK", a CRC-protected JSON
header describing named float32 tensors, then the raw little-endian payload.
Every tensor carries its own CRC32 so corruption is reported by name.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "Vocab",
    "BOS_ID",
    "EOS_ID",
    "PAD_ID",
    "VOCAB_SIZE",
    "batches",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "read_corpus",
]

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259

_SPECIAL_NAMES = {BOS_ID: "<bos>", EOS_ID: "<eos>", PAD_ID: "<pad>"}


class Vocab:
    """Byte identity mapping: ids 0..255 are bytes, 256..258 are specials."""

    vocab_size = VOCAB_SIZE
    bos_id = BOS_ID
    eos_id = EOS_ID
    pad_id = PAD_ID

    def encode(self, text: bytes | str) -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return list(text)

    def decode(self, ids: list[int] | np.ndarray) -> bytes:
        """Inverse of encode; special ids are stripped, invalid ids rejected."""
        out = bytearray()
        for i in ids:
            i = int(i)
            if 0 <= i < 256:
                out.append(i)
            elif i in _SPECIAL_NAMES:
                continue
            else:
                raise ValueError(f"invalid token id {i} (vocab size {VOCAB_SIZE})")
        return bytes(out)

    def decode_text(self, ids: list[int] | np.ndarray) -> str:
        return self.decode(ids).decode("utf-8", errors="replace")

    def token_repr(self, token_id: int) -> str:
        """Printable form of a single token, for candidate panels and logs."""
        if token_id in _SPECIAL_NAMES:
            return _SPECIAL_NAMES[token_id]
        if not 0 <= token_id < 256:
            raise ValueError(f"invalid token id {token_id}")
        ch = bytes([token_id])
        try:
            s = ch.decode("utf-8")
        except UnicodeDecodeError:
            return f"\\x{token_id:02x}"
        return s if s.isprintable() or s == " " else repr(s)[1:-1]


def read_corpus(path: str | Path) -> np.ndarray:
    """Token ids for a UTF-8 text file, or all *.txt under a directory."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.rglob("*.txt"))
        if not files:
            raise FileNotFoundError(f"no .txt files under {p}")
        data = b"".join(f.read_bytes() for f in files)
    else:
        data = p.read_bytes()
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def batches(
    corpus: np.ndarray, seq_len: int, batch_size: int, seed: int
) -> Iterator[np.ndarray]:
    """Endless stream of [batch_size, seq_len] id matrices.

    Rows are windows at uniformly random offsets (seeded, so the stream is
    reproducible); the corpus is revisited forever rather than exhausted.
    """
    corpus = np.asarray(corpus)
    n = corpus.shape[0]
    if seq_len < 1 or batch_size < 1:
        raise ValueError("seq_len and batch_size must be >= 1")
    if n < seq_len:
        raise ValueError(f"corpus has {n} tokens, need at least seq_len={seq_len}")
    rng = np.random.default_rng(seed)
    max_start = n - seq_len
    while True:
        starts = rng.integers(0, max_start + 1, size=batch_size)
        yield np.stack([corpus[s : s + seq_len] for s in starts])


# ---------------------------------------------------------------------------
# Checkpoint format: magic | version u32 | header_len u64 | header_crc u32 |
#                    header JSON | payload (concatenated '<f4' tensors)
# ---------------------------------------------------------------------------

_MAGIC = b"TMCK"
_VERSION = 1


class CheckpointError(Exception):
    """Any structural problem with a checkpoint file."""


@dataclass
class Checkpoint:
    """Parsed checkpoint: ordered named tensors plus config and step."""

    tensors: dict[str, np.ndarray]
    config: dict
    step: int
    version: int = _VERSION


def save_checkpoint(
    tensors: dict[str, np.ndarray], config: dict, step: int, path: str | Path
) -> None:
    """Write tensors (stored as little-endian float32) plus a config snapshot."""
    if not tensors:
        raise CheckpointError("refusing to save a checkpoint with no tensors")
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        blob = a.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(a.shape),
                "dtype": "<f4",
                "offset": offset,
                "nbytes": len(blob),
                "crc32": zlib.crc32(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {"step": int(step), "config": config, "tensors": entries}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray()
    out += _MAGIC
    out += np.uint32(_VERSION).tobytes()
    out += np.uint64(len(header_bytes)).tobytes()
    out += np.uint32(zlib.crc32(header_bytes)).tobytes()
    out += header_bytes
    for blob in blobs:
        out += blob
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and verify a checkpoint; errors name what is wrong and where."""
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated file ({len(data)} bytes)")
    if data[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {_MAGIC!r}")
    version = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    if version != _VERSION:
        raise CheckpointError(f"{path}: version {version} unsupported (expected {_VERSION})")
    header_len = int(np.frombuffer(data[8:16], dtype="<u8")[0])
    header_crc = int(np.frombuffer(data[16:20], dtype="<u4")[0])
    header_end = 20 + header_len
    if len(data) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    header_bytes = data[20:header_end]
    if zlib.crc32(header_bytes) != header_crc:
        raise CheckpointError(f"{path}: header checksum mismatch")
    try:
        header = json.loads(header_bytes)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: unparseable header ({e})") from e
    for key in ("step", "config", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing '{key}'")
    payload = data[header_end:]
    tensors: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        try:
            name, shape = ent["name"], tuple(ent["shape"])
            off, nbytes, crc = ent["offset"], ent["nbytes"], ent["crc32"]
        except (KeyError, TypeError) as e:
            raise CheckpointError(f"{path}: corrupt tensor table entry ({e})") from e
        blob = payload[off : off + nbytes]
        if len(blob) != nbytes:
            raise CheckpointError(f"{path}: tensor '{name}' truncated")
        if zlib.crc32(blob) != crc:
            raise CheckpointError(f"{path}: tensor '{name}' checksum mismatch")
        arr = np.frombuffer(blob, dtype="<f4")
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise CheckpointError(
                f"{path}: tensor '{name}' has {arr.size} values, shape {shape} wants {expected}"
            )
        tensors[name] = arr.reshape(shape).copy()
    return Checkpoint(tensors=tensors, config=header["config"], step=int(header["step"]))
