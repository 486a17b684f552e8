"""JSON-lines and binary PGM (P5) helpers shared by the pipeline stages."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

import numpy as np

SCHEMA_VERSION = 1


class JSONLError(ValueError):
    def __init__(self, path: str | Path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    """Parse one JSON object per non-blank line; errors carry the 1-based line number."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise JSONLError(path, lineno, f"malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise JSONLError(path, lineno, "expected a JSON object")
            records.append(obj)
    return records


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_record(obj: dict[str, Any]) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> None:
    atomic_write_text(path, "".join(dumps_record(r) + "\n" for r in records))


def write_json(path: str | Path, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        tokens.append(data[start:i])
    return tokens, i + 1  # exactly one whitespace byte precedes the raster


def read_pgm(path: str | Path) -> np.ndarray:
    """Read an 8-bit binary PGM as a uint8 array of shape (H, W)."""
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    raster = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=offset)
    return raster.reshape(height, width).copy()


def write_pgm(path: str | Path, raster: np.ndarray) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ValueError("PGM raster must be 2-D")
    if raster.dtype != np.uint8:
        raise ValueError("PGM raster must be uint8")
    h, w = raster.shape
    atomic_write_bytes(path, b"P5\n%d %d\n255\n" % (w, h) + raster.tobytes())


def image_to_pgm(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(pixels) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def pgm_to_image(raster: np.ndarray) -> np.ndarray:
    return raster.astype(np.float64) / 255.0
