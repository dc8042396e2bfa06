"""GDEB writer: the binary layout read by the graph-engine package.

Layout (little-endian): magic "GDEB", version u32=1, d_in u32, |R| u32,
|R| length-prefixed UTF-8 relation names, example count u64; per example:
id (length-prefixed), label u32, T u32, flags byte (bit0 token strings,
bit1 spans, bit2 trigger mask), the optional fields in that order, then
(T+2) * d_in float32 rows: CLS, tokens 1..T, SEP.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

GDEB_MAGIC = b"GDEB"
GDEB_VERSION = 1


@dataclass
class GdebExample:
    id: str
    label: int
    embeddings: np.ndarray                       # (T+2, d_in) float32
    token_strings: list[str] | None = None
    subject_span: tuple[int, int] | None = None  # [start, end) in 1..T
    object_span: tuple[int, int] | None = None
    trigger_mask: list[bool] | None = None


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def write_gdeb(relations: list[str], examples: list[GdebExample], path: str) -> None:
    """Serialize and atomically replace ``path`` (temp file + rename)."""
    if not examples:
        raise ValueError("refusing to write an empty GDEB file")
    d_in = examples[0].embeddings.shape[1]
    parts = [GDEB_MAGIC, struct.pack("<III", GDEB_VERSION, d_in, len(relations))]
    for name in relations:
        parts.append(_pack_str(name))
    parts.append(struct.pack("<Q", len(examples)))
    for ex in examples:
        t = ex.embeddings.shape[0] - 2
        if ex.trigger_mask is not None and len(ex.trigger_mask) != t:
            raise ValueError(f"example {ex.id}: trigger mask length != {t}")
        if ex.token_strings is not None and len(ex.token_strings) != t:
            raise ValueError(f"example {ex.id}: token strings length != {t}")
        for span in (ex.subject_span, ex.object_span):
            if span is not None and not (1 <= span[0] < span[1] <= t + 1):
                raise ValueError(f"example {ex.id}: span {span} outside 1..{t}")
        flags = ((1 if ex.token_strings is not None else 0)
                 | (2 if ex.subject_span is not None else 0)
                 | (4 if ex.trigger_mask is not None else 0))
        parts.append(_pack_str(ex.id))
        parts.append(struct.pack("<IIB", ex.label, t, flags))
        if ex.token_strings is not None:
            for tok in ex.token_strings:
                parts.append(_pack_str(tok))
        if ex.subject_span is not None:
            parts.append(struct.pack("<IIII", *ex.subject_span, *ex.object_span))
        if ex.trigger_mask is not None:
            parts.append(bytes(1 if b else 0 for b in ex.trigger_mask))
        parts.append(np.ascontiguousarray(ex.embeddings, dtype="<f4").tobytes())
    blob = b"".join(parts)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".gdeb.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
