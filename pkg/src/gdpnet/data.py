"""Datasets: GDEB binary ingestion, synthetic planted-trigger generation,
micro-F1, and the token-selection analyzer.

GDEB layout (little-endian): magic "GDEB", version u32=1, d_in u32, |R| u32,
|R| length-prefixed relation names, example count u64; per example: id
(length-prefixed), label u32, T u32, flags byte (bit0 token strings, bit1
spans, bit2 trigger mask), the optional fields in that order, then
(T+2) * d_in float32 rows: CLS, tokens 1..T, SEP. Embeddings are widened to
float64 on load and preserved bit-exactly through a round trip.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

GDEB_MAGIC = b"GDEB"
GDEB_VERSION = 1
NO_RELATION = "no_relation"


class GdebParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class TokenSequence:
    """One example: (T+2) x d_in embeddings plus label and optional markup."""

    id: str
    label: int
    embeddings: np.ndarray                      # float64, rows: CLS, 1..T, SEP
    token_strings: list[str] | None = None      # length T
    subject_span: tuple[int, int] | None = None  # [start, end) in 1..T
    object_span: tuple[int, int] | None = None
    trigger_mask: list[bool] | None = None      # length T

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0] - 2

    def validate(self) -> None:
        t = self.n_tokens
        if t < 1:
            raise ValueError(f"example {self.id}: needs at least one token")
        for span in (self.subject_span, self.object_span):
            if span is not None and not (1 <= span[0] < span[1] <= t + 1):
                raise ValueError(f"example {self.id}: span {span} outside 1..{t}")
        if self.trigger_mask is not None and len(self.trigger_mask) != t:
            raise ValueError(f"example {self.id}: trigger mask length != {t}")
        if self.token_strings is not None and len(self.token_strings) != t:
            raise ValueError(f"example {self.id}: token strings length != {t}")


@dataclass
class Dataset:
    relations: list[str]
    examples: list[TokenSequence]
    split: str = ""

    @property
    def d_in(self) -> int:
        return self.examples[0].embeddings.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.relations)

    @property
    def no_relation_index(self) -> int | None:
        try:
            return self.relations.index(NO_RELATION)
        except ValueError:
            return None

    def validate(self) -> None:
        seen = set()
        for ex in self.examples:
            ex.validate()
            if ex.id in seen:
                raise ValueError(f"duplicate example id {ex.id!r}")
            seen.add(ex.id)
            if not 0 <= ex.label < len(self.relations):
                raise ValueError(f"example {ex.id}: label {ex.label} out of range")


# ---------------------------------------------------------------------------
# GDEB serialization


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def write_gdeb(dataset: Dataset, path: str) -> None:
    d_in = dataset.d_in
    parts = [GDEB_MAGIC,
             struct.pack("<III", GDEB_VERSION, d_in, len(dataset.relations))]
    for name in dataset.relations:
        parts.append(_pack_str(name))
    parts.append(struct.pack("<Q", len(dataset.examples)))
    for ex in dataset.examples:
        t = ex.n_tokens
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
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise GdebParseError(f"truncated while reading {what}", self.off)
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(what + " length")
        return self.take(n, what).decode("utf-8")


def load_embedding_file(path: str) -> Dataset:
    """Parse a GDEB file; raises GdebParseError with a byte offset on damage."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4, "magic") != GDEB_MAGIC:
        raise GdebParseError("bad magic bytes", 0)
    version = rd.u32("version")
    if version != GDEB_VERSION:
        raise GdebParseError(f"unsupported version {version}", 4)
    d_in = rd.u32("d_in")
    n_rel = rd.u32("relation count")
    relations = [rd.string("relation name") for _ in range(n_rel)]
    count = rd.u64("example count")
    examples = []
    for _ in range(count):
        ex_id = rd.string("example id")
        label = rd.u32("label")
        t = rd.u32("token count")
        flags = rd.take(1, "flags")[0]
        strings = [rd.string("token") for _ in range(t)] if flags & 1 else None
        spans = (None, None)
        if flags & 2:
            pos_at = rd.off
            raw = struct.unpack("<IIII", rd.take(16, "spans"))
            spans = ((raw[0], raw[1]), (raw[2], raw[3]))
            for span in spans:
                if not (1 <= span[0] < span[1] <= t + 1):
                    raise GdebParseError(f"span {span} outside 1..{t}", pos_at)
        mask = [b != 0 for b in rd.take(t, "trigger mask")] if flags & 4 else None
        emb_raw = rd.take((t + 2) * d_in * 4, "embeddings")
        emb = np.frombuffer(emb_raw, dtype="<f4").reshape(t + 2, d_in).astype(np.float64)
        examples.append(TokenSequence(ex_id, label, emb, strings,
                                      spans[0], spans[1], mask))
    if rd.off != len(rd.blob):
        raise GdebParseError("trailing bytes after last example", rd.off)
    ds = Dataset(relations, examples)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# synthetic planted-trigger task


@dataclass
class SynthConfig:
    vocab_size: int = 200
    n_relations: int = 4
    triggers_per_relation: int = 3
    len_min: int = 10
    len_max: int = 24
    no_relation_frac: float = 0.2
    n_train: int = 2000
    n_dev: int = 400
    n_test: int = 400
    embed_dim: int = 64
    seed: int = 0

    def validate(self) -> None:
        if self.vocab_size <= self.n_relations * self.triggers_per_relation + 2:
            raise ValueError("vocab too small: need Vz > K*c + 2")
        if self.len_min < 3:
            raise ValueError("minimum length must be at least 3")
        if self.len_max < self.len_min:
            raise ValueError("length range is empty")
        if not 0.0 <= self.no_relation_frac < 1.0:
            raise ValueError("no-relation fraction must be in [0, 1)")
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ValueError("every split needs at least one example")


def generate_synthetic(cfg: SynthConfig) -> tuple[Dataset, Dataset, Dataset, np.ndarray]:
    """Build train/dev/test datasets whose labels are decided by one planted
    trigger token hidden among noise tokens.

    Token embeddings are drawn once from a seeded unit Gaussian and frozen;
    they are quantized through float32 so GDEB round trips are bit-exact.
    Vocabulary layout: id 0 subject marker, id 1 object marker, ids
    2..2+K*c-1 triggers (c per relation), the rest noise. Two extra rows at
    the end hold the CLS and SEP vectors.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_trig = cfg.n_relations * cfg.triggers_per_relation
    table = rng.standard_normal((cfg.vocab_size + 2, cfg.embed_dim))
    table = table.astype(np.float32).astype(np.float64)
    cls_vec = table[-2]
    sep_vec = table[-1]
    noise_ids = np.arange(2 + n_trig, cfg.vocab_size)
    relations = [NO_RELATION] + [f"rel_{k}" for k in range(1, cfg.n_relations + 1)]

    def token_name(tok: int) -> str:
        if tok == 0:
            return "subj"
        if tok == 1:
            return "obj"
        if tok < 2 + n_trig:
            return f"trig{tok - 2}"
        return f"tok{tok}"

    def make_example(split: str, i: int) -> TokenSequence:
        t = int(rng.integers(cfg.len_min, cfg.len_max + 1))
        positive = rng.random() >= cfg.no_relation_frac
        label = int(rng.integers(1, cfg.n_relations + 1)) if positive else 0
        tokens = rng.choice(noise_ids, size=t)
        n_special = 3 if positive else 2
        spots = rng.choice(t, size=n_special, replace=False)
        tokens[spots[0]] = 0
        tokens[spots[1]] = 1
        mask = [False] * t
        if positive:
            trig_set = 2 + (label - 1) * cfg.triggers_per_relation
            tokens[spots[2]] = trig_set + int(rng.integers(cfg.triggers_per_relation))
            mask[spots[2]] = True
        emb = np.empty((t + 2, cfg.embed_dim))
        emb[0] = cls_vec
        emb[1:t + 1] = table[tokens]
        emb[t + 1] = sep_vec
        return TokenSequence(
            id=f"{split}-{i}",
            label=label,
            embeddings=emb,
            token_strings=[token_name(int(tok)) for tok in tokens],
            subject_span=(int(spots[0]) + 1, int(spots[0]) + 2),
            object_span=(int(spots[1]) + 1, int(spots[1]) + 2),
            trigger_mask=mask,
        )

    splits = []
    for split, n in (("train", cfg.n_train), ("dev", cfg.n_dev), ("test", cfg.n_test)):
        ds = Dataset(relations, [make_example(split, i) for i in range(n)], split)
        ds.validate()
        splits.append(ds)
    return splits[0], splits[1], splits[2], table


# ---------------------------------------------------------------------------
# metrics


def micro_f1(predictions, golds, no_relation: int | None) -> tuple[float, float, float]:
    """Micro-averaged precision/recall/F1 over all classes except no_relation.

    Any 0/0 ratio is defined as 0.
    """
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in length")
    tp = pred_pos = gold_pos = 0
    for p, g in zip(predictions, golds):
        if p != no_relation:
            pred_pos += 1
            if p == g:
                tp += 1
        if g != no_relation:
            gold_pos += 1
    precision = tp / pred_pos if pred_pos else 0.0
    recall = tp / gold_pos if gold_pos else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def accuracy(predictions, golds) -> float:
    return sum(p == g for p, g in zip(predictions, golds)) / len(golds)


# ---------------------------------------------------------------------------
# token-selection analyzer


@dataclass
class SelectionStats:
    """Corpus-pooled survival percentages by token class (None = not available)."""

    all_tokens: float | None
    non_repetitive: float | None
    repetitive: float | None
    trigger: float | None
    counts: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float | None]]:
        return [("all_tokens", self.all_tokens),
                ("non_repetitive", self.non_repetitive),
                ("repetitive", self.repetitive),
                ("trigger", self.trigger)]


def selection_stats(final_survivors: list[np.ndarray], dataset: Dataset) -> SelectionStats:
    """Percentage of tokens whose positions survive to the last pooled graph.

    ``final_survivors[i]`` holds original positions (1..T+1, SEP included)
    for example i; counts only consider real token positions 1..T and are
    pooled over the whole corpus. Repetitive tokens are surface forms
    (lowercased) occurring at least twice within their own sequence.
    """
    denom = {"all": 0, "nonrep": 0, "rep": 0, "trig": 0}
    hits = {"all": 0, "nonrep": 0, "rep": 0, "trig": 0}
    have_strings = all(ex.token_strings is not None for ex in dataset.examples)
    have_masks = any(ex.trigger_mask is not None for ex in dataset.examples)
    for ex, survivors in zip(dataset.examples, final_survivors):
        t = ex.n_tokens
        kept = set(int(p) for p in survivors if 1 <= p <= t)
        denom["all"] += t
        hits["all"] += len(kept)
        if have_strings:
            lowered = [s.lower() for s in ex.token_strings]
            freq: dict[str, int] = {}
            for s in lowered:
                freq[s] = freq.get(s, 0) + 1
            for pos, s in enumerate(lowered, start=1):
                key = "rep" if freq[s] >= 2 else "nonrep"
                denom[key] += 1
                hits[key] += pos in kept
        if ex.trigger_mask is not None:
            for pos, flag in enumerate(ex.trigger_mask, start=1):
                if flag:
                    denom["trig"] += 1
                    hits["trig"] += pos in kept

    def pct(key: str) -> float | None:
        return 100.0 * hits[key] / denom[key] if denom[key] else None

    return SelectionStats(
        all_tokens=pct("all"),
        non_repetitive=pct("nonrep") if have_strings else None,
        repetitive=pct("rep") if have_strings else None,
        trigger=pct("trig") if have_masks else None,
        counts={"hits": hits, "denominators": denom},
    )
