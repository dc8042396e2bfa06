"""Frozen-encoder embedding export.

Each formatted word sequence is sub-word tokenized with word-to-piece
bookkeeping, run through the encoder in eval mode, and written to a GDEB
file as float32 hidden states of the requested layer. Embeddings are
exported frozen: no fine-tuning happens here, so downstream scores measure
the graph engine over fixed features only.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .formats import FormatError, WordSequence, dialogue_examples, sentence_examples
from .gdeb import GdebExample, write_gdeb


@dataclass
class ExportSpec:
    encoder: str                  # model name or local path
    input_format: str             # "dialogue" | "sentence"
    in_path: str
    out_path: str
    max_len: int = 512            # total budget including CLS and final SEP
    layer: int = -1               # hidden-state layer to export; -1 = last

    def validate(self) -> None:
        if self.input_format not in ("dialogue", "sentence"):
            raise FormatError(f"unknown input format {self.input_format!r}")
        if self.max_len < 8:
            raise FormatError("max_len must be at least 8")


@dataclass
class PieceSequence:
    id: str
    label: str
    pieces: list[str]
    subject_span: tuple[int, int]   # [start, end) in 1..T over pieces
    object_span: tuple[int, int]
    trigger_mask: list[bool]


def subword_map(seq: WordSequence, tokenizer, max_len: int) -> PieceSequence:
    """Split words into pieces, remapping spans and the trigger mask.

    Over-length sequences are truncated from the front of the dialogue
    region (whole words at a time), with a warning.
    """
    per_word = [tokenizer.tokenize(w) or [tokenizer.unk_token] for w in seq.words]
    budget = max_len - 2  # CLS and final SEP

    drop = 0
    total = sum(len(p) for p in per_word)
    while total > budget and drop < seq.dialogue_words:
        total -= len(per_word[drop])
        drop += 1
    if drop:
        warnings.warn(f"example {seq.id!r}: truncated {drop} leading words "
                      f"to fit {max_len} positions")
    if total > budget:
        raise FormatError(f"example {seq.id!r}: {total} pieces exceed the "
                          f"{max_len}-position budget even after truncation")

    pieces: list[str] = []
    mask: list[bool] = []
    word_start = {}
    word_end = {}
    for w_idx in range(drop, len(seq.words)):
        word_start[w_idx] = len(pieces) + 1          # 1-based piece position
        pieces.extend(per_word[w_idx])
        mask.extend([seq.trigger_mask[w_idx]] * len(per_word[w_idx]))
        word_end[w_idx] = len(pieces) + 1

    def remap(span):
        start, end = span
        if start < drop:
            raise FormatError(f"example {seq.id!r}: truncation removed a span")
        return word_start[start], word_end[end - 1]

    return PieceSequence(id=seq.id, label=seq.label, pieces=pieces,
                         subject_span=remap(seq.subject_span),
                         object_span=remap(seq.object_span),
                         trigger_mask=mask)


def marker_tokens(sequences: list[WordSequence]) -> list[str]:
    """Bracketed marker tokens the tokenizer must keep atomic."""
    seen = set()
    for seq in sequences:
        for w in seq.words:
            if w.startswith("[") and w.endswith("]"):
                seen.add(w)
    return sorted(seen)


def load_encoder(name: str, extra_tokens: list[str]):
    """Load tokenizer and encoder; register marker tokens deterministically.

    New marker embeddings (if any) are initialized under a fixed torch seed
    so identical inputs export identical files.
    """
    from transformers import AutoModel, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(name)
    model = AutoModel.from_pretrained(name)
    missing = [t for t in extra_tokens
               if tokenizer.convert_tokens_to_ids(t) == tokenizer.unk_token_id]
    if missing:
        tokenizer.add_special_tokens({"additional_special_tokens": missing})
        torch.manual_seed(0)
        model.resize_token_embeddings(len(tokenizer))
    model.eval()
    return tokenizer, model


def encode_pieces(piece_seq: PieceSequence, tokenizer, model, layer: int) -> np.ndarray:
    ids = ([tokenizer.cls_token_id]
           + tokenizer.convert_tokens_to_ids(piece_seq.pieces)
           + [tokenizer.sep_token_id])
    with torch.no_grad():
        out = model(torch.tensor([ids]), output_hidden_states=True)
    hidden = out.hidden_states[layer] if layer != -1 else out.last_hidden_state
    return hidden[0].numpy().astype(np.float32)


def export(spec: ExportSpec) -> dict:
    """Run the full pipeline; returns a small summary dict."""
    spec.validate()
    with open(spec.in_path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    sequences = (dialogue_examples(data) if spec.input_format == "dialogue"
                 else sentence_examples(data))
    if not sequences:
        raise FormatError(f"no examples found in {spec.in_path}")
    tokenizer, model = load_encoder(spec.encoder, marker_tokens(sequences))
    n_layers = model.config.num_hidden_layers
    if not (-1 <= spec.layer <= n_layers):
        raise FormatError(f"layer {spec.layer} outside 0..{n_layers}")

    labels = sorted({seq.label for seq in sequences})
    if "no_relation" in labels:  # keep the conventional index-0 slot
        labels.remove("no_relation")
        labels.insert(0, "no_relation")
    label_index = {name: i for i, name in enumerate(labels)}

    examples = []
    for seq in sequences:
        piece_seq = subword_map(seq, tokenizer, spec.max_len)
        hidden = encode_pieces(piece_seq, tokenizer, model, spec.layer)
        has_trigger = any(piece_seq.trigger_mask)
        examples.append(GdebExample(
            id=piece_seq.id,
            label=label_index[piece_seq.label],
            embeddings=hidden,
            token_strings=piece_seq.pieces,
            subject_span=piece_seq.subject_span,
            object_span=piece_seq.object_span,
            trigger_mask=piece_seq.trigger_mask if has_trigger else None,
        ))
    write_gdeb(labels, examples, spec.out_path)
    return {"examples": len(examples), "relations": len(labels),
            "d_in": int(model.config.hidden_size), "out": spec.out_path}
