"""Input formatting: dialogue- and sentence-level examples to word sequences.

Dialogue inputs follow the DialogRE JSON shape: a list of
``[turns, relations]`` items, where ``turns`` are strings like
"Speaker 1: ..." and each relation carries subject ``x``, object ``y``,
relation names ``r`` (list or string) and optional trigger strings ``t``.

Sentence inputs follow the TACRED JSON shape: dicts with ``token``,
inclusive ``subj_start``/``subj_end``/``subj_type`` (same for ``obj``) and
``relation``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field


class FormatError(ValueError):
    pass


SPEAKER_RE = re.compile(r"^speaker\s+(\d+)$", re.IGNORECASE)


@dataclass
class WordSequence:
    """One formatted example at the word level (before sub-word splitting).

    ``words`` is everything between the leading CLS and the final SEP;
    mid-sequence separators appear as ordinary "[SEP]" entries. Spans are
    word-index ranges [start, end) into ``words``; the trigger mask has one
    flag per word.
    """

    id: str
    label: str
    words: list[str]
    subject_span: tuple[int, int]
    object_span: tuple[int, int]
    trigger_mask: list[bool] = field(default_factory=list)
    dialogue_words: int = 0   # prefix length eligible for front truncation


def _replace_argument_speakers(turns: list[str], subject: str,
                               obj: str) -> list[str]:
    """Swap the speaker strings of argument speakers for dedicated tokens.

    Only the argument speakers are normalized; other speaker mentions are
    left as ordinary text.
    """
    out = list(turns)
    for arg, token in ((subject, "[S1]"), (obj, "[S2]")):
        if SPEAKER_RE.match(arg.strip()):
            pattern = re.compile(re.escape(arg.strip()), re.IGNORECASE)
            out = [pattern.sub(token, turn) for turn in out]
    return out


def _mark_trigger(words: list[str], trigger: str) -> list[bool]:
    """Flag every non-overlapping occurrence of the trigger word sequence."""
    mask = [False] * len(words)
    trig = trigger.split()
    if not trig:
        return mask
    lowered = [w.lower() for w in words]
    needle = [w.lower() for w in trig]
    i = 0
    while i + len(needle) <= len(lowered):
        if lowered[i:i + len(needle)] == needle:
            for k in range(i, i + len(needle)):
                mask[k] = True
            i += len(needle)
        else:
            i += 1
    return mask


def format_dialogue(turns: list[str], subject: str, obj: str, relation: str,
                    trigger: str = "", example_id: str = "") -> WordSequence:
    """Build the dialogue input sequence: X [SEP] X_s [SEP] X_o.

    The caller's encoder adds the leading CLS and the final SEP. Speaker
    strings of argument speakers are replaced by dedicated speaker tokens.
    """
    if not subject.strip():
        raise FormatError(f"example {example_id!r}: empty subject argument")
    if not obj.strip():
        raise FormatError(f"example {example_id!r}: empty object argument")
    if not turns:
        raise FormatError(f"example {example_id!r}: empty dialogue")
    replaced = _replace_argument_speakers(turns, subject, obj)
    dia_words: list[str] = []
    for turn in replaced:
        dia_words.extend(turn.split())
    subj_words = ("[S1]" if SPEAKER_RE.match(subject.strip()) else subject).split()
    obj_words = ("[S2]" if SPEAKER_RE.match(obj.strip()) else obj).split()
    words = list(dia_words)
    mask = _mark_trigger(dia_words, trigger)
    words.append("[SEP]")
    mask.append(False)
    s_start = len(words)
    words.extend(subj_words)
    mask.extend([False] * len(subj_words))
    s_end = len(words)
    words.append("[SEP]")
    mask.append(False)
    o_start = len(words)
    words.extend(obj_words)
    mask.extend([False] * len(obj_words))
    o_end = len(words)
    return WordSequence(id=example_id, label=relation, words=words,
                        subject_span=(s_start, s_end),
                        object_span=(o_start, o_end),
                        trigger_mask=mask, dialogue_words=len(dia_words))


def format_sentence(tokens: list[str], subj_start: int, subj_end: int,
                    subj_type: str, obj_start: int, obj_end: int,
                    obj_type: str, relation: str,
                    example_id: str = "") -> WordSequence:
    """Replace entity spans by repeated typed marker tokens, keeping length.

    Span bounds are inclusive (the sentence-level dataset convention).
    """
    if not (0 <= subj_start <= subj_end < len(tokens)):
        raise FormatError(f"example {example_id!r}: subject span out of range")
    if not (0 <= obj_start <= obj_end < len(tokens)):
        raise FormatError(f"example {example_id!r}: object span out of range")
    if max(subj_start, obj_start) <= min(subj_end, obj_end):
        raise FormatError(f"example {example_id!r}: overlapping entity spans")
    words = list(tokens)
    for i in range(subj_start, subj_end + 1):
        words[i] = f"[SUBJ-{subj_type.upper()}]"
    for i in range(obj_start, obj_end + 1):
        words[i] = f"[OBJ-{obj_type.upper()}]"
    return WordSequence(id=example_id, label=relation, words=words,
                        subject_span=(subj_start, subj_end + 1),
                        object_span=(obj_start, obj_end + 1),
                        trigger_mask=[False] * len(words),
                        dialogue_words=0)


def dialogue_examples(data) -> list[WordSequence]:
    """Expand a DialogRE-shaped JSON object into one example per pair and
    relation name (single-label scope)."""
    out = []
    for d_idx, item in enumerate(data):
        turns, relations = item[0], item[1]
        for p_idx, rel in enumerate(relations):
            names = rel["r"] if isinstance(rel["r"], list) else [rel["r"]]
            triggers = rel.get("t", [])
            if isinstance(triggers, str):
                triggers = [triggers]
            for r_idx, name in enumerate(names):
                trigger = triggers[r_idx] if r_idx < len(triggers) else ""
                out.append(format_dialogue(
                    turns, rel["x"], rel["y"], name, trigger,
                    example_id=f"d{d_idx}-p{p_idx}-r{r_idx}"))
    return out


def sentence_examples(data) -> list[WordSequence]:
    out = []
    for idx, item in enumerate(data):
        out.append(format_sentence(
            item["token"], item["subj_start"], item["subj_end"],
            item["subj_type"], item["obj_start"], item["obj_end"],
            item["obj_type"], item["relation"],
            example_id=item.get("id", f"s{idx}")))
    return out
