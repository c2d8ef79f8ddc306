"""Data model, ingestion, splitting, and statistics for cause-annotated dialogues.

File format is JSONL with one dialogue per line:

    {"id": str, "source": str,
     "utterances": [{"speaker": str, "text": str, "clause_spans": [[s,e],...]?}],
     "annotations": [{"t": int, "causes": [{"u": int, "spans": [[s,e],...]?}]}]}

Unknown fields are ignored with a warning.  All cause reasoning downstream is
utterance-level; clause spans are carried through load/save untouched.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DanglingAnnotation, InsufficientData, MalformedRecord

SPEAKERS = ("seeker", "supporter", "generic_a", "generic_b")
SOURCES = ("esconv", "msc", "synthetic", "other")

_KNOWN_DIALOGUE_FIELDS = {"id", "source", "utterances", "annotations"}
_KNOWN_UTTERANCE_FIELDS = {"speaker", "text", "clause_spans"}
_KNOWN_ANNOTATION_FIELDS = {"t", "causes"}
_KNOWN_CAUSE_FIELDS = {"u", "spans"}


@dataclass(frozen=True)
class Utterance:
    index: int
    speaker: str
    text: str
    clause_spans: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"utterance index must be >= 0, got {self.index}")
        if self.speaker not in SPEAKERS:
            raise ValueError(f"unknown speaker {self.speaker!r}")
        if self.clause_spans is not None:
            _check_spans(self.clause_spans, len(self.text))


def _check_spans(spans: Sequence[tuple[int, int]], text_len: int) -> None:
    ordered = sorted(spans)
    for start, end in ordered:
        if not (0 <= start < end <= text_len):
            raise ValueError(f"span [{start},{end}) outside [0,{text_len}]")
    for (_, e_prev), (s_next, _) in zip(ordered, ordered[1:]):
        if s_next < e_prev:
            raise ValueError("clause spans overlap")


@dataclass(frozen=True)
class Dialogue:
    id: str
    source: str
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        if len(self.utterances) < 2:
            raise ValueError(f"dialogue {self.id!r} has fewer than 2 utterances")
        for pos, utt in enumerate(self.utterances):
            if utt.index != pos:
                raise ValueError(
                    f"dialogue {self.id!r}: utterance index {utt.index} at position {pos}"
                )


@dataclass(frozen=True)
class HistoryResponsePair:
    dialogue_id: str
    t: int
    cause_indices: frozenset[int] = frozenset()
    cause_spans: Mapping[int, tuple[tuple[int, int], ...]] | None = None

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"response index must be >= 1, got {self.t}")
        for j in self.cause_indices:
            if not (0 <= j < self.t):
                raise ValueError(f"cause index {j} not in [0, {self.t})")

    @property
    def key(self) -> tuple[str, int]:
        return (self.dialogue_id, self.t)


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[HistoryResponsePair, ...]
    valid: tuple[HistoryResponsePair, ...]
    test: tuple[HistoryResponsePair, ...]


@dataclass
class StatsReport:
    n_dialogues: int = 0
    n_pairs: int = 0
    n_utterances: int = 0
    n_cause_utterances: int = 0
    avg_cause_token_length: tuple[float, float] = (0.0, 0.0)
    cause_proportion_in_utterance: tuple[float, float] = (0.0, 0.0)
    causes_per_response_histogram: dict[int, float] = field(default_factory=dict)
    proximity_histogram: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_dialogues": self.n_dialogues,
            "n_pairs": self.n_pairs,
            "n_utterances": self.n_utterances,
            "n_cause_utterances": self.n_cause_utterances,
            "avg_cause_token_length": {
                "mean": self.avg_cause_token_length[0],
                "stdev": self.avg_cause_token_length[1],
            },
            "cause_proportion_in_utterance": {
                "mean": self.cause_proportion_in_utterance[0],
                "stdev": self.cause_proportion_in_utterance[1],
            },
            "causes_per_response_histogram": {
                str(k): v for k, v in sorted(self.causes_per_response_histogram.items())
            },
            "proximity_histogram": {
                str(k): v for k, v in sorted(self.proximity_histogram.items())
            },
        }


def index_dialogues(dialogues: Iterable[Dialogue]) -> dict[str, Dialogue]:
    """Map dialogue id -> dialogue, rejecting duplicates."""
    out: dict[str, Dialogue] = {}
    for d in dialogues:
        if d.id in out:
            raise ValueError(f"duplicate dialogue id {d.id!r}")
        out[d.id] = d
    return out


# -- JSONL load / save --


def _warn_unknown(fields: Iterable[str], known: set, where: str, line_no: int) -> None:
    unknown = [f for f in fields if f not in known]
    if unknown:
        warnings.warn(f"line {line_no}: ignoring unknown {where} fields {unknown}")


def load_corpus(path) -> tuple[list[Dialogue], list[HistoryResponsePair]]:
    """Parse a corpus JSONL file, validating every annotation index."""
    path = Path(path)
    dialogues: list[Dialogue] = []
    pairs: list[HistoryResponsePair] = []
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(line_no, f"invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise MalformedRecord(line_no, "record is not an object")
            _warn_unknown(record, _KNOWN_DIALOGUE_FIELDS, "dialogue", line_no)
            try:
                did = record["id"]
                source = record.get("source", "other")
                raw_utts = record["utterances"]
            except KeyError as exc:
                raise MalformedRecord(line_no, f"missing field {exc}") from exc
            if did in seen_ids:
                raise MalformedRecord(line_no, f"duplicate dialogue id {did!r}")
            seen_ids.add(did)
            utterances = []
            for pos, raw in enumerate(raw_utts):
                if not isinstance(raw, dict) or "speaker" not in raw or "text" not in raw:
                    raise MalformedRecord(line_no, f"utterance {pos} lacks speaker/text")
                _warn_unknown(raw, _KNOWN_UTTERANCE_FIELDS, "utterance", line_no)
                spans = raw.get("clause_spans")
                try:
                    utterances.append(
                        Utterance(
                            index=pos,
                            speaker=raw["speaker"],
                            text=raw["text"],
                            clause_spans=(
                                tuple((int(s), int(e)) for s, e in spans)
                                if spans is not None
                                else None
                            ),
                        )
                    )
                except (ValueError, TypeError) as exc:
                    raise MalformedRecord(line_no, f"utterance {pos}: {exc}") from exc
            try:
                dialogue = Dialogue(id=did, source=source, utterances=tuple(utterances))
            except ValueError as exc:
                raise MalformedRecord(line_no, str(exc)) from exc
            dialogues.append(dialogue)
            for ann in record.get("annotations", []):
                _warn_unknown(ann, _KNOWN_ANNOTATION_FIELDS, "annotation", line_no)
                t = ann.get("t")
                if not isinstance(t, int) or not (1 <= t < len(utterances)):
                    raise DanglingAnnotation(
                        line_no, f"response index t={t!r} outside [1, {len(utterances)})"
                    )
                causes = ann.get("causes", [])
                indices: set[int] = set()
                spans_map: dict[int, tuple[tuple[int, int], ...]] = {}
                for cause in causes:
                    _warn_unknown(cause, _KNOWN_CAUSE_FIELDS, "cause", line_no)
                    u = cause.get("u")
                    if not isinstance(u, int) or not (0 <= u < t):
                        raise DanglingAnnotation(
                            line_no, f"cause index u={u!r} not in [0, {t}) for t={t}"
                        )
                    indices.add(u)
                    if cause.get("spans") is not None:
                        spans = tuple((int(s), int(e)) for s, e in cause["spans"])
                        try:
                            _check_spans(spans, len(utterances[u].text))
                        except ValueError as exc:
                            raise DanglingAnnotation(line_no, f"cause u={u}: {exc}") from exc
                        spans_map[u] = spans
                if not indices:
                    raise DanglingAnnotation(line_no, f"annotation at t={t} has no causes")
                pairs.append(
                    HistoryResponsePair(
                        dialogue_id=did,
                        t=t,
                        cause_indices=frozenset(indices),
                        cause_spans=spans_map or None,
                    )
                )
    return dialogues, pairs


def save_corpus(path, dialogues: Sequence[Dialogue], pairs: Sequence[HistoryResponsePair]) -> None:
    """Write dialogues plus their annotations back to JSONL."""
    path = Path(path)
    by_dialogue: dict[str, list[HistoryResponsePair]] = {}
    for pair in pairs:
        by_dialogue.setdefault(pair.dialogue_id, []).append(pair)
    with path.open("w", encoding="utf-8") as fh:
        for d in dialogues:
            utts = []
            for u in d.utterances:
                raw: dict = {"speaker": u.speaker, "text": u.text}
                if u.clause_spans is not None:
                    raw["clause_spans"] = [list(s) for s in u.clause_spans]
                utts.append(raw)
            annotations = []
            for pair in sorted(by_dialogue.get(d.id, []), key=lambda p: p.t):
                causes = []
                for j in sorted(pair.cause_indices):
                    cause: dict = {"u": j}
                    if pair.cause_spans and j in pair.cause_spans:
                        cause["spans"] = [list(s) for s in pair.cause_spans[j]]
                    causes.append(cause)
                annotations.append({"t": pair.t, "causes": causes})
            record = {"id": d.id, "source": d.source, "utterances": utts}
            if annotations:
                record["annotations"] = annotations
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


# -- pair enumeration and statistics --


def enumerate_pairs(dialogue: Dialogue, responder: str) -> list[HistoryResponsePair]:
    """One unlabeled pair per responder utterance with t >= 1."""
    return [
        HistoryResponsePair(dialogue_id=dialogue.id, t=u.index)
        for u in dialogue.utterances
        if u.speaker == responder and u.index >= 1
    ]


def _tokens(text: str) -> list[str]:
    return text.split()


def _cause_token_count(pair: HistoryResponsePair, j: int, dialogue: Dialogue) -> tuple[int, int]:
    """(cause tokens, utterance tokens) for cause j; clause spans win over whole text."""
    text = dialogue.utterances[j].text
    total = len(_tokens(text))
    if pair.cause_spans and j in pair.cause_spans:
        cause_text = " ".join(text[s:e] for s, e in pair.cause_spans[j])
        return len(_tokens(cause_text)), total
    return total, total


def _mean_stdev(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return (0.0, 0.0)
    arr = np.asarray(values, dtype=float)
    return (float(arr.mean()), float(arr.std()))


def corpus_stats(
    pairs: Sequence[HistoryResponsePair], dialogues: Iterable[Dialogue]
) -> StatsReport:
    """Descriptive statistics over annotated pairs.

    Token counts use whitespace splitting of raw text.  Totals are always
    recomputed from the data, never read from stored aggregates.
    """
    by_id = dialogues if isinstance(dialogues, dict) else index_dialogues(dialogues)
    report = StatsReport(n_dialogues=len(by_id), n_pairs=len(pairs))
    report.n_utterances = sum(len(d.utterances) for d in by_id.values())
    if not pairs:
        return report

    token_lengths: list[float] = []
    proportions: list[float] = []
    causes_per_response: Counter[int] = Counter()
    proximity: Counter[int] = Counter()
    n_cause_utterances = 0
    for pair in pairs:
        if pair.dialogue_id not in by_id:
            raise KeyError(f"pair references unknown dialogue {pair.dialogue_id!r}")
        dialogue = by_id[pair.dialogue_id]
        if pair.t >= len(dialogue.utterances):
            raise KeyError(f"pair t={pair.t} outside dialogue {pair.dialogue_id!r}")
        causes_per_response[len(pair.cause_indices)] += 1
        for j in pair.cause_indices:
            n_cause_utterances += 1
            proximity[pair.t - j] += 1
            cause_len, utt_len = _cause_token_count(pair, j, dialogue)
            token_lengths.append(float(cause_len))
            if utt_len > 0:
                proportions.append(cause_len / utt_len)

    report.n_cause_utterances = n_cause_utterances
    report.avg_cause_token_length = _mean_stdev(token_lengths)
    report.cause_proportion_in_utterance = _mean_stdev(proportions)
    report.causes_per_response_histogram = {
        k: v / len(pairs) for k, v in sorted(causes_per_response.items())
    }
    if n_cause_utterances:
        report.proximity_histogram = {
            k: v / n_cause_utterances for k, v in sorted(proximity.items())
        }
    return report


def split_corpus(
    pairs: Sequence[HistoryResponsePair],
    ratios: tuple[float, float, float],
    seed: int,
) -> CorpusSplit:
    """Deterministic dialogue-granularity split.

    No dialogue straddles splits, so no conversation history leaks between
    train and test.
    """
    if any(r <= 0 for r in ratios):
        raise InsufficientData(f"ratios must be positive, got {ratios}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InsufficientData(f"ratios must sum to 1, got {sum(ratios)}")
    by_dialogue: dict[str, list[HistoryResponsePair]] = {}
    for pair in pairs:
        by_dialogue.setdefault(pair.dialogue_id, []).append(pair)
    ids = sorted(by_dialogue)
    if not ids:
        raise InsufficientData("no dialogues to split")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(order)
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    n_train = min(n_train, n - 2)
    n_valid = min(n_valid, n - n_train - 1)
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise InsufficientData(
            f"split {ratios} of {n} dialogues leaves an empty part"
        )
    buckets = (
        order[:n_train],
        order[n_train : n_train + n_valid],
        order[n_train + n_valid :],
    )

    def collect(id_bucket: list[str]) -> tuple[HistoryResponsePair, ...]:
        out: list[HistoryResponsePair] = []
        for did in id_bucket:
            out.extend(sorted(by_dialogue[did], key=lambda p: p.t))
        return tuple(out)

    return CorpusSplit(*(collect(b) for b in buckets))
