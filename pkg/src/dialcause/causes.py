"""Direct-cause identification and its evaluation against simple baselines.

The preceding utterance is always a cause; at most one more is added.  For a
response at t the classifier scores every candidate j in [0, t-2] against
(u_j, u_{t-1}, r_t); the argmax becomes the second cause, unconditionally for
training-set preprocessing and only above a probability threshold at
inference.  Temporal order fixes edge direction, so no statistical
orientation is ever attempted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .ci import CIClassifier, Triple
from .corpus import Dialogue, HistoryResponsePair, Utterance, index_dialogues
from .errors import MisalignedInputs, NoCandidates


class PredictMode(str, Enum):
    TRAIN_PREPROCESS = "train_preprocess"
    INFERENCE = "inference"


class BaselineKind(str, Enum):
    ALWAYS_PREV = "always_prev"
    ALWAYS_PREV_TWO = "always_prev_two"


@dataclass(frozen=True)
class CausePrediction:
    dialogue_id: str
    t: int
    causes: tuple[int, ...]
    second_cause: tuple[int, float] | None = None  # (j*, p*)

    def __post_init__(self):
        if self.t - 1 not in self.causes:
            raise ValueError("the preceding utterance must be predicted as a cause")
        if len(self.causes) > 2:
            raise ValueError("at most two causes may be predicted")
        if self.second_cause is not None and self.second_cause[0] > self.t - 2:
            raise ValueError("second cause must be at most t-2")

    @property
    def key(self) -> tuple[str, int]:
        return (self.dialogue_id, self.t)

    def to_dict(self) -> dict:
        out = {"dialogue_id": self.dialogue_id, "t": self.t, "causes": sorted(self.causes)}
        if self.second_cause is not None:
            out["p_star"] = self.second_cause[1]
        return out


def identify_second_cause(
    classifier: CIClassifier, history: Sequence[Utterance], response: str
) -> tuple[int, float]:
    """Argmax over candidates j in [0, t-2]; ties go to the largest j."""
    t = len(history)
    if t < 2:
        raise NoCandidates(f"no candidate exists for t={t}")
    u_prev = history[t - 1].text
    best_j, best_p = -1, -1.0
    for j in range(t - 1):
        p = classifier.score(
            Triple(u_j=history[j].text, u_prev=u_prev, response=response, j=j, t=t)
        )
        if p >= best_p:  # >= so equal scores prefer the most recent utterance
            best_j, best_p = j, p
    return best_j, best_p


def predict_causes(
    classifier: CIClassifier,
    pair: HistoryResponsePair,
    dialogues: Mapping[str, Dialogue] | Iterable[Dialogue],
    mode: PredictMode = PredictMode.INFERENCE,
    threshold: float = 0.5,
) -> CausePrediction:
    """Always include t-1; add the argmax candidate per the mode's rule.

    Training-set preprocessing takes the argmax unconditionally; inference
    adds it only when its probability clears the threshold.
    """
    by_id = dialogues if isinstance(dialogues, Mapping) else index_dialogues(dialogues)
    dialogue = by_id[pair.dialogue_id]
    history = dialogue.utterances[: pair.t]
    response = dialogue.utterances[pair.t].text
    mode = PredictMode(mode)
    try:
        j_star, p_star = identify_second_cause(classifier, history, response)
    except NoCandidates:
        return CausePrediction(pair.dialogue_id, pair.t, causes=(pair.t - 1,))
    include = mode is PredictMode.TRAIN_PREPROCESS or p_star > threshold
    if include:
        return CausePrediction(
            pair.dialogue_id, pair.t,
            causes=(j_star, pair.t - 1),
            second_cause=(j_star, p_star),
        )
    return CausePrediction(
        pair.dialogue_id, pair.t, causes=(pair.t - 1,), second_cause=None
    )


def baseline_causes(pair: HistoryResponsePair, kind: BaselineKind) -> CausePrediction:
    """Heuristics: the preceding utterance, or the preceding two (clamped)."""
    kind = BaselineKind(kind)
    if kind is BaselineKind.ALWAYS_PREV or pair.t == 1:
        return CausePrediction(pair.dialogue_id, pair.t, causes=(pair.t - 1,))
    return CausePrediction(pair.dialogue_id, pair.t, causes=(pair.t - 2, pair.t - 1))


def evaluate_cause_id(
    predictions: Sequence[CausePrediction],
    gold_pairs: Sequence[HistoryResponsePair],
) -> dict:
    """Micro-averaged P/R/F1 of predicted vs gold cause index sets."""
    gold_by_key = {pair.key: pair for pair in gold_pairs}
    pred_by_key = {pred.key: pred for pred in predictions}
    if set(gold_by_key) != set(pred_by_key):
        missing = set(gold_by_key) ^ set(pred_by_key)
        raise MisalignedInputs(f"predictions and gold differ on {sorted(missing)[:5]}")
    tp = fp = fn = 0
    for key, pred in pred_by_key.items():
        predicted = set(pred.causes)
        gold = set(gold_by_key[key].cause_indices)
        tp += len(predicted & gold)
        fp += len(predicted - gold)
        fn += len(gold - predicted)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "confusion": {"tp": tp, "fp": fp, "fn": fn},
    }


def overlap_analysis(
    predictions: Sequence[CausePrediction],
    gold_pairs: Sequence[HistoryResponsePair],
) -> dict:
    """Fractions of pairs whose predicted causes match gold exactly,
    partially, or not at all."""
    gold_by_key = {pair.key: pair for pair in gold_pairs}
    pred_by_key = {pred.key: pred for pred in predictions}
    if set(gold_by_key) != set(pred_by_key):
        missing = set(gold_by_key) ^ set(pred_by_key)
        raise MisalignedInputs(f"predictions and gold differ on {sorted(missing)[:5]}")
    exact = partial = disjoint = 0
    for key, pred in pred_by_key.items():
        predicted = set(pred.causes)
        gold = set(gold_by_key[key].cause_indices)
        if predicted == gold:
            exact += 1
        elif predicted & gold:
            partial += 1
        else:
            disjoint += 1
    n = len(pred_by_key) or 1
    return {"exact": exact / n, "partial": partial / n, "disjoint": disjoint / n}


def save_predictions(path, predictions: Sequence[CausePrediction]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for pred in sorted(predictions, key=lambda p: p.key):
            fh.write(json.dumps(pred.to_dict(), sort_keys=True) + "\n")
