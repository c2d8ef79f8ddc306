"""Constrained incremental self-training of the CI classifier.

Starting from a classifier fitted on the small labeled set, each iteration
scores candidate triples from the unlabeled pool, promotes the ones that pass
the selection constraints to pseudo-positives, pairs them with an equal
number of freshly sampled negatives, unions them into the training set, and
fine-tunes.  The loop stops when validation F1 stops improving and the best
validation checkpoint is returned.

Variants:
  CONSTRAIN  threshold and context-window constraints, incremental loop;
  INIT       supervised training on the labeled set only;
  FC         one pseudo-labeling pass over the whole pool (both constraints),
             then a single fine-tuning round;
  IST        the incremental loop with the context constraint disabled.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ci import (
    CIClassifier,
    LabeledTriple,
    TrainConfig,
    Triple,
    evaluate_triples,
    labeled_inputs_from_triples,
    save_checkpoint,
    train_on_inputs,
    train_supervised,
)
from .corpus import Dialogue, HistoryResponsePair, index_dialogues
from .errors import DivergenceError, NoEligibleCandidates

VARIANTS = ("CONSTRAIN", "INIT", "FC", "IST")


@dataclass
class SelfTrainConfig:
    threshold: float = 0.9
    context_window: frozenset[int] = frozenset({2, 3})  # offsets from t
    variant: str = "CONSTRAIN"
    max_iterations: int = 10
    epochs_per_iteration: int = 10
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must be in (0, 1)")
        self.variant = self.variant.upper()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.context_window = frozenset(self.context_window)
        if self.variant in ("CONSTRAIN", "FC") and not self.context_window:
            raise ValueError(f"{self.variant} requires a non-empty context window")


@dataclass
class IterationRecord:
    iteration: int
    n_pseudo_positives: int
    n_negatives: int
    dataset_size: int
    validation: dict

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "n_pseudo_positives": self.n_pseudo_positives,
            "n_negatives": self.n_negatives,
            "dataset_size": self.dataset_size,
            "validation": self.validation,
        }


@dataclass
class SelfTrainTrace:
    variant: str
    records: list[IterationRecord] = field(default_factory=list)
    best_iteration: int = 0
    aborted: bool = False

    def append(self, record: IterationRecord) -> None:
        if self.records and record.dataset_size < self.records[-1].dataset_size:
            raise ValueError("dataset size must be non-decreasing")
        self.records.append(record)

    def save_jsonl(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "best_iteration": self.best_iteration,
            "aborted": self.aborted,
            "records": [r.to_dict() for r in self.records],
        }


def candidate_triples(
    pairs: Sequence[HistoryResponsePair],
    dialogues: Mapping[str, Dialogue] | Iterable[Dialogue],
    window: frozenset[int] | None = None,
) -> list[tuple[HistoryResponsePair, Triple]]:
    """Unlabeled (pair, triple) candidates, optionally restricted to offsets.

    ``window`` holds offsets from t; {2, 3} keeps u_{t-2} and u_{t-3}.
    """
    by_id = dialogues if isinstance(dialogues, Mapping) else index_dialogues(dialogues)
    out = []
    for pair in pairs:
        if pair.t < 2:
            continue
        utts = by_id[pair.dialogue_id].utterances
        for j in range(pair.t - 1):
            if window is not None and pair.t - j not in window:
                continue
            out.append(
                (
                    pair,
                    Triple(
                        u_j=utts[j].text,
                        u_prev=utts[pair.t - 1].text,
                        response=utts[pair.t].text,
                        j=j,
                        t=pair.t,
                    ),
                )
            )
    return out


def select_pseudo_positives(
    classifier: CIClassifier,
    unlabeled_pairs: Sequence[HistoryResponsePair],
    dialogues: Mapping[str, Dialogue] | Iterable[Dialogue],
    config: SelfTrainConfig,
) -> list[LabeledTriple]:
    """Triples scoring above the threshold, window-constrained per variant."""
    window = config.context_window if config.variant in ("CONSTRAIN", "FC") else None
    selected = []
    for pair, triple in candidate_triples(unlabeled_pairs, dialogues, window):
        score = classifier.score(triple)
        if score > config.threshold:
            selected.append(
                LabeledTriple(
                    triple=triple,
                    label=1,
                    origin="pseudo",
                    dialogue_id=pair.dialogue_id,
                    selection_score=score,
                )
            )
    return selected


def sample_negatives(
    unlabeled_pairs: Sequence[HistoryResponsePair],
    dialogues: Mapping[str, Dialogue] | Iterable[Dialogue],
    selected_positives: Sequence[LabeledTriple],
    count: int,
    seed: int,
) -> tuple[list[LabeledTriple], bool]:
    """Uniformly sample (pair, j) combinations not selected as positives.

    Returns (negatives, resampled): when fewer eligible candidates than
    ``count`` exist, sampling is with replacement and ``resampled`` is True.
    """
    if count == 0:
        return [], False
    taken = {(ex.dialogue_id, ex.triple.t, ex.triple.j) for ex in selected_positives}
    eligible = [
        (pair, triple)
        for pair, triple in candidate_triples(unlabeled_pairs, dialogues, window=None)
        if (pair.dialogue_id, triple.t, triple.j) not in taken
    ]
    if not eligible:
        raise NoEligibleCandidates("every candidate was selected as a positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E]))
    resampled = count > len(eligible)
    if resampled:
        chosen = rng.choice(len(eligible), size=count, replace=True)
    else:
        chosen = rng.choice(len(eligible), size=count, replace=False)
    negatives = [
        LabeledTriple(
            triple=eligible[i][1],
            label=0,
            origin="pseudo",
            dialogue_id=eligible[i][0].dialogue_id,
        )
        for i in chosen
    ]
    return negatives, resampled


def _union(dataset: list[LabeledTriple], additions: Sequence[LabeledTriple]) -> list[LabeledTriple]:
    """Accumulate without duplicating (dialogue, t, j, label) slots."""
    seen = {ex.key for ex in dataset}
    out = list(dataset)
    for ex in additions:
        if ex.key not in seen:
            seen.add(ex.key)
            out.append(ex)
    return out


def self_train(
    base: CIClassifier,
    labeled_train: Sequence[LabeledTriple],
    labeled_valid: Sequence[LabeledTriple],
    unlabeled_pairs: Sequence[HistoryResponsePair],
    dialogues: Mapping[str, Dialogue] | Iterable[Dialogue],
    config: SelfTrainConfig | None = None,
    checkpoint_dir=None,
) -> tuple[CIClassifier, SelfTrainTrace]:
    """Run the configured variant and return the best-validation classifier.

    Stops after the first iteration that fails to improve validation F1
    (patience 1) or at ``max_iterations``.  A validation F1 collapse below
    half the initial value for two consecutive iterations aborts with the
    trace attached.  The trace and per-iteration checkpoints are persisted
    when ``checkpoint_dir`` is given.
    """
    if not labeled_train:
        raise ValueError("labeled training set is empty")
    config = config or SelfTrainConfig()
    by_id = dialogues if isinstance(dialogues, Mapping) else index_dialogues(dialogues)
    trace = SelfTrainTrace(variant=config.variant)
    train_config = dataclasses.replace(
        config.train,
        epochs=config.epochs_per_iteration,
        seed=config.seed,
        balanced=True,
    )

    def persist(iteration: int) -> None:
        if checkpoint_dir is not None:
            save_checkpoint(base, Path(checkpoint_dir) / f"iter_{iteration}")

    # Best-checkpoint selection happens at iteration granularity out here, so
    # per-iteration fine-tuning must not roll weights back internally; the
    # trainer therefore runs without its own epoch-level validation restore.
    dataset = list(labeled_train)
    train_on_inputs(base, labeled_inputs_from_triples(base, dataset), train_config)
    validation = evaluate_triples(base, labeled_valid) if labeled_valid else {"f1": 0.0}
    trace.append(
        IterationRecord(
            iteration=0,
            n_pseudo_positives=0,
            n_negatives=0,
            dataset_size=len(dataset),
            validation=validation,
        )
    )
    persist(0)
    best_f1 = validation["f1"]
    best_snapshot = base.snapshot()
    trace.best_iteration = 0

    if config.variant == "INIT" or config.max_iterations == 0:
        if checkpoint_dir is not None:
            trace.save_jsonl(Path(checkpoint_dir) / "trace.jsonl")
        return base, trace

    initial_f1 = validation["f1"]
    collapse_streak = 0
    max_iterations = 1 if config.variant == "FC" else config.max_iterations
    for iteration in range(1, max_iterations + 1):
        positives = select_pseudo_positives(base, unlabeled_pairs, by_id, config)
        negatives, _ = sample_negatives(
            unlabeled_pairs, by_id, positives, len(positives),
            seed=config.seed * 10_007 + iteration,
        )
        dataset = _union(dataset, positives)
        dataset = _union(dataset, negatives)
        train_on_inputs(base, labeled_inputs_from_triples(base, dataset), train_config)
        validation = evaluate_triples(base, labeled_valid) if labeled_valid else {"f1": 0.0}
        trace.append(
            IterationRecord(
                iteration=iteration,
                n_pseudo_positives=len(positives),
                n_negatives=len(negatives),
                dataset_size=len(dataset),
                validation=validation,
            )
        )
        persist(iteration)
        if initial_f1 > 0 and validation["f1"] < 0.5 * initial_f1:
            collapse_streak += 1
            if collapse_streak >= 2:
                trace.aborted = True
                if checkpoint_dir is not None:
                    trace.save_jsonl(Path(checkpoint_dir) / "trace.jsonl")
                raise DivergenceError(
                    f"validation F1 collapsed to {validation['f1']:.3f} "
                    f"(initial {initial_f1:.3f})",
                    trace=trace,
                )
        else:
            collapse_streak = 0
        if validation["f1"] > best_f1:
            best_f1 = validation["f1"]
            best_snapshot = base.snapshot()
            trace.best_iteration = iteration
        elif config.variant != "FC":
            break  # patience 1: first non-improving iteration ends the loop
    base.restore(best_snapshot)
    if checkpoint_dir is not None:
        trace.save_jsonl(Path(checkpoint_dir) / "trace.jsonl")
    return base, trace
