"""The conditional-independence classifier over utterance triples.

A triple (u_j, u_prev, response) is serialized as one string in the fixed
order ``response SEP u_prev SEP u_j``, encoded to a sequence of vectors,
mean-pooled, and scored by a linear head with a sigmoid.  A score near 1
means the response still depends on u_j once u_prev is accounted for, i.e.
u_j is a direct cause.

Only the head trains (binary cross-entropy, Adam); the encoder is frozen.
Every training batch holds equal counts of positive and negative examples,
resampling the minority class as needed, and each batch's composition is
logged so balance can be audited after the fact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Dialogue, HistoryResponsePair, index_dialogues
from .encoders import (
    DEFAULT_SEPARATOR,
    HashedInteractionEncoder,
    join_segments,
)
from .errors import CheckpointError, EncoderFailure, NoPositives, SingleClassData

INPUT_ORDER = ("response", "u_prev", "u_j")
CHECKPOINT_FORMAT_VERSION = 1
LOGIT_CLIP = 30.0


@dataclass(frozen=True)
class Triple:
    u_j: str
    u_prev: str
    response: str
    j: int
    t: int

    def __post_init__(self):
        if not (self.u_j and self.u_prev and self.response):
            raise ValueError("triple texts must be non-empty")
        if self.j > self.t - 2:
            raise ValueError(f"conditioning candidate j={self.j} must be <= t-2={self.t - 2}")


@dataclass(frozen=True)
class LabeledTriple:
    triple: Triple
    label: int
    origin: str  # "gold" | "pseudo"
    dialogue_id: str = ""
    selection_score: float | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if self.origin not in ("gold", "pseudo"):
            raise ValueError("origin must be 'gold' or 'pseudo'")

    @property
    def key(self) -> tuple[str, int, int, int]:
        return (self.dialogue_id, self.triple.t, self.triple.j, self.label)


def build_input(triple: Triple, separator: str = DEFAULT_SEPARATOR) -> str:
    """Serialize in the fixed order response, u_prev, u_j."""
    return join_segments((triple.response, triple.u_prev, triple.u_j), separator)


def _sigmoid(logit: float) -> float:
    logit = max(-LOGIT_CLIP, min(LOGIT_CLIP, logit))
    return 1.0 / (1.0 + math.exp(-logit))


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    shuffle: bool = True
    balanced: bool = True
    weight_decay: float = 0.0  # decoupled, applied to weights and bias

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ValueError("batch_size must be an even number >= 2")


@dataclass
class TrainingState:
    epochs_completed: int = 0
    steps: int = 0
    loss_curve: list[float] = field(default_factory=list)
    validation_curve: list[dict] = field(default_factory=list)
    batch_log: list[tuple[int, int]] = field(default_factory=list)
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_last_step: np.ndarray | None = None
    adam_mb: float = 0.0
    adam_vb: float = 0.0


class CIClassifier:
    """Frozen encoder, trainable linear head, sigmoid output in (0, 1)."""

    def __init__(self, encoder, separator: str = DEFAULT_SEPARATOR):
        self.encoder = encoder
        self.separator = separator
        self.weights = np.zeros(encoder.dim)  # zero init: score 0.5 everywhere
        self.bias = 0.0
        self.training_state = TrainingState()

    # -- encoding --

    def _encode_input(self, text: str):
        """Sparse (indices, signs, n) when the encoder supports it, else dense."""
        if hasattr(self.encoder, "sparse_features"):
            indices, signs = self.encoder.sparse_features(text)
            return ("sparse", indices, signs)
        return ("dense", self.encoder.pooled(text))

    def _logit(self, encoded) -> float:
        if encoded[0] == "sparse":
            _, indices, signs = encoded
            return float(np.dot(self.weights[indices], signs) / len(indices) + self.bias)
        return float(np.dot(self.weights, encoded[1]) + self.bias)

    def score_input(self, text: str) -> float:
        return _sigmoid(self._logit(self._encode_input(text)))

    def score_texts(self, segments: Sequence[str]) -> float:
        """Score arbitrary pre-ordered segments (used by the dependence head)."""
        return self.score_input(join_segments(segments, self.separator))

    def score(self, triple: Triple) -> float:
        try:
            return self.score_input(build_input(triple, self.separator))
        except EncoderFailure:
            raise
        except Exception as exc:
            raise EncoderFailure(
                f"encoder failed on triple (t={triple.t}, j={triple.j}): {exc}"
            ) from exc

    def snapshot(self) -> tuple[np.ndarray, float]:
        return self.weights.copy(), self.bias

    def restore(self, snapshot: tuple[np.ndarray, float]) -> None:
        self.weights, self.bias = snapshot[0].copy(), snapshot[1]

    def clone(self) -> "CIClassifier":
        other = CIClassifier(self.encoder, self.separator)
        other.weights = self.weights.copy()
        other.bias = self.bias
        return other


# -- supervised dataset construction --


def build_supervised_set(
    pairs: Sequence[HistoryResponsePair],
    dialogues: Iterable[Dialogue] | Mapping[str, Dialogue],
) -> list[LabeledTriple]:
    """One triple per candidate j <= t-2 per pair; causes positive, rest negative.

    u_{t-1} never appears as a candidate: it is part of every triple's
    conditioning and is a cause by assumption.  Pairs with t < 2 contribute
    nothing.
    """
    by_id = dialogues if isinstance(dialogues, Mapping) else index_dialogues(dialogues)
    out: list[LabeledTriple] = []
    for pair in pairs:
        if pair.t < 2:
            continue
        dialogue = by_id[pair.dialogue_id]
        utts = dialogue.utterances
        response = utts[pair.t].text
        u_prev = utts[pair.t - 1].text
        for j in range(pair.t - 1):
            out.append(
                LabeledTriple(
                    triple=Triple(
                        u_j=utts[j].text, u_prev=u_prev, response=response,
                        j=j, t=pair.t,
                    ),
                    label=1 if j in pair.cause_indices else 0,
                    origin="gold",
                    dialogue_id=pair.dialogue_id,
                )
            )
    return out


# -- training --


def labeled_inputs_from_triples(
    classifier: CIClassifier, data: Sequence[LabeledTriple]
) -> list[tuple[str, int]]:
    return [
        (build_input(ex.triple, classifier.separator), ex.label) for ex in data
    ]


def _encode_dataset(classifier: CIClassifier, inputs: Sequence[tuple[str, int]]):
    return [classifier._encode_input(text) for text, _ in inputs]


def bce_loss_and_grad(
    classifier: CIClassifier,
    data: Sequence[LabeledTriple] | Sequence[tuple[str, int]],
    encoded=None,
) -> tuple[float, np.ndarray, float]:
    """Mean binary cross-entropy and its analytic head gradient."""
    inputs = _as_inputs(classifier, data)
    encoded = encoded if encoded is not None else _encode_dataset(classifier, inputs)
    grad_w = np.zeros_like(classifier.weights)
    grad_b = 0.0
    loss = 0.0
    n = len(inputs)
    for (_, y), enc in zip(inputs, encoded):
        p = _sigmoid(classifier._logit(enc))
        loss += -(y * math.log(p) + (1 - y) * math.log(1.0 - p))
        delta = (p - y) / n
        if enc[0] == "sparse":
            _, indices, signs = enc
            np.add.at(grad_w, indices, delta * signs / len(indices))
        else:
            grad_w += delta * enc[1]
        grad_b += delta
    return loss / n, grad_w, grad_b


def _as_inputs(
    classifier: CIClassifier, data: Sequence[LabeledTriple] | Sequence[tuple[str, int]]
) -> list[tuple[str, int]]:
    if data and isinstance(data[0], LabeledTriple):
        return labeled_inputs_from_triples(classifier, data)
    return list(data)


def _sparse_adam_step(
    classifier: CIClassifier,
    state: TrainingState,
    batch_inputs: Sequence[tuple[str, int]],
    batch_encoded,
    config: TrainConfig,
    beta1: float,
    beta2: float,
    eps: float,
) -> tuple[float, float]:
    """One lazy sparse Adam step touching only the batch's feature buckets.

    Moment decay for untouched buckets is deferred and caught up
    multiplicatively when a bucket next appears (sparse-Adam semantics); the
    momentum tail that exact Adam would apply to inactive buckets is skipped.
    """
    n = len(batch_inputs)
    loss = 0.0
    grad_b = 0.0
    index_chunks = []
    value_chunks = []
    for (_, y), enc in zip(batch_inputs, batch_encoded):
        _, indices, signs = enc
        p = _sigmoid(classifier._logit(enc))
        loss += -(y * math.log(p) + (1 - y) * math.log(1.0 - p))
        delta = (p - y) / n
        index_chunks.append(indices)
        value_chunks.append(delta * signs / len(indices))
        grad_b += delta
    all_indices = np.concatenate(index_chunks)
    all_values = np.concatenate(value_chunks)
    active, inverse = np.unique(all_indices, return_inverse=True)
    grad = np.zeros(len(active))
    np.add.at(grad, inverse, all_values)

    step = state.steps
    gap = step - state.adam_last_step[active] - 1
    nonzero_gap = gap > 0
    if np.any(nonzero_gap):
        state.adam_m[active[nonzero_gap]] *= beta1 ** gap[nonzero_gap]
        state.adam_v[active[nonzero_gap]] *= beta2 ** gap[nonzero_gap]
        if config.weight_decay:
            classifier.weights[active[nonzero_gap]] *= (
                1.0 - config.learning_rate * config.weight_decay
            ) ** gap[nonzero_gap]
    state.adam_last_step[active] = step
    m = beta1 * state.adam_m[active] + (1 - beta1) * grad
    v = beta2 * state.adam_v[active] + (1 - beta2) * grad**2
    state.adam_m[active] = m
    state.adam_v[active] = v
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    classifier.weights[active] -= config.learning_rate * (
        m_hat / (np.sqrt(v_hat) + eps)
        + config.weight_decay * classifier.weights[active]
    )
    return loss / n, grad_b


class _ClassStream:
    """Deterministic endless stream over one class's example indices."""

    def __init__(self, indices: list[int], rng: np.random.Generator, shuffle: bool):
        self._indices = list(indices)
        self._rng = rng
        self._shuffle = shuffle
        self._pos = 0
        self._order = self._fresh_order()

    def _fresh_order(self) -> list[int]:
        order = list(self._indices)
        if self._shuffle:
            self._rng.shuffle(order)
        return order

    def take(self, count: int) -> list[int]:
        out = []
        while len(out) < count:
            if self._pos >= len(self._order):
                self._order = self._fresh_order()
                self._pos = 0
            out.append(self._order[self._pos])
            self._pos += 1
        return out


def train_on_inputs(
    classifier: CIClassifier,
    inputs: Sequence[tuple[str, int]],
    config: TrainConfig | None = None,
    valid_inputs: Sequence[tuple[str, int]] | None = None,
) -> CIClassifier:
    """Minimize BCE with Adam over balanced batches; keep the best-F1 head.

    Mutates the classifier in place and returns it.  Deterministic given the
    config seed.
    """
    config = config or TrainConfig()
    labels = {label for _, label in inputs}
    if labels != {0, 1}:
        raise SingleClassData(f"training data has labels {sorted(labels)}")
    encoded = _encode_dataset(classifier, inputs)
    valid_encoded = _encode_dataset(classifier, valid_inputs) if valid_inputs else None
    all_sparse = all(enc[0] == "sparse" for enc in encoded)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB0]))
    state = classifier.training_state
    if state.adam_m is None:
        state.adam_m = np.zeros_like(classifier.weights)
        state.adam_v = np.zeros_like(classifier.weights)
        state.adam_last_step = np.zeros(classifier.weights.shape[0], dtype=np.int64)
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    pos = [i for i, (_, label) in enumerate(inputs) if label == 1]
    neg = [i for i, (_, label) in enumerate(inputs) if label == 0]
    half = config.batch_size // 2

    best_f1 = -1.0
    best_snapshot = None
    for _ in range(config.epochs):
        if config.balanced:
            pos_stream = _ClassStream(pos, rng, config.shuffle)
            neg_stream = _ClassStream(neg, rng, config.shuffle)
            n_batches = max(1, math.ceil(max(len(pos), len(neg)) / half))
            batches = [
                pos_stream.take(half) + neg_stream.take(half) for _ in range(n_batches)
            ]
        else:
            order = list(range(len(inputs)))
            if config.shuffle:
                rng.shuffle(order)
            batches = [
                order[i : i + config.batch_size]
                for i in range(0, len(order), config.batch_size)
            ]
        epoch_loss = 0.0
        for batch in batches:
            batch_inputs = [inputs[i] for i in batch]
            batch_encoded = [encoded[i] for i in batch]
            state.steps += 1
            if all_sparse:
                loss, grad_b = _sparse_adam_step(
                    classifier, state, batch_inputs, batch_encoded, config,
                    beta1, beta2, eps,
                )
            else:
                loss, grad_w, grad_b = bce_loss_and_grad(
                    classifier, batch_inputs, batch_encoded
                )
                state.adam_m = beta1 * state.adam_m + (1 - beta1) * grad_w
                state.adam_v = beta2 * state.adam_v + (1 - beta2) * grad_w**2
                m_hat = state.adam_m / (1 - beta1**state.steps)
                v_hat = state.adam_v / (1 - beta2**state.steps)
                classifier.weights -= config.learning_rate * (
                    m_hat / (np.sqrt(v_hat) + eps)
                    + config.weight_decay * classifier.weights
                )
            state.adam_mb = beta1 * state.adam_mb + (1 - beta1) * grad_b
            state.adam_vb = beta2 * state.adam_vb + (1 - beta2) * grad_b**2
            mb_hat = state.adam_mb / (1 - beta1**state.steps)
            vb_hat = state.adam_vb / (1 - beta2**state.steps)
            classifier.bias -= config.learning_rate * (
                mb_hat / (math.sqrt(vb_hat) + eps) + config.weight_decay * classifier.bias
            )
            n_pos = sum(1 for _, label in batch_inputs if label == 1)
            state.batch_log.append((n_pos, len(batch_inputs) - n_pos))
            epoch_loss += loss
        state.epochs_completed += 1
        state.loss_curve.append(epoch_loss / max(1, len(batches)))
        if valid_inputs:
            metrics = evaluate_inputs(classifier, valid_inputs, encoded=valid_encoded)
            state.validation_curve.append(metrics)
            if metrics["f1"] > best_f1:
                best_f1 = metrics["f1"]
                best_snapshot = classifier.snapshot()
    if valid_inputs and best_snapshot is not None:
        classifier.restore(best_snapshot)
    return classifier


def train_supervised(
    classifier: CIClassifier,
    data: Sequence[LabeledTriple],
    config: TrainConfig | None = None,
    valid: Sequence[LabeledTriple] | None = None,
) -> CIClassifier:
    """Train on labeled triples serialized through build_input."""
    return train_on_inputs(
        classifier,
        labeled_inputs_from_triples(classifier, data),
        config,
        labeled_inputs_from_triples(classifier, valid) if valid else None,
    )


# -- evaluation --


def evaluate_inputs(
    classifier: CIClassifier,
    inputs: Sequence[tuple[str, int]],
    threshold: float = 0.5,
    encoded=None,
) -> dict:
    """Precision/recall/F1 plus the confusion counts they derive from."""
    encoded = encoded if encoded is not None else _encode_dataset(classifier, inputs)
    tp = fp = fn = tn = 0
    for (_, label), enc in zip(inputs, encoded):
        predicted = _sigmoid(classifier._logit(enc)) > threshold
        if label == 1:
            tp += predicted
            fn += not predicted
        else:
            fp += predicted
            tn += not predicted
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "confusion": {"tp": tp, "fp": fp, "fn": fn, "tn": tn},
    }


def evaluate_triples(
    classifier: CIClassifier,
    triples: Sequence[LabeledTriple],
    threshold: float = 0.5,
    encoded=None,
) -> dict:
    return evaluate_inputs(
        classifier, labeled_inputs_from_triples(classifier, triples), threshold, encoded
    )


def evaluate_classifier(
    classifier: CIClassifier,
    gold_pairs: Sequence[HistoryResponsePair],
    dialogues: Iterable[Dialogue] | Mapping[str, Dialogue],
    threshold: float = 0.5,
    balance_seed: int = 0,
) -> dict:
    """Triple-level P/R/F1 on the natural (imbalanced) set, plus balanced accuracy.

    Balanced accuracy is plain accuracy on a 1:1 set built by downsampling the
    majority class with a fixed seed.
    """
    triples = build_supervised_set(gold_pairs, dialogues)
    positives = [ex for ex in triples if ex.label == 1]
    negatives = [ex for ex in triples if ex.label == 0]
    if not positives:
        raise NoPositives("gold pairs yield no positive triples")
    metrics = evaluate_triples(classifier, triples, threshold)
    rng = np.random.default_rng(np.random.SeedSequence([balance_seed, 0xE0]))
    minority, majority = sorted((positives, negatives), key=len)
    sampled = [majority[i] for i in rng.choice(len(majority), len(minority), replace=False)]
    balanced = minority + sampled
    correct = sum(
        (classifier.score(ex.triple) > threshold) == bool(ex.label) for ex in balanced
    )
    metrics["balanced_accuracy"] = correct / len(balanced) if balanced else 0.0
    return metrics


# -- checkpoints --


def save_checkpoint(classifier: CIClassifier, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    head = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "weights": classifier.weights.tolist(),
        "bias": classifier.bias,
        "input_order": list(INPUT_ORDER),
        "separator": classifier.separator,
        "encoder": {
            "name": classifier.encoder.name,
            "version": classifier.encoder.version,
        },
    }
    if isinstance(classifier.encoder, HashedInteractionEncoder):
        head["encoder"]["config"] = classifier.encoder.config()
    (directory / "head.json").write_text(json.dumps(head), encoding="utf-8")
    return directory


def load_checkpoint(directory, encoder=None) -> CIClassifier:
    directory = Path(directory)
    head_path = directory / "head.json"
    if not head_path.exists():
        raise CheckpointError(f"no head.json under {directory}")
    head = json.loads(head_path.read_text(encoding="utf-8"))
    if head.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {head.get('format_version')!r}")
    if tuple(head["input_order"]) != INPUT_ORDER:
        raise CheckpointError(f"unexpected input order {head['input_order']}")
    if encoder is None:
        config = head["encoder"].get("config")
        if config is None:
            raise CheckpointError(
                f"checkpoint references external encoder "
                f"{head['encoder']['name']!r}; pass the adapter explicitly"
            )
        encoder = HashedInteractionEncoder(**config)
    classifier = CIClassifier(encoder, separator=head["separator"])
    weights = np.asarray(head["weights"], dtype=float)
    if weights.shape != (encoder.dim,):
        raise CheckpointError(
            f"weight shape {weights.shape} does not match encoder dim {encoder.dim}"
        )
    classifier.weights = weights
    classifier.bias = float(head["bias"])
    return classifier
