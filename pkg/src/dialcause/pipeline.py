"""Cause-filtered training preprocessing and CI-scored response selection.

Training: every (history, response) pair is reduced to a conditioning text of
at most two utterances, the preceding one and the classifier's argmax second
cause.  Inference: one candidate response is generated per (u_j, u_{t-1})
combination plus a u_{t-1}-only fallback; the classifier scores each
j-candidate against its own generated text, and the best one is returned only
if it clears the threshold, otherwise the fallback.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .causes import PredictMode, identify_second_cause
from .ci import CIClassifier, LabeledTriple, Triple
from .corpus import Dialogue, HistoryResponsePair, Utterance, index_dialogues
from .errors import GeneratorFailure, MissingFallback
from .generators import TURN_SEPARATOR, DecodeParams
from .metrics import distinct_n, self_bleu


@dataclass(frozen=True)
class CandidateResponse:
    j: int | None  # None for the u_{t-1}-only fallback
    conditioning_text: str
    text: str
    ci_score: float | None = None

    def __post_init__(self):
        if self.j is None and self.ci_score is not None:
            raise ValueError("the fallback candidate carries no ci score")


def build_conditioning(
    utterances: Sequence[str], separator: str = TURN_SEPARATOR
) -> str:
    return separator.join(utterances)


def preprocess_training_set(
    pairs: Sequence[HistoryResponsePair],
    dialogues: Iterable[Dialogue] | Mapping[str, Dialogue],
    classifier: CIClassifier,
    separator: str = TURN_SEPARATOR,
) -> list[tuple[str, str]]:
    """(conditioning, response) examples keeping only identified causes.

    Every pair maps to exactly one example, in input order.  Pairs at t=1
    condition on u_0 alone; all others on (u_{j*}, u_{t-1}) with j* the
    unconditional argmax second cause.
    """
    by_id = dialogues if isinstance(dialogues, Mapping) else index_dialogues(dialogues)
    out: list[tuple[str, str]] = []
    for pair in pairs:
        utts = by_id[pair.dialogue_id].utterances
        response = utts[pair.t].text
        if pair.t == 1:
            out.append((utts[0].text, response))
            continue
        j_star, _ = identify_second_cause(classifier, utts[: pair.t], response)
        conditioning = build_conditioning(
            (utts[j_star].text, utts[pair.t - 1].text), separator
        )
        out.append((conditioning, response))
    return out


def generate_candidates(
    generator,
    history: Sequence[Utterance],
    decode_params: DecodeParams | None = None,
    separator: str = TURN_SEPARATOR,
) -> list[CandidateResponse]:
    """One candidate per j in [0, t-2] plus the u_{t-1}-only fallback.

    Individual generator failures drop that candidate with a warning; a
    failing fallback is fatal because selection cannot proceed without it.
    """
    if not history:
        raise ValueError("history must contain at least one utterance")
    decode_params = decode_params or DecodeParams()
    t = len(history)
    u_prev = history[t - 1].text
    candidates: list[CandidateResponse] = []
    for j in range(t - 1):
        conditioning = build_conditioning((history[j].text, u_prev), separator)
        try:
            text = generator.generate(conditioning, decode_params)
        except Exception as exc:
            warnings.warn(f"generator failed for candidate j={j}: {exc}")
            continue
        candidates.append(CandidateResponse(j=j, conditioning_text=conditioning, text=text))
    try:
        fallback_text = generator.generate(u_prev, decode_params)
    except Exception as exc:
        raise GeneratorFailure(f"fallback generation failed: {exc}") from exc
    candidates.append(
        CandidateResponse(j=None, conditioning_text=u_prev, text=fallback_text)
    )
    return candidates


def _fallback_of(candidates: Sequence[CandidateResponse]) -> CandidateResponse:
    fallbacks = [c for c in candidates if c.j is None]
    if not fallbacks:
        raise MissingFallback("candidate set lacks the u_{t-1}-only response")
    return fallbacks[0]


def select_response(
    classifier: CIClassifier,
    history: Sequence[Utterance],
    candidates: Sequence[CandidateResponse],
    threshold: float = 0.5,
) -> CandidateResponse:
    """Argmax CI-scored candidate above the threshold, else the fallback.

    Each j-candidate is scored as the probability that its own text still
    depends on u_j given u_{t-1}; ties prefer the largest j.
    """
    fallback = _fallback_of(candidates)
    t = len(history)
    u_prev = history[t - 1].text
    best: CandidateResponse | None = None
    scored: list[CandidateResponse] = []
    for candidate in candidates:
        if candidate.j is None:
            scored.append(candidate)
            continue
        score = classifier.score(
            Triple(
                u_j=history[candidate.j].text,
                u_prev=u_prev,
                response=candidate.text,
                j=candidate.j,
                t=t,
            )
        )
        candidate = CandidateResponse(
            j=candidate.j,
            conditioning_text=candidate.conditioning_text,
            text=candidate.text,
            ci_score=score,
        )
        scored.append(candidate)
        if best is None or score > best.ci_score or (
            score == best.ci_score and candidate.j > best.j
        ):
            best = candidate
    if best is not None and best.ci_score > threshold:
        return best
    return _fallback_of(scored)


def rerank_by_dependence(
    dep_classifier: CIClassifier,
    candidates: Sequence[CandidateResponse],
    history: Sequence[Utterance],
) -> CandidateResponse:
    """Ablation baseline: argmax of the pairwise dependence probability.

    Scores p(depend | u_j, candidate text) with no conditioning on u_{t-1};
    ties prefer the largest j.  Falls back only when no j-candidate exists.
    """
    _fallback_of(candidates)  # candidate sets must be complete here too
    best: CandidateResponse | None = None
    best_score = -1.0
    for candidate in candidates:
        if candidate.j is None:
            continue
        score = dep_classifier.score_texts(
            (candidate.text, history[candidate.j].text)
        )
        if score > best_score or (score == best_score and candidate.j > best.j):
            best, best_score = candidate, score
    if best is None:
        return _fallback_of(candidates)
    return best


def candidate_diversity(candidate_sets: Sequence[Sequence[CandidateResponse]]) -> dict:
    """Self-BLEU (mean over sets) and corpus-level distinct-1/2 of candidate texts."""
    token_sets = [
        [candidate.text.split() for candidate in cset] for cset in candidate_sets
    ]
    self_bleus = [self_bleu(tokens) for tokens in token_sets]
    pooled = [tokens for group in token_sets for tokens in group]
    return {
        "self_bleu": float(np.mean(self_bleus)),
        "distinct_1": distinct_n(pooled, 1),
        "distinct_2": distinct_n(pooled, 2),
    }


# -- dependence classifier construction (for the reranking ablation) --


def build_dependence_set(
    pairs: Sequence[HistoryResponsePair],
    dialogues: Iterable[Dialogue] | Mapping[str, Dialogue],
    separator: str | None = None,
    seed: int = 0,
    far_offset: int = 3,
) -> list[tuple[str, int]]:
    """Two-segment (response, utterance) inputs for the dependence head.

    Adjacent (u_{t-1}, r_t) pairs are positive; negatives draw one utterance
    per pair with t - j >= far_offset when available.
    """
    from .encoders import DEFAULT_SEPARATOR, join_segments

    separator = DEFAULT_SEPARATOR if separator is None else separator
    by_id = dialogues if isinstance(dialogues, Mapping) else index_dialogues(dialogues)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDE]))
    out: list[tuple[str, int]] = []
    for pair in pairs:
        utts = by_id[pair.dialogue_id].utterances
        response = utts[pair.t].text
        out.append((join_segments((response, utts[pair.t - 1].text), separator), 1))
        far = [j for j in range(pair.t) if pair.t - j >= far_offset]
        if far:
            j = int(rng.choice(far))
            out.append((join_segments((response, utts[j].text), separator), 0))
    return out


def score_dependence(dep_classifier: CIClassifier, utterance: str, response: str) -> float:
    """Pairwise dependence probability of (utterance, response)."""
    return dep_classifier.score_texts((response, utterance))


def train_dependence_classifier(
    pairs: Sequence[HistoryResponsePair],
    dialogues: Iterable[Dialogue] | Mapping[str, Dialogue],
    encoder,
    config=None,
    seed: int = 0,
) -> CIClassifier:
    """Fit the two-segment dependence head used by rerank_by_dependence."""
    from .ci import TrainConfig, train_on_inputs

    classifier = CIClassifier(encoder)
    data = build_dependence_set(pairs, dialogues, classifier.separator, seed=seed)
    train_on_inputs(classifier, data, config or TrainConfig(seed=seed))
    return classifier
