"""Agreement, lexical-overlap, diversity, significance, and best-worst scaling.

All functions are pure and operate on whitespace tokens or plain Python
containers; no model is involved.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from scipy.special import betainc

from .errors import DegenerateInput

BWS_METRICS = ("empathy", "fluency", "informativeness", "relevance")
BWS_JUDGMENTS = ("a_best", "b_best", "tie")


@dataclass(frozen=True)
class BWSRecord:
    experiment_id: str
    item_id: str
    system_a: str
    system_b: str
    metric: str
    judgments: tuple[str, ...]

    def __post_init__(self):
        if not self.judgments:
            raise ValueError("judgments must be non-empty")
        if self.system_a == self.system_b:
            raise ValueError("system_a and system_b must differ")
        for j in self.judgments:
            if j not in BWS_JUDGMENTS:
                raise ValueError(f"unknown judgment {j!r}")


@dataclass(frozen=True)
class SignificanceResult:
    t_statistic: float
    p_value: float
    significant: bool
    flagged: bool = False

    def to_dict(self) -> dict:
        return {
            "t_statistic": self.t_statistic,
            "p_value": self.p_value,
            "significant": self.significant,
            "flagged": self.flagged,
        }


# -- agreement --


def cohen_kappa(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """Chance-corrected agreement over two binary label vectors."""
    if len(labels_a) != len(labels_b) or not labels_a:
        raise ValueError("label vectors must have equal non-zero length")
    n = len(labels_a)
    p_o = sum(1 for x, y in zip(labels_a, labels_b) if x == y) / n
    pa = sum(1 for x in labels_a if x) / n
    pb = sum(1 for y in labels_b if y) / n
    p_e = pa * pb + (1 - pa) * (1 - pb)
    if p_e == 1.0:
        # Both raters constant and identical; agreement is trivially perfect.
        warnings.warn("degenerate marginals: both raters constant; kappa set to 1.0")
        return 1.0
    return (p_o - p_e) / (1 - p_e)


def span_f1(spans_per_annotator: Sequence[Iterable[int]]) -> float:
    """Mean token-overlap F1 over all unordered annotator pairs.

    A pair that both marked nothing agrees perfectly (1.0); a pair where only
    one marked nothing gets 0.0.
    """
    sets = [set(s) for s in spans_per_annotator]
    if len(sets) < 2:
        raise ValueError("need at least two annotators")
    scores = []
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            a, b = sets[i], sets[j]
            if not a and not b:
                scores.append(1.0)
                continue
            if not a or not b:
                scores.append(0.0)
                continue
            inter = len(a & b)
            if inter == 0:
                scores.append(0.0)
                continue
            precision = inter / len(a)
            recall = inter / len(b)
            scores.append(2 * precision * recall / (precision + recall))
    return sum(scores) / len(scores)


# -- lexical overlap and diversity --


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    hypothesis: Sequence[str],
    references: Sequence[Sequence[str]],
    max_order: int = 4,
) -> float:
    """Modified n-gram precision with brevity penalty.

    Conventions (fixed so short responses stay well-defined):
      * empty hypothesis -> 0.0;
      * zero unigram overlap -> 0.0;
      * a higher-order precision of zero is smoothed to 1/(2*len(hypothesis));
      * an order the hypothesis has no n-grams of is vacuously precise (1.0),
        so bleu(x, [x]) == 1 holds for any non-empty x;
      * brevity penalty uses the reference length closest to the hypothesis
        length, ties resolved toward the shorter reference.
    """
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    if not references:
        raise ValueError("need at least one reference")
    hypothesis = list(hypothesis)
    references = [list(r) for r in references]
    if not hypothesis:
        return 0.0
    log_precision_sum = 0.0
    for n in range(1, max_order + 1):
        hyp_counts = _ngram_counts(hypothesis, n)
        total = sum(hyp_counts.values())
        if total == 0:
            continue  # vacuous order, log(1.0) == 0
        max_ref: Counter = Counter()
        for ref in references:
            for gram, count in _ngram_counts(ref, n).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        clipped = sum(min(count, max_ref[gram]) for gram, count in hyp_counts.items())
        if clipped == 0:
            if n == 1:
                return 0.0
            precision = 1.0 / (2.0 * len(hypothesis))
        else:
            precision = clipped / total
        log_precision_sum += math.log(precision)
    hyp_len = len(hypothesis)
    ref_len = min((len(r) for r in references), key=lambda L: (abs(L - hyp_len), L))
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_precision_sum / max_order)


def average_bleu(
    hypothesis: Sequence[str], references: Sequence[Sequence[str]]
) -> float:
    """Arithmetic mean of BLEU-1 through BLEU-4."""
    return sum(bleu(hypothesis, references, k) for k in (1, 2, 3, 4)) / 4.0


def distinct_n(corpus_outputs: Sequence[Sequence[str]], n: int) -> float:
    """Unique-to-total n-gram ratio over the concatenated corpus."""
    if n < 1:
        raise ValueError("n must be >= 1")
    grams: Counter = Counter()
    for output in corpus_outputs:
        grams.update(_ngram_counts(list(output), n))
    total = sum(grams.values())
    if total == 0:
        raise DegenerateInput(f"no {n}-grams in corpus outputs")
    return len(grams) / total


def self_bleu(candidates: Sequence[Sequence[str]]) -> float:
    """Mean average-BLEU of each candidate against its siblings; lower = more diverse."""
    if len(candidates) < 2:
        raise DegenerateInput("self-BLEU needs at least two candidates")
    candidates = [list(c) for c in candidates]
    scores = []
    for i, cand in enumerate(candidates):
        others = [c for j, c in enumerate(candidates) if j != i]
        scores.append(average_bleu(cand, others))
    return sum(scores) / len(scores)


# -- best-worst scaling --


def bws_scores(records: Sequence[BWSRecord]) -> dict[str, int]:
    """Per system: times rated best minus times rated worst; ties count for neither."""
    if not records:
        return {}
    experiment_ids = {r.experiment_id for r in records}
    if len(experiment_ids) != 1:
        raise ValueError(f"records span multiple experiments: {sorted(experiment_ids)}")
    scores: dict[str, int] = {}
    for record in records:
        scores.setdefault(record.system_a, 0)
        scores.setdefault(record.system_b, 0)
        for j in record.judgments:
            if j == "a_best":
                scores[record.system_a] += 1
                scores[record.system_b] -= 1
            elif j == "b_best":
                scores[record.system_b] += 1
                scores[record.system_a] -= 1
    return scores


def load_bws_csv(path) -> dict[str, list[BWSRecord]]:
    """Read judgment rows and group them into records per experiment.

    Expected columns: experiment_id,item_id,system_a,system_b,metric,rater_id,judgment.
    Rows sharing (experiment, item, systems, metric) merge into one record with
    one judgment per rater.
    """
    grouped: dict[tuple, list[str]] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {
            "experiment_id", "item_id", "system_a", "system_b", "metric", "rater_id", "judgment",
        }
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"BWS CSV missing columns: {sorted(missing)}")
        for row in reader:
            key = (
                row["experiment_id"], row["item_id"],
                row["system_a"], row["system_b"], row["metric"],
            )
            grouped.setdefault(key, []).append(row["judgment"])
    by_experiment: dict[str, list[BWSRecord]] = {}
    for (exp, item, sys_a, sys_b, metric), judgments in grouped.items():
        by_experiment.setdefault(exp, []).append(
            BWSRecord(
                experiment_id=exp, item_id=item, system_a=sys_a, system_b=sys_b,
                metric=metric, judgments=tuple(judgments),
            )
        )
    return by_experiment


# -- significance --


def _student_t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


def two_sample_t_test(
    sample_a: Sequence[float], sample_b: Sequence[float], alpha: float = 0.05
) -> SignificanceResult:
    """Welch's unequal-variance t statistic with a two-sided p-value."""
    if len(sample_a) < 2 or len(sample_b) < 2:
        raise ValueError("each sample needs at least two values")
    na, nb = len(sample_a), len(sample_b)
    mean_a = sum(sample_a) / na
    mean_b = sum(sample_b) / nb
    var_a = sum((x - mean_a) ** 2 for x in sample_a) / (na - 1)
    var_b = sum((x - mean_b) ** 2 for x in sample_b) / (nb - 1)
    se_sq = var_a / na + var_b / nb
    if se_sq == 0.0:
        if mean_a == mean_b:
            warnings.warn("zero variance and equal means; t=0, p=1 by convention")
            return SignificanceResult(0.0, 1.0, False, flagged=True)
        t = math.inf if mean_a > mean_b else -math.inf
        warnings.warn("zero variance with unequal means; p=0 by convention")
        return SignificanceResult(t, 0.0, True, flagged=True)
    t = (mean_a - mean_b) / math.sqrt(se_sq)
    df_denominator = (var_a / na) ** 2 / (na - 1) + (var_b / nb) ** 2 / (nb - 1)
    if df_denominator == 0.0:  # subnormal variances underflow to zero squared
        df = float(na + nb - 2)
    else:
        df = se_sq**2 / df_denominator
    p = _student_t_sf_two_sided(t, df)
    return SignificanceResult(float(t), p, p <= alpha)
