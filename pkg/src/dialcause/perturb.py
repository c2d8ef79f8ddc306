"""History perturbation study: how much do causes vs non-causes matter.

For every annotated pair the study scores the human response and generates an
output from the unperturbed history, then repeats both under each
perturbation condition.  Reported per condition: perplexity of the human
response (per-pair exp of mean token NLL, averaged after exponentiation, plus
a corpus-level variant) and the mean average-BLEU of the perturbed-history
output against the unperturbed one.  Matched-random conditions repeat with
distinct seed streams and average; significance between conditions uses the
Welch two-sample t-test over per-pair values.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Dialogue, HistoryResponsePair, Utterance, index_dialogues
from .errors import KTooLarge
from .generators import TURN_SEPARATOR, DecodeParams
from .metrics import SignificanceResult, average_bleu, two_sample_t_test

TARGETS = ("causes", "non_causes", "non_causes_random_k", "random_k")
MODES = ("replace_pad", "drop")


@dataclass(frozen=True)
class PerturbationSpec:
    target: str
    mode: str
    pad_token: str = "<pad>"
    repetitions: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.mode == "replace_pad" and not self.pad_token:
            raise ValueError("replace_pad needs a non-empty pad token")

    @property
    def is_random(self) -> bool:
        return self.target in ("non_causes_random_k", "random_k")

    @property
    def name(self) -> str:
        return f"{self.mode}:{self.target}"


def _derive_rng(seed: int, dialogue_id: str, t: int, repetition: int) -> np.random.Generator:
    digest = hashlib.blake2b(
        f"{seed}:{dialogue_id}:{t}:{repetition}".encode(), digest_size=8
    ).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _target_indices(
    pair: HistoryResponsePair, spec: PerturbationSpec, repetition: int
) -> set[int]:
    causes = set(pair.cause_indices)
    history = set(range(pair.t))
    non_causes = history - causes
    if spec.target == "causes":
        return causes
    if spec.target == "non_causes":
        return non_causes
    k = len(causes)
    if spec.target == "non_causes_random_k":
        if k > len(non_causes):
            raise KTooLarge(
                f"{pair.dialogue_id} t={pair.t}: {k} causes but only "
                f"{len(non_causes)} non-causes"
            )
        pool = sorted(non_causes)
    else:  # random_k over the whole history
        pool = sorted(history)
        k = min(k, len(pool))
    rng = _derive_rng(spec.seed, pair.dialogue_id, pair.t, repetition)
    return {pool[i] for i in rng.choice(len(pool), size=k, replace=False)}


def perturb_history(
    pair: HistoryResponsePair,
    dialogues: Iterable[Dialogue] | Mapping[str, Dialogue],
    spec: PerturbationSpec,
    repetition: int = 0,
) -> list[Utterance]:
    """Apply the spec to the pair's history u_0..u_{t-1}.

    replace_pad keeps the utterance count, substituting the pad token for
    every token of a targeted utterance; drop removes targeted utterances and
    reindexes the survivors in order.
    """
    by_id = dialogues if isinstance(dialogues, Mapping) else index_dialogues(dialogues)
    utts = by_id[pair.dialogue_id].utterances[: pair.t]
    targets = _target_indices(pair, spec, repetition)
    out: list[Utterance] = []
    for utt in utts:
        if utt.index in targets:
            if spec.mode == "drop":
                continue
            padded = " ".join(spec.pad_token for _ in utt.text.split())
            out.append(
                Utterance(
                    index=len(out), speaker=utt.speaker, text=padded or spec.pad_token
                )
            )
        else:
            out.append(Utterance(index=len(out), speaker=utt.speaker, text=utt.text))
    return out


@dataclass
class ConditionResult:
    ppl: float
    ppl_corpus: float
    avg_bleu: float | None
    coverage: float
    skipped: dict[str, str] = field(default_factory=dict)
    per_pair_bleu: dict[str, float] = field(default_factory=dict)
    per_pair_ppl: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_per_pair: bool = True) -> dict:
        out = {
            "ppl": self.ppl,
            "ppl_corpus": self.ppl_corpus,
            "avg_bleu": self.avg_bleu,
            "coverage": self.coverage,
            "skipped": self.skipped,
        }
        if include_per_pair:
            out["per_pair"] = {
                key: {"avg_bleu": self.per_pair_bleu.get(key), "ppl": self.per_pair_ppl[key]}
                for key in sorted(self.per_pair_ppl)
            }
        return out


@dataclass
class PerturbationReport:
    baseline: ConditionResult
    conditions: dict[str, ConditionResult]
    significance: dict[str, dict[str, SignificanceResult]]

    def to_dict(self, include_per_pair: bool = True) -> dict:
        return {
            "baseline": self.baseline.to_dict(include_per_pair),
            "conditions": {
                name: result.to_dict(include_per_pair)
                for name, result in sorted(self.conditions.items())
            },
            "significance": {
                mode: {name: res.to_dict() for name, res in comparisons.items()}
                for mode, comparisons in sorted(self.significance.items())
            },
        }


def _truncate_for(generator, utterances: list[Utterance]) -> list[Utterance]:
    limit = getattr(generator, "max_context", None)
    if limit is None:
        return utterances
    kept = list(utterances)
    while kept and sum(len(u.text.split()) for u in kept) > limit:
        kept = kept[1:]  # oldest first
    return kept


def _conditioning_text(generator, utterances: list[Utterance]) -> str:
    kept = _truncate_for(generator, utterances)
    return TURN_SEPARATOR.join(u.text for u in kept)


def _ppl(nlls: Sequence[float]) -> float:
    return math.exp(sum(nlls) / len(nlls)) if nlls else float("nan")


def run_perturbation_study(
    generator,
    pairs: Sequence[HistoryResponsePair],
    dialogues: Iterable[Dialogue] | Mapping[str, Dialogue],
    specs: Sequence[PerturbationSpec],
    decode_params: DecodeParams | None = None,
    jobs: int = 1,
) -> PerturbationReport:
    """Score and regenerate under every spec; aggregate order-independently."""
    by_id = dialogues if isinstance(dialogues, Mapping) else index_dialogues(dialogues)
    decode_params = decode_params or DecodeParams()
    annotated = [p for p in pairs if p.cause_indices]

    def evaluate_pair(pair: HistoryResponsePair) -> dict:
        key = f"{pair.dialogue_id}:{pair.t}"
        utts = list(by_id[pair.dialogue_id].utterances[: pair.t])
        response = by_id[pair.dialogue_id].utterances[pair.t].text
        base_conditioning = _conditioning_text(generator, utts)
        base_output = generator.generate(base_conditioning, decode_params)
        base_nll = generator.score_target(base_conditioning, response)
        result = {
            "key": key,
            "baseline": {"nll": base_nll, "output": base_output},
            "conditions": {},
        }
        for spec in specs:
            reps = spec.repetitions if spec.is_random else 1
            bleus, ppls, nll_sums, token_counts = [], [], [], []
            try:
                for rep in range(reps):
                    perturbed = perturb_history(pair, by_id, spec, repetition=rep)
                    conditioning = _conditioning_text(generator, perturbed)
                    output = generator.generate(conditioning, decode_params)
                    nll = generator.score_target(conditioning, response)
                    bleus.append(
                        average_bleu(output.split(), [base_output.split()])
                    )
                    ppls.append(_ppl(nll))
                    nll_sums.append(sum(nll))
                    token_counts.append(len(nll))
            except KTooLarge as exc:
                result["conditions"][spec.name] = {"skip": str(exc)}
                continue
            except Exception as exc:  # adapter failure: record, keep coverage honest
                result["conditions"][spec.name] = {"skip": f"adapter failure: {exc}"}
                continue
            result["conditions"][spec.name] = {
                "avg_bleu": float(np.mean(bleus)),
                "ppl": float(np.mean(ppls)),
                "nll_sum": float(np.mean(nll_sums)),
                "tokens": float(np.mean(token_counts)),
            }
        return result

    if jobs > 1 and getattr(generator, "concurrent", False):
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(evaluate_pair, annotated))
    else:
        rows = [evaluate_pair(pair) for pair in annotated]
    rows.sort(key=lambda r: r["key"])

    base_ppls = {r["key"]: _ppl(r["baseline"]["nll"]) for r in rows}
    total_nll = sum(sum(r["baseline"]["nll"]) for r in rows)
    total_tokens = sum(len(r["baseline"]["nll"]) for r in rows)
    baseline = ConditionResult(
        ppl=float(np.mean(sorted(base_ppls.values()))) if base_ppls else float("nan"),
        ppl_corpus=math.exp(total_nll / total_tokens) if total_tokens else float("nan"),
        avg_bleu=None,  # unperturbed outputs are the reference
        coverage=1.0,
        per_pair_ppl=base_ppls,
    )

    conditions: dict[str, ConditionResult] = {}
    for spec in specs:
        bleu_by_pair: dict[str, float] = {}
        ppl_by_pair: dict[str, float] = {}
        skipped: dict[str, str] = {}
        nll_total = 0.0
        token_total = 0.0
        for row in rows:
            cell = row["conditions"].get(spec.name)
            if cell is None:
                continue
            if "skip" in cell:
                skipped[row["key"]] = cell["skip"]
                continue
            bleu_by_pair[row["key"]] = cell["avg_bleu"]
            ppl_by_pair[row["key"]] = cell["ppl"]
            nll_total += cell["nll_sum"]
            token_total += cell["tokens"]
        covered = len(ppl_by_pair)
        conditions[spec.name] = ConditionResult(
            ppl=float(np.mean([ppl_by_pair[k] for k in sorted(ppl_by_pair)]))
            if covered
            else float("nan"),
            ppl_corpus=math.exp(nll_total / token_total) if token_total else float("nan"),
            avg_bleu=float(np.mean([bleu_by_pair[k] for k in sorted(bleu_by_pair)]))
            if covered
            else None,
            coverage=covered / len(rows) if rows else 0.0,
            skipped=skipped,
            per_pair_bleu=bleu_by_pair,
            per_pair_ppl=ppl_by_pair,
        )

    significance: dict[str, dict[str, SignificanceResult]] = {}
    for mode in MODES:
        cause = conditions.get(f"{mode}:causes")
        comparisons: dict[str, SignificanceResult] = {}
        if cause is None:
            continue
        for other_target, label in (
            ("non_causes", "cause_vs_noncause"),
            ("non_causes_random_k", "cause_vs_random"),
            ("random_k", "cause_vs_random_all"),
        ):
            other = conditions.get(f"{mode}:{other_target}")
            if other is None:
                continue
            shared = sorted(set(cause.per_pair_bleu) & set(other.per_pair_bleu))
            if len(shared) >= 2:
                comparisons[label] = two_sample_t_test(
                    [cause.per_pair_bleu[k] for k in shared],
                    [other.per_pair_bleu[k] for k in shared],
                )
        if comparisons:
            significance[mode] = comparisons
    return PerturbationReport(
        baseline=baseline, conditions=conditions, significance=significance
    )
