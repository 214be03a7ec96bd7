"""Corpus BLEU, slot error rate and slot-coverage re-ranking."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import DialogueAct, is_binary, slot_token

BLEU_EPS = 1e-9

# (slot, value) -> phrases verbalising a binary slot. Longer phrases are
# matched first, so "not for business computing" is not also counted as
# the positive phrase it contains.
DEFAULT_BINARY_LEXICON: dict[tuple[str, str], tuple[str, ...]] = {
    ("isforbusinesscomputing", "true"): ("for business computing", "used for business computing"),
    ("isforbusinesscomputing", "false"): ("not for business computing",
                                          "not used for business computing"),
}


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
         max_n: int = 4, eps: float = BLEU_EPS) -> float:
    """Corpus BLEU-4 with one reference per candidate.

    Zero counts, matched or total, are replaced by ``eps`` before the log,
    so an order with no n-grams at all contributes a precision of 1. The
    brevity penalty uses corpus length totals.
    """
    if len(candidates) != len(references):
        raise ValueError(f"bleu: {len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("bleu: empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c, r = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(k, r[g]) for g, k in c.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        num = m if m > 0 else eps
        den = t if t > 0 else eps
        log_p += math.log(num / den)
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * math.exp(log_p / max_n)


@dataclass
class SlotCoverage:
    required: Counter
    realized: Counter

    @property
    def missing(self) -> int:
        return sum((self.required - self.realized).values())

    @property
    def redundant(self) -> int:
        return sum((self.realized - self.required).values())

    @property
    def n_required(self) -> int:
        return sum(self.required.values())


def _count_phrases(text: str, lexicon: Mapping[tuple[str, str], Sequence[str]]) -> Counter:
    """Non-overlapping phrase occurrences, longest phrases claimed first."""
    found: Counter = Counter()
    padded = f" {text} "
    entries = sorted(((p, key) for key, ps in lexicon.items() for p in ps), key=lambda e: -len(e[0]))
    for phrase, (slot, value) in entries:
        needle = f" {phrase} "
        while needle in padded:
            found[f"{slot}={value}"] += 1
            padded = padded.replace(needle, " \x00 ", 1)
    return found


def slot_coverage(tokens: Sequence[str], da: DialogueAct,
                  lexicon: Mapping[tuple[str, str], Sequence[str]] | None = None) -> SlotCoverage:
    lexicon = DEFAULT_BINARY_LEXICON if lexicon is None else lexicon
    required: Counter = Counter()
    for name, value in da.slots:
        if is_binary(value):
            if (name, value.strip().lower()) in lexicon:
                required[f"{name}={value.strip().lower()}"] += 1
        else:
            required[slot_token(name)] += 1
    realized = Counter(t for t in tokens if t.startswith("SLOT_"))
    realized.update(_count_phrases(" ".join(tokens), lexicon))
    return SlotCoverage(required, realized)


def slot_error_rate(pairs: Iterable[tuple[Sequence[str], DialogueAct]], lexicon=None) -> float:
    """(missing + redundant) / required, in percent; 0 when nothing is required."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("slot_error_rate: empty input")
    errors = required = 0
    for tokens, da in pairs:
        cov = slot_coverage(tokens, da, lexicon)
        errors += cov.missing + cov.redundant
        required += cov.n_required
    return 0.0 if required == 0 else 100.0 * errors / required


def rerank(candidates, da: DialogueAct, penalty_weight: float = 1.0, lexicon=None):
    """Score = normalised log-prob - weight * (missing + redundant), best first.

    Candidates are annotated in place; ties keep their incoming order.
    """
    for c in candidates:
        cov = slot_coverage(c.tokens, da, lexicon)
        c.missing, c.redundant = cov.missing, cov.redundant
        c.score = c.norm_log_prob - penalty_weight * (c.missing + c.redundant)
    return sorted(candidates, key=lambda c: -c.score)


@dataclass
class EvalReport:
    bleu: float
    err: float
    coverage: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"bleu": self.bleu, "err": self.err, "coverage": self.coverage},
                          sort_keys=True)

    def table(self) -> str:
        lines = [f"{'metric':<8}{'value':>12}", f"{'BLEU':<8}{self.bleu:>12.4f}",
                 f"{'ERR(%)':<8}{self.err:>12.2f}", "",
                 f"{'#':>4}  {'missing':>7}  {'redundant':>9}"]
        for i, c in enumerate(self.coverage):
            lines.append(f"{i:>4}  {c['missing']:>7}  {c['redundant']:>9}")
        return "\n".join(lines)


def evaluate(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
             acts: Sequence[DialogueAct], lexicon=None) -> EvalReport:
    cov = [slot_coverage(c, da, lexicon) for c, da in zip(candidates, acts)]
    return EvalReport(
        bleu=bleu(candidates, references),
        err=slot_error_rate(zip(candidates, acts), lexicon),
        coverage=[{"missing": c.missing, "redundant": c.redundant, "required": c.n_required}
                  for c in cov],
    )
