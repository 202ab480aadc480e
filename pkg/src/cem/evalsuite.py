"""Perplexity, Dist-n, emotion accuracy, trigram coverage and ablation comparison."""
import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .corpus import Batch, Vocabulary
from .errors import DataError
from .objective import token_nll


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def distinct_n(responses: Sequence[Sequence[str]], n: int) -> float:
    """Unique n-grams pooled over all responses, as a percentage of all n-grams."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen, total = set(), 0
    for r in responses:
        grams = _ngrams(list(r), n)
        seen.update(grams)
        total += len(grams)
    if total == 0:
        raise DataError(f"no {n}-grams in the responses")
    return 100.0 * len(seen) / total


def trigram_report(responses: Sequence[Sequence[str]], trigrams: Optional[Sequence[Sequence[str]]] = None,
                   top_k: Optional[int] = None) -> List[Tuple[Tuple[str, ...], float]]:
    """Share of responses containing each trigram at least once, sorted descending.

    Pass explicit ``trigrams`` or ``top_k`` for the k best-covered ones (ties broken
    lexicographically).
    """
    if not responses:
        raise DataError("trigram report needs at least one response")
    coverage = Counter()
    for r in responses:
        coverage.update(set(_ngrams(list(r), 3)))
    n = len(responses)
    if trigrams is not None:
        rows = [(tuple(t), coverage[tuple(t)] / n) for t in trigrams]
    else:
        rows = [(t, c / n) for t, c in coverage.items()]
    rows.sort(key=lambda x: (-x[1], x[0]))
    return rows[:top_k] if top_k is not None else rows


def format_trigram_report(rows) -> str:
    return "".join(f"{' '.join(t)}\t{p!r}\n" for t, p in rows)


@torch.no_grad()
def nll_totals(model, batches: Sequence[Batch]) -> Tuple[float, int]:
    """Summed teacher-forced NLL and the number of target tokens."""
    if not batches:
        raise DataError("empty dataset")
    was = model.training
    model.eval()
    total, count = 0.0, 0
    for b in batches:
        out = model(b)
        nll, mask, _ = token_nll(out.logits, b.labels, b.label_mask)
        total += float(nll.double().sum())
        count += int(mask.sum())
    model.train(was)
    return total, count


def perplexity(model, batches: Sequence[Batch]) -> float:
    total, count = nll_totals(model, batches)
    return math.exp(total / count)


def accuracy_from_probs(p_emo: torch.Tensor, labels: torch.Tensor) -> float:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest label id
    return float((p_emo.argmax(-1) == labels).double().mean())


@torch.no_grad()
def emotion_accuracy(model, batches: Sequence[Batch]) -> Optional[float]:
    if not model.config.use_emotion:
        return None
    was = model.training
    model.eval()
    correct = n = 0
    for b in batches:
        emo = model.encode(b).emo_logits
        correct += int((torch.softmax(emo, -1).argmax(-1) == b.emotion_ids).sum())
        n += b.size
    model.train(was)
    return correct / n


def generate_responses(model, batches: Sequence[Batch], vocab: Vocabulary, max_steps=None) -> List[List[str]]:
    out = []
    for b in batches:
        out.extend(vocab.decode(ids) for ids in model.generate(b, max_steps))
    return out


@dataclass
class EvalReport:
    ppl: float
    dist_1: float
    dist_2: float
    emotion_accuracy: Optional[float]
    n_examples: int
    fingerprint: str = ""

    def __post_init__(self):
        if not self.ppl >= 1.0 - 1e-12:
            raise ValueError(f"perplexity {self.ppl} < 1")
        for v in (self.dist_1, self.dist_2):
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"dist-n {v} outside [0, 100]")
        if self.emotion_accuracy is not None and not 0.0 <= self.emotion_accuracy <= 1.0:
            raise ValueError("accuracy outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def fingerprint(*parts) -> str:
    """Stable hash over JSON-serialisable config/data descriptors."""
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _safe_distinct(responses, n):
    try:
        return distinct_n(responses, n)
    except DataError:
        return 0.0


def evaluate(model, batches: Sequence[Batch], vocab: Vocabulary, fp: str = "", max_steps=None):
    """Returns (EvalReport, generated responses)."""
    responses = generate_responses(model, batches, vocab, max_steps)
    report = EvalReport(
        ppl=perplexity(model, batches),
        dist_1=_safe_distinct(responses, 1),
        dist_2=_safe_distinct(responses, 2),
        emotion_accuracy=emotion_accuracy(model, batches),
        n_examples=sum(b.size for b in batches),
        fingerprint=fp,
    )
    return report, responses


METRIC_COLUMNS = ("ppl", "dist_1", "dist_2", "emotion_accuracy")


def ablation_compare(configs: Dict[str, dict], run_fn) -> dict:
    """Run ``run_fn(name, overrides) -> EvalReport`` per named config.

    The first config is the reference; every other row gets per-metric deltas
    against it.
    """
    if len(configs) < 2:
        raise ValueError("ablation comparison needs the full model and at least one variant")
    rows = {name: run_fn(name, overrides) for name, overrides in configs.items()}
    ref_name = next(iter(rows))
    ref = rows[ref_name]
    table = {"reference": ref_name, "rows": {}, "deltas": {}}
    for name, rep in rows.items():
        table["rows"][name] = {c: getattr(rep, c) for c in METRIC_COLUMNS}
        if name != ref_name:
            table["deltas"][name] = {
                c: (None if getattr(rep, c) is None or getattr(ref, c) is None
                    else getattr(rep, c) - getattr(ref, c))
                for c in METRIC_COLUMNS}
    return table


def format_ablation_table(table: dict) -> str:
    lines = ["model\tPPL\tDist-1\tDist-2\tAcc"]
    for name, row in table["rows"].items():
        acc = "-" if row["emotion_accuracy"] is None else f"{100 * row['emotion_accuracy']:.2f}"
        lines.append(f"{name}\t{row['ppl']:.2f}\t{row['dist_1']:.2f}\t{row['dist_2']:.2f}\t{acc}")
    return "\n".join(lines) + "\n"
