"""Response NLL, emotion cross-entropy and the frequency-weighted diversity loss."""
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence

import torch
import torch.nn.functional as F

from .corpus import SPECIALS, Vocabulary
from .errors import DataError, DegenerateCorpusError

DEFAULT_GAMMAS = (1.0, 1.0, 1.5)


def _flatten(logits, targets, mask):
    if logits.dim() == 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
    if mask is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    if not mask.any():
        raise DataError("target contains no non-pad tokens")
    return logits, targets, mask


def token_nll(logits, targets, mask=None):
    """Per-position -log P(y_t) zeroed on pad positions, with the (batched) mask and targets."""
    logits, targets, mask = _flatten(logits, targets, mask)
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll * mask, mask, targets


def nll_loss(logits, targets, mask=None):
    """Mean over non-pad positions of -log P(y_t | C, y_<t). Accepts (T, V) or (B, T, V)."""
    nll, mask, _ = token_nll(logits, targets, mask)
    return nll.sum() / mask.sum()


def diversity_loss(logits, targets, weights, mask=None):
    """Frequency-weighted NLL: mean over non-pad positions of -w[y_t] log P(y_t | ...)."""
    if weights.size(0) != logits.size(-1):
        raise ValueError(f"weights cover {weights.size(0)} tokens but logits have {logits.size(-1)}")
    nll, mask, targets = token_nll(logits, targets, mask)
    w = weights.to(nll.dtype)[targets]
    return (w * nll).sum() / mask.sum()


def emotion_loss(p_emo, labels):
    """-log P_emo(e*), averaged over the batch. ``p_emo`` is a probability vector or (B, q) matrix."""
    return emotion_loss_from_logits(torch.log(p_emo), labels, log_probs=True)


def emotion_loss_from_logits(logits, labels, log_probs=False):
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, device=logits.device).reshape(-1)
    q = logits.size(-1)
    if ((labels < 0) | (labels >= q)).any():
        raise ValueError(f"emotion label out of range [0, {q})")
    logp = logits if log_probs else torch.log_softmax(logits, dim=-1)
    return F.nll_loss(logp, labels)


def total_loss(l_nll, l_emo, l_div, gamma1=DEFAULT_GAMMAS[0], gamma2=DEFAULT_GAMMAS[1],
               gamma3=DEFAULT_GAMMAS[2]):
    return gamma1 * l_nll + gamma2 * l_emo + gamma3 * l_div


@dataclass
class LossSet:
    nll: float
    emo: float
    div: float
    gammas: tuple
    total: float

    def as_dict(self) -> Dict[str, float]:
        return {"L_nll": self.nll, "L_emo": self.emo, "L_div": self.div, "total": self.total}


class FrequencyTable:
    """Corpus token frequencies and the derived per-token loss weights.

    With RF the relative frequency and ``slope = -1 / max(RF)``, a token's raw
    weight is ``slope * RF + 1`` (0 for the most frequent token, near 1 for rare
    ones). Raw weights are rescaled to mean 1 over the tokens that occur.
    Specials are not counted and keep weight 1; vocabulary tokens that never
    occur get the rescaled weight of a zero-frequency token.
    """

    def __init__(self, vocab: Vocabulary, counts: Dict[str, int], allow_degenerate: bool = False):
        self.vocab = vocab
        self.counts = {t: int(counts.get(t, 0)) for t in vocab.tokens}
        for s in SPECIALS:
            self.counts[s] = 0
        counted = [t for t in vocab.tokens if self.counts[t] > 0]
        if not counted:
            raise DegenerateCorpusError("no counted tokens")
        total = sum(self.counts[t] for t in counted)
        cmax = max(self.counts[t] for t in counted)
        self.total = total
        self.rf = {t: Fraction(self.counts[t], total) for t in vocab.tokens}
        self.slope = -1 / Fraction(cmax, total)
        self.raw = {t: self.slope * self.rf[t] + 1 for t in vocab.tokens}
        raw_mean = sum(self.raw[t] for t in counted) / len(counted)
        self.degenerate = raw_mean == 0
        if self.degenerate and not allow_degenerate:
            raise DegenerateCorpusError(
                "all counted tokens share the maximum frequency; weights are all zero")
        self.exact = {}
        for t in vocab.tokens:
            if t in SPECIALS or self.degenerate:
                self.exact[t] = Fraction(1)
            else:
                self.exact[t] = self.raw[t] / raw_mean
        self.weights = {t: float(w) for t, w in self.exact.items()}

    def weight_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([self.weights[t] for t in self.vocab.tokens], dtype=dtype)

    def to_text(self) -> str:
        return "".join(f"{t}\t{self.counts[t]}\t{self.weights[t]!r}\n" for t in self.vocab.tokens)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "FrequencyTable":
        counts, weights = {}, {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected token<TAB>count<TAB>weight")
                counts[parts[0]] = int(parts[1])
                weights[parts[0]] = float(parts[2])
        if list(counts) != vocab.tokens:
            raise DataError(f"{path}: token list does not match the vocabulary")
        table = cls(vocab, counts, allow_degenerate=True)
        if table.weights != weights:
            raise DataError(f"{path}: stored weights disagree with the recomputed table")
        return table

    def __eq__(self, other):
        return (isinstance(other, FrequencyTable) and self.vocab.tokens == other.vocab.tokens
                and self.counts == other.counts and self.weights == other.weights)


def count_response_tokens(responses: Iterable[Sequence[str]]) -> Counter:
    c = Counter()
    for r in responses:
        c.update(t for t in r if t not in SPECIALS)
    return c


def compute_frequency_table(responses: Iterable[Sequence[str]], vocab: Vocabulary,
                            allow_degenerate: bool = False) -> FrequencyTable:
    """Build the table from tokenized training responses. Out-of-vocabulary tokens count as [UNK], which is excluded."""
    counts = count_response_tokens([[t if t in vocab else SPECIALS[1] for t in r] for r in responses])
    return FrequencyTable(vocab, counts, allow_degenerate)
