"""Dialogue ingestion, vocabulary, context encoding and batching."""
import csv
import hashlib
import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .errors import DataError

PAD, UNK, CLS, SOS, EOS = "[PAD]", "[UNK]", "[CLS]", "[SOS]", "[EOS]"
SPECIALS = (PAD, UNK, CLS, SOS, EOS)
PAD_ID, UNK_ID, CLS_ID, SOS_ID, EOS_ID = range(5)

ROLES = ("speaker", "listener")
# dialogue-state ids; [CLS] gets its own state
STATE_CLS, STATE_SPEAKER, STATE_LISTENER = 0, 1, 2
ROLE_STATE = {"speaker": STATE_SPEAKER, "listener": STATE_LISTENER}

SPLITS = ("train", "valid", "test")
DEFAULT_MAX_CONTEXT_TOKENS = 256

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def load_emotion_labels() -> Tuple[str, ...]:
    text = resources.files("cem").joinpath("resources/emotions.txt").read_text("utf-8")
    return tuple(line.strip() for line in text.splitlines() if line.strip())


EMOTIONS = load_emotion_labels()
EMOTION_TO_ID = {e: i for i, e in enumerate(EMOTIONS)}


def tokenize(text: str) -> List[str]:
    """Lowercase and split on whitespace; punctuation marks become their own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Dialogue:
    conv_id: str
    emotion: str
    utterances: Tuple[Tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple((r, t) for r, t in self.utterances))
        if not self.utterances:
            raise DataError(f"dialogue {self.conv_id!r} has no utterances")
        if self.emotion not in EMOTION_TO_ID:
            raise DataError(f"unknown emotion label {self.emotion!r} in dialogue {self.conv_id!r}")
        for i, (role, text) in enumerate(self.utterances):
            if role not in ROLES:
                raise DataError(f"dialogue {self.conv_id!r} utterance {i}: bad role {role!r}")
            if not tokenize(text):
                raise DataError(f"dialogue {self.conv_id!r} utterance {i} is empty")

    @property
    def emotion_id(self) -> int:
        return EMOTION_TO_ID[self.emotion]

    def to_record(self) -> dict:
        return {
            "conv_id": self.conv_id,
            "emotion": self.emotion,
            "utterances": [{"speaker": r, "text": t} for r, t in self.utterances],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Dialogue":
        return cls(
            conv_id=str(rec["conv_id"]),
            emotion=rec["emotion"],
            utterances=tuple((u["speaker"], u["text"]) for u in rec["utterances"]),
        )


def _split_file(path, split):
    path = Path(path)
    if path.is_dir():
        return path / f"{split}.jsonl"
    return path


def load_dialogues(path, split: str = "train") -> List[Dialogue]:
    """Read line-delimited dialogue records.

    ``path`` may be a single file or a directory holding ``{split}.jsonl``.
    """
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    file = _split_file(path, split)
    if not file.exists():
        raise DataError(f"dialogue file not found: {file}")
    dialogues = []
    with open(file, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dialogues.append(Dialogue.from_record(rec))
            except DataError as e:
                raise DataError(f"{file}:{lineno}: {e}") from None
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{file}:{lineno}: malformed record ({e})") from None
    return dialogues


def write_dialogues(dialogues: Sequence[Dialogue], path) -> int:
    with open(path, "w", encoding="utf-8") as f:
        for d in dialogues:
            f.write(json.dumps(d.to_record(), ensure_ascii=False) + "\n")
    return len(dialogues)


class Vocabulary:
    """Token <-> id map. Specials hold ids 0-4; the rest are ordered by count, then alphabetically."""

    def __init__(self, tokens: Sequence[str], freq: Optional[Dict[str, int]] = None):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary must start with the reserved special tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate token in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.freq = {t: int((freq or {}).get(t, 0)) for t in self.tokens}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.freq == other.freq

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, text: str) -> List[int]:
        return [self.id(t) for t in tokenize(text)]

    def decode(self, ids: Sequence[int], strip_specials: bool = True) -> List[str]:
        out = []
        for i in ids:
            tok = self.tokens[int(i)]
            if strip_specials and int(i) in (PAD_ID, SOS_ID, EOS_ID, CLS_ID):
                continue
            out.append(tok)
        return out

    def to_text(self) -> str:
        return "".join(f"{t}\t{self.freq[t]}\n" for t in self.tokens)

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, freq = [], {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected token<TAB>count")
                tokens.append(parts[0])
                freq[parts[0]] = int(parts[1])
        return cls(tokens, freq)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def build_vocabulary(dialogues: Sequence[Dialogue], min_freq: int = 1,
                     extra_texts: Sequence[str] = ()) -> Vocabulary:
    """Count tokens over every utterance (plus ``extra_texts``, e.g. knowledge strings)."""
    if min_freq < 1:
        raise DataError("min_freq must be >= 1")
    counts = Counter()
    for d in dialogues:
        for _, text in d.utterances:
            counts.update(tokenize(text))
    for text in extra_texts:
        counts.update(tokenize(text))
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept, {t: counts[t] for t in kept})


@dataclass
class ContextSequence:
    token_ids: List[int]
    state_ids: List[int]
    emotion_id: int

    @property
    def positions(self) -> List[int]:
        return list(range(len(self.token_ids)))

    def __len__(self):
        return len(self.token_ids)


def encode_context(dialogue: Dialogue, upto: int, vocab: Vocabulary,
                   max_context_tokens: int = DEFAULT_MAX_CONTEXT_TOKENS) -> ContextSequence:
    """Flatten the first ``upto`` utterances into ``[CLS] u_1 ... u_upto``.

    The oldest tokens are dropped once the sequence exceeds ``max_context_tokens``;
    ``[CLS]`` always stays at position 0.
    """
    n = len(dialogue.utterances)
    if not 1 <= upto <= n:
        raise DataError(f"upto={upto} out of range for dialogue {dialogue.conv_id!r} with {n} utterances")
    if max_context_tokens < 2:
        raise DataError("max_context_tokens must be >= 2")
    ids, states = [], []
    for role, text in dialogue.utterances[:upto]:
        toks = vocab.encode(text)
        ids.extend(toks)
        states.extend([ROLE_STATE[role]] * len(toks))
    keep = max_context_tokens - 1
    ids, states = ids[-keep:], states[-keep:]
    return ContextSequence([CLS_ID] + ids, [STATE_CLS] + states, dialogue.emotion_id)


@dataclass
class Example:
    """One training pair: a context prefix, the listener reply and its commonsense sequences."""
    context: ContextSequence
    target: List[int]
    knowledge: Dict[str, List[int]] = field(default_factory=dict)
    key: Tuple[str, int] = ("", 0)


@dataclass
class Batch:
    context_ids: torch.Tensor      # (B, L)
    context_states: torch.Tensor   # (B, L)
    context_mask: torch.Tensor     # (B, L) bool, True on real tokens
    targets: torch.Tensor          # (B, T) [SOS] y_1 .. y_T [EOS] [PAD]..
    emotion_ids: torch.Tensor      # (B,)
    knowledge: Dict[str, torch.Tensor] = field(default_factory=dict)
    knowledge_mask: Dict[str, torch.Tensor] = field(default_factory=dict)
    keys: List[Tuple[str, int]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.context_ids.size(0)

    @property
    def decoder_input(self) -> torch.Tensor:
        return self.targets[:, :-1]

    @property
    def labels(self) -> torch.Tensor:
        return self.targets[:, 1:]

    @property
    def label_mask(self) -> torch.Tensor:
        return self.labels != PAD_ID

    def unpad(self) -> List[Example]:
        out = []
        for b in range(self.size):
            m = self.context_mask[b]
            ctx = ContextSequence(self.context_ids[b][m].tolist(), self.context_states[b][m].tolist(),
                                  int(self.emotion_ids[b]))
            tgt = self.targets[b][self.targets[b] != PAD_ID].tolist()
            kn = {r: t[b][self.knowledge_mask[r][b]].tolist() for r, t in self.knowledge.items()}
            out.append(Example(ctx, tgt[1:-1], kn, self.keys[b] if self.keys else ("", 0)))
        return out


def _pad(rows, value=PAD_ID):
    width = max(len(r) for r in rows)
    return torch.tensor([list(r) + [value] * (width - len(r)) for r in rows], dtype=torch.long)


def collate(examples: Sequence[Example]) -> Batch:
    ctx = [e.context for e in examples]
    context_ids = _pad([c.token_ids for c in ctx])
    knowledge, kmask = {}, {}
    for rel in examples[0].knowledge:
        knowledge[rel] = _pad([e.knowledge[rel] for e in examples])
        kmask[rel] = _pad([[1] * len(e.knowledge[rel]) for e in examples], 0).bool()
    return Batch(
        context_ids=context_ids,
        context_states=_pad([c.state_ids for c in ctx]),
        context_mask=_pad([[1] * len(c) for c in ctx], 0).bool(),
        targets=_pad([[SOS_ID] + list(e.target) + [EOS_ID] for e in examples]),
        emotion_ids=torch.tensor([c.emotion_id for c in ctx], dtype=torch.long),
        knowledge=knowledge,
        knowledge_mask=kmask,
        keys=[e.key for e in examples],
    )


def make_batches(examples: Sequence[Example], batch_size: int,
                 shuffle_seed: Optional[int] = None) -> List[Batch]:
    """Right-padded batches; the final partial batch is kept. ``shuffle_seed=None`` keeps file order."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if not examples:
        raise DataError("no examples to batch")
    order = list(range(len(examples)))
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(order)
    return [collate([examples[i] for i in order[s:s + batch_size]])
            for s in range(0, len(order), batch_size)]


def response_turns(dialogue: Dialogue) -> List[int]:
    """Indices of listener utterances that have at least one preceding turn."""
    return [i for i, (role, _) in enumerate(dialogue.utterances) if i >= 1 and role == "listener"]


def split_dialogues(dialogues: Sequence[Dialogue], ratios=(8, 1, 1)) -> Dict[str, List[Dialogue]]:
    """Contiguous 8:1:1 partition in the given order (used for generated corpora only)."""
    n = len(dialogues)
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_valid = n * ratios[1] // total
    return {
        "train": list(dialogues[:n_train]),
        "valid": list(dialogues[n_train:n_train + n_valid]),
        "test": list(dialogues[n_train + n_valid:]),
    }


# ---------------------------------------------------------------------------
# EmpatheticDialogues CSV adapter

def read_empathetic_dialogues_csv(path) -> List[Dialogue]:
    """Convert one benchmark CSV split into dialogues.

    Rows are grouped by conv_id; utterances alternate speaker/listener starting
    with the speaker. The ``_comma_`` escape is restored.
    """
    convs: Dict[str, dict] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return []
        col = {name: i for i, name in enumerate(header)}
        for name in ("conv_id", "utterance_idx", "context", "utterance"):
            if name not in col:
                raise DataError(f"{path}: missing column {name!r}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                cid = row[col["conv_id"]]
                idx = int(row[col["utterance_idx"]])
                emotion = row[col["context"]]
                text = row[col["utterance"]].replace("_comma_", ",")
            except (IndexError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: malformed row ({e})") from None
            c = convs.setdefault(cid, {"emotion": emotion, "utts": []})
            c["utts"].append((idx, text))
    out = []
    for cid, c in convs.items():
        utts = [t for _, t in sorted(c["utts"])]
        out.append(Dialogue(cid, c["emotion"],
                            tuple((ROLES[i % 2], t) for i, t in enumerate(utts))))
    return out


# ---------------------------------------------------------------------------
# Synthetic corpus

EMOTION_CUES = {
    "afraid": ("scared", "frightened", "spooked"),
    "angry": ("mad", "enraged", "livid"),
    "annoyed": ("irritated", "bugged", "peeved"),
    "anticipating": ("awaiting", "expecting", "counting"),
    "anxious": ("nervous", "jittery", "uneasy"),
    "apprehensive": ("hesitant", "wary", "doubtful"),
    "ashamed": ("shameful", "humiliated", "disgraced"),
    "caring": ("nurturing", "tending", "nursing"),
    "confident": ("certain", "assured", "bold"),
    "content": ("satisfied", "peaceful", "settled"),
    "devastated": ("crushed", "heartbroken", "shattered"),
    "disappointed": ("deflated", "dissatisfied", "underwhelmed"),
    "disgusted": ("grossed", "repulsed", "nauseated"),
    "embarrassed": ("awkward", "flustered", "blushing"),
    "excited": ("thrilled", "pumped", "stoked"),
    "faithful": ("loyal", "devoted", "committed"),
    "furious": ("fuming", "raging", "seething"),
    "grateful": ("thankful", "appreciative", "blessed"),
    "guilty": ("remorseful", "culpable", "regretful"),
    "hopeful": ("optimistic", "wishing", "aspiring"),
    "impressed": ("amazed", "awed", "wowed"),
    "jealous": ("envious", "covetous", "resentful"),
    "joyful": ("cheerful", "gleeful", "elated"),
    "lonely": ("isolated", "alone", "solitary"),
    "nostalgic": ("reminiscing", "wistful", "remembering"),
    "prepared": ("ready", "equipped", "organized"),
    "proud": ("accomplished", "triumphant", "honored"),
    "sad": ("unhappy", "gloomy", "down"),
    "sentimental": ("tender", "moved", "touched"),
    "surprised": ("shocked", "startled", "astonished"),
    "terrified": ("petrified", "horrified", "panicked"),
    "trusting": ("reliant", "confiding", "believing"),
}
SYNTH_OBJECTS = ("car", "dog", "job", "exam", "sister", "house",
                 "garden", "phone", "trip", "friend", "boss", "party")
SYNTH_TIMES = ("today", "yesterday", "last night", "this week")
# generic openers shared by every emotion; the frequent material a diversity loss should push against
SYNTH_LEADS = ("oh wow that is", "i am sure that is", "that is really", "oh no that is")


def generate_synthetic_corpus(n_dialogues: int, n_emotions: int, seed: int) -> List[Dialogue]:
    """Template dialogues whose emotion is recoverable from a per-emotion cue lexicon.

    Labels are the first ``n_emotions`` entries of the emotion list, used as evenly
    as possible. Each listener reply is a deterministic function of its context.
    """
    if not 2 <= n_emotions <= len(EMOTIONS):
        raise DataError(f"n_emotions must be in [2, {len(EMOTIONS)}], got {n_emotions}")
    if n_dialogues < 1:
        raise DataError("n_dialogues must be >= 1")
    rng = random.Random(seed)
    labels = [EMOTIONS[i % n_emotions] for i in range(n_dialogues)]
    rng.shuffle(labels)
    out = []
    for k, label in enumerate(labels):
        cues = EMOTION_CUES[label]
        cue = rng.choice(cues)
        obj = rng.randrange(len(SYNTH_OBJECTS))
        when = rng.randrange(len(SYNTH_TIMES))
        utts = [
            ("speaker", f"i was {cue} about my {SYNTH_OBJECTS[obj]} {SYNTH_TIMES[when]} ."),
            ("listener", f"{SYNTH_LEADS[when]} a {label} story about your {SYNTH_OBJECTS[obj]} ."),
        ]
        if rng.random() < 0.5:
            cue2 = rng.choice(cues)
            obj2 = rng.randrange(len(SYNTH_OBJECTS))
            utts += [
                ("speaker", f"yes and the {SYNTH_OBJECTS[obj2]} made me {cue2} too"),
                ("listener", f"{SYNTH_LEADS[obj2 % len(SYNTH_LEADS)]} why the {SYNTH_OBJECTS[obj2]} "
                             f"left you {label} ?"),
            ]
        out.append(Dialogue(f"synth:{seed}:{k}", label, tuple(utts)))
    return out
