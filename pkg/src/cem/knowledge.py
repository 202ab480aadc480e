"""Commonsense inference acquisition, caching and tokenization.

Five ATOMIC-style relations are used. ``xReact`` forms the affective group; the
other four form the cognitive group. ``xAttr`` is deliberately unsupported.
"""
import json
import logging
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .corpus import (CLS_ID, DEFAULT_MAX_CONTEXT_TOKENS, EMOTION_CUES, SYNTH_OBJECTS, Dialogue,
                     Example, Vocabulary, encode_context, response_turns, tokenize)
from .errors import DataError, KnowledgeError, MissingKnowledgeError, TransportError

logger = logging.getLogger(__name__)

N_INFERENCES = 5
DEFAULT_MAX_KNOWLEDGE_TOKENS = 64
DEFAULT_NEUTRAL = "none"


class Relation(str, Enum):
    xReact = "xReact"
    xWant = "xWant"
    xNeed = "xNeed"
    xIntent = "xIntent"
    xEffect = "xEffect"

    @property
    def group(self) -> str:
        return "affective" if self is Relation.xReact else "cognitive"

    @property
    def is_cognitive(self) -> bool:
        return self is not Relation.xReact

    @classmethod
    def parse(cls, name) -> "Relation":
        if isinstance(name, Relation):
            return name
        if name == "xAttr":
            raise KnowledgeError("relation xAttr is excluded from the relation set")
        try:
            return cls(name)
        except ValueError:
            raise KnowledgeError(f"unknown relation {name!r}") from None


# fixed order; also the column-block order of the fused representation
RELATIONS: Tuple[Relation, ...] = tuple(Relation)
COGNITIVE: Tuple[Relation, ...] = tuple(r for r in RELATIONS if r.is_cognitive)

Key = Tuple[str, int]


def _check_inferences(values, where=""):
    values = list(values)
    if len(values) != N_INFERENCES:
        raise KnowledgeError(f"{where}expected {N_INFERENCES} inferences, got {len(values)}")
    for v in values:
        if not isinstance(v, str) or not tokenize(v):
            raise KnowledgeError(f"{where}empty inference string")
    return tuple(values)


@dataclass(frozen=True)
class CommonsenseBundle:
    conv_id: str
    turn_index: int
    relations: Mapping[str, Tuple[str, ...]]

    def __post_init__(self):
        if set(self.relations) != {r.value for r in RELATIONS}:
            raise KnowledgeError(f"bundle {self.key} must hold exactly the relations "
                                 f"{[r.value for r in RELATIONS]}")
        rels = {r.value: _check_inferences(self.relations[r.value], f"bundle {self.key} {r.value}: ")
                for r in RELATIONS}
        object.__setattr__(self, "relations", rels)

    @property
    def key(self) -> Key:
        return (self.conv_id, self.turn_index)

    def to_record(self) -> dict:
        return {"conv_id": self.conv_id, "turn_index": self.turn_index,
                "relations": {r: list(v) for r, v in self.relations.items()}}

    @classmethod
    def from_record(cls, rec) -> "CommonsenseBundle":
        return cls(str(rec["conv_id"]), int(rec["turn_index"]),
                   {r: tuple(v) for r, v in rec["relations"].items()})


def write_cache(bundles: Iterable[CommonsenseBundle], path) -> int:
    bundles = list(bundles)
    seen = set()
    for b in bundles:
        if b.key in seen:
            raise KnowledgeError(f"duplicate knowledge key {b.key}")
        seen.add(b.key)
    with open(path, "w", encoding="utf-8") as f:
        for b in bundles:
            f.write(json.dumps(b.to_record(), ensure_ascii=False) + "\n")
    return len(bundles)


def read_cache(path) -> Dict[Key, CommonsenseBundle]:
    out: Dict[Key, CommonsenseBundle] = {}
    path = Path(path)
    if not path.exists():
        raise KnowledgeError(f"knowledge cache not found: {path}")
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                b = CommonsenseBundle.from_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, KnowledgeError) as e:
                raise KnowledgeError(f"{path}:{lineno}: corrupt cache record ({e})") from None
            if b.key in out:
                raise KnowledgeError(f"{path}:{lineno}: duplicate key {b.key}")
            out[b.key] = b
    return out


class CacheProvider:
    """Serve inferences from a precomputed cache.

    ``fallback="neutral"`` answers misses with five copies of ``neutral``;
    ``fallback="error"`` raises. A ``remote`` provider, when given, is asked
    before falling back.
    """

    def __init__(self, bundles: Mapping[Key, CommonsenseBundle], fallback: str = "error",
                 neutral: str = DEFAULT_NEUTRAL, remote=None):
        if fallback not in ("error", "neutral"):
            raise KnowledgeError(f"unknown fallback policy {fallback!r}")
        self.bundles = dict(bundles)
        self.fallback = fallback
        self.neutral = neutral
        self.remote = remote

    def query(self, last_utterance: str, relation, key: Optional[Key] = None) -> List[str]:
        relation = Relation.parse(relation)
        b = self.bundles.get(key) if key is not None else None
        if b is not None:
            return list(b.relations[relation.value])
        if self.remote is not None:
            return self.remote.query(last_utterance, relation, key)
        if self.fallback == "neutral":
            return [self.neutral] * N_INFERENCES
        raise MissingKnowledgeError(f"no cached knowledge for key {key}")


class RemoteProvider:
    """HTTP client for an inference server.

    POST ``{"text", "relation", "num_generations": 5}`` and expect
    ``{"inferences": [5 strings]}`` back.
    """

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 2, backoff: float = 0.5):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def query(self, last_utterance: str, relation, key: Optional[Key] = None) -> List[str]:
        relation = Relation.parse(relation)
        payload = json.dumps({
            "text": f"{last_utterance} {relation.value}",
            "relation": relation.value,
            "num_generations": N_INFERENCES,
        }).encode("utf-8")
        last_err = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.url, data=payload, method="POST",
                                         headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    body = json.loads(resp.read().decode("utf-8"))
                break
            except (urllib.error.URLError, TimeoutError, OSError) as e:
                last_err = e
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
        else:
            raise TransportError(f"knowledge request to {self.url} failed: {last_err}", self.retries)
        try:
            return list(_check_inferences(body["inferences"], "remote response: "))
        except (KeyError, TypeError):
            raise KnowledgeError(f"malformed response from {self.url}: {body!r}") from None


def query_provider(last_utterance: str, relation, provider, key: Optional[Key] = None) -> List[str]:
    relation = Relation.parse(relation)
    return list(_check_inferences(provider.query(last_utterance, relation, key)))


def fetch_bundle(provider, last_utterance: str, key: Key) -> CommonsenseBundle:
    return CommonsenseBundle(key[0], key[1], {
        r.value: tuple(query_provider(last_utterance, r, provider, key)) for r in RELATIONS})


def assemble_relation_sequence(inferences: Sequence[str], relation, vocab: Vocabulary,
                               max_knowledge_tokens: int = DEFAULT_MAX_KNOWLEDGE_TOKENS) -> List[int]:
    """cs_1 + ... + cs_5 as token ids; cognitive relations get a leading [CLS]."""
    relation = Relation.parse(relation)
    inferences = _check_inferences(inferences)
    ids = [CLS_ID] if relation.is_cognitive else []
    for s in inferences:
        ids.extend(vocab.encode(s))
    return ids[:max_knowledge_tokens]


def knowledge_keys(dialogue: Dialogue) -> List[Tuple[Key, str]]:
    """(key, last history utterance) for every response turn of the dialogue."""
    return [((dialogue.conv_id, j - 1), dialogue.utterances[j - 1][1]) for j in response_turns(dialogue)]


def precompute_knowledge(dialogues: Sequence[Dialogue], existing: Mapping[Key, CommonsenseBundle],
                         remote=None, fallback: str = "error", neutral: str = DEFAULT_NEUTRAL,
                         max_in_flight: int = 4) -> Dict[Key, CommonsenseBundle]:
    """Fill every missing key from ``remote`` (if given) or the fallback policy."""
    out = dict(existing)
    todo, queued = [], set()
    for d in dialogues:
        for key, text in knowledge_keys(d):
            if key not in out and key not in queued:
                queued.add(key)
                todo.append((key, text))
    if not todo:
        return out
    if remote is not None:
        jobs = [(key, text, r) for key, text in todo for r in RELATIONS]
        with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
            results = list(pool.map(lambda j: remote.query(j[1], j[2], j[0]), jobs))
        gathered: Dict[Key, dict] = {}
        for (key, _, r), res in zip(jobs, results):
            gathered.setdefault(key, {})[r.value] = tuple(res)
        for key, rels in gathered.items():
            out[key] = CommonsenseBundle(key[0], key[1], rels)
    else:
        fb = CacheProvider({}, fallback=fallback, neutral=neutral)
        for key, text in todo:
            out[key] = fetch_bundle(fb, text, key)
    logger.info("precomputed knowledge for %d new keys", len(todo))
    return out


def build_examples(dialogues: Sequence[Dialogue], vocab: Vocabulary, provider=None,
                   max_context_tokens: int = DEFAULT_MAX_CONTEXT_TOKENS,
                   max_knowledge_tokens: int = DEFAULT_MAX_KNOWLEDGE_TOKENS) -> List[Example]:
    """One example per listener turn. ``provider=None`` yields examples without knowledge."""
    examples = []
    for d in dialogues:
        for j in response_turns(d):
            key = (d.conv_id, j - 1)
            kn = {}
            if provider is not None:
                last = d.utterances[j - 1][1]
                for r in RELATIONS:
                    kn[r.value] = assemble_relation_sequence(
                        query_provider(last, r, provider, key), r, vocab, max_knowledge_tokens)
            examples.append(Example(
                context=encode_context(d, j, vocab, max_context_tokens),
                target=vocab.encode(d.utterances[j][1]),
                knowledge=kn,
                key=key,
            ))
    if not examples:
        raise DataError("no listener turns to build examples from")
    return examples


def knowledge_texts(bundles: Iterable[CommonsenseBundle]) -> List[str]:
    return [s for b in bundles for v in b.relations.values() for s in v]


# ---------------------------------------------------------------------------
# Template inferences for generated corpora

_CUE_TO_EMOTION = {c: e for e, cues in EMOTION_CUES.items() for c in cues}


def synthetic_inferences(text: str) -> Dict[str, Tuple[str, ...]]:
    """Deterministic stand-in for a commonsense generator on template utterances.

    The affective relation yields emotion words recovered from the cue lexicon;
    cognitive relations yield short situation phrases about the mentioned object.
    """
    toks = tokenize(text)
    emotion = next((_CUE_TO_EMOTION[t] for t in toks if t in _CUE_TO_EMOTION), None)
    obj = next((t for t in toks if t in SYNTH_OBJECTS), "thing")
    if emotion is None:
        react = ("fine", "okay", "calm", "neutral", "normal")
    else:
        react = (emotion,) + EMOTION_CUES[emotion] + ("emotional",)
    return {
        "xReact": react,
        "xWant": (f"to talk about the {obj}", "to be heard", f"to fix the {obj}",
                  "to get support", "to feel better"),
        "xNeed": (f"to have a {obj}", "to go out", "to notice", "to think", "to care"),
        "xIntent": ("to share", "to vent", f"to explain the {obj}", "to connect", "to be understood"),
        "xEffect": (f"thinks about the {obj}", "gets advice", "feels heard", "calms down", "moves on"),
    }


def synthetic_knowledge(dialogues: Sequence[Dialogue]) -> List[CommonsenseBundle]:
    out = []
    for d in dialogues:
        for key, text in knowledge_keys(d):
            out.append(CommonsenseBundle(key[0], key[1], synthetic_inferences(text)))
    return out
