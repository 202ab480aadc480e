"""Glue between data, model, trainer and metrics used by the CLI and the test-suite."""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import torch

from .corpus import (Dialogue, Example, Vocabulary, build_vocabulary, make_batches, response_turns,
                     tokenize)
from .evalsuite import EvalReport, ablation_compare, evaluate
from .knowledge import (DEFAULT_MAX_CONTEXT_TOKENS, DEFAULT_MAX_KNOWLEDGE_TOKENS, CacheProvider,
                        build_examples, knowledge_texts, synthetic_knowledge)
from .model import CEM, ModelConfig
from .objective import FrequencyTable, compute_frequency_table
from .trainer import TrainConfig, TrainReport, train


@dataclass
class Experiment:
    vocab: Vocabulary
    train: List[Example]
    valid: List[Example]
    test: List[Example]
    freq: FrequencyTable


def build_model(config: ModelConfig, seed: int) -> CEM:
    torch.manual_seed(seed)
    return CEM(config)


def target_tokens(dialogues: Sequence[Dialogue]) -> List[List[str]]:
    return [tokenize(d.utterances[j][1]) for d in dialogues for j in response_turns(d)]


def build_experiment(train_dialogues, valid_dialogues, test_dialogues=(), provider=None, min_freq=1,
                     max_context_tokens=DEFAULT_MAX_CONTEXT_TOKENS,
                     max_knowledge_tokens=DEFAULT_MAX_KNOWLEDGE_TOKENS, vocab=None) -> Experiment:
    """Vocabulary from the training split (utterances plus cached inference strings), then examples."""
    if vocab is None:
        extra = []
        if isinstance(provider, CacheProvider):
            train_ids = {d.conv_id for d in train_dialogues}
            extra = knowledge_texts(b for k, b in sorted(provider.bundles.items()) if k[0] in train_ids)
        vocab = build_vocabulary(train_dialogues, min_freq, extra)
    kw = dict(max_context_tokens=max_context_tokens, max_knowledge_tokens=max_knowledge_tokens)
    freq = compute_frequency_table(target_tokens(train_dialogues), vocab)
    return Experiment(
        vocab=vocab,
        train=build_examples(train_dialogues, vocab, provider, **kw),
        valid=build_examples(valid_dialogues, vocab, provider, **kw) if valid_dialogues else [],
        test=build_examples(test_dialogues, vocab, provider, **kw) if test_dialogues else [],
        freq=freq,
    )


def synthetic_experiment(dialogues_by_split: Dict[str, Sequence[Dialogue]], min_freq=1) -> Experiment:
    """Experiment over generated dialogues with template knowledge for every turn."""
    bundles = synthetic_knowledge([d for ds in dialogues_by_split.values() for d in ds])
    provider = CacheProvider({b.key: b for b in bundles})
    return build_experiment(dialogues_by_split["train"], dialogues_by_split.get("valid", ()),
                            dialogues_by_split.get("test", ()), provider, min_freq)


def train_variant(exp: Experiment, model_kwargs: dict, train_cfg: TrainConfig, ablations=(),
                  out_dir=None, log_file=None):
    config = ModelConfig(vocab_size=len(exp.vocab), ablations=tuple(ablations), **model_kwargs)
    model = build_model(config, train_cfg.seed)
    report = train(model, exp.train, exp.valid or exp.train, exp.freq, train_cfg, out_dir=out_dir,
                   vocab_hash=exp.vocab.hash, log_file=log_file)
    return model, report


def evaluate_examples(model: CEM, examples: Sequence[Example], vocab: Vocabulary, batch_size=1, fp=""):
    return evaluate(model, make_batches(examples, batch_size), vocab, fp)


def run_ablation(exp: Experiment, model_kwargs: dict, train_cfg: TrainConfig,
                 variants: Sequence[str] = ("full", "no-aff", "no-cog", "no-div"), eval_batch_size=16,
                 on_report=None) -> dict:
    """Train and evaluate every variant under the same seed and data."""
    def run(name, ablations):
        model, _ = train_variant(exp, model_kwargs, train_cfg, ablations)
        rep, _ = evaluate_examples(model, exp.test or exp.valid, exp.vocab, eval_batch_size)
        if on_report is not None:
            on_report(name, rep)
        return rep
    configs = {v: (() if v == "full" else (v,)) for v in variants}
    return ablation_compare(configs, run)
