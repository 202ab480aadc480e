"""Command-line entry point.

    cem synth-data --data-dir data
    cem precompute-knowledge --data-dir data --fallback neutral
    cem train --data-dir data --out run
    cem evaluate --data-dir data --out run
    cem generate --out run --input dialogues.jsonl
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

from . import corpus, knowledge
from .corpus import Dialogue, Vocabulary, make_batches
from .errors import CEMError, ConfigError, DataError, KnowledgeError
from .evalsuite import (evaluate, fingerprint, format_ablation_table, format_trigram_report,
                        trigram_report)
from .model import ABLATIONS, ModelConfig, check_ablations
from .objective import FrequencyTable
from .pipeline import build_experiment, build_model, run_ablation
from .trainer import TrainConfig, load_checkpoint, train

logger = logging.getLogger("cem")

COMMANDS = ("prepare-data", "precompute-knowledge", "train", "evaluate", "generate", "ablate", "synth-data")


@dataclass
class RunConfig:
    # paths
    data_dir: str = "data"
    input: str = ""
    output: str = ""
    out: str = "run"
    checkpoint: str = ""
    embedding_file: str = ""
    # knowledge
    knowledge_cache: str = ""
    knowledge_url: str = ""
    fallback: str = "error"
    neutral: str = knowledge.DEFAULT_NEUTRAL
    knowledge_timeout: float = 10.0
    knowledge_retries: int = 2
    max_in_flight: int = 4
    # data
    min_freq: int = 1
    max_context_tokens: int = corpus.DEFAULT_MAX_CONTEXT_TOKENS
    max_knowledge_tokens: int = knowledge.DEFAULT_MAX_KNOWLEDGE_TOKENS
    n_dialogues: int = 200
    n_emotions: int = 8
    # model
    d_model: int = 300
    layers: int = 1
    heads: int = 2
    ffn_dim: int = 0
    dropout: float = 0.1
    max_decode_steps: int = 30
    ablation: Tuple[str, ...] = ()
    # training
    seed: int = 0
    batch_size: int = 16
    warmup: int = 8000
    lr_cap: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    max_epochs: int = 30
    max_steps: int = 0
    patience: int = 3
    grad_clip: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.5
    # evaluation
    eval_batch_size: int = 1
    top_k_trigrams: int = 10
    ablate_variants: Tuple[str, ...] = ("full", "no-aff", "no-cog", "no-div", "vanilla", "multitask")

    def __post_init__(self):
        if self.fallback not in ("error", "neutral"):
            raise ConfigError(f"fallback: expected error|neutral, got {self.fallback!r}")
        self.ablation = check_ablations(self.ablation)
        for v in self.ablate_variants:
            if v != "full":
                check_ablations((v,))

    @property
    def cache_path(self) -> Path:
        return Path(self.knowledge_cache) if self.knowledge_cache else Path(self.data_dir) / "knowledge.jsonl"

    def model_config(self, vocab_size, ablations=None) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_layers=self.layers,
                           n_heads=self.heads, ffn_dim=self.ffn_dim or None,
                           n_emotions=len(corpus.EMOTIONS), dropout=self.dropout,
                           max_decode_steps=self.max_decode_steps,
                           ablations=self.ablation if ablations is None else ablations)

    def train_config(self) -> TrainConfig:
        keys = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in keys if hasattr(self, k)})

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


def _field_types():
    return {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, value):
    t = _field_types()[key]
    try:
        if t is int:
            return int(value)
        if t is float:
            return float(value)
        if t == Tuple[str, ...]:
            if isinstance(value, (list, tuple)):
                return tuple(value)
            return tuple(v.strip() for v in str(value).split(",") if v.strip())
        return str(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {t.__name__}") from None


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    types = _field_types()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def parse_config(path: Optional[str], overrides: dict) -> RunConfig:
    """Resolve defaults < CEM_KNOWLEDGE_URL < config file < flags."""
    values = {}
    env_url = os.environ.get("CEM_KNOWLEDGE_URL")
    if env_url:
        values["knowledge_url"] = env_url
    if path:
        values.update(read_config_file(path))
    types = _field_types()
    for key, value in overrides.items():
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value)
    return RunConfig(**values)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cem", description="Commonsense-aware empathetic response generation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value config file")
    defaults = RunConfig()
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if f.name == "ablation":
            p.add_argument(flag, action="append", choices=ABLATIONS, default=argparse.SUPPRESS,
                           help="ablation variant; repeatable")
        else:
            if isinstance(default, tuple):
                default = ",".join(default)
            p.add_argument(flag, dest=f.name, default=argparse.SUPPRESS, metavar=f.name.upper(),
                           help=f"(default: {default})")
    return p


# ---------------------------------------------------------------------------
# commands

def _load_split(cfg, split, required=True) -> List[Dialogue]:
    path = Path(cfg.data_dir) / f"{split}.jsonl"
    if not path.exists():
        if required:
            raise DataError(f"missing split file {path}")
        return []
    return corpus.load_dialogues(cfg.data_dir, split)


def _remote(cfg):
    if not cfg.knowledge_url:
        return None
    return knowledge.RemoteProvider(cfg.knowledge_url, cfg.knowledge_timeout, cfg.knowledge_retries)


def _provider(cfg):
    path = cfg.cache_path
    if path.exists():
        bundles = knowledge.read_cache(path)
    elif cfg.fallback == "neutral" or cfg.knowledge_url:
        bundles = {}
    else:
        raise KnowledgeError(f"knowledge cache {path} not found and fallback=error")
    return knowledge.CacheProvider(bundles, cfg.fallback, cfg.neutral, remote=_remote(cfg))


def cmd_synth_data(cfg: RunConfig):
    dialogues = corpus.generate_synthetic_corpus(cfg.n_dialogues, cfg.n_emotions, cfg.seed)
    out = Path(cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, ds in corpus.split_dialogues(dialogues).items():
        corpus.write_dialogues(ds, out / f"{split}.jsonl")
    n = knowledge.write_cache(knowledge.synthetic_knowledge(dialogues), cfg.cache_path)
    logger.info("wrote %d dialogues and %d knowledge records to %s", len(dialogues), n, out)


def cmd_prepare_data(cfg: RunConfig):
    if not cfg.input:
        raise ConfigError("prepare-data needs --input pointing at the benchmark CSV directory")
    src, out = Path(cfg.input), Path(cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in corpus.SPLITS:
        csv_path = src / f"{split}.csv"
        if not csv_path.exists():
            raise DataError(f"missing {csv_path}")
        n = corpus.write_dialogues(corpus.read_empathetic_dialogues_csv(csv_path), out / f"{split}.jsonl")
        logger.info("%s: %d dialogues", split, n)


def cmd_precompute(cfg: RunConfig):
    dialogues = [d for s in corpus.SPLITS for d in _load_split(cfg, s, required=(s == "train"))]
    path = cfg.cache_path
    existing = knowledge.read_cache(path) if path.exists() else {}
    filled = knowledge.precompute_knowledge(dialogues, existing, _remote(cfg), cfg.fallback, cfg.neutral,
                                            cfg.max_in_flight)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = knowledge.write_cache([filled[k] for k in sorted(filled)], path)
    logger.info("knowledge cache %s holds %d records", path, n)


def _uses_knowledge(cfg, ablations=None):
    return cfg.model_config(10, ablations).use_knowledge


def _data_hash(cfg, splits):
    h = hashlib.sha256()
    for s in splits:
        p = Path(cfg.data_dir) / f"{s}.jsonl"
        if p.exists():
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _read_word_vectors(path, d):
    vectors = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.rstrip().split(" ")
            if len(parts) == d + 1:
                vectors[parts[0]] = [float(x) for x in parts[1:]]
    return vectors


def cmd_train(cfg: RunConfig):
    train_d, valid_d = _load_split(cfg, "train"), _load_split(cfg, "valid")
    provider = _provider(cfg) if _uses_knowledge(cfg) else None
    exp = build_experiment(train_d, valid_d, (), provider, cfg.min_freq, cfg.max_context_tokens,
                           cfg.max_knowledge_tokens)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    exp.vocab.save(out / "vocab.tsv")
    exp.freq.save(out / "frequency.tsv")
    (out / "config.txt").write_text(cfg.to_text())
    model = build_model(cfg.model_config(len(exp.vocab)), cfg.seed)
    if cfg.embedding_file:
        n = model.load_word_vectors(_read_word_vectors(cfg.embedding_file, cfg.d_model), exp.vocab)
        logger.info("initialised %d embedding rows from %s", n, cfg.embedding_file)
    with open(out / "train_log.jsonl", "w") as log:
        report = train(model, exp.train, exp.valid or exp.train, exp.freq, cfg.train_config(), out_dir=out,
                       vocab_hash=exp.vocab.hash, log_file=log)
    (out / "train_report.json").write_text(report.to_json() + "\n")
    logger.info("training stopped (%s) after %d steps; best valid %.4f", report.stop_reason, report.steps,
                report.best_valid)


def _load_run(cfg):
    out = Path(cfg.out)
    vocab_path = out / "vocab.tsv"
    if not vocab_path.exists():
        raise DataError(f"no vocabulary at {vocab_path}; run `cem train` first")
    vocab = Vocabulary.load(vocab_path)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "best.pt"
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    model, meta = load_checkpoint(ckpt, vocab.hash)
    model.eval()
    return vocab, model, meta


def cmd_evaluate(cfg: RunConfig):
    vocab, model, meta = _load_run(cfg)
    test_d = _load_split(cfg, "test")
    provider = _provider(cfg) if model.config.use_knowledge else None
    examples = knowledge.build_examples(test_d, vocab, provider, cfg.max_context_tokens,
                                        cfg.max_knowledge_tokens)
    saved = Path(cfg.out) / "config.txt"
    train_cfg = parse_config(str(saved), {}) if saved.exists() else cfg
    fp = fingerprint(model.config.to_dict(), train_cfg.train_config().__dict__, vocab.hash,
                     _data_hash(cfg, corpus.SPLITS), meta.get("step", 0))
    report, responses = evaluate(model, make_batches(examples, cfg.eval_batch_size), vocab, fp,
                                 cfg.max_decode_steps)
    out = Path(cfg.out)
    (out / "eval_report.json").write_text(report.to_json())
    (out / "responses.txt").write_text("".join(" ".join(r) + "\n" for r in responses))
    (out / "trigrams.tsv").write_text(format_trigram_report(trigram_report(responses, top_k=cfg.top_k_trigrams)))
    logger.info("PPL %.2f  Dist-1 %.2f  Dist-2 %.2f  Acc %s", report.ppl, report.dist_1, report.dist_2,
                report.emotion_accuracy)


def cmd_generate(cfg: RunConfig):
    vocab, model, _ = _load_run(cfg)
    if cfg.input:
        text = Path(cfg.input).read_text(encoding="utf-8")
    else:
        text = sys.stdin.read()
    dialogues = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.strip():
            try:
                dialogues.append(Dialogue.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"input line {lineno}: malformed record ({e})") from None
    provider = _provider(cfg) if model.config.use_knowledge else None
    examples = []
    for d in dialogues:
        n = len(d.utterances)
        kn = {}
        if provider is not None:
            key, last = (d.conv_id, n - 1), d.utterances[-1][1]
            for r in knowledge.RELATIONS:
                kn[r.value] = knowledge.assemble_relation_sequence(
                    knowledge.query_provider(last, r, provider, key), r, vocab, cfg.max_knowledge_tokens)
        examples.append(corpus.Example(corpus.encode_context(d, n, vocab, cfg.max_context_tokens), [], kn,
                                       (d.conv_id, n - 1)))
    lines = []
    for ex in examples:
        ids = model.generate(corpus.collate([ex]), cfg.max_decode_steps)[0]
        lines.append(" ".join(vocab.decode(ids)) + "\n")
    if cfg.output:
        Path(cfg.output).write_text("".join(lines), encoding="utf-8")
    else:
        sys.stdout.write("".join(lines))


def cmd_ablate(cfg: RunConfig):
    train_d, valid_d, test_d = (_load_split(cfg, s) for s in corpus.SPLITS)
    provider = _provider(cfg)
    exp = build_experiment(train_d, valid_d, test_d, provider, cfg.min_freq, cfg.max_context_tokens,
                           cfg.max_knowledge_tokens)
    m = cfg.model_config(len(exp.vocab), ())
    model_kwargs = dict(d_model=m.d_model, n_layers=m.n_layers, n_heads=m.n_heads, ffn_dim=m.ffn_dim,
                        n_emotions=m.n_emotions, dropout=m.dropout, max_decode_steps=m.max_decode_steps)
    table = run_ablation(exp, model_kwargs, cfg.train_config(), cfg.ablate_variants, cfg.eval_batch_size,
                         on_report=lambda name, rep: logger.info("%s: %s", name, rep))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    (out / "ablation.tsv").write_text(format_ablation_table(table))


HANDLERS = {
    "synth-data": cmd_synth_data,
    "prepare-data": cmd_prepare_data,
    "precompute-knowledge": cmd_precompute,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "generate": cmd_generate,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    try:
        cfg = parse_config(config_path, args)
        logger.info("resolved config:\n%s", cfg.to_text().rstrip())
        HANDLERS[command](cfg)
    except CEMError as e:
        print(f"error[{e.category}]: {' '.join(str(e).split())}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
