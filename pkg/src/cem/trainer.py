"""Adam training under the combined objective with a warmup schedule and early stopping."""
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from .corpus import Example, make_batches
from .errors import ConfigError, NumericError
from .model import CEM, ModelConfig
from .objective import (FrequencyTable, LossSet, diversity_loss, emotion_loss_from_logits, nll_loss,
                        total_loss)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    lr_cap: float = 1e-4
    warmup: int = 8000
    batch_size: int = 16
    max_epochs: int = 100
    max_steps: int = 0          # 0 = unlimited
    patience: int = 3
    seed: int = 0
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.5
    grad_clip: float = 1.0      # 0 disables clipping

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Flat ``key=value`` lines; ``#`` starts a comment. Unknown keys are errors."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                kwargs[key] = (int if types[key] in (int, "int") else float)(value)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
        return cls(**kwargs)


def learning_rate_at(step: int, d_model: int, warmup: int, cap: float = math.inf) -> float:
    """Inverse-square-root schedule with linear warmup, clipped at ``cap``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return min(cap, d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5))


def effective_gammas(model_config: ModelConfig, cfg: TrainConfig):
    g2 = cfg.gamma2 if model_config.use_emotion else 0.0
    g3 = cfg.gamma3 if model_config.use_diversity else 0.0
    return (cfg.gamma1, g2, g3)


def compute_losses(model: CEM, batch, weights: Optional[torch.Tensor], gammas):
    """Forward one batch; returns (total tensor, {nll, emo, div} tensors, model output)."""
    out = model(batch)
    labels, mask = batch.labels, batch.label_mask
    l_nll = nll_loss(out.logits, labels, mask)
    zero = l_nll.new_zeros(())
    l_emo = zero if out.emo_logits is None else emotion_loss_from_logits(out.emo_logits, batch.emotion_ids)
    l_div = zero if weights is None else diversity_loss(out.logits, labels, weights.to(out.logits.dtype), mask)
    return total_loss(l_nll, l_emo, l_div, *gammas), {"nll": l_nll, "emo": l_emo, "div": l_div}, out


@torch.no_grad()
def evaluate_losses(model: CEM, batches, weights, gammas):
    """Token-weighted validation losses and emotion accuracy over a list of batches."""
    was_training = model.training
    model.eval()
    sums = {"nll": 0.0, "emo": 0.0, "div": 0.0}
    n_tok = n_ex = correct = 0
    for batch in batches:
        _, parts, out = compute_losses(model, batch, weights, gammas)
        t = int(batch.label_mask.sum())
        sums["nll"] += float(parts["nll"]) * t
        sums["div"] += float(parts["div"]) * t
        sums["emo"] += float(parts["emo"]) * batch.size
        n_tok += t
        n_ex += batch.size
        if out.emo_logits is not None:
            correct += int((out.emo_logits.argmax(-1) == batch.emotion_ids).sum())
    model.train(was_training)
    nll, div, emo = sums["nll"] / n_tok, sums["div"] / n_tok, sums["emo"] / n_ex
    acc = correct / n_ex if model.config.use_emotion else None
    return LossSet(nll, emo, div, tuple(gammas), total_loss(nll, emo, div, *gammas)), acc


@dataclass
class TrainReport:
    epochs: List[dict] = field(default_factory=list)
    lr_trace: List[float] = field(default_factory=list)
    best_valid: float = math.inf
    best_epoch: int = 0
    best_checkpoint: Optional[str] = None
    stop_reason: str = ""
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def save_checkpoint(model: CEM, optimizer, path, vocab_hash: str, step: int = 0):
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "vocab_hash": vocab_hash,
        "state_dict": model.state_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "step": step,
    }, path)


def load_checkpoint(path, vocab_hash: Optional[str] = None):
    """Returns (model, checkpoint dict). Refuses version or vocabulary-hash mismatches."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {ckpt.get('format_version')!r}")
    if vocab_hash is not None and ckpt["vocab_hash"] != vocab_hash:
        raise ConfigError(f"{path}: vocabulary hash mismatch")
    model = CEM(ModelConfig.from_dict(ckpt["model_config"]))
    model.load_state_dict(ckpt["state_dict"])
    return model, ckpt


def make_optimizer(model: CEM, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=0.0, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def train(model: CEM, train_examples: Sequence[Example], valid_examples: Sequence[Example],
          freq: Optional[FrequencyTable], cfg: TrainConfig, out_dir=None, vocab_hash: str = "",
          resume: Optional[dict] = None, log_file=None) -> TrainReport:
    """Train until early stopping, ``max_epochs`` or ``max_steps``; the best weights are restored at the end."""
    torch.manual_seed(cfg.seed)
    gammas = effective_gammas(model.config, cfg)
    weights = freq.weight_tensor() if freq is not None else None
    optimizer = make_optimizer(model, cfg)
    step = 0
    if resume is not None:
        if resume.get("optimizer"):
            optimizer.load_state_dict(resume["optimizer"])
        step = int(resume.get("step", 0))
    valid_batches = make_batches(valid_examples, cfg.batch_size)
    report = TrainReport()
    best_state = None
    bad_rounds = 0
    d = model.config.d_model
    out_dir = Path(out_dir) if out_dir is not None else None

    model.train()
    for epoch in range(1, cfg.max_epochs + 1):
        sums = {"nll": 0.0, "emo": 0.0, "div": 0.0}
        n_batches = 0
        hit_max = False
        for batch in make_batches(train_examples, cfg.batch_size, shuffle_seed=cfg.seed * 100003 + epoch):
            step += 1
            lr = learning_rate_at(step, d, cfg.warmup, cfg.lr_cap)
            for g in optimizer.param_groups:
                g["lr"] = lr
            loss, parts, _ = compute_losses(model, batch, weights, gammas)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step} (epoch {epoch}): "
                                   + ", ".join(f"{k}={v.item()}" for k, v in parts.items()))
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            report.lr_trace.append(lr)
            for k in sums:
                sums[k] += parts[k].item()
            n_batches += 1
            if cfg.max_steps and step >= cfg.max_steps:
                hit_max = True
                break

        train_ls = {k: v / n_batches for k, v in sums.items()}
        train_ls["total"] = total_loss(train_ls["nll"], train_ls["emo"], train_ls["div"], *gammas)
        valid, acc = evaluate_losses(model, valid_batches, weights, gammas)
        record = {"epoch": epoch, "step": step, "lr": report.lr_trace[-1] if report.lr_trace else 0.0,
                  **valid.as_dict(), "emo_acc": acc,
                  "train": {f"L_{k}" if k != "total" else k: v for k, v in train_ls.items()}}
        report.epochs.append(record)
        line = json.dumps({k: record[k] for k in ("epoch", "step", "lr", "L_nll", "L_emo", "L_div",
                                                  "total", "emo_acc")}, sort_keys=True)
        logger.info(line)
        if log_file is not None:
            log_file.write(line + "\n")

        if valid.total < report.best_valid:
            report.best_valid = valid.total
            report.best_epoch = epoch
            bad_rounds = 0
            best_state = copy.deepcopy(model.state_dict())
            if out_dir is not None:
                save_checkpoint(model, optimizer, out_dir / "best.pt", vocab_hash, step)
                report.best_checkpoint = "best.pt"
        else:
            bad_rounds += 1
            if bad_rounds >= cfg.patience:
                report.stop_reason = "early_stopping"
                break
        if hit_max:
            report.stop_reason = "max_steps"
            break
    else:
        report.stop_reason = "max_epochs"

    report.steps = step
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return report
