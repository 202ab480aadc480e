"""The commonsense-aware empathetic encoder-decoder.

Shapes use B for batch, L for context length, l for a relation sequence length,
T for target length, d for the hidden size and V for the vocabulary size.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import EOS_ID, PAD_ID, SOS_ID, Batch
from .errors import ConfigError
from .knowledge import COGNITIVE, RELATIONS, Relation

ABLATIONS = ("no-aff", "no-cog", "no-div", "vanilla", "multitask")


def check_ablations(ablations: Sequence[str]) -> Tuple[str, ...]:
    abl = tuple(sorted(set(ablations)))
    for a in abl:
        if a not in ABLATIONS:
            raise ConfigError(f"unknown ablation {a!r}; choose from {ABLATIONS}")
    if "no-aff" in abl and "no-cog" in abl:
        raise ConfigError("ablations no-aff and no-cog cannot be combined: no knowledge path would remain")
    baselines = {"vanilla", "multitask"} & set(abl)
    if baselines and len(abl) > 1:
        raise ConfigError(f"ablation {sorted(baselines)[0]!r} is a standalone baseline and excludes {abl}")
    return abl


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 300
    n_layers: int = 1
    n_heads: int = 2
    ffn_dim: Optional[int] = None
    n_emotions: int = 32
    dropout: float = 0.1
    max_decode_steps: int = 30
    max_positions: int = 512
    ablations: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d_model
        self.ablations = check_ablations(self.ablations)
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_emotions < 2:
            raise ConfigError("n_emotions must be >= 2")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")

    @property
    def use_knowledge(self) -> bool:
        return not ({"vanilla", "multitask"} & set(self.ablations))

    @property
    def use_aff(self) -> bool:
        return self.use_knowledge and "no-aff" not in self.ablations

    @property
    def use_cog(self) -> bool:
        return self.use_knowledge and "no-cog" not in self.ablations

    @property
    def use_emotion(self) -> bool:
        return "vanilla" not in self.ablations

    @property
    def use_diversity(self) -> bool:
        return not ({"no-div", "vanilla", "multitask"} & set(self.ablations))

    @property
    def refine_blocks(self) -> int:
        return int(self.use_aff) + len(COGNITIVE) * int(self.use_cog)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        d["ablations"] = tuple(d.get("ablations", ()))
        return cls(**d)


def sinusoid_table(n_positions: int, d: int) -> torch.Tensor:
    pos = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, d, 2, dtype=torch.float64)
    div = torch.exp(-math.log(10000.0) * i / d)
    table = torch.zeros(n_positions, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return table.float()


class MultiHeadAttention(nn.Module):
    def __init__(self, d, n_heads, dropout=0.0):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        B, n, _ = x.shape
        return x.view(B, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query, memory, key_mask=None, causal=False):
        """key_mask: (B, Lk) bool, True on attendable positions. Returns (out, weights (B, H, Lq, Lk))."""
        q, k, v = self._split(self.q(query)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            Lq, Lk = scores.shape[-2:]
            future = torch.ones(Lq, Lk, dtype=torch.bool, device=scores.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = self.dropout(weights) @ v
        B, _, Lq, _ = out.shape
        out = out.transpose(1, 2).reshape(B, Lq, -1)
        return self.o(out), weights


class FeedForward(nn.Module):
    def __init__(self, d, ffn_dim, dropout=0.0):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, ffn_dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn_dim, d))

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, d, n_heads, ffn_dim, dropout):
        super().__init__()
        self.attn = MultiHeadAttention(d, n_heads, dropout)
        self.ffn = FeedForward(d, ffn_dim, dropout)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, mask)[0])
        return x + self.drop(self.ffn(self.norm2(x)))


class Encoder(nn.Module):
    """Pre-norm transformer encoder; projects ``input_dim`` to ``d`` first when they differ."""

    def __init__(self, input_dim, d, n_layers, n_heads, ffn_dim, dropout):
        super().__init__()
        self.proj = nn.Linear(input_dim, d, bias=False) if input_dim != d else None
        self.layers = nn.ModuleList(EncoderLayer(d, n_heads, ffn_dim, dropout) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        if self.proj is not None:
            x = self.proj(x)
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)


class DecoderLayer(nn.Module):
    def __init__(self, d, n_heads, ffn_dim, dropout):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, n_heads, dropout)
        self.cross_attn = MultiHeadAttention(d, n_heads, dropout)
        self.ffn = FeedForward(d, ffn_dim, dropout)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, y, memory, memory_mask, target_mask=None):
        h = self.norm1(y)
        y = y + self.drop(self.self_attn(h, h, target_mask, causal=True)[0])
        out, cross = self.cross_attn(self.norm2(y), memory, memory_mask)
        y = y + self.drop(out)
        return y + self.drop(self.ffn(self.norm3(y))), cross


class Decoder(nn.Module):
    def __init__(self, d, n_layers, n_heads, ffn_dim, dropout):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(d, n_heads, ffn_dim, dropout) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, y, memory, memory_mask, target_mask=None):
        y = self.drop(y)
        cross = []
        for layer in self.layers:
            y, w = layer(y, memory, memory_mask, target_mask)
            cross.append(w)
        return self.norm(y), cross


def _pad_cat(tensors):
    width = max(t.size(1) for t in tensors)
    return torch.cat([F.pad(t.long(), (0, width - t.size(1))) for t in tensors], dim=0)


@dataclass
class Encoded:
    """Encoder-side results for one batch."""
    memory: torch.Tensor                 # (B, L, d), what the decoder cross-attends to
    memory_mask: torch.Tensor            # (B, L)
    emo_logits: Optional[torch.Tensor]   # (B, q)
    parts: Dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass
class ModelOutput:
    logits: torch.Tensor                 # (B, T, V)
    emo_logits: Optional[torch.Tensor]
    fused: torch.Tensor
    parts: Dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def p_emo(self) -> Optional[torch.Tensor]:
        return None if self.emo_logits is None else torch.softmax(self.emo_logits, dim=-1)


class CEM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        d = c.d_model
        enc = lambda input_dim: Encoder(input_dim, d, c.n_layers, c.n_heads, c.ffn_dim, c.dropout)

        self.embedding = nn.Embedding(c.vocab_size, d, padding_idx=PAD_ID)
        self.state_embedding = nn.Embedding(3, d)
        self.register_buffer("positions", sinusoid_table(c.max_positions, d), persistent=False)

        self.ctx_encoder = enc(d)
        if c.use_aff:
            self.aff_encoder = enc(d)
            self.ctx_aff_encoder = enc(2 * d)
        if c.use_cog:
            # one cognitive encoder and one cognition-refined encoder, shared by all four relations
            self.cog_encoder = enc(d)
            self.ctx_cog_encoder = enc(2 * d)
        if c.use_knowledge:
            width = c.refine_blocks * d
            if c.use_cog:
                self.selector = nn.Sequential(nn.Linear(width, d), nn.ReLU(), nn.Linear(d, d))
            else:
                self.selector = nn.Linear(width, d)
        if c.use_emotion:
            self.emotion_head = nn.Linear(d, c.n_emotions, bias=False)
        self.decoder = Decoder(d, c.n_layers, c.n_heads, c.ffn_dim, c.dropout)
        self.reset_parameters()

    def reset_parameters(self):
        d = self.config.d_model
        bound = 1.0 / math.sqrt(d)
        with torch.no_grad():
            nn.init.uniform_(self.embedding.weight, -bound, bound)
            self.embedding.weight[PAD_ID].zero_()
            nn.init.uniform_(self.state_embedding.weight, -bound, bound)

    def load_word_vectors(self, vectors: Dict[str, Sequence[float]], vocab) -> int:
        """Overwrite embedding rows for tokens found in ``vectors``. Returns rows set."""
        n = 0
        with torch.no_grad():
            for tok, vec in vectors.items():
                if tok in vocab and vocab.id(tok) != PAD_ID:
                    if len(vec) != self.config.d_model:
                        raise ConfigError(f"word vector for {tok!r} has dim {len(vec)}, "
                                          f"expected {self.config.d_model}")
                    self.embedding.weight[vocab.id(tok)] = torch.as_tensor(vec, dtype=self.embedding.weight.dtype)
                    n += 1
        return n

    # ---- pieces -------------------------------------------------------------

    def embed_sequence(self, token_ids, state_ids=None):
        """word + position (+ dialogue state) embeddings, (B, L) -> (B, L, d)."""
        L = token_ids.size(-1)
        if L > self.config.max_positions:
            raise ValueError(f"sequence length {L} exceeds the positional table ({self.config.max_positions})")
        if token_ids.numel() and (token_ids.min() < 0 or token_ids.max() >= self.config.vocab_size):
            raise IndexError("token id out of vocabulary range")
        x = self.embedding(token_ids) + self.positions[:L]
        if state_ids is not None:
            if state_ids.numel() and (state_ids.min() < 0 or state_ids.max() > 2):
                raise IndexError("dialogue state id out of range")
            x = x + self.state_embedding(state_ids)
        return x

    def encode_context_seq(self, token_ids, state_ids, mask):
        return self.ctx_encoder(self.embed_sequence(token_ids, state_ids), mask)

    def encode_commonsense(self, relation, token_ids, mask):
        """Returns (hidden (B, l, d), pooled (B, d)).

        The affective sequence is pooled by a masked mean; cognitive sequences
        by their leading [CLS] state.
        """
        relation = Relation.parse(relation)
        x = self.embed_sequence(token_ids)
        if relation.is_cognitive:
            if not self.config.use_cog:
                raise ConfigError("cognitive path is disabled in this configuration")
            H = self.cog_encoder(x, mask)
            return H, H[:, 0]
        if not self.config.use_aff:
            raise ConfigError("affective path is disabled in this configuration")
        H = self.aff_encoder(x, mask)
        m = mask.unsqueeze(-1).to(H.dtype)
        return H, (H * m).sum(1) / m.sum(1)

    def refine_context(self, h_ctx, pooled, relation, mask):
        """Concatenate ``pooled`` onto every context row, then run the group's refining encoder.

        Returns (U (B, L, 2d), refined (B, L, d)).
        """
        relation = Relation.parse(relation)
        if pooled.size(-1) != h_ctx.size(-1):
            raise ValueError(f"pooled dim {pooled.size(-1)} != context dim {h_ctx.size(-1)}")
        U = torch.cat([h_ctx, pooled.unsqueeze(1).expand(-1, h_ctx.size(1), -1)], dim=-1)
        encoder = self.ctx_cog_encoder if relation.is_cognitive else self.ctx_aff_encoder
        return U, encoder(U, mask)

    def classify_emotion(self, h):
        """Emotion logits from a (B, d) summary vector; softmax gives P_emo."""
        return self.emotion_head(h)

    def select_knowledge(self, refined: List[torch.Tensor]):
        """Gate the concatenated refined contexts with sigmoid(x) * x and mix them down to d.

        Returns (H_refine (B, L, k*d), fused (B, L, d)).
        """
        if len({r.shape[:2] for r in refined}) != 1:
            raise ValueError("refined contexts must share batch and length")
        H = torch.cat(refined, dim=-1)
        return H, self.selector(torch.sigmoid(H) * H)

    # ---- full passes --------------------------------------------------------

    def encode(self, batch: Batch) -> Encoded:
        c = self.config
        mask = batch.context_mask
        h_ctx = self.encode_context_seq(batch.context_ids, batch.context_states, mask)
        parts = {"H_CTX": h_ctx}
        if not c.use_knowledge:
            emo = self.classify_emotion(h_ctx[:, 0]) if c.use_emotion else None
            return Encoded(h_ctx, mask, emo, parts)

        for r in RELATIONS:
            if r.value not in batch.knowledge:
                raise ValueError(f"batch lacks knowledge for relation {r.value}")
        refined = []
        if c.use_aff:
            r = Relation.xReact
            H, h = self.encode_commonsense(r, batch.knowledge[r.value], batch.knowledge_mask[r.value])
            U, h_aff = self.refine_context(h_ctx, h, r, mask)
            parts.update({"H_xReact": H, "h_xReact": h, "U_xReact": U, "H_Aff": h_aff})
            refined.append(h_aff)
        if c.use_cog:
            # the cognitive encoders are shared, so the four relations run as one stacked batch
            B, n = h_ctx.size(0), len(COGNITIVE)
            ids = _pad_cat([batch.knowledge[r.value] for r in COGNITIVE])
            kmask = _pad_cat([batch.knowledge_mask[r.value] for r in COGNITIVE]).bool()
            H, h = self.encode_commonsense(COGNITIVE[0], ids, kmask)
            U, h_cog = self.refine_context(h_ctx.repeat(n, 1, 1), h, COGNITIVE[0], mask.repeat(n, 1))
            for i, r in enumerate(COGNITIVE):
                sl = slice(i * B, (i + 1) * B)
                l_r = batch.knowledge[r.value].size(1)
                parts.update({f"H_{r.value}": H[sl, :l_r], f"h_{r.value}": h[sl], f"U_{r.value}": U[sl],
                              f"H_Cog_{r.value}": h_cog[sl]})
                refined.append(h_cog[sl])
        h_refine, fused = self.select_knowledge(refined)
        parts.update({"H_Refine": h_refine, "H_fused": fused})
        emo = None
        if c.use_emotion:
            summary = parts["H_Aff"][:, 0] if c.use_aff else h_ctx[:, 0]
            emo = self.classify_emotion(summary)
        return Encoded(fused, mask, emo, parts)

    def decode(self, decoder_input, memory, memory_mask, return_attention=False):
        """Teacher-forced decoder pass: (B, T) ids -> (B, T, V) logits."""
        if decoder_input.size(1) > self.config.max_positions:
            raise ValueError("decoder prefix exceeds the positional table")
        y = self.embed_sequence(decoder_input)
        h, cross = self.decoder(y, memory, memory_mask, decoder_input != PAD_ID)
        logits = F.linear(h, self.embedding.weight)
        return (logits, cross) if return_attention else logits

    def decode_step(self, prefix, memory, memory_mask):
        """Logits (B, V) for the token following ``prefix`` (which starts with [SOS])."""
        if (prefix[:, 0] != SOS_ID).any():
            raise ValueError("decoder prefix must start with [SOS]")
        return self.decode(prefix, memory, memory_mask)[:, -1]

    def forward(self, batch: Batch) -> ModelOutput:
        enc = self.encode(batch)
        logits = self.decode(batch.decoder_input, enc.memory, enc.memory_mask)
        return ModelOutput(logits, enc.emo_logits, enc.memory, enc.parts)

    @torch.no_grad()
    def generate(self, batch: Batch, max_steps: Optional[int] = None) -> List[List[int]]:
        """Greedy decoding from [SOS]; stops at [EOS] or after ``max_steps`` tokens."""
        max_steps = self.config.max_decode_steps if max_steps is None else max_steps
        enc = self.encode(batch)
        B = batch.size
        prefix = torch.full((B, 1), SOS_ID, dtype=torch.long, device=enc.memory.device)
        done = torch.zeros(B, dtype=torch.bool, device=enc.memory.device)
        out: List[List[int]] = [[] for _ in range(B)]
        for _ in range(max_steps):
            nxt = self.decode_step(prefix, enc.memory, enc.memory_mask).argmax(-1)
            for b in range(B):
                if not done[b]:
                    if int(nxt[b]) == EOS_ID:
                        done[b] = True
                    else:
                        out[b].append(int(nxt[b]))
            if done.all():
                break
            prefix = torch.cat([prefix, nxt.unsqueeze(1)], dim=1)
        return out
