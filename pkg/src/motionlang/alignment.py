"""Dual-transformer text-motion alignment model.

A motion path (learnable query tokens with cross-attention into frozen
tokenizer latents) and a text path share the same self-attention layers.
Four training objectives align the two modalities: contrastive similarity,
binary match classification, motion-conditioned text generation, and
text-conditioned motion-token generation. Each objective uses its own
attention mask mode to control cross-modal visibility.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from enum import Enum

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Dataset, FeatureStats, Vocab, normalize
from .checkpoint import Checkpoint, state_dict_arrays, load_state_dict_arrays
from .vqvae import MotionTokenizer, TrainingDivergenceError


class AttentionMaskMode(Enum):
    UNIMODAL = "unimodal"
    BIDIRECTIONAL = "bidirectional"
    CAUSAL_TEXT = "causal_text"
    CAUSAL_MOTION = "causal_motion"


@dataclass
class LampConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 128
    proj_dim: int = 64
    num_queries: int = 8
    ffn_mult: int = 2
    temperature_init: float = 0.07
    weight_contrastive: float = 1.0
    weight_matching: float = 1.0
    weight_mgt: float = 1.0
    weight_tgm: float = 1.0
    max_text_len: int = 24
    max_motion_len: int = 64
    lr: float = 3e-4
    warmup_iters: int = 100
    iterations: int = 1200
    batch_size: int = 16
    window: int = 64
    seed: int = 0
    vocab_size: int = 0
    codebook_size: int = 0
    motion_latent_dim: int = 0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if self.temperature_init <= 0:
            raise ValueError("temperature must be > 0")
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")


# Full-scale-shaped preset; desk tests use the defaults above.
FULL_SCALE_LAMP = dict(layers=12, heads=12, hidden=768, proj_dim=256, num_queries=49)


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_head = hidden // heads
        self.q_proj = nn.Linear(hidden, hidden)
        self.k_proj = nn.Linear(hidden, hidden)
        self.v_proj = nn.Linear(hidden, hidden)
        self.out_proj = nn.Linear(hidden, hidden)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        """mask: broadcastable boolean (B, 1, Lq, Lk), True = may attend."""
        B, Lq, _ = q_in.shape
        Lk = kv_in.shape[1]
        q = self.q_proj(q_in).view(B, Lq, self.heads, self.d_head).transpose(1, 2)
        k = self.k_proj(kv_in).view(B, Lk, self.heads, self.d_head).transpose(1, 2)
        v = self.v_proj(kv_in).view(B, Lk, self.heads, self.d_head).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        out = out.transpose(1, 2).reshape(B, Lq, self.heads * self.d_head)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, hidden: int, mult: int):
        super().__init__()
        self.fc1 = nn.Linear(hidden, hidden * mult)
        self.fc2 = nn.Linear(hidden * mult, hidden)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


SEG_QUERY, SEG_TEXT, SEG_MOTION = 0, 1, 2


class AlignmentLayer(nn.Module):
    """Shared self-attention; cross-attention and query-side FFN on query/motion
    positions, a separate FFN on text positions."""

    def __init__(self, cfg: LampConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.hidden, cfg.heads)
        self.cross_attn = MultiHeadAttention(cfg.hidden, cfg.heads)
        self.ln_self = nn.LayerNorm(cfg.hidden)
        self.ln_cross = nn.LayerNorm(cfg.hidden)
        self.ln_ffn = nn.LayerNorm(cfg.hidden)
        self.ffn_q = FeedForward(cfg.hidden, cfg.ffn_mult)
        self.ffn_t = FeedForward(cfg.hidden, cfg.ffn_mult)

    def forward(self, x: torch.Tensor, seg: torch.Tensor, self_mask: torch.Tensor,
                cross_kv: torch.Tensor | None, cross_mask: torch.Tensor | None) -> torch.Tensor:
        h = self.ln_self(x)
        x = x + self.self_attn(h, h, self_mask)
        if cross_kv is not None:
            is_q = seg == SEG_QUERY
            if is_q.any():
                q = self.ln_cross(x[:, is_q])
                x = x.clone()
                x[:, is_q] = x[:, is_q] + self.cross_attn(q, cross_kv, cross_mask)
        h = self.ln_ffn(x)
        out_q = self.ffn_q(h)
        out_t = self.ffn_t(h)
        is_text = (seg == SEG_TEXT).view(1, -1, 1)
        return x + torch.where(is_text, out_t, out_q)


class AlignmentModel(nn.Module):
    def __init__(self, cfg: LampConfig):
        super().__init__()
        if cfg.vocab_size < 5 or cfg.codebook_size < 2 or cfg.motion_latent_dim < 1:
            raise ValueError("vocab_size, codebook_size, and motion_latent_dim must be set")
        self.cfg = cfg
        h = cfg.hidden
        self.query_tokens = nn.Parameter(torch.empty(cfg.num_queries, h))
        self.word_emb = nn.Embedding(cfg.vocab_size, h)
        self.text_pos = nn.Parameter(torch.empty(cfg.max_text_len + 1, h))
        # frozen-encoder latents arrive at an arbitrary scale; normalize first
        self.motion_ln = nn.LayerNorm(cfg.motion_latent_dim)
        self.motion_in = nn.Linear(cfg.motion_latent_dim, h)
        self.kv_pos = nn.Parameter(torch.empty(cfg.max_motion_len, h))
        self.code_emb = nn.Embedding(cfg.codebook_size, h)
        self.start_emb = nn.Parameter(torch.empty(h))
        self.motion_pos = nn.Parameter(torch.empty(cfg.max_motion_len, h))
        self.layers = nn.ModuleList(AlignmentLayer(cfg) for _ in range(cfg.layers))
        self.ln_final = nn.LayerNorm(h)
        self.proj_m = nn.Linear(h, cfg.proj_dim)
        self.proj_t = nn.Linear(h, cfg.proj_dim)
        self.log_tau = nn.Parameter(torch.tensor(float(math.log(cfg.temperature_init))))
        self.match_head = nn.Linear(h, 1)
        self.lm_head = nn.Linear(h, cfg.vocab_size)
        self.motion_head = nn.Linear(h, cfg.codebook_size)
        self._init_weights()

    def _init_weights(self):
        for p in (self.query_tokens, self.text_pos, self.kv_pos, self.start_emb,
                  self.motion_pos):
            nn.init.normal_(p, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.normal_(m.weight, std=0.02)

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    # ---- input embeddings -------------------------------------------------

    def text_inputs(self, token_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Prepend CLS; returns (embeddings (B, T+1, h), valid mask (B, T+1))."""
        if token_ids.dim() != 2:
            raise ValueError("token_ids must be (B, T)")
        if token_ids.shape[1] == 0:
            raise ValueError("empty token sequence")
        if token_ids.shape[1] + 1 > self.cfg.max_text_len + 1:
            raise ValueError(f"text longer than max_text_len={self.cfg.max_text_len}")
        B = token_ids.shape[0]
        cls = torch.full((B, 1), Vocab.CLS, dtype=torch.long)
        ids = torch.cat([cls, token_ids], dim=1)
        emb = self.word_emb(ids) + self.text_pos[: ids.shape[1]]
        valid = ids != Vocab.PAD
        return emb, valid

    def motion_kv(self, latents: torch.Tensor) -> torch.Tensor:
        """Project frozen-encoder latents for cross-attention keys/values."""
        if latents.shape[1] > self.cfg.max_motion_len:
            raise ValueError("motion latent sequence exceeds max_motion_len")
        return self.motion_in(self.motion_ln(latents)) + self.kv_pos[: latents.shape[1]]

    # ---- mask construction -------------------------------------------------

    @staticmethod
    def _joint_mask(n_q: int, text_valid: torch.Tensor, mode: AttentionMaskMode) -> torch.Tensor:
        """Self-attention mask over [queries; text] positions, (B, 1, L, L)."""
        B, n_t = text_valid.shape
        L = n_q + n_t
        allow = torch.zeros(B, L, L, dtype=torch.bool)
        allow[:, :n_q, :n_q] = True  # queries always see each other
        tv = text_valid.unsqueeze(1)  # (B, 1, n_t)
        if mode is AttentionMaskMode.BIDIRECTIONAL:
            allow[:, :n_q, n_q:] = tv.expand(B, n_q, n_t)
            allow[:, n_q:, :n_q] = True
            allow[:, n_q:, n_q:] = tv.expand(B, n_t, n_t)
        elif mode is AttentionMaskMode.CAUSAL_TEXT:
            causal = torch.tril(torch.ones(n_t, n_t, dtype=torch.bool))
            allow[:, n_q:, :n_q] = True
            allow[:, n_q:, n_q:] = causal & tv
        else:
            raise ValueError(f"unsupported joint mode {mode}")
        return allow.unsqueeze(1)

    # ---- forward paths -----------------------------------------------------

    def encode_text(self, token_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Text-only pass (no motion visibility); returns (states (B, T+1, h), valid)."""
        emb, valid = self.text_inputs(token_ids)
        B, T = valid.shape
        mask = (valid.unsqueeze(1) & valid.unsqueeze(2)).unsqueeze(1)
        # padded rows still need one visible key to keep softmax finite
        eye = torch.eye(T, dtype=torch.bool).view(1, 1, T, T)
        mask = mask | eye
        seg = torch.full((T,), SEG_TEXT, dtype=torch.long)
        x = emb
        for layer in self.layers:
            x = layer(x, seg, mask, None, None)
        return self.ln_final(x), valid

    def encode_queries(self, kv: torch.Tensor, kv_valid: torch.Tensor | None = None) -> torch.Tensor:
        """Query-token pass cross-attending into `kv`; self-attention sees queries only."""
        B = kv.shape[0]
        L = self.cfg.num_queries
        x = self.query_tokens.unsqueeze(0).expand(B, L, -1)
        seg = torch.full((L,), SEG_QUERY, dtype=torch.long)
        self_mask = torch.ones(1, 1, L, L, dtype=torch.bool)
        cross_mask = None
        if kv_valid is not None:
            cross_mask = kv_valid.view(B, 1, 1, -1)
        for layer in self.layers:
            x = layer(x, seg, self_mask, kv, cross_mask)
        return self.ln_final(x)

    def joint_states(self, kv: torch.Tensor, token_ids: torch.Tensor,
                     mode: AttentionMaskMode,
                     kv_valid: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Joint [queries; text] pass; returns (query states, text states, text valid)."""
        emb, valid = self.text_inputs(token_ids)
        B = emb.shape[0]
        L = self.cfg.num_queries
        q = self.query_tokens.unsqueeze(0).expand(B, L, -1)
        x = torch.cat([q, emb], dim=1)
        seg = torch.cat([torch.full((L,), SEG_QUERY, dtype=torch.long),
                         torch.full((emb.shape[1],), SEG_TEXT, dtype=torch.long)])
        self_mask = self._joint_mask(L, valid, mode)
        cross_mask = kv_valid.view(B, 1, 1, -1) if kv_valid is not None else None
        for layer in self.layers:
            x = layer(x, seg, self_mask, kv, cross_mask)
        x = self.ln_final(x)
        return x[:, :L], x[:, L:], valid

    def motion_features(self, latents: torch.Tensor,
                        kv_valid: torch.Tensor | None = None) -> torch.Tensor:
        """L2-normalized per-query features (B, L, p) from frozen-encoder latents."""
        q = self.encode_queries(self.motion_kv(latents), kv_valid)
        return F.normalize(self.proj_m(q), dim=-1)

    def text_features(self, token_ids: torch.Tensor) -> torch.Tensor:
        """L2-normalized text feature (B, p) from the CLS position."""
        states, _ = self.encode_text(token_ids)
        return F.normalize(self.proj_t(states[:, 0]), dim=-1)

    def condition_states(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Query tokens cross-attending into text states (B, L, h); generation conditioning."""
        t_states, t_valid = self.encode_text(token_ids)
        return self.encode_queries(t_states, t_valid)

    def motion_generation_logits(self, token_ids: torch.Tensor,
                                 motion_tokens: torch.Tensor) -> torch.Tensor:
        """Autoregressive code logits (B, n, S): queries conditioned on text form the
        visible prefix; motion positions attend causally."""
        if motion_tokens.max() >= self.cfg.codebook_size or motion_tokens.min() < 0:
            raise ValueError("motion token out of range")
        t_states, t_valid = self.encode_text(token_ids)
        B, n = motion_tokens.shape
        if n > self.cfg.max_motion_len:
            raise ValueError("motion token sequence exceeds max_motion_len")
        L = self.cfg.num_queries
        # shifted inputs: position i consumes token i-1 (start embedding at i=0)
        prev = self.code_emb(motion_tokens[:, :-1])
        start = self.start_emb.view(1, 1, -1).expand(B, 1, -1)
        m_in = torch.cat([start, prev], dim=1) + self.motion_pos[:n]
        q = self.query_tokens.unsqueeze(0).expand(B, L, -1)
        x = torch.cat([q, m_in], dim=1)
        seg = torch.cat([torch.full((L,), SEG_QUERY, dtype=torch.long),
                         torch.full((n,), SEG_MOTION, dtype=torch.long)])
        total = L + n
        allow = torch.zeros(total, total, dtype=torch.bool)
        allow[:L, :L] = True
        allow[L:, :L] = True
        allow[L:, L:] = torch.tril(torch.ones(n, n, dtype=torch.bool))
        self_mask = allow.view(1, 1, total, total)
        cross_mask = t_valid.view(B, 1, 1, -1)
        for layer in self.layers:
            x = layer(x, seg, self_mask, t_states, cross_mask)
        x = self.ln_final(x)
        return self.motion_head(x[:, L:])


# ---- similarity and losses ----------------------------------------------------


def pair_similarity(f_m: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
    """Max over query rows of dot(f_m[l], f_t); accepts (L, p)x(p,) or batched."""
    return (f_m @ f_t.unsqueeze(-1)).squeeze(-1).max(dim=-1).values


def similarity_matrix(f_m: torch.Tensor, f_t: torch.Tensor) -> torch.Tensor:
    """(B, L, p) x (C, p) -> (B, C): per-pair max over query rows."""
    return torch.einsum("blp,cp->blc", f_m, f_t).max(dim=1).values


def contrastive_loss(f_m: torch.Tensor, f_t: torch.Tensor, tau: torch.Tensor | float) -> torch.Tensor:
    """Symmetric InfoNCE over the in-batch similarity matrix."""
    sims = similarity_matrix(f_m, f_t) / tau
    targets = torch.arange(sims.shape[0])
    return 0.5 * (F.cross_entropy(sims, targets) + F.cross_entropy(sims.t(), targets))


def sample_hard_negatives(sims: torch.Tensor, tau: float,
                          generator: torch.Generator) -> torch.Tensor:
    """One in-batch negative index per row, sampled proportional to similarity."""
    B = sims.shape[0]
    logits = (sims / tau).masked_fill(torch.eye(B, dtype=torch.bool), float("-inf"))
    probs = torch.softmax(logits, dim=-1)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


def matching_logits(model: AlignmentModel, kv: torch.Tensor, token_ids: torch.Tensor,
                    kv_valid: torch.Tensor | None = None) -> torch.Tensor:
    """Per-pair match logit: binary head averaged over the query positions."""
    q_states, _, _ = model.joint_states(kv, token_ids, AttentionMaskMode.BIDIRECTIONAL, kv_valid)
    return model.match_head(q_states).squeeze(-1).mean(dim=1)


def matching_loss(model: AlignmentModel, kv: torch.Tensor, token_ids: torch.Tensor,
                  negatives: torch.Tensor | None = None,
                  generator: torch.Generator | None = None,
                  kv_valid: torch.Tensor | None = None) -> torch.Tensor:
    """Binary cross-entropy on positives plus one mined negative per positive."""
    B = kv.shape[0]
    if B < 2:
        raise ValueError("matching needs a batch of at least 2 for negatives")
    if negatives is None:
        with torch.no_grad():
            f_m = F.normalize(model.proj_m(model.encode_queries(kv, kv_valid)), dim=-1)
            states, _ = model.encode_text(token_ids)
            f_t = F.normalize(model.proj_t(states[:, 0]), dim=-1)
            sims = similarity_matrix(f_m, f_t)
        negatives = sample_hard_negatives(sims, float(model.tau), generator or torch.Generator())
    kv_all = torch.cat([kv, kv], dim=0)
    valid_all = torch.cat([kv_valid, kv_valid], dim=0) if kv_valid is not None else None
    ids_all = torch.cat([token_ids, token_ids[negatives]], dim=0)
    logits = matching_logits(model, kv_all, ids_all, valid_all)
    labels = torch.cat([torch.ones(B), torch.zeros(B)])
    return F.binary_cross_entropy_with_logits(logits, labels)


def mgt_loss(model: AlignmentModel, kv: torch.Tensor, token_ids: torch.Tensor,
             kv_valid: torch.Tensor | None = None) -> torch.Tensor:
    """Motion-conditioned autoregressive text loss under the causal-text mask."""
    _, t_states, valid = model.joint_states(kv, token_ids, AttentionMaskMode.CAUSAL_TEXT, kv_valid)
    logits = model.lm_head(t_states)  # position i predicts the next token
    B, T = token_ids.shape
    pad = torch.full((B, 1), Vocab.PAD, dtype=torch.long)
    targets = torch.cat([token_ids, pad], dim=1)
    lengths = (token_ids != Vocab.PAD).sum(dim=1)
    targets[torch.arange(B), lengths] = Vocab.EOS  # EOS right after the last word
    pos = torch.arange(T + 1).unsqueeze(0)
    target_valid = pos <= lengths.unsqueeze(1)
    losses = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                             reduction="none").reshape(B, T + 1)
    return (losses * target_valid).sum() / target_valid.sum()


def tgm_loss(model: AlignmentModel, token_ids: torch.Tensor,
             motion_tokens: torch.Tensor) -> torch.Tensor:
    """Text-conditioned autoregressive motion-token loss."""
    logits = model.motion_generation_logits(token_ids, motion_tokens)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), motion_tokens.reshape(-1))


# ---- training ------------------------------------------------------------------


def pad_token_batch(encoded: list[list[int]], max_len: int) -> torch.Tensor:
    T = min(max(len(e) for e in encoded), max_len)
    out = torch.full((len(encoded), T), Vocab.PAD, dtype=torch.long)
    for i, e in enumerate(encoded):
        ids = e[:T]
        out[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
    return out


@dataclass
class LampTrainData:
    latents: list[np.ndarray]      # per sample, full-sequence frozen-encoder latents
    tokens: list[np.ndarray]       # per sample, full-sequence code indices
    texts: list[list[list[int]]]   # per sample, encoded texts


def prepare_lamp_data(dataset: Dataset, tokenizer: MotionTokenizer, stats: FeatureStats,
                      vocab: Vocab) -> LampTrainData:
    latents, tokens, texts = [], [], []
    for s in dataset.samples:
        lat = tokenizer.encode_np(normalize(s.motion, stats))
        latents.append(lat)
        tokens.append(tokenizer.tokens_np(normalize(s.motion, stats)))
        texts.append([vocab.encode(t) for t in s.texts])
    return LampTrainData(latents=latents, tokens=tokens, texts=texts)


def train_lamp(dataset: Dataset, tokenizer: MotionTokenizer, stats: FeatureStats,
               config: LampConfig, vocab: Vocab | None = None,
               log_every: int = 50) -> tuple[AlignmentModel, Vocab, list[dict]]:
    """Joint training of the four objectives; deterministic given config.seed."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if vocab is None:
        vocab = Vocab.from_texts(dataset.all_texts())
    config.vocab_size = len(vocab)
    config.codebook_size = tokenizer.config.codebook_size
    config.motion_latent_dim = tokenizer.config.code_dim
    data = prepare_lamp_data(dataset, tokenizer, stats, vocab)

    torch.manual_seed(config.seed)
    model = AlignmentModel(config)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    neg_gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    w_lat = max(1, config.window // tokenizer.config.downsample_ratio)
    usable = [i for i, lat in enumerate(data.latents) if lat.shape[0] >= w_lat]
    if not usable:
        raise ValueError("no sample long enough for the training window")

    curve: list[dict] = []
    for step in range(config.iterations):
        idx = rng.choice(usable, size=config.batch_size, replace=True)
        lat_batch = np.empty((config.batch_size, w_lat, config.motion_latent_dim), np.float32)
        tok_batch = np.empty((config.batch_size, w_lat), np.int64)
        text_ids = []
        for row, i in enumerate(idx):
            lat = data.latents[i]
            start = int(rng.integers(0, lat.shape[0] - w_lat + 1))
            lat_batch[row] = lat[start:start + w_lat]
            tok_batch[row] = data.tokens[i][start:start + w_lat]
            text_ids.append(data.texts[i][int(rng.integers(0, len(data.texts[i])))])
        latents = torch.from_numpy(lat_batch)
        motion_tokens = torch.from_numpy(tok_batch)
        ids = pad_token_batch(text_ids, config.max_text_len)

        kv = model.motion_kv(latents)
        f_m = F.normalize(model.proj_m(model.encode_queries(kv)), dim=-1)
        f_t = model.text_features(ids)
        l_con = contrastive_loss(f_m, f_t, model.tau)
        with torch.no_grad():
            negatives = sample_hard_negatives(similarity_matrix(f_m.detach(), f_t.detach()),
                                              float(model.tau), neg_gen)
        l_match = matching_loss(model, kv, ids, negatives=negatives)
        l_mgt = mgt_loss(model, kv, ids)
        l_tgm = tgm_loss(model, ids, motion_tokens)
        total = (config.weight_contrastive * l_con + config.weight_matching * l_match
                 + config.weight_mgt * l_mgt + config.weight_tgm * l_tgm)
        if not torch.isfinite(total):
            raise TrainingDivergenceError(f"non-finite loss at step {step}")

        warm = min(1.0, (step + 1) / max(1, config.warmup_iters))
        decay = 0.1 if step >= int(0.85 * config.iterations) else 1.0
        for group in opt.param_groups:
            group["lr"] = config.lr * warm * decay
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            model.log_tau.clamp_(math.log(5e-3), math.log(1.0))

        if step % log_every == 0 or step == config.iterations - 1:
            curve.append({"step": step, "contrastive": float(l_con.detach()),
                          "matching": float(l_match.detach()), "mgt": float(l_mgt.detach()),
                          "tgm": float(l_tgm.detach()), "total": float(total.detach())})
    model.eval()
    return model, vocab, curve


def lamp_to_checkpoint(model: AlignmentModel, vocab: Vocab,
                       corpus_stats_hash: str | None = None) -> Checkpoint:
    return Checkpoint(module="alignment",
                      config={"lamp": asdict(model.cfg), "vocab": vocab.to_dict()},
                      arrays=state_dict_arrays(model),
                      corpus_stats_hash=corpus_stats_hash)


def lamp_from_checkpoint(ckpt: Checkpoint) -> tuple[AlignmentModel, Vocab]:
    cfg = LampConfig(**ckpt.config["lamp"])
    model = AlignmentModel(cfg)
    load_state_dict_arrays(model, ckpt.arrays)
    vocab = Vocab.from_dict(ckpt.config["vocab"])
    model.eval()
    return model, vocab


class AlignedEncoder:
    """Frozen tokenizer + alignment model as a feature extractor."""

    def __init__(self, tokenizer: MotionTokenizer, stats: FeatureStats,
                 model: AlignmentModel, vocab: Vocab):
        if tokenizer is None:
            raise ValueError("a frozen tokenizer checkpoint is required")
        self.tokenizer = tokenizer
        self.stats = stats
        self.model = model
        self.vocab = vocab

    def _encode_text_ids(self, text: str) -> torch.Tensor:
        ids = self.vocab.encode(text)
        if not ids:
            raise ValueError("text tokenizes to an empty sequence")
        return torch.tensor([ids], dtype=torch.long)

    def motion_features(self, motion: np.ndarray) -> np.ndarray:
        """(L, p) feature rows for one raw (unnormalized) motion."""
        lat = self.tokenizer.encode_np(normalize(motion, self.stats))
        with torch.no_grad():
            f = self.model.motion_features(torch.from_numpy(lat).unsqueeze(0))
        return f[0].numpy()

    def motion_features_batch(self, motions: list[np.ndarray]) -> np.ndarray:
        """(B, L, p); variable-length motions are padded with masked keys."""
        lats = [self.tokenizer.encode_np(normalize(m, self.stats)) for m in motions]
        n_max = max(l.shape[0] for l in lats)
        kv = torch.zeros(len(lats), n_max, lats[0].shape[1])
        valid = torch.zeros(len(lats), n_max, dtype=torch.bool)
        for i, l in enumerate(lats):
            kv[i, : l.shape[0]] = torch.from_numpy(l)
            valid[i, : l.shape[0]] = True
        with torch.no_grad():
            f = self.model.motion_features(kv, valid)
        return f.numpy()

    def text_features(self, text: str) -> np.ndarray:
        with torch.no_grad():
            return self.model.text_features(self._encode_text_ids(text))[0].numpy()

    def text_features_batch(self, texts: list[str]) -> np.ndarray:
        encoded = [self.vocab.encode(t) for t in texts]
        if any(not e for e in encoded):
            raise ValueError("text tokenizes to an empty sequence")
        ids = pad_token_batch(encoded, self.model.cfg.max_text_len)
        with torch.no_grad():
            return self.model.text_features(ids).numpy()

    def condition_features(self, text: str) -> np.ndarray:
        """(L, hidden) query states conditioned on text, for the generator."""
        with torch.no_grad():
            return self.model.condition_states(self._encode_text_ids(text))[0].numpy()

    def text_token_embeddings(self, text: str) -> np.ndarray:
        """Per-token contextual embeddings (T, hidden), L2-normalized; CLS excluded."""
        ids = self._encode_text_ids(text)
        with torch.no_grad():
            states, _ = self.model.encode_text(ids)
        emb = states[0, 1:].numpy()
        norms = np.linalg.norm(emb, axis=-1, keepdims=True)
        return emb / np.maximum(norms, 1e-12)
