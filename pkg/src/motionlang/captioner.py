"""Motion captioning: aligned motion features projected into a small decoder LM.

The LM consumes a prefix of projected motion features plus a fixed prompt and
generates a caption greedily. With adapter_rank > 0, the base LM weights are
frozen and only low-rank adapter deltas on the attention projections (plus the
feature projection) are trained. Captions are scored against references with a
greedy token-matching embedding F1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Dataset, Vocab
from .checkpoint import Checkpoint, state_dict_arrays, load_state_dict_arrays
from .alignment import AlignedEncoder, FeedForward
from .vqvae import TrainingDivergenceError


@dataclass
class CaptionerConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 128
    ffn_mult: int = 2
    adapter_rank: int = 0
    prompt: str = "describe the motion:"
    max_caption_len: int = 16
    lr: float = 3e-4
    warmup_iters: int = 50
    iterations: int = 1200
    batch_size: int = 16
    seed: int = 0
    vocab_size: int = 0
    feature_dim: int = 0
    num_queries: int = 0

    def __post_init__(self):
        if self.adapter_rank < 0:
            raise ValueError("adapter_rank must be >= 0")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")


class AdapterLinear(nn.Module):
    """Frozen base linear plus a trainable rank-r additive delta."""

    def __init__(self, base: nn.Linear, rank: int):
        super().__init__()
        self.base = base
        self.down = nn.Linear(base.in_features, rank, bias=False)
        self.up = nn.Linear(rank, base.out_features, bias=False)
        nn.init.normal_(self.down.weight, std=0.02)
        nn.init.zeros_(self.up.weight)

    def forward(self, x):
        return self.base(x) + self.up(self.down(x))


class LMAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, adapter_rank: int):
        super().__init__()
        self.heads = heads
        self.d_head = hidden // heads

        def proj():
            lin = nn.Linear(hidden, hidden)
            return AdapterLinear(lin, adapter_rank) if adapter_rank > 0 else lin

        self.q_proj, self.k_proj, self.v_proj, self.out_proj = proj(), proj(), proj(), proj()

    def forward(self, x, mask):
        B, T, _ = x.shape
        q = self.q_proj(x).view(B, T, self.heads, self.d_head).transpose(1, 2)
        k = self.k_proj(x).view(B, T, self.heads, self.d_head).transpose(1, 2)
        v = self.v_proj(x).view(B, T, self.heads, self.d_head).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out_proj(out.transpose(1, 2).reshape(B, T, -1))


class LMBlock(nn.Module):
    def __init__(self, cfg: CaptionerConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.hidden)
        self.attn = LMAttention(cfg.hidden, cfg.heads, cfg.adapter_rank)
        self.ln2 = nn.LayerNorm(cfg.hidden)
        self.ffn = FeedForward(cfg.hidden, cfg.ffn_mult)

    def forward(self, x, mask):
        x = x + self.attn(self.ln1(x), mask)
        return x + self.ffn(self.ln2(x))


class CaptionerModel(nn.Module):
    """Projected motion-feature prefix + prompt + autoregressive caption decoder."""

    def __init__(self, cfg: CaptionerConfig, vocab: Vocab):
        super().__init__()
        if cfg.vocab_size < 5 or cfg.feature_dim < 1 or cfg.num_queries < 1:
            raise ValueError("vocab_size, feature_dim, and num_queries must be set")
        self.cfg = cfg
        self.vocab = vocab
        self.proj = nn.Linear(cfg.feature_dim, cfg.hidden)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden)
        total = cfg.num_queries + len(vocab.encode(cfg.prompt) or [Vocab.UNK]) \
            + 1 + cfg.max_caption_len
        self.pos_emb = nn.Parameter(torch.empty(total + 1, cfg.hidden))
        self.blocks = nn.ModuleList(LMBlock(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.hidden)
        self.lm_head = nn.Linear(cfg.hidden, cfg.vocab_size)
        nn.init.normal_(self.pos_emb, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)) and not isinstance(m, AdapterLinear):
                nn.init.normal_(m.weight, std=0.02)
                if isinstance(m, nn.Linear) and m.bias is not None:
                    nn.init.zeros_(m.bias)
        for m in self.modules():  # adapter deltas start at zero
            if isinstance(m, AdapterLinear):
                nn.init.normal_(m.down.weight, std=0.02)
                nn.init.zeros_(m.up.weight)
        self.prompt_ids = vocab.encode(cfg.prompt) or [Vocab.UNK]

    def base_lm_parameters(self):
        """Base LM parameters, frozen in adapter-only mode (everything except the
        feature projection and the adapter deltas)."""
        for name, p in self.named_parameters():
            if name.startswith("proj.") or ".down." in name or ".up." in name:
                continue
            yield p

    def project_features(self, f_m: torch.Tensor) -> torch.Tensor:
        """Affine map of (.., L, p) motion features into the LM embedding space."""
        if f_m.shape[-1] != self.cfg.feature_dim:
            raise ValueError(f"feature dim {f_m.shape[-1]} != {self.cfg.feature_dim}")
        return self.proj(f_m)

    def _run(self, f_m: torch.Tensor, caption_in: torch.Tensor) -> torch.Tensor:
        """Causal pass over [projected features; prompt; CLS + caption tokens]."""
        B = f_m.shape[0]
        prompt = torch.tensor(self.prompt_ids, dtype=torch.long).unsqueeze(0).expand(B, -1)
        cls = torch.full((B, 1), Vocab.CLS, dtype=torch.long)
        ids = torch.cat([prompt, cls, caption_in], dim=1)
        x = torch.cat([self.project_features(f_m), self.tok_emb(ids)], dim=1)
        T = x.shape[1]
        x = x + self.pos_emb[:T]
        mask = torch.tril(torch.ones(T, T, dtype=torch.bool)).view(1, 1, T, T)
        for block in self.blocks:
            x = block(x, mask)
        return self.lm_head(self.ln_f(x))

    def caption_loss(self, f_m: torch.Tensor, caption_ids: torch.Tensor) -> torch.Tensor:
        """Teacher-forcing cross-entropy over caption tokens plus EOS."""
        B, T = caption_ids.shape
        logits = self._run(f_m, caption_ids)
        n_prefix = f_m.shape[1] + len(self.prompt_ids)
        pred = logits[:, n_prefix:]  # T+1 positions: CLS, w_0 .. w_{T-1}
        pad = torch.full((B, 1), Vocab.PAD, dtype=torch.long)
        targets = torch.cat([caption_ids, pad], dim=1)
        lengths = (caption_ids != Vocab.PAD).sum(dim=1)
        targets[torch.arange(B), lengths] = Vocab.EOS
        pos = torch.arange(T + 1).unsqueeze(0)
        valid = pos <= lengths.unsqueeze(1)
        losses = F.cross_entropy(pred.reshape(-1, pred.shape[-1]), targets.reshape(-1),
                                 reduction="none").reshape(B, T + 1)
        return (losses * valid).sum() / valid.sum()

    @torch.no_grad()
    def generate(self, f_m: torch.Tensor) -> list[list[int]]:
        """Greedy decode for a batch of feature sets; returns word-id lists."""
        B = f_m.shape[0]
        out = torch.zeros(B, 0, dtype=torch.long)
        alive = torch.ones(B, dtype=torch.bool)
        for _ in range(self.cfg.max_caption_len):
            logits = self._run(f_m, out)
            nxt = logits[:, -1].argmax(dim=-1)
            nxt = torch.where(alive, nxt, torch.full_like(nxt, Vocab.PAD))
            out = torch.cat([out, nxt.unsqueeze(1)], dim=1)
            alive = alive & (nxt != Vocab.EOS)
            if not alive.any():
                break
        captions = []
        for row in out.tolist():
            ids = []
            for t in row:
                if t == Vocab.EOS:
                    break
                if t != Vocab.PAD:
                    ids.append(t)
            captions.append(ids)
        return captions


class Captioner:
    """Frozen aligned encoder plus a trained caption model."""

    def __init__(self, encoder: AlignedEncoder, model: CaptionerModel):
        self.encoder = encoder
        self.model = model

    def caption_motion(self, motion: np.ndarray) -> str:
        return self.caption_batch([motion])[0]

    def caption_batch(self, motions: list[np.ndarray]) -> list[str]:
        f_m = torch.from_numpy(self.encoder.motion_features_batch(motions))
        ids = self.model.generate(f_m)
        return [self.model.vocab.decode(i) for i in ids]


def train_m2t(dataset: Dataset, encoder: AlignedEncoder, config: CaptionerConfig,
              log_every: int = 50) -> tuple[CaptionerModel, list[dict]]:
    """Teacher-forcing caption training over frozen aligned motion features."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    vocab = encoder.vocab
    config.vocab_size = len(vocab)
    config.feature_dim = encoder.model.cfg.proj_dim
    config.num_queries = encoder.model.cfg.num_queries

    feats = encoder.motion_features_batch([s.motion for s in dataset.samples])
    texts = [[vocab.encode(t)[: config.max_caption_len] for t in s.texts]
             for s in dataset.samples]

    torch.manual_seed(config.seed)
    model = CaptionerModel(config, vocab)
    if config.adapter_rank > 0:
        for p in model.base_lm_parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    curve: list[dict] = []
    for step in range(config.iterations):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        f_m = torch.from_numpy(feats[idx])
        batch_texts = [texts[i][int(rng.integers(0, len(texts[i])))] for i in idx]
        T = max(len(t) for t in batch_texts)
        ids = torch.full((config.batch_size, T), Vocab.PAD, dtype=torch.long)
        for r, t in enumerate(batch_texts):
            ids[r, : len(t)] = torch.tensor(t, dtype=torch.long)
        loss = model.caption_loss(f_m, ids)
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite loss at step {step}")
        for group in opt.param_groups:
            group["lr"] = config.lr * min(1.0, (step + 1) / max(1, config.warmup_iters))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == config.iterations - 1:
            curve.append({"step": step, "caption_ce": float(loss)})
    model.eval()
    return model, curve


def captioner_to_checkpoint(model: CaptionerModel, corpus_stats_hash: str | None = None) -> Checkpoint:
    return Checkpoint(module="captioner",
                      config={"captioner": asdict(model.cfg), "vocab": model.vocab.to_dict()},
                      arrays=state_dict_arrays(model), corpus_stats_hash=corpus_stats_hash)


def captioner_from_checkpoint(ckpt: Checkpoint) -> CaptionerModel:
    cfg = CaptionerConfig(**ckpt.config["captioner"])
    vocab = Vocab.from_dict(ckpt.config["vocab"])
    model = CaptionerModel(cfg, vocab)
    load_state_dict_arrays(model, ckpt.arrays)
    model.eval()
    return model


# ---- embedding-F1 caption score -------------------------------------------------


@dataclass
class BertScoreResult:
    precision: float
    recall: float
    f1: float


def bert_score(candidate: str, reference: str,
               embedder: Callable[[str], np.ndarray]) -> BertScoreResult:
    """Greedy token-matching F1 over contextual embeddings.

    precision: mean over candidate tokens of the max cosine against reference
    tokens; recall symmetric; f1 harmonic mean. No IDF weighting or baseline
    rescaling. Byte-identical embedding rows score exactly 1.
    """
    c = np.asarray(embedder(candidate), dtype=np.float64)
    r = np.asarray(embedder(reference), dtype=np.float64)
    if c.size == 0 or r.size == 0:
        raise ValueError("candidate and reference must tokenize to at least one token")
    cn = c / np.maximum(np.linalg.norm(c, axis=-1, keepdims=True), 1e-12)
    rn = r / np.maximum(np.linalg.norm(r, axis=-1, keepdims=True), 1e-12)
    sims = np.clip(cn @ rn.T, -1.0, 1.0)
    equal = (c[:, None, :] == r[None, :, :]).all(axis=-1)
    sims[equal] = 1.0
    precision = float(sims.max(axis=1).mean())
    recall = float(sims.max(axis=0).mean())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return BertScoreResult(precision=precision, recall=recall, f1=float(f1))
