"""Text-to-motion generator: decoder-only masked prediction over motion tokens.

Training corrupts token sequences under a cosine schedule with BERT-style
80/10/10 replacement and minimizes the negative log-likelihood at the selected
positions under a causal attention mask. Inference starts fully masked and
runs K iterations of classifier-free-guided sampling with confidence-based
remasking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Dataset, FeatureStats, normalize, denormalize
from .checkpoint import Checkpoint, state_dict_arrays, load_state_dict_arrays
from .alignment import AlignedEncoder, MultiHeadAttention, FeedForward
from .vqvae import MotionTokenizer, TrainingDivergenceError


def mask_ratio(r: float) -> float:
    """Cosine schedule gamma(r): 1 at r=0 (fully masked), 0 at r=1."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"r must be in [0, 1], got {r}")
    if r == 1.0:
        return 0.0  # float cos(pi/2) is ~6e-17; the endpoint must be exact
    return math.cos(math.pi * r / 2.0)


def masked_count(n: int, r: float) -> int:
    return math.ceil(mask_ratio(r) * n)


@dataclass
class CorruptionPolicy:
    p_mask: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1

    def __post_init__(self):
        if abs(self.p_mask + self.p_random + self.p_keep - 1.0) > 1e-9:
            raise ValueError("corruption probabilities must sum to 1")


def corrupt(tokens: np.ndarray, r: float, policy: CorruptionPolicy,
            rng: np.random.Generator, codebook_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Select ceil(gamma(r) * n) positions uniformly; per position: mask token,
    random code, or keep. Returns (corrupted, selected position indices)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    mask_id = codebook_size
    if (tokens == mask_id).any():
        raise ValueError("input already contains the mask token")
    n = tokens.shape[-1]
    k = masked_count(n, r)
    positions = np.sort(rng.choice(n, size=k, replace=False))
    corrupted = tokens.copy()
    u = rng.random(k)
    for j, pos in enumerate(positions):
        if u[j] < policy.p_mask:
            corrupted[pos] = mask_id
        elif u[j] < policy.p_mask + policy.p_random:
            corrupted[pos] = rng.integers(0, codebook_size)
        # else: keep unchanged; the position still contributes to the loss
    return corrupted, positions


@dataclass
class T2MConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 192
    ffn_mult: int = 2
    max_len: int = 64
    uncond_prob: float = 0.1
    use_query_interaction: bool = True
    lr: float = 3e-4
    warmup_iters: int = 100
    iterations: int = 2000
    batch_size: int = 16
    train_length: int = 16
    seed: int = 0
    codebook_size: int = 0
    cond_len: int = 0
    cond_dim: int = 0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")


# Full-scale-shaped preset per the published architecture.
FULL_SCALE_T2M = dict(layers=6, heads=6, hidden=384)


@dataclass
class GenerationConfig:
    alpha: float = 4.0
    iterations: int = 10
    length: int = 16
    seed: int = 0
    temperature: float = 1.0
    greedy: bool = False
    attention_mode: str = "causal"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.attention_mode not in ("causal", "bidirectional"):
            raise ValueError("attention_mode must be causal or bidirectional")


class Block(nn.Module):
    def __init__(self, hidden: int, heads: int, ffn_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = MultiHeadAttention(hidden, heads)
        self.ln2 = nn.LayerNorm(hidden)
        self.ffn = FeedForward(hidden, ffn_mult)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.ln2(x))


class MaskedMotionModel(nn.Module):
    """Condition prefix + motion token positions; logits over the S codes."""

    def __init__(self, cfg: T2MConfig):
        super().__init__()
        if cfg.codebook_size < 2 or cfg.cond_len < 1 or cfg.cond_dim < 1:
            raise ValueError("codebook_size, cond_len, and cond_dim must be set")
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.codebook_size + 1, cfg.hidden)  # codes + mask token
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_len, cfg.hidden))
        self.cond_proj = nn.Linear(cfg.cond_dim, cfg.hidden)
        self.null_cond = nn.Parameter(torch.empty(cfg.cond_len, cfg.hidden))
        self.blocks = nn.ModuleList(Block(cfg.hidden, cfg.heads, cfg.ffn_mult)
                                    for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.codebook_size)
        nn.init.normal_(self.pos_emb, std=0.02)
        nn.init.normal_(self.null_cond, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, std=0.02)
                if isinstance(m, nn.Linear):
                    nn.init.zeros_(m.bias)

    @property
    def mask_id(self) -> int:
        return self.cfg.codebook_size

    def forward(self, tokens: torch.Tensor, cond: torch.Tensor | None = None,
                mode: str = "causal", null_rows: torch.Tensor | None = None) -> torch.Tensor:
        """tokens (B, n) in [0, S]; cond (B, cond_len, cond_dim) or None for the
        learned null condition; returns logits (B, n, S)."""
        B, n = tokens.shape
        if n > self.cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        if cond is None:
            prefix = self.null_cond.unsqueeze(0).expand(B, -1, -1)
        else:
            prefix = self.cond_proj(cond)
            if null_rows is not None:
                prefix = torch.where(null_rows.view(B, 1, 1), self.null_cond.unsqueeze(0), prefix)
        c = prefix.shape[1]
        x = torch.cat([prefix, self.token_emb(tokens) + self.pos_emb[:n]], dim=1)
        total = c + n
        allow = torch.zeros(total, total, dtype=torch.bool)
        allow[:c, :c] = True   # prefix attends within itself
        allow[c:, :c] = True   # condition is visible to every motion position
        if mode == "causal":
            allow[c:, c:] = torch.tril(torch.ones(n, n, dtype=torch.bool))
        elif mode == "bidirectional":
            allow[c:, c:] = True
        else:
            raise ValueError(f"unknown attention mode {mode!r}")
        mask = allow.view(1, 1, total, total)
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.ln_f(x[:, c:]))


def masked_nll(logits: torch.Tensor, targets: torch.Tensor,
               mask_positions: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Mean negative log-likelihood at the selected positions only.

    mask_positions is a boolean mask matching logits[..., 0], or an integer
    index array for a single (n, S) sequence.
    """
    if logits.dim() == 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
        mp = torch.as_tensor(np.asarray(mask_positions))
        if mp.dtype == torch.bool:
            sel = mp.view(1, -1)
        else:
            sel = torch.zeros(logits.shape[:2], dtype=torch.bool)
            sel[0, mp.long()] = True
    else:
        sel = torch.as_tensor(np.asarray(mask_positions)).to(torch.bool)
    if not sel.any():
        raise ValueError("mask position set is empty")
    lp = F.log_softmax(logits, dim=-1)
    nll = -lp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll[sel].mean()


def cfg_mix(l_c, l_uc, alpha: float):
    """Guided logits (1 + alpha) * conditional - alpha * unconditional."""
    if l_c.shape != l_uc.shape:
        raise ValueError("logit shapes must match")
    return (1.0 + alpha) * l_c - alpha * l_uc


def iterative_decode(model: MaskedMotionModel, cond: torch.Tensor | None,
                     config: GenerationConfig,
                     generator: torch.Generator | list[torch.Generator] | None = None,
                     return_trace: bool = False):
    """Confidence-based iterative decoding of one sequence batch.

    All positions start masked. Each iteration samples codes at the currently
    masked positions under classifier-free guidance, then re-masks the
    ceil(gamma((k+1)/K) * n) lowest-confidence positions; previously kept
    positions carry +inf confidence and are never re-masked.
    """
    K, n, alpha = config.iterations, config.length, config.alpha
    B = cond.shape[0] if cond is not None else 1
    if generator is None:
        generator = torch.Generator().manual_seed(config.seed)
    gens = generator if isinstance(generator, list) else [generator] * B
    tokens = torch.full((B, n), model.mask_id, dtype=torch.long)
    fixed = torch.zeros(B, n, dtype=torch.bool)
    trace = []
    with torch.no_grad():
        for k in range(K):
            l_c = model(tokens, cond, mode=config.attention_mode)
            l_uc = model(tokens, None, mode=config.attention_mode)
            logits = cfg_mix(l_c, l_uc, alpha) if cond is not None else l_uc
            probs = torch.softmax(logits / config.temperature, dim=-1)
            conf = torch.full((B, n), float("inf"))
            for b in range(B):
                open_pos = (~fixed[b]).nonzero(as_tuple=True)[0]
                if config.greedy:
                    new = probs[b, open_pos].argmax(dim=-1)
                else:
                    new = torch.multinomial(probs[b, open_pos], 1, generator=gens[b]).squeeze(-1)
                tokens[b, open_pos] = new
                conf[b, open_pos] = probs[b, open_pos, new]
            n_remask = masked_count(n, (k + 1) / K)
            if n_remask > 0:
                order = torch.argsort(conf, dim=1, stable=True)
                remask = order[:, :n_remask]
                tokens.scatter_(1, remask, model.mask_id)
                fixed = tokens != model.mask_id
            else:
                fixed = torch.ones(B, n, dtype=torch.bool)
            if return_trace:
                trace.append({"iteration": k, "remask_count": n_remask,
                              "fixed": fixed.clone().numpy()})
    if return_trace:
        return tokens, trace
    return tokens


def condition_for_text(encoder: AlignedEncoder, text: str, use_query_interaction: bool) -> np.ndarray:
    if use_query_interaction:
        return encoder.condition_features(text)
    return encoder.text_features(text)[None, :]


def generate(text: str, encoder: AlignedEncoder, model: MaskedMotionModel,
             config: GenerationConfig) -> tuple[np.ndarray, dict]:
    """Generate a raw-unit motion for a text prompt; returns (motion, metadata)."""
    if encoder.tokenizer.config.codebook_size != model.cfg.codebook_size:
        raise ValueError("tokenizer and generator codebook sizes do not match")
    cond = torch.from_numpy(
        condition_for_text(encoder, text, model.cfg.use_query_interaction)).unsqueeze(0)
    gen = torch.Generator().manual_seed(config.seed)
    tokens = iterative_decode(model, cond, config, generator=gen)[0]
    decoded = encoder.tokenizer.decode_tokens_np(tokens.numpy())
    motion = denormalize(decoded, encoder.stats)
    meta = {"text": text, "seed": config.seed, "alpha": config.alpha,
            "iterations": config.iterations, "tokens": tokens.tolist(),
            "frames": int(motion.shape[0]), "dim": int(motion.shape[1])}
    return motion, meta


def generate_batch(texts: list[str], encoder: AlignedEncoder, model: MaskedMotionModel,
                   config: GenerationConfig, seeds: list[int],
                   chunk: int = 64) -> list[np.ndarray]:
    """Generate one motion per text with a dedicated RNG stream per prompt."""
    if len(texts) != len(seeds):
        raise ValueError("need one seed per text")
    out: list[np.ndarray] = []
    for lo in range(0, len(texts), chunk):
        part = texts[lo:lo + chunk]
        cond = torch.from_numpy(np.stack([
            condition_for_text(encoder, t, model.cfg.use_query_interaction) for t in part]))
        gens = [torch.Generator().manual_seed(int(s)) for s in seeds[lo:lo + chunk]]
        tokens = iterative_decode(model, cond, config, generator=gens)
        decoded = encoder.tokenizer.decode_tokens_np(tokens.numpy())
        out.extend(denormalize(decoded[i], encoder.stats) for i in range(len(part)))
    return out


def prepare_t2m_data(dataset: Dataset, tokenizer: MotionTokenizer, stats: FeatureStats,
                     encoder: AlignedEncoder, use_query_interaction: bool):
    tokens, conds = [], []
    for s in dataset.samples:
        tokens.append(tokenizer.tokens_np(normalize(s.motion, stats)))
        conds.append([condition_for_text(encoder, t, use_query_interaction) for t in s.texts])
    return tokens, conds


def train_t2m(dataset: Dataset, encoder: AlignedEncoder, config: T2MConfig,
              policy: CorruptionPolicy | None = None,
              log_every: int = 50) -> tuple[MaskedMotionModel, list[dict]]:
    """Masked-prediction training with random schedule draws and condition dropout."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    policy = policy or CorruptionPolicy()
    tokenizer, stats = encoder.tokenizer, encoder.stats
    config.codebook_size = tokenizer.config.codebook_size
    lamp_cfg = encoder.model.cfg
    config.cond_len = lamp_cfg.num_queries if config.use_query_interaction else 1
    config.cond_dim = lamp_cfg.hidden if config.use_query_interaction else lamp_cfg.proj_dim
    tokens_all, conds_all = prepare_t2m_data(dataset, tokenizer, stats, encoder,
                                             config.use_query_interaction)
    usable = [i for i, t in enumerate(tokens_all) if t.shape[0] >= config.train_length]
    if not usable:
        raise ValueError("no sample long enough for train_length")

    torch.manual_seed(config.seed)
    model = MaskedMotionModel(config)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    n = config.train_length
    S = config.codebook_size
    curve: list[dict] = []
    for step in range(config.iterations):
        idx = rng.choice(usable, size=config.batch_size, replace=True)
        tok = np.empty((config.batch_size, n), np.int64)
        cor = np.empty((config.batch_size, n), np.int64)
        sel = np.zeros((config.batch_size, n), bool)
        cond = np.empty((config.batch_size, config.cond_len, config.cond_dim), np.float32)
        null_rows = np.zeros(config.batch_size, bool)
        for row, i in enumerate(idx):
            t = tokens_all[i]
            start = int(rng.integers(0, t.shape[0] - n + 1))
            tok[row] = t[start:start + n]
            r = float(rng.random())
            cor[row], pos = corrupt(tok[row], r, policy, rng, S)
            sel[row, pos] = True
            texts = conds_all[i]
            cond[row] = texts[int(rng.integers(0, len(texts)))]
            null_rows[row] = rng.random() < config.uncond_prob
        if not sel.any():
            continue  # r drew ~1.0 for every row; nothing to predict this step
        logits = model(torch.from_numpy(cor), torch.from_numpy(cond), mode="causal",
                       null_rows=torch.from_numpy(null_rows))
        loss = masked_nll(logits, torch.from_numpy(tok), torch.from_numpy(sel))
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite loss at step {step}")
        for group in opt.param_groups:
            group["lr"] = config.lr * min(1.0, (step + 1) / max(1, config.warmup_iters))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == config.iterations - 1:
            curve.append({"step": step, "masked_nll": float(loss)})
    model.eval()
    return model, curve


def t2m_to_checkpoint(model: MaskedMotionModel, corpus_stats_hash: str | None = None) -> Checkpoint:
    return Checkpoint(module="generator", config={"t2m": asdict(model.cfg)},
                      arrays=state_dict_arrays(model), corpus_stats_hash=corpus_stats_hash)


def t2m_from_checkpoint(ckpt: Checkpoint) -> MaskedMotionModel:
    model = MaskedMotionModel(T2MConfig(**ckpt.config["t2m"]))
    load_state_dict_arrays(model, ckpt.arrays)
    model.eval()
    return model


def attention_rank_check(n: int = 32, d_head: int = 4, mode: str = "causal",
                         trials: int = 100, seed: int = 0) -> dict:
    """Build softmax attention matrices from random queries/keys and check ranks.

    Causal mode asserts triangular structure, strictly positive diagonals,
    unit row sums, and full numerical rank. Bidirectional mode only reports
    the empirical rank distribution.
    """
    if n <= d_head and mode == "causal":
        raise ValueError("rank check requires n > d_head")
    rng = np.random.Generator(np.random.PCG64(seed))
    ranks, min_diags = [], []
    for _ in range(trials):
        q = rng.standard_normal((n, d_head))
        k = rng.standard_normal((n, d_head))
        scores = q @ k.T / math.sqrt(d_head)
        if mode == "causal":
            scores = np.where(np.tril(np.ones((n, n), bool)), scores, -np.inf)
        w = np.exp(scores - scores.max(axis=1, keepdims=True))
        att = w / w.sum(axis=1, keepdims=True)
        ranks.append(int(np.linalg.matrix_rank(att)))
        if mode == "causal":
            assert np.allclose(np.triu(att, 1), 0.0), "upper triangle must be zero"
            assert (np.diag(att) > 0).all(), "diagonal must be strictly positive"
            assert np.allclose(att.sum(axis=1), 1.0, atol=1e-6), "rows must sum to 1"
            min_diags.append(float(np.diag(att).min()))
    report = {"mode": mode, "n": n, "d_head": d_head, "trials": trials,
              "ranks": ranks, "full_rank_fraction": float(np.mean(np.array(ranks) == n))}
    if mode == "causal":
        report["min_diagonal"] = min(min_diags)
        report["all_full_rank"] = all(r == n for r in ranks)
    return report
