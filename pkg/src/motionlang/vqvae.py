"""Motion tokenizer: 1-D convolutional VQ-VAE with EMA codebook and code reset.

Sequences of frames are downsampled by stride-2 convolutions into latent
vectors, quantized against a single codebook by nearest Euclidean distance
(ties to the lowest index), and decoded back with nearest-neighbor upsampling.
The codebook is maintained by exponential moving averages; inactive codes are
re-seeded from batch latents.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Dataset, FeatureStats, compute_stats, normalize
from .checkpoint import Checkpoint, state_dict_arrays, load_state_dict_arrays, stats_hash


class TrainingDivergenceError(Exception):
    pass


@dataclass
class VqConfig:
    codebook_size: int = 128
    code_dim: int = 64
    downsample_ratio: int = 4
    width: int = 64
    res_blocks: int = 1
    beta: float = 0.25
    velocity_weight: float = 1.0
    ema_lambda: float = 0.99
    reset_threshold: float = 1.0
    reset_interval: int = 50
    lr: float = 3e-4
    warmup_iters: int = 100
    iterations: int = 1200
    batch_size: int = 16
    window: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if not (0.0 < self.ema_lambda < 1.0):
            raise ValueError("ema_lambda must be in (0, 1)")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.velocity_weight < 0:
            raise ValueError("velocity_weight must be >= 0")
        r = self.downsample_ratio
        if r < 1 or (r & (r - 1)) != 0:
            raise ValueError("downsample_ratio must be a positive power of two")


# Full-scale-shaped preset kept available; desk tests use the defaults above.
FULL_SCALE_VQ = dict(codebook_size=512, code_dim=512, width=512, res_blocks=2)


class ResBlock1d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        h = self.conv2(F.relu(self.conv1(F.relu(x))))
        return x + h


class MotionEncoder(nn.Module):
    """Stride-2 conv stack; output length is ceil(frames / downsample_ratio)."""

    def __init__(self, dim: int, cfg: VqConfig):
        super().__init__()
        stages = int(math.log2(cfg.downsample_ratio))
        layers: list[nn.Module] = [nn.Conv1d(dim, cfg.width, 3, padding=1), nn.ReLU()]
        for _ in range(stages):
            # kernel 3 / stride 2 / pad 1 maps length N to ceil(N / 2)
            layers.append(nn.Conv1d(cfg.width, cfg.width, 3, stride=2, padding=1))
            layers.extend(ResBlock1d(cfg.width) for _ in range(cfg.res_blocks))
        layers.append(nn.Conv1d(cfg.width, cfg.code_dim, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        # x: (B, N, D) -> (B, n, d)
        return self.net(x.transpose(1, 2)).transpose(1, 2)


class MotionDecoder(nn.Module):
    """Nearest-neighbor x2 upsampling stack; output length is n * downsample_ratio."""

    def __init__(self, dim: int, cfg: VqConfig):
        super().__init__()
        stages = int(math.log2(cfg.downsample_ratio))
        layers: list[nn.Module] = [nn.Conv1d(cfg.code_dim, cfg.width, 3, padding=1), nn.ReLU()]
        for _ in range(stages):
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers.append(nn.Conv1d(cfg.width, cfg.width, 3, padding=1))
            layers.extend(ResBlock1d(cfg.width) for _ in range(cfg.res_blocks))
        self.final = nn.Conv1d(cfg.width, dim, 3, padding=1)
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        # z: (B, n, d) -> (B, n * ratio, D)
        return self.final(self.net(z.transpose(1, 2))).transpose(1, 2)


def quantize(latents: torch.Tensor, codes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest-code assignment by squared Euclidean distance, ties to the lowest index.

    latents: (..., n, d); codes: (S, d). Returns (tokens (..., n), quantized (..., n, d)).
    Distances use a float64 inner-product expansion; rows whose best candidates
    fall within a numerical band are re-checked by exact differencing so the
    result matches an exhaustive scan, including the tie-break.
    """
    if latents.shape[-1] != codes.shape[-1]:
        raise ValueError(f"latent dim {latents.shape[-1]} != codebook dim {codes.shape[-1]}")
    shape = latents.shape[:-1]
    flat = latents.detach().reshape(-1, latents.shape[-1]).to(torch.float64)
    c = codes.detach().to(torch.float64)
    d2 = (flat * flat).sum(-1, keepdim=True) - 2.0 * flat @ c.t() + (c * c).sum(-1)
    min_d = d2.min(dim=-1, keepdim=True).values
    band = 1e-9 * (1.0 + min_d.abs())
    close = d2 <= min_d + band
    tokens = close.to(torch.int8).argmax(dim=-1)  # first candidate in the band
    ambiguous = close.sum(-1) > 1
    for i in ambiguous.nonzero(as_tuple=True)[0].tolist():
        cand = close[i].nonzero(as_tuple=True)[0]
        exact = ((c[cand] - flat[i]) ** 2).sum(-1)
        tokens[i] = cand[(exact == exact.min()).to(torch.int8).argmax()]
    tokens = tokens.reshape(shape)
    return tokens, codes[tokens]


def velocity(motion: torch.Tensor) -> torch.Tensor:
    """First differences along the time axis."""
    return motion[..., 1:, :] - motion[..., :-1, :]


def vq_losses(motion: torch.Tensor, reconstruction: torch.Tensor,
              latents: torch.Tensor, quantized: torch.Tensor,
              config: VqConfig) -> dict[str, torch.Tensor]:
    """Reconstruction + embedding + commitment losses.

    recon uses smooth-L1 (transition 1.0) on values and on first differences,
    weighted by velocity_weight. emb pulls codes toward stop-gradient latents;
    com pulls latents toward stop-gradient codes; both are sums of per-position
    Euclidean norms. total = recon + emb + beta * com.
    """
    if motion.shape != reconstruction.shape:
        raise ValueError("motion/reconstruction shape mismatch")
    if latents.shape != quantized.shape:
        raise ValueError("latents/quantized shape mismatch")
    recon = F.smooth_l1_loss(reconstruction, motion, beta=1.0)
    if motion.shape[-2] > 1:
        recon = recon + config.velocity_weight * F.smooth_l1_loss(
            velocity(reconstruction), velocity(motion), beta=1.0)
    emb = torch.linalg.vector_norm(latents.detach() - quantized, dim=-1).sum()
    com = torch.linalg.vector_norm(latents - quantized.detach(), dim=-1).sum()
    total = recon + emb + config.beta * com
    return {"recon": recon, "emb": emb, "com": com, "total": total}


def ema_update(codes: torch.Tensor, ema_counts: torch.Tensor, ema_sums: torch.Tensor,
               latents: torch.Tensor, tokens: torch.Tensor, lam: float,
               eps: float = 1e-7) -> None:
    """In-place EMA codebook update from a batch of assigned latents."""
    if not (0.0 < lam < 1.0):
        raise ValueError("lambda must be in (0, 1)")
    S = codes.shape[0]
    flat_tokens = tokens.reshape(-1)
    flat_latents = latents.reshape(-1, latents.shape[-1])
    batch_counts = torch.bincount(flat_tokens, minlength=S).to(codes.dtype)
    batch_sums = torch.zeros_like(ema_sums)
    batch_sums.index_add_(0, flat_tokens, flat_latents.to(codes.dtype))
    ema_counts.mul_(lam).add_(batch_counts, alpha=1.0 - lam)
    ema_sums.mul_(lam).add_(batch_sums, alpha=1.0 - lam)
    codes.copy_(ema_sums / ema_counts.clamp_min(eps).unsqueeze(-1))


def code_reset(codes: torch.Tensor, ema_counts: torch.Tensor, ema_sums: torch.Tensor,
               usage: torch.Tensor, threshold: float, donor_latents: torch.Tensor,
               generator: torch.Generator) -> int:
    """Replace under-used codes with randomly sampled donor latents; returns the reset count."""
    if donor_latents.numel() == 0:
        raise ValueError("donor pool must be non-empty")
    dead = usage < threshold
    n_dead = int(dead.sum().item())
    if n_dead == 0:
        return 0
    pool = donor_latents.reshape(-1, donor_latents.shape[-1])
    idx = torch.randint(0, pool.shape[0], (n_dead,), generator=generator)
    donors = pool[idx].to(codes.dtype)
    codes[dead] = donors
    ema_counts[dead] = 1.0
    ema_sums[dead] = donors
    usage[dead] = 0.0
    return n_dead


class MotionTokenizer(nn.Module):
    """Encoder, codebook, and decoder over normalized motion sequences."""

    def __init__(self, dim: int, config: VqConfig):
        super().__init__()
        self.dim = dim
        self.config = config
        self.encoder = MotionEncoder(dim, config)
        self.decoder = MotionDecoder(dim, config)
        self.register_buffer("codes", torch.zeros(config.codebook_size, config.code_dim))
        self.register_buffer("ema_counts", torch.ones(config.codebook_size))
        self.register_buffer("ema_sums", torch.zeros(config.codebook_size, config.code_dim))
        self.register_buffer("usage", torch.zeros(config.codebook_size))

    @property
    def mask_id(self) -> int:
        return self.config.codebook_size

    def encode(self, motion: torch.Tensor) -> torch.Tensor:
        if motion.shape[-2] < self.config.downsample_ratio:
            raise ValueError(
                f"sequence of {motion.shape[-2]} frames is shorter than one "
                f"downsampling window ({self.config.downsample_ratio})")
        if motion.dim() == 2:
            return self.encoder(motion.unsqueeze(0))[0]
        return self.encoder(motion)

    def quantize(self, latents: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return quantize(latents, self.codes)

    def decode(self, quantized: torch.Tensor) -> torch.Tensor:
        if quantized.dim() == 2:
            return self.decoder(quantized.unsqueeze(0))[0]
        return self.decoder(quantized)

    def forward(self, motion: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Straight-through reconstruction; returns (reconstruction, latents, tokens)."""
        latents = self.encode(motion)
        tokens, quantized = self.quantize(latents)
        st = latents + (quantized - latents).detach()
        recon = self.decode(st)
        return recon[..., : motion.shape[-2], :], latents, tokens

    # numpy conveniences over single normalized sequences
    def encode_np(self, motion: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.encode(torch.from_numpy(np.asarray(motion, np.float32))).numpy()

    def tokens_np(self, motion: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            latents = self.encode(torch.from_numpy(np.asarray(motion, np.float32)))
            tokens, _ = self.quantize(latents)
        return tokens.numpy().astype(np.int64)

    def decode_tokens_np(self, tokens: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            quantized = self.codes[torch.from_numpy(np.asarray(tokens, np.int64))]
            return self.decode(quantized).numpy()


def latent_length(frames: int, ratio: int) -> int:
    return -(-frames // ratio)


def reconstruct(tokenizer: MotionTokenizer, motion_norm: np.ndarray) -> np.ndarray:
    """Round-trip a normalized sequence through encode/quantize/decode, cropped to input length."""
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(motion_norm, np.float32)).unsqueeze(0)
        latents = tokenizer.encode(x)
        _, quantized = tokenizer.quantize(latents)
        out = tokenizer.decode(quantized)
    return out[0, : motion_norm.shape[0]].numpy()


def _window_batch(motions: list[np.ndarray], window: int, batch_size: int,
                  rng: np.random.Generator) -> torch.Tensor:
    idx = rng.integers(0, len(motions), size=batch_size)
    out = np.empty((batch_size, window, motions[0].shape[1]), dtype=np.float32)
    for row, i in enumerate(idx):
        m = motions[i]
        start = int(rng.integers(0, m.shape[0] - window + 1))
        out[row] = m[start:start + window]
    return torch.from_numpy(out)


def train_vq(dataset: Dataset, config: VqConfig,
             stats: FeatureStats | None = None,
             log_every: int = 50) -> tuple[MotionTokenizer, FeatureStats, list[dict]]:
    """Train the tokenizer on random windows; deterministic given config.seed."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if stats is None:
        stats = compute_stats(dataset)
    motions = [normalize(s.motion, stats) for s in dataset.samples
               if s.motion.shape[0] >= config.window]
    if not motions:
        raise ValueError(f"no sequence is at least {config.window} frames long")

    torch.manual_seed(config.seed)
    model = MotionTokenizer(dataset.dim, config)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    reset_gen = torch.Generator().manual_seed(config.seed + 1)

    opt = torch.optim.Adam(list(model.encoder.parameters()) + list(model.decoder.parameters()),
                           lr=config.lr)
    curve: list[dict] = []
    codes_ready = False
    for step in range(config.iterations):
        batch = _window_batch(motions, config.window, config.batch_size, rng)
        latents = model.encode(batch)
        if not codes_ready:
            # seed the codebook from first-batch latents for immediate coverage
            pool = latents.detach().reshape(-1, config.code_dim)
            pick = torch.randint(0, pool.shape[0], (config.codebook_size,), generator=reset_gen)
            model.codes.copy_(pool[pick])
            model.ema_sums.copy_(model.codes)
            model.ema_counts.fill_(1.0)
            codes_ready = True
        tokens, quantized = model.quantize(latents)
        st = latents + (quantized - latents).detach()
        recon = model.decode(st)[..., : batch.shape[-2], :]
        losses = vq_losses(batch, recon, latents, quantized, config)
        # EMA owns the codebook, so only recon + commitment drive parameters;
        # the summed commitment is averaged per position to stay on the same
        # scale as the mean reconstruction term
        n_positions = latents.shape[0] * latents.shape[1]
        train_loss = losses["recon"] + config.beta * losses["com"] / n_positions
        if not torch.isfinite(train_loss):
            raise TrainingDivergenceError(f"non-finite loss at step {step}")

        warm = min(1.0, (step + 1) / max(1, config.warmup_iters))
        decay = 0.1 if step >= int(0.8 * config.iterations) else 1.0
        for group in opt.param_groups:
            group["lr"] = config.lr * warm * decay
        opt.zero_grad()
        train_loss.backward()
        opt.step()

        with torch.no_grad():
            ema_update(model.codes, model.ema_counts, model.ema_sums,
                       latents.detach(), tokens, config.ema_lambda)
            model.usage += torch.bincount(tokens.reshape(-1),
                                          minlength=config.codebook_size).float()
            if (step + 1) % config.reset_interval == 0:
                code_reset(model.codes, model.ema_counts, model.ema_sums, model.usage,
                           config.reset_threshold, latents.detach(), reset_gen)
                model.usage.zero_()

        if step % log_every == 0 or step == config.iterations - 1:
            curve.append({"step": step, "recon": float(losses["recon"].detach()),
                          "emb": float(losses["emb"].detach()),
                          "com": float(losses["com"].detach()),
                          "total": float(losses["total"].detach())})
    return model, stats, curve


def tokenizer_to_checkpoint(model: MotionTokenizer, stats: FeatureStats) -> Checkpoint:
    arrays = state_dict_arrays(model)
    arrays["stats.mean"] = stats.mean.astype("<f4")
    arrays["stats.std"] = stats.std.astype("<f4")
    return Checkpoint(module="tokenizer",
                      config={"dim": model.dim, "vq": asdict(model.config)},
                      arrays=arrays,
                      corpus_stats_hash=stats_hash(stats.mean, stats.std))


def tokenizer_from_checkpoint(ckpt: Checkpoint) -> tuple[MotionTokenizer, FeatureStats]:
    cfg = VqConfig(**ckpt.config["vq"])
    model = MotionTokenizer(ckpt.config["dim"], cfg)
    load_state_dict_arrays(model, ckpt.arrays)
    stats = FeatureStats(mean=ckpt.arrays["stats.mean"], std=ckpt.arrays["stats.std"])
    model.eval()
    return model, stats
