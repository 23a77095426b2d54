"""Generation evaluation: FID, R-precision, multimodal distance, diversity,
multimodality, and the end-to-end protocol that scores generated motions with
the aligned feature extractor.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .alignment import AlignedEncoder
from .captioner import Captioner, bert_score
from .corpus import Dataset
from .generator import GenerationConfig, MaskedMotionModel, generate_batch
from .seeding import derive_seed

EIG_CLIP = 1e-6
REPORT_SCHEMA_VERSION = 1


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    count: int


def gaussian_summary(feats: np.ndarray) -> GaussianSummary:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("need a (N >= 2) x p feature matrix")
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov)
    return GaussianSummary(mean=feats.mean(axis=0), cov=0.5 * (cov + cov.T),
                           count=feats.shape[0])


def _sqrt_eigvals(m: np.ndarray) -> np.ndarray:
    vals = np.linalg.eigvalsh(0.5 * (m + m.T))
    if (vals < -EIG_CLIP).any():
        raise ValueError(f"matrix has eigenvalue {vals.min():.3e} below -{EIG_CLIP}")
    return np.sqrt(np.clip(vals, 0.0, None))


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    if (vals < -EIG_CLIP).any():
        raise ValueError(f"matrix has eigenvalue {vals.min():.3e} below -{EIG_CLIP}")
    root = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * root) @ vecs.T


def fid(real_feats: np.ndarray, gen_feats: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of the two feature sets."""
    a, b = gaussian_summary(real_feats), gaussian_summary(gen_feats)
    if a.mean.shape != b.mean.shape:
        raise ValueError("feature dimensions must match")
    diff = a.mean - b.mean
    # trace of sqrtm(S1 S2) via the symmetric product A S2 A with A = sqrtm(S1)
    root_a = _sqrtm_psd(a.cov)
    cross = _sqrt_eigvals(root_a @ b.cov @ root_a).sum()
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(value, 0.0)


def pairwise_best_similarity(motion_feats: np.ndarray, text_feats: np.ndarray) -> np.ndarray:
    """(N, L, p) x (M, p) -> (N, M) max-over-query-rows similarity."""
    return np.einsum("nlp,mp->nlm", motion_feats, text_feats).max(axis=1)


def reduce_motion_features(motion_feats: np.ndarray, text_feats: np.ndarray | None,
                           reduction: str = "best") -> np.ndarray:
    """Reduce per-query feature sets to one vector per motion.

    "best" picks the query row most similar to the paired text; "mean" averages
    the rows (text_feats may be None in that case).
    """
    if reduction == "mean":
        return motion_feats.mean(axis=1)
    if reduction != "best":
        raise ValueError("reduction must be 'best' or 'mean'")
    if text_feats is None:
        raise ValueError("best-row reduction requires paired text features")
    sims = np.einsum("nlp,np->nl", motion_feats, text_feats)
    rows = sims.argmax(axis=1)
    return motion_feats[np.arange(motion_feats.shape[0]), rows]


def r_precision(text_feats: np.ndarray, motion_feats: np.ndarray, pool_size: int = 32,
                ks: tuple[int, ...] = (1, 2, 3), seed: int = 0,
                groups: list | None = None) -> dict[int, float]:
    """Rank each motion's true text within a seeded pool of mismatched texts.

    When groups are given, distractors are drawn from different groups only
    (texts of a matching attribute tuple describe the motion equally well).
    """
    N = text_feats.shape[0]
    if motion_feats.shape[0] != N:
        raise ValueError("paired feature counts must match")
    rng = np.random.Generator(np.random.PCG64(seed))
    hits = {k: 0 for k in ks}
    for i in range(N):
        if groups is not None:
            pool = np.array([j for j in range(N) if groups[j] != groups[i]])
        else:
            pool = np.array([j for j in range(N) if j != i])
        if pool.size < pool_size - 1:
            raise ValueError(f"not enough mismatched candidates for pool_size={pool_size}")
        distractors = rng.choice(pool, size=pool_size - 1, replace=False)
        cands = np.concatenate([[i], distractors])
        sims = (motion_feats[i] @ text_feats[cands].T).max(axis=0)
        order = np.argsort(-sims, kind="stable")
        rank = int(np.nonzero(order == 0)[0][0])
        for k in ks:
            hits[k] += rank < k
    return {k: hits[k] / N for k in ks}


def mm_dist(text_feats: np.ndarray, motion_feats: np.ndarray,
            reduction: str = "best") -> float:
    """Mean Euclidean distance between paired text and (reduced) motion features."""
    if text_feats.shape[0] != motion_feats.shape[0]:
        raise ValueError("paired feature counts must match")
    vecs = reduce_motion_features(motion_feats, text_feats, reduction) \
        if motion_feats.ndim == 3 else motion_feats
    return float(np.linalg.norm(vecs - text_feats, axis=-1).mean())


def diversity(feats: np.ndarray, num_pairs: int, seed: int = 0) -> float:
    """Mean distance over seeded random disjoint pairs."""
    N = feats.shape[0]
    if 2 * num_pairs > N:
        raise ValueError(f"{num_pairs} disjoint pairs need at least {2 * num_pairs} samples")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(N)
    x = feats[perm[:num_pairs]]
    y = feats[perm[num_pairs:2 * num_pairs]]
    return float(np.linalg.norm(x - y, axis=-1).mean())


def multimodality(per_prompt_feats: list[np.ndarray], num_pairs: int, seed: int = 0) -> float:
    """Within-prompt diversity of repeated generations, averaged over prompts."""
    if not per_prompt_feats:
        raise ValueError("no prompts given")
    vals = [diversity(f, num_pairs, seed=derive_seed(seed, i))
            for i, f in enumerate(per_prompt_feats)]
    return float(np.mean(vals))


@dataclass
class EvalConfig:
    repeats: int = 2
    pool_size: int = 32
    diversity_pairs: int = 64
    mm_prompts: int = 8
    mm_per_prompt: int = 4
    mm_pairs: int = 2
    reduction: str = "best"
    seed: int = 0


def _ci(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    half = 0.0 if arr.size < 2 else 1.96 * arr.std(ddof=1) / np.sqrt(arr.size)
    return {"mean": float(arr.mean()), "ci": float(half), "values": [float(v) for v in values]}


def evaluate_generation(dataset: Dataset, encoder: AlignedEncoder,
                        model: MaskedMotionModel, gen_config: GenerationConfig,
                        eval_config: EvalConfig,
                        captioner: Captioner | None = None) -> dict:
    """Generate one motion per test text over several seeded repeats and score
    them against the real pool; the ground-truth row calibrates every metric."""
    if len(dataset) < max(eval_config.pool_size, 2 * eval_config.diversity_pairs):
        raise ValueError("dataset too small for the requested pool/diversity settings")
    texts = [s.texts[0] for s in dataset.samples]
    groups = [tuple(sorted(s.attributes.items())) if s.attributes else i
              for i, s in enumerate(dataset.samples)]
    text_feats = encoder.text_features_batch(texts)
    real_sets = encoder.motion_features_batch([s.motion for s in dataset.samples])
    real_vecs = reduce_motion_features(real_sets, text_feats, eval_config.reduction)

    gt_row = {
        "fid": fid(real_vecs, real_vecs),
        "mm_dist": mm_dist(text_feats, real_sets, eval_config.reduction),
        "diversity": diversity(real_vecs, eval_config.diversity_pairs,
                               seed=derive_seed(eval_config.seed, "div", "real")),
    }
    rp = r_precision(text_feats, real_sets, eval_config.pool_size,
                     seed=derive_seed(eval_config.seed, "rp", "real"), groups=groups)
    for k, v in rp.items():
        gt_row[f"r_precision_top{k}"] = v
    if captioner is not None:
        caps = captioner.caption_batch([s.motion for s in dataset.samples])
        scores = [bert_score(c, t, encoder.text_token_embeddings).f1
                  for c, t in zip(caps, texts)]
        gt_row["bertscore"] = float(np.mean(scores))

    per_metric: dict[str, list[float]] = {}
    for rep in range(eval_config.repeats):
        seeds = [derive_seed(eval_config.seed, "gen", rep, s.id) for s in dataset.samples]
        motions = generate_batch(texts, encoder, model, gen_config, seeds)
        gen_sets = encoder.motion_features_batch(motions)
        gen_vecs = reduce_motion_features(gen_sets, text_feats, eval_config.reduction)
        row = {
            "fid": fid(real_vecs, gen_vecs),
            "mm_dist": mm_dist(text_feats, gen_sets, eval_config.reduction),
            "diversity": diversity(gen_vecs, eval_config.diversity_pairs,
                                   seed=derive_seed(eval_config.seed, "div", rep)),
        }
        rp = r_precision(text_feats, gen_sets, eval_config.pool_size,
                         seed=derive_seed(eval_config.seed, "rp", rep), groups=groups)
        for k, v in rp.items():
            row[f"r_precision_top{k}"] = v
        if captioner is not None:
            caps = captioner.caption_batch(motions)
            scores = [bert_score(c, t, encoder.text_token_embeddings).f1
                      for c, t in zip(caps, texts)]
            row["bertscore"] = float(np.mean(scores))
        for key, val in row.items():
            per_metric.setdefault(key, []).append(float(val))

    # multimodality: repeated generations for a prompt subset
    n_prompts = min(eval_config.mm_prompts, len(texts))
    per_prompt = []
    for i in range(n_prompts):
        reps = [texts[i]] * eval_config.mm_per_prompt
        seeds = [derive_seed(eval_config.seed, "mm", i, j)
                 for j in range(eval_config.mm_per_prompt)]
        motions = generate_batch(reps, encoder, model, gen_config, seeds)
        sets = encoder.motion_features_batch(motions)
        tf = np.repeat(text_feats[i][None, :], eval_config.mm_per_prompt, axis=0)
        per_prompt.append(reduce_motion_features(sets, tf, eval_config.reduction))
    mm_value = multimodality(per_prompt, eval_config.mm_pairs,
                             seed=derive_seed(eval_config.seed, "mmdiv"))

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "num_samples": len(dataset),
        "generation": asdict(gen_config),
        "evaluation": asdict(eval_config),
        "ground_truth": {k: float(v) for k, v in gt_row.items()},
        "generated": {key: _ci(vals) for key, vals in per_metric.items()},
    }
    report["generated"]["multimodality"] = {"mean": mm_value, "ci": 0.0, "values": [mm_value]}
    return report
