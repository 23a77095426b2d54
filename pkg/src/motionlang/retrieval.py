"""Bidirectional motion/text retrieval over precomputed aligned features."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .alignment import AlignedEncoder, matching_logits
from .corpus import Dataset, normalize

MODALITIES = ("motion", "text")


@dataclass
class FeatureIndex:
    modality: str
    ids: list[str]
    features: np.ndarray          # (N, L, p) for motion, (N, p) for text
    groups: list | None = None    # optional ground-truth group keys (e.g. attribute tuples)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if len(self.ids) != len(set(self.ids)):
            raise ValueError("index ids must be unique")
        if len(self.ids) != self.features.shape[0]:
            raise ValueError("ids and features disagree in length")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class RetrievalResult:
    query_id: str
    ranked: list[tuple[str, float]]  # (candidate id, score), scores non-increasing


def build_index(dataset: Dataset, encoder: AlignedEncoder, modality: str) -> FeatureIndex:
    """One entry per sample (motion) or per sample's first text (text modality)."""
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}")
    ids = [s.id for s in dataset.samples]
    groups = [tuple(sorted(s.attributes.items())) if s.attributes else None
              for s in dataset.samples]
    if len(dataset) == 0:
        p = encoder.model.cfg.proj_dim
        shape = (0, encoder.model.cfg.num_queries, p) if modality == "motion" else (0, p)
        return FeatureIndex(modality=modality, ids=[], features=np.zeros(shape, np.float32),
                            groups=[])
    if modality == "motion":
        feats = encoder.motion_features_batch([s.motion for s in dataset.samples])
    else:
        feats = encoder.text_features_batch([s.texts[0] for s in dataset.samples])
    return FeatureIndex(modality=modality, ids=ids, features=feats, groups=groups)


def _scores(query: np.ndarray, index: FeatureIndex) -> np.ndarray:
    """Max-over-query-rows similarity between one query and every candidate."""
    if index.modality == "motion":
        # query is a text vector (p,), candidates are (N, L, p)
        return (index.features @ query).max(axis=1)
    # query is a motion feature set (L, p), candidates are (N, p)
    return (query @ index.features.T).max(axis=0)


def retrieve(query_feature: np.ndarray, index: FeatureIndex, k: int,
             query_id: str = "query") -> RetrievalResult:
    """Top-k candidates by similarity; ties broken by ascending candidate id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("index is empty")
    scores = _scores(np.asarray(query_feature, np.float32), index)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    top = order[: min(k, len(order))]
    return RetrievalResult(query_id=query_id,
                           ranked=[(index.ids[i], float(scores[i])) for i in top])


def recall_at_k(results: list[RetrievalResult], ground_truth: dict[str, set], k: int) -> float:
    """Fraction of queries whose any ground-truth id appears in the top k."""
    if not results:
        raise ValueError("no retrieval results")
    hits = 0
    for res in results:
        gt = ground_truth.get(res.query_id)
        if not gt:
            raise ValueError(f"query {res.query_id!r} has no ground truth")
        if any(cid in gt for cid, _ in res.ranked[:k]):
            hits += 1
    return hits / len(results)


def rerank_with_matching(encoder: AlignedEncoder, dataset: Dataset, result: RetrievalResult,
                         query_text: str | None = None, query_motion: np.ndarray | None = None,
                         top_m: int = 32) -> RetrievalResult:
    """Rescore the top candidates with the binary matching head (two-stage retrieval)."""
    by_id = {s.id: s for s in dataset.samples}
    head = result.ranked[:top_m]
    rescored = []
    with torch.no_grad():
        for cid, _ in head:
            cand = by_id[cid]
            if query_text is not None:
                motion, text = cand.motion, query_text
            elif query_motion is not None:
                motion, text = query_motion, cand.texts[0]
            else:
                raise ValueError("provide query_text or query_motion")
            lat = encoder.tokenizer.encode_np(normalize(motion, encoder.stats))
            kv = encoder.model.motion_kv(torch.from_numpy(lat).unsqueeze(0))
            ids = encoder._encode_text_ids(text)
            logit = float(matching_logits(encoder.model, kv, ids)[0])
            rescored.append((cid, logit))
    rescored.sort(key=lambda t: (-t[1], t[0]))
    return RetrievalResult(query_id=result.query_id,
                           ranked=rescored + result.ranked[top_m:])


def retrieval_recall(encoder: AlignedEncoder, dataset: Dataset, direction: str = "text2motion",
                     ks: tuple[int, ...] = (1, 2, 3, 5, 10)) -> dict[int, float]:
    """Recall@k over a dataset pool; ground truth is the set of samples sharing the
    query's attribute tuple (falling back to the paired sample when attributes are absent)."""
    motion_index = build_index(dataset, encoder, "motion")
    text_index = build_index(dataset, encoder, "text")
    groups = motion_index.groups
    gt: dict[str, set] = {}
    for i, s in enumerate(dataset.samples):
        if groups[i] is None:
            gt[s.id] = {s.id}
        else:
            gt[s.id] = {dataset.samples[j].id for j in range(len(dataset))
                        if groups[j] == groups[i]}
    kmax = max(ks)
    results = []
    if direction == "text2motion":
        queries = text_index.features
        index = motion_index
    elif direction == "motion2text":
        queries = motion_index.features
        index = text_index
    else:
        raise ValueError("direction must be text2motion or motion2text")
    for i, s in enumerate(dataset.samples):
        results.append(retrieve(queries[i], index, kmax, query_id=s.id))
    return {k: recall_at_k(results, gt, k) for k in ks}


def save_index(index: FeatureIndex, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / f"{index.modality}_features.npy", index.features)
    meta = {"modality": index.modality, "ids": index.ids,
            "groups": [list(g) if g is not None else None for g in (index.groups or [])]}
    (out / f"{index.modality}_index.json").write_text(json.dumps(meta, sort_keys=True))
    return out


def load_index(in_dir: str | Path, modality: str) -> FeatureIndex:
    base = Path(in_dir)
    meta = json.loads((base / f"{modality}_index.json").read_text())
    feats = np.load(base / f"{modality}_features.npy")
    groups = [tuple(tuple(x) for x in g) if g is not None else None
              for g in meta.get("groups", [])] or None
    return FeatureIndex(modality=meta["modality"], ids=meta["ids"], features=feats,
                        groups=groups)
