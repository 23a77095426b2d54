"""Unified command-line entry point for corpus generation, training, generation,
retrieval, captioning, evaluation, and self-checks."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .alignment import AlignedEncoder, lamp_from_checkpoint, lamp_to_checkpoint, train_lamp
from .captioner import (Captioner, bert_score, captioner_from_checkpoint,
                        captioner_to_checkpoint, train_m2t)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, resolve_config, write_resolved_config
from .corpus import Dataset, DatasetError, load_dataset, synth_generate, write_dataset
from .generator import (attention_rank_check, generate, t2m_from_checkpoint,
                        t2m_to_checkpoint, train_t2m)
from .metrics import evaluate_generation, pairwise_best_similarity
from .reporting import (plot_rank_histogram, plot_training_curve, write_eval_report,
                        write_rows_csv)
from .retrieval import (build_index, load_index, rerank_with_matching, retrieve,
                        save_index)
from .selftest import run_selftest
from .vqvae import (TrainingDivergenceError, tokenizer_from_checkpoint,
                    tokenizer_to_checkpoint, train_vq)

log = logging.getLogger("motionlang")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", dest="sets", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="global seed")
    p.add_argument("--out", default=None, help="output path")


def _resolve(args) -> RunConfig:
    return resolve_config(args.config, args.sets, seed=args.seed)


def _load_encoder(tokenizer_path: str, lamp_path: str) -> AlignedEncoder:
    tok_ckpt = load_checkpoint(tokenizer_path, expect_module="tokenizer")
    tokenizer, stats = tokenizer_from_checkpoint(tok_ckpt)
    lamp_ckpt = load_checkpoint(lamp_path, expect_module="alignment")
    if (lamp_ckpt.corpus_stats_hash and tok_ckpt.corpus_stats_hash
            and lamp_ckpt.corpus_stats_hash != tok_ckpt.corpus_stats_hash):
        raise CheckpointError("checkpoint incompatibility: corpus stats hashes differ")
    model, vocab = lamp_from_checkpoint(lamp_ckpt)
    return AlignedEncoder(tokenizer, stats, model, vocab)


def _read_motion(path: str, dim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % (4 * dim) != 0:
        raise DatasetError(f"{path}: byte length {len(raw)} is not a multiple of 4*{dim}")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, dim).copy()


def _write_curve(curve: list[dict], out_path: Path, title: str) -> None:
    if not curve:
        return
    write_rows_csv(out_path.with_suffix(".curve.csv"), curve)
    plot_training_curve(curve, out_path.with_suffix(".curve.png"), title)


# ---- subcommand handlers ---------------------------------------------------------


def cmd_make_synthetic(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out or cfg.out_dir)
    dataset = synth_generate(cfg.corpus)
    manifest = write_dataset(dataset, out)
    write_resolved_config(cfg, out)
    log.info("wrote %d samples to %s", len(dataset), manifest)
    return 0


def cmd_train_vq(args) -> int:
    cfg = _resolve(args)
    dataset = load_dataset(args.data)
    model, stats, curve = train_vq(dataset, cfg.tokenizer)
    out = Path(args.out or (Path(cfg.out_dir) / "tokenizer.ckpt"))
    save_checkpoint(out, tokenizer_to_checkpoint(model, stats))
    _write_curve(curve, out, "tokenizer training")
    write_resolved_config(cfg, out.parent)
    log.info("tokenizer checkpoint: %s", out)
    return 0


def cmd_train_lamp(args) -> int:
    cfg = _resolve(args)
    dataset = load_dataset(args.data)
    tok_ckpt = load_checkpoint(args.tokenizer, expect_module="tokenizer")
    tokenizer, stats = tokenizer_from_checkpoint(tok_ckpt)
    model, vocab, curve = train_lamp(dataset, tokenizer, stats, cfg.alignment)
    out = Path(args.out or (Path(cfg.out_dir) / "lamp.ckpt"))
    save_checkpoint(out, lamp_to_checkpoint(model, vocab, tok_ckpt.corpus_stats_hash))
    _write_curve(curve, out, "alignment training")
    write_resolved_config(cfg, out.parent)
    log.info("alignment checkpoint: %s", out)
    return 0


def cmd_train_t2m(args) -> int:
    cfg = _resolve(args)
    dataset = load_dataset(args.data)
    encoder = _load_encoder(args.tokenizer, args.lamp)
    model, curve = train_t2m(dataset, encoder, cfg.t2m)
    out = Path(args.out or (Path(cfg.out_dir) / "t2m.ckpt"))
    tok_hash = load_checkpoint(args.tokenizer).corpus_stats_hash
    save_checkpoint(out, t2m_to_checkpoint(model, tok_hash))
    _write_curve(curve, out, "generator training")
    write_resolved_config(cfg, out.parent)
    log.info("generator checkpoint: %s", out)
    return 0


def cmd_train_m2t(args) -> int:
    cfg = _resolve(args)
    dataset = load_dataset(args.data)
    encoder = _load_encoder(args.tokenizer, args.lamp)
    model, curve = train_m2t(dataset, encoder, cfg.captioner)
    out = Path(args.out or (Path(cfg.out_dir) / "m2t.ckpt"))
    tok_hash = load_checkpoint(args.tokenizer).corpus_stats_hash
    save_checkpoint(out, captioner_to_checkpoint(model, tok_hash))
    _write_curve(curve, out, "captioner training")
    write_resolved_config(cfg, out.parent)
    log.info("captioner checkpoint: %s", out)
    return 0


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    if args.seed is not None:
        cfg.generator.seed = args.seed
    encoder = _load_encoder(args.tokenizer, args.lamp)
    model = t2m_from_checkpoint(load_checkpoint(args.t2m, expect_module="generator"))
    motion, meta = generate(args.text, encoder, model, cfg.generator)
    out = Path(args.out or (Path(cfg.out_dir) / "motion.f32"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(np.ascontiguousarray(motion, dtype="<f4").tobytes())
    meta_path = Path(args.meta) if args.meta else out.with_suffix(".json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    log.info("wrote %d frames to %s (meta: %s)", motion.shape[0], out, meta_path)
    return 0


def cmd_retrieve(args) -> int:
    encoder = _load_encoder(args.tokenizer, args.lamp)
    index_dir = Path(args.index)
    target = "motion" if args.mode == "text2motion" else "text"
    dataset: Dataset | None = None
    if (index_dir / f"{target}_index.json").exists():
        index = load_index(index_dir, target)
    else:
        if not args.data:
            raise DatasetError("no cached index found; pass --data to build one")
        dataset = load_dataset(args.data)
        index = build_index(dataset, encoder, target)
        save_index(index, index_dir)
    if args.mode == "text2motion":
        query_feat = encoder.text_features(args.query)
    else:
        motion = _read_motion(args.query, encoder.tokenizer.dim)
        query_feat = encoder.motion_features(motion)
    result = retrieve(query_feat, index, args.k)
    if args.rerank_matching:
        if dataset is None:
            dataset = load_dataset(args.data)
        if args.mode == "text2motion":
            result = rerank_with_matching(encoder, dataset, result, query_text=args.query)
        else:
            result = rerank_with_matching(encoder, dataset, result,
                                          query_motion=motion)
        result.ranked = result.ranked[: args.k]
    payload = {"mode": args.mode, "k": args.k,
               "results": [{"id": cid, "score": score} for cid, score in result.ranked]}
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        for rank, (cid, score) in enumerate(result.ranked, 1):
            print(f"{rank:3d}. {cid}  score={score:.4f}")
    return 0


def cmd_caption(args) -> int:
    encoder = _load_encoder(args.tokenizer, args.lamp)
    model = captioner_from_checkpoint(load_checkpoint(args.m2t, expect_module="captioner"))
    motion = _read_motion(args.motion, encoder.tokenizer.dim)
    text = Captioner(encoder, model).caption_motion(motion)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_bertscore(args) -> int:
    encoder = _load_encoder(args.tokenizer, args.lamp)
    result = bert_score(args.candidate, args.reference, encoder.text_token_embeddings)
    print(json.dumps(asdict(result), indent=2))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    if args.repeats is not None:
        cfg.evaluation.repeats = args.repeats
    dataset = load_dataset(args.data)
    ckpts = Path(args.ckpts) if args.ckpts else None
    tok = args.tokenizer or (ckpts / "tokenizer.ckpt" if ckpts else None)
    lamp = args.lamp or (ckpts / "lamp.ckpt" if ckpts else None)
    t2m = args.t2m or (ckpts / "t2m.ckpt" if ckpts else None)
    m2t = args.m2t or (ckpts / "m2t.ckpt" if ckpts and (ckpts / "m2t.ckpt").exists() else None)
    if not (tok and lamp and t2m):
        raise CheckpointError("evaluate needs --ckpts DIR or --tokenizer/--lamp/--t2m paths")
    encoder = _load_encoder(str(tok), str(lamp))
    t2m_ckpt = load_checkpoint(str(t2m), expect_module="generator")
    model = t2m_from_checkpoint(t2m_ckpt)
    if model.cfg.codebook_size != encoder.tokenizer.config.codebook_size:
        raise CheckpointError("checkpoint incompatibility: codebook sizes differ")
    captioner = None
    if m2t:
        captioner = Captioner(encoder, captioner_from_checkpoint(
            load_checkpoint(str(m2t), expect_module="captioner")))
    report = evaluate_generation(dataset, encoder, model, cfg.generator,
                                 cfg.evaluation, captioner=captioner)
    out = Path(args.out or (Path(cfg.out_dir) / "report.json"))
    n_heat = min(32, len(dataset))
    sims = pairwise_best_similarity(
        encoder.motion_features_batch([s.motion for s in dataset.samples[:n_heat]]),
        encoder.text_features_batch([s.texts[0] for s in dataset.samples[:n_heat]]))
    paths = write_eval_report(report, out, similarity=sims)
    write_resolved_config(cfg, out.parent)
    log.info("evaluation report: %s", paths["json"])
    return 0


def cmd_rank_check(args) -> int:
    causal = attention_rank_check(args.n, args.d_head, "causal", args.trials, seed=args.seed or 0)
    bidir = attention_rank_check(args.n, args.d_head, "bidirectional", args.trials,
                                 seed=args.seed or 0)
    payload = {"causal": {k: v for k, v in causal.items() if k != "ranks"},
               "bidirectional": {k: v for k, v in bidir.items() if k != "ranks"}}
    print(json.dumps(payload, indent=2))
    if args.out:
        out = Path(args.out)
        write_rows_csv(out / "ranks.csv",
                       [{"mode": "causal", "trial": i, "rank": r}
                        for i, r in enumerate(causal["ranks"])]
                       + [{"mode": "bidirectional", "trial": i, "rank": r}
                          for i, r in enumerate(bidir["ranks"])])
        plot_rank_histogram(bidir["ranks"], args.n, out / "figures" / "rank_histogram.png",
                            f"bidirectional attention ranks (n={args.n}, d={args.d_head})")
    return 0 if causal["all_full_rank"] else 1


def cmd_selftest(args) -> int:
    return 0 if run_selftest(verbose=True) else 1


# ---- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionlang",
                                     description="language-motion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, **kwargs):
        p = sub.add_parser(name, **kwargs)
        _add_common(p)
        p.set_defaults(handler=handler)
        return p

    add("make-synthetic", cmd_make_synthetic, help="generate a synthetic corpus")

    p = add("train-vq", cmd_train_vq, help="train the motion tokenizer")
    p.add_argument("--data", required=True)

    p = add("train-lamp", cmd_train_lamp, help="train the alignment model")
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)

    p = add("train-t2m", cmd_train_t2m, help="train the text-to-motion generator")
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--lamp", required=True)

    p = add("train-m2t", cmd_train_m2t, help="train the motion captioner")
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--lamp", required=True)

    p = add("generate", cmd_generate, help="generate motion from text")
    p.add_argument("--text", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--lamp", required=True)
    p.add_argument("--t2m", required=True)
    p.add_argument("--meta", default=None, help="metadata JSON sidecar path")

    p = add("retrieve", cmd_retrieve, help="cross-modal retrieval")
    p.add_argument("--mode", choices=("text2motion", "motion2text"), required=True)
    p.add_argument("--query", required=True, help="text string or motion .f32 path")
    p.add_argument("--index", required=True, help="index cache directory")
    p.add_argument("--data", default=None, help="dataset dir (to build the index)")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--lamp", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--json", action="store_true")
    p.add_argument("--rerank-matching", action="store_true",
                   help="rescore the top candidates with the matching head")

    p = add("caption", cmd_caption, help="caption a motion file")
    p.add_argument("--motion", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--lamp", required=True)
    p.add_argument("--m2t", required=True)

    p = add("bertscore", cmd_bertscore, help="embedding-F1 between two texts")
    p.add_argument("--candidate", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--lamp", required=True)

    p = add("evaluate", cmd_evaluate, help="run the generation evaluation protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpts", default=None, help="directory with standard checkpoint names")
    p.add_argument("--tokenizer", default=None)
    p.add_argument("--lamp", default=None)
    p.add_argument("--t2m", default=None)
    p.add_argument("--m2t", default=None)
    p.add_argument("--repeats", type=int, default=None)

    p = add("rank-check", cmd_rank_check, help="attention-matrix rank diagnostics")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--d-head", type=int, default=4)
    p.add_argument("--trials", type=int, default=100)

    add("selftest", cmd_selftest, help="run the property/invariant suite")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return args.handler(args)
    except (ConfigError, DatasetError, CheckpointError, TrainingDivergenceError,
            ValueError) as exc:
        print(f"[{args.command}] error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
