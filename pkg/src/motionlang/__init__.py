"""Language-motion toolkit: discrete motion tokenization, text-motion alignment,
masked-prediction generation, retrieval, captioning, and evaluation metrics."""

from .corpus import (Dataset, FeatureStats, MotionSequence, Sample, SynthConfig, Vocab,
                     compute_stats, denormalize, load_dataset, normalize, synth_generate,
                     write_dataset)
from .vqvae import (MotionTokenizer, VqConfig, code_reset, ema_update, quantize,
                    train_vq, vq_losses)
from .alignment import (AlignedEncoder, AlignmentModel, AttentionMaskMode, LampConfig,
                        contrastive_loss, matching_loss, mgt_loss, pair_similarity,
                        tgm_loss, train_lamp)
from .generator import (CorruptionPolicy, GenerationConfig, MaskedMotionModel, T2MConfig,
                        attention_rank_check, cfg_mix, corrupt, generate, iterative_decode,
                        mask_ratio, masked_nll, train_t2m)
from .retrieval import FeatureIndex, RetrievalResult, build_index, recall_at_k, retrieve
from .captioner import (BertScoreResult, Captioner, CaptionerConfig, CaptionerModel,
                        bert_score, train_m2t)
from .metrics import (EvalConfig, diversity, evaluate_generation, fid, mm_dist,
                      multimodality, r_precision)
from .config import RunConfig, resolve_config

__version__ = "0.1.0"
