"""Sequential recommendation with continuous item tokens and a diffusion head."""

from .bench import DiffusionReconstructor, reconstruct_bench
from .config import RunConfig, load_config
from .data import build_base_embeddings, load_dataset, make_dataset, split_by_timepoint
from .exceptions import CtrecError
from .quantized import RQVAE, VQVAE, PlainVAE
from .recommender import ContinuousTokenRecommender, train_tokenizers
from .retrieval import compute_metrics, hybrid_score, rank_topk
from .synthetic import make_low_rank_embeddings, make_planted_interactions
from .tokenizer import SigmaVAETokenizer

__version__ = "0.1.0"

__all__ = [
    "ContinuousTokenRecommender", "CtrecError", "DiffusionReconstructor", "PlainVAE", "RQVAE", "RunConfig",
    "SigmaVAETokenizer", "VQVAE", "build_base_embeddings", "compute_metrics", "hybrid_score", "load_config",
    "load_dataset", "make_dataset", "make_low_rank_embeddings", "make_planted_interactions", "rank_topk", "reconstruct_bench", "split_by_timepoint", "train_tokenizers",
]
