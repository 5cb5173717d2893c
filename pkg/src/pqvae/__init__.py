"""Product-quantized autoencoders with EMA codebooks, on a numpy autodiff core."""

from .quantize import (
    Codebook,
    FiniteScalarQuantizer,
    IdentityQuantizer,
    MetricsReport,
    ProductQuantizer,
    QuantizeResult,
    ResidualQuantizer,
    VectorQuantizer,
    codebook_perplexity,
    codebook_usage,
    compose_codebook,
    compose_index,
    decompose_index,
    ema_update,
    fsq_quantize,
    pq_quantize,
    rvq_quantize,
    straight_through,
    vq_lookup,
)
from .model import Autoencoder, ModelConfig
from .train import LossWeights, ScheduleConfig, TrainConfig, Trainer, lambda_schedule, loss_dual, run_training
from .data import SynthConfig, gen_synthetic_corpus, read_features, write_features

__version__ = "0.1.0"
