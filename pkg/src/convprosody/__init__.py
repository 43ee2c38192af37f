"""Conversational prosody prediction from multimodal dialogue history.

Four contrastive interaction modules over a dialogue's sentence-level
text and speech features condition a phoneme-level pitch/energy/duration
predictor for the next utterance. Everything runs on a small built-in
autodiff engine; a synthetic dialogue generator with known cross-modal
latent dynamics provides the training corpus.
"""

from .checkpoint import build_model, load_checkpoint, save_checkpoint
from .corpus import (
    DialogueRecord,
    GeneratorConfig,
    UtteranceFeatures,
    generate_corpus,
    ingest_external,
    read_corpus,
    write_corpus,
)
from .model import Model, ModelConfig, ModuleFlags
from .numerics import Adam, Tensor, backward, grad_check, no_grad, precision
from .pipeline import (
    Checkpoint,
    EvalReport,
    TrainResult,
    evaluate,
    infer,
    retrieval_accuracy,
    split_corpus,
    total_loss,
    train,
)

__version__ = "0.1.0"
