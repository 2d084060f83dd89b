"""Sentence-to-image steganography with a language model.

A secret sentence is tokenized, pushed through a language model to produce
one embedding per image patch, projected into patch space, and added onto
the cover image as an imperceptible residual; the same model decodes the
sentence back from the stego image. The package covers the two-stage
training procedure, dataset tooling, an evaluation bench with text and
image metrics, a classical frequency-domain baseline, and statistical
steganalysis.
"""

from .config import Geometry, ModelConfig, RunConfig, StageConfig, load_run_config
from .pipeline import ParseStatus, StegoSystem, apply_mask, decode_message, embed_message, extract_smes
from .textproto import (
    ByteTokenizer,
    ParseFailure,
    SpecialTokenSet,
    WrappedMessage,
    build_embed_input,
    extract_recovered,
    load_templates,
    register_special_tokens,
    wrap_message,
)
from .training import build_system, load_checkpoint, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "ByteTokenizer",
    "Geometry",
    "ModelConfig",
    "ParseFailure",
    "ParseStatus",
    "RunConfig",
    "SpecialTokenSet",
    "StageConfig",
    "StegoSystem",
    "WrappedMessage",
    "apply_mask",
    "build_embed_input",
    "build_system",
    "decode_message",
    "embed_message",
    "extract_recovered",
    "extract_smes",
    "load_checkpoint",
    "load_run_config",
    "load_templates",
    "register_special_tokens",
    "train_stage1",
    "train_stage2",
    "wrap_message",
    "__version__",
]
