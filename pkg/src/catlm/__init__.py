"""Chunk-compressing transformer with a compressed KV cache, from scratch.

A compressor squeezes each chunk of C tokens into one vector; a decoder
predicts tokens attending to in-chunk prefixes plus all earlier chunk
vectors. Training is a single masked pass over an interleaved sequence;
generation keeps one cache entry per past chunk instead of one per token.
"""

from .blocks import BlockConfig
from .masks import InterleaveLayout, MaskMatrix, MaskSpec, build_mask
from .model import (CatModel, CatModelConfig, ChunkedSequence, chunk,
                    compress_chunks, forward_train, forward_train_naive)
from .generate import DecoderCache, SamplerConfig, generate
from .rng import RngTree
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "BlockConfig",
    "CatModel",
    "CatModelConfig",
    "ChunkedSequence",
    "DecoderCache",
    "InterleaveLayout",
    "MaskMatrix",
    "MaskSpec",
    "RngTree",
    "SamplerConfig",
    "Tensor",
    "build_mask",
    "chunk",
    "compress_chunks",
    "forward_train",
    "forward_train_naive",
    "generate",
    "__version__",
]
