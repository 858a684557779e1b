"""Visual-token compression on a toy vision-language model.

Pipeline: synthesize an OCR-style glyph corpus, train a full-resolution
teacher, self-distill a token-compressed student (only its adaptor and
compressor learn), post-train it with loss-driven task sampling and
rejection-sampled scratchpad data, fuse the resulting checkpoints with
Shapley-weighted merging, and account for the compute savings analytically
and by measurement.
"""

__version__ = "0.1.0"
