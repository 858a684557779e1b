"""Visual-token compressors: n tokens in, ceil(n/r) tokens out, width preserved.

Three interchangeable variants: a strided 1-d convolution (learnable, the
default), plain mean pooling (parameter-free), and a single cross-attention
query resampler. Ratios are powers of two; r=1 short-circuits to identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

KINDS = ("conv1d", "mean_pool", "query_resampler")


@dataclass(frozen=True)
class CompressionSpec:
    kind: str = "conv1d"
    ratio: int = 2
    num_queries: int | None = None  # query_resampler only; must equal ceil(n/r)

    def validate(self, n_tokens: int | None = None) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown compression kind: {self.kind}")
        if self.ratio < 1 or (self.ratio & (self.ratio - 1)) != 0:
            raise ValueError(f"ratio must be a power of two >= 1, got {self.ratio}")
        if self.kind == "query_resampler" and self.ratio > 1:
            if self.num_queries is None or self.num_queries <= 0:
                raise ValueError("query_resampler needs num_queries > 0")
            if n_tokens is not None and self.num_queries != math.ceil(n_tokens / self.ratio):
                raise ValueError(
                    f"num_queries ({self.num_queries}) must equal "
                    f"ceil(n/r) = {math.ceil(n_tokens / self.ratio)}"
                )

    def out_tokens(self, n_tokens: int) -> int:
        return math.ceil(n_tokens / self.ratio)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ratio": self.ratio, "num_queries": self.num_queries}

    @staticmethod
    def from_dict(d: dict) -> "CompressionSpec":
        return CompressionSpec(
            kind=d["kind"],
            ratio=int(d["ratio"]),
            num_queries=None if d.get("num_queries") is None else int(d["num_queries"]),
        )


def pad_to_multiple(tokens: torch.Tensor, r: int) -> torch.Tensor:
    """Right-pad the token axis with zero embeddings to a multiple of r."""
    n = tokens.shape[-2]
    pad = (-n) % r
    if pad == 0:
        return tokens
    zeros = tokens.new_zeros(*tokens.shape[:-2], pad, tokens.shape[-1])
    return torch.cat([tokens, zeros], dim=-2)


class IdentityCompressor(nn.Module):
    ratio = 1

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens


class StridedConvCompressor(nn.Module):
    """log2(r) stacked stride-2 layers with kernel width equal to the stride.

    Each stage maps non-overlapping token pairs through a full linear mix:
    out[i] = x[2i] @ w0 + x[2i+1] @ w1 + b. Initialization is averaging
    weights plus small noise, so the untrained module starts out as a
    slightly perturbed mean pool.
    """

    def __init__(self, d: int, ratio: int, init_noise: float = 0.01,
                 generator: torch.Generator | None = None):
        super().__init__()
        if ratio < 2 or (ratio & (ratio - 1)) != 0:
            raise ValueError(f"ratio must be a power of two >= 2, got {ratio}")
        self.ratio = ratio
        n_stages = int(math.log2(ratio))
        self.stage_w = nn.ParameterList()
        self.stage_b = nn.ParameterList()
        for _ in range(n_stages):
            w = torch.empty(2, d, d)
            w.normal_(0.0, init_noise, generator=generator)
            w += 0.5 * torch.eye(d).expand(2, d, d)
            self.stage_w.append(nn.Parameter(w))
            self.stage_b.append(nn.Parameter(torch.zeros(d)))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens
        for w, b in zip(self.stage_w, self.stage_b):
            if x.shape[-2] % 2 != 0:
                raise ValueError(f"token count {x.shape[-2]} not divisible by stride 2")
            pairs = x.reshape(*x.shape[:-2], x.shape[-2] // 2, 2, x.shape[-1])
            x = torch.einsum("...ksd,sde->...ke", pairs, w) + b
        return x


class MeanPoolCompressor(nn.Module):
    """Arithmetic mean over non-overlapping windows of r tokens; no parameters."""

    def __init__(self, ratio: int):
        super().__init__()
        if ratio < 2 or (ratio & (ratio - 1)) != 0:
            raise ValueError(f"ratio must be a power of two >= 2, got {ratio}")
        self.ratio = ratio

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        n = tokens.shape[-2]
        if n % self.ratio != 0:
            raise ValueError(f"token count {n} not divisible by ratio {self.ratio}")
        windows = tokens.reshape(*tokens.shape[:-2], n // self.ratio, self.ratio, tokens.shape[-1])
        return windows.mean(dim=-2)


class QueryResampler(nn.Module):
    """A single cross-attention layer: learned queries attend over all tokens."""

    def __init__(self, d: int, num_queries: int, ratio: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        if num_queries <= 0:
            raise ValueError(f"num_queries must be positive, got {num_queries}")
        self.ratio = ratio
        self.d = d
        q = torch.empty(num_queries, d)
        q.normal_(0.0, 1.0, generator=generator)
        self.queries = nn.Parameter(q)
        bound = 1.0 / math.sqrt(d)
        wk = torch.empty(d, d).uniform_(-bound, bound, generator=generator)
        wv = torch.empty(d, d).uniform_(-bound, bound, generator=generator)
        self.w_key = nn.Parameter(wk)
        self.w_value = nn.Parameter(wv)

    def attention(self, tokens: torch.Tensor) -> torch.Tensor:
        keys = tokens @ self.w_key
        scores = torch.einsum("qd,...nd->...qn", self.queries, keys) / math.sqrt(self.d)
        return torch.softmax(scores, dim=-1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        values = tokens @ self.w_value
        return self.attention(tokens) @ values


def build_compressor(spec: CompressionSpec, d: int, n_tokens: int,
                     generator: torch.Generator | None = None) -> nn.Module:
    spec.validate(n_tokens)
    if spec.ratio == 1:
        return IdentityCompressor()
    if spec.kind == "conv1d":
        return StridedConvCompressor(d, spec.ratio, generator=generator)
    if spec.kind == "mean_pool":
        return MeanPoolCompressor(spec.ratio)
    if spec.kind == "query_resampler":
        return QueryResampler(d, spec.num_queries, spec.ratio, generator=generator)
    raise ValueError(f"unknown compression kind: {spec.kind}")
