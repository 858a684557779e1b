"""The toy vision-language model: glyph encoder, adaptor, causal decoder.

Teacher and student share the architecture; the student additionally owns a
token compressor and consumes ceil(n/r) visual tokens. Position information
enters through fixed sinusoidal encodings over explicit position ids:
visual tokens take the id of their source cell (window start after
compression), and text/target ids are identical for teacher and student, so
their output logits align position-wise on all supervised text positions.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from . import vocab
from .compression import CompressionSpec, build_compressor, pad_to_multiple
from .data import INSTR_LEN, GlyphImage, Sample


class ContextOverflowError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_vit: int = 32
    d_llm: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    grid_h: int = 8
    grid_w: int = 8
    max_seq: int = 160

    def __post_init__(self):
        if self.d_llm % self.n_heads != 0:
            raise ValueError("d_llm must be divisible by n_heads")
        if self.grid_h * self.grid_w < 2:
            raise ValueError("need at least 2 visual tokens")
        if self.vocab_size < vocab.VOCAB_USED:
            raise ValueError(f"vocab_size must be >= {vocab.VOCAB_USED}")

    @property
    def n_visual(self) -> int:
        return self.grid_h * self.grid_w

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**{k: int(v) for k, v in d.items()})


_noise_cache: dict[tuple[int, int, float, int], np.ndarray] = {}


def patch_noise(image: GlyphImage, d_vit: int) -> np.ndarray:
    """Per-patch additive noise, fully determined by the image's seed."""
    n = image.grid_h * image.grid_w
    key = (image.noise_seed, n, image.noise_sigma, d_vit)
    cached = _noise_cache.get(key)
    if cached is None:
        rng = np.random.Generator(np.random.PCG64(image.noise_seed))
        cached = rng.standard_normal((n, d_vit)).astype(np.float32) * image.noise_sigma
        if len(_noise_cache) < 200_000:
            _noise_cache[key] = cached
    return cached


def sinusoidal_encoding(position_ids: torch.Tensor, d: int) -> torch.Tensor:
    """Fixed sin/cos codes over a half-octave period ladder (2, 2.83, 4, ...).

    Power-of-two periods line up with the glyph grid and the compression
    ratios: the period-2 pair is a parity bit, period grid_w reads out the
    column, period grid_h*grid_w the row.
    """
    if d % 2 != 0:
        raise ValueError("embedding width must be even for sin/cos codes")
    half = d // 2
    periods = torch.pow(2.0, 1.0 + 0.5 * torch.arange(half, dtype=torch.float32))
    freqs = 2.0 * math.pi / periods
    angles = position_ids.float().unsqueeze(-1) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


_sincos_cache: dict[tuple, torch.Tensor] = {}


def _cached_encoding(position_ids: torch.Tensor, d: int) -> torch.Tensor:
    """Memoized sinusoidal codes for 1-D id vectors (layouts repeat per batch)."""
    key = (d,) + tuple(position_ids.tolist())
    enc = _sincos_cache.get(key)
    if enc is None:
        enc = sinusoidal_encoding(position_ids, d)
        if len(_sincos_cache) < 4096:
            _sincos_cache[key] = enc
    return enc


class GlyphEncoder(nn.Module):
    """Stand-in ViT: one embedding row per glyph id, plus the patch noise."""

    def __init__(self, d_vit: int, generator: torch.Generator | None = None):
        super().__init__()
        emb = torch.empty(vocab.MAX_ALPHABET, d_vit)
        emb.normal_(0.0, 1.0, generator=generator)
        self.glyph_emb = nn.Parameter(emb)

    def forward(self, grids: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        if grids.min() < 0 or grids.max() >= self.glyph_emb.shape[0]:
            raise ValueError("glyph id out of alphabet")
        b = grids.shape[0]
        flat = grids.reshape(b, -1)
        return self.glyph_emb[flat] + noise


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, generator: torch.Generator | None = None):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.qkv = _linear(d, 3 * d, generator)
        self.proj = _linear(d, d, generator)

    def forward(self, x: torch.Tensor, need_attn: bool = False):
        b, s, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(b, s, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(b, s, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(b, s, self.n_heads, self.d_head).transpose(1, 2)
        if need_attn:
            scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
            causal = torch.triu(torch.ones(s, s, dtype=torch.bool), diagonal=1)
            scores = scores.masked_fill(causal, float("-inf"))
            attn = torch.softmax(scores, dim=-1)
            out = attn @ v
        else:
            attn = None
            out = torch.nn.functional.scaled_dot_product_attention(q, k, v, is_causal=True)
        out = out.transpose(1, 2).reshape(b, s, d)
        out = self.proj(out)
        return out, attn


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, generator: torch.Generator | None = None):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads, generator)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(
            _linear(d, 4 * d, generator), nn.GELU(), _linear(4 * d, d, generator)
        )

    def forward(self, x: torch.Tensor, need_attn: bool = False):
        a, attn = self.attn(self.ln1(x), need_attn=need_attn)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, attn


class Decoder(nn.Module):
    """Pre-LN causal transformer over embeddings + sinusoidal position codes.

    Coordinate-token embeddings start at the position code of the cell they
    refer to (rK at the row-K start id, cV at column id V), so spatial
    references share the decoder's own reference frame from step zero."""

    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        d = config.d_llm
        emb = torch.empty(config.vocab_size, d)
        emb.normal_(0.0, 1.0, generator=generator)
        with torch.no_grad():
            for k in range(min(vocab.MAX_COORD, config.grid_h)):
                emb[vocab.keyword_token(f"r{k}")] = sinusoidal_encoding(
                    torch.tensor(float(k * config.grid_w)), d)
            for v in range(min(vocab.MAX_COORD, config.grid_w)):
                emb[vocab.keyword_token(f"c{v}")] = sinusoidal_encoding(
                    torch.tensor(float(v)), d)
        self.token_emb = nn.Parameter(emb)
        self.blocks = nn.ModuleList(
            Block(d, config.n_heads, generator) for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(d)
        self.head = _linear(d, config.vocab_size, generator, bias=False)

    def forward(self, inputs_embeds: torch.Tensor, position_ids: torch.Tensor,
                need_attn: bool = False, logits_from: int = 0):
        """position_ids is (S,) shared across batch rows, or (B, S) when rows
        differ (pruning); logits_from restricts the unembedding to positions
        >= that index."""
        d = inputs_embeds.shape[-1]
        if position_ids.dim() == 1:
            enc = _cached_encoding(position_ids, d).unsqueeze(0)
        else:
            enc = sinusoidal_encoding(position_ids, d)
        x = inputs_embeds + enc
        attns = []
        for block in self.blocks:
            x, attn = block(x, need_attn=need_attn)
            if need_attn:
                attns.append(attn)
        logits = self.head(self.ln_f(x[:, logits_from:, :]))
        return logits, attns


def _linear(d_in: int, d_out: int, generator: torch.Generator | None,
            bias: bool = True) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, bias=bias)
    bound = 1.0 / math.sqrt(d_in)
    layer.weight.data.uniform_(-bound, bound, generator=generator)
    if bias:
        layer.bias.data.zero_()
    return layer


@dataclass
class Batch:
    """Tensors for one batch of samples sharing a grid shape."""

    grids: torch.Tensor        # (B, grid_h, grid_w) int64
    noise: torch.Tensor        # (B, n, d_vit) float32
    instr: torch.Tensor        # (B, INSTR_LEN) int64
    tgt_in: torch.Tensor       # (B, Ymax) int64, gold targets fed back in
    tgt_out: torch.Tensor      # (B, Ymax + 1) int64, targets + EOS
    tgt_mask: torch.Tensor     # (B, Ymax + 1) bool, true on supervised rows
    samples: list = field(default_factory=list, repr=False)


def make_batch(samples: list[Sample], config: ModelConfig) -> Batch:
    b = len(samples)
    grids = torch.stack([torch.from_numpy(s.x_v.as_array()) for s in samples])
    if grids.shape[1] != config.grid_h or grids.shape[2] != config.grid_w:
        raise ValueError(
            f"sample grid {tuple(grids.shape[1:])} does not match config "
            f"({config.grid_h}, {config.grid_w})"
        )
    noise = torch.from_numpy(
        np.stack([patch_noise(s.x_v, config.d_vit) for s in samples])
    )
    instr = torch.tensor([s.instruction_ids() for s in samples], dtype=torch.int64)
    tgt = [s.target_ids() for s in samples]
    y_max = max(len(t) for t in tgt)
    tgt_in = torch.full((b, y_max), vocab.PAD, dtype=torch.int64)
    tgt_out = torch.full((b, y_max + 1), vocab.PAD, dtype=torch.int64)
    tgt_mask = torch.zeros(b, y_max + 1, dtype=torch.bool)
    for i, t in enumerate(tgt):
        tgt_in[i, : len(t)] = torch.tensor(t, dtype=torch.int64)
        tgt_out[i, : len(t)] = torch.tensor(t, dtype=torch.int64)
        tgt_out[i, len(t)] = vocab.EOS
        tgt_mask[i, : len(t) + 1] = True
    return Batch(grids, noise, instr, tgt_in, tgt_out, tgt_mask, samples=list(samples))


class TinyVLM(nn.Module):
    """Teacher or student model handle: config + vit/adaptor/decoder(/compress)."""

    def __init__(self, config: ModelConfig, role: str = "teacher",
                 compression: CompressionSpec | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if role not in ("teacher", "student"):
            raise ValueError(f"role must be teacher or student, got {role}")
        if role == "student" and compression is None:
            raise ValueError("student requires a compression spec")
        if role == "teacher" and compression is not None:
            raise ValueError("teacher must not carry a compression module")
        self.config = config
        self.role = role
        self.compression = compression
        self.vit = GlyphEncoder(config.d_vit, generator)
        self.adaptor = _linear(config.d_vit, config.d_llm, generator)
        self.decoder = Decoder(config, generator)
        if compression is not None:
            self.compress = build_compressor(
                compression, config.d_vit, config.n_visual, generator
            )

    # ----- forward pieces -------------------------------------------------

    def encode_image(self, grids: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        """Glyph grid batch -> (B, n, d_vit) visual token sequence."""
        return self.vit(grids, noise)

    def visual_embeds(self, grids: torch.Tensor, noise: torch.Tensor):
        """Returns (B, m, d_llm) decoder-ready visual embeddings and their ids."""
        tokens = self.encode_image(grids, noise)
        n = tokens.shape[1]
        if self.role == "student":
            r = self.compression.ratio
            tokens = pad_to_multiple(tokens, r)
            tokens = self.compress(tokens)
            ids = torch.arange(tokens.shape[1], dtype=torch.float32) * r
        else:
            ids = torch.arange(n, dtype=torch.float32)
        return self.adaptor(tokens), ids

    def prefix_embeds(self, batch: Batch):
        """Visual + instruction embeddings with position ids (generation prefix)."""
        vis, vis_ids = self.visual_embeds(batch.grids, batch.noise)
        instr_emb = self.decoder.token_emb[batch.instr]
        n = self.config.n_visual
        instr_ids = n + torch.arange(batch.instr.shape[1], dtype=torch.float32)
        embeds = torch.cat([vis, instr_emb], dim=1)
        ids = torch.cat([vis_ids, instr_ids])
        return embeds, ids

    def forward_batch(self, batch: Batch, need_attn: bool = False):
        """Teacher-forced pass; logits on the supervised rows (B, Ymax+1, V)."""
        prefix, prefix_ids = self.prefix_embeds(batch)
        return self.forward_with_prefix(prefix, prefix_ids, batch, need_attn=need_attn)

    def forward_with_prefix(self, prefix: torch.Tensor, prefix_ids: torch.Tensor,
                            batch: Batch, need_attn: bool = False):
        """Teacher-forced pass over an externally built (visual+instr) prefix."""
        p = prefix.shape[1]
        y_max = batch.tgt_in.shape[1]
        n = self.config.n_visual
        if n + INSTR_LEN + y_max + 1 > self.config.max_seq:
            raise ContextOverflowError(
                f"context overflow: {n + INSTR_LEN + y_max + 1} > {self.config.max_seq}"
            )
        tgt_emb = self.decoder.token_emb[batch.tgt_in]
        tgt_ids = n + INSTR_LEN + torch.arange(y_max, dtype=torch.float32)
        embeds = torch.cat([prefix, tgt_emb], dim=1)
        if prefix_ids.dim() == 2:
            b = prefix.shape[0]
            ids = torch.cat([prefix_ids, tgt_ids.unsqueeze(0).expand(b, -1)], dim=1)
        else:
            ids = torch.cat([prefix_ids, tgt_ids])
        logits, attns = self.decoder(embeds, ids, need_attn=need_attn,
                                     logits_from=0 if need_attn else p - 1)
        supervised = logits[:, p - 1 :, :] if need_attn else logits
        return (supervised, attns) if need_attn else supervised

    @torch.no_grad()
    def decode_batch(self, batch: Batch, max_new: int, temperature: float = 0.0,
                     generator: torch.Generator | None = None) -> list[list[int]]:
        """Free-running decode from the (visual, instruction) prefix.

        temperature 0 means greedy argmax; otherwise softmax sampling.
        Returns the emitted tokens per sample, truncated before EOS.
        """
        prefix, prefix_ids = self.prefix_embeds(batch)
        return self.decode_with_prefix(prefix, prefix_ids, max_new,
                                       temperature=temperature, generator=generator)

    @torch.no_grad()
    def decode_with_prefix(self, prefix: torch.Tensor, prefix_ids: torch.Tensor,
                           max_new: int, temperature: float = 0.0,
                           generator: torch.Generator | None = None) -> list[list[int]]:
        b = prefix.shape[0]
        n = self.config.n_visual
        embeds, ids = prefix, prefix_ids
        out = torch.full((b, max_new), vocab.PAD, dtype=torch.int64)
        done = torch.zeros(b, dtype=torch.bool)
        emitted = torch.zeros(b, dtype=torch.int64)
        for step in range(max_new):
            if n + INSTR_LEN + step + 1 > self.config.max_seq:
                break
            logits, _ = self.decoder(embeds, ids, logits_from=embeds.shape[1] - 1)
            last = logits[:, -1, :]
            if temperature > 0:
                probs = torch.softmax(last / temperature, dim=-1)
                nxt = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
            else:
                nxt = last.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, vocab.PAD), nxt)
            out[:, step] = nxt
            done |= nxt == vocab.EOS
            emitted += (~done).long()
            if bool(done.all()):
                break
            new_id = float(n + INSTR_LEN + step)
            if ids.dim() == 2:
                ids = torch.cat([ids, torch.full((b, 1), new_id)], dim=1)
            else:
                ids = torch.cat([ids, torch.tensor([new_id])])
            embeds = torch.cat([embeds, self.decoder.token_emb[nxt].unsqueeze(1)], dim=1)
        return [out[i, : int(emitted[i])].tolist() for i in range(b)]


def build_model(config: ModelConfig, role: str = "teacher",
                compression: CompressionSpec | None = None,
                seed: int = 0) -> TinyVLM:
    gen = torch.Generator().manual_seed(seed)
    return TinyVLM(config, role=role, compression=compression, generator=gen)


def init_student_from_teacher(teacher: TinyVLM, spec: CompressionSpec,
                              seed: int = 0) -> TinyVLM:
    """Clone the teacher into a compressed student.

    vit/decoder are bit-copies marked frozen; the adaptor copy and the fresh
    compressor are the only learnable parts. The teacher is left untouched.
    """
    spec.validate(teacher.config.n_visual)
    gen = torch.Generator().manual_seed(seed)
    student = TinyVLM(teacher.config, role="student", compression=spec, generator=gen)
    student.vit.load_state_dict(copy.deepcopy(teacher.vit.state_dict()))
    student.adaptor.load_state_dict(copy.deepcopy(teacher.adaptor.state_dict()))
    student.decoder.load_state_dict(copy.deepcopy(teacher.decoder.state_dict()))
    for p in student.vit.parameters():
        p.requires_grad_(False)
    for p in student.decoder.parameters():
        p.requires_grad_(False)
    for p in student.adaptor.parameters():
        p.requires_grad_(True)
    for p in student.compress.parameters():
        p.requires_grad_(True)
    return student
