"""Tiny dual-CLS ViT image encoder, word-level text encoder, and prototype heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import caption_vocabulary
from .errors import NumericError, ValidationError

PAD_ID = 0
UNK_ID = 1


class Tokenizer:
    """Lowercased word-level tokenizer over the caption template vocabulary."""

    def __init__(self, words: list[str] | None = None, max_len: int = 32):
        words = caption_vocabulary() if words is None else words
        self.max_len = max_len
        self.word_to_id = {w: i + 2 for i, w in enumerate(words)}
        self.id_to_word = {i: w for w, i in self.word_to_id.items()}

    @property
    def vocab_size(self) -> int:
        return len(self.word_to_id) + 2

    def tokenize(self, text: str) -> list[int]:
        words = text.lower().split()
        ids = [self.word_to_id.get(w, UNK_ID) for w in words] or [UNK_ID]
        ids = ids[: self.max_len]
        return ids + [PAD_ID] * (self.max_len - len(ids))

    def detokenize(self, ids: list[int]) -> str:
        return " ".join(self.id_to_word.get(i, "<unk>") for i in ids if i != PAD_ID)

    def encode_batch(self, texts: list[str]) -> torch.Tensor:
        return torch.tensor([self.tokenize(t) for t in texts], dtype=torch.long)


@dataclass
class ImageEncoderConfig:
    canvas: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_cls: int = 2

    def __post_init__(self):
        if self.canvas % self.patch_size != 0:
            raise ValidationError("canvas must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise ValidationError("embed_dim must be divisible by heads")
        if self.num_cls != 2:
            raise ValidationError("encoder is defined with exactly 2 CLS tokens")

    @property
    def pos_grid(self) -> tuple[int, int]:
        g = self.canvas // self.patch_size
        return (g, g)


@dataclass
class TextEncoderConfig:
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    max_len: int = 32


@dataclass
class EncoderOutput:
    cls1: torch.Tensor        # (B, D) unit-norm, web/short-caption embedding
    cls2: torch.Tensor        # (B, D) unit-norm, synthetic-caption embedding
    patches: torch.Tensor     # (B, N, D) final patch tokens (post-norm)
    values: torch.Tensor      # (B, N, D) final-layer attention value embeddings
    cls1_raw: torch.Tensor    # (B, D) backbone CLS token before CLIP projection
    cls2_raw: torch.Tensor


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_padding_mask=None, return_values=False):
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            # True marks padding positions to exclude as keys
            attn = attn.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, D)
        out = self.proj(out)
        if return_values:
            # per-head value projections, concatenated, before self.proj
            return out, v.transpose(1, 2).reshape(B, T, D)
        return out


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x, key_padding_mask=None, return_values=False):
        if return_values:
            attn_out, values = self.attn(self.norm1(x), key_padding_mask, return_values=True)
            x = x + attn_out
            x = x + self.mlp(self.norm2(x))
            return x, values
        x = x + self.attn(self.norm1(x), key_padding_mask)
        x = x + self.mlp(self.norm2(x))
        return x


def interpolate_pos_embeddings(pos: torch.Tensor, new_grid: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resample a (rows, cols, D) grid of position embeddings."""
    rows, cols = new_grid
    if rows < 1 or cols < 1:
        raise ValidationError(f"target grid must be positive, got {new_grid}")
    if pos.dim() != 3:
        raise ValidationError("pos must be (rows, cols, dim)")
    if (pos.shape[0], pos.shape[1]) == (rows, cols):
        return pos
    x = pos.permute(2, 0, 1).unsqueeze(0)  # (1, D, r, c)
    x = F.interpolate(x, size=(rows, cols), mode="bilinear", align_corners=True)
    return x.squeeze(0).permute(1, 2, 0)


class ImageEncoder(nn.Module):
    """ViT with two CLS tokens, a learned mask token substituted at the input,
    and value-embedding extraction from the final attention layer."""

    def __init__(self, config: ImageEncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(3, d, config.patch_size, stride=config.patch_size)
        self.cls_tokens = nn.Parameter(torch.zeros(1, 2, d))
        self.cls_pos = nn.Parameter(torch.zeros(1, 2, d))
        rows, cols = config.pos_grid
        self.pos_embed = nn.Parameter(torch.zeros(rows, cols, d))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.blocks = nn.ModuleList(
            Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d)
        self.proj_cls1 = nn.Linear(d, d)
        self.proj_cls2 = nn.Linear(d, d)

        nn.init.trunc_normal_(self.cls_tokens, std=0.02)
        nn.init.trunc_normal_(self.cls_pos, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def set_pos_grid(self, new_grid: tuple[int, int]) -> None:
        """Permanently resample patch position embeddings (resolution switch)."""
        with torch.no_grad():
            self.pos_embed = nn.Parameter(
                interpolate_pos_embeddings(self.pos_embed.data, new_grid))

    def _pos_for(self, grid: tuple[int, int]) -> torch.Tensor:
        pos = self.pos_embed
        if (pos.shape[0], pos.shape[1]) != grid:
            pos = interpolate_pos_embeddings(pos, grid)
        return pos.reshape(1, grid[0] * grid[1], -1)

    def forward(self, images: torch.Tensor, mask: torch.Tensor | None = None) -> EncoderOutput:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValidationError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        B, _, H, W = images.shape
        p = self.config.patch_size
        if H % p or W % p:
            raise ValidationError(f"image size {(H, W)} not divisible by patch size {p}")
        grid = (H // p, W // p)
        n = grid[0] * grid[1]

        x = self.patch_embed(images).flatten(2).transpose(1, 2)  # (B, N, D)
        if mask is not None:
            if mask.shape != (B, n):
                raise ValidationError(f"mask shape {tuple(mask.shape)} != {(B, n)}")
            x = torch.where(mask.bool().unsqueeze(-1), self.mask_token.to(x.dtype), x)
        x = x + self._pos_for(grid)
        cls = self.cls_tokens.expand(B, -1, -1) + self.cls_pos
        x = torch.cat([cls, x], dim=1)

        values = None
        for i, block in enumerate(self.blocks):
            if i == len(self.blocks) - 1:
                x, values = block(x, return_values=True)
            else:
                x = block(x)
        x = self.norm(x)

        cls1_raw, cls2_raw = x[:, 0], x[:, 1]
        cls1 = F.normalize(self.proj_cls1(cls1_raw), dim=-1)
        cls2 = F.normalize(self.proj_cls2(cls2_raw), dim=-1)
        return EncoderOutput(
            cls1=cls1, cls2=cls2,
            patches=x[:, 2:], values=values[:, 2:],
            cls1_raw=cls1_raw, cls2_raw=cls2_raw)

    def joint_patch_embeddings(self, images: torch.Tensor) -> torch.Tensor:
        """Per-patch embeddings in the shared image-text space: final-layer
        value embeddings pushed through the rest of the global pathway
        (attention output projection, final norm, CLS-1 projection), unit
        normalized. (B, N, D)."""
        out = self.forward(images)
        v = self.blocks[-1].attn.proj(out.values)
        return F.normalize(self.proj_cls1(self.norm(v)), dim=-1)


class TextEncoder(nn.Module):
    """Small transformer over word tokens; first-token pooled, unit-normalized."""

    def __init__(self, config: TextEncoderConfig, vocab_size: int):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.token_embed = nn.Embedding(vocab_size, d, padding_idx=PAD_ID)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.max_len, d))
        self.blocks = nn.ModuleList(
            Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d)
        self.proj = nn.Linear(d, d)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 2:
            raise ValidationError("tokens must be (B, T)")
        truncated = tokens.shape[1] > self.config.max_len
        tokens = tokens[:, : self.config.max_len]
        pad = tokens == PAD_ID
        # fully padded rows would make softmax degenerate; keep first position
        pad = pad.clone()
        pad[:, 0] = False
        x = self.token_embed(tokens) + self.pos_embed[:, : tokens.shape[1]]
        for block in self.blocks:
            x = block(x, key_padding_mask=pad)
        x = self.norm(x[:, 0])
        emb = F.normalize(self.proj(x), dim=-1)
        self.last_truncated = truncated
        return emb


class ProjectionHead(nn.Module):
    """3-layer MLP to an L2-normalized bottleneck, then linear map to K prototypes."""

    def __init__(self, in_dim: int, prototype_dim: int = 256, hidden_mult: int = 4,
                 bottleneck_dim: int = 32):
        super().__init__()
        h = in_dim * hidden_mult
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, h), nn.GELU(),
            nn.Linear(h, h), nn.GELU(),
            nn.Linear(h, bottleneck_dim))
        self.prototypes = nn.Linear(bottleneck_dim, prototype_dim, bias=False)
        self.prototype_dim = prototype_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = F.normalize(self.mlp(x), dim=-1)
        return self.prototypes(z)


class StudentModel(nn.Module):
    """Bundle of everything the optimizer trains: image encoder, text encoder,
    shared projection head, and the contrastive logit scale."""

    LOGIT_SCALE_MAX = 100.0

    def __init__(self, image_config: ImageEncoderConfig, text_config: TextEncoderConfig,
                 vocab_size: int, prototype_dim: int = 256):
        super().__init__()
        self.encoder = ImageEncoder(image_config)
        self.text = TextEncoder(text_config, vocab_size)
        self.head = ProjectionHead(image_config.embed_dim, prototype_dim)
        self.logit_scale = nn.Parameter(torch.tensor(1.0 / 0.07))

    def clamped_logit_scale(self) -> torch.Tensor:
        return self.logit_scale.clamp(max=self.LOGIT_SCALE_MAX)


def project_prototypes(embedding: torch.Tensor, head: ProjectionHead,
                       temperature: float, center: torch.Tensor | None = None) -> torch.Tensor:
    """Head logits -> (optionally centered) temperature-scaled softmax."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    logits = head(embedding)
    if center is not None:
        if center.shape[-1] != logits.shape[-1]:
            raise ValidationError("center dimension does not match prototype dimension")
        logits = logits - center
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite prototype logits")
    return F.softmax(logits / temperature, dim=-1)
