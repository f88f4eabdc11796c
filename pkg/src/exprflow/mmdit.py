"""Toy multimodal diffusion transformer with a decoupled condition branch.

Image and text tokens carry separate Q/K/V weights and attend jointly in
one softmax. Fused identity-expression tokens enter through an extra
attention branch that reuses the image queries, attends over the image
keys/values concatenated with the condition keys/values, and is added to
the image-stream output scaled by ``alpha``. At inference, consistent
attention appends tokens sampled from the other batch items to each
item's image keys/values.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import EMBED_DIM, ConditionAdapter, ConditionEmbedding
from .errors import DomainError, ShapeError, VocabularyError
from .toyfaces import STYLE_NAMES


@dataclass
class TokenStreams:
    image: torch.Tensor
    text: torch.Tensor
    cond: torch.Tensor | None = None


@dataclass
class ConsistentAttentionConfig:
    enabled: bool = False
    rho: float = 0.5
    seed: int = 0
    # per-item seed keys; defaults to batch position
    sample_ids: Sequence[int] | None = None


@dataclass
class ModelConfig:
    resolution: int = 32
    channels: int = 3
    patch: int = 4
    width: int = 128
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    n_classes: int = 5
    n_styles: int = len(STYLE_NAMES)
    text_len: int = 2
    cond_tokens: int = 4
    embed_dim: int = EMBED_DIM
    alpha: float = 0.5

    @property
    def vocab_size(self) -> int:
        return 1 + self.n_classes + self.n_styles


class TextVocab:
    """Token ids: 0 is the null token, then K expression names, then S styles."""

    NULL = 0

    def __init__(self, class_names: Sequence[str], style_names: Sequence[str] = STYLE_NAMES):
        self.class_names = list(class_names)
        self.style_names = list(style_names)

    def __len__(self) -> int:
        return 1 + len(self.class_names) + len(self.style_names)

    def expression_token(self, class_id: int) -> int:
        if not 0 <= class_id < len(self.class_names):
            raise VocabularyError(f"class id {class_id} not in vocabulary")
        return 1 + class_id

    def style_token(self, style: int) -> int:
        if not 0 <= style < len(self.style_names):
            raise VocabularyError(f"style {style} not in vocabulary")
        return 1 + len(self.class_names) + style

    def encode(self, class_id: int | None, style: int = 0) -> list[int]:
        exp = self.NULL if class_id is None else self.expression_token(class_id)
        return [exp, self.style_token(style)]

    def class_id(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise VocabularyError(f"unknown expression {name!r}; valid: {', '.join(self.class_names)}") from None


# ----------------------------------------------------------- tokenization


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """B x H x W x C -> B x L x (patch*patch*C), row-major over patches."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(tokens: torch.Tensor, patch: int, height: int, width: int, channels: int) -> torch.Tensor:
    b = tokens.shape[0]
    gh, gw = height // patch, width // patch
    x = tokens.reshape(b, gh, gw, patch, patch, channels)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, height, width, channels)


def sincos_2d(width: int, grid: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine position table, grid*grid x width."""
    quarter = width // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / quarter)
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    parts = []
    for pos in (ys.ravel(), xs.ravel()):
        out = np.outer(pos, omega)
        parts += [np.sin(out), np.cos(out)]
    table = np.concatenate(parts, axis=1)
    if table.shape[1] < width:
        table = np.pad(table, ((0, 0), (0, width - table.shape[1])))
    return torch.from_numpy(table).float()


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half).to(t.dtype)
    args = (1000.0 * t)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


# -------------------------------------------------------------- attention


class JointAttentionWeights(nn.Module):
    """Per-stream Q/K/V projections plus the condition-branch K/V projections."""

    def __init__(self, width: int):
        super().__init__()
        self.q_i = nn.Linear(width, width, bias=False)
        self.k_i = nn.Linear(width, width, bias=False)
        self.v_i = nn.Linear(width, width, bias=False)
        self.q_p = nn.Linear(width, width, bias=False)
        self.k_p = nn.Linear(width, width, bias=False)
        self.v_p = nn.Linear(width, width, bias=False)
        self.k_ie = nn.Linear(width, width, bias=False)
        self.v_ie = nn.Linear(width, width, bias=False)
        nn.init.zeros_(self.k_ie.weight)
        nn.init.zeros_(self.v_ie.weight)

    def condition_parameters(self) -> list[nn.Parameter]:
        return [self.k_ie.weight, self.v_ie.weight]


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int, return_probs: bool = False):
    """Multi-head softmax(QK^T / sqrt(d_head)) V on B x N x d inputs."""
    qh, kh, vh = (_split_heads(x, heads) for x in (q, k, v))
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(qh.shape[-1])
    probs = torch.softmax(scores, dim=-1)
    out = _merge_heads(probs @ vh)
    return (out, probs) if return_probs else out


def joint_attention(
    streams: TokenStreams,
    weights: JointAttentionWeights,
    alpha: float,
    heads: int = 1,
    kv_image: torch.Tensor | None = None,
    cond_mask: torch.Tensor | None = None,
) -> TokenStreams:
    """Joint image/text attention with the additive condition branch.

    ``kv_image`` replaces the image tokens on the key/value side of the base
    branch (consistent attention); queries always come from
    ``streams.image``. ``cond_mask`` (B,) switches the condition branch off
    per item, equivalent to passing no condition for those items.
    """
    xi, xp = streams.image, streams.text
    if xi.shape[-1] != xp.shape[-1]:
        raise ShapeError("image and text streams have different widths")
    kv_i = xi if kv_image is None else kv_image
    li = xi.shape[1]
    q = torch.cat([weights.q_i(xi), weights.q_p(xp)], dim=1)
    k = torch.cat([weights.k_i(kv_i), weights.k_p(xp)], dim=1)
    v = torch.cat([weights.v_i(kv_i), weights.v_p(xp)], dim=1)
    out = attend(q, k, v, heads)
    out_i, out_p = out[:, :li], out[:, li:]

    if alpha != 0 and streams.cond is not None:
        xie = streams.cond
        if xie.shape[-1] != xi.shape[-1]:
            raise ShapeError("condition tokens have a different width")
        q2 = weights.q_i(xi)
        k2 = torch.cat([weights.k_i(xi), weights.k_ie(xie)], dim=1)
        v2 = torch.cat([weights.v_i(xi), weights.v_ie(xie)], dim=1)
        branch = attend(q2, k2, v2, heads)
        if cond_mask is not None:
            branch = branch * cond_mask.to(branch.dtype).view(-1, 1, 1)
        out_i = out_i + alpha * branch
    return TokenStreams(out_i, out_p, streams.cond)


def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def consistent_attention_augment(
    image_tokens: torch.Tensor,
    cfg: ConsistentAttentionConfig,
    block: int = 0,
    t: float = 0.0,
) -> torch.Tensor:
    """Append round(rho * L) tokens drawn from every other batch item.

    Draws for the pair (item j, source k) are seeded from (seed, block, t,
    id_j, id_k), so permuting the batch together with ``sample_ids``
    permutes the result.
    """
    if not cfg.enabled:
        raise DomainError("consistent attention is disabled")
    b, li, _ = image_tokens.shape
    n = min(int(math.floor(cfg.rho * li + 0.5)), li)
    if b == 1 or n == 0:
        return image_tokens
    ids = list(cfg.sample_ids) if cfg.sample_ids is not None else list(range(b))
    if len(ids) != b:
        raise ShapeError(f"{len(ids)} sample ids for batch of {b}")
    step_key = int(round(float(t) * 1e6))
    rows = []
    for j in range(b):
        parts = [image_tokens[j]]
        for k in range(b):
            if k == j:
                continue
            g = torch.Generator().manual_seed(_sub_seed(cfg.seed, block, step_key, ids[j], ids[k]))
            idx = torch.randperm(li, generator=g)[:n]
            parts.append(image_tokens[k, idx])
        rows.append(torch.cat(parts, dim=0))
    return torch.stack(rows)


# ----------------------------------------------------------------- model


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Mlp(nn.Module):
    def __init__(self, width: int, ratio: float):
        super().__init__()
        hidden = int(width * ratio)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class MMDiTBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.heads = heads
        self.attn = JointAttentionWeights(width)
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.out_i = nn.Linear(width, width)
        self.out_p = nn.Linear(width, width)
        self.mlp_i = Mlp(width, mlp_ratio)
        self.mlp_p = Mlp(width, mlp_ratio)
        self.ada_i = nn.Linear(width, 6 * width)
        self.ada_p = nn.Linear(width, 6 * width)
        for lin in (self.ada_i, self.ada_p):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, xi, xp, c, cond, alpha, cond_mask=None, cc=None, block=0, t=0.0):
        si1, ci1, gi1, si2, ci2, gi2 = self.ada_i(F.silu(c)).chunk(6, dim=-1)
        sp1, cp1, gp1, sp2, cp2, gp2 = self.ada_p(F.silu(c)).chunk(6, dim=-1)
        hi = modulate(self.norm1(xi), si1, ci1)
        hp = modulate(self.norm1(xp), sp1, cp1)
        kv = consistent_attention_augment(hi, cc, block, t) if cc is not None and cc.enabled else None
        att = joint_attention(TokenStreams(hi, hp, cond), self.attn, alpha, self.heads, kv, cond_mask)
        xi = xi + gi1.unsqueeze(1) * self.out_i(att.image)
        xp = xp + gp1.unsqueeze(1) * self.out_p(att.text)
        xi = xi + gi2.unsqueeze(1) * self.mlp_i(modulate(self.norm2(xi), si2, ci2))
        xp = xp + gp2.unsqueeze(1) * self.mlp_p(modulate(self.norm2(xp), sp2, cp2))
        return xi, xp


class MMDiT(nn.Module):
    """Velocity network over NHWC images in [-1, 1]."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        if cfg.width % cfg.heads:
            raise ShapeError("width must be divisible by heads")
        self.config = cfg
        d = cfg.width
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        grid = cfg.resolution // cfg.patch
        self.patch_embed = nn.Linear(patch_dim, d)
        self.register_buffer("pos_embed", sincos_2d(d, grid), persistent=False)
        self.text_embed = nn.Embedding(cfg.vocab_size, d)
        self.text_pos = nn.Parameter(torch.zeros(cfg.text_len, d))
        self.t_freq = 256 if d >= 64 else 2 * d
        self.t_mlp = nn.Sequential(nn.Linear(self.t_freq, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(MMDiTBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Linear(d, 2 * d)
        self.final = nn.Linear(d, patch_dim)
        self.adapter = ConditionAdapter(cfg.embed_dim, d, cfg.cond_tokens)
        self._init_weights()

    def _init_weights(self):
        for name, m in self.named_modules():
            if isinstance(m, nn.Linear) and not name.startswith("adapter"):
                nn.init.xavier_uniform_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.normal_(self.text_embed.weight, std=0.02)
        nn.init.normal_(self.text_pos, std=0.02)
        for blk in self.blocks:
            for lin in (blk.ada_i, blk.ada_p, blk.attn.k_ie, blk.attn.v_ie):
                nn.init.zeros_(lin.weight)
                if lin.bias is not None:
                    nn.init.zeros_(lin.bias)
        for lin in (self.final_ada, self.final):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    # parameter groups used by the two training stages
    def condition_parameters(self) -> list[nn.Parameter]:
        params = list(self.adapter.parameters())
        for blk in self.blocks:
            params += blk.attn.condition_parameters()
        return params

    def backbone_parameters(self) -> list[nn.Parameter]:
        cond = {id(p) for p in self.condition_parameters()}
        return [p for p in self.parameters() if id(p) not in cond]

    def condition_tokens(self, id_embedding: torch.Tensor, exp_embedding: torch.Tensor) -> torch.Tensor:
        return self.adapter(id_embedding, exp_embedding)

    def forward(
        self,
        x: torch.Tensor,
        t,
        text_ids: torch.Tensor,
        cond: torch.Tensor | ConditionEmbedding | None = None,
        cc: ConsistentAttentionConfig | None = None,
        cond_mask: torch.Tensor | None = None,
        alpha: float | None = None,
    ) -> torch.Tensor:
        cfg = self.config
        b, h, w, ch = x.shape
        if (h, w, ch) != (cfg.resolution, cfg.resolution, cfg.channels):
            raise ShapeError(f"input {tuple(x.shape)} does not match model resolution {cfg.resolution}")
        if text_ids.min() < 0 or text_ids.max() >= cfg.vocab_size:
            raise VocabularyError(f"text ids outside vocabulary of size {cfg.vocab_size}")
        if isinstance(cond, ConditionEmbedding):
            cond = cond.tokens
        alpha = cfg.alpha if alpha is None else alpha
        t_scalar = float(t) if not isinstance(t, torch.Tensor) or t.ndim == 0 else float(t.reshape(-1)[0])
        t_vec = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(b) if not (
            isinstance(t, torch.Tensor) and t.ndim == 1 and t.shape[0] == b) else t.to(x.dtype)

        xi = self.patch_embed(patchify(x, cfg.patch)) + self.pos_embed.to(x.dtype)
        xp = self.text_embed(text_ids) + self.text_pos
        c = self.t_mlp(timestep_features(t_vec, self.t_freq))
        for i, blk in enumerate(self.blocks):
            xi, xp = blk(xi, xp, c, cond, alpha, cond_mask, cc, i, t_scalar)
        shift, scale = self.final_ada(F.silu(c)).chunk(2, dim=-1)
        out = self.final(modulate(self.final_norm(xi), shift, scale))
        return unpatchify(out, cfg.patch, h, w, ch)


def model_meta(model: MMDiT) -> dict:
    return {"kind": "mmdit", "config": asdict(model.config)}


def build_model(meta: dict) -> MMDiT:
    return MMDiT(ModelConfig(**meta["config"]))
