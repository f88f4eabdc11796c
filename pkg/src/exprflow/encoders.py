"""Frozen factor encoders, the generic embedder, and condition projection/fusion.

The identity and expression encoders are small conv regressors trained on
the synthetic faces to recover their generating parameters. Their
L2-normalized penultimate features are the embeddings used for
conditioning, losses and metrics. The generic embedder is the bottleneck
of a conv autoencoder and plays the role of an off-the-shelf
self-supervised image embedding.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import ConfigError, ShapeError
from .toyfaces import EXPRESSION_BOUNDS, IDENTITY_BOUNDS, FaceImage, stack_pixels

log = logging.getLogger(__name__)

EMBED_DIM = 64


def _unit(v: float, lo: float, hi: float) -> float:
    return 2.0 * (v - lo) / (hi - lo) - 1.0


def identity_target(images: list[FaceImage]) -> np.ndarray:
    """Regression target for identity: hue on the unit circle, the rest in [-1, 1]."""
    rows = []
    for im in images:
        p = im.identity
        a = 2 * math.pi * p.hue
        rows.append([
            math.cos(a),
            math.sin(a),
            _unit(p.aspect, *IDENTITY_BOUNDS["aspect"]),
            _unit(p.eye_spacing, *IDENTITY_BOUNDS["eye_spacing"]),
            _unit(p.hair_height, *IDENTITY_BOUNDS["hair_height"]),
        ])
    return np.asarray(rows, dtype=np.float32)


def expression_target(images: list[FaceImage]) -> np.ndarray:
    rows = []
    for im in images:
        p = im.expression
        rows.append([_unit(getattr(p, k), *b) for k, b in EXPRESSION_BOUNDS.items()])
    return np.asarray(rows, dtype=np.float32)


def to_nchw(images: torch.Tensor) -> torch.Tensor:
    return images.permute(0, 3, 1, 2)


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1),
        nn.GroupNorm(8, cout),
        nn.SiLU(),
    )


class FactorEncoder(nn.Module):
    """Four conv blocks, global pooling and a linear embedding head.

    ``embed`` returns the L2-normalized embedding; ``predict`` maps it to
    the regressed factor vector, and ``classify`` to class logits when the
    encoder was built with a class head.
    """

    def __init__(self, n_targets: int, n_classes: int = 0, width: int = 32, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.config = {"n_targets": n_targets, "n_classes": n_classes, "width": width, "embed_dim": embed_dim}
        w = width
        self.features = nn.Sequential(
            _conv_block(3, w, 1),
            _conv_block(w, 2 * w, 2),
            _conv_block(2 * w, 3 * w, 2),
            _conv_block(3 * w, 4 * w, 2),
        )
        self.embedding = nn.Linear(4 * w, embed_dim)
        self.head = nn.Linear(embed_dim, n_targets)
        self.class_head = nn.Linear(embed_dim, n_classes) if n_classes else None
        self.stats: dict = {}

    def raw_embed(self, images: torch.Tensor) -> torch.Tensor:
        h = self.features(to_nchw(images) * 2.0 - 1.0)
        return self.embedding(h.mean(dim=(2, 3)))

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.raw_embed(images), dim=-1)

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(images))

    def classify(self, images: torch.Tensor) -> torch.Tensor:
        if self.class_head is None:
            raise ConfigError("encoder has no class head")
        return self.class_head(self.embed(images))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.embed(images)


class GenericEmbedder(nn.Module):
    """Conv autoencoder; the 64-d bottleneck is the embedding."""

    def __init__(self, width: int = 32, embed_dim: int = EMBED_DIM, resolution: int = 32):
        super().__init__()
        self.config = {"width": width, "embed_dim": embed_dim, "resolution": resolution}
        w = width
        s = resolution // 8
        self.encoder = nn.Sequential(
            _conv_block(3, w, 2),
            _conv_block(w, 2 * w, 2),
            _conv_block(2 * w, 2 * w, 2),
            nn.Flatten(),
            nn.Linear(2 * w * s * s, embed_dim),
        )
        self.decoder = nn.Sequential(
            nn.Linear(embed_dim, 2 * w * s * s),
            nn.Unflatten(1, (2 * w, s, s)),
            nn.ConvTranspose2d(2 * w, 2 * w, 4, 2, 1),
            nn.SiLU(),
            nn.ConvTranspose2d(2 * w, w, 4, 2, 1),
            nn.SiLU(),
            nn.ConvTranspose2d(w, 3, 4, 2, 1),
        )
        self.stats: dict = {}

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(to_nchw(images) * 2.0 - 1.0)

    def reconstruct(self, images: torch.Tensor) -> torch.Tensor:
        out = self.decoder(self.embed(images))
        return torch.sigmoid(out).permute(0, 2, 3, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.embed(images)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# ------------------------------------------------------------ projection


class ProjectionNet(nn.Module):
    """Two affine layers with a nonlinearity, reshaped to N tokens, then LayerNorm."""

    def __init__(self, in_dim: int = EMBED_DIM, width: int = 128, n_tokens: int = 4, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * width
        self.in_dim, self.width, self.n_tokens = in_dim, width, n_tokens
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_tokens * width)
        self.norm = nn.LayerNorm(width)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        if embedding.shape[-1] != self.in_dim:
            raise ShapeError(f"embedding dim {embedding.shape[-1]} != projection input {self.in_dim}")
        h = self.fc2(F.gelu(self.fc1(embedding)))
        h = h.reshape(*embedding.shape[:-1], self.n_tokens, self.width)
        return self.norm(h)


class FusionNet(nn.Module):
    """Token-wise sum followed by a two-layer MLP and LayerNorm."""

    def __init__(self, width: int = 128, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * width
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)
        self.norm = nn.LayerNorm(width)

    def forward(self, summed: torch.Tensor) -> torch.Tensor:
        return self.norm(self.fc2(F.gelu(self.fc1(summed))))


@dataclass
class ConditionEmbedding:
    tokens: torch.Tensor
    source_id: object = None
    source_exp: object = None


def project(embedding: torch.Tensor, net: ProjectionNet) -> torch.Tensor:
    return net(embedding)


def fuse(id_tokens: torch.Tensor, exp_tokens: torch.Tensor, fusion_net: FusionNet) -> ConditionEmbedding:
    if id_tokens.shape != exp_tokens.shape:
        raise ShapeError(f"token shapes differ: {tuple(id_tokens.shape)} vs {tuple(exp_tokens.shape)}")
    return ConditionEmbedding(fusion_net(id_tokens + exp_tokens))


class ConditionAdapter(nn.Module):
    """Identity and expression projections plus fusion, producing X_ie tokens."""

    def __init__(self, in_dim: int = EMBED_DIM, width: int = 128, n_tokens: int = 4):
        super().__init__()
        self.id_proj = ProjectionNet(in_dim, width, n_tokens)
        self.exp_proj = ProjectionNet(in_dim, width, n_tokens)
        self.fusion = FusionNet(width)

    def forward(self, id_embedding: torch.Tensor, exp_embedding: torch.Tensor) -> torch.Tensor:
        return fuse(project(id_embedding, self.id_proj), project(exp_embedding, self.exp_proj), self.fusion).tokens


# ------------------------------------------------------------- training


@dataclass
class EncoderTrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 1e-4
    holdout_frac: float = 0.1
    center_weight: float = 0.1
    noise_std: float = 0.03
    seed: int = 0
    log_every: int = 500


@dataclass
class EncoderBundle:
    identity: FactorEncoder
    expression: FactorEncoder
    generic: GenericEmbedder | None = None
    stats: dict = field(default_factory=dict)


def _augment(x: torch.Tensor, std: float, gen: torch.Generator) -> torch.Tensor:
    # mild pixel noise so the encoders tolerate imperfect generated faces
    if std <= 0:
        return x
    scale = torch.rand(x.shape[0], 1, 1, 1, generator=gen) * std
    return (x + scale * torch.randn(x.shape, generator=gen)).clamp(0, 1)


def _cosine_separation(emb: torch.Tensor, labels: np.ndarray) -> tuple[float, float]:
    sim = (emb @ emb.T).numpy()
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())


def _train_factor(
    images: list[FaceImage],
    targets: np.ndarray,
    classes: np.ndarray | None,
    n_classes: int,
    config: EncoderTrainConfig,
    name: str,
) -> FactorEncoder:
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    n_ids = len({im.identity_index for im in images})
    if n_ids < 50:
        raise ConfigError(f"{name} encoder needs >= 50 identities, got {n_ids}")
    idx = np.arange(len(images))
    hold = set(im_i for im_i, im in enumerate(images) if im.identity_index in _held_ids(images, config.holdout_frac))
    tr = np.array([i for i in idx if i not in hold])
    te = np.array(sorted(hold))
    if len(tr) < config.batch_size:
        raise ConfigError(f"fewer training images ({len(tr)}) than batch size {config.batch_size}")
    x = torch.from_numpy(stack_pixels(images))
    y = torch.from_numpy(targets)
    c = torch.from_numpy(classes).long() if classes is not None else None

    enc = FactorEncoder(targets.shape[1], n_classes)
    opt = torch.optim.AdamW(enc.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, config.lr, total_steps=config.steps, pct_start=0.1)
    t0 = time.time()
    enc.train()
    for step in range(config.steps):
        b = torch.from_numpy(tr)[torch.randint(len(tr), (config.batch_size,), generator=gen)]
        xb = _augment(x[b], config.noise_std, gen)
        emb = enc.embed(xb)
        loss = F.mse_loss(enc.head(emb), y[b])
        # pull the batch-mean embedding to the origin so cosines spread out
        loss = loss + config.center_weight * emb.mean(0).pow(2).sum()
        if c is not None:
            loss = loss + 0.1 * F.cross_entropy(enc.class_head(emb), c[b])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if config.log_every and (step + 1) % config.log_every == 0:
            log.info("%s encoder step %d loss %.5f (%.0fs)", name, step + 1, loss.item(), time.time() - t0)
    freeze(enc)

    with torch.no_grad():
        xt = x[torch.from_numpy(te)]
        emb = torch.cat([enc.embed(chunk) for chunk in xt.split(512)])
        pred = enc.head(emb)
        stats = {"heldout_mse": float(F.mse_loss(pred, y[torch.from_numpy(te)])), "n_heldout": len(te)}
        if c is not None:
            logits = enc.class_head(emb)
            stats["heldout_class_acc"] = float((logits.argmax(-1) == c[torch.from_numpy(te)]).float().mean())
        labels = np.array([images[i].identity_index for i in te])
        within, cross = _cosine_separation(emb, labels)
        stats.update({"within_cos": within, "cross_cos": cross, "separation": within - cross})
        stats["train_seconds"] = time.time() - t0
    enc.stats = stats
    return enc


def _held_ids(images: list[FaceImage], holdout_frac: float) -> set[int]:
    ids = sorted({im.identity_index for im in images})
    return set(ids[-max(1, int(round(len(ids) * holdout_frac))):])


def train_identity_encoder(images: list[FaceImage], config: EncoderTrainConfig | None = None) -> FactorEncoder:
    config = config or EncoderTrainConfig()
    return _train_factor(images, identity_target(images), None, 0, config, "identity")


def train_expression_encoder(
    images: list[FaceImage], n_classes: int, config: EncoderTrainConfig | None = None
) -> FactorEncoder:
    config = config or EncoderTrainConfig()
    classes = np.array([im.class_id for im in images])
    return _train_factor(images, expression_target(images), classes, n_classes, config, "expression")


def train_generic_embedder(images: list[FaceImage], config: EncoderTrainConfig | None = None) -> GenericEmbedder:
    config = config or EncoderTrainConfig()
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    x = torch.from_numpy(stack_pixels(images))
    model = GenericEmbedder(resolution=x.shape[1])
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, config.lr, total_steps=config.steps, pct_start=0.1)
    t0 = time.time()
    for step in range(config.steps):
        xb = x[torch.randint(len(x), (config.batch_size,), generator=gen)]
        loss = F.mse_loss(model.reconstruct(xb), xb)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if config.log_every and (step + 1) % config.log_every == 0:
            log.info("generic embedder step %d loss %.5f", step + 1, loss.item())
    freeze(model)
    with torch.no_grad():
        model.stats = {"recon_mse": float(F.mse_loss(model.reconstruct(x[:512]), x[:512])),
                       "train_seconds": time.time() - t0}
    return model


# ---------------------------------------------------------- persistence


def save_encoder(directory, encoder: FactorEncoder | GenericEmbedder, kind: str) -> None:
    checkpoint.save_module(directory, encoder, {"kind": kind, "config": encoder.config, "stats": encoder.stats})


def load_encoder(directory) -> FactorEncoder | GenericEmbedder:
    tensors, meta = checkpoint.load_tensors(directory)
    cls = GenericEmbedder if meta["kind"] == "generic" else FactorEncoder
    enc = cls(**meta["config"])
    enc.load_state_dict(tensors)
    enc.stats = meta.get("stats", {})
    return freeze(enc)


def save_bundle(directory, bundle: EncoderBundle) -> None:
    directory = Path(directory)
    save_encoder(directory / "identity", bundle.identity, "identity")
    save_encoder(directory / "expression", bundle.expression, "expression")
    if bundle.generic is not None:
        save_encoder(directory / "generic", bundle.generic, "generic")


def load_bundle(directory, min_separation: float | None = 0.3) -> EncoderBundle:
    """Load identity/expression (and generic, if present) encoders.

    The identity encoder's stored held-out separation (mean within-identity
    minus mean cross-identity cosine) must exceed ``min_separation``; pass
    None to skip the check.
    """
    directory = Path(directory)
    for part in ("identity", "expression"):
        if not (directory / part / checkpoint.MANIFEST).exists():
            raise FileNotFoundError(f"missing encoder checkpoint {directory / part}")
    generic = load_encoder(directory / "generic") if (directory / "generic" / checkpoint.MANIFEST).exists() else None
    bundle = EncoderBundle(load_encoder(directory / "identity"), load_encoder(directory / "expression"), generic)
    if min_separation is not None:
        sep = bundle.identity.stats.get("separation")
        if sep is None or not sep > min_separation:
            raise ConfigError(f"identity encoder separation {sep} does not exceed {min_separation}")
    return bundle
