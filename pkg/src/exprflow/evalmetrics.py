"""Expression, identity and consistency metrics for generated face sets.

Embedders are plain callables mapping an N x H x W x 3 array to an N x D
array; ``as_embedder`` wraps the torch encoders. Every metric has a
matched-pair default (generated image i against its own reference) and a
``pairing="cross"`` variant over the full generated x reference product.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .encoders import identity_target
from .errors import DomainError, NumericError
from .toyfaces import FaceImage

log = logging.getLogger(__name__)

Embedder = Callable[[np.ndarray], np.ndarray]


@dataclass
class GeneratedItem:
    class_id: int
    exemplar: np.ndarray
    image: np.ndarray


@dataclass
class GeneratedSet:
    identity_ref: FaceImage
    items: list[GeneratedItem] = field(default_factory=list)

    def generated(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])

    def exemplars(self) -> np.ndarray:
        return np.stack([it.exemplar for it in self.items])


METRIC_COLUMNS = ("exp_error", "clip_like", "id_sim", "dino_like", "dino_con", "id_con")
COLUMN_TITLES = ("Exp.", "CLIP", "ID.", "DINO", "DINO Con.", "ID Con.")


@dataclass
class MetricReport:
    exp_error: float
    clip_like: float
    id_sim: float
    dino_like: float
    dino_con: float
    id_con: float
    oracle_class_acc: float = float("nan")
    oracle_id_mse: float = float("nan")
    n_items: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def as_embedder(module, method: str = "embed") -> Embedder:
    fn = getattr(module, method)

    def run(images: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(images, dtype=np.float32))
            return fn(x).double().numpy()

    return run


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericError("zero-norm embedding")
    return np.sum(a * b, axis=-1) / (na * nb)


def _pairs(gen: np.ndarray, ref: np.ndarray, pairing: str) -> tuple[np.ndarray, np.ndarray]:
    if pairing == "matched":
        return gen, ref
    if pairing == "cross":
        n, m = len(gen), len(ref)
        return np.repeat(gen, m, axis=0), np.tile(ref, (n, 1))
    raise DomainError(f"unknown pairing {pairing!r}")


def _require_items(gset: GeneratedSet, n: int = 1) -> None:
    if len(gset.items) < n:
        raise DomainError(f"generated set needs at least {n} item(s), has {len(gset.items)}")


def expression_error(gset: GeneratedSet, enc_exp: Embedder, pairing: str = "matched") -> float:
    _require_items(gset)
    g, r = _pairs(enc_exp(gset.generated()), enc_exp(gset.exemplars()), pairing)
    return float(np.mean(np.linalg.norm(g - r, axis=-1)))


def embedding_similarity(gset: GeneratedSet, embedder: Embedder, target: str = "exemplar", pairing: str = "matched") -> float:
    _require_items(gset)
    gen = embedder(gset.generated())
    if target == "exemplar":
        ref = embedder(gset.exemplars())
    elif target == "identity_ref":
        ref = np.repeat(embedder(gset.identity_ref.pixels[None]), len(gen), axis=0)
    else:
        raise DomainError(f"unknown similarity target {target!r}")
    g, r = _pairs(gen, ref, pairing)
    return float(np.mean(_cos(g, r)))


def identity_similarity(gset: GeneratedSet, enc_id: Embedder) -> float:
    return embedding_similarity(gset, enc_id, target="identity_ref")


def consistency(gset: GeneratedSet, enc: Embedder) -> float:
    """Mean cosine over all unordered pairs of generated images."""
    _require_items(gset, 2)
    e = enc(gset.generated())
    i, j = np.triu_indices(len(e), k=1)
    return float(np.mean(_cos(e[i], e[j])))


def _unit_rows(e: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise NumericError("zero-norm embedding")
    return e / n


@dataclass
class IdentityDistance:
    identity: int
    q1: float
    median: float
    q3: float
    real_mean: float
    generated_mean: float

    @property
    def within_iqr(self) -> bool:
        return self.q1 <= self.generated_mean <= self.q3


def identity_distance_distribution(
    real_images_per_identity: dict[int, np.ndarray],
    generated_sets: dict[int, GeneratedSet],
    enc_id: Embedder,
) -> list[IdentityDistance]:
    """Real within-identity distance quartiles vs the generated-to-reference mean.

    Distances are Euclidean between L2-normalized identity embeddings.
    """
    out = []
    for ident, real in real_images_per_identity.items():
        if len(real) < 2:
            log.warning("identity %s has fewer than 2 real images; skipped", ident)
            continue
        if ident not in generated_sets:
            continue
        e = _unit_rows(enc_id(np.asarray(real)))
        i, j = np.triu_indices(len(e), k=1)
        d = np.linalg.norm(e[i] - e[j], axis=-1)
        gset = generated_sets[ident]
        g = _unit_rows(enc_id(gset.generated()))
        r = _unit_rows(enc_id(gset.identity_ref.pixels[None]))
        gen_mean = float(np.mean(np.linalg.norm(g - r, axis=-1)))
        q1, med, q3 = np.percentile(d, [25, 50, 75])
        out.append(IdentityDistance(ident, float(q1), float(med), float(q3), float(d.mean()), gen_mean))
    return out


def fraction_within_iqr(rows: list[IdentityDistance]) -> float:
    return float(np.mean([r.within_iqr for r in rows])) if rows else float("nan")


def oracle_scores(
    gset: GeneratedSet,
    oracle_classifier: Callable[[np.ndarray], np.ndarray],
    oracle_id_regressor: Callable[[np.ndarray], np.ndarray],
) -> tuple[float, float]:
    """(fraction of items classified as their target class, z_id regression MSE)."""
    _require_items(gset)
    imgs = gset.generated()
    logits = np.asarray(oracle_classifier(imgs))
    pred = logits.argmax(-1) if logits.ndim == 2 else logits
    target = np.array([it.class_id for it in gset.items])
    acc = float(np.mean(pred == target))
    z_pred = np.asarray(oracle_id_regressor(imgs), dtype=np.float64)
    z_true = identity_target([gset.identity_ref]).astype(np.float64)
    mse = float(np.mean((z_pred - z_true) ** 2))
    return acc, mse


@dataclass
class EvalEmbedders:
    identity: Embedder
    expression: Embedder
    generic: Embedder
    classifier: Callable | None = None
    id_regressor: Callable | None = None

    @classmethod
    def from_bundle(cls, bundle) -> "EvalEmbedders":
        return cls(
            identity=as_embedder(bundle.identity),
            expression=as_embedder(bundle.expression),
            generic=as_embedder(bundle.generic),
            classifier=as_embedder(bundle.expression, "classify"),
            id_regressor=as_embedder(bundle.identity, "predict"),
        )


def evaluate_set(gset: GeneratedSet, emb: EvalEmbedders, pairing: str = "matched") -> MetricReport:
    report = MetricReport(
        exp_error=expression_error(gset, emb.expression, pairing),
        clip_like=embedding_similarity(gset, emb.generic, "exemplar", pairing),
        id_sim=identity_similarity(gset, emb.identity),
        dino_like=embedding_similarity(gset, emb.generic, "identity_ref"),
        dino_con=consistency(gset, emb.generic),
        id_con=consistency(gset, emb.identity),
        n_items=len(gset.items),
    )
    if emb.classifier is not None and emb.id_regressor is not None:
        report.oracle_class_acc, report.oracle_id_mse = oracle_scores(gset, emb.classifier, emb.id_regressor)
    return report


def aggregate(reports: list[MetricReport]) -> MetricReport:
    """Unweighted mean of each metric across per-identity reports."""
    if not reports:
        raise DomainError("no reports to aggregate")
    fields = [f for f in asdict(reports[0]) if f != "n_items"]
    means = {f: float(np.mean([getattr(r, f) for r in reports])) for f in fields}
    return MetricReport(**means, n_items=sum(r.n_items for r in reports))


def format_table(rows: dict[str, MetricReport]) -> str:
    """Plain-text table, one row per variant, six metric columns."""
    head = f"{'Model':<26}" + "".join(f"{t:>11}" for t in COLUMN_TITLES)
    lines = [head, "-" * len(head)]
    for name, r in rows.items():
        lines.append(f"{name:<26}" + "".join(f"{getattr(r, c):>11.4f}" for c in METRIC_COLUMNS))
    return "\n".join(lines)

