"""Composite flow/identity/expression objective and the two-stage training loop."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .encoders import EncoderBundle, load_bundle
from .errors import ConfigError, DomainError, NumericError
from .flowcore import TimeDistribution, interpolate, one_step_estimate, rf_loss
from .mmdit import MMDiT, ModelConfig, TextVocab, build_model, model_meta
from .toyfaces import ExemplarBank, FaceImage, classes_from_json, load_bank, load_images, stack_pixels

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    beta1: float = 0.1
    beta2: float = 0.1


@dataclass
class DropoutPolicy:
    p_text: float = 0.05
    p_cond: float = 0.05
    p_both: float = 0.05

    def __post_init__(self):
        if min(self.p_text, self.p_cond, self.p_both) < 0 or self.p_text + self.p_cond + self.p_both > 1:
            raise DomainError("dropout probabilities must be >= 0 and sum to <= 1")

    def draw(self, n: int, generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (drop_text, drop_cond) masks; the three events are exclusive."""
        u = torch.rand(n, generator=generator, dtype=torch.float64)
        a = self.p_text
        b = a + self.p_cond
        c = b + self.p_both
        text_only = u < a
        cond_only = (u >= a) & (u < b)
        both = (u >= b) & (u < c)
        return text_only | both, cond_only | both


@dataclass
class TrainBatch:
    id_images: torch.Tensor  # B x H x W x 3 in [0, 1]
    exemplars: torch.Tensor
    text_ids: torch.Tensor  # B x 2
    target: torch.Tensor


def to_model_space(images: torch.Tensor) -> torch.Tensor:
    return images * 2.0 - 1.0


def to_image_space(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) * 0.5


def identity_loss(ref_image: torch.Tensor, gen_image: torch.Tensor, enc, reduce: bool = True) -> torch.Tensor:
    """1 - cosine similarity of identity embeddings, per item or averaged."""
    if ref_image.shape != gen_image.shape:
        raise DomainError("reference and generated images differ in resolution")
    a, b = enc.embed(ref_image), enc.embed(gen_image)
    if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
        raise NumericError("identity embedding is not finite")
    per_item = 1.0 - F.cosine_similarity(a, b, dim=-1)
    return per_item.mean() if reduce else per_item


def expression_loss(ref_exp_image: torch.Tensor, gen_image: torch.Tensor, enc, reduce: bool = True) -> torch.Tensor:
    if ref_exp_image.shape != gen_image.shape:
        raise DomainError("reference and generated images differ in resolution")
    a, b = enc.embed(ref_exp_image), enc.embed(gen_image)
    if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
        raise NumericError("expression embedding is not finite")
    per_item = ((a - b) ** 2).mean(dim=-1)
    return per_item.mean() if reduce else per_item


def weighted_total(rf, id_term, exp_term, weights: LossWeights):
    return rf + weights.beta1 * id_term + weights.beta2 * exp_term


def _masked_mean(values: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    if not keep.any():
        return values.sum() * 0.0
    return values[keep].mean()


def composite_loss(
    batch: TrainBatch,
    model: MMDiT,
    encoders: EncoderBundle,
    weights: LossWeights,
    policy: DropoutPolicy,
    generator: torch.Generator,
    time_dist: TimeDistribution | None = None,
    one_step_form: str = "exact",
) -> tuple[torch.Tensor, dict[str, float]]:
    """L = L_rf + beta1 * L_id + beta2 * L_exp on one batch.

    The identity and expression terms score the one-step estimate of the
    clean image, averaged over the items whose condition was not dropped.
    """
    time_dist = time_dist or TimeDistribution()
    x1 = to_model_space(batch.target)
    b = x1.shape[0]
    t = time_dist.sample(b, generator).to(x1.dtype)
    x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    xt = interpolate(x0, x1, t)
    drop_text, drop_cond = policy.draw(b, generator)

    text_ids = torch.where(drop_text[:, None], torch.full_like(batch.text_ids, TextVocab.NULL), batch.text_ids)
    with torch.no_grad():
        id_emb = encoders.identity.embed(batch.id_images)
        exp_emb = encoders.expression.embed(batch.exemplars)
    cond = model.condition_tokens(id_emb.to(x1.dtype), exp_emb.to(x1.dtype))
    v = model(xt, t, text_ids, cond, cond_mask=~drop_cond)

    l_rf = rf_loss(v, x0, x1)
    terms = {"rf": l_rf}
    if weights.beta1 or weights.beta2:
        gen = to_image_space(one_step_estimate(xt, v, t, one_step_form))
        keep = ~drop_cond
        terms["id"] = _masked_mean(identity_loss(batch.id_images, gen, encoders.identity, reduce=False), keep)
        terms["exp"] = _masked_mean(expression_loss(batch.exemplars, gen, encoders.expression, reduce=False), keep)
    else:
        terms["id"] = terms["exp"] = l_rf.new_zeros(())
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NumericError(f"non-finite {name} loss term")
    total = weighted_total(l_rf, terms["id"], terms["exp"], weights)
    return total, {k: float(v.detach()) for k, v in terms.items()}


# -------------------------------------------------------------- data


class TrainData:
    """In-memory training tensors and batch assembly."""

    def __init__(self, images: list[FaceImage], bank: ExemplarBank, vocab: TextVocab):
        self.pixels = torch.from_numpy(stack_pixels(images))
        self.class_ids = torch.tensor([im.class_id for im in images])
        self.styles = torch.tensor([im.style for im in images])
        owner = np.array([im.identity_index for im in images])
        self.identity_of = torch.from_numpy(owner)
        self.members = {int(i): torch.from_numpy(np.flatnonzero(owner == i)) for i in np.unique(owner)}
        self.bank = {k: torch.from_numpy(stack_pixels(v)) for k, v in bank.buckets.items()}
        self.text = torch.tensor([vocab.encode(int(c), int(s)) for c, s in zip(self.class_ids, self.styles)])

    def __len__(self) -> int:
        return len(self.pixels)

    def sample(self, batch_size: int, generator: torch.Generator) -> TrainBatch:
        idx = torch.randint(len(self), (batch_size,), generator=generator)
        ref = torch.empty_like(idx)
        exemplars = []
        for n, i in enumerate(idx.tolist()):
            pool = self.members[int(self.identity_of[i])]
            others = pool[pool != i] if len(pool) > 1 else pool
            ref[n] = others[torch.randint(len(others), (1,), generator=generator)]
            bucket = self.bank[int(self.class_ids[i])]
            exemplars.append(bucket[torch.randint(len(bucket), (1,), generator=generator)][0])
        return TrainBatch(self.pixels[ref], torch.stack(exemplars), self.text[idx], self.pixels[idx])


# ----------------------------------------------------------- training


@dataclass
class TrainConfig:
    data_dir: str = "data"
    encoder_dir: str = "encoders"
    out_dir: str = "run"
    stage: str = "A"  # A: backbone, text-only objective; B: adapters only; full: everything
    init_from: str | None = None
    resume_from: str | None = None
    steps: int = 20000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-2
    seed: int = 0
    beta1: float = 0.1
    beta2: float = 0.1
    p_text: float = 0.05
    p_cond: float = 0.05
    p_both: float = 0.05
    time_dist: str = "uniform"
    one_step_form: str = "exact"
    log_every: int = 50
    ckpt_every: int = 1000
    max_bad_steps: int = 10
    min_encoder_separation: float | None = 0.3
    model: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))

    def weights(self) -> LossWeights:
        if self.stage == "A":
            return LossWeights(0.0, 0.0)
        return LossWeights(self.beta1, self.beta2)

    def policy(self) -> DropoutPolicy:
        return DropoutPolicy(self.p_text, self.p_cond, self.p_both)


@dataclass
class TrainState:
    step: int
    model: MMDiT
    optimizer: torch.optim.Optimizer
    generator: torch.Generator


def trainable_parameters(model: MMDiT, stage: str) -> list[torch.nn.Parameter]:
    if stage == "A":
        params = model.backbone_parameters()
    elif stage == "B":
        params = model.condition_parameters()
    elif stage == "full":
        params = list(model.parameters())
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    chosen = {id(p) for p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in chosen)
    return params


def save_state(directory, state: TrainState, config: TrainConfig) -> None:
    tensors = {f"model/{k}": v for k, v in state.model.state_dict().items()}
    opt = state.optimizer.state_dict()
    steps = {}
    for pid, s in opt["state"].items():
        tensors[f"opt/{pid}/exp_avg"] = s["exp_avg"]
        tensors[f"opt/{pid}/exp_avg_sq"] = s["exp_avg_sq"]
        steps[str(pid)] = float(s["step"])
    meta = model_meta(state.model)
    meta.update({
        "step": state.step,
        "train_config": asdict(config),
        "opt_steps": steps,
        "rng_state": state.generator.get_state().numpy().tobytes().hex(),
    })
    checkpoint.save_tensors(directory, tensors, meta)


def load_model(directory) -> MMDiT:
    tensors, meta = checkpoint.load_tensors(directory)
    model = build_model(meta)
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    model.eval()
    return model


def _restore(directory, state: TrainState) -> None:
    tensors, meta = checkpoint.load_tensors(directory)
    state.model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    opt = state.optimizer.state_dict()
    for pid_s, n in meta["opt_steps"].items():
        pid = int(pid_s)
        opt["state"][pid] = {
            "step": torch.tensor(n),
            "exp_avg": tensors[f"opt/{pid}/exp_avg"],
            "exp_avg_sq": tensors[f"opt/{pid}/exp_avg_sq"],
        }
    state.optimizer.load_state_dict(opt)
    state.generator.set_state(torch.from_numpy(np.frombuffer(bytes.fromhex(meta["rng_state"]), dtype=np.uint8).copy()))
    state.step = meta["step"]


def load_training_inputs(config: TrainConfig) -> tuple[TrainData, EncoderBundle, dict]:
    data_dir = Path(config.data_dir)
    images, manifest = load_images(data_dir / "train")
    bank = load_bank(data_dir / "bank")
    classes = classes_from_json(manifest["classes"])
    vocab = TextVocab([c.name for c in classes])
    encoders = load_bundle(config.encoder_dir, config.min_encoder_separation)
    return TrainData(images, bank, vocab), encoders, manifest


def train(config: TrainConfig, data: TrainData | None = None, encoders: EncoderBundle | None = None) -> Path:
    """Run one training stage; returns the final checkpoint directory."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(config), indent=1))
    if data is None or encoders is None:
        data, encoders, manifest = load_training_inputs(config)
        n_classes = len(manifest["classes"])
        resolution = manifest["resolution"]
    else:
        n_classes = int(data.class_ids.max()) + 1
        resolution = data.pixels.shape[1]
    if len(data.members) < 1:
        raise ConfigError("no training identities")

    torch.manual_seed(config.seed)
    if config.init_from:
        model = load_model(config.init_from)
    else:
        model = MMDiT(ModelConfig(**{"resolution": resolution, "n_classes": n_classes, **config.model}))
    model.train()
    params = trainable_parameters(model, config.stage)
    optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    generator = torch.Generator().manual_seed(config.seed)
    state = TrainState(0, model, optimizer, generator)
    if config.resume_from:
        _restore(config.resume_from, state)
        trainable_parameters(model, config.stage)

    weights, policy = config.weights(), config.policy()
    time_dist = TimeDistribution(config.time_dist)
    log_path = out / "loss_log.csv"
    new_log = not log_path.exists() or not config.resume_from
    fh = open(log_path, "w" if new_log else "a", newline="")
    writer = csv.writer(fh)
    if new_log:
        writer.writerow(["step", "total", "rf", "id", "exp", "lr", "wall"])
    t0 = time.time()
    bad = 0
    try:
        while state.step < config.steps:
            batch = data.sample(config.batch_size, generator)
            try:
                total, terms = composite_loss(batch, model, encoders, weights, policy, generator, time_dist,
                                              config.one_step_form)
            except NumericError as exc:
                bad += 1
                log.warning("step %d skipped: %s", state.step + 1, exc)
                if bad >= config.max_bad_steps:
                    raise NumericError(f"{bad} consecutive non-finite steps; aborting") from exc
                state.step += 1
                continue
            bad = 0
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            state.step += 1
            writer.writerow([state.step, f"{total.item():.8g}", f"{terms['rf']:.8g}", f"{terms['id']:.8g}",
                             f"{terms['exp']:.8g}", config.lr, f"{time.time() - t0:.1f}"])
            if config.log_every and state.step % config.log_every == 0:
                fh.flush()
                log.info("stage %s step %d total %.4f rf %.4f id %.4f exp %.5f", config.stage, state.step,
                         total.item(), terms["rf"], terms["id"], terms["exp"])
            if config.ckpt_every and state.step % config.ckpt_every == 0:
                save_state(out / "checkpoint", state, config)
    finally:
        fh.close()
    save_state(out / "checkpoint", state, config)
    model.eval()
    return out / "checkpoint"


def read_loss_log(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}
