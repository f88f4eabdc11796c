"""Command-line entry point: data, encoders, training, sampling, evaluation, ablation."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

log = logging.getLogger("exprflow")

STAGE_DEFAULT_STEPS = 20000


def _device() -> str:
    device = os.environ.get("EXPRFLOW_DEVICE", "cpu")
    if device != "cpu":
        import torch

        if device.startswith("cuda") and not torch.cuda.is_available():
            raise RuntimeError(f"EXPRFLOW_DEVICE={device} requested but CUDA is unavailable")
        log.warning("device %s requested; this build computes on cpu", device)
    return "cpu"


def _write_run_config(out: Path, command: str, args: argparse.Namespace) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["command"] = command
    (out / "run_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))


def _refuse_nonempty(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"{path} exists and is not empty; pass --force to overwrite")


# ------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> Path:
    from .toyfaces import (
        build_exemplar_bank,
        classes_to_json,
        default_classes,
        sample_dataset,
        save_bank,
        save_images,
    )

    out = Path(args.out)
    _refuse_nonempty(out, args.force)
    classes = default_classes(args.classes, args.jitter)
    images = sample_dataset(args.identities, args.per_identity, classes, args.seed, args.resolution,
                            args.style_frac, workers=args.workers)
    n_train = args.identities - args.heldout
    if n_train < 1:
        raise ValueError("--heldout must leave at least one training identity")
    meta = {
        "resolution": args.resolution,
        "n_classes": args.classes,
        "classes": classes_to_json(classes),
        "seed": args.seed,
        "bank_seed": args.seed + 1,
        "n_identities": args.identities,
        "per_identity": args.per_identity,
        "style_frac": args.style_frac,
    }
    save_images(out / "train", [im for im in images if im.identity_index < n_train], {**meta, "split": "train"})
    save_images(out / "heldout", [im for im in images if im.identity_index >= n_train], {**meta, "split": "heldout"})
    save_bank(out / "bank", build_exemplar_bank(classes, args.bank_per_class, args.seed + 1, args.resolution), meta)
    save_bank(out / "bank_ood", build_exemplar_bank(classes, args.bank_per_class, args.seed + 2, args.resolution,
                                                    jitter_mult=2.0), {**meta, "jitter_mult": 2.0})
    _write_run_config(out, "gen-data", args)
    print(json.dumps({"images": len(images), "train_identities": n_train, "heldout_identities": args.heldout,
                      "classes": args.classes}))
    return out


# ------------------------------------------------------- train-encoders


def cmd_train_encoders(args) -> Path:
    from .encoders import (
        EncoderBundle,
        EncoderTrainConfig,
        save_bundle,
        train_expression_encoder,
        train_generic_embedder,
        train_identity_encoder,
    )
    from .toyfaces import load_images

    images, manifest = load_images(Path(args.data) / "train")
    cfg = EncoderTrainConfig(steps=args.steps, batch_size=args.batch_size, seed=args.seed)
    ident = train_identity_encoder(images, cfg)
    log.info("identity encoder %s", ident.stats)
    expr = train_expression_encoder(images, manifest["n_classes"], cfg)
    log.info("expression encoder %s", expr.stats)
    generic = train_generic_embedder(images, cfg)
    log.info("generic embedder %s", generic.stats)
    out = Path(args.out)
    save_bundle(out, EncoderBundle(ident, expr, generic))
    _write_run_config(out, "train-encoders", args)
    stats = {"identity": ident.stats, "expression": expr.stats, "generic": generic.stats}
    (out / "validation.json").write_text(json.dumps(stats, indent=1))
    print(json.dumps(stats))
    return out


# ---------------------------------------------------------------- train


def cmd_train(args) -> Path:
    from .training import TrainConfig, train

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    cfg = TrainConfig(**{**base, **overrides})
    ckpt = train(cfg)
    _write_run_config(Path(cfg.out_dir), "train", args)
    print(json.dumps({"checkpoint": str(ckpt)}))
    return ckpt


# --------------------------------------------------------------- shared


def _load_eval_inputs(args, bank_name: str = "bank"):
    from .encoders import load_bundle
    from .mmdit import TextVocab
    from .toyfaces import classes_from_json, load_bank, load_images
    from .training import load_model

    enc_dir = Path(args.encoders)
    if not (enc_dir / "identity").exists() or not (enc_dir / "expression").exists():
        raise FileNotFoundError(f"encoder checkpoints missing under {enc_dir}")
    encoders = load_bundle(enc_dir, args.min_separation)
    model = load_model(args.model)
    heldout, manifest = load_images(Path(args.data) / "heldout")
    classes = classes_from_json(manifest["classes"])
    vocab = TextVocab([c.name for c in classes])
    bank = load_bank(Path(args.data) / bank_name)
    return model, encoders, vocab, heldout, classes, bank


def _sample_config(args, **over):
    from .generate import SampleConfig
    from .toyfaces import STYLE_NAMES

    style = STYLE_NAMES.index(args.style) if hasattr(args, "style") and args.style else 0
    cfg = SampleConfig(guidance=args.guidance, steps=args.steps, consistent=args.consistent == "on",
                       rho=args.rho, style=style, seed=args.seed)
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


def _to_png(pixels: np.ndarray, path: Path, scale: int = 4) -> None:
    from PIL import Image

    im = Image.fromarray((np.clip(pixels, 0, 1) * 255).round().astype(np.uint8))
    im.resize((im.width * scale, im.height * scale), Image.NEAREST).save(path)


def _grid(images: list[np.ndarray], labels: list[str], path: Path, scale: int = 4) -> None:
    from PIL import Image, ImageDraw

    h, w, _ = images[0].shape
    cell = (w * scale, h * scale)
    canvas = Image.new("RGB", (cell[0] * len(images), cell[1] + 14), "white")
    draw = ImageDraw.Draw(canvas)
    for i, (img, label) in enumerate(zip(images, labels)):
        tile = Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8)).resize(cell, Image.NEAREST)
        canvas.paste(tile, (i * cell[0], 14))
        draw.text((i * cell[0] + 2, 1), label, fill="black")
    canvas.save(path)


# --------------------------------------------------------------- sample


def cmd_sample(args) -> Path:
    from .generate import generate_set, group_by_identity, reference_image

    model, encoders, vocab, heldout, classes, bank = _load_eval_inputs(
        args, "bank_ood" if args.ood_exemplars else "bank")
    names = [c.strip() for c in args.classes.split(",")] if args.classes else vocab.class_names
    class_ids = [vocab.class_id(n) for n in names]
    groups = group_by_identity(heldout)
    keys = sorted(groups)
    ident = keys[args.identity % len(keys)]
    ref = reference_image(groups[ident])
    gset = generate_set(model, encoders, vocab, ref, class_ids, bank, _sample_config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _to_png(ref.pixels, out / "reference.png")
    for name, item in zip(names, gset.items):
        _to_png(item.image, out / f"{name}.png")
        _to_png(item.exemplar, out / f"{name}_exemplar.png")
    _grid([ref.pixels] + [it.image for it in gset.items], ["ref"] + names, out / "grid.png")
    np.save(out / "images.npy", gset.generated())
    _write_run_config(out, "sample", args)
    print(json.dumps({"images": len(gset.items), "out": str(out)}))
    return out


# ------------------------------------------------------------- evaluate


def _heldout_groups(heldout, n):
    from .generate import group_by_identity

    groups = group_by_identity(heldout)
    return {k: groups[k] for k in sorted(groups)[:n]}


def _write_eval(out: Path, result) -> None:
    import csv

    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(result.summary.to_json())
    with open(out / "per_identity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = list(asdict(result.summary))
        w.writerow(["identity"] + cols)
        for ident, rep in result.per_identity.items():
            w.writerow([ident] + [getattr(rep, c) for c in cols])
    with open(out / "identity_distances.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["identity", "q1", "median", "q3", "real_mean", "generated_mean", "within_iqr"])
        for d in result.distances:
            w.writerow([d.identity, d.q1, d.median, d.q3, d.real_mean, d.generated_mean, int(d.within_iqr)])


def _box_plot(distances, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(6, len(distances) * 0.25), 3))
    for i, d in enumerate(distances):
        ax.plot([i, i], [d.q1, d.q3], color="tab:blue", lw=4)
        ax.plot(i, d.median, "_", color="k")
        ax.plot(i, d.generated_mean, "o", color="tab:red", ms=3)
    ax.set_xlabel("held-out identity")
    ax.set_ylabel("identity distance")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def run_evaluation(args, **sample_over):
    from .generate import evaluate_model

    model, encoders, vocab, heldout, classes, bank = _load_eval_inputs(args)
    groups = _heldout_groups(heldout, args.identities)
    class_ids = [c.class_id for c in classes]
    result = evaluate_model(model, encoders, vocab, groups, bank, class_ids, _sample_config(args, **sample_over),
                            args.pairing)
    return result


def cmd_evaluate(args):
    from .evalmetrics import fraction_within_iqr

    out = Path(args.out)
    result = run_evaluation(args)
    _write_eval(out, result)
    extra = {"fraction_within_iqr": fraction_within_iqr(result.distances)}
    if args.baseline:
        base = run_evaluation(args, unconditioned=True)
        _write_eval(out / "unconditioned", base)
        extra["unconditioned_id_sim"] = base.summary.id_sim
    (out / "extra.json").write_text(json.dumps(extra, indent=1))
    if args.plot:
        _box_plot(result.distances, out / "identity_distances.png")
    _write_run_config(out, "evaluate", args)
    print(json.dumps({**asdict(result.summary), **extra}))
    return result


# --------------------------------------------------------------- ablate

ABLATION_ROWS = ("Full model", "w/o consistent attention", "w/o expression prompt")


def ablation_checks(rows: dict) -> dict[str, bool]:
    full, no_cc, no_exp = (rows[k] for k in ABLATION_ROWS)
    return {
        "no_cc_lowers_id_con": no_cc.id_con < full.id_con,
        "no_cc_lowers_dino_con": no_cc.dino_con < full.dino_con,
        "no_exp_raises_exp_error": no_exp.exp_error > full.exp_error,
        "no_exp_raises_id_con": no_exp.id_con > full.id_con,
    }


def cmd_ablate(args):
    from .evalmetrics import format_table

    variants = {
        ABLATION_ROWS[0]: {},
        ABLATION_ROWS[1]: {"consistent": False},
        ABLATION_ROWS[2]: {"drop_expression_text": True},
    }
    rows = {name: run_evaluation(args, **over).summary for name, over in variants.items()}
    checks = ablation_checks(rows)
    table = format_table(rows)
    lines = [table, ""] + [f"{'PASS' if ok else 'FAIL'}  {name}" for name, ok in checks.items()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text("\n".join(lines) + "\n")
    (out / "ablation.json").write_text(json.dumps(
        {"rows": {k: asdict(v) for k, v in rows.items()}, "checks": checks}, indent=1))
    _write_run_config(out, "ablate", args)
    print("\n".join(lines))
    return rows, checks


# ---------------------------------------------------------------- rerun

COMMANDS = {}


def cmd_rerun(args):
    """Repeat a command from the run_config.json it wrote, optionally into a new directory."""
    cfg = json.loads(Path(args.run_config).read_text())
    command = cfg.pop("command")
    if args.out:
        key = "out_dir" if "out_dir" in cfg else "out"
        cfg[key] = args.out
    return COMMANDS[command](argparse.Namespace(**cfg))


# ---------------------------------------------------------------- parser


def _add_sampling(p):
    p.add_argument("--model", required=True, help="model checkpoint directory")
    p.add_argument("--encoders", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--guidance", type=float, default=5.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--consistent", choices=("on", "off"), default="on")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--min-separation", type=float, default=0.3,
                   help="refuse identity encoders whose stored separation is not above this")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exprflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic dataset and exemplar banks")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=500)
    p.add_argument("--per-identity", type=int, default=20)
    p.add_argument("--heldout", type=int, default=50)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--jitter", type=float, default=0.08)
    p.add_argument("--bank-per-class", type=int, default=20)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--style-frac", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-encoders", help="pretrain and freeze the identity/expression/generic encoders")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_encoders)

    p = sub.add_parser("train", help="train the flow model (stage A backbone, stage B adapters)")
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--encoders", dest="encoder_dir")
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--stage", choices=("A", "B", "full"))
    p.add_argument("--init-from", dest="init_from")
    p.add_argument("--resume-from", dest="resume_from")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    p.add_argument("--min-separation", dest="min_encoder_separation", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate one identity across expression classes")
    _add_sampling(p)
    p.add_argument("--identity", type=int, default=0, help="held-out identity position")
    p.add_argument("--classes", help="comma-separated class names (default: all)")
    p.add_argument("--style", default="photo")
    p.add_argument("--ood-exemplars", action="store_true", help="retrieve from the 2x-jitter exemplar pool")
    p.set_defaults(func=cmd_sample)

    for name, func, helptext in (("evaluate", cmd_evaluate, "metric report over held-out identities"),
                                 ("ablate", cmd_ablate, "full / no consistent attention / no expression text")):
        p = sub.add_parser(name, help=helptext)
        _add_sampling(p)
        p.add_argument("--identities", type=int, default=50)
        p.add_argument("--pairing", choices=("matched", "cross"), default="matched")
        if name == "evaluate":
            p.add_argument("--baseline", action="store_true", help="also score unconditioned generation")
            p.add_argument("--plot", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("rerun", help="repeat a command from its run_config.json")
    p.add_argument("run_config")
    p.add_argument("--out", help="write to this directory instead of the recorded one")
    p.set_defaults(func=cmd_rerun)
    return parser


COMMANDS.update({
    "gen-data": cmd_gen_data,
    "train-encoders": cmd_train_encoders,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
})


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        _device()
        args.func(args)
    except Exception as exc:  # machine-readable failure line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
