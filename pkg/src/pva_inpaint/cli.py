"""Command-line front end for the whole pipeline.

Every subcommand reads an optional JSON config; flags override config
keys, config keys override defaults. All randomness descends from one
global seed (flag > config > PVA_SEED env > 0) through named streams, so
reruns with identical inputs are byte-identical.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 missing prerequisite.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import os
import sys
from contextlib import contextmanager

import numpy as np

from . import tensor as tc
from .dataset import (BuilderConfig, build_dataset, load_mask_png, load_png,
                      save_png)
from .diffusion import InpaintCondition, build_guidance_conditions, sample_inpaint
from .evaluator import (EvalConfig, ablation_rows_to_csv, ablation_sweep,
                        evaluate_per_region, train_attribute_classifier,
                        train_recognizer)
from .identity import ReferenceSet
from .pipeline import PVAPipeline
from .recognizer import Recognizer
from .seeding import stream_seed
from .trainer import (DatasetView, FINETUNE_STEPS, finetune_identity,
                      paper_config, pretrain_base, toy_config, train_pva)
from .vocab import NEUTRAL_PROMPT

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING = 4


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    pass


def load_config(path, allowed):
    """Read a JSON config, rejecting unknown keys outright."""
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def resolve_seed(args, cfg):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("PVA_SEED")
    if env is not None:
        return int(env)
    return 0


@contextmanager
def checkpoint_lock(ckpt_dir):
    """Advisory exclusive lock so two writers never race on one
    checkpoint directory."""
    os.makedirs(ckpt_dir, exist_ok=True)
    fh = open(os.path.join(ckpt_dir, ".lock"), "w")
    try:
        fcntl.flock(fh, fcntl.LOCK_EX)
        yield
    finally:
        fcntl.flock(fh, fcntl.LOCK_UN)
        fh.close()


def _require(path, what):
    if not os.path.exists(path):
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def _train_config(phase, cfg, seed):
    profile = cfg.get("profile", "toy")
    if profile not in ("toy", "paper"):
        raise ConfigError(f"unknown profile {profile!r}")
    tconf = toy_config(phase, seed=seed) if profile == "toy" else paper_config(phase)
    tconf.seed = seed
    for key in ("steps", "batch_size", "lr", "special_lr", "weight_decay",
                "cond_drop", "m_stratified", "log_path"):
        if key in cfg:
            setattr(tconf, key, cfg[key])
    return tconf


TRAIN_KEYS = ("seed", "profile", "steps", "batch_size", "lr", "special_lr",
              "weight_decay", "cond_drop", "m_stratified", "log_path")


# -- subcommands -------------------------------------------------------------


def cmd_dataset_build(args):
    cfg = load_config(args.config,
                      ("seed", "n_identities", "n_renders", "extent", "k",
                       "mask_pool_size"))
    seed = resolve_seed(args, cfg)
    bcfg = BuilderConfig(
        n_identities=cfg.get("n_identities", 200),
        n_renders=cfg.get("n_renders", 8),
        extent=cfg.get("extent", 16),
        k=cfg.get("k", 5),
        mask_pool_size=cfg.get("mask_pool_size", 2000),
        seed=seed)
    manifest = build_dataset(bcfg, args.out)
    print(f"dataset-build ok: {len(manifest['identities'])} identities -> {args.out}")
    return EXIT_OK


def cmd_recognizer_train(args):
    cfg = load_config(args.config, ("seed",))
    seed = resolve_seed(args, cfg)
    data = DatasetView(_require(args.dataset, "dataset directory"))
    roles = ("encoder_A", "eval_B") if args.role == "both" else (args.role,)
    with checkpoint_lock(args.out):
        for role in roles:
            rec = train_recognizer(role, data, seed=stream_seed(seed, f"rec_{role}"))
            rec.save(os.path.join(args.out, role))
            print(f"recognizer-train ok: role={role} classes={rec.config.n_classes}")
    return EXIT_OK


def _load_pipeline(ckpt_dir):
    _require(os.path.join(ckpt_dir, "denoiser", "config.json"),
             "pipeline checkpoint")
    return PVAPipeline.load(ckpt_dir)


def cmd_pretrain(args):
    cfg = load_config(args.config, TRAIN_KEYS)
    seed = resolve_seed(args, cfg)
    data = DatasetView(_require(args.dataset, "dataset directory"))
    facenet = Recognizer.load(
        _require(os.path.join(args.recognizers, "encoder_A"),
                 "encoder_A recognizer"))
    pipeline = PVAPipeline.fresh(facenet=facenet, seed=seed)
    tconf = _train_config("pretrain_base", cfg, seed)
    with checkpoint_lock(args.out):
        pretrain_base(pipeline, data, tconf, ckpt_dir=args.out)
    print(f"pretrain ok: {tconf.steps} steps -> {args.out}")
    return EXIT_OK


def cmd_train_pva(args):
    cfg = load_config(args.config, TRAIN_KEYS)
    seed = resolve_seed(args, cfg)
    data = DatasetView(_require(args.dataset, "dataset directory"))
    pipeline = _load_pipeline(args.ckpt)
    stages = ("pva_stage1", "pva_stage2") if args.stage == "both" \
        else (f"pva_stage{args.stage}",)
    with checkpoint_lock(args.out):
        for phase in stages:
            tconf = _train_config(phase, cfg, seed)
            train_pva(pipeline, data, tconf, ckpt_dir=args.out)
            print(f"train-pva ok: {phase} {tconf.steps} steps -> {args.out}")
    return EXIT_OK


def cmd_finetune(args):
    cfg = load_config(args.config, TRAIN_KEYS + ("include_text_attention",))
    seed = resolve_seed(args, cfg)
    data = DatasetView(_require(args.dataset, "dataset directory"))
    pipeline = _load_pipeline(args.ckpt)
    if args.identity not in data.identities():
        raise MissingArtifact(f"identity {args.identity!r} not in dataset")
    tconf = _train_config("finetune", cfg, seed)
    tconf.include_text_attention = bool(cfg.get("include_text_attention", False))
    refs = data.reference_set(args.identity)
    with checkpoint_lock(args.out):
        finetune_identity(pipeline, refs, tconf)
        pipeline.save(args.out)
    print(f"finetune ok: identity={args.identity} {tconf.steps} steps -> {args.out}")
    return EXIT_OK


def cmd_inpaint(args):
    cfg = load_config(args.config, ("seed", "steps", "eta", "guidance_scale"))
    seed = resolve_seed(args, cfg)
    pipeline = _load_pipeline(args.ckpt)
    image = load_png(_require(args.image, "input image"))
    mask = load_mask_png(_require(args.mask, "mask image"))
    refs = [load_png(_require(p, "reference image")) for p in args.refs or []]
    steps = int(cfg.get("steps", 50))
    eta = float(cfg.get("eta", 0.7))
    scale = float(args.guidance_scale if args.guidance_scale is not None
                  else cfg.get("guidance_scale", 2.0))
    if refs:
        with tc.no_grad():
            visual = pipeline.visual_features(refs).detach()
        task = "controlled" if args.prompt else "inpaint_only"
        guidance = build_guidance_conditions(task, NEUTRAL_PROMPT, args.prompt,
                                             visual=visual, scale=scale)
    else:
        guidance = build_guidance_conditions("default", NEUTRAL_PROMPT,
                                             args.prompt, scale=scale)
    cond = InpaintCondition.from_image(image, mask)
    out = sample_inpaint(pipeline, cond, guidance, pipeline.schedule,
                         steps=steps, eta=eta,
                         seed=stream_seed(seed, "cli_inpaint"))
    save_png(args.out, out)
    print(f"inpaint ok: task={guidance.task} scale={scale} -> {args.out}")
    return EXIT_OK


def _eval_config(cfg, seed):
    return EvalConfig(
        max_identities=cfg.get("max_identities"),
        steps=int(cfg.get("steps", 50)),
        eta=float(cfg.get("eta", 0.7)),
        guidance_scale=float(cfg.get("guidance_scale", 2.0)),
        seed=seed,
        split=cfg.get("split", "test"))


EVAL_KEYS = ("seed", "max_identities", "steps", "eta", "guidance_scale", "split")


def cmd_evaluate(args):
    cfg = load_config(args.config, EVAL_KEYS)
    seed = resolve_seed(args, cfg)
    data = DatasetView(_require(args.dataset, "dataset directory"))
    pipeline = _load_pipeline(args.ckpt)
    eval_rec = Recognizer.load(
        _require(os.path.join(args.recognizers, "eval_B"), "eval_B recognizer"))
    classifier = train_attribute_classifier(
        data, seed=stream_seed(seed, "eval_classifier"))
    econf = _eval_config(cfg, seed)
    report = evaluate_per_region(pipeline, data, eval_rec, econf,
                                 out_dir=os.path.join(args.out, "images"),
                                 classifier=classifier)
    report.to_csv(os.path.join(args.out, "report.csv"))
    mean = report.row("mean")
    print(f"evaluate ok: id_sim_mean={mean['id_sim_mean']:.4f} "
          f"fid_like={mean['fid_like']:.4f} -> {args.out}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config, EVAL_KEYS)
    seed = resolve_seed(args, cfg)
    data = DatasetView(_require(args.dataset, "dataset directory"))
    pipeline = _load_pipeline(args.ckpt)
    eval_rec = Recognizer.load(
        _require(os.path.join(args.recognizers, "eval_B"), "eval_B recognizer"))
    econf = _eval_config(cfg, seed)
    rows = ablation_sweep(args.kind, pipeline, data, eval_rec, econf)
    path = os.path.join(args.out, f"ablation_{args.kind}.csv")
    ablation_rows_to_csv(rows, path)
    summary = " ".join(f"{r['value']}:{r['id_sim_mean']:.3f}" for r in rows)
    print(f"ablate ok: kind={args.kind} {summary} -> {path}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pva-inpaint",
        description="Identity-preserving diffusion inpainting pipeline. "
                    "Precedence: flag > config > default.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", default=None,
                       help="JSON config path (default: none)")
        p.add_argument("--seed", type=int, default=None,
                       help="global seed (default: PVA_SEED env, else 0)")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("dataset-build", help="render the synthetic corpus")
    common(p, "dataset output directory")
    p.set_defaults(func=cmd_dataset_build)

    p = sub.add_parser("recognizer-train", help="train recognizer roles")
    common(p, "recognizer checkpoint directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--role", choices=("encoder_A", "eval_B", "both"),
                   default="both", help="which role to train (default: both)")
    p.set_defaults(func=cmd_recognizer_train)

    p = sub.add_parser("pretrain", help="pretrain the base denoiser")
    common(p, "checkpoint output directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--recognizers", required=True,
                   help="recognizer checkpoint directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-pva", help="train the visual pathway")
    common(p, "checkpoint output directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint directory")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both",
                   help="which stage to run (default: both)")
    p.set_defaults(func=cmd_train_pva)

    p = sub.add_parser("finetune", help="adapt to one identity (40 steps)")
    common(p, "checkpoint output directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="PVA checkpoint directory")
    p.add_argument("--identity", required=True, help="identity id to adapt to")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("inpaint", help="inpaint one image")
    common(p, "output PNG path")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--image", required=True, help="input image PNG")
    p.add_argument("--mask", required=True, help="binary mask PNG (1=known)")
    p.add_argument("--prompt", default=None,
                   help="edit prompt; selects controlled-task guidance")
    p.add_argument("--refs", nargs="*", default=[],
                   help="reference image PNGs for identity conditioning")
    p.add_argument("--guidance-scale", type=float, default=None,
                   help="classifier-free guidance scale (default 2.0)")
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("evaluate", help="per-region metric report")
    common(p, "report output directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--recognizers", required=True,
                   help="recognizer checkpoint directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="one-axis ablation sweep")
    common(p, "sweep output directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--recognizers", required=True,
                   help="recognizer checkpoint directory")
    p.add_argument("--kind", choices=("guidance", "ref_count", "finetune"),
                   required=True, help="ablation axis")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
