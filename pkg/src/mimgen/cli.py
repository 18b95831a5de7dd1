"""Command-line surface: datagen, train-tokenizer, train-t2i, generate,
edit, verify.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 I/O error.
Every subcommand accepts ``--config FILE`` (flat JSON) layered between
built-in defaults and explicit flags.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import datagen, persistence
from .backbone import ModelConfig
from .config import merge_config
from .editor import EditRequest, edit, edit_mask_free
from .errors import CheckpointError, ConfigError
from .sampler import SamplerConfig, generate
from .text import Vocabulary
from .trainer import TrainConfig, items_from_grids, train_t2i
from .verify import run_verify
from .vq import VqConfig, train_tokenizer


def _add_config_flag(p):
    p.add_argument("--config", default=None, help="flat JSON config file")
    p.add_argument("--seed", type=int, default=None)


def _merged(args, defaults):
    overrides = {
        k: getattr(args, k.replace(".", "_"), None) for k in defaults
    }
    return merge_config(defaults, args.config, overrides)


def cmd_datagen(args):
    defaults = {"n": 256, "seed": 0, "image_size": 32, "out": None}
    cfg = _merged(args, defaults)
    if cfg["out"] is None:
        raise ConfigError("datagen requires --out DIR")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    corpus = datagen.make_corpus(cfg["n"], cfg["seed"], cfg["image_size"])
    with open(out / "captions.txt", "w") as fh:
        for i, item in enumerate(corpus):
            persistence.save_image(out / f"{i}.ppm", item.image)
            fh.write(item.caption + "\n")
    print(f"wrote {len(corpus)} images + captions.txt to {out}")
    return 0


def _load_corpus_dir(path):
    path = Path(path)
    captions = (path / "captions.txt").read_text().splitlines()
    images = [persistence.load_image(path / f"{i}.ppm") for i in range(len(captions))]
    return np.stack(images), captions


def cmd_train_tokenizer(args):
    defaults = {
        "data": None, "n": 256, "seed": 0, "image_size": 32, "steps": 3000,
        "batch_size": 16, "lr": 2e-3, "downsample_f": 4, "codebook_k": 256,
        "embed_d": 64, "out": None, "log": None,
    }
    cfg = _merged(args, defaults)
    if cfg["out"] is None:
        raise ConfigError("train-tokenizer requires --out CKPT")
    if cfg["data"]:
        images, _ = _load_corpus_dir(cfg["data"])
    else:
        corpus = datagen.make_corpus(cfg["n"], cfg["seed"], cfg["image_size"])
        images = np.stack([item.image for item in corpus])
    vq_cfg = VqConfig(image_size=images.shape[-1], downsample_f=cfg["downsample_f"],
                      codebook_k=cfg["codebook_k"], embed_d=cfg["embed_d"])
    tok, metrics = train_tokenizer(
        images, vq_cfg, cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        seed=cfg["seed"], log_path=cfg["log"],
    )
    persistence.save_tokenizer_checkpoint(cfg["out"], tok, {"root": cfg["seed"]})
    print(f"tokenizer: train_mse={metrics['train_mse']:.5f} "
          f"codes_used={metrics['codes_used']}/{vq_cfg.codebook_k} -> {cfg['out']}")
    return 0


def cmd_train_t2i(args):
    defaults = {
        "data": None, "n": 16, "seed": 0, "image_size": 32, "tokenizer": None,
        "steps": 2000, "batch_size": 16, "lr": 1e-4, "cond_dropout": 0.1,
        "grad_clip": 1.0, "target_loss": 0.0, "out": None, "log": None,
        "model.d_model": 128, "model.n_heads": 4, "model.depth_mm": 2,
        "model.depth_sm": 4, "model.ffn_mult": 2,
        "model.compression_threshold": 16,
    }
    cfg = _merged(args, defaults)
    if cfg["out"] is None or cfg["tokenizer"] is None:
        raise ConfigError("train-t2i requires --tokenizer CKPT and --out CKPT")
    tok, _ = persistence.load_tokenizer_checkpoint(cfg["tokenizer"])
    if cfg["data"]:
        images, captions = _load_corpus_dir(cfg["data"])
    else:
        corpus = datagen.make_corpus(cfg["n"], cfg["seed"], cfg["image_size"])
        images = np.stack([item.image for item in corpus])
        captions = [item.caption for item in corpus]
    side = images.shape[-1] // tok.cfg.downsample_f
    model_cfg = ModelConfig(
        d_model=cfg["model.d_model"], n_heads=cfg["model.n_heads"],
        depth_mm=cfg["model.depth_mm"], depth_sm=cfg["model.depth_sm"],
        ffn_mult=cfg["model.ffn_mult"], codebook_k=tok.cfg.codebook_k,
        grid_h=side, grid_w=side,
        compression_threshold=cfg["model.compression_threshold"],
    )
    vocab = Vocabulary(datagen.caption_words())
    grids = tok.encode_image(images)
    items = items_from_grids(grids, captions, vocab, images.shape[-1],
                             model_cfg.text_len)
    train_cfg = TrainConfig(
        batch_size=cfg["batch_size"], steps=cfg["steps"], lr=cfg["lr"],
        cond_dropout_p=cfg["cond_dropout"], grad_clip_norm=cfg["grad_clip"],
        seed=cfg["seed"],
        target_loss=cfg["target_loss"] if cfg["target_loss"] > 0 else None,
    )
    model, metrics = train_t2i(items, train_cfg, model_cfg, vocab, log_path=cfg["log"])
    persistence.save_t2i_checkpoint(cfg["out"], model, tok, {"root": cfg["seed"]})
    last = metrics.losses[-1] if metrics.losses else float("nan")
    print(f"t2i: steps={metrics.steps_run} final_loss={last:.4f} -> {cfg['out']}")
    return 0


def cmd_generate(args):
    defaults = {
        "checkpoint": None, "caption": None, "steps": 48, "cfg": 9.0,
        "temperature": 1.0, "seed": 0, "out": None, "trace": None,
    }
    cfg = _merged(args, defaults)
    if not all([cfg["checkpoint"], cfg["caption"], cfg["out"]]):
        raise ConfigError("generate requires --checkpoint, --caption, and --out")
    model, tok, _ = persistence.load_t2i_checkpoint(cfg["checkpoint"])
    sampler_cfg = SamplerConfig(steps=cfg["steps"], guidance=cfg["cfg"],
                                temperature=cfg["temperature"], seed=cfg["seed"])
    result = generate(model, tok, cfg["caption"], sampler_cfg)
    persistence.save_image(cfg["out"], result.image)
    if cfg["trace"]:
        with open(cfg["trace"], "w") as fh:
            for line in result.trace.csv_lines():
                fh.write(line + "\n")
    print(f"generated {cfg['out']} in {cfg['steps']} steps "
          f"({result.trace.forward_passes} forward passes)")
    return 0


def cmd_edit(args):
    defaults = {
        "checkpoint": None, "image": None, "mask": None, "caption": None,
        "steps": 48, "cfg": 9.0, "temperature": 1.0, "seed": 0,
        "strength": 0.6, "out": None,
    }
    cfg = _merged(args, defaults)
    if not all([cfg["checkpoint"], cfg["image"], cfg["caption"], cfg["out"]]):
        raise ConfigError("edit requires --checkpoint, --image, --caption, and --out")
    model, tok, _ = persistence.load_t2i_checkpoint(cfg["checkpoint"])
    image = persistence.load_image(cfg["image"])
    sampler_cfg = SamplerConfig(steps=cfg["steps"], guidance=cfg["cfg"],
                                temperature=cfg["temperature"], seed=cfg["seed"])
    if cfg["mask"]:
        region = persistence.load_mask(cfg["mask"])
        result = edit(model, tok, EditRequest(image, region, cfg["caption"], sampler_cfg))
    else:
        result = edit_mask_free(model, tok, image, cfg["caption"], sampler_cfg,
                                cfg["strength"])
    persistence.save_image(cfg["out"], result.image)
    print(f"edited -> {cfg['out']}")
    return 0


def cmd_verify(args):
    suites = args.suite.split(",") if args.suite else None
    dump = None
    if args.dump_schedule:
        steps, n = (int(x) for x in args.dump_schedule.split(","))
        dump = (steps, n)
    return run_verify(suites, seed=args.seed or 0, dump_schedule=dump)


def build_parser():
    parser = argparse.ArgumentParser(prog="mimgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="write a synthetic corpus to a directory")
    _add_config_flag(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train-tokenizer", help="train the VQ image tokenizer")
    _add_config_flag(p)
    for flag, typ in [("--data", str), ("--n", int), ("--image-size", int),
                      ("--steps", int), ("--batch-size", int), ("--lr", float),
                      ("--downsample-f", int), ("--codebook-k", int),
                      ("--embed-d", int), ("--out", str), ("--log", str)]:
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ, default=None)
    p.set_defaults(fn=cmd_train_tokenizer)

    p = sub.add_parser("train-t2i", help="train the text-to-image transformer")
    _add_config_flag(p)
    for flag, typ in [("--data", str), ("--n", int), ("--image-size", int),
                      ("--tokenizer", str), ("--steps", int), ("--batch-size", int),
                      ("--lr", float), ("--cond-dropout", float), ("--grad-clip", float),
                      ("--target-loss", float), ("--out", str), ("--log", str)]:
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ, default=None)
    for flag, typ in [("--model.d-model", int), ("--model.n-heads", int),
                      ("--model.depth-mm", int), ("--model.depth-sm", int),
                      ("--model.ffn-mult", int), ("--model.compression-threshold", int)]:
        p.add_argument(flag, dest=flag[2:].replace("-", "_").replace(".", "_"),
                       type=typ, default=None)
    p.set_defaults(fn=cmd_train_t2i)

    p = sub.add_parser("generate", help="decode an image from a caption")
    _add_config_flag(p)
    for flag, typ in [("--checkpoint", str), ("--caption", str), ("--steps", int),
                      ("--cfg", float), ("--temperature", float), ("--out", str),
                      ("--trace", str)]:
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("edit", help="mask-guided or mask-free image editing")
    _add_config_flag(p)
    for flag, typ in [("--checkpoint", str), ("--image", str), ("--mask", str),
                      ("--caption", str), ("--steps", int), ("--cfg", float),
                      ("--temperature", float), ("--strength", float), ("--out", str)]:
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ, default=None)
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("verify", help="run self-check suites")
    p.add_argument("--suite", default=None, help="comma-separated suite names")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dump-schedule", default=None, metavar="T,N",
                   help="print the cosine (t, masked) table for T steps, N tokens")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
