"""Manifest construction and model reconstruction for checkpoints."""

from __future__ import annotations

import numpy as np

from .backbone import ModelConfig, T2IModel
from .persistence import config_from_jsonable, config_to_jsonable
from .text import TextConfig, Vocabulary
from .vq import VqConfig, VqTokenizer


def _lineage(seed_lineage: dict) -> dict:
    return {str(k): int(v) for k, v in (seed_lineage or {}).items()}


def tokenizer_manifest(tokenizer: VqTokenizer, seed_lineage: dict) -> dict:
    return {
        "vq_config": config_to_jsonable(tokenizer.cfg),
        "seeds": _lineage(seed_lineage),
    }


def tokenizer_from_manifest(manifest: dict) -> VqTokenizer:
    cfg = config_from_jsonable(VqConfig, manifest["vq_config"])
    rng = np.random.Generator(np.random.PCG64(0))
    return VqTokenizer(cfg, rng)


def t2i_manifest(model: T2IModel, tokenizer: VqTokenizer, seed_lineage: dict) -> dict:
    return {
        "model_config": config_to_jsonable(model.model_cfg),
        "text_config": config_to_jsonable(model.text_cfg),
        "vq_config": config_to_jsonable(tokenizer.cfg),
        "vocabulary": model.vocab.to_manifest(),
        "seeds": _lineage(seed_lineage),
    }


def t2i_from_manifest(manifest: dict):
    model_cfg = config_from_jsonable(ModelConfig, manifest["model_config"])
    text_cfg = config_from_jsonable(TextConfig, manifest["text_config"])
    vq_cfg = config_from_jsonable(VqConfig, manifest["vq_config"])
    vocab = Vocabulary.from_manifest(manifest["vocabulary"])
    rng = np.random.Generator(np.random.PCG64(0))
    model = T2IModel(model_cfg, text_cfg, vocab, rng)
    tokenizer = VqTokenizer(vq_cfg, np.random.Generator(np.random.PCG64(0)))
    return model, tokenizer
