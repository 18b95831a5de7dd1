import mimgen  # noqa: F401  (pins BLAS threads before numpy loads)

import numpy as np
import pytest

from mimgen import datagen
from mimgen.backbone import ModelConfig
from mimgen.text import Vocabulary
from mimgen.trainer import TrainConfig, items_from_grids, train_t2i
from mimgen.vq import VqConfig, train_tokenizer


TINY_MODEL_CFG = ModelConfig(
    d_model=32, n_heads=2, depth_mm=1, depth_sm=2, codebook_k=16, d_text=16,
    d_cond=16, grid_h=4, grid_w=4, text_len=8, sin_dim=8, compression_enabled=False,
)

MINI_VQ_CFG = VqConfig(image_size=16, downsample_f=4, codebook_k=16, embed_d=8,
                       base_channels=8)


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary(datagen.caption_words())


@pytest.fixture(scope="session")
def mini_corpus():
    """Four 32x32 scenes; the shared small training set."""
    items = datagen.make_corpus(4, seed=5)
    return np.stack([c.image for c in items]), [c.caption for c in items]


@pytest.fixture(scope="session")
def mini_tokenizer(mini_corpus):
    """Tokenizer memorizing the 4-scene corpus (exact round-trips)."""
    images, _ = mini_corpus
    tok, metrics = train_tokenizer(images, VqConfig(), 800, batch_size=4, lr=3e-3, seed=0)
    assert metrics["train_mse"] < 1e-3
    return tok


@pytest.fixture(scope="session")
def mini_t2i(mini_corpus, mini_tokenizer, vocab):
    """Small t2i model overfit on the 4-scene corpus; shared by slow tests."""
    images, captions = mini_corpus
    grids = mini_tokenizer.encode_image(images)
    cfg = ModelConfig(d_model=64, n_heads=2, depth_mm=1, depth_sm=2, d_text=64,
                      d_cond=64, sin_dim=16, compression_enabled=False)
    items = items_from_grids(grids, captions, vocab, 32, cfg.text_len)
    train_cfg = TrainConfig(batch_size=4, steps=1500, lr=4e-4, target_loss=0.05, seed=0)
    model, metrics = train_t2i(items, train_cfg, cfg, vocab)
    return {
        "model": model,
        "tokenizer": mini_tokenizer,
        "grids": grids,
        "captions": captions,
        "metrics": metrics,
    }
