"""Self-check suites runnable before (and without) any training.

Each suite returns a list of Check records; the CLI prints one line per
check and exits nonzero if any fails. Suites stick to fresh, randomly
initialized models so a clean build verifies in well under five minutes.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import schedule as sched
from . import tensor as T
from .backbone import MicroConditions, ModelConfig, rope_rotate
from .editor import EditRequest, edit, project_mask
from .nn import Linear
from .sampler import SamplerConfig, cfg_mix, generate
from .text import Vocabulary, tokenize
from .trainer import build_model
from .vq import TokenGrid, VqConfig, VqTokenizer

from . import datagen, persistence


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name} status={status} value={self.value:.6g} threshold={self.threshold:.6g}"


def _tiny_model(seed=0, grid=4):
    cfg = ModelConfig(
        d_model=32, n_heads=2, depth_mm=1, depth_sm=2, codebook_k=16, d_text=16,
        d_cond=16, grid_h=grid, grid_w=grid, text_len=8, sin_dim=8,
        compression_enabled=False,
    )
    vocab = Vocabulary(datagen.caption_words())
    model = build_model(cfg, vocab, seed)
    tok = VqTokenizer(
        VqConfig(image_size=grid * 4, downsample_f=4, codebook_k=16, embed_d=8,
                 base_channels=8),
        np.random.Generator(np.random.PCG64(seed + 1)),
    )
    return model, tok, cfg


def suite_schedule(seed=0):
    checks = []
    rng = np.random.Generator(np.random.PCG64(seed))
    draws = sched.sample_mask_rates(rng, 100_000)
    ks = stats.kstest(draws, sched.mask_rate_cdf).statistic
    checks.append(Check("schedule.ks_distance", ks < 0.01, ks, 0.01))
    mean_err = abs(draws.mean() - 2.0 / np.pi)
    checks.append(Check("schedule.mean_vs_analytic", mean_err < 0.005, mean_err, 0.005))
    ok = True
    for steps in (1, 4, 8, 16, 48):
        for n in (64, 256):
            if steps > n:
                continue
            plan = sched.cosine_schedule(steps, n)
            ok &= plan.unmask.sum() == n
            ok &= plan.unmask.min() >= 1
            ok &= bool(np.all(np.diff(plan.masked) < 0))
    checks.append(Check("schedule.cosine_validity", ok, float(ok), 1.0))
    ident = all(
        sched.discretize((lvl + 0.5) / sched.RATE_LEVELS) == lvl
        for lvl in range(0, sched.RATE_LEVELS, 37)
    )
    checks.append(Check("schedule.discretize_identity", ident, float(ident), 1.0))
    emb = sched.sinusoidal_embed(10000.0 / (2 * np.pi), 16, 10000.0)
    err = abs(emb[-2] - np.sin(1.0))
    checks.append(Check("schedule.sinusoid_low_freq", err < 1e-9, err, 1e-9))
    return checks


def suite_grad(seed=0):
    rng = np.random.default_rng(seed)
    probe = T.Tensor(rng.normal(size=(3, 5)), dtype=np.float64)
    cases = {
        "add": (lambda a, b: T.tsum(a + b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "mul": (lambda a, b: T.tsum(a * b), [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
        "matmul": (lambda a, b: T.tsum(T.matmul(a, b)), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "softmax": (lambda a: T.tsum(T.softmax(a, -1) * probe), [rng.normal(size=(3, 5))]),
        "rms_norm": (lambda a, g: T.tsum(T.rms_norm(a, g)), [rng.normal(size=(2, 8)), rng.normal(size=(8,))]),
        "layer_norm": (lambda a, g, b: T.tsum(T.layer_norm(a, g, b)), [rng.normal(size=(2, 8)), rng.normal(size=(8,)), rng.normal(size=(8,))]),
        "gelu": (lambda a: T.tsum(T.gelu(a)), [rng.normal(size=(3, 3))]),
        "conv2d": (lambda x, w: T.tsum(T.conv2d(x, w, stride=2, pad=1)), [rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 4, 4))]),
        "conv_transpose2d": (lambda x, w: T.tsum(T.conv_transpose2d(x, w, stride=2)), [rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(2, 3, 2, 2))]),
        "cross_entropy": (lambda x: T.cross_entropy_from_logits(x, np.array([0, 2, 1]), np.array([1.0, 0.0, 2.0])), [rng.normal(size=(3, 4))]),
    }
    checks = []
    for name, (fn, inputs) in cases.items():
        report = T.grad_check(fn, inputs, tol=1e-3)
        checks.append(Check(f"grad.{name}", report.passed, report.max_rel_error, 1e-3))
    return checks


def suite_rope(seed=0):
    rng = np.random.default_rng(seed)
    hd, base = 16, 10000.0
    worst = 0.0
    for _ in range(1000):
        q = rng.normal(size=hd)
        k = rng.normal(size=hd)
        i, j = rng.integers(0, 64, size=2)
        qi = rope_rotate(q[None, :], np.array([i]), base).data[0]
        kj = rope_rotate(k[None, :], np.array([j]), base).data[0]
        qrel = rope_rotate(q[None, :], np.array([i - j]), base).data[0]
        worst = max(worst, abs(float(qi @ kj) - float(qrel @ k)))
    checks = [Check("rope.relative_property", worst < 1e-6, worst, 1e-6)]

    model, _, cfg = _tiny_model(seed)
    model.cast(np.float64)
    ids = tokenize("a red circle", model.vocab, cfg.text_len)[None, :]
    grid = np.full((1, cfg.grid_h, cfg.grid_w), cfg.codebook_k, dtype=np.int64)
    micro = MicroConditions.single(32, 32)
    levels = np.array([999])
    with T.no_grad():
        before = model.forward_ids(grid, ids, micro, levels).data.copy()
        streams = [b.image for b in model.backbone.sm_blocks]
        for block in model.backbone.mm_blocks:
            streams += [block.image, block.text]
        for stream in streams:
            for proj in (stream.q_proj, stream.k_proj):
                proj.weight.data *= 7.0
                proj.bias.data *= 7.0
        after = model.forward_ids(grid, ids, micro, levels).data
    diff = float(np.abs(after - before).max())
    checks.append(Check("rope.qk_scale_invariance", diff < 1e-6, diff, 1e-6))
    return checks


def suite_sampler(seed=0):
    model, tok, cfg = _tiny_model(seed)
    sampler_cfg = SamplerConfig(steps=4, guidance=2.0, temperature=0.0, seed=seed)
    r1 = generate(model, tok, "a red circle at the center on a blue background", sampler_cfg)
    r2 = generate(model, tok, "a red circle at the center on a blue background", sampler_cfg)
    checks = []
    plan = sched.cosine_schedule(4, cfg.n_tokens)
    trajectory_ok = all(
        rec.masked_before == plan.masked[i] for i, rec in enumerate(r1.trace.records)
    )
    checks.append(Check("sampler.m_t_trajectory", trajectory_ok, float(trajectory_ok), 1.0))
    checks.append(Check("sampler.terminates_unmasked", r1.grid.masked_count() == 0,
                        float(r1.grid.masked_count()), 0.0))
    det = np.array_equal(r1.image, r2.image)
    checks.append(Check("sampler.seed_determinism", det, float(det), 1.0))
    fp = r1.trace.forward_passes
    checks.append(Check("sampler.forward_passes_2T", fp == 8, float(fp), 8.0))
    committed = np.concatenate([rec.committed for rec in r1.trace.records])
    mono = len(set(committed.tolist())) == committed.size
    checks.append(Check("sampler.monotone_commitment", mono, float(mono), 1.0))
    c = np.arange(6.0).reshape(2, 3)
    u = np.ones((2, 3))
    ok = np.array_equal(cfg_mix(c, u, 0.0), u) and np.array_equal(cfg_mix(c, u, 1.0), c)
    checks.append(Check("sampler.cfg_identities", ok, float(ok), 1.0))
    return checks


def suite_edit(seed=0):
    model, tok, cfg = _tiny_model(seed)
    rng = np.random.default_rng(seed)
    f = tok.cfg.downsample_f
    size = cfg.grid_h * f
    preserved = True
    for trial in range(5):
        image = rng.random((3, size, size)).astype(np.float32)
        region = np.zeros((size, size), dtype=bool)
        y, x = rng.integers(0, size - f, size=2)
        region[y : y + f + 1, x : x + f + 1] = True
        req = EditRequest(image, region, "a red circle",
                          SamplerConfig(steps=2, guidance=1.0, temperature=0.0, seed=trial))
        result = edit(model, tok, req)
        token_mask = project_mask(region, f)
        preserved &= np.array_equal(
            result.result_grid.indices[~token_mask], result.source_grid.indices[~token_mask]
        )
        preserved &= result.result_grid.masked_count() == 0
    checks = [Check("edit.outside_region_preserved", preserved, float(preserved), 1.0)]
    agree = True
    for _ in range(100):
        pm = rng.random((size, size)) < 0.2
        if not pm.any():
            continue
        fast = project_mask(pm, f)
        slow = np.zeros_like(fast)
        for ty in range(size // f):
            for tx in range(size // f):
                slow[ty, tx] = pm[ty * f : (ty + 1) * f, tx * f : (tx + 1) * f].any()
        agree &= np.array_equal(fast, slow)
    checks.append(Check("edit.project_mask_oracle", agree, float(agree), 1.0))
    return checks


def suite_roundtrip(seed=0):
    checks = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        model, tok, _ = _tiny_model(seed)
        path = tmp / "model.ckpt"
        persistence.save_t2i_checkpoint(path, model, tok, {"root": seed})
        model2, tok2, _ = persistence.load_t2i_checkpoint(path)
        same = all(
            np.array_equal(a, b)
            for a, b in zip(model.state().values(), model2.state().values())
        ) and all(
            np.array_equal(a, b) for a, b in zip(tok.state().values(), tok2.state().values())
        )
        checks.append(Check("roundtrip.checkpoint_bitexact", same, float(same), 1.0))

        rng = np.random.default_rng(seed)
        grid = TokenGrid(rng.integers(0, 17, size=(4, 4)), 16)
        persistence.save_token_grid(tmp / "g.tok", grid)
        grid2 = persistence.load_token_grid(tmp / "g.tok")
        ok = np.array_equal(grid.indices, grid2.indices) and grid2.mask_index == 16
        checks.append(Check("roundtrip.token_file", ok, float(ok), 1.0))

        img = datagen.render(datagen.SceneSpec("circle", "red", "blue", "center", "large"), 32)
        persistence.save_image(tmp / "img.ppm", img)
        img2 = persistence.load_image(tmp / "img.ppm")
        persistence.save_image(tmp / "img2.ppm", img2)
        ok = (tmp / "img.ppm").read_bytes() == (tmp / "img2.ppm").read_bytes()
        checks.append(Check("roundtrip.ppm_bitexact", ok, float(ok), 1.0))
    return checks


SUITES = {
    "schedule": suite_schedule,
    "grad": suite_grad,
    "rope": suite_rope,
    "sampler": suite_sampler,
    "edit": suite_edit,
    "roundtrip": suite_roundtrip,
}


def run_verify(suite_names=None, seed=0, dump_schedule=None, out=print) -> int:
    names = suite_names or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suites: {unknown}; available: {sorted(SUITES)}")
    if dump_schedule is not None:
        steps, n = dump_schedule
        out(sched.cosine_schedule(steps, n).table())
    failed = 0
    for name in names:
        for check in SUITES[name](seed):
            out(check.line())
            failed += 0 if check.passed else 1
    out(f"verify: {'OK' if failed == 0 else f'{failed} checks failed'}")
    return 0 if failed == 0 else 1
