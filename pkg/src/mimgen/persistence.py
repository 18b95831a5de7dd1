"""File formats: checkpoints, token streams, PPM/PGM images, canonical JSON.

Checkpoint layout (all integers little-endian):

    magic  b"MIMCKPT1"
    u64    manifest length, then canonical-JSON manifest bytes
    u64    index length, then canonical-JSON index bytes
    data   concatenated float32 tensor blobs

The index maps tensor names to (shape, offset, nbytes, crc32); every blob
is checksummed so a corrupted byte surfaces as CorruptCheckpointError. The
manifest holds no JSON floats: float hyperparameters are stored as decimal
strings and parsed back by dataclass field type, which keeps manifest bytes
stable across platforms.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib

import numpy as np

from .errors import (
    CorruptCheckpointError,
    ShapeMismatchError,
    VersionMismatchError,
    WrongKindError,
)

FORMAT_VERSION = 1
_CKPT_MAGIC = b"MIMCKPT1"
_TOKEN_MAGIC = b"MIMTOK1"


# ---------------------------------------------------------------------------
# canonical JSON and config encoding


def canonical_json(obj) -> bytes:
    """Sorted-key, minimal-separator JSON; floats are rejected."""
    _reject_floats(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _reject_floats(obj):
    if isinstance(obj, float):
        raise ValueError("floats are not allowed in manifests; encode as strings")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _reject_floats(k)
            _reject_floats(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _reject_floats(v)


def config_to_jsonable(cfg) -> dict:
    """Dataclass -> manifest dict; floats become decimal strings, bools ints."""
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            out[f.name] = int(v)
        elif isinstance(v, float):
            out[f.name] = repr(v)
        elif isinstance(v, (int, str)) or v is None:
            out[f.name] = v
        else:
            raise ValueError(f"unsupported config field type for {f.name}: {type(v)}")
    return out


def config_from_jsonable(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if f.type in ("float", float):
            kwargs[f.name] = None if v is None else float(v)
        elif f.type in ("bool", bool):
            kwargs[f.name] = bool(v)
        else:
            kwargs[f.name] = v
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, kind: str, manifest_extra: dict, tensors: dict):
    """Write named float32 tensors plus a manifest describing them."""
    manifest = {"format_version": FORMAT_VERSION, "kind": kind}
    manifest.update(manifest_extra)
    blobs, index, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        index.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest_bytes = canonical_json(manifest)
    index_bytes = canonical_json({"tensors": index})
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        fh.write(struct.pack("<Q", len(index_bytes)))
        fh.write(index_bytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, expect_kind: str = None):
    """Read (manifest, tensors) back; verifies version, kind, and checksums."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_CKPT_MAGIC) + 8 or blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic or truncated header")
    pos = len(_CKPT_MAGIC)

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CorruptCheckpointError(f"{path}: truncated while reading {what}")
        piece = blob[pos : pos + n]
        pos += n
        return piece

    (mlen,) = struct.unpack("<Q", take(8, "manifest length"))
    manifest = json.loads(take(mlen, "manifest"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}"
        )
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise WrongKindError(
            f"{path}: checkpoint kind {manifest.get('kind')!r}, expected {expect_kind!r}"
        )
    (ilen,) = struct.unpack("<Q", take(8, "index length"))
    index = json.loads(take(ilen, "index"))
    data_start = pos
    tensors = {}
    for entry in index["tensors"]:
        lo = data_start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise CorruptCheckpointError(f"{path}: truncated blob for {entry['name']}")
        raw = blob[lo:hi]
        if zlib.crc32(raw) != entry["crc32"]:
            raise CorruptCheckpointError(f"{path}: checksum failure for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return manifest, tensors


def load_state_checked(module, tensors: dict, path: str = "<checkpoint>"):
    """Assign stored tensors onto a module, surfacing shape problems distinctly."""
    try:
        module.load_state(tensors)
    except ValueError as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# model-level checkpoints


def save_tokenizer_checkpoint(path, tokenizer, seed_lineage: dict):
    from .persistence_models import tokenizer_manifest

    save_checkpoint(path, "tokenizer", tokenizer_manifest(tokenizer, seed_lineage),
                    tokenizer.state())


def load_tokenizer_checkpoint(path):
    from .persistence_models import tokenizer_from_manifest

    manifest, tensors = load_checkpoint(path, expect_kind="tokenizer")
    tok = tokenizer_from_manifest(manifest)
    load_state_checked(tok, tensors, str(path))
    return tok, manifest


def save_t2i_checkpoint(path, model, tokenizer, seed_lineage: dict):
    """T2I checkpoints embed their tokenizer so one file drives generation."""
    from .persistence_models import t2i_manifest

    tensors = {f"model.{k}": v for k, v in model.state().items()}
    tensors.update({f"tokenizer.{k}": v for k, v in tokenizer.state().items()})
    save_checkpoint(path, "t2i", t2i_manifest(model, tokenizer, seed_lineage), tensors)


def load_t2i_checkpoint(path):
    from .persistence_models import t2i_from_manifest

    manifest, tensors = load_checkpoint(path, expect_kind="t2i")
    model, tokenizer = t2i_from_manifest(manifest)
    model_state = {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    tok_state = {
        k[len("tokenizer.") :]: v for k, v in tensors.items() if k.startswith("tokenizer.")
    }
    load_state_checked(model, model_state, str(path))
    load_state_checked(tokenizer, tok_state, str(path))
    return model, tokenizer, manifest


# ---------------------------------------------------------------------------
# token stream files


def save_token_grid(path, grid):
    """magic, u32 {height, width, K}, then height*width little-endian u16."""
    if grid.mask_index > 0xFFFF:
        raise ValueError("token file format caps the codebook at 65535 entries")
    with open(path, "wb") as fh:
        fh.write(_TOKEN_MAGIC)
        fh.write(struct.pack("<III", grid.height, grid.width, grid.mask_index))
        fh.write(grid.indices.astype("<u2").tobytes())


def load_token_grid(path):
    from .vq import TokenGrid

    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_TOKEN_MAGIC):
        raise ValueError(f"{path}: not a token stream file")
    h, w, k = struct.unpack("<III", blob[len(_TOKEN_MAGIC) : len(_TOKEN_MAGIC) + 12])
    body = blob[len(_TOKEN_MAGIC) + 12 :]
    if len(body) != h * w * 2:
        raise ValueError(f"{path}: token payload truncated")
    indices = np.frombuffer(body, dtype="<u2").astype(np.int64).reshape(h, w)
    return TokenGrid(indices, k)


# ---------------------------------------------------------------------------
# image files


def save_image(path, image: np.ndarray):
    """Float [3, H, W] in [0, 1] -> binary PPM (P6) or PNG by extension."""
    path = str(path)
    image = np.asarray(image)
    u8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    hwc = np.transpose(u8, (1, 2, 0))
    if path.endswith(".png"):
        from PIL import Image

        Image.fromarray(hwc).save(path)
        return
    h, w = hwc.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(hwc.tobytes())


def load_image(path) -> np.ndarray:
    """PPM (P6) or PNG -> float32 [3, H, W] in [0, 1]."""
    path = str(path)
    if path.endswith(".png"):
        from PIL import Image

        hwc = np.asarray(Image.open(path).convert("RGB"))
    else:
        with open(path, "rb") as fh:
            blob = fh.read()
        if not blob.startswith(b"P6"):
            raise ValueError(f"{path}: not a binary PPM file")
        fields, pos = [], 2
        while len(fields) < 3:
            while pos < len(blob) and blob[pos : pos + 1].isspace():
                pos += 1
            if blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos] != 0x0A:
                    pos += 1
                continue
            start = pos
            while pos < len(blob) and not blob[pos : pos + 1].isspace():
                pos += 1
            fields.append(int(blob[start:pos]))
        pos += 1  # single whitespace after maxval
        w, h, maxval = fields
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 PPMs are supported")
        body = blob[pos : pos + w * h * 3]
        if len(body) != w * h * 3:
            raise ValueError(f"{path}: pixel payload truncated")
        hwc = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return np.transpose(hwc, (2, 0, 1)).astype(np.float32) / 255.0


def save_mask(path, mask: np.ndarray):
    """Boolean [H, W] -> binary PGM (P5), 255 = edit region."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def load_mask(path) -> np.ndarray:
    """Binary PGM (P5) -> boolean [H, W]; nonzero = edit region."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1
    w, h, _ = fields
    body = blob[pos : pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: mask payload truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w) > 0
