"""Checkpoint directory format.

manifest.json lists every tensor (name, shape, dtype, byte offset, sha256)
in the order it appears in weights.bin; tensors are serialized sorted by
name as little-endian float32. The manifest's top-level digest is the sha256
of weights.bin, which is also the identity used to verify that a base model
has not been touched. vocab.json holds the tokenizer.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

from .tensor import Tensor
from .tokenizer import BpeVocab

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensor_bytes(arr: np.ndarray) -> bytes:
    if arr.dtype != np.float32:
        raise CheckpointError(f"checkpoint tensors must be float32, got {arr.dtype}")
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def serialize_params(params: dict[str, Tensor]) -> tuple[bytes, list[dict]]:
    blob = bytearray()
    entries = []
    for name in sorted(params):
        raw = _tensor_bytes(params[name].data)
        entries.append({
            "name": name,
            "shape": list(params[name].data.shape),
            "dtype": "f32",
            "offset": len(blob),
            "digest": hashlib.sha256(raw).hexdigest(),
        })
        blob.extend(raw)
    return bytes(blob), entries


def digest_of_params(params: dict[str, Tensor]) -> str:
    blob, _ = serialize_params(params)
    return hashlib.sha256(blob).hexdigest()


def _atomic_write_bytes(path: str, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, kind: str, params: dict[str, Tensor], config: dict,
                    vocab: BpeVocab, extra: dict | None = None) -> str:
    """Write a checkpoint directory; returns the global digest."""
    os.makedirs(path, exist_ok=True)
    blob, entries = serialize_params(params)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "digest": digest,
        "config": config,
        "extra": extra or {},
        "tensors": entries,
    }
    _atomic_write_bytes(os.path.join(path, "weights.bin"), blob)
    _atomic_write_bytes(os.path.join(path, "manifest.json"),
                        json.dumps(manifest, indent=1, sort_keys=True).encode())
    _atomic_write_bytes(os.path.join(path, "vocab.json"), vocab.to_json().encode())
    return digest


def load_checkpoint(path: str, expect_kind: str | None = None):
    """Returns (params, manifest, vocab); params are float32 Tensors."""
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise CheckpointError(f"expected a '{expect_kind}' checkpoint, "
                              f"found '{manifest.get('kind')}'")
    with open(os.path.join(path, "weights.bin"), "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != manifest["digest"]:
        raise CheckpointError(f"{path}: weights.bin does not match manifest digest")
    params: dict[str, Tensor] = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        raw = blob[e["offset"]:e["offset"] + 4 * n]
        if hashlib.sha256(raw).hexdigest() != e["digest"]:
            raise CheckpointError(f"tensor '{e['name']}' is corrupt")
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        params[e["name"]] = Tensor(arr)
    with open(os.path.join(path, "vocab.json"), encoding="utf-8") as f:
        vocab = BpeVocab.from_json(f.read())
    return params, manifest, vocab


# -- typed wrappers --------------------------------------------------------------


def save_base_model(path: str, model) -> str:
    if not model.digest:
        raise CheckpointError("freeze() the base model before saving")
    digest = save_checkpoint(path, "base", model.params,
                             {"model": model.cfg.to_dict()}, model.vocab)
    if digest != model.digest:
        raise CheckpointError("serialized digest does not match frozen digest")
    return digest


def load_base_model(path: str):
    from .basemodel import BaseModel, ModelConfig
    params, manifest, vocab = load_checkpoint(path, "base")
    cfg = ModelConfig.from_dict(manifest["config"]["model"])
    return BaseModel(cfg=cfg, params=params, vocab=vocab, digest=manifest["digest"])


def save_extension_model(path: str, model) -> str:
    extra = {
        "base_digest": model.base.digest,
        "rank": model.rank,
        "alpha": model.alpha,
        "start_layer": model.start_layer,
    }
    return save_checkpoint(path, "extension", model.trainable_params(),
                           {"model": model.cfg.to_dict()}, model.sec_vocab, extra)


def load_extension_model(path: str, base):
    """Re-attach an extension to the exact base it was trained on."""
    from .extension import DualPipelineModel, LoraAdapter
    params, manifest, vocab = load_checkpoint(path, "extension")
    extra = manifest["extra"]
    base.verify_digest()
    if extra["base_digest"] != base.digest:
        raise CheckpointError(
            f"extension was trained on base {extra['base_digest'][:12]}.., "
            f"given base is {base.digest[:12]}..")
    from .basemodel import BaseModel, ModelConfig
    cfg = ModelConfig.from_dict(manifest["config"]["model"])
    linked = BaseModel(cfg=cfg, params=base.params, vocab=base.vocab, digest=base.digest)
    adapters: dict[str, LoraAdapter] = {}
    sec_params = {}
    for name, t in params.items():
        t.requires_grad = True
        if name.startswith("lora."):
            target = name[len("lora."):-2]
            side = name[-1]
            ad = adapters.setdefault(target, LoraAdapter(a=None, b=None,  # type: ignore
                                                         rank=extra["rank"],
                                                         alpha=extra["alpha"]))
            setattr(ad, side, t)
        else:
            sec_params[name] = t
    for target, ad in adapters.items():
        if ad.a is None or ad.b is None:
            raise CheckpointError(f"adapter '{target}' is missing one of a/b")
    return DualPipelineModel(base=linked, sec_vocab=vocab, start_layer=extra["start_layer"],
                             rank=extra["rank"], alpha=extra["alpha"],
                             adapters=adapters, sec_params=sec_params)
