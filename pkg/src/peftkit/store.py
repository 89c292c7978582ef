"""Bit-exact binary checkpoints for base models and PEFT modules.

Container layout (all integers little-endian, values float64 LE):

    magic            4 bytes  b"PFR1"
    technique        u32 length + UTF-8 name ("BASE" for base models)
    descriptor       u32 length + UTF-8 registry line ("" for BASE)
    fingerprint      u64 hash of the canonical base-config text
    config text      u32 length + UTF-8 canonical base-config text
    hyperparams      u32 length + UTF-8 "key=value" lines
    tensor count     u32
    per tensor:      u32 name length + UTF-8 name
                     u32 rank, then u32 extent per axis
                     float64 values (row-major)
    checksum         u32 CRC-32 of every preceding byte

Files are written atomically (temp file, then rename). Round-trips are
bit-exact; a fingerprint mismatch at load refuses attachment.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import zlib
from array import array
from dataclasses import dataclass

from peftkit.errors import (
    CompatibilityError,
    ContractError,
    IntegrityError,
)
from peftkit.peft import (
    ComposedModel,
    PeftHyperparams,
    PeftModule,
    PrefixTuningExported,
    attach,
    build,
)
from peftkit.tensor import Tensor
from peftkit.transformer import BaseConfig, BaseModel, base_param_bytes
from peftkit.typology import canonical_name, descriptor_to_line

MAGIC = b"PFR1"
BASE_TECHNIQUE = "BASE"


def config_fingerprint(config: BaseConfig) -> int:
    """64-bit hash of the canonical config text."""
    digest = hashlib.blake2b(config.canonical_text().encode(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little")


def config_from_text(text: str) -> BaseConfig:
    kv = {}
    for part in text.split(";"):
        k, v = part.split("=", 1)
        kv[k] = v
    return BaseConfig(
        num_layers=int(kv["num_layers"]),
        model_dim=int(kv["model_dim"]),
        num_heads=int(kv["num_heads"]),
        vocab_size=int(kv["vocab_size"]),
        ffn_dim=int(kv["ffn_dim"]),
        max_seq_len=int(kv["max_seq_len"]),
        causal=bool(int(kv["causal"])),
        pre_norm=bool(int(kv["pre_norm"])),
    )


def _hyper_text(mapping: dict) -> str:
    return "\n".join(f"{k}={mapping[k]}" for k in sorted(mapping))


def _hyper_parse(text: str) -> dict[str, str]:
    out = {}
    for line in text.split("\n"):
        if not line:
            continue
        k, v = line.split("=", 1)
        out[k] = v
    return out


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _named_tensors(module: PeftModule) -> list[tuple[str, Tensor]]:
    return [(p.name, p.tensor) for p in module.trainable_tensors()]


def _serialize(technique: str, descriptor_line: str, config: BaseConfig,
               hyper: dict, tensors: list[tuple[str, Tensor]]) -> bytes:
    parts = [MAGIC]
    parts.append(_pack_str(technique))
    parts.append(_pack_str(descriptor_line))
    parts.append(struct.pack("<Q", config_fingerprint(config)))
    parts.append(_pack_str(config.canonical_text()))
    parts.append(_pack_str(_hyper_text(hyper)))
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", len(t.shape)))
        for d in t.shape:
            parts.append(struct.pack("<I", d))
        parts.append(t.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _atomic_write(path, data: bytes) -> int:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


# ---------------------------------------------------------------- sizes

def _record_size(name: str, shape: tuple) -> int:
    numel = 1
    for d in shape:
        numel *= d
    return 4 + len(name.encode()) + 4 + 4 * len(shape) + 8 * numel


def checkpoint_size(technique: str, descriptor_line: str, config: BaseConfig,
                    hyper: dict, tensors) -> int:
    """Exact file size from the layout formula, without serializing."""
    size = len(MAGIC)
    size += 4 + len(technique.encode())
    size += 4 + len(descriptor_line.encode())
    size += 8
    size += 4 + len(config.canonical_text().encode())
    size += 4 + len(_hyper_text(hyper).encode())
    size += 4
    for name, t in tensors:
        size += _record_size(name, t.shape)
    return size + 4


def peft_checkpoint_size(module: PeftModule) -> int:
    return checkpoint_size(module.technique, _descriptor_line(module),
                           module.base_config, module.hyperparams(),
                           _named_tensors(module))


def _descriptor_line(module: PeftModule) -> str:
    return descriptor_to_line(module.technique, module.descriptor())


# ----------------------------------------------------------- PEFT side

def serialize_peft(module: PeftModule) -> bytes:
    try:
        tensors = _named_tensors(module)
    except Exception as exc:
        raise ContractError(f"module state is not serializable: {exc}") from exc
    return _serialize(module.technique, _descriptor_line(module),
                      module.base_config, module.hyperparams(), tensors)


def save_peft(module: PeftModule, path) -> int:
    """Write the module's trainable tensors; returns bytes written."""
    return _atomic_write(path, serialize_peft(module))


# ----------------------------------------------------------- base side

def serialize_base(model: BaseModel) -> bytes:
    tensors = [(name, model.params[name]) for name in sorted(model.params)]
    return _serialize(BASE_TECHNIQUE, "", model.config, {}, tensors)


def save_base(model: BaseModel, path) -> int:
    return _atomic_write(path, serialize_base(model))


# -------------------------------------------------------------- loading

@dataclass
class Checkpoint:
    technique: str
    descriptor_line: str
    fingerprint: int
    config: BaseConfig
    hyper: dict[str, str]
    tensors: dict[str, Tensor]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def deserialize(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4:
        raise IntegrityError("checkpoint too short")
    if data[:4] != MAGIC:
        raise IntegrityError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise IntegrityError(
            f"checksum mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}"
        )
    r = _Reader(data[:-4])
    r.take(4)  # magic
    technique = r.string()
    descriptor_line = r.string()
    fingerprint = r.u64()
    config = config_from_text(r.string())
    hyper = _hyper_parse(r.string())
    count = r.u32()
    tensors = {}
    for _ in range(count):
        name = r.string()
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        numel = 1
        for d in shape:
            numel *= d
        buf = array("d")
        buf.frombytes(r.take(8 * numel))
        tensors[name] = Tensor(shape, buf)
    if r.pos != len(r.data):
        raise IntegrityError("trailing bytes after tensor payload")
    return Checkpoint(technique=technique, descriptor_line=descriptor_line,
                      fingerprint=fingerprint, config=config, hyper=hyper,
                      tensors=tensors)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def _hyper_from_map(m: dict[str, str]) -> PeftHyperparams:
    def opt_int(key):
        v = m.get(key, "")
        return None if v in ("", "None") else int(v)

    layers = m.get("layers", "")
    return PeftHyperparams(
        n_virtual_tokens=int(m.get("n_virtual_tokens", 4)),
        bottleneck_dim=opt_int("bottleneck_dim"),
        kron_order=int(m.get("kron_order", 2)),
        tiny_dim=int(m.get("tiny_dim", 1)),
        lora_scale=float(m.get("lora_scale", 1.0)),
        layers=tuple(int(x) for x in layers.split(",")) if layers else None,
        seed=int(m.get("seed", 0)),
        prefix_activation=m.get("prefix_activation", "softmax"),
        adapter_bias=bool(int(m.get("adapter_bias", 0))),
    )


def rebuild_module(ckpt: Checkpoint) -> PeftModule:
    """Reconstruct a module skeleton and fill it with saved tensors."""
    hyper = _hyper_from_map(ckpt.hyper)
    cfg = ckpt.config
    if (canonical_name(ckpt.technique) == "prefix-tuning"
            and ckpt.hyper.get("exported") == "1"):
        from peftkit import tensor as tt
        n = hyper.n_virtual_tokens
        dh = hyper.bottleneck_dim or cfg.model_dim
        layers = hyper.resolve_layers(cfg)
        per_layer = {l: (tt.zeros((n, dh), requires_grad=True),
                         tt.zeros((n, dh), requires_grad=True))
                     for l in layers}
        module = PrefixTuningExported(
            cfg, hyper, tt.zeros((n, cfg.model_dim), requires_grad=True),
            per_layer)
    else:
        module = build(ckpt.technique, hyper, cfg)

    wanted = {p.name: p.tensor for p in module.trainable_tensors()}
    if set(wanted) != set(ckpt.tensors):
        missing = sorted(set(wanted) - set(ckpt.tensors))
        extra = sorted(set(ckpt.tensors) - set(wanted))
        raise IntegrityError(
            f"tensor names disagree with {ckpt.technique} structure; "
            f"missing {missing}, unexpected {extra}"
        )
    for name, target in wanted.items():
        src = ckpt.tensors[name]
        if src.shape != target.shape:
            raise IntegrityError(
                f"tensor {name} has shape {src.shape}, expected {target.shape}"
            )
        target.data[:] = src.data
    return module


def load_and_attach(base: BaseModel, path) -> ComposedModel:
    """Load a PEFT checkpoint and attach it; logits after attach are
    bit-identical to the pre-save composed model's."""
    ckpt = load_checkpoint(path)
    if ckpt.technique == BASE_TECHNIQUE:
        raise CompatibilityError("cannot attach a base checkpoint as a module")
    expected = config_fingerprint(base.config)
    if ckpt.fingerprint != expected:
        raise CompatibilityError(
            "checkpoint was built for a different base: "
            f"checkpoint config [{ckpt.config.canonical_text()}] vs "
            f"target base [{base.config.canonical_text()}]"
        )
    module = rebuild_module(ckpt)
    return attach(base, module)


def load_base(path) -> BaseModel:
    ckpt = load_checkpoint(path)
    if ckpt.technique != BASE_TECHNIQUE:
        raise CompatibilityError(
            f"expected a base checkpoint, found technique {ckpt.technique!r}"
        )
    params = {name: Tensor(t.shape, array("d", t.data))
              for name, t in ckpt.tensors.items()}
    return BaseModel(ckpt.config, params)


def base_hash(model: BaseModel) -> str:
    return hashlib.sha256(base_param_bytes(model)).hexdigest()


def module_hash(module: PeftModule) -> str:
    chunks = []
    for p in module.trainable_tensors():
        chunks.append(p.name.encode())
        chunks.append(p.tensor.tobytes())
    return hashlib.sha256(b"".join(chunks)).hexdigest()
