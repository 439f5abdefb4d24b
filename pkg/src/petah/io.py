"""Binary checkpoint container, task adapter bundles and config files.

Container layout (all integers little-endian)::

    b"PTAH" | u32 version | u32 entry_count
    entry table, per entry:
        u16 name_len | name (UTF-8) | u8 kind | u8 ndim | ndim x u32 dims
        | u64 offset (from payload start) | u64 length (bytes)
    payload
    32-byte SHA-256 of every preceding byte

Kinds: 0 = weight (float32 row-major), 1 = mask (run-length encoded bitmap),
2 = meta (UTF-8 JSON).  A mask payload is ``u8 first_bit | u32 n_runs |
n_runs x u32 run_length`` over the row-major flattened bitmap.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import AdaptationPolicy, AdaptedModel, LoraFactors, count_adapter_params, inject
from .models import ModelConfig, ModuleGraph, build_mini_hybrid, build_mini_vit
from .tensor import ShapeError, Tensor

MAGIC = b"PTAH"
VERSION = 1
KIND_WEIGHT, KIND_MASK, KIND_META = 0, 1, 2
_KIND_NAMES = {KIND_WEIGHT: "weight", KIND_MASK: "mask", KIND_META: "meta"}
_DIGEST = 32


class ContainerError(IOError):
    """Unreadable or corrupted container."""


class ChecksumError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class FingerprintError(ValueError):
    pass


@dataclass
class Entry:
    name: str
    kind: int
    shape: tuple[int, ...]
    value: object  # ndarray for weight/mask, dict for meta


# ---------------------------------------------------------------------------
# run-length bitmaps
# ---------------------------------------------------------------------------


def rle_encode(bits: np.ndarray) -> bytes:
    flat = np.asarray(bits, dtype=bool).reshape(-1)
    if flat.size == 0:
        return struct.pack("<BI", 0, 0)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).astype("<u4")
    return struct.pack("<BI", int(flat[0]), runs.size) + runs.tobytes()


def rle_decode(buf: bytes, shape: tuple[int, ...]) -> np.ndarray:
    first, n_runs = struct.unpack_from("<BI", buf, 0)
    runs = np.frombuffer(buf, dtype="<u4", count=n_runs, offset=5)
    values = (np.arange(n_runs) + first) % 2 == 1
    flat = np.repeat(values, runs.astype(np.int64))
    if flat.size != int(np.prod(shape, dtype=np.int64)):
        raise ContainerError(f"mask run lengths cover {flat.size} entries, shape {shape} needs {int(np.prod(shape))}")
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------


def _encode(entry: Entry) -> bytes:
    if entry.kind == KIND_WEIGHT:
        arr = np.asarray(entry.value)
        if arr.dtype != np.float32:
            raise TypeError(f"{entry.name}: containers store float32 only, got {arr.dtype}")
        return np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if entry.kind == KIND_MASK:
        return rle_encode(entry.value)
    return json.dumps(entry.value, sort_keys=True).encode("utf-8")


def encode_container(entries: list[Entry]) -> bytes:
    payloads = [_encode(e) for e in entries]
    table = bytearray()
    offset = 0
    for e, p in zip(entries, payloads):
        name = e.name.encode("utf-8")
        shape = tuple(e.shape) if e.kind != KIND_META else ()
        table += struct.pack("<H", len(name)) + name
        table += struct.pack("<BB", e.kind, len(shape))
        table += struct.pack(f"<{len(shape)}I", *shape)
        table += struct.pack("<QQ", offset, len(p))
        offset += len(p)
    body = MAGIC + struct.pack("<II", VERSION, len(entries)) + bytes(table) + b"".join(payloads)
    return body + hashlib.sha256(body).digest()


def decode_container(buf: bytes) -> list[Entry]:
    if len(buf) < 12 + _DIGEST or buf[:4] != MAGIC:
        raise ContainerError("not a PTAH container")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch: file is truncated or corrupted")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    pos = 12
    table = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            kind, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            offset, length = struct.unpack_from("<QQ", body, pos)
            pos += 16
            table.append((name, kind, tuple(shape), offset, length))
    except struct.error as exc:
        raise ContainerError(f"entry table is malformed: {exc}") from None
    payload = body[pos:]
    out = []
    for name, kind, shape, offset, length in table:
        if offset + length > len(payload):
            raise ContainerError(f"entry {name} points past the end of the payload")
        raw = payload[offset : offset + length]
        if kind == KIND_WEIGHT:
            if length != 4 * int(np.prod(shape, dtype=np.int64)):
                raise ContainerError(f"entry {name}: {length} bytes do not hold shape {shape}")
            value = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        elif kind == KIND_MASK:
            value = rle_decode(raw, shape)
        elif kind == KIND_META:
            value = json.loads(raw.decode("utf-8"))
        else:
            raise ContainerError(f"entry {name} has unknown kind {kind}")
        out.append(Entry(name, kind, shape, value))
    return out


def write_container(path, entries: list[Entry]) -> int:
    """Write atomically (temp file + rename); returns the file size in bytes."""
    data = encode_container(entries)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


def read_container(path) -> list[Entry]:
    with open(path, "rb") as fh:
        return decode_container(fh.read())


def _meta(entries: list[Entry], name: str) -> dict:
    for e in entries:
        if e.kind == KIND_META and e.name == name:
            return e.value
    raise ContainerError(f"container has no {name!r} metadata")


# ---------------------------------------------------------------------------
# backbone checkpoints
# ---------------------------------------------------------------------------


_BUILDERS = {"hybrid": build_mini_hybrid, "vit": build_mini_vit}


def save_checkpoint(path, graph: ModuleGraph, masks: dict | None = None, extra: dict | None = None) -> int:
    masks = graph.masks if masks is None else masks
    meta = {"arch": graph.arch, "config": graph.config.to_dict(), **(extra or {})}
    entries = [Entry("model", KIND_META, (), meta)]
    for name, t in graph.parameters().items():
        entries.append(Entry(name, KIND_WEIGHT, t.shape, t.data))
    for name, m in masks.items():
        entries.append(Entry(f"mask/{name}", KIND_MASK, m.shape, m))
    return write_container(path, entries)


def load_checkpoint(path, config: ModelConfig | None = None) -> ModuleGraph:
    """Rebuild the graph recorded in ``path``; with ``config``, reject a mismatching architecture."""
    entries = read_container(path)
    meta = _meta(entries, "model")
    stored = ModelConfig.from_dict(meta["config"])
    if config is not None and config != stored:
        raise ShapeError(f"checkpoint config {stored} conflicts with expected {config}")
    graph = _BUILDERS[meta["arch"]](stored)
    params = graph.parameters()
    seen = set()
    masks = {}
    for e in entries:
        if e.kind == KIND_WEIGHT:
            if e.name not in params:
                raise ShapeError(f"checkpoint parameter {e.name} does not exist in a {meta['arch']} model")
            if tuple(e.shape) != params[e.name].shape:
                raise ShapeError(f"{e.name}: stored shape {e.shape} conflicts with {params[e.name].shape}")
            graph.set_parameter(e.name, Tensor(e.value, dtype=np.float32))
            seen.add(e.name)
        elif e.kind == KIND_MASK:
            masks[e.name.removeprefix("mask/")] = e.value
    missing = set(params) - seen
    if missing:
        raise ShapeError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for m in masks.values():
        m.flags.writeable = False
    graph.masks = masks
    return graph


def checkpoint_meta(path) -> dict:
    return _meta(read_container(path), "model")


# ---------------------------------------------------------------------------
# task adapter bundles
# ---------------------------------------------------------------------------


def backbone_fingerprint(graph: ModuleGraph) -> str:
    """SHA-256 over (name, shape, float32 bytes) of every non-head parameter."""
    head = graph.head.name + "."
    h = hashlib.sha256()
    for name, t in graph.parameters().items():
        if name.startswith(head):
            continue
        h.update(name.encode("utf-8"))
        h.update(struct.pack(f"<{t.ndim}I", *t.shape))
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass
class TaskAdapterBundle:
    task: str
    policy: AdaptationPolicy
    factors: dict[str, LoraFactors]
    head_weight: np.ndarray
    head_bias: np.ndarray
    fingerprint: str
    weights: dict[str, np.ndarray] = field(default_factory=dict)  # tuned backbone tensors (attn_ft / full_ft)
    info: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[0]

    def adapter_params(self) -> int:
        return sum(f.num_params() for f in self.factors.values())


def bundle_from_model(model: AdaptedModel, backbone: ModuleGraph, task: str, info: dict | None = None) -> TaskAdapterBundle:
    head = model.graph.head
    backbone_params = backbone.parameters()
    weights = {}
    for name in model.trainable:
        if model.is_adapter_param(name) or name.startswith(head.name + "."):
            continue
        weights[name] = model.graph.parameters()[name].data
    if model.merged:
        raise ValueError("bundle the factored model, not a merged one")
    for name in weights:
        if name not in backbone_params:
            raise KeyError(f"{name} is not a backbone parameter")
    return TaskAdapterBundle(
        task=task,
        policy=model.policy,
        factors=dict(model.adapters),
        head_weight=head.params["weight"].data,
        head_bias=head.params["bias"].data,
        fingerprint=backbone_fingerprint(backbone),
        weights=weights,
        info=dict(info or {}),
    )


def save_adapter_bundle(path, bundle: TaskAdapterBundle) -> dict:
    """Write ``bundle``; returns the file size and how much of it is adapter payload."""
    factors_meta = {
        t: {"rank": f.rank, "groups": f.groups, "kind": f.kind, "scale": f.scale} for t, f in bundle.factors.items()
    }
    meta = {
        "task": bundle.task,
        "policy": bundle.policy.to_dict(),
        "fingerprint": bundle.fingerprint,
        "factors": factors_meta,
        "adapter_params": bundle.adapter_params(),
        "info": bundle.info,
    }
    entries = [Entry("bundle", KIND_META, (), meta)]
    for t, f in bundle.factors.items():
        entries.append(Entry(f"adapter/{t}/A", KIND_WEIGHT, f.A.shape, f.A.data))
        entries.append(Entry(f"adapter/{t}/B", KIND_WEIGHT, f.B.shape, f.B.data))
    for name, arr in bundle.weights.items():
        entries.append(Entry(f"weight/{name}", KIND_WEIGHT, arr.shape, arr))
    entries.append(Entry("head/weight", KIND_WEIGHT, bundle.head_weight.shape, bundle.head_weight))
    entries.append(Entry("head/bias", KIND_WEIGHT, bundle.head_bias.shape, bundle.head_bias))
    size = write_container(path, entries)
    adapter_bytes = 4 * bundle.adapter_params()
    return {
        "bytes": size,
        "adapter_params": bundle.adapter_params(),
        "adapter_bytes": adapter_bytes,
        "head_params": bundle.head_weight.size + bundle.head_bias.size,
        "tuned_backbone_params": sum(a.size for a in bundle.weights.values()),
    }


def load_adapter_bundle(path) -> TaskAdapterBundle:
    entries = read_container(path)
    meta = _meta(entries, "bundle")
    arrays = {e.name: e.value for e in entries if e.kind == KIND_WEIGHT}
    factors = {}
    for t, fm in meta["factors"].items():
        factors[t] = LoraFactors(
            t,
            Tensor(arrays[f"adapter/{t}/A"]),
            Tensor(arrays[f"adapter/{t}/B"]),
            fm["rank"],
            fm["scale"],
            fm["groups"],
            fm["kind"],
        )
    weights = {k.removeprefix("weight/"): v for k, v in arrays.items() if k.startswith("weight/")}
    return TaskAdapterBundle(
        task=meta["task"],
        policy=AdaptationPolicy.from_dict(meta["policy"]),
        factors=factors,
        head_weight=arrays["head/weight"],
        head_bias=arrays["head/bias"],
        fingerprint=meta["fingerprint"],
        weights=weights,
        info=meta.get("info", {}),
    )


def attach(backbone: ModuleGraph, bundle: TaskAdapterBundle) -> AdaptedModel:
    """Recreate the adapted model a bundle was saved from, on top of ``backbone``."""
    fp = backbone_fingerprint(backbone)
    if fp != bundle.fingerprint:
        raise FingerprintError(f"bundle {bundle.task!r} was made for backbone {bundle.fingerprint[:12]}, got {fp[:12]}")
    model = inject(backbone, bundle.policy, num_classes=bundle.num_classes)
    params = model.graph.parameters()
    for target in bundle.factors:
        if target not in params:
            raise KeyError(f"bundle target {target} does not resolve in the backbone")
    if set(bundle.factors) != set(model.adapters):
        raise KeyError("bundle adapter targets do not match the policy's eligible layers")
    for target, f in bundle.factors.items():
        f.check_binds(params[target])
        model.adapters[target] = LoraFactors(target, f.A, f.B, f.rank, f.scale, f.groups, f.kind)
    for name, arr in bundle.weights.items():
        if name not in params:
            raise KeyError(f"bundle weight {name} does not resolve in the backbone")
        model.graph.set_parameter(name, Tensor(arr))
    model.graph.set_parameter(model.graph.head.param_name("weight"), Tensor(bundle.head_weight))
    model.graph.set_parameter(model.graph.head.param_name("bias"), Tensor(bundle.head_bias))
    return model


def bundle_param_count_matches(bundle: TaskAdapterBundle, backbone: ModuleGraph) -> bool:
    return bundle.adapter_params() == count_adapter_params(bundle.policy, backbone)["total"]


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def _coerce(value: str):
    v = value.strip()
    low = v.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in v:
        return [_coerce(x) for x in v.split(",") if x.strip()]
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def load_config(path) -> dict[str, dict]:
    """Parse a ``[section]`` / ``key = value`` file into nested dicts with typed values."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    return {s: {k.replace("-", "_"): _coerce(v) for k, v in parser.items(s)} for s in parser.sections()}


def dump_config(sections: dict[str, dict]) -> str:
    lines = []
    for s, kv in sections.items():
        lines.append(f"[{s}]")
        for k, v in kv.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
