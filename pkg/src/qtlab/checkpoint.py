"""Versioned binary container for quantized models.

Layout: magic "QTCK", u32 version, then a length-prefixed section table. The
"header" section is canonical JSON (topology, quantizer parameters, metadata);
weight payloads follow as raw little-endian int8/int32 sections in topology
order, so identical checkpoints serialize to identical bytes. A plain-text
sidecar (same stem, ".meta") duplicates the metadata for human inspection.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .observers import activation_qparams, weight_qparams
from .quant import QuantParams, Rounding, derive_qrange, quantize, symmetric_qparams

MAGIC = b"QTCK"
VERSION = 1

INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1


class CheckpointError(RuntimeError):
    """Unreadable, mis-versioned, or internally inconsistent checkpoint."""


@dataclass
class LayerRecord:
    name: str
    kind: str                      # "dense" | "conv"
    weight_q: np.ndarray           # int8, output channel on axis 0
    weight_scale: float | list     # scalar or per-channel list
    bias_q: np.ndarray             # int32, quantized at weight_scale * input scale
    bias_scale: float | list
    input_site: str


@dataclass
class QuantizedCheckpoint:
    version: int
    bits: int
    granularity: str               # "per-tensor" | "per-channel"
    topology: list[dict]           # ordered {"kind", "name", ...} descriptors
    act_sites: dict[str, dict]     # site -> {"scale", "zero_point"}
    layers: dict[str, LayerRecord]
    meta: dict = field(default_factory=dict)

    def weight_qparams(self, name: str) -> QuantParams:
        rec = self.layers[name]
        axis = 0 if self.granularity == "per-channel" else None
        return symmetric_qparams(self.bits, rec.weight_scale, channel_axis=axis)

    def act_qparams(self, site: str) -> QuantParams:
        info = self.act_sites[site]
        q_min, q_max = derive_qrange(self.bits, False)
        return QuantParams(self.bits, float(info["scale"]), int(info["zero_point"]),
                           q_min, q_max, False)

    def fp_weight(self, name: str) -> np.ndarray:
        rec = self.layers[name]
        return rec.weight_q.astype(np.float64) * _axis0_view(rec.weight_scale, rec.weight_q.ndim)

    def fp_bias(self, name: str) -> np.ndarray:
        rec = self.layers[name]
        return rec.bias_q.astype(np.float64) * np.asarray(rec.bias_scale, dtype=np.float64)


def _axis0_view(scale, ndim: int) -> np.ndarray:
    arr = np.asarray(scale, dtype=np.float64)
    if arr.ndim == 0:
        return arr
    return arr.reshape((-1,) + (1,) * (ndim - 1))


def export_checkpoint(model, quant_points, bits: int, granularity: str,
                      meta: dict | None = None) -> QuantizedCheckpoint:
    """Freeze a trained model: integer weights plus trained activation scales.

    Weight scales come from the final observer statistics, widened when needed
    to cover the current maximum magnitude so the payload reconstructs every
    master weight within scale/2. Biases are quantized to 32-bit integers at
    weight_scale * input_site_scale.
    """
    if granularity not in ("per-tensor", "per-channel"):
        raise ValueError(f"unknown granularity {granularity!r}")
    by_id = {p.id: p for p in quant_points}
    for point in quant_points:
        if point.observer.updates == 0:
            raise CheckpointError(f"quant point {point.id} has an uninitialized observer")

    _, q_max = derive_qrange(bits, True)
    topology: list[dict] = []
    layers: dict[str, LayerRecord] = {}
    act_sites: dict[str, dict] = {}

    input_qp = activation_qparams(by_id["input.act"].observer, bits)
    act_sites["input"] = {"scale": float(input_qp.scale), "zero_point": int(input_qp.zero_point)}
    current_site = "input"
    current_scale = float(input_qp.scale)

    for layer in model.layers:
        if layer.kind in ("dense", "conv"):
            point = by_id[f"{layer.name}.weight"]
            obs_qp = weight_qparams(point.observer, bits)
            if (obs_qp.channel_axis is not None) != (granularity == "per-channel"):
                raise CheckpointError(f"observer granularity for {layer.name} does not match "
                                      f"requested export granularity {granularity!r}")
            w = layer.weight.data
            if granularity == "per-channel":
                cover = np.abs(w.reshape(w.shape[0], -1)).max(axis=1) / q_max
                scale = np.maximum(np.asarray(obs_qp.scale), cover)
                qp = symmetric_qparams(bits, scale, channel_axis=0)
                scale_out: float | list = [float(s) for s in np.asarray(qp.scale)]
                bias_scale = np.asarray(qp.scale) * current_scale
                bias_scale_out: float | list = [float(s) for s in bias_scale]
            else:
                scale = max(float(obs_qp.scale), float(np.max(np.abs(w))) / q_max)
                qp = symmetric_qparams(bits, scale)
                scale_out = float(qp.scale)
                bias_scale = qp.scale * current_scale
                bias_scale_out = float(bias_scale)
            weight_q = quantize(w, qp, Rounding.HALF_TO_EVEN).astype(np.int8)
            bias_q = np.rint(layer.bias.data / bias_scale)
            if np.any(bias_q < INT32_MIN) or np.any(bias_q > INT32_MAX):
                raise CheckpointError(f"bias of {layer.name} overflows int32 at scale "
                                      f"{bias_scale_out}")
            layers[layer.name] = LayerRecord(layer.name, layer.kind, weight_q,
                                             scale_out, bias_q.astype(np.int32),
                                             bias_scale_out, current_site)
            topology.append({"kind": layer.kind, "name": layer.name,
                             "weight_shape": list(w.shape), "input_site": current_site})
        elif layer.kind == "relu":
            site_qp = activation_qparams(by_id[f"{layer.name}.act"].observer, bits)
            act_sites[layer.name] = {"scale": float(site_qp.scale),
                                     "zero_point": int(site_qp.zero_point)}
            current_site = layer.name
            current_scale = float(site_qp.scale)
            topology.append({"kind": "relu", "name": layer.name})
        elif layer.kind == "flatten":
            topology.append({"kind": "flatten", "name": layer.name})
        else:
            raise CheckpointError(f"unsupported layer kind {layer.kind!r}")

    return QuantizedCheckpoint(VERSION, bits, granularity, topology, act_sites,
                               layers, dict(meta or {}))


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_sections(sections: list[tuple[str, bytes]]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(sections))]
    for name, payload in sections:
        name_b = name.encode("utf-8")
        out.append(struct.pack("<I", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


def checkpoint_bytes(ckpt: QuantizedCheckpoint) -> bytes:
    header = {
        "version": ckpt.version,
        "bits": ckpt.bits,
        "granularity": ckpt.granularity,
        "topology": ckpt.topology,
        "act_sites": ckpt.act_sites,
        "layers": {
            name: {
                "kind": rec.kind,
                "weight_shape": list(rec.weight_q.shape),
                "weight_scale": rec.weight_scale,
                "bias_scale": rec.bias_scale,
                "input_site": rec.input_site,
            }
            for name, rec in ckpt.layers.items()
        },
        "meta": ckpt.meta,
    }
    sections: list[tuple[str, bytes]] = [("header", _canonical_json(header))]
    for entry in ckpt.topology:
        if entry["kind"] in ("dense", "conv"):
            rec = ckpt.layers[entry["name"]]
            sections.append((f"layer/{rec.name}/weight", rec.weight_q.astype("<i1").tobytes()))
            sections.append((f"layer/{rec.name}/bias", rec.bias_q.astype("<i4").tobytes()))
    return _pack_sections(sections)


def save_checkpoint(ckpt: QuantizedCheckpoint, path) -> None:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ckpt))
    lines = [f"format: QTCK v{ckpt.version}",
             f"bits: {ckpt.bits}",
             f"granularity: {ckpt.granularity}",
             f"layers: {', '.join(ckpt.layers)}",
             f"activation sites: {', '.join(ckpt.act_sites)}"]
    for key in sorted(ckpt.meta):
        lines.append(f"meta.{key}: {ckpt.meta[key]}")
    path.with_suffix(".meta").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> QuantizedCheckpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, n_sections = struct.unpack_from("<II", blob, 4)
    if version > VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    sections: dict[str, bytes] = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (payload_len,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        sections[name] = blob[offset:offset + payload_len]
        if len(sections[name]) != payload_len:
            raise CheckpointError(f"{path}: truncated section {name!r}")
        offset += payload_len
    if "header" not in sections:
        raise CheckpointError(f"{path}: missing header section")
    header = json.loads(sections["header"].decode("utf-8"))

    layers: dict[str, LayerRecord] = {}
    for entry in header["topology"]:
        if entry["kind"] not in ("dense", "conv"):
            continue
        name = entry["name"]
        info = header["layers"][name]
        shape = tuple(info["weight_shape"])
        weight_q = np.frombuffer(sections[f"layer/{name}/weight"], dtype="<i1").reshape(shape)
        bias_q = np.frombuffer(sections[f"layer/{name}/bias"], dtype="<i4")
        layers[name] = LayerRecord(name, info["kind"], weight_q.astype(np.int8),
                                   info["weight_scale"], bias_q.astype(np.int32),
                                   info["bias_scale"], info["input_site"])
    return QuantizedCheckpoint(version, header["bits"], header["granularity"],
                               header["topology"], header["act_sites"], layers,
                               header["meta"])
