"""Adapter checkpoint archive.

A checkpoint is a zip file holding::

    header.txt      plain-text key=value lines: format, version, scope, k,
                    hidden_dim, target_dim, step, sites
    manifest.json   per-tensor shape, dtype, sha256; producing config;
                    sha256 of the optimizer blob when present
    tensors/*.npy   one array per named tensor
    optimizer.pt    optional optimizer state (torch serialisation)

Only adapter weights are stored: the aggregator (alphas, per-layer
projections, LayerNorm affine) and every attached site's W_K'/W_V'.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import LayerAggregator
from .injection import ImageProjections

FORMAT = "maskadapt-adapter"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointInfo:
    version: int
    scope: str
    k: int
    hidden_dim: int
    target_dim: int
    step: int
    sites: list[str]
    tensors: dict[str, dict] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    has_optimizer: bool = False

    def to_text(self) -> str:
        lines = [f"format: {FORMAT} v{self.version}", f"scope: {self.scope}", f"k: {self.k}",
                 f"D: {self.hidden_dim}", f"D': {self.target_dim}", f"step: {self.step}",
                 f"sites: {', '.join(self.sites)}", f"optimizer state: {'yes' if self.has_optimizer else 'no'}",
                 "tensors:"]
        for name, meta in self.tensors.items():
            lines.append(f"  {name}\t{meta['dtype']}\t{tuple(meta['shape'])}")
        return "\n".join(lines) + "\n"


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, array, allow_pickle=False)
    return buf.getvalue()


def adapter_tensors(aggregator: LayerAggregator, projections: ImageProjections) -> dict[str, np.ndarray]:
    out = {
        "aggregator.alphas": aggregator.alphas,
        "aggregator.projections": aggregator.projections,
        "aggregator.norm.weight": aggregator.norm.weight,
        "aggregator.norm.bias": aggregator.norm.bias,
    }
    for site in projections.site_ids():
        wk, wv = projections.pair(site)
        out[f"w_k.{site}"] = wk
        out[f"w_v.{site}"] = wv
    return {k: v.detach().cpu().numpy() for k, v in out.items()}


def save_checkpoint(path: str | Path, aggregator: LayerAggregator, projections: ImageProjections, step: int = 0,
                    config: dict | None = None, optimizer: torch.optim.Optimizer | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = adapter_tensors(aggregator, projections)
    manifest = {"format": FORMAT, "version": VERSION, "config": config or {}, "tensors": {}}
    blobs = {}
    for name, arr in tensors.items():
        data = _npy_bytes(arr)
        blobs[f"tensors/{name}.npy"] = data
        manifest["tensors"][name] = {"shape": list(arr.shape), "dtype": str(arr.dtype), "sha256": _sha(data)}
    if optimizer is not None:
        buf = io.BytesIO()
        torch.save(optimizer.state_dict(), buf)
        blobs["optimizer.pt"] = buf.getvalue()
        manifest["optimizer_sha256"] = _sha(blobs["optimizer.pt"])
    header = "\n".join([
        f"format={FORMAT}", f"version={VERSION}", f"scope={projections.scope}", f"k={aggregator.k}",
        f"hidden_dim={aggregator.hidden_dim}", f"target_dim={aggregator.target_dim}", f"step={step}",
        f"sites={','.join(projections.site_ids())}",
    ]) + "\n"
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("header.txt", header)
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, data in blobs.items():
            zf.writestr(name, data)
    tmp.replace(path)
    return path


def _parse_header(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"bad header line {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _open(path: str | Path):
    """Read and verify the whole archive; returns (info, arrays, optimizer bytes)."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint archive ({exc})") from None
    with zf:
        try:
            bad = zf.testzip()
        except Exception as exc:  # truncated members surface as assorted zlib/zip errors
            raise CheckpointError(f"{path}: corrupt archive ({exc})") from None
        if bad is not None:
            raise CheckpointError(f"{path}: corrupt member {bad}")
        names = set(zf.namelist())
        for required in ("header.txt", "manifest.json"):
            if required not in names:
                raise CheckpointError(f"{path}: missing {required}")
        header = _parse_header(zf.read("header.txt").decode("utf-8"))
        manifest = json.loads(zf.read("manifest.json"))
        if header.get("format") != FORMAT:
            raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
        if int(header.get("version", -1)) != VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        arrays = {}
        for name, meta in manifest["tensors"].items():
            member = f"tensors/{name}.npy"
            if member not in names:
                raise CheckpointError(f"{path}: tensor {name} declared but missing")
            data = zf.read(member)
            if _sha(data) != meta["sha256"]:
                raise CheckpointError(f"{path}: checksum mismatch for {name}")
            arr = np.load(io.BytesIO(data), allow_pickle=False)
            if list(arr.shape) != meta["shape"] or str(arr.dtype) != meta["dtype"]:
                raise CheckpointError(f"{path}: {name} does not match its manifest entry")
            arrays[name] = arr
        opt = None
        if "optimizer.pt" in names:
            opt = zf.read("optimizer.pt")
            if _sha(opt) != manifest.get("optimizer_sha256"):
                raise CheckpointError(f"{path}: checksum mismatch for optimizer state")
    sites = [s for s in header.get("sites", "").split(",") if s]
    for site in sites:
        if f"w_k.{site}" not in arrays or f"w_v.{site}" not in arrays:
            raise CheckpointError(f"{path}: declared site {site} has no projections")
    info = CheckpointInfo(VERSION, header["scope"], int(header["k"]), int(header["hidden_dim"]),
                          int(header["target_dim"]), int(header["step"]), sites,
                          {n: {k: v for k, v in m.items() if k != "sha256"} for n, m in manifest["tensors"].items()},
                          manifest.get("config", {}), opt is not None)
    return info, arrays, opt


def inspect_checkpoint(path: str | Path) -> CheckpointInfo:
    return _open(path)[0]


def load_checkpoint(path: str | Path):
    """Returns ``(aggregator, projections, info, optimizer_state_or_None)``."""
    info, arrays, opt = _open(path)
    agg = LayerAggregator(info.k, info.hidden_dim, info.target_dim)
    with torch.no_grad():
        agg.alphas.copy_(torch.from_numpy(arrays["aggregator.alphas"]))
        agg.projections.copy_(torch.from_numpy(arrays["aggregator.projections"]))
        agg.norm.weight.copy_(torch.from_numpy(arrays["aggregator.norm.weight"]))
        agg.norm.bias.copy_(torch.from_numpy(arrays["aggregator.norm.bias"]))
    proj = ImageProjections.from_tensors(info.scope, {
        s: (torch.from_numpy(arrays[f"w_k.{s}"]), torch.from_numpy(arrays[f"w_v.{s}"])) for s in info.sites
    })
    state = torch.load(io.BytesIO(opt), weights_only=True) if opt is not None else None
    return agg, proj, info, state
