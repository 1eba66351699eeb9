"""Single-file checkpoints: JSON header followed by little-endian float32 tensors.

Layout::

    b"TACTCKPT" | uint64 LE header length | header JSON (UTF-8) | tensor bytes

Header offsets are relative to the first tensor byte. Each tensor carries a
CRC32 so corruption is reported with the offending offset.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import IncompatibleCheckpoint, IOFailure, VersionMismatch

MAGIC = b"TACTCKPT"
FORMAT_VERSION = 1
_PREFIX = len(MAGIC) + 8


@dataclass
class Checkpoint:
    config: RunConfig
    sensors: list[str]
    stage: int
    step: int
    model_state: dict[str, torch.Tensor]
    optim_state: dict | None = None
    extra: dict = field(default_factory=dict)
    log: list = field(default_factory=list, repr=False, compare=False)

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def build_model(self):
        from .model import TactileModel

        model = TactileModel(self.config.patch, self.config.encoder, self.config.decoder,
                             self.sensors, seed=self.config.train.seed)
        try:
            model.load_state_dict(self.model_state, strict=True)
        except RuntimeError as exc:
            raise IncompatibleCheckpoint(str(exc)) from None
        model.eval()
        return model

    def check_compatible(self, config: RunConfig, sensors: list[str] | None = None) -> None:
        if self.config.architecture() != config.architecture():
            raise IncompatibleCheckpoint("checkpoint architecture differs from the requested config")
        if sensors is not None and list(sensors) != list(self.sensors):
            raise IncompatibleCheckpoint(f"checkpoint sensors {self.sensors} != {list(sensors)}")


def _flatten_optim(state: dict) -> tuple[dict[str, torch.Tensor], dict]:
    tensors = {}
    meta_state = {}
    for pid in sorted(state["state"], key=int):
        slots = state["state"][pid]
        keys = []
        for key, val in slots.items():
            if isinstance(val, torch.Tensor):
                tensors[f"optim/{pid}/{key}"] = val
                keys.append(key)
        meta_state[str(pid)] = keys
    groups = json.loads(json.dumps(state["param_groups"], default=lambda o: list(o)))
    return tensors, {"slots": meta_state, "param_groups": groups}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    optim_meta = None
    if ckpt.optim_state is not None:
        opt_tensors, optim_meta = _flatten_optim(ckpt.optim_state)
        tensors.update(opt_tensors)
    entries = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous()
        dtype = str(arr.dtype).replace("torch.", "")
        data = arr.to(torch.float32).numpy().astype("<f4", copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(data), "crc32": zlib.crc32(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_json(),
        "config_hash": ckpt.config_hash,
        "sensors": list(ckpt.sensors),
        "stage": ckpt.stage,
        "step": ckpt.step,
        "optim": optim_meta,
        "extra": ckpt.extra,
        "tensors": entries,
        "data_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for c in chunks:
                fh.write(c)
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def read_header(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = fh.read(_PREFIX)
            if len(raw) < _PREFIX or raw[:len(MAGIC)] != MAGIC:
                raise IOFailure(f"{path}: bad magic at offset 0")
            (hlen,) = struct.unpack("<Q", raw[len(MAGIC):])
            head = fh.read(hlen)
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(head) != hlen:
        raise IOFailure(f"{path}: header truncated at offset {_PREFIX + len(head)}")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IOFailure(f"{path}: header unreadable near offset {_PREFIX}: {exc}") from None
    header["_data_start"] = _PREFIX + hlen
    return header


def load_checkpoint(path: str | Path) -> Checkpoint:
    header = read_header(path)
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {header.get('format_version')} != {FORMAT_VERSION}")
    start = header["_data_start"]
    with open(path, "rb") as fh:
        fh.seek(start)
        blob = fh.read()
    tensors = {}
    for e in header["tensors"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(blob):
            raise IOFailure(f"{path}: tensor {e['name']} truncated at offset {start + len(blob)} "
                            f"(needs bytes up to {start + hi})")
        data = blob[lo:hi]
        if zlib.crc32(data) != e["crc32"]:
            raise IOFailure(f"{path}: tensor {e['name']} corrupted in bytes {start + lo}..{start + hi}")
        arr = np.frombuffer(data, dtype="<f4").reshape(e["shape"]).copy()
        t = torch.from_numpy(arr)
        if e["dtype"] != "float32":
            t = t.to(getattr(torch, e["dtype"]))
        tensors[e["name"]] = t
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    optim_state = None
    meta = header.get("optim")
    if meta is not None:
        state = {}
        for pid in sorted(meta["slots"], key=int):
            keys = meta["slots"][pid]
            state[int(pid)] = {k: tensors[f"optim/{pid}/{k}"] for k in keys}
        optim_state = {"state": state, "param_groups": meta["param_groups"]}
    return Checkpoint(
        config=RunConfig.from_json(header["config"]),
        sensors=header["sensors"],
        stage=header["stage"],
        step=header["step"],
        model_state=model_state,
        optim_state=optim_state,
        extra=header.get("extra", {}),
    )
