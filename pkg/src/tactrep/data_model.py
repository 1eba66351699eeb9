"""Samples, alignment groups, JSONL manifests, batching and contact filtering."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DuplicateId,
    GroupConsistency,
    MalformedLine,
    NoEligibleSamples,
    ShapeMismatch,
    UnknownSensor,
)

SPLITS = ("train", "val", "test")
MEDIA_KINDS = ("image", "video")
DEFAULT_CONTACT_THRESHOLD = 0.02
DEFAULT_FRAMES = 3

_REQUIRED_KEYS = ("id", "sensor", "frames", "object_id", "position_id", "group_id", "split")


@dataclass(frozen=True)
class SensorId:
    name: str
    index: int


@dataclass(frozen=True)
class TactileSample:
    id: str
    sensor: str
    frames: tuple[str, ...]
    object_id: str
    position_id: str
    group_id: str
    split: str = "train"
    vision: str | None = None
    text: str | None = None
    material: str | None = None

    def video_capable(self, frames: int = DEFAULT_FRAMES) -> bool:
        # the frame after the clip is the next-frame target
        return len(self.frames) >= frames + 1

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "sensor": self.sensor,
            "frames": list(self.frames),
            "object_id": self.object_id,
            "position_id": self.position_id,
            "group_id": self.group_id,
            "vision": self.vision,
            "text": self.text,
            "split": self.split,
            "material": self.material,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TactileSample":
        return cls(
            id=obj["id"],
            sensor=obj["sensor"],
            frames=tuple(obj["frames"]),
            object_id=obj["object_id"],
            position_id=obj["position_id"],
            group_id=obj["group_id"],
            split=obj["split"],
            vision=obj.get("vision"),
            text=obj.get("text"),
            material=obj.get("material"),
        )


@dataclass(frozen=True)
class AlignmentGroup:
    group_id: str
    members: tuple[TactileSample, ...]

    @property
    def sensors(self) -> set[str]:
        return {m.sensor for m in self.members}

    def eligible_for_matching(self) -> bool:
        return len(self.sensors) >= 2


@dataclass
class Manifest:
    samples: list[TactileSample] = field(default_factory=list)
    sensors: dict[str, SensorId] = field(default_factory=dict)
    root: Path = field(default_factory=Path)
    groups: dict[str, AlignmentGroup] = field(default_factory=dict, init=False)
    by_id: dict[str, TactileSample] = field(default_factory=dict, init=False)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        self._build_index()

    def _build_index(self) -> None:
        by_id: dict[str, TactileSample] = {}
        members: dict[str, list[TactileSample]] = {}
        for s in self.samples:
            if s.id in by_id:
                raise DuplicateId(s.id)
            if s.sensor not in self.sensors:
                raise UnknownSensor(s.sensor)
            by_id[s.id] = s
            members.setdefault(s.group_id, []).append(s)
        groups = {}
        for gid, ms in members.items():
            first = ms[0]
            for m in ms[1:]:
                if (m.object_id, m.position_id) != (first.object_id, first.position_id):
                    raise GroupConsistency(gid)
            if len({m.sensor for m in ms}) != len(ms):
                raise GroupConsistency(gid, "members must come from pairwise-distinct sensors")
            groups[gid] = AlignmentGroup(gid, tuple(ms))
        self.by_id = by_id
        self.groups = groups

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Manifest):
            return NotImplemented
        return self.samples == other.samples and self.sensors == other.sensors

    def subset(self, keep: Iterable[TactileSample] | None = None, *, split: str | None = None,
               sensors: Sequence[str] | None = None) -> "Manifest":
        """New manifest restricted to ``keep`` and/or a split and sensor list.

        The sensor registry is kept whole so sensor indices stay stable.
        """
        samples = list(self.samples if keep is None else keep)
        if split is not None:
            samples = [s for s in samples if s.split == split]
        if sensors is not None:
            wanted = set(sensors)
            samples = [s for s in samples if s.sensor in wanted]
        return Manifest(samples, dict(self.sensors), self.root)

    def resolve(self, rel: str) -> Path:
        return self.root / rel


def make_registry(names: Iterable[str]) -> dict[str, SensorId]:
    return {n: SensorId(n, i) for i, n in enumerate(names)}


def load_manifest(path: str | Path, sensors: Sequence[str] | None = None) -> Manifest:
    """Read a JSONL manifest; frame paths resolve relative to its directory.

    When ``sensors`` is None the registry is every sensor name seen, sorted.
    """
    path = Path(path)
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, exc.msg) from None
            if not isinstance(obj, dict):
                raise MalformedLine(line_no, "not a JSON object")
            missing = [k for k in _REQUIRED_KEYS if k not in obj]
            if missing:
                raise MalformedLine(line_no, f"missing keys {missing}")
            frames = obj["frames"]
            if not isinstance(frames, list) or not frames or not all(isinstance(f, str) for f in frames):
                raise MalformedLine(line_no, "frames must be a non-empty list of paths")
            if obj["split"] not in SPLITS:
                raise MalformedLine(line_no, f"bad split {obj['split']!r}")
            for key in ("vision", "text", "material"):
                if obj.get(key) is not None and not isinstance(obj[key], str):
                    raise MalformedLine(line_no, f"{key} must be a string or null")
            samples.append(TactileSample.from_json(obj))
    names = sensors if sensors is not None else sorted({s.sensor for s in samples})
    return Manifest(samples, make_registry(names), path.parent)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in manifest.samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def is_contact_frame(frame: np.ndarray, background: np.ndarray,
                     threshold: float = DEFAULT_CONTACT_THRESHOLD) -> bool:
    """True iff the mean absolute difference from the background exceeds ``threshold``.

    uint8 inputs are scaled to [0, 1]; float inputs are assumed already scaled.
    """
    frame = np.asarray(frame)
    background = np.asarray(background)
    if frame.shape != background.shape:
        raise ShapeMismatch(f"frame {frame.shape} vs background {background.shape}")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    a = _as_unit(frame)
    b = _as_unit(background)
    return bool(np.mean(np.abs(a - b)) > threshold)


def _as_unit(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def filter_contact_frames(manifest: Manifest, backgrounds: dict[str, np.ndarray],
                          threshold: float = DEFAULT_CONTACT_THRESHOLD,
                          store: "FrameStore | None" = None) -> Manifest:
    """Drop non-contact frames from every sample, and samples left with none."""
    store = store or FrameStore(manifest.root)
    kept = []
    for s in manifest.samples:
        bg = backgrounds[s.sensor]
        frames = tuple(f for f in s.frames if is_contact_frame(store.frame(f), bg, threshold))
        if frames:
            kept.append(dataclasses.replace(s, frames=frames))
    return Manifest(kept, dict(manifest.sensors), manifest.root)


def eligible_samples(manifest: Manifest, split: str | None, media_kind: str,
                     frames: int = DEFAULT_FRAMES) -> list[TactileSample]:
    if media_kind not in MEDIA_KINDS:
        raise ValueError(f"media_kind must be one of {MEDIA_KINDS}")
    out = [s for s in manifest.samples if split is None or s.split == split]
    if media_kind == "video":
        out = [s for s in out if s.video_capable(frames)]
    return out


def make_batches(manifest: Manifest, split: str | None, media_kind: str, batch_size: int,
                 seed: int, *, drop_last: bool = False,
                 frames: int = DEFAULT_FRAMES) -> list[list[str]]:
    """Seeded permutation of eligible sample ids cut into homogeneous batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pool = eligible_samples(manifest, split, media_kind, frames)
    if not pool:
        raise NoEligibleSamples(f"no {media_kind} samples in split {split!r}")
    order = np.random.default_rng(seed).permutation(len(pool))
    ids = [pool[i].id for i in order]
    batches = [ids[i:i + batch_size] for i in range(0, len(ids), batch_size)]
    if drop_last and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


class FrameStore:
    """Loads PNG frames as float32 arrays in [0, 1], caching by path."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}

    def frame(self, rel: str) -> np.ndarray:
        arr = self._cache.get(rel)
        if arr is None:
            with Image.open(self.root / rel) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            self._cache[rel] = arr
        return arr

    def clip(self, sample: TactileSample, frames: int = DEFAULT_FRAMES) -> np.ndarray:
        """The first ``frames`` frames plus the next-frame target: (frames+1, H, W, 3)."""
        return np.stack([self.frame(f) for f in sample.frames[:frames + 1]])

    def image(self, sample: TactileSample, frames: int = DEFAULT_FRAMES) -> np.ndarray:
        # deepest frame of the clip window stands in as the static image
        idx = min(len(sample.frames), frames) - 1
        return self.frame(sample.frames[idx])

    def vision(self, sample: TactileSample) -> np.ndarray | None:
        return None if sample.vision is None else self.frame(sample.vision)
