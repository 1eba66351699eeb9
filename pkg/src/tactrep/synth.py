"""Deterministic synthetic multi-sensor tactile world.

Objects carry a procedural height map whose structure is set by their
material class. Each (object, position, touch) is pressed once per sensor
with the same depth profile; sensors differ only through their
:class:`SensorProfile` (colour mixing, warp, lighting gain, noise). Every
random draw comes from a stream keyed on the world seed and the touch
coordinates, so output never depends on iteration order.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .data_model import Manifest, TactileSample, make_registry, save_manifest
from .errors import InvalidSpec, IOFailure, OutOfBounds, UnknownMaterial

DEFAULT_SENSORS = ("gelsight_mini", "digit", "duragel", "gelslim")
DEFAULT_MATERIALS = ("rubber", "fabric", "metal", "wood")
HARDNESS_THRESHOLD = 0.5
ROUGHNESS_THRESHOLD = 0.5

# light azimuths for the three colour channels, GelSight style
_LIGHT_ANGLES = np.deg2rad([90.0, 210.0, 330.0])


@dataclass
class SensorProfile:
    name: str
    color_matrix: list[list[float]]
    color_offset: list[float]
    warp: list[float]  # amplitude_y, amplitude_x, frequency, phase
    lighting_gain: float = 1.0
    noise_sigma: float = 0.004

    def matrix(self) -> np.ndarray:
        return np.asarray(self.color_matrix, dtype=np.float64)

    def offset(self) -> np.ndarray:
        return np.asarray(self.color_offset, dtype=np.float64)

    @classmethod
    def derive(cls, name: str, seed: int) -> "SensorProfile":
        """Deterministic pseudo-random profile for a sensor name."""
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        mix = np.eye(3) * rng.uniform(0.8, 1.2, size=3) + rng.normal(0.0, 0.25, size=(3, 3))
        offset = rng.uniform(0.35, 0.6, size=3)
        warp = [float(rng.uniform(0.5, 1.5)), float(rng.uniform(0.5, 1.5)),
                float(rng.uniform(0.5, 1.5)), float(rng.uniform(0, 2 * np.pi))]
        return cls(
            name=name,
            color_matrix=mix.round(6).tolist(),
            color_offset=offset.round(6).tolist(),
            warp=[round(w, 6) for w in warp],
            lighting_gain=round(float(rng.uniform(0.8, 1.25)), 6),
            noise_sigma=0.004,
        )


@dataclass
class WorldSpec:
    n_objects: int = 20
    n_positions_per_object: int = 3
    touches_per_position: int = 1
    sensors: list[SensorProfile] = field(default_factory=list)
    materials: list[str] = field(default_factory=lambda: list(DEFAULT_MATERIALS))
    frames_per_touch: int = 4
    image_size: tuple[int, int] = (32, 32)
    texture_size: int = 64
    patch_size: int = 4
    seed: int = 0
    drop_text: list[str] = field(default_factory=list)
    drop_vision: list[str] = field(default_factory=list)
    material_overlap: float = 0.0

    def __post_init__(self) -> None:
        if not self.sensors:
            self.sensors = [SensorProfile.derive(n, self.seed) for n in DEFAULT_SENSORS]
        self.sensors = [s if isinstance(s, SensorProfile) else _profile_from(s, self.seed)
                        for s in self.sensors]
        self.image_size = tuple(self.image_size)

    @classmethod
    def default(cls, seed: int = 0) -> "WorldSpec":
        """The acceptance world: 4 sensors, 20 objects x 3 positions x 5 touches."""
        return cls(touches_per_position=5, seed=seed,
                   drop_vision=["digit"], drop_text=["duragel"], material_overlap=0.6)

    def validate(self) -> None:
        h, w = self.image_size
        if self.n_objects < 1 or self.n_positions_per_object < 1 or self.touches_per_position < 1:
            raise InvalidSpec("object, position and touch counts must be >= 1")
        if self.frames_per_touch < 2:
            raise InvalidSpec("frames_per_touch must be >= 2")
        if h % self.patch_size or w % self.patch_size:
            raise InvalidSpec(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.texture_size < max(h, w) + 2:
            raise InvalidSpec("texture_size must exceed image size by at least 2")
        if not self.materials:
            raise InvalidSpec("need at least one material")
        names = [s.name for s in self.sensors]
        if len(set(names)) != len(names):
            raise InvalidSpec("sensor names must be unique")
        for s in self.sensors:
            if abs(np.linalg.det(s.matrix())) < 1e-6:
                raise InvalidSpec(f"sensor {s.name}: colour matrix not invertible")
        unknown = (set(self.drop_text) | set(self.drop_vision)) - set(names)
        if unknown:
            raise InvalidSpec(f"modality schedule names unknown sensors {sorted(unknown)}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "WorldSpec":
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "WorldSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _profile_from(obj, seed: int) -> SensorProfile:
    if isinstance(obj, str):
        return SensorProfile.derive(obj, seed)
    return SensorProfile(**obj)


# ---------------------------------------------------------------- textures


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    out = ndimage.zoom(grid, size / (cells + 1), order=3, mode="nearest")
    return out[:size, :size]


def _normalize(h: np.ndarray) -> np.ndarray:
    h = h - h.min()
    peak = h.max()
    return h / peak if peak > 0 else h


def _zscore(h: np.ndarray) -> np.ndarray:
    sd = h.std()
    return (h - h.mean()) / sd if sd > 0 else h - h.mean()


def _components(size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Four stationary structure families: bumps, woven grating, fine grain, stripes.

    Each family's scale and orientation are drawn per object, so every crop of
    one object shares the same statistics.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    spacing = rng.uniform(7.0, 11.0)
    jitter = rng.uniform(-0.25, 0.25, size=(2,) + (int(size // spacing) + 2,) * 2) * spacing
    bumps = np.zeros((size, size))
    sig = rng.uniform(1.5, 2.5)
    for i in range(jitter.shape[1]):
        for j in range(jitter.shape[2]):
            cy, cx = i * spacing + jitter[0, i, j], j * spacing + jitter[1, i, j]
            bumps += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig ** 2))
    period = rng.uniform(4.5, 7.5)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    rot = rng.uniform(0, np.pi)
    u = np.cos(rot) * xx + np.sin(rot) * yy
    v = -np.sin(rot) * xx + np.cos(rot) * yy
    grating = np.sin(2 * np.pi * u / period + phase[0]) * np.sin(2 * np.pi * v / period + phase[1])
    grain = _value_noise(rng, size, size // 2) + 0.5 * _value_noise(rng, size, size // 4)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(9.0, 14.0)
    coord = np.cos(theta) * xx + np.sin(theta) * yy
    stripes = np.sign(np.sin(2 * np.pi * (coord + 1.5 * _value_noise(rng, size, 3)) / period))
    stripes = ndimage.gaussian_filter(stripes, 1.0)
    return [_zscore(c) for c in (bumps, grating, grain, stripes)]


def make_texture(material_index: int, size: int, rng: np.random.Generator,
                 roughness: float, overlap: float = 0.0) -> np.ndarray:
    """Height map in [0, 1] mixing four structure families.

    The material's own family gets weight ``1 - overlap``; the remaining
    ``overlap`` is spread over all families by a random Dirichlet draw, so
    larger overlap makes classes harder to tell apart.
    """
    comps = _components(size, rng)
    weights = np.zeros(len(comps))
    weights[material_index % len(comps)] = 1.0 - overlap
    weights += overlap * rng.dirichlet(np.ones(len(comps)))
    h = sum(w * c for w, c in zip(weights, comps))
    fine = _zscore(_value_noise(rng, size, size // 2))
    h = _normalize(h) + 0.15 * roughness * _normalize(fine)
    return _normalize(h)


def attribute_text(material: str, texture_params: Sequence[float],
                   materials: Sequence[str] = DEFAULT_MATERIALS) -> str:
    """Template description: material plus hardness and roughness words.

    ``texture_params`` is (hardness, roughness), each in [0, 1].
    """
    if material not in materials:
        raise UnknownMaterial(f"unknown material {material!r}")
    hardness, roughness = texture_params[0], texture_params[1]
    hard_word = "hard" if hardness > HARDNESS_THRESHOLD else "soft"
    rough_word = "rough" if roughness > ROUGHNESS_THRESHOLD else "smooth"
    return f"{material}, {hard_word}, {rough_word}"


# --------------------------------------------------------------- rendering


def sensor_background(profile: SensorProfile, image_size: tuple[int, int]) -> np.ndarray:
    h, w = image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r2 = ((yy - h / 2) / h) ** 2 + ((xx - w / 2) / w) ** 2
    vignette = -0.12 * r2
    bg = profile.offset()[None, None, :] + vignette[..., None]
    return np.clip(bg, 0.0, 1.0)


def _warp_field(profile: SensorProfile, image_size: tuple[int, int]):
    h, w = image_size
    ay, ax, freq, phase = profile.warp
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy = ay * np.sin(2 * np.pi * freq * xx / w + phase)
    dx = ax * np.cos(2 * np.pi * freq * yy / h + phase)
    return yy + dy, xx + dx


def render_touch(texture: np.ndarray, position: tuple[int, int], depth_profile: Sequence[float],
                 profile: SensorProfile, image_size: tuple[int, int] = (32, 32),
                 rng: np.random.Generator | None = None, hardness: float = 0.5) -> np.ndarray:
    """Render one press as ``len(depth_profile)`` frames in [0, 1], shape (T, H, W, 3).

    A zero depth reproduces the sensor background exactly.
    """
    depths = np.asarray(depth_profile, dtype=np.float64)
    if np.any(np.diff(depths) < 0):
        raise ValueError("depth_profile must be non-decreasing")
    h, w = image_size
    oy, ox = position
    if oy < 0 or ox < 0 or oy + h > texture.shape[0] or ox + w > texture.shape[1]:
        raise OutOfBounds(f"crop at {position} of size {image_size} leaves texture {texture.shape}")
    crop = texture[oy:oy + h, ox:ox + w]
    gy, gx = np.gradient(crop)
    shading = np.stack([np.cos(a) * gx + np.sin(a) * gy for a in _LIGHT_ANGLES], axis=-1)
    # unit-depth imprint: directional shading plus darkening where the gel is pushed in
    imprint = 6.0 * shading - 0.6 * (crop - crop.mean())[..., None]
    imprint *= 0.6 + 0.4 * hardness
    wy, wx = _warp_field(profile, image_size)
    warped = np.stack([ndimage.map_coordinates(imprint[..., c], [wy, wx], order=1, mode="nearest")
                       for c in range(3)], axis=-1)
    mixed = warped @ profile.matrix().T * profile.lighting_gain
    bg = sensor_background(profile, image_size)
    frames = []
    for d in depths:
        if d <= 0:
            frames.append(bg.copy())
            continue
        frame = bg + d * mixed
        if rng is not None and profile.noise_sigma > 0:
            frame = frame + rng.normal(0.0, profile.noise_sigma, size=frame.shape)
        frames.append(np.clip(frame, 0.0, 1.0))
    return np.stack(frames)


def render_vision(texture: np.ndarray, position: tuple[int, int], albedo: np.ndarray,
                  image_size: tuple[int, int]) -> np.ndarray:
    """Camera-like view of the touched patch: the raw crop, tinted, no gel transform."""
    h, w = image_size
    oy, ox = position
    crop = texture[oy:oy + h, ox:ox + w]
    return np.clip(albedo[None, None, :] * (0.35 + 0.65 * crop[..., None]), 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _write_png(path: Path, img: np.ndarray) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


@dataclass
class ObjectInfo:
    index: int
    material: str
    hardness: float
    roughness: float
    texture: np.ndarray
    albedo: np.ndarray
    positions: list[tuple[int, int]]


def build_object(spec: WorldSpec, index: int) -> ObjectInfo:
    rng = np.random.default_rng([spec.seed, 1, index])
    m_idx = index % len(spec.materials)
    hardness = float(rng.uniform(0.0, 1.0))
    roughness = float(rng.uniform(0.0, 1.0))
    texture = make_texture(m_idx, spec.texture_size, rng, roughness, spec.material_overlap)
    albedo = np.clip(np.array([0.8, 0.55, 0.35]) * np.roll([1.0, 0.8, 0.6], m_idx % 3)
                     + rng.uniform(-0.1, 0.1, size=3), 0.1, 1.0)
    h, w = spec.image_size
    margin = 1
    positions = []
    for _ in range(spec.n_positions_per_object):
        oy = int(rng.integers(margin, spec.texture_size - h - margin + 1))
        ox = int(rng.integers(margin, spec.texture_size - w - margin + 1))
        positions.append((oy, ox))
    return ObjectInfo(index, spec.materials[m_idx], hardness, roughness, texture, albedo, positions)


def depth_profile_for(spec: WorldSpec, obj: int, pos: int, touch: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 2, obj, pos, touch])
    start = rng.uniform(0.25, 0.4)
    step = rng.uniform(0.2, 0.3)
    return start + step * np.arange(spec.frames_per_touch)


def _touch_jitter(spec: WorldSpec, obj: int, pos: int, touch: int) -> tuple[int, int]:
    if touch == 0:
        return 0, 0
    rng = np.random.default_rng([spec.seed, 3, obj, pos, touch])
    dy, dx = rng.integers(-1, 2, size=2)
    return int(dy), int(dx)


def _split_for(spec: WorldSpec, obj: int, pos: int, touch: int) -> str:
    n = spec.touches_per_position
    if n >= 3:
        return "test" if touch == n - 1 else "val" if touch == n - 2 else "train"
    u = np.random.default_rng([spec.seed, 4, obj, pos, touch]).uniform()
    return "train" if u < 0.7 else "val" if u < 0.8 else "test"


def group_key(obj: int, pos: int, touch: int) -> str:
    return f"o{obj:03d}_p{pos}_t{touch}"


def generate_world(spec: WorldSpec, out_dir: str | Path) -> Manifest:
    """Render the whole world to ``out_dir`` and write ``manifest.jsonl``.

    Output bytes depend only on ``spec``.
    """
    spec.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out}: {exc}") from exc
    with open(out / "world.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for prof in spec.sensors:
        _write_png(out / "backgrounds" / f"{prof.name}.png", sensor_background(prof, spec.image_size))

    samples = []
    for o in range(spec.n_objects):
        info = build_object(spec, o)
        text_full = attribute_text(info.material, (info.hardness, info.roughness), spec.materials)
        for p, (oy, ox) in enumerate(info.positions):
            for t in range(spec.touches_per_position):
                dy, dx = _touch_jitter(spec, o, p, t)
                crop_at = (oy + dy, ox + dx)
                depths = depth_profile_for(spec, o, p, t)
                gid = group_key(o, p, t)
                vision_rel = f"vision/{gid}.png"
                _write_png(out / vision_rel, render_vision(info.texture, crop_at, info.albedo, spec.image_size))
                split = _split_for(spec, o, p, t)
                for k, prof in enumerate(spec.sensors):
                    rng = np.random.default_rng([spec.seed, 5, o, p, t, k])
                    frames = render_touch(info.texture, crop_at, depths, prof, spec.image_size, rng,
                                          hardness=info.hardness)
                    sid = f"{gid}_{prof.name}"
                    rels = []
                    for f, frame in enumerate(frames):
                        rel = f"frames/{sid}/f{f}.png"
                        _write_png(out / rel, frame)
                        rels.append(rel)
                    samples.append(TactileSample(
                        id=sid,
                        sensor=prof.name,
                        frames=tuple(rels),
                        object_id=f"obj{o:03d}",
                        position_id=f"pos{p}",
                        group_id=gid,
                        split=split,
                        vision=None if prof.name in spec.drop_vision else vision_rel,
                        text=None if prof.name in spec.drop_text else text_full,
                        material=info.material,
                    ))
    manifest = Manifest(samples, make_registry(sorted(s.name for s in spec.sensors)), out)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest
