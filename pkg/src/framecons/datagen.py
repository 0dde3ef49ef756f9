"""Procedural moving-shapes videos with dense labels, and their on-disk format.

Each scene is a fixed-length clip of coloured shapes (disk, square, triangle,
ring, bar; one class each, background is class 0) moving at constant velocity
and bouncing off the borders over a smooth background gradient. Frames get a
global sinusoidal illumination change and i.i.d. Gaussian pixel noise; labels
are untouched by both.

On disk::

    dir/manifest.txt                  key=value lines
    dir/scene_00000/frame_000.ppm     P6, 8-bit RGB
    dir/scene_00000/label_000.pgm     P5, class id per pixel, 255 = IGNORE
"""

from __future__ import annotations

import colorsys
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .labels import IGNORE, check_labels
from .netpbm import NetpbmError, quantize, read_pgm, read_ppm, write_pgm, write_ppm
from .tensorio import format_kv, parse_kv

SHAPE_KINDS = ("disk", "square", "triangle", "ring", "bar")
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    """One shape's full trajectory description. ``size`` is a radius-like extent in px."""

    kind: str
    x: float
    y: float
    vx: float
    vy: float
    size: float
    color: tuple[float, float, float]
    vertical: bool = False

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"shape kind must be one of {SHAPE_KINDS}, got {self.kind!r}")
        if self.size <= 0:
            raise ValueError(f"shape size must be positive, got {self.size}")

    @property
    def class_id(self) -> int:
        return SHAPE_KINDS.index(self.kind) + 1


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    frames: int = 30
    height: int = 64
    width: int = 64
    num_classes: int = 6
    min_shapes: int = 3
    max_shapes: int = 8
    min_speed: float = 0.5
    max_speed: float = 2.5
    min_size: float = 5.0
    max_size: float = 11.0
    illumination_amplitude: float = 0.25
    illumination_period: float = 12.0
    noise_sigma: float = 0.1
    occlusion: bool = True
    invalid_border: int = 0
    shapes: tuple[ShapeSpec, ...] | None = None

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError(f"frames must be >= 2, got {self.frames}")
        if self.height <= 0 or self.width <= 0 or self.height % 4 or self.width % 4:
            raise ValueError(f"height and width must be positive multiples of 4, "
                             f"got {self.height}x{self.width}")
        if not 2 <= self.num_classes <= len(SHAPE_KINDS) + 1:
            raise ValueError(f"num_classes must be in [2, {len(SHAPE_KINDS) + 1}], got {self.num_classes}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError(f"need 0 <= min_shapes <= max_shapes, got {self.min_shapes}, {self.max_shapes}")
        if not 0 <= self.min_speed <= self.max_speed:
            raise ValueError(f"need 0 <= min_speed <= max_speed, got {self.min_speed}, {self.max_speed}")
        if not 0 < self.min_size <= self.max_size:
            raise ValueError(f"need 0 < min_size <= max_size, got {self.min_size}, {self.max_size}")
        if self.noise_sigma < 0 or self.illumination_amplitude < 0:
            raise ValueError("noise_sigma and illumination_amplitude must be non-negative")
        if self.illumination_period <= 0:
            raise ValueError("illumination_period must be positive")
        if not 0 <= 2 * self.invalid_border < min(self.height, self.width):
            raise ValueError(f"invalid_border {self.invalid_border} too large for the frame")
        if self.shapes is not None:
            for s in self.shapes:
                if s.class_id >= self.num_classes:
                    raise ValueError(f"shape {s.kind!r} has class {s.class_id}, "
                                     f"beyond num_classes={self.num_classes}")

    def to_kv(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "shapes":
                continue
            out[f.name] = str(getattr(self, f.name))
        if self.shapes is not None:
            out["explicit_shapes"] = str(len(self.shapes))
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str], source: str = "<config>") -> "SceneConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in kv.items():
            if key == "explicit_shapes":
                continue
            if key not in types or key == "shapes":
                raise ValueError(f"{source}: unknown scene config key {key!r}")
            try:
                kwargs[key] = _parse_field(types[key], raw)
            except ValueError as exc:
                raise ValueError(f"{source}: bad value for {key!r}: {raw!r}") from exc
        return cls(**kwargs)


def _parse_field(type_name, raw: str):
    if type_name in ("bool", bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(raw)
    if type_name in ("int", int):
        return int(raw)
    return float(raw)


@dataclass
class Scene:
    frames: np.ndarray  # [T, 3, M, N] float64 in [0, 1]
    labels: np.ndarray  # [T, M, N] uint8
    dense_labels: np.ndarray | None = None  # set by sparse views: labels before masking
    name: str = ""

    @property
    def temporal_labels(self) -> np.ndarray:
        return self.labels if self.dense_labels is None else self.dense_labels


# ----------------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------------

def _bounce(p0: float, v: float, t: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    if span <= 0:
        return np.full(t.shape, (lo + hi) / 2.0)
    u = np.mod(p0 - lo + v * t, 2.0 * span)
    return lo + np.where(u <= span, u, 2.0 * span - u)


def _extent(shape: ShapeSpec) -> tuple[float, float]:
    """Half extent (x, y) of the shape's bounding box."""
    r = shape.size
    if shape.kind == "bar":
        return (0.4 * r, 1.3 * r) if shape.vertical else (1.3 * r, 0.4 * r)
    return r, r


def shape_mask(shape: ShapeSpec, cx: float, cy: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    r = shape.size
    if shape.kind == "disk":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 > (0.55 * r) ** 2)
    if shape.kind == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if shape.kind == "bar":
        ex, ey = _extent(shape)
        return (np.abs(dx) <= ex) & (np.abs(dy) <= ey)
    # upward-pointing triangle: apex (0, -r), base corners (+-r, 0.8 r)
    below_apex_left = 1.8 * r * dx + r * (dy + r) >= 0
    below_apex_right = -1.8 * r * dx + r * (dy + r) >= 0
    return below_apex_left & below_apex_right & (dy <= 0.8 * r)


def trajectory(shape: ShapeSpec, frames: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    t = np.arange(frames, dtype=np.float64)
    ex, ey = _extent(shape)
    xs = _bounce(shape.x, shape.vx, t, ex, width - 1 - ex)
    ys = _bounce(shape.y, shape.vy, t, ey, height - 1 - ey)
    return xs, ys


def _class_color(class_id: int, rng: np.random.Generator) -> tuple[float, float, float]:
    hue = ((class_id - 1) / len(SHAPE_KINDS) + rng.uniform(-0.04, 0.04)) % 1.0
    return colorsys.hsv_to_rgb(hue, rng.uniform(0.55, 0.9), rng.uniform(0.55, 0.95))


def _random_shape(config: SceneConfig, rng: np.random.Generator) -> ShapeSpec:
    kinds = SHAPE_KINDS[:config.num_classes - 1]
    kind = kinds[int(rng.integers(len(kinds)))]
    size = float(rng.uniform(config.min_size, config.max_size))
    speed = float(rng.uniform(config.min_speed, config.max_speed))
    angle = float(rng.uniform(0.0, 2.0 * np.pi))
    vertical = bool(rng.integers(2))
    class_id = SHAPE_KINDS.index(kind) + 1
    return ShapeSpec(kind=kind, x=float(rng.uniform(0, config.width - 1)),
                     y=float(rng.uniform(0, config.height - 1)),
                     vx=speed * np.cos(angle), vy=speed * np.sin(angle), size=size,
                     color=_class_color(class_id, rng), vertical=vertical)


def _background(config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Fixed low-frequency gradient ``[3, M, N]`` between two muted colours."""
    c0 = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.3), rng.uniform(0.15, 0.5)))
    c1 = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.3), rng.uniform(0.3, 0.7)))
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:config.height, 0:config.width].astype(np.float64)
    proj = np.cos(theta) * xx / config.width + np.sin(theta) * yy / config.height
    s = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    return c0[:, None, None] + (c1 - c0)[:, None, None] * s[None]


def generate_scene(config: SceneConfig) -> Scene:
    """Render one scene; a pure function of ``config`` (including its seed)."""
    rng = np.random.default_rng(config.seed)
    t_len, height, width = config.frames, config.height, config.width
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    background = _background(config, rng)

    if config.shapes is not None:
        shapes = list(config.shapes)
    else:
        shapes = []
        count = int(rng.integers(config.min_shapes, config.max_shapes + 1))
        for _ in range(count):
            shapes.append(_random_shape(config, rng))

    labels = np.zeros((t_len, height, width), dtype=np.uint8)
    rgb = np.broadcast_to(background, (t_len, 3, height, width)).copy()
    occupied = np.zeros((t_len, height, width), dtype=bool)
    for shape in shapes:
        xs, ys = trajectory(shape, t_len, height, width)
        masks = np.stack([shape_mask(shape, xs[t], ys[t], yy, xx) for t in range(t_len)])
        if not config.occlusion and config.shapes is None and (masks & occupied).any():
            continue  # no-occlusion scenes drop overlapping shapes
        occupied |= masks
        labels[masks] = shape.class_id
        color = np.asarray(shape.color, dtype=np.float64)
        for c in range(3):
            rgb[:, c][masks] = color[c]

    t = np.arange(t_len, dtype=np.float64)
    gain = 1.0 + config.illumination_amplitude * np.sin(2.0 * np.pi * t / config.illumination_period)
    rgb *= gain[:, None, None, None]
    if config.noise_sigma > 0:
        rgb += rng.normal(0.0, config.noise_sigma, size=rgb.shape)
    np.clip(rgb, 0.0, 1.0, out=rgb)

    b = config.invalid_border
    if b:
        labels[:, :b, :] = IGNORE
        labels[:, -b:, :] = IGNORE
        labels[:, :, :b] = IGNORE
        labels[:, :, -b:] = IGNORE
    return Scene(frames=rgb, labels=labels)


def scene_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint64)[0])


def generate_scenes(config: SceneConfig, count: int) -> list[Scene]:
    """``count`` scenes with seeds derived from ``(config.seed, index)``."""
    if count < 1:
        raise ValueError(f"scene count must be positive, got {count}")
    out = []
    for k in range(count):
        scene = generate_scene(dataclasses.replace(config, seed=scene_seed(config.seed, k)))
        scene.name = f"scene_{k:05d}"
        out.append(scene)
    return out


# ----------------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------------

class SceneDataset(Sequence):
    """Indexable collection of scenes; frames are held as 8-bit or float arrays."""

    def __init__(self, scenes: Iterable[Scene], num_classes: int, config: SceneConfig | None = None,
                 split: str = "train"):
        self._scenes = list(scenes)
        self.num_classes = num_classes
        self.config = config
        self.split = split

    def __len__(self) -> int:
        return len(self._scenes)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return SceneDataset(self._scenes[index], self.num_classes, self.config, self.split)
        scene = self._scenes[index]
        if scene.frames.dtype == np.uint8:
            return Scene(scene.frames.astype(np.float64) / 255.0, scene.labels, scene.dense_labels, scene.name)
        return scene

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        s = self._scenes[0]
        return s.labels.shape


def generate_dataset(config: SceneConfig, count: int, split: str = "train") -> SceneDataset:
    return SceneDataset(generate_scenes(config, count), config.num_classes, config, split)


def write_dataset(dataset: SceneDataset, directory: str | Path) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    if len(dataset) == 0:
        raise DatasetError("refusing to write an empty dataset")
    t_len, height, width = dataset.frame_shape
    manifest = {
        "version": MANIFEST_VERSION, "split": dataset.split, "scenes": len(dataset),
        "frames": t_len, "height": height, "width": width, "num_classes": dataset.num_classes,
    }
    if dataset.config is not None:
        manifest.update({f"config.{k}": v for k, v in dataset.config.to_kv().items()})
    for k in range(len(dataset)):
        scene = dataset[k]
        sdir = root / f"scene_{k:05d}"
        sdir.mkdir(exist_ok=True)
        frames = quantize(scene.frames)
        for t in range(t_len):
            write_ppm(sdir / f"frame_{t:03d}.ppm", np.ascontiguousarray(frames[t].transpose(1, 2, 0)))
            write_pgm(sdir / f"label_{t:03d}.pgm", np.ascontiguousarray(scene.labels[t], dtype=np.uint8))
    (root / "manifest.txt").write_text(format_kv(manifest), encoding="utf-8", newline="\n")


def _manifest_int(kv: dict[str, str], key: str, path: Path) -> int:
    if key not in kv:
        raise DatasetError(f"{path}: manifest is missing {key!r}")
    try:
        return int(kv[key])
    except ValueError:
        raise DatasetError(f"{path}: manifest {key!r} is not an integer: {kv[key]!r}") from None


def read_dataset(directory: str | Path) -> SceneDataset:
    root = Path(directory)
    mpath = root / "manifest.txt"
    if not mpath.is_file():
        raise DatasetError(f"{root}: no manifest (expected {mpath.name})")
    try:
        kv = parse_kv(mpath.read_text(encoding="utf-8"), str(mpath))
    except ValueError as exc:
        raise DatasetError(str(exc)) from None
    version = _manifest_int(kv, "version", mpath)
    if version != MANIFEST_VERSION:
        raise DatasetError(f"{mpath}: unsupported manifest version {version}")
    count = _manifest_int(kv, "scenes", mpath)
    t_len = _manifest_int(kv, "frames", mpath)
    height = _manifest_int(kv, "height", mpath)
    width = _manifest_int(kv, "width", mpath)
    num_classes = _manifest_int(kv, "num_classes", mpath)
    cfg_kv = {k[len("config."):]: v for k, v in kv.items() if k.startswith("config.")}
    config = SceneConfig.from_kv(cfg_kv, str(mpath)) if cfg_kv else None

    scenes = []
    for k in range(count):
        name = f"scene_{k:05d}"
        sdir = root / name
        if not sdir.is_dir():
            raise DatasetError(f"{root}: manifest lists {count} scenes but {name} is missing")
        frames = np.empty((t_len, 3, height, width), dtype=np.uint8)
        labels = np.empty((t_len, height, width), dtype=np.uint8)
        for t in range(t_len):
            fpath, lpath = sdir / f"frame_{t:03d}.ppm", sdir / f"label_{t:03d}.pgm"
            for p in (fpath, lpath):
                if not p.is_file():
                    raise DatasetError(f"{name}: missing {p.name}")
            try:
                rgb, lab = read_ppm(fpath), read_pgm(lpath)
            except NetpbmError as exc:
                raise DatasetError(f"{name}: {exc}") from None
            if rgb.shape != (height, width, 3) or lab.shape != (height, width):
                raise DatasetError(f"{name}: frame {t} has size {lab.shape}, manifest says {height}x{width}")
            frames[t] = rgb.transpose(2, 0, 1)
            labels[t] = lab
        try:
            check_labels(labels, num_classes)
        except ValueError as exc:
            raise DatasetError(f"{name}: {exc}") from None
        scenes.append(Scene(frames, labels, name=name))
    return SceneDataset(scenes, num_classes, config, kv.get("split", "train"))


class SparseGtView(SceneDataset):
    """Labels only on frames ``t % stride == stride - 1``; other frames are IGNORE.

    The original dense labels stay available as ``Scene.dense_labels``.
    """

    def __init__(self, base: SceneDataset, stride: int = 20):
        if stride < 1:
            raise ValueError(f"stride must be positive, got {stride}")
        super().__init__([], base.num_classes, base.config, base.split)
        self.base = base
        self.stride = stride

    def __len__(self) -> int:
        return len(self.base)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return SparseGtView(self.base[index], self.stride)
        scene = self.base[index]
        labelled = labelled_frames(scene.labels.shape[0], self.stride)
        sparse = np.full_like(scene.labels, IGNORE)
        sparse[labelled] = scene.labels[labelled]
        return Scene(scene.frames, sparse, scene.temporal_labels, scene.name)

    @property
    def frame_shape(self):
        return self.base.frame_shape


def labelled_frames(frames: int, stride: int) -> np.ndarray:
    return np.array([t for t in range(frames) if t % stride == stride - 1], dtype=np.intp)


def sparse_gt_view(dataset: SceneDataset, stride: int = 20) -> SceneDataset:
    return SparseGtView(dataset, stride)


def mix_datasets(primary: SceneDataset, extra: SceneDataset, fraction: float) -> SceneDataset:
    """All of ``primary`` plus enough of ``extra`` to make up ``fraction`` of the mix."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    if primary.num_classes != extra.num_classes:
        raise ValueError("datasets disagree on num_classes")
    n_extra = min(len(extra), int(round(fraction * len(primary) / (1 - fraction))))
    scenes = [primary[k] for k in range(len(primary))] + [extra[k] for k in range(n_extra)]
    return SceneDataset(scenes, primary.num_classes, primary.config, primary.split)


def write_label_maps(directory: str | Path, maps: Sequence[np.ndarray], prefix: str = "pred") -> None:
    """Per-scene label volumes ``[T, M, N]`` as ``scene_XXXXX/{prefix}_TTT.pgm``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for k, volume in enumerate(maps):
        sdir = root / f"scene_{k:05d}"
        sdir.mkdir(exist_ok=True)
        for t, plane in enumerate(np.asarray(volume, dtype=np.uint8)):
            write_pgm(sdir / f"{prefix}_{t:03d}.pgm", np.ascontiguousarray(plane))


def read_label_maps(directory: str | Path, count: int, frames: int, prefix: str = "pred") -> list[np.ndarray]:
    """Inverse of :func:`write_label_maps` for ``count`` scenes of ``frames`` frames."""
    root = Path(directory)
    out = []
    for k in range(count):
        sdir = root / f"scene_{k:05d}"
        planes = []
        for t in range(frames):
            path = sdir / f"{prefix}_{t:03d}.pgm"
            if not path.is_file():
                raise DatasetError(f"{root}: missing {sdir.name}/{path.name}")
            try:
                planes.append(read_pgm(path))
            except NetpbmError as exc:
                raise DatasetError(str(exc)) from None
        out.append(np.stack(planes))
    return out
