"""Dataset ingestion and preprocessing.

Covers KITTI odometry ground truth (pose files, traveled-distance labels,
sequence windowing), image loading and normalization, horizontal-flip
augmentation, and a synthetic translating-texture dataset that stands in
for KITTI at desk scale.

KITTI layout expected under a root directory:
    poses/<seq>.txt                      12 numbers per line, row-major 3x4
    sequences/<seq>/image_2/<frame>.png  10 fps left color camera

Synthetic datasets persist as one subdirectory of PPM frames per sample
plus manifest.txt with one line per sample: id, speed (m/frame),
gt_distance (m).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .codec import round_half_away
from .errors import DomainError, IngestionError, ParseError

DEFAULT_PIXEL_MEANS = (0.411, 0.432, 0.45)
KITTI_FRAME_RATE = 10.0

# Named split presets; sequence 01 (highway) is excluded from both.
SPLIT_PRESETS = {
    "paper-big": (("00", "02", "08", "09"), ("03", "04", "05", "06", "07", "10")),
    "paper-small": (("00", "02", "03", "04", "05", "06", "07", "08"), ("09", "10")),
}


# ---------------------------------------------------------------------------
# poses and distances

@dataclass(frozen=True)
class PoseTrajectory:
    """Camera-to-world poses as an [N,3,4] array plus the capture rate."""

    poses: np.ndarray
    frame_rate: float = KITTI_FRAME_RATE

    def __post_init__(self):
        p = self.poses
        if p.ndim != 3 or p.shape[1:] != (3, 4) or p.shape[0] == 0:
            raise IngestionError(f"trajectory must be a nonempty [N,3,4] array, got {p.shape}")
        rot = p[:, :, :3]
        eye = np.eye(3)
        err = np.abs(rot @ rot.transpose(0, 2, 1) - eye).max()
        if err > 1e-3:
            raise IngestionError(f"rotation blocks not orthonormal (max deviation {err:.2e})")

    def __len__(self) -> int:
        return self.poses.shape[0]

    @property
    def translations(self) -> np.ndarray:
        return self.poses[:, :, 3]


def parse_kitti_poses(text: str, frame_rate: float = KITTI_FRAME_RATE) -> PoseTrajectory:
    """Parse pose-file contents: 12 whitespace-separated numbers per line."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 12:
            raise ParseError(
                f"pose line {lineno}: expected 12 values, found {len(tokens)}", line=lineno
            )
        try:
            values = [float(tok) for tok in tokens]
        except ValueError as exc:
            raise ParseError(f"pose line {lineno}: non-numeric token ({exc})", line=lineno)
        rows.append(np.array(values, dtype=np.float64).reshape(3, 4))
    if not rows:
        raise ParseError("pose file contains no data lines")
    return PoseTrajectory(poses=np.stack(rows), frame_rate=frame_rate)


def traveled_distance(traj: PoseTrajectory, first: int, last: int) -> float:
    """Arc length along the trajectory from frame `first` to frame `last`.

    Sums consecutive translation steps, so a closed loop has positive
    length even though its endpoint displacement is zero.
    """
    n = len(traj)
    if not (0 <= first < last < n):
        raise DomainError(f"frame range [{first}, {last}] invalid for trajectory of length {n}")
    t = traj.translations
    steps = np.linalg.norm(np.diff(t[first : last + 1], axis=0), axis=1)
    return float(steps.sum())


# ---------------------------------------------------------------------------
# windows and samples

@dataclass(frozen=True)
class WindowDescriptor:
    """One training/eval window before images are materialized."""

    sequence_id: str
    start: int
    gt_distance: float
    frame_paths: tuple[str, ...]

    @property
    def meter_class(self) -> int:
        return round_half_away(self.gt_distance)


@dataclass
class SequenceSample:
    """Materialized window: normalized frames plus the distance label."""

    frames: list[np.ndarray]  # each [3,H,W] float
    gt_distance: float
    source: tuple[str, int] = ("", 0)

    def __post_init__(self):
        if self.gt_distance < 0:
            raise DomainError(f"gt_distance must be >= 0, got {self.gt_distance}")

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.frames[i], self.frames[i + 1]) for i in range(len(self.frames) - 1)]


@dataclass(frozen=True)
class DatasetSplit:
    train_sequences: tuple[str, ...]
    test_sequences: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.train_sequences) & set(self.test_sequences)
        if overlap:
            raise DomainError(f"split presets must be disjoint; both sides list {sorted(overlap)}")


def split_preset(name: str) -> DatasetSplit:
    if name not in SPLIT_PRESETS:
        raise DomainError(f"unknown split preset {name!r}; choose from {sorted(SPLIT_PRESETS)}")
    train, test = SPLIT_PRESETS[name]
    return DatasetSplit(train_sequences=train, test_sequences=test)


def make_windows(
    traj: PoseTrajectory,
    image_paths: list[str],
    window: int = 10,
    stride: int = 1,
    sequence_id: str = "",
    d_max: float | None = None,
) -> tuple[list[WindowDescriptor], int]:
    """Slide a window over the sequence; returns descriptors and the count
    of windows whose ground truth exceeds d_max (kept; clamped at encoding).
    """
    if len(image_paths) != len(traj):
        raise IngestionError(
            f"sequence {sequence_id or '?'}: {len(image_paths)} images vs {len(traj)} poses"
        )
    if window < 2 or stride < 1:
        raise DomainError(f"window {window} / stride {stride} invalid")
    out: list[WindowDescriptor] = []
    over = 0
    for s in range(0, len(traj) - window + 1, stride):
        gt = traveled_distance(traj, s, s + window - 1)
        if d_max is not None and gt > d_max:
            over += 1
        out.append(
            WindowDescriptor(
                sequence_id=sequence_id,
                start=s,
                gt_distance=gt,
                frame_paths=tuple(image_paths[s : s + window]),
            )
        )
    return out, over


# ---------------------------------------------------------------------------
# images

def read_ppm(path: str) -> np.ndarray:
    """Binary P6 PPM -> uint8 [H,W,3]."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ParseError(f"{path}: not a binary P6 PPM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 PPMs are supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    if len(data) - pos < w * h * 3:
        raise ParseError(f"{path}: truncated pixel payload")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3).copy()


def write_ppm(path: str, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DomainError(f"write_ppm expects uint8 [H,W,3], got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def load_image(path: str) -> np.ndarray:
    """Decode PNG or PPM into uint8 [H,W,3]; grayscale replicates channels."""
    if path.lower().endswith(".ppm"):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if arr.dtype != np.uint8:
        raise ParseError(f"{path}: expected 8-bit image data, got {arr.dtype}")
    return arr


def bilinear_resize(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resample with half-pixel sample centers, [H,W,C] floats."""
    h, w = img.shape[:2]
    if out_w == w and out_h == h:
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    tl = img[np.ix_(y0, x0)]
    tr = img[np.ix_(y0, x1)]
    bl = img[np.ix_(y1, x0)]
    br = img[np.ix_(y1, x1)]
    top = tl * (1.0 - fx) + tr * fx
    bot = bl * (1.0 - fx) + br * fx
    return top * (1.0 - fy) + bot * fy


def normalize_image(
    rgb: np.ndarray,
    means: tuple[float, float, float] = DEFAULT_PIXEL_MEANS,
    target: tuple[int, int] | None = None,
    dtype=np.float64,
) -> np.ndarray:
    """uint8 [H,W,3] -> channel-major float [3,H',W'] in mean-subtracted [0,1].

    Resizes bilinearly to ``target`` (W', H'), scales to [0,1], subtracts the
    per-channel means.
    """
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DomainError(f"normalize_image expects [H,W,3], got {rgb.shape}")
    if any(not 0.0 <= m <= 1.0 for m in means):
        raise DomainError(f"pixel means must lie in [0,1], got {means}")
    scaled = rgb.astype(np.float64) / 255.0
    if target is not None:
        tw, th = target
        if tw < 1 or th < 1:
            raise DomainError(f"resize target {target} must be positive")
        scaled = bilinear_resize(scaled, tw, th)
    scaled -= np.asarray(means, dtype=np.float64)
    return np.ascontiguousarray(scaled.transpose(2, 0, 1).astype(dtype))


def mirror_frames(frames: list[np.ndarray]) -> list[np.ndarray]:
    """Horizontal mirror of channel-major frames (width is the last axis)."""
    return [np.ascontiguousarray(f[..., ::-1]) for f in frames]


def flip_augment(sample: SequenceSample, p: float = 0.5, rng: np.random.Generator | None = None) -> SequenceSample:
    """With probability p, mirror every frame; one coin per sequence."""
    if p > 0 and (rng or np.random.default_rng()).random() < p:
        return replace(sample, frames=mirror_frames(sample.frames))
    return sample


# ---------------------------------------------------------------------------
# synthetic dataset

@dataclass
class SynthConfig:
    count: int = 100
    frames: int = 10
    resolution: tuple[int, int] = (128, 64)  # (W, H)
    speed_range: tuple[float, float] = (0.0, 0.344)  # meters per frame
    seed: int = 0
    pixels_per_meter: float = 80.0
    d_max: float = 3.1

    def __post_init__(self):
        lo, hi = self.speed_range
        limit = self.d_max / (self.frames - 1)
        if not (0.0 <= lo <= hi):
            raise DomainError(f"speed range {self.speed_range} must satisfy 0 <= lo <= hi")
        if hi > limit + 1e-12:
            raise DomainError(
                f"speed max {hi} exceeds codec range ({limit:.6f} m/frame for d_max {self.d_max})"
            )


def _smooth_texture(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Band-limited random RGB texture in [0,1], float64 [H,W,3]."""
    tex = np.zeros((h, w, 3))
    for cells, weight in (((4, 8), 1.0), ((8, 16), 0.6), ((16, 32), 0.35)):
        ch, cw = cells
        coarse = rng.standard_normal((ch, cw, 3))
        tex += weight * bilinear_resize(coarse, w, h)
    lo, hi = tex.min(), tex.max()
    return (tex - lo) / (hi - lo) * 0.9 + 0.05


def _shift_wrap(tex: np.ndarray, shift_px: float) -> np.ndarray:
    """Sample the texture translated by shift_px along width, wrapping."""
    h, w, _ = tex.shape
    pos = (np.arange(w) - shift_px) % w
    x0 = np.floor(pos).astype(np.int64) % w
    x1 = (x0 + 1) % w
    f = (pos - np.floor(pos))[None, :, None]
    return tex[:, x0, :] * (1.0 - f) + tex[:, x1, :] * f


def synth_sample_frames(cfg: SynthConfig, index: int, speed: float) -> list[np.ndarray]:
    """Deterministic uint8 frames for sample `index` at the given speed."""
    w, h = cfg.resolution
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(index,)))
    tex = _smooth_texture(rng, w, h)
    shift = speed * cfg.pixels_per_meter
    frames = []
    for i in range(cfg.frames):
        frame = _shift_wrap(tex, shift * i)
        frames.append(np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8))
    return frames


def synth_speeds(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0xFFFF,)))
    lo, hi = cfg.speed_range
    return rng.uniform(lo, hi, cfg.count)


def synth_generate(cfg: SynthConfig, out_dir: str) -> list[WindowDescriptor]:
    """Write the synthetic dataset (PPM frames + manifest) and describe it."""
    os.makedirs(out_dir, exist_ok=True)
    speeds = synth_speeds(cfg)
    descriptors = []
    manifest_lines = []
    for i in range(cfg.count):
        speed = float(speeds[i])
        gt = speed * (cfg.frames - 1)
        sample_id = f"{i:06d}"
        sample_dir = os.path.join(out_dir, sample_id)
        os.makedirs(sample_dir, exist_ok=True)
        paths = []
        for j, frame in enumerate(synth_sample_frames(cfg, i, speed)):
            path = os.path.join(sample_dir, f"f{j:02d}.ppm")
            write_ppm(path, frame)
            paths.append(path)
        manifest_lines.append(f"{sample_id} {speed!r} {gt!r}")
        descriptors.append(
            WindowDescriptor(sequence_id=sample_id, start=0, gt_distance=gt, frame_paths=tuple(paths))
        )
    tmp = os.path.join(out_dir, "manifest.txt.tmp")
    with open(tmp, "w") as fh:
        fh.write("\n".join(manifest_lines) + "\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.txt"))
    return descriptors


def load_synth_dataset(root: str) -> list[WindowDescriptor]:
    """Read a synthetic dataset back from its manifest."""
    manifest = os.path.join(root, "manifest.txt")
    if not os.path.isfile(manifest):
        raise IngestionError(f"no manifest.txt under {root}")
    descriptors = []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"manifest line {lineno}: expected 'id speed gt'", line=lineno)
            sample_id, _speed, gt = parts
            sample_dir = os.path.join(root, sample_id)
            frames = sorted(
                os.path.join(sample_dir, f) for f in os.listdir(sample_dir) if f.endswith(".ppm")
            )
            if not frames:
                raise IngestionError(f"sample {sample_id}: no frames under {sample_dir}")
            descriptors.append(
                WindowDescriptor(
                    sequence_id=sample_id, start=0,
                    gt_distance=float(gt), frame_paths=tuple(frames),
                )
            )
    if not descriptors:
        raise IngestionError(f"manifest {manifest} lists no samples")
    return descriptors


# ---------------------------------------------------------------------------
# KITTI tree walking

def kitti_sequence_windows(
    root: str,
    sequence_id: str,
    window: int = 10,
    stride: int = 1,
    d_max: float | None = None,
) -> tuple[list[WindowDescriptor], int]:
    pose_path = os.path.join(root, "poses", f"{sequence_id}.txt")
    image_dir = os.path.join(root, "sequences", sequence_id, "image_2")
    if not os.path.isfile(pose_path):
        raise IngestionError(f"missing pose file {pose_path}")
    if not os.path.isdir(image_dir):
        raise IngestionError(f"missing image directory {image_dir}")
    with open(pose_path) as fh:
        traj = parse_kitti_poses(fh.read())
    images = sorted(
        os.path.join(image_dir, f)
        for f in os.listdir(image_dir)
        if f.lower().endswith((".png", ".ppm"))
    )
    return make_windows(traj, images, window=window, stride=stride,
                        sequence_id=sequence_id, d_max=d_max)


def meter_histogram(descriptors: list[WindowDescriptor]) -> dict[int, int]:
    hist: dict[int, int] = {}
    for d in descriptors:
        hist[d.meter_class] = hist.get(d.meter_class, 0) + 1
    return hist


# ---------------------------------------------------------------------------
# in-memory sample store

class SampleStore:
    """Caches decoded frames and serves normalized window tensors.

    Raw uint8 frames are decoded once and kept in memory (a desk-scale
    dataset is a few hundred MB); normalization, optional resize, and
    mirroring are applied on access, vectorized per window.
    """

    def __init__(
        self,
        descriptors: list[WindowDescriptor],
        resolution: tuple[int, int],
        means: tuple[float, float, float] = DEFAULT_PIXEL_MEANS,
        dtype=np.float32,
    ):
        if not descriptors:
            raise IngestionError("sample store needs at least one window")
        self.descriptors = list(descriptors)
        self.resolution = resolution
        self.means = means
        self.dtype = np.dtype(dtype)
        self._raw: dict[int, list[np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.descriptors)

    def gt(self, index: int) -> float:
        return self.descriptors[index].gt_distance

    def meter_class(self, index: int) -> int:
        return self.descriptors[index].meter_class

    def _frames_raw(self, index: int) -> list[np.ndarray]:
        if index not in self._raw:
            self._raw[index] = [load_image(p) for p in self.descriptors[index].frame_paths]
        return self._raw[index]

    def normalized(self, index: int, flip: bool = False) -> np.ndarray:
        """[T,3,H,W] normalized frames for one window, optionally mirrored."""
        raw = self._frames_raw(index)
        frames = [
            normalize_image(f, means=self.means, target=self.resolution, dtype=self.dtype)
            for f in raw
        ]
        if flip:
            frames = mirror_frames(frames)
        return np.stack(frames)

    def sample(self, index: int) -> SequenceSample:
        d = self.descriptors[index]
        return SequenceSample(
            frames=list(self.normalized(index)),
            gt_distance=d.gt_distance,
            source=(d.sequence_id, d.start),
        )
