"""TUM-RGBD and Replica-style dataset loaders and image codecs.

Replica layout (as commonly redistributed for dense SLAM)::

    <scene>/results/frame000000.jpg   color
    <scene>/results/depth000000.png   16-bit depth, meters = raw / depth_scale
    <scene>/traj.txt                  one flattened row-major 4x4 camera-to-world per line

A scene directory without ``results/`` is accepted when the images sit next to ``traj.txt``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from PIL import Image

from .cloud import Frame, Intrinsics
from .errors import FormatError
from .evaluation import Trajectory, associate
from .geometry import PoseSE3

TUM_DEPTH_SCALE = 5000.0
REPLICA_DEPTH_SCALE = 6553.5

TUM_INTRINSICS = {
    "freiburg1": Intrinsics(517.3, 516.5, 318.6, 255.3, 640, 480),
    "freiburg2": Intrinsics(520.9, 521.0, 325.1, 249.7, 640, 480),
    "freiburg3": Intrinsics(535.4, 539.2, 320.1, 247.6, 640, 480),
}
TUM_DEFAULT_INTRINSICS = Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)
REPLICA_INTRINSICS = Intrinsics(600.0, 600.0, 599.5, 339.5, 1200, 680)


def read_color(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_depth(path, scale: float) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.float64)
    if raw.ndim == 3:
        raw = raw[..., 0]
    return raw / scale


def write_color(path, rgb) -> None:
    img = np.clip(np.round(np.asarray(rgb, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def write_depth(path, depth, scale: float) -> None:
    raw = np.clip(np.round(np.asarray(depth, dtype=float) * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


@dataclass
class DatasetStream:
    """Ordered, lazily loaded frames plus intrinsics and optional ground truth."""

    loaders: list[Callable[[], Frame]]
    intrinsics: Intrinsics
    groundtruth: Trajectory | None = None
    stamps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    name: str = ""

    def __len__(self):
        return len(self.loaders)

    def __iter__(self) -> Iterator[Frame]:
        for load in self.loaders:
            yield load()

    def __getitem__(self, i) -> Frame:
        return self.loaders[i]()


def _read_list(path: Path):
    if not path.exists():
        raise FormatError(f"missing index file: {path}")
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append(line.split())
    return rows


def _tum_intrinsics(root: Path) -> Intrinsics:
    name = str(root.resolve()).lower()
    for key, K in TUM_INTRINSICS.items():
        if key in name:
            return K
    return TUM_DEFAULT_INTRINSICS


def load_tum(root, intrinsics: Intrinsics | None = None, depth_scale: float = TUM_DEPTH_SCALE,
             max_dt: float = 0.02) -> DatasetStream:
    """Associate ``rgb.txt``/``depth.txt``/``groundtruth.txt`` by nearest timestamp."""
    root = Path(root)
    rgb = _read_list(root / "rgb.txt")
    depth = _read_list(root / "depth.txt")
    gt_rows = _read_list(root / "groundtruth.txt")
    try:
        rgb_t = np.array([float(r[0]) for r in rgb])
        dep_t = np.array([float(r[0]) for r in depth])
        gt = np.array([[float(v) for v in r[:8]] for r in gt_rows]).reshape(-1, 8)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{root}: malformed index file ({exc})") from None
    pairs = associate(rgb_t, dep_t, max_dt)
    if not pairs:
        raise FormatError(f"{root}: no rgb/depth pairs within {max_dt} s")
    K = intrinsics or _tum_intrinsics(root)

    loaders, stamps, gt_idx = [], [], []
    gt_pairs = dict(associate(rgb_t[[i for i, _ in pairs]], gt[:, 0], max_dt)) if len(gt) else {}
    for n, (i, j) in enumerate(pairs):
        cpath, dpath = root / rgb[i][1], root / depth[j][1]

        def load(n=n, cpath=cpath, dpath=dpath, stamp=rgb_t[i]):
            return Frame(read_color(cpath), read_depth(dpath, depth_scale), K, n, float(stamp))

        loaders.append(load)
        stamps.append(rgb_t[i])
        if n in gt_pairs:
            gt_idx.append((rgb_t[i], gt_pairs[n]))
    groundtruth = None
    if gt_idx:
        s = np.array([a for a, _ in gt_idx])
        rows = gt[[b for _, b in gt_idx]]
        groundtruth = Trajectory(s, rows[:, 1:4], rows[:, 4:8])
    return DatasetStream(loaders, K, groundtruth, np.array(stamps), root.name)


def _frame_number(p: Path) -> int:
    m = re.search(r"(\d+)", p.stem)
    return int(m.group(1)) if m else -1


def load_replica(root, intrinsics: Intrinsics | None = None,
                 depth_scale: float = REPLICA_DEPTH_SCALE) -> DatasetStream:
    root = Path(root)
    traj_path = root / "traj.txt"
    if not traj_path.exists():
        raise FormatError(f"missing pose file: {traj_path}")
    img_dir = root / "results" if (root / "results").is_dir() else root
    colors = sorted((p for p in img_dir.iterdir() if p.name.startswith("frame")
                     and p.suffix.lower() in (".jpg", ".jpeg", ".png")), key=_frame_number)
    depths = sorted((p for p in img_dir.iterdir() if p.name.startswith("depth")
                     and p.suffix.lower() == ".png"), key=_frame_number)
    poses = []
    for lineno, line in enumerate(traj_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 16:
            raise FormatError(f"{traj_path}:{lineno}: expected 16 values, got {len(vals)}")
        poses.append(PoseSE3.from_matrix(np.array(vals, dtype=float).reshape(4, 4)))
    if not (len(colors) == len(depths) == len(poses)):
        raise FormatError(f"{root}: {len(colors)} color, {len(depths)} depth images "
                          f"but {len(poses)} poses")
    if not poses:
        raise FormatError(f"{root}: empty sequence")
    K = intrinsics or REPLICA_INTRINSICS
    loaders = []
    for n, (c, d) in enumerate(zip(colors, depths)):
        def load(n=n, c=c, d=d):
            return Frame(read_color(c), read_depth(d, depth_scale), K, n, float(n))
        loaders.append(load)
    stamps = np.arange(len(poses), dtype=float)
    return DatasetStream(loaders, K, Trajectory.from_poses(stamps, poses), stamps, root.name)
