"""Procedural dataset generators and the on-disk dataset format.

Two families: binary multi-line shape blocks (square / triangle / circle in
two sizes, five shapes per line) and colour counting scenes (random shapes on
a black canvas). A dataset directory holds ``manifest.json``,
``images/NNNNNN.pgm|ppm`` (binary P5 / P6, 8-bit) and ``labels.jsonl``.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .memory import BlockLabel, CountLabel

# Toy-block vocabulary: type x size.
VOCAB = ["square-small", "square-large", "triangle-small", "triangle-large",
         "circle-small", "circle-large"]
SHAPE_TYPES = ("square", "triangle", "circle")
SIZES = ("small", "large")

FORMAT_VERSION = 1

# Block layout constants: fixed line bands with a 2-px inter-line gap.
LINE_HEIGHT = 10
LINE_GAP = 2
MARGIN = 2
CELL_WIDTH = 15
BLOCK_WIDTH = 80


class DatasetError(RuntimeError):
    pass


# -- PGM / PPM ------------------------------------------------------------------

def write_pgm(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def write_ppm(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs an (H,W,3) array, got {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, got header {parts[0]!r}")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images supported")
    raw = parts[3][: w * h * channels]
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape((h, w) if channels == 1 else (h, w, channels))


def read_pgm(path):
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path):
    return _read_netpbm(path, b"P6", 3)


# -- shape rasterisers -----------------------------------------------------------

def _draw_square(canvas, cy, cx, half, value):
    canvas[cy - half: cy + half + 1, cx - half: cx + half + 1] = value


def _draw_circle(canvas, cy, cx, radius, value):
    h, w = canvas.shape[:2]
    yy, xx = np.ogrid[:h, :w]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    canvas[mask] = value


def _draw_triangle(canvas, cy, cx, half, value):
    # Filled upward triangle, vertical extent 2*half+1, base width 2*half+1.
    height = 2 * half + 1
    top = cy - half
    for i in range(height):
        hw = int(round((i + 1) / height * half))
        canvas[top + i, cx - hw: cx + hw + 1] = value


_TOY_HALF = {"small": 2, "large": 4}


def _draw_toy_shape(canvas, token, cy, cx):
    shape = SHAPE_TYPES[token // 2]
    half = _TOY_HALF[SIZES[token % 2]]
    if shape == "square":
        _draw_square(canvas, cy, cx, half, 1)
    elif shape == "circle":
        _draw_circle(canvas, cy, cx, half + 0.4, 1)
    else:
        _draw_triangle(canvas, cy, cx, half, 1)


# -- toy shape blocks --------------------------------------------------------------

@dataclass
class ShapeBlockConfig:
    lines: int
    seed: int
    shapes_per_line: int = 5
    image_size: tuple | None = None  # (H, W); autosized when None

    def required_size(self):
        h = 2 * MARGIN + self.lines * LINE_HEIGHT + (self.lines - 1) * LINE_GAP
        w = 2 * MARGIN + self.shapes_per_line * CELL_WIDTH + 1
        return h, w


def block_image_height(lines):
    return 2 * MARGIN + lines * LINE_HEIGHT + (lines - 1) * LINE_GAP


def gen_shape_block(cfg: ShapeBlockConfig):
    """Render one binary block image; returns (uint8 image {0,255}, BlockLabel)."""
    if cfg.lines < 1:
        raise ValueError("need at least one line")
    req_h, req_w = cfg.required_size()
    size = cfg.image_size or (req_h, max(req_w, BLOCK_WIDTH))
    if size[0] < req_h or size[1] < req_w:
        raise DatasetError(f"image size {size} too small for {cfg.lines} lines of "
                           f"{cfg.shapes_per_line} shapes (needs {(req_h, req_w)})")
    rng = np.random.default_rng(cfg.seed)
    canvas = np.zeros(size, dtype=np.uint8)
    lines = []
    for k in range(cfg.lines):
        y0 = MARGIN + k * (LINE_HEIGHT + LINE_GAP)
        tokens = []
        for j in range(cfg.shapes_per_line):
            token = int(rng.integers(0, len(VOCAB)))
            tokens.append(token)
            cy = y0 + LINE_HEIGHT // 2 + int(rng.integers(-1, 2))
            cx = MARGIN + j * CELL_WIDTH + CELL_WIDTH // 2 + int(rng.integers(-1, 2))
            _draw_toy_shape(canvas, token, cy, cx)
        band = canvas[y0: y0 + LINE_HEIGHT]
        rows, cols = np.nonzero(band)
        box = (y0 + int(rows.min()), int(cols.min()),
               y0 + int(rows.max()) + 1, int(cols.max()) + 1)
        lines.append((box, tokens))
    return canvas * 255, BlockLabel(lines=lines)


# -- colour counting scenes ----------------------------------------------------------

@dataclass
class CountSceneConfig:
    count: int
    seed: int
    image_size: int = 128
    min_separation: float | None = None  # defaults to 12 px at 128, scaled
    half_size_range: tuple | None = None  # defaults to (5, 8) at 128, scaled
    min_luminance: float = 40.0

    def scaled_separation(self):
        if self.min_separation is not None:
            return self.min_separation
        return 12.0 * self.image_size / 128.0

    def scaled_half_sizes(self):
        if self.half_size_range is not None:
            return self.half_size_range
        lo = max(2, int(round(5 * self.image_size / 128.0)))
        hi = max(lo, int(round(8 * self.image_size / 128.0)))
        return (lo, hi)


def _random_colour(rng, min_luminance):
    # Background is black; reject colours too dark to see.
    for _ in range(100):
        rgb = rng.integers(0, 256, size=3)
        lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
        if lum >= min_luminance:
            return rgb.astype(np.uint8)
    return np.array([255, 255, 255], dtype=np.uint8)


def gen_count_scene(cfg: CountSceneConfig):
    """Colour image with exactly cfg.count shapes; returns (uint8 HxWx3, CountLabel)."""
    if cfg.count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    sep = cfg.scaled_separation()
    lo, hi = cfg.scaled_half_sizes()
    for _attempt in range(50):
        centres = []
        halves = []
        ok = True
        for _ in range(cfg.count):
            placed = False
            for _try in range(200):
                half = int(rng.integers(lo, hi + 1))
                r = int(rng.integers(half + 1, size - half - 1))
                c = int(rng.integers(half + 1, size - half - 1))
                if all((r - r2) ** 2 + (c - c2) ** 2 >= sep * sep for r2, c2 in centres):
                    centres.append((r, c))
                    halves.append(half)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            break
    else:
        raise DatasetError(f"could not place {cfg.count} objects with separation {sep} "
                           f"in a {size}x{size} image")
    canvas = np.zeros((size, size, 3), dtype=np.uint8)
    for (r, c), half in zip(centres, halves):
        colour = _random_colour(rng, cfg.min_luminance)
        shape = SHAPE_TYPES[int(rng.integers(0, 3))]
        for ch in range(3):
            plane = canvas[:, :, ch]
            if shape == "square":
                _draw_square(plane, r, c, half, colour[ch])
            elif shape == "circle":
                _draw_circle(plane, r, c, half + 0.4, colour[ch])
            else:
                _draw_triangle(plane, r, c, half, colour[ch])
    return canvas, CountLabel(centres=centres)


# -- dataset directories ----------------------------------------------------------------

TOY_TEST_LINE_COUNTS = list(range(1, 11)) + [15, 20]
COUNT_TRAIN_COUNTS = [3, 4, 5]
COUNT_TEST_COUNTS = list(range(3, 11))

PRESETS = {
    "toy-blocks": {
        "train": {"name": "train", "samples": 2000, "lines": 3},
        "tests": [{"name": f"test-L{k:02d}", "samples": 200, "lines": k}
                  for k in TOY_TEST_LINE_COUNTS],
    },
    "shapes-count": {
        "train": {"name": "train", "samples": 10000, "counts": COUNT_TRAIN_COUNTS},
        "tests": [{"name": f"test-N{k:02d}", "samples": 200, "counts": [k]}
                  for k in COUNT_TEST_COUNTS],
    },
}


def _sample_seed(master_seed, split_index, i):
    ss = np.random.SeedSequence([master_seed, split_index, i])
    return int(ss.generate_state(1)[0])


def _write_split_blocks(split_dir, spec, master_seed, split_index, train_count=None):
    images_dir = split_dir / "images"
    images_dir.mkdir(parents=True)
    sha = hashlib.sha256()
    records = []
    for i in range(spec["samples"]):
        seed = _sample_seed(master_seed, split_index, i)
        img, label = gen_shape_block(ShapeBlockConfig(lines=spec["lines"], seed=seed))
        name = f"{i:06d}.pgm"
        write_pgm(images_dir / name, img)
        sha.update(img.tobytes())
        rec = {"id": i, "image": f"images/{name}",
               "lines": [{"box": list(box), "tokens": tokens} for box, tokens in label.lines]}
        records.append(rec)
    label_text = "\n".join(json.dumps(r) for r in records) + "\n"
    (split_dir / "labels.jsonl").write_text(label_text)
    sha.update(label_text.encode())
    return sha.hexdigest(), {"samples": spec["samples"], "lines": spec["lines"]}


def _write_split_counts(split_dir, spec, master_seed, split_index, image_size):
    images_dir = split_dir / "images"
    images_dir.mkdir(parents=True)
    sha = hashlib.sha256()
    records = []
    counts = spec["counts"]
    for i in range(spec["samples"]):
        seed = _sample_seed(master_seed, split_index, i)
        rng = np.random.default_rng(seed)
        count = int(counts[int(rng.integers(0, len(counts)))])
        img, label = gen_count_scene(CountSceneConfig(count=count, seed=seed + 1,
                                                      image_size=image_size))
        name = f"{i:06d}.ppm"
        write_ppm(images_dir / name, img)
        sha.update(img.tobytes())
        records.append({"id": i, "image": f"images/{name}",
                        "centres": [list(c) for c in label.centres]})
    label_text = "\n".join(json.dumps(r) for r in records) + "\n"
    (split_dir / "labels.jsonl").write_text(label_text)
    sha.update(label_text.encode())
    return sha.hexdigest(), {"samples": spec["samples"], "counts": counts}


def build_dataset(kind, out_dir, seed, force=False, image_size=None):
    """Materialise a dataset preset on disk; returns the root manifest dict."""
    if kind not in PRESETS:
        raise DatasetError(f"unknown dataset preset {kind!r}; valid: {sorted(PRESETS)}")
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise DatasetError(f"{out_dir} exists and is not empty; pass force to overwrite")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    preset = PRESETS[kind]
    splits = {}
    all_specs = [preset["train"]] + preset["tests"]
    for split_index, spec in enumerate(all_specs):
        split_dir = out_dir / spec["name"]
        if kind == "toy-blocks":
            digest, info = _write_split_blocks(split_dir, spec, seed, split_index)
            info["image_size"] = [block_image_height(spec["lines"]), BLOCK_WIDTH]
        else:
            isz = image_size or 128
            digest, info = _write_split_counts(split_dir, spec, seed, split_index, isz)
            info["image_size"] = [isz, isz]
        info["content_sha256"] = digest
        info["seed_stream"] = split_index
        splits[spec["name"]] = info
        split_manifest = {
            "format_version": FORMAT_VERSION,
            "preset": kind,
            "split": spec["name"],
            "master_seed": seed,
            "vocab": VOCAB if kind == "toy-blocks" else None,
            **info,
        }
        (split_dir / "manifest.json").write_text(json.dumps(split_manifest, indent=2) + "\n")

    manifest = {
        "format_version": FORMAT_VERSION,
        "preset": kind,
        "master_seed": seed,
        "vocab": VOCAB if kind == "toy-blocks" else None,
        "splits": splits,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- loading ----------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    root: Path
    manifest: dict
    records: list = field(repr=False)

    def __len__(self):
        return len(self.records)

    @property
    def kind(self):
        return "blocks" if "lines" in self.records[0] else "counts"

    def image(self, i):
        """Image i as float32 (C,H,W) in [0, 1]."""
        path = self.root / self.records[i]["image"]
        if path.suffix == ".pgm":
            arr = read_pgm(path).astype(np.float32) / 255.0
            return arr[None]
        arr = read_ppm(path).astype(np.float32) / 255.0
        return np.moveaxis(arr, 2, 0)

    def label(self, i):
        rec = self.records[i]
        if "lines" in rec:
            return BlockLabel(lines=[(tuple(l["box"]), list(l["tokens"])) for l in rec["lines"]])
        return CountLabel(centres=[tuple(c) for c in rec["centres"]])


def load_split(path) -> DatasetSplit:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    records = [json.loads(line) for line in (path / "labels.jsonl").read_text().splitlines() if line]
    return DatasetSplit(root=path, manifest=manifest, records=records)


def load_dataset(root):
    """Load a dataset root directory: returns (manifest, {split_name: DatasetSplit})."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    splits = {name: load_split(root / name) for name in manifest["splits"]}
    return manifest, splits
