"""Paired visual/tactile image ingestion, ROI cropping, jitter noise,
normalization and a procedural stand-in dataset."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
FILENAME_RE = re.compile(r"^(?P<stem>[A-Za-z]+)(?P<cls>\d+)_(?P<index>\d+)$")
SPLIT_SALT = "xmgc-split-v1"
MANIFEST_HEADER = ["visual_path", "tactile_path", "class_id", "split", "roi_x", "roi_y", "roi_w", "roi_h"]


class ManifestError(ValueError):
    pass


@dataclass
class ImagePair:
    visual: np.ndarray  # H x W x 3 uint8
    tactile: np.ndarray
    class_id: int
    source_id: str

    def __post_init__(self):
        for side in ("visual", "tactile"):
            img = getattr(self, side)
            if img.ndim != 3 or img.shape[2] != 3:
                raise ValueError(f"{side} image of {self.source_id} must be HxWx3, got {img.shape}")


@dataclass
class ManifestRow:
    visual_path: str
    tactile_path: str
    class_id: int
    split: str
    roi: tuple[int, int, int, int] | None = None


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    root: Path
    warnings: list[str] = field(default_factory=list)

    def split(self, tag: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == tag]


@dataclass
class LabeledImage:
    """One classifier sample; ``generated`` records provenance."""

    image: np.ndarray
    class_id: int
    source_id: str
    generated: bool = False


def parse_filename(name: str) -> tuple[int, int]:
    """``cloth03_0.png`` -> (class 3, index 0)."""
    m = FILENAME_RE.match(Path(name).stem)
    if m is None:
        raise ManifestError(f"cannot parse {name!r}; expected <classNN>_<index>.<ext>")
    return int(m["cls"]), int(m["index"])


def split_for(source_id: str, test_fraction_tenths: int = 1) -> str:
    digest = hashlib.sha256(f"{SPLIT_SALT}:{source_id}".encode()).digest()
    return "test" if digest[0] % 10 < test_fraction_tenths else "train"


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def discover_pairs(root, pairing_rule: str = "auto") -> DatasetManifest:
    """Pair ``<root>/visual`` with ``<root>/tactile`` by class.

    Within a class, images are index-matched when both sides carry exactly the
    same index set (``pairing_rule="auto"``); otherwise, or with
    ``pairing_rule="cross"``, every visual image is paired with every tactile one.
    Classes present on one side only are warned about and dropped.
    """
    if pairing_rule not in ("auto", "cross"):
        raise ValueError(f"unknown pairing rule {pairing_rule!r}")
    root = Path(root)
    if not (root / "visual").is_dir() or not (root / "tactile").is_dir():
        raise ManifestError(f"{root} must contain visual/ and tactile/ subdirectories")
    sides: dict[str, dict[int, dict[int, Path]]] = {}
    bad = []
    for side in ("visual", "tactile"):
        by_class: dict[int, dict[int, Path]] = {}
        for path in _list_images(root / side):
            try:
                cls, idx = parse_filename(path.name)
            except ManifestError:
                bad.append(f"{side}/{path.name}")
                continue
            by_class.setdefault(cls, {})[idx] = path
        sides[side] = by_class
    if bad:
        raise ManifestError("unparseable filenames: " + ", ".join(bad))
    rows, warnings = [], []
    visual, tactile = sides["visual"], sides["tactile"]
    for cls in sorted(set(visual) | set(tactile)):
        v, t = visual.get(cls, {}), tactile.get(cls, {})
        if not v or not t:
            missing = "tactile" if not t else "visual"
            warnings.append(f"class {cls}: no {missing} images, excluded")
            continue
        if pairing_rule == "auto" and set(v) == set(t):
            combos = [(v[i], t[i], v[i].stem) for i in sorted(v)]
        else:
            combos = [(v[i], t[j], v[i].stem) for i in sorted(v) for j in sorted(t)]
        for vp, tp, source in combos:
            rows.append(ManifestRow(f"visual/{vp.name}", f"tactile/{tp.name}", cls, split_for(source)))
    for w in warnings:
        log.warning(w)
    rows.sort(key=lambda r: (r.visual_path, r.tactile_path))
    return DatasetManifest(rows, root, warnings)


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Write the CSV with image paths relative to the manifest file's directory."""
    path = Path(path)
    base = path.resolve().parent
    root = Path(manifest.root).resolve()

    def rel(p: str) -> str:
        return Path(os.path.relpath(root / p, base)).as_posix()

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in manifest.rows:
        roi = [str(v) for v in r.roi] if r.roi else ["", "", "", ""]
        writer.writerow([rel(r.visual_path), rel(r.tactile_path), r.class_id, r.split, *roi])
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        rows = []
        for rec in reader:
            roi_fields = [rec[k] for k in ("roi_x", "roi_y", "roi_w", "roi_h")]
            if all(f == "" for f in roi_fields):
                roi = None
            elif any(f == "" for f in roi_fields):
                raise ManifestError(f"{path}: partial ROI in row {rec}")
            else:
                roi = tuple(int(f) for f in roi_fields)
            if rec["split"] not in ("train", "test"):
                raise ManifestError(f"{path}: bad split tag {rec['split']!r}")
            rows.append(ManifestRow(rec["visual_path"], rec["tactile_path"], int(rec["class_id"]),
                                    rec["split"], roi))
    manifest = DatasetManifest(rows, path.parent)
    if check_files:
        for r in rows:
            for rel in (r.visual_path, r.tactile_path):
                if not (manifest.root / rel).is_file():
                    raise ManifestError(f"{path}: referenced file {rel} does not exist")
    return manifest


def apply_roi_manifest(manifest: DatasetManifest, roi_csv) -> DatasetManifest:
    """Attach ROI rectangles from a ``tactile_path,roi_x,roi_y,roi_w,roi_h`` CSV."""
    rects = {}
    with Path(roi_csv).open(newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rects[rec["tactile_path"]] = tuple(int(rec[k]) for k in ("roi_x", "roi_y", "roi_w", "roi_h"))
    for r in manifest.rows:
        if r.tactile_path in rects:
            rect = rects[r.tactile_path]
            w, h = Image.open(manifest.root / r.tactile_path).size
            _check_rect(rect, w, h)
            r.roi = rect
    return manifest


# --- image operations -------------------------------------------------------

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_image(image: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def _check_rect(rect, width: int, height: int) -> None:
    x, y, w, h = rect
    if x < 0 or y < 0 or w < 1 or h < 1 or x + w > width or y + h > height:
        raise ValueError(f"ROI (x={x}, y={y}, w={w}, h={h}) does not fit inside a {width}x{height} image")


def extract_roi(image: np.ndarray, rect) -> np.ndarray:
    x, y, w, h = (int(v) for v in rect)
    height, width = image.shape[:2]
    _check_rect((x, y, w, h), width, height)
    return image[y:y + h, x:x + w].copy()


def resize(image: np.ndarray, size: int) -> np.ndarray:
    """Bicubic resize to ``size`` x ``size``; no-op when already that size."""
    if image.shape[0] == size and image.shape[1] == size:
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BICUBIC), dtype=np.uint8)


def jitter_offsets(margin: int, rng: np.random.Generator) -> tuple[int, int]:
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    dy, dx = rng.integers(0, margin + 1, size=2)
    return int(dy), int(dx)


def crop_at(image: np.ndarray, target: int, dy: int, dx: int) -> np.ndarray:
    return image[dy:dy + target, dx:dx + target]


def jitter_crop(image: np.ndarray, target: int, margin: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    if h < target + margin or w < target + margin:
        raise ValueError(f"image {w}x{h} smaller than target {target} plus margin {margin}")
    dy, dx = jitter_offsets(margin, rng)
    return crop_at(image, target, dy, dx)


def normalize(image: np.ndarray) -> np.ndarray:
    """uint8 HxWx3 (or NxHxWx3) -> float32 channel-first in [-1, 1]."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.shape[-1] != 3:
        raise ValueError(f"normalize expects 8-bit 3-channel images, got {image.dtype} {image.shape}")
    v = image.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return np.moveaxis(v, -1, -3)


def denormalize(values: np.ndarray) -> np.ndarray:
    """Channel-first [-1, 1] values -> uint8 channel-last, ``round((v+1)*127.5)`` clamped."""
    v = np.moveaxis(np.asarray(values, dtype=np.float64), -3, -1)
    return np.clip(np.rint((v + 1.0) * 127.5), 0, 255).astype(np.uint8)


# --- procedural paired textures -----------------------------------------------

KINDS = ("stripes", "checks", "dots")


def texture_params(class_id: int) -> tuple[str, float, float]:
    """(kind, period in pixels at 64 px, orientation in radians) for a class."""
    kind = KINDS[class_id % 3]
    # classes sharing a kind get periods a factor 1.35 apart
    period = 6.0 * 1.35 ** ((class_id // 3) % 4)
    angle = float(np.deg2rad((class_id * 37) % 180))
    return kind, period, angle


def _height_map(kind: str, period: float, angle: float, size: int, phase: tuple[float, float]) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    u = (c * xx + s * yy) / period + phase[0]
    v = (-s * xx + c * yy) / period + phase[1]
    if kind == "stripes":
        h = 0.5 + 0.5 * np.cos(2 * np.pi * u)
    elif kind == "checks":
        h = 0.5 + 0.5 * np.tanh(3.0 * np.sin(2 * np.pi * u) * np.sin(2 * np.pi * v))
    else:
        du = u - np.floor(u) - 0.5
        dv = v - np.floor(v) - 0.5
        h = np.exp(-(du ** 2 + dv ** 2) / 0.05)
    return h


def _palette(class_id: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(1000 + class_id)
    a = rng.uniform(20, 120, size=3)
    b = rng.uniform(140, 240, size=3)
    return a, b


def render_pair(class_id: int, resolution: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Colored visual image and relief-shaded red tactile image of one texture patch."""
    kind, period, angle = texture_params(class_id)
    period *= resolution / 64.0
    phase = (float(rng.uniform()), float(rng.uniform()))
    h = _height_map(kind, period, angle, resolution, phase)
    lo, hi = _palette(class_id)
    visual = lo + h[..., None] * (hi - lo)
    visual += rng.normal(0, 3.0, size=visual.shape)
    gy, gx = np.gradient(h)
    shade = np.clip(0.5 + 2.0 * (gx - gy), 0.0, 1.0)
    tone = 0.7 * h + 0.3 * shade
    tactile = np.stack([40 + 200 * tone, 10 + 50 * tone, 10 + 40 * tone], axis=-1)
    tactile += rng.normal(0, 2.0, size=tactile.shape)
    to8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)  # noqa: E731
    return to8(visual), to8(tactile)


def make_synthetic_pairs(num_classes: int, pairs_per_class: int, resolution: int, seed: int) -> list[ImagePair]:
    if num_classes < 1 or pairs_per_class < 1 or resolution < 1:
        raise ValueError("num_classes, pairs_per_class and resolution must be positive")
    rng = np.random.default_rng(seed)
    pairs = []
    for cls in range(num_classes):
        for idx in range(pairs_per_class):
            visual, tactile = render_pair(cls, resolution, rng)
            pairs.append(ImagePair(visual, tactile, cls, f"cloth{cls:02d}_{idx}"))
    return pairs


def write_synthetic_dataset(root, pairs: list[ImagePair]) -> DatasetManifest:
    """Materialize pairs as ``<root>/{visual,tactile}/<source_id>.png`` and write ``manifest.csv``."""
    root = Path(root)
    (root / "visual").mkdir(parents=True, exist_ok=True)
    (root / "tactile").mkdir(parents=True, exist_ok=True)
    for p in pairs:
        save_image(p.visual, root / "visual" / f"{p.source_id}.png")
        save_image(p.tactile, root / "tactile" / f"{p.source_id}.png")
    manifest = discover_pairs(root)
    write_manifest(manifest, root / "manifest.csv")
    return manifest


def load_pairs(manifest: DatasetManifest, split: str | None = None) -> list[ImagePair]:
    rows = manifest.rows if split is None else manifest.split(split)
    pairs = []
    for r in rows:
        visual = load_image(manifest.root / r.visual_path)
        tactile = load_image(manifest.root / r.tactile_path)
        if r.roi is not None:
            tactile = extract_roi(tactile, r.roi)
        source = Path(r.visual_path).stem
        if Path(r.tactile_path).stem != source:
            source = f"{source}~{Path(r.tactile_path).stem}"
        pairs.append(ImagePair(visual, tactile, r.class_id, source))
    return pairs


def mix_real_generated(real: list[LabeledImage], generated: list[LabeledImage], ratio: float = 0.5,
                       seed: int = 0) -> list[LabeledImage]:
    """Per class, combine real and generated samples so that a fraction
    ``ratio`` of each class is real; the class total is the largest that both
    sides can supply. Output order is a seeded shuffle."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    real_by: dict[int, list[LabeledImage]] = {}
    gen_by: dict[int, list[LabeledImage]] = {}
    for s in real:
        real_by.setdefault(s.class_id, []).append(s)
    for s in generated:
        gen_by.setdefault(s.class_id, []).append(s)
    if set(real_by) != set(gen_by):
        missing = sorted(set(real_by) ^ set(gen_by))
        raise ValueError(f"classes {missing} are missing from one side of the mix")
    rng = np.random.default_rng(seed)
    out = []
    for cls in sorted(real_by):
        r, g = real_by[cls], gen_by[cls]
        total = min(len(r) / ratio, len(g) / (1 - ratio))
        n_real = int(np.floor(total * ratio + 1e-9))
        n_gen = int(np.floor(total * (1 - ratio) + 1e-9))
        out.extend(LabeledImage(s.image, s.class_id, s.source_id, False) for s in r[:n_real])
        out.extend(LabeledImage(s.image, s.class_id, s.source_id, True) for s in g[:n_gen])
    order = rng.permutation(len(out))
    return [out[i] for i in order]
