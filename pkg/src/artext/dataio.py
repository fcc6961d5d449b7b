"""File formats and data preparation: polygon annotations, PPM/PGM rasters,
a synthetic artistic-text generator, augmentation, and checkpoints.

Every format here round-trips bit-exactly, which keeps determinism checks
(training resume, dataset digests) trivial. Images use the binary netpbm
codecs because they need no external decoder; annotations are one polygon
per line "x1,y1,...,xn,yn[,###]" with ",###" flagging an ignore region.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .errors import DataError, ShapeError, UsageError

CHECKPOINT_MAGIC = b"ATXD"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

ROTATION_RANGE_DEG = 30.0
DIFFICULTIES = ("easy", "medium", "hard")
# "mixed" varies contrast per word and widens the vertex-count range
# downward so complexity statistics see every bucket
SYNTH_MODES = DIFFICULTIES + ("mixed",)


@dataclass
class AnnotatedSample:
    """One image with its polygon labels, vertices clamped to the frame."""

    image: np.ndarray  # (H, W, 3) uint8
    polygons: list  # of (vertices (k, 2) float64, ignore flag)
    path: str = ""

    def __post_init__(self):
        h, w = self.image.shape[:2]
        clamped = []
        for poly, ign in self.polygons:
            p = np.asarray(poly, dtype=np.float64)
            if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
                raise DataError(f"polygon needs >= 3 (x, y) vertices, got shape {p.shape}")
            p = np.clip(p, 0.0, [w, h])
            clamped.append((p, bool(ign)))
        self.polygons = clamped


# ---------------------------------------------------------------- annotations

def parse_annotation(path) -> list:
    """Read polygons from the line-oriented annotation format."""
    out = []
    text = Path(path).read_text()
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        ignore = False
        if fields and fields[-1] == "###":
            ignore = True
            fields = fields[:-1]
        if len(fields) % 2 != 0:
            raise DataError(f"{path}: line {ln}: odd coordinate count {len(fields)}")
        if len(fields) < 6:
            raise DataError(f"{path}: line {ln}: polygon needs >= 3 vertices")
        try:
            vals = [float(f) for f in fields]
        except ValueError as e:
            raise DataError(f"{path}: line {ln}: {e}") from None
        out.append((np.asarray(vals, dtype=np.float64).reshape(-1, 2), ignore))
    return out


def write_annotation(path, polygons) -> None:
    lines = []
    for poly, ignore in polygons:
        p = np.asarray(poly, dtype=np.float64)
        coords = ",".join(f"{v:.2f}" for v in p.reshape(-1))
        lines.append(coords + (",###" if ignore else ""))
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------- images

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comment lines between header tokens
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataError("image header ended early")
    return buf[start:pos], pos


def read_image(path) -> np.ndarray:
    """Binary PPM (P6) -> (H, W, 3) uint8, binary PGM (P5) -> (H, W) uint8."""
    buf = Path(path).read_bytes()
    if buf[:2] not in (b"P6", b"P5"):
        raise DataError(f"{path}: not a binary PPM/PGM file (magic {buf[:2]!r})")
    channels = 3 if buf[:2] == b"P6" else 1
    pos = 2
    try:
        wtok, pos = _read_token(buf, pos)
        htok, pos = _read_token(buf, pos)
        mtok, pos = _read_token(buf, pos)
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except (ValueError, DataError) as e:
        raise DataError(f"{path}: malformed header: {e}") from None
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * channels
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise DataError(f"{path}: expected {need} pixel bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_image(path, raster: np.ndarray) -> None:
    a = np.asarray(raster)
    if a.dtype != np.uint8:
        raise DataError(f"image rasters are uint8, got {a.dtype}")
    if a.ndim == 3 and a.shape[2] == 3:
        magic, h, w = b"P6", a.shape[0], a.shape[1]
    elif a.ndim == 2:
        magic, h, w = b"P5", a.shape[0], a.shape[1]
    else:
        raise DataError(f"unsupported raster shape {a.shape}")
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + a.tobytes("C"))


def load_sample(image_path, annotation_path) -> AnnotatedSample:
    img = read_image(image_path)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return AnnotatedSample(image=img, polygons=parse_annotation(annotation_path),
                           path=str(image_path))


def read_manifest(path) -> list[tuple[str, str]]:
    """Manifest lines are "image_path<TAB>annotation_path" relative to it."""
    base = Path(path).parent
    pairs = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}: line {ln}: expected image<TAB>annotation")
        pairs.append((str(base / parts[0]), str(base / parts[1])))
    return pairs


# ------------------------------------------------------------------ synthesis

def _bezier_ribbon(rng: np.random.Generator, size: int) -> np.ndarray:
    """Closed outline of one thick, bending stroke."""
    margin = 0.15 * size
    p0 = rng.uniform(margin, size - margin, 2)
    ang = rng.uniform(0.0, 2.0 * np.pi)
    length = rng.uniform(0.30, 0.70) * size
    p3 = np.clip(p0 + length * np.array([np.cos(ang), np.sin(ang)]),
                 margin * 0.5, size - margin * 0.5)
    wobble = 0.10 * size
    p1 = p0 + (p3 - p0) / 3.0 + rng.normal(0.0, wobble, 2)
    p2 = p0 + 2.0 * (p3 - p0) / 3.0 + rng.normal(0.0, wobble, 2)
    t = np.linspace(0.0, 1.0, 48)[:, None]
    center = ((1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1
              + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3)
    tangent = np.gradient(center, axis=0)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-9)
    base = rng.uniform(0.025, 0.060) * size
    waves = rng.uniform(1.0, 5.0)
    half = base * (1.0 + rng.uniform(0.15, 0.55)
                   * np.sin(np.linspace(0.0, waves * np.pi, len(center))))[:, None]
    top = center + normal * half
    bottom = (center - normal * half)[::-1]
    return np.clip(np.concatenate([top, bottom], axis=0), 1.0, size - 1.0)


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = rng.uniform(30, 225, 3)
    c1 = rng.uniform(30, 225, 3)
    direction = rng.normal(0.0, 1.0, 2)
    direction /= max(np.linalg.norm(direction), 1e-9)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    a = xx * direction[0] + yy * direction[1]
    a = (a - a.min()) / max(a.max() - a.min(), 1e-9)
    img = c0[None, None, :] * (1.0 - a[:, :, None]) + c1[None, None, :] * a[:, :, None]
    for _ in range(int(rng.integers(2, 6))):
        cx, cy = rng.uniform(0, size, 2)
        sigma = rng.uniform(0.08, 0.25) * size
        amp = rng.uniform(-35, 35, 3)
        blob = np.exp(-((xx * size - cx) ** 2 + (yy * size - cy) ** 2) / (2 * sigma ** 2))
        img += blob[:, :, None] * amp[None, None, :]
    return img


_CONTRAST = {"easy": (80.0, 125.0), "medium": (45.0, 85.0), "hard": (18.0, 55.0)}


def synth_sample(rng: np.random.Generator, size: int,
                 difficulty: str = "medium") -> AnnotatedSample:
    """One generated poster-style image with 1-4 ribbon words."""
    if difficulty not in SYNTH_MODES:
        raise UsageError(f"difficulty must be one of {SYNTH_MODES}, got {difficulty!r}")
    mixed = difficulty == "mixed"
    img = _textured_background(rng, size)
    polygons = []
    n_words = int(rng.integers(1, 5))
    for _ in range(n_words):
        if mixed:
            difficulty = str(rng.choice(DIFFICULTIES))
        k_lo = 6 if mixed else 10
        poly = None
        for _attempt in range(5):
            outline = _bezier_ribbon(rng, size)
            k = int(rng.integers(k_lo, 41))
            cand = geometry.normalize_ccw(geometry.resample_closed(outline, k))
            if abs(geometry.polygon_area(cand)) >= 40.0:
                poly = cand
                break
        if poly is None:
            continue
        mask = geometry.scanline_fill(poly, size, size)
        if not mask.any():
            continue
        lo, hi = _CONTRAST[difficulty]
        bg_mean = img[mask].mean(axis=0)
        sign = np.where(rng.random(3) < 0.5, -1.0, 1.0)
        fg = np.clip(bg_mean + sign * rng.uniform(lo, hi, 3), 0, 255)
        img[mask] = fg[None, :] + rng.normal(0.0, 3.0, (int(mask.sum()), 3))
        polygons.append((poly, False))
    image = np.clip(img, 0, 255).astype(np.uint8)
    return AnnotatedSample(image=image, polygons=polygons)


def synth_generate(out_dir, seed: int, count: int, size: int,
                   difficulty: str = "medium") -> tuple[str, str]:
    """Write a deterministic dataset; returns (manifest path, sha256 digest).

    The digest covers the manifest and every emitted file, so it is a pure
    function of the four generation arguments.
    """
    if size % 32 != 0:
        raise UsageError(f"image size must be divisible by 32, got {size}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    sha = hashlib.sha256()
    for i in range(count):
        rng = np.random.default_rng([int(seed), i])
        sample = synth_sample(rng, size, difficulty)
        img_name = f"img_{i:04d}.ppm"
        ann_name = f"ann_{i:04d}.txt"
        write_image(out / img_name, sample.image)
        write_annotation(out / ann_name, sample.polygons)
        rows.append(f"{img_name}\t{ann_name}")
        sha.update((out / img_name).read_bytes())
        sha.update((out / ann_name).read_bytes())
    manifest = "\n".join(rows) + "\n"
    (out / "manifest.tsv").write_text(manifest)
    sha.update(manifest.encode("ascii"))
    return str(out / "manifest.tsv"), sha.hexdigest()


# --------------------------------------------------------------- augmentation

def _rotate_image(img: np.ndarray, angle_rad: float) -> np.ndarray:
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ca, sa = np.cos(angle_rad), np.sin(angle_rad)
    # inverse map: rotate output coords by -angle around the center
    sx = ca * (xx - cx) + sa * (yy - cy) + cx
    sy = -sa * (xx - cx) + ca * (yy - cy) + cy
    sxi = np.clip(np.rint(sx), 0, w - 1).astype(np.intp)
    syi = np.clip(np.rint(sy), 0, h - 1).astype(np.intp)
    return img[syi, sxi]


def _rotate_points(p: np.ndarray, angle_rad: float, center) -> np.ndarray:
    ca, sa = np.cos(angle_rad), np.sin(angle_rad)
    rel = p - np.asarray(center, dtype=np.float64)
    return np.stack([ca * rel[:, 0] - sa * rel[:, 1],
                     sa * rel[:, 0] + ca * rel[:, 1]], axis=1) + center


def _resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    ri = np.clip(((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), 0, h - 1)
    ci = np.clip(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), 0, w - 1)
    return img[ri][:, ci]


def _augment_with_params(sample: AnnotatedSample, angle_deg: float, crop_box,
                         flip: bool, out_size: int) -> AnnotatedSample:
    """Deterministic core of ``augment``; crop_box is (x0, y0, x1, y1)."""
    img = sample.image
    h, w = img.shape[:2]
    angle = np.deg2rad(angle_deg)
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    img = _rotate_image(img, angle)
    polys = [(_rotate_points(p, angle, center), ig) for p, ig in sample.polygons]

    x0, y0, x1, y1 = (int(v) for v in crop_box)
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    if x1 - x0 < 8 or y1 - y0 < 8:
        raise UsageError(f"degenerate crop box {crop_box}")
    img = img[y0:y1, x0:x1]
    ch, cw = img.shape[:2]
    polys = [(p - np.array([x0, y0], dtype=np.float64), ig) for p, ig in polys]

    if flip:
        img = img[:, ::-1]
        polys = [(np.stack([cw - p[:, 0], p[:, 1]], axis=1), ig) for p, ig in polys]

    img = _resize_nearest(img, out_size, out_size)
    scale = np.array([out_size / cw, out_size / ch], dtype=np.float64)
    out_polys = []
    for p, ig in polys:
        p = np.clip(p * scale, 0.0, float(out_size))
        area = geometry.polygon_area(p)
        if abs(area) < 1.0:
            # crushed by the crop: keep the vertices, stop supervising it
            out_polys.append((p, True))
        else:
            out_polys.append((geometry.normalize_ccw(p), ig))
    return AnnotatedSample(image=np.ascontiguousarray(img), polygons=out_polys,
                           path=sample.path)


def augment(sample: AnnotatedSample, rng: np.random.Generator,
            out_size: int = 128) -> AnnotatedSample:
    """Random rotation, text-covering crop, horizontal flip, square resize."""
    h, w = sample.image.shape[:2]
    angle = float(rng.uniform(-ROTATION_RANGE_DEG, ROTATION_RANGE_DEG))
    side = int(rng.uniform(0.6, 1.0) * min(h, w))
    side = max(side, 8)
    live = [p for p, ig in sample.polygons if not ig]
    if live:
        pick = live[int(rng.integers(0, len(live)))]
        tx, ty = pick.mean(axis=0)
        # rotation moves the polygons; track the pick so the crop still covers it
        tx, ty = _rotate_points(np.array([[tx, ty]]), np.deg2rad(angle),
                                ((w - 1) / 2.0, (h - 1) / 2.0))[0]
        x0 = int(np.clip(tx - side / 2.0 + rng.uniform(-0.1, 0.1) * side, 0, w - side))
        y0 = int(np.clip(ty - side / 2.0 + rng.uniform(-0.1, 0.1) * side, 0, h - side))
    else:
        x0 = int(rng.integers(0, max(w - side, 0) + 1))
        y0 = int(rng.integers(0, max(h - side, 0) + 1))
    flip = bool(rng.random() < 0.5)
    return _augment_with_params(sample, angle, (x0, y0, x0 + side, y0 + side),
                                flip, out_size)


# ---------------------------------------------------------------- checkpoints

def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise DataError(f"checkpoint truncated reading {what}: expected {n} bytes, got {len(b)}")
    return b


def _write_array(f, arr: np.ndarray) -> None:
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes("C"))


def _pack_tensor(f, name: str, arr: np.ndarray) -> None:
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise DataError(f"cannot serialize parameter {name!r} with dtype {arr.dtype}")
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)) + nb)
    f.write(struct.pack("<BB", code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    _write_array(f, arr)


def _unpack_tensor(f) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
    name = _read_exact(f, nlen, "tensor name").decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(f, 2, f"{name} header"))
    if code not in _CODE_DTYPES:
        raise DataError(f"checkpoint tensor {name!r} has unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, f"{name} dims"))
    dtype = _CODE_DTYPES[code]
    raw = _read_exact(f, int(np.prod(dims, dtype=np.int64)) * dtype.itemsize,
                      f"{name} values")
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return name, arr.astype(arr.dtype.newbyteorder("="))


def save_checkpoint(model, path, config_digest: str = "", epoch: int = 0,
                    optimizer=None) -> None:
    """Binary dump of every named parameter plus optional Adam state."""
    named = list(model.named_parameters())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        db = config_digest.encode("ascii")
        f.write(struct.pack("<I", len(db)) + db)
        f.write(struct.pack("<I", int(epoch)))
        f.write(struct.pack("<I", len(named)))
        for name, p in named:
            _pack_tensor(f, name, p.data)
        if optimizer is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", optimizer.t))
            for name, p in named:
                if p.m is None:
                    f.write(struct.pack("<B", 0))
                else:
                    f.write(struct.pack("<B", 1))
                    _write_array(f, p.m)
                    _write_array(f, p.v)


def load_checkpoint(path, model, optimizer=None) -> dict:
    """Restore parameters (and Adam moments when present) in place."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (dlen,) = struct.unpack("<I", _read_exact(f, 4, "digest length"))
        digest = _read_exact(f, dlen, "config digest").decode("ascii")
        (epoch,) = struct.unpack("<I", _read_exact(f, 4, "epoch"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        stored = {}
        for _ in range(count):
            name, arr = _unpack_tensor(f)
            stored[name] = arr

        named = list(model.named_parameters())
        model_names = {n for n, _ in named}
        extra = sorted(set(stored) - model_names)
        missing = sorted(model_names - set(stored))
        if extra:
            raise DataError(f"{path}: unknown parameter name {extra[0]!r} in checkpoint")
        if missing:
            raise DataError(f"{path}: checkpoint is missing parameter {missing[0]!r}")
        for name, p in named:
            arr = stored[name]
            if arr.shape != p.data.shape:
                raise ShapeError(
                    f"{path}: parameter {name!r} has shape {arr.shape}, model wants {p.data.shape}")
            p.data = arr

        (has_opt,) = struct.unpack("<B", _read_exact(f, 1, "optimizer flag"))
        if has_opt:
            (t,) = struct.unpack("<Q", _read_exact(f, 8, "step counter"))
            for name, p in named:
                (has_m,) = struct.unpack("<B", _read_exact(f, 1, f"{name} moment flag"))
                if not has_m:
                    p.m = p.v = None
                    continue
                nbytes = p.data.size * p.data.dtype.itemsize
                m = np.frombuffer(_read_exact(f, nbytes, f"{name} first moment"),
                                  dtype=p.data.dtype.newbyteorder("<"))
                v = np.frombuffer(_read_exact(f, nbytes, f"{name} second moment"),
                                  dtype=p.data.dtype.newbyteorder("<"))
                p.m = m.reshape(p.data.shape).astype(p.data.dtype.newbyteorder("="))
                p.v = v.reshape(p.data.shape).astype(p.data.dtype.newbyteorder("="))
            if optimizer is not None:
                optimizer.t = int(t)
        return {"version": int(version), "digest": digest, "epoch": int(epoch)}
