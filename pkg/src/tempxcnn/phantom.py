"""Synthetic uCT-like slice series and the on-disk dataset format.

Each slice is a noisy annulus: a bright cortical ring around a darker
marrow cavity on a dark background.  Every mouse draws its own ring
radius, thickness and brightness, and all three vary along the slice
index more than between mice, so a single image says little about which
mouse (or class) it came from.  Slice k of one week pairs with slice k of
another, so that variation cancels in difference images.
From ``pth_onset_week`` on, PTH mice gain ring thickness and brightness
linearly per week; wild mice stay put apart from noise, per-scan
misalignment and crop-size jitter.

Layout on disk::

    <root>/manifest.txt
    <root>/<group>/<mouse_id>/week_<t>/slice_<k>.pgm   16-bit binary PGM (P5)
    <root>/<group>/<mouse_id>/week_<t>/slice_<k>.meta  key=value lines
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .prep import GROUPS, ImageSlice
from .tensor import SeededRng

FORMAT_VERSION = 1
MAXVAL = 65535


@dataclass
class PhantomConfig:
    mice_per_group: int = 5
    weeks: tuple[int, ...] = tuple(range(9))
    missing_weeks: tuple[int, ...] = (2,)
    drop_final_week_pth_mouse: bool = False
    slices_per_week: tuple[int, int] = (30, 50)
    base_dims: tuple[int, int] = (64, 96)
    dim_jitter: tuple[int, int] = (4, 4)
    outer_radius: float = 0.60          # fraction of the shorter half-side
    outer_radius_spread: float = 0.03   # inter-mouse sd, same units
    thickness: float = 5.0              # pixels
    thickness_spread: float = 1.0       # inter-mouse sd, pixels
    radius_profile: float = 0.12        # relative radius modulation along k
    intensity_profile: float = 0.15     # relative brightness modulation along k
    thickness_profile: float = 1.5      # thickness modulation along k, pixels
    background: float = 1500.0
    marrow: float = 5000.0
    ring_intensity: float = 20000.0
    ring_intensity_spread: float = 2500.0
    pth_onset_week: int = 4
    pth_rate: float = 1000.0            # ring brightness gain per week after onset
    pth_thickness_rate: float = 0.5     # ring thickening (pixels) per week after onset
    noise_sigma: float = 800.0
    shift_jitter: int = 3
    seed: int = 0

    def __post_init__(self):
        self.weeks = tuple(int(w) for w in self.weeks)
        self.missing_weeks = tuple(int(w) for w in self.missing_weeks)
        self.slices_per_week = tuple(int(v) for v in self.slices_per_week)
        self.base_dims = tuple(int(v) for v in self.base_dims)
        self.dim_jitter = tuple(int(v) for v in self.dim_jitter)
        if not self.weeks or self.mice_per_group < 1:
            raise ValueError("need at least one week and one mouse per group")
        lo, hi = self.slices_per_week
        if not 1 <= lo <= hi:
            raise ValueError(f"slices_per_week range {self.slices_per_week} is empty")
        if not min(self.weeks) <= self.pth_onset_week <= max(self.weeks):
            raise ValueError("pth_onset_week must lie within the weeks span")
        if any(j < 0 for j in self.dim_jitter) or self.shift_jitter < 0:
            raise ValueError("jitter ranges must be nonnegative")
        if any(b - j < 8 for b, j in zip(self.base_dims, self.dim_jitter)):
            raise ValueError("jittered dims too small")

    @property
    def recorded_weeks(self) -> tuple[int, ...]:
        return tuple(w for w in self.weeks if w not in self.missing_weeks)

    def mouse_ids(self, group: str) -> list[str]:
        return [f"{group}{i:02d}" for i in range(self.mice_per_group)]

    def weeks_for(self, group: str, mouse: int) -> tuple[int, ...]:
        weeks = self.recorded_weeks
        if self.drop_final_week_pth_mouse and group == "pth" and mouse == self.mice_per_group - 1:
            weeks = weeks[:-1]
        return weeks

    def to_lines(self) -> list[str]:
        return [f"config.{k}={_fmt(v)}" for k, v in asdict(self).items()]

    @classmethod
    def from_mapping(cls, values: dict, **overrides) -> "PhantomConfig":
        """Build from string values (config-file lines); keys that are not
        fields are ignored, ``None`` overrides are skipped."""
        defaults = cls()
        merged = {k: v for k, v in values.items() if hasattr(defaults, k)}
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**{k: _parse(getattr(defaults, k), v) for k, v in merged.items()})


def _parse(default, value):
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {value!r}")
        return value.lower() in ("true", "1", "yes", "on")
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return type(default)(value)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


# --------------------------------------------------------------------------
# deterministic per-entity draws
# --------------------------------------------------------------------------

def _rng(config: PhantomConfig, *keys: int) -> SeededRng:
    return SeededRng(config.seed).spawn(*keys)


@dataclass(frozen=True)
class MouseTraits:
    outer_radius: float
    thickness: float
    ring_intensity: float
    phase: float
    intensity_phase: float
    thickness_phase: float


def mouse_traits(config: PhantomConfig, group: str, mouse: int) -> MouseTraits:
    g = _rng(config, 0, GROUPS.index(group), mouse).gen
    half = min(config.base_dims) / 2 - max(config.dim_jitter)
    r = half * (config.outer_radius + config.outer_radius_spread * g.standard_normal())
    t = max(1.5, config.thickness + config.thickness_spread * g.standard_normal())
    i = config.ring_intensity + config.ring_intensity_spread * g.standard_normal()
    phases = g.uniform(0, 2 * math.pi, size=3)
    return MouseTraits(r, t, i, *(float(p) for p in phases))


def scan_geometry(config: PhantomConfig, group: str, mouse: int, week: int):
    """Per mouse-week (dims, shift, slice count)."""
    g = _rng(config, 1, GROUPS.index(group), mouse, week).gen
    jh, jw = config.dim_jitter
    dims = (config.base_dims[0] - int(g.integers(0, jh + 1)), config.base_dims[1] - int(g.integers(0, jw + 1)))
    s = config.shift_jitter
    shift = (int(g.integers(-s, s + 1)), int(g.integers(-s, s + 1)))
    lo, hi = config.slices_per_week
    return dims, shift, int(g.integers(lo, hi + 1))


def analytic_max_dims(config: PhantomConfig) -> tuple[int, int]:
    h = w = 0
    for group in GROUPS:
        for m in range(config.mice_per_group):
            for week in config.weeks_for(group, m):
                (dh, dw), _, _ = scan_geometry(config, group, m, week)
                h, w = max(h, dh), max(w, dw)
    return h, w


def treatment_weeks(config: PhantomConfig, group: str, week: int) -> float:
    return float(max(0, week - config.pth_onset_week)) if group == "pth" else 0.0


def ring_parameters(config: PhantomConfig, group: str, mouse: int, week: int, k: int):
    """(inner radius, outer radius, ring intensity) for one slice."""
    traits = mouse_traits(config, group, mouse)
    dt = treatment_weeks(config, group, week)
    # k indexes physical position from the proximal end, independent of scan length
    pos = k / max(1, config.slices_per_week[1] - 1)
    angle = 2 * math.pi * pos
    r_out = traits.outer_radius * (1 + config.radius_profile * math.sin(angle + traits.phase))
    thickness = max(1.0, traits.thickness + config.thickness_profile * math.sin(angle + traits.thickness_phase))
    thickness += config.pth_thickness_rate * dt
    intensity = traits.ring_intensity * (1 + config.intensity_profile * math.sin(angle + traits.intensity_phase))
    intensity += config.pth_rate * dt
    return r_out - thickness, r_out, intensity


def render_slice(config: PhantomConfig, group: str, mouse: int, week: int, k: int) -> ImageSlice:
    dims, shift, _ = scan_geometry(config, group, mouse, week)
    r_in, r_out, ring = ring_parameters(config, group, mouse, week, k)
    h, w = dims
    cy, cx = h // 2 + shift[0], w // 2 + shift[1]
    if r_in <= 0 or cy - r_out < 0 or cx - r_out < 0 or cy + r_out > h - 1 or cx + r_out > w - 1:
        raise ValueError(f"ring (r_out={r_out:.1f}, r_in={r_in:.1f}) does not fit a {h}x{w} image at shift {shift}")
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(yy - cy, xx - cx)
    # soft edges so sub-pixel thickness changes show up
    inside_outer = np.clip(r_out + 0.5 - dist, 0.0, 1.0)
    inside_inner = np.clip(r_in + 0.5 - dist, 0.0, 1.0)
    img = (config.background
           + (ring - config.background) * inside_outer
           + (config.marrow - ring) * inside_inner)
    if config.noise_sigma > 0:
        g = _rng(config, 2, GROUPS.index(group), mouse, week, k).gen
        img = img + config.noise_sigma * g.standard_normal(img.shape)
    pixels = np.clip(np.rint(img), 0, MAXVAL).astype(np.uint16)
    mouse_id = config.mouse_ids(group)[mouse]
    return ImageSlice(pixels, mouse_id, group, week, k)


def iter_slices(config: PhantomConfig):
    for group in GROUPS:
        for m in range(config.mice_per_group):
            for week in config.weeks_for(group, m):
                _, _, n = scan_geometry(config, group, m, week)
                for k in range(n):
                    yield render_slice(config, group, m, week, k)


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

class SliceFormatError(ValueError):
    pass


def write_slice(s: ImageSlice, path) -> None:
    """16-bit P5 PGM (big-endian samples) plus a ``.meta`` sidecar."""
    path = Path(path)
    px = np.asarray(s.pixels)
    if px.min() < 0 or px.max() > MAXVAL or not np.all(px == np.rint(px)):
        raise ValueError("pixels must be integers in [0, 65535]")
    h, w = px.shape
    header = f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii")
    path.write_bytes(header + px.astype(">u2").tobytes())
    meta = (f"mouse_id={s.mouse_id}\ngroup={s.group}\nweek={s.week}\n"
            f"slice_index={s.slice_index}\nheight={h}\nwidth={w}\n")
    path.with_suffix(".meta").write_text(meta)


def _read_pgm(data: bytes, path) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SliceFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before raster
    if tokens[0] != b"P5":
        raise SliceFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise SliceFormatError(f"{path}: malformed PGM header") from None
    if w < 1 or h < 1 or not 0 < maxval <= MAXVAL:
        raise SliceFormatError(f"{path}: bad PGM dims or maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise SliceFormatError(f"{path}: truncated raster ({len(raster)} of {need} bytes)")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.uint16)


def read_slice(path) -> ImageSlice:
    path = Path(path)
    pixels = _read_pgm(path.read_bytes(), path)
    meta_path = path.with_suffix(".meta")
    try:
        lines = meta_path.read_text().splitlines()
    except FileNotFoundError:
        raise SliceFormatError(f"{meta_path}: missing metadata sidecar") from None
    meta = {}
    for line in lines:
        if not line.strip():
            continue
        if "=" not in line:
            raise SliceFormatError(f"{meta_path}: malformed line {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    try:
        s = ImageSlice(pixels, meta["mouse_id"], meta["group"], int(meta["week"]), int(meta["slice_index"]))
    except (KeyError, ValueError) as exc:
        raise SliceFormatError(f"{meta_path}: bad metadata ({exc})") from None
    if "height" in meta and (int(meta["height"]), int(meta["width"])) != pixels.shape:
        raise SliceFormatError(f"{path}: metadata dims disagree with raster {pixels.shape}")
    return s


def slice_path(root, s: ImageSlice) -> Path:
    return Path(root) / s.group / s.mouse_id / f"week_{s.week}" / f"slice_{s.slice_index}.pgm"


@dataclass
class DatasetManifest:
    root: Path
    config: PhantomConfig
    files: list[tuple[str, str]] = field(default_factory=list)   # (relative path, sha256)
    version: int = FORMAT_VERSION

    def write(self) -> Path:
        lines = [f"format_version={self.version}",
                 "layout=<group>/<mouse_id>/week_<t>/slice_<k>.pgm (+ .meta)"]
        lines += self.config.to_lines()
        lines += [f"file={rel} sha256={digest}" for rel, digest in self.files]
        path = self.root / "manifest.txt"
        path.write_text("\n".join(lines) + "\n")
        return path


def generate_dataset(config: PhantomConfig, root) -> DatasetManifest:
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    manifest = DatasetManifest(root, config)
    for s in iter_slices(config):
        path = slice_path(root, s)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_slice(s, path)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        manifest.files.append((path.relative_to(root).as_posix(), digest))
    manifest.write()
    return manifest


def load_dataset(root) -> list[ImageSlice]:
    """Read every slice under ``root`` in (group, mouse, week, slice) order."""
    root = Path(root)
    paths = sorted(root.glob("*/*/week_*/slice_*.pgm"))
    if not paths:
        raise FileNotFoundError(f"no slices found under {root}")
    slices = [read_slice(p) for p in paths]
    slices.sort(key=lambda s: (GROUPS.index(s.group), s.mouse_id, s.week, s.slice_index))
    return slices
