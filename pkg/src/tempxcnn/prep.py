"""Temporal preprocessing: expansion, registration, differencing, pairing,
timestamping and subject-level partitioning.
"""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import SeededRng

log = logging.getLogger(__name__)

GROUPS = ("wild", "pth")
SENTINEL = None  # reference week marker for a series' first timestamp


@dataclass
class ImageSlice:
    pixels: np.ndarray
    mouse_id: str
    group: str
    week: int
    slice_index: int

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError(f"slice pixels must be 2-D, got shape {self.pixels.shape}")
        if self.week < 0 or self.slice_index < 0:
            raise ValueError("week and slice_index must be >= 0")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.mouse_id, self.week, self.slice_index)

    @property
    def label(self) -> int:
        return GROUPS.index(self.group)


@dataclass
class DifferenceImage:
    pixels: np.ndarray
    comparison_week: int
    reference_week: int
    mode: str
    translation: tuple[int, int] = (0, 0)

    @property
    def is_sentinel(self) -> bool:
        return self.reference_week == self.comparison_week


# --------------------------------------------------------------------------
# dimension standardisation
# --------------------------------------------------------------------------

def max_dims(slices: Iterable[ImageSlice]) -> tuple[int, int]:
    h_max = w_max = 0
    for s in slices:
        h, w = s.pixels.shape
        h_max, w_max = max(h_max, h), max(w_max, w)
    if h_max == 0:
        raise ValueError("empty dataset")
    return h_max, w_max


def _expand(pixels: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    h, w = pixels.shape
    if target_h < h or target_w < w:
        raise ValueError(f"target {target_h}x{target_w} is smaller than image {h}x{w}")
    if (h, w) == (target_h, target_w):
        return pixels.copy()
    top, left = (target_h - h) // 2, (target_w - w) // 2
    out = np.full((target_h, target_w), pixels.min(), dtype=pixels.dtype)
    out[top:top + h, left:left + w] = pixels
    return out


def expand_image(s: ImageSlice, target_h: int, target_w: int) -> ImageSlice:
    """Centre the slice on a canvas filled with the slice's own minimum."""
    return ImageSlice(_expand(s.pixels, target_h, target_w), s.mouse_id, s.group, s.week, s.slice_index)


def crop_center(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Inverse of expansion for an image originally ``h`` x ``w``."""
    th, tw = pixels.shape
    top, left = (th - h) // 2, (tw - w) // 2
    return pixels[top:top + h, left:left + w]


# --------------------------------------------------------------------------
# registration
# --------------------------------------------------------------------------

class DegenerateImageError(ValueError):
    """Correlation is undefined (zero variance)."""


def _box_sums(table: np.ndarray, r0, r1, c0, c1) -> np.ndarray:
    return table[r1, c1] - table[r0, c1] - table[r1, c0] + table[r0, c0]


def ncc_surface(reference: np.ndarray, moving: np.ndarray, max_shift: int) -> np.ndarray:
    """Overlap-normalised cross-correlation for every integer shift.

    Entry ``[dr + max_shift, dc + max_shift]`` scores the hypothesis that
    ``moving`` is ``reference`` translated by ``(dr, dc)``, i.e.
    ``moving[y + dr, x + dc] == reference[y, x]``, using only the pixels
    where the two images overlap.  Shifts whose overlap has zero variance
    score ``-inf``.
    """
    ref = np.asarray(reference, dtype=np.float64)
    mov = np.asarray(moving, dtype=np.float64)
    if ref.shape != mov.shape:
        raise ValueError(f"registration needs equal dims, got {ref.shape} vs {mov.shape}")
    h, w = ref.shape
    if max_shift < 0 or max_shift >= min(h, w):
        raise ValueError(f"max_shift must be in [0, {min(h, w) - 1}]")
    ref = ref - ref.mean()
    mov = mov - mov.mean()

    # sum_y ref[y] * mov[y + s] for all s, via zero-padded FFT correlation
    fh, fw = 2 * h, 2 * w
    spec = np.conj(np.fft.rfft2(ref, (fh, fw))) * np.fft.rfft2(mov, (fh, fw))
    corr = np.fft.irfft2(spec, (fh, fw))

    def integral(a):
        t = np.zeros((h + 1, w + 1))
        t[1:, 1:] = a.cumsum(0).cumsum(1)
        return t

    t_r, t_r2, t_m, t_m2 = integral(ref), integral(ref * ref), integral(mov), integral(mov * mov)

    shifts = np.arange(-max_shift, max_shift + 1)
    dr, dc = np.meshgrid(shifts, shifts, indexing="ij")
    # overlap window in reference coordinates
    r0, r1 = np.maximum(0, -dr), np.minimum(h, h - dr)
    c0, c1 = np.maximum(0, -dc), np.minimum(w, w - dc)
    n = (r1 - r0) * (c1 - c0)
    s_r, s_r2 = _box_sums(t_r, r0, r1, c0, c1), _box_sums(t_r2, r0, r1, c0, c1)
    s_m, s_m2 = _box_sums(t_m, r0 + dr, r1 + dr, c0 + dc, c1 + dc), _box_sums(t_m2, r0 + dr, r1 + dr, c0 + dc, c1 + dc)
    s_rm = corr[dr % fh, dc % fw]

    cov = s_rm - s_r * s_m / n
    var_r = s_r2 - s_r * s_r / n
    var_m = s_m2 - s_m * s_m / n
    scale = np.sqrt(np.abs(ref).max() ** 2 * np.abs(mov).max() ** 2) * n
    ok = (var_r > 1e-12 * scale) & (var_m > 1e-12 * scale)
    score = np.full(dr.shape, -np.inf)
    score[ok] = cov[ok] / np.sqrt(var_r[ok] * var_m[ok])
    return score


def pick_shift(score: np.ndarray, max_shift: int, tie_tol: float = 1e-9) -> tuple[int, int]:
    """Best shift; near-ties go to the smallest |dr|+|dc|, then row-major order."""
    if not np.isfinite(score).any():
        raise DegenerateImageError("images have zero variance; correlation undefined")
    best = score[np.isfinite(score)].max()
    rows, cols = np.nonzero(score >= best - tie_tol)
    cands = [(abs(r - max_shift) + abs(c - max_shift), r, c) for r, c in zip(rows, cols)]
    _, r, c = min(cands)
    return int(r - max_shift), int(c - max_shift)


def register_translation(reference: np.ndarray, moving: np.ndarray, max_shift: int = 16) -> tuple[int, int]:
    """Integer (row, col) translation of ``moving`` relative to ``reference``.

    Exhaustive search over ``[-max_shift, max_shift]^2`` maximising
    normalised cross-correlation on the overlap.  Registering ``a`` against
    ``apply_translation(a, dr, dc)`` returns ``(dr, dc)``.  The window is
    clamped to the image size, where overlaps would vanish.
    """
    max_shift = min(max_shift, min(np.shape(reference)) - 1)
    return pick_shift(ncc_surface(reference, moving, max_shift), max_shift)


def apply_translation(pixels: np.ndarray, drow: int, dcol: int, fill: float | None = None) -> np.ndarray:
    """Move content by (drow, dcol); exposed borders take ``fill`` (default: image minimum)."""
    h, w = pixels.shape
    if fill is None:
        fill = pixels.min()
    out = np.full_like(pixels, fill)
    if abs(drow) >= h or abs(dcol) >= w:
        return out
    src_r = slice(max(0, -drow), h - max(0, drow))
    dst_r = slice(max(0, drow), h - max(0, -drow))
    src_c = slice(max(0, -dcol), w - max(0, dcol))
    dst_c = slice(max(0, dcol), w - max(0, -dcol))
    out[dst_r, dst_c] = pixels[src_r, src_c]
    return out


# --------------------------------------------------------------------------
# differencing
# --------------------------------------------------------------------------

MODES = ("absolute", "relative")


def normalize_mode(mode: str) -> str:
    aliases = {"abs": "absolute", "rel": "relative"}
    mode = aliases.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES} (or abs/rel), got {mode!r}")
    return mode


def difference_image(comparison: ImageSlice, reference: ImageSlice, mode: str = "absolute",
                     max_shift: int = 16) -> DifferenceImage:
    """Register the reference onto the comparison, then subtract it.

    A zero-variance pair cannot be registered and is subtracted unshifted.
    """
    mode = normalize_mode(mode)
    if comparison.mouse_id != reference.mouse_id:
        raise ValueError(f"mouse mismatch: {comparison.mouse_id} vs {reference.mouse_id}")
    if comparison.pixels.shape != reference.pixels.shape:
        raise ValueError(f"dim mismatch: {comparison.pixels.shape} vs {reference.pixels.shape}")
    if comparison.week < reference.week:
        raise ValueError("reference week must not follow the comparison week")
    cmp_px = comparison.pixels.astype(np.float32)
    ref_px = reference.pixels.astype(np.float32)
    try:
        dr, dc = register_translation(cmp_px, ref_px, max_shift)
    except DegenerateImageError:
        dr, dc = 0, 0
    aligned = apply_translation(ref_px, -dr, -dc)
    return DifferenceImage(cmp_px - aligned, comparison.week, reference.week, mode, (dr, dc))


def first_week_difference(comparison: ImageSlice, mode: str = "absolute") -> DifferenceImage:
    """Uniform image at the comparison slice's minimum (no earlier data)."""
    px = comparison.pixels.astype(np.float32)
    return DifferenceImage(np.full_like(px, px.min()), comparison.week, comparison.week,
                           normalize_mode(mode))


def select_reference(weeks: Sequence[int], t: int, mode: str):
    """Reference week for ``t``: earliest (absolute) or latest earlier week
    (relative).  Returns ``SENTINEL`` for the earliest week of the series."""
    mode = normalize_mode(mode)
    weeks = sorted(set(int(w) for w in weeks))
    if t not in weeks:
        raise ValueError(f"week {t} not in series {weeks}")
    if t == weeks[0]:
        return SENTINEL
    if mode == "absolute":
        return weeks[0]
    return max(w for w in weeks if w < t)


def pair_slices(reference: Sequence[ImageSlice], comparison: Sequence[ImageSlice]):
    """Pair the k-th reference slice with the k-th comparison slice.

    Returns ``(pairs, unused)`` where ``unused`` counts slices of the longer
    list left without a partner.
    """
    n = min(len(reference), len(comparison))
    pairs = list(zip(reference[:n], comparison[:n]))
    return pairs, abs(len(reference) - len(comparison))


# --------------------------------------------------------------------------
# samples and partitioning
# --------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    label: int
    mouse_id: str
    group: str
    week: int
    slice_index: int
    differences: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def timestamp(self) -> float:
        return float(self.week)

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.mouse_id, self.week, self.slice_index)


def _series(slices: Iterable[ImageSlice]):
    by_mouse: dict[str, dict[int, list[ImageSlice]]] = defaultdict(lambda: defaultdict(list))
    for s in slices:
        by_mouse[s.mouse_id][s.week].append(s)
    for weeks in by_mouse.values():
        for lst in weeks.values():
            lst.sort(key=lambda s: s.slice_index)
    return by_mouse


@dataclass
class PrepStats:
    images: int = 0
    unused: int = 0

    @property
    def unused_fraction(self) -> float:
        return self.unused / self.images if self.images else 0.0


def build_samples(slices: Sequence[ImageSlice], modes: Sequence[str] = (), max_shift: int = 16,
                  target_dims: tuple[int, int] | None = None, stats: PrepStats | None = None) -> list[Sample]:
    """Expand every slice and attach difference images for each mode.

    With several modes only slices paired under every mode are kept, so
    all modes see the same sample set.  Output is sorted by
    (mouse, week, slice_index).
    """
    modes = [normalize_mode(m) for m in modes]
    target = target_dims or max_dims(slices)
    expanded = [expand_image(s, *target) for s in slices]
    stats = stats if stats is not None else PrepStats()
    stats.images += len(expanded)
    samples = []
    for mouse, weeks in sorted(_series(expanded).items()):
        series = sorted(weeks)
        for t in series:
            comp = weeks[t]
            per_mode: dict[str, dict[int, np.ndarray]] = {}
            for mode in modes:
                t0 = select_reference(series, t, mode)
                diffs = {}
                if t0 is SENTINEL:
                    for s in comp:
                        diffs[s.slice_index] = first_week_difference(s, mode).pixels
                else:
                    pairs, _ = pair_slices(weeks[t0], comp)
                    for ref, s in pairs:
                        diffs[s.slice_index] = difference_image(s, ref, mode, max_shift).pixels
                per_mode[mode] = diffs
            for s in comp:
                if all(s.slice_index in per_mode[m] for m in modes):
                    samples.append(Sample(
                        s.pixels.astype(np.float32), s.label, s.mouse_id, s.group, s.week,
                        s.slice_index, {m: per_mode[m][s.slice_index] for m in modes}))
                else:
                    stats.unused += 1
    return samples


@dataclass
class DatasetSplit:
    train: list[Sample]
    validation: list[Sample]
    test: list[Sample]
    held_out_mice: dict[str, str]
    intensity_scale: float = 1.0
    timestamps: bool = True

    def parts(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}

    @property
    def modes(self) -> tuple[str, ...]:
        first = next((p[0] for p in self.parts().values() if p), None)
        return tuple(sorted(first.differences)) if first is not None else ()


def partition(samples: Sequence[Sample], rng: SeededRng, train_fraction: float = 0.9) -> DatasetSplit:
    """Hold out one random mouse per group for test; split the rest 90/10."""
    mice_by_group: dict[str, list[str]] = defaultdict(list)
    for s in samples:
        if s.mouse_id not in mice_by_group[s.group]:
            mice_by_group[s.group].append(s.mouse_id)
    held_out = {}
    for group in sorted(mice_by_group):
        mice = sorted(mice_by_group[group])
        if len(mice) < 2:
            raise ValueError(f"group {group!r} has {len(mice)} mouse; need >= 2 to hold one out")
        held_out[group] = mice[int(rng.integers(0, len(mice)))]
    test_mice = set(held_out.values())
    test = [s for s in samples if s.mouse_id in test_mice]
    rest = [s for s in samples if s.mouse_id not in test_mice]
    order = rng.permutation(len(rest))
    rest = [rest[i] for i in order]
    # the 90/10 cut is taken per class so validation balance does not drift
    # with sampling noise; order within each split stays the random one
    to_train = set()
    for group in sorted(mice_by_group):
        idx = [i for i, s in enumerate(rest) if s.group == group]
        to_train.update(idx[:int(round(train_fraction * len(idx)))])
    train = [s for i, s in enumerate(rest) if i in to_train]
    val = [s for i, s in enumerate(rest) if i not in to_train]
    scale = max((float(s.image.max()) for s in train), default=1.0) or 1.0
    return DatasetSplit(train, val, test, held_out, scale)


# --------------------------------------------------------------------------
# class balance
# --------------------------------------------------------------------------

@dataclass
class BalanceRow:
    split: str
    counts: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def percent(self, group: str) -> float:
        return 100.0 * self.counts.get(group, 0) / self.total if self.total else 0.0


def class_balance_report(split: DatasetSplit) -> list[BalanceRow]:
    rows = []
    for name, samples in split.parts().items():
        counts = {g: 0 for g in GROUPS}
        for s in samples:
            counts[s.group] += 1
        rows.append(BalanceRow(name, counts))
    return rows


def format_balance(rows: Sequence[BalanceRow], title: str = "") -> str:
    lines = []
    if title:
        lines.append(title)
    header = f"{'split':<12}" + "".join(f"{g + ' / %':>12}" for g in GROUPS) + f"{'total':>10}"
    lines.append(header)
    lines.append("-" * len(header))
    for r in rows:
        lines.append(f"{r.split:<12}" + "".join(f"{r.percent(g):>12.2f}" for g in GROUPS) + f"{r.total:>10}")
    return "\n".join(lines)


def balance_csv(rows: Sequence[BalanceRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["split"] + [f"{g}_percent" for g in GROUPS] + [f"{g}_count" for g in GROUPS] + ["total"])
    for r in rows:
        writer.writerow([r.split] + [f"{r.percent(g):.2f}" for g in GROUPS]
                        + [r.counts[g] for g in GROUPS] + [r.total])
    return buf.getvalue()


# --------------------------------------------------------------------------
# persistence of preprocessed splits
# --------------------------------------------------------------------------

def save_split(split: DatasetSplit, path) -> None:
    """One compressed ``.npz`` holding every partition's arrays."""
    arrays = {"intensity_scale": np.float64(split.intensity_scale),
              "timestamps": np.bool_(split.timestamps),
              "held_out": np.array([f"{g}={m}" for g, m in sorted(split.held_out_mice.items())])}
    for name, samples in split.parts().items():
        if not samples:
            continue
        arrays[f"{name}/image"] = np.stack([s.image for s in samples])
        arrays[f"{name}/label"] = np.array([s.label for s in samples], dtype=np.int64)
        arrays[f"{name}/week"] = np.array([s.week for s in samples], dtype=np.int64)
        arrays[f"{name}/slice_index"] = np.array([s.slice_index for s in samples], dtype=np.int64)
        arrays[f"{name}/mouse_id"] = np.array([s.mouse_id for s in samples])
        for mode in samples[0].differences:
            arrays[f"{name}/diff_{mode}"] = np.stack([s.differences[mode] for s in samples])
    np.savez_compressed(path, **arrays)


def load_split(path) -> DatasetSplit:
    with np.load(path) as z:
        parts = {}
        for name in ("train", "validation", "test"):
            if f"{name}/image" not in z:
                parts[name] = []
                continue
            images = z[f"{name}/image"]
            diffs = {k.split("diff_", 1)[1]: z[k] for k in z.files if k.startswith(f"{name}/diff_")}
            labels, weeks = z[f"{name}/label"], z[f"{name}/week"]
            slices, mice = z[f"{name}/slice_index"], z[f"{name}/mouse_id"]
            parts[name] = [
                Sample(images[i], int(labels[i]), str(mice[i]), GROUPS[int(labels[i])], int(weeks[i]),
                       int(slices[i]), {m: d[i] for m, d in diffs.items()})
                for i in range(len(images))
            ]
        held = dict(entry.split("=", 1) for entry in z["held_out"].tolist())
        scale = float(z["intensity_scale"])
        timestamps = bool(z["timestamps"]) if "timestamps" in z else True
    return DatasetSplit(parts["train"], parts["validation"], parts["test"], held, scale, timestamps)


def write_balance_report(split: DatasetSplit, out_dir, title: str = "") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = class_balance_report(split)
    txt, csv_path = out_dir / "class_balance.txt", out_dir / "class_balance.csv"
    txt.write_text(format_balance(rows, title) + "\n")
    csv_path.write_text(balance_csv(rows))
    return txt, csv_path
