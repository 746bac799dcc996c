"""Procedural wafer bin maps with mixed defect labels, plus archive and native I/O.

Grids hold 0 outside the wafer disk, 1 for a good die and 2 for a defect die.
Labels are 8-bit multi-hot vectors in :data:`CLASSES` order.
"""
from __future__ import annotations

import ast
import csv
import hashlib
import io
import struct
import zipfile
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numcore import Rng

CLASSES = ("Center", "Donut", "Edge_Loc", "Edge_Ring", "Loc", "Near_Full", "Scratch", "Random")
C = len(CLASSES)
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}
NATIVE_MAGIC = b"WFR1"
NPY_MAGIC = b"\x93NUMPY"
# Masks smaller than this are re-drawn so labels stay visible after noise.
MIN_MASK_CELLS = 8
_MAX_REDRAWS = 50


@dataclass
class WaferSample:
    grid: np.ndarray  # (H, W) uint8
    label: np.ndarray  # (8,) uint8

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        self.label = np.asarray(self.label, dtype=np.uint8)
        if self.label.shape != (C,):
            raise ValueError(f"label must have {C} entries, got shape {self.label.shape}")
        if self.grid.ndim != 2 or (self.grid.size and self.grid.max() > 2):
            raise ValueError("grid must be 2-D with cells in {0, 1, 2}")
        if self.label.max() > 1:
            raise ValueError("label bits must be 0/1")

    @property
    def normal(self) -> bool:
        return not self.label.any()

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(CLASSES[i] for i in np.flatnonzero(self.label))

    @property
    def n_defects(self) -> int:
        return int(self.label.sum())

    def __eq__(self, other):
        return (isinstance(other, WaferSample) and np.array_equal(self.grid, other.grid)
                and np.array_equal(self.label, other.label))


def _profile_default() -> dict[tuple[str, ...], int]:
    """Long-tail profile: 7 common singles, mixed pairs/triples/quads, rare Near_Full.

    Mixtures draw from Center/Donut, Edge_Loc/Edge_Ring, Loc and Scratch with at
    most one member of each of the first two groups (13 pairs, 12 triples,
    4 quads).
    """
    profile: dict[tuple[str, ...], int] = {}
    for name in ("Center", "Donut", "Edge_Loc", "Edge_Ring", "Loc", "Scratch", "Random"):
        profile[(name,)] = 400
    profile[("Near_Full",)] = 20
    pool = ("Center", "Donut", "Edge_Loc", "Edge_Ring", "Loc", "Scratch")
    exclusive = ({"Center", "Donut"}, {"Edge_Loc", "Edge_Ring"})
    per_size = {2: 80, 3: 30, 4: 15}
    for k, count in per_size.items():
        for combo in combinations(pool, k):
            if any(len(g & set(combo)) > 1 for g in exclusive):
                continue
            profile[combo] = count
    return profile


DEFAULT_PROFILE = _profile_default()


@dataclass
class DatasetConfig:
    H: int = 26
    W: int = 26
    profile: dict = field(default_factory=lambda: dict(DEFAULT_PROFILE))
    noise: float = 0.02
    seed: int = 42

    def __post_init__(self):
        if not 0.0 <= self.noise <= 0.2:
            raise ValueError(f"noise rate {self.noise} outside [0, 0.2]")
        if any(c < 0 for c in self.profile.values()):
            raise ValueError("profile counts must be >= 0")

    @property
    def total(self) -> int:
        return sum(self.profile.values())


def radius_map(H: int, W: int):
    """Normalized radius and angle of every cell center; the disk is ``r <= 1``."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy = (yy - (H - 1) / 2) / (H / 2)
    dx = (xx - (W - 1) / 2) / (W / 2)
    return np.hypot(dy, dx), np.arctan2(dy, dx), dy, dx


def disk_mask(H: int, W: int) -> np.ndarray:
    return radius_map(H, W)[0] <= 1.0


def _angle_dist(a, b):
    d = np.abs(a - b) % (2 * np.pi)
    return np.minimum(d, 2 * np.pi - d)


def _render_once(kind: str, rng: Rng, H: int, W: int) -> np.ndarray:
    r, ang, dy, dx = radius_map(H, W)
    disk = r <= 1.0
    if kind == "Center":
        rad = rng.uniform(0.15, 0.3)
        off_r, off_a = rng.uniform(0.0, 0.08), rng.uniform(0, 2 * np.pi)
        cy, cx = off_r * np.sin(off_a), off_r * np.cos(off_a)
        mask = np.hypot(dy - cy, dx - cx) <= rad
    elif kind == "Donut":
        inner = rng.uniform(0.25, 0.32)
        outer = min(inner + rng.uniform(0.08, 0.13), 0.45)
        mask = (r >= inner) & (r <= outer)
    elif kind == "Edge_Ring":
        mask = r >= rng.uniform(0.85, 0.9)
    elif kind == "Edge_Loc":
        centre = rng.uniform(0, 2 * np.pi)
        half = rng.uniform(0.3, 0.6)
        mask = (r >= rng.uniform(0.72, 0.8)) & (_angle_dist(ang, centre) <= half)
    elif kind == "Loc":
        pos_r, pos_a = rng.uniform(0.35, 0.7), rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0.1, 0.18)
        mask = np.hypot(dy - pos_r * np.sin(pos_a), dx - pos_r * np.cos(pos_a)) <= rad
    elif kind == "Scratch":
        mask = _scratch(rng, H, W)
    elif kind == "Random":
        mask = rng.random((H, W)) < rng.uniform(0.06, 0.10)
    elif kind == "Near_Full":
        mask = _near_full(rng, r, dy, dx, disk)
    else:
        raise ValueError(f"unknown defect kind {kind!r}")
    return mask & disk


def _scratch(rng: Rng, H: int, W: int) -> np.ndarray:
    mask = np.zeros((H, W), dtype=bool)
    R = min(H, W) / 2
    start_r, start_a = rng.uniform(0.0, 0.4), rng.uniform(0, 2 * np.pi)
    y = (H - 1) / 2 + start_r * R * np.sin(start_a)
    x = (W - 1) / 2 + start_r * R * np.cos(start_a)
    heading = rng.uniform(0, 2 * np.pi)
    steps = int(round(rng.uniform(0.35, 0.7) * min(H, W)))
    wide = rng.random() < 0.5
    for _ in range(steps):
        i, j = int(round(y)), int(round(x))
        if 0 <= i < H and 0 <= j < W:
            mask[i, j] = True
            if wide:
                # thicken perpendicular to the dominant direction
                if abs(np.cos(heading)) > abs(np.sin(heading)):
                    if i + 1 < H:
                        mask[i + 1, j] = True
                elif j + 1 < W:
                    mask[i, j + 1] = True
        heading += rng.normal(std=0.12)
        y += np.sin(heading)
        x += np.cos(heading)
    return mask


def _near_full(rng: Rng, r, dy, dx, disk) -> np.ndarray:
    # defects everywhere except one good blob, keeping >= 60% coverage
    rad = rng.uniform(0.2, 0.5)
    off_r, off_a = rng.uniform(0.0, 0.5), rng.uniform(0, 2 * np.pi)
    cy, cx = off_r * np.sin(off_a), off_r * np.cos(off_a)
    n_disk = disk.sum()
    while True:
        mask = disk & (np.hypot(dy - cy, dx - cx) > rad)
        if mask.sum() >= 0.6 * n_disk:
            return mask
        rad *= 0.9


def render_defect(kind: str, rng: Rng, H: int = 26, W: int = 26) -> np.ndarray:
    """Boolean defect mask of one topology, restricted to the wafer disk."""
    if kind not in CLASS_INDEX:
        raise ValueError(f"unknown defect kind {kind!r}")
    if H < 16 or W < 16:
        raise ValueError(f"grid must be at least 16x16, got {H}x{W}")
    for _ in range(_MAX_REDRAWS):
        mask = _render_once(kind, rng, H, W)
        if mask.sum() >= MIN_MASK_CELLS:
            return mask
    return mask


def check_kinds(kinds: Iterable[str]) -> tuple[str, ...]:
    kinds = set(kinds)
    for k in kinds:
        if k not in CLASS_INDEX:
            raise ValueError(f"unknown defect kind {k!r}")
    kinds = tuple(sorted(kinds, key=CLASS_INDEX.__getitem__))
    if not 1 <= len(kinds) <= 4:
        raise ValueError(f"a sample needs 1 to 4 defect kinds, got {len(kinds)}")
    if "Near_Full" in kinds and len(kinds) > 1:
        raise ValueError("Near_Full cannot be combined with other defects")
    return kinds


def label_vector(kinds: Iterable[str]) -> np.ndarray:
    label = np.zeros(C, dtype=np.uint8)
    for k in kinds:
        label[CLASS_INDEX[k]] = 1
    return label


def _finish(mask: np.ndarray, label: np.ndarray, rng: Rng, noise: float) -> WaferSample:
    H, W = mask.shape
    disk = disk_mask(H, W)
    grid = np.where(disk, 1, 0).astype(np.uint8)
    grid[mask] = 2
    if noise > 0:
        flip = (rng.random((H, W)) < noise) & disk
        grid[flip] = 3 - grid[flip]
    return WaferSample(grid, label)


def compose_sample(kinds: Iterable[str], rng: Rng, cfg: DatasetConfig) -> WaferSample:
    """Union of individually rendered masks, then symmetric good<->defect noise."""
    kinds = check_kinds(kinds)
    mask = np.zeros((cfg.H, cfg.W), dtype=bool)
    for k in kinds:
        mask |= render_defect(k, rng, cfg.H, cfg.W)
    return _finish(mask, label_vector(kinds), rng, cfg.noise)


def normal_sample(rng: Rng, cfg: DatasetConfig) -> WaferSample:
    return _finish(np.zeros((cfg.H, cfg.W), dtype=bool), np.zeros(C, dtype=np.uint8), rng, cfg.noise)


def generate_dataset(cfg: DatasetConfig) -> list[WaferSample]:
    """Samples in profile order; sample ``i`` draws from its own stream ``Rng(seed, i)``.

    An empty-tuple profile key produces defect-free ("normal") wafers.
    """
    out = []
    i = 0
    for kinds, count in cfg.profile.items():
        for _ in range(count):
            rng = Rng(cfg.seed, i)
            out.append(compose_sample(kinds, rng, cfg) if kinds else normal_sample(rng, cfg))
            i += 1
    return out


def split_dataset(samples: Sequence[WaferSample], sizes: Sequence[int], seed: int):
    """Shuffle with ``seed`` and cut consecutive, disjoint parts of the given sizes."""
    if sum(sizes) > len(samples):
        raise ValueError(f"split sizes {tuple(sizes)} exceed {len(samples)} samples")
    order = Rng(seed, 0x5EED).permutation(len(samples))
    parts, start = [], 0
    for n in sizes:
        parts.append([samples[i] for i in order[start:start + n]])
        start += n
    return parts


def sample_hash(s: WaferSample) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<HH", *s.grid.shape))
    h.update(s.grid.tobytes())
    h.update(s.label.tobytes())
    return h.hexdigest()


def stack(samples: Sequence[WaferSample]):
    """``(grids (N, H, W) uint8, labels (N, 8) float64)``."""
    grids = np.stack([s.grid for s in samples])
    labels = np.stack([s.label for s in samples]).astype(np.float64)
    return grids, labels


# --- profiles -------------------------------------------------------------

def load_profile_csv(path) -> dict[tuple[str, ...], int]:
    """Profile CSV with columns ``kinds,count``; kinds joined by ``+`` (empty = normal)."""
    profile = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            spec = row["kinds"].strip()
            kinds = tuple(k for k in spec.split("+") if k) if spec and spec != "normal" else ()
            if kinds:
                kinds = check_kinds(kinds)
            profile[kinds] = profile.get(kinds, 0) + int(row["count"])
    return profile


def write_manifest(path, samples: Sequence[WaferSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label_bits", "defect_count"])
        for i, s in enumerate(samples):
            w.writerow([i, "".join(str(int(b)) for b in s.label), s.n_defects])


# --- native format --------------------------------------------------------

def _pack_label(label: np.ndarray) -> int:
    return int(sum(int(b) << i for i, b in enumerate(label)))


def _unpack_label(byte: int) -> np.ndarray:
    return np.array([(byte >> i) & 1 for i in range(C)], dtype=np.uint8)


def save_native(path, samples: Sequence[WaferSample], H: int | None = None, W: int | None = None) -> None:
    """``WFR1`` file: u32 N, u16 H, u16 W, then H*W grid bytes + 1 label byte per sample.

    Label bit ``i`` (least significant first) is class ``CLASSES[i]``.
    """
    if samples:
        H, W = samples[0].grid.shape
    elif H is None or W is None:
        H, W = 0, 0
    buf = bytearray(NATIVE_MAGIC)
    buf += struct.pack("<IHH", len(samples), H, W)
    for s in samples:
        if s.grid.shape != (H, W):
            raise ValueError(f"grid shape {s.grid.shape} != ({H}, {W})")
        buf += s.grid.astype(np.uint8).tobytes()
        buf.append(_pack_label(s.label))
    Path(path).write_bytes(bytes(buf))


def load_native(path) -> list[WaferSample]:
    data = Path(path).read_bytes()
    if data[:4] != NATIVE_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {NATIVE_MAGIC!r}")
    if len(data) < 12:
        raise ValueError(f"{path}: truncated header")
    n, H, W = struct.unpack_from("<IHH", data, 4)
    rec = H * W + 1
    if len(data) != 12 + n * rec:
        raise ValueError(f"{path}: expected {12 + n * rec} bytes for {n} samples, got {len(data)}")
    out = []
    for i in range(n):
        off = 12 + i * rec
        grid = np.frombuffer(data, dtype=np.uint8, count=H * W, offset=off).reshape(H, W).copy()
        out.append(WaferSample(grid, _unpack_label(data[off + H * W])))
    return out


# --- MixedWM38-style archives ----------------------------------------------

class ArchiveError(ValueError):
    def __init__(self, record: str, offset: int, message: str):
        super().__init__(f"{record} @ byte {offset}: {message}")
        self.record = record
        self.offset = offset


_INT_KINDS = {"u1", "i1", "u2", "i2", "u4", "i4", "u8", "i8"}


def parse_npy(name: str, raw: bytes):
    """Decode one ``.npy`` record into ``(array, data_offset)``.

    Failures raise :class:`ArchiveError` with the byte offset of the fault.
    Only integer dtypes in C or Fortran order are accepted.
    """
    if raw[:6] != NPY_MAGIC:
        raise ArchiveError(name, 0, f"bad magic {raw[:6]!r}")
    if len(raw) < 10:
        raise ArchiveError(name, 6, "truncated version/header length")
    major = raw[6]
    if major == 1:
        (hlen,) = struct.unpack_from("<H", raw, 8)
        hstart = 10
    elif major in (2, 3):
        if len(raw) < 12:
            raise ArchiveError(name, 8, "truncated header length")
        (hlen,) = struct.unpack_from("<I", raw, 8)
        hstart = 12
    else:
        raise ArchiveError(name, 6, f"unsupported format version {major}.{raw[7]}")
    if hstart + hlen > len(raw):
        raise ArchiveError(name, hstart, f"header length {hlen} runs past end of record")
    try:
        header = ast.literal_eval(raw[hstart:hstart + hlen].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise ArchiveError(name, hstart, f"unparseable header dict ({exc})") from None
    if not isinstance(header, dict) or not {"descr", "fortran_order", "shape"} <= set(header):
        raise ArchiveError(name, hstart, "header must be a dict with descr, fortran_order, shape")
    descr = header["descr"]
    if not isinstance(descr, str) or descr[:1] not in "<|" or descr[1:] not in _INT_KINDS:
        raise ArchiveError(name, hstart, f"unsupported dtype {descr!r}")
    shape = tuple(header["shape"])
    dtype = np.dtype(descr)
    start = hstart + hlen
    count = int(np.prod(shape)) if shape else 1
    if len(raw) - start != count * dtype.itemsize:
        raise ArchiveError(name, start, f"expected {count * dtype.itemsize} data bytes, got {len(raw) - start}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    order = "F" if header["fortran_order"] else "C"
    return arr.reshape(shape, order=order), start


def load_archive(path) -> list[WaferSample]:
    """Read a zip holding ``arr_0`` (maps, N x H x W) and ``arr_1`` (labels, N x 8)."""
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise ArchiveError(str(path), 0, f"not a zip container ({exc})") from None
    with zf:
        names = {n.removesuffix(".npy"): n for n in zf.namelist()}
        recs = {}
        for key in ("arr_0", "arr_1"):
            if key not in names:
                raise ArchiveError(key, 0, "record missing from archive")
            recs[key] = parse_npy(key, zf.read(names[key]))
    (maps, maps_off), (labels, labels_off) = recs["arr_0"], recs["arr_1"]
    if maps.ndim != 3:
        raise ArchiveError("arr_0", 0, f"maps must be N x H x W, got shape {maps.shape}")
    if labels.ndim != 2 or labels.shape[1] != C:
        raise ArchiveError("arr_1", 0, f"label width must be {C}, got shape {labels.shape}")
    if labels.shape[0] != maps.shape[0]:
        raise ArchiveError("arr_1", 0, f"{labels.shape[0]} labels for {maps.shape[0]} maps")
    for key, arr, off, domain in (("arr_0", maps, maps_off, (0, 1, 2)),
                                  ("arr_1", labels, labels_off, (0, 1))):
        # np.isin on the stored (memory-order) buffer so offsets match the file
        flat = arr.reshape(-1, order="A")
        bad = np.flatnonzero(~np.isin(flat, domain))
        if bad.size:
            i = int(bad[0])
            raise ArchiveError(key, off + i * arr.dtype.itemsize,
                               f"value {int(flat[i])} outside {set(domain)}")
    return [WaferSample(m.astype(np.uint8), l.astype(np.uint8)) for m, l in zip(maps, labels)]


def save_archive(path, samples: Sequence[WaferSample]) -> None:
    maps = np.stack([s.grid for s in samples]).astype(np.uint8)
    labels = np.stack([s.label for s in samples]).astype(np.uint8)
    buf = io.BytesIO()
    np.savez(buf, maps, labels)
    Path(path).write_bytes(buf.getvalue())
