"""Paired multimodal slices: synthetic phantoms, PNG import, preprocessing, and the SlicePack file."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BACKGROUND = -1.0
FOREGROUND_EPS = 1e-6
MAGIC = b"SPK1"

# tissue classes of the phantom anatomy
TISSUES = ("background", "scalp", "csf", "gray", "white", "lesion", "edema")

# per-modality (low, high) intensity of each non-background tissue; the latent
# texture moves a pixel linearly between the two
DEFAULT_TABLES = {
    "T1": {"scalp": (0.40, 0.60), "csf": (-0.72, -0.56), "gray": (-0.12, 0.02), "white": (0.28, 0.42), "lesion": (-0.40, -0.24), "edema": (-0.24, -0.10)},
    "T2": {"scalp": (-0.08, 0.08), "csf": (0.70, 0.86), "gray": (0.14, 0.28), "white": (-0.30, -0.16), "lesion": (0.40, 0.56), "edema": (0.52, 0.66)},
    "T1ce": {"scalp": (-0.30, -0.14), "csf": (-0.42, -0.28), "gray": (0.02, 0.16), "white": (0.18, 0.32), "lesion": (0.70, 0.86), "edema": (-0.02, 0.12)},
    "FLAIR": {"scalp": (-0.26, -0.12), "csf": (-0.80, -0.66), "gray": (0.10, 0.24), "white": (-0.18, -0.04), "lesion": (0.32, 0.48), "edema": (0.66, 0.82)},
}


class SlicePackError(ValueError):
    pass


@dataclass
class SlicePack:
    """Co-registered slices ``images[K, M, H, W]`` in [-1, 1] with per-slice metadata."""

    modalities: list[str]
    subjects: list[str]
    slice_index: np.ndarray
    foreground: np.ndarray
    images: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.slice_index = np.asarray(self.slice_index, dtype=np.int64)
        self.foreground = np.asarray(self.foreground, dtype=np.int64)
        k = self.images.shape[0]
        if self.images.ndim != 4 or self.images.shape[1] != len(self.modalities):
            raise SlicePackError(f"images must be [K, M={len(self.modalities)}, H, W], got {self.images.shape}")
        if not (len(self.subjects) == k == len(self.slice_index) == len(self.foreground)):
            raise SlicePackError("per-slice metadata lengths disagree with the image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subject_ids(self) -> list[str]:
        return list(dict.fromkeys(self.subjects))

    def select(self, keep) -> SlicePack:
        idx = np.flatnonzero(keep) if np.asarray(keep).dtype == bool else np.asarray(keep, dtype=np.int64)
        return SlicePack(
            list(self.modalities),
            [self.subjects[i] for i in idx],
            self.slice_index[idx],
            self.foreground[idx],
            self.images[idx],
        )

    def recount_foreground(self) -> np.ndarray:
        return count_foreground(self.images)


def count_foreground(images: np.ndarray) -> np.ndarray:
    """Pixels above background in any modality, per slice."""
    mask = (images > BACKGROUND + FOREGROUND_EPS).any(axis=1)
    return mask.reshape(mask.shape[0], -1).sum(axis=1)


# SlicePack binary layout (all little-endian):
#   b"SPK1"
#   u32 M, then M x (u16 n, n bytes UTF-8 modality name)
#   u32 K, u32 H, u32 W
#   K x (u16 n, n bytes UTF-8 subject id, u32 slice index, u32 foreground count,
#        M*H*W x f64 planes in modality order, row-major)


def write_pack(pack: SlicePack, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", pack.n_modalities))
    for name in pack.modalities:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
    h, w = pack.size
    buf.write(struct.pack("<III", len(pack), h, w))
    for k in range(len(pack)):
        raw = pack.subjects[k].encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<II", int(pack.slice_index[k]), int(pack.foreground[k])))
        buf.write(np.ascontiguousarray(pack.images[k], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_pack(path) -> SlicePack:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise SlicePackError(f"{path}: not a SlicePack (magic {data[:4]!r})")
    pos = 4
    (m,) = struct.unpack_from("<I", data, pos)
    pos += 4
    names = []
    for _ in range(m):
        (n,) = struct.unpack_from("<H", data, pos)
        names.append(data[pos + 2:pos + 2 + n].decode())
        pos += 2 + n
    k, h, w = struct.unpack_from("<III", data, pos)
    pos += 12
    subjects, slices, counts = [], [], []
    images = np.empty((k, m, h, w))
    plane = m * h * w
    for i in range(k):
        (n,) = struct.unpack_from("<H", data, pos)
        subjects.append(data[pos + 2:pos + 2 + n].decode())
        pos += 2 + n
        s, c = struct.unpack_from("<II", data, pos)
        pos += 8
        slices.append(s)
        counts.append(c)
        images[i] = np.frombuffer(data, dtype="<f8", count=plane, offset=pos).reshape(m, h, w)
        pos += 8 * plane
    return SlicePack(names, subjects, np.array(slices), np.array(counts), images)


def write_manifest(pack: SlicePack, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "slice", "foreground"])
        for s, i, c in zip(pack.subjects, pack.slice_index, pack.foreground):
            writer.writerow([s, int(i), int(c)])


# preprocessing ----------------------------------------------------------------


def rescale_intensities(raw, lo: float, hi: float) -> np.ndarray:
    """Affine map sending ``[lo, hi]`` to ``[-1, 1]``; values outside are clamped."""
    if not hi > lo:
        raise ValueError(f"degenerate intensity range: lo={lo}, hi={hi}")
    raw = np.asarray(raw, dtype=np.float64)
    return np.clip((raw - lo) / (hi - lo) * 2.0 - 1.0, -1.0, 1.0)


def filter_slices(pack: SlicePack, min_pixels: int = 2000) -> SlicePack:
    """Keep slices with at least ``min_pixels`` foreground pixels, order preserved."""
    return pack.select(pack.foreground >= min_pixels)


def split_subjects(pack: SlicePack, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[SlicePack, SlicePack, SlicePack]:
    """Partition by subject (never by slice) into train/val/test packs."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions.tolist()}")
    ids = pack.subject_ids()
    n = len(ids)
    counts = np.floor(fractions * n + 1e-9).astype(int)
    # hand out the remainder to the largest fractional parts, train first on ties
    for i in np.argsort(-(fractions * n - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    if np.any((fractions > 0) & (counts == 0)):
        raise ValueError(f"{n} subjects are too few for fractions {fractions.tolist()}")
    order = np.random.default_rng(seed).permutation(n)
    groups = np.split(order, np.cumsum(counts)[:-1])
    subj = np.asarray(pack.subjects)
    out = []
    for g in groups:
        chosen = {ids[i] for i in g}
        out.append(pack.select(np.array([s in chosen for s in subj], dtype=bool)))
    return tuple(out)


# synthetic phantoms -------------------------------------------------------------


@dataclass
class PhantomSpec:
    seed: int = 0
    size: int = 64
    modalities: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_TABLES.items()})
    lesion_prob: float = 0.6
    ventricles: tuple[int, int] = (1, 2)
    noise_sigma: float = 0.02
    supersample: int = 2

    def validate(self) -> None:
        if self.size % 16 or self.size < 16:
            raise ValueError(f"image size must be a positive multiple of 16, got {self.size}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if len(self.modalities) < 2:
            raise ValueError("need at least two modalities")
        if not 0 <= self.lesion_prob <= 1:
            raise ValueError("lesion probability must lie in [0, 1]")
        lo, hi = self.ventricles
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid ventricle count range {self.ventricles}")
        for name, table in self.modalities.items():
            if set(table) != set(TISSUES[1:]):
                raise ValueError(f"modality {name}: table must cover tissues {TISSUES[1:]}")
            for tissue, (a, b) in table.items():
                if not -1.0 < a <= b <= 1.0:
                    raise ValueError(f"modality {name}, {tissue}: need -1 < low <= high <= 1, got ({a}, {b})")

    def distinct_tables(self) -> bool:
        tables = [tuple(sorted(t.items())) for t in self.modalities.values()]
        return len(set(tables)) == len(tables)


def _ellipse(xx, yy, cx, cy, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _texture(rng, xx, yy, n_waves=4):
    tex = np.zeros_like(xx)
    for _ in range(n_waves):
        freq = rng.uniform(1.0, 4.0)
        ang = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.cos(freq * np.pi * (xx * np.cos(ang) + yy * np.sin(ang)) + phase)
    return 0.5 + 0.5 * tex / n_waves  # in [0, 1]


def _subject_anatomy(rng, spec: PhantomSpec) -> dict:
    vlo, vhi = spec.ventricles
    return {
        "center": rng.uniform(-0.05, 0.05, size=2),
        "radii": (rng.uniform(0.90, 0.96), rng.uniform(0.78, 0.86)),
        "theta": rng.uniform(-0.2, 0.2),
        "skull": rng.uniform(0.80, 0.86),
        "cortex": rng.uniform(0.62, 0.72),
        "ventricles": [
            (rng.uniform(-0.25, 0.25), rng.uniform(-0.2, 0.2), rng.uniform(0.08, 0.18), rng.uniform(0.12, 0.28), rng.uniform(-0.5, 0.5))
            for _ in range(rng.integers(vlo, vhi + 1))
        ],
        "lesion": None
        if rng.uniform() >= spec.lesion_prob
        else {
            "pos": rng.uniform(-0.4, 0.4, size=2),
            "radius": rng.uniform(0.10, 0.22),
            "edema": rng.uniform(1.4, 1.9),
            "z": rng.uniform(-0.25, 0.25),
            "extent": rng.uniform(0.15, 0.3),
        },
    }


def _render_labels(anat: dict, z: float, xx, yy, rng):
    """Tissue label map and latent texture for one axial position ``z`` in [-0.5, 0.5]."""
    shrink = max(0.0, 1.0 - (abs(z) / 0.56) ** 3) ** 0.5
    labels = np.zeros(xx.shape, dtype=np.int64)
    if shrink <= 0:
        return labels, np.zeros_like(xx)
    cx, cy = anat["center"]
    ra, rb = anat["radii"]
    ra, rb = ra * shrink, rb * shrink
    th = anat["theta"]
    labels[_ellipse(xx, yy, cx, cy, ra, rb, th)] = TISSUES.index("scalp")
    sk = anat["skull"]
    labels[_ellipse(xx, yy, cx, cy, ra * sk, rb * sk, th)] = TISSUES.index("csf")
    gm = sk - 0.05
    labels[_ellipse(xx, yy, cx, cy, ra * gm, rb * gm, th)] = TISSUES.index("gray")
    wm = anat["cortex"]
    labels[_ellipse(xx, yy, cx, cy, ra * wm, rb * wm, th)] = TISSUES.index("white")
    for vx, vy, va, vb, vt in anat["ventricles"]:
        vshrink = max(0.0, 1.0 - (z / 0.35) ** 2)
        if vshrink > 0.05:
            labels[_ellipse(xx, yy, cx + vx * ra, cy + vy * rb, va * ra * vshrink, vb * rb * vshrink, th + vt)] = TISSUES.index("csf")
    les = anat["lesion"]
    if les is not None and abs(z - les["z"]) < les["extent"]:
        lshrink = np.sqrt(1.0 - ((z - les["z"]) / les["extent"]) ** 2)
        lx, ly = cx + les["pos"][0] * ra, cy + les["pos"][1] * rb
        r = les["radius"] * lshrink
        inside_brain = labels >= TISSUES.index("gray")
        labels[_ellipse(xx, yy, lx, ly, r * les["edema"], r * les["edema"] * 0.85, th) & inside_brain] = TISSUES.index("edema")
        labels[_ellipse(xx, yy, lx, ly, r, r * 0.85, th) & inside_brain] = TISSUES.index("lesion")
    return labels, _texture(rng, xx, yy)


def generate_phantom(spec: PhantomSpec | None = None, n_subjects: int = 40, slices_per_subject: int = 16) -> SlicePack:
    """Render ``n_subjects x slices_per_subject`` co-registered multimodal slices.

    Each slice is one anatomy (nested ellipses with tissue labels plus a shared
    smooth texture) rendered through every modality's transfer table, then
    area-averaged from the supersampled grid and perturbed with Gaussian noise
    inside the head.
    """
    spec = spec or PhantomSpec()
    spec.validate()
    if n_subjects < 1 or slices_per_subject < 1:
        raise ValueError("need at least one subject and one slice per subject")
    names = list(spec.modalities)
    ss = spec.supersample
    n = spec.size * ss
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    xx, yy = np.meshgrid(coords, coords)
    lows = np.array([[spec.modalities[m][t][0] for t in TISSUES[1:]] for m in names])
    highs = np.array([[spec.modalities[m][t][1] for t in TISSUES[1:]] for m in names])

    images, subjects, slices = [], [], []
    for s in range(n_subjects):
        rng = np.random.default_rng([spec.seed, s])
        anat = _subject_anatomy(rng, spec)
        for k in range(slices_per_subject):
            z = (k + 0.5) / slices_per_subject - 0.5
            labels, tex = _render_labels(anat, z, xx, yy, rng)
            fine = np.full((len(names), n, n), BACKGROUND)
            fg = labels > 0
            cls = labels[fg] - 1
            t = tex[fg]
            fine[:, fg] = lows[:, cls] + (highs[:, cls] - lows[:, cls]) * t
            coarse = fine.reshape(len(names), spec.size, ss, spec.size, ss).mean(axis=(2, 4))
            head = coarse > BACKGROUND + FOREGROUND_EPS
            if spec.noise_sigma > 0:
                noise = rng.normal(0.0, spec.noise_sigma, size=coarse.shape)
                coarse = np.where(head, np.clip(coarse + noise, -1.0 + 1e-3, 1.0), BACKGROUND)
            images.append(coarse)
            subjects.append(f"sub{s:03d}")
            slices.append(k)
    images = np.stack(images)
    return SlicePack(names, subjects, np.array(slices), count_foreground(images), images)


# PNG import -------------------------------------------------------------------


def import_pngs(root, modalities: list[str], lo: float | None = None, hi: float | None = None, clip_percentile: float | None = None) -> SlicePack:
    """Read ``root/<subject>/<slice>_<modality>.png`` into a pack.

    Without explicit ``lo``/``hi`` each subject-modality volume is scaled by its
    own min/max (optionally after clipping at ``clip_percentile`` and its mirror).
    """
    from PIL import Image

    root = Path(root)
    subjects_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subjects_dirs:
        raise SlicePackError(f"{root}: no subject directories")
    out_imgs, out_subj, out_idx = [], [], []
    shape = None
    for sdir in subjects_dirs:
        slice_ids = sorted({p.name.split("_", 1)[0] for p in sdir.glob("*.png")}, key=_natural)
        vols = {m: [] for m in modalities}
        for sid in slice_ids:
            for m in modalities:
                path = sdir / f"{sid}_{m}.png"
                if not path.exists():
                    raise SlicePackError(f"missing modality file: {path}")
                arr = np.asarray(Image.open(path), dtype=np.float64)
                if arr.ndim != 2:
                    raise SlicePackError(f"{path}: expected a grayscale image, got shape {arr.shape}")
                if shape is None:
                    shape = arr.shape
                elif arr.shape != shape:
                    raise SlicePackError(f"{path}: size {arr.shape} differs from {shape}")
                vols[m].append(arr)
        if not slice_ids:
            continue
        scaled = []
        for m in modalities:
            vol = np.stack(vols[m])
            v_lo, v_hi = lo, hi
            if v_lo is None or v_hi is None:
                if clip_percentile is not None:
                    a, b = np.percentile(vol, [100 - clip_percentile, clip_percentile])
                else:
                    a, b = vol.min(), vol.max()
                v_lo = a if lo is None else lo
                v_hi = b if hi is None else hi
                if v_hi <= v_lo:
                    v_hi = v_lo + 1.0
            scaled.append(rescale_intensities(vol, v_lo, v_hi))
        block = np.stack(scaled, axis=1)
        for sid, img in zip(slice_ids, block):
            out_imgs.append(img)
            out_subj.append(sdir.name)
            out_idx.append(int(sid) if sid.isdigit() else len(out_idx))
    images = np.stack(out_imgs)
    return SlicePack(list(modalities), out_subj, np.array(out_idx), count_foreground(images), images)


def _natural(s: str):
    return (0, int(s)) if s.isdigit() else (1, s)
