"""Toy-scale dataset synthesis.

Cold-start data are quadruplets (source, reference, target, prompt): two
nearby crops of one pool image play the part of two frames of a shot, and
the same catalogue preset grades the first crop into the target and the
second into the reference.  RL data are unpaired (source, reference,
prompt) tuples found by embedding retrieval across the pool.
"""

from dataclasses import asdict, dataclass, field, fields
import json
import logging
from pathlib import Path

import numpy as np

from .condnet import DEFAULT_PROMPT
from .errors import DataError, EmptyManifestError, SizingError, SplitError
from .pool import crop_pair, load_png, load_pool_dir, quantize, save_png
from .presets import LUMA, Preset, PresetRanges, apply_preset, random_preset
from .rng import numpy_rng

log = logging.getLogger(__name__)

SCHEMA = "flowtint-manifest-v1"
COLD_START_N = 3200
COLD_START_EVAL = 50
MISMATCH_RATIO = 200 / 3200
RL_N = 1500
RL_EVAL = 150
EMBED_DIM = 64


@dataclass
class QuadrupletRecord:
    id: str
    source_path: str
    reference_path: str
    target_path: str
    prompt: str
    preset_id: int
    preset: dict
    augmented: bool = False


@dataclass
class UnpairedRecord:
    id: str
    source_path: str
    reference_path: str
    prompt: str
    retrieval_similarity: float
    source_index: int = -1
    reference_index: int = -1


_RECORD_TYPES = {"cold-start": QuadrupletRecord, "rl": UnpairedRecord}


@dataclass
class DatasetManifest:
    kind: str
    records: list = field(default_factory=list)
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.kind not in _RECORD_TYPES:
            raise DataError(f"unknown manifest kind {self.kind!r}")
        self.base_dir = Path(self.base_dir)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return (isinstance(other, DatasetManifest) and self.kind == other.kind
                and self.records == other.records)

    @property
    def paired(self) -> bool:
        return self.kind == "cold-start"

    def resolve(self, rel) -> Path:
        return self.base_dir / rel

    def load_images(self, rec):
        """Return (source, reference, target-or-None) as float arrays."""
        src = load_png(self.resolve(rec.source_path))
        ref = load_png(self.resolve(rec.reference_path))
        tgt = load_png(self.resolve(rec.target_path)) if getattr(rec, "target_path", None) else None
        return src, ref, tgt

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"schema": SCHEMA, "kind": self.kind}, sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        return lines

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
        return path

    @classmethod
    def parse(cls, lines, base_dir=Path(".")):
        lines = [ln for ln in lines if ln.strip()]
        if not lines:
            raise DataError("empty manifest")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest header is not JSON: {exc}") from exc
        if header.get("schema") != SCHEMA:
            raise DataError(f"unsupported manifest schema {header.get('schema')!r}")
        kind = header.get("kind", "cold-start")
        rtype = _RECORD_TYPES.get(kind)
        if rtype is None:
            raise DataError(f"unknown manifest kind {kind!r}")
        names = {f.name for f in fields(rtype)}
        records = []
        for n, ln in enumerate(lines[1:], start=2):
            try:
                obj = json.loads(ln)
                records.append(rtype(**{k: v for k, v in obj.items() if k in names}))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"bad manifest record on line {n}: {exc}") from exc
        return cls(kind, records, base_dir)

    @classmethod
    def read(cls, path):
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        return cls.parse(text.splitlines(), path.parent)


def preset_catalog(seed: int, size: int = 8, ranges: PresetRanges = PresetRanges()) -> list[Preset]:
    """The fixed library of presets records are graded with."""
    return [random_preset(numpy_rng(seed, "preset-catalog", k), ranges) for k in range(size)]


def insert_shape(img: np.ndarray, rng: np.random.Generator, area=(0.05, 0.15)) -> np.ndarray:
    """Paint one solid rectangle or ellipse covering ``area`` of the image."""
    h, w = img.shape[:2]
    out = img.copy()
    color = rng.uniform(0.0, 1.0, 3)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(200):
        frac = rng.uniform(*area)
        aspect = rng.uniform(0.6, 1.6)
        if rng.random() < 0.5:
            sh = max(1, int(round(np.sqrt(frac * h * w * aspect))))
            sw = max(1, int(round(frac * h * w / sh)))
            if sh > h or sw > w:
                continue
            y0, x0 = rng.integers(0, h - sh + 1), rng.integers(0, w - sw + 1)
            mask = (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
        else:
            ry = np.sqrt(frac * h * w * aspect / np.pi)
            rx = frac * h * w / (np.pi * ry)
            cy, cx = rng.uniform(ry, h - ry), rng.uniform(rx, w - rx)
            mask = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
        got = mask.mean()
        if area[0] <= got <= area[1]:
            out[mask] = color
            return out
    raise SizingError(f"cannot fit a shape covering {area} of a {h}x{w} image")


def _pool_images(pool):
    if isinstance(pool, (str, Path)):
        return load_pool_dir(pool)
    pool = list(pool)
    if not pool:
        raise DataError("image pool is empty")
    return pool


def synth_cold_start(pool, n: int = COLD_START_N, mismatch_ratio: float = MISMATCH_RATIO,
                     seed: int = 0, out_dir=".", size: int = 16, shift=(2, 4),
                     n_presets: int = 8, ranges: PresetRanges = PresetRanges(),
                     prompt: str = DEFAULT_PROMPT) -> DatasetManifest:
    """Write ``n`` quadruplets under ``out_dir`` and return their manifest.

    Every record is derived from ``(seed, index)`` only.  Exactly
    ``round(n * mismatch_ratio)`` records, chosen by a seeded permutation,
    get a foreign object painted into the reference.
    """
    if n < 1:
        raise DataError("n must be positive")
    images = _pool_images(pool)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    catalog = preset_catalog(seed, n_presets, ranges)
    n_aug = int(round(n * mismatch_ratio))
    augmented = set(numpy_rng(seed, "augment-pick").permutation(n)[:n_aug].tolist())
    records = []
    for i in range(n):
        rng = numpy_rng(seed, "quad", i)
        base = images[int(rng.integers(len(images)))]
        crop_s, crop_r = crop_pair(base, size, rng, shift)
        pid = int(rng.integers(n_presets))
        preset = catalog[pid]
        src = quantize(crop_s)
        tgt = quantize(apply_preset(src, preset))
        ref = quantize(apply_preset(quantize(crop_r), preset))
        if i in augmented:
            ref = quantize(insert_shape(ref, rng))
        rid = f"q{i:05d}"
        paths = {k: f"images/{rid}_{k}.png" for k in ("src", "ref", "tgt")}
        save_png(src, out_dir / paths["src"])
        save_png(ref, out_dir / paths["ref"])
        save_png(tgt, out_dir / paths["tgt"])
        records.append(QuadrupletRecord(rid, paths["src"], paths["ref"], paths["tgt"], prompt,
                                        pid, preset.to_dict(), i in augmented))
    return DatasetManifest("cold-start", records, out_dir)


def verify_quadruplet(manifest: DatasetManifest, rec: QuadrupletRecord) -> bool:
    """Recompute the target from the stored source and preset."""
    src, _, tgt = manifest.load_images(rec)
    return bool(np.array_equal(quantize(apply_preset(src, Preset.from_dict(rec.preset))), tgt))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def luma(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ LUMA


def luma_grid(img: np.ndarray, cells: int = 4) -> np.ndarray:
    """Mean luma over a ``cells`` x ``cells`` grid, flattened row-major."""
    y = luma(img)
    h, w = y.shape
    if h % cells or w % cells:
        raise SizingError(f"{h}x{w} image does not divide into a {cells}x{cells} grid")
    return y.reshape(cells, h // cells, cells, w // cells).mean(axis=(1, 3)).reshape(-1)


def color_histogram(img: np.ndarray, bins: int = 16) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    idx = np.clip((x * bins).astype(int), 0, bins - 1)
    hist = [np.bincount(idx[..., c].ravel(), minlength=bins) for c in range(3)]
    return np.concatenate(hist).astype(np.float64) / (x.shape[0] * x.shape[1])


def embed(img: np.ndarray) -> np.ndarray:
    """64-d retrieval feature: 48 colour-histogram bins + 4x4 luma grid.

    Each half is scaled to unit length before the concatenation is
    normalised, so colour and layout weigh the same.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected an HxWx3 image, got shape {img.shape}")
    return _unit(np.concatenate([_unit(color_histogram(img)), _unit(luma_grid(img))]))


def retrieve_pairs(pool, n: int = RL_N, seed: int = 0, out_dir=".", size: int = 16,
                   band=(0.6, 0.95), prompt: str = DEFAULT_PROMPT) -> DatasetManifest:
    """Pair references with related-but-distinct sources from the same pool.

    Each pool image contributes its centre crop, so identical pool images
    give identical crops.  References are visited in seeded order; a reference takes the most similar other crop whose
    cosine similarity lies inside ``band``.  References with no candidate
    are skipped (logged).  Stops after ``n`` records.
    """
    images = _pool_images(pool)
    if len(images) < 2:
        raise DataError("retrieval needs at least two pool images")
    lo, hi = band
    crops = []
    for i, img in enumerate(images):
        h, w = img.shape[:2]
        if size > h or size > w:
            raise SizingError(f"crop {size} exceeds pool image {i} ({h}x{w})")
        y, x = (h - size) // 2, (w - size) // 2
        crops.append(quantize(img[y:y + size, x:x + size]))
    emb = np.stack([embed(c) for c in crops])
    sims = emb @ emb.T
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for ref_idx in numpy_rng(seed, "rl-order").permutation(len(images)).tolist():
        if len(records) >= n:
            break
        row = sims[ref_idx].copy()
        row[ref_idx] = -np.inf
        ok = (row >= lo) & (row <= hi)
        if not ok.any():
            log.info("reference %d skipped: no candidate with similarity in [%g, %g]", ref_idx, lo, hi)
            continue
        cand = np.where(ok, row, -np.inf)
        src_idx = int(np.argmax(cand))
        rid = f"u{len(records):05d}"
        sp, rp = f"images/{rid}_src.png", f"images/{rid}_ref.png"
        save_png(crops[src_idx], out_dir / sp)
        save_png(crops[ref_idx], out_dir / rp)
        records.append(UnpairedRecord(rid, sp, rp, prompt, float(round(row[src_idx], 12)),
                                      src_idx, ref_idx))
    if not records:
        raise EmptyManifestError(f"no reference found a source with similarity in [{lo}, {hi}]")
    if len(records) < n:
        log.warning("retrieval produced %d of %d requested records", len(records), n)
    return DatasetManifest("rl", records, out_dir)


def split_eval(manifest: DatasetManifest, k: int, seed: int = 0):
    """Seeded (train, eval) partition with ``k`` evaluation records."""
    if not 0 <= k < len(manifest):
        raise SplitError(f"cannot hold out {k} of {len(manifest)} records")
    chosen = set(numpy_rng(seed, "split").permutation(len(manifest))[:k].tolist())
    train = [r for i, r in enumerate(manifest.records) if i not in chosen]
    held = [r for i, r in enumerate(manifest.records) if i in chosen]
    return (DatasetManifest(manifest.kind, train, manifest.base_dir),
            DatasetManifest(manifest.kind, held, manifest.base_dir))
