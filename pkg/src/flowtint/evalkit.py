"""Evaluation metrics and report files."""

import csv
from dataclasses import dataclass, field
import json
import math
from pathlib import Path

import numpy as np
import torch

from .condnet import ContextBatch, ConditioningContext
from .dataforge import luma
from .errors import DataError, DimensionError, SizingError
from .flow import euler_sample
from .plotting import plot_report
from .pool import load_png
from .presets import LUMA
from .reward import expected_score
from .rng import derive_seed

REPORT_SCHEMA = "flowtint-report-v1"
PSNR_CAP = 99.0
SUCCESS_THRESHOLD = 0.85
EVAL_STEPS = 28
# keeps near-flat regions from reducing to a comparison of quantization noise
CONTENT_EPS = 1e-3


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(pred, target) -> float:
    """10 log10(1 / MSE) in dB for [0, 1] images, capped at 99."""
    a, b = _pair(pred, target)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(pred, target, window: int = 8, stride: int = 4) -> float:
    """Mean SSIM over luma windows."""
    a, b = _pair(pred, target)
    ya, yb = (luma(a), luma(b)) if a.ndim == 3 else (a, b)
    h, w = ya.shape
    if h < window or w < window:
        raise SizingError(f"{h}x{w} image is smaller than one {window}x{window} window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for y in range(0, h - window + 1, stride):
        for x in range(0, w - window + 1, stride):
            p = ya[y:y + window, x:x + window]
            q = yb[y:y + window, x:x + window]
            mp, mq = p.mean(), q.mean()
            vp, vq = p.var(), q.var()
            cov = ((p - mp) * (q - mq)).mean()
            vals.append(((2 * mp * mq + c1) * (2 * cov + c2)) / ((mp * mp + mq * mq + c1) * (vp + vq + c2)))
    return float(np.mean(vals))


def content_features(img, cells: int = 4) -> np.ndarray:
    """Mean-centred grids of luma and of each RGB channel, one row per plane."""
    x = np.asarray(img, dtype=np.float64)
    planes = [x @ LUMA] + [x[..., k] for k in range(3)]
    g = np.stack([p.reshape(cells, p.shape[0] // cells, cells, p.shape[1] // cells).mean((1, 3)).ravel()
                  for p in planes])
    return g - g.mean(1, keepdims=True)


def content_similarity(a, b, cells: int = 4) -> float:
    """Best regularised cosine over the planes.

    A grade rescales channels unevenly and mixes them, so structure that is
    flat in luma can live in one channel; taking the best plane keeps the
    score colour-invariant while still dropping when content moves.
    """
    a, b = _pair(a, b)
    fa, fb = content_features(a, cells), content_features(b, cells)
    num = (fa * fb).sum(1) + CONTENT_EPS
    den = np.sqrt(((fa * fa).sum(1) + CONTENT_EPS) * ((fb * fb).sum(1) + CONTENT_EPS))
    return float((num / den).max())


def success(source, output, threshold: float = SUCCESS_THRESHOLD) -> bool:
    return content_similarity(source, output) > threshold


def tile_similarities(source, output, tile: int = 8) -> list[float]:
    a, b = _pair(source, output)
    h, w = a.shape[:2]
    if h % tile or w % tile:
        raise SizingError(f"{h}x{w} image does not tile into {tile}x{tile} blocks")
    return [content_similarity(a[y:y + tile, x:x + tile], b[y:y + tile, x:x + tile])
            for y in range(0, h, tile) for x in range(0, w, tile)]


def local_check(source, output, threshold: float = SUCCESS_THRESHOLD, tile: int = 8) -> bool:
    """True iff every tile keeps its content."""
    return all(s > threshold for s in tile_similarities(source, output, tile))


@dataclass
class EvalReport:
    rows: list
    aggregate: dict
    paired: bool
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"schema": REPORT_SCHEMA, "meta": self.meta, "rows": self.rows, "aggregate": self.aggregate}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @property
    def columns(self):
        cols = ["id"]
        if self.paired:
            cols += ["psnr", "ssim"]
        return cols + ["expected_score", "reward", "success", "local_ok"]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow(["" if row.get(c) is None else row[c] for c in self.columns])

    def write(self, out_dir, stem="report", figures=True):
        """Write ``<stem>.json``, ``<stem>.csv`` and, optionally, figures."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"report": out_dir / f"{stem}.json", "plot_data": out_dir / f"{stem}.csv"}
        paths["report"].write_text(self.to_json(), encoding="utf-8")
        self.to_csv(paths["plot_data"])
        if figures:
            paths.update(plot_report(self, out_dir, stem))
        return paths

    @classmethod
    def read(cls, path) -> "EvalReport":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("schema") != REPORT_SCHEMA:
            raise DataError(f"unsupported report schema {doc.get('schema')!r}")
        agg = doc["aggregate"]
        return cls(doc["rows"], agg, "psnr" in agg["means"], doc.get("meta", {}))


def aggregate_rows(rows, paired: bool) -> dict:
    def mean(key):
        vals = [r[key] for r in rows if r.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    n = len(rows)
    agg = {"count": n, "means": {}}
    keys = (["psnr", "ssim"] if paired else []) + ["expected_score", "reward"]
    for k in keys:
        agg["means"][k] = mean(k)
    agg["success_ratio"] = sum(bool(r["success"]) for r in rows) / n if n else 0.0
    agg["local_ratio"] = sum(bool(r["local_ok"]) for r in rows) / n if n else 0.0
    agg["skipped"] = sum(1 for r in rows if r.get("skip_reason"))
    return agg


def score_to_reward(score: float, tokens) -> float:
    """Expected score rescaled to [0, 1] over the token range."""
    lo, hi = min(tokens), max(tokens)
    return (score - lo) / (hi - lo) if hi > lo else 0.0


def build_row(rid, source, output, reference, target, rater, threshold, paired, skip_reason=None):
    dist = rater.distribution(reference, output)
    score = expected_score(dist)
    row = {"id": rid}
    if paired:
        if target is None:
            row.update(psnr=None, ssim=None)
            skip_reason = skip_reason or "target missing"
        else:
            row.update(psnr=psnr(output, target), ssim=ssim(output, target))
    row.update(expected_score=score, reward=score_to_reward(score, dist.tokens),
               success=success(source, output, threshold), local_ok=local_check(source, output, threshold))
    if skip_reason:
        row["skip_reason"] = skip_reason
    return row


def generate(field, contexts, steps: int = EVAL_STEPS, seed: int = 0, chunk: int = 16):
    """Sample one output per context; the noise seed depends on the context id."""
    outs = []
    for i in range(0, len(contexts), chunk):
        part = contexts[i:i + chunk]
        ctx = ContextBatch.collate(part, field.cfg.max_prompt, field.dtype)
        seeds = [derive_seed(seed, "eval", c.context_id) for c in part]
        outs.extend(x.numpy().astype(np.float64) for x in euler_sample(field, ctx, steps, seed=seeds))
    return outs


def evaluate(manifest, field, rater, steps: int = EVAL_STEPS, seed: int = 0,
             threshold: float = SUCCESS_THRESHOLD, meta=None) -> EvalReport:
    """Sample every manifest record and score the outputs."""
    paired = manifest.paired
    contexts, images = [], []
    for rec in manifest.records:
        src = load_png(manifest.resolve(rec.source_path))
        ref = load_png(manifest.resolve(rec.reference_path))
        tgt, reason = None, None
        if paired:
            try:
                tgt = load_png(manifest.resolve(rec.target_path))
            except DataError as exc:
                reason = f"target unreadable: {exc}"
        contexts.append(ConditioningContext(src, ref, rec.prompt, rec.id))
        images.append((src, ref, tgt, reason))
    with torch.no_grad():
        outputs = generate(field, contexts, steps, seed)
    rows = [build_row(c.context_id, s, out, r, t, rater, threshold, paired, why)
            for c, (s, r, t, why), out in zip(contexts, images, outputs)]
    meta = dict(meta or {})
    meta.update(steps=steps, seed=seed, threshold=threshold, kind=manifest.kind)
    return EvalReport(rows, aggregate_rows(rows, paired), paired, meta)
