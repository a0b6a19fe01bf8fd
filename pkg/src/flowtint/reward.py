"""Raw scoring and hybrid group normalization.

Online samples are scored by a rater that emits a distribution over a small
set of score tokens; the raw reward is that distribution's expectation.
Offline anchors carry a fixed human score.  Both kinds are standardized
together inside their rollout group.
"""

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path

import numpy as np

from .errors import (ConfigurationError, DataError, DimensionError, GroupSizeError,
                     MissingAnchorsError, ScoringError)
from .pool import load_png, save_png
from .presets import LUMA

log = logging.getLogger(__name__)

SCORE_TOKENS = (1, 2, 3, 4, 5)
ONLINE, OFFLINE = "online", "offline"

# band centre of each score token for the proxy rater, best token first.
# Calibrated on the 8-image fixture so an identical pair scores >= 4.9 and a
# channel-inverted reference scores <= 2.0.
BAND_CENTERS = {5: 0.0, 4: 0.15, 3: 0.23, 2: 0.3, 1: 0.37, 0: 0.45}
SHARPNESS = 20.0


@dataclass(frozen=True)
class ScoreDistribution:
    tokens: tuple
    probs: tuple

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise ConfigurationError("score token set is empty")
        if len(self.tokens) != len(self.probs):
            raise DimensionError("one probability per score token is required")
        p = np.asarray(self.probs, dtype=np.float64)
        if (p < 0).any() or not np.isfinite(p).all() or abs(p.sum() - 1.0) > 1e-9:
            raise DataError(f"not a probability vector: {self.probs}")

    @classmethod
    def from_logits(cls, logits, tokens=SCORE_TOKENS):
        z = np.asarray(logits, dtype=np.float64)
        if z.shape != (len(tokens),):
            raise DimensionError(f"expected {len(tokens)} logits, got shape {z.shape}")
        if not np.isfinite(z).all():
            raise DataError("logits must be finite")
        e = np.exp(z - z.max())
        return cls(tuple(tokens), tuple((e / e.sum()).tolist()))

    @classmethod
    def delta(cls, value, tokens=SCORE_TOKENS):
        if value not in tokens:
            raise DataError(f"score {value!r} is not one of the tokens {tuple(tokens)}")
        return cls(tuple(tokens), tuple(1.0 if k == value else 0.0 for k in tokens))


def expected_score(dist: ScoreDistribution) -> float:
    """sum_k w(k) p(k): the probability-weighted score."""
    if len(dist.tokens) == 0:
        raise ConfigurationError("score token set is empty")
    return float(sum(w * p for w, p in zip(dist.tokens, dist.probs)))


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or a.shape[-1] != 3:
        raise DimensionError(f"image shapes differ or are not HxWx3: {a.shape} vs {b.shape}")
    return a, b


def luma_histogram(img: np.ndarray, bins: int = 8) -> np.ndarray:
    y = np.clip(img @ LUMA, 0.0, 1.0)
    idx = np.minimum((y * bins).astype(int), bins - 1)
    return np.bincount(idx.ravel(), minlength=bins) / idx.size


def color_distance(reference, prediction) -> float:
    """Mean of tone, saturation and brightness-distribution distances."""
    a, b = _check_pair(reference, prediction)
    d_tone = float(np.linalg.norm(a.reshape(-1, 3).mean(0) - b.reshape(-1, 3).mean(0)))
    sat_a = (a.max(-1) - a.min(-1)).mean()
    sat_b = (b.max(-1) - b.min(-1)).mean()
    d_sat = float(abs(sat_a - sat_b))
    d_bright = float(np.abs(luma_histogram(a) - luma_histogram(b)).sum())
    return (d_tone + d_sat + d_bright) / 3.0


def proxy_score(reference, prediction, tokens=SCORE_TOKENS,
                centers=BAND_CENTERS, sharpness=SHARPNESS) -> ScoreDistribution:
    """Rubric stand-in: logits peak at the token whose band contains the distance."""
    d = color_distance(reference, prediction)
    missing = [k for k in tokens if k not in centers]
    if missing:
        raise ConfigurationError(f"no band centre for score tokens {missing}")
    return ScoreDistribution.from_logits([-sharpness * abs(d - centers[k]) for k in tokens], tokens)


class ProxyRater:
    """Deterministic in-process rater."""

    def __init__(self, tokens=SCORE_TOKENS):
        self.tokens = tuple(tokens)

    def distribution(self, reference, prediction) -> ScoreDistribution:
        return proxy_score(reference, prediction, self.tokens)

    def __call__(self, reference, prediction) -> float:
        return expected_score(self.distribution(reference, prediction))


@dataclass
class ScoredSample:
    image: np.ndarray
    origin: str = ONLINE
    raw_score: float = float("nan")
    reward: float = float("nan")
    note: str = ""


@dataclass
class RolloutGroup:
    context_id: str
    members: list = field(default_factory=list)
    mu: float = float("nan")
    sigma: float = float("nan")

    @property
    def raw_scores(self):
        return [m.raw_score for m in self.members]

    @property
    def rewards(self):
        return [m.reward for m in self.members]


def normalized_rewards(raw) -> tuple[list[float], float, float]:
    """0.5 * clip((s - mu) / sigma, -1, 1) + 0.5 with population sigma.

    A zero-spread group maps every member to the neutral reward 0.5.
    """
    s = np.asarray(raw, dtype=np.float64)
    if s.size < 2:
        raise GroupSizeError(f"a group needs at least 2 members, got {s.size}")
    if not np.isfinite(s).all():
        raise DataError("raw scores must be finite")
    # test spread on the raw values: a rounded mean can leave a tiny sigma
    if bool((s == s[0]).all()):
        return [0.5] * s.size, float(s[0]), 0.0
    # offsets from the first member are exact for grid-valued scores, so a
    # common shift of the group cannot change the rounding downstream
    d = s - s[0]
    c = d - d.mean()
    sigma = float(np.sqrt((c ** 2).mean()))
    r = 0.5 * np.clip(c / sigma, -1.0, 1.0) + 0.5
    return r.tolist(), float(s[0] + d.mean()), sigma


def normalize_group(group: RolloutGroup) -> RolloutGroup:
    rewards, group.mu, group.sigma = normalized_rewards(group.raw_scores)
    for m, r in zip(group.members, rewards):
        m.reward = r
    return group


@dataclass
class OfflineAnchor:
    context_id: str
    image: np.ndarray
    human_score: float
    note: str = ""

    def check(self, tokens=SCORE_TOKENS):
        if not min(tokens) <= self.human_score <= max(tokens):
            raise DataError(f"anchor score {self.human_score} outside [{min(tokens)}, {max(tokens)}]")
        return self


def score_group(group: RolloutGroup, reference, rater, anchors=(), tokens=SCORE_TOKENS) -> RolloutGroup:
    """Score online members with ``rater``, append anchors verbatim, normalize."""
    for i, m in enumerate(group.members):
        if m.origin != ONLINE:
            continue
        try:
            m.raw_score = float(rater(reference, m.image))
        except ScoringError as exc:
            exc.member = i
            raise
        if not math.isfinite(m.raw_score):
            raise ScoringError(f"rater returned {m.raw_score}", member=i)
    for a in anchors:
        if a.context_id != group.context_id:
            raise DataError(f"anchor for {a.context_id!r} offered to group {group.context_id!r}")
        a.check(tokens)
        group.members.append(ScoredSample(np.asarray(a.image), OFFLINE, float(a.human_score), note=a.note))
    return normalize_group(group)


class AnchorStore:
    """Offline anchors keyed by context id, backed by a JSONL file.

    Each line is ``{"context_id", "image", "human_score", "note"}`` with the
    image given as a PNG path relative to the store file.
    """

    def __init__(self, anchors=(), base_dir=Path(".")):
        self.base_dir = Path(base_dir)
        self._by_context: dict[str, list[OfflineAnchor]] = {}
        for a in anchors:
            self.add(a)

    def add(self, anchor: OfflineAnchor):
        self._by_context.setdefault(anchor.context_id, []).append(anchor)

    def get(self, context_id: str, count: int, strict: bool = True) -> list[OfflineAnchor]:
        found = self._by_context.get(context_id, [])
        if len(found) < count:
            msg = f"context {context_id!r} has {len(found)} anchors, {count} required"
            if strict:
                raise MissingAnchorsError(msg)
            log.warning("%s; continuing online-only", msg)
            return []
        return found[:count]

    def __len__(self):
        return sum(len(v) for v in self._by_context.values())

    def __iter__(self):
        for ctx in sorted(self._by_context):
            yield from self._by_context[ctx]

    def write(self, path, image_dir="anchors"):
        path = Path(path)
        (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
        lines = []
        counts: dict[str, int] = {}
        for a in self:
            k = counts[a.context_id] = counts.get(a.context_id, -1) + 1
            rel = f"{image_dir}/{a.context_id}_{k}.png"
            save_png(a.image, path.parent / rel)
            lines.append(json.dumps({"context_id": a.context_id, "image": rel,
                                     "human_score": a.human_score, "note": a.note}, sort_keys=True))
        path.write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        store = cls(base_dir=path.parent)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read anchor store {path}: {exc}") from exc
        for n, ln in enumerate(lines, start=1):
            if not ln.strip():
                continue
            try:
                obj = json.loads(ln)
                store.add(OfflineAnchor(obj["context_id"], load_png(path.parent / obj["image"]),
                                        float(obj["human_score"]), obj.get("note", "")))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"bad anchor on line {n} of {path}: {exc}") from exc
        return store
