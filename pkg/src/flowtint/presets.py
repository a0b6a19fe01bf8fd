"""Parametric colour presets: hue rotation, lift/gain/gamma, saturation."""

from dataclasses import asdict, dataclass
import math

import numpy as np

from .errors import PresetError

LUMA = np.array([0.299, 0.587, 0.114])
# luminance weights of the standard hue-rotation matrix (SVG feColorMatrix)
_HUE_LUMA = np.array([0.213, 0.715, 0.072])


@dataclass(frozen=True)
class Preset:
    lift: tuple = (0.0, 0.0, 0.0)
    gain: tuple = (1.0, 1.0, 1.0)
    gamma: tuple = (1.0, 1.0, 1.0)
    saturation: float = 1.0
    hue: float = 0.0  # degrees

    def validate(self):
        values = [*self.lift, *self.gain, *self.gamma, self.saturation, self.hue]
        if not all(math.isfinite(v) for v in values):
            raise PresetError(f"non-finite preset parameter in {self}")
        if len(self.lift) != 3 or len(self.gain) != 3 or len(self.gamma) != 3:
            raise PresetError("lift, gain and gamma need one value per channel")
        if min(self.gain) <= 0 or min(self.gamma) <= 0:
            raise PresetError("gain and gamma must be positive")
        if self.saturation < 0:
            raise PresetError("saturation must be non-negative")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["lift"]), tuple(d["gain"]), tuple(d["gamma"]),
                   float(d["saturation"]), float(d["hue"]))


IDENTITY = Preset()


def hue_matrix(degrees: float) -> np.ndarray:
    """Luminance-preserving RGB hue rotation."""
    c, s = math.cos(math.radians(degrees)), math.sin(math.radians(degrees))
    lr, lg, lb = _HUE_LUMA
    return np.array([
        [lr + c * (1 - lr) - s * lr, lg - c * lg - s * lg, lb - c * lb + s * (1 - lb)],
        [lr - c * lr + s * 0.143, lg + c * (1 - lg) + s * 0.140, lb - c * lb - s * 0.283],
        [lr - c * lr - s * (1 - lr), lg - c * lg + s * lg, lb + c * (1 - lb) + s * lb],
    ])


def apply_preset(img: np.ndarray, p: Preset) -> np.ndarray:
    """Apply ``p`` to an H x W x 3 image in [0, 1].

    Stages run in a fixed order (hue, lift/gain/gamma, saturation) and are
    skipped when their parameters are neutral, so the identity preset
    returns the input bit for bit.
    """
    p.validate()
    x = np.asarray(img, dtype=np.float64)
    lift, gain, gamma = np.array(p.lift), np.array(p.gain), np.array(p.gamma)
    if p.hue != 0.0:
        x = x @ hue_matrix(p.hue).T
    if p.hue != 0.0 or np.any(lift != 0.0) or np.any(gain != 1.0):
        # the clamp also brings hue-rotated values back into range
        x = np.clip(gain * (x + lift), 0.0, 1.0)
    if np.any(gamma != 1.0):
        x = np.power(x, gamma)
    if p.saturation != 1.0:
        luma = x @ LUMA
        x = luma[..., None] + p.saturation * (x - luma[..., None])
    return np.clip(x, 0.0, 1.0)


@dataclass(frozen=True)
class PresetRanges:
    lift: tuple = (-0.1, 0.1)
    gain: tuple = (0.7, 1.3)
    gamma: tuple = (0.6, 1.6)
    saturation: tuple = (0.5, 1.5)
    hue: tuple = (-30.0, 30.0)


def random_preset(rng: np.random.Generator, ranges: PresetRanges = PresetRanges()) -> Preset:
    def u(lo_hi, n=None):
        return rng.uniform(*lo_hi, size=n)
    return Preset(tuple(float(v) for v in u(ranges.lift, 3)),
                  tuple(float(v) for v in u(ranges.gain, 3)),
                  tuple(float(v) for v in u(ranges.gamma, 3)),
                  float(u(ranges.saturation)), float(u(ranges.hue)))
