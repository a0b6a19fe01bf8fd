"""Run configuration: one declarative schema drives defaults, file
validation, CLI flags and help text.

Precedence is command-line flag > FLOWTINT_SEED (seed only) > config file >
default.
"""

from dataclasses import dataclass
import json
import os
from pathlib import Path

from .condnet import DEFAULT_PROMPT
from .errors import ConfigurationError

SEED_ENV = "FLOWTINT_SEED"


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    name: str
    default: object
    type: type
    help: str
    choices: tuple = ()

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")

    def coerce(self, value):
        if value is None:
            return None
        try:
            if self.type is bool:
                out = parse_bool(value)
            elif self.type is float and isinstance(value, bool):
                raise ValueError("boolean given for a number")
            elif self.type is int and (isinstance(value, bool) or
                                       (isinstance(value, float) and not value.is_integer())):
                raise ValueError("not an integer")
            else:
                out = self.type(value)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{self.name}: {exc}") from exc
        if self.choices and out not in self.choices:
            raise ConfigurationError(f"{self.name}: {out!r} not one of {self.choices}")
        return out


KEYS = (
    Key("seed", 0, int, "master seed for every random draw"),
    # data synthesis
    Key("n", None, int, "records to synthesize (default 3200 cold-start, 1500 rl)"),
    Key("eval", None, int, "records held out for evaluation (default 50 cold-start, 150 rl)"),
    Key("pool_dir", None, str, "directory of pool images (default: procedural pool)"),
    Key("pool_size", None, int, "procedural pool size (default n for cold-start, 2n for rl)"),
    Key("pool_image_size", 32, int, "side of procedural pool images"),
    Key("image_size", 16, int, "side of training images"),
    Key("mismatch_ratio", 0.0625, float, "fraction of cold-start references given a foreign object"),
    Key("n_presets", 8, int, "size of the preset catalogue"),
    Key("crop_shift_min", 2, int, "smallest displacement between the two crops, pixels"),
    Key("crop_shift_max", 4, int, "largest displacement between the two crops, pixels"),
    Key("lift_max", 0.1, float, "presets draw lift from [-lift_max, lift_max]"),
    Key("gain_min", 0.7, float, "lower bound of preset gain"),
    Key("gain_max", 1.3, float, "upper bound of preset gain"),
    Key("gamma_min", 0.6, float, "lower bound of preset gamma"),
    Key("gamma_max", 1.6, float, "upper bound of preset gamma"),
    Key("saturation_min", 0.5, float, "lower bound of preset saturation"),
    Key("saturation_max", 1.5, float, "upper bound of preset saturation"),
    Key("hue_max", 30.0, float, "presets draw hue rotation from [-hue_max, hue_max] degrees"),
    Key("tau_lo", 0.6, float, "lowest retrieval similarity accepted"),
    Key("tau_hi", 0.95, float, "highest retrieval similarity accepted"),
    Key("prompt", DEFAULT_PROMPT, str, "task phrase stored with every record"),
    # network and base
    Key("patch", 2, int, "patch side of the velocity network"),
    Key("width", 64, int, "token width of the velocity network"),
    Key("base_steps", 3000, int, "Adam steps fitting the frozen base"),
    Key("base_pool", 512, int, "procedural images used to fit the base"),
    Key("base_lr", 1e-3, float, "Adam learning rate for the base"),
    Key("base_task", "copy", str, "base target: the source crop (copy) or an unrelated crop (prior)",
        ("copy", "prior")),
    # cold start
    Key("cold_steps", 10000, int, "cold-start gradient steps"),
    Key("cold_batch", 8, int, "cold-start batch size"),
    Key("cold_lr", 1.0, float, "cold-start gradient-descent step size"),
    Key("cold_clip", 0.3, float, "cold-start global gradient-norm cap (0 disables)"),
    Key("cold_augment", True, bool, "random flips and quarter turns of whole quadruplets"),
    Key("cold_shuffle_ref", 0.5, float, "chance of an extra flip or quarter turn of the reference alone"),
    Key("rank", 4, int, "adapter rank"),
    Key("alpha", 8.0, float, "adapter scale numerator (scale = alpha / rank)"),
    # rl
    Key("rounds", 300, int, "RL rounds"),
    Key("beta", 0.5, float, "implicit-policy mixing weight"),
    Key("g_online", 9, int, "online rollouts per group"),
    Key("g_offline", 2, int, "offline anchors per group"),
    Key("train_steps_per_round", 16, int, "gradient steps per rollout group"),
    Key("t_rollout", 6, int, "sampler steps for training rollouts"),
    Key("rl_lr", 0.05, float, "post-training gradient-descent step size"),
    Key("rl_clip", 0.02, float, "post-training global gradient-norm cap (0 disables)"),
    Key("online_fallback", True, bool, "run online-only when a context has no anchors"),
    # scoring
    Key("reward", "proxy", str, "rater backend", ("proxy", "remote")),
    Key("endpoint", None, str, "remote rater URL"),
    Key("timeout", 10.0, float, "remote request timeout, seconds"),
    Key("retries", 3, int, "remote retries after the first attempt"),
    Key("remote_mode", "logits", str, "remote response kind", ("logits", "judge")),
    Key("score_min", 1, int, "lowest score token"),
    Key("score_max", 5, int, "highest score token"),
    # sampling and evaluation
    Key("sample_steps", 28, int, "sampler steps for evaluation and the sample command"),
    Key("threshold", 0.85, float, "content-similarity threshold for success and local checks"),
)
KEY_BY_NAME = {k.name: k for k in KEYS}

# per-command short flags that map onto schema keys
ALIASES = {
    "train": {"steps": "cold_steps"},
    "sample": {"steps": "sample_steps"},
    "eval": {"steps": "sample_steps"},
}


def defaults() -> dict:
    return {k.name: k.default for k in KEYS}


def load_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError("config file must hold one JSON object")
    unknown = sorted(set(doc) - set(KEY_BY_NAME))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    return {k: KEY_BY_NAME[k].coerce(v) for k, v in doc.items()}


def resolve(file_values=None, flag_values=None, environ=None) -> dict:
    """Merge defaults, file, FLOWTINT_SEED and flags (highest wins)."""
    environ = os.environ if environ is None else environ
    cfg = defaults()
    cfg.update(file_values or {})
    if environ.get(SEED_ENV):
        cfg["seed"] = KEY_BY_NAME["seed"].coerce(environ[SEED_ENV])
    for k, v in (flag_values or {}).items():
        if k not in KEY_BY_NAME:
            raise ConfigurationError(f"unknown config key {k!r}")
        if v is not None:
            cfg[k] = KEY_BY_NAME[k].coerce(v)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    if cfg["tau_lo"] > cfg["tau_hi"]:
        raise ConfigurationError("tau_lo must not exceed tau_hi")
    if cfg["score_min"] >= cfg["score_max"]:
        raise ConfigurationError("score_min must be below score_max")
    if cfg["reward"] == "remote" and not cfg["endpoint"]:
        raise ConfigurationError("reward=remote needs an endpoint")
    if not 0 <= cfg["mismatch_ratio"] <= 1:
        raise ConfigurationError("mismatch_ratio must lie in [0, 1]")
    if cfg["crop_shift_min"] > cfg["crop_shift_max"]:
        raise ConfigurationError("crop_shift_min must not exceed crop_shift_max")


def describe() -> str:
    """One line per config key, for help output."""
    width = max(len(k.name) for k in KEYS)
    return "\n".join(f"  {k.name:<{width}}  {k.help} (default: {json.dumps(k.default)})" for k in KEYS)
