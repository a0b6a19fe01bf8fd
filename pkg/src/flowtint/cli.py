"""Command-line entry point: synth, train, sample, eval, score."""

import argparse
import hashlib
import json
import logging
from pathlib import Path
import sys

import torch

from . import config as C
from .condnet import ConditioningContext, NetConfig, VelocityField, load_checkpoint, save_checkpoint
from .dataforge import (COLD_START_EVAL, COLD_START_N, RL_EVAL, RL_N, DatasetManifest, retrieve_pairs,
                        split_eval, synth_cold_start)
from .errors import DataError, FlowtintError, StageOrderError, UsageError
from .evalkit import evaluate
from .flow import euler_sample
from .plotting import plot_losses, plot_training_log
from .pool import load_png, load_pool_dir, procedural_pool, save_png
from .presets import PresetRanges
from .remote import EndpointConfig, RemoteRater
from .reward import AnchorStore, OfflineAnchor, ProxyRater, expected_score
from .train import (BaseConfig, ColdConfig, NftConfig, PairedSet, TrainingLog, pretrain_base,
                    train_cold_start, train_rl)

log = logging.getLogger("flowtint")

COMMANDS = {
    "synth": "synthesize a cold-start or RL dataset and its train/eval split",
    "train": "fit the base, the cold-start adapter or the post-training adapter",
    "sample": "grade one source image after a reference",
    "eval": "sample an evaluation manifest and write the report",
    "score": "score one (reference, prediction) pair",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (JSON file via --config, or the matching --flag):\n" + C.describe()
    ap = _Parser(prog="flowtint", description="reference-based colour preset transfer at toy scale",
                 epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON config file")
        _command_args(name, p)
        grp = p.add_argument_group("config keys")
        for key in C.KEYS:
            kwargs = {"dest": f"cfg_{key.name}", "default": None, "help": key.help,
                      "metavar": key.type.__name__.upper()}
            if key.choices:
                kwargs["choices"] = key.choices
            grp.add_argument(key.flag, **kwargs)
        for alias, target in C.ALIASES.get(name, {}).items():
            grp.add_argument(f"--{alias}", dest=f"cfg_{target}", default=None,
                             help=f"same as --{target.replace('_', '-')}")
    return ap


def _command_args(name, p):
    if name == "synth":
        p.add_argument("--kind", required=True, choices=["cold-start", "rl"])
        p.add_argument("--out", help="dataset directory (default data/<kind>)")
        p.add_argument("--anchors", action="store_true",
                       help="rl only: also write suppressive reference-copy anchors")
    elif name == "train":
        p.add_argument("--stage", required=True, choices=["base", "cold", "rl"])
        p.add_argument("--manifest", help="training manifest (cold: quadruplets, rl: unpaired)")
        p.add_argument("--base", help="cold: frozen base checkpoint (fitted inline when omitted)")
        p.add_argument("--checkpoint", help="rl: cold-start checkpoint to continue from")
        p.add_argument("--anchors-file", help="rl: anchor store (JSONL)")
        p.add_argument("--out", required=True, help="output checkpoint path")
        p.add_argument("--log", help="training log path (rl default: <out>.log.jsonl)")
    elif name == "sample":
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--source", required=True)
        p.add_argument("--reference", required=True)
        p.add_argument("--out", required=True, help="output PNG")
    elif name == "eval":
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True, help="report directory")
        p.add_argument("--no-figures", action="store_true")
    elif name == "score":
        p.add_argument("--reference", required=True)
        p.add_argument("--prediction", required=True)


def resolve_config(args) -> dict:
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    file_values = C.load_file(args.config) if args.config else {}
    return C.resolve(file_values, flags)


def make_rater(cfg):
    tokens = tuple(range(cfg["score_min"], cfg["score_max"] + 1))
    if cfg["reward"] == "remote":
        return RemoteRater(EndpointConfig(cfg["endpoint"], cfg["timeout"], cfg["retries"],
                                          cfg["remote_mode"]), tokens)
    return ProxyRater(tokens)


def _pool(cfg, default_size):
    if cfg["pool_dir"]:
        return load_pool_dir(cfg["pool_dir"])
    return procedural_pool(cfg["pool_size"] or default_size, cfg["seed"], cfg["pool_image_size"])


def _ranges(cfg):
    return PresetRanges(lift=(-cfg["lift_max"], cfg["lift_max"]), gain=(cfg["gain_min"], cfg["gain_max"]),
                        gamma=(cfg["gamma_min"], cfg["gamma_max"]),
                        saturation=(cfg["saturation_min"], cfg["saturation_max"]),
                        hue=(-cfg["hue_max"], cfg["hue_max"]))


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def cmd_synth(args, cfg):
    out = Path(args.out or f"data/{args.kind}")
    if args.kind == "cold-start":
        n = cfg["n"] or COLD_START_N
        k = COLD_START_EVAL if cfg["eval"] is None else cfg["eval"]
        manifest = synth_cold_start(_pool(cfg, n), n, cfg["mismatch_ratio"], cfg["seed"], out,
                                    cfg["image_size"], (cfg["crop_shift_min"], cfg["crop_shift_max"]),
                                    cfg["n_presets"], _ranges(cfg), cfg["prompt"])
    else:
        n = cfg["n"] or RL_N
        k = RL_EVAL if cfg["eval"] is None else cfg["eval"]
        manifest = retrieve_pairs(_pool(cfg, 2 * n), n, cfg["seed"], out, cfg["image_size"],
                                  (cfg["tau_lo"], cfg["tau_hi"]), cfg["prompt"])
    train, held = split_eval(manifest, k, cfg["seed"])
    paths = {name: m.write(out / f"{name}.jsonl")
             for name, m in (("manifest", manifest), ("train", train), ("eval", held))}
    if args.anchors:
        if args.kind != "rl":
            raise UsageError("--anchors applies to rl datasets only")
        store = reference_copy_anchors(manifest, cfg["score_min"])
        paths["anchors"] = store.write(out / "anchors.jsonl")
    for name, p in paths.items():
        print(f"{name:9s} {p}  sha256:{_digest(p)}")
    print(f"records {len(manifest)}  train {len(train)}  eval {len(held)}")


def reference_copy_anchors(manifest, score):
    """Two lowest-score anchors per context: the reference itself and its mirror."""
    store = AnchorStore(base_dir=manifest.base_dir)
    for rec in manifest.records:
        ref = load_png(manifest.resolve(rec.reference_path))
        store.add(OfflineAnchor(rec.id, ref, float(score), "copies the reference"))
        store.add(OfflineAnchor(rec.id, ref[:, ::-1].copy(), float(score), "mirrored reference copy"))
    return store


def _net_config(cfg):
    return NetConfig(image_size=cfg["image_size"], patch=cfg["patch"], width=cfg["width"])


def fit_base(cfg, progress=None) -> VelocityField:
    field = VelocityField(_net_config(cfg), seed=cfg["seed"])
    bcfg = BaseConfig(steps=cfg["base_steps"], pool_size=cfg["base_pool"], learn_rate=cfg["base_lr"],
                      task=cfg["base_task"])
    pretrain_base(field, bcfg, cfg["seed"], progress=progress)
    return field


def _progress(label, every=500):
    def report(step, loss):
        if (step + 1) % every == 0:
            log.info("%s step %d loss %.4f", label, step + 1, loss)
    return report


def cmd_train(args, cfg):
    out = Path(args.out)
    if args.stage == "base":
        field = fit_base(cfg, _progress("base"))
    elif args.stage == "cold":
        if not args.manifest:
            raise UsageError("train --stage cold needs --manifest")
        manifest = DatasetManifest.read(args.manifest)
        if not manifest.paired:
            raise DataError("cold-start training needs a quadruplet manifest")
        field = load_checkpoint(args.base) if args.base else fit_base(cfg, _progress("base"))
        ccfg = ColdConfig(cfg["cold_steps"], cfg["cold_batch"], cfg["cold_lr"], cfg["rank"], cfg["alpha"],
                          cfg["cold_augment"], cfg["cold_clip"] or None, cfg["cold_shuffle_ref"])
        losses = train_cold_start(field, PairedSet.from_manifest(manifest), ccfg, cfg["seed"],
                                  _progress("cold"))
        log_path = Path(args.log) if args.log else out.with_suffix(".loss.json")
        log_path.write_text(json.dumps({"losses": losses}) + "\n", encoding="utf-8")
        plot_losses(losses, log_path.with_suffix(".png"))
    else:
        if not args.checkpoint:
            raise StageOrderError("train --stage rl needs a cold-start checkpoint (--checkpoint)")
        if not args.manifest:
            raise UsageError("train --stage rl needs --manifest")
        field = load_checkpoint(args.checkpoint)
        manifest = DatasetManifest.read(args.manifest)
        contexts = rl_contexts(manifest)
        anchors = AnchorStore.read(args.anchors_file) if args.anchors_file else None
        ncfg = NftConfig(cfg["beta"], cfg["g_online"], cfg["g_offline"], cfg["train_steps_per_round"],
                         cfg["t_rollout"], cfg["rl_lr"], cfg["seed"], cfg["rank"], cfg["alpha"],
                         cfg["online_fallback"], cfg["rl_clip"] or None)
        log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl")
        tlog = train_rl(field, contexts, ncfg, make_rater(cfg), cfg["rounds"], anchors,
                        TrainingLog(log_path))
        plot_training_log(tlog.records, log_path.with_suffix(".png"))
    save_checkpoint(field, out)
    print(f"checkpoint {out}  sha256:{_digest(out)}  step {field.step_counter}")


def rl_contexts(manifest):
    out = []
    for rec in manifest.records:
        src, ref, _ = manifest.load_images(rec)
        out.append(ConditioningContext(src, ref, rec.prompt, rec.id))
    return out


def cmd_sample(args, cfg):
    field = load_checkpoint(args.checkpoint)
    src, ref = load_png(args.source), load_png(args.reference)
    if src.shape != field.image_shape or ref.shape != field.image_shape:
        raise DataError(f"inputs must be {field.image_shape}, got {src.shape} and {ref.shape}")
    out = euler_sample(field, ConditioningContext(src, ref, cfg["prompt"]), cfg["sample_steps"],
                       seed=cfg["seed"]).numpy()
    save_png(out, args.out)
    print(f"wrote {args.out}  sha256:{_digest(args.out)}")


def cmd_eval(args, cfg):
    field = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.read(args.manifest)
    meta = {"checkpoint_sha256": hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest(),
            "manifest": Path(args.manifest).name, "reward": cfg["reward"]}
    report = evaluate(manifest, field, make_rater(cfg), cfg["sample_steps"], cfg["seed"],
                      cfg["threshold"], meta)
    paths = report.write(args.out, figures=not args.no_figures)
    print(format_aggregate(report))
    for name, p in paths.items():
        print(f"{name:9s} {p}")


def format_aggregate(report) -> str:
    agg = report.aggregate
    cols = list(agg["means"]) + ["success_ratio", "local_ratio"]
    vals = [agg["means"][c] for c in agg["means"]] + [agg["success_ratio"], agg["local_ratio"]]
    head = "  ".join(f"{c:>14s}" for c in cols)
    body = "  ".join(f"{'-':>14s}" if v is None else f"{v:14.4f}" for v in vals)
    return f"{'n':>5s}  {head}\n{agg['count']:5d}  {body}"


def cmd_score(args, cfg):
    rater = make_rater(cfg)
    dist = rater.distribution(load_png(args.reference), load_png(args.prediction))
    print(json.dumps({"tokens": list(dist.tokens), "probs": list(dist.probs),
                      "expected_score": expected_score(dist)}))


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "score": cmd_score}


def main(argv=None) -> int:
    torch.use_deterministic_algorithms(True)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        HANDLERS[args.command](args, cfg)
    except FlowtintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
