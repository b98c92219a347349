"""Command-line entry point.

Subcommands: gen-data, train, eval, relevance, analyze, run. Configuration is
a plain key=value file; repeated --set key=value flags override file values.
`run` executes a canned end-to-end recipe (generate, train, evaluate, compare)
and writes a manifest with content digests of everything it produced.
"""

import argparse
import csv
import datetime
import difflib
import hashlib
import os
import sys

from . import __version__, datagen, evaluation, models, relevance, sampling, training
from .errors import (ConfigurationError, FormatError, InputError, StateError,
                     TrainingAbort, UnsupportedVariantError)

CONFIG_KEYS = {
    # model
    "image_h": int, "image_w": int, "patch_size": int, "channels": int,
    "embed_dim": int, "depth": int, "heads": int, "mlp_hidden": int,
    "num_classes": int, "variant": str,
    # schedule
    "peak_lr": float, "final_lr": float, "warmup_epochs": int,
    "total_epochs": int, "wd_start": float, "wd_end": float,
    # sampler
    "sampler": str, "dropout_rate": float, "sampler_seed": int,
    # training
    "batch_size": int, "clip_norm": float, "seed": int,
    # data generation
    "train_samples": int, "test_samples": int, "channel_groups": str,
    "rho_in": float, "rho_out": float, "info_mode": str,
    "noise_std": float, "signal_strength": float, "channel_signal_coeffs": str,
}

# shorthand spellings accepted in config files and --set flags
ALIASES = {"epochs": "total_epochs", "lr": "peak_lr"}

DEFAULTS = {
    "image_h": 32, "image_w": 32, "patch_size": 16, "channels": 3,
    "embed_dim": 64, "depth": 4, "heads": 4, "mlp_hidden": 256,
    "num_classes": 4, "variant": "channelvit_tied",
    "peak_lr": 5e-4, "final_lr": 1e-6, "warmup_epochs": 10,
    "total_epochs": 100, "wd_start": 0.04, "wd_end": 0.4,
    "sampler": "hcs", "dropout_rate": 0.5, "sampler_seed": -1,
    "batch_size": 32, "clip_norm": 0.0, "seed": 0,
    "train_samples": 4000, "test_samples": 1000, "channel_groups": "",
    "rho_in": 0.9, "rho_out": 0.0, "info_mode": "redundant",
    "noise_std": 1.0, "signal_strength": 0.3, "channel_signal_coeffs": "",
}


def _set_key(cfg, key, value):
    key = ALIASES.get(key, key)
    if key not in CONFIG_KEYS:
        candidates = list(CONFIG_KEYS) + list(ALIASES)
        close = difflib.get_close_matches(key, candidates, n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        raise ConfigurationError(f"unknown config key {key!r}{hint}")
    typ = CONFIG_KEYS[key]
    try:
        cfg[key] = value if typ is str else typ(value)
    except ValueError:
        raise ConfigurationError(
            f"config key {key!r}: cannot parse {value!r} as {typ.__name__}")


def parse_config(path=None, overrides=(), with_sources=False):
    """Resolve a config: defaults, then file values, then flag overrides.

    With `with_sources=True` also returns the set of explicitly set keys.
    """
    cfg = dict(DEFAULTS)
    explicit = set()
    if path:
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigurationError(
                        f"{path}:{lineno}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                _set_key(cfg, key.strip(), value.strip())
                explicit.add(key.strip())
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_key(cfg, key.strip(), value.strip())
        explicit.add(key.strip())
    if with_sources:
        return cfg, explicit
    return cfg


def model_config(cfg, channels=None, num_classes=None):
    return models.ModelConfig(
        image_h=cfg["image_h"], image_w=cfg["image_w"],
        patch_size=cfg["patch_size"],
        channels=cfg["channels"] if channels is None else channels,
        embed_dim=cfg["embed_dim"], depth=cfg["depth"], heads=cfg["heads"],
        mlp_hidden=cfg["mlp_hidden"],
        num_classes=cfg["num_classes"] if num_classes is None else num_classes,
        variant=cfg["variant"])


def schedule_config(cfg):
    return training.ScheduleConfig(
        peak_lr=cfg["peak_lr"], final_lr=cfg["final_lr"],
        warmup_epochs=cfg["warmup_epochs"], total_epochs=cfg["total_epochs"],
        wd_start=cfg["wd_start"], wd_end=cfg["wd_end"])


def sampler_config(cfg):
    seed = cfg["sampler_seed"]
    if seed < 0:
        seed = cfg["seed"] + 1
    return sampling.SamplerConfig(mode=cfg["sampler"],
                                  dropout_rate=cfg["dropout_rate"], seed=seed)


def _parse_groups(text):
    if not text:
        return None
    return tuple(tuple(int(x) for x in part.split(",") if x != "")
                 for part in text.split("|"))


def synth_config(cfg):
    return datagen.SynthConfig(
        channels=cfg["channels"], image_h=cfg["image_h"], image_w=cfg["image_w"],
        num_classes=cfg["num_classes"], train_samples=cfg["train_samples"],
        test_samples=cfg["test_samples"],
        channel_groups=_parse_groups(cfg["channel_groups"]),
        rho_in=cfg["rho_in"], rho_out=cfg["rho_out"], info_mode=cfg["info_mode"],
        noise_std=cfg["noise_std"], signal_strength=cfg["signal_strength"],
        channel_signal_coeffs=(tuple(float(x) for x in
                                     cfg["channel_signal_coeffs"].split(","))
                               if cfg["channel_signal_coeffs"] else None),
        seed=cfg["seed"])


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, entries, outputs):
    """Line-delimited key=value manifest, output digests included, written
    atomically (temp file + rename)."""
    lines = [f"{k}={v}" for k, v in entries.items()]
    for name, out_path in sorted(outputs.items()):
        lines.append(f"output.{name}={out_path}")
        lines.append(f"digest.{name}={_sha256(out_path)}")
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _manifest_header(command, cfg, seed):
    entries = {
        "command": command,
        "version": __version__,
        "checkpoint_format": models.CHECKPOINT_VERSION,
        "dataset_format": datagen.DATASET_VERSION,
        "seed": seed,
        "started": datetime.datetime.now().isoformat(timespec="seconds"),
    }
    entries.update({f"config.{k}": v for k, v in sorted(cfg.items())})
    return entries


def _require_file(path, what):
    if not os.path.exists(path):
        raise InputError(f"{what} not found: {path}")


def cmd_gen_data(args):
    cfg = parse_config(args.config, args.set or ())
    os.makedirs(args.out_dir, exist_ok=True)
    entries = _manifest_header("gen-data", cfg, cfg["seed"])
    result = datagen.generate(synth_config(cfg))
    train_path = os.path.join(args.out_dir, "train.mcds")
    test_path = os.path.join(args.out_dir, "test.mcds")
    datagen.save_dataset(result.train, train_path)
    datagen.save_dataset(result.test, test_path)
    entries["finished"] = datetime.datetime.now().isoformat(timespec="seconds")
    write_manifest(os.path.join(args.out_dir, "manifest.txt"), entries,
                   {"train": train_path, "test": test_path})
    print(f"wrote {train_path} ({len(result.train)} samples) and "
          f"{test_path} ({len(result.test)} samples)")
    return 0


def _write_log_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "epoch", "lr", "wd", "loss"])
        for r in rows:
            w.writerow([r.step, r.epoch, f"{r.lr:.10g}", f"{r.wd:.10g}",
                        f"{r.loss:.10g}"])


def cmd_train(args):
    cfg = parse_config(args.config, args.set or ())
    _require_file(args.data, "training data")
    dataset = datagen.load_dataset(args.data)
    mcfg = model_config(cfg, channels=dataset.images.shape[1],
                        num_classes=dataset.num_classes)
    params = models.init_params(mcfg, seed=cfg["seed"])
    rows = training.train_model(params, dataset, schedule_config(cfg),
                                sampler_config(cfg),
                                batch_size=cfg["batch_size"],
                                clip_norm=cfg["clip_norm"],
                                shuffle_seed=cfg["seed"])
    models.save_checkpoint(params, args.out)
    if args.log:
        _write_log_csv(args.log, rows)
    print(f"trained {mcfg.variant} for {len(rows)} steps; "
          f"final loss {rows[-1].loss:.4f}; checkpoint {args.out}")
    return 0


def cmd_eval(args):
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.data, "evaluation data")
    params = models.load_checkpoint(args.checkpoint)
    dataset = datagen.load_dataset(args.data)
    report = evaluation.evaluate_all_combinations(params, dataset,
                                                  threads=args.threads)
    evaluation.write_report_csv(report, args.out)
    grouped_out = args.grouped_out
    if not grouped_out:
        root, ext = os.path.splitext(args.out)
        grouped_out = root + "_grouped" + (ext or ".csv")
    evaluation.write_grouped_csv(report, grouped_out)
    full = report.grouped[max(report.grouped)].mean
    print(f"evaluated {len(report.per_combination)} combinations on "
          f"{report.n_eval} images; full-channel accuracy {full:.4f}")
    return 0


def cmd_relevance(args):
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.image, "image file")
    params = models.load_checkpoint(args.checkpoint)
    dataset = datagen.load_dataset(args.image)
    if not 0 <= args.index < len(dataset):
        raise InputError(f"--index {args.index} out of range for "
                         f"{len(dataset)} samples")
    img = dataset.images[args.index]
    rmap = relevance.compute_relevance(params, img, None, args.target_class,
                                       args.method)
    written = relevance.save_relevance_outputs(rmap, params, args.out_prefix)
    print("wrote " + ", ".join(written))
    return 0


def cmd_analyze(args):
    if args.what != "sampler":
        raise InputError(f"unknown analysis target {args.what!r}")
    cfg = sampling.SamplerConfig(mode=args.mode, dropout_rate=args.dropout_rate)
    probs = sampling.exact_size_distribution(cfg, args.channels)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "C", "p", "m", "probability"])
        p = args.dropout_rate if args.mode == "dropout" else ""
        for m, prob in enumerate(probs, start=1):
            w.writerow([args.mode, args.channels, p, m, f"{prob:.12g}"])
    print(f"wrote {args.out}")
    return 0


def _train_and_eval(cfg, train_ds, test_ds, variant, sampler_mode, seed, threads=1):
    over = dict(cfg)
    over["variant"] = variant
    over["sampler"] = sampler_mode
    mcfg = model_config(over, channels=train_ds.images.shape[1],
                        num_classes=train_ds.num_classes)
    params = models.init_params(mcfg, seed=seed)
    rows = training.train_model(params, train_ds, schedule_config(over),
                                sampler_config(over),
                                batch_size=over["batch_size"],
                                clip_norm=over["clip_norm"], shuffle_seed=seed)
    report = evaluation.evaluate_all_combinations(params, test_ds, threads=threads)
    return params, rows, report


def _emit_model_outputs(out_dir, tag, params, rows, report, outputs):
    ckpt = os.path.join(out_dir, f"model_{tag}.chvt")
    models.save_checkpoint(params, ckpt)
    log = os.path.join(out_dir, f"train_{tag}.csv")
    _write_log_csv(log, rows)
    rep = os.path.join(out_dir, f"eval_{tag}.csv")
    grp = os.path.join(out_dir, f"eval_{tag}_grouped.csv")
    evaluation.write_report_csv(report, rep)
    evaluation.write_grouped_csv(report, grp)
    outputs[f"model_{tag}"] = ckpt
    outputs[f"log_{tag}"] = log
    outputs[f"eval_{tag}"] = rep
    outputs[f"eval_{tag}_grouped"] = grp


def _apply_recipe_base(cfg, explicit, base):
    out = dict(cfg)
    for key, value in base.items():
        if key not in explicit:
            out[key] = value
    return out


def _gen_and_save(cfg, out_dir, outputs):
    result = datagen.generate(synth_config(cfg))
    train_path = os.path.join(out_dir, "train.mcds")
    test_path = os.path.join(out_dir, "test.mcds")
    datagen.save_dataset(result.train, train_path)
    datagen.save_dataset(result.test, test_path)
    outputs["train"] = train_path
    outputs["test"] = test_path
    return result


def recipe_hcs_vs_none(out_dir, cfg, explicit, outputs, threads=1):
    """Redundant-channel data; the same backbone trained with and without
    hierarchical channel sampling; exhaustive combination evaluation."""
    base = {
        "channels": 3, "image_h": 32, "image_w": 32, "patch_size": 16,
        "info_mode": "redundant", "rho_in": 0.9, "rho_out": 0.0,
        "train_samples": 2000, "test_samples": 600, "signal_strength": 0.3,
        "variant": "vit", "total_epochs": 8, "warmup_epochs": 1,
        "peak_lr": 1e-3, "final_lr": 1e-5, "wd_start": 0.01, "wd_end": 0.05,
    }
    cfg = _apply_recipe_base(cfg, explicit, base)
    result = _gen_and_save(cfg, out_dir, outputs)
    reports = {}
    for tag, mode in (("none", "none"), ("hcs", "hcs")):
        params, rows, report = _train_and_eval(cfg, result.train, result.test,
                                               cfg["variant"], mode,
                                               cfg["seed"], threads)
        _emit_model_outputs(out_dir, tag, params, rows, report, outputs)
        reports[tag] = report
    gain = evaluation.gain_report(reports["hcs"], reports["none"])
    gain_path = os.path.join(out_dir, "gain_hcs_over_none.csv")
    evaluation.write_gain_csv(gain, gain_path)
    outputs["gain"] = gain_path


def recipe_channelvit_vs_vit(out_dir, cfg, explicit, outputs, threads=1):
    """Complementary-channel data; channel-token model vs per-patch baseline,
    both trained with hierarchical channel sampling."""
    base = {
        "channels": 4, "image_h": 16, "image_w": 16, "patch_size": 8,
        "info_mode": "complementary", "channel_groups": "0,1|2,3",
        "rho_in": 0.9, "rho_out": 0.0, "train_samples": 2000,
        "test_samples": 600, "signal_strength": 0.3, "total_epochs": 8,
        "warmup_epochs": 1, "peak_lr": 1e-3, "final_lr": 1e-5,
        "wd_start": 0.01, "wd_end": 0.05,
    }
    cfg = _apply_recipe_base(cfg, explicit, base)
    result = _gen_and_save(cfg, out_dir, outputs)
    reports = {}
    for tag, variant in (("channelvit", "channelvit_tied"), ("vit", "vit")):
        params, rows, report = _train_and_eval(cfg, result.train, result.test,
                                               variant, "hcs", cfg["seed"],
                                               threads)
        _emit_model_outputs(out_dir, tag, params, rows, report, outputs)
        reports[tag] = report
    gain = evaluation.gain_report(reports["channelvit"], reports["vit"])
    gain_path = os.path.join(out_dir, "gain_channelvit_over_vit.csv")
    evaluation.write_gain_csv(gain, gain_path)
    outputs["gain"] = gain_path


RECIPES = {
    "hcs-vs-none": recipe_hcs_vs_none,
    "channelvit-vs-vit": recipe_channelvit_vs_vit,
}


def cmd_run(args):
    if args.recipe not in RECIPES:
        raise InputError(f"unknown recipe {args.recipe!r}; "
                         f"available: {sorted(RECIPES)}")
    overrides = list(args.set or ())
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg, explicit = parse_config(args.config, overrides, with_sources=True)
    os.makedirs(args.out_dir, exist_ok=True)
    entries = _manifest_header(f"run:{args.recipe}", cfg, cfg["seed"])
    entries["recipe"] = args.recipe
    outputs = {}
    manifest_path = os.path.join(args.out_dir, "manifest.txt")
    try:
        RECIPES[args.recipe](args.out_dir, cfg, explicit, outputs,
                             threads=args.threads)
    except Exception as exc:
        # partial outputs kept; manifest records the failed stage
        entries["failed"] = f"{type(exc).__name__}: {exc}"
        entries["finished"] = datetime.datetime.now().isoformat(timespec="seconds")
        write_manifest(manifest_path, entries, outputs)
        print(f"recipe {args.recipe} failed: {exc}", file=sys.stderr)
        return 1
    entries["finished"] = datetime.datetime.now().isoformat(timespec="seconds")
    write_manifest(manifest_path, entries, outputs)
    print(f"recipe {args.recipe} complete; manifest {manifest_path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="channelvit",
        description="Channel-token transformers on multi-channel images: data "
                    "generation, training, combination evaluation, attribution.")
    parser.add_argument(
        "--version", action="version",
        version=(f"channelvit {__version__} "
                 f"(checkpoint format {models.CHECKPOINT_VERSION}, "
                 f"dataset format {datagen.DATASET_VERSION})"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset pair")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset file")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="per-step CSV log output path")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over all channel "
                                    "combinations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grouped-out")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("relevance", help="attribution maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="dataset file holding the image")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--class", dest="target_class", type=int, required=True)
    p.add_argument("--method", choices=("rollout", "grad"), default="grad")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(fn=cmd_relevance)

    p = sub.add_parser("analyze", help="exact sampler size distributions")
    p.add_argument("what", choices=("sampler",))
    p.add_argument("--mode", choices=("hcs", "dropout"), default="hcs")
    p.add_argument("--channels", type=int, required=True)
    p.add_argument("--dropout-rate", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("run", help="end-to-end reproduction recipe")
    p.add_argument("--recipe", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_run)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, InputError, FormatError, StateError,
            TrainingAbort, UnsupportedVariantError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
