"""
Command-line entry point.

    python src/cli.py train --arch mnist2d --fn on --epochs 5 --seed 7 --out runs/fn
    python src/cli.py gradcheck
    python src/cli.py embed --checkpoint runs/dv/features.dvck --manifest faces.txt --out runs/emb
    python src/cli.py eval --store runs/emb/embeddings.dvem --pairs pairs.csv --out runs/eval
    python src/cli.py features2d --checkpoint runs/fn/features.dvck --out runs/fn

Settings are layered: built-in defaults < config file < command-line flags. The config
file is YAML; plain "key = value" lines are accepted too.
"""

import os
import re
import sys

import click
import numpy as np
import yaml
from dotenv import load_dotenv

from architectures import build_architecture
from checkpoint import atomic_write_text, load_model, save_head, save_model
from datasets import (
    identity_from_path, load_mnist_normalized, read_embedding_store, read_fold_file,
    read_landmark_manifest, read_pair_list, write_embedding_store,
)
from errors import ContractViolation, DataError, DeepVisageError, UsageError
from gradient_check import run_all, standard_cases
from network import Network, evaluate_accuracy
from preprocess import FaceAligner
from trainer import BatchSampler, LrSchedule, OptimizerConfig, TrainingData, split_train_monitor, train
from verification import (
    angular_scatter, evaluate, exact_counts, exhaustive_pairs, extract_embeddings, operating_point,
    score_pair_list, worker_count, write_errors, write_metrics, write_roc,
)

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_CONFIG_PATH = os.path.join(REPO_ROOT, "config", "config.yaml")
ASSIGNMENT_LINE = re.compile(r"^(\s*)([A-Za-z_]\w*)\s*=\s*(.*)$")

DEFAULT_RUN_CONFIG = {
    "command": None,
    "arch": "mnist2d",
    "fn": True,
    "cl": False,
    "activation": "prelu",
    "epochs": 5,
    "batch_size": 120,
    "base_lr": 0.1,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "warm_epochs": 2,
    "decay_factor": 10.0,
    "flip_probability": 0.5,
    "train_fraction": 0.95,
    "fn_momentum": 0.9,
    "fn_epsilon": 1e-5,
    "center_lambda": 0.003,
    "center_alpha": 0.5,
    "seed": 0,
    "out_dir": "runs/latest",
    "deterministic": False,
    "threads": None,
    "far_targets": [0.01, 0.001],
    "folds": 10,
    "mnist_dir": "data/mnist",
    "checkpoint": None,
    "manifest": None,
    "image_root": None,
    "store": None,
    "pairs": None,
    "fold_file": None,
    "feature_point": "post_fn",
    "num_classes": 10,
    "canonical_landmarks": None,
    "gradcheck_tolerance": 1e-4,
    "gradcheck_ops": [],
    "limit": None,
    "quiet": False,
}

SWITCHES = ("fn", "cl", "deterministic", "quiet")


def _as_switch(key, value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("on", "true", "yes", "1"):
        return True
    if text in ("off", "false", "no", "0"):
        return False
    raise UsageError(f"'{key}' must be on or off, got '{value}'")


def _as_list(value, cast):
    if value is None:
        return []
    if isinstance(value, str):
        value = [part for part in value.replace(",", " ").split() if part]
    try:
        return [cast(v) for v in value]
    except (TypeError, ValueError):
        raise UsageError(f"cannot read list value {value!r}")


def config_text_to_yaml(text):
    """Rewrite ``key = value`` lines as ``key: value`` so both config styles load through YAML."""
    return "\n".join(ASSIGNMENT_LINE.sub(r"\1\2: \3", line) for line in text.splitlines())


def load_run_config(path=None, overrides=None):
    """Merge defaults, the config file at ``path`` (if any) and explicit overrides."""
    config = dict(DEFAULT_RUN_CONFIG)
    if path is None and os.path.exists(DEFAULT_CONFIG_PATH):
        path = DEFAULT_CONFIG_PATH
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(config_text_to_yaml(f.read())) or {}
        except OSError as e:
            raise UsageError(f"cannot read config file {path}: {e}")
        except yaml.YAMLError as e:
            raise UsageError(f"config file {path} is not valid YAML: {e}")
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold 'key: value' or 'key = value' lines")
        unknown = sorted(set(loaded) - set(DEFAULT_RUN_CONFIG))
        if unknown:
            raise UsageError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
        config.update(loaded)
    for key, value in (overrides or {}).items():
        if key not in DEFAULT_RUN_CONFIG:
            raise UsageError(f"unknown config key '{key}'")
        if value is not None:
            config[key] = value

    for key in SWITCHES:
        config[key] = _as_switch(key, config[key])
    config["far_targets"] = _as_list(config["far_targets"], float)
    config["gradcheck_ops"] = _as_list(config["gradcheck_ops"], str)
    for key in ("epochs", "batch_size", "warm_epochs", "folds", "seed", "num_classes"):
        try:
            config[key] = int(config[key])
        except (TypeError, ValueError):
            raise UsageError(f"'{key}' must be an integer, got {config[key]!r}")
    if config["epochs"] < 0:
        raise UsageError(f"epochs must be >= 0, got {config['epochs']}")
    return config


def sub_seeds(seed):
    """Independent, reproducible seeds for each randomized component."""
    network, split, sampler = np.random.SeedSequence(seed).generate_state(3)
    return {"network": int(network), "split": int(split), "sampler": int(sampler)}


def _banner(title):
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)


def _require(config, key, flag):
    if not config.get(key):
        raise UsageError(f"this command needs --{flag} (or '{key}' in the config file)")
    return config[key]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _training_data(config):
    if config["arch"] == "mnist2d":
        images, labels = load_mnist_normalized(config["mnist_dir"], "train", config["limit"])
        return TrainingData(images, labels), config["num_classes"]

    manifest = _require(config, "manifest", "manifest")
    records = read_landmark_manifest(manifest)
    if config["limit"]:
        records = records[:config["limit"]]
    aligner = _aligner(config)
    faces, identities = [], []
    for image_path, face in aligner.align_manifest(records, _image_root(config), config["quiet"]):
        faces.append(face.normalized[None])
        identities.append(identity_from_path(image_path))
    if not faces:
        raise DataError(f"no readable images in {manifest}")
    names, labels = np.unique(identities, return_inverse=True)
    return TrainingData(np.stack(faces), labels), len(names)


def cmd_train(config):
    if config["epochs"] == 0:
        raise UsageError("nothing to train: epochs is 0")
    _banner(f"TRAIN {config['arch']} (fn {'on' if config['fn'] else 'off'}, cl {'on' if config['cl'] else 'off'})")
    seeds = sub_seeds(config["seed"])
    data, num_classes = _training_data(config)
    spec = build_architecture(config["arch"], num_classes, config["fn"], config["cl"], config["activation"])
    print(f"✓ {len(data)} training images, {num_classes} classes")

    train_idx, monitor_idx = split_train_monitor(data.labels, config["train_fraction"], seeds["split"])
    network = Network(spec, seed=seeds["network"], fn_momentum=config["fn_momentum"],
                      fn_epsilon=config["fn_epsilon"], center_alpha=config["center_alpha"],
                      center_lambda=config["center_lambda"])
    optimizer = OptimizerConfig(config["base_lr"], config["momentum"], config["weight_decay"])
    schedule = LrSchedule(config["warm_epochs"], config["decay_factor"], config["epochs"], config["base_lr"])
    sampler = BatchSampler(len(train_idx), config["batch_size"], seeds["sampler"],
                           augment=config["flip_probability"] > 0, flip_probability=config["flip_probability"])

    out_dir = config["out_dir"]
    metrics_path = os.path.join(out_dir, "metrics.tsv")
    history = []

    def log_epoch(metrics):
        history.append(metrics)
        atomic_write_text(metrics_path, "".join(m.line() + "\n" for m in history))

    result = train(network, data.subset(train_idx), optimizer, schedule, sampler,
                   monitor=data.subset(monitor_idx) if len(monitor_idx) else None,
                   quiet=config["quiet"], on_epoch=log_epoch)
    save_model(os.path.join(out_dir, "features.dvck"), network)
    save_head(os.path.join(out_dir, "head.dvck"), network)
    print(f"✓ checkpoint written to {os.path.join(out_dir, 'features.dvck')}")
    print(f"✓ final monitor accuracy {result.final.monitor_acc:.4f}")
    return 0


def cmd_gradcheck(config):
    _banner("GRADIENT CHECK")
    known = standard_cases()
    unknown = [op for op in config["gradcheck_ops"] if op not in known]
    if unknown:
        raise UsageError(f"unknown operation(s) {', '.join(unknown)}; choose from {', '.join(known)}")
    reports = run_all(config["gradcheck_tolerance"], config["gradcheck_ops"] or None, config["seed"])
    for report in reports:
        for line in report.lines():
            print(line)
    failed = [r.name for r in reports if not r.passed]
    print("\n" + "=" * 70)
    if failed:
        print(f"✗ {len(failed)} of {len(reports)} operations failed: {', '.join(failed)}")
        return 3
    print(f"✓ ALL {len(reports)} OPERATIONS PASSED")
    return 0


def _aligner(config):
    settings = {}
    if config["canonical_landmarks"] is not None:
        settings["canonical_landmarks"] = config["canonical_landmarks"]
    return FaceAligner(settings)


def _image_root(config):
    if config["image_root"]:
        return config["image_root"]
    return os.path.dirname(os.path.abspath(config["manifest"]))


def cmd_embed(config):
    _banner("EMBED")
    network = load_model(_require(config, "checkpoint", "checkpoint"))
    manifest = _require(config, "manifest", "manifest")
    records = read_landmark_manifest(manifest)
    if config["limit"]:
        records = records[:config["limit"]]

    paths, faces, provenance = [], [], []
    for image_path, face in _aligner(config).align_manifest(records, _image_root(config), config["quiet"]):
        paths.append(image_path)
        faces.append(face.normalized[None])
        provenance.append(face.provenance)
    if not faces:
        raise DataError(f"no embeddings written: none of the {len(records)} manifest images could be read")

    embeddings = extract_embeddings(network, np.stack(faces), config["feature_point"])
    store = config["store"] or os.path.join(config["out_dir"], "embeddings.dvem")
    write_embedding_store(store, embeddings, paths, [identity_from_path(p) for p in paths])
    atomic_write_text(os.path.splitext(store)[0] + ".provenance",
                      "".join(f"{i}\t{p}\n" for i, p in enumerate(provenance)))
    fallback = provenance.count("fallback_crop")
    print(f"✓ {len(paths)} embeddings of dim {embeddings.shape[1]} written to {store}")
    if fallback:
        print(f"⚠ {fallback} image(s) used the bounding-box fallback crop")
    return 0


def cmd_eval(config):
    _banner("EVALUATE")
    store = _require(config, "store", "store")
    embeddings, paths, identities = read_embedding_store(store)
    out_dir = config["out_dir"]
    targets = config["far_targets"]

    if not config["pairs"]:
        workers = 1 if config["deterministic"] else int(config["threads"] or worker_count())
        histogram = exhaustive_pairs(embeddings, identities, materialize=False, workers=workers)
        curve = histogram.roc_curve()
        thresholds = [operating_point(curve, far)[1] for far in targets]
        exact = exact_counts(embeddings, identities, thresholds, workers=workers)
        rows = [("genuine_pairs", str(histogram.genuine_count)), ("impostor_pairs", str(histogram.impostor_count))]
        for far, threshold, tar, achieved in zip(targets, thresholds, exact.tar, exact.far):
            rows += [
                (f"tar@far={far:g}", f"{tar:.6f}"),
                (f"achieved_far@far={far:g}", f"{achieved:.6f}"),
                (f"threshold@far={far:g}", f"{threshold:.6f}"),
            ]
        atomic_write_text(os.path.join(out_dir, "report.tsv"), "".join(f"{k}\t{v}\n" for k, v in rows))
        write_roc(os.path.join(out_dir, "roc.tsv"), curve)
        for name, value in rows:
            print(f"  {name}: {value}")
        return 0

    scores = score_pair_list(embeddings, paths, read_pair_list(config["pairs"]))
    fold_indices = read_fold_file(config["fold_file"]) if config["fold_file"] else None
    report = evaluate(scores, targets, config["folds"], fold_indices)
    write_metrics(os.path.join(out_dir, "report.tsv"), report)
    write_roc(os.path.join(out_dir, "roc.tsv"), report.curve)
    write_errors(os.path.join(out_dir, "errors.tsv"), report.errors)
    for name, value in report.rows():
        print(f"  {name}: {value}")
    print(f"✓ accuracy {report.folds.mean:.4f} ± {report.folds.std:.4f} over {report.folds.k} folds")
    return 0


def cmd_features2d(config):
    _banner("2-D FEATURES")
    checkpoint = _require(config, "checkpoint", "checkpoint")
    head = os.path.join(os.path.dirname(checkpoint), "head.dvck")
    network = load_model(checkpoint, head if os.path.exists(head) else None)
    if network.spec.feature_dim != 2:
        raise ContractViolation(f"features2d needs a 2-D feature layer, {network.spec.name} has {network.spec.feature_dim}")

    images, labels = load_mnist_normalized(config["mnist_dir"], "test", config["limit"])
    features = network.embed(images, config["feature_point"])
    dump = os.path.join(config["out_dir"], "features2d.txt")
    atomic_write_text(dump, "".join(f"{x:.6f} {y:.6f} {int(label)}\n" for (x, y), label in zip(features, labels)))
    print(f"✓ {len(labels)} points written to {dump}")

    scatter = angular_scatter(features, labels)
    print(f"  between-class angle {scatter.between:.4f} rad, within-class {scatter.within:.4f} rad, R = {scatter.ratio:.4f}")
    if os.path.exists(head):
        print(f"  test accuracy {evaluate_accuracy(network, images, labels):.4f}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "features2d": cmd_features2d,
}


# ---------------------------------------------------------------------------
# click surface
# ---------------------------------------------------------------------------

class DeepVisageGroup(click.Group):
    """Maps library errors and bad flags onto the documented exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.show()
            ctx.exit(1)
        except DeepVisageError as e:
            click.echo(f"✗ {e}", err=True)
            ctx.exit(e.exit_code)


def common_options(func):
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file."),
        click.option("--seed", type=int),
        click.option("--arch", type=click.Choice(["deepvisage", "mnist2d"])),
        click.option("--fn", type=click.Choice(["on", "off"])),
        click.option("--cl", type=click.Choice(["on", "off"])),
        click.option("--epochs", type=int),
        click.option("--batch", "batch_size", type=int),
        click.option("--out", "out_dir", type=click.Path(file_okay=False)),
        click.option("--deterministic", is_flag=True, default=None),
        click.option("--far-targets", "far_targets", help="Comma-separated FAR targets, e.g. 0.01,0.001."),
        click.option("--mnist-dir", "mnist_dir", type=click.Path(file_okay=False)),
        click.option("--checkpoint", type=click.Path(dir_okay=False)),
        click.option("--manifest", type=click.Path(dir_okay=False)),
        click.option("--store", type=click.Path(dir_okay=False)),
        click.option("--pairs", type=click.Path(dir_okay=False)),
        click.option("--fold-file", "fold_file", type=click.Path(dir_okay=False)),
        click.option("--limit", type=int, help="Use only the first N samples."),
        click.option("--quiet", is_flag=True, default=None),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _run(name, config_path, **flags):
    config = load_run_config(config_path, flags)
    config["command"] = name
    code = COMMANDS[name](config)
    if code:
        click.get_current_context().exit(code)


@click.group(cls=DeepVisageGroup)
def cli():
    """DeepVisage training, gradient checks, embedding and verification."""
    load_dotenv()


@cli.command("train")
@common_options
def train_command(config_path, **flags):
    """Train a network with the SGD recipe; writes checkpoint and metrics."""
    _run("train", config_path, **flags)


@cli.command("gradcheck")
@common_options
@click.option("--tolerance", "gradcheck_tolerance", type=float)
@click.option("--op", "gradcheck_ops", multiple=True, help="Check only this operation (repeatable).")
def gradcheck_command(config_path, gradcheck_ops, **flags):
    """Finite-difference check of every differentiable operation."""
    _run("gradcheck", config_path, gradcheck_ops=list(gradcheck_ops) or None, **flags)


@cli.command("embed")
@common_options
@click.option("--feature-point", "feature_point", type=click.Choice(["post_fn", "pre_fn"]))
def embed_command(config_path, **flags):
    """Align faces from a landmark manifest and write a DVEM embedding store."""
    _run("embed", config_path, **flags)


@cli.command("eval")
@common_options
def eval_command(config_path, **flags):
    """Verification metrics for a pair list, or exhaustive pairing of a store."""
    _run("eval", config_path, **flags)


@cli.command("features2d")
@common_options
@click.option("--feature-point", "feature_point", type=click.Choice(["post_fn", "pre_fn"]))
def features2d_command(config_path, **flags):
    """Dump 'x y label' test features of a 2-D MNIST network."""
    _run("features2d", config_path, **flags)


def main():
    return cli(prog_name="deepvisage")


if __name__ == "__main__":
    sys.exit(main())
