"""
Module that contains the command line app.

Why does this file exist, and why not put this in __main__?

  You might be tempted to import things from __main__ later, but that will cause
  problems: the code will get executed twice:

  - When you run `python -m retarget` python will execute
    ``__main__.py`` as a script. That means there won't be any
    ``retarget.__main__`` in ``sys.modules``.
  - When you import __main__ it will get executed again (as a module) because
    there's no ``retarget.__main__`` in ``sys.modules``.

Every command writes below ``--out`` only, holds the run directory's lock
file while it runs and keeps a ``manifest.json`` whose status stays
``incomplete`` until the command succeeds.
"""
import argparse
import contextlib
import functools
import json
import logging
import os
import time
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field

import pandas as pd
import torch
from torchvision.utils import save_image

from retarget import __version__
from retarget.config import ExperimentConfig
from retarget.config import emit_config
from retarget.config import parse_config
from retarget.core import ArgumentError
from retarget.core import CheckpointError
from retarget.core import RetargetError
from retarget.core import configure_logging
from retarget.core import seed_everything
from retarget.data import build_mnist_protocol
from retarget.data import build_synthetic_protocol
from retarget.data import load_mnist
from retarget.data import load_protocol
from retarget.data import write_split_manifest
from retarget.evaluation import evaluate_split
from retarget.evaluation import g_old_sweep
from retarget.evaluation import outlier_ratio_sweep
from retarget.evaluation import split_evaluator
from retarget.evaluation import stability_sweep
from retarget.evaluation import write_report
from retarget.evaluation import write_scores_csv
from retarget.evaluation import write_stability
from retarget.models import Role
from retarget.models import SampleBatch
from retarget.models import StreamRole
from retarget.models import generator_forward
from retarget.models import load_checkpoint
from retarget.models import save_checkpoint
from retarget.trainer import LOSS_FILE
from retarget.trainer import VARIANT_PRESETS
from retarget.trainer import GOldStrategy
from retarget.trainer import PhaseOneResult
from retarget.trainer import build_g_old
from retarget.trainer import make_pseudo_anomaly
from retarget.trainer import reconstruct_pseudo
from retarget.trainer import run_phase_one
from retarget.trainer import run_phase_two
from retarget.trainer import sample_pairs
from retarget.trainer import variant_as_dict
from retarget.trainer import variant_from_name
from retarget.utils import run_lock

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.json"


@dataclass
class RunManifest:
    """What a command did, enough to repeat it in deterministic mode."""

    command: str
    config: dict
    seed: int
    status: str = "incomplete"
    version: str = __version__
    g_old: str = ""
    variant: dict = None
    checkpoints: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)
    hashes: dict = field(default_factory=dict)
    stage_seconds: dict = field(default_factory=dict)
    path: str = field(default="", repr=False)

    def write(self):
        d = asdict(self)
        d.pop("path")
        with open(self.path, "w", encoding="utf8") as fh:
            json.dump(d, fh, indent=2)
        return self.path

    def add_checkpoints(self, role, paths):
        self.checkpoints.setdefault(role, []).extend(paths)

    @contextlib.contextmanager
    def stage(self, name):
        """Time a stage; the manifest is rewritten after it either way."""
        start = time.perf_counter()
        logger.info("stage %s", name)
        try:
            yield
        finally:
            self.stage_seconds[name] = round(time.perf_counter() - start, 3)
            self.write()


def start_manifest(command, config):
    out = config.run.output_dir
    emit_config(config, os.path.join(out, CONFIG_FILE))
    stale = os.path.join(out, LOSS_FILE)
    if os.path.exists(stale):
        os.remove(stale)
    manifest = RunManifest(command, config.to_flat_dict(), config.hyper.seed,
                           path=os.path.join(out, MANIFEST_FILE))
    manifest.write()
    return manifest


def finish(manifest):
    manifest.status = "complete"
    manifest.write()
    return manifest


def load_split(config):
    return load_protocol(config.protocol, tuple(config.arch.input_size), seed=config.hyper.seed)


def load_phase_one(run_dir):
    """
    Phase-one snapshots of an earlier run.
    Raises
    ------
    CheckpointError
        If the run has no phase-one checkpoints or an epoch is missing.
    """
    directory = os.path.join(run_dir, "checkpoints", "phase_one")
    if not os.path.isdir(directory):
        raise CheckpointError("no phase-one checkpoints in {}".format(run_dir))
    states = [load_checkpoint(os.path.join(directory, name)) for name in sorted(os.listdir(directory))]
    generators = sorted((s for s in states if s.role is Role.GENERATOR), key=lambda s: s.provenance.epoch)
    discriminators = sorted((s for s in states if s.role is Role.DISCRIMINATOR), key=lambda s: s.provenance.epoch)
    epochs = list(range(1, len(generators) + 1))
    if not generators or [s.provenance.epoch for s in generators] != epochs \
            or [s.provenance.epoch for s in discriminators] != epochs:
        raise CheckpointError("phase-one checkpoints in {} are incomplete".format(directory))
    paths = [os.path.join(directory, s.name) for pair in zip(generators, discriminators) for s in pair]
    return PhaseOneResult(generators, discriminators, checkpoint_paths=paths)


def phase_one_for(config, split, manifest, from_run=None, epochs=None):
    """Train phase one, or reuse the snapshots of `from_run`."""
    with manifest.stage("phase_one"):
        if from_run:
            result = load_phase_one(from_run)
            if epochs and result.epochs < epochs:
                raise ArgumentError("{} holds {} epochs, {} needed".format(from_run, result.epochs, epochs))
        else:
            result = run_phase_one(config, split.train, run_dir=config.run.output_dir, epochs=epochs)
        # paths alternate generator, discriminator per epoch
        manifest.add_checkpoints(Role.GENERATOR.value, result.checkpoint_paths[0::2])
        manifest.add_checkpoints(Role.DISCRIMINATOR.value, result.checkpoint_paths[1::2])
    return result


def g_old_strategy(config):
    return GOldStrategy(config.run.g_old_strategy, config.run.g_old_epoch)


def evaluate_and_write(g, d, split, config, directory, manifest=None, metadata=None):
    """Evaluate a pair and write report.json and scores.csv into `directory`."""
    os.makedirs(directory, exist_ok=True)
    report, records = evaluate_split(g, d, split, config, metadata)
    paths = [write_report(report, os.path.join(directory, "report.json")),
             write_scores_csv(records, os.path.join(directory, "scores.csv"))]
    if manifest is not None:
        manifest.reports.extend(paths)
    logger.info("auc %.4f eer %.4f f1 %.4f (%s)", report.auc, report.eer, report.f1_best, directory)
    if report.verdicts:
        logger.info("tau %.3f flags %d/%d outliers and %d/%d inliers", report.tau,
                    report.verdicts["outlier"]["anomaly"], report.n_outliers,
                    report.verdicts["inlier"]["anomaly"], report.n_inliers)
    return report


def cmd_train(config, from_run=None):
    """
    Phase one, old generator, phase two and evaluation of the final pair.
    Returns
    -------
    RunManifest
    """
    out = config.run.output_dir
    manifest = start_manifest("train", config)
    variant = variant_from_name(config.run.variant)
    manifest.variant = variant_as_dict(variant)
    with manifest.stage("data"):
        split = load_split(config)
        manifest.reports.append(write_split_manifest(split, os.path.join(out, "split.csv")))
    phase_one = phase_one_for(config, split, manifest, from_run)
    g = phase_one.generator(phase_one.epochs)
    d = phase_one.discriminator(phase_one.epochs)
    if variant is not None:
        strategy = g_old_strategy(config)
        manifest.g_old = strategy.describe()
        g_old = build_g_old(phase_one, strategy)
        manifest.checkpoints["g_old"] = [save_checkpoint(g_old, os.path.join(out, "checkpoints", "g_old"))]
        with manifest.stage("phase_two"):
            result = run_phase_two(config, g, g_old, d, variant, split.train, run_dir=out)
            manifest.add_checkpoints(Role.DISCRIMINATOR.value, result.checkpoint_paths)
        d = result.discriminator
        manifest.hashes["g_old"] = g_old.content_hash()
    manifest.hashes.update({"generator": g.content_hash(), "discriminator": d.content_hash()})
    with manifest.stage("evaluation"):
        evaluate_and_write(g, d, split, config, os.path.join(out, "evaluation"), manifest,
                           {"generator": g.name, "discriminator": d.name, "variant": config.run.variant})
    return finish(manifest)


def cmd_evaluate(config, generator, discriminator):
    """
    Evaluate stored checkpoints. A phase-one discriminator gives the
    baseline numbers.
    Returns
    -------
    EvaluationReport
    """
    for ref in (generator, discriminator):
        if not ref or not os.path.isdir(ref):
            raise ArgumentError("checkpoint {!r} does not exist".format(ref))
    manifest = start_manifest("evaluate", config)
    g, d = load_checkpoint(generator), load_checkpoint(discriminator)
    manifest.checkpoints = {Role.GENERATOR.value: [generator], Role.DISCRIMINATOR.value: [discriminator]}
    manifest.hashes = {"generator": g.content_hash(), "discriminator": d.content_hash()}
    with manifest.stage("data"):
        split = load_split(config)
    with manifest.stage("evaluation"):
        report = evaluate_and_write(g, d, split, config, os.path.join(config.run.output_dir, "evaluation", d.name),
                                    manifest, {"generator": g.name, "discriminator": d.name})
    finish(manifest)
    return report


def cmd_ablation(config, from_run=None):
    """
    One phase two per ablation preset from shared phase-one artifacts.
    Returns
    -------
    pandas.DataFrame
        One row per variant with auc, eer, f1_best and the generator hash.
    """
    variants = {name: (v.validate() if v is not None else None) for name, v in VARIANT_PRESETS.items()}
    out = config.run.output_dir
    manifest = start_manifest("ablation", config)
    with manifest.stage("data"):
        split = load_split(config)
    phase_one = phase_one_for(config, split, manifest, from_run)
    g = phase_one.generator(phase_one.epochs)
    d0 = phase_one.discriminator(phase_one.epochs)
    strategy = g_old_strategy(config)
    manifest.g_old = strategy.describe()
    g_old = build_g_old(phase_one, strategy)
    rows = []
    for name, variant in variants.items():
        with manifest.stage("variant_{}".format(name)):
            d = d0
            if variant is not None:
                result = run_phase_two(config, g, g_old, d0, variant, split.train, run_dir=out, label=name)
                manifest.add_checkpoints(Role.DISCRIMINATOR.value, result.checkpoint_paths[-1:])
                d = result.discriminator
            report = evaluate_and_write(g, d, split, config, os.path.join(out, "ablation", name), manifest,
                                        {"variant": name})
            rows.append((name, report.auc, report.eer, report.f1_best, g.content_hash()))
    table = pd.DataFrame(rows, columns=["variant", "auc", "eer", "f1_best", "generator_hash"])
    path = os.path.join(out, "ablation.csv")
    table.to_csv(path, index=False)
    manifest.reports.append(path)
    finish(manifest)
    return table


def cmd_stability(config, from_run=None, sweep_g_old=False):
    """
    Stability sweep over phase-one epochs, optionally followed by the
    old-generator sweep from the last epoch of the range.
    Returns
    -------
    dict
        Paths of the written files.
    """
    run = config.run
    out = run.output_dir
    variant = variant_from_name(run.variant)
    if variant is None:
        raise ArgumentError("the stability sweep needs a phase-two variant")
    manifest = start_manifest("stability", config)
    manifest.variant = variant_as_dict(variant)
    with manifest.stage("data"):
        split = load_split(config)
    last = max(config.hyper.phase1_epochs, run.stability_epoch_stop)
    phase_one = phase_one_for(config, split, manifest, from_run, epochs=last)
    evaluate = split_evaluator(split, config)
    strategy = g_old_strategy(config)
    manifest.g_old = strategy.describe()
    with manifest.stage("stability"):
        table = stability_sweep(config, phase_one, split.train, evaluate,
                                range(run.stability_epoch_start, run.stability_epoch_stop + 1), variant, strategy)
        paths = write_stability(table, out)
    if sweep_g_old:
        with manifest.stage("g_old_sweep"):
            stop = min(run.g_old_sweep_stop, run.stability_epoch_stop - 1)
            frame = g_old_sweep(config, phase_one, split.train, evaluate, run.stability_epoch_stop,
                                range(1, stop + 1), variant)
            paths["g_old_sweep"] = os.path.join(out, "g_old_sweep.csv")
            frame.to_csv(paths["g_old_sweep"], index=False)
    manifest.reports.extend(paths.values())
    finish(manifest)
    return paths


def cmd_pseudo_preview(config, from_run=None, n_images=8):
    """
    Image grid with one training image per row and the columns X, X-hat,
    X-hat-low, the pseudo anomaly and its reconstruction.
    Returns
    -------
    str
        Path of the PNG.
    """
    out = config.run.output_dir
    manifest = start_manifest("pseudo-preview", config)
    with manifest.stage("data"):
        split = load_split(config)
    phase_one = phase_one_for(config, split, manifest, from_run)
    g = phase_one.generator(phase_one.epochs)
    strategy = g_old_strategy(config)
    manifest.g_old = strategy.describe()
    g_old = build_g_old(phase_one, strategy)
    rng = seed_everything(config.hyper.seed)
    n = min(n_images, len(split.train))
    x = SampleBatch(torch.as_tensor(split.train[:n]).to(g.dtype))
    x_hat = generator_forward(g, x)
    low = generator_forward(g_old, x, StreamRole.LOW)
    i, j = sample_pairs(n, rng)
    xbar = make_pseudo_anomaly(g_old, SampleBatch(x.images[i]), SampleBatch(x.images[j]), i, j)
    pseudo = reconstruct_pseudo(g, xbar)
    # rows of five: X, X-hat, low, mix, pseudo of pair (i, j)
    columns = [x.images[i], x_hat.images[i], low.images[i], xbar.images, pseudo.images]
    grid = torch.stack(columns, dim=1).reshape((-1,) + tuple(x.images.shape[1:]))
    path = os.path.join(out, "pseudo_preview.png")
    save_image(grid.float(), path, nrow=len(columns), padding=2)
    manifest.reports.append(path)
    finish(manifest)
    return path


def cmd_ratio_sweep(config, generator, discriminator, ratios=(0.1, 0.2, 0.3, 0.4, 0.5)):
    """F1 and AUC of one stored pair over test mixtures with a growing outlier share."""
    for ref in (generator, discriminator):
        if not ref or not os.path.isdir(ref):
            raise ArgumentError("checkpoint {!r} does not exist".format(ref))
    p = config.protocol
    target = tuple(config.arch.input_size)
    seed = config.hyper.seed
    if p.protocol == "mnist":
        train, test = load_mnist(p.resolved_data_root())
        build = functools.partial(build_mnist_protocol, train, test, p.inlier_digit, seed=seed, target=target)
    elif p.protocol == "synthetic":
        build = functools.partial(build_synthetic_protocol, p.synthetic_train, p.synthetic_test_inliers,
                                  size=target[1], seed=seed, pattern=p.synthetic_pattern, noise=p.synthetic_noise)
    else:
        raise ArgumentError("ratio sweeps need the mnist or synthetic protocol, not {}".format(p.protocol))
    manifest = start_manifest("ratio-sweep", config)
    g, d = load_checkpoint(generator), load_checkpoint(discriminator)
    manifest.hashes = {"generator": g.content_hash(), "discriminator": d.content_hash()}
    with manifest.stage("ratio_sweep"):
        frame = outlier_ratio_sweep(g, d, lambda r: build(outlier_ratio=r), ratios, config.run.eval_batch_size)
    path = os.path.join(config.run.output_dir, "ratio_sweep.csv")
    frame.to_csv(path, index=False)
    manifest.reports.append(path)
    finish(manifest)
    return frame


def resolve_config(args):
    """Configuration file (or defaults) with the command line overrides applied."""
    config = parse_config(args.config) if args.config else ExperimentConfig().validate()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.deterministic:
        overrides["deterministic"] = True
    if args.variant is not None:
        overrides["variant"] = args.variant
    return config.replace(**overrides) if overrides else config


common = argparse.ArgumentParser(add_help=False)
common.add_argument("--config", metavar="PATH", help="JSON configuration file; defaults if omitted.")
common.add_argument("--seed", type=int, help="Seed of every random draw.")
common.add_argument("--out", metavar="DIR", help="Output directory of the run.")
common.add_argument("--deterministic", action="store_true", help="Use deterministic torch algorithms.")
common.add_argument("--variant", choices=list(VARIANT_PRESETS), help="Phase-two stream preset.")
common.add_argument("-v", "--verbose", action="store_true", help="Log every training step.")

reuse = argparse.ArgumentParser(add_help=False)
reuse.add_argument("--from-run", metavar="DIR", help="Reuse the phase-one checkpoints of an earlier run.")

pair = argparse.ArgumentParser(add_help=False)
pair.add_argument("--generator", metavar="CKPT", required=True, help="Generator checkpoint directory.")
pair.add_argument("--discriminator", metavar="CKPT", required=True, help="Discriminator checkpoint directory.")

parser = argparse.ArgumentParser(prog="retarget", description="Two-phase adversarial one-class classification.")
parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
commands = parser.add_subparsers(dest="command", metavar="COMMAND")
commands.required = True
commands.add_parser("train", parents=[common, reuse], help="Train both phases and evaluate.")
commands.add_parser("evaluate", parents=[common, pair], help="Evaluate stored checkpoints.")
commands.add_parser("ablation", parents=[common, reuse], help="Run every phase-two preset.")
stability = commands.add_parser("stability", parents=[common, reuse], help="AUC over phase-one epochs.")
stability.add_argument("--g-old-sweep", action="store_true", help="Also vary the old generator.")
preview = commands.add_parser("pseudo-preview", parents=[common, reuse], help="Image grid of all streams.")
preview.add_argument("-n", "--images", type=int, default=8, help="Number of rows.")
ratio = commands.add_parser("ratio-sweep", parents=[common, pair], help="F1 over outlier ratios.")
ratio.add_argument("--ratios", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.4, 0.5])


def dispatch(args, config):
    if args.command == "train":
        return cmd_train(config, args.from_run)
    if args.command == "evaluate":
        return cmd_evaluate(config, args.generator, args.discriminator)
    if args.command == "ablation":
        return cmd_ablation(config, args.from_run)
    if args.command == "stability":
        return cmd_stability(config, args.from_run, args.g_old_sweep)
    if args.command == "pseudo-preview":
        return cmd_pseudo_preview(config, args.from_run, args.images)
    return cmd_ratio_sweep(config, args.generator, args.discriminator, tuple(args.ratios))


def main(args=None):
    """Run a command; returns the exit status (0 on success, 1 on any package error)."""
    args = parser.parse_args(args=args)
    configure_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        config = resolve_config(args)
        seed_everything(config.hyper.seed, config.run.deterministic)
        with run_lock(config.run.output_dir):
            dispatch(args, config)
    except RetargetError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1
    return 0
