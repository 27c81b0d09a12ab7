"""
Two-phase training.

Phase one trains the generator and the discriminator adversarially, the
generator additionally minimising its reconstruction error. Phase two
freezes the generator, takes an older (worse) generator state, and retrains
only the discriminator to tell good reconstructions from bad ones: real
images and current reconstructions are good, old-generator reconstructions
and reconstructed pseudo anomalies are bad.
"""
import json
import logging
import math
import os
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from typing import List
from typing import NamedTuple

import numpy as np
import torch
from torch.utils.data import DataLoader
from torch.utils.data import TensorDataset
from tqdm import tqdm

from retarget.core import ArgumentError
from retarget.core import NumericError
from retarget.core import RetargetError
from retarget.core import progress_disabled
from retarget.core import seed_everything
from retarget.equations.losses import discriminator_loss_phase_one
from retarget.equations.losses import generator_loss
from retarget.equations.losses import phase_two_loss
from retarget.models import ModelState
from retarget.models import Phase
from retarget.models import Provenance
from retarget.models import Role
from retarget.models import SampleBatch
from retarget.models import StreamRole
from retarget.models import add_noise
from retarget.models import average_parameters
from retarget.models import build_module
from retarget.models import generator_forward
from retarget.models import quasi_ground_truth
from retarget.models import save_checkpoint
from retarget.models import snapshot_parameters

logger = logging.getLogger(__name__)

LOSS_FILE = "losses.jsonl"


@dataclass(frozen=True)
class AblationVariant:
    """Which streams the discriminator sees in phase two.

    `raw_mix_as_pseudo` feeds the averaged old reconstructions directly as
    the pseudo-anomaly stream instead of reconstructing them first.
    """

    use_real_x: bool = True
    use_recon: bool = True
    use_low: bool = True
    use_pseudo: bool = True
    raw_mix_as_pseudo: bool = False

    def validate(self):
        if not (self.use_real_x or self.use_recon):
            raise ArgumentError("phase two needs at least one good stream (real or reconstruction)")
        if not (self.use_low or self.use_pseudo):
            raise ArgumentError("phase two needs at least one bad stream (low or pseudo)")
        if self.raw_mix_as_pseudo and not self.use_pseudo:
            raise ArgumentError("raw_mix_as_pseudo requires the pseudo stream")
        return self


# Column order of the ablation table; baseline means no phase two at all.
VARIANT_PRESETS = {
    "baseline": None,
    "no_real": AblationVariant(use_real_x=False, use_pseudo=False),
    "no_pseudo": AblationVariant(use_pseudo=False),
    "no_low": AblationVariant(use_low=False),
    "raw_mix": AblationVariant(raw_mix_as_pseudo=True),
    "full": AblationVariant(),
}


def variant_from_name(name):
    """Preset by name; None for the phase-one baseline."""
    try:
        variant = VARIANT_PRESETS[name]
    except KeyError:
        raise ArgumentError("unknown variant {!r}, expected one of {}".format(
            name, ", ".join(VARIANT_PRESETS)))
    return variant.validate() if variant is not None else None


@dataclass(frozen=True)
class GOldStrategy:
    """How the old generator is obtained from phase-one snapshots.

    kind is ``fixed_epoch`` (the snapshot of `epoch`) or
    ``average_all_previous`` (the mean of every snapshot before the
    generator used in phase two).
    """

    kind: str = "fixed_epoch"
    epoch: int = 1

    def describe(self):
        if self.kind == "fixed_epoch":
            return "fixed_epoch({})".format(self.epoch)
        return self.kind


class PhaseOneLosses(NamedTuple):
    d_loss: float
    g_adv_loss: float
    recon_loss: float
    g_loss: float


@dataclass
class PhaseOneResult:
    """Per-epoch snapshots (index e - 1 holds epoch e) and the loss trace."""

    generators: List[ModelState]
    discriminators: List[ModelState]
    losses: List[dict] = field(default_factory=list)
    checkpoint_paths: List[str] = field(default_factory=list)

    @property
    def epochs(self):
        return len(self.generators)

    def generator(self, epoch):
        return self.generators[self._index(epoch)]

    def discriminator(self, epoch):
        return self.discriminators[self._index(epoch)]

    def _index(self, epoch):
        if not 1 <= epoch <= len(self.generators):
            raise ArgumentError("epoch {} not in 1..{}".format(epoch, len(self.generators)))
        return epoch - 1


@dataclass
class PhaseTwoResult:
    discriminator: ModelState
    checkpoints: List[ModelState]
    losses: List[dict] = field(default_factory=list)
    checkpoint_paths: List[str] = field(default_factory=list)
    generator_hash: str = ""
    g_old_hash: str = ""


class LossTrace:
    """Loss records, mirrored to a line-delimited JSON file when a path is given."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def append(self, phase, iteration, epoch=None, **losses):
        record = {"phase": Phase(phase).value, "epoch": epoch, "iteration": iteration}
        record.update(losses)
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf8") as fh:
                fh.write(json.dumps(record) + "\n")
        return record


def _check_finite(diagnostics, **values):
    for name, value in values.items():
        if not torch.isfinite(value).all():
            diagnostics = dict(diagnostics)
            diagnostics.update({k: v.detach().item() for k, v in values.items()})
            raise NumericError("non-finite {}".format(name), diagnostics)


def _as_tensor(images, dtype=torch.float32):
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    return torch.as_tensor(np.asarray(images), dtype=dtype)


def phase_one_discriminator_loss(g, d, x, x_noisy):
    """
    Discriminator side of a phase-one step.
    Returns
    -------
    x_hat : torch.Tensor
        G(X~), attached to the generator's graph.
    d_loss : torch.Tensor
        Reaches D only; the reconstructions enter detached.
    """
    x_hat = g(x_noisy)
    return x_hat, discriminator_loss_phase_one(d(x), d(x_hat.detach()))


def phase_one_generator_loss(d, x, x_hat, lambda_recon):
    """
    Generator side of a phase-one step, scored by the current `d`.
    Returns
    -------
    g_loss, g_adv_loss, recon_loss : torch.Tensor
        Gradients reach G (and D, whose gradients are discarded).
    """
    return generator_loss(d(x_hat), x, x_hat, lambda_recon)


def phase_one_step(g, d, batch, hp, opt_g, opt_d, rng=None):
    """
    One discriminator update followed by one generator update.
    The generator loss is evaluated by the already updated discriminator.
    Parameters
    ----------
    g, d : torch.nn.Module
        Live networks in training mode.
    batch : SampleBatch
        Clean training images (role real_X).
    hp : HyperParams
        Supplies noise_sigma and lambda_recon.
    opt_g, opt_d : torch.optim.Optimizer
        Optimizers over the generator and the discriminator.
    rng : torch.Generator, optional
        Source of the denoising noise.
    Returns
    -------
    PhaseOneLosses
    """
    if batch.role is not StreamRole.REAL:
        raise ArgumentError("phase one trains on real images, got {}".format(batch.role.value))
    dtype = next(g.parameters()).dtype
    x = batch.images.to(dtype)
    x_noisy = add_noise(SampleBatch(x), hp.noise_sigma, rng).images

    opt_d.zero_grad()
    x_hat, d_loss = phase_one_discriminator_loss(g, d, x, x_noisy)
    _check_finite({"phase": "one"}, d_loss=d_loss)
    d_loss.backward()
    opt_d.step()

    opt_g.zero_grad()
    g_total, g_adv, recon = phase_one_generator_loss(d, x, x_hat, hp.lambda_recon)
    _check_finite({"phase": "one"}, g_loss=g_total)
    g_total.backward()
    opt_g.step()
    return PhaseOneLosses(d_loss.item(), g_adv.item(), recon.item(), g_total.item())


def mix_reconstructions(a, b):
    """Pixel-wise mean of two reconstructions."""
    return (a + b) / 2


def sample_pairs(n, rng=None):
    """
    Random pairing of the rows of a batch with i != j for every pair.
    Every row appears exactly once as i and once as j.
    Returns
    -------
    i, j : torch.Tensor of int64
    """
    if n < 2:
        raise ArgumentError("pairs need at least two images, got {}".format(n))
    perm = torch.randperm(n, generator=rng)
    return perm, torch.roll(perm, 1)


def make_pseudo_anomaly(g_old, x_i, x_j, index_i=None, index_j=None):
    """
    Average the old-generator reconstructions of two training images.
    Parameters
    ----------
    g_old : ModelState or Generator
        Old generator.
    x_i, x_j : SampleBatch
        Rows to mix, paired position by position.
    index_i, index_j : array_like of int, optional
        Dataset indices of the rows; a pair with equal indices is rejected.
    Returns
    -------
    SampleBatch
        Pseudo anomalies, role pseudo_mix_Xbar.
    """
    if len(x_i) != len(x_j):
        raise ArgumentError("x_i and x_j must have the same number of rows")
    if index_i is not None or index_j is not None:
        if index_i is None or index_j is None:
            raise ArgumentError("pass both index_i and index_j")
        if np.any(np.asarray(index_i) == np.asarray(index_j)):
            raise ArgumentError("pseudo anomalies need two distinct images (i != j)")
    low_i = generator_forward(g_old, x_i, StreamRole.LOW).images
    low_j = generator_forward(g_old, x_j, StreamRole.LOW).images
    return SampleBatch(mix_reconstructions(low_i, low_j), StreamRole.PSEUDO_MIX)


def reconstruct_pseudo(g, xbar):
    """Reconstruct pseudo anomalies with the current generator (no noise)."""
    if xbar.role is not StreamRole.PSEUDO_MIX:
        raise ArgumentError("expected pseudo_mix_Xbar, got {}".format(xbar.role.value))
    return generator_forward(g, xbar, StreamRole.PSEUDO_RECON)


def phase_two_streams(g, g_old, x, variant, rng=None):
    """
    Build the discriminator inputs of one phase-two iteration.
    All streams have the size of `x`; disabled streams are absent.
    Returns
    -------
    dict[StreamRole, SampleBatch]
    """
    streams = {}
    if variant.use_real_x:
        streams[StreamRole.REAL] = x
    if variant.use_recon:
        streams[StreamRole.RECON] = generator_forward(g, x, StreamRole.RECON)
    if variant.use_low:
        streams[StreamRole.LOW] = generator_forward(g_old, x, StreamRole.LOW)
    if variant.use_pseudo:
        i, j = sample_pairs(len(x), rng)
        xbar = make_pseudo_anomaly(g_old, SampleBatch(x.images[i]), SampleBatch(x.images[j]), i, j)
        if variant.raw_mix_as_pseudo:
            streams[StreamRole.PSEUDO_MIX] = xbar
        else:
            streams[StreamRole.PSEUDO_RECON] = reconstruct_pseudo(g, xbar)
    return streams


def phase_two_step(d, streams, hp, opt_d):
    """
    One discriminator update on the phase-two objective.
    Parameters
    ----------
    d : torch.nn.Module
        Live discriminator.
    streams : dict[StreamRole, SampleBatch]
        Good and bad examples; empty batches contribute nothing.
    hp : HyperParams
        Supplies alpha and beta.
    opt_d : torch.optim.Optimizer
        Optimizer over the discriminator only.
    Returns
    -------
    loss : float
    terms : dict[str, float]
        Weighted contribution of every stream.
    """
    dtype = next(d.parameters()).dtype
    for role, batch in streams.items():
        if batch.role is not StreamRole(role):
            raise ArgumentError("stream {} carries a {} batch".format(StreamRole(role).value, batch.role.value))
        quasi_ground_truth(batch.role, Phase.TWO)
    opt_d.zero_grad()
    scores = {role: d(batch.images.to(dtype)) for role, batch in streams.items() if len(batch)}
    loss, terms = phase_two_loss(scores, hp.alpha, hp.beta)
    _check_finite({"phase": "two"}, d_loss=loss)
    loss.backward()
    opt_d.step()
    return loss.item(), {StreamRole(k).value: v.item() for k, v in terms.items()}


def _loader(images, hp, num_workers):
    dataset = TensorDataset(images)
    batch_size = min(hp.batch_size, len(dataset))
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=True,
        num_workers=num_workers,
        generator=torch.Generator().manual_seed(hp.seed),
        # a trailing batch of one breaks batch normalisation
        drop_last=len(dataset) % batch_size == 1 and len(dataset) > 1,
    )


def run_phase_one(config, train_images, run_dir=None, epochs=None, dtype=torch.float32):
    """
    Adversarial training of generator and discriminator.
    Parameters
    ----------
    config : ExperimentConfig
        Hyper parameters, architecture and run options.
    train_images : array_like
        (N, C, H, W) inlier images in [0, 1].
    run_dir : str, optional
        If given, every epoch's snapshots are written below
        ``checkpoints/phase_one`` and the losses to ``losses.jsonl``.
    epochs : int, optional
        Overrides ``phase1_epochs``.
    Returns
    -------
    PhaseOneResult
        One generator and one discriminator snapshot per epoch.
    """
    hp = config.hyper
    epochs = epochs or hp.phase1_epochs
    images = _as_tensor(train_images, dtype)
    if images.shape[0] == 0:
        raise ArgumentError("phase one needs a non-empty training set")
    rng = seed_everything(hp.seed, config.run.deterministic)
    g = build_module(config.arch, Role.GENERATOR, dtype)
    d = build_module(config.arch, Role.DISCRIMINATOR, dtype)
    opt_g = torch.optim.Adam(g.parameters(), lr=hp.lr_g)
    opt_d = torch.optim.Adam(d.parameters(), lr=hp.lr_d_phase1)
    loader = _loader(images, hp, config.run.num_workers)
    trace = LossTrace(os.path.join(run_dir, LOSS_FILE) if run_dir else None)
    ckpt_dir = os.path.join(run_dir, "checkpoints", "phase_one") if run_dir else None
    result = PhaseOneResult([], [])
    step = 0
    for epoch in range(1, epochs + 1):
        g.train()
        d.train()
        sums = np.zeros(4)
        n_batches = 0
        for (x,) in tqdm(loader, desc="phase one {}/{}".format(epoch, epochs),
                         leave=False, disable=progress_disabled(logger)):
            losses = phase_one_step(g, d, SampleBatch(x), hp, opt_g, opt_d, rng)
            step += 1
            trace.append(Phase.ONE, step, epoch, **losses._asdict())
            logger.debug("epoch %d step %d %s", epoch, step, losses)
            sums += losses
            n_batches += 1
        tag = Provenance(Phase.ONE, epoch, 0)
        g_snap = snapshot_parameters(g, tag)
        d_snap = snapshot_parameters(d, tag)
        result.generators.append(g_snap)
        result.discriminators.append(d_snap)
        if ckpt_dir:
            result.checkpoint_paths += [save_checkpoint(g_snap, ckpt_dir), save_checkpoint(d_snap, ckpt_dir)]
        means = dict(zip(PhaseOneLosses._fields, sums / max(n_batches, 1)))
        logger.info("phase one epoch %d/%d: d=%.4f g_adv=%.4f recon=%.5f", epoch, epochs,
                    means["d_loss"], means["g_adv_loss"], means["recon_loss"])
    result.losses = trace.records
    return result


def build_g_old(result, strategy, current_epoch=None):
    """
    Old generator for phase two.
    Parameters
    ----------
    result : PhaseOneResult
        Phase-one snapshots.
    strategy : GOldStrategy
        fixed_epoch(k) returns the snapshot of epoch k; average_all_previous
        returns the mean of epochs 1 .. current_epoch - 1.
    current_epoch : int, optional
        Epoch of the generator used in phase two, the last one by default.
    Returns
    -------
    ModelState
    """
    if strategy.kind == "fixed_epoch":
        return result.generator(strategy.epoch)
    if strategy.kind != "average_all_previous":
        raise ArgumentError("unknown g_old strategy {!r}".format(strategy.kind))
    current = result.epochs if current_epoch is None else current_epoch
    if not 1 <= current <= result.epochs:
        raise ArgumentError("epoch {} not in 1..{}".format(current, result.epochs))
    previous = result.generators[:current - 1]
    if not previous:
        raise ArgumentError("no generator precedes epoch {}".format(current))
    return average_parameters(previous)


def checkpoint_iterations(total, every):
    """Iterations at which phase two stores the discriminator: 0, multiples of `every`, and the last."""
    if every < 1:
        raise ArgumentError("checkpoint interval must be >= 1")
    return sorted({0, total} | set(range(every, total + 1, every)))


def run_phase_two(config, g, g_old, d, variant, train_images, run_dir=None, label=None,
                  iterations=None, rng=None):
    """
    Retrain the discriminator on good and bad reconstructions.
    Parameters
    ----------
    config : ExperimentConfig
        Supplies alpha, beta, lr_d_phase2, phase2_iterations,
        phase2_batch_size and the checkpoint interval.
    g, g_old : ModelState
        Frozen current and old generator.
    d : ModelState
        Discriminator to start from (usually the one of g's epoch).
    variant : AblationVariant
        Streams to use.
    train_images : array_like
        Inlier training images.
    run_dir : str, optional
        Root of the checkpoint and loss files.
    label : str, optional
        Sub directory of this run below ``checkpoints/phase_two``.
    iterations : int, optional
        Overrides ``phase2_iterations``.
    rng : torch.Generator, optional
        Source of batch sampling and pairing.
    Returns
    -------
    PhaseTwoResult
        Final discriminator and its checkpoint series.
    """
    if variant is None:
        raise ArgumentError("the baseline variant has no phase two")
    variant.validate()
    hp = config.hyper
    iterations = hp.phase2_iterations if iterations is None else iterations
    schedule = set(checkpoint_iterations(iterations, config.run.phase2_checkpoint_every))
    images = _as_tensor(train_images, d.dtype)
    n = images.shape[0]
    if n < 2:
        raise ArgumentError("phase two needs at least two training images")
    batch_size = min(hp.phase2_batch_size, n)
    rng = rng if rng is not None else torch.Generator().manual_seed(hp.seed + 1)
    g_hash, g_old_hash = g.content_hash(), g_old.content_hash()

    live = build_module(d.arch, Role.DISCRIMINATOR, d.dtype)
    live.load_state_dict(d.parameters)
    live.train()
    opt_d = torch.optim.Adam(live.parameters(), lr=hp.lr_d_phase2)
    ckpt_dir = None
    trace = LossTrace(None)
    if run_dir:
        ckpt_dir = os.path.join(run_dir, "checkpoints", "phase_two", *([label] if label else []))
        trace = LossTrace(os.path.join(run_dir, LOSS_FILE))
    epoch = d.provenance.epoch
    result = PhaseTwoResult(None, [], generator_hash=g_hash, g_old_hash=g_old_hash)

    def checkpoint(it):
        snap = snapshot_parameters(live, Provenance(Phase.TWO, epoch, it))
        result.checkpoints.append(snap)
        if ckpt_dir:
            result.checkpoint_paths.append(save_checkpoint(snap, ckpt_dir))

    checkpoint(0)
    for it in tqdm(range(1, iterations + 1), desc="phase two", leave=False,
                   disable=progress_disabled(logger)):
        idx = torch.randperm(n, generator=rng)[:batch_size]
        streams = phase_two_streams(g, g_old, SampleBatch(images[idx]), variant, rng)
        loss, terms = phase_two_step(live, streams, hp, opt_d)
        trace.append(Phase.TWO, it, epoch, d_loss=loss, **terms)
        logger.debug("phase two iteration %d loss %.5f", it, loss)
        if it in schedule:
            checkpoint(it)

    if g.content_hash() != g_hash or g_old.content_hash() != g_old_hash:
        raise RetargetError("a generator changed during phase two")
    result.discriminator = result.checkpoints[-1]
    result.losses = trace.records
    logger.info("phase two from epoch %d done: %d iterations, last loss %s", epoch, iterations,
                "%.4f" % trace.records[-1]["d_loss"] if trace.records else "n/a")
    return result


def variant_as_dict(variant):
    return None if variant is None else asdict(variant)


def expected_checkpoints(phase1_epochs, phase2_iterations, every):
    """Discriminator checkpoints of a train run: one per epoch plus the phase-two series."""
    return phase1_epochs + int(math.ceil(phase2_iterations / every)) + 1


__all__ = [
    "AblationVariant", "GOldStrategy", "LossTrace", "PhaseOneLosses", "PhaseOneResult",
    "PhaseTwoResult", "VARIANT_PRESETS", "build_g_old", "checkpoint_iterations",
    "expected_checkpoints", "make_pseudo_anomaly", "mix_reconstructions", "phase_one_discriminator_loss",
    "phase_one_generator_loss", "phase_one_step", "phase_two_step", "phase_two_streams", "reconstruct_pseudo",
    "run_phase_one", "run_phase_two", "sample_pairs", "variant_as_dict", "variant_from_name",
]
