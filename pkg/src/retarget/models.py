"""
Generator and discriminator networks, their parameter snapshots and the
operations that combine snapshots.

A live network is an ordinary `torch.nn.Module` owned by the trainer. Every
persisted or shared state is a `ModelState`: a detached, ordered copy of the
module's tensors together with the architecture it belongs to and where in
training it was taken.
"""
import enum
import json
import logging
import os
import pickle
from collections import OrderedDict
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from typing import Tuple

import torch
from torch import nn

from retarget.core import IMAGE_RANGE
from retarget.core import ArgumentError
from retarget.core import CheckpointError
from retarget.core import ConfigurationError
from retarget.core import NumericError
from retarget.utils import rangecheck
from retarget.utils import tensor_digest

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "parameters.pt"


class Role(str, enum.Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"


class Phase(str, enum.Enum):
    ONE = "one"
    TWO = "two"


class StreamRole(str, enum.Enum):
    """What a batch of images is, with respect to the training streams."""

    REAL = "real_X"
    NOISY = "noisy_X"
    RECON = "recon_Xhat"
    LOW = "low_Xhat"
    PSEUDO_MIX = "pseudo_mix_Xbar"
    PSEUDO_RECON = "pseudo_recon_Xpseudo"


# Target of the discriminator per stream: 0 for good, 1 for bad/fake.
QUASI_GROUND_TRUTH = {
    Phase.ONE: {
        StreamRole.REAL: 0,
        StreamRole.RECON: 1,
    },
    Phase.TWO: {
        StreamRole.REAL: 0,
        StreamRole.RECON: 0,
        StreamRole.LOW: 1,
        StreamRole.PSEUDO_RECON: 1,
        # only fed when the raw mixture replaces the pseudo reconstruction
        StreamRole.PSEUDO_MIX: 1,
    },
}

NONLINEARITIES = {
    "leaky_relu": lambda: nn.LeakyReLU(0.2),
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
}

OUTPUT_ACTIVATIONS = {
    "sigmoid": nn.Sigmoid,
    "hardsigmoid": nn.Hardsigmoid,
}


def quasi_ground_truth(role, phase):
    """Discriminator target for a stream in a training phase.

    Parameters
    ----------
    role : StreamRole
        Stream the batch belongs to.
    phase : Phase
        Training phase.

    Returns
    -------
    int
        0 for examples the discriminator should call good, 1 for bad ones.

    Raises
    ------
    ArgumentError
        If the stream is never shown to the discriminator in that phase.
    """
    try:
        return QUASI_GROUND_TRUTH[Phase(phase)][StreamRole(role)]
    except KeyError:
        raise ArgumentError("stream {} is not fed to the discriminator in phase {}".format(
            StreamRole(role).value, Phase(phase).value))


@dataclass(frozen=True)
class Provenance:
    phase: Phase = Phase.ONE
    epoch: int = 0
    iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase))
        if self.epoch < 0 or self.iteration < 0:
            raise ArgumentError("provenance epoch and iteration must be >= 0")

    def to_dict(self):
        return {"phase": self.phase.value, "epoch": self.epoch, "iteration": self.iteration}


@dataclass(frozen=True)
class ArchitectureSpec:
    """Layer layout shared by the generator and the discriminator.

    The generator is a convolutional encoder (one block per entry of
    `encoder_channels`) followed by a mirrored transposed-convolution decoder
    whose output activation keeps reconstructions inside the image range. The
    discriminator is a stack of convolutional blocks (`discriminator_channels`)
    and a single sigmoid unit.
    """

    input_size: Tuple[int, int, int] = (1, 32, 32)
    encoder_channels: Tuple[int, ...] = (32, 64, 128, 256)
    discriminator_channels: Tuple[int, ...] = (32, 64, 128, 256)
    kernel_size: int = 4
    stride: int = 2
    padding: int = 1
    nonlinearity: str = "leaky_relu"
    batch_norm: bool = True
    output_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))
        object.__setattr__(self, "discriminator_channels",
                           tuple(int(v) for v in self.discriminator_channels))

    def validate(self):
        """Raise ConfigurationError if the layout cannot be built."""
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ConfigurationError("input_size must be three positive ints (C, H, W)")
        if not self.encoder_channels or not self.discriminator_channels:
            raise ConfigurationError("at least one encoder and one discriminator block is required")
        if min(self.encoder_channels + self.discriminator_channels) < 1:
            raise ConfigurationError("channel widths must be positive")
        if self.stride < 1 or self.kernel_size < 1 or self.padding < 0:
            raise ConfigurationError("kernel_size and stride must be >= 1, padding >= 0")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigurationError("unknown nonlinearity {!r}".format(self.nonlinearity))
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigurationError("unknown output_activation {!r}".format(self.output_activation))
        self.spatial_sizes(len(self.encoder_channels))
        self.spatial_sizes(len(self.discriminator_channels))
        self.output_paddings()
        return self

    def conv_out(self, size):
        return (size + 2 * self.padding - self.kernel_size) // self.stride + 1

    def spatial_sizes(self, n_blocks):
        """Spatial (H, W) after each of `n_blocks` strided convolutions."""
        sizes = [tuple(self.input_size[1:])]
        for _ in range(n_blocks):
            h, w = (self.conv_out(s) for s in sizes[-1])
            if h < 1 or w < 1:
                raise ConfigurationError(
                    "input {} is too small for {} blocks".format(self.input_size, n_blocks))
            sizes.append((h, w))
        return sizes

    def output_paddings(self):
        """Output padding per decoder block so the decoder mirrors the encoder exactly."""
        sizes = self.spatial_sizes(len(self.encoder_channels))
        paddings = []
        for small, large in zip(reversed(sizes[1:]), reversed(sizes[:-1])):
            pad = []
            for s, target in zip(small, large):
                base = (s - 1) * self.stride - 2 * self.padding + self.kernel_size
                op = target - base
                if not 0 <= op < max(self.stride, 1):
                    raise ConfigurationError(
                        "decoder cannot restore size {} from {} with this kernel/stride".format(target, s))
                pad.append(op)
            paddings.append(tuple(pad))
        return paddings

    def to_dict(self):
        d = asdict(self)
        for k in ("input_size", "encoder_channels", "discriminator_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _block(conv, channels, arch, normalize):
    layers = [conv]
    if normalize and arch.batch_norm:
        layers.append(nn.BatchNorm2d(channels))
    layers.append(NONLINEARITIES[arch.nonlinearity]())
    return nn.Sequential(*layers)


class Generator(nn.Module):
    """Denoising auto-encoder mapping images to reconstructions of the same shape."""

    role = Role.GENERATOR

    def __init__(self, arch):
        super().__init__()
        self.arch = arch.validate()
        k, s, p = arch.kernel_size, arch.stride, arch.padding
        widths = (arch.input_size[0],) + arch.encoder_channels
        self.encoder = nn.Sequential(*[
            _block(nn.Conv2d(c_in, c_out, k, s, p), c_out, arch, normalize=i > 0)
            for i, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:]))
        ])
        paddings = arch.output_paddings()
        blocks = []
        for i, (c_in, c_out) in enumerate(zip(reversed(widths[1:]), reversed(widths[:-1]))):
            deconv = nn.ConvTranspose2d(c_in, c_out, k, s, p, output_padding=paddings[i])
            if i == len(paddings) - 1:
                blocks.append(nn.Sequential(deconv, OUTPUT_ACTIVATIONS[arch.output_activation]()))
            else:
                blocks.append(_block(deconv, c_out, arch, normalize=True))
        self.decoder = nn.Sequential(*blocks)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class Discriminator(nn.Module):
    """Convolutional classifier with one sigmoid output per image."""

    role = Role.DISCRIMINATOR

    def __init__(self, arch):
        super().__init__()
        self.arch = arch.validate()
        k, s, p = arch.kernel_size, arch.stride, arch.padding
        widths = (arch.input_size[0],) + arch.discriminator_channels
        self.features = nn.Sequential(*[
            _block(nn.Conv2d(c_in, c_out, k, s, p), c_out, arch, normalize=i > 0)
            for i, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:]))
        ])
        h, w = arch.spatial_sizes(len(arch.discriminator_channels))[-1]
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(widths[-1] * h * w, 1), nn.Sigmoid())

    def forward(self, x):
        return self.head(self.features(x)).view(-1)


def build_module(arch, role, dtype=torch.float32):
    """Create a freshly initialised network for `role`."""
    cls = Generator if Role(role) is Role.GENERATOR else Discriminator
    return cls(arch).to(dtype)


@dataclass
class ModelState:
    """Named, detached parameter collection of a generator or discriminator.

    Parameters
    ----------
    name : str
        Human readable identifier, also used as checkpoint directory name.
    role : Role
        Which network the parameters belong to.
    arch : ArchitectureSpec
        Layout the parameters were created for.
    parameters : OrderedDict[str, torch.Tensor]
        State dict of the network (parameters and buffers).
    provenance : Provenance
        Phase, epoch and iteration at which the snapshot was taken.
    """

    name: str
    role: Role
    arch: ArchitectureSpec
    parameters: "OrderedDict[str, torch.Tensor]"
    provenance: Provenance = field(default_factory=Provenance)
    _module: nn.Module = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.role = Role(self.role)

    @classmethod
    def from_module(cls, module, provenance, name=None):
        tensors = OrderedDict((k, v.detach().clone()) for k, v in module.state_dict().items())
        if name is None:
            name = default_name(module.role, provenance)
        return cls(name, module.role, module.arch, tensors, provenance)

    @property
    def dtype(self):
        return next(iter(self.parameters.values())).dtype

    def layer_shapes(self):
        return OrderedDict((k, tuple(v.shape)) for k, v in self.parameters.items())

    def validate(self):
        """Check names and shapes against the declared architecture."""
        expected = OrderedDict(
            (k, tuple(v.shape)) for k, v in build_module(self.arch, self.role).state_dict().items())
        if expected != self.layer_shapes():
            raise ConfigurationError(
                "parameters of {} do not match its architecture".format(self.name))
        return self

    def content_hash(self):
        return tensor_digest(self.parameters)

    def check_finite(self):
        for k, v in self.parameters.items():
            if v.is_floating_point() and not torch.isfinite(v).all():
                raise NumericError("non-finite parameter", {"model": self.name, "parameter": k})

    def build(self):
        """Network in eval mode carrying these parameters (cached)."""
        if self._module is None:
            module = build_module(self.arch, self.role, self.dtype)
            module.load_state_dict(self.parameters)
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)
            self._module = module
        return self._module


def default_name(role, provenance):
    return "{}_phase{}_e{:03d}_i{:03d}".format(
        Role(role).value, provenance.phase.value, provenance.epoch, provenance.iteration)


@dataclass(frozen=True)
class SampleBatch:
    """A batch of images in [0, 1] tagged with the stream it belongs to."""

    images: torch.Tensor
    role: StreamRole = StreamRole.REAL

    def __post_init__(self):
        object.__setattr__(self, "role", StreamRole(self.role))
        if self.images.dim() != 4:
            raise ArgumentError("images must be shaped (N, C, H, W), got {}".format(
                tuple(self.images.shape)))

    def __len__(self):
        return self.images.shape[0]

    def quasi_gt(self, phase):
        return quasi_ground_truth(self.role, phase)

    def targets(self, phase):
        return torch.full((len(self),), float(self.quasi_gt(phase)),
                          dtype=self.images.dtype, device=self.images.device)

    def with_images(self, images, role=None):
        return SampleBatch(images, self.role if role is None else role)


def _as_module(model, role):
    if isinstance(model, ModelState):
        if model.role is not role:
            raise ConfigurationError("expected a {} state, got {}".format(role.value, model.role.value))
        model.check_finite()
        return model.build()
    if getattr(model, "role", None) is not role:
        raise ConfigurationError("expected a {} network".format(role.value))
    return model


def _check_input(module, batch):
    expected = tuple(module.arch.input_size)
    if tuple(batch.images.shape[1:]) != expected:
        raise ConfigurationError("batch shape {} does not match input size {}".format(
            tuple(batch.images.shape[1:]), expected))
    dtype = next(module.parameters()).dtype
    return batch.images.to(dtype)


def generator_forward(g, batch, role=StreamRole.RECON):
    """Reconstruct a batch with a generator.

    Parameters
    ----------
    g : ModelState or Generator
        Generator state (evaluated in eval mode) or a live network.
    batch : SampleBatch
        Images sized for the generator.
    role : StreamRole, optional
        Role of the returned batch, reconstruction by default.

    Returns
    -------
    SampleBatch
        Reconstructions, same shape as the input, values in [0, 1].
    """
    module = _as_module(g, Role.GENERATOR)
    x = _check_input(module, batch)
    with torch.no_grad():
        out = module(x)
    return SampleBatch(out, role)


def discriminator_forward(d, batch):
    """Score a batch with a discriminator.

    Returns
    -------
    torch.Tensor
        One score in [0, 1] per image.
    """
    module = _as_module(d, Role.DISCRIMINATOR)
    x = _check_input(module, batch)
    with torch.no_grad():
        return module(x)


def snapshot_parameters(model, tag, name=None):
    """Deep copy of a live network or state with new provenance.

    Later optimizer updates of `model` never reach the snapshot.
    """
    if isinstance(model, ModelState):
        tensors = OrderedDict((k, v.detach().clone()) for k, v in model.parameters.items())
        return ModelState(name or default_name(model.role, tag), model.role, model.arch, tensors, tag)
    return ModelState.from_module(model, tag, name=name)


def average_parameters(states, name=None):
    """Uniform element-wise mean of several states of one architecture.

    The mean is taken over values sorted per element and anchored at the
    smallest one, which makes it independent of the order of `states` and
    exact when all states are identical. Integer buffers keep their largest
    value.

    Parameters
    ----------
    states : list of ModelState
        At least one state; all must share role and architecture.
    name : str, optional
        Name of the result.

    Returns
    -------
    ModelState
        Averaged parameters, provenance of the latest input epoch.
    """
    states = list(states)
    if not states:
        raise ArgumentError("cannot average an empty list of states")
    first = states[0]
    for s in states[1:]:
        if s.arch != first.arch or s.role is not first.role:
            raise ArgumentError("states {} and {} have different architectures".format(first.name, s.name))
        if list(s.parameters) != list(first.parameters):
            raise ArgumentError("states {} and {} have different parameter names".format(first.name, s.name))
    k = len(states)
    averaged = OrderedDict()
    for key in first.parameters:
        stacked = torch.stack([s.parameters[key] for s in states])
        if not stacked.is_floating_point():
            averaged[key] = stacked.max(dim=0).values.clone()
            continue
        ordered = torch.sort(stacked, dim=0).values
        anchor = ordered[0]
        averaged[key] = anchor + (ordered - anchor).sum(dim=0) / k
    epoch = max(s.provenance.epoch for s in states)
    tag = Provenance(Phase.ONE, epoch, 0)
    if name is None:
        name = "{}_average_{}_states_e{:03d}".format(first.role.value, k, epoch)
    return ModelState(name, first.role, first.arch, averaged, tag)


def gaussian_noise(shape, sigma, rng=None, dtype=torch.float32):
    """Raw zero-mean Gaussian draws with standard deviation `sigma`."""
    return torch.randn(tuple(shape), generator=rng, dtype=dtype) * sigma


@rangecheck(sigma=(0, None))
def add_noise(batch, sigma, rng=None):
    """Corrupt a batch with Gaussian noise and clamp to the image range.

    Parameters
    ----------
    batch : SampleBatch
        Clean images.
    sigma : float
        Standard deviation of the noise, >= 0.
    rng : torch.Generator, optional
        Source of randomness.

    Returns
    -------
    SampleBatch
        Noisy images with role `noisy_X`.
    """
    images = batch.images
    if sigma > 0:
        noise = gaussian_noise(images.shape, sigma, rng, images.dtype).to(images.device)
        images = torch.clamp(images + noise, *IMAGE_RANGE)
    return SampleBatch(images.clone(), StreamRole.NOISY)


def save_checkpoint(state, directory):
    """Write a state as a checkpoint archive.

    The archive is a directory holding a human readable manifest (format
    version, architecture, provenance, parameter names/shapes/dtypes and the
    content hash) and the parameter payload.

    Returns
    -------
    str
        Path of the archive directory.
    """
    path = os.path.join(directory, state.name)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "name": state.name,
        "role": state.role.value,
        "arch": state.arch.to_dict(),
        "provenance": state.provenance.to_dict(),
        "parameters": [
            {"name": k, "shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
            for k, v in state.parameters.items()
        ],
        "content_hash": state.content_hash(),
    }
    try:
        os.makedirs(path, exist_ok=True)
        torch.save(state.parameters, os.path.join(path, PAYLOAD_NAME))
        with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf8") as fh:
            json.dump(manifest, fh, indent=2)
    except OSError as exc:
        raise CheckpointError("cannot write checkpoint {}: {}".format(path, exc))
    logger.debug("saved %s (%s)", path, manifest["content_hash"][:12])
    return path


def load_checkpoint(path):
    """Read a checkpoint archive and verify its content hash.

    Raises
    ------
    CheckpointError
        If the archive is missing, of another format version or corrupted.
    """
    try:
        with open(os.path.join(path, MANIFEST_NAME), encoding="utf8") as fh:
            manifest = json.load(fh)
        tensors = torch.load(os.path.join(path, PAYLOAD_NAME), map_location="cpu", weights_only=True)
    except (OSError, ValueError, RuntimeError, pickle.UnpicklingError) as exc:
        raise CheckpointError("cannot read checkpoint {}: {}".format(path, exc))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError("{}: unsupported format version {!r}".format(
            path, manifest.get("format_version")))
    listed = [p["name"] for p in manifest["parameters"]]
    if listed != list(tensors):
        raise CheckpointError("{}: payload does not match the manifest".format(path))
    state = ModelState(
        manifest["name"],
        Role(manifest["role"]),
        ArchitectureSpec.from_dict(manifest["arch"]),
        OrderedDict(tensors),
        Provenance(**manifest["provenance"]),
    )
    if state.content_hash() != manifest["content_hash"]:
        raise CheckpointError("{}: content hash mismatch".format(path))
    return state
