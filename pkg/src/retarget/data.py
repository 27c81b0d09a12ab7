"""
Dataset protocols: which images are inliers, which are outliers and how
they are split for training and testing.

Every builder is a pure function of its source data, its arguments and a
seed. Images leave this module as float32 arrays shaped (N, C, H, W) with
values in [0, 1].
"""
import logging
import math
import os
from dataclasses import dataclass
from dataclasses import field
from typing import List
from typing import Optional

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image

from retarget.core import ArgumentError
from retarget.utils import rangecheck

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".pgm")
LABELS_FILE = "labels.txt"
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class LabelledImages:
    """Raw images with integer class labels and where each came from."""

    images: np.ndarray
    labels: np.ndarray
    sources: List[str]


@dataclass
class VideoClip:
    """Grayscale frames (T, H, W) in [0, 1] with optional per-frame labels."""

    name: str
    frames: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class ProtocolSplit:
    """Train and test data of one protocol.

    `train` holds inliers only. `test_labels` is True for outliers. Video
    protocols test on whole clips, kept in `test_clips`.
    """

    train: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    metadata: dict
    train_sources: List[str] = field(default_factory=list)
    test_sources: List[str] = field(default_factory=list)
    test_clips: List[VideoClip] = field(default_factory=list)


@dataclass
class Patch:
    row: int
    col: int
    image: np.ndarray


@dataclass
class PatchGrid:
    """Patches of one frame and the motion-filter verdict of each."""

    frame_index: int
    patches: List[Patch]
    kept: np.ndarray

    def kept_patches(self):
        return [p for p, k in zip(self.patches, self.kept) if k]


def to_unit_range(image):
    """
    Scale pixel values to [0, 1].
    8-bit data is divided by 255 whatever its integer dtype; uint16 data and
    integer data above 255 by 65535. Float images are clipped.
    Raises
    ------
    ArgumentError
        For negative or out-of-range integers and non-numeric dtypes.
    """
    image = np.asarray(image)
    if np.issubdtype(image.dtype, np.floating):
        return np.clip(image.astype(np.float32), 0.0, 1.0)
    if image.dtype == np.bool_ or not np.issubdtype(image.dtype, np.integer):
        raise ArgumentError("unsupported pixel dtype {}".format(image.dtype))
    low, high = (int(image.min()), int(image.max())) if image.size else (0, 0)
    if low < 0 or high > 65535:
        raise ArgumentError("integer pixels must lie in 0..65535, got {}..{}".format(low, high))
    depth = 65535 if image.dtype == np.uint16 or high > 255 else 255
    return image.astype(np.float32) / np.float32(depth)


def resize_and_normalize(image, target):
    """
    Adapt an image to a network input size.
    Parameters
    ----------
    image : array_like
        (H, W) or (H, W, C) image, 8-bit or float in [0, 1].
    target : tuple of int
        (C, H, W) of the result; C = 1 converts color input to grayscale.
    Returns
    -------
    numpy.ndarray
        float32 (C, H, W) image with values in [0, 1], resized bilinearly.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ArgumentError("cannot resize an empty image")
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ArgumentError("expected an (H, W) or (H, W, C) image, got shape {}".format(image.shape))
    c_out, h_out, w_out = target
    pixels = to_unit_range(image)
    c_in = pixels.shape[2]
    if c_out == 1 and c_in >= 3:
        pixels = (pixels[:, :, :3].astype(np.float64) @ LUMA).astype(np.float32)[:, :, None]
    elif c_out == 3 and c_in == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    elif c_out == 3 and c_in == 4:
        pixels = pixels[:, :, :3]
    elif c_out != c_in:
        raise ArgumentError("cannot convert {} channels to {}".format(c_in, c_out))
    chw = np.ascontiguousarray(np.transpose(pixels, (2, 0, 1)))
    if chw.shape[1:] == (h_out, w_out):
        return chw
    resized = F.interpolate(torch.from_numpy(chw)[None], size=(h_out, w_out),
                            mode="bilinear", align_corners=False)[0]
    return torch.clamp(resized, 0.0, 1.0).numpy()


def resize_all(images, target):
    """Apply `resize_and_normalize` to a stack of (H, W) or (H, W, C) images."""
    if len(images) == 0:
        return np.zeros((0,) + tuple(target), dtype=np.float32)
    return np.stack([resize_and_normalize(im, target) for im in images])


def load_image(path):
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        return np.asarray(im)


def list_images(directory):
    return sorted(
        os.path.join(directory, name) for name in os.listdir(directory)
        if name.lower().endswith(IMAGE_EXTENSIONS))


def load_mnist(root):
    """Read the MNIST train and test sets from `root` (no download)."""
    from torchvision.datasets import MNIST

    parts = []
    for train in (True, False):
        try:
            ds = MNIST(root, train=train, download=False)
        except RuntimeError as exc:
            raise ArgumentError("MNIST not found under {}: {}".format(root, exc))
        prefix = "mnist/{}".format("train" if train else "test")
        parts.append(LabelledImages(
            ds.data.numpy(), ds.targets.numpy(),
            ["{}/{}".format(prefix, i) for i in range(len(ds))]))
    return parts[0], parts[1]


def outlier_count(n_inliers, outlier_ratio):
    """Number of outliers so that outliers / (inliers + outliers) = ratio, rounded."""
    return int(math.floor(n_inliers * outlier_ratio / (1.0 - outlier_ratio) + 0.5))


@rangecheck(inlier_digit=(0, 9), outlier_ratio=(0.1, 0.5))
def build_mnist_protocol(train, test, inlier_digit, outlier_ratio, seed=0, target=None):
    """
    One digit is the inlier class, other digits are test outliers.
    Parameters
    ----------
    train, test : LabelledImages
        MNIST training and test sets.
    inlier_digit : int
        Digit used as inlier class, 0..9.
    outlier_ratio : float
        Fraction of outliers in the final test mixture, 0.1..0.5.
    seed : int, optional
        Seed of the outlier sampling.
    target : tuple of int, optional
        (C, H, W) the images are resized to; native size if None.
    Returns
    -------
    ProtocolSplit
        Train: all training images of the digit. Test: all test images of
        the digit followed by the sampled outliers.
    """
    rng = np.random.default_rng(seed)
    train_idx = np.flatnonzero(train.labels == inlier_digit)
    inlier_idx = np.flatnonzero(test.labels == inlier_digit)
    other_idx = np.flatnonzero(test.labels != inlier_digit)
    n_out = outlier_count(inlier_idx.size, outlier_ratio)
    if n_out > other_idx.size:
        raise ArgumentError("need {} outliers, only {} available".format(n_out, other_idx.size))
    outlier_idx = np.sort(rng.choice(other_idx, size=n_out, replace=False))
    test_idx = np.concatenate([inlier_idx, outlier_idx])
    target = target or (1,) + tuple(train.images.shape[1:3])
    split = ProtocolSplit(
        train=resize_all(train.images[train_idx], target),
        test=resize_all(test.images[test_idx], target),
        test_labels=np.concatenate([np.zeros(inlier_idx.size, bool), np.ones(n_out, bool)]),
        metadata={"protocol": "mnist", "inlier_classes": [int(inlier_digit)],
                  "outlier_ratio": float(outlier_ratio), "seed": int(seed)},
        train_sources=[train.sources[i] for i in train_idx],
        test_sources=[test.sources[i] for i in test_idx],
    )
    logger.info("mnist digit %d: %d train, %d test inliers, %d outliers",
                inlier_digit, train_idx.size, inlier_idx.size, n_out)
    return split


def build_folder_protocol(root, n_inlier_classes, max_per_class=150, seed=0,
                          outlier_class="257.clutter", target=(1, 32, 32), test_fraction=None):
    """
    Class-per-directory protocol with a designated outlier directory.
    `n_inlier_classes` directories are drawn at random (outlier directory
    excluded) and at most `max_per_class` images are taken from each. With
    `test_fraction` None the inliers are used for training and testing
    alike; otherwise that fraction of every class is held out for testing.
    Outliers are drawn from the outlier directory so that the test set is
    exactly half outliers.
    Returns
    -------
    ProtocolSplit
    """
    if n_inlier_classes not in (1, 3, 5):
        raise ArgumentError("n_inlier_classes must be 1, 3 or 5, got {}".format(n_inlier_classes))
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if outlier_class not in classes:
        raise ArgumentError("outlier directory {!r} not found in {}".format(outlier_class, root))
    candidates = [c for c in classes if c != outlier_class]
    if len(candidates) < n_inlier_classes:
        raise ArgumentError("only {} inlier classes available".format(len(candidates)))
    rng = np.random.default_rng(seed)
    chosen = sorted(candidates[i] for i in rng.choice(len(candidates), n_inlier_classes, replace=False))
    train_paths, test_inlier_paths = [], []
    for c in chosen:
        files = list_images(os.path.join(root, c))
        picked = [files[i] for i in rng.permutation(len(files))[:max_per_class]]
        if test_fraction is None:
            train_paths += picked
            test_inlier_paths += picked
        else:
            n_test = max(1, int(round(len(picked) * test_fraction)))
            test_inlier_paths += picked[:n_test]
            train_paths += picked[n_test:]
    outlier_files = list_images(os.path.join(root, outlier_class))
    n_out = len(test_inlier_paths)
    if n_out > len(outlier_files):
        raise ArgumentError("need {} outlier images, {!r} holds {}".format(
            n_out, outlier_class, len(outlier_files)))
    outlier_paths = [outlier_files[i] for i in np.sort(rng.choice(len(outlier_files), n_out, replace=False))]
    test_paths = test_inlier_paths + outlier_paths
    split = ProtocolSplit(
        train=resize_all([load_image(p) for p in train_paths], target),
        test=resize_all([load_image(p) for p in test_paths], target),
        test_labels=np.concatenate([np.zeros(len(test_inlier_paths), bool), np.ones(n_out, bool)]),
        metadata={"protocol": "folder", "inlier_classes": chosen, "outlier_ratio": 0.5,
                  "seed": int(seed)},
        train_sources=train_paths,
        test_sources=test_paths,
    )
    logger.info("folder protocol %s: %d train, %d test", chosen, len(train_paths), len(test_paths))
    return split


SYNTHETIC_PATTERNS = ("fixed", "mixed")


def synthetic_image(rng, size, positions, noise=0.05):
    image = rng.uniform(0.0, noise, size=(size, size)).astype(np.float32)
    for r, c in positions:
        image[r, c] = rng.uniform(0.9, 1.0)
    return image


def diagonal_pair(rng, size, exclude=None):
    """Two distinct main-diagonal positions, different from the pair `exclude`."""
    while True:
        k = sorted(rng.choice(size, size=2, replace=False).tolist())
        pair = [(k[0], k[0]), (k[1], k[1])]
        if pair != exclude:
            return pair


def mixed_outlier(rng, size, noise):
    first = diagonal_pair(rng, size)
    second = diagonal_pair(rng, size, exclude=first)
    return (synthetic_image(rng, size, first, noise) + synthetic_image(rng, size, second, noise)) / 2


@rangecheck(outlier_ratio=(0.1, 0.5), noise=(0, 1))
def build_synthetic_protocol(n_train=256, n_test_inliers=128, outlier_ratio=0.5, size=8, seed=0,
                             pattern="fixed", noise=0.05):
    """
    Two-pixel pattern data for desk-scale runs.
    With the ``fixed`` pattern inliers carry two bright pixels at fixed
    main-diagonal positions and outliers the same on the anti-diagonal.
    The ``mixed`` pattern draws the two diagonal positions per inlier, and
    every outlier is the pixel-wise mean of two inliers with different
    positions, so outliers overlap the inlier pixels at half brightness.
    The background is uniform noise in [0, `noise`].
    Returns
    -------
    ProtocolSplit
        Images shaped (N, 1, size, size).
    """
    if pattern not in SYNTHETIC_PATTERNS:
        raise ArgumentError("unknown synthetic pattern {!r}".format(pattern))
    if pattern == "mixed" and size < 3:
        raise ArgumentError("the mixed pattern needs images of at least 3x3 pixels")
    rng = np.random.default_rng(seed)
    n_out = outlier_count(n_test_inliers, outlier_ratio)
    if pattern == "fixed":
        a, b = size // 4, (3 * size) // 4
        fixed_inlier, fixed_outlier = [(a, a), (b, b)], [(a, b), (b, a)]

        def inlier():
            return synthetic_image(rng, size, fixed_inlier, noise)

        def outlier():
            return synthetic_image(rng, size, fixed_outlier, noise)
    else:
        def inlier():
            return synthetic_image(rng, size, diagonal_pair(rng, size), noise)

        def outlier():
            return mixed_outlier(rng, size, noise)

    train = np.stack([inlier() for _ in range(n_train)])[:, None]
    test = np.stack([inlier() for _ in range(n_test_inliers)] + [outlier() for _ in range(n_out)])[:, None]
    return ProtocolSplit(
        train=train,
        test=test,
        test_labels=np.concatenate([np.zeros(n_test_inliers, bool), np.ones(n_out, bool)]),
        metadata={"protocol": "synthetic", "inlier_classes": ["diagonal"], "pattern": pattern,
                  "noise": float(noise), "outlier_ratio": float(outlier_ratio), "seed": int(seed)},
        train_sources=["synthetic/train/{}".format(i) for i in range(n_train)],
        test_sources=["synthetic/test/{}".format(i) for i in range(n_test_inliers + n_out)],
    )


def grid_positions(length, patch, stride):
    """
    Top-left offsets of patches along one axis.
    ceil((length - patch + 1) / stride) regular positions, the last one
    snapped to the border.
    Examples
    --------
    >>> grid_positions(240, 45, 45)
    [0, 45, 90, 135, 195]
    """
    n = -(-(length - patch + 1) // stride)
    return [k * stride for k in range(n - 1)] + [length - patch]


def extract_patches(frame, patch=45, stride=25, frame_index=0):
    """
    Cut a grayscale frame into a regular grid of square patches.
    Parameters
    ----------
    frame : numpy.ndarray
        (H, W) grayscale frame.
    patch : int, optional
        Side of the square patches.
    stride : int, optional
        Step between neighbouring patches.
    frame_index : int, optional
        Index stored in the grid.
    Returns
    -------
    PatchGrid
        All patches, every one marked as kept.
    """
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ArgumentError("frame must be a 2-d grayscale image")
    if patch < 1 or stride < 1:
        raise ArgumentError("patch and stride must be >= 1")
    h, w = frame.shape
    if patch > h or patch > w:
        raise ArgumentError("patch {} exceeds frame {}x{}".format(patch, h, w))
    patches = [
        Patch(r, c, frame[r:r + patch, c:c + patch])
        for r in grid_positions(h, patch, stride)
        for c in grid_positions(w, patch, stride)
    ]
    return PatchGrid(frame_index, patches, np.ones(len(patches), dtype=bool))


def motion_filter(prev_frame, frame, grid, threshold=0.005):
    """
    Keep the patches whose region changed since the previous frame.
    A patch is kept iff the mean absolute frame difference over its region
    exceeds `threshold`. Without a previous frame every patch is kept.
    Returns
    -------
    PatchGrid
        Same patches with the new verdicts.
    """
    if prev_frame is None:
        return PatchGrid(grid.frame_index, grid.patches, np.ones(len(grid.patches), dtype=bool))
    prev_frame = np.asarray(prev_frame, dtype=np.float32)
    frame = np.asarray(frame, dtype=np.float32)
    if prev_frame.shape != frame.shape:
        raise ArgumentError("frames differ in size: {} vs {}".format(prev_frame.shape, frame.shape))
    diff = np.abs(frame - prev_frame)
    kept = np.array([
        diff[p.row:p.row + p.image.shape[0], p.col:p.col + p.image.shape[1]].mean() > threshold
        for p in grid.patches
    ], dtype=bool)
    return PatchGrid(grid.frame_index, grid.patches, kept)


def frame_grids(clip, patch=45, stride=25, threshold=0.005):
    """Motion-filtered patch grid of every frame of a clip, in frame order."""
    prev = None
    for t, frame in enumerate(clip.frames):
        grid = extract_patches(frame, patch, stride, frame_index=t)
        yield motion_filter(prev, frame, grid, threshold)
        prev = frame


def load_video(directory):
    """
    Read the frames of one video directory in lexicographic order.
    Per-frame labels (one 0/1 per line) are read from ``labels.txt`` when
    present.
    Returns
    -------
    VideoClip
    """
    paths = list_images(directory)
    if not paths:
        raise ArgumentError("no frames found in {}".format(directory))
    frames = []
    for p in paths:
        image = load_image(p)
        frames.append(resize_and_normalize(image, (1,) + image.shape[:2])[0])
    labels = None
    label_path = os.path.join(directory, LABELS_FILE)
    if os.path.exists(label_path):
        labels = np.loadtxt(label_path, dtype=int, ndmin=1).astype(bool)
        if labels.size != len(frames):
            raise ArgumentError("{} lists {} labels for {} frames".format(label_path, labels.size, len(frames)))
    return VideoClip(os.path.basename(os.path.normpath(directory)), np.stack(frames), labels)


def load_videos(root):
    """All video directories below `root`; ground-truth mask folders are skipped."""
    names = sorted(d for d in os.listdir(root)
                   if os.path.isdir(os.path.join(root, d)) and not d.endswith("_gt"))
    return [load_video(os.path.join(root, d)) for d in names]


def video_training_patches(clips, patch=45, stride=25, threshold=0.005, target=None):
    """
    Motion-filtered patches of normal videos as training images.
    Returns
    -------
    numpy.ndarray
        (N, C, H, W) patches resized to `target` (native patch size if None).
    """
    target = target or (1, patch, patch)
    images = []
    for clip in clips:
        for grid in frame_grids(clip, patch, stride, threshold):
            images += [p.image for p in grid.kept_patches()]
    logger.info("%d training patches from %d videos", len(images), len(clips))
    return resize_all(images, target)


def build_video_protocol(train_root, test_root, patch=45, stride=25, threshold=0.005, target=None):
    """Training patches from normal videos; labelled test clips."""
    train_clips = load_videos(train_root)
    test_clips = load_videos(test_root)
    train = video_training_patches(train_clips, patch, stride, threshold, target)
    return ProtocolSplit(
        train=train,
        test=np.zeros((0,) + tuple(train.shape[1:]), dtype=np.float32),
        test_labels=np.zeros(0, bool),
        metadata={"protocol": "video", "inlier_classes": ["normal"], "outlier_ratio": None,
                  "seed": None, "patch": patch, "stride": stride, "motion_threshold": threshold},
        train_sources=[c.name for c in train_clips],
        test_sources=[c.name for c in test_clips],
        test_clips=test_clips,
    )


def load_protocol(config, target, seed=0):
    """Build the split described by a ProtocolConfig."""
    p = config
    if p.protocol == "synthetic":
        return build_synthetic_protocol(p.synthetic_train, p.synthetic_test_inliers, p.outlier_ratio,
                                        size=target[1], seed=seed, pattern=p.synthetic_pattern,
                                        noise=p.synthetic_noise)
    root = p.resolved_data_root()
    if not os.path.isdir(root):
        raise ArgumentError("data root {} does not exist".format(root))
    if p.protocol == "mnist":
        train, test = load_mnist(root)
        return build_mnist_protocol(train, test, p.inlier_digit, p.outlier_ratio, seed=seed, target=target)
    if p.protocol == "folder":
        return build_folder_protocol(root, p.n_inlier_classes, p.max_per_class, seed=seed,
                                     outlier_class=p.outlier_class, target=target,
                                     test_fraction=p.folder_test_fraction)
    return build_video_protocol(os.path.join(root, p.train_videos), os.path.join(root, p.test_videos),
                                p.patch_size, p.patch_stride, p.motion_threshold, target)


def write_split_manifest(split, path):
    """
    One CSV row per split member: part, position, label and source.
    """
    rows = [("train", i, "inlier", s) for i, s in enumerate(split.train_sources)]
    labels = split.test_labels if len(split.test_labels) else [None] * len(split.test_sources)
    rows += [("test", i, None if lab is None else ("outlier" if lab else "inlier"), s)
             for i, (lab, s) in enumerate(zip(labels, split.test_sources))]
    frame = pd.DataFrame(rows, columns=["part", "position", "label", "source"])
    frame.to_csv(path, index=False)
    return path
