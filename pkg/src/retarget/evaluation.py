"""
Anomaly scoring and detection metrics.

The anomaly score of an image is D(G(X)) on the clean image: high means
anomalous. Video frames are scored by the largest score among their
motion-kept patches.
"""
import enum
import json
import logging
import math
import os
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from typing import List
from typing import Optional

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from retarget.core import ArgumentError
from retarget.core import progress_disabled
from retarget.data import frame_grids
from retarget.data import resize_all
from retarget.equations import metrics
from retarget.models import SampleBatch
from retarget.models import discriminator_forward
from retarget.models import generator_forward
from retarget.trainer import GOldStrategy
from retarget.trainer import build_g_old
from retarget.trainer import run_phase_two

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ["item_id", "frame_index", "score", "label"]
STABILITY_COLUMNS = ["epoch", "iteration", "auc"]
HISTOGRAM_COLUMNS = ["epoch", "iteration", "label", "bin_low", "bin_high", "count"]


class Label(str, enum.Enum):
    INLIER = "inlier"
    OUTLIER = "outlier"

    @classmethod
    def from_outlier(cls, is_outlier):
        return cls.OUTLIER if is_outlier else cls.INLIER


class Verdict(str, enum.Enum):
    NORMAL = "normal"
    ANOMALY = "anomaly"


@dataclass(frozen=True)
class ScoreRecord:
    item_id: str
    score: float
    label: Label
    frame_index: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "score", float(self.score))
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ArgumentError("score of {} is {}, expected a value in [0, 1]".format(self.item_id, self.score))


@dataclass
class EvaluationReport:
    """Metrics of one evaluation, recomputable from its score records.

    `histograms` maps ``edges`` to the bin edges and each label to the
    counts of that label's scores. `verdicts` counts, per label, the items
    classified normal and anomalous at the decision threshold `tau`.
    """

    auc: float
    eer: float
    eer_threshold: float
    f1_best: float
    f1_threshold: float
    n_inliers: int
    n_outliers: int
    histograms: dict = field(default_factory=dict)
    tau: Optional[float] = None
    verdicts: dict = field(default_factory=dict)
    stability: Optional[List[dict]] = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        # json has no infinity
        for key in ("eer_threshold", "f1_threshold"):
            if not math.isfinite(d[key]):
                d[key] = None
        return d


def records_arrays(records):
    """Scores and outlier flags of a list of records."""
    scores = np.array([r.score for r in records], dtype=float)
    labels = np.array([r.label is Label.OUTLIER for r in records], dtype=bool)
    return scores, labels


def _image_batch(images):
    images = torch.as_tensor(np.asarray(images)) if not isinstance(images, torch.Tensor) else images
    if images.dim() == 3:
        images = images[None]
    return SampleBatch(images)


def anomaly_score(g, d, x):
    """
    Anomaly score of one image.
    Parameters
    ----------
    g, d : ModelState
        Generator and discriminator.
    x : array_like
        (C, H, W) image sized for `g`, values in [0, 1]; no noise is added.
    Returns
    -------
    float
        D(G(x)) in [0, 1]; higher is more anomalous.
    """
    batch = _image_batch(x)
    if len(batch) != 1:
        raise ArgumentError("anomaly_score takes one image, use score_images for batches")
    return float(discriminator_forward(d, generator_forward(g, batch))[0])


def score_images(g, d, images, batch_size=256):
    """Anomaly scores of an (N, C, H, W) stack, evaluated in chunks."""
    images = np.asarray(images)
    out = []
    for start in range(0, images.shape[0], batch_size):
        batch = _image_batch(images[start:start + batch_size])
        out.append(discriminator_forward(d, generator_forward(g, batch)).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def frame_score(patch_scores):
    """
    Frame score: the largest patch score, 0.0 when no patch is left.
    Examples
    --------
    >>> frame_score([0.2, 0.9, 0.5])
    0.9
    >>> frame_score([])
    0.0
    """
    patch_scores = list(patch_scores)
    return float(max(patch_scores)) if patch_scores else 0.0


def classify(score, tau):
    """Normal iff score < tau; a score equal to tau is an anomaly."""
    return Verdict.NORMAL if score < tau else Verdict.ANOMALY


def compute_auc(records):
    return metrics.auc(*records_arrays(records))


def compute_eer(records):
    """Equal error rate and its threshold, see `metrics.eer`."""
    return metrics.eer(*records_arrays(records))


def compute_f1_best(records):
    """Best F1 with outliers positive and the threshold achieving it."""
    return metrics.f1_best(*records_arrays(records))


def label_histograms(records, bins=20):
    scores, labels = records_arrays(records)
    inlier_counts, edges = metrics.histogram(scores[~labels], bins)
    outlier_counts, _ = metrics.histogram(scores[labels], bins)
    return {
        "edges": edges.tolist(),
        Label.INLIER.value: inlier_counts.tolist(),
        Label.OUTLIER.value: outlier_counts.tolist(),
    }


def verdict_counts(records, tau):
    """Normal and anomaly verdicts at `tau`, counted per label."""
    counts = {label.value: {verdict.value: 0 for verdict in Verdict} for label in Label}
    for r in records:
        counts[r.label.value][classify(r.score, tau).value] += 1
    return counts


def build_report(records, bins=20, metadata=None, tau=None):
    """All metrics of a list of score records; verdict counts only when `tau` is given."""
    scores, labels = records_arrays(records)
    eer, eer_threshold = compute_eer(records)
    f1, f1_threshold = compute_f1_best(records)
    return EvaluationReport(
        auc=compute_auc(records),
        eer=eer,
        eer_threshold=eer_threshold,
        f1_best=f1,
        f1_threshold=f1_threshold,
        n_inliers=int((~labels).sum()),
        n_outliers=int(labels.sum()),
        histograms=label_histograms(records, bins),
        tau=tau,
        verdicts=verdict_counts(records, tau) if tau is not None else {},
        metadata=dict(metadata or {}),
    )


def image_records(scores, labels, sources=None):
    sources = sources if sources else ["test/{}".format(i) for i in range(len(scores))]
    return [ScoreRecord(s, score, Label.from_outlier(lab)) for s, score, lab in zip(sources, scores, labels)]


def evaluate_images(g, d, images, labels, sources=None, batch_size=256, bins=20, metadata=None, tau=None):
    """
    Score an image test set.
    Returns
    -------
    report : EvaluationReport
    records : list of ScoreRecord
    """
    scores = score_images(g, d, images, batch_size)
    records = image_records(scores, labels, sources)
    return build_report(records, bins, metadata, tau), records


def video_records(g, d, clip, patch=45, stride=25, threshold=0.005):
    """One record per frame of a labelled clip."""
    if clip.labels is None:
        raise ArgumentError("video {} has no frame labels".format(clip.name))
    target = tuple(g.arch.input_size)
    records = []
    for grid in frame_grids(clip, patch, stride, threshold):
        kept = grid.kept_patches()
        scores = score_images(g, d, resize_all([p.image for p in kept], target)) if kept else []
        t = grid.frame_index
        records.append(ScoreRecord("{}/{:04d}".format(clip.name, t), frame_score(scores),
                                   Label.from_outlier(clip.labels[t]), t))
    return records


def evaluate_video(g, d, videos, config, metadata=None):
    """
    Frame-level evaluation of labelled test videos.
    Parameters
    ----------
    g, d : ModelState
        Trained generator and discriminator.
    videos : list of VideoClip
        Test clips; every clip needs per-frame labels.
    config : ExperimentConfig
        Patch size, stride, motion threshold and histogram bins.
    Returns
    -------
    report : EvaluationReport
    records : list of ScoreRecord
        One record per frame of every clip.
    """
    p = config.protocol
    missing = [c.name for c in videos if c.labels is None]
    if missing:
        raise ArgumentError("no ground truth for videos {}".format(", ".join(missing)))
    records = []
    for clip in tqdm(videos, desc="videos", leave=False, disable=progress_disabled(logger)):
        records += video_records(g, d, clip, p.patch_size, p.patch_stride, p.motion_threshold)
    return build_report(records, config.run.histogram_bins, metadata, config.hyper.tau), records


def evaluate_split(g, d, split, config, metadata=None):
    """Evaluate on the test part of a protocol split, images or videos."""
    if split.test_clips:
        return evaluate_video(g, d, split.test_clips, config, metadata)
    return evaluate_images(g, d, split.test, split.test_labels, split.test_sources,
                           config.run.eval_batch_size, config.run.histogram_bins, metadata, config.hyper.tau)


def split_evaluator(split, config):
    """`evaluate(g, d) -> records` over a split's test part."""
    def evaluate(g, d):
        return evaluate_split(g, d, split, config)[1]
    return evaluate


@dataclass
class StabilityTable:
    """Sweep results: `rows` (epoch, iteration, auc) and per-checkpoint score histograms."""

    rows: pd.DataFrame
    histograms: pd.DataFrame

    def baseline(self):
        return self.rows[self.rows["iteration"] == 0].reset_index(drop=True)


def _histogram_rows(epoch, iteration, records, bins):
    hist = label_histograms(records, bins)
    edges = hist["edges"]
    return [
        (epoch, iteration, label.value, edges[k], edges[k + 1], count)
        for label in Label
        for k, count in enumerate(hist[label.value])
    ]


def stability_sweep(config, phase_one, train_images, evaluate, epochs, variant,
                    strategy=None, iterations=None):
    """
    Baseline and phase-two AUC for a range of phase-one epochs.
    For every epoch e the phase-one pair of e gives the iteration-0 row;
    phase two then starts from that pair and every further checkpoint adds
    a row.
    Parameters
    ----------
    config : ExperimentConfig
        Phase-two settings and histogram bins.
    phase_one : PhaseOneResult
        Snapshots of every epoch in `epochs`.
    train_images : array_like
        Inlier training images for phase two.
    evaluate : callable
        ``evaluate(g, d) -> list of ScoreRecord``.
    epochs : iterable of int
        Phase-one epochs to start from.
    variant : AblationVariant
        Phase-two streams.
    strategy : GOldStrategy, optional
        Old generator, the one configured in `config` by default.
    iterations : int, optional
        Overrides ``phase2_iterations``.
    Returns
    -------
    StabilityTable
    """
    strategy = strategy or GOldStrategy(config.run.g_old_strategy, config.run.g_old_epoch)
    bins = config.run.histogram_bins
    epochs = list(epochs)
    for e in epochs:
        phase_one.generator(e)
    rows, hist_rows = [], []
    for e in epochs:
        g, d = phase_one.generator(e), phase_one.discriminator(e)
        records = evaluate(g, d)
        baseline = compute_auc(records)
        rows.append((e, 0, baseline))
        hist_rows += _histogram_rows(e, 0, records, bins)
        g_old = build_g_old(phase_one, strategy, current_epoch=e)
        result = run_phase_two(config, g, g_old, d, variant, train_images, iterations=iterations)
        for ckpt in result.checkpoints[1:]:
            records = evaluate(g, ckpt)
            rows.append((e, ckpt.provenance.iteration, compute_auc(records)))
            hist_rows += _histogram_rows(e, ckpt.provenance.iteration, records, bins)
        logger.info("stability epoch %d: baseline auc %.4f, phase two auc %.4f", e, baseline, rows[-1][2])
    return StabilityTable(pd.DataFrame(rows, columns=STABILITY_COLUMNS),
                          pd.DataFrame(hist_rows, columns=HISTOGRAM_COLUMNS))


def g_old_sweep(config, phase_one, train_images, evaluate, g_epoch, g_old_epochs, variant,
                include_average=True, iterations=None):
    """
    Phase two from one fixed pair, once per old-generator candidate.
    Candidates are fixed_epoch(k) for k in `g_old_epochs` and, optionally,
    the average of every generator before `g_epoch`.
    Returns
    -------
    pandas.DataFrame
        Columns strategy, g_old_epoch (empty for the average), iteration, auc.
    """
    g, d = phase_one.generator(g_epoch), phase_one.discriminator(g_epoch)
    strategies = [GOldStrategy("fixed_epoch", k) for k in g_old_epochs]
    if include_average:
        strategies.append(GOldStrategy("average_all_previous"))
    rows = []
    for strategy in strategies:
        g_old = build_g_old(phase_one, strategy, current_epoch=g_epoch)
        result = run_phase_two(config, g, g_old, d, variant, train_images, iterations=iterations)
        k = strategy.epoch if strategy.kind == "fixed_epoch" else None
        for ckpt in result.checkpoints:
            rows.append((strategy.kind, k, ckpt.provenance.iteration, compute_auc(evaluate(g, ckpt))))
        logger.info("g_old %s: final auc %.4f", strategy.describe(), rows[-1][3])
    return pd.DataFrame(rows, columns=["strategy", "g_old_epoch", "iteration", "auc"])


def outlier_ratio_sweep(g, d, build_split, ratios=(0.1, 0.2, 0.3, 0.4, 0.5), batch_size=256):
    """
    Evaluate one model pair on test mixtures of growing outlier share.
    Parameters
    ----------
    build_split : callable
        ``build_split(ratio) -> ProtocolSplit``.
    Returns
    -------
    pandas.DataFrame
        Columns ratio, f1, f1_threshold, auc.
    """
    rows = []
    for ratio in ratios:
        split = build_split(ratio)
        scores = score_images(g, d, split.test, batch_size)
        records = image_records(scores, split.test_labels, split.test_sources)
        f1, threshold = compute_f1_best(records)
        rows.append((float(ratio), f1, threshold, compute_auc(records)))
        logger.info("outlier ratio %.1f: f1 %.4f auc %.4f", ratio, f1, rows[-1][3])
    return pd.DataFrame(rows, columns=["ratio", "f1", "f1_threshold", "auc"])


def write_scores_csv(records, path):
    frame = pd.DataFrame(
        [(r.item_id, r.frame_index, r.score, r.label.value) for r in records], columns=SCORE_COLUMNS)
    frame["frame_index"] = frame["frame_index"].astype("Int64")
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def read_scores_csv(path):
    frame = pd.read_csv(path, dtype={"item_id": str, "label": str}, keep_default_na=False,
                        na_values={"frame_index": [""]}, float_precision="round_trip")
    frame["frame_index"] = frame["frame_index"].astype("Int64")
    return [
        ScoreRecord(row.item_id, float(row.score), Label(row.label),
                    None if pd.isna(row.frame_index) else int(row.frame_index))
        for row in frame.itertuples(index=False)
    ]


def write_report(report, path):
    with open(path, "w", encoding="utf8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    return path


def read_report(path):
    with open(path, encoding="utf8") as fh:
        d = json.load(fh)
    for key in ("eer_threshold", "f1_threshold"):
        if d[key] is None:
            d[key] = math.inf
    return EvaluationReport(**d)


def write_stability(table, directory):
    """
    Write ``stability.csv``, the plot-ready ``stability_series.json`` and
    ``score_histograms.csv``.
    Returns
    -------
    dict
        Paths by kind.
    """
    os.makedirs(directory, exist_ok=True)
    paths = {
        "table": os.path.join(directory, "stability.csv"),
        "series": os.path.join(directory, "stability_series.json"),
        "histograms": os.path.join(directory, "score_histograms.csv"),
    }
    table.rows.to_csv(paths["table"], index=False, float_format="%.17g")
    table.histograms.to_csv(paths["histograms"], index=False)
    base = table.baseline()
    series = {
        "baseline": {"epoch": base["epoch"].tolist(), "auc": base["auc"].tolist()},
        "phase_two": {
            str(e): {"iteration": grp["iteration"].tolist(), "auc": grp["auc"].tolist()}
            for e, grp in table.rows.groupby("epoch")
        },
    }
    with open(paths["series"], "w", encoding="utf8") as fh:
        json.dump(series, fh, indent=2)
    return paths
