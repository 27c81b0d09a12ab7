"""
Threshold-free and threshold-based detection metrics.

Scores are anomaly scores (higher = more anomalous); labels are True for
outliers, which are the positive class. An item is flagged as an anomaly
when its score is >= the threshold.
"""
import numpy as np
from scipy.stats import rankdata

from retarget.core import ArgumentError


def split_by_label(scores, labels):
    """
    Separate inlier and outlier scores.
    Parameters
    ----------
    scores : array_like
        Anomaly scores.
    labels : array_like of bool
        True for outliers.
    Returns
    -------
    inliers, outliers : numpy.ndarray
        Scores of each class, sorted ascending.
    Raises
    ------
    ArgumentError
        If one of the classes is missing.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ArgumentError("scores and labels must be 1-d arrays of equal length")
    inliers = np.sort(scores[~labels])
    outliers = np.sort(scores[labels])
    if inliers.size == 0 or outliers.size == 0:
        raise ArgumentError("both inliers and outliers are required, got {} and {}".format(
            inliers.size, outliers.size))
    return inliers, outliers


def auc(scores, labels):
    """
    Area under the ROC curve as a rank statistic.
    Equals P(outlier score > inlier score) + 0.5 * P(tie) over all pairs.
    Returns
    -------
    float
        AUC in [0, 1].
    Examples
    --------
    >>> auc([0.1, 0.4, 0.3, 0.8], [False, False, True, True])
    0.75
    """
    labels = np.asarray(labels, dtype=bool)
    inliers, outliers = split_by_label(scores, labels)
    ranks = rankdata(np.asarray(scores, dtype=float), method="average")
    n_pos, n_neg = outliers.size, inliers.size
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def error_rates(scores, labels):
    """
    False positive and false negative rate at every candidate threshold.
    Thresholds are the distinct scores in ascending order followed by +inf
    (nothing flagged).
    Returns
    -------
    thresholds, fpr, fnr : numpy.ndarray
    """
    inliers, outliers = split_by_label(scores, labels)
    thresholds = np.append(np.unique(np.asarray(scores, dtype=float)), np.inf)
    fpr = (inliers.size - np.searchsorted(inliers, thresholds, side="left")) / inliers.size
    fnr = np.searchsorted(outliers, thresholds, side="left") / outliers.size
    return thresholds, fpr, fnr


def eer(scores, labels):
    """
    Equal error rate.
    Where no threshold gives FPR == FNR, both rates are interpolated linearly
    between the two operating points that bracket the crossing.
    Returns
    -------
    eer : float
        Error rate at the crossing.
    threshold : float
        Threshold at the crossing, interpolated the same way; the +inf
        operating point is taken at max(previous threshold, 1.0).
    """
    thresholds, fpr, fnr = error_rates(scores, labels)
    diff = fnr - fpr
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0:
        return float(fpr[k]), float(thresholds[k])
    w = -diff[k - 1] / (diff[k] - diff[k - 1])
    rate = fpr[k - 1] + w * (fpr[k] - fpr[k - 1])
    upper = thresholds[k] if np.isfinite(thresholds[k]) else max(thresholds[k - 1], 1.0)
    return float(rate), float(thresholds[k - 1] + w * (upper - thresholds[k - 1]))


def f1_thresholds(scores):
    """
    Candidate thresholds of the F1 search: the lowest score, the midpoints
    between consecutive distinct scores and +inf.
    """
    unique = np.unique(np.asarray(scores, dtype=float))
    return np.concatenate([unique[:1], (unique[:-1] + unique[1:]) / 2.0, [np.inf]])


def f1_best(scores, labels):
    """
    Best F1 score over all candidate thresholds, outliers positive.
    Ties are resolved toward the lower threshold.
    Returns
    -------
    f1 : float
    threshold : float
    Examples
    --------
    >>> f1_best([0.25, 0.75, 0.5, 1.0], [False, False, True, True])
    (0.8, 0.375)
    """
    inliers, outliers = split_by_label(scores, labels)
    thresholds = f1_thresholds(scores)
    tp = outliers.size - np.searchsorted(outliers, thresholds, side="left")
    fp = inliers.size - np.searchsorted(inliers, thresholds, side="left")
    fn = outliers.size - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(tp > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
    k = int(np.argmax(f1))
    return float(f1[k]), float(thresholds[k])


def histogram(scores, bins=20):
    """
    Counts of scores over `bins` equal-width bins on [0, 1].
    Returns
    -------
    counts : numpy.ndarray of int
    edges : numpy.ndarray
    """
    return np.histogram(np.asarray(scores, dtype=float), bins=bins, range=(0.0, 1.0))
