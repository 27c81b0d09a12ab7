import json
import os

import numpy as np
import pytest
import torch

import retarget.evaluation as ev
from oracles import discriminator_oracle
from oracles import generator_oracle
from oracles import toy_config
from oracles import toy_pair
from retarget.core import ArgumentError
from retarget.data import VideoClip
from retarget.data import build_synthetic_protocol
from retarget.evaluation import Label
from retarget.evaluation import ScoreRecord
from retarget.evaluation import Verdict
from retarget.models import SampleBatch
from retarget.models import discriminator_forward
from retarget.models import generator_forward
from retarget.trainer import VARIANT_PRESETS
from retarget.trainer import GOldStrategy
from retarget.trainer import build_g_old
from retarget.trainer import run_phase_one
from retarget.trainer import run_phase_two


def records(inliers, outliers):
    return ([ScoreRecord("i{}".format(k), s, Label.INLIER) for k, s in enumerate(inliers)]
            + [ScoreRecord("o{}".format(k), s, Label.OUTLIER) for k, s in enumerate(outliers)])


def test_score_record_bounds():
    with pytest.raises(ArgumentError):
        ScoreRecord("x", 1.5, Label.INLIER)
    with pytest.raises(ArgumentError):
        ScoreRecord("x", float("nan"), "outlier")
    assert ScoreRecord("x", 0.5, "outlier").label is Label.OUTLIER


def test_anomaly_score_is_chained_forward():
    g, d = toy_pair(seed=7)
    x = torch.rand(1, 8, 8, dtype=torch.float64)
    chained = discriminator_forward(d, generator_forward(g, SampleBatch(x[None])))
    assert ev.anomaly_score(g, d, x) == float(chained[0])
    oracle = discriminator_oracle(d, generator_oracle(g, x[None].numpy()))[0]
    assert abs(ev.anomaly_score(g, d, x) - oracle) <= 1e-6
    assert 0.0 <= ev.anomaly_score(g, d, x) <= 1.0


def test_score_images_chunks():
    g, d = toy_pair(seed=1)
    images = torch.rand(7, 1, 8, 8, dtype=torch.float64).numpy()
    assert np.allclose(ev.score_images(g, d, images, batch_size=3), ev.score_images(g, d, images), atol=1e-12)


def test_frame_score():
    assert ev.frame_score([0.2, 0.9, 0.5]) == 0.9
    assert ev.frame_score([0.4]) == 0.4
    assert ev.frame_score([]) == 0.0
    rng = np.random.default_rng(0)
    patches = []
    previous = 0.0
    for s in rng.random(20):
        patches.append(s)
        assert ev.frame_score(patches) >= previous
        previous = ev.frame_score(patches)


def test_report_counts_verdicts_at_tau(tmp_path):
    recs = records([0.1, 0.5, 0.2], [0.9, 0.3])
    report = ev.build_report(recs, bins=5, tau=0.5)
    assert report.tau == 0.5
    assert report.verdicts == {"inlier": {"normal": 2, "anomaly": 1}, "outlier": {"normal": 1, "anomaly": 1}}
    assert ev.build_report(recs, bins=5).verdicts == {}
    ev.write_report(report, str(tmp_path / "report.json"))
    assert ev.read_report(str(tmp_path / "report.json")) == report


def test_classify():
    assert ev.classify(0.3, 0.5) is Verdict.NORMAL
    assert ev.classify(0.7, 0.5) is Verdict.ANOMALY
    assert ev.classify(0.5, 0.5) is Verdict.ANOMALY
    for s in np.linspace(0, 1, 11):
        verdicts = [ev.classify(s, tau) for tau in np.linspace(0, 1, 21)]
        first_normal = verdicts.index(Verdict.NORMAL) if Verdict.NORMAL in verdicts else len(verdicts)
        assert all(v is Verdict.NORMAL for v in verdicts[first_normal:])


def test_record_metrics():
    assert ev.compute_auc(records([0.1, 0.4], [0.3, 0.8])) == 0.75
    assert ev.compute_eer(records([0.1, 0.9], [0.2, 0.8]))[0] == 0.5
    assert ev.compute_f1_best(records([0.1, 0.2], [0.8, 0.9]))[0] == 1.0
    with pytest.raises(ArgumentError):
        ev.compute_auc(records([0.1, 0.2], []))


def test_report_round_trip(tmp_path):
    recs = records([0.1, 0.35, 0.2], [0.9, 0.3])
    report = ev.build_report(recs, bins=5, metadata={"variant": "full"})
    assert report.n_inliers == 3 and report.n_outliers == 2
    assert sum(report.histograms["inlier"]) == 3
    assert len(report.histograms["edges"]) == 6
    ev.write_scores_csv(recs, str(tmp_path / "scores.csv"))
    again = ev.read_scores_csv(str(tmp_path / "scores.csv"))
    assert again == recs
    assert ev.compute_auc(again) == report.auc
    ev.write_report(report, str(tmp_path / "report.json"))
    with open(tmp_path / "report.json") as fh:
        stored = json.load(fh)
    assert stored["auc"] == report.auc
    assert ev.read_report(str(tmp_path / "report.json")) == report


def test_scores_csv_keeps_every_bit(tmp_path):
    close = [0.35, float(np.nextafter(0.35, 1.0)), 0.1 + 0.2, 1.0 / 3.0, 0.7640000000000001]
    recs = records(close[:3], close[3:]) + [ScoreRecord("v/0003", float(np.nextafter(0.5, 0.0)), Label.OUTLIER, 3)]
    path = ev.write_scores_csv(recs, str(tmp_path / "scores.csv"))
    again = ev.read_scores_csv(path)
    assert [r.score for r in again] == [r.score for r in recs]
    assert again == recs
    assert ev.compute_auc(again) == ev.compute_auc(recs)


def static_clip(name, n_frames=4, labels=None, size=(50, 50)):
    frame = np.full(size, 0.3, dtype=np.float32)
    return VideoClip(name, np.stack([frame] * n_frames), labels)


def test_video_requires_labels():
    g, d = toy_pair()
    with pytest.raises(ArgumentError):
        ev.evaluate_video(g, d, [static_clip("v")], toy_config(patch_size=45, patch_stride=5))


def test_static_frames_score_zero():
    g, d = toy_pair()
    clip = static_clip("v", 5, np.array([0, 0, 1, 0, 1], bool))
    recs = ev.video_records(g, d, clip, patch=45, stride=5)
    assert len(recs) == 5
    assert recs[0].score > 0.0
    assert [r.score for r in recs[1:]] == [0.0] * 4
    assert [r.frame_index for r in recs] == list(range(5))


def test_video_auc_with_rigged_scores(monkeypatch):
    # rig D(G(x)) to the mean brightness of the patch
    monkeypatch.setattr(ev, "score_images", lambda g, d, images, batch_size=256: np.asarray(images).mean(axis=(1, 2, 3)))
    rng = np.random.default_rng(0)
    frames, labels = [], []
    for t in range(12):
        frame = np.full((90, 90), 0.2, dtype=np.float32)
        frame[:, :] += rng.uniform(0.0, 0.05, size=(90, 90)).astype(np.float32)
        if t % 3 == 2:
            r, c = rng.integers(0, 45, size=2)
            frame[r:r + 40, c:c + 40] = 0.95
        frames.append(frame)
        labels.append(t % 3 == 2)
    clip = VideoClip("rigged", np.stack(frames), np.array(labels))
    g, d = toy_pair()
    report, recs = ev.evaluate_video(g, d, [clip], toy_config(patch_size=45, patch_stride=45, outlier_ratio=0.5))
    assert len(recs) == 12
    assert report.auc == 1.0


@pytest.fixture(scope="module")
def trained():
    split = build_synthetic_protocol(64, 16, 0.5, size=8, seed=0)
    config = toy_config(phase2_iterations=5, phase2_checkpoint_every=2)
    return config, split, run_phase_one(config, split.train)


def test_stability_sweep(tmp_path, trained):
    config, split, phase_one = trained
    table = ev.stability_sweep(config, phase_one, split.train, ev.split_evaluator(split, config),
                               range(2, 4), VARIANT_PRESETS["full"])
    rows = table.rows
    assert list(rows.columns) == ["epoch", "iteration", "auc"]
    # 0, 2, 4, 5 per epoch
    assert len(rows) == 2 * 4
    for e in (2, 3):
        baseline = ev.compute_auc(ev.evaluate_split(phase_one.generator(e), phase_one.discriminator(e),
                                                    split, config)[1])
        assert table.baseline().set_index("epoch").loc[e, "auc"] == baseline
    assert set(table.histograms["label"]) == {"inlier", "outlier"}
    assert table.histograms.groupby(["epoch", "iteration", "label"])["count"].sum().max() == 16
    paths = ev.write_stability(table, str(tmp_path))
    assert all(os.path.exists(p) for p in paths.values())
    with open(paths["series"]) as fh:
        series = json.load(fh)
    assert series["baseline"]["epoch"] == [2, 3]
    with pytest.raises(ArgumentError):
        ev.stability_sweep(config, phase_one, split.train, ev.split_evaluator(split, config),
                           range(3, 5), VARIANT_PRESETS["full"])


def test_g_old_sweep(trained):
    config, split, phase_one = trained
    frame = ev.g_old_sweep(config, phase_one, split.train, ev.split_evaluator(split, config), 3, [1, 2],
                           VARIANT_PRESETS["full"])
    assert list(frame.columns) == ["strategy", "g_old_epoch", "iteration", "auc"]
    assert len(frame) == 3 * 4
    assert set(frame["strategy"]) == {"fixed_epoch", "average_all_previous"}


def test_outlier_ratio_sweep(trained):
    _, _, phase_one = trained
    g, d = phase_one.generator(3), phase_one.discriminator(3)
    frame = ev.outlier_ratio_sweep(
        g, d, lambda r: build_synthetic_protocol(8, 20, r, size=8, seed=1), ratios=(0.1, 0.3, 0.5))
    assert frame["ratio"].tolist() == [0.1, 0.3, 0.5]
    assert frame["auc"].between(0, 1).all() and frame["f1"].between(0, 1).all()


@pytest.fixture(scope="module")
def mixed_runs():
    """Phase one and a stability sweep over epochs 7..12 for five seeds of the mixed pattern."""
    runs = []
    for seed in range(5):
        split = build_synthetic_protocol(96, 48, 0.5, size=8, seed=seed, pattern="mixed")
        config = toy_config(seed=seed, lr_g=5e-3, phase1_epochs=12, g_old_epoch=4, lr_d_phase2=1e-3,
                            phase2_iterations=200, phase2_checkpoint_every=200)
        phase_one = run_phase_one(config, split.train)
        table = ev.stability_sweep(config, phase_one, split.train, ev.split_evaluator(split, config),
                                   range(7, 13), VARIANT_PRESETS["full"])
        runs.append((config, split, phase_one, table))
    return runs


def test_phase_two_does_not_fall_behind_baseline(mixed_runs):
    auc_kept, f1_kept = 0, 0
    for config, split, phase_one, _ in mixed_runs:
        g, d = phase_one.generator(12), phase_one.discriminator(12)
        g_old = build_g_old(phase_one, GOldStrategy("fixed_epoch", 4))
        retargeted = run_phase_two(config, g, g_old, d, VARIANT_PRESETS["full"], split.train).discriminator
        baseline = ev.evaluate_split(g, d, split, config)[0]
        phase_two = ev.evaluate_split(g, retargeted, split, config)[0]
        auc_kept += phase_two.auc >= baseline.auc
        f1_kept += phase_two.f1_best >= baseline.f1_best
    assert auc_kept >= 4
    assert f1_kept >= 4


def test_phase_two_auc_is_steadier_across_epochs(mixed_runs):
    steadier = 0
    for _, _, _, table in mixed_runs:
        rows = table.rows
        baseline = rows[rows["iteration"] == 0]["auc"].to_numpy()
        final = rows[rows["iteration"] == 200]["auc"].to_numpy()
        assert len(baseline) == len(final) == 6
        steadier += np.std(final) < np.std(baseline)
    assert steadier >= 4
