import json
import os

import numpy as np
import pytest
import torch

from oracles import TOY_ARCH
from oracles import toy_config
from oracles import toy_pair
from oracles import toy_state
from retarget.core import ArgumentError
from retarget.core import NumericError
from retarget.data import build_synthetic_protocol
from retarget.models import Role
from retarget.models import SampleBatch
from retarget.models import StreamRole
from retarget.models import average_parameters
from retarget.models import build_module
from retarget.models import generator_forward
from retarget.trainer import VARIANT_PRESETS
from retarget.trainer import AblationVariant
from retarget.trainer import GOldStrategy
from retarget.trainer import build_g_old
from retarget.trainer import checkpoint_iterations
from retarget.trainer import expected_checkpoints
from retarget.trainer import make_pseudo_anomaly
from retarget.trainer import mix_reconstructions
from retarget.trainer import phase_one_step
from retarget.trainer import phase_two_step
from retarget.trainer import phase_two_streams
from retarget.trainer import reconstruct_pseudo
from retarget.trainer import run_phase_one
from retarget.trainer import run_phase_two
from retarget.trainer import sample_pairs
from retarget.trainer import variant_from_name


@pytest.fixture(scope="module")
def synthetic():
    return build_synthetic_protocol(64, 32, 0.5, size=8, seed=0)


@pytest.fixture(scope="module")
def phase_one(synthetic):
    return run_phase_one(toy_config(), synthetic.train)


def test_variant_presets():
    assert list(VARIANT_PRESETS) == ["baseline", "no_real", "no_pseudo", "no_low", "raw_mix", "full"]
    assert variant_from_name("baseline") is None
    no_real = variant_from_name("no_real")
    assert not no_real.use_real_x and not no_real.use_pseudo and no_real.use_recon and no_real.use_low
    assert variant_from_name("raw_mix").raw_mix_as_pseudo
    with pytest.raises(ArgumentError):
        variant_from_name("everything")


def test_variant_validation():
    with pytest.raises(ArgumentError):
        AblationVariant(use_low=False, use_pseudo=False).validate()
    with pytest.raises(ArgumentError):
        AblationVariant(use_real_x=False, use_recon=False).validate()
    with pytest.raises(ArgumentError):
        AblationVariant(use_pseudo=False, raw_mix_as_pseudo=True).validate()


def test_sample_pairs_distinct():
    rng = torch.Generator().manual_seed(0)
    for n in (2, 3, 17):
        i, j = sample_pairs(n, rng)
        assert bool((i != j).all())
        assert sorted(i.tolist()) == sorted(j.tolist()) == list(range(n))
    with pytest.raises(ArgumentError):
        sample_pairs(1)


def test_mix_reconstructions_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.random((1, 8, 8))
        b = rng.random((1, 8, 8))
        mixed = mix_reconstructions(torch.from_numpy(a), torch.from_numpy(b)).numpy()
        assert np.max(np.abs(mixed - 0.5 * (a + b))) <= 1e-12
        assert np.all(mixed >= np.minimum(a, b)) and np.all(mixed <= np.maximum(a, b))


def test_make_pseudo_anomaly():
    g_old = toy_state(Role.GENERATOR, seed=2)
    x = SampleBatch(torch.rand(4, 1, 8, 8, dtype=torch.float64))
    i, j = torch.tensor([0, 1, 2, 3]), torch.tensor([3, 0, 1, 2])
    xbar = make_pseudo_anomaly(g_old, SampleBatch(x.images[i]), SampleBatch(x.images[j]), i, j)
    low = generator_forward(g_old, x).images
    assert xbar.role is StreamRole.PSEUDO_MIX
    assert torch.allclose(xbar.images, (low[i] + low[j]) / 2, atol=1e-12)
    with pytest.raises(ArgumentError):
        make_pseudo_anomaly(g_old, x, x, [0, 1, 2, 3], [0, 2, 1, 3])


def test_reconstruct_pseudo_requires_mixture():
    g = toy_state(Role.GENERATOR)
    batch = SampleBatch(torch.rand(2, 1, 8, 8, dtype=torch.float64))
    with pytest.raises(ArgumentError):
        reconstruct_pseudo(g, batch)
    out = reconstruct_pseudo(g, batch.with_images(batch.images, StreamRole.PSEUDO_MIX))
    assert out.role is StreamRole.PSEUDO_RECON


@pytest.mark.parametrize("name, roles", [
    ("full", {StreamRole.REAL, StreamRole.RECON, StreamRole.LOW, StreamRole.PSEUDO_RECON}),
    ("no_real", {StreamRole.RECON, StreamRole.LOW}),
    ("no_pseudo", {StreamRole.REAL, StreamRole.RECON, StreamRole.LOW}),
    ("no_low", {StreamRole.REAL, StreamRole.RECON, StreamRole.PSEUDO_RECON}),
    ("raw_mix", {StreamRole.REAL, StreamRole.RECON, StreamRole.LOW, StreamRole.PSEUDO_MIX}),
])
def test_phase_two_streams(name, roles):
    g = toy_state(Role.GENERATOR, seed=1)
    g_old = toy_state(Role.GENERATOR, seed=2)
    x = SampleBatch(torch.rand(6, 1, 8, 8, dtype=torch.float64))
    streams = phase_two_streams(g, g_old, x, VARIANT_PRESETS[name], torch.Generator().manual_seed(0))
    assert set(streams) == roles
    for role, batch in streams.items():
        assert batch.role is role
        assert len(batch) == 6


def test_pseudo_stream_mixes_sampled_pairs():
    g = toy_state(Role.GENERATOR, seed=1)
    g_old = toy_state(Role.GENERATOR, seed=2)
    x = SampleBatch(torch.rand(6, 1, 8, 8, generator=torch.Generator().manual_seed(3), dtype=torch.float64))
    raw = phase_two_streams(g, g_old, x, VARIANT_PRESETS["raw_mix"], torch.Generator().manual_seed(0))
    full = phase_two_streams(g, g_old, x, VARIANT_PRESETS["full"], torch.Generator().manual_seed(0))
    i, j = sample_pairs(6, torch.Generator().manual_seed(0))
    expected = make_pseudo_anomaly(g_old, SampleBatch(x.images[i]), SampleBatch(x.images[j]), i, j)
    assert torch.allclose(raw[StreamRole.PSEUDO_MIX].images, expected.images, atol=1e-12)
    assert torch.allclose(full[StreamRole.PSEUDO_RECON].images, reconstruct_pseudo(g, expected).images, atol=1e-12)


def test_phase_two_step_rejects_foreign_stream():
    _, d = toy_pair()
    live = d.build()
    hp = toy_config().hyper
    streams = {StreamRole.NOISY: SampleBatch(torch.rand(2, 1, 8, 8), StreamRole.NOISY)}
    with pytest.raises(ArgumentError):
        phase_two_step(live, streams, hp, torch.optim.Adam([torch.zeros(1, requires_grad=True)]))


def test_phase_one_step_non_finite():
    torch.manual_seed(0)
    g = build_module(TOY_ARCH, Role.GENERATOR)
    d = build_module(TOY_ARCH, Role.DISCRIMINATOR)
    with torch.no_grad():
        next(g.parameters()).fill_(float("nan"))
    hp = toy_config().hyper
    with pytest.raises(NumericError):
        phase_one_step(g, d, SampleBatch(torch.rand(4, 1, 8, 8)), hp,
                       torch.optim.Adam(g.parameters()), torch.optim.Adam(d.parameters()))


def test_checkpoint_iterations():
    schedule = checkpoint_iterations(75, 5)
    assert len(schedule) == 16
    assert schedule[0] == 0 and schedule[-1] == 75
    assert checkpoint_iterations(7, 5) == [0, 5, 7]
    assert checkpoint_iterations(0, 5) == [0]
    assert expected_checkpoints(25, 75, 5) == 25 + 16


def test_run_phase_one_snapshots(phase_one):
    assert phase_one.epochs == 3
    assert [g.provenance.epoch for g in phase_one.generators] == [1, 2, 3]
    assert [d.role for d in phase_one.discriminators] == [Role.DISCRIMINATOR] * 3
    assert phase_one.generators[0].content_hash() != phase_one.generators[-1].content_hash()
    with pytest.raises(ArgumentError):
        phase_one.generator(4)


def test_run_phase_one_reduces_reconstruction_error():
    improved = 0
    for seed in range(5):
        split = build_synthetic_protocol(64, 8, 0.5, size=8, seed=seed)
        config = toy_config(seed=seed)
        assert config.hyper.lambda_recon == 0.2 and config.hyper.lr_g == 1e-3
        result = run_phase_one(config, split.train, epochs=20)
        first = result.losses[0]["recon_loss"]
        last_epoch = [r["recon_loss"] for r in result.losses if r["epoch"] == 20]
        improved += np.mean(last_epoch) < first
    assert improved >= 4


def test_run_phase_one_is_reproducible(synthetic, phase_one):
    again = run_phase_one(toy_config(), synthetic.train)
    assert again.generators[-1].content_hash() == phase_one.generators[-1].content_hash()
    assert again.discriminators[-1].content_hash() == phase_one.discriminators[-1].content_hash()
    assert [r["d_loss"] for r in again.losses] == [r["d_loss"] for r in phase_one.losses]


def test_run_phase_one_persists(tmp_path, synthetic):
    result = run_phase_one(toy_config(), synthetic.train, run_dir=str(tmp_path), epochs=2)
    assert len(result.checkpoint_paths) == 4
    assert all(os.path.isdir(p) for p in result.checkpoint_paths)
    with open(tmp_path / "losses.jsonl") as fh:
        lines = [json.loads(line) for line in fh]
    assert len(lines) == len(result.losses)
    assert lines[0]["phase"] == "one"


def test_build_g_old(phase_one):
    fixed = build_g_old(phase_one, GOldStrategy("fixed_epoch", 1))
    assert fixed.content_hash() == phase_one.generators[0].content_hash()
    averaged = build_g_old(phase_one, GOldStrategy("average_all_previous"), current_epoch=3)
    assert averaged.content_hash() == average_parameters(phase_one.generators[:2]).content_hash()
    single = build_g_old(phase_one, GOldStrategy("average_all_previous"), current_epoch=2)
    assert single.content_hash() == phase_one.generators[0].content_hash()
    with pytest.raises(ArgumentError):
        build_g_old(phase_one, GOldStrategy("average_all_previous"), current_epoch=1)
    with pytest.raises(ArgumentError):
        build_g_old(phase_one, GOldStrategy("fixed_epoch", 9))


def test_run_phase_two_freezes_generators(synthetic, phase_one):
    config = toy_config(phase2_iterations=75)
    g = phase_one.generator(3)
    g_old = build_g_old(phase_one, GOldStrategy("fixed_epoch", 1))
    d = phase_one.discriminator(3)
    g_hash, g_old_hash, d_hash = g.content_hash(), g_old.content_hash(), d.content_hash()
    result = run_phase_two(config, g, g_old, d, VARIANT_PRESETS["full"], synthetic.train)
    assert g.content_hash() == g_hash == result.generator_hash
    assert g_old.content_hash() == g_old_hash == result.g_old_hash
    assert d.content_hash() == d_hash
    assert len(result.checkpoints) == 16
    assert [c.provenance.iteration for c in result.checkpoints][:3] == [0, 5, 10]
    assert result.checkpoints[0].content_hash() == d_hash
    assert result.discriminator.content_hash() != d_hash
    assert len(result.losses) == 75


def test_run_phase_two_rejects_before_training(synthetic, phase_one):
    g, d = phase_one.generator(3), phase_one.discriminator(3)
    with pytest.raises(ArgumentError):
        run_phase_two(toy_config(), g, g, d, None, synthetic.train)
    with pytest.raises(ArgumentError):
        run_phase_two(toy_config(), g, g, d, AblationVariant(use_low=False, use_pseudo=False), synthetic.train)
    with pytest.raises(ArgumentError):
        run_phase_two(toy_config(), g, g, d, VARIANT_PRESETS["full"], synthetic.train[:1])
