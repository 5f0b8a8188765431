from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from bevcomm.agr import AgrWeights
from bevcomm.config import ConfigError, RunConfig, load_config, parse_config
from bevcomm.moe import MoeArch, MoeWeights
from bevcomm.selective import StMode

SHIPPED = Path(__file__).resolve().parents[1] / "configs" / "default.ini"


def test_defaults_follow_published_hyperparameters():
    cfg = RunConfig()
    p = cfg.pipeline()
    assert p.st.threshold == 0.01 and p.st.mode is StMode.INFERENCE
    assert p.bases == (0.9, 0.5) and p.clamp == (0.1, 0.95)
    assert p.lambda_bandwidth == 0.05 and p.mu_entropy == 1e-4
    assert p.congestion_override is None and p.gating == "frame"
    assert cfg.moe_arch() == MoeArch(d_model=64, d_k=32, experts=3)
    assert cfg.grid.as_tuple() == (64, 48, 176)
    assert cfg.frames == 200 and cfg.seed == 0


def test_shipped_file_equals_builtin_defaults():
    shipped = load_config(SHIPPED)
    assert shipped.values == RunConfig().values
    assert shipped.fingerprint() == RunConfig().fingerprint()


def test_partial_file_and_case_sensitivity():
    cfg = parse_config("[run]\nframes = 7\n[moe]\ngating = cell\n")
    assert cfg.frames == 7 and cfg.pipeline().gating == "cell"
    with pytest.raises(ConfigError) as info:
        parse_config("[run]\nFrames = 7\n")
    assert info.value.field == "run.Frames"


@pytest.mark.parametrize(
    "text,field",
    [
        ("[run]\nframes = 0\n", "frames"),
        ("[run]\nframes = -3\n", "frames"),
        ("[run]\nframes = many\n", "run.frames"),
        ("[run]\nfrmaes = 4\n", "run.frmaes"),
        ("[radio]\nx = 1\n", "radio"),
        ("[selective]\nthreshold = 1.5\n", "selective.threshold"),
        ("[selective]\nthreshold = nan\n", "selective.threshold"),
        ("[selective]\nmode = eval\n", "selective.mode"),
        ("[agr]\nclamp_min = 0.97\n", "agr.clamp_min"),
        ("[agr]\nk_remote = 0\n", "agr.k_remote"),
        ("[agr]\ncongestion_override = 2\n", "agr.congestion_override"),
        ("[moe]\ngating = token\n", "moe.gating"),
        ("[moe]\nscales = 3\n", "moe.scales"),
        ("[moe]\nexperts = 0\n", "moe.experts"),
        ("[scenario]\nvehicles = 17\n", "scenario.vehicles"),
        ("[scenario]\nwidth = 70000\n", "scenario.width"),
        ("[scenario]\nocclusion = maybe\n", "scenario.occlusion"),
        ("[loss]\nmu_entropy = -1\n", "loss.mu_entropy"),
        ("[run\n", "config"),
    ],
)
def test_errors_name_the_field(text, field):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == field
    assert str(info.value).startswith(field)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_overrides_are_validated():
    cfg = RunConfig().with_overrides(**{"run.frames": 3, "run.seed": 9})
    assert (cfg.frames, cfg.seed) == (3, 9)
    assert cfg.scenario().seed == 9
    with pytest.raises(ConfigError, match="frames"):
        RunConfig().with_overrides(**{"run.frames": 0})


@given(st.integers(1, 10**6), st.integers(0, 2**32), st.floats(0.001, 0.999), st.sampled_from(["frame", "cell"]))
def test_ini_round_trip(frames, seed, mu, gating):
    cfg = RunConfig().with_overrides(**{"run.frames": frames, "run.seed": seed, "selective.threshold": mu, "moe.gating": gating})
    back = parse_config(cfg.to_ini())
    assert back.values == cfg.values
    assert back.fingerprint() == cfg.fingerprint()


def test_fingerprint_tracks_every_setting():
    base = RunConfig().fingerprint()
    assert RunConfig().fingerprint() == base
    assert RunConfig().with_overrides(**{"run.seed": 1}).fingerprint() != base
    assert RunConfig().with_overrides(**{"loss.mu_entropy": 2e-4}).fingerprint() != base


def test_weight_files_resolve_relative_to_config(tmp_path):
    AgrWeights.init(seed=4).save(tmp_path / "agr.bin")
    arch = MoeArch()
    MoeWeights.init(arch, seed=4, scale=0).save(tmp_path / "m0.bin")
    MoeWeights.init(arch, seed=4, scale=1).save(tmp_path / "m1.bin")
    (tmp_path / "run.ini").write_text("[run]\nagr_weights = agr.bin\nmoe_weights = m0.bin, m1.bin\n[moe]\nscales = 2\n")
    cfg = load_config(tmp_path / "run.ini")
    assert cfg.agr_weights().params["gat.attn"].tolist() == AgrWeights.init(seed=4).params["gat.attn"].tolist()
    assert len(cfg.moe_weights()) == 2
    fp = cfg.fingerprint()
    AgrWeights.init(seed=5).save(tmp_path / "agr.bin")
    assert load_config(tmp_path / "run.ini").fingerprint() != fp


def test_bad_weight_files(tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"junk")
    cfg = parse_config("[run]\nagr_weights = junk.bin\nmoe_weights = junk.bin\n", tmp_path)
    with pytest.raises(ConfigError, match="run.agr_weights"):
        cfg.agr_weights()
    with pytest.raises(ConfigError, match="run.moe_weights"):
        cfg.moe_weights()
    two = parse_config("[run]\nmoe_weights = a.bin, b.bin\n", tmp_path)
    with pytest.raises(ConfigError, match="run.moe_weights"):
        two.moe_weights()
