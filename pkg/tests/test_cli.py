import os

import numpy as np
import pytest

from uavnav.camera import load_depth_image
from uavnav.cli import EXIT_CONFIG, EXIT_OK, EXIT_PREREQ, main
from uavnav.collision_aware import collision_aware
from uavnav.config import ConfigError, RunConfig, default_config_text
from uavnav.geometry import load_world


SMALL_CONFIG = """
[run]
seed = 7

[world]
bounds = 0 -4 0 9 4 3
poisson_radius = 1000

[camera]
width = 16
height = 12

[env]
max_steps = 25

[collect]
episodes = 2
max_frames = 60

[vae]
epochs = 1
batch_size = 8

[lstm]
temporal_interval = 3
epochs = 1

[ppo]
rollout = 64
total_steps = 64
minibatch = 32
epochs = 1
n_envs = 4

[eval]
seeds = 1
runs_per_seed = 2
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(SMALL_CONFIG)
    return str(path)


def run_cli(*argv):
    return main(list(argv))


class TestConfig:
    def test_defaults_documented_and_parse(self, tmp_path):
        text = default_config_text()
        path = tmp_path / "default.ini"
        path.write_text(text)
        cfg = RunConfig.load(path)
        assert cfg.get("collect", "episodes") == 200
        assert cfg.get("collect", "max_frames") == 10000
        assert cfg.get("eval", "seeds") == 4
        assert cfg.get("eval", "runs_per_seed") == 25
        assert cfg.get("lstm", "temporal_interval") == 10

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[world]\npoison_radius = 2\n")
        with pytest.raises(ConfigError, match="unknown key"):
            RunConfig.load(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[wrold]\n")
        with pytest.raises(ConfigError, match="unknown section"):
            RunConfig.load(path)

    def test_bad_value_type(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[camera]\nwidth = wide\n")
        with pytest.raises(ConfigError, match="bad value"):
            RunConfig.load(path)

    def test_cli_reports_config_error(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[world]\nnope = 1\n")
        assert run_cli("--config", str(path), "gen-world") == EXIT_CONFIG


class TestPipelineCommands:
    def test_gen_world_and_render(self, cfg_file, tmp_path):
        out = str(tmp_path / "exp")
        assert run_cli("--config", cfg_file, "--out", out, "gen-world") == EXIT_OK
        world = load_world(os.path.join(out, "world.txt"))
        assert world.config.seed == 7
        assert os.path.exists(os.path.join(out, "manifest-gen-world.txt"))
        assert run_cli("--config", cfg_file, "--out", out, "render") == EXIT_OK
        frame = os.path.join(out, "frames", "frame_000000.pgm")
        img, intr, pose = load_depth_image(frame)
        assert (intr.width, intr.height) == (16, 12)

    def test_seed_override(self, cfg_file, tmp_path):
        out = str(tmp_path / "exp")
        assert run_cli(
            "--config", cfg_file, "--out", out, "--seed", "99", "gen-world"
        ) == EXIT_OK
        assert load_world(os.path.join(out, "world.txt")).config.seed == 99

    def test_preprocess_matches_library_bit_exactly(self, cfg_file, tmp_path):
        out = str(tmp_path / "exp")
        run_cli("--config", cfg_file, "--out", out, "gen-world")
        run_cli("--config", cfg_file, "--out", out, "render")
        assert run_cli(
            "--config", cfg_file, "--out", out, "preprocess",
            "--input", os.path.join(out, "frames"),
        ) == EXIT_OK
        cfg = RunConfig.load(cfg_file)
        cfg.set("run", "out", out)
        raw, intr, pose = load_depth_image(
            os.path.join(out, "frames", "frame_000000.pgm")
        )
        expected = collision_aware(raw, cfg.capre_config())
        got, _, _ = load_depth_image(
            os.path.join(out, "preprocessed", "frame_000000.pgm")
        )
        assert np.array_equal(
            np.rint(expected.data * 1000.0), np.rint(got.data * 1000.0)
        )

    def test_preprocess_missing_input_is_prereq_error(self, cfg_file, tmp_path):
        out = str(tmp_path / "exp")
        assert run_cli(
            "--config", cfg_file, "--out", out, "preprocess",
            "--input", os.path.join(out, "nowhere"),
        ) == EXIT_PREREQ

    def test_collect_requires_policy_unless_scripted(self, cfg_file, tmp_path):
        out = str(tmp_path / "exp")
        assert run_cli("--config", cfg_file, "--out", out, "collect") == EXIT_PREREQ
        assert not os.path.exists(os.path.join(out, "episodes"))
        assert run_cli(
            "--config", cfg_file, "--out", out, "collect", "--scripted"
        ) == EXIT_OK
        eps = sorted(os.listdir(os.path.join(out, "episodes")))
        assert eps == ["ep0000", "ep0001"]

    def test_train_lstm_requires_vae(self, cfg_file, tmp_path):
        out = str(tmp_path / "exp")
        run_cli("--config", cfg_file, "--out", out, "collect", "--scripted")
        assert run_cli(
            "--config", cfg_file, "--out", out, "train-lstm"
        ) == EXIT_PREREQ
        assert not os.path.exists(os.path.join(out, "lstm_ca.bin"))

    def test_eval_requires_policy(self, cfg_file, tmp_path):
        out = str(tmp_path / "exp")
        assert run_cli("--config", cfg_file, "--out", out, "eval") == EXIT_PREREQ

    def test_default_collect_caps(self):
        cfg = RunConfig()
        assert cfg.get("collect", "episodes") == 200
        assert cfg.get("collect", "max_frames") == 10000


@pytest.mark.slow
class TestFullPipeline:
    def run_stage(self, cfg_file, out, *argv):
        assert run_cli("--config", cfg_file, "--out", out, *argv) == EXIT_OK

    def full_pipeline(self, cfg_file, out):
        self.run_stage(cfg_file, out, "gen-world")
        self.run_stage(cfg_file, out, "train-policy", "--stage", "initial",
                       "--mode", "VanillaRL")
        self.run_stage(cfg_file, out, "collect",
                       "--policy", os.path.join(out, "policy_initial_VanillaRL"))
        self.run_stage(cfg_file, out, "train-vae", "--supervision", "ca")
        self.run_stage(cfg_file, out, "train-vae", "--supervision", "raw")
        self.run_stage(cfg_file, out, "train-lstm", "--supervision", "ca")
        self.run_stage(cfg_file, out, "train-policy", "--stage", "final",
                       "--mode", "CaMeRL")
        self.run_stage(cfg_file, out, "eval",
                       "--policy", os.path.join(out, "policy_final_CaMeRL"))
        return (
            open(os.path.join(out, "eval_CaMeRL", "report.csv"), "rb").read()
        )

    def test_end_to_end_determinism(self, cfg_file, tmp_path):
        a = self.full_pipeline(cfg_file, str(tmp_path / "runA"))
        b = self.full_pipeline(cfg_file, str(tmp_path / "runB"))
        assert a == b
        report = a.decode()
        assert report.splitlines()[0] == (
            "seed,run,termination,path_length,steps,mean_hor_speed"
        )
        assert len(report.splitlines()) == 1 + 1 * 2

    def test_manifests_written_per_command(self, cfg_file, tmp_path):
        out = str(tmp_path / "runC")
        self.run_stage(cfg_file, out, "gen-world")
        self.run_stage(cfg_file, out, "train-policy", "--stage", "initial",
                       "--mode", "VanillaRL")
        self.run_stage(cfg_file, out, "collect",
                       "--policy", os.path.join(out, "policy_initial_VanillaRL"))
        for cmd in ("gen-world", "train-policy", "collect"):
            path = os.path.join(out, f"manifest-{cmd}.txt")
            assert os.path.exists(path)
            text = open(path).read()
            assert "seed: 7" in text
            assert "config:" in text and "outputs:" in text
