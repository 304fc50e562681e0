import json

import numpy as np
import pytest

from bevmotion.archive import (load_config_file, read_frame_file,
                               read_manifest, read_motion_file, read_scene,
                               write_frame_file, write_motion_file,
                               write_scene)
from bevmotion.core import BACKWARD, FORWARD, Config, PointFrame
from bevmotion.errors import ArchiveError, ConfigError
from bevmotion.synth import recipe_suite, generate

from conftest import make_stack


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class TestFrameFile:
    def test_round_trip(self, tmp_path):
        pts = f32(np.random.default_rng(0).uniform(-30, 30, (57, 3)))
        path = tmp_path / "frame.bevm"
        write_frame_file(path, PointFrame(timestamp=0.4, points=pts))
        again = read_frame_file(path, timestamp=0.4)
        assert np.array_equal(again.points, pts)
        assert again.timestamp == 0.4

    def test_write_read_write_byte_identical(self, tmp_path):
        pts = f32(np.random.default_rng(1).uniform(-5, 5, (20, 3)))
        p1, p2 = tmp_path / "a.bevm", tmp_path / "b.bevm"
        write_frame_file(p1, PointFrame(0.0, pts))
        write_frame_file(p2, read_frame_file(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bevm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ArchiveError):
            read_frame_file(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "trunc.bevm"
        write_frame_file(path, PointFrame(0.0, f32(np.ones((4, 3)))))
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ArchiveError):
            read_frame_file(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "extra.bevm"
        write_frame_file(path, PointFrame(0.0, f32(np.ones((4, 3)))))
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(ArchiveError):
            read_frame_file(path)


class TestMotionFile:
    def _stack(self, small_grid, direction=FORWARD):
        rng = np.random.default_rng(2)
        idx = np.unique(rng.integers(0, 16, (20, 2)), axis=0)
        vals = f32(rng.normal(0, 2, (3, idx.shape[0], 2)))
        return make_stack(small_grid, idx, vals, direction)

    def test_round_trip_bit_exact(self, small_grid, tmp_path):
        stack = self._stack(small_grid)
        path = tmp_path / "field.mfld"
        write_motion_file(path, stack)
        again = read_motion_file(path)
        assert again.direction == FORWARD
        assert again.grid == stack.grid
        assert np.array_equal(again.steps, stack.steps)
        assert np.array_equal(again.valid, stack.valid)

    def test_write_read_write_byte_identical(self, small_grid, tmp_path):
        stack = self._stack(small_grid, BACKWARD)
        p1, p2 = tmp_path / "a.mfld", tmp_path / "b.mfld"
        write_motion_file(p1, stack)
        write_motion_file(p2, read_motion_file(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_direction_byte(self, small_grid, tmp_path):
        stack = self._stack(small_grid, BACKWARD)
        path = tmp_path / "b.mfld"
        write_motion_file(path, stack)
        assert read_motion_file(path).direction == BACKWARD

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mfld"
        path.write_bytes(b"XXXX" + b"\x00" * 100)
        with pytest.raises(ArchiveError):
            read_motion_file(path)

    def test_truncated_mask(self, small_grid, tmp_path):
        stack = self._stack(small_grid)
        path = tmp_path / "t.mfld"
        write_motion_file(path, stack)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ArchiveError):
            read_motion_file(path)


class TestSceneArchive:
    def test_round_trip(self, tmp_path, cfg):
        recipe = recipe_suite("smoke")[1]
        seq = generate(recipe, cfg)
        grid = seq.ground_truth.grid
        out = write_scene(tmp_path / "scene", seq, recipe, cfg, grid)
        again, manifest = read_scene(out)
        assert again.n_frames == seq.n_frames
        assert again.current_index == seq.current_index
        for a, b in zip(again.frames, seq.frames):
            assert np.array_equal(a.points, b.points)
        assert np.array_equal(again.ground_truth.steps, seq.ground_truth.steps)
        assert manifest["seed"] == recipe.rng_seed
        assert manifest["recipe"]["name"] == recipe.name

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ArchiveError):
            read_manifest(tmp_path)

    def test_missing_frame_file(self, tmp_path, cfg):
        recipe = recipe_suite("smoke")[0]
        seq = generate(recipe, cfg)
        out = write_scene(tmp_path / "s", seq, recipe, cfg,
                          seq.ground_truth.grid)
        (out / "frame_003.bevm").unlink()
        with pytest.raises(ArchiveError):
            read_scene(out)

    def test_wrong_format_rejected(self, tmp_path):
        d = tmp_path / "x"
        d.mkdir()
        (d / "manifest.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(ArchiveError):
            read_manifest(d)


class TestConfigFile:
    def test_load(self, tmp_path, cfg):
        path = tmp_path / "cfg.json"
        path.write_text(cfg.to_json())
        assert load_config_file(path) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArchiveError):
            load_config_file(tmp_path / "nope.json")

    def test_unknown_key(self, tmp_path, cfg):
        doc = json.loads(cfg.to_json())
        doc["extra"] = 3
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigError):
            load_config_file(path)
