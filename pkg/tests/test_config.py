"""Config parsing and cross-field validation."""

import numpy as np
import pytest

from sdfslam.config import (
    RunConfig,
    config_from_dict,
    default_config_yaml,
    load_config,
)
from sdfslam.errors import ConfigError


def write(tmp_path, text):
    p = tmp_path / "run.yaml"
    p.write_text(text)
    return str(p)


class TestLoading:
    def test_template_roundtrip(self, tmp_path):
        path = write(tmp_path, default_config_yaml("/data/room", seed=7))
        cfg = load_config(path)
        assert cfg.dataset == "/data/room"
        assert cfg.seed == 7
        assert cfg.mapping.n_g == 2048
        assert cfg.tracking.lr == pytest.approx(1e-3)
        assert cfg.weights.sdf == 1000.0
        assert cfg.sampling.m_c == 32
        assert cfg.grid.levels == 16
        assert cfg.ba.window is None
        assert cfg.bounds is None

    def test_minimal_config(self, tmp_path):
        cfg = load_config(write(tmp_path, "dataset: /x\n"))
        assert cfg.dataset_format == "synthetic"
        assert cfg.mapping.map_every == 5
        assert cfg.field_cfg.h_dim == 15

    def test_partial_section_overrides(self, tmp_path):
        cfg = load_config(
            write(tmp_path, "dataset: /x\ntracking: {iters: 20}\n")
        )
        assert cfg.tracking.iters == 20
        assert cfg.tracking.n_pixels == 1024  # untouched default

    def test_explicit_bounds(self, tmp_path):
        text = (
            "dataset: /x\nbounds:\n  min: [-1, -1, -1]\n  max: [1, 1, 2]\n"
        )
        cfg = load_config(write(tmp_path, text))
        assert np.array_equal(cfg.bounds.min, [-1, -1, -1])
        assert np.array_equal(cfg.bounds.max, [1, 1, 2])

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/run.yaml")

    def test_malformed_yaml(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, "dataset: [unclosed\n"))


class TestValidation:
    def test_unknown_top_key(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            config_from_dict({"dataset": "/x", "typo_section": {}})

    def test_unknown_section_key(self):
        with pytest.raises(ConfigError, match="tracking"):
            config_from_dict({"dataset": "/x", "tracking": {"learning_rate": 0.1}})

    def test_dataset_required(self):
        with pytest.raises(ConfigError, match="dataset"):
            config_from_dict({})

    def test_bad_section_value(self):
        with pytest.raises(ConfigError):
            config_from_dict({"dataset": "/x", "mapping": {"n_g": 0}})

    def test_tum_needs_bounds(self):
        with pytest.raises(ConfigError, match="bounds"):
            config_from_dict({"dataset": "/x", "dataset_format": "tum"})

    def test_band_inside_truncation(self):
        with pytest.raises(ConfigError, match="d_s"):
            config_from_dict(
                {"dataset": "/x", "sampling": {"d_s": 0.2, "truncation": 0.1}}
            )

    def test_frame_range_ordering(self):
        with pytest.raises(ConfigError):
            config_from_dict({"dataset": "/x", "frame_start": 5, "frame_end": 5})

    def test_bad_bounds_shape(self):
        with pytest.raises(ConfigError):
            config_from_dict({"dataset": "/x", "bounds": {"min": [0, 0], "max": [1, 1]}})

    def test_direct_construction_validates(self):
        with pytest.raises(ConfigError):
            RunConfig(dataset="/x", dataset_format="ros")
