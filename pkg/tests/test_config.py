import pytest

from chunklab.config import (
    AveragerSpec,
    ConfigError,
    apply_overrides,
    config_hash,
    default_config,
    load_config_file,
    parse_config_text,
    serialize_config,
)


class TestRoundTrip:
    def test_default_round_trips(self):
        cfg = default_config()
        assert parse_config_text(serialize_config(cfg)) == cfg

    def test_custom_values_round_trip(self):
        text = """
[dataset]
kind = blobs
d = 3
classes = 6
separation = 2.75

[stream]
mode = unbalanced
chunk_counts = 1,2,4

[train]
epochs_per_chunk = 7
lr = 0.05
method = er
memory_size = 64

[averager]
kind = ema
alphas = 0.9,0.99

[run]
seeds = 3,4
out = runs/custom
"""
        cfg = parse_config_text(text)
        assert cfg.dataset.d == 3
        assert cfg.stream.chunk_counts == (1, 2, 4)
        assert cfg.train.lr == 0.05
        assert cfg.averager.alphas == (0.9, 0.99)
        assert cfg.run.seeds == (3, 4)
        assert parse_config_text(serialize_config(cfg)) == cfg

    def test_hash_stable_and_sensitive(self):
        cfg = default_config()
        assert config_hash(cfg) == config_hash(default_config())
        changed = apply_overrides(cfg, ["train.lr=0.2"])
        assert config_hash(changed) != config_hash(cfg)

    def test_file_loading(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text(serialize_config(default_config()), encoding="utf-8")
        assert load_config_file(path) == default_config()

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            load_config_file(tmp_path / "absent.ini")


class TestValidation:
    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            parse_config_text("[optimizer]\nlr = 1\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("[train]\nmomentum = 0.9\n")

    def test_bad_value_reports_field(self):
        with pytest.raises(ConfigError, match=r"\[train\] lr"):
            parse_config_text("[train]\nlr = fast\n")

    def test_empty_seeds_rejected(self):
        with pytest.raises(ConfigError, match="seeds"):
            parse_config_text("[run]\nseeds =\n")

    def test_both_sweep_axes_rejected(self):
        with pytest.raises(ConfigError, match="not both"):
            parse_config_text("[stream]\nchunk_sizes = 8\nchunk_counts = 2\n")

    def test_csv_path_must_exist(self):
        with pytest.raises(ConfigError, match="does not exist"):
            parse_config_text("[dataset]\nkind = csv\npath = /nonexistent.csv\n")

    def test_train_section_invariants_surface_as_config_errors(self):
        with pytest.raises(ConfigError, match=r"\[train\]"):
            parse_config_text("[train]\nbatch_size = 0\n")


class TestOverrides:
    def test_flag_overrides_win(self):
        cfg = apply_overrides(default_config(), ["train.lr=0.5", "run.seeds=7,8"])
        assert cfg.train.lr == 0.5
        assert cfg.run.seeds == (7, 8)

    def test_malformed_override_rejected(self):
        with pytest.raises(ConfigError, match="section.key=value"):
            apply_overrides(default_config(), ["lr=0.5"])

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError, match="unknown field"):
            apply_overrides(default_config(), ["train.momentum=0.9"])


class TestAveragerOptions:
    def test_expansions(self):
        assert AveragerSpec(kind="none").options() == ("none",)
        assert AveragerSpec(kind="mean").options() == ("none", "mean")
        assert AveragerSpec(kind="ema", alphas=(0.8,)).options() == ("none", "ema:0.8")
        assert AveragerSpec(kind="both", alphas=(0.8, 0.95)).options() == (
            "none",
            "mean",
            "ema:0.8",
            "ema:0.95",
        )

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            AveragerSpec(kind="polyak").options()
