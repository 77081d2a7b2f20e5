import json

import numpy as np
import pytest

from lesionforge import config
from lesionforge.errors import ConfigError, DataError, FormatError
from lesionforge.io import mvol_write
from lesionforge.manifest import Manifest
from lesionforge.preprocess import SEQUENCES


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = config.defaults()
        assert config.parse(config.dumps(cfg)) == cfg

    def test_parse_overrides_and_comments(self):
        cfg = config.parse("# comment\nfinetune.epochs = 3  # trailing\n\npatch.size=11\n"
                           "pretrain.widths = 484,50,20\npost.per_slice = yes\n")
        assert cfg["finetune.epochs"] == 3 and cfg["patch.size"] == 11
        assert cfg["pretrain.widths"] == (484, 50, 20)
        assert cfg["post.per_slice"] is True

    @pytest.mark.parametrize("text", ["finetune.epoch = 3", "patch.size = big",
                                      "post.threshold = mean", "post.connectivity = 8",
                                      "no equals sign", "pretrain.masking = 1.5"])
    def test_rejects(self, text):
        cfg = config.parse(text) if "masking" in text else None
        if cfg is not None:
            with pytest.raises(ConfigError):
                config.training_config(cfg, "pretrain")
        else:
            with pytest.raises(ConfigError):
                config.parse(text)

    def test_training_config(self):
        cfg = config.parse("transfer.dropout = 0.35\nrun.seed = 9")
        tc = config.training_config(cfg, "transfer")
        assert tc.dropout == 0.35 and tc.seed == 9
        assert config.training_config(cfg, "transfer", seed=2).seed == 2
        assert config.training_config(cfg, "pretrain").optimizer == "rmsprop"

    def test_search_space(self):
        space = config.search_space(config.defaults())
        assert space["lr"] == (0.01, 0.2)
        assert space["batch_size"] == [32, 64, 128]
        with pytest.raises(ConfigError):
            config.search_space(config.parse("search.lr = 0.1"))


def write_study(root, sid, shape=(2, 4, 5), seqs=SEQUENCES, labels=True):
    d = root / sid
    d.mkdir()
    entry = {"sequences": {}}
    for n in seqs:
        mvol_write(np.full(shape, 2.0, np.float32), d / f"{n}.mvol")
        entry["sequences"][n] = f"{sid}/{n}.mvol"
    if labels:
        mvol_write(np.zeros(shape, np.uint8), d / "labels.mvol")
        entry["labels"] = f"{sid}/labels.mvol"
    return entry


class TestManifest:
    def build(self, tmp_path, overlap=True):
        raw = {"studies": {"a": write_study(tmp_path, "a"), "b": write_study(tmp_path, "b")},
               "cohorts": {"pretrain": ["a", "b"], "finetune": ["a"], "test": ["b"]},
               "overlap": [["pretrain", "finetune"], ["pretrain", "test"]] if overlap else []}
        (tmp_path / "m.json").write_text(json.dumps(raw))
        return tmp_path / "m.json"

    def test_load_and_round_trip(self, tmp_path):
        m = Manifest.load(self.build(tmp_path))
        m.check_files()
        assert m.cohort("finetune") == ["a"]
        s = m.load_study("a")
        assert list(s.sequences) == list(SEQUENCES) and s.labels is not None
        m.save(tmp_path / "m2.json")
        assert Manifest.load(tmp_path / "m2.json").to_dict() == m.to_dict()

    def test_overlap_must_be_declared(self, tmp_path):
        with pytest.raises(DataError):
            Manifest.load(self.build(tmp_path, overlap=False))

    def test_missing_and_bad_files(self, tmp_path):
        with pytest.raises(DataError):
            Manifest.load(tmp_path / "nope.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(FormatError):
            Manifest.load(tmp_path / "bad.json")
        m = Manifest.load(self.build(tmp_path))
        (tmp_path / "a" / "T1.mvol").unlink()
        with pytest.raises(DataError):
            m.check_files(["a"])

    def test_dims_must_agree(self, tmp_path):
        m = Manifest.load(self.build(tmp_path))
        mvol_write(np.zeros((2, 4, 6), np.float32), tmp_path / "b" / "T2.mvol")
        m.check_files(["a"])
        with pytest.raises(DataError):
            m.check_files(["b"])

    def test_missing_sequence_needs_drop(self, tmp_path):
        entry = write_study(tmp_path, "c", seqs=("FLAIR", "T2", "T1"))
        m = Manifest.from_dict({"studies": {"c": entry}}, tmp_path)
        with pytest.raises(DataError, match="--drop"):
            m.load_study("c")
        s = m.load_study("c", drop=("T1c",))
        assert not s.sequences["T1c"].any() and s.meta["dropped"] == ["T1c"]
        s = m.load_study("c", drop=("T1", "T1c"), fill="mean")
        assert np.all(s.sequences["T1"] == 2.0) and not s.sequences["T1c"].any()

    def test_unknown_names(self, tmp_path):
        with pytest.raises(DataError):
            Manifest.from_dict({"studies": {"x": {"sequences": {"PD": "x"}}}})
        with pytest.raises(DataError):
            Manifest.from_dict({"studies": {}, "cohorts": {"test": ["ghost"]}})
        m = Manifest.from_dict({"studies": {}})
        with pytest.raises(DataError):
            m.cohort("test")
