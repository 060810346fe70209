"""Encoder shape contracts, distance properties, checkpoint format."""

import struct

import numpy as np
import pytest

from cdpam.errors import ContractError, FormatError, ShapeError, VersionError
from cdpam.model import (EncoderConfig, ModelConfig, PerceptualModel, default_config,
                         desk_config, load_checkpoint, save_checkpoint, tiny_config)
from cdpam.tensor import Tensor


@pytest.fixture(scope="module")
def tiny_model():
    return PerceptualModel.initialize(tiny_config(), seed=3)


class TestConfigs:
    def test_default_matches_reference_architecture(self):
        cfg = default_config()
        assert cfg.encoder.n_layers == 16
        assert cfg.encoder.kernel == 15
        assert cfg.encoder.embedding_dim == 1024
        assert cfg.encoder.acoustic_dim == cfg.encoder.content_dim == 512
        assert cfg.projection_dim == 256
        assert cfg.lossnet_widths == (512, 256, 128, 64)

    def test_invariants_enforced(self):
        with pytest.raises(ContractError):
            EncoderConfig(stride2_layers=(1, 2, 3))  # not exactly 4
        with pytest.raises(ContractError):
            EncoderConfig(block_channels=(4, 8, 16, 30), acoustic_dim=16, content_dim=16)
        with pytest.raises(ContractError):
            EncoderConfig(acoustic_dim=100, content_dim=100)

    def test_round_trips_through_dict(self):
        for cfg in (default_config(), desk_config(), tiny_config()):
            assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncode:
    def test_embedding_split(self, tiny_model):
        cfg = tiny_model.config
        x = Tensor(np.random.default_rng(0).normal(size=(2, 1, cfg.clip_samples)) * 0.1)
        acoustic, content = tiny_model.encode(x)
        assert acoustic.shape == (2, cfg.encoder.acoustic_dim)
        assert content.shape == (2, cfg.encoder.content_dim)

    def test_identical_inputs_identical_embeddings(self, tiny_model):
        cfg = tiny_model.config
        clip = np.random.default_rng(1).normal(size=(1, 1, cfg.clip_samples)) * 0.1
        batch = Tensor(np.concatenate([clip, clip], axis=0))
        acoustic, _ = tiny_model.encode(batch, train=False)
        assert np.array_equal(acoustic.data[0], acoustic.data[1])

    def test_indivisible_length_rejected(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.encode(Tensor(np.zeros((1, 1, tiny_model.config.clip_samples + 1))))

    def test_projection_dim(self, tiny_model):
        cfg = tiny_model.config
        x = Tensor(np.random.default_rng(2).normal(size=(3, cfg.encoder.acoustic_dim)))
        for head in ("acoustic", "content"):
            assert tiny_model.project(x, head).shape == (3, cfg.projection_dim)

    def test_prepool_extent_is_length_over_16(self):
        # run the tiny encoder manually and inspect the pre-pool activation
        model = PerceptualModel.initialize(tiny_config(), seed=0)
        from cdpam import tensor as T
        enc = model.config.encoder
        h = Tensor(np.random.default_rng(3).normal(size=(1, 1, 320)) * 0.1)
        for layer in range(1, enc.n_layers + 1):
            stride = 2 if layer in enc.stride2_layers else 1
            h = T.conv1d(h, model.params[f"enc.conv{layer}.w"], stride=stride)
        assert h.shape[2] == 320 // 16


class TestDistance:
    def test_zero_for_identical(self, tiny_model):
        from cdpam.datagen import synth_corpus
        cfg = tiny_model.config
        utt = synth_corpus(1, 1, seed=5, sample_rate=cfg.sample_rate,
                           clip_samples=cfg.clip_samples)[0]
        assert tiny_model.distance(utt.clean, utt.clean) == 0.0

    def test_symmetric_and_nonnegative(self, tiny_model):
        from cdpam.datagen import synth_corpus
        cfg = tiny_model.config
        corpus = synth_corpus(4, 2, seed=6, sample_rate=cfg.sample_rate,
                              clip_samples=cfg.clip_samples)
        for a in corpus[:2]:
            for b in corpus[2:]:
                d_ab = tiny_model.distance(a.clean, b.clean)
                d_ba = tiny_model.distance(b.clean, a.clean)
                assert d_ab >= 0.0
                assert abs(d_ab - d_ba) < 1e-12

    def test_judge_in_unit_interval(self, tiny_model):
        for d in (0.0, 0.1, 1.0, 10.0, 1e6):
            assert 0.0 < tiny_model.judge(d) < 1.0

    def test_judge_rejects_negative(self, tiny_model):
        with pytest.raises(ContractError):
            tiny_model.judge(-0.5)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(tiny_model, path)
        loaded = load_checkpoint(path)
        assert loaded.stage == tiny_model.stage
        assert loaded.seed == tiny_model.seed
        assert loaded.config == tiny_model.config
        for name, t in tiny_model.params.items():
            assert np.array_equal(loaded.params[name].data, t.data)
        for name, arr in tiny_model.state.items():
            assert np.array_equal(loaded.state[name], arr)

    def test_truncated_file_is_format_error(self, tiny_model, tmp_path):
        path = tmp_path / "t.ckpt"
        save_checkpoint(tiny_model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_wrong_magic_is_format_error(self, tmp_path):
        path = tmp_path / "w.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_wrong_version_is_version_error(self, tiny_model, tmp_path):
        path = tmp_path / "v.ckpt"
        save_checkpoint(tiny_model, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            load_checkpoint(path)

    def test_trailing_garbage_is_format_error(self, tiny_model, tmp_path):
        path = tmp_path / "g.ckpt"
        save_checkpoint(tiny_model, path)
        path.write_bytes(path.read_bytes() + b"extra")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_stage_vocabulary(self):
        with pytest.raises(ContractError):
            PerceptualModel(tiny_config(), {}, {}, stage="warmup")
