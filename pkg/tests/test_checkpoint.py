"""Checkpoint container: bitwise round-trips and model rebuilds."""

import numpy as np
import pytest

from deformcast.checkpoint import (
    MAGIC,
    ModelCheckpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from deformcast.features import NormStats
from deformcast.transformer import TransformerConfig, TransformerModel


def small_checkpoint(with_stats=True, tile="E32N34"):
    rng = np.random.default_rng(0)
    params = {
        "embed/w": rng.normal(size=(4, 3)),
        "embed/b": rng.normal(size=3),
        "scalar": rng.normal(size=()),
    }
    ema = {k: v + 0.5 for k, v in params.items()}
    stats = None
    if with_stats:
        stats = NormStats(
            pixel_mean=rng.normal(size=(2, 3)),
            pixel_std=np.abs(rng.normal(size=(2, 3))) + 0.1,
            static_mean=rng.normal(size=3),
            static_std=np.abs(rng.normal(size=3)) + 0.1,
            epsilon=1e-6,
        )
    config = {"kind": "transformer", "embed_dim": 4, "layers": 1}
    return ModelCheckpoint(config=config, params=params, ema=ema, stats=stats, tile=tile)


class TestRoundTrip:
    def test_bitwise_arrays(self, tmp_path):
        ckpt = small_checkpoint()
        p = tmp_path / "model.ckpt"
        save_checkpoint(ckpt, p)
        back = load_checkpoint(p)
        assert back.config == ckpt.config
        assert back.tile == "E32N34"
        assert back.version == ckpt.version
        assert set(back.params) == set(ckpt.params)
        for k in ckpt.params:
            assert np.array_equal(back.params[k], ckpt.params[k])
            assert np.array_equal(back.ema[k], ckpt.ema[k])
        assert np.array_equal(back.stats.pixel_mean, ckpt.stats.pixel_mean)
        assert np.array_equal(back.stats.pixel_std, ckpt.stats.pixel_std)
        assert back.stats.epsilon == 1e-6

    def test_file_level_idempotence(self, tmp_path):
        # save -> load -> save reproduces the identical byte stream
        a = tmp_path / "a.ckpt"
        b = tmp_path / "b.ckpt"
        ckpt = small_checkpoint()
        save_checkpoint(ckpt, a)
        save_checkpoint(load_checkpoint(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_no_stats_no_tile(self, tmp_path):
        ckpt = small_checkpoint(with_stats=False, tile=None)
        p = tmp_path / "bare.ckpt"
        save_checkpoint(ckpt, p)
        back = load_checkpoint(p)
        assert back.stats is None
        assert back.tile is None

    def test_header_is_ascii(self, tmp_path):
        p = tmp_path / "model.ckpt"
        save_checkpoint(small_checkpoint(), p)
        head = p.read_bytes().split(b"data\n")[0]
        text = head.decode("ascii")
        assert text.splitlines()[0] == MAGIC
        assert "config {" in text

    def test_scalar_tensor_shape(self, tmp_path):
        p = tmp_path / "model.ckpt"
        save_checkpoint(small_checkpoint(), p)
        back = load_checkpoint(p)
        assert back.params["scalar"].shape == ()


class TestValidation:
    def test_mismatched_ema_names(self):
        params = {"w": np.zeros(2)}
        with pytest.raises(ValueError, match="EMA tensor names"):
            ModelCheckpoint(config={}, params=params, ema={"v": np.zeros(2)})

    def test_mismatched_ema_shape(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ModelCheckpoint(
                config={}, params={"w": np.zeros(2)}, ema={"w": np.zeros(3)}
            )

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTCKPT0\nversion 1\n")
        with pytest.raises(ValueError, match="DEFCKPT1"):
            load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "model.ckpt"
        save_checkpoint(small_checkpoint(), p)
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "model.ckpt"
        save_checkpoint(small_checkpoint(), p)
        with open(p, "ab") as fh:
            fh.write(b"\x00" * 8)
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(p)

    def test_space_in_name_rejected(self, tmp_path):
        bad = ModelCheckpoint(
            config={}, params={"a b": np.zeros(1)}, ema={"a b": np.zeros(1)}
        )
        with pytest.raises(ValueError, match="space"):
            save_checkpoint(bad, tmp_path / "x.ckpt")


class TestModelRebuild:
    def micro(self):
        cfg = TransformerConfig(
            grid_height=8, grid_width=8, patch_size=4, embed_dim=8,
            layers=1, heads=2, ffn_multiplier=2, input_channels=6,
            history_length=3, dropout=0.0,
        )
        return TransformerModel(cfg, seed=1)

    def checkpoint_for(self, model):
        config = model.config_dict()
        config["train_fraction"] = 0.8
        config["seed"] = 1
        arrays = model.store.arrays()
        return ModelCheckpoint(
            config=config,
            params=arrays,
            ema={k: v.copy() for k, v in arrays.items()},
        )

    def test_rebuilt_model_reproduces_forward(self, tmp_path):
        model = self.micro()
        ckpt = self.checkpoint_for(model)
        p = tmp_path / "model.ckpt"
        save_checkpoint(ckpt, p)
        rebuilt = model_from_checkpoint(load_checkpoint(p), use_ema=False)
        x = np.random.default_rng(2).normal(0, 1, (2, 3, 6, 8, 8))
        assert np.array_equal(
            model.forward_batch(x).data, rebuilt.forward_batch(x).data
        )

    def test_use_ema_selects_shadow(self):
        model = self.micro()
        ckpt = self.checkpoint_for(model)
        for k in ckpt.ema:
            ckpt.ema[k] = ckpt.ema[k] + 1.0
        raw = model_from_checkpoint(ckpt, use_ema=False)
        shadow = model_from_checkpoint(ckpt, use_ema=True)
        name = next(iter(ckpt.params))
        assert np.array_equal(raw.store[name].data, ckpt.params[name])
        assert np.array_equal(shadow.store[name].data, ckpt.ema[name])

    def test_stgcn_rebuild(self):
        from deformcast.stgcn import StgcnConfig, StgcnModel

        cfg = StgcnConfig(
            grid_height=8, grid_width=8, input_channels=6,
            history_length=5, blocks=1, hidden=(4,), kernel=3,
        )
        model = StgcnModel(cfg, seed=3)
        config = model.config_dict()
        arrays = model.store.arrays()
        ckpt = ModelCheckpoint(config=config, params=arrays, ema=arrays)
        rebuilt = model_from_checkpoint(ckpt, use_ema=False)
        x = np.random.default_rng(4).normal(0, 1, (1, 5, 6, 8, 8))
        assert np.array_equal(
            model.forward_batch(x).data, rebuilt.forward_batch(x).data
        )

    def test_unknown_kind(self):
        ckpt = ModelCheckpoint(
            config={"kind": "cnn"}, params={"w": np.zeros(1)}, ema={"w": np.zeros(1)}
        )
        with pytest.raises(ValueError, match="unknown model kind"):
            model_from_checkpoint(ckpt)

    def test_missing_tensor_rejected(self):
        model = self.micro()
        ckpt = self.checkpoint_for(model)
        del ckpt.params[next(iter(ckpt.params))]
        del ckpt.ema[next(iter(ckpt.ema))]
        with pytest.raises(ValueError):
            model_from_checkpoint(ckpt, use_ema=False)
