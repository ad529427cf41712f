"""Model builders: shapes, determinism, parameter counts, checkpoint I/O."""

import numpy as np
import pytest

import selat.autodiff as ad
from selat.autodiff import Tensor
from selat.errors import ConfigError, FormatError
from selat.models import (build_cnn4, build_mlp, build_small_resnet,
                          load_model, model_from_name, save_model)


class TestMLP:
    def test_logit_shape(self):
        model = build_mlp([2, 4, 2], seed=0)
        out = model.logits(Tensor(np.zeros((3, 2), dtype=np.float32)))
        assert out.shape == (3, 2)

    def test_same_seed_bit_identical(self):
        a = build_mlp([5, 8, 3], seed=7)
        b = build_mlp([5, 8, 3], seed=7)
        for key in a.params:
            np.testing.assert_array_equal(a.params[key].data, b.params[key].data)

    def test_different_seed_differs(self):
        a = build_mlp([5, 8, 3], seed=7)
        b = build_mlp([5, 8, 3], seed=8)
        assert not np.array_equal(a.params["fc1_w"].data, b.params["fc1_w"].data)

    def test_param_count_hand_arithmetic(self):
        # [2,4,2]: (2*4 + 4) + (4*2 + 2) = 12 + 10
        assert build_mlp([2, 4, 2], seed=0).param_count() == 22

    def test_bad_sizes_rejected(self):
        with pytest.raises(ConfigError):
            build_mlp([4], seed=0)
        with pytest.raises(ConfigError):
            build_mlp([4, 0, 2], seed=0)

    def test_init_mean_law_of_large_numbers(self):
        # He init on fan_in=64: std = sqrt(2/64); mean of 10k draws ~ 0
        model = build_mlp([64, 160, 2], seed=3)
        w = model.params["fc1_w"].data  # 64*160 = 10240 draws
        std = np.sqrt(2.0 / 64)
        assert abs(w.mean()) < 3 * std / np.sqrt(w.size)
        assert w.std() == pytest.approx(std, rel=0.05)


class TestCNN4:
    def test_logit_shape_28x28(self):
        model = build_cnn4((1, 28, 28), 10, seed=0)
        out = model.logits(Tensor(np.zeros((4, 1, 28, 28), dtype=np.float32)))
        assert out.shape == (4, 10)

    def test_zero_input_gives_final_bias(self):
        model = build_cnn4((1, 28, 28), 10, seed=0)
        out = model.logits(Tensor(np.zeros((2, 1, 28, 28), dtype=np.float32)))
        # biases start at zero, so every class logit is zero and equal
        np.testing.assert_array_equal(out.data, 0.0)
        model.params["fc2_b"].data = np.arange(10, dtype=np.float32)
        out = model.logits(Tensor(np.zeros((2, 1, 28, 28), dtype=np.float32)))
        np.testing.assert_allclose(out.data, np.tile(np.arange(10.0), (2, 1)), rtol=1e-6)

    def test_param_count_hand_arithmetic(self):
        # conv1 8*1*9+8=80, conv2 16*8*9+16=1168,
        # fc1 (16*7*7)*64+64=50240, fc2 64*10+10=650 -> 52138
        assert build_cnn4((1, 28, 28), 10, seed=0).param_count() == 52138

    def test_spatial_multiple_of_four_required(self):
        with pytest.raises(ConfigError):
            build_cnn4((1, 30, 28), 10, seed=0)

    def test_forward_purity(self):
        model = build_cnn4((1, 8, 8), 4, seed=1, channels=(2, 3), hidden=5)
        x = np.random.default_rng(0).random((2, 1, 8, 8)).astype(np.float32)
        ref = model.logits(Tensor(x)).data.copy()
        for _ in range(100):
            np.testing.assert_array_equal(model.logits(Tensor(x)).data, ref)

    def test_scopes_cover_params(self):
        model = build_cnn4((1, 8, 8), 3, seed=0, channels=(2, 2), hidden=4)
        assert set(model.param_scopes["all"]) == set(model.params)
        assert model.param_scopes["final_linear"] == ["fc2_w", "fc2_b"]


class TestSmallResnet:
    def test_logit_shape_32x32(self):
        model = build_small_resnet((3, 32, 32), 10, width=8, seed=0)
        out = model.logits(Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32)))
        assert out.shape == (2, 10)

    def test_param_count_hand_arithmetic(self):
        # stem 8*3*9+8=224, b1 convs 2*(8*8*9+8)=1168, mid 16*8*9+16=1168,
        # b2 convs 2*(16*16*9+16)=4640, fc (16*8*8)*10+10=10250 -> 17450
        assert build_small_resnet((3, 32, 32), 10, width=8, seed=0).param_count() == 17450

    def test_same_seed_bit_identical(self):
        a = build_small_resnet((3, 16, 16), 4, width=4, seed=5)
        b = build_small_resnet((3, 16, 16), 4, width=4, seed=5)
        for key in a.params:
            np.testing.assert_array_equal(a.params[key].data, b.params[key].data)

    def test_normalize_preset_channel_guard(self):
        with pytest.raises(ConfigError):
            build_small_resnet((1, 32, 32), 10, width=4, seed=0, normalize="cifar10")
        with pytest.raises(ConfigError):
            build_small_resnet((3, 32, 32), 10, width=4, seed=0, normalize="nope")

    def test_normalize_shifts_logits(self):
        plain = build_small_resnet((3, 16, 16), 4, width=4, seed=2)
        normed = build_small_resnet((3, 16, 16), 4, width=4, seed=2, normalize="cifar10")
        x = Tensor(np.full((1, 3, 16, 16), 0.5, dtype=np.float32))
        assert not np.allclose(plain.logits(x).data, normed.logits(x).data)


class TestNameGrammar:
    @pytest.mark.parametrize("build", [
        lambda: build_mlp([3, 6, 2], seed=0),
        lambda: build_cnn4((1, 8, 8), 3, seed=0, channels=(2, 3), hidden=5),
        lambda: build_small_resnet((3, 16, 16), 4, width=4, seed=0, normalize="cifar10"),
    ])
    def test_name_round_trips_architecture(self, build):
        model = build()
        rebuilt = model_from_name(model.name)
        assert rebuilt.name == model.name
        assert set(rebuilt.params) == set(model.params)
        for key in model.params:
            assert rebuilt.params[key].data.shape == model.params[key].data.shape

    def test_unknown_kind_rejected(self):
        with pytest.raises(FormatError):
            model_from_name("transformer;layers=96")

    def test_missing_field_rejected(self):
        with pytest.raises(FormatError):
            model_from_name("cnn4;classes=10")

    def test_malformed_segment_rejected(self):
        with pytest.raises(FormatError):
            model_from_name("mlp;layers")


class TestCheckpointRoundTrip:
    def test_save_load_bit_identical(self, tmp_path):
        model = build_cnn4((1, 8, 8), 3, seed=4, channels=(2, 3), hidden=5)
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.name == model.name
        for key in model.params:
            np.testing.assert_array_equal(loaded.params[key].data, model.params[key].data)

    def test_loaded_model_same_logits(self, tmp_path):
        model = build_mlp([4, 6, 3], seed=1)
        path = tmp_path / "mlp.ckpt"
        save_model(model, path)
        x = Tensor(np.random.default_rng(2).random((5, 4)).astype(np.float32))
        np.testing.assert_array_equal(load_model(path).logits(x).data, model.logits(x).data)

    def test_shape_mismatch_rejected(self, tmp_path):
        from selat.container import write_container
        model = build_mlp([4, 6, 3], seed=1)
        bad = {k: p.data for k, p in model.params.items()}
        bad["fc1_w"] = np.zeros((4, 7), dtype=np.float32)
        path = tmp_path / "bad.ckpt"
        write_container(path, model.name, bad)
        with pytest.raises(FormatError):
            load_model(path)

    def test_param_name_mismatch_rejected(self, tmp_path):
        from selat.container import write_container
        model = build_mlp([4, 6, 3], seed=1)
        arrays = {k: p.data for k, p in model.params.items()}
        arrays.pop("fc2_b")
        path = tmp_path / "missing.ckpt"
        write_container(path, model.name, arrays)
        with pytest.raises(FormatError):
            load_model(path)

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTSEL" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_model(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = build_mlp([4, 6, 3], seed=1)
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_model(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = build_mlp([4, 6, 3], seed=1)
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            load_model(path)


def test_zero_grads_clears_all():
    model = build_mlp([3, 4, 2], seed=0)
    x = Tensor(np.random.default_rng(0).random((2, 3)).astype(np.float32))
    loss = ad.cross_entropy_with_logits(model.logits(x), np.array([0, 1]))
    ad.backward(loss)
    assert any(p.grad is not None for p in model.params.values())
    model.zero_grads()
    assert all(p.grad is None for p in model.params.values())
