"""Network: channel bookkeeping, closed-form parameter counts, forward
shapes, evaluation purity, and weight archive round-trips."""

import numpy as np
import pytest

from sacnet.network import (ConfigError, NetworkConfig, build, desk_profile,
                            export_weights, full_profile, import_pretrained,
                            load_archive, save_archive)
from sacnet.tensor import Tensor, TensorError


def expected_parameter_count(cfg: NetworkConfig) -> int:
    """Independent closed-form count derived from the layer arithmetic."""
    ac = cfg.attention_config()
    mid = cfg.bottleneck_factor * cfg.growth_rate
    total = 3 * cfg.stem_channels * cfg.stem_kernel ** 2 + cfg.stem_channels
    ch = cfg.stem_channels
    for b, num_layers in enumerate(cfg.block_layout):
        for i in range(num_layers):
            total += 2 * ch                       # bn1 gamma/beta
            total += ch * mid + mid               # 1x1 bottleneck conv
            total += 2 * mid                      # bn2
            if i in cfg.attention_placement and ac.output_dim > 0:
                conv_ch = cfg.growth_rate - ac.output_dim
                if conv_ch > 0:
                    total += conv_ch * mid * 9 + conv_ch
                total += ac.num_heads * mid * (2 * ac.key_dim + ac.value_dim)
                total += ac.num_heads * ac.value_dim * ac.output_dim
                if ac.relative_positions:
                    total += 2 * (2 * ac.max_rel_extent - 1) * ac.key_dim
            else:
                total += mid * cfg.growth_rate * 9 + cfg.growth_rate
            ch += cfg.growth_rate
        if b != len(cfg.block_layout) - 1:
            out = int(np.floor(cfg.compression * ch))
            total += 2 * ch + ch * out + out
            ch = out
    total += 2 * ch                               # head bn
    total += ch * cfg.num_classes + cfg.num_classes
    return total


class TestArchitecture:
    def test_dense_block_channel_arithmetic(self):
        cfg = desk_profile()
        net = build(cfg, 0)
        ch = cfg.stem_channels
        for i, block in enumerate(net.blocks):
            assert block.out_channels == ch + len(block.layers) * cfg.growth_rate
            ch = block.out_channels
            if i < len(net.transitions):
                assert net.transitions[i].out_channels == int(
                    np.floor(cfg.compression * ch))
                ch = net.transitions[i].out_channels
        assert net.feature_channels == ch

    @pytest.mark.parametrize("factory", [desk_profile, full_profile])
    def test_parameter_count_closed_form(self, factory):
        cfg = factory()
        net = build(cfg, 0)
        assert net.parameter_count() == expected_parameter_count(cfg)

    def test_full_profile_shape(self):
        cfg = full_profile()
        assert cfg.input_size == (224, 224)
        assert cfg.block_layout == (6, 12, 24, 16)
        assert cfg.growth_rate == 32
        net = build(cfg, 0)  # built for structure only, never trained here
        assert net.parameter_count() > 1_000_000

    def test_forward_output_shape(self):
        cfg = desk_profile()
        net = build(cfg, 0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 32, 32)))
        out = net.forward(x)
        assert out.shape == (2, cfg.num_classes)

    def test_dense_connectivity_probe(self):
        # every composite layer sees all earlier feature maps: input channel
        # counts grow by growth_rate per layer
        cfg = NetworkConfig(block_layout=(3,), growth_rate=4, stem_channels=8,
                            input_size=(8, 8))
        net = build(cfg, 0)
        widths = [layer.bn1.gamma.data.size for layer in net.blocks[0].layers]
        assert widths == [8, 12, 16]

    def test_wrong_input_size_rejected(self):
        net = build(desk_profile(), 0)
        with pytest.raises(TensorError):
            net.forward(Tensor(np.zeros((1, 3, 16, 16))))
        with pytest.raises(TensorError):
            net.forward(Tensor(np.zeros((1, 1, 32, 32))))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            NetworkConfig(block_layout=())
        with pytest.raises(ConfigError):
            NetworkConfig(compression=0.0)
        with pytest.raises(ConfigError):
            NetworkConfig(growth_rate=0)

    def test_config_dict_round_trip(self):
        cfg = full_profile(num_classes=5)
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_parameter_names_unique_and_prefixed(self):
        net = build(desk_profile(), 0)
        names = list(net.parameters())
        assert len(names) == len(set(names))
        assert any(n.startswith("block1/layer0/conv2/attn") for n in names)
        assert "head/fc/weight" in names


class TestEvalPurity:
    def test_eval_forward_is_pure(self):
        net = build(NetworkConfig(input_size=(8, 8), block_layout=(1, 1),
                                  growth_rate=4, stem_channels=8), 0)
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 8, 8)))
        before = {n: a.copy() for n, a in net.state_arrays()}
        out1 = net.forward(x, train=False).data
        out2 = net.forward(x, train=False).data
        assert np.array_equal(out1, out2)
        for name, arr in net.state_arrays():
            assert np.array_equal(arr, before[name]), name

    def test_train_forward_updates_running_stats(self):
        net = build(NetworkConfig(input_size=(8, 8), block_layout=(1,),
                                  growth_rate=4, stem_channels=8), 0)
        x = Tensor(np.random.default_rng(2).normal(size=(4, 3, 8, 8)))
        before = net.batchnorms()[0].state.running_mean.copy()
        net.forward(x, train=True)
        after = net.batchnorms()[0].state.running_mean
        assert not np.array_equal(before, after)

    def test_predict_probabilities_in_unit_interval(self):
        net = build(NetworkConfig(input_size=(8, 8), block_layout=(1,),
                                  growth_rate=4, stem_channels=8), 0)
        x = Tensor(np.random.default_rng(3).normal(size=(2, 3, 8, 8)))
        probs = net.predict_probabilities(x).data
        assert np.all((probs > 0) & (probs < 1))


class TestPersistence:
    CFG = NetworkConfig(input_size=(8, 8), block_layout=(1, 1), growth_rate=4,
                        stem_channels=8)

    def test_archive_round_trip_bitwise(self, tmp_path):
        net = build(self.CFG, 5)
        path = tmp_path / "weights.bin"
        export_weights(net, path)
        meta, arrays = load_archive(path)
        assert meta["config"] == self.CFG.to_dict()
        for name, arr in net.state_arrays():
            assert arrays[name].tobytes() == arr.tobytes(), name

    def test_import_pretrained_round_trip(self, tmp_path):
        src = build(self.CFG, 5)
        path = tmp_path / "weights.bin"
        export_weights(src, path)
        dst = build(self.CFG, 99)
        report = import_pretrained(dst, path, strict=True)
        assert not report["skipped"]
        for name, arr in src.state_arrays():
            got = dict(dst.state_arrays())[name]
            assert np.array_equal(got, arr), name

    def test_import_strict_rejects_mismatched_topology(self, tmp_path):
        src = build(self.CFG, 5)
        path = tmp_path / "weights.bin"
        export_weights(src, path)
        other = build(NetworkConfig(input_size=(8, 8), block_layout=(2, 1),
                                    growth_rate=4, stem_channels=8), 0)
        with pytest.raises(TensorError):
            import_pretrained(other, path, strict=True)
        report = import_pretrained(other, path, strict=False)
        assert report["loaded"] and report["skipped"]

    def test_archive_meta_is_json(self, tmp_path):
        path = tmp_path / "a.bin"
        save_archive(path, {"k": [1, 2]}, [("x", np.ones(3))])
        meta, arrays = load_archive(path)
        assert meta == {"k": [1, 2]}
        assert np.array_equal(arrays["x"], np.ones(3))
