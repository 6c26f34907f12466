import numpy as np
import pytest

from mobonet import checkpoint as ckpt
from mobonet import nets


def _small_refinenet(seed=0):
    return nets.build_refinenet(nets.RefineNetConfig(32, 32, 9, 0.125), seed=seed, dtype=np.float32)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = _small_refinenet()
    extra = {"adagrad/conv1.weight": np.random.default_rng(0).random((8, 9, 3, 3)).astype(np.float32)}
    ckpt.save_checkpoint(tmp_path / "a.ckpt", net, extra)
    back, back_extra = ckpt.load_checkpoint(tmp_path / "a.ckpt", np.float32)
    assert back.config_dict() == net.config_dict()
    for k, p in net.params.items():
        assert back.params[k].data.tobytes() == p.data.tobytes()
    assert back_extra["adagrad/conv1.weight"].tobytes() == extra["adagrad/conv1.weight"].tobytes()
    ckpt.save_checkpoint(tmp_path / "b.ckpt", back, back_extra)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_fusion_checkpoint_roundtrip(tmp_path):
    net = nets.build_fusion_net(nets.FusionNetConfig(layer_count=2, feature_maps=4), seed=1, dtype=np.float32)
    ckpt.save_checkpoint(tmp_path / "f.ckpt", net)
    back, extra = ckpt.load_checkpoint(tmp_path / "f.ckpt", np.float32, expect_kind="fusion")
    assert isinstance(back, nets.FusionNet) and extra == {}
    assert all(back.params[k].data.tobytes() == v.data.tobytes() for k, v in net.params.items())


def test_header_layout():
    raw = ckpt.encode_checkpoint({"kind": "x"}, {})
    assert raw[:8] == b"MOBOCKPT"
    assert raw[8:12] == (1).to_bytes(4, "little")
    assert raw[12:16] == (13).to_bytes(4, "little")
    assert raw[16:29] == b'{"kind": "x"}'
    assert raw[29:] == (0).to_bytes(4, "little")


def test_config_mismatches(tmp_path):
    net = _small_refinenet()
    path = tmp_path / "a.ckpt"
    ckpt.save_checkpoint(path, net)
    with pytest.raises(ckpt.ConfigError):
        ckpt.load_checkpoint(path, expect_kind="fusion")

    cfg, records = ckpt.decode_checkpoint(path.read_bytes())
    del records["head.bias"]
    (tmp_path / "missing.ckpt").write_bytes(ckpt.encode_checkpoint(cfg, records))
    with pytest.raises(ckpt.ConfigError):
        ckpt.load_checkpoint(tmp_path / "missing.ckpt")

    cfg2 = dict(cfg, width_multiplier=0.25)
    _, records = ckpt.decode_checkpoint(path.read_bytes())
    (tmp_path / "shape.ckpt").write_bytes(ckpt.encode_checkpoint(cfg2, records))
    with pytest.raises(ckpt.ConfigError):
        ckpt.load_checkpoint(tmp_path / "shape.ckpt")

    with pytest.raises(ckpt.ConfigError):
        ckpt.decode_checkpoint(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(ckpt.ConfigError):
        ckpt.decode_checkpoint(path.read_bytes()[:-3])
    with pytest.raises(ckpt.ConfigError):
        ckpt.network_from_config({"kind": "unknown"})
    with pytest.raises(ckpt.ConfigError):
        ckpt.network_from_config({"kind": "fusion", "depth": 3})
