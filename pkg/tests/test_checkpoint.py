import struct

import numpy as np
import pytest

from nirfuse.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from nirfuse.errors import DataError
from nirfuse.net import NetConfig, net_init


def test_header_layout(tmp_path):
    write_checkpoint(tmp_path / "c.bin", {"a": 1}, {"w": np.arange(6.0).reshape(2, 3)})
    buf = (tmp_path / "c.bin").read_bytes()
    assert buf[:8] == MAGIC
    assert struct.unpack_from("<I", buf, 8) == (1,)
    (meta_len,) = struct.unpack_from("<Q", buf, 12)
    assert buf[20:20 + meta_len] == b'{"a": 1}'
    # tensor data are little-endian float64 at the end of the file
    np.testing.assert_array_equal(np.frombuffer(buf[-48:], "<f8"), np.arange(6.0))


def test_raw_round_trip(tmp_path):
    tensors = {"x": np.random.default_rng(0).standard_normal((2, 3, 4, 5)), "y": np.ones(3)}
    write_checkpoint(tmp_path / "c.bin", {"k": [1, 2]}, tensors)
    meta, back = read_checkpoint(tmp_path / "c.bin")
    assert meta == {"k": [1, 2]}
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_network_round_trip(tmp_path):
    cfg = NetConfig(scales=3, base_channels=4, blocks_per_scale=1, sfm_arrangement=("lmm",),
                    supervise_coarsest=True, seed=3)
    net = net_init(cfg)
    save_checkpoint(tmp_path / "n.bin", net)
    loaded, _, _ = load_checkpoint(tmp_path / "n.bin")
    assert loaded.cfg == cfg
    for (na, ta), (nb, tb) in zip(net.named_parameters(), loaded.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


@pytest.mark.parametrize("cut", [4, 10, 30, -3])
def test_truncated_file_rejected(tmp_path, cut):
    net = net_init(NetConfig(scales=2, base_channels=4, blocks_per_scale=1))
    save_checkpoint(tmp_path / "n.bin", net)
    buf = (tmp_path / "n.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(buf[:cut])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "t.bin")


def test_wrong_magic_rejected(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"PNG....." + bytes(32))
    with pytest.raises(DataError, match="not a nirfuse checkpoint"):
        read_checkpoint(tmp_path / "x.bin")


def test_missing_parameter_rejected(tmp_path):
    net = net_init(NetConfig(scales=2, base_channels=4, blocks_per_scale=1))
    meta, tensors = {}, {}
    save_checkpoint(tmp_path / "n.bin", net)
    meta, tensors = read_checkpoint(tmp_path / "n.bin")
    tensors.pop(next(iter(tensors)))
    write_checkpoint(tmp_path / "m.bin", meta, tensors)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "m.bin")
