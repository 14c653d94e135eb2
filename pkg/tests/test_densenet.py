import struct

import numpy as np
import pytest

from ecgtransfer import densenet as dn
from ecgtransfer.densenet import UNITS, DenseNetConfig
from ecgtransfer.errors import ConfigInvalid, CorruptCheckpoint, OutOfRange, ShapeMismatch
from ecgtransfer.prng import Prng


@pytest.fixture(scope="module")
def desk():
    m = dn.build(DenseNetConfig.desk_scale())
    dn.init_params(m, Prng(11))
    return m


def closed_form_trace(init, growth, layers, compression, length=5000):
    length = (length + 6 - 7) // 2 + 1
    length = (length + 2 - 3) // 2 + 1
    c = init
    trace = [("stem", c, length)]
    for i, n in enumerate(layers):
        c += n * growth
        trace.append((f"dense{i + 1}", c, length))
        if i < 3:
            c = int(c * compression)
            length //= 2
            trace.append((f"trans{i + 1}", c, length))
    return trace


def test_paper_default_trace():
    m = dn.build(DenseNetConfig.paper_default())
    trace = m.shape_trace()
    assert trace[:-1] == closed_form_trace(64, 32, [6, 12, 24, 16], 0.5)
    lengths = [t[2] for t in trace if t[0] in ("stem", "trans1", "trans2", "trans3")]
    assert lengths == [1250, 625, 312, 156]
    assert [t[1] for t in trace[:8]] == [64, 256, 128, 512, 256, 1024, 512, 1024]


def test_desk_trace_and_output(desk):
    assert desk.shape_trace()[:-1] == closed_form_trace(16, 8, [2, 2, 2, 2], 0.5)
    assert desk.shape_trace()[1] == ("dense1", 32, 1250)  # 16 + 2*8
    out = desk.forward(np.zeros((1, 12, 5000), np.float32))
    assert out.shape == (1, 1) and np.all(np.isfinite(out.data))


def test_parameter_partition(desk):
    names = [n for n, _, _ in desk.named_arrays()]
    assert len(names) == len(set(names))
    per_unit = sum(sum(t.data.size for t in u.params.values()) for u in desk.units)
    assert per_unit == desk.num_parameters()
    for unit in desk.units:
        assert all(n.startswith(unit.name + ".") for n in list(unit.params) + list(unit.buffers))


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        DenseNetConfig.desk_scale(block_layers=(2, 2, 2))
    with pytest.raises(ConfigInvalid):
        DenseNetConfig.desk_scale(compression=0.0)
    with pytest.raises(ConfigInvalid):
        DenseNetConfig.desk_scale(compression=1.5)
    assert DenseNetConfig.from_preset("paper_default").init_channels == 64


def test_init_rules(desk):
    for unit in desk.units:
        for name, t in unit.params.items():
            if name.endswith("fc.weight"):
                assert np.all(t.data == np.float32(0.01))
            elif name.endswith("fc.bias") or (t.data.ndim == 1 and name.endswith(".bias")):
                assert np.all(t.data == 0)
            elif t.data.ndim == 1:
                assert np.all(t.data == 1)
        for name, a in unit.buffers.items():
            assert np.all(a == (0 if "mean" in name else 1))


def test_kaiming_variance():
    m = dn.build(DenseNetConfig.paper_default())
    dn.init_params(m, Prng(5))
    checked = 0
    for name, _, a in m.named_arrays():
        if a.ndim == 3 and a.shape[1] * a.shape[2] >= 512:
            fan_in = a.shape[1] * a.shape[2]
            assert abs(a.var() / (2.0 / fan_in) - 1) < 0.10, name
            checked += 1
    assert checked > 20


def test_same_seed_same_params():
    a, b = (dn.build(DenseNetConfig.desk_scale()) for _ in range(2))
    dn.init_params(a, Prng(3))
    dn.init_params(b, Prng(3))
    assert dn.checkpoint_bytes(a) == dn.checkpoint_bytes(b)


def test_eval_forward_pure(desk):
    x = Prng(1).normal(4 * 12 * 5000).reshape(4, 12, 5000).astype(np.float32)
    before = dn.checkpoint_bytes(desk)
    z1 = desk.forward(x).data
    z2 = desk.forward(x).data
    assert z1.tobytes() == z2.tobytes()
    perm = [2, 0, 3, 1]
    assert np.allclose(desk.forward(x[perm]).data, z1[perm], atol=1e-6)
    assert dn.checkpoint_bytes(desk) == before


def test_shape_error(desk):
    with pytest.raises(ShapeMismatch):
        desk.forward(np.zeros((1, 11, 5000), np.float32))


def test_train_mode_updates_only_trainable_stats():
    m = dn.build(DenseNetConfig.desk_scale())
    dn.init_params(m, Prng(2))
    dn.freeze_prefix(m, 7)
    frozen = {n: a.copy() for n, i, a in m.named_arrays() if i < 7}
    x = Prng(4).normal(3 * 12 * 5000).reshape(3, 12, 5000).astype(np.float32)
    m.forward(x, mode="train")
    assert all(np.array_equal(a, frozen[n]) for n, i, a in m.named_arrays() if i < 7)
    assert not np.all(m.unit("head").buffers["head.norm.running_mean"] == 0)


@pytest.mark.parametrize("k,expected", [(7, ["dense4", "head"]), (0, list(UNITS)), (9, []),
                                        (5, ["dense3", "trans3", "dense4", "head"])])
def test_freeze_prefix(k, expected):
    m = dn.build(DenseNetConfig.desk_scale())
    dn.freeze_prefix(m, k)
    assert m.trainable_units() == expected
    assert m.frozen_prefix() == k
    assert all(not t.requires_grad for i, u in enumerate(m.units) if i < k for t in u.params.values())


def test_freeze_out_of_range():
    m = dn.build(DenseNetConfig.desk_scale())
    for k in (-1, 10):
        with pytest.raises(OutOfRange):
            dn.freeze_prefix(m, k)


def test_reinit_unfrozen_keeps_frozen_bytes():
    m = dn.build(DenseNetConfig.desk_scale())
    dn.init_params(m, Prng(1))
    dn.freeze_prefix(m, 7)
    frozen = [a.tobytes() for _, i, a in m.named_arrays() if i < 7]
    head = m.unit("dense4").params["dense4.layer1.conv1.weight"].data.copy()
    dn.reinit_unfrozen(m, Prng(99))
    assert [a.tobytes() for _, i, a in m.named_arrays() if i < 7] == frozen
    assert not np.array_equal(head, m.unit("dense4").params["dense4.layer1.conv1.weight"].data)
    twin = dn.clone(m)
    dn.reinit_unfrozen(m, Prng(99))
    dn.reinit_unfrozen(twin, Prng(99))
    assert dn.checkpoint_bytes(m) == dn.checkpoint_bytes(twin)


def test_checkpoint_round_trip(tmp_path, desk):
    m = dn.clone(desk)
    m.seed = 2**63 + 5
    dn.freeze_prefix(m, 5)
    m.unit("stem").buffers["stem.norm.running_var"][:] = 1.75
    dn.save_checkpoint(m, tmp_path / "a.ecgm")
    back = dn.load_checkpoint(tmp_path / "a.ecgm")
    dn.save_checkpoint(back, tmp_path / "b.ecgm")
    raw = (tmp_path / "a.ecgm").read_bytes()
    assert raw == (tmp_path / "b.ecgm").read_bytes()
    assert raw[:4] == b"ECGM"
    assert back.seed == m.seed and back.config == m.config
    assert back.trainable_units() == m.trainable_units()
    assert np.all(back.unit("stem").buffers["stem.norm.running_var"] == 1.75)


def test_checkpoint_paper_default_round_trip():
    m = dn.build(DenseNetConfig.paper_default())
    dn.init_params(m, Prng(0))
    raw = dn.checkpoint_bytes(m)
    assert dn.checkpoint_bytes(dn.model_from_bytes(raw)) == raw


def test_checkpoint_corruption(desk):
    raw = dn.checkpoint_bytes(desk)
    for bad in (b"XXXX" + raw[4:], raw[:4] + struct.pack("<I", 99) + raw[8:], raw[:-3], raw + b"\0", raw[:10]):
        with pytest.raises(CorruptCheckpoint):
            dn.model_from_bytes(bad)
