"""1D DenseNet: build, initialise, run, freeze and (de)serialise.

The network is partitioned into nine ordered units so that a prefix of
them can be frozen for fine-tuning::

    0 stem    conv k7 s2 p3 -> BN -> ReLU -> maxpool k3 s2 p1
    1 dense1  2 trans1  3 dense2  4 trans2  5 dense3  6 trans3  7 dense4
    8 head    BN -> ReLU -> adaptive avg pool -> linear (one logit)

Frozen units run their batch norms on the stored running statistics and
never update them.
"""

import io
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigInvalid, CorruptCheckpoint, OutOfRange, ShapeMismatch
from .prng import Prng

UNITS = ("stem", "dense1", "trans1", "dense2", "trans2", "dense3", "trans3", "dense4", "head")

CHECKPOINT_MAGIC = b"ECGM"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class DenseNetConfig:
    init_channels: int = 64
    growth_rate: int = 32
    block_layers: tuple = (6, 12, 24, 16)
    bn_size: int = 4
    compression: float = 0.5
    input_leads: int = 12
    input_len: int = 5000
    num_outputs: int = 1
    preset: str = "paper_default"
    linear_init: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "block_layers", tuple(int(n) for n in self.block_layers))
        if len(self.block_layers) != 4:
            raise ConfigInvalid("block_layers must have exactly 4 entries")
        if not 0 < self.compression <= 1:
            raise ConfigInvalid("compression must lie in (0, 1]")
        if min(self.block_layers) < 1 or self.init_channels < 1 or self.growth_rate < 1 or self.bn_size < 1:
            raise ConfigInvalid("layer and channel counts must be positive")
        if self.num_outputs != 1:
            raise ConfigInvalid("the classifier head has a single logit")

    @classmethod
    def paper_default(cls, **kw):
        return cls(**kw)

    @classmethod
    def desk_scale(cls, **kw):
        base = dict(init_channels=16, growth_rate=8, block_layers=(2, 2, 2, 2), bn_size=4,
                    compression=0.5, preset="desk_scale")
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_preset(cls, name, **kw):
        if name == "paper_default":
            return cls.paper_default(**kw)
        if name == "desk_scale":
            return cls.desk_scale(**kw)
        raise ConfigInvalid(f"unknown preset {name!r}")


@dataclass
class Unit:
    name: str
    index: int
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    trainable: bool = True

    def tensors(self):
        """All named arrays of the unit, parameters then buffers."""
        out = [(n, t.data) for n, t in self.params.items()]
        out += list(self.buffers.items())
        return out

    def set_trainable(self, flag):
        self.trainable = flag
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None


class DenseNet1d:
    def __init__(self, config: DenseNetConfig):
        self.config = config
        self.seed = 0
        self.units = [Unit(name, i) for i, name in enumerate(UNITS)]
        self._trace = []
        self._build()

    # -- construction ------------------------------------------------------
    def _conv(self, unit, name, cout, cin, k):
        unit.params[f"{name}.weight"] = ad.Tensor(np.zeros((cout, cin, k), np.float32), requires_grad=True)

    def _bn(self, unit, name, c):
        unit.params[f"{name}.weight"] = ad.Tensor(np.ones(c, np.float32), requires_grad=True)
        unit.params[f"{name}.bias"] = ad.Tensor(np.zeros(c, np.float32), requires_grad=True)
        unit.buffers[f"{name}.running_mean"] = np.zeros(c, np.float32)
        unit.buffers[f"{name}.running_var"] = np.ones(c, np.float32)

    def _build(self):
        cfg = self.config
        u = self.units
        c = cfg.init_channels
        length = cfg.input_len
        self._conv(u[0], "stem.conv", c, cfg.input_leads, 7)
        self._bn(u[0], "stem.norm", c)
        length = (length + 6 - 7) // 2 + 1
        length = (length + 2 - 3) // 2 + 1
        self._trace.append(("stem", c, length))
        for bi, nlayers in enumerate(cfg.block_layers):
            dense = u[1 + 2 * bi]
            inner = cfg.bn_size * cfg.growth_rate
            for j in range(nlayers):
                cin = c + j * cfg.growth_rate
                p = f"{dense.name}.layer{j + 1}"
                self._bn(dense, f"{p}.norm1", cin)
                self._conv(dense, f"{p}.conv1", inner, cin, 1)
                self._bn(dense, f"{p}.norm2", inner)
                self._conv(dense, f"{p}.conv2", cfg.growth_rate, inner, 3)
            c += nlayers * cfg.growth_rate
            self._trace.append((dense.name, c, length))
            if bi < 3:
                trans = u[2 + 2 * bi]
                cout = int(c * cfg.compression)
                self._bn(trans, f"{trans.name}.norm", c)
                self._conv(trans, f"{trans.name}.conv", cout, c, 1)
                c = cout
                length = (length - 2) // 2 + 1
                self._trace.append((trans.name, c, length))
        head = u[8]
        self._bn(head, "head.norm", c)
        head.params["head.fc.weight"] = ad.Tensor(np.zeros((cfg.num_outputs, c), np.float32), requires_grad=True)
        head.params["head.fc.bias"] = ad.Tensor(np.zeros(cfg.num_outputs, np.float32), requires_grad=True)
        self._trace.append(("head", cfg.num_outputs, 1))

    def shape_trace(self):
        """(unit, channels, length) after each unit for the configured input."""
        return list(self._trace)

    # -- access ------------------------------------------------------------
    def unit(self, name):
        return self.units[UNITS.index(name)]

    def parameters(self, trainable_only=False):
        out = {}
        for unit in self.units:
            if trainable_only and not unit.trainable:
                continue
            out.update(unit.params)
        return out

    def named_arrays(self):
        """(name, unit index, array) for every parameter and buffer."""
        return [(n, unit.index, a) for unit in self.units for n, a in unit.tensors()]

    def num_parameters(self):
        return sum(t.data.size for t in self.parameters().values())

    def trainable_units(self):
        return [u.name for u in self.units if u.trainable]

    # -- forward -----------------------------------------------------------
    def _norm(self, unit, prefix, x, train):
        p, b = unit.params, unit.buffers
        return ad.batchnorm1d(
            x, p[f"{prefix}.weight"], p[f"{prefix}.bias"],
            b[f"{prefix}.running_mean"], b[f"{prefix}.running_var"],
            training=train and unit.trainable,
            momentum=self.config.bn_momentum, eps=self.config.bn_eps,
        )

    def forward(self, x, mode="eval", start=0, stop=len(UNITS)):
        """Run units ``start``..``stop-1``; the default runs the whole network.

        Partial runs return the intermediate activation so that features of
        a frozen prefix can be computed once and reused.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=np.float32))
        cfg = self.config
        if start == 0 and (h.data.ndim != 3 or h.shape[1] != cfg.input_leads or h.shape[2] != cfg.input_len):
            raise ShapeMismatch(f"expected (B, {cfg.input_leads}, {cfg.input_len}), got {h.shape}")
        train = mode == "train"
        for i in range(start, stop):
            h = self._run_unit(self.units[i], h, train)
        return h

    def _run_unit(self, unit, h, train):
        p = unit.params
        if unit.name == "stem":
            h = ad.conv1d(h, p["stem.conv.weight"], stride=2, pad=3)
            h = ad.relu(self._norm(unit, "stem.norm", h, train))
            return ad.maxpool1d(h, 3, 2, 1)
        if unit.name.startswith("dense"):
            nlayers = self.config.block_layers[int(unit.name[-1]) - 1]
            feats = [h]
            for j in range(nlayers):
                pre = f"{unit.name}.layer{j + 1}"
                inp = feats[0] if len(feats) == 1 else ad.concat_channels(feats)
                y = ad.relu(self._norm(unit, f"{pre}.norm1", inp, train))
                y = ad.conv1d(y, p[f"{pre}.conv1.weight"])
                y = ad.relu(self._norm(unit, f"{pre}.norm2", y, train))
                y = ad.conv1d(y, p[f"{pre}.conv2.weight"], pad=1)
                feats.append(y)
            return ad.concat_channels(feats)
        if unit.name.startswith("trans"):
            y = ad.relu(self._norm(unit, f"{unit.name}.norm", h, train))
            y = ad.conv1d(y, p[f"{unit.name}.conv.weight"])
            return ad.avgpool1d(y, 2, 2)
        h = ad.relu(self._norm(unit, "head.norm", h, train))
        h = ad.flatten(ad.adaptive_avg_pool1d(h))
        return ad.linear(h, p["head.fc.weight"], p["head.fc.bias"])

    def frozen_prefix(self):
        """Number of leading non-trainable units."""
        k = 0
        while k < len(self.units) and not self.units[k].trainable:
            k += 1
        return k

    __call__ = forward


def build(config: DenseNetConfig) -> DenseNet1d:
    return DenseNet1d(config)


def _init_unit(unit, prng, linear_init):
    for name, t in unit.params.items():
        if name.endswith("fc.weight"):
            t.data[...] = linear_init
        elif name.endswith("fc.bias"):
            t.data[...] = 0.0
        elif t.data.ndim == 3:
            fan_in = t.shape[1] * t.shape[2]
            t.data[...] = prng.normal(t.data.size, 0.0, np.sqrt(2.0 / fan_in)).reshape(t.shape)
        elif name.endswith(".weight"):
            t.data[...] = 1.0
        else:
            t.data[...] = 0.0
        t.grad = None
    for name, a in unit.buffers.items():
        a[...] = 0.0 if name.endswith("running_mean") else 1.0


def init_params(model: DenseNet1d, prng: Prng, only_trainable=False):
    """Kaiming-normal (fan-in) convolutions, unit BN weights, constant linear weight."""
    for unit in model.units:
        if only_trainable and not unit.trainable:
            continue
        _init_unit(unit, prng, model.config.linear_init)


def reinit_unfrozen(model: DenseNet1d, prng: Prng):
    init_params(model, prng, only_trainable=True)


def freeze_prefix(model: DenseNet1d, k: int):
    """Freeze exactly the first ``k`` units; the remaining ones become trainable."""
    if not 0 <= k <= len(UNITS):
        raise OutOfRange(f"number of frozen units must be in 0..{len(UNITS)}, got {k}")
    for unit in model.units:
        unit.set_trainable(unit.index >= k)


# ---------------------------------------------------------------------------
# checkpoints

def _config_items(cfg):
    items = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            text = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        items.append((f.name, text))
    return items


def _config_from_items(items):
    kinds = {f.name: f.type for f in fields(DenseNetConfig)}
    kw = {}
    for key, text in items:
        if key not in kinds:
            raise CorruptCheckpoint(f"unknown config field {key!r}")
        default = getattr(DenseNetConfig(), key)
        try:
            if isinstance(default, tuple):
                kw[key] = tuple(int(x) for x in text.split(","))
            elif isinstance(default, bool):
                kw[key] = text == "True"
            elif isinstance(default, int):
                kw[key] = int(text)
            elif isinstance(default, float):
                kw[key] = float(text)
            else:
                kw[key] = text
        except ValueError as exc:
            raise CorruptCheckpoint(f"bad value for {key}: {text!r}") from exc
    try:
        return DenseNetConfig(**kw)
    except ConfigInvalid as exc:
        raise CorruptCheckpoint(str(exc)) from exc


def _pack_str(s, fmt="<H"):
    raw = s.encode("utf-8")
    return struct.pack(fmt, len(raw)) + raw


def checkpoint_bytes(model: DenseNet1d) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    items = _config_items(model.config)
    buf.write(struct.pack("<H", len(items)))
    for key, text in items:
        buf.write(_pack_str(key))
        buf.write(_pack_str(text))
    buf.write(struct.pack("<Q", int(model.seed) & ((1 << 64) - 1)))
    arrays = model.named_arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name, uid, arr in arrays:
        trainable = model.units[uid].trainable
        buf.write(_pack_str(name))
        buf.write(struct.pack("<BBBB", uid, int(trainable), _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CorruptCheckpoint("checkpoint truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpoint("invalid UTF-8 in checkpoint") from exc


def model_from_bytes(raw: bytes) -> DenseNet1d:
    r = _Reader(raw)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    (nitems,) = r.unpack("<H")
    items = [(r.string(), r.string()) for _ in range(nitems)]
    model = DenseNet1d(_config_from_items(items))
    (model.seed,) = r.unpack("<Q")
    expected = {name: (uid, arr) for name, uid, arr in model.named_arrays()}
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise CorruptCheckpoint(f"expected {len(expected)} tensors, found {count}")
    flags = {}
    seen = set()
    for _ in range(count):
        name = r.string()
        uid, trainable, dcode, ndim = r.unpack("<BBBB")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        if name not in expected or name in seen:
            raise CorruptCheckpoint(f"unexpected tensor {name!r}")
        seen.add(name)
        want_uid, arr = expected[name]
        if uid != want_uid or tuple(dims) != arr.shape or dcode not in _CODE_DTYPES:
            raise CorruptCheckpoint(f"tensor {name!r} does not match the model layout")
        dtype = _CODE_DTYPES[dcode].newbyteorder("<")
        vals = np.frombuffer(r.take(int(np.prod(dims)) * dtype.itemsize), dtype=dtype).reshape(dims)
        if _CODE_DTYPES[dcode] != arr.dtype:
            raise CorruptCheckpoint(f"tensor {name!r} has an unexpected dtype")
        arr[...] = vals
        prev = flags.setdefault(uid, bool(trainable))
        if prev != bool(trainable):
            raise CorruptCheckpoint(f"inconsistent trainable flags in unit {UNITS[uid]}")
    if r.pos != len(raw):
        raise CorruptCheckpoint("trailing bytes after tensor table")
    for unit in model.units:
        unit.set_trainable(flags.get(unit.index, True))
    return model


def save_checkpoint(model: DenseNet1d, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> DenseNet1d:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def clone(model: DenseNet1d) -> DenseNet1d:
    return model_from_bytes(checkpoint_bytes(model))
