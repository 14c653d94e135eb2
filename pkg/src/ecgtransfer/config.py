"""Run configuration files.

INI-style ``key = value`` lines grouped by section. Every key mirrors a
field of one of the dataclass configs (or a path / option of the CLI), so
the schema is derived from those dataclasses. Unknown sections or keys are
errors, as is a missing key that a command declares required.

Example::

    [dataset]
    cache = work/train.ecgp
    target = AFIB

    [training]
    lr = 0.003
    batch_size = 32

    [grid]
    lrs = 0.001, 0.002, 0.003
    frozen = 5, 7, 9
"""

import configparser
from dataclasses import dataclass, field, fields, replace

from .densenet import DenseNetConfig
from .errors import ConfigInvalid, MissingKey, UnknownKey
from .preprocess import PipelineConfig
from .synth import SynthSpec
from .training import GridSpec, TrainConfig

# Sections that are not backed by a dataclass: key -> type
_PLAIN = {
    "dataset": {"metadata": str, "records_dir": str, "manifest": str, "cache": str, "target": str,
                "test_fold": int, "val_fold": int},
    "evaluation": {"threshold": str, "n_points": int},
    "grid": {"lrs": (float,), "factors": (float,), "frozen": (int,), "repeats": int,
             "protocol": str, "k": int, "pretrained": str, "workers": int},
}
_MODEL_EXCLUDE = {"input_leads", "input_len", "num_outputs"}


def _kind(default):
    if isinstance(default, bool):
        return bool
    if isinstance(default, tuple):
        return (type(default[0]) if default else float,)
    return type(default)


def _schema():
    schema = {k: dict(v) for k, v in _PLAIN.items()}
    schema["pipeline"] = {f.name: _kind(f.default) for f in fields(PipelineConfig)}
    schema["model"] = {f.name: _kind(f.default) for f in fields(DenseNetConfig) if f.name not in _MODEL_EXCLUDE}
    train = {f.name: _kind(f.default) for f in fields(TrainConfig)}
    train["pos_weight"] = str
    schema["training"] = train
    schema["synth"] = {f.name: _kind(f.default) for f in fields(SynthSpec)}
    return schema


SCHEMA = _schema()


def _convert(section, key, raw, kind):
    raw = raw.strip()
    try:
        if isinstance(kind, tuple):
            return tuple(kind[0](tok.strip()) for tok in raw.split(",") if tok.strip())
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigInvalid(f"[{section}] {key}: cannot read {raw!r} as {getattr(kind, '__name__', kind)}") from None


@dataclass


class RunConfig:
    values: dict = field(default_factory=dict)  # section -> {key: typed value}
    source: str = ""

    @classmethod
    def from_text(cls, text, source="<string>"):
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigInvalid(f"{source}: {exc}") from None
        cfg = cls(source=source)
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), str(path))

    def set(self, section, key, raw):
        if section not in SCHEMA:
            raise UnknownKey(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise UnknownKey(f"unknown config key [{section}] {key}")
        value = raw if not isinstance(raw, str) else _convert(section, key, raw, SCHEMA[section][key])
        self.values.setdefault(section, {})[key] = value

    def apply_override(self, text):
        """``section.key=value`` from the command line."""
        if "=" not in text or "." not in text.split("=", 1)[0]:
            raise ConfigInvalid(f"override {text!r} must look like section.key=value")
        lhs, raw = text.split("=", 1)
        section, key = lhs.split(".", 1)
        self.set(section.strip(), key.strip(), raw)

    def get(self, section, key, default=None):
        return self.values.get(section, {}).get(key, default)

    def require(self, section, key):
        if key not in self.values.get(section, {}):
            where = f" in {self.source}" if self.source else ""
            raise MissingKey(f"missing config key [{section}] {key}{where}")
        return self.values[section][key]

    def section(self, name):
        return dict(self.values.get(name, {}))

    # -- typed views --------------------------------------------------------
    def pipeline(self):
        return PipelineConfig(**self.section("pipeline"))

    def model(self, default_preset="desk_scale"):
        opts = self.section("model")
        preset = opts.pop("preset", default_preset)
        return DenseNetConfig.from_preset(preset, **opts)

    def training(self, base=TrainConfig()):
        opts = self.section("training")
        pw = opts.get("pos_weight")
        if pw is not None and pw != "auto":
            try:
                opts["pos_weight"] = float(pw)
            except ValueError:
                raise ConfigInvalid(f"[training] pos_weight must be 'auto' or a number, got {pw!r}") from None
        return replace(base, **opts)

    def grid(self):
        g = self.section("grid")
        spec = {k: g[k] for k in ("lrs", "factors", "repeats") if k in g}
        if "frozen" in g:
            spec["frozen"] = g["frozen"] or (None,)
        return GridSpec(**spec)

    def synth(self, base=SynthSpec()):
        return replace(base, **self.section("synth"))


def describe_schema():
    """Human-readable list of every accepted key, for ``--help`` epilogs."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}] " + ", ".join(keys))
    return "\n".join(lines)
