"""Run configuration: a YAML file with ``data``, ``network``, ``augment`` and
``distill`` sections plus a few top-level keys. Unknown keys are rejected
with their line number. See ``docs/config.md``."""
from dataclasses import asdict, dataclass, field, fields

import yaml

from .augment import AugmentConfig
from .distill import DistillConfig
from .network import NetworkConfig

PRESETS = {
    "small": {"d_model": 32, "n_blocks": 2, "n_heads": 4},
    "base": {"d_model": 64, "n_blocks": 4, "n_heads": 6},
}


class ConfigError(ValueError):
    def __init__(self, msg, line=None, key=None):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{key + ': ' if key else ''}{msg}")
        self.line, self.key = line, key


@dataclass
class DataConfig:
    path: str = None  # dataset directory (dataset.json or features.npy + labels.npy)
    synthetic_count: int = 2000
    synthetic_seed: int = 0
    class_filter: list = None
    split: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0


@dataclass
class RunConfig:
    preset: str = "small"
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig.preset("small"))
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def to_dict(self):
        out = {
            "preset": self.preset,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
            "data": asdict(self.data),
            "network": asdict(self.network),
            "augment": asdict(self.augment),
            "distill": asdict(self.distill),
        }
        # plain lists keep the YAML snapshot free of python tags
        for sec in ("data", "augment", "distill"):
            for k, v in out[sec].items():
                if isinstance(v, tuple):
                    out[sec][k] = list(v)
        return out

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


SECTIONS = {"data": DataConfig, "network": NetworkConfig, "augment": AugmentConfig, "distill": DistillConfig}
TOP_LEVEL = {"preset", "seed", "output_dir", "checkpoint_every", *SECTIONS}
TUPLE_FIELDS = {"split", "split_fraction_range", "adam_betas"}


def _check_keys(node):
    """Walk the composed YAML tree and reject unknown keys, reporting lines."""
    if node is None:
        return
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("top level must be a mapping", node.start_mark.line + 1)
    for key_node, value_node in node.value:
        key, line = key_node.value, key_node.start_mark.line + 1
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown key (expected one of {sorted(TOP_LEVEL)})", line, key)
        if key in SECTIONS:
            if isinstance(value_node, yaml.ScalarNode) and value_node.tag.endswith(":null"):
                continue
            if not isinstance(value_node, yaml.MappingNode):
                raise ConfigError("section must be a mapping", line, key)
            allowed = {f.name for f in fields(SECTIONS[key])}
            for sub_key, _ in value_node.value:
                if sub_key.value not in allowed:
                    raise ConfigError(
                        f"unknown key in [{key}] (expected one of {sorted(allowed)})",
                        sub_key.start_mark.line + 1,
                        f"{key}.{sub_key.value}",
                    )


def _line_of(node, section, key):
    for k, v in node.value:
        if k.value == section:
            if key is None:
                return k.start_mark.line + 1
            for sk, _ in v.value:
                if sk.value == key:
                    return sk.start_mark.line + 1
            return k.start_mark.line + 1
    return None


def _build(cls, values, node, section):
    values = dict(values or {})
    for k in TUPLE_FIELDS & set(values):
        if isinstance(values[k], list):
            values[k] = tuple(values[k])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        line = _line_of(node, section, None) if node is not None else None
        raise ConfigError(str(exc), line, section) from exc


def parse_config(text):
    """Parse YAML text into a :class:`RunConfig`.

    The preset fills ``d_model``, ``n_blocks`` and ``n_heads``; explicit
    ``network`` keys override it.
    """
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {exc}", mark.line + 1 if mark else None) from exc
    _check_keys(node)
    raw = yaml.safe_load(text) or {}
    preset = raw.get("preset", "small")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (expected small or base)", _line_of(node, "preset", None), "preset")
    net_values = {**PRESETS[preset], **(raw.get("network") or {})}
    cfg = RunConfig(
        preset=preset,
        seed=int(raw.get("seed", 0)),
        output_dir=raw.get("output_dir", "runs/default"),
        checkpoint_every=int(raw.get("checkpoint_every", 0)),
        data=_build(DataConfig, raw.get("data"), node, "data"),
        network=_build(NetworkConfig, net_values, node, "network"),
        augment=_build(AugmentConfig, raw.get("augment"), node, "augment"),
        distill=_build(DistillConfig, raw.get("distill"), node, "distill"),
    )
    if abs(sum(cfg.data.split) - 1.0) > 1e-9 or len(cfg.data.split) != 3:
        raise ConfigError("split must be three fractions summing to 1", _line_of(node, "data", "split"), "data.split")
    return cfg


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())
