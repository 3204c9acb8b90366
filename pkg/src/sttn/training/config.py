"""Run configuration read from YAML.

Documented keys (all top level)::

    architecture: lenet_t        # lenet_t | vgg7_t | resmini_t
    mode: sttn_2_2               # float | sttn_2_2 | sttn_2_32 | twn_baseline
    width: 1.0                   # channel multiplier (default depends on architecture)
    backward_mode: consistent    # consistent | paper_literal
    lr: 0.005
    weight_decay: 1.0e-6
    epochs: 20
    batch: 64
    seed: 0
    threads: 0                   # 0 = deterministic single thread
    dataset:
      kind: mnist_idx            # mnist_idx | cifar10_bin
      path: data/mnist           # relative paths resolve against the config file
    augment:
      pad_crop: false
      flip: false
    output_dir: runs/lenet_sttn  # checkpoint + metrics.csv go here
    train_limit: null            # optional: use only the first K training items

Errors name the offending key and its line in the file.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..layers import MODES
from ..models import ARCHITECTURES, ModelConfig
from ..quantizers import BACKWARD_MODES
from .data import DATASET_KINDS


class ConfigParseError(ValueError):
    pass


@dataclass
class RunConfig:
    architecture: str
    mode: str
    dataset_kind: str
    dataset_path: Path
    width: float | None = None
    backward_mode: str = "consistent"
    lr: float = 0.005
    weight_decay: float = 1e-6
    epochs: int = 20
    batch: int = 64
    seed: int = 0
    threads: int = 0
    pad_crop: bool = False
    flip: bool = False
    output_dir: Path = field(default_factory=lambda: Path("runs/default"))
    train_limit: int | None = None

    def model_config(self) -> ModelConfig:
        cifar = self.dataset_kind == "cifar10_bin"
        return ModelConfig(self.architecture, self.mode, self.width, 10,
                           3 if cifar else 1, 32 if cifar else 28, self.backward_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset_path"] = str(self.dataset_path)
        d["output_dir"] = str(self.output_dir)
        return d


# key -> (type, required, allowed values)
_TOP = {
    "architecture": (str, True, ARCHITECTURES),
    "mode": (str, True, MODES),
    "width": (float, False, None),
    "backward_mode": (str, False, BACKWARD_MODES),
    "lr": (float, False, None),
    "weight_decay": (float, False, None),
    "epochs": (int, False, None),
    "batch": (int, False, None),
    "seed": (int, False, None),
    "threads": (int, False, None),
    "dataset": (dict, True, None),
    "augment": (dict, False, None),
    "output_dir": (str, False, None),
    "train_limit": (int, False, None),
}
_DATASET = {"kind": (str, True, DATASET_KINDS), "path": (str, True, None)}
_AUGMENT = {"pad_crop": (bool, False, None), "flip": (bool, False, None)}


def _line(node) -> int:
    return node.start_mark.line + 1


def _scalar(node, key: str, typ, allowed, where: str):
    if typ is dict:
        if not isinstance(node, yaml.MappingNode):
            raise ConfigParseError(f"{where}: key {key!r} (line {_line(node)}) must be a mapping")
        return node
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigParseError(f"{where}: key {key!r} (line {_line(node)}) must be a scalar")
    value = yaml.constructor.SafeConstructor().construct_object(node)
    if value is None and typ is not dict:
        return None
    ok = isinstance(value, typ) and not (typ is int and isinstance(value, bool))
    if typ is float and not isinstance(value, bool):
        if isinstance(value, int):
            value, ok = float(value), True
        elif isinstance(value, str) and not node.style:
            try:  # YAML 1.1 resolves 1e-3 (no dot) as a string
                value, ok = float(value), True
            except ValueError:
                pass
    if not ok:
        raise ConfigParseError(
            f"{where}: key {key!r} (line {_line(node)}) expects {typ.__name__}, got {node.value!r}"
        )
    if allowed is not None and value not in allowed:
        raise ConfigParseError(
            f"{where}: key {key!r} (line {_line(node)}) must be one of {list(allowed)}, got {value!r}"
        )
    return value


def _mapping(node, schema: dict, where: str, prefix: str = "", key_nodes: dict | None = None,
             parent=None) -> dict:
    out = {}
    for knode, vnode in node.value:
        key = knode.value
        if key not in schema:
            raise ConfigParseError(f"{where}: unknown key {prefix + key!r} at line {_line(knode)}")
        if key in out:
            raise ConfigParseError(f"{where}: duplicate key {prefix + key!r} at line {_line(knode)}")
        typ, _, allowed = schema[key]
        out[key] = _scalar(vnode, prefix + key, typ, allowed, where)
        if key_nodes is not None:
            key_nodes[key] = knode
    for key, (_, required, _) in schema.items():
        if required and out.get(key) is None:
            where_in = f"under {prefix[:-1]!r} at line {_line(parent)}" if parent is not None else "top level"
            raise ConfigParseError(f"{where}: missing required key {prefix + key!r} ({where_in})")
    return out


def parse_config(text: str, where: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigParseError(f"{where}: YAML syntax error: {exc}") from exc
    if root is None or not isinstance(root, yaml.MappingNode):
        raise ConfigParseError(f"{where}: top level must be a mapping")
    keys: dict = {}
    top = _mapping(root, _TOP, where, key_nodes=keys)
    ds = _mapping(top.pop("dataset"), _DATASET, where, "dataset.", parent=keys["dataset"])
    aug = (_mapping(top.pop("augment"), _AUGMENT, where, "augment.", parent=keys["augment"])
           if top.get("augment") is not None else {})
    top.pop("augment", None)
    base = base_dir or Path(".")
    path = Path(ds["path"])
    out_dir = Path(top.pop("output_dir", None) or "runs/default")
    cfg = RunConfig(
        architecture=top.pop("architecture"),
        mode=top.pop("mode"),
        dataset_kind=ds["kind"],
        dataset_path=path if path.is_absolute() else base / path,
        output_dir=out_dir if out_dir.is_absolute() else base / out_dir,
        pad_crop=bool(aug.get("pad_crop") or False),
        flip=bool(aug.get("flip") or False),
        **{k: v for k, v in top.items() if v is not None},
    )
    _validate(cfg, where)
    return cfg


def _validate(cfg: RunConfig, where: str) -> None:
    checks = [
        (cfg.lr > 0, "lr", "must be > 0"),
        (cfg.weight_decay >= 0, "weight_decay", "must be >= 0"),
        (cfg.epochs >= 0, "epochs", "must be >= 0"),
        (cfg.batch >= 1, "batch", "must be >= 1"),
        (cfg.threads >= 0, "threads", "must be >= 0"),
        (cfg.width is None or cfg.width > 0, "width", "must be > 0"),
        (cfg.train_limit is None or cfg.train_limit >= 1, "train_limit", "must be >= 1"),
    ]
    for ok, key, msg in checks:
        if not ok:
            raise ConfigParseError(f"{where}: key {key!r} {msg}")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path), path.parent)


def config_keys() -> list[str]:
    return [f.name for f in fields(RunConfig)]


