"""Experiment configuration as nested dataclasses backed by YAML.

Overrides use dotted keys (``plan.epochs=10``); values are parsed as YAML
scalars and checked against the type of the field they replace.
"""

from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml

from ..diffcore.optim import OptimizerState
from ..hyperdist import HyperSchema
from ..objectives import LossConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending dotted path."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    nesterov: bool = False

    def state(self):
        momentum = self.momentum if self.kind == "sgd_momentum" else 0.0
        return OptimizerState(kind=self.kind, learning_rate=self.learning_rate,
                              momentum=momentum, nesterov=self.nesterov)


@dataclass
class TrainPlan:
    epochs: int = 20
    batch_size: int = 64
    warmup_epochs: int = 5
    train_steps_per_tune: int = 2
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    tune_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(kind="adam", learning_rate=5e-4))
    seed: int = 0
    val_fraction: float = 0.2
    val_batch_size: int = 128
    hyper_sampling: str = "sample"  # "sample" | "mean" (frozen distributions at their means)
    freeze: list = field(default_factory=list)  # parameter-name suffixes kept fixed
    shrink_l2_decades: float = 0.0

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if isinstance(self.tune_optimizer, dict):
            self.tune_optimizer = OptimizerConfig(**self.tune_optimizer)
        if self.epochs < 0:
            raise ConfigError("plan.epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("plan.batch_size", "must be >= 1")
        if self.warmup_epochs < 0:
            raise ConfigError("plan.warmup_epochs", "must be >= 0")
        if self.train_steps_per_tune < 1:
            raise ConfigError("plan.train_steps_per_tune", "must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("plan.val_fraction", "must lie in (0, 1)")
        if self.hyper_sampling not in ("sample", "mean"):
            raise ConfigError("plan.hyper_sampling", "must be 'sample' or 'mean'")


@dataclass
class ModelSpec:
    """Layer list for the feature extractor; the output layer is appended.

    Each layer is a dict: ``{"type": "dense", "units": 32}``,
    ``{"type": "conv", "filters": 8, "size": 3}``, ``{"type": "maxpool", "size": 2}``
    or ``{"type": "flatten"}``.
    """

    layers: list = field(default_factory=lambda: [{"type": "dense", "units": 32}])
    activation: str = "relu"
    embedding: str = "linear"
    rank1_init: str = "normal_0.5"
    couple_uv_to_rs: bool = False
    regularize_rank1: bool = True

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise ConfigError("model.activation", "must be 'relu' or 'tanh'")
        for i, layer in enumerate(self.layers):
            if layer.get("type") not in ("dense", "conv", "maxpool", "flatten"):
                raise ConfigError(f"model.layers[{i}].type", f"unknown layer {layer.get('type')!r}")


@dataclass
class DataConfig:
    source: str = "synth"  # synth | idx | csv
    name: str = "two_gaussians"
    n: int = 2000
    n_test: int = 1000
    seed: int = 0
    options: dict = field(default_factory=dict)
    train_path: str = ""
    train_labels_path: str = ""
    test_path: str = ""
    test_labels_path: str = ""
    label_column: str = "label"

    def __post_init__(self):
        if self.source not in ("synth", "idx", "csv"):
            raise ConfigError("data.source", "must be synth, idx or csv")


OOD_DEFAULTS = {"source": "noise", "n": 500, "scale": 3.0}
BESTRESPONSE_DEFAULTS = {
    "n": 200, "k": 5, "lam_range": [0.01, 0.1], "capacities": [1, 2, 4], "steps": 3000,
    "loss": "squared", "seeds": [0, 1, 2]}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    tuning: str = "global"  # global | layerwise; ignored when schema is given
    schema: dict = field(default_factory=dict)
    K: int = 3
    kappa: int = 20
    plan: TrainPlan = field(default_factory=TrainPlan)
    loss: LossConfig = field(default_factory=LossConfig)
    reuse_originals: bool = False
    seed: int = 0
    workers: int = 1
    fixed_lambda: dict = field(default_factory=dict)  # name -> value for `train`
    ood: dict = field(default_factory=lambda: dict(OOD_DEFAULTS))
    bestresponse: dict = field(default_factory=lambda: dict(BESTRESPONSE_DEFAULTS))

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K", "must be >= 1")
        if self.kappa < 1:
            raise ConfigError("kappa", "must be >= 1")
        if self.tuning not in ("global", "layerwise"):
            raise ConfigError("tuning", "must be 'global' or 'layerwise'")
        # partial mappings fill in from the defaults
        for name, defaults in (("ood", OOD_DEFAULTS), ("bestresponse", BESTRESPONSE_DEFAULTS)):
            given = getattr(self, name)
            unknown = set(given) - set(defaults)
            if unknown:
                raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown key")
            setattr(self, name, {**defaults, **given})
        if self.schema:
            try:
                HyperSchema.from_dict(self.schema)
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError("schema", str(exc)) from None

    def hyper_schema(self, n_param_layers, label_smoothing=None):
        if label_smoothing is None:
            label_smoothing = isinstance(self.loss.label_smoothing, str)
        if self.schema:
            schema = HyperSchema.from_dict(self.schema)
        else:
            schema = default_schema(n_param_layers, self.tuning, label_smoothing)
        if isinstance(self.loss.label_smoothing, str) and self.loss.label_smoothing not in schema.names:
            raise ConfigError("loss.label_smoothing",
                              f"hyperparameter {self.loss.label_smoothing!r} not in schema")
        return schema

    def to_dict(self):
        return asdict(self)


L2_RANGE = (1e-3, 1e3)
DROPOUT_RANGE = (1e-3, 0.9)
SMOOTHING_RANGE = (1e-3, 0.3)


def default_schema(n_param_layers, tuning="global", label_smoothing=False):
    """Dropout plus L2 strengths for weights and biases, shared or per layer."""
    if tuning == "global":
        names = ["l2_w", "l2_b"]
    else:
        names = [f"l2_{p}{i}" for i in range(n_param_layers) for p in ("w", "b")]
    bounds = [L2_RANGE] * len(names)
    kinds = ["l2"] * len(names)
    names.append("dropout")
    bounds.append(DROPOUT_RANGE)
    kinds.append("dropout")
    if label_smoothing:
        names.append("label_smoothing")
        bounds.append(SMOOTHING_RANGE)
        kinds.append("label_smoothing")
    return HyperSchema(names, bounds, kinds)


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", f"expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    template = cls()
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(path, "unknown key")
        current = getattr(template, key)
        if is_dataclass(current):
            kwargs[key] = _build(type(current), value, path + ".")
        else:
            kwargs[key] = _coerce(path, current, value)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix.rstrip(".") or "<root>", str(exc)) from None


def _coerce(path, current, value):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            # label smoothing may name a hyperparameter instead
            if path.endswith("label_smoothing") and isinstance(value, str):
                return value
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    if isinstance(current, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {value!r}")
        return value
    return value


def config_from_dict(data):
    return _build(ExperimentConfig, data or {}, "")


def _set_dotted(tree, key, value):
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "cannot descend into a non-mapping value")
    node[parts[-1]] = value


def apply_overrides(data, overrides):
    """Merge ``["a.b=value", ...]`` into a raw config mapping."""
    data = yaml.safe_load(yaml.safe_dump(data or {}))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(item, "empty override key")
        _set_dotted(data, key, yaml.safe_load(raw))
    return data


def load_config(path=None, overrides=()):
    data = {}
    if path:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    return config_from_dict(apply_overrides(data, overrides))


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
