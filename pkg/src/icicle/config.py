"""Run configuration: an INI-style key=value file with one section per concern.

Grammar::

    # comment            ; comment
    [section]
    key = value

Values are plain text.  Booleans accept true/false, ``auto`` stands for "use
the method or regime default".  Unknown sections and keys are errors.  A file
never needs to list every key; missing keys keep their defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, fields

from . import continual as C
from . import data as D
from . import losses as L
from . import protonet as pn

SEED_ENV = "ICICLE_SEED"


class ConfigError(ValueError):
    pass


AUTO = "auto"


@dataclass
class DataSection:
    dataset: str = ""  # ICDS file; empty means generate the synthetic stream
    tasks: int = 4
    num_classes: int = 20
    image_size: int = 32
    samples_per_class: int = 120
    common_parts: int = 2
    distinctive_parts: int = 2
    noise: float = 0.02
    data_seed: int | None = None  # None: the run seed
    split_seed: int | None = None


@dataclass
class ModelSection:
    depth: int = 32
    protos_per_class: int = 3
    eta: float = 1e-4
    init_gain: float = 1.0
    input_mean: float = 0.5
    input_std: float = 0.25


@dataclass
class MethodSection:
    method: str = "icicle"
    regularize: bool | None = None
    compensate: bool | None = None
    init: str | None = None
    ewc_alpha: float = 1.0
    ewc_max_samples: int = 500
    lwf_lambda: float = 1.0
    lwf_temperature: float = 2.0


@dataclass
class LossSection:
    ce: float = 1.0
    clst: float = 0.8
    sep: float = -0.08
    ir: float = 0.1
    gamma: float = 1 / 49
    placement: str = "similarity"


@dataclass
class InitSection:
    strategy: str = "proximity"
    alpha: float = 0.5
    max_iter: int = 50
    first_task: str = "all"


@dataclass
class ScheduleSection:
    # None: take the value of the 4 / 10 / 20-task regime
    warmup_epochs: int | None = None
    joint_epochs: int | None = None
    projection_period: int | None = None
    patience: int = 12
    lr_halving_period: int = 5
    lr_backbone: float = 1e-3
    lr_addon: float = 1e-3
    lr_prototypes: float = 1e-3
    weight_decay: float = 1e-4
    decay_prototypes: bool = False
    batch_size: int = 25
    final_projection: bool = True


@dataclass
class EvalSection:
    u: float = 0.1
    probes_per_task: int = 20
    probe_seed: int = 0
    percentile: float = 95.0
    heatmap_probes: int = 2  # probe images per task rendered as PGM heatmaps


@dataclass
class RunSection:
    seed: int = 1
    output: str = "runs/default"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    method: MethodSection = field(default_factory=MethodSection)
    loss: LossSection = field(default_factory=LossSection)
    init: InitSection = field(default_factory=InitSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    # -- conversion to library objects
    def synthetic_spec(self) -> D.SyntheticSpec:
        d = self.data
        return D.SyntheticSpec(
            num_classes=d.num_classes,
            image_size=(d.image_size, d.image_size, 3),
            common_parts=d.common_parts,
            distinctive_parts=d.distinctive_parts,
            noise=d.noise,
            samples_per_class=d.samples_per_class,
        )

    @property
    def data_seed(self) -> int:
        return self.run.seed if self.data.data_seed is None else self.data.data_seed

    @property
    def split_seed(self) -> int:
        return self.run.seed if self.data.split_seed is None else self.data.split_seed

    def model_config(self, image_shape) -> pn.ModelConfig:
        m = self.model
        return pn.ModelConfig(
            image_shape=tuple(image_shape),
            depth=m.depth,
            protos_per_class=m.protos_per_class,
            eta=m.eta,
            input_mean=m.input_mean,
            input_std=m.input_std,
            init_gain=m.init_gain,
        )

    def method_config(self) -> C.MethodConfig:
        m = self.method
        return C.MethodConfig(
            method=m.method,
            ewc_alpha=m.ewc_alpha,
            lwf_lambda=m.lwf_lambda,
            lwf_temperature=m.lwf_temperature,
            ewc_max_samples=m.ewc_max_samples,
            regularize=m.regularize,
            compensate=m.compensate,
            init=m.init,
        )

    def schedule_config(self) -> C.TrainSchedule:
        overrides = {f.name: getattr(self.schedule, f.name) for f in fields(self.schedule)}
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return C.TrainSchedule.for_tasks(self.data.tasks, **overrides)

    def loss_weights(self) -> L.LossWeights:
        s = self.loss
        return L.LossWeights(s.ce, s.clst, s.sep, s.ir)

    def init_config(self) -> C.InitConfig:
        i = self.init
        return C.InitConfig(i.strategy, i.alpha, i.max_iter, i.first_task)

    def engine(self, image_shape) -> C.ContinualEngine:
        return C.ContinualEngine(
            self.model_config(image_shape),
            self.method_config(),
            self.schedule_config(),
            self.loss_weights(),
            gamma=self.loss.gamma,
            placement=self.loss.placement,
            init=self.init_config(),
            u=self.eval.u,
            seed=self.run.seed,
        )

    def validate(self) -> None:
        """Build every library object once so bad values fail before any work."""
        try:
            if self.data.dataset == "":
                self.synthetic_spec().validate()
            if self.data.tasks < 1:
                raise ConfigError("tasks must be at least 1")
            self.model_config((self.data.image_size, self.data.image_size, 3))
            self.method_config().validate()
            self.schedule_config().validate()
            self.init_config().validate()
            self.loss_weights()
            L.RegPlacement(self.loss.placement)
            L.mask_size(self.loss.gamma, 1, 1)
            if not 0.0 <= self.eval.u <= 1.0:
                raise ConfigError("u must lie in [0, 1]")
            if not 0.0 < self.eval.percentile < 100.0:
                raise ConfigError("percentile must lie in (0, 100)")
            if self.eval.probes_per_task < 1:
                raise ConfigError("probes_per_task must be positive")
        except ConfigError:
            raise
        except (ValueError, C.TrainingError) as exc:
            raise ConfigError(str(exc)) from None


SECTIONS = {f.name: f.type for f in fields(RunConfig)}


# ---------------------------------------------------------------- values

def _parse_value(raw: str, annotation: str, where: str):
    raw = raw.strip()
    optional = "None" in annotation
    if optional and raw.lower() == AUTO:
        return None
    kind = annotation.replace("| None", "").strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind}") from None
    return raw


def _format_value(value) -> str:
    if value is None:
        return AUTO
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_value(cfg: RunConfig, dotted: str, raw: str) -> None:
    """Apply one ``section.key=value`` override."""
    if "." not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    obj = getattr(cfg, section)
    known = {f.name: f for f in fields(obj)}
    if key not in known:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    f = known[key]
    setattr(obj, key, _parse_value(raw, str(f.type), f"{section}.{key}"))


# ---------------------------------------------------------------- text form

def parse_config(text: str, seed_env: str | None = None) -> RunConfig:
    """Parse config text.  ``seed_env`` fills run.seed when the text leaves it out."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            set_value(cfg, f"{section}.{key}", raw)
    if seed_env is not None and not parser.has_option("run", "seed"):
        set_value(cfg, "run.seed", seed_env)
    return cfg


def load_config(path, overrides=(), environ=None) -> RunConfig:
    """Read a config file, then apply ``section.key=value`` overrides in order."""
    environ = os.environ if environ is None else environ
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text, environ.get(SEED_ENV))
    apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: RunConfig, overrides) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        set_value(cfg, key.strip(), value)


def config_dict(cfg: RunConfig) -> dict[str, dict[str, str]]:
    """Every field as text, sections and keys in declaration order."""
    return {
        name: {f.name: _format_value(getattr(getattr(cfg, name), f.name)) for f in fields(getattr(cfg, name))}
        for name in SECTIONS
    }


def format_config(cfg: RunConfig) -> str:
    buf = io.StringIO()
    for name, values in config_dict(cfg).items():
        buf.write(f"[{name}]\n")
        for key, value in values.items():
            buf.write(f"{key} = {value}\n")
        buf.write("\n")
    return buf.getvalue()


def from_dict(echo: dict[str, dict[str, str]]) -> RunConfig:
    cfg = RunConfig()
    for section, values in echo.items():
        for key, raw in values.items():
            set_value(cfg, f"{section}.{key}", raw)
    return cfg


def equivalent(a: RunConfig, b: RunConfig) -> bool:
    return dataclasses.asdict(a) == dataclasses.asdict(b)
