"""Experiment configuration: INI files, validation, and trainer construction.

Grammar (stdlib :mod:`configparser`)::

    [run]                 ; scalar settings, one ``key = value`` per line
    mode = mfg            ; mfg | mfc | mfcg | idealized-mfg | idealized-mfc
    preset = lq1d-paper
    steps = 200000
    seed = 0
    bins_state = 6
    bins_action = 7
    batch = 16
    checkpoint_every = 1000

    [rates]               ; base step sizes: actor, critic, measure, global_measure
    critic = 1e-3

    [schedule]            ; mode = constant | poly; poly exponents per rate name
    mode = poly
    offset = 10000
    actor = 0.9

    [model]               ; inline coefficient overrides for the preset
    c1 = 0.3

A sweep file holds the same sections as shared defaults plus any number of
``[case NAME]`` sections whose keys are dotted overrides (``rates.critic``,
``run.seed``, ``model.c1``).
"""

from dataclasses import dataclass, field, asdict
import configparser
import json
import math

from .agents import Rates, Schedule
from .environment import PRESETS, make_model

MODES = ("mfg", "mfc", "mfcg", "idealized-mfg", "idealized-mfc")
IDEALIZED_PRESETS = ("random5x3", "ou6")
RATE_NAMES = ("actor", "critic", "measure", "global_measure")

IDEALIZED_RATES = {
    "idealized-mfg": {"measure": 0.2, "actor": 1.5, "critic": 1.5},
    "idealized-mfc": {"actor": 0.05, "critic": 0.5, "measure": 1.0},
}


class ConfigError(ValueError):
    pass


def _algorithm(mode):
    return {"mfg": "mfg", "mfc": "mfc", "mfcg": "mfcg"}.get(mode)


@dataclass
class ExperimentConfig:
    mode: str = "mfg"
    preset: str = "lq1d-paper"
    steps: int = 200_000
    seed: int = 0
    bins_state: int = None
    bins_action: int = None
    batch: int = 16
    checkpoint_every: int = 1000
    out: str = None
    rates: dict = field(default_factory=dict)
    schedule: str = "constant"
    exponents: dict = field(default_factory=dict)
    offset: float = 1e4
    model: dict = field(default_factory=dict)
    initial_state: object = "uniform"
    composite: str = "best"
    trace_samples: int = 1000
    eval_samples: int = 10000
    tol: float = None

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------
    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        idealized = self.mode.startswith("idealized")
        presets = IDEALIZED_PRESETS if idealized else tuple(PRESETS)
        if self.preset not in presets:
            raise ConfigError(f"preset {self.preset!r} is not valid for mode {self.mode}; choose from {presets}")
        if self.mode == "mfcg" and not self.preset.startswith("mfcg"):
            raise ConfigError("mode mfcg needs an mfcg preset")
        if self.mode in ("mfg", "mfc") and self.preset.startswith("mfcg"):
            raise ConfigError(f"mode {self.mode} cannot run the control-game preset")
        for name in ("steps", "seed", "batch", "checkpoint_every", "trace_samples", "eval_samples"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{name} must be an integer")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        for name in ("bins_state", "bins_action"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"{name} must be an integer >= 1")
        for k, v in self.rates.items():
            if k not in RATE_NAMES:
                raise ConfigError(f"unknown rate {k!r}; expected one of {RATE_NAMES}")
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"rate {k} must be a positive number, got {v!r}")
        if self.schedule not in ("constant", "poly"):
            raise ConfigError("schedule must be 'constant' or 'poly'")
        for k, v in self.exponents.items():
            if k not in RATE_NAMES or not 0 <= v <= 1:
                raise ConfigError(f"invalid exponent {k} = {v}")
        if self.offset <= 0:
            raise ConfigError("schedule offset must be positive")
        if self.tol is not None and not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.composite not in ("best", "literal"):
            raise ConfigError("composite must be 'best' or 'literal'")
        if not idealized:
            try:
                self.build_model()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid model: {exc}") from None
        return self

    # -- builders -----------------------------------------------------------
    def build_model(self):
        if self.mode.startswith("idealized"):
            from . import idealized
            return {"random5x3": idealized.random_model, "ou6": idealized.ou_chain}[self.preset](**self.model)
        return make_model(self.preset, **self.model)

    @property
    def algorithm(self):
        return _algorithm(self.mode)

    def build_rates(self):
        algo = self.algorithm
        if algo is None:
            base = dict(IDEALIZED_RATES[self.mode])
            base.update(self.rates)
            return base
        rates = Rates.theory(algo, self.offset) if self.schedule == "poly" else Rates.table1(algo)
        out = {}
        for name in RATE_NAMES:
            sched = getattr(rates, name)
            if sched is None and name not in self.rates:
                out[name] = None
                continue
            base = self.rates.get(name, sched.base if sched is not None else None)
            if self.schedule == "poly":
                k = self.exponents.get(name, sched.exponent if sched is not None else 1.0)
                out[name] = Schedule(base, "polynomial", k, self.offset)
            else:
                out[name] = Schedule(base)
        return Rates(**out)

    def bins(self, model):
        two_d = model.dim_state > 1
        return (self.bins_state or (3 if two_d else 6), self.bins_action or (2 if two_d else 7))

    def build_trainer(self):
        from .agents import MfgTrainer, BinnedTrainer
        model = self.build_model()
        kw = dict(batch=self.batch, seed=self.seed, initial_state=self.initial_state)
        if self.mode == "mfg":
            return MfgTrainer(model, self.build_rates(), **kw)
        m, l = self.bins(model)
        return BinnedTrainer(model, self.build_rates(), state_cells=m, action_cells=l,
                             composite=self.composite, **kw)

    # -- serialization ------------------------------------------------------
    def to_dict(self):
        d = asdict(self)
        d.pop("out")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


_RUN_KEYS = {"mode": str, "preset": str, "steps": int, "seed": int, "bins_state": int,
             "bins_action": int, "batch": int, "checkpoint_every": int, "out": str,
             "composite": str, "trace_samples": int, "eval_samples": int, "initial_state": str,
             "tol": float}


def _number(text):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _apply(values, section, key, raw):
    """Store one ``section.key = raw`` entry into the kwargs dict ``values``."""
    try:
        if section == "run":
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown run key {key!r}")
            if key == "initial_state":
                values[key] = raw if raw == "uniform" else [float(v) for v in raw.split(",")]
            elif _RUN_KEYS[key] is int:
                values[key] = int(float(raw)) if float(raw).is_integer() else int(raw)
            else:
                values[key] = _RUN_KEYS[key](raw)
        elif section == "rates":
            values.setdefault("rates", {})[key] = float(raw)
        elif section == "schedule":
            if key == "mode":
                values["schedule"] = raw
            elif key == "offset":
                values["offset"] = float(raw)
            else:
                values.setdefault("exponents", {})[key] = float(raw)
        elif section == "model":
            v = json.loads(raw) if raw.lstrip().startswith("[") else _number(raw) if raw[:1] in "+-.0123456789" else raw
            values.setdefault("model", {})[key] = v
        else:
            raise ConfigError(f"unknown section [{section}]")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from None


def _parser(text):
    p = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    p.optionxform = str
    try:
        p.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return p


def parse_config(text, **overrides):
    values = {}
    p = _parser(text)
    for section in p.sections():
        if section.startswith("case "):
            continue
        for key, raw in p.items(section):
            _apply(values, section, key, raw)
    values.update(overrides)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_sweep(text):
    """Return ``[(case name, ExperimentConfig)]`` in file order."""
    p = _parser(text)
    base = {}
    for section in p.sections():
        if not section.startswith("case "):
            for key, raw in p.items(section):
                _apply(base, section, key, raw)
    cases = []
    for section in p.sections():
        if not section.startswith("case "):
            continue
        values = json.loads(json.dumps(base))
        for dotted, raw in p.items(section):
            if "." not in dotted:
                raise ConfigError(f"case keys must be dotted (section.key), got {dotted!r}")
            sec, key = dotted.split(".", 1)
            _apply(values, sec, key, raw)
        try:
            cases.append((section[5:].strip(), ExperimentConfig(**values)))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    if not cases:
        raise ConfigError("sweep file defines no [case NAME] sections")
    return cases
