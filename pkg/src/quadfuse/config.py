"""Experiment configuration: a small INI schema and its validation.

An experiment file is plain INI text with seven sections.  Every key has
a default, so the empty string parses to a runnable configuration; the
full schema with its defaults spelled out:

    [dataset]
    seed = 1234
    conditions = clear_day*4
    n_cars = 4
    n_pedestrians = 2

    [modality]
    inputs = CGLR
    proposals = CGLR
    depth_transform = on
    gamma_weighting = on

    [grid]
    x_min = -24.0
    x_max = 24.0
    z_min = 0.0
    z_max = 48.0
    cell = 2.0

    [model]
    d = 16
    patch_factor = 4
    n_layers = 4
    top_k = 8

    [sensors]
    width = 96
    height = 48
    focal = 72.0

    [train]
    steps = 200
    lr = 0.01
    optimizer = adam

    [eval]
    iou_car = 0.2
    iou_pedestrian = 0.1
    n_recall = 40

`conditions` is a comma list of `<condition>*<count>` entries, where the
condition grammar is the simulator's (`clear_day`, `night`, `fog:BETA`,
`snow:LAM`); scene files are emitted in the listed order.  `inputs` and
`proposals` are subsets of the sensor letters CGLR; proposal features
can come from the late-fused map (proposals equal to inputs) or from
the LiDAR map alone (proposals = L), nothing in between.  An omitted
`proposals` follows `inputs`.  Validation failures raise ConfigError
naming every offending `section.key`.
"""

import configparser
import dataclasses
from dataclasses import dataclass

from .detector import TrainConfig
from .evalkit import EvalConfig
from .model import MODALITIES, PipelineConfig
from .simkit import CLEAR_DAY, Condition, RigConfig, SimConfig, default_rig


class ConfigError(ValueError):
    """Schema or invariant violation; `problems` lists (field, reason)."""

    def __init__(self, problems):
        self.problems = list(problems)
        detail = "; ".join(f"{field}: {why}" for field, why in self.problems)
        super().__init__(f"invalid experiment config: {detail}")


# ---------------------------------------------------------------------------
# value converters (syntax only; bounds live in ExperimentConfig)
# ---------------------------------------------------------------------------

def _int(text: str) -> int:
    return int(text, 10)


def _float(text: str) -> float:
    return float(text)


_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"expected one of {_TRUE + _FALSE}, got {text!r}")


def _modalities(text: str) -> tuple:
    letters = tuple(text.strip())
    return letters


def _conditions(text: str) -> tuple:
    out = []
    for entry in text.split(","):
        entry = entry.strip()
        if not entry:
            continue
        spec, sep, count = entry.rpartition("*")
        if not sep:
            raise ValueError(f"condition entry {entry!r} lacks a *count")
        out.append((Condition.parse(spec.strip()), int(count, 10)))
    if not out:
        raise ValueError("at least one condition entry is required")
    return tuple(out)


def _word(text: str) -> str:
    return text.strip()


_SCHEMA = {
    "dataset": {"seed": _int, "conditions": _conditions,
                "n_cars": _int, "n_pedestrians": _int},
    "modality": {"inputs": _modalities, "proposals": _modalities,
                 "depth_transform": _bool, "gamma_weighting": _bool},
    "grid": {"x_min": _float, "x_max": _float, "z_min": _float,
             "z_max": _float, "cell": _float},
    "model": {"d": _int, "patch_factor": _int, "n_layers": _int,
              "top_k": _int},
    "sensors": {"width": _int, "height": _int, "focal": _float},
    "train": {"steps": _int, "lr": _float, "optimizer": _word},
    "eval": {"iou_car": _float, "iou_pedestrian": _float, "n_recall": _int},
}

# key -> "section.key", for naming fields in validation errors
_FIELD_OF = {key: f"{section}.{key}"
             for section, keys in _SCHEMA.items() for key in keys}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; field names mirror the INI keys."""

    seed: int = 1234
    conditions: tuple = ((CLEAR_DAY, 4),)
    n_cars: int = 4
    n_pedestrians: int = 2
    inputs: tuple = MODALITIES
    proposals: tuple = MODALITIES
    depth_transform: bool = True
    gamma_weighting: bool = True
    x_min: float = -24.0
    x_max: float = 24.0
    z_min: float = 0.0
    z_max: float = 48.0
    cell: float = 2.0
    d: int = 16
    patch_factor: int = 4
    n_layers: int = 4
    top_k: int = 8
    width: int = 96
    height: int = 48
    focal: float = 72.0
    steps: int = 200
    lr: float = 1e-2
    optimizer: str = "adam"
    iou_car: float = 0.2
    iou_pedestrian: float = 0.1
    n_recall: int = 40

    def __post_init__(self):
        order = {m: i for i, m in enumerate(MODALITIES)}
        for attr in ("inputs", "proposals"):
            letters = getattr(self, attr)
            if all(m in order for m in letters):
                object.__setattr__(self, attr,
                                   tuple(sorted(set(letters),
                                                key=order.__getitem__)))
        problems = self._problems()
        if problems:
            raise ConfigError(problems)

    def _problems(self):
        bad = []

        def flag(key, why):
            bad.append((_FIELD_OF[key], why))

        if not 0 <= self.seed < 2 ** 64:
            flag("seed", "must fit an unsigned 64-bit integer")
        for cond, count in self.conditions:
            if count < 0:
                flag("conditions", f"negative count for {cond}")
                break
        if self.n_cars < 0:
            flag("n_cars", "must be non-negative")
        if self.n_pedestrians < 0:
            flag("n_pedestrians", "must be non-negative")

        unknown = [m for m in self.inputs if m not in MODALITIES]
        if unknown or not self.inputs:
            flag("inputs", f"must be a non-empty subset of "
                           f"{''.join(MODALITIES)}")
        elif "L" not in self.inputs:
            flag("inputs", "the LiDAR modality anchors the BEV pipeline "
                           "and cannot be disabled")
        if [m for m in self.proposals if m not in MODALITIES] or \
                not self.proposals:
            flag("proposals", f"must be a non-empty subset of "
                              f"{''.join(MODALITIES)}")
        elif not set(self.proposals) <= set(self.inputs):
            flag("proposals", "proposal modalities must be a subset of "
                              "the input modalities")
        elif self.proposals not in (("L",), self.inputs):
            flag("proposals", "proposal features come from the fused map "
                              "(proposals = inputs) or the LiDAR map "
                              "alone (proposals = L)")

        if self.cell <= 0:
            flag("cell", "must be positive")
        else:
            for lo, hi, key in ((self.x_min, self.x_max, "x_max"),
                                (self.z_min, self.z_max, "z_max")):
                span = hi - lo
                if span <= 0:
                    flag(key, "extent is empty")
                elif abs(span / self.cell - round(span / self.cell)) > 1e-9:
                    flag(key, "extent must be a whole number of cells")
                elif span <= 4 * self.cell:
                    flag(key, "extent leaves no room inside the 2-cell "
                              "placement margin")

        for key in ("d", "patch_factor", "n_layers", "top_k"):
            if getattr(self, key) < 1:
                flag(key, "must be at least 1")
        if self.patch_factor >= 1:
            for key in ("width", "height"):
                if getattr(self, key) < self.patch_factor or \
                        getattr(self, key) % self.patch_factor:
                    flag(key, f"must be a positive multiple of "
                              f"model.patch_factor ({self.patch_factor})")
        if self.focal <= 0:
            flag("focal", "must be positive")

        if self.steps < 1:
            flag("steps", "must be at least 1")
        if self.lr <= 0:
            flag("lr", "must be positive")
        if self.optimizer not in ("adam", "momentum"):
            flag("optimizer", "must be adam or momentum")

        for key in ("iou_car", "iou_pedestrian"):
            if not 0 < getattr(self, key) < 1:
                flag(key, "must lie strictly between 0 and 1")
        if self.n_recall < 1:
            flag("n_recall", "must be at least 1")
        return bad

    # -- derived configurations ---------------------------------------------

    def pipeline_config(self) -> PipelineConfig:
        source = "lidar" if self.proposals == ("L",) else "fused"
        return PipelineConfig(d=self.d, patch_factor=self.patch_factor,
                              x_range=(self.x_min, self.x_max),
                              z_range=(self.z_min, self.z_max),
                              cell=self.cell, modalities=self.inputs,
                              proposal_source=source,
                              depth_transform=self.depth_transform,
                              gamma_weighting=self.gamma_weighting,
                              top_k=self.top_k, n_layers=self.n_layers)

    def sim_config(self) -> SimConfig:
        m = 2 * self.cell
        return SimConfig(x_range=(self.x_min + m, self.x_max - m),
                         z_range=(self.z_min + m, self.z_max - m),
                         n_cars=self.n_cars,
                         n_pedestrians=self.n_pedestrians)

    def rig(self) -> RigConfig:
        return default_rig(x_range=(self.x_min, self.x_max),
                           z_range=(self.z_min, self.z_max),
                           width=self.width, height=self.height,
                           focal=self.focal)

    def train_config(self) -> TrainConfig:
        return TrainConfig(n_steps=self.steps, lr=self.lr,
                           optimizer=self.optimizer)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(iou_thresholds=(self.iou_car, self.iou_pedestrian),
                          n_recall=self.n_recall)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)

    # -- fingerprints -------------------------------------------------------

    def fingerprint(self) -> dict:
        """JSON-ready section/key/value mirror of the whole config."""
        out = {}
        for section, keys in _SCHEMA.items():
            row = {}
            for key in keys:
                value = getattr(self, key)
                if key == "conditions":
                    value = [f"{cond}*{count}" for cond, count in value]
                elif key in ("inputs", "proposals"):
                    value = "".join(value)
                row[key] = value
            out[section] = row
        return out

    def data_fingerprint(self) -> dict:
        """The slice of the fingerprint a generated dataset depends on."""
        full = self.fingerprint()
        return {s: full[s] for s in ("dataset", "grid", "sensors")}

    def model_fingerprint(self) -> dict:
        """The slice a trained checkpoint depends on."""
        full = self.fingerprint()
        return {s: full[s] for s in ("modality", "grid", "model", "sensors")}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def parse_experiment(text: str) -> ExperimentConfig:
    """Parse INI text into a validated ExperimentConfig."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([("<syntax>", str(exc).replace("\n", " "))])

    problems = []
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            problems.append((section, "unknown section"))
            continue
        for key, raw in parser.items(section):
            convert = _SCHEMA[section].get(key)
            if convert is None:
                problems.append((f"{section}.{key}", "unknown key"))
                continue
            try:
                values[key] = convert(raw)
            except ValueError as exc:
                problems.append((f"{section}.{key}", str(exc)))
    if "inputs" in values and "proposals" not in values:
        values["proposals"] = values["inputs"]
    if problems:
        try:
            ExperimentConfig(**values)
        except ConfigError as exc:
            problems.extend(exc.problems)
        raise ConfigError(problems)
    return ExperimentConfig(**values)


def load_experiment(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_experiment(fh.read())
