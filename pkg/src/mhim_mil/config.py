"""Flat sectioned ``key = value`` run configuration.

Every key has a default in :data:`SCHEMA`; the type of the default decides
how the text value is parsed.  Overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .data import PRESETS, SynthConfig
from .errors import ConfigError
from .masking import STRATEGIES, MaskRatios
from .trainer import TEACHER_MODES, TrainerConfig

SCHEMA: dict[str, dict] = {
    "run": {"seed": 0},
    "data": {
        "preset": "easy", "dir": "", "n_bags": 200, "n_min": 50, "n_max": 100, "d_in": 64,
        "pos_ratio": 0.3, "delta": 3.0, "hard_fraction": 0.0, "label_balance": 0.5,
    },
    "model": {"kind": "gated", "dim": 32, "attn_dim": 32, "n_heads": 2, "n_layers": 2,
              "attn_layer": 0},
    "train": {
        "teacher": "init+momentum", "lambda_ema": 0.9999, "tau": 0.1, "alpha": 0.5,
        "lr0": 2e-4, "weight_decay": 1e-5, "max_epochs": 200, "patience": 30,
        "pretrain_epochs": 10, "pretrained": "",
    },
    "mask": {"strategy": "R-HAM", "beta_h": 10.0, "beta_l": 20.0, "beta_r": 20.0,
             "randomized_ham": False, "decay_high": True},
    "split": {"scheme": "holdout", "ratios": "0.65,0.10,0.25", "k": 3, "repeats": 1,
              "val_fraction": 0.1, "index": 0},
    "eval": {"split": "test"},
    "ablate": {"strategies": "none,HAM,R-HAM,L-HAM,LR-HAM", "teachers": "init+momentum",
               "seeds": "1,2,3"},
}

CHOICES = {
    "data.preset": ("easy", "hard", "custom"),
    "model.kind": ("gated", "msa"),
    "train.teacher": TEACHER_MODES,
    "mask.strategy": tuple(STRATEGIES),
    "split.scheme": ("holdout", "kfold"),
    "eval.split": ("train", "val", "test"),
}

# keys whose explicit setting should survive a preset (presets only fill defaults)
PRESET_KEYS = {"delta", "pos_ratio", "hard_fraction"}


def _parse(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({s: dict(keys) for s, keys in SCHEMA.items()})

    @classmethod
    def load(cls, path=None, overrides=(), preset: str | None = None,
             seed: int | None = None) -> "RunConfig":
        """Defaults, then the config file, then ``--preset``, ``--seed`` and ``--set``."""
        cfg = cls.defaults()
        explicit = set()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            text = Path(path).read_text()
            try:
                parser.read_string(text, source=str(path))
            except configparser.Error as exc:
                raise ConfigError(str(path), f"unreadable config: {exc}") from None
            for section in parser.sections():
                for key, raw in parser.items(section):
                    cfg.set(f"{section}.{key}", raw)
                    explicit.add(f"{section}.{key}")
        for item in overrides:
            if "=" not in item:
                raise ConfigError(item, "override must look like section.key=value")
            key, raw = item.split("=", 1)
            cfg.set(key.strip(), raw)
            explicit.add(key.strip())
        if preset is not None:
            cfg.set("data.preset", preset)
        if seed is not None:
            cfg.set("run.seed", str(seed))
        cfg._apply_preset(explicit)
        cfg.validate()
        return cfg

    def set(self, dotted: str, raw: str) -> None:
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(dotted, "unknown configuration key")
        self.values[section][key] = _parse(dotted, str(raw), SCHEMA[section][key])

    def get(self, dotted: str):
        section, _, key = dotted.partition(".")
        return self.values[section][key]

    def _apply_preset(self, explicit: set) -> None:
        name = self.get("data.preset")
        if name == "custom":
            return
        if name not in PRESETS:
            raise ConfigError("data.preset", f"unknown preset {name!r}")
        for key, value in PRESETS[name].items():
            if f"data.{key}" not in explicit:
                self.values["data"][key] = value

    def validate(self) -> None:
        for dotted, allowed in CHOICES.items():
            if self.get(dotted) not in allowed:
                raise ConfigError(dotted, f"must be one of {', '.join(allowed)}")
        for dotted in ("data.n_bags", "data.n_min", "data.d_in", "model.dim", "model.attn_dim",
                       "model.n_heads", "model.n_layers", "train.max_epochs", "train.patience",
                       "split.k", "split.repeats"):
            if self.get(dotted) < 1:
                raise ConfigError(dotted, "must be >= 1")
        for dotted in ("train.pretrain_epochs", "model.attn_layer", "split.index",
                       "train.alpha", "train.weight_decay", "data.delta"):
            if self.get(dotted) < 0:
                raise ConfigError(dotted, "must be non-negative")
        for dotted in ("train.tau", "train.lr0"):
            if not self.get(dotted) > 0:
                raise ConfigError(dotted, "must be positive")
        if not 0 <= self.get("train.lambda_ema") <= 1:
            raise ConfigError("train.lambda_ema", "must lie in [0, 1]")
        if self.get("data.n_max") < self.get("data.n_min"):
            raise ConfigError("data.n_max", "must be >= data.n_min")
        if not 0 < self.get("data.pos_ratio") <= 1:
            raise ConfigError("data.pos_ratio", "must lie in (0, 1]")
        if not 0 <= self.get("data.hard_fraction") < 1:
            raise ConfigError("data.hard_fraction", "must lie in [0, 1)")
        if not 0 < self.get("data.label_balance") < 1:
            raise ConfigError("data.label_balance", "must lie in (0, 1)")
        if self.get("model.dim") % self.get("model.n_heads"):
            raise ConfigError("model.n_heads", "must divide model.dim")
        if self.get("model.kind") == "msa" and self.get("model.attn_layer") >= self.get("model.n_layers"):
            raise ConfigError("model.attn_layer", "must be < model.n_layers")
        try:
            ratios = [float(v) for v in _csv(self.get("split.ratios"))]
        except ValueError:
            raise ConfigError("split.ratios", "must be comma-separated numbers") from None
        if len(ratios) != 3 or abs(sum(ratios) - 1) > 1e-9 or min(ratios) < 0:
            raise ConfigError("split.ratios", "must be three non-negative numbers summing to 1")
        for name in ("beta_h", "beta_l", "beta_r"):
            if not 0 <= self.get(f"mask.{name}") <= 100:
                raise ConfigError(f"mask.{name}", "must lie in [0, 100]")
        try:
            self.mask_ratios().validate(self.get("data.n_min"), self.get("data.n_max"))
        except ValueError as exc:
            key = "mask.beta_h" if "randomized" in str(exc) else "mask.strategy"
            raise ConfigError(key, str(exc)) from None
        for s in _csv(self.get("ablate.strategies")):
            if s not in STRATEGIES:
                raise ConfigError("ablate.strategies", f"unknown strategy {s!r}")
        for t in _csv(self.get("ablate.teachers")):
            if t not in TEACHER_MODES:
                raise ConfigError("ablate.teachers", f"unknown teacher {t!r}")
        try:
            seeds = [int(s) for s in _csv(self.get("ablate.seeds"))]
        except ValueError:
            raise ConfigError("ablate.seeds", "must be comma-separated integers") from None
        if not seeds:
            raise ConfigError("ablate.seeds", "needs at least one seed")

    # ---------------------------------------------------------- typed views

    @property
    def seed(self) -> int:
        return self.get("run.seed")

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        d = self.values["data"]
        return SynthConfig(d["n_bags"], d["n_min"], d["n_max"], d["d_in"], d["pos_ratio"],
                           d["delta"], d["hard_fraction"], d["label_balance"],
                           self.seed if seed is None else seed)

    def mask_ratios(self, strategy: str | None = None) -> MaskRatios:
        m = self.values["mask"]
        return MaskRatios.for_strategy(strategy or m["strategy"], m["beta_h"], m["beta_l"],
                                       m["beta_r"], m["randomized_ham"], m["decay_high"])

    def trainer_config(self, seed: int | None = None, strategy: str | None = None,
                       teacher: str | None = None, cell: str = "", d_in: int | None = None
                       ) -> TrainerConfig:
        mo, tr = self.values["model"], self.values["train"]
        return TrainerConfig(
            model_kind=mo["kind"], d_in=d_in or self.get("data.d_in"), dim=mo["dim"],
            attn_dim=mo["attn_dim"], n_heads=mo["n_heads"], n_layers=mo["n_layers"],
            attn_layer=mo["attn_layer"], teacher=teacher or tr["teacher"],
            lambda_ema=tr["lambda_ema"], tau=tr["tau"], alpha=tr["alpha"], lr0=tr["lr0"],
            weight_decay=tr["weight_decay"], max_epochs=tr["max_epochs"],
            patience=tr["patience"], pretrain_epochs=tr["pretrain_epochs"],
            mask=self.mask_ratios(strategy), seed=self.seed if seed is None else seed, cell=cell)

    def split_ratios(self) -> tuple:
        return tuple(float(v) for v in _csv(self.get("split.ratios")))

    def ablate_axes(self) -> tuple[list, list, list]:
        a = self.values["ablate"]
        return _csv(a["strategies"]), _csv(a["teachers"]), [int(s) for s in _csv(a["seeds"])]

    def dumps(self) -> str:
        out = []
        for section, keys in SCHEMA.items():
            out.append(f"[{section}]")
            out.extend(f"{key} = {_fmt(self.values[section][key])}" for key in keys)
            out.append("")
        return "\n".join(out)

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())
