"""JSON run configurations: schema validation, line-precise errors, builders.

A config describes one scenario family, a list of procedures and a list of
metrics. An optional ``sweep`` expands it into one study per value of a
scenario parameter (``delta``, ``sigma1`` or ``observed``). Fractions may be
written as ``"num/den"`` strings so that ratios and probabilities stay exact.
"""
from __future__ import annotations

import copy
import json
import tempfile
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from json.decoder import scanstring
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from .core import (
    JointStratumMargin,
    JointStratumStratum,
    ObsMargin,
    ObsStratum,
    Overall,
    SchemaError,
    UnobsMargin,
    UnobsStratum,
    to_fraction,
)
from .montecarlo.engine import Metric, ProcedureSpec
from .montecarlo.study import StudyConfig
from .procedures import BiasedProbabilities, CarWeights, ConfigurationError, validate_ratios
from .scenarios import (
    CohortError,
    ScenarioView,
    delta_model,
    load_cohort,
    table4_recode_map,
    threshold_model,
    write_synthetic_cohort,
)


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, source: str = "<config>", line: int | None = None,
                 path: Sequence = ()):
        self.message = message
        self.source = source
        self.line = line
        self.path = tuple(path)
        where = f"{source}:{line}" if line else source
        loc = "/".join(map(str, self.path))
        super().__init__(f"{where}: {loc + ': ' if loc else ''}{message}")


def config_schema() -> dict:
    text = resources.files("covbal.data").joinpath("config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def bundled_config(name: str) -> Path:
    """Path of a bundled reference config (``study1``, ``study2``, ...)."""
    if not name.endswith(".json"):
        name += ".json"
    path = Path(str(resources.files("covbal.data").joinpath("configs", name)))
    if not path.exists():
        raise FileNotFoundError(f"no bundled config {name!r}")
    return path


# -- locating JSON pointers in source text -------------------------------------

_WS = " \t\n\r"
_decoder = json.JSONDecoder()


def _skip(text: str, i: int) -> int:
    while i < len(text) and text[i] in _WS:
        i += 1
    return i


def locate(text: str, path: Sequence) -> int:
    """Character offset of the value at ``path`` (keys and list indices).

    Stops at the deepest existing prefix, so a missing key resolves to the
    enclosing object.
    """
    i = _skip(text, 0)
    for key in path:
        if i >= len(text):
            break
        if text[i] == "{" and isinstance(key, str):
            j = _skip(text, i + 1)
            found = None
            while j < len(text) and text[j] != "}":
                name, j = scanstring(text, j + 1)
                j = _skip(text, j)
                j = _skip(text, j + 1)  # colon
                if name == key:
                    found = j
                    break
                _, j = _decoder.raw_decode(text, j)
                j = _skip(text, j)
                if text[j] == ",":
                    j = _skip(text, j + 1)
            if found is None:
                return i
            i = found
        elif text[i] == "[" and isinstance(key, int):
            j = _skip(text, i + 1)
            k = 0
            while j < len(text) and text[j] != "]" and k < key:
                _, j = _decoder.raw_decode(text, j)
                j = _skip(text, j)
                if text[j] == ",":
                    j = _skip(text, j + 1)
                k += 1
            if k != key or text[j] == "]":
                return i
            i = j
        else:
            break
    return i


def line_of(text: str, path: Sequence) -> int:
    return text.count("\n", 0, locate(text, path)) + 1


# -- loading -------------------------------------------------------------------

@dataclass
class RunConfig:
    raw: dict
    text: str
    source: str
    base_dir: Path

    def error(self, message: str, path: Sequence = ()) -> ConfigError:
        return ConfigError(message, self.source, line_of(self.text, path), path)


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", source, exc.lineno) from exc
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        raise ConfigError(err.message, source, line_of(text, path), path)
    cfg = RunConfig(raw, text, source, base_dir or Path.cwd())
    # semantic checks happen at parse time, before any computation
    for _ in build_studies(cfg):
        pass
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    return parse_config(text, str(path), path.parent)


# -- builders ------------------------------------------------------------------

def _frac(cfg: RunConfig, value, path) -> Fraction:
    try:
        return to_fraction(value)
    except (ValueError, ZeroDivisionError, TypeError) as exc:
        raise cfg.error(f"not a number or fraction: {value!r}", path) from exc


def build_procedures(cfg: RunConfig) -> list[ProcedureSpec]:
    raw = cfg.raw
    ratios = tuple(_frac(cfg, r, ["ratios", i]) for i, r in enumerate(raw["ratios"]))
    try:
        validate_ratios(ratios, allow_zero=True)
    except ConfigurationError as exc:
        raise cfg.error(str(exc), ["ratios"]) from exc
    specs = []
    for i, p in enumerate(raw["procedures"]):
        where = ["procedures", i]
        kind = p["kind"]
        try:
            if kind == "car":
                w = p["weights"]
                weights = CarWeights.create(
                    _frac(cfg, w["overall"], where + ["weights", "overall"]),
                    [_frac(cfg, x, where + ["weights", "margins", k]) for k, x in enumerate(w["margins"])],
                    _frac(cfg, w["stratum"], where + ["weights", "stratum"]),
                )
                biased = BiasedProbabilities.create(
                    [_frac(cfg, x, where + ["biased", k]) for k, x in enumerate(p["biased"])], ratios
                )
                specs.append(ProcedureSpec("car", ratios, p.get("label", ""), weights=weights, biased=biased))
            elif kind == "str_pb":
                overrides = tuple(
                    (tuple(o["stratum"]), int(o["block_size"])) for o in p.get("block_overrides", [])
                )
                specs.append(ProcedureSpec("str_pb", ratios, p.get("label", ""),
                                           block_multiple=p.get("block_multiple", 1),
                                           block_overrides=overrides))
            else:
                specs.append(ProcedureSpec("cr", ratios, p.get("label", "")))
        except ConfigurationError as exc:
            raise cfg.error(str(exc), where) from exc
    labels = [s.label for s in specs]
    for i, lab in enumerate(labels):
        if labels.index(lab) != i:
            raise cfg.error(f"duplicate procedure label {lab!r}", ["procedures", i])
    return specs


_SCOPES = {
    "overall": lambda d: Overall(),
    "obs_margin": lambda d: ObsMargin(d["k"], d["level"]),
    "obs_stratum": lambda d: ObsStratum(tuple(d["s"])),
    "unobs_margin": lambda d: UnobsMargin(d["j"], d["level"]),
    "unobs_stratum": lambda d: UnobsStratum(tuple(d["r"])),
    "joint_stratum_margin": lambda d: JointStratumMargin(tuple(d["s"]), d["j"], d["level"]),
    "joint_stratum_stratum": lambda d: JointStratumStratum(tuple(d["s"]), tuple(d["r"])),
}


def build_metrics(cfg: RunConfig, view: ScenarioView, m: int) -> list[Metric]:
    out = []
    for i, d in enumerate(cfg.raw["metrics"]):
        where = ["metrics", i]
        try:
            scope = _SCOPES[d["scope"]](d)
        except KeyError as exc:
            raise cfg.error(f"scope {d['scope']!r} needs field {exc.args[0]!r}", where) from exc
        try:
            scope.validate(view.schema)
        except SchemaError as exc:
            raise cfg.error(str(exc), where) from exc
        for arm in d.get("arms", [1]):
            if not 1 <= arm <= m:
                raise cfg.error(f"arm {arm} outside 1..{m}", where + ["arms"])
            out.append(Metric(scope, arm))
    return out


def _sweep_values(cfg: RunConfig) -> tuple[str | None, list]:
    sweep = cfg.raw.get("sweep")
    if not sweep:
        return None, [None]
    return sweep["param"], list(sweep["values"])


def scenario_params(cfg: RunConfig) -> list[dict]:
    """One scenario dict per sweep point (the sweep value folded in)."""
    param, values = _sweep_values(cfg)
    out = []
    for v in values:
        sc = copy.deepcopy(cfg.raw["scenario"])
        if param is not None:
            sc[param] = v
        out.append(sc)
    return out


def _cohort_path(cfg: RunConfig, sc: dict) -> Path:
    if "path" in sc:
        p = Path(sc["path"])
        return p if p.is_absolute() else cfg.base_dir / p
    syn = sc.get("synthetic", {})
    n, seed = syn.get("n", 281), syn.get("seed", 2014)
    target = Path(syn["write_to"]) if "write_to" in syn else (
        Path(tempfile.gettempdir()) / f"covbal-synthetic-{n}-{seed}.csv")
    if not target.is_absolute():
        target = cfg.base_dir / target
    if not target.exists():
        target.parent.mkdir(parents=True, exist_ok=True)
        write_synthetic_cohort(target, n=n, seed=seed)
    return target


def build_view(cfg: RunConfig, sc: dict, index: int = 0) -> ScenarioView:
    where = ["scenario"]
    model = sc["model"]
    try:
        if model == "delta":
            base = delta_model(_frac(cfg, sc.get("delta", 0), where + ["delta"]))
        elif model == "threshold":
            base = threshold_model(float(_frac(cfg, sc["sigma1"], where + ["sigma1"])),
                                   float(_frac(cfg, sc.get("sigma2", 1), where + ["sigma2"])))
        else:
            recode = sc.get("recode", "table4")
            if recode == "table4":
                recode = table4_recode_map()
            elif not Path(recode).is_absolute():
                recode = cfg.base_dir / recode
            base = load_cohort(_cohort_path(cfg, sc), recode)
            if sc.get("replace"):
                base = base.with_replacement()
        return base.view(sc.get("observed"), sc.get("unobserved"))
    except (ValueError, SchemaError, CohortError) as exc:
        path = ["sweep", "values", index] if cfg.raw.get("sweep") else where
        raise cfg.error(str(exc), path) from exc


def _label(cfg: RunConfig, sc: dict) -> str:
    param, _ = _sweep_values(cfg)
    base = cfg.raw.get("label", "study")
    if param is None:
        return base
    v = sc[param]
    v = "+".join(v) if isinstance(v, list) else str(v)
    return f"{base}[{param}={v}]"


def build_studies(cfg: RunConfig, seed: int | None = None) -> list[StudyConfig]:
    procs = build_procedures(cfg)
    m = len(procs[0].ratios)
    raw = cfg.raw
    studies = []
    for idx, sc in enumerate(scenario_params(cfg)):
        view = build_view(cfg, sc, idx)
        metrics = build_metrics(cfg, view, m)
        for i, spec in enumerate(procs):
            if spec.kind == "car" and len(spec.weights.margins) != view.schema.p:
                raise cfg.error(
                    f"{len(spec.weights.margins)} margin weights for {view.schema.p} observed covariates",
                    ["procedures", i, "weights", "margins"],
                )
        n = raw["n"]
        if n == "all":
            n = len(view.model)
        try:
            studies.append(StudyConfig(view, procs, int(n), raw["replicates"],
                                       raw["seed"] if seed is None else seed, metrics,
                                       _label(cfg, sc), {"scenario": sc}))
        except ValueError as exc:
            raise cfg.error(str(exc)) from exc
    return studies


def sweep_value(study: StudyConfig, cfg: RunConfig) -> Any:
    param, _ = _sweep_values(cfg)
    return None if param is None else study.params["scenario"][param]
