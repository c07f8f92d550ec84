"""Experiment harness: validated configs, policy comparison, A/B flipping, sweeps, heatmaps.

Config files are YAML. Every key is checked before a run starts; an unknown
or malformed key raises :class:`ConfigError` naming the offending field.
Schema (all keys optional except where noted)::

    name: str                 # label for this policy in reports (default: policy)
    preset: str               # named city preset (default "imbalanced")
    preset_args: {str: any}   # keyword arguments for the preset factory
    log: path                 # replay a TripEventLog instead of synthetic demand
    policy: str               # rlw | rlw_v1d3 | myopic | v1d3 | frozen
    params: {str: any}        # policy hyperparameters (PolicyConfig fields for rlw)
    policies:                 # several policies on the same market (compare/abtest)
      - {name: str, policy: str, params: {...}}
    baseline: str             # policy name used as the comparison baseline
    seed: int
    seeds: [int, ...] | "N..M"
    horizon: float            # simulated seconds
    price_scale: float
    out: path
    sim: {str: any}           # SimConfig overrides (max_wait, speed, ...)
    flip_hours: float         # abtest window length
    ab: [control, treatment]  # abtest policy names
    sweep:
      budget: int             # total evaluations, grid points first
      seed: int               # seed for the random points
      grid: [[w_rew_s, w_rew_f, w_p_s, w_p_f], ...]
      ranges: {w_rew_s: [lo, hi], ...}
    workers: int              # processes for independent runs
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from .policy import (
    DispatchPolicy,
    FrozenTablePolicy,
    MyopicPolicy,
    PolicyConfig,
    RLWPolicy,
    V1D3Policy,
    v1d3_equivalent_config,
)
from .simulator import (
    PRESETS,
    CityPreset,
    RunReport,
    SimConfig,
    Simulator,
    TripEventLog,
    get_preset,
    policy_rng,
)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


POLICY_KINDS = ("rlw", "rlw_v1d3", "myopic", "v1d3", "frozen")
METRICS = ("income", "cr", "ar", "sr")
SWEEP_PARAMS = ("w_rew_s", "w_rew_f", "w_p_s", "w_p_f")
_SIM_FIELDS = {f.name for f in dataclasses.fields(SimConfig)} - {"seed", "horizon", "price_scale"}
_POLICY_CONFIG_FIELDS = {f.name for f in dataclasses.fields(PolicyConfig)}


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class PolicySpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SweepSpec:
    budget: int = 1
    seed: int = 0
    grid: tuple = ()
    ranges: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    preset: str = "imbalanced"
    preset_args: dict = field(default_factory=dict)
    log: Optional[str] = None
    policies: list[PolicySpec] = field(default_factory=list)
    baseline: Optional[str] = None
    seeds: list[int] = field(default_factory=lambda: [0])
    horizon: float = 3600.0
    price_scale: float = 1.0
    out: str = "runs/out"
    sim: dict = field(default_factory=dict)
    flip_hours: float = 3.0
    ab: Optional[tuple[str, str]] = None
    sweep: Optional[SweepSpec] = None
    workers: int = 1

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def policy(self, name: Optional[str] = None) -> PolicySpec:
        if name is None:
            return self.policies[0]
        for p in self.policies:
            if p.name == name:
                return p
        raise ConfigError(f"policy name {name!r} not defined; have {[p.name for p in self.policies]}")

    def market_key(self) -> tuple:
        """Everything that determines the demand stream; must agree across compared configs."""
        return (self.preset, json.dumps(self.preset_args, sort_keys=True), self.log, self.horizon,
                self.price_scale, json.dumps(self.sim, sort_keys=True))

    def build_preset(self) -> CityPreset:
        return get_preset(self.preset, **self.preset_args)

    def sim_config(self, seed: int) -> SimConfig:
        return SimConfig(seed=seed, horizon=self.horizon, price_scale=self.price_scale, **self.sim)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ab"] = list(self.ab) if self.ab else None
        if self.sweep is not None:
            d["sweep"]["grid"] = [list(g) for g in self.sweep.grid]
        return d


_TOP_KEYS = {
    "name", "preset", "preset_args", "log", "policy", "params", "policies", "baseline", "seed", "seeds",
    "horizon", "price_scale", "out", "sim", "flip_hours", "ab", "sweep", "workers",
}


def parse_seeds(value: Any) -> list[int]:
    """``7``, ``[1, 2]`` or ``"0..19"`` (inclusive)."""
    if isinstance(value, bool):
        raise ConfigError("seeds: expected int, list or 'N..M'")
    if isinstance(value, int):
        return [value]
    if isinstance(value, str):
        if ".." in value:
            lo, _, hi = value.partition("..")
            try:
                a, b = int(lo), int(hi)
            except ValueError:
                raise ConfigError(f"seeds: cannot parse range {value!r}") from None
            if b < a:
                raise ConfigError(f"seeds: empty range {value!r}")
            return list(range(a, b + 1))
        try:
            return [int(value)]
        except ValueError:
            raise ConfigError(f"seeds: cannot parse {value!r}") from None
    if isinstance(value, (list, tuple)) and value and all(isinstance(s, int) and not isinstance(s, bool) for s in value):
        return list(value)
    raise ConfigError("seeds: expected int, non-empty list of ints or 'N..M'")


def _number(raw: dict, key: str, default, kind=float, minimum=None, strict=False):
    if key not in raw or raw[key] is None:
        return default
    v = raw[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {v!r}")
    if kind is int and not float(v).is_integer():
        raise ConfigError(f"{key}: expected an integer, got {v!r}")
    v = kind(v)
    if minimum is not None and (v <= minimum if strict else v < minimum):
        raise ConfigError(f"{key}: must be {'>' if strict else '>='} {minimum}, got {v}")
    return v


def _mapping(raw: dict, key: str) -> dict:
    v = raw.get(key) or {}
    if not isinstance(v, dict):
        raise ConfigError(f"{key}: expected a mapping")
    return dict(v)


def _check_policy(spec: PolicySpec, where: str) -> None:
    if spec.kind not in POLICY_KINDS:
        raise ConfigError(f"{where}policy: unknown policy {spec.kind!r}; choose from {list(POLICY_KINDS)}")
    allowed = {
        "rlw": _POLICY_CONFIG_FIELDS,
        "rlw_v1d3": {"gamma", "lr", "t_up"},
        "myopic": set(),
        "v1d3": {"gamma", "lr", "t_up"},
        "frozen": {"values", "gamma"},
    }[spec.kind]
    for k in spec.params:
        if k not in allowed:
            raise ConfigError(f"{where}params.{k}: unknown parameter for policy {spec.kind!r}")
    if spec.kind == "frozen" and "values" not in spec.params:
        raise ConfigError(f"{where}params.values: frozen policy needs a value-table CSV path")
    try:
        if spec.kind == "rlw":
            _policy_config(spec.params)
        elif spec.kind == "rlw_v1d3":
            v1d3_equivalent_config(**spec.params)
        elif spec.kind == "v1d3":
            V1D3Policy(1, **spec.params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}params: {exc}") from None


def _policy_config(params: dict) -> PolicyConfig:
    p = dict(params)
    for k in ("w_rew", "w_p", "ucb_arms"):
        if k in p and isinstance(p[k], list):
            p[k] = tuple(p[k])
    return PolicyConfig(**p)


def _parse_sweep(raw: Any) -> SweepSpec:
    if not isinstance(raw, dict):
        raise ConfigError("sweep: expected a mapping")
    for k in raw:
        if k not in {"budget", "seed", "grid", "ranges"}:
            raise ConfigError(f"sweep.{k}: unknown key")
    budget = _number(raw, "budget", 1, int)
    if budget < 1:
        raise ConfigError(f"sweep.budget: must be >= 1, got {budget}")
    seed = _number(raw, "seed", 0, int)
    grid = raw.get("grid") or []
    if not isinstance(grid, list):
        raise ConfigError("sweep.grid: expected a list of 4-value points")
    points = []
    for i, g in enumerate(grid):
        if not (isinstance(g, (list, tuple)) and len(g) == 4 and all(isinstance(x, (int, float)) for x in g)):
            raise ConfigError(f"sweep.grid[{i}]: expected [w_rew_s, w_rew_f, w_p_s, w_p_f]")
        points.append(tuple(float(x) for x in g))
    ranges = raw.get("ranges") or {}
    if not isinstance(ranges, dict):
        raise ConfigError("sweep.ranges: expected a mapping")
    clean = {}
    for k, v in ranges.items():
        if k not in SWEEP_PARAMS:
            raise ConfigError(f"sweep.ranges.{k}: unknown parameter; choose from {list(SWEEP_PARAMS)}")
        if not (isinstance(v, (list, tuple)) and len(v) == 2 and float(v[0]) <= float(v[1])):
            raise ConfigError(f"sweep.ranges.{k}: expected [lo, hi] with lo <= hi")
        clean[k] = (float(v[0]), float(v[1]))
    if not points and not clean:
        raise ConfigError("sweep: empty parameter space (no grid points and no ranges)")
    if len(points) > budget:
        raise ConfigError(f"sweep.budget: {budget} is smaller than the {len(points)} grid points")
    if len(points) < budget and not clean:
        raise ConfigError("sweep.ranges: needed to draw random points beyond the grid")
    return SweepSpec(budget, seed, tuple(points), clean)


def parse_config(raw: Any, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Validate a raw mapping (as loaded from YAML) and apply CLI overrides."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    for k in raw:
        if k not in _TOP_KEYS:
            raise ConfigError(f"{k}: unknown config key")

    preset = raw.get("preset", "imbalanced")
    if not isinstance(preset, str) or preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    preset_args = _mapping(raw, "preset_args")
    try:
        get_preset(preset, **preset_args)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"preset_args: {exc}") from None
    log = raw.get("log")
    if log is not None and not isinstance(log, str):
        raise ConfigError("log: expected a file path")

    policies: list[PolicySpec] = []
    if "policies" in raw and raw["policies"] is not None:
        if "policy" in raw or "params" in raw:
            raise ConfigError("policies: give either 'policy'/'params' or a 'policies' list, not both")
        if not isinstance(raw["policies"], list) or not raw["policies"]:
            raise ConfigError("policies: expected a non-empty list")
        for i, p in enumerate(raw["policies"]):
            if not isinstance(p, dict):
                raise ConfigError(f"policies[{i}]: expected a mapping")
            for k in p:
                if k not in {"name", "policy", "params"}:
                    raise ConfigError(f"policies[{i}].{k}: unknown key")
            if "policy" not in p:
                raise ConfigError(f"policies[{i}].policy: required")
            spec = PolicySpec(str(p.get("name", p["policy"])), str(p["policy"]), dict(p.get("params") or {}))
            _check_policy(spec, f"policies[{i}].")
            policies.append(spec)
    else:
        kind = raw.get("policy", "rlw")
        if not isinstance(kind, str):
            raise ConfigError("policy: expected a policy name")
        spec = PolicySpec(str(raw.get("name", kind)), kind, _mapping(raw, "params"))
        _check_policy(spec, "")
        policies.append(spec)
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ConfigError(f"policies: duplicate policy names {names}")

    if "seeds" in raw and raw["seeds"] is not None:
        seeds = parse_seeds(raw["seeds"])
    else:
        seeds = parse_seeds(raw.get("seed", 0))
    if any(s < 0 for s in seeds):
        raise ConfigError("seeds: must be >= 0")

    sim = _mapping(raw, "sim")
    for k in sim:
        if k not in _SIM_FIELDS:
            raise ConfigError(f"sim.{k}: unknown simulator setting")
    cfg = ExperimentConfig(
        preset=preset,
        preset_args=preset_args,
        log=log,
        policies=policies,
        baseline=raw.get("baseline"),
        seeds=seeds,
        horizon=_number(raw, "horizon", 3600.0, float, 0.0),
        price_scale=_number(raw, "price_scale", 1.0, float, 0.0, strict=True),
        out=str(raw.get("out", "runs/out")),
        sim=sim,
        flip_hours=_number(raw, "flip_hours", 3.0, float, 0.0, strict=True),
        sweep=_parse_sweep(raw["sweep"]) if raw.get("sweep") is not None else None,
        workers=_number(raw, "workers", 1, int, 1),
    )
    try:
        cfg.sim_config(cfg.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sim: {exc}") from None
    if cfg.baseline is not None and cfg.baseline not in names:
        raise ConfigError(f"baseline: {cfg.baseline!r} is not one of the policy names {names}")
    ab = raw.get("ab")
    if ab is not None:
        if not (isinstance(ab, list) and len(ab) == 2):
            raise ConfigError("ab: expected [control, treatment] policy names")
        for n in ab:
            if n not in names:
                raise ConfigError(f"ab: {n!r} is not one of the policy names {names}")
        cfg.ab = (ab[0], ab[1])
    return cfg


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: invalid YAML in {path}: {exc}") from None
    return parse_config(raw, overrides)


# --------------------------------------------------------------------------- running


def make_policy(spec: PolicySpec, n_cells: int, seed: int) -> DispatchPolicy:
    if spec.kind == "rlw":
        pol: DispatchPolicy = RLWPolicy(_policy_config(spec.params), n_cells, policy_rng(seed))
    elif spec.kind == "rlw_v1d3":
        pol = RLWPolicy(v1d3_equivalent_config(**spec.params), n_cells, policy_rng(seed))
    elif spec.kind == "myopic":
        pol = MyopicPolicy()
    elif spec.kind == "v1d3":
        pol = V1D3Policy(n_cells, **spec.params)
    elif spec.kind == "frozen":
        pol = FrozenTablePolicy.from_csv(spec.params["values"], spec.params.get("gamma", 0.9))
        if len(pol.values) != n_cells:
            raise ValueError(f"value table has {len(pol.values)} cells, market has {n_cells}")
    else:
        raise ConfigError(f"policy: unknown policy {spec.kind!r}")
    pol.name = spec.name
    return pol


def _load_log(cfg: ExperimentConfig) -> Optional[TripEventLog]:
    return TripEventLog.read_jsonl(cfg.log) if cfg.log else None


def run_one(cfg: ExperimentConfig, spec: PolicySpec, seed: int) -> RunReport:
    preset = cfg.build_preset()
    policy = make_policy(spec, preset.n_cells, seed)
    return Simulator(preset, cfg.sim_config(seed), _load_log(cfg)).run(policy)


def _run_totals(args) -> dict:
    cfg, spec, seed = args
    return run_one(cfg, spec, seed).totals


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def cmd_run(cfg: ExperimentConfig, out_dir=None, policy_name: Optional[str] = None) -> dict[str, Path]:
    """Run one policy for every configured seed; one output folder per seed when there are several."""
    out = Path(out_dir or cfg.out)
    spec = cfg.policy(policy_name)
    written: dict[str, Path] = {}
    for seed in cfg.seeds:
        target = out if len(cfg.seeds) == 1 else out / f"seed_{seed}"
        report = run_one(cfg, spec, seed)
        paths = report.write(target)
        (target / "config.json").write_text(json.dumps(cfg.as_dict(), indent=2, sort_keys=True) + "\n")
        written.update({f"{k}@{seed}" if len(cfg.seeds) > 1 else k: v for k, v in paths.items()})
    return written


# --------------------------------------------------------------------------- compare


def _improvement(x: float, base: float) -> float:
    if base == 0:
        return 0.0 if x == 0 else math.nan
    return (x - base) / base * 100.0


@dataclass
class ComparisonReport:
    """Per-seed totals per policy and percent improvements against a baseline."""

    baseline: str
    seeds: list[int]
    totals: dict[str, list[dict]]  # policy -> per-seed totals, aligned with seeds

    def values(self, policy: str, metric: str) -> np.ndarray:
        return np.array([t[metric] for t in self.totals[policy]], dtype=float)

    def improvements(self, policy: str, metric: str) -> np.ndarray:
        base = self.values(self.baseline, metric)
        return np.array([_improvement(x, b) for x, b in zip(self.values(policy, metric), base)])

    def summary(self) -> dict[str, dict[str, tuple[float, float]]]:
        """policy -> metric -> (mean, std) percent improvement; std is 0 for one seed."""
        out = {}
        for p in self.totals:
            out[p] = {}
            for m in METRICS:
                imp = self.improvements(p, m)
                out[p][m] = (float(imp.mean()), float(imp.std()) if imp.size > 1 else 0.0)
        return out

    def table(self) -> str:
        lines = ["policy," + ",".join(METRICS)]
        for p, row in self.summary().items():
            lines.append(p + "," + ",".join(f"{m:.2f}±{s:.2f}" for m, s in (row[k] for k in METRICS)))
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        per_seed = out / "per_seed.csv"
        with open(per_seed, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy", "seed", *METRICS, "requests", "dispatches", "completed", "demand_hash"])
            for p, rows in self.totals.items():
                for seed, t in zip(self.seeds, rows):
                    w.writerow([p, seed, *(repr(t[m]) for m in METRICS), t["requests"], t["dispatches"],
                                t["completed"], t["demand_hash"]])
        summary = out / "improvement.csv"
        summary.write_text(self.table())
        js = out / "comparison.json"
        js.write_text(json.dumps({"baseline": self.baseline, "seeds": self.seeds, "summary": self.summary()},
                                 indent=2, sort_keys=True) + "\n")
        return {"per_seed": per_seed, "improvement": summary, "json": js}


def merge_configs(cfgs: Sequence[ExperimentConfig]) -> ExperimentConfig:
    """One config holding the policies of several single-market configs."""
    if not cfgs:
        raise ConfigError("config: nothing to compare")
    key = cfgs[0].market_key()
    for c in cfgs[1:]:
        if c.market_key() != key:
            raise ConfigError("preset: compared configs describe different markets (preset, log, horizon or sim)")
        if c.seeds != cfgs[0].seeds:
            raise ConfigError("seeds: compared configs use different seeds")
    policies = [p for c in cfgs for p in c.policies]
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ConfigError(f"policies: duplicate policy names {names}; set 'name' in each config")
    baseline = next((c.baseline for c in cfgs if c.baseline), None)
    return dataclasses.replace(cfgs[0], policies=policies, baseline=baseline)


def cmd_compare(cfg: ExperimentConfig, baseline: Optional[str] = None) -> ComparisonReport:
    """Every policy on every seed; per seed all policies see the same demand stream."""
    if len(cfg.policies) < 2:
        raise ConfigError("policies: compare needs at least two policies")
    base = baseline or cfg.baseline or cfg.policies[0].name
    if base not in [p.name for p in cfg.policies]:
        raise ConfigError(f"baseline: {base!r} is not one of the policies")
    jobs = [(cfg, p, s) for p in cfg.policies for s in cfg.seeds]
    results = _map(_run_totals, jobs, cfg.workers)
    totals: dict[str, list[dict]] = {p.name: [] for p in cfg.policies}
    for (_, p, _), t in zip(jobs, results):
        totals[p.name].append(t)
    for k, seed in enumerate(cfg.seeds):
        hashes = {totals[p][k]["demand_hash"] for p in totals}
        if len(hashes) != 1:
            raise RuntimeError(f"demand streams differ across policies for seed {seed}")
    return ComparisonReport(base, list(cfg.seeds), totals)


# --------------------------------------------------------------------------- A/B


@dataclass
class ABWindow:
    run: int
    index: int
    t_start: float
    t_end: float
    arm: str  # "control" or "treatment"
    policy: str
    arrivals: int
    dispatches: int
    completed: int
    cancelled: int
    unanswered: int
    income: float


@dataclass
class ABReport:
    control: str
    treatment: str
    flip_hours: float
    windows: list[ABWindow]
    run_totals: list[dict]

    def pooled(self, arm: str) -> dict:
        """Totals over every window the arm controlled, across both runs."""
        if arm not in ("control", "treatment"):
            raise ValueError(f"arm must be 'control' or 'treatment', got {arm!r}")
        ws = [w for w in self.windows if w.arm == arm]
        req = sum(w.completed + w.cancelled + w.unanswered for w in ws)
        disp = sum(w.dispatches for w in ws)
        comp = sum(w.completed for w in ws)
        return {
            "windows": len(ws),
            "income": math.fsum(w.income for w in ws),
            "settled": req,
            "dispatches": disp,
            "completed": comp,
            "cr": comp / req if req else 0.0,
            "ar": disp / req if req else 0.0,
            "sr": comp / disp if disp else 0.0,
        }

    def ratios(self) -> dict[str, float]:
        """Treatment over control for each metric."""
        a, b = self.pooled("control"), self.pooled("treatment")
        return {m: (b[m] / a[m] if a[m] else math.nan) for m in METRICS}

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        wpath = out / "ab_windows.csv"
        cols = [f.name for f in dataclasses.fields(ABWindow)]
        with open(wpath, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for win in self.windows:
                w.writerow(dataclasses.asdict(win))
        jpath = out / "ab_summary.json"
        jpath.write_text(json.dumps({
            "control": self.control,
            "treatment": self.treatment,
            "flip_hours": self.flip_hours,
            "pooled": {"control": self.pooled("control"), "treatment": self.pooled("treatment")},
            "ratio": self.ratios(),
        }, indent=2, sort_keys=True) + "\n")
        return {"windows": wpath, "summary": jpath}


def _window_bounds(horizon: float, flip_s: float) -> list[tuple[float, float]]:
    n = max(1, math.ceil(horizon / flip_s - 1e-9))
    return [(k * flip_s, min((k + 1) * flip_s, horizon)) for k in range(n)]


def cmd_abtest(cfg: ExperimentConfig, control: Optional[str] = None, treatment: Optional[str] = None,
               flip_hours: Optional[float] = None, seed: Optional[int] = None) -> ABReport:
    """Time-flipping A/B test as a crossover of two runs on the same stream.

    Run 0 starts with the control, run 1 with the treatment, so each policy
    controls every window exactly once. Each policy keeps its own learning
    state, which only changes while it is active.
    """
    if cfg.ab is not None:
        control = control or cfg.ab[0]
        treatment = treatment or cfg.ab[1]
    if control is None or treatment is None:
        if len(cfg.policies) < 2:
            raise ConfigError("ab: need two policies (or the same name twice for an A/A test)")
        control = control or cfg.policies[0].name
        treatment = treatment or cfg.policies[1].name
    flip = flip_hours if flip_hours is not None else cfg.flip_hours
    if flip <= 0:
        raise ConfigError("flip_hours: must be > 0")
    seed = cfg.seed if seed is None else seed
    preset = cfg.build_preset()
    bounds = _window_bounds(cfg.horizon, flip * 3600.0)
    windows: list[ABWindow] = []
    run_totals = []
    for run in (0, 1):
        pols = [make_policy(cfg.policy(control), preset.n_cells, seed),
                make_policy(cfg.policy(treatment), preset.n_cells, seed)]
        names = [control, treatment]
        arms = ["control", "treatment"]
        first = run

        def active(k: int) -> int:
            return (first + k) % 2

        def schedule(t: float):
            k = min(int(t // (flip * 3600.0)), len(bounds) - 1)
            return pols[active(k)]

        report = Simulator(preset, cfg.sim_config(seed), _load_log(cfg)).run(pols[first], policy_schedule=schedule)
        run_totals.append(report.totals)
        for k, (t0, t1) in enumerate(bounds):
            s = report.slice_totals(t0, t1)
            windows.append(ABWindow(run, k, t0, t1, arms[active(k)], names[active(k)], s["arrivals"], s["dispatches"],
                                    s["completed"], s["cancelled"], s["unanswered"], math.fsum(s["prices"])))
    return ABReport(control, treatment, flip, windows, run_totals)


# --------------------------------------------------------------------------- sweep


@dataclass
class SweepResult:
    points: list[tuple[float, float, float, float]]
    sources: list[str]
    objectives: list[float]

    @property
    def best_index(self) -> int:
        # np.argmax returns the first maximum, so ties go to the lowest index
        return int(np.argmax(np.asarray(self.objectives)))

    @property
    def best(self) -> dict:
        i = self.best_index
        return {**dict(zip(SWEEP_PARAMS, self.points[i])), "objective": self.objectives[i], "index": i}

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trace = out / "sweep_trace.csv"
        with open(trace, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "source", *SWEEP_PARAMS, "objective"])
            for i, (p, src, obj) in enumerate(zip(self.points, self.sources, self.objectives)):
                w.writerow([i, src, *(repr(x) for x in p), repr(obj)])
        best = out / "sweep_best.json"
        best.write_text(json.dumps(self.best, indent=2, sort_keys=True) + "\n")
        return {"trace": trace, "best": best}


def sweep_points(spec: SweepSpec, base: tuple[float, float, float, float]) -> tuple[list, list]:
    """Grid points first, then seeded uniform draws; unswept parameters keep ``base``."""
    points = list(spec.grid)
    sources = ["grid"] * len(points)
    rng = np.random.default_rng(spec.seed)
    while len(points) < spec.budget:
        p = list(base)
        for i, k in enumerate(SWEEP_PARAMS):
            if k in spec.ranges:
                lo, hi = spec.ranges[k]
                p[i] = float(rng.uniform(lo, hi))
        points.append(tuple(p))
        sources.append("random")
    return points, sources


def _sweep_eval(args) -> float:
    cfg, spec, seeds = args
    return math.fsum(run_one(cfg, spec, s).totals["income"] for s in seeds) / len(seeds)


def cmd_sweep(cfg: ExperimentConfig, policy_name: Optional[str] = None) -> SweepResult:
    """Search the four boundary weights of an RLW policy; objective is mean total income over the seeds."""
    if cfg.sweep is None:
        raise ConfigError("sweep: section missing")
    spec = cfg.policy(policy_name)
    if spec.kind != "rlw":
        raise ConfigError(f"policy: sweep tunes rlw edge weights, got {spec.kind!r}")
    pc = _policy_config(spec.params)
    base = (pc.w_rew[0], pc.w_rew[1], pc.w_p[0], pc.w_p[1])
    points, sources = sweep_points(cfg.sweep, base)
    jobs = []
    for p in points:
        params = {**spec.params, "w_rew": (p[0], p[1]), "w_p": (p[2], p[3])}
        try:
            _policy_config(params)
        except ValueError as exc:
            raise ConfigError(f"sweep: invalid point {p}: {exc}") from None
        jobs.append((cfg, PolicySpec(spec.name, "rlw", params), list(cfg.seeds)))
    objectives = _map(_sweep_eval, jobs, cfg.workers)
    return SweepResult(points, sources, [float(x) for x in objectives])


# --------------------------------------------------------------------------- heatmap


def cmd_heatmap(run_dir, t: float) -> list[tuple[int, int, float]]:
    """``(row, col, value)`` of the archived value snapshot nearest ``t``; earlier snapshot on ties."""
    path = Path(run_dir) / "value_snapshots.csv"
    if not path.exists():
        raise FileNotFoundError(f"no value snapshots in {run_dir}")
    by_time: dict[float, list[tuple[int, int, float]]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            by_time.setdefault(float(rec["time"]), []).append((int(rec["row"]), int(rec["col"]), float(rec["value"])))
    if not by_time:
        raise ValueError(f"run in {run_dir} archived no value snapshots")
    times = sorted(by_time)
    horizon = math.inf
    totals = Path(run_dir) / "totals.json"
    if totals.exists():
        horizon = json.loads(totals.read_text())["horizon"]
    if not 0.0 <= t <= horizon:
        raise ValueError(f"t={t} outside the run's time range [0, {horizon}]")
    nearest = min(times, key=lambda s: (abs(s - t), s))
    return sorted(by_time[nearest])


def write_heatmap(rows: list[tuple[int, int, float]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for r, c, v in rows:
            w.writerow([r, c, repr(v)])
    return path


# --------------------------------------------------------------------------- logs


def cmd_gen_log(cfg: ExperimentConfig, path) -> Path:
    log = TripEventLog.from_preset(cfg.build_preset(), cfg.seed, cfg.horizon, cfg.price_scale)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log.write_jsonl(path)
    return path
