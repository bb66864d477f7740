"""Scenario runner: collect, fit, run and compare.

A scenario is one JSON object.  Every section is optional and falls back to
the defaults printed by ``--show-config``::

    {
      "plant": "srb",                   # or "lti"
      "duration": 20.0, "seed": 0,
      "swarm": {...},                   # SwarmConfig fields (srb)
      "lti": {...},                     # LtiSpec fields (lti)
      "excitation": {...},              # ExcitationConfig fields (srb)
      "tracking": {...},                # TrackingGains fields (srb)
      "planner": {...},                 # PlannerConfig fields
      "reference": [{"t": 0, "v_x_des": 0.5}],
      "events": [{"t": 8, "kind": "payload", "agents": [1], "mass": 3.1}],
      "data": null, "model": null
    }

``data`` and ``model`` point at files written by earlier ``collect`` and
``fit`` runs (relative paths resolve against the config file).  When they
are absent the run collects and fits on the fly into the output directory.

Each closed-loop run writes ``samples.csv`` (per-sample outputs, references,
planned and applied inputs, stance flags), ``rounds.csv`` (per-round solve
statistics and consumed packet rounds), the per-agent planner logs, a state
trace for the swarm, ``run.json`` and ``metrics.json``.  The metrics are
computed from the written logs only, so ``metrics_from_dir`` recomputes them
offline.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .behavioral import TrajectoryData, split_past_future
from .datagen import ExcitationConfig, audit, collect, write_audit
from .errors import ConfigError, SimulationDivergence, SolverFailure
from .planner import (PlannerConfig, RecedingHorizonPlanner, ReferenceCommand, friction_margin,
                      nominal_input)
from .plant.lti import LtiPlant, coupled_plant, lti_step, random_stable_plant
from .plant.srb import N_LEGS, OUTPUT_NAMES, GaitConfig, Swarm, SwarmConfig, contact_schedule
from .plant.tracking import TrackingGains, TrackingLayer, hold_reference
from .predictor import TransitionMatrix, fit_transition

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DIVERGED = 0, 2, 3, 4


# -- scenario ------------------------------------------------------------------


@dataclass
class LtiSpec:
    """Coupled LTI testbed: ``n_agents`` random stable subsystems.

    ``coupling`` scales the off-diagonal state blocks (0 gives a decoupled
    plant).  Data are ``data_length`` samples of i.i.d. uniform inputs of
    half-width ``amplitude``; ``measurement_noise`` is the standard
    deviation of Gaussian noise added to recorded outputs only.
    """

    n_agents: int = 2
    n: int = 3
    m: int = 2
    p: int = 2
    coupling: float = 0.0
    plant_seed: int = 0
    radius: float = 0.8
    data_length: int = 600
    amplitude: float = 1.0
    measurement_noise: float = 0.0

    def build(self) -> LtiPlant:
        rng = np.random.default_rng(self.plant_seed)
        subs = [random_stable_plant(rng, self.n, self.m, self.p, self.radius)
                for _ in range(self.n_agents)]
        return coupled_plant(subs, self.coupling, rng)

    @property
    def agent_dims(self):
        return [(self.m, self.p)] * self.n_agents


@dataclass
class Event:
    """Payload drop or impulsive push at time ``t`` on ``agents``."""

    t: float
    kind: str
    agents: list = field(default_factory=lambda: [0])
    mass: float = 0.0
    offset: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    dv: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def __post_init__(self):
        if self.kind not in ("payload", "push"):
            raise ConfigError(f"unknown event kind {self.kind!r}")


@dataclass
class Scenario:
    plant: str = "srb"
    duration: float = 20.0
    seed: int = 0
    swarm: dict = field(default_factory=dict)
    terrain_max: float = 0.0
    lti: dict = field(default_factory=dict)
    excitation: dict = field(default_factory=dict)
    tracking: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)
    reference: list = field(default_factory=lambda: [{"t": 0.0, "v_x_des": 0.5}])
    events: list = field(default_factory=list)
    data: str | None = None
    model: str | None = None
    svd_cutoff: float = 1e-8
    n_hat: int | None = None
    metrics_skip: float = 2.0
    bands: dict = field(default_factory=lambda: {"z": 0.03, "vx": 0.1})
    base_dir: str = "."

    # -- typed views -------------------------------------------------------

    def swarm_config(self) -> SwarmConfig:
        kw = dict(self.swarm)
        if isinstance(kw.get("gait"), dict):
            kw["gait"] = GaitConfig(**kw["gait"])
        return SwarmConfig(**kw)

    def lti_spec(self) -> LtiSpec:
        return LtiSpec(**self.lti)

    def excitation_config(self) -> ExcitationConfig:
        kw = {"seed": self.seed, **self.excitation}
        return ExcitationConfig(**kw)

    def tracking_gains(self) -> TrackingGains:
        return TrackingGains(**self.tracking)

    def planner_config(self, mode: str | None = None) -> PlannerConfig:
        kw = dict(self.planner)
        if self.plant == "lti":
            spec = self.lti_spec()
            kw.setdefault("friction", False)
            kw.setdefault("output_lb", [None] * spec.p)
            kw.setdefault("output_ub", [None] * spec.p)
            kw.setdefault("Q", [1.0] * spec.p)
            kw.setdefault("R", [1e-4] * spec.m)
            # The Hankel-equality program of DeePC is too ill-conditioned
            # for first-order iterations to reach 1e-9.
            tol = 1e-7 if (mode or kw.get("mode")) == "deepc" else 1e-9
            kw.setdefault("feas_tol", tol)
            kw.setdefault("opt_tol", tol)
            kw.setdefault("max_iterations", 20000)
        else:
            # Plain Jacobi iteration over rigidly coupled agents overshoots;
            # averaging with the previous plan at 1/n keeps it contractive.
            kw.setdefault("relaxation", 1.0 / max(1, self.n_agents))
        if mode is not None:
            kw["mode"] = mode
        return PlannerConfig.from_dict(kw)

    @property
    def n_agents(self) -> int:
        if self.plant == "lti":
            return self.lti_spec().n_agents
        return int(self.swarm.get("n_agents", SwarmConfig.n_agents))

    @property
    def agent_dims(self):
        if self.plant == "lti":
            return self.lti_spec().agent_dims
        return [(3 * N_LEGS, 6)] * self.n_agents

    def event_list(self) -> list[Event]:
        return sorted((Event(**e) for e in self.events), key=lambda e: e.t)

    def command_at(self, t: float) -> dict:
        """Reference entry active at time ``t`` (zero-order hold)."""
        active = self.reference[0]
        for entry in self.reference:
            if entry["t"] <= t + 1e-12:
                active = entry
        return active

    def reference_output(self, t: float) -> np.ndarray:
        """Per-sample output reference of one agent at time ``t``."""
        entry = {k: v for k, v in self.command_at(t).items() if k != "t"}
        if self.plant == "lti":
            return np.asarray(entry["level"], dtype=float)
        return ReferenceCommand(**entry).output()

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    # -- validation --------------------------------------------------------

    def validate(self):
        if self.plant not in ("srb", "lti"):
            raise ConfigError(f"unknown plant {self.plant!r}")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if not self.reference:
            raise ConfigError("reference timeline is empty")
        times = [e.get("t", None) for e in self.reference]
        if any(t is None for t in times) or times != sorted(times) or times[0] > 0:
            raise ConfigError("reference timeline must be sorted and start at t = 0")
        try:
            for entry in self.reference:
                self.reference_output(entry["t"])
            cfg = self.planner_config()
            if self.plant == "lti":
                spec = self.lti_spec()
                if len(self.reference_output(0.0)) != spec.p:
                    raise ConfigError("lti reference level needs one value per output")
                if spec.data_length < 1:
                    raise ConfigError("lti data_length must be positive")
            else:
                self.swarm_config()
                self.excitation_config()
                self.tracking_gains()
            events = self.event_list()
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.plant == "lti" and events:
            raise ConfigError("events are only defined for the swarm plant")
        for e in events:
            if not 0 <= e.t <= self.duration:
                raise ConfigError(f"event at t={e.t} lies outside the run")
            if any(not 0 <= a < self.n_agents for a in e.agents):
                raise ConfigError(f"event at t={e.t} names an unknown agent")
        if cfg.sample_rate <= 0:
            raise ConfigError("sample rate must be positive")
        for name in ("data", "model"):
            p = self.resolve(getattr(self, name))
            if p is not None:
                probe = p.with_suffix(".json")
                if not probe.exists():
                    raise ConfigError(f"{name} file {probe} does not exist")
        return self


def load_scenario(path: str | Path | None = None, seed: int | None = None,
                  overrides: dict | None = None) -> Scenario:
    """Parse and validate a scenario file (``None`` gives the defaults)."""
    raw: dict = {}
    base = "."
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        base = str(path.parent)
    raw = {**raw, **(overrides or {})}
    known = {f.name for f in fields(Scenario)} - {"base_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    if seed is not None:
        raw["seed"] = seed
    try:
        scn = Scenario(**raw, base_dir=base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if scn.plant == "lti" and "reference" not in raw:
        scn.reference = [{"t": 0.0, "level": [1.0] * scn.lti_spec().p}]
    return scn.validate()


def resolved_config(scn: Scenario, mode: str | None = None) -> dict:
    """The scenario with every section expanded to its full set of fields."""
    d = scn.to_dict()
    d["planner"] = scn.planner_config(mode).to_dict()
    if scn.plant == "lti":
        d["lti"] = asdict(scn.lti_spec())
    else:
        d["swarm"] = asdict(scn.swarm_config())
        d["excitation"] = asdict(scn.excitation_config())
        d["tracking"] = asdict(scn.tracking_gains())
    return d


def default_config(plant: str = "srb") -> dict:
    """Fully expanded default scenario, including planner defaults."""
    return resolved_config(load_scenario(overrides={"plant": plant}))


# -- data and model ------------------------------------------------------------


def collect_data(scn: Scenario) -> TrajectoryData:
    """Run the excitation experiment of the scenario's plant."""
    cfg = scn.planner_config()
    n_hat = scn.n_hat
    if scn.plant == "lti":
        spec = scn.lti_spec()
        plant = spec.build()
        rng = np.random.default_rng(scn.seed)
        u = rng.uniform(-spec.amplitude, spec.amplitude, size=(spec.data_length, plant.m))
        y, _ = plant.simulate(u)
        if spec.measurement_noise > 0:
            y = y + rng.normal(0.0, spec.measurement_noise, size=y.shape)
        data = TrajectoryData(u, y, sample_rate=cfg.sample_rate, agent_dims=spec.agent_dims)
        n_hat = spec.n if n_hat is None else n_hat
        data.meta["audit"] = audit(data, cfg.T_ini, cfg.N, n_hat * spec.n_agents)
        data.meta["lti"] = asdict(spec)
        return data
    swarm = Swarm(scn.swarm_config(), seed=scn.seed, terrain_max=scn.terrain_max)
    return collect(swarm, scn.excitation_config(), cfg.T_ini, cfg.N,
                   12 if n_hat is None else n_hat)


def fit_model(scn: Scenario, data: TrajectoryData) -> TransitionMatrix:
    """Fit the transition matrix, warning when the data are not exciting."""
    cfg = scn.planner_config()
    n_hat = scn.n_hat or (scn.lti_spec().n if scn.plant == "lti" else 12)
    report = audit(data, cfg.T_ini, cfg.N, n_hat * data.n_agents)
    if not report["pe_ok"]:
        log.warning("data are not persistently exciting of order %d (achieved %d); "
                    "the fitted model may be unreliable",
                    report["pe_order_required"], report["pe_order_achieved"])
    blocks = split_past_future(data, cfg.T_ini, cfg.N)
    tm = fit_transition(blocks, scn.svd_cutoff)
    tm.meta["pe_ok"] = bool(report["pe_ok"])
    return tm


def cmd_collect(scn: Scenario, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    data = collect_data(scn)
    path = out / "data.csv"
    data.save(path)
    write_audit(data.meta["audit"], out / "audit.json")
    return path


def _data_for(scn: Scenario, out: Path) -> TrajectoryData:
    p = scn.resolve(scn.data)
    if p is not None:
        return TrajectoryData.load(p)
    cached = out / "data.csv"
    if cached.exists() and cached.with_suffix(".json").exists():
        return TrajectoryData.load(cached)
    return TrajectoryData.load(cmd_collect(scn, out))


def cmd_fit(scn: Scenario, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    tm = fit_model(scn, _data_for(scn, out))
    path = out / "model"
    tm.save(path)
    return path.with_suffix(".json")


def _model_for(scn: Scenario, out: Path) -> TransitionMatrix:
    p = scn.resolve(scn.model)
    if p is not None:
        return TransitionMatrix.load(p)
    cached = out / "model.json"
    if cached.exists():
        return TransitionMatrix.load(cached)
    return TransitionMatrix.load(cmd_fit(scn, out))


# -- closed loop -----------------------------------------------------------------


class _SwarmLoop:
    """Swarm plant behind the tracking layer, fed planned forces."""

    def __init__(self, scn: Scenario):
        self.cfg = scn.swarm_config()
        self.swarm = Swarm(self.cfg, seed=scn.seed, terrain_max=scn.terrain_max)
        self.layer = TrackingLayer(scn.tracking_gains())
        self.hold = hold_reference(self.cfg.n_agents, scn.excitation_config().z_des)
        self.events = scn.event_list()
        self.n = self.cfg.n_agents
        self.y = self.swarm.outputs().ravel()
        self.traces = [[] for _ in range(self.n)]

    @property
    def k(self) -> int:
        return self.swarm.k

    def contacts(self, k0: int, steps: int):
        return [contact_schedule(k0, steps, self.cfg.sample_rate, self.cfg.gait)] * self.n

    def u_des(self, k0: int, flags):
        return [nominal_input(f, self.cfg.mass, self.cfg.g0)[0] for f in flags]

    def _fire_events(self):
        rate = self.cfg.sample_rate
        while self.events and int(round(self.events[0].t * rate)) <= self.swarm.k:
            e = self.events.pop(0)
            for a in e.agents:
                if e.kind == "payload":
                    self.swarm.add_payload(a, e.mass, e.offset)
                else:
                    self.swarm.push(a, e.dv)
            log.info("t=%.2f: %s on agents %s", self.swarm.t, e.kind, e.agents)

    def step(self, u):
        """Apply one sample; returns ``(y_before, applied, stance)``."""
        self._fire_events()
        stance = self.swarm.contacts()
        applied = self.layer.apply(self.swarm, u, self.hold, self.cfg.mu).ravel()
        y0 = self.y
        self.y = self.swarm.step_sample(applied).ravel()
        for i in range(self.n):
            self.traces[i].append(self.swarm.trace_row(i))
        return y0, applied, np.tile(stance, self.n).astype(float)

    def write_traces(self, out: Path):
        header = ("t,px,py,pz,vx,vy,vz,roll,pitch,yaw,wx,wy,wz,"
                  + ",".join(f"grf{k}" for k in range(3 * N_LEGS)) + ",jfx,jfy,jfz")
        for i, rows in enumerate(self.traces):
            np.savetxt(out / f"state_agent{i}.csv", np.array(rows), delimiter=",",
                       header=header, comments="", fmt="%.17g")


class _LtiLoop:
    def __init__(self, scn: Scenario):
        self.spec = scn.lti_spec()
        self.plant = self.spec.build()
        self.k = 0

    def step(self, u):
        y, _ = lti_step(self.plant, u)
        self.k += 1
        return y, np.asarray(u, float).ravel(), np.zeros(0)


@dataclass
class RunResult:
    metrics: dict
    log: dict
    planner: RecedingHorizonPlanner


def run_closed_loop(scn: Scenario, tm: TransitionMatrix | None = None, out: Path | None = None,
                    mode: str | None = None, data: TrajectoryData | None = None,
                    dump_qp: bool = False) -> RunResult:
    """Simulate one receding-horizon run and write its logs into ``out``.

    Raises:
        SimulationDivergence: The plant left its valid region (logs up to
            that point are still written when ``out`` is given).
    """
    cfg = scn.planner_config(mode)
    dims = scn.agent_dims
    n = len(dims)
    N, rate = cfg.N, cfg.sample_rate
    srb = scn.plant == "srb"
    loop = _SwarmLoop(scn) if srb else _LtiLoop(scn)
    blocks = None
    if cfg.mode == "deepc":
        if data is None:
            raise ConfigError("deepc mode needs recorded data")
        blocks = split_past_future(data, cfg.T_ini, cfg.N)

    def reference(t, a):
        return np.tile(scn.reference_output(t), N)

    planner = RecedingHorizonPlanner(
        cfg, tm=tm, blocks=blocks, agent_dims=dims, reference=reference,
        contacts=(lambda k0: loop.contacts(k0, N)) if srb else None,
        u_des=loop.u_des if srb else None,
        dump_dir=(out / "qp") if (dump_qp and out is not None) else None)
    m_tot = sum(m for m, _ in dims)
    rows = {"t": [], "y": [], "y_ref": [], "u_plan": [], "u_applied": [], "stance": []}

    def apply(u):
        t = loop.k / rate
        y0, applied, stance = loop.step(u)
        rows["t"].append(t)
        rows["y"].append(y0)
        rows["y_ref"].append(np.tile(scn.reference_output(t), n))
        rows["u_plan"].append(np.asarray(u, float).ravel())
        rows["u_applied"].append(applied)
        rows["stance"].append(stance)
        return y0

    total = int(round(scn.duration * rate))
    diverged = None
    try:
        # Warm-up: nominal inputs (zero for LTI) fill the windows.
        us, ys = [], []
        for _ in range(cfg.T_ini):
            if srb:
                flags = loop.contacts(loop.k, 1)
                u = np.concatenate(loop.u_des(loop.k, flags))
            else:
                u = np.zeros(m_tot)
            us.append(u)
            ys.append(apply(u))
        planner.record(np.array(us), np.array(ys))
        while loop.k < total:
            # The last round is cut short at the end of the run.
            U = planner.plan()[:total - loop.k]
            ys = [apply(u) for u in U]
            planner.attach_measurements(np.array(ys))
            planner.record(U, np.array(ys))
    except SimulationDivergence as exc:
        diverged = exc
    run_log = {k: np.array(v) for k, v in rows.items()}
    run_log["rounds"] = _round_rows(planner)
    run_log["info"] = {"plant": scn.plant, "mode": cfg.mode, "agent_dims": dims,
                       "sample_rate": rate, "n_apply": cfg.n_apply, "mu": cfg.mu,
                       "metrics_skip": scn.metrics_skip, "bands": scn.bands,
                       "events": [e.t for e in scn.event_list()],
                       "warmup": cfg.T_ini, "diverged": diverged is not None}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_run_log(run_log, out)
        planner.write_logs(out)
        if srb:
            loop.write_traces(out)
        (out / "config.json").write_text(json.dumps(scn.to_dict(), indent=2))
    metrics = compute_metrics(run_log)
    if out is not None:
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    if diverged is not None:
        diverged.partial = RunResult(metrics, run_log, planner)
        raise diverged
    return RunResult(metrics, run_log, planner)


def _round_rows(planner: RecedingHorizonPlanner) -> list[dict]:
    out = []
    for r in planner.records:
        consumed = [pr for _, pr in r.packet_rounds]
        out.append({"round": r.round, "t": r.t, "agent": r.agent, "status": r.status,
                    "solve_ms": r.solve_ms, "iterations": r.iterations,
                    "fallback": int(r.fallback), "box_relaxed": int(r.box_relaxed),
                    "n_packets": len(consumed),
                    "packet_round_min": min(consumed) if consumed else r.round - 1,
                    "packet_round_max": max(consumed) if consumed else r.round - 1})
    return out


# -- logs and metrics ------------------------------------------------------------


_ROUND_COLS = ("round", "t", "agent", "status", "solve_ms", "iterations", "fallback",
               "box_relaxed", "n_packets", "packet_round_min", "packet_round_max")


def write_run_log(run_log: dict, out: Path):
    n_y, n_u = run_log["y"].shape[1], run_log["u_plan"].shape[1]
    n_s = run_log["stance"].shape[1] if run_log["stance"].ndim == 2 else 0
    header = (["t"] + [f"y{i}" for i in range(n_y)] + [f"y_ref{i}" for i in range(n_y)]
              + [f"u_plan{i}" for i in range(n_u)] + [f"u_applied{i}" for i in range(n_u)]
              + [f"stance{i}" for i in range(n_s)])
    parts = [run_log["t"][:, None], run_log["y"], run_log["y_ref"], run_log["u_plan"],
             run_log["u_applied"]]
    if n_s:
        parts.append(run_log["stance"])
    np.savetxt(out / "samples.csv", np.hstack(parts), delimiter=",", header=",".join(header),
               comments="", fmt="%.17g")
    lines = [",".join(_ROUND_COLS)]
    for r in run_log["rounds"]:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c])
                              for c in _ROUND_COLS))
    (out / "rounds.csv").write_text("\n".join(lines) + "\n")
    (out / "run.json").write_text(json.dumps(run_log["info"], indent=2))


def read_run_log(out: Path) -> dict:
    """Inverse of ``write_run_log``."""
    out = Path(out)
    info = json.loads((out / "run.json").read_text())
    with (out / "samples.csv").open() as fh:
        header = fh.readline().strip().split(",")
    table = np.loadtxt(out / "samples.csv", delimiter=",", skiprows=1, ndmin=2)
    cols = {name: i for i, name in enumerate(header)}

    def grab(prefix):
        idx = [i for name, i in cols.items()
               if name.startswith(prefix) and name[len(prefix):].isdigit()]
        return table[:, idx] if idx else np.zeros((table.shape[0], 0))

    rounds = []
    lines = (out / "rounds.csv").read_text().splitlines()
    for line in lines[1:]:
        vals = line.split(",")
        r = dict(zip(_ROUND_COLS, vals))
        for c in _ROUND_COLS:
            if c == "status":
                continue
            r[c] = float(r[c]) if c in ("t", "solve_ms") else int(r[c])
        rounds.append(r)
    return {"t": table[:, 0], "y": grab("y"), "y_ref": grab("y_ref"),
            "u_plan": grab("u_plan"), "u_applied": grab("u_applied"),
            "stance": grab("stance"), "rounds": rounds, "info": info}


def metrics_from_dir(out: Path) -> dict:
    return compute_metrics(read_run_log(out))


def _recovery_time(t, inside, t_event, t_next=np.inf) -> float:
    """Seconds after ``t_event`` until the signal re-enters the band and stays
    there up to ``t_next``; ``inf`` if it never does."""
    window = (t >= t_event - 1e-12) & (t < t_next - 1e-12)
    bad = np.flatnonzero(window & ~inside)
    if bad.size == 0:
        return 0.0
    last = bad[-1]
    if last + 1 >= len(t) or not window[last + 1]:
        return float("inf")
    return float(t[last + 1] - t_event)


def compute_metrics(run_log: dict) -> dict:
    """Tracking, constraint, timing and protocol metrics of one run log."""
    info = run_log["info"]
    dims = [tuple(d) for d in info["agent_dims"]]
    n = len(dims)
    t = run_log["t"]
    y, y_ref = run_log["y"], run_log["y_ref"]
    steady = t >= info["metrics_skip"] - 1e-12
    po = np.concatenate([[0], np.cumsum([p for _, p in dims])]).astype(int)
    srb = info["plant"] == "srb"
    names = OUTPUT_NAMES if srb else [f"y{i}" for i in range(max(p for _, p in dims))]
    err = y - y_ref
    per_agent = []
    for a in range(n):
        e = err[steady, po[a]:po[a + 1]]
        ya = y[steady, po[a]:po[a + 1]]
        per_agent.append({
            "rmse": {names[c]: float(np.sqrt(np.mean(e[:, c] ** 2))) if e.size else None
                     for c in range(e.shape[1])},
            "max_abs_error": {names[c]: float(np.max(np.abs(e[:, c]))) if e.size else None
                              for c in range(e.shape[1])},
            "mean": {names[c]: float(np.mean(ya[:, c])) if ya.size else None
                     for c in range(ya.shape[1])},
        })
    metrics = {"plant": info["plant"], "mode": info["mode"], "samples": int(t.size),
               "duration": float(t[-1] + 1 / info["sample_rate"]) if t.size else 0.0,
               "diverged": bool(info.get("diverged", False)), "agents": per_agent}
    rounds = run_log["rounds"]
    ms = np.array([r["solve_ms"] for r in rounds], dtype=float)
    metrics["solve_ms"] = {
        "count": int(ms.size),
        "p50": float(np.percentile(ms, 50)) if ms.size else None,
        "p95": float(np.percentile(ms, 95)) if ms.size else None,
        "max": float(ms.max()) if ms.size else None,
    }
    fallback_rounds = sorted({r["round"] for r in rounds if r["fallback"]})
    metrics["solver_failures"] = len(fallback_rounds)
    metrics["failed_rounds"] = fallback_rounds
    metrics["box_relaxed_rounds"] = len({r["round"] for r in rounds if r["box_relaxed"]})
    metrics["rounds"] = len({r["round"] for r in rounds})
    if info["mode"] == "distributed":
        metrics["protocol_violations"] = int(sum(
            1 for r in rounds
            if r["n_packets"] != n - 1 or r["packet_round_min"] != r["round"] - 1
            or r["packet_round_max"] != r["round"] - 1))
    if srb:
        u = run_log["u_applied"].reshape(t.size, n, N_LEGS, 3)
        stance = run_log["stance"].reshape(t.size, n, N_LEGS).astype(bool)
        metrics["friction_margin_min"] = friction_margin(u, stance, info["mu"])
        swing = np.where(~stance[..., None], np.abs(u), 0.0)
        metrics["swing_force_max"] = float(swing.max()) if swing.size else 0.0
        bands = info["bands"]
        z_err = np.abs(err.reshape(t.size, n, -1)[:, :, 0]).max(axis=1)
        vx_err = np.abs(err.reshape(t.size, n, -1)[:, :, 1]).max(axis=1)
        inside = (z_err <= bands["z"]) & (vx_err <= bands["vx"])
        metrics["band"] = {
            "z_max_abs_error": float(z_err[steady].max()) if steady.any() else None,
            "vx_max_abs_error": float(vx_err[steady].max()) if steady.any() else None,
            "all_steady_in_band": bool(inside[steady].all()),
        }
        ev = list(info["events"])
        metrics["recovery_s"] = [_recovery_time(t, inside, te, tn)
                                 for te, tn in zip(ev, ev[1:] + [np.inf])]
    else:
        tail = t >= t[0] + 0.8 * (t[-1] - t[0]) if t.size else steady
        amp = float(np.max(np.abs(y_ref))) if y_ref.size else 1.0
        metrics["reference_amplitude"] = amp
        metrics["steady_state_error_rel"] = (float(np.max(np.abs(err[tail]))) / max(amp, 1e-12)
                                             if t.size else None)
    return metrics


def cmd_run(scn: Scenario, out: Path, dump_qp: bool = False, mode: str | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    cfg = scn.planner_config(mode)
    tm = None
    data = None
    if cfg.mode == "deepc":
        data = _data_for(scn, out)
    else:
        tm = _model_for(scn, out)
    return run_closed_loop(scn, tm, out, mode=mode, data=data, dump_qp=dump_qp).metrics


def compare_runs(a: dict, b: dict, n_apply: int) -> dict:
    """Per-round planned-input deviation and per-sample output deviation."""
    k = min(a["t"].size, b["t"].size)
    du = np.abs(a["u_plan"][:k] - b["u_plan"][:k]).max(axis=1)
    warm = a["info"]["warmup"]
    per_round = [float(du[s:s + n_apply].max()) for s in range(warm, k, n_apply)]
    dy = np.abs(a["y"][:k] - b["y"][:k])
    amp = float(np.max(np.abs(a["y_ref"]))) if a["y_ref"].size else 1.0
    return {"per_round_input_deviation": per_round,
            "max_input_deviation": max(per_round) if per_round else 0.0,
            "max_output_deviation": float(dy.max()) if dy.size else 0.0,
            "max_output_deviation_rel": float(dy.max()) / max(amp, 1e-12) if dy.size else 0.0}


def cmd_compare(scn: Scenario, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    tm = _model_for(scn, out)
    runs = {}
    for mode in ("centralized", "distributed"):
        runs[mode] = run_closed_loop(scn, tm, out / mode, mode=mode)
    report = compare_runs(runs["centralized"].log, runs["distributed"].log,
                          scn.planner_config().n_apply)
    report["centralized"] = runs["centralized"].metrics
    report["distributed"] = runs["distributed"].metrics
    (out / "compare.json").write_text(json.dumps(report, indent=2))
    return report


# -- CLI -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddpc-swarm",
        description="Collect data, fit transition matrices and run data-driven "
                    "predictive control scenarios.")
    parser.add_argument("command", nargs="?", choices=("collect", "fit", "run", "compare"))
    parser.add_argument("--config", type=Path, help="scenario JSON file")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    parser.add_argument("--mode", choices=("centralized", "distributed", "deepc"),
                        help="override the planner mode for 'run'")
    parser.add_argument("--dump-qp", action="store_true",
                        help="write every QP of the run under <out>/qp")
    parser.add_argument("--show-config", action="store_true",
                        help="print the resolved configuration with defaults and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        scn = load_scenario(args.config, seed=args.seed)
        if args.show_config:
            print(json.dumps(resolved_config(scn, args.mode), indent=2))
            return EXIT_OK
        if args.command is None:
            raise ConfigError("a command is required unless --show-config is given")
        if args.command == "collect":
            print(cmd_collect(scn, args.out))
        elif args.command == "fit":
            print(cmd_fit(scn, args.out))
        elif args.command == "run":
            metrics = cmd_run(scn, args.out, args.dump_qp, args.mode)
            print(json.dumps(_summary(metrics), indent=2))
            if metrics["solver_failures"]:
                return EXIT_SOLVER
        else:
            report = cmd_compare(scn, args.out)
            print(json.dumps({k: v for k, v in report.items()
                              if k not in ("per_round_input_deviation", "centralized",
                                           "distributed")}, indent=2))
            if report["centralized"]["solver_failures"] or report["distributed"]["solver_failures"]:
                return EXIT_SOLVER
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except SimulationDivergence as exc:
        print(f"plant diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _summary(metrics: dict) -> dict:
    keep = ("plant", "mode", "duration", "solver_failures", "box_relaxed_rounds", "solve_ms",
            "protocol_violations", "friction_margin_min", "swing_force_max", "band",
            "recovery_s", "steady_state_error_rel")
    return {k: metrics[k] for k in keep if k in metrics}


def scenario_copy(scn: Scenario, **changes) -> Scenario:
    """Deep copy of ``scn`` with top-level fields replaced."""
    new = copy.deepcopy(scn)
    for k, v in changes.items():
        setattr(new, k, v)
    return new.validate()
