"""JSON problem configuration: parsing with field-level errors, serialization, and seeded randomization.

A config file holds one problem.  Keys (all optional unless noted)::

    name            str
    model           {"name": "freeflyer" | "torus_manipulator" | "double_integrator", "params": {...}}  (required)
    manifold        factor list, checked against the model (e.g. ["euclidean:6", "sphere3", "euclidean:3"])
    horizon         float (required)
    nodes           int, default 100
    R_diag          list of m positive floats
    control_lo/hi   lists of m floats (required)
    x0              initial state (required)
    waypoints       [{"time": t, "target": [...], "indices": [...]?}, ...] (required, last at the horizon)
    obstacles       [{"shape": "sphere", "center": [...], "radius": r} | {"shape": "box", "lo": [...], "hi": [...]}]
    extraction      {"kind": "position", "start": 0, "dim": 3} | {"kind": "planar_arm", "link_length": 1.0}
    d_safe, sharpness
    scp             ScpParams overrides
    variant         "escp" | "penalized_manifold" | "escp_shooting"
    seed            int
    randomize       start/goal sampler used by ``bench``, see :func:`randomize`
    check           PMP certificate thresholds, see :data:`DEFAULT_CHECK`
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .dynamics import MODEL_ZOO, make_model
from .manifold import EmbeddedManifold
from .problem import Obstacle, OcpProblem, planar_arm_extraction, position_extraction, state_waypoint
from .transcription import ScpParams

VARIANTS = ("escp", "penalized_manifold", "escp_shooting")
DEFAULT_MANIFOLD_WEIGHT = 10.0
DEFAULT_CHECK = {
    "adjoint_rel": 5e-3,  # adjoint residual <= adjoint_rel * (1 + ||gamma||_inf)
    "maximality_factor": 10.0,  # maximality gap <= maximality_factor * qp_tol
    "transversality": 1e-6,
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field or position."""


@dataclass
class ProblemConfig:
    model: dict
    horizon: float
    control_lo: list
    control_hi: list
    x0: list
    waypoints: list
    name: str = "problem"
    manifold: Optional[list] = None
    nodes: int = 100
    R_diag: Optional[list] = None
    obstacles: list = field(default_factory=list)
    extraction: Optional[dict] = None
    d_safe: float = 0.05
    sharpness: float = 20.0
    scp: dict = field(default_factory=dict)
    variant: str = "escp"
    seed: int = 0
    randomize: Optional[dict] = None
    check: dict = field(default_factory=dict)

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, raw: Any) -> "ProblemConfig":
        if not isinstance(raw, dict):
            raise ConfigError("top level must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
        for req in ("model", "horizon", "control_lo", "control_hi", "x0", "waypoints"):
            if req not in raw:
                raise ConfigError(f"missing required field '{req}'")
        cfg = cls(**copy.deepcopy(raw))
        cfg.validate()
        return cfg

    @classmethod
    def loads(cls, text: str, source: str = "<string>") -> "ProblemConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        try:
            return cls.from_dict(raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "ProblemConfig":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        return cls.loads(text, str(p))

    # -- validation ------------------------------------------------------------

    def validate(self) -> None:
        m = self.model
        if not isinstance(m, dict) or "name" not in m:
            raise ConfigError("field 'model' needs a 'name'")
        if m["name"] not in MODEL_ZOO:
            raise ConfigError(f"field 'model.name': unknown model {m['name']!r}; choose from {sorted(MODEL_ZOO)}")
        if not isinstance(m.get("params", {}), dict):
            raise ConfigError("field 'model.params' must be an object")
        _positive(self.horizon, "horizon")
        if not isinstance(self.nodes, int) or self.nodes < 2:
            raise ConfigError(f"field 'nodes' must be an integer >= 2, got {self.nodes!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"field 'variant': {self.variant!r} is not one of {list(VARIANTS)}")
        if not isinstance(self.waypoints, list) or not self.waypoints:
            raise ConfigError("field 'waypoints' must be a non-empty list")
        for i, w in enumerate(self.waypoints):
            if not isinstance(w, dict) or "time" not in w or "target" not in w:
                raise ConfigError(f"field 'waypoints[{i}]' needs 'time' and 'target'")
            t = _number(w["time"], f"waypoints[{i}].time")
            if t > self.horizon + 1e-12:
                raise ConfigError(f"field 'waypoints[{i}].time' = {t} exceeds the horizon {self.horizon}")
            if t <= 0:
                raise ConfigError(f"field 'waypoints[{i}].time' must be positive, got {t}")
        for i, o in enumerate(self.obstacles):
            if not isinstance(o, dict) or o.get("shape") not in ("sphere", "box"):
                raise ConfigError(f"field 'obstacles[{i}].shape' must be 'sphere' or 'box'")
        bad = sorted(set(self.scp) - {f.name for f in fields(ScpParams)})
        if bad:
            raise ConfigError(f"field 'scp': unknown parameter(s) {', '.join(bad)}")
        bad = sorted(set(self.check) - set(DEFAULT_CHECK))
        if bad:
            raise ConfigError(f"field 'check': unknown threshold(s) {', '.join(bad)}")
        if self.extraction is not None and self.extraction.get("kind") not in ("position", "planar_arm"):
            raise ConfigError("field 'extraction.kind' must be 'position' or 'planar_arm'")

    # -- construction ----------------------------------------------------------

    def build_problem(self) -> OcpProblem:
        try:
            sys = make_model(self.model["name"], **self.model.get("params", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field 'model.params': {exc}") from None
        if self.manifold is not None:
            try:
                declared = EmbeddedManifold.from_spec(self.manifold).spec()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"field 'manifold': {exc}") from None
            if declared != sys.manifold.spec():
                raise ConfigError(f"field 'manifold' {declared} does not match model manifold {sys.manifold.spec()}")
        m, N = sys.control_dim, sys.state_dim
        R = np.diag(_vector(self.R_diag, m, "R_diag")) if self.R_diag is not None else np.eye(m)
        lo = _vector(self.control_lo, m, "control_lo")
        hi = _vector(self.control_hi, m, "control_hi")
        x0 = _vector(self.x0, N, "x0")
        wps = []
        for i, w in enumerate(self.waypoints):
            target = _vector(w["target"], N, f"waypoints[{i}].target")
            wps.append(state_waypoint(float(w["time"]), target, w.get("indices")))
        obstacles = []
        for i, o in enumerate(self.obstacles):
            try:
                obstacles.append(Obstacle.sphere(o["center"], o["radius"]) if o["shape"] == "sphere"
                                 else Obstacle.box(o["lo"], o["hi"]))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"field 'obstacles[{i}]': {exc}") from None
        ext = None
        if self.extraction is not None:
            e = self.extraction
            if e["kind"] == "position":
                ext = position_extraction(int(e.get("start", 0)), int(e.get("dim", 3)), N)
            else:
                ext = planar_arm_extraction(sys.control_dim, float(e.get("link_length", 1.0)))
        try:
            return OcpProblem(sys, R, x0, wps, float(self.horizon), lo, hi, obstacles, ext,
                              d_safe=float(self.d_safe), sharpness=float(self.sharpness))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def scp_params(self, variant: Optional[str] = None) -> ScpParams:
        variant = variant or self.variant
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {list(VARIANTS)}")
        kw = dict(self.scp)
        if variant == "penalized_manifold":
            kw["manifold_weight"] = kw.get("manifold_weight") or DEFAULT_MANIFOLD_WEIGHT
        else:
            kw["manifold_weight"] = 0.0
        kw["polish"] = variant == "escp_shooting"
        try:
            return ScpParams(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field 'scp': {exc}") from None

    def check_thresholds(self) -> dict:
        return {**DEFAULT_CHECK, **self.check}


def _number(v, name) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ConfigError(f"field '{name}' must be a finite number, got {v!r}")
    return float(v)


def _positive(v, name) -> float:
    v = _number(v, name)
    if v <= 0:
        raise ConfigError(f"field '{name}' must be positive, got {v}")
    return v


def _vector(v, n, name) -> np.ndarray:
    if not isinstance(v, list) or len(v) != n:
        raise ConfigError(f"field '{name}' must be a list of {n} numbers")
    return np.array([_number(x, f"{name}[{i}]") for i, x in enumerate(v)])


# ---------------------------------------------------------------------------
# Randomized start/goal pairs for batch experiments
# ---------------------------------------------------------------------------


def randomize(cfg: ProblemConfig, rng: np.random.Generator, max_tries: int = 1000) -> ProblemConfig:
    """Copy of ``cfg`` with a random on-manifold start and goal.

    ``cfg.randomize`` selects the sampler:

    * ``{"kind": "torus", "clearance": c}`` draws uniform joint angles;
    * ``{"kind": "freeflyer", "lo": [...], "hi": [...], "clearance": c}`` draws
      positions in the box and uniform attitudes, at rest; the goal quaternion
      is taken in the start's hemisphere, the sign the geodesic initialization
      reaches.

    Both ends must clear every obstacle by ``clearance``; antipodal circle
    pairs (no unique geodesic) are redrawn.
    """
    spec = cfg.randomize
    if not spec:
        raise ConfigError("config has no 'randomize' section")
    prob = cfg.build_problem()
    N = prob.N
    clearance = float(spec.get("clearance", 0.0))
    kind = spec.get("kind")
    for _ in range(max_tries):
        if kind == "torus":
            k = N // 2
            a0, a1 = rng.uniform(-np.pi, np.pi, k), rng.uniform(-np.pi, np.pi, k)
            gap = np.abs((a1 - a0 + np.pi) % (2 * np.pi) - np.pi)
            if np.any(gap > np.pi - 0.05):
                continue
            x0 = np.stack([np.cos(a0), np.sin(a0)], axis=-1).ravel()
            xg = np.stack([np.cos(a1), np.sin(a1)], axis=-1).ravel()
        elif kind == "freeflyer":
            lo, hi = np.asarray(spec["lo"], float), np.asarray(spec["hi"], float)
            x0, xg = np.zeros(N), np.zeros(N)
            for x in (x0, xg):
                x[0:3] = rng.uniform(lo, hi)
                q = rng.normal(size=4)
                q /= np.linalg.norm(q)
                x[6:10] = q
            # same attitude, but the representative the geodesic initialization reaches
            if x0[6:10] @ xg[6:10] < 0:
                xg[6:10] *= -1.0
        else:
            raise ConfigError(f"field 'randomize.kind': unknown sampler {kind!r}")
        if prob.obstacles and np.min(prob.clearance(np.stack([x0, xg]))) < clearance:
            continue
        out = copy.deepcopy(cfg)
        out.x0 = x0.tolist()
        out.waypoints = [dict(w) for w in cfg.waypoints[:-1]] + [{**cfg.waypoints[-1], "target": xg.tolist()}]
        return out
    raise ConfigError(f"could not sample a collision-free start/goal pair in {max_tries} tries")


def bundled_config_dir() -> Path:
    return Path(__file__).resolve().parent / "configs"
