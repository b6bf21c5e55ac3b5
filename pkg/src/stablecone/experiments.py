"""Experiment driver: validated JSON configs, dispatch, CSV/JSON outputs, manifests.

Each experiment writes its CSV tables and a ``summary.json`` into the output
directory, then a ``manifest.json`` listing every output with its SHA-256.
Outputs depend only on (config, seed): timestamps live in the manifest only,
and the simulation code is independent of the thread count.

CSV conventions: header row, ',' separator, '.' decimal point, LF line
endings, floats in shortest round-trip form (``repr``).
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import datetime as _dt
import difflib
import hashlib
import io
import json
import math
import os
from importlib import resources

import jsonschema
import numpy as np

from . import __version__
from .compensator import (CompensatorConfig, default_epsilon, drift_table_rows, envelope_check,
                          error_drift_check, u_table)
from .cone import ConeSpec, axis_angle, contains
from .martin import (beta_from_survival, eval_martin_halfspace, estimate_beta,
                     estimate_martin_profile, estimate_martin_ratio, halfspace_martin)
from .meander import (endpoint_stats, invariance_check, ks_two_sample, median_radius_ci,
                      sample_conditioned, tightness_check)
from .rng import SCHEME_ID, Stream
from .stable import (IncrementLaw, StableParams, poisson_mass, poisson_normalization,
                     sample_ball_exit)
from .stats import Z95
from .walk import (WalkConfig, estimate_V, estimate_kappa, compare_kappa, geometric_horizons,
                   harmonicity_residual, simulate_walks, survival_curve, survival_from_tau)

EXPERIMENTS = ("survival", "beta", "martin-profile", "v-estimate", "kappa", "compensator",
               "meander-invariance", "tightness", "kernel-verify")


# ----------------------------------------------------------------------------
# configuration

class ConfigError(ValueError):
    """Invalid configuration; carries the JSON position or the field path."""

    def __init__(self, message, line=None, col=None, path=()):
        super().__init__(message)
        self.line = line
        self.col = col
        self.path = tuple(path)


def load_schema() -> dict:
    text = resources.files("stablecone").joinpath("schema/experiment.schema.json").read_text()
    return json.loads(text)


def _fill_defaults(schema: dict, doc: dict) -> dict:
    out = dict(doc)
    for key, sub in schema.get("properties", {}).items():
        if key not in out and "default" in sub:
            out[key] = copy.deepcopy(sub["default"])
        if sub.get("type") == "object" and isinstance(out.get(key), dict):
            out[key] = _fill_defaults(sub, out[key])
    return out


def _explain(err: jsonschema.ValidationError, schema: dict) -> ConfigError:
    path = list(err.absolute_path)
    where = "/".join(str(p) for p in path) or "<root>"
    if path == ["alpha"] and err.validator == "not":
        return ConfigError("alpha = 1 is excluded (alpha must differ from 1)", path=path)
    if err.validator == "additionalProperties":
        sub = schema
        for p in path:
            sub = sub["properties"][p]
        known = list(sub.get("properties", {}))
        extra = sorted(set(err.instance) - set(known))
        parts = []
        for k in extra:
            near = difflib.get_close_matches(k, known, n=1, cutoff=0.0)
            parts.append(f"unknown key {k!r} at {where}" +
                         (f"; nearest known key: {near[0]!r}" if near else ""))
        return ConfigError("; ".join(parts), path=path)
    return ConfigError(f"invalid value at {where}: {err.message}", path=path)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """A validated configuration with every default filled in."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def experiment(self) -> str:
        return self.data["experiment"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def params(self) -> StableParams:
        return StableParams(float(self.data["alpha"]), int(self.data["dim"]))

    @property
    def cone(self) -> ConeSpec:
        return ConeSpec(int(self.data["dim"]), float(self.data["theta"]))

    @property
    def law(self) -> IncrementLaw:
        if self.data["law"] == "perturbed":
            return IncrementLaw.perturbed(self.params, self.data["eps_pert"])
        return IncrementLaw.exact(self.params)

    @property
    def start(self) -> np.ndarray:
        s = self.data["start"]
        return self.cone.axis if s is None else np.asarray(s, dtype=float)

    @property
    def horizons(self) -> np.ndarray:
        h = self.data["horizons"]
        return geometric_horizons(h["lo"], h["hi"], h["ratio"])

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    @property
    def digest(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        doc = copy.deepcopy(self.data)
        doc.update({k: v for k, v in kw.items() if v is not None})
        return config_from_dict(doc)


def config_from_dict(doc) -> ExperimentConfig:
    """Validate a parsed document and fill defaults."""
    schema = load_schema()
    if not isinstance(doc, dict):
        raise ConfigError("the configuration must be a JSON object")
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), e.path))
    if errors:
        raise _explain(errors[0], schema)
    data = _fill_defaults(schema, doc)
    if data["start"] is not None and len(data["start"]) != data["dim"]:
        raise ConfigError(f"start has {len(data['start'])} coordinates, dim is {data['dim']}",
                          path=["start"])
    try:
        cfg = ExperimentConfig(data)
        cfg.params
        cfg.cone
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not contains(cfg.cone, cfg.start):
        raise ConfigError(f"start {list(cfg.start)} is not inside the cone", path=["start"])
    h = data["horizons"]
    if h["hi"] < h["lo"]:
        raise ConfigError("horizons.hi must be at least horizons.lo", path=["horizons", "hi"])
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read, parse and validate a JSON configuration file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}", line=exc.lineno, col=exc.colno) from exc
    return config_from_dict(doc)


# ----------------------------------------------------------------------------
# output plumbing

def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def write_atomic(path, text: str):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class OutputSet:
    """Collects the files of one run."""

    def __init__(self, out_dir):
        self.out_dir = os.fspath(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        self.files = []

    def csv(self, name, header, rows):
        write_atomic(os.path.join(self.out_dir, name), csv_text(header, rows))
        self.files.append(name)

    def json(self, name, doc):
        write_atomic(os.path.join(self.out_dir, name),
                     json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
        self.files.append(name)


@dataclasses.dataclass
class RunManifest:
    experiment: str
    config_digest: str
    seed: int
    scheme: str
    started: str
    finished: str
    outputs: list
    version: str
    out_dir: str = ""
    assertions: list = dataclasses.field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(a["passed"] for a in self.assertions)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("out_dir")
        return d

    def write(self):
        write_atomic(os.path.join(self.out_dir, "manifest.json"),
                     json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = os.fspath(path)
        if os.path.isdir(path):
            path = os.path.join(path, "manifest.json")
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(out_dir=os.path.dirname(os.path.abspath(path)), **doc)

    def verify(self) -> dict:
        """Recompute every output digest; returns {name: matches}."""
        return {o["name"]: sha256_file(os.path.join(self.out_dir, o["name"])) == o["sha256"]
                for o in self.outputs}


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _check(name, passed, **detail):
    return {"name": name, "passed": bool(passed), **_jsonable(detail)}


# ----------------------------------------------------------------------------
# experiments

def _walk_cfg(cfg: ExperimentConfig, horizon, tag="walk", start=None) -> WalkConfig:
    start = cfg.start if start is None else start
    return WalkConfig(cfg.cone, cfg.law, start, int(horizon), cfg["reps"], cfg.seed, tag)


def _require_halfspace(cfg: ExperimentConfig):
    if not cfg.cone.is_halfspace:
        raise ConfigError(f"the {cfg.experiment} experiment needs the closed-form kernel "
                          f"of the half-space (theta = pi/2)", path=["theta"])


def _run_survival(cfg, out, threads):
    hz = cfg.horizons
    st = survival_curve(_walk_cfg(cfg, hz[-1]), hz, threads=threads)
    out.csv("survival.csv", st.HEADER, st.rows())
    summary = {"flags": st.flags, "horizons": len(hz)}
    if len(hz) >= 5:
        b = beta_from_survival(st, cfg.params.alpha, cfg["beta"]["drop_fraction"])
        summary.update(beta_hat=b.beta_hat, se=b.se, ci=list(b.ci))
    return summary, []


def _run_beta(cfg, out, threads):
    hz = cfg.horizons
    st = survival_curve(_walk_cfg(cfg, hz[-1]), hz, threads=threads)
    b = beta_from_survival(st, cfg.params.alpha, cfg["beta"]["drop_fraction"])
    out.csv("survival.csv", st.HEADER, st.rows())
    alpha = cfg.params.alpha
    summary = {"beta_hat": b.beta_hat, "se": b.se, "ci": list(b.ci),
               "slope": -b.beta_hat / alpha, "slope_ci": [-b.ci[1] / alpha, -b.ci[0] / alpha],
               "curvature_p": b.curvature_p, "fit_horizons": b.fit_horizons,
               "flags": b.flags, "widened": b.widened}
    checks = []
    exp = cfg["beta"]["expected"]
    if exp is not None:
        tol = cfg["beta"]["tolerance"]
        checks.append(_check("beta_within_tolerance", abs(b.beta_hat - exp) <= tol,
                             beta_hat=b.beta_hat, expected=exp, tolerance=tol))
    return summary, checks


def _run_martin_profile(cfg, out, threads):
    mc = cfg["martin"]
    hz = cfg.horizons
    params, cone = cfg.params, cfg.cone
    beta = estimate_beta(cone, params, hz, mc["beta_reps"] or cfg["reps"], cfg.seed,
                         threads=threads, min_reps=1)
    est = estimate_martin_profile(cone, params, hz, cfg["reps"], cfg.seed, mc["n_angles"],
                                  mc["anchor_scale"], mc["extrapolate"], beta=beta,
                                  threads=threads)
    rows = [(p["psi"], p["value"], p["se"], p["ci_lo"], p["ci_hi"])
            for p in est.to_dict()["profile"]]
    out.csv("profile.csv", ("psi", "value", "se", "ci_lo", "ci_hi"), rows)
    out.csv("survival.csv", beta.survival.HEADER, beta.survival.rows())
    out.json("martin.json", est.to_dict())
    summary = {"beta_hat": beta.beta_hat, "beta_ci": list(beta.ci), "flags": est.flags}
    checks = []
    hx = mc["homogeneity_x"]
    if hx is not None:
        res = homogeneity_check(cone, params, hx, hz, cfg["reps"], cfg.seed, beta, est,
                                mc["anchor_scale"], mc["extrapolate"], threads)
        summary["homogeneity"] = res
        checks.append(_check("homogeneity", res["passed"],
                             **{k: v for k, v in res.items() if k != "passed"}))
    return summary, checks


def homogeneity_check(cone, params, x, horizons, reps, seed, beta, profile=None,
                      anchor_scale=16.0, extrapolate=False, threads=None):
    """M_hat(x) against |x|^beta_hat profile(angle x) with a joint CI.

    On the axis the target is |x|^beta_hat; the two estimates use disjoint
    streams, so their variances add.
    """
    x = np.asarray(x, dtype=float)
    r = float(np.linalg.norm(x))
    psi = float(axis_angle(x[None, :])[0])
    prof, prof_se = 1.0, 0.0
    if psi > 0:
        if profile is None:
            raise ValueError("an off-axis point needs an angular profile")
        prof = float(profile.profile_at(psi))
        prof_se = float(np.interp(psi, profile.angles, profile.profile_se))
    ratio = estimate_martin_ratio(cone, params, x, horizons, reps, seed, anchor_scale,
                                  extrapolate, threads=threads)
    target = r**beta.beta_hat * prof
    target_se = math.hypot(math.log(r) * target * beta.se, r**beta.beta_hat * prof_se)
    joint = math.hypot(ratio.se, target_se)
    return {"x": x, "m_hat": ratio.value, "m_se": ratio.se, "target": target,
            "target_se": target_se, "joint_se": joint, "diff": ratio.value - target,
            "passed": bool(abs(ratio.value - target) <= Z95 * joint), "flags": ratio.flags}


def _run_v_estimate(cfg, out, threads):
    _require_halfspace(cfg)
    vc = cfg["v_estimate"]
    m_grid = sorted(set(int(m) for m in vc["m_grid"]))
    M = halfspace_martin(cfg.params)
    wcfg = _walk_cfg(cfg, max(m_grid), "v-estimate")
    v = estimate_V(wcfg, m_grid, M, threads=threads)
    out.csv("v.csv", v.HEADER, v.rows())
    summary = {"v_hat": v.value, "se": float(v.se[-1]), "plateau": v.plateau,
               "plateau_gap": v.plateau_gap, "plateau_se": v.plateau_se,
               "m_at_x": float(eval_martin_halfspace(cfg.params, wcfg.start))}
    checks = [_check("v_plateau", v.plateau, gap=v.plateau_gap, se=v.plateau_se)]
    if vc["harmonicity"]:
        h = harmonicity_residual(wcfg, wcfg.start, vc["m_star"], vc["inner_reps"],
                                 vc["outer_reps"], M, threads=threads)
        summary["harmonicity"] = h
        checks.append(_check("harmonicity", abs(h["residual"]) <= 3 * h["se"],
                             residual=h["residual"], se=h["se"]))
    return summary, checks


def _run_kappa(cfg, out, threads):
    _require_halfspace(cfg)
    kc = cfg["kappa"]
    params, cone = cfg.params, cfg.cone
    starts = [np.asarray(s, dtype=float) for s in kc["starts"]] or [cone.axis, 2 * cone.axis]
    hz = cfg.horizons
    m_star = int(kc["m_star"])
    if m_star > hz[-1]:
        raise ConfigError("kappa.m_star must not exceed horizons.hi", path=["kappa", "m_star"])
    M = halfspace_martin(params)
    ests, summary = [], {"starts": []}
    beta_hat = kc["beta_hat"]
    for i, x in enumerate(starts):
        tag = "kappa" if kc["paired"] else f"kappa-{i}"
        wcfg = _walk_cfg(cfg, hz[-1], tag, start=x)
        batch = simulate_walks(wcfg, checkpoints=[m_star // 2, m_star], threads=threads)
        surv = survival_from_tau(batch.tau, hz)
        v = estimate_V(wcfg, [m_star // 2, m_star], M, batch=batch)
        if beta_hat is None:
            beta_hat = beta_from_survival(surv, params.alpha).beta_hat
        k = estimate_kappa(wcfg, surv, v, beta_hat, kc["max_drift"])
        ests.append(k)
        out.csv(f"kappa_{i}.csv", k.HEADER, k.rows())
        summary["starts"].append({"x": x, "v_hat": v.value, "v_se": float(v.se[-1]),
                                  "kappa": k.plateau, "kappa_se": k.plateau_se,
                                  "drift": k.drift, "flags": k.flags})
    summary["beta_hat"] = beta_hat
    checks = [_check(f"kappa_drift_{i}", k.drift < kc["max_drift"], drift=k.drift)
              for i, k in enumerate(ests)]
    for i in range(1, len(ests)):
        diff, se = compare_kappa(ests[0], ests[i], kc["paired"])
        checks.append(_check(f"kappa_agree_0_{i}", abs(diff) <= Z95 * se, diff=diff, se=se))
    return summary, checks


def drift_ladder(params, law, ladder, R, epsilon=None, n_outer=100_000, n_inner=64,
                 inner="mc", seed=0):
    """Drift checks at x = delta e_d for delta in the ladder, with c set afterwards.

    c is half the smallest empirical margin -drift/Lambda over the ladder.
    Returns (results, c, u_rows) where u_rows hold U delta^{eps/2}/M.
    """
    eps = default_epsilon(params.alpha) if epsilon is None else epsilon
    ccfg = CompensatorConfig(params, eps, R)
    table = u_table(ccfg)
    axis = np.zeros(params.dim)
    axis[-1] = 1.0
    results = []
    for delta in ladder:
        st = Stream(seed, ("compensator", "ladder", repr(float(R)), repr(float(delta))))
        results.append(error_drift_check(ccfg, law, delta * axis, st, n_outer, inner, n_inner,
                                         table=table))
    margin = min(-r.drift / r.lam for r in results)
    c = 0.5 * margin if margin > 0 else 0.0
    for r in results:
        r.c = c
    u_rows = []
    for delta in ladder:
        u = float(table(np.array([float(delta)]))[0])
        m = float(delta) ** (params.alpha / 2)
        u_rows.append((float(delta), u, m, u * float(delta) ** (eps / 2) / m, u / m))
    return results, c, u_rows


def _run_compensator(cfg, out, threads):
    _require_halfspace(cfg)
    cc = cfg["compensator"]
    params = cfg.params
    results, c, u_rows = drift_ladder(params, cfg.law, cc["ladder"], cc["R"], cc["epsilon"],
                                      cc["n_outer"], cc["n_inner"], cc["inner"], cfg.seed)
    d = params.dim
    head = tuple(f"x{i}" for i in range(d)) + ("delta", "drift", "se", "lambda", "verdict")
    out.csv("drift.csv", head, drift_table_rows(results))
    out.csv("u_ladder.csv", ("delta", "u_lambda", "m", "u_scaled", "u_over_m"), u_rows)
    scaled = [r[3] for r in u_rows]
    checks = [_check(f"drift_{r.x[-1]:g}", r.verdict, drift=r.drift, se=r.se, c=c, lam=r.lam)
              for r in results]
    checks.append(_check("u_scaled_non_increasing",
                         all(b <= a for a, b in zip(scaled, scaled[1:])), values=scaled))
    eps = cc["epsilon"] if cc["epsilon"] is not None else default_epsilon(params.alpha)
    summary = {"c": c, "epsilon": eps, "R": cc["R"],
               "flags": [f for r in results for f in r.flags]}
    if cc["R_scan"]:
        # smallest R at which every rung passes (the proofs only need R large)
        scan_rows, smallest = [], None
        for R in sorted(cc["R_scan"]):
            res_R, c_R, _ = drift_ladder(params, cfg.law, cc["ladder"], R, cc["epsilon"],
                                         cc["n_outer"], cc["n_inner"], cc["inner"], cfg.seed)
            ok = all(r.verdict for r in res_R)
            scan_rows.append((float(R), c_R, ok))
            if ok and smallest is None:
                smallest = float(R)
        out.csv("r_scan.csv", ("R", "c", "all_pass"), scan_rows)
        summary["smallest_passing_R"] = smallest
    if cc["envelope_pairs"] > 0 and params.dim > params.alpha:
        env = envelope_check(params, cc["envelope_pairs"],
                             Stream(cfg.seed, ("compensator", "envelope")))
        out.csv("envelope.csv", ("pair", "ratio"), enumerate(env["ratios"]))
        summary["envelope"] = {k: env[k] for k in ("min", "max", "factor")}
        checks.append(_check("green_envelope", env["factor"] <= 50.0, factor=env["factor"]))
    return summary, checks


def _meander_rows(s):
    rad = np.linalg.norm(s.endpoints, axis=1)
    for i in range(s.accepted):
        yield (int(s.path_index[i]), float(rad[i]), float(s.scaled_max[i]))


def _run_meander_invariance(cfg, out, threads):
    mc = cfg["meander"]
    n = int(mc["n"])
    params = cfg.params
    a_cfg = WalkConfig(cfg.cone, cfg.law, cfg.start, n, cfg["reps"], cfg.seed, "meander-a")
    alpha_b = mc["alpha_b"] if mc["alpha_b"] is not None else params.alpha
    pb = StableParams(alpha_b, params.dim)
    law_b = IncrementLaw.perturbed(pb) if mc["law_b"] == "perturbed" else IncrementLaw.exact(pb)
    b_cfg = WalkConfig(cfg.cone, law_b, cfg.start, n, cfg["reps"], cfg.seed, "meander-b")
    res = invariance_check(a_cfg, b_cfg, n, mc["target"], mc["k_grid"], mc["level"], threads)
    sa, sb = res["samples"]
    head = ("path_index", "radius", "max_modulus")
    out.csv("endpoints_a.csv", head, _meander_rows(sa))
    out.csv("endpoints_b.csv", head, _meander_rows(sb))
    out.csv("ks.csv", ("projection", "statistic", "p", "p_adjusted"),
            [(k, v["statistic"], v["p"], v["p_adjusted"]) for k, v in res["tests"].items()])
    med, med_ci = median_radius_ci(sa, Stream(cfg.seed, ("meander", "median")))
    summary = {"verdict": res["verdict"], "tests": res["tests"], "flags": res["flags"],
               "acceptance": [sa.acceptance_rate, sb.acceptance_rate],
               "accepted": [sa.accepted, sb.accepted], "proposed": [sa.proposed, sb.proposed],
               "endpoints_a": endpoint_stats(sa), "median_radius_a": [med, list(med_ci)]}
    checks = [_check("invariance", res["verdict"], tests=res["tests"])]
    if mc["n_compare"]:
        # marginal stability in n: same law, other horizons, radius KS against n
        rad_a = np.linalg.norm(sa.endpoints, axis=1)
        rows = []
        for n2 in mc["n_compare"]:
            c2 = WalkConfig(cfg.cone, cfg.law, cfg.start, int(n2), cfg["reps"], cfg.seed,
                            f"meander-n{int(n2)}")
            s2 = sample_conditioned(c2, int(n2), mc["k_grid"], mc["target"], threads)
            stat, p = ks_two_sample(rad_a, np.linalg.norm(s2.endpoints, axis=1))
            rows.append((int(n2), s2.accepted, stat, p, min(1.0, p * len(mc["n_compare"]))))
        out.csv("stability.csv", ("n", "accepted", "statistic", "p", "p_adjusted"), rows)
        summary["stability"] = [dict(zip(("n", "accepted", "statistic", "p", "p_adjusted"), r))
                                for r in rows]
        checks.append(_check("marginal_stability", all(r[4] > mc["level"] for r in rows)))
    return summary, checks


def _run_tightness(cfg, out, threads):
    mc, tc = cfg["meander"], cfg["tightness"]
    n = int(mc["n"])
    params = cfg.params
    beta_hat = tc["beta_hat"]
    if beta_hat is None:
        if not cfg.cone.is_halfspace:
            raise ConfigError("tightness.beta_hat is required outside the half-space",
                              path=["tightness", "beta_hat"])
        beta_hat = params.alpha / 2
    wcfg = WalkConfig(cfg.cone, cfg.law, cfg.start, n, cfg["reps"], cfg.seed, "tightness")
    s = sample_conditioned(wcfg, n, mc["k_grid"], mc["target"], threads)
    res = tightness_check(s, tc["A_grid"], beta_hat, tuple(tc["fit_range"]),
                          n_boot=tc["n_boot"], stream=Stream(cfg.seed, ("tightness", "boot")),
                          tolerance=tc["tolerance"])
    out.csv("tail.csv", ("A", "exceed", "p_hat", "ci_lo", "ci_hi", "flag"),
            [(r["A"], r["exceed"], r["p_hat"], r["ci_lo"], r["ci_hi"], r["flag"])
             for r in res["rows"]])
    summary = {k: res[k] for k in ("slope", "ci", "target", "pass", "bound_holds", "flags")}
    summary.update(beta_hat=beta_hat, accepted=s.accepted, proposed=s.proposed)
    return summary, [_check("tightness_slope", res["pass"], slope=res["slope"],
                            target=res["target"])]


def _run_kernel_verify(cfg, out, threads):
    kc = cfg["kernel_verify"]
    params = cfg.params
    d = params.dim
    rows, worst = [], 0.0
    for r in kc["radii"]:
        for off in kc["offsets"]:
            theta = np.zeros(d)
            theta[-1] = off * r
            mass = poisson_normalization(params, r, theta)
            worst = max(worst, abs(mass - 1.0))
            rows.append((r, off, mass, abs(mass - 1.0)))
    out.csv("poisson_norm.csv", ("r", "offset", "integral", "abs_error"), rows)
    # ball-exit sampler against the quadrature radial CDF
    ks_rows = []
    for off in kc["offsets"]:
        theta = np.zeros(d)
        theta[-1] = off
        st = Stream(cfg.seed, ("kernel-verify", repr(float(off))))
        w = sample_ball_exit(params, 1.0, theta, st, kc["ks_samples"])
        rad = np.sort(np.linalg.norm(w, axis=1))
        ks = exit_radius_ks(params, theta, rad)
        ks_rows.append((off, kc["ks_samples"], ks))
    out.csv("ball_exit_ks.csv", ("offset", "samples", "ks_distance"), ks_rows)
    worst_ks = max(r[2] for r in ks_rows)
    summary = {"max_abs_error": worst, "max_ks": worst_ks}
    return summary, [_check("poisson_normalization", worst < 1e-6, max_abs_error=worst),
                     _check("ball_exit_ks", worst_ks < 0.01, max_ks=worst_ks)]


def exit_radius_ks(params, theta, rad_sorted, n_grid: int = 400):
    """KS distance between sorted sampled exit radii and the quadrature radial CDF.

    The CDF is evaluated by quadrature of the Poisson kernel on a quantile
    grid of the sample, and the empirical CDF is compared on both sides of
    each node.
    """
    theta = np.asarray(theta, dtype=float)
    grid = np.unique(np.quantile(rad_sorted, np.linspace(0.0, 1.0, n_grid + 1)[1:-1]))
    F = np.array([poisson_mass(params, 1.0, theta, g) for g in grid])
    n = rad_sorted.size
    right = np.searchsorted(rad_sorted, grid, side="right") / n
    left = np.searchsorted(rad_sorted, grid, side="left") / n
    return float(max(np.max(np.abs(right - F)), np.max(np.abs(left - F))))


_RUNNERS = {
    "survival": _run_survival,
    "beta": _run_beta,
    "martin-profile": _run_martin_profile,
    "v-estimate": _run_v_estimate,
    "kappa": _run_kappa,
    "compensator": _run_compensator,
    "meander-invariance": _run_meander_invariance,
    "tightness": _run_tightness,
    "kernel-verify": _run_kernel_verify,
}


class ExperimentError(RuntimeError):
    """A module error during a run; ``report`` is also written to failure.json."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def default_out_dir(cfg: ExperimentConfig) -> str:
    base = os.environ.get("STABLECONE_OUT_DIR", "runs")
    return os.path.join(base, f"{cfg.experiment}-{cfg.digest[:12]}")


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads=None) -> RunManifest:
    """Run one experiment, write its outputs and then its manifest."""
    out_dir = default_out_dir(cfg) if out_dir is None else os.fspath(out_dir)
    out = OutputSet(out_dir)
    started = _now()
    out.json("config.json", cfg.data)
    try:
        summary, checks = _RUNNERS[cfg.experiment](cfg, out, threads)
    except ConfigError:
        raise
    except (ValueError, RuntimeError) as exc:
        report = {"experiment": cfg.experiment, "error": type(exc).__name__,
                  "message": str(exc), "config_digest": cfg.digest}
        for attr in ("value", "error", "acceptance_rate"):
            if hasattr(exc, attr):
                report[attr] = getattr(exc, attr)
        write_atomic(os.path.join(out.out_dir, "failure.json"),
                     json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
        raise ExperimentError(str(exc), report) from exc
    summary = dict(summary)
    summary["assertions"] = checks
    summary["experiment"] = cfg.experiment
    out.json("summary.json", summary)
    outputs = [{"name": f, "sha256": sha256_file(os.path.join(out.out_dir, f))}
               for f in out.files]
    man = RunManifest(cfg.experiment, cfg.digest, cfg.seed, SCHEME_ID, started, _now(),
                      outputs, __version__, out.out_dir, checks)
    man.write()
    return man


# ----------------------------------------------------------------------------
# plot data

PLOT_KINDS = ("survival", "kappa", "tightness")


def emit_plot_data(manifest: RunManifest, which: str, out_dir=None) -> list:
    """Plot-ready CSVs (x, y, ci_lo, ci_hi) plus a reference-slope text file.

    ``survival`` gives log-log survival data with the -beta/alpha line,
    ``kappa`` the plateau series, ``tightness`` the conditional tail.
    """
    if which not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {which!r}; choose from {PLOT_KINDS}")
    src = manifest.out_dir
    out_dir = src if out_dir is None else os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    names = {o["name"] for o in manifest.outputs}

    def need(name):
        if name not in names or not os.path.exists(os.path.join(src, name)):
            raise FileNotFoundError(f"missing upstream output {name!r} in {src}")
        return os.path.join(src, name)

    with open(need("summary.json"), encoding="utf-8") as fh:
        summary = json.load(fh)
    with open(need("config.json"), encoding="utf-8") as fh:
        config = json.load(fh)
    written = []
    if which == "survival":
        rows = _read_csv(need("survival.csv"))
        data = [(math.log(float(r["n"])), math.log(float(r["p_hat"])),
                 math.log(float(r["ci_lo"])) if float(r["ci_lo"]) > 0 else float("-inf"),
                 math.log(float(r["ci_hi"]))) for r in rows if float(r["p_hat"]) > 0]
        path = os.path.join(out_dir, "plot_survival.csv")
        write_atomic(path, csv_text(("x", "y", "ci_lo", "ci_hi"), data))
        written.append(path)
        alpha = float(config["alpha"])
        if "beta_hat" not in summary:
            raise FileNotFoundError(f"summary.json in {src} has no beta_hat "
                                    f"(needs at least 5 horizons)")
        lo, hi = summary["ci"]
        line = (f"slope {_cell(-summary['beta_hat'] / alpha)} "
                f"ci {_cell(-hi / alpha)} {_cell(-lo / alpha)}\n")
        ref = os.path.join(out_dir, "reference_slopes.txt")
        write_atomic(ref, line)
        written.append(ref)
    elif which == "kappa":
        k_files = sorted(n for n in names if n.startswith("kappa_") and n.endswith(".csv"))
        if not k_files:
            raise FileNotFoundError(f"missing upstream output 'kappa_*.csv' in {src}")
        for name in k_files:
            rows = _read_csv(need(name))
            data = [(int(r["n"]), float(r["kappa_hat"]), float(r["ci_lo"]), float(r["ci_hi"]))
                    for r in rows]
            path = os.path.join(out_dir, f"plot_{name}")
            write_atomic(path, csv_text(("n", "kappa_hat", "ci_lo", "ci_hi"), data))
            written.append(path)
    else:
        rows = _read_csv(need("tail.csv"))
        data = [(math.log(float(r["A"])), math.log(float(r["p_hat"])),
                 math.log(float(r["ci_lo"])) if float(r["ci_lo"]) > 0 else float("-inf"),
                 math.log(float(r["ci_hi"]))) for r in rows if float(r["p_hat"]) > 0]
        path = os.path.join(out_dir, "plot_tightness.csv")
        write_atomic(path, csv_text(("x", "y", "ci_lo", "ci_hi"), data))
        written.append(path)
        ref = os.path.join(out_dir, "reference_slopes.txt")
        write_atomic(ref, f"slope {_cell(summary['slope'])} ci {_cell(summary['ci'][0])} "
                          f"{_cell(summary['ci'][1])} target {_cell(summary['target'])}\n")
        written.append(ref)
    return written


def _read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
