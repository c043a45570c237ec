"""Batch front-end: simulate a scenario, run the filter, write results.

Subcommands::

    imuslam run           --config cfg.json --out dir [--seed N] [--paper-mode]
    imuslam observability --config cfg.json --out dir [--seed N]
    imuslam compare       --out dir report1.json report2.json [...]

``run`` writes ``truth.csv``, ``estimate.csv``, ``errors.csv`` and
``report.json``; outputs are byte-identical for identical (config, seed)
apart from the ``created_utc`` field of the report.  ``--paper-mode``
switches the filter to the truncated closed-form discretization instead
of the exact one.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

import jsonschema

from .estimator import SlamFilter, initialize
from .model import FilterState, ModelConstants, NoiseSpec, continuous_jacobians
from .observation import observation_jacobian
from .observability import (
    SegmentModel,
    build_observability,
    pi_condition,
    rank_test,
    stripped_observability,
)
from .simulator import LandmarkSpec, Scenario, ScenarioConfig, build_scenario, build_trajectory

__all__ = [
    "load_config",
    "FilterOptions",
    "execute_run",
    "run_scenario",
    "analyze_observability",
    "compare_runs",
    "main",
]

_FLOAT_FMT = "%.17g"


class ConfigError(ValueError):
    """Configuration file failed schema validation."""


def _schema(name: str) -> dict:
    with resources.files("imuslam.schemas").joinpath(name).open("r") as fh:
        return json.load(fh)


def load_config(path: Path) -> dict:
    """Read and schema-validate a scenario configuration file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        raw = json.load(fh)
    validator = jsonschema.Draft202012Validator(_schema("config_schema.json"))
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        keys = "; ".join(
            f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
            for e in errors
        )
        raise ConfigError(f"invalid config {path}: {keys}")
    return raw


@dataclass
class FilterOptions:
    """Filter-side knobs parsed from the ``filter`` config section."""

    window_w: int = 100
    rank_tol_kappa: float = 100.0
    threshold_pos_m: float = 0.5
    threshold_att_deg: float = 2.0
    r_prior_sigma: float = 0.175
    adapt_r: bool = True
    segment_s: float = 10.0


def parse_config(raw: dict, seed_override: Optional[int] = None) -> tuple[ScenarioConfig, FilterOptions]:
    imu = raw["imu"]
    sensor = raw["sensor"]
    cfg = ScenarioConfig(
        trajectory=raw["trajectory"],
        landmarks=[
            LandmarkSpec(
                id=lm["id"],
                position=lm["position"],
                anchor=bool(lm.get("anchor", False)),
                sigma_p=lm.get("sigma_p"),
                visible_from_s=lm.get("visible_from_s", 0.0),
            )
            for lm in raw["landmarks"]
        ],
        noise=NoiseSpec(
            sigma_g=imu["sigma_g"],
            sigma_bg=imu["sigma_bg"],
            sigma_a=imu["sigma_a"],
            sigma_ba=imu["sigma_ba"],
        ),
        imu_rate_hz=imu.get("rate_hz", 20.0),
        obs_rate_hz=sensor.get("rate_hz", 20.0),
        bias_g=imu.get("bias_g", [0.0, 0.0, 0.0]),
        bias_a=imu.get("bias_a", [0.0, 0.0, 0.0]),
        sigma_p_range=tuple(sensor.get("sigma_p_range", (0.1, 0.25))),
        gravity=raw.get("gravity", [0.0, 0.0, -9.81]),
        seed=seed_override if seed_override is not None else raw.get("seed", 0),
        duration_s=raw.get("duration_s", 120.0),
    )
    fdict = raw.get("filter", {})
    thresholds = fdict.get("thresholds", {})
    opts = FilterOptions(
        window_w=fdict.get("window_w", 100),
        rank_tol_kappa=fdict.get("rank_tol_kappa", 100.0),
        threshold_pos_m=thresholds.get("pos_m", 0.5),
        threshold_att_deg=thresholds.get("att_deg", 2.0),
        r_prior_sigma=fdict.get("r_prior_sigma", 0.175),
        adapt_r=fdict.get("adapt_r", True),
        segment_s=fdict.get("segment_s", 10.0),
    )
    return cfg, opts


# ---------------------------------------------------------------------------
# Closed-loop run
# ---------------------------------------------------------------------------


@dataclass
class RunArtifacts:
    """Everything one closed-loop run produces, before serialization."""

    scenario: Scenario
    options: FilterOptions
    paper_mode: bool
    times: np.ndarray
    pos_err: np.ndarray
    att_err: np.ndarray
    trace_P: np.ndarray
    r_hat_rel_err: np.ndarray
    truth_rows: List[tuple]
    est_rows: List[tuple]
    filter_: Optional[SlamFilter]
    r_hat_time_avg: Optional[np.ndarray]
    r_true: Optional[np.ndarray]
    dead_reckoning: bool
    metrics: Dict[str, Any] = field(default_factory=dict)

    def final_state(self) -> Optional[FilterState]:
        return self.filter_.state if self.filter_ is not None else None


def execute_run(
    cfg: ScenarioConfig,
    opts: FilterOptions,
    paper_mode: bool = False,
    r_prior_per_id: Optional[Dict[Any, float]] = None,
    r_avg_start_s: float = 20.0,
) -> RunArtifacts:
    """Simulate the scenario and run the filter over it.

    With no anchors configured the run degrades to pure IMU dead
    reckoning (an explicit extension scenario, labeled in the report);
    otherwise the filter initializes from the first observation epoch.
    ``r_prior_per_id`` overrides the scalar measurement-noise prior with
    per-landmark sigmas (used by consistency tests that supply the truth).
    """
    scen = build_scenario(cfg)
    dt = 1.0 / cfg.imu_rate_hz
    n_steps = len(scen.imu)
    stride = scen.obs_stride()
    constants = ModelConstants(gravity=cfg.gravity)
    anchor_ids = cfg.anchor_ids
    dead_reckoning = len(anchor_ids) == 0

    first_obs = scen.observations[0]
    if dead_reckoning:
        state = FilterState(
            q=np.array([0.0, 0.0, 0.0, 1.0]),
            r=np.zeros(3), v=np.zeros(3), bg=np.zeros(3), ba=np.zeros(3),
        )
        P = np.zeros((15, 15))
    else:
        if r_prior_per_id is not None:
            R0 = {i: (r_prior_per_id[i] ** 2) * np.eye(3) for i in first_obs.entries if i not in anchor_ids}
        else:
            R0 = opts.r_prior_sigma
        state, P = initialize(first_obs, anchor_ids, R0)

    filt = SlamFilter(
        state,
        P,
        cfg.noise,
        constants,
        r_prior_sigma=opts.r_prior_sigma,
        window_len=opts.window_w,
        adapt_r=opts.adapt_r,
        r_prior_per_id=r_prior_per_id,
        legacy_discretization=paper_mode,
    )

    r_true_cache: Dict[tuple, np.ndarray] = {}

    def r_true_for(layout: tuple) -> np.ndarray:
        if layout not in r_true_cache:
            r_true_cache[layout] = scen.true_measurement_covariance(list(layout))
        return r_true_cache[layout]

    # Truth at every step time, evaluated in one vectorized pass.
    step_times = (np.arange(n_steps) + 1) * dt
    q_true = scen.trajectory.quaternion(step_times)
    r_true = scen.trajectory.position(step_times)
    v_true = scen.trajectory.velocity(step_times)
    w_true = scen.trajectory.omega_body(step_times)
    a_true = scen.trajectory.acceleration(step_times)

    times = np.empty(n_steps)
    pos_err = np.empty(n_steps)
    att_err = np.empty(n_steps)
    trace_P = np.empty(n_steps)
    r_rel = np.full(n_steps, np.nan)
    truth_rows: List[tuple] = []
    est_rows: List[tuple] = []
    r_sum: Optional[np.ndarray] = None
    r_cnt = 0
    r_shape_ref = (3 * len(cfg.landmarks), 3 * len(cfg.landmarks))

    for k in range(n_steps):
        t_k = float(step_times[k])
        obs = None
        if not dead_reckoning and (k + 1) % stride == 0:
            obs = scen.observations[(k + 1) // stride]
        diag = filt.step([scen.imu[k]], dt, obs=obs, reference=(q_true[k], r_true[k]))

        times[k] = t_k
        pos_err[k] = diag.position_error
        att_err[k] = diag.attitude_error
        trace_P[k] = diag.trace_P
        if filt.R_hat is not None and filt.window.layout_key is not None:
            R_true = r_true_for(filt.window.layout_key)
            r_rel[k] = np.linalg.norm(filt.R_hat - R_true) / np.linalg.norm(R_true)
            if t_k >= r_avg_start_s and filt.R_hat.shape == r_shape_ref:
                if r_sum is None:
                    r_sum = np.zeros_like(filt.R_hat)
                r_sum += filt.R_hat
                r_cnt += 1
        truth_rows.append(
            (t_k, *q_true[k], *r_true[k], *v_true[k], *w_true[k], *a_true[k])
        )
        s = filt.state
        est_rows.append((t_k, *s.q, *s.r, *s.v, *s.bg, *s.ba, diag.trace_P))

    bias_g_true = scen.bias_g_history[-1]
    bias_a_true = scen.bias_a_history[-1]
    metrics = {
        "rmse_pos_m": float(np.sqrt(np.mean(pos_err**2))),
        "final_pos_err_m": float(pos_err[-1]),
        "final_att_err_rad": float(att_err[-1]),
        "final_att_err_deg": float(np.rad2deg(att_err[-1])),
        "bias_g_err": [float(x) for x in (filt.state.bg - bias_g_true)],
        "bias_a_err": [float(x) for x in (filt.state.ba - bias_a_true)],
        "bias_g_true_final": [float(x) for x in bias_g_true],
        "bias_a_true_final": [float(x) for x in bias_a_true],
        "n_landmarks_estimated": filt.state.n_landmarks,
        "dead_reckoning": dead_reckoning,
    }
    thr_att_rad = np.deg2rad(opts.threshold_att_deg)
    metrics["converged"] = bool(
        pos_err[-1] <= opts.threshold_pos_m and att_err[-1] <= thr_att_rad
    )

    r_true_final = None
    if filt.window.layout_key is not None and len(filt.window.layout_key) == len(cfg.landmarks):
        r_true_final = r_true_for(filt.window.layout_key)
    art = RunArtifacts(
        scenario=scen,
        options=opts,
        paper_mode=paper_mode,
        times=times,
        pos_err=pos_err,
        att_err=att_err,
        trace_P=trace_P,
        r_hat_rel_err=r_rel,
        truth_rows=truth_rows,
        est_rows=est_rows,
        filter_=filt,
        r_hat_time_avg=(r_sum / r_cnt) if r_cnt else None,
        r_true=r_true_final,
        dead_reckoning=dead_reckoning,
        metrics=metrics,
    )
    return art


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _write_csv(path: Path, header: List[str], rows: List[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_FLOAT_FMT % x if isinstance(x, float) else x for x in row])


TRUTH_HEADER = [
    "t", "qx", "qy", "qz", "qw", "rx", "ry", "rz",
    "vx", "vy", "vz", "wx", "wy", "wz", "ax", "ay", "az",
]
ESTIMATE_HEADER = [
    "t", "qx", "qy", "qz", "qw", "rx", "ry", "rz", "vx", "vy", "vz",
    "bgx", "bgy", "bgz", "bax", "bay", "baz", "trace_P",
]
ERRORS_HEADER = ["t", "pos_err_m", "att_err_rad", "trace_P", "r_hat_rel_err"]


def _observability_findings(cfg: ScenarioConfig, opts: FilterOptions) -> dict:
    """Per-segment rank analysis along the scenario's nominal trajectory."""
    scen_traj = build_trajectory(cfg)
    n_seg = max(1, int(round(cfg.duration_s / opts.segment_s)))
    seg_dt = cfg.duration_s / n_seg
    anchors = [lm for lm in cfg.landmarks if lm.anchor]
    unknowns = [lm for lm in cfg.landmarks if not lm.anchor]
    n = len(unknowns)

    segs = []
    seg_dicts = []
    for j in range(n_seg):
        t_mid = (j + 0.5) * seg_dt
        truth = scen_traj.sample(t_mid)
        A = np.asarray(scen_traj.rotation_matrices(np.array([t_mid]))[0])
        a_body = A.T @ (truth.accel_inertial + cfg.gravity)
        F, _ = continuous_jacobians(truth.q, truth.omega, a_body, n)
        state = FilterState(
            q=truth.q, r=truth.r, v=truth.v, bg=np.zeros(3), ba=np.zeros(3),
            anchors={lm.id: lm.position.copy() for lm in anchors},
            landmarks={lm.id: lm.position.copy() for lm in unknowns},
        )
        ids = [lm.id for lm in anchors] + [lm.id for lm in unknowns]
        H = observation_jacobian(state, ids)
        seg = SegmentModel(F=F, H=H, dt=seg_dt)
        segs.append(seg)

        rep = rank_test(build_observability(seg), n, opts.rank_tol_kappa)
        entry = {
            "t_start": j * seg_dt,
            "t_end": (j + 1) * seg_dt,
            **rep.to_dict(),
        }
        if len(anchors) >= 3:
            p = [A.T @ (anchors[i].position - truth.r) for i in range(3)]
            entry["pi"] = pi_condition(p[0], p[1], p[2]).to_dict()
        seg_dicts.append(entry)

    stripped = stripped_observability(segs, opts.rank_tol_kappa)
    return {"segments": seg_dicts, "stripped": stripped.to_dict()}


def _report_dict(cfg_raw: dict, cfg: ScenarioConfig, art: RunArtifacts, observability: dict) -> dict:
    return {
        "schema_version": 1,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "config": cfg_raw,
        "seed": cfg.seed,
        "paper_mode": art.paper_mode,
        "metrics": art.metrics,
        "convergence_criteria": {
            "note": "thresholds are artifact-defined, not taken from a published criterion",
            "pos_m": art.options.threshold_pos_m,
            "att_deg": art.options.threshold_att_deg,
        },
        "hygiene": {
            "max_quat_norm_dev": art.filter_.hygiene.max_quat_norm_dev,
            "max_P_asymmetry": art.filter_.hygiene.max_P_asymmetry,
            "min_P_eigenvalue": art.filter_.hygiene.min_P_eigenvalue
            if np.isfinite(art.filter_.hygiene.min_P_eigenvalue)
            else None,
            "clamped_epochs": art.filter_.hygiene.clamped_epochs,
        }
        if art.filter_ is not None
        else {},
        "adapted_r": {
            "active": bool(np.any(np.isfinite(art.r_hat_rel_err))),
            "final_rel_err": float(art.r_hat_rel_err[-1])
            if np.isfinite(art.r_hat_rel_err[-1])
            else None,
        },
        "observability": observability,
        "per_epoch_files": ["truth.csv", "estimate.csv", "errors.csv"],
    }


def run_scenario(
    config_path: Path,
    out_dir: Path,
    seed: Optional[int] = None,
    paper_mode: bool = False,
) -> Path:
    """CLI ``run`` verb: simulate, filter, and write the four output files."""
    raw = load_config(config_path)
    cfg, opts = parse_config(raw, seed_override=seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    art = execute_run(cfg, opts, paper_mode=paper_mode)
    _write_csv(out_dir / "truth.csv", TRUTH_HEADER, art.truth_rows)
    _write_csv(out_dir / "estimate.csv", ESTIMATE_HEADER, art.est_rows)
    err_rows = [
        (float(t), float(p), float(a), float(tp), float(rr) if np.isfinite(rr) else "")
        for t, p, a, tp, rr in zip(
            art.times, art.pos_err, art.att_err, art.trace_P, art.r_hat_rel_err
        )
    ]
    _write_csv(out_dir / "errors.csv", ERRORS_HEADER, err_rows)

    observability = _observability_findings(cfg, opts)
    raw_echo = dict(raw)
    raw_echo["seed"] = cfg.seed
    report = _report_dict(raw_echo, cfg, art, observability)
    report_path = out_dir / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report_path


def analyze_observability(
    config_path: Path, out_dir: Path, seed: Optional[int] = None
) -> Path:
    """CLI ``observability`` verb: segment-by-segment rank findings only."""
    raw = load_config(config_path)
    cfg, opts = parse_config(raw, seed_override=seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    findings = _observability_findings(cfg, opts)
    findings["config"] = raw
    findings["seed"] = cfg.seed
    out_path = out_dir / "observability.json"
    with open(out_path, "w") as fh:
        json.dump(findings, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_path


_COMPARE_METRICS = [
    "final_pos_err_m",
    "final_att_err_deg",
    "rmse_pos_m",
    "converged",
]


def compare_runs(report_paths: List[Path], out_path: Path) -> List[str]:
    """Aligned metric table over several run reports plus verdict lines."""
    if len(report_paths) < 2:
        raise ValueError("need at least two reports to compare")
    reports = []
    for p in report_paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"report not found: {p}")
        with open(p) as fh:
            reports.append((p.stem if p.stem != "report" else p.parent.name, json.load(fh)))

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric"] + [name for name, _ in reports])
        for metric in _COMPARE_METRICS:
            writer.writerow(
                [metric] + [rep["metrics"].get(metric) for _, rep in reports]
            )

    verdicts = []
    vals = [(name, rep["metrics"]["final_pos_err_m"]) for name, rep in reports]
    best = min(vals, key=lambda nv: nv[1])
    for name, v in vals:
        if name != best[0]:
            rel = "smaller" if best[1] < v else "not smaller"
            verdicts.append(
                f"final position error: {best[0]} ({best[1]:.4g} m) {rel} than {name} ({v:.4g} m)"
            )
    for name, rep in reports:
        verdicts.append(f"{name}: converged={rep['metrics']['converged']}")
    return verdicts


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imuslam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="simulate a scenario and run the filter")
    run_p.add_argument("--config", required=True, type=Path)
    run_p.add_argument("--out", required=True, type=Path)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--paper-mode", action="store_true")

    obs_p = sub.add_parser("observability", help="rank analysis along the trajectory")
    obs_p.add_argument("--config", required=True, type=Path)
    obs_p.add_argument("--out", required=True, type=Path)
    obs_p.add_argument("--seed", type=int, default=None)

    cmp_p = sub.add_parser("compare", help="tabulate metrics across run reports")
    cmp_p.add_argument("reports", nargs="+", type=Path)
    cmp_p.add_argument("--out", required=True, type=Path)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            path = run_scenario(args.config, args.out, seed=args.seed, paper_mode=args.paper_mode)
            print(f"wrote {path}")
        elif args.command == "observability":
            path = analyze_observability(args.config, args.out, seed=args.seed)
            print(f"wrote {path}")
        elif args.command == "compare":
            verdicts = compare_runs(args.reports, args.out)
            for line in verdicts:
                print(line)
            print(f"wrote {args.out}")
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
