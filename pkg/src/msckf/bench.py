"""Monte-Carlo benchmark of the update strategies plus CSV/CLI plumbing.

A benchmark run simulates one seeded world, initializes the filter at a
perturbed truth state, feeds the interleaved IMU/camera streams through
the chosen update schedule, and records per-epoch pose errors against the
analytic truth.  ``run_monte_carlo`` aggregates many seeds into RMSE
series; ``emit_csv`` writes the files consumed by the plotting script.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import quat_angle, quat_conj, quat_mul
from .propagation import IMU_ERR_DIM, ImuState
from .sim import SimConfig, export_sensors, load_sensors, simulate
from .state import AugmentedState, apply_correction
from .strategies import MsckfFilter, Strategy, UpdateReport, constraint_counter

DIVERGENCE_LIMIT_M = 1e3

# initial 1-sigma uncertainties per error block: attitude, velocity,
# position, gyro bias (100 deg/h), accel bias (200 ug), mounting attitude,
# lever arm
INIT_SIGMA_ATT = np.radians(3.0)
INIT_SIGMA_VEL = 0.1
INIT_SIGMA_POS = 0.1
INIT_SIGMA_BG = 100.0 * np.pi / 180.0 / 3600.0
INIT_SIGMA_BA = 200e-6 * 9.81
INIT_SIGMA_EXT_ATT = np.radians(0.5)
INIT_SIGMA_EXT_POS = 0.01


def default_init_sigmas() -> np.ndarray:
    sig = np.empty(IMU_ERR_DIM)
    sig[0:3] = INIT_SIGMA_ATT
    sig[3:6] = INIT_SIGMA_VEL
    sig[6:9] = INIT_SIGMA_POS
    sig[9:12] = INIT_SIGMA_BG
    sig[12:15] = INIT_SIGMA_BA
    sig[15:18] = INIT_SIGMA_EXT_ATT
    sig[18:21] = INIT_SIGMA_EXT_POS
    return sig


@dataclass
class BenchConfig:
    strategy: Strategy = field(default_factory=Strategy)
    runs: int = 50
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    n_max: int = 20
    min_track_len: int = 3
    filter_pixel_sigma: float = 1.0   # measurement noise assumed by the filter, px
    use_chi2_gate: bool = False
    init_sigmas: np.ndarray = field(default_factory=default_init_sigmas)
    zero_init_error: bool = False
    workers: int = 1
    out_dir: str = "bench_out"

    def __post_init__(self):
        self.init_sigmas = np.asarray(self.init_sigmas, dtype=float)
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


@dataclass
class RunResult:
    seed: int
    t: np.ndarray
    pos_err: np.ndarray
    att_err_deg: np.ndarray
    report: UpdateReport
    mean_frame_time: float
    diverged: bool
    max_nullspace_defect: float
    update_trace_violations: int = 0


@dataclass
class MonteCarloResult:
    label: str
    t: np.ndarray
    pos_rmse: np.ndarray
    att_rmse: np.ndarray
    avg_pos_rmse: float
    avg_att_rmse: float
    constraints_total: int
    updates_total: int
    mean_frame_time: float
    diverged_runs: int
    unreliable: bool
    max_nullspace_defect: float = 0.0
    update_trace_violations: int = 0


def _initial_state(cfg: BenchConfig, world, rng) -> tuple:
    s0 = world.truth(0.0)
    imu = ImuState(q_GI=s0.q_GI, v=s0.v, p=s0.p,
                   bg=world.bg0, ba=world.ba0,
                   q_CI=cfg.sim.q_CI, p_IC=cfg.sim.p_IC)
    P0 = np.diag(cfg.init_sigmas**2)
    if not cfg.zero_init_error:
        dx = cfg.init_sigmas * rng.normal(size=IMU_ERR_DIM)
        imu = apply_correction(AugmentedState(imu), dx).imu
    return imu, P0


def _build_filter(cfg: BenchConfig, imu, P0) -> MsckfFilter:
    return MsckfFilter(
        imu, P0, cfg.sim.noise, strategy=cfg.strategy, n_max=cfg.n_max,
        min_track_len=cfg.min_track_len,
        sigma_px_norm=cfg.filter_pixel_sigma / cfg.sim.fx,
        use_chi2_gate=cfg.use_chi2_gate, gravity=cfg.sim.gravity)


def _drive(filt: MsckfFilter, imu_series, frames, truth_poses):
    """Feed interleaved IMU/camera data; returns the error series and report.

    ``truth_poses`` yields (t, q_GI, p) per camera epoch.
    """
    n_frames = len(frames)
    pos_err = np.zeros(n_frames)
    att_err = np.zeros(n_frames)
    ts = np.zeros(n_frames)
    reports = []
    frame_time = 0.0
    diverged = False

    imu_idx = 0
    for k, frame in enumerate(frames):
        while imu_idx + 1 < len(imu_series) and imu_series.ts[imu_idx + 1] <= frame.t + 1e-9:
            filt.process_imu(imu_series.sample(imu_idx), imu_series.sample(imu_idx + 1))
            imu_idx += 1
        t0 = time.perf_counter()
        reports.append(filt.process_frame(frame.t, frame.observations))
        frame_time += time.perf_counter() - t0

        t_truth, q_truth, p_truth = truth_poses[k]
        ts[k] = frame.t
        pos_err[k] = float(np.linalg.norm(filt.state.imu.p - p_truth))
        att_err[k] = np.degrees(quat_angle(quat_mul(q_truth, quat_conj(filt.state.imu.q_GI))))
        if pos_err[k] > DIVERGENCE_LIMIT_M:
            diverged = True
            pos_err[k + 1:] = pos_err[k]
            att_err[k + 1:] = att_err[k]
            ts[k + 1:] = [f.t for f in frames[k + 1:]]
            break

    return ts, pos_err, att_err, constraint_counter(reports), frame_time / n_frames, diverged


def run_once(cfg: BenchConfig, seed: int) -> RunResult:
    """One seeded simulation run of the configured strategy."""
    world = simulate(replace(cfg.sim, seed=seed))
    rng_init = np.random.default_rng(np.random.SeedSequence([seed, 0xA5]))
    imu0, P0 = _initial_state(cfg, world, rng_init)
    filt = _build_filter(cfg, imu0, P0)

    truth_poses = []
    for frame in world.frames:
        s = world.truth(frame.t)
        truth_poses.append((frame.t, s.q_GI, s.p))

    ts, pos_err, att_err, report, mean_time, diverged = _drive(
        filt, world.imu, world.frames, truth_poses)
    return RunResult(seed=seed, t=ts, pos_err=pos_err, att_err_deg=att_err,
                     report=report, mean_frame_time=mean_time, diverged=diverged,
                     max_nullspace_defect=filt.last_nullspace_defect,
                     update_trace_violations=filt.update_trace_violations)


def _run_seed(args):
    cfg, seed = args
    return run_once(cfg, seed)


def rmse(series_list):
    """Per-epoch RMSE across runs plus its time average."""
    if not series_list:
        raise ValueError("rmse needs at least one series")
    stacked = np.vstack(series_list)
    per_epoch = np.sqrt(np.mean(stacked**2, axis=0))
    return per_epoch, float(np.mean(per_epoch))


def run_monte_carlo(cfg: BenchConfig) -> MonteCarloResult:
    """Aggregate ``cfg.runs`` seeded runs into RMSE series and totals.

    Runs map to seeds ``cfg.seed .. cfg.seed + runs - 1`` regardless of the
    worker count, and the reduction is ordered by seed, so the aggregate is
    independent of parallelism.
    """
    seeds = [cfg.seed + i for i in range(cfg.runs)]
    if cfg.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_seed, [(cfg, s) for s in seeds]))
    else:
        results = [run_once(cfg, s) for s in seeds]
    results.sort(key=lambda r: r.seed)

    included = [r for r in results if not r.diverged]
    diverged = len(results) - len(included)
    if not included:
        raise RuntimeError("all Monte-Carlo runs diverged")
    pos_rmse, avg_pos = rmse([r.pos_err for r in included])
    att_rmse, avg_att = rmse([r.att_err_deg for r in included])
    total = constraint_counter([r.report for r in included])
    return MonteCarloResult(
        label=cfg.strategy.label,
        t=included[0].t,
        pos_rmse=pos_rmse,
        att_rmse=att_rmse,
        avg_pos_rmse=avg_pos,
        avg_att_rmse=avg_att,
        constraints_total=total.constraints,
        updates_total=total.updates,
        mean_frame_time=float(np.mean([r.mean_frame_time for r in included])),
        diverged_runs=diverged,
        unreliable=diverged > 0.2 * cfg.runs,
        max_nullspace_defect=max(r.max_nullspace_defect for r in included),
        update_trace_violations=sum(r.update_trace_violations for r in included),
    )


def replay_run(cfg: BenchConfig, sensor_dir: str) -> RunResult:
    """Run the configured strategy on an exported sensor-stream directory.

    The filter initializes at the first truth pose; the initial velocity is
    finite-differenced from the first two truth positions and the bias
    estimates start at zero (the truth CSV carries poses only).
    """
    imu_series, frames, truth_rows = load_sensors(sensor_dir)
    t0, q0, p0 = truth_rows[0]
    if len(truth_rows) > 1:
        t1, _, p1 = truth_rows[1]
        v0 = (p1 - p0) / (t1 - t0)
    else:
        v0 = np.zeros(3)
    imu0 = ImuState(q_GI=q0, v=v0, p=p0,
                    q_CI=cfg.sim.q_CI, p_IC=cfg.sim.p_IC)
    P0 = np.diag(cfg.init_sigmas**2)
    filt = _build_filter(cfg, imu0, P0)
    ts, pos_err, att_err, report, mean_time, diverged = _drive(
        filt, imu_series, frames, truth_rows)
    return RunResult(seed=-1, t=ts, pos_err=pos_err, att_err_deg=att_err,
                     report=report, mean_frame_time=mean_time, diverged=diverged,
                     max_nullspace_defect=filt.last_nullspace_defect,
                     update_trace_violations=filt.update_trace_violations)


def result_from_single_run(label: str, run: RunResult) -> MonteCarloResult:
    """Present one run in the aggregate schema (RMSE of one run = |error|)."""
    return MonteCarloResult(
        label=label, t=run.t, pos_rmse=np.abs(run.pos_err),
        att_rmse=np.abs(run.att_err_deg),
        avg_pos_rmse=float(np.mean(np.abs(run.pos_err))),
        avg_att_rmse=float(np.mean(np.abs(run.att_err_deg))),
        constraints_total=run.report.constraints,
        updates_total=run.report.updates,
        mean_frame_time=run.mean_frame_time,
        diverged_runs=int(run.diverged),
        unreliable=run.diverged,
    )


def emit_csv(aggregates, out_dir: str):
    """Write one RMSE-series CSV per strategy and a shared summary CSV."""
    os.makedirs(out_dir, exist_ok=True)
    for agg in aggregates:
        path = os.path.join(out_dir, f"rmse_{agg.label}.csv")
        with open(path, "w") as fh:
            fh.write("t,pos_rmse_m,att_rmse_deg\n")
            for t, p, a in zip(agg.t, agg.pos_rmse, agg.att_rmse):
                fh.write(f"{t:.17g},{p:.17g},{a:.17g}\n")
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write("strategy,pos_rmse_m,att_rmse_deg,constraints_total,"
                 "updates_total,mean_frame_time_s,diverged_runs\n")
        for agg in aggregates:
            fh.write(f"{agg.label},{agg.avg_pos_rmse:.17g},{agg.avg_att_rmse:.17g},"
                     f"{agg.constraints_total},{agg.updates_total},"
                     f"{agg.mean_frame_time:.17g},{agg.diverged_runs}\n")


# -- configuration file and CLI ------------------------------------------------

_CONFIG_KEYS = {
    "strategy": str, "k": int, "runs": int, "seed": int, "out": str,
    "workers": int, "duration": float, "imu_rate": int, "cam_rate": int,
    "n_features": int, "pixel_sigma": float, "window": int,
    "min_track_len": int, "chi2_gate": bool, "filter_pixel_sigma": float,
}


def parse_config_file(path: str) -> dict:
    """Flat ``key = value`` configuration (a TOML-compatible subset)."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            caster = _CONFIG_KEYS[key]
            if caster is bool:
                if val.lower() not in ("true", "false"):
                    raise ValueError(f"{path}:{lineno}: expected true/false")
                out[key] = val.lower() == "true"
            elif caster is str:
                out[key] = val.strip("\"'")
            else:
                out[key] = caster(val)
    return out


def _strategies_from(name: str, k: int):
    if name == "all":
        return [Strategy("delayed"), Strategy("immediate-k", k=k),
                Strategy("immediate-all")]
    if name == "immediate-k":
        return [Strategy("immediate-k", k=k)]
    return [Strategy(name)]


def build_bench_config(settings: dict) -> BenchConfig:
    sim_kw = {}
    for key, field_name in (("duration", "duration"), ("imu_rate", "imu_rate"),
                            ("cam_rate", "cam_rate"), ("n_features", "n_features"),
                            ("pixel_sigma", "pixel_sigma")):
        if key in settings:
            sim_kw[field_name] = settings[key]
    cfg = BenchConfig(sim=SimConfig(**sim_kw))
    if "runs" in settings:
        cfg.runs = settings["runs"]
    if "seed" in settings:
        cfg.seed = settings["seed"]
    if "out" in settings:
        cfg.out_dir = settings["out"]
    if "workers" in settings:
        cfg.workers = settings["workers"]
    if "window" in settings:
        cfg.n_max = settings["window"]
    if "min_track_len" in settings:
        cfg.min_track_len = settings["min_track_len"]
    if "chi2_gate" in settings:
        cfg.use_chi2_gate = settings["chi2_gate"]
    if "filter_pixel_sigma" in settings:
        cfg.filter_pixel_sigma = settings["filter_pixel_sigma"]
    if cfg.runs < 1:
        raise ValueError("runs must be >= 1")
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Monte-Carlo comparison of sliding-window update strategies")
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--strategy",
                        choices=["delayed", "immediate-all", "immediate-k", "all"],
                        help="update schedule to run (default: all)")
    parser.add_argument("--k", type=int, help="view count for immediate-k (default 3)")
    parser.add_argument("--runs", type=int, help="Monte-Carlo run count")
    parser.add_argument("--seed", type=int, help="base seed; run i uses seed+i")
    parser.add_argument("--out", help="output directory for CSV files")
    parser.add_argument("--workers", type=int, help="parallel worker processes")
    parser.add_argument("--export-sensors", action="store_true",
                        help="export the base seed's sensor streams as CSV")
    parser.add_argument("--replay", metavar="DIR",
                        help="replay an exported sensor-stream directory")
    args = parser.parse_args(argv)

    settings = parse_config_file(args.config) if args.config else {}
    for key in ("strategy", "k", "runs", "seed", "out", "workers"):
        val = getattr(args, key)
        if val is not None:
            settings[key] = val

    cfg = build_bench_config(settings)
    strategies = _strategies_from(settings.get("strategy", "all"),
                                  settings.get("k", 3))

    aggregates = []
    if args.replay:
        for strat in strategies:
            run = replay_run(replace(cfg, strategy=strat), args.replay)
            agg = result_from_single_run(strat.label, run)
            aggregates.append(agg)
            print(f"{strat.label}: mean |pos err| {agg.avg_pos_rmse:.3f} m, "
                  f"mean |att err| {agg.avg_att_rmse:.3f} deg")
    else:
        if args.export_sensors:
            world = simulate(replace(cfg.sim, seed=cfg.seed))
            sensor_dir = os.path.join(cfg.out_dir, "sensors")
            export_sensors(world, sensor_dir)
            print(f"sensor streams written to {sensor_dir}")
        for strat in strategies:
            agg = run_monte_carlo(replace(cfg, strategy=strat))
            aggregates.append(agg)
            flag = "  [unreliable: >20% diverged]" if agg.unreliable else ""
            print(f"{strat.label}: pos RMSE {agg.avg_pos_rmse:.3f} m, "
                  f"att RMSE {agg.avg_att_rmse:.3f} deg, "
                  f"{agg.diverged_runs} diverged{flag}")
    emit_csv(aggregates, cfg.out_dir)
    print(f"results written to {cfg.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
