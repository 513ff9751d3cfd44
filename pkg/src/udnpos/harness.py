"""Experiment driver: runs scenarios, computes metrics, writes reports.

A scenario run is deterministic per seed: the seed spawns independent RNG
streams for route, truth clocks/LoS detection, and measurement noise. Reports
are written as per-step trace CSVs, an aggregate summary CSV and a JSON
report; every figure-producing path also writes the underlying CSV. Schemas
are documented in docs/formats.md.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arraychannel import build_synthetic_manifold, cylindrical_array, load_manifold
from .config import ScenarioConfig
from .doatoa import CwnaParams
from .fusion import DoaOnlyFilter, PosClockFilter, PosSyncFilter, SyncFusionState
from .gridmap import build_map, deploy_ans
from .initializer import attach_clock_prior, initial_kinematic_state, select_reference_an, warmup_doa_only
from .motion import generate_trajectory, random_route
from .scenario import ChannelEmitter, MeasurementNoise, emit_measurements, simulate_truth, true_observables
from .statespace import wrap_angle

TRACE_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1

TRACE_COLUMNS = [
    "step", "t", "k_used",
    "x_true", "y_true", "vx_true", "vy_true", "rho_true", "alpha_true",
    "x_est", "y_est", "vx_est", "vy_est", "rho_est", "alpha_est",
    "var_x", "var_y", "cov_xy", "var_vx", "var_vy", "var_rho", "var_alpha",
    "nees_pos", "an_offset_rmse", "gauge_offset",
]


def nees(estimates: np.ndarray, truths: np.ndarray, covs: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-step normalized estimation error squared on the position block.

    Steps with a singular covariance are skipped (NaN) and counted.
    """
    estimates = np.asarray(estimates, dtype=float)
    truths = np.asarray(truths, dtype=float)
    covs = np.asarray(covs, dtype=float)
    n = estimates.shape[0]
    out = np.full(n, np.nan)
    skipped = 0
    for k in range(n):
        err = truths[k] - estimates[k]
        cov = covs[k]
        if np.linalg.eigvalsh(cov)[0] <= 0.0:
            skipped += 1
            continue
        out[k] = float(err @ np.linalg.solve(cov, err))
    return out, skipped


@dataclass
class RunResult:
    seed: int
    n_steps: int
    burn_in_excluded: int
    position_rmse: float
    position_mse_sum: float  # sum of squared position errors past burn-in
    un_clock_rmse: float
    an_clock_rmse: float
    an_clock_rmse_tail: float
    doa_rmse: float
    toa_rmse: float
    nees_series: np.ndarray
    nees_skipped: int
    trace_rows: list[list]

    def summary_row(self) -> dict:
        return {
            "seed": self.seed,
            "steps": self.n_steps,
            "position_rmse_m": self.position_rmse,
            "un_clock_rmse_s": self.un_clock_rmse,
            "an_clock_rmse_s": self.an_clock_rmse,
            "an_clock_rmse_tail_s": self.an_clock_rmse_tail,
            "doa_rmse_rad": self.doa_rmse,
            "toa_rmse_s": self.toa_rmse,
            "mean_nees": float(np.nanmean(self.nees_series)) if self.nees_series.size else math.nan,
            "nees_skipped": self.nees_skipped,
            "burn_in_excluded": self.burn_in_excluded,
        }


@dataclass
class MetricsReport:
    """Aggregate over the scenario's Monte Carlo runs."""

    config_name: str
    runs: list[RunResult]
    burn_in: int

    @property
    def position_rmse(self) -> float:
        tot = sum(r.position_mse_sum for r in self.runs)
        n = sum(r.n_steps - r.burn_in_excluded for r in self.runs)
        return math.sqrt(tot / n) if n else math.nan

    @property
    def median_position_rmse(self) -> float:
        return float(np.median([r.position_rmse for r in self.runs]))

    @property
    def un_clock_rmse(self) -> float:
        vals = [r.un_clock_rmse**2 for r in self.runs if math.isfinite(r.un_clock_rmse)]
        return math.sqrt(float(np.mean(vals))) if vals else math.nan

    @property
    def an_clock_rmse_tail(self) -> float:
        vals = [r.an_clock_rmse_tail**2 for r in self.runs if math.isfinite(r.an_clock_rmse_tail)]
        return math.sqrt(float(np.mean(vals))) if vals else math.nan

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config": self.config_name,
            "aggregate": {
                "position_rmse_m": self.position_rmse,
                "median_position_rmse_m": self.median_position_rmse,
                "un_clock_rmse_s": self.un_clock_rmse,
                "an_clock_rmse_tail_s": self.an_clock_rmse_tail,
            },
            "runs": [r.summary_row() for r in self.runs],
        }


def _measurement_errors(meas_list, truth, step, ans_by_id):
    errs = []
    for m in meas_list:
        an = ans_by_id[m.an_id]
        azimuth, _, toa = true_observables(
            truth.position[step], truth.un_offset[step], an, truth.an_offset_at(step, m.an_id)
        )
        errs.append((wrap_angle(m.azimuth - azimuth), m.toa - toa))
    return errs


def run_single(cfg: ScenarioConfig, seed: int) -> RunResult:
    """One complete seeded run: truth, init, tracking, per-step metrics."""
    ss = np.random.SeedSequence(seed)
    route_rng, truth_rng, meas_rng = (np.random.default_rng(c) for c in ss.spawn(3))

    grid_map = build_map(cfg.map_variant)
    ans = deploy_ans(grid_map, cfg.isd)
    ans_by_id = {an.an_id: an for an in ans}
    waypoints = random_route(grid_map, route_rng, cfg.n_intersections)
    trajectory = generate_trajectory(waypoints, cfg.motion_config(), cfg.dt)
    truth = simulate_truth(
        grid_map,
        ans,
        trajectory,
        cfg.truth_clock_params(),
        cfg.dt,
        truth_rng,
        k_max=cfg.k_max,
        detection_p=cfg.detection_p,
        an_offset_std=cfg.an_offset_std,
    )

    if cfg.fidelity == "channel":
        chan = cfg.channel
        if chan.manifold_file:
            manifold = load_manifold(chan.manifold_file)
        else:
            manifold = build_synthetic_manifold(cylindrical_array(), chan.m_a, chan.m_e)
        emitter = ChannelEmitter(
            manifold=manifold,
            grid=cfg.pilot.grid(),
            cwna=CwnaParams(sigma_w=chan.sigma_w, dt=cfg.dt),
            snr_db_range=(chan.snr_db_min, chan.snr_db_max),
        )

        def emit(step):
            return emitter.emit(truth, step, ans, meas_rng)

    else:
        noise = cfg.measurement_noise()

        def emit(step):
            return emit_measurements(truth, step, ans, noise, meas_rng)

    init_cfg = cfg.init_config()
    params = cfg.fusion_params()

    start = next((k for k in range(len(truth)) if truth.los[k]), None)
    if start is None:
        raise RuntimeError("route has no LoS AN at any step")
    if start + init_cfg.n_warmup >= len(truth):
        raise RuntimeError("route too short for the warmup phase")

    los0 = [ans_by_id[i] for i in truth.los[start]]
    kin0 = initial_kinematic_state(los0, init_cfg)
    warm_stream = []
    for k in range(start, start + init_cfg.n_warmup):
        meas = emit(k)
        warm_stream.append((meas, [ans_by_id[m.an_id] for m in meas]))
    if len(los0) == 1 and warm_stream[0][0]:
        # single-AN centroid coincides with the AN, a degenerate bearing
        # linearization point: move the prior along the first measured bearing
        # at a nominal half-ISD range, with a prior broad enough to cover the
        # guessed range
        first = warm_stream[0][0][0]
        offset = 0.5 * cfg.isd * np.array([math.cos(first.azimuth), math.sin(first.azimuth)])
        mean = kin0.mean.copy()
        mean[:2] = los0[0].xy() + offset
        cov = kin0.cov.copy()
        cov[:2, :2] = max(cfg.isd, 2.0 * init_cfg.sigma_p0_floor) ** 2 * np.eye(2)
        kin0 = type(kin0)(mean=mean, cov=cov)
    warm = warmup_doa_only(kin0, warm_stream, init_cfg.n_warmup, params)
    state6 = attach_clock_prior(warm, init_cfg)

    main_start = start + init_cfg.n_warmup
    ref_ans = [ans_by_id[i] for i in truth.los[main_start]] or los0
    reference_an = select_reference_an(ref_ans, warm.mean[:2])

    if cfg.filter == "pos-clock":
        filt = PosClockFilter(state6, params)
    elif cfg.filter == "doa-only":
        filt = DoaOnlyFilter(state6, params)
    else:
        sync0 = SyncFusionState.from_un_state(state6, reference_an, t=truth.t[main_start])
        filt = PosSyncFilter(sync0, params, prior_offset_var=cfg.an_prior_offset_std**2)

    ref_col = truth.an_ids.index(reference_an)
    trace_rows: list[list] = []
    pos_sq_errs: list[float] = []
    clock_sq_errs: list[float] = []
    an_sq_by_step: list[float] = []
    doa_errs: list[float] = []
    toa_errs: list[float] = []
    est_pos, true_pos, pos_covs = [], [], []

    for idx, step in enumerate(range(main_start, len(truth))):
        meas = emit(step)
        meas_ans = [ans_by_id[m.an_id] for m in meas]
        filt.step(meas, meas_ans)
        un = filt.un_state
        mean, cov = un.mean, un.cov

        # gauge for unsynchronized networks: estimates are relative to the
        # reference AN's (static) true offset
        ref_offset = truth.an_offsets[step, ref_col] if cfg.filter == "pos-sync" else 0.0
        pos_err = truth.position[step] - mean[:2]
        clock_err = (truth.un_offset[step] + ref_offset) - mean[4]

        an_rmse_step = math.nan
        if cfg.filter == "pos-sync":
            errs = []
            for an_id in filt.state.an_ids:
                if an_id == reference_an:
                    continue
                est, _ = filt.state.offset_estimate(an_id)
                true_rel = truth.an_offset_at(step, an_id) - truth.an_offsets[step, ref_col]
                errs.append((est - true_rel) ** 2)
            if errs:
                an_rmse_step = math.sqrt(float(np.mean(errs)))

        for dphi, dtau in _measurement_errors(meas, truth, step, ans_by_id):
            doa_errs.append(dphi)
            toa_errs.append(dtau)

        past_burn_in = idx >= cfg.burn_in
        if past_burn_in:
            pos_sq_errs.append(float(pos_err @ pos_err))
            clock_sq_errs.append(clock_err**2)
            if not math.isnan(an_rmse_step):
                an_sq_by_step.append(an_rmse_step**2)
            est_pos.append(mean[:2])
            true_pos.append(truth.position[step].copy())
            pos_covs.append(cov[:2, :2])

        nees_val = math.nan  # filled after the loop (needs the matrix solve)
        trace_rows.append(
            [
                step,
                truth.t[step],
                len(meas),
                *truth.position[step],
                *truth.velocity[step],
                truth.un_offset[step],
                truth.un_skew[step],
                *mean,
                cov[0, 0],
                cov[1, 1],
                cov[0, 1],
                cov[2, 2],
                cov[3, 3],
                cov[4, 4],
                cov[5, 5],
                nees_val,
                an_rmse_step,
                ref_offset,
            ]
        )

    nees_series, skipped = (
        nees(np.array(est_pos), np.array(true_pos), np.array(pos_covs))
        if est_pos
        else (np.array([]), 0)
    )
    for row, val in zip(trace_rows[cfg.burn_in :], nees_series):
        row[-3] = val

    n_main = len(trace_rows)
    tail = an_sq_by_step[len(an_sq_by_step) // 2 :]
    return RunResult(
        seed=seed,
        n_steps=n_main,
        burn_in_excluded=min(cfg.burn_in, n_main),
        position_rmse=math.sqrt(float(np.mean(pos_sq_errs))) if pos_sq_errs else math.nan,
        position_mse_sum=float(np.sum(pos_sq_errs)),
        un_clock_rmse=math.sqrt(float(np.mean(clock_sq_errs))) if clock_sq_errs else math.nan,
        an_clock_rmse=math.sqrt(float(np.mean(an_sq_by_step))) if an_sq_by_step else math.nan,
        an_clock_rmse_tail=math.sqrt(float(np.mean(tail))) if tail else math.nan,
        doa_rmse=math.sqrt(float(np.mean(np.square(doa_errs)))) if doa_errs else math.nan,
        toa_rmse=math.sqrt(float(np.mean(np.square(toa_errs)))) if toa_errs else math.nan,
        nees_series=nees_series,
        nees_skipped=skipped,
        trace_rows=trace_rows,
    )


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_trace_csv(result: RunResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in result.trace_rows:
            writer.writerow([_fmt(v) for v in row])


def write_summary_csv(report: MetricsReport, path: Path) -> None:
    fields = list(report.runs[0].summary_row().keys()) if report.runs else ["seed"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for r in report.runs:
            writer.writerow([_fmt(v) for v in r.summary_row().values()])
        agg = {
            "seed": "aggregate",
            "steps": sum(r.n_steps for r in report.runs),
            "position_rmse_m": report.position_rmse,
            "un_clock_rmse_s": report.un_clock_rmse,
            "an_clock_rmse_s": report.an_clock_rmse_tail,
            "an_clock_rmse_tail_s": report.an_clock_rmse_tail,
            "doa_rmse_rad": math.nan,
            "toa_rmse_s": math.nan,
            "mean_nees": math.nan,
            "nees_skipped": 0,
            "burn_in_excluded": report.burn_in,
        }
        writer.writerow([agg["seed"]] + [_fmt(agg[k]) for k in fields[1:]])


def _run_single_star(args):
    return run_single(*args)


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path | None = None) -> MetricsReport:
    """Run every seed of a scenario and persist traces + report.

    out_dir resolution order: argument, cfg.out_dir, $UDNPOS_OUT, ./out.
    Passing out_dir="" skips writing entirely.
    """
    cfg.validate()
    seeds = cfg.run_seeds()
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_single_star, [(cfg, s) for s in seeds]))
    else:
        results = [run_single(cfg, s) for s in seeds]
    results.sort(key=lambda r: r.seed)
    report = MetricsReport(config_name=cfg.name, runs=results, burn_in=cfg.burn_in)

    if out_dir == "":
        return report
    base = Path(out_dir or cfg.out_dir or os.environ.get("UDNPOS_OUT", "out")) / cfg.name
    base.mkdir(parents=True, exist_ok=True)
    for r in results:
        write_trace_csv(r, base / f"run_{r.seed}.csv")
    write_summary_csv(report, base / "summary.csv")
    with open(base / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def sweep(
    configs: list[tuple[str, ScenarioConfig]],
    out_dir: str | Path | None = None,
) -> tuple[list[dict], bool]:
    """Run a list of labeled scenarios; failures are recorded, not fatal.

    Returns (table rows, all_ok). Writes sweep.csv and sweep.svg under the
    output directory.
    """
    rows: list[dict] = []
    all_ok = True
    base = Path(out_dir or os.environ.get("UDNPOS_OUT", "out"))
    for label, cfg in configs:
        try:
            report = run_scenario(cfg, out_dir=base)
            rows.append(
                {
                    "label": label,
                    "status": "ok",
                    "position_rmse_m": report.position_rmse,
                    "median_position_rmse_m": report.median_position_rmse,
                    "un_clock_rmse_s": report.un_clock_rmse,
                    "an_clock_rmse_tail_s": report.an_clock_rmse_tail,
                }
            )
        except Exception as exc:  # noqa: BLE001 - partial-failure policy
            all_ok = False
            rows.append(
                {
                    "label": label,
                    "status": f"failed: {exc}",
                    "position_rmse_m": math.nan,
                    "median_position_rmse_m": math.nan,
                    "un_clock_rmse_s": math.nan,
                    "an_clock_rmse_tail_s": math.nan,
                }
            )
    base.mkdir(parents=True, exist_ok=True)
    _write_sweep_csv(rows, base / "sweep.csv")
    _write_sweep_svg(rows, base / "sweep.svg")
    return rows, all_ok


def _write_sweep_csv(rows: list[dict], path: Path) -> None:
    fields = [
        "label", "status", "position_rmse_m", "median_position_rmse_m",
        "un_clock_rmse_s", "an_clock_rmse_tail_s",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow(
                [row["label"], row["status"]] + [_fmt(row[k]) for k in fields[2:]]
            )


def _write_sweep_svg(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "udnpos"
    import matplotlib.pyplot as plt

    ok = [r for r in rows if r["status"] == "ok"]
    fig, axes = plt.subplots(1, 2, figsize=(max(6, 1.5 * len(ok) + 3), 4))
    labels = [r["label"] for r in ok]
    x = np.arange(len(ok))
    axes[0].bar(x, [r["position_rmse_m"] for r in ok], color="tab:blue")
    axes[0].set_ylabel("position RMSE [m]")
    axes[1].bar(x, [r["un_clock_rmse_s"] * 1e9 for r in ok], color="tab:orange")
    axes[1].set_ylabel("UN clock RMSE [ns]")
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Replay: recompute metrics from a persisted trace
# ---------------------------------------------------------------------------


def replay_trace(path: str | Path, burn_in: int = 10) -> dict:
    """Recompute RMSE/NEES metrics from a per-step trace CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"empty trace {path}")
    take = rows[burn_in:]
    pos_sq, clock_sq = [], []
    est, tru, covs = [], [], []
    for row in take:
        err = (
            float(row["x_true"]) - float(row["x_est"]),
            float(row["y_true"]) - float(row["y_est"]),
        )
        pos_sq.append(err[0] ** 2 + err[1] ** 2)
        gauge = float(row.get("gauge_offset", 0.0) or 0.0)
        clock_sq.append((float(row["rho_true"]) + gauge - float(row["rho_est"])) ** 2)
        est.append([float(row["x_est"]), float(row["y_est"])])
        tru.append([float(row["x_true"]), float(row["y_true"])])
        covs.append(
            [
                [float(row["var_x"]), float(row["cov_xy"])],
                [float(row["cov_xy"]), float(row["var_y"])],
            ]
        )
    series, skipped = nees(np.array(est), np.array(tru), np.array(covs))
    return {
        "steps": len(rows),
        "burn_in_excluded": min(burn_in, len(rows)),
        "position_rmse_m": math.sqrt(float(np.mean(pos_sq))),
        "un_clock_rmse_s": math.sqrt(float(np.mean(clock_sq))),
        "mean_nees": float(np.nanmean(series)) if series.size else math.nan,
        "nees_skipped": skipped,
    }
