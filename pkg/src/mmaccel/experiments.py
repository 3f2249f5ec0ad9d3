"""Seeded experiment runners and tabular output.

Three experiment families:

* snapshot matching — simulate a reference ensemble to a prior time, continue
  the same path to a grid of target times, match the prior to the targets'
  moments for each (operator, moment count, horizon) cell, and tabulate
  relative moment errors (orders 1..max) and relative stress errors;
* acceleration — accelerated runs against plain microscopic references with
  stress trajectories, absolute errors, and an extrapolated-time summary;
* convergence — deterministic moment recursions for the Ornstein-Uhlenbeck
  model isolating the micro-step and extrapolation-step error orders.

All artifacts embed the resolved configuration and seed in '#'-prefixed
header lines, use RFC-4180 CSV with '.' decimals, and print floats with 17
significant digits.  Replicates are dispatched to a process pool and merged
by replicate index, so thread count never changes the numbers.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .acceleration import RunTrace, UnrecoverableMatchingError, reference_run, run
from .config import ExperimentSpec
from .ensemble import MomentBasis, WeightedEnsemble, restrict, stress
from .matching import KLD, L2D, L2N, MatchConfig, match
from .models import StagnationError, accept_reject_step
from .rng import RandomStreams


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return f"{float(value):.17g}"


def write_csv(path, header_lines, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(line + "\r\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_json(path, header, payload) -> None:
    with open(path, "w") as fh:
        json.dump({"header": header, **payload}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _map_replicates(fn, resolved, replicates, threads):
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, [resolved] * replicates, range(replicates)))
    return [fn(resolved, r) for r in range(replicates)]


def _mean_std(values):
    """Replicate mean and sample standard deviation (NaN-safe, axis 0)."""
    arr = np.asarray(values, dtype=float)
    if arr.shape[0] == 0:
        shape = arr.shape[1:]
        return np.full(shape, np.nan), np.full(shape, np.nan)
    mean = arr.mean(axis=0)
    std = arr.std(axis=0, ddof=1) if arr.shape[0] > 1 else np.zeros_like(mean)
    return mean, std


# --------------------------------------------------------------------------
# Snapshot matching (moment errors vs L, stress errors vs horizon)
# --------------------------------------------------------------------------


def _l2n_big_moments(multipliers, prior_big_moments, L, max_order, gamma):
    """Moments 1..max_order of the L2 projection density.

    The projection adds the correction sum_k lambda_k R_k to the prior, so its
    l-th moment shifts by sum_k lambda_k * integral(R_l R_k) over the interval.
    """
    lam = np.asarray(multipliers, dtype=float)
    out = np.array(prior_big_moments, dtype=float)
    for l in range(1, max_order + 1):
        shift = sum(lam[k] * 2.0 * gamma / (2 * (l + k) + 1) for k in range(L + 1))
        out[l - 1] += shift
    return out


def _l2n_stress(multipliers, prior, model, L):
    """Stress under the L2 projection density.

    The correction term is integrated over (-alpha, alpha) with alpha the
    largest particle extension, where x F(x) is finite; the prior part is the
    usual weighted ensemble average.
    """
    from scipy.integrate import quad

    lam = np.asarray(multipliers, dtype=float)
    b = model.b_param
    gamma = model.gamma
    alpha = float(np.max(np.abs(prior.positions)))
    total = 0.0
    for k in range(L + 1):
        def integrand(x, k=k):
            return b * x * x / (b - x * x) * (x / gamma) ** (2 * k)
        val, _ = quad(integrand, -alpha, alpha, limit=200)
        total += lam[k] * val
    x = prior.positions
    xf = b * x * x / (b - x * x)
    total += float(xf @ prior.weights)
    return (total - 1.0) / model.weissenberg


def _snapshot_replicate(resolved, replicate):
    spec = ExperimentSpec(resolved["kind"], resolved)
    model = spec.model()
    sde = model.as_sde()
    snap = resolved["snapshot"]
    dt = resolved["dt_micro"]
    J = spec.particles
    streams = RandomStreams(spec.seed, replicate)
    x = model.equilibrium_sample(J, streams.initial())

    prior_steps = int(round(snap["prior_time"] / dt))
    for k in range(prior_steps):
        x = accept_reject_step(x, k * dt, dt, streams, k, sde)
    prior = WeightedEnsemble.uniform(x)

    dt_grid = sorted(float(d) for d in snap["dt_grid"])
    targets = {}
    xs = x.copy()
    step = 0
    for d in dt_grid:
        n = int(round(d / dt))
        while step < n:
            tcur = (prior_steps + step) * dt
            xs = accept_reject_step(xs, tcur, dt, streams, prior_steps + step, sde)
            step += 1
        targets[d] = WeightedEnsemble.uniform(xs)

    max_order = int(snap["max_moment_order"])
    big = MomentBasis.fene_even(max_order, model.gamma)
    prior_big = restrict(prior, big)
    mcfg = resolved["matching"]
    rows = {}
    for op in snap["operators"]:
        for L in snap["moment_counts"]:
            basis = MomentBasis.fene_even(int(L), model.gamma)
            config = MatchConfig(operator_kind=op, tolerance=mcfg["tolerance"],
                                 max_iterations=mcfg["max_iterations"])
            for d in dt_grid:
                target = targets[d]
                target_big = restrict(target, big)
                target_stress = stress(target, model)
                outcome = match(target_big[:L], prior, basis, config)
                key = (op, int(L), d)
                if not outcome.converged:
                    rows[key] = {"converged": False, "iterations": outcome.iterations,
                                 "stress_err": np.nan,
                                 "moment_err": np.full(max_order, np.nan)}
                    continue
                if op == L2N:
                    matched_big = _l2n_big_moments(outcome.multipliers, prior_big,
                                                   int(L), max_order, model.gamma)
                    matched_stress = _l2n_stress(outcome.multipliers, prior,
                                                 model, int(L))
                else:
                    matched = outcome.reweighted(prior)
                    matched_big = restrict(matched, big)
                    matched_stress = stress(matched, model)
                denom = np.maximum(np.abs(target_big), np.finfo(float).tiny)
                rows[key] = {
                    "converged": True,
                    "iterations": outcome.iterations,
                    "stress_err": abs(matched_stress - target_stress)
                    / max(abs(target_stress), np.finfo(float).tiny),
                    "moment_err": np.abs(matched_big - target_big) / denom,
                }
    return rows


def run_snapshot_matching(spec: ExperimentSpec, out_dir, threads: int = 1) -> dict:
    """Aggregate snapshot-matching errors over replicates; write two tables.

    moment_errors.csv: one row per (operator, moment count L, horizon), with
    mean and sample-std relative errors of moments 1..max_moment_order over
    the converged replicates.  stress_errors.csv: same keys with relative
    stress error and matching iteration statistics.  Non-converged replicates
    are counted in the `failed` column and excluded from averages.
    """
    os.makedirs(out_dir, exist_ok=True)
    resolved = spec.resolved
    results = _map_replicates(_snapshot_replicate, resolved, spec.replicates, threads)

    snap = resolved["snapshot"]
    max_order = int(snap["max_moment_order"])
    dt_grid = sorted(float(d) for d in snap["dt_grid"])
    keys = [(op, int(L), d) for op in snap["operators"]
            for L in snap["moment_counts"] for d in dt_grid]

    moment_rows, stress_rows = [], []
    aggregate = {}
    for key in keys:
        cells = [r[key] for r in results]
        ok = [c for c in cells if c["converged"]]
        failed = len(cells) - len(ok)
        mom_mean, mom_std = _mean_std([c["moment_err"] for c in ok])
        st_mean, st_std = _mean_std([c["stress_err"] for c in ok])
        it_mean, it_std = _mean_std([c["iterations"] for c in ok])
        op, L, d = key
        base = [op, L, d, len(ok), failed]
        moment_rows.append(base + list(np.ravel([[m, s] for m, s in
                                                 zip(np.atleast_1d(mom_mean),
                                                     np.atleast_1d(mom_std))])))
        stress_rows.append(base + [float(st_mean), float(st_std),
                                   float(it_mean), float(it_std)])
        aggregate[key] = {
            "moment_err_mean": np.atleast_1d(mom_mean),
            "moment_err_std": np.atleast_1d(mom_std),
            "stress_err_mean": float(st_mean),
            "iterations_mean": float(it_mean),
            "converged": len(ok),
            "failed": failed,
        }

    header = spec.header_lines()
    mcols = ["operator", "moment_count", "dt_macro", "converged", "failed"]
    for l in range(1, max_order + 1):
        mcols += [f"moment_rel_err_{l}_mean", f"moment_rel_err_{l}_std"]
    write_csv(os.path.join(out_dir, "moment_errors.csv"), header, mcols, moment_rows)
    scols = ["operator", "moment_count", "dt_macro", "converged", "failed",
             "stress_rel_err_mean", "stress_rel_err_std",
             "iterations_mean", "iterations_std"]
    write_csv(os.path.join(out_dir, "stress_errors.csv"), header, scols, stress_rows)
    return aggregate


# --------------------------------------------------------------------------
# Full acceleration vs microscopic reference
# --------------------------------------------------------------------------


def trace_rows(trace: RunTrace):
    rows = []
    for rec in trace.accepted:
        rows.append([
            rec.time, rec.dt_macro, rec.matching_iterations,
            np.nan if rec.degeneracy is None else rec.degeneracy,
            rec.resampled,
            np.nan if rec.stress is None else rec.stress,
        ])
    return rows


TRACE_COLUMNS = ["time", "dt_macro", "matching_iterations", "degeneracy",
                 "resampled", "stress"]


def _initial_ensemble(spec: ExperimentSpec, model, replicate):
    streams = RandomStreams(spec.seed, replicate)
    x = model.equilibrium_sample(spec.particles, streams.initial())
    return WeightedEnsemble.uniform(x)


def _accel_replicate(resolved, replicate):
    spec = ExperimentSpec(resolved["kind"], resolved)
    model = spec.model()
    sde = model.as_sde()
    config = spec.accel_config()
    basis = MomentBasis.fene_even(config.n_moments, model.gamma)
    initial = _initial_ensemble(spec, model, replicate)
    observable = lambda ens: stress(ens, model)
    stress0 = observable(initial)

    record_every = max(1, int(round(config.dt_macro_max / config.burst_length)))
    out = {"replicate": replicate, "aborted": False, "abort_reason": None}
    try:
        acc = run(config, sde, basis, initial, observable=observable,
                  replicate=replicate)
    except (UnrecoverableMatchingError, StagnationError) as exc:
        out.update(aborted=True, abort_reason=str(exc))
        return out
    ref = reference_run(config, sde, basis, initial, observable=observable,
                        replicate=replicate, record_every=record_every)

    acc_t = np.array([0.0] + [r.time for r in acc.accepted])
    acc_s = np.array([stress0] + [r.stress for r in acc.accepted])
    ref_t = np.array([0.0] + [r.time for r in ref.records])
    ref_s = np.array([stress0] + [r.stress for r in ref.records])
    out.update(
        ref_times=ref_t,
        ref_stress=ref_s,
        acc_stress_on_grid=np.interp(ref_t, acc_t, acc_s),
        trace_rows=trace_rows(acc),
        rejections=acc.rejection_count,
        resamples=acc.resample_count,
        wall_time_accelerated=acc.wall_time,
        wall_time_reference=ref.wall_time,
        extrapolated_fraction=acc.extrapolated_time_fraction(config),
        terminal_stress_accelerated=float(acc_s[-1]),
        terminal_stress_reference=float(ref_s[-1]),
    )
    return out


def _reference_replicate(resolved, replicate):
    spec = ExperimentSpec(resolved["kind"], resolved)
    model = spec.model()
    sde = model.as_sde()
    config = spec.accel_config()
    basis = MomentBasis.fene_even(config.n_moments, model.gamma)
    initial = _initial_ensemble(spec, model, replicate)
    observable = lambda ens: stress(ens, model)
    stress0 = observable(initial)
    record_every = max(1, int(round(config.dt_macro_max / config.burst_length)))
    ref = reference_run(config, sde, basis, initial, observable=observable,
                        replicate=replicate, record_every=record_every)
    return {
        "replicate": replicate,
        "ref_times": np.array([0.0] + [r.time for r in ref.records]),
        "ref_stress": np.array([stress0] + [r.stress for r in ref.records]),
        "wall_time_reference": ref.wall_time,
    }


def run_acceleration_experiment(spec: ExperimentSpec, out_dir, threads: int = 1) -> dict:
    """Accelerated vs reference stress trajectories plus a JSON summary.

    stress_trajectory.csv has one row per reference output time with replicate
    means and sample standard deviations of both trajectories and of their
    absolute difference (accelerated stress interpolated onto the reference
    grid).  trace_rep<k>.csv dumps each accepted macro step of replicate k.
    summary.json records terminal observables, rejection/resample counts,
    wall times, the extrapolated-time fraction, and the time-averaged error
    ratio (mean |accelerated - reference| over mean |reference|).
    """
    os.makedirs(out_dir, exist_ok=True)
    resolved = spec.resolved
    results = _map_replicates(_accel_replicate, resolved, spec.replicates, threads)
    ok = [r for r in results if not r["aborted"]]
    aborted = [r for r in results if r["aborted"]]
    if not ok:
        raise UnrecoverableMatchingError(
            "all replicates aborted; first reason: " + aborted[0]["abort_reason"])
    header = spec.header_lines()

    summary = {
        "replicates": spec.replicates,
        "aborted_replicates": len(aborted),
        "abort_reasons": {str(r["replicate"]): r["abort_reason"] for r in aborted},
    }
    aggregate = {"summary": summary}
    if ok:
        ref_t = ok[0]["ref_times"]
        acc_mat = np.array([r["acc_stress_on_grid"] for r in ok])
        ref_mat = np.array([r["ref_stress"] for r in ok])
        err_mat = np.abs(acc_mat - ref_mat)
        acc_mean, acc_std = _mean_std(acc_mat)
        ref_mean, ref_std = _mean_std(ref_mat)
        err_mean, err_std = _mean_std(err_mat)
        rows = [[t, am, as_, rm, rs, em, es] for t, am, as_, rm, rs, em, es in
                zip(ref_t, acc_mean, acc_std, ref_mean, ref_std, err_mean, err_std)]
        write_csv(os.path.join(out_dir, "stress_trajectory.csv"), header,
                  ["time", "accelerated_stress_mean", "accelerated_stress_std",
                   "reference_stress_mean", "reference_stress_std",
                   "abs_error_mean", "abs_error_std"], rows)
        for r in ok:
            write_csv(os.path.join(out_dir, f"trace_rep{r['replicate']}.csv"),
                      header, TRACE_COLUMNS, r["trace_rows"])
        time_avg_err = float(np.mean(err_mat))
        time_avg_ref = float(np.mean(np.abs(ref_mat)))
        summary.update({
            "terminal_stress_accelerated_mean":
                float(np.mean([r["terminal_stress_accelerated"] for r in ok])),
            "terminal_stress_reference_mean":
                float(np.mean([r["terminal_stress_reference"] for r in ok])),
            "rejection_count_mean": float(np.mean([r["rejections"] for r in ok])),
            "resample_count_mean": float(np.mean([r["resamples"] for r in ok])),
            "wall_time_accelerated_mean":
                float(np.mean([r["wall_time_accelerated"] for r in ok])),
            "wall_time_reference_mean":
                float(np.mean([r["wall_time_reference"] for r in ok])),
            "extrapolated_time_fraction_mean":
                float(np.mean([r["extrapolated_fraction"] for r in ok])),
            "time_averaged_abs_error": time_avg_err,
            "time_averaged_error_ratio": time_avg_err / max(time_avg_ref,
                                                            np.finfo(float).tiny),
        })
        aggregate.update(times=ref_t, acc_mean=acc_mean, ref_mean=ref_mean,
                         err_mean=err_mean)
    write_json(os.path.join(out_dir, "summary.json"), header, {"summary": summary})
    return aggregate


def run_reference_experiment(spec: ExperimentSpec, out_dir, threads: int = 1) -> dict:
    """Plain microscopic stress trajectories (no acceleration) plus a summary."""
    os.makedirs(out_dir, exist_ok=True)
    resolved = spec.resolved
    results = _map_replicates(_reference_replicate, resolved, spec.replicates, threads)
    header = spec.header_lines()
    ref_t = results[0]["ref_times"]
    ref_mat = np.array([r["ref_stress"] for r in results])
    ref_mean, ref_std = _mean_std(ref_mat)
    rows = [[t, m, s] for t, m, s in zip(ref_t, ref_mean, ref_std)]
    write_csv(os.path.join(out_dir, "stress_trajectory.csv"), header,
              ["time", "reference_stress_mean", "reference_stress_std"], rows)
    summary = {
        "replicates": spec.replicates,
        "terminal_stress_reference_mean": float(ref_mean[-1]),
        "wall_time_reference_mean":
            float(np.mean([r["wall_time_reference"] for r in results])),
    }
    write_json(os.path.join(out_dir, "summary.json"), header, {"summary": summary})
    return {"times": ref_t, "ref_mean": ref_mean, "summary": summary}


# --------------------------------------------------------------------------
# Convergence study (deterministic Ornstein-Uhlenbeck moment recursions)
# --------------------------------------------------------------------------


def ou_exact_moments(m1, m2, s):
    """Exact flow of the first two moments of dX = -X dt + dW over time s."""
    return m1 * math.exp(-s), (m2 - 0.5) * math.exp(-2.0 * s) + 0.5


def ou_em_moments(m1, m2, dt):
    """One explicit Euler-Maruyama step of the same moments."""
    return (1.0 - dt) * m1, (1.0 - dt) ** 2 * m2 + dt


def _sweep_micro(m1_0, m2_0, horizon, dt):
    m1, m2 = m1_0, m2_0
    n = int(round(horizon / dt))
    for _ in range(n):
        m1, m2 = ou_em_moments(m1, m2, dt)
    e1, e2 = ou_exact_moments(m1_0, m2_0, n * dt)
    return abs(m1 - e1), abs(m2 - e2)


def _sweep_macro(m1_0, m2_0, horizon, dt_macro, burst, exact_burst=True):
    """Extrapolation error with the burst taken from the exact moment flow.

    Each macro step advances the moments over `burst` (exactly, or by the
    Euler-Maruyama recursion when exact_burst is False) and extrapolates
    linearly to dt_macro, isolating the forward-Euler extrapolation error.
    """
    m1, m2 = m1_0, m2_0
    t = 0.0
    while t < horizon - 1e-12:
        step = min(dt_macro, horizon - t)
        if exact_burst:
            b1, b2 = ou_exact_moments(m1, m2, burst)
        else:
            b1, b2 = ou_em_moments(m1, m2, burst)
        ratio = step / burst
        m1, m2 = m1 + ratio * (b1 - m1), m2 + ratio * (b2 - m2)
        t += step
    e1, e2 = ou_exact_moments(m1_0, m2_0, horizon)
    return abs(m1 - e1), abs(m2 - e2)


def _fit_order(steps, errors):
    steps = np.asarray(steps, dtype=float)
    errors = np.maximum(np.asarray(errors, dtype=float), np.finfo(float).tiny)
    slope, _ = np.polyfit(np.log(steps), np.log(errors), 1)
    return float(slope)


def run_convergence_study(spec: ExperimentSpec, out_dir, threads: int = 1) -> dict:
    """Deterministic weak-error sweeps on the Ornstein-Uhlenbeck moments.

    The micro sweep varies the Euler-Maruyama step at dt_macro = burst (no
    extrapolation); the macro sweep varies the extrapolation step with the
    burst advanced by the exact moment flow; the combined row runs both finest
    grids together.  Emits convergence.csv with fitted orders per sweep.
    """
    os.makedirs(out_dir, exist_ok=True)
    resolved = spec.resolved
    conv = resolved["convergence"]
    horizon = resolved["horizon"]
    m1_0, m2_0 = (float(v) for v in conv["initial_moments"])
    burst = resolved["micro_steps_per_burst"] * resolved["dt_micro"]

    micro_grid = [float(d) for d in conv["dt_micro_grid"]]
    micro_errs = [_sweep_micro(m1_0, m2_0, horizon, d) for d in micro_grid]
    order_micro = (_fit_order(micro_grid, [e[0] for e in micro_errs]),
                   _fit_order(micro_grid, [e[1] for e in micro_errs]))

    macro_grid = [float(d) for d in conv["dt_macro_grid"]]
    macro_errs = [_sweep_macro(m1_0, m2_0, horizon, d, burst) for d in macro_grid]
    order_macro = (_fit_order(macro_grid, [e[0] for e in macro_errs]),
                   _fit_order(macro_grid, [e[1] for e in macro_errs]))

    # Combined finest-grid run: Euler-Maruyama burst plus extrapolation.
    finest_micro, finest_macro = min(micro_grid), min(macro_grid)
    m1, m2 = m1_0, m2_0
    t = 0.0
    while t < horizon - 1e-12:
        step = min(finest_macro, horizon - t)
        b1, b2 = ou_em_moments(m1, m2, finest_micro)
        ratio = step / finest_micro
        m1, m2 = m1 + ratio * (b1 - m1), m2 + ratio * (b2 - m2)
        t += step
    e1, e2 = ou_exact_moments(m1_0, m2_0, horizon)
    combined = (abs(m1 - e1), abs(m2 - e2))

    rows = []
    for d, (err1, err2) in zip(micro_grid, micro_errs):
        rows.append(["dt_micro", d, err1, err2, order_micro[0], order_micro[1]])
    for d, (err1, err2) in zip(macro_grid, macro_errs):
        rows.append(["dt_macro", d, err1, err2, order_macro[0], order_macro[1]])
    rows.append(["combined", finest_macro, combined[0], combined[1],
                 np.nan, np.nan])
    write_csv(os.path.join(out_dir, "convergence.csv"), spec.header_lines(),
              ["sweep", "step_size", "error_m1", "error_m2",
               "fitted_order_m1", "fitted_order_m2"], rows)
    return {
        "micro_grid": micro_grid, "micro_errors": micro_errs,
        "order_micro": order_micro,
        "macro_grid": macro_grid, "macro_errors": macro_errs,
        "order_macro": order_macro,
        "combined_error": combined,
    }
