"""The micro-macro loop: short SDE bursts, moment extrapolation, matching,
adaptive macroscopic stepping, and degeneracy-triggered resampling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .ensemble import (MomentBasis, WeightedEnsemble, degeneracy, restrict,
                       stratified_resample)
from .matching import KLD, L2D, MatchConfig, MatchOutcome, match
from .models import SdeModel, accept_reject_step
from .rng import RandomStreams

_TIME_TOL = 1e-12


@dataclass(frozen=True)
class AccelConfig:
    dt_micro: float
    dt_macro_max: float
    micro_steps: int  # K, micro steps per burst
    n_moments: int  # L
    horizon: float  # T
    seed: int
    match_config: MatchConfig = MatchConfig()
    step_down: float = 0.5
    step_up: float = 1.2
    degeneracy_threshold: float | None = None
    degeneracy_check_interval: int = 10
    max_redraws: int = 1000

    def __post_init__(self):
        if self.dt_micro <= 0 or self.horizon <= 0:
            raise ValueError("dt_micro and horizon must be positive")
        if self.micro_steps < 1:
            raise ValueError("micro_steps must be at least 1")
        if self.micro_steps * self.dt_micro > self.dt_macro_max * (1 + 1e-12):
            raise ValueError("burst length K*dt_micro must not exceed dt_macro_max")
        if not (self.step_down < 1.0 < self.step_up):
            raise ValueError("need step_down < 1 < step_up")

    @property
    def burst_length(self) -> float:
        return self.micro_steps * self.dt_micro


@dataclass
class StepRecord:
    time: float
    dt_macro: float
    accepted: bool
    moments_burst_start: np.ndarray
    moments_burst_end: np.ndarray
    moments_extrapolated: np.ndarray
    matching_iterations: int
    degeneracy: float | None
    resampled: bool
    stress: float | None


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    rejection_count: int = 0
    resample_count: int = 0
    wall_time: float = 0.0

    @property
    def accepted(self):
        return [r for r in self.records if r.accepted]

    def extrapolated_time_fraction(self, config: AccelConfig) -> float:
        """Fraction of the horizon covered by extrapolation beyond the bursts."""
        covered = sum(r.dt_macro - config.burst_length for r in self.accepted)
        return covered / config.horizon


class UnrecoverableMatchingError(RuntimeError):
    """Matching failed at the macro-step floor where no retry is possible."""


def extrapolate(moment_sequence, dt_micro: float, dt_macro: float) -> np.ndarray:
    """Forward-Euler extrapolation m^0 + (dt_macro / (K dt_micro)) (m^K - m^0)."""
    m_start = np.asarray(moment_sequence[0], dtype=float)
    m_end = np.asarray(moment_sequence[-1], dtype=float)
    K = len(moment_sequence) - 1
    ratio = dt_macro / (K * dt_micro)
    return m_start + ratio * (m_end - m_start)


def adapt_step(dt_macro: float, success: bool, config: AccelConfig) -> float:
    """Shrink rapidly on failure, grow gradually on success; clamp to [K dt, dt_max]."""
    if success:
        return min(config.step_up * dt_macro, config.dt_macro_max)
    return max(config.step_down * dt_macro, config.burst_length)


def _burst(ensemble, t, dt_micro, n_steps, streams, step_offset, model, basis, max_redraws):
    """K accept-reject micro steps; returns the final ensemble and all moments."""
    x = ensemble.positions
    moments = [restrict(ensemble, basis)]
    for k in range(n_steps):
        x = accept_reject_step(x, t + k * dt_micro, dt_micro, streams,
                               step_offset + k, model, max_redraws)
        moments.append(basis.evaluate(x)[1:] @ ensemble.weights)
    return WeightedEnsemble(x, ensemble.weights), moments


def macro_step(ensemble: WeightedEnsemble, t: float, dt_macro: float,
               config: AccelConfig, model: SdeModel, basis: MomentBasis,
               streams: RandomStreams, step_offset: int,
               dt_micro: float | None = None):
    """One attempt of Algorithm stages (i)-(iv).

    Returns (new ensemble or None, MatchOutcome, StepRecord); the caller
    decides acceptance from outcome.converged.
    """
    dt_micro = config.dt_micro if dt_micro is None else dt_micro
    burst_end, moments = _burst(ensemble, t, dt_micro, config.micro_steps,
                                streams, step_offset, model, basis, config.max_redraws)
    m_next = extrapolate(moments, dt_micro, dt_macro)
    outcome = match(m_next, burst_end, basis, config.match_config)
    record = StepRecord(
        time=t + dt_macro,
        dt_macro=dt_macro,
        accepted=outcome.converged,
        moments_burst_start=moments[0],
        moments_burst_end=moments[-1],
        moments_extrapolated=m_next,
        matching_iterations=outcome.iterations,
        degeneracy=None,
        resampled=False,
        stress=None,
    )
    if not outcome.converged:
        return None, outcome, record
    return outcome.reweighted(burst_end), outcome, record


def run(config: AccelConfig, model: SdeModel, basis: MomentBasis,
        initial: WeightedEnsemble, observable=None, replicate: int = 0) -> RunTrace:
    """Full micro-macro acceleration run over [0, horizon].

    `observable` maps an ensemble to a scalar recorded per accepted step.
    The final step is truncated to land on the horizon exactly; if less than
    one burst remains, the burst's micro step is scaled down so the step
    still covers the gap.
    """
    streams = RandomStreams(config.seed, replicate)
    trace = RunTrace()
    started = time.perf_counter()
    ensemble = initial
    t = 0.0
    dt_macro = config.dt_macro_max
    micro_counter = 0
    accepted_since_check = 0
    deg_kind = L2D if config.match_config.operator_kind == L2D else KLD
    threshold = config.degeneracy_threshold
    if threshold is None:
        threshold = np.log(initial.size) / 10.0

    while t < config.horizon - _TIME_TOL:
        remaining = config.horizon - t
        dt_eff = min(dt_macro, remaining)
        dt_micro = config.dt_micro
        if remaining <= config.burst_length * (1 + 1e-9):
            # Final partial step: shrink the micro step so the burst covers it.
            dt_eff = remaining
            dt_micro = remaining / config.micro_steps
        new_ensemble, outcome, record = macro_step(
            ensemble, t, dt_eff, config, model, basis, streams, micro_counter,
            dt_micro=dt_micro)
        micro_counter += config.micro_steps
        if not outcome.converged:
            trace.records.append(record)
            trace.rejection_count += 1
            if dt_eff <= config.burst_length * (1 + 1e-9):
                raise UnrecoverableMatchingError(
                    f"matching failed at the macro-step floor (t={t:.6g}, "
                    f"reason={outcome.failure_reason})")
            dt_macro = adapt_step(dt_eff, False, config)
            continue
        t = min(t + dt_eff, config.horizon)
        ensemble = new_ensemble
        accepted_since_check += 1
        if accepted_since_check >= config.degeneracy_check_interval:
            accepted_since_check = 0
            deg = degeneracy(ensemble.weights, deg_kind)
            record.degeneracy = deg
            if deg > threshold:
                uniforms = streams.resample_uniforms(trace.resample_count, ensemble.size)
                ensemble = stratified_resample(ensemble, uniforms)
                record.resampled = True
                trace.resample_count += 1
        if observable is not None:
            record.stress = observable(ensemble)
        trace.records.append(record)
        dt_macro = adapt_step(dt_eff, True, config)

    trace.wall_time = time.perf_counter() - started
    return trace


def reference_run(config: AccelConfig, model: SdeModel, basis: MomentBasis,
                  initial: WeightedEnsemble, observable=None, replicate: int = 0,
                  record_every: int = 1) -> RunTrace:
    """Plain microscopic simulation with the same stepper and RNG discipline.

    Equivalent to the accelerated run with dt_macro_max = K dt_micro; used as
    the error baseline so accelerated-vs-reference differences isolate the
    extrapolation and matching effects.
    """
    streams = RandomStreams(config.seed, replicate)
    trace = RunTrace()
    started = time.perf_counter()
    x = initial.positions
    weights = initial.weights
    t = 0.0
    micro_counter = 0
    burst = config.burst_length
    while t < config.horizon - _TIME_TOL:
        remaining = config.horizon - t
        dt_micro = config.dt_micro
        dt_eff = min(burst, remaining)
        if remaining <= burst * (1 + 1e-9):
            dt_eff = remaining
            dt_micro = remaining / config.micro_steps
        for k in range(config.micro_steps):
            x = accept_reject_step(x, t + k * dt_micro, dt_micro, streams,
                                   micro_counter + k, model, config.max_redraws)
        micro_counter += config.micro_steps
        t = min(t + dt_eff, config.horizon)
        if (micro_counter // config.micro_steps) % record_every == 0 or \
                t >= config.horizon - _TIME_TOL:
            ens = WeightedEnsemble(x, weights)
            trace.records.append(StepRecord(
                time=t, dt_macro=dt_eff, accepted=True,
                moments_burst_start=np.empty(0), moments_burst_end=np.empty(0),
                moments_extrapolated=np.empty(0), matching_iterations=0,
                degeneracy=None, resampled=False,
                stress=observable(ens) if observable is not None else None))
    trace.wall_time = time.perf_counter() - started
    return trace
