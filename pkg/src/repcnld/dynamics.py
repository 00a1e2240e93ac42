"""Preconditioned Crank-Nicolson Langevin updates, single-chain runs, and the
two-chain replica-exchange loop with plain and multi-variance swap statistics.

The single-chain update at temperature tau is

    xi' = sqrt(1 - beta^2) xi + (1 - sqrt(1 - beta^2)) (m - B grad_psi(xi))
          + beta sqrt(tau) * S w,    S S = B,  w ~ N(0, I),

with beta = 2 sqrt(2 delta) / (2 + delta) derived from the time step delta.
Replica exchange runs one chain at each of two temperatures and attempts one
position swap per iteration with probability min(1, S), where
S = exp(tau_delta (U1 - U2)) and tau_delta = 1/tau1 - 1/tau2.

Concurrency: the two per-iteration chain updates are independent given the
iteration's start state (each chain owns its own random stream, the swap
uniforms come from a third), so they may execute concurrently; the swap
attempt is the synchronization point.  The implementation here steps them
sequentially, which yields identical values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .exceptions import ConfigError, EvaluationError
from .seeding import seed_streams
from .targets import Fidelity

# Swap exponents are clamped here before exponentiation, so the statistic
# saturates at the finite sentinel exp(700) ~ 1.01e304 instead of overflowing.
EXPONENT_LIMIT = 700.0


@dataclass(frozen=True)
class StepSchedule:
    """Time step delta with the derived pCN parameters beta and eta.

    Satisfies beta = 2 sqrt(2 delta) / (2 + delta), eta = 2 / (2 + delta),
    and the exact identities 1 - sqrt(1 - beta^2) = eta * delta and
    beta = eta * sqrt(2 delta) on (0, 2).
    """

    delta: float
    beta: float
    eta: float

    @classmethod
    def from_delta(cls, delta):
        delta = float(delta)
        if not 0.0 < delta < 2.0:
            raise ConfigError(f"step size delta must lie in the open interval (0, 2), got {delta}")
        beta = 2.0 * math.sqrt(2.0 * delta) / (2.0 + delta)
        eta = 2.0 / (2.0 + delta)
        return cls(delta=delta, beta=beta, eta=eta)

    @property
    def retain(self):
        """The position-retention factor sqrt(1 - beta^2)."""
        return math.sqrt(max(0.0, 1.0 - self.beta * self.beta))


def beta_from_delta(delta):
    """Step schedule (delta, beta, eta) for a time step in (0, 2)."""
    return StepSchedule.from_delta(delta)


@dataclass(frozen=True)
class TemperatureLadder:
    """Pair of chain temperatures with tau_delta = 1/tau1 - 1/tau2.

    Equal temperatures are permitted (tau_delta = 0, every swap accepts);
    experiment configuration enforces strict ordering separately.
    """

    tau1: float
    tau2: float
    tau_delta: float = None

    def __post_init__(self):
        if not 0.0 < self.tau1 <= self.tau2:
            raise ConfigError(
                f"temperatures must satisfy 0 < tau1 <= tau2, got ({self.tau1}, {self.tau2})"
            )
        object.__setattr__(self, "tau_delta", 1.0 / self.tau1 - 1.0 / self.tau2)


@dataclass(frozen=True)
class SwapPolicy:
    """Swap-statistic configuration for the multi-variance (two fidelity) mode.

    ``variance_ratio`` is r = sigma_tilde^2 / sigma_obs^2, the ratio of the
    low-fidelity forward-error variance to the observation-noise variance;
    ``obs_count`` is the data dimension entering the correction exponent.
    """

    correction_enabled: bool = False
    variance_ratio: float = 0.0
    obs_count: int = 0

    def __post_init__(self):
        if self.variance_ratio < 0:
            raise ConfigError(f"variance ratio must be nonnegative, got {self.variance_ratio}")
        if self.correction_enabled and self.obs_count <= 0:
            raise ConfigError("multi-variance correction requires a positive observation count")


@dataclass(frozen=True)
class ChainState:
    """One replica: position plus the cached evaluation at that position.

    ``stale`` marks a cache inherited from the other fidelity after a swap;
    the next update re-evaluates at the chain's own fidelity before using it.
    """

    position: np.ndarray
    energy: float
    grad_potential: np.ndarray
    fidelity: Fidelity = Fidelity.HIGH
    aux: Any = None
    stale: bool = False


@dataclass
class SamplerTrace:
    """Per-iteration records of one chain plus swap bookkeeping."""

    chain_id: int
    positions: np.ndarray      # (n_iter, n)
    energies: np.ndarray       # (n_iter,)
    swapped: np.ndarray        # (n_iter,) bool
    swap_attempts: int = 0
    swap_accepts: int = 0

    @property
    def n_records(self):
        return self.energies.shape[0]

    @property
    def swap_rate(self):
        return self.swap_accepts / self.swap_attempts if self.swap_attempts else 0.0


def evaluate_state(model, position, fidelity=Fidelity.HIGH):
    """Evaluate the model once and wrap the result; rejects non-finite output."""
    position = np.atleast_1d(np.asarray(position, dtype=float))
    ev = model.evaluate(position, fidelity)
    grad = np.atleast_1d(np.asarray(ev.grad_potential, dtype=float))
    if not np.isfinite(ev.energy) or not np.all(np.isfinite(grad)):
        raise EvaluationError(
            f"model returned non-finite energy or gradient at position {position.tolist()}",
            position=position.copy(),
        )
    return ChainState(position=position, energy=float(ev.energy), grad_potential=grad,
                      fidelity=fidelity, aux=ev.aux)


def pcnld_step(state, model, prior, schedule, tau, noise, form="potential"):
    """Advance one chain by a single pCN Langevin update.

    Parameters
    ----------
    state : ChainState
        Current position with a valid cache (re-evaluated first if stale).
    noise : (n,) ndarray
        Independent standard normal vector; the caller owns the stream.
    form : {"potential", "energy"}
        Algebraically equivalent update variants: "potential" recenters on
        m - B grad_psi, "energy" subtracts (1 - sqrt(1-beta^2)) B grad_U.

    Returns
    -------
    ChainState
        State at the new position with a freshly evaluated cache.
    """
    if state.stale:
        state = evaluate_state(model, state.position, state.fidelity)
    noise = np.asarray(noise, dtype=float)
    beta = schedule.beta
    retain = schedule.retain
    kick = beta * math.sqrt(tau) * prior.apply_sqrt(noise)
    if form == "potential":
        anchor = prior.mean - prior.apply_cov(state.grad_potential)
        position = retain * state.position + (1.0 - retain) * anchor + kick
    elif form == "energy":
        b_grad_energy = (state.position - prior.mean) + prior.apply_cov(state.grad_potential)
        position = state.position - (1.0 - retain) * b_grad_energy + kick
    else:
        raise ConfigError(f"unknown update form {form!r}; expected 'potential' or 'energy'")
    return evaluate_state(model, position, state.fidelity)


def swap_statistic(u1, u2, ladder):
    """Unnormalized swap statistic S = exp(tau_delta (u1 - u2)).

    The downstream acceptance probability is min(1, S).  The exponent is
    clamped to +-700 so the value saturates instead of overflowing.
    """
    if not (np.isfinite(u1) and np.isfinite(u2)):
        raise EvaluationError(f"swap statistic requires finite energies, got ({u1}, {u2})")
    x = ladder.tau_delta * (u1 - u2)
    return math.exp(min(max(x, -EXPONENT_LIMIT), EXPONENT_LIMIT))


def correction_factor(ladder, policy):
    """Multiplier [1 - (tau_delta + tau_delta^2) r]^(n_d / 2) of the corrected statistic."""
    load = (ladder.tau_delta + ladder.tau_delta ** 2) * policy.variance_ratio
    if load >= 1.0:
        bound = 1.0 / (ladder.tau_delta ** 2 + ladder.tau_delta)
        raise ConfigError(
            f"variance ratio {policy.variance_ratio} is inadmissible: the correction requires "
            f"r < 1/(tau_delta^2 + tau_delta) = {bound!r}"
        )
    return (1.0 - load) ** (0.5 * policy.obs_count)


def corrected_swap_statistic(u1, u2_tilde, ladder, policy):
    """Bias-corrected swap statistic for mixed-fidelity energies:

    S_m = [1 - (tau_delta + tau_delta^2) r]^(n_d/2) * exp(tau_delta (u1 - u2_tilde)),

    where u1 is the high-fidelity energy of chain 1 and u2_tilde the
    low-fidelity energy of chain 2.
    """
    if not policy.correction_enabled:
        raise ConfigError("corrected swap statistic requested but the correction is disabled")
    return correction_factor(ladder, policy) * swap_statistic(u1, u2_tilde, ladder)


def exchange_states(state1, state2):
    """Swap positions and caches between the chains, keeping each chain's fidelity.

    When the fidelities differ the inherited caches are marked stale so that
    the next update re-evaluates at the chain's own fidelity: a low-fidelity
    gradient must not drive the high-fidelity chain.
    """
    cross = state1.fidelity != state2.fidelity
    new1 = replace(state2, fidelity=state1.fidelity, stale=cross)
    new2 = replace(state1, fidelity=state2.fidelity, stale=cross)
    return new1, new2


def _allocate_trace(chain_id, n_iter, dim):
    return SamplerTrace(
        chain_id=chain_id,
        positions=np.empty((n_iter, dim)),
        energies=np.empty(n_iter),
        swapped=np.zeros(n_iter, dtype=bool),
    )


def run_single_chain(model, prior, schedule, tau, n_iter, seed=None, *, rng=None,
                     start=None, fidelity=Fidelity.HIGH, form="potential", chain_id=1):
    """Run one pCN Langevin chain for ``n_iter`` updates.

    Deterministic given the seed (or generator); the trace records the position
    and cached energy after every update.
    """
    if n_iter < 0:
        raise ConfigError(f"iteration count must be nonnegative, got {n_iter}")
    if rng is None:
        rng = np.random.default_rng(seed)
    if start is None:
        start = prior.sample(rng.standard_normal(prior.dim))
    state = evaluate_state(model, start, fidelity)
    trace = _allocate_trace(chain_id, n_iter, state.position.size)
    for k in range(n_iter):
        noise = rng.standard_normal(state.position.size)
        try:
            state = pcnld_step(state, model, prior, schedule, tau, noise, form=form)
        except EvaluationError as err:
            err.iteration = k
            raise
        trace.positions[k] = state.position
        trace.energies[k] = state.energy
    return trace


def run_replica_exchange(model, prior, schedule, ladder, policy, n_iter, seed=None, *,
                         streams=None, start1=None, start2=None,
                         attempt_probability=1.0, form="potential"):
    """Run the two-temperature replica-exchange sampler for ``n_iter`` iterations.

    Each iteration advances both chains by one pCN Langevin update with
    independent noise, then makes one swap attempt: with the cached energies
    u1, u2, accept the exchange when a uniform draw falls below
    min(1, S(u1, u2)) (or the corrected statistic when the policy enables the
    multi-variance mode, in which case chain 1 evaluates at high fidelity and
    chain 2 at low fidelity).  Accepted swaps exchange positions, cached
    energies, cached gradients, and cached forward solutions.

    ``attempt_probability`` optionally thins the swap attempts (the
    theoretical intensity-times-step regime); by default every iteration
    attempts a swap.  Draw order per iteration: chain-1 noise from stream 1,
    chain-2 noise from stream 2, then the optional gate uniform and the
    acceptance uniform from the swap stream.
    """
    if n_iter < 0:
        raise ConfigError(f"iteration count must be nonnegative, got {n_iter}")
    if not 0.0 < attempt_probability <= 1.0:
        raise ConfigError(f"attempt probability must lie in (0, 1], got {attempt_probability}")
    if streams is None:
        streams = seed_streams(0 if seed is None else seed)
    rng1 = streams.generator("chain1")
    rng2 = streams.generator("chain2")
    rng_swap = streams.generator("swap")

    fid2 = Fidelity.LOW if policy.correction_enabled else Fidelity.HIGH
    if start1 is None:
        start1 = prior.sample(rng1.standard_normal(prior.dim))
    if start2 is None:
        start2 = prior.sample(rng2.standard_normal(prior.dim))
    state1 = evaluate_state(model, start1, Fidelity.HIGH)
    state2 = evaluate_state(model, start2, fid2)

    dim = state1.position.size
    trace1 = _allocate_trace(1, n_iter, dim)
    trace2 = _allocate_trace(2, n_iter, dim)
    attempts = 0
    accepts = 0
    for k in range(n_iter):
        try:
            state1 = pcnld_step(state1, model, prior, schedule, ladder.tau1,
                                rng1.standard_normal(dim), form=form)
            state2 = pcnld_step(state2, model, prior, schedule, ladder.tau2,
                                rng2.standard_normal(dim), form=form)
        except EvaluationError as err:
            err.iteration = k
            raise
        attempt = True
        if attempt_probability < 1.0:
            attempt = rng_swap.uniform() < attempt_probability
        did_swap = False
        if attempt:
            attempts += 1
            if policy.correction_enabled:
                stat = corrected_swap_statistic(state1.energy, state2.energy, ladder, policy)
            else:
                stat = swap_statistic(state1.energy, state2.energy, ladder)
            if rng_swap.uniform() < min(1.0, stat):
                state1, state2 = exchange_states(state1, state2)
                accepts += 1
                did_swap = True
        trace1.positions[k] = state1.position
        trace1.energies[k] = state1.energy
        trace1.swapped[k] = did_swap
        trace2.positions[k] = state2.position
        trace2.energies[k] = state2.energy
        trace2.swapped[k] = did_swap
    for trace in (trace1, trace2):
        trace.swap_attempts = attempts
        trace.swap_accepts = accepts
    return trace1, trace2
