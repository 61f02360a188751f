"""Sequential Monte Carlo over latent paths, and the samplers built on it.

All samplers propose from the optimal one-step distribution (the filtered
posterior ``gamma`` of the current observation given each particle's
history), so the per-particle importance weight is the predictive
likelihood ``alpha`` of that history — a quantity independent of the newly
drawn state.  The marginal likelihood estimate is the product over steps of
the mean unnormalized weight.

Three samplers share one engine:

  - ``smc_pass``: plain SMC with multinomial resampling every step,
  - ``conditional_smc`` / ``particle_gibbs_sweep``: SMC with a reference
    path pinned in slot 0 (its ancestor always points at itself), giving a
    Markov kernel that leaves the exact path posterior invariant,
  - ``factored_sample``: the no-resampling baseline that redraws each step
    independently around the previous iteration's path.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from sslstm.numerics import (
    NumericalError,
    categorical_sample,
    categorical_sample_batch,
    normalize_log_weights,
)


@dataclass
class ParticleSystem:
    """Everything one sweep produced, ancestors included.

    ``lstm_states`` holds the batched recurrent state used to propose at
    each step; row p of entry t belongs to particle p's history at step t.
    """

    particles: np.ndarray  # (P, T) ints or (P, T, k) floats
    ancestors: np.ndarray  # (P, T) parent indices; column 0 is identity
    log_weights: np.ndarray  # (P, T) unnormalized log weights
    norm_weights: np.ndarray  # (P, T) per-step simplex weights
    per_step_log_alpha_tilde: np.ndarray  # (T,) log mean weight per step
    lstm_states: list = field(repr=False)

    @property
    def num_particles(self):
        return self.ancestors.shape[0]

    @property
    def num_steps(self):
        return self.ancestors.shape[1]


@dataclass
class SmcResult:
    system: ParticleSystem
    log_marginal: float


@dataclass
class ReferencePath:
    """A fixed latent path for conditional SMC, with optional cached states."""

    path: np.ndarray
    lstm_states: list = None

    def __post_init__(self):
        self.path = np.asarray(self.path)


def smc_pass(model, observations, num_particles, rng):
    """One unconditional SMC sweep; returns the particle system and the
    log marginal-likelihood estimate."""
    return _sweep(model, observations, num_particles, rng, reference=None)


def conditional_smc(model, observations, reference, num_particles, rng):
    """SMC with ``reference`` pinned in slot 0 at every step."""
    return _sweep(model, observations, num_particles, rng, reference=reference)


def particle_gibbs_sweep(model, observations, reference, num_particles, rng):
    """One Particle Gibbs transition: conditional SMC, then a path drawn
    from the final weights and traced through the ancestry.

    With a single particle the reference is returned unchanged.
    """
    result = conditional_smc(model, observations, reference, num_particles, rng)
    return sample_final_path(result.system, rng)


def sample_final_path(system, rng):
    """Draw a particle index from the final-step weights and trace its path."""
    final = categorical_sample(system.norm_weights[:, -1], rng)
    return trace_path(system, final)


def _sweep(model, observations, num_particles, rng, reference):
    t_len = len(observations)
    if t_len == 0:
        raise ValueError("empty observation sequence")
    if num_particles < 1:
        raise ValueError("need at least one particle")
    if reference is not None and len(reference.path) != t_len:
        raise ValueError(
            f"reference length {len(reference.path)} does not match {t_len} observations"
        )
    p = num_particles
    ancestors = np.empty((p, t_len), dtype=np.int64)
    log_weights = np.empty((p, t_len))
    norm_weights = np.empty((p, t_len))
    step_log_mean = np.empty(t_len)
    states_seq = []
    particles = None
    states = model.first_states(p)
    for t in range(t_len):
        if t == 0:
            ancestors[:, 0] = np.arange(p)
        else:
            parents = categorical_sample_batch(norm_weights[:, t - 1], p, rng)
            if reference is not None:
                parents[0] = 0
            ancestors[:, t] = parents
            states = model.advance(
                model.gather_states(states_seq[t - 1], parents), particles[parents, t - 1]
            )
        states_seq.append(states)
        msg = model.messages(states, observations[t])
        try:
            weights, log_mean = normalize_log_weights(msg.log_alpha)
        except NumericalError as err:
            collapse = NumericalError(f"particle collapse at t={t}")
            collapse.step = t
            collapse.ess_history = [
                effective_sample_size(norm_weights[:, s]) for s in range(t)
            ]
            raise collapse from err
        drawn = model.sample_message(msg, rng)
        if reference is not None:
            drawn[0] = reference.path[t]
        if particles is None:
            particles = np.empty((p, t_len) + drawn.shape[1:], dtype=drawn.dtype)
        particles[:, t] = drawn
        log_weights[:, t] = msg.log_alpha
        norm_weights[:, t] = weights
        step_log_mean[t] = log_mean
    system = ParticleSystem(
        particles, ancestors, log_weights, norm_weights, step_log_mean, states_seq
    )
    return SmcResult(system, float(step_log_mean.sum()))


def trace_path(system, final_index):
    """Recover one particle's full path by walking the ancestor indices."""
    p, t_len = system.ancestors.shape
    if not 0 <= final_index < p:
        raise ValueError(f"final index {final_index} out of range")
    idx = int(final_index)
    path = np.empty_like(system.particles[0])
    for t in range(t_len - 1, -1, -1):
        path[t] = system.particles[idx, t]
        idx = int(system.ancestors[idx, t])
        if not 0 <= idx < p:
            raise ValueError(f"corrupt ancestor index {idx} at step {t}")
    return path


def factored_sample(model, observations, previous_path, rng):
    """Redraw every step independently from its filtered posterior, with
    the history frozen at the previous iteration's path."""
    t_len = len(observations)
    prev = np.asarray(previous_path)
    if len(prev) != t_len:
        raise ValueError(
            f"previous path length {len(prev)} does not match {t_len} observations"
        )
    states = model.first_states(1)
    new_path = np.empty_like(prev)
    for t in range(t_len):
        msg = model.messages(states, observations[t])
        if not np.all(np.isfinite(msg.log_alpha)):
            raise NumericalError(f"zero-probability observation at t={t}")
        new_path[t] = model.sample_message(msg, rng)[0]
        if t + 1 < t_len:
            states = model.advance(states, prev[None, t])
    return new_path


def effective_sample_size(weights):
    """1 / sum of squared simplex weights; P for uniform, 1 for one-hot."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def diagnostics_rows(system):
    """Per-step degeneracy summary: (t, ess, log_alpha_tilde, unique_ancestors)."""
    rows = []
    for t in range(system.num_steps):
        rows.append(
            (
                t,
                effective_sample_size(system.norm_weights[:, t]),
                float(system.per_step_log_alpha_tilde[t]),
                int(np.unique(system.ancestors[:, t]).size),
            )
        )
    return rows


def write_diagnostics_csv(system, fileobj):
    writer = csv.writer(fileobj)
    writer.writerow(["t", "ess", "log_alpha_tilde", "unique_ancestors"])
    writer.writerows(diagnostics_rows(system))
