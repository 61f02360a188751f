"""Stochastic EM for state-space LSTM models.

Each iteration alternates a sampling step that redraws one latent path per
sequence (particle Gibbs, or the factored single-particle update) with a
maximization step that refits the transition network by gradient descent and
the emission parameters in closed form.  The particle count follows a
schedule that starts small and grows to ``particles_max``, which keeps early
iterations cheap while the model is still poor.
"""

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from sslstm.checkpoint import Checkpoint
from sslstm.inference import (
    ReferencePath,
    conditional_smc,
    factored_sample,
    sample_final_path,
    smc_pass,
)
from sslstm.lstm import OptimConfig, bptt_grad, fit_mle
from sslstm.models import (
    TopicMatrix,
    gauss_emission_mle,
    init_gaussian_ssl,
    init_topical_ssl,
)
from sslstm.numerics import NumericalError, Rng, mvn_logpdf_from_residuals

HEADS = ("gaussian", "topical")
SCHEDULES = ("linear", "doubling")
SAMPLERS = ("pg", "factored")

# Per-head default LSTM widths, selected by hidden_size=0.
DEFAULT_HIDDEN = {"gaussian": 32, "topical": 64}


@dataclass
class TrainConfig:
    """Everything stochastic_em needs besides the data itself.

    hidden_size 0 picks the per-head default width.  The model-shape fields
    (latent_dim/obs_dim for the continuous head, num_topics/vocab_size for
    the topical one) are only consulted when no initial model is passed in.
    """

    head: str = "gaussian"
    em_iterations: int = 10
    particles_start: int = 1
    particles_max: int = 8
    schedule: str = "linear"
    schedule_ramp: int = 1  # doubling schedule: iterations per doubling
    inference: str = "pg"
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    hidden_size: int = 0
    latent_dim: int = 2
    obs_dim: int = 2
    init_sigma: float = 0.5
    obs_sigma: float = 1.0
    num_topics: int = 5
    vocab_size: int = 50
    dirichlet_beta: float = 1.01
    check_mstep: bool = False

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.em_iterations < 0:
            raise ValueError("em_iterations must be nonnegative")
        if self.particles_start < 1:
            raise ValueError("particles_start must be at least 1")
        if self.particles_start > self.particles_max:
            raise ValueError("particles_start must not exceed particles_max")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.schedule_ramp < 1:
            raise ValueError("schedule_ramp must be at least 1")
        if self.inference not in SAMPLERS:
            raise ValueError(f"unknown inference kind {self.inference!r}")

    def resolved_hidden_size(self):
        return self.hidden_size if self.hidden_size > 0 else DEFAULT_HIDDEN[self.head]


@dataclass
class TrainState:
    """Mutable trainer state: cached latent paths and the metrics log."""

    epoch: int = 0
    paths: list = field(default_factory=list)
    metrics: list = field(default_factory=list)


def particle_schedule(epoch, config):
    """Particle count for an EM iteration; nondecreasing, capped at the max.

    The linear ramp reaches particles_max exactly at the final iteration;
    the doubling ramp multiplies by two every schedule_ramp iterations.
    """
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    start, cap = config.particles_start, config.particles_max
    if config.schedule == "linear":
        span = max(1, config.em_iterations - 1)
        count = start + (epoch * (cap - start)) // span
    else:
        count = start * 2 ** (epoch // config.schedule_ramp)
    return int(min(cap, count))


def init_model(config, rng):
    if config.head == "gaussian":
        return init_gaussian_ssl(
            config.latent_dim,
            config.obs_dim,
            config.resolved_hidden_size(),
            rng,
            sigma=config.init_sigma,
            obs_sigma=config.obs_sigma,
        )
    return init_topical_ssl(
        config.num_topics,
        config.vocab_size,
        config.resolved_hidden_size(),
        rng,
        beta=config.dirichlet_beta,
    )


def sequence_predictive_loglik(model, observations, path):
    """Sum of one-step predictive log-likelihoods with the latent history
    pinned to ``path`` (the quantity the factored sampler maximizes over)."""
    path = np.asarray(path)
    states = model.first_states(1)
    total = 0.0
    for t in range(len(observations)):
        total += float(model.messages(states, observations[t]).log_alpha[0])
        if t + 1 < len(observations):
            states = model.advance(states, path[None, t])
    return total


def _draw_path(model, observations, previous, num_particles, kind, rng):
    if previous is None:
        # First iteration: nothing to condition on yet, so take an
        # unconditional pass and sample its final path.
        result = smc_pass(model, observations, num_particles, rng)
        return sample_final_path(result.system, rng), result.log_marginal
    if kind == "pg":
        result = conditional_smc(
            model, observations, ReferencePath(previous), num_particles, rng
        )
        return sample_final_path(result.system, rng), result.log_marginal
    path = factored_sample(model, observations, previous, rng)
    return path, sequence_predictive_loglik(model, observations, previous)


def _draw_with_retry(model, observations, previous, num_particles, kind, rng, seq_id):
    try:
        return _draw_path(model, observations, previous, num_particles, kind, rng)
    except NumericalError:
        pass  # retry once with fresh randomness from the same stream
    try:
        return _draw_path(model, observations, previous, num_particles, kind, rng)
    except NumericalError as err:
        raise NumericalError(f"sampling failed for sequence {seq_id}: {err}") from err


def _pad_paths(paths):
    lengths = np.array([len(p) for p in paths], dtype=np.int64)
    t_max = int(lengths.max())
    first = np.asarray(paths[0])
    out = np.zeros((len(paths), t_max) + first.shape[1:], dtype=first.dtype)
    for i, path in enumerate(paths):
        out[i, : len(path)] = path
    return out, (None if np.all(lengths == t_max) else lengths)


def _joint_objective(model, dataset, paths):
    """log p(paths, observations) up to constants, for the M-step check."""
    padded, lengths = _pad_paths(paths)
    loss, _ = bptt_grad(model.lstm_params, model.head, padded, lengths=lengths)
    total = -loss * len(paths)
    if model.kind == "gaussian":
        latents = np.vstack(paths)
        residuals = np.vstack(dataset) - model.observe_mean(latents)
        total += mvn_logpdf_from_residuals(residuals, model.emission.chol_r).sum()
    else:
        for path, doc in zip(paths, dataset):
            total += np.log(model.topics.phi[path, doc]).sum()
    return float(total)


def _mstep(model, dataset, paths, config):
    padded, lengths = _pad_paths(paths)
    params, head, losses = fit_mle(
        model.lstm_params, model.head, padded, config.optimizer, lengths=lengths
    )
    post_loss, _ = bptt_grad(params, head, padded, lengths=lengths)
    if post_loss > losses[0]:
        # The final gradient step overshot; keep the pre-step parameters so
        # the sampled-path objective never degrades.
        params, head, post_loss = model.lstm_params, model.head, losses[0]

    if model.kind == "gaussian":
        latents = np.vstack([np.asarray(p, dtype=float) for p in paths])
        emission = gauss_emission_mle(latents, np.vstack(dataset))
        new_model = type(model)(params, head, emission)
    else:
        counts = np.zeros_like(model.topics.counts)
        for path, doc in zip(paths, dataset):
            np.add.at(counts, (np.asarray(path), np.asarray(doc)), 1)
        topics = TopicMatrix(counts, model.topics.beta)
        new_model = type(model)(params, head, topics)
    return new_model, float(post_loss)


def stochastic_em(dataset, config, model=None, metrics_file=None):
    """Run EM and return the final checkpoint.

    ``dataset`` is a list of observation sequences: (T, obs_dim) arrays for
    the continuous head, 1-D integer word arrays for the topical one.
    ``metrics_file`` may be a path or a writable file object; one JSON line
    is appended per iteration.
    """
    dataset = [np.asarray(seq) for seq in dataset]
    if not dataset:
        raise ValueError("dataset is empty")
    if any(len(seq) == 0 for seq in dataset):
        raise ValueError("dataset contains an empty sequence")
    root = Rng(config.seed)
    if model is None:
        model = init_model(config, root.stream("init"))
    sstep_rng = root.stream("sstep")

    state = TrainState(paths=[None] * len(dataset))
    sink = metrics_file if hasattr(metrics_file, "write") else None
    opened = None
    if metrics_file is not None and sink is None:
        opened = sink = open(metrics_file, "a")
    try:
        for epoch in range(config.em_iterations):
            tic = time.perf_counter()
            count = particle_schedule(epoch, config)
            new_paths, marginals = [], []
            for i, observations in enumerate(dataset):
                path, log_marginal = _draw_with_retry(
                    model, observations, state.paths[i], count,
                    config.inference, sstep_rng, i,
                )
                new_paths.append(path)
                marginals.append(log_marginal)
            state.paths = new_paths

            pre_joint = (
                _joint_objective(model, dataset, new_paths)
                if config.check_mstep
                else None
            )
            try:
                model, m_step_loss = _mstep(model, dataset, new_paths, config)
            except NumericalError as err:
                rolled = _rollback_model(model, err)
                abort = NumericalError(
                    f"non-finite M-step loss at iteration {epoch}: {err}"
                )
                abort.last_model = rolled
                raise abort from err
            if pre_joint is not None:
                post_joint = _joint_objective(model, dataset, new_paths)
                if post_joint < pre_joint - 1e-6:
                    raise NumericalError(
                        f"M-step decreased the joint objective at iteration "
                        f"{epoch}: {pre_joint:.6f} -> {post_joint:.6f}"
                    )

            state.epoch = epoch + 1
            row = {
                "iter": epoch,
                "P": count,
                "mean_log_marginal": float(np.mean(marginals)),
                "m_step_loss": m_step_loss,
                "wall_ms": (time.perf_counter() - tic) * 1e3,
            }
            state.metrics.append(row)
            if sink is not None:
                sink.write(json.dumps(row, sort_keys=True) + "\n")
    finally:
        if opened is not None:
            opened.close()
    return Checkpoint(
        model=model, config=asdict(config), epoch=state.epoch, seed=config.seed
    )


def _rollback_model(model, err):
    """Rebuild the model from the last finite parameters the optimizer saw."""
    params = getattr(err, "last_params", model.lstm_params)
    head = getattr(err, "last_head", model.head)
    third = model.emission if model.kind == "gaussian" else model.topics
    return type(model)(params, head, third)


def filter_predict(model, observations, num_particles, rng):
    """One-step-ahead predictive after filtering a prefix.

    Runs a fresh particle pass over ``observations``, advances every
    particle once, and mixes the per-particle transition priors by the
    final weights.  Returns the head's (latent predictive, observation
    predictive) pair.
    """
    result = smc_pass(model, observations, num_particles, rng)
    system = result.system
    states = model.advance(system.lstm_states[-1], system.particles[:, -1])
    return model.predictive(states, system.norm_weights[:, -1])


def blind_rollout(model, states, horizon, mode="mean", rng=None):
    """Roll the transition model forward ``horizon`` steps with no data.

    ``states`` must already incorporate whatever history the rollout starts
    from (e.g. the advanced state of a filtered particle).  mode "mean"
    follows the prior's point estimate deterministically; "sample" draws
    from the prior and requires ``rng``.  Returns an array of latent points
    with leading axis ``horizon`` (batch axis preserved).
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    steps = []
    for _ in range(horizon):
        latents = (
            model.prior_point(states) if mode == "mean" else model.sample_prior(states, rng)
        )
        steps.append(latents)
        states = model.advance(states, latents)
    return np.stack(steps)
