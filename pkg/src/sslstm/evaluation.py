"""Held-out metrics: perplexity, tracking error, topic-count sparsity.

Metric values are packaged with the particle count, seed, and a hash of the
evaluated configuration so runs can be compared across machines.
"""

import hashlib
import json

import numpy as np

from sslstm.data import Corpus
from sslstm.inference import smc_pass
from sslstm.numerics import Rng
from sslstm.training import blind_rollout


def _documents(heldout):
    return heldout.documents if isinstance(heldout, Corpus) else list(heldout)


def perplexity(model, heldout, num_particles=64, rng=None):
    """exp of the per-token negative predictive log-likelihood.

    Each document's marginal likelihood is estimated with its own particle
    pass whose stream is keyed by the document's content, so the result is
    exactly invariant to document order.
    """
    docs = _documents(heldout)
    if not docs:
        raise ValueError("no documents to evaluate")
    base = rng if rng is not None else Rng(0)
    total_loglik = 0.0
    total_tokens = 0
    for doc in docs:
        doc = np.ascontiguousarray(np.asarray(doc, dtype=np.int64))
        doc_rng = base.stream(hashlib.sha1(doc.tobytes()).hexdigest())
        total_loglik += smc_pass(model, doc, num_particles, doc_rng).log_marginal
        total_tokens += len(doc)
    return float(np.exp(-total_loglik / total_tokens))


def rmse(predicted, target):
    predicted, target = np.asarray(predicted), np.asarray(target)
    if predicted.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    return float(np.sqrt(np.mean((predicted - target) ** 2)))


def filtered_observation_path(model, observations, train_len, num_particles=64, rng=None):
    """Denoised observation estimates E[x_t | x_{1..t}] for t = train_len..T-1.

    One particle pass over the whole sequence; at each step the filtered
    latent posterior is the weight-mixture of per-particle update messages,
    so the estimate uses the message means directly instead of the sampled
    particle values (one less layer of Monte Carlo noise).
    """
    observations = np.asarray(observations)
    if not 0 < train_len < len(observations):
        raise ValueError("train_len must split the sequence in two")
    system = smc_pass(model, observations, num_particles, rng).system
    latents = []
    for t in range(train_len, len(observations)):
        msg = model.messages(system.lstm_states[t], observations[t])
        latents.append(msg.means.T @ system.norm_weights[:, t])
    return model.observe_mean(np.asarray(latents))


def blind_observation_path(model, prefix, horizon, num_particles=64, rng=None):
    """Mean-mode rollout of ``horizon`` observation predictions, seeded at
    the end of ``prefix`` from the highest-weight particle of a filter pass."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if horizon == 0:
        return np.zeros((0, np.asarray(prefix).shape[-1]))
    result = smc_pass(model, prefix, num_particles, rng)
    system = result.system
    best = int(np.argmax(system.norm_weights[:, -1]))
    states = model.gather_states(system.lstm_states[-1], np.array([best]))
    states = model.advance(states, system.particles[best, -1][None])
    latents = blind_rollout(model, states, horizon, mode="mean")
    return model.observe_mean(latents[:, 0])


def tracking_error(model, truth, observations, train_len, num_particles=64, rng=None):
    """(filtered RMSE, blind RMSE) over the test segment of one trajectory.

    Filtered: denoised estimates that keep conditioning on test observations
    as they arrive.  Blind: a mean-mode rollout across the whole test
    segment conditioned on the training prefix only.
    """
    truth = np.asarray(truth)
    observations = np.asarray(observations)
    if truth.shape != observations.shape:
        raise ValueError("truth/observation shape mismatch")
    t_len = len(observations)
    filtered_preds = filtered_observation_path(
        model, observations, train_len, num_particles, rng
    )
    filtered = rmse(filtered_preds, truth[train_len:])
    blind_preds = blind_observation_path(
        model, observations[:train_len], t_len - train_len, num_particles, rng
    )
    blind = rmse(blind_preds, truth[train_len:])
    return filtered, blind


def nnz(counts):
    """Number of strictly positive topic-word counts."""
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    return int(np.count_nonzero(counts > 0))


def config_hash(config):
    """Short stable hash of a JSON-serializable configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def metric_report(name, value, num_particles=None, seed=None, config=None):
    """The flat record written next to every metric value."""
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"metric {name} is not finite")
    return {
        "metric": name,
        "value": value,
        "P": num_particles,
        "seed": seed,
        "config_hash": config_hash(config) if config is not None else None,
    }
