"""Gaussian and topical state space LSTM instantiations.

Each model couples the shared LSTM transition with a head mapping the
recurrent state to a distribution over the next latent state, plus an
emission model from latent states to observations.  Forward messages are
computed in closed form:

  - ``alpha``: log predictive likelihood of the observation given the
    particle's history (the marginal over the current latent state),
  - ``gamma``: the filtered posterior over the current latent state, which
    doubles as the optimal particle proposal.

The model classes expose a small batched interface (``first_states``,
``advance``, ``messages``, ``sample_message``, ...) that the particle
sweeps in :mod:`sslstm.inference` are written against.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve

from sslstm.lstm import LstmState, init_lstm_params, lstm_step
from sslstm.numerics import (
    LOG_TWO_PI,
    GaussianDist,
    NumericalError,
    categorical_sample_rows,
    chol_pd,
    mvn_logpdf_from_residuals,
    mvn_sample_batch,
    softmax,
)

logger = logging.getLogger(__name__)

PHI_FLOOR = 1e-12
EMISSION_RIDGE = 1e-6


@dataclass
class Message:
    """Per-step forward messages: log predictive weight and filtered posterior."""

    alpha: float
    gamma: object  # GaussianDist for the continuous head, simplex vector otherwise


# ---------------------------------------------------------------------------
# transition heads


@dataclass
class GaussianTransitionHead:
    """Affine mean map from the LSTM hidden state, state-independent
    diagonal covariance (per-dimension log variances), and a learned start
    embedding fed to the LSTM before the first latent draw."""

    weights: np.ndarray  # (k, h)
    bias: np.ndarray  # (k,)
    log_var: np.ndarray  # (k,)
    start: np.ndarray  # (k,)

    @property
    def latent_dim(self):
        return self.bias.shape[0]

    @property
    def input_dim(self):
        return self.bias.shape[0]

    def mean(self, hiddens):
        return hiddens @ self.weights.T + self.bias

    def cov(self):
        return np.diag(np.exp(self.log_var))

    def tensors(self):
        return {
            "weights": self.weights,
            "bias": self.bias,
            "log_var": self.log_var,
            "start": self.start,
        }

    def replace_tensors(self, mapping):
        return replace(self, **mapping)

    def lstm_inputs(self, paths, lengths=None):
        paths = np.asarray(paths, dtype=float)
        n, t_len, k = paths.shape
        inputs = np.empty((n, t_len, k))
        inputs[:, 0] = self.start
        inputs[:, 1:] = paths[:, :-1]
        return inputs

    def nll_and_grads(self, hiddens, paths, lengths=None):
        paths = np.asarray(paths, dtype=float)
        mask = _step_mask(paths.shape[:2], lengths)
        # non-finite intermediates surface as a non-finite loss, which the
        # caller turns into an error before the gradients are ever used
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            mu = self.mean(hiddens)
            var = np.exp(self.log_var)
            resid = paths - mu
            scaled = resid * resid / var
            per_step = 0.5 * np.sum(scaled + self.log_var + LOG_TWO_PI, axis=-1)
            nll_per_path = np.sum(per_step * mask, axis=1)
            d_mu = (mu - paths) / var * mask[..., None]
            d_hiddens = d_mu @ self.weights
            grads = {
                "weights": np.einsum("ntk,nth->kh", d_mu, hiddens),
                "bias": d_mu.sum(axis=(0, 1)),
                "log_var": 0.5 * np.sum((1.0 - scaled) * mask[..., None], axis=(0, 1)),
            }
        return nll_per_path, d_hiddens, grads

    def input_grads(self, d_inputs):
        # only the start embedding is trainable on the input side; latent
        # values are data during the M step
        return {"start": d_inputs[:, 0, :].sum(axis=0)}


@dataclass
class TopicalTransitionHead:
    """Softmax map from the LSTM hidden state to topic probabilities.

    LSTM inputs are one-hot topic indicators of width K+1; index K is the
    reserved start token."""

    weights: np.ndarray  # (K, h)
    bias: np.ndarray  # (K,)

    @property
    def num_topics(self):
        return self.bias.shape[0]

    @property
    def input_dim(self):
        return self.bias.shape[0] + 1

    def theta(self, hiddens):
        return softmax(hiddens @ self.weights.T + self.bias)

    def tensors(self):
        return {"weights": self.weights, "bias": self.bias}

    def replace_tensors(self, mapping):
        return replace(self, **mapping)

    def embed(self, topics):
        return np.eye(self.input_dim)[np.asarray(topics, dtype=int)]

    def lstm_inputs(self, paths, lengths=None):
        paths = np.asarray(paths, dtype=int)
        n, t_len = paths.shape
        inputs = np.empty((n, t_len, self.input_dim))
        inputs[:, 0] = self.embed(np.full(n, self.num_topics))
        if t_len > 1:
            inputs[:, 1:] = self.embed(paths[:, :-1])
        return inputs

    def nll_and_grads(self, hiddens, paths, lengths=None):
        paths = np.asarray(paths, dtype=int)
        mask = _step_mask(paths.shape, lengths)
        logits = hiddens @ self.weights.T + self.bias
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_norm = np.log(np.sum(np.exp(shifted), axis=-1))
        picked = np.take_along_axis(shifted, paths[..., None], axis=-1)[..., 0]
        nll_per_path = np.sum((log_norm - picked) * mask, axis=1)
        theta = np.exp(shifted) / np.exp(log_norm)[..., None]
        d_logits = theta.copy()
        np.put_along_axis(
            d_logits, paths[..., None], np.take_along_axis(d_logits, paths[..., None], axis=-1) - 1.0, axis=-1
        )
        d_logits *= mask[..., None]
        grads = {
            "weights": np.einsum("ntk,nth->kh", d_logits, hiddens),
            "bias": d_logits.sum(axis=(0, 1)),
        }
        return nll_per_path, d_logits @ self.weights, grads

    def input_grads(self, d_inputs):
        return {}


def _step_mask(shape, lengths):
    if lengths is None:
        return np.ones(shape)
    n, t_len = shape
    return (np.arange(t_len)[None, :] < np.asarray(lengths)[:, None]).astype(float)


# ---------------------------------------------------------------------------
# emissions


class GaussianEmission:
    """Linear-Gaussian emission x = C z + b + noise, noise ~ N(0, R)."""

    def __init__(self, c, b, r):
        self.c = np.asarray(c, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.r = np.asarray(r, dtype=float)
        d, k = self.c.shape
        if self.b.shape != (d,) or self.r.shape != (d, d):
            raise ValueError("inconsistent emission shapes")
        if not np.allclose(self.r, self.r.T, atol=1e-10, rtol=0.0):
            raise ValueError("emission covariance not symmetric")
        self.chol_r = chol_pd(self.r)

    @property
    def obs_dim(self):
        return self.c.shape[0]

    @property
    def latent_dim(self):
        return self.c.shape[1]


class TopicMatrix:
    """Topic-word distributions with their count sufficient statistics.

    ``phi`` rows always equal the Dirichlet MAP (or smoothed-mean) estimate
    of ``counts`` under concentration ``beta``, floored away from zero so no
    in-vocabulary word ever has probability exactly 0.
    """

    def __init__(self, counts, beta, phi=None):
        self.counts = np.asarray(counts)
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")
        if beta <= 0:
            raise ValueError("dirichlet concentration must be positive")
        self.beta = float(beta)
        self.phi = topic_map_update(self.counts, self.beta) if phi is None else phi

    @property
    def num_topics(self):
        return self.counts.shape[0]

    @property
    def vocab_size(self):
        return self.counts.shape[1]

    def word_probs(self, word):
        """phi[:, word] across topics."""
        return self.phi[:, word]


def topic_map_update(counts, beta):
    """Dirichlet-regularized rows from a K x V count matrix.

    Uses the MAP mode formula for beta > 1 and the posterior-mean smoothing
    formula for beta <= 1 (the mode is undefined on empty rows there).
    Rows are floored at a tiny positive mass and renormalized.
    """
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    v = counts.shape[1]
    row_sums = counts.sum(axis=1, keepdims=True)
    if beta > 1.0:
        phi = (counts + beta - 1.0) / (row_sums + v * (beta - 1.0))
    else:
        phi = (counts + beta) / (row_sums + v * beta)
    phi = np.maximum(phi, PHI_FLOOR)
    return phi / phi.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# forward messages


@dataclass
class GaussianMessageBatch:
    """Messages for P particles sharing one posterior covariance."""

    log_alpha: np.ndarray  # (P,)
    means: np.ndarray  # (P, k)
    cov: np.ndarray  # (k, k)
    chol: np.ndarray  # (k, k)


@dataclass
class TopicalMessageBatch:
    log_alpha: np.ndarray  # (P,)
    probs: np.ndarray  # (P, K)


def gauss_messages_batch(prior_means, prior_cov, emission, x):
    """Conjugate-Gaussian messages for a batch of prior means sharing one
    prior covariance.

    With prior N(m, S) and emission N(x; C z + b, R):
      alpha = log N(x; C m + b, R + C S C^T)
      gamma = N(V (C^T R^-1 (x - b) + S^-1 m), V),  V = (S^-1 + C^T R^-1 C)^-1
    """
    means = np.atleast_2d(np.asarray(prior_means, dtype=float))
    x = np.asarray(x, dtype=float)
    c, b = emission.c, emission.b
    chol_sigma = chol_pd(prior_cov)
    # predictive likelihood: shared innovation covariance
    s_mat = emission.r + c @ prior_cov @ c.T
    chol_s = chol_pd(s_mat)
    resid = x[None, :] - (means @ c.T + b[None, :])
    log_alpha = mvn_logpdf_from_residuals(resid, chol_s)
    # filtered posterior: shared covariance V, per-particle means
    sigma_inv = cho_solve((chol_sigma, True), np.eye(prior_cov.shape[0]))
    ct_rinv = cho_solve((emission.chol_r, True), c).T
    precision = sigma_inv + ct_rinv @ c
    v_mat = cho_solve((chol_pd(precision), True), np.eye(precision.shape[0]))
    v_mat = 0.5 * (v_mat + v_mat.T)
    rhs = cho_solve((chol_sigma, True), means.T).T + (ct_rinv @ (x - b))[None, :]
    post_means = rhs @ v_mat
    return GaussianMessageBatch(np.atleast_1d(log_alpha), post_means, v_mat, chol_pd(v_mat))


def gauss_messages(prior, emission, x):
    """Single-prior version of ``gauss_messages_batch`` returning a Message."""
    batch = gauss_messages_batch(prior.mean[None, :], prior.cov, emission, x)
    return Message(float(batch.log_alpha[0]), GaussianDist(batch.means[0], batch.cov))


def topical_messages_batch(thetas, topics, word):
    """Discrete messages: alpha = log <theta, phi_word>, gamma ~ theta o phi_word."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    joint = thetas * topics.word_probs(word)[None, :]
    mass = joint.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_alpha = np.where(mass > 0.0, np.log(np.where(mass > 0.0, mass, 1.0)), -np.inf)
        probs = np.where(mass[:, None] > 0.0, joint / np.where(mass[:, None] > 0.0, mass[:, None], 1.0), 0.0)
    return TopicalMessageBatch(log_alpha, probs)


def topical_messages(theta, topics, word):
    if not 0 <= word < topics.vocab_size:
        raise ValueError(f"word index {word} out of range")
    batch = topical_messages_batch(theta, topics, word)
    if batch.log_alpha[0] == -np.inf:
        raise NumericalError("zero-probability observation")
    return Message(float(batch.log_alpha[0]), batch.probs[0])


# ---------------------------------------------------------------------------
# closed-form emission estimates


def gauss_emission_mle(latents, observations):
    """Least-squares fit of (C, b) and residual covariance R.

    Falls back to a small ridge when the design is rank deficient (e.g. a
    constant latent path); the fallback is logged.
    """
    z = np.asarray(latents, dtype=float)
    x = np.asarray(observations, dtype=float)
    n, k = z.shape
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} pairs, got {n}")
    design = np.concatenate([z, np.ones((n, 1))], axis=1)
    gram = design.T @ design
    rhs = design.T @ x
    try:
        sol = np.linalg.solve(gram, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        logger.warning("rank-deficient emission design; applying ridge %g", EMISSION_RIDGE)
        sol = np.linalg.solve(gram + EMISSION_RIDGE * np.eye(k + 1), rhs)
    c = sol[:k].T
    b = sol[k]
    resid = x - design @ sol
    r = resid.T @ resid / n
    r = 0.5 * (r + r.T)
    return GaussianEmission(c, b, r)


# ---------------------------------------------------------------------------
# model bundles


class GaussianSSL:
    """Continuous-state model: LSTM transition with Gaussian head and
    linear-Gaussian emission."""

    kind = "gaussian"

    def __init__(self, lstm_params, head, emission):
        if head.latent_dim != emission.latent_dim:
            raise ValueError("head and emission latent dims differ")
        if lstm_params.input_dim != head.input_dim:
            raise ValueError("LSTM input width must equal the latent dim")
        self.lstm_params = lstm_params
        self.head = head
        self.emission = emission

    @property
    def latent_dim(self):
        return self.head.latent_dim

    @property
    def obs_dim(self):
        return self.emission.obs_dim

    def first_states(self, batch):
        state = LstmState.zeros(self.lstm_params.hidden_size, batch)
        start = np.broadcast_to(self.head.start, (batch, self.latent_dim))
        return lstm_step(self.lstm_params, state, start)

    def advance(self, states, latents):
        return lstm_step(self.lstm_params, states, latents)

    def gather_states(self, states, idx):
        return states.gather(idx)

    def prior_params(self, states):
        return self.head.mean(states.hidden), self.head.cov()

    def messages(self, states, x):
        means, cov = self.prior_params(states)
        return gauss_messages_batch(means, cov, self.emission, x)

    def sample_message(self, msg, rng):
        return mvn_sample_batch(msg.means, msg.chol, rng)

    def sample_prior(self, states, rng):
        means, cov = self.prior_params(states)
        return mvn_sample_batch(means, chol_pd(cov), rng)

    def prior_point(self, states):
        """Mean of the transition prior (used by mean-mode rollouts)."""
        return self.head.mean(states.hidden)

    def predictive(self, states, weights):
        """Weighted-mixture one-step predictive (latent mean, observation mean)."""
        means, _ = self.prior_params(states)
        z_mean = weights @ means
        return z_mean, self.emission.c @ z_mean + self.emission.b

    def observe_mean(self, latents):
        return np.asarray(latents, dtype=float) @ self.emission.c.T + self.emission.b


class TopicalSSL:
    """Discrete-state model: LSTM transition with softmax head and
    topic-word emission."""

    kind = "topical"

    def __init__(self, lstm_params, head, topics):
        if head.num_topics != topics.num_topics:
            raise ValueError("head and topic matrix disagree on K")
        if lstm_params.input_dim != head.input_dim:
            raise ValueError("LSTM input width must equal K+1 (one-hot + start)")
        self.lstm_params = lstm_params
        self.head = head
        self.topics = topics

    @property
    def num_topics(self):
        return self.head.num_topics

    @property
    def vocab_size(self):
        return self.topics.vocab_size

    def first_states(self, batch):
        state = LstmState.zeros(self.lstm_params.hidden_size, batch)
        start = np.broadcast_to(
            self.head.embed(self.num_topics), (batch, self.head.input_dim)
        )
        return lstm_step(self.lstm_params, state, start)

    def advance(self, states, latents):
        return lstm_step(self.lstm_params, states, self.head.embed(latents))

    def gather_states(self, states, idx):
        return states.gather(idx)

    def prior_params(self, states):
        return self.head.theta(states.hidden)

    def messages(self, states, word):
        return topical_messages_batch(self.prior_params(states), self.topics, word)

    def sample_message(self, msg, rng):
        return categorical_sample_rows(msg.probs, rng)

    def sample_prior(self, states, rng):
        return categorical_sample_rows(self.prior_params(states), rng)

    def prior_point(self, states):
        """Modal topic of the transition prior."""
        return np.argmax(self.prior_params(states), axis=-1)

    def predictive(self, states, weights):
        theta_mix = weights @ self.prior_params(states)
        return theta_mix, theta_mix @ self.topics.phi

    def observe_probs(self, topic_path):
        return self.topics.phi[np.asarray(topic_path, dtype=int)]


def init_gaussian_ssl(latent_dim, obs_dim, hidden_size, rng, sigma=0.5, obs_sigma=1.0):
    """Fresh Gaussian model: identity-like emission, small random head."""
    params = init_lstm_params(hidden_size, latent_dim, rng)
    lim = 1.0 / np.sqrt(hidden_size)
    head = GaussianTransitionHead(
        weights=rng.gen.uniform(-lim, lim, size=(latent_dim, hidden_size)),
        bias=np.zeros(latent_dim),
        log_var=np.full(latent_dim, 2.0 * np.log(sigma)),
        start=np.zeros(latent_dim),
    )
    c = np.eye(obs_dim, latent_dim)
    emission = GaussianEmission(c, np.zeros(obs_dim), obs_sigma**2 * np.eye(obs_dim))
    return GaussianSSL(params, head, emission)


def init_topical_ssl(num_topics, vocab_size, hidden_size, rng, beta=1.01):
    """Fresh topical model: uniform topics, small random head."""
    params = init_lstm_params(hidden_size, num_topics + 1, rng)
    lim = 1.0 / np.sqrt(hidden_size)
    head = TopicalTransitionHead(
        weights=rng.gen.uniform(-lim, lim, size=(num_topics, hidden_size)),
        bias=np.zeros(num_topics),
    )
    topics = TopicMatrix(np.zeros((num_topics, vocab_size), dtype=np.int64), beta)
    return TopicalSSL(params, head, topics)
