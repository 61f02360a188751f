"""Shared test oracles and tiny reference models.

The Kalman filter and the path enumerators are written from the textbook
formulas, independent of the package's own message code, so they can serve
as ground truth.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.stats import multivariate_normal

from sslstm.lstm import LstmParams
from sslstm.models import (
    GaussianEmission,
    TopicMatrix,
    TopicalSSL,
    TopicalTransitionHead,
    gauss_messages_batch,
)
from sslstm.numerics import mvn_sample_batch


def kalman_filter(m0, p0, trans, q, c, b, r, observations):
    """Textbook Kalman filter for x_t = C z_t + b + noise, z_t = A z_{t-1} + w.

    The prior for the first latent state is N(m0, p0) directly.  Returns
    per-step predicted means/covs, filtered means/covs, and log-likelihood
    increments log p(x_t | x_{1:t-1}).
    """
    dim = m0.shape[0]
    eye = np.eye(dim)
    pred_means, pred_covs, filt_means, filt_covs, logliks = [], [], [], [], []
    m_filt, p_filt = None, None
    for t, x in enumerate(observations):
        if t == 0:
            m_pred, p_pred = m0, p0
        else:
            m_pred = trans @ m_filt
            p_pred = trans @ p_filt @ trans.T + q
        innov_cov = c @ p_pred @ c.T + r
        innov = x - (c @ m_pred + b)
        logliks.append(multivariate_normal(mean=np.zeros(len(x)), cov=innov_cov).logpdf(innov))
        gain = p_pred @ c.T @ np.linalg.inv(innov_cov)
        m_filt = m_pred + gain @ innov
        joseph = eye - gain @ c
        p_filt = joseph @ p_pred @ joseph.T + gain @ r @ gain.T
        pred_means.append(m_pred)
        pred_covs.append(p_pred)
        filt_means.append(m_filt)
        filt_covs.append(p_filt)
    return (
        np.array(pred_means),
        np.array(pred_covs),
        np.array(filt_means),
        np.array(filt_covs),
        np.array(logliks),
    )


def random_lds(dim, obs_dim, seed, spectral_radius=0.8):
    """A stable random linear dynamical system for oracle comparisons."""
    gen = np.random.default_rng(seed)
    trans = gen.standard_normal((dim, dim))
    trans *= spectral_radius / max(np.abs(np.linalg.eigvals(trans)))
    q = _random_spd(dim, gen, scale=0.3)
    c = gen.standard_normal((obs_dim, dim))
    b = gen.standard_normal(obs_dim)
    r = _random_spd(obs_dim, gen, scale=0.5)
    m0 = gen.standard_normal(dim)
    p0 = _random_spd(dim, gen, scale=1.0)
    return m0, p0, trans, q, c, b, r


def sample_lds(m0, p0, trans, q, c, b, r, t_len, seed):
    gen = np.random.default_rng(seed)
    dim, obs_dim = m0.shape[0], b.shape[0]
    zs = np.empty((t_len, dim))
    xs = np.empty((t_len, obs_dim))
    z = gen.multivariate_normal(m0, p0)
    for t in range(t_len):
        if t > 0:
            z = trans @ z + gen.multivariate_normal(np.zeros(dim), q)
        zs[t] = z
        xs[t] = c @ z + b + gen.multivariate_normal(np.zeros(obs_dim), r)
    return zs, xs


def _random_spd(dim, gen, scale=1.0):
    a = gen.standard_normal((dim, dim))
    return scale * (a @ a.T + dim * np.eye(dim)) / dim


# ---------------------------------------------------------------------------
# LDS wrapped in the sampling-model interface (the transition prior comes
# from the linear map instead of an LSTM, so the Kalman filter is exact)


@dataclass
class LdsStates:
    means: np.ndarray  # (P, k) prior means
    cov: np.ndarray  # shared prior covariance


class LinearGaussianModel:
    kind = "gaussian"

    def __init__(self, m0, p0, trans, q, c, b, r):
        self.m0, self.p0, self.trans, self.q = m0, p0, trans, q
        self.emission = GaussianEmission(c, b, r)

    def first_states(self, batch):
        return LdsStates(np.tile(self.m0, (batch, 1)), self.p0)

    def advance(self, states, latents):
        return LdsStates(np.atleast_2d(latents) @ self.trans.T, self.q)

    def gather_states(self, states, idx):
        return LdsStates(states.means[idx], states.cov)

    def prior_params(self, states):
        return states.means, states.cov

    def messages(self, states, x):
        return gauss_messages_batch(states.means, states.cov, self.emission, x)

    def sample_message(self, msg, rng):
        return mvn_sample_batch(msg.means, msg.chol, rng)

    def predictive(self, states, weights):
        z_mean = weights @ states.means
        return z_mean, self.emission.c @ z_mean + self.emission.b

    def prior_point(self, states):
        return states.means

    def observe_mean(self, latents):
        return np.atleast_2d(latents) @ self.emission.c.T + self.emission.b


# ---------------------------------------------------------------------------
# exhaustive enumeration over discrete latent paths


def enumerate_discrete(model, observations):
    """Joint probability of every latent path by brute force.

    Returns (paths, joint) where joint[i] = p(path_i, observations).
    """
    k = model.num_topics
    t_len = len(observations)
    paths = list(itertools.product(range(k), repeat=t_len))
    joint = np.empty(len(paths))
    for i, path in enumerate(paths):
        states = model.first_states(1)
        logp = 0.0
        for t in range(t_len):
            theta = model.prior_params(states)[0]
            logp += np.log(theta[path[t]])
            logp += np.log(model.topics.phi[path[t], observations[t]])
            if t + 1 < t_len:
                states = model.advance(states, np.array([path[t]]))
        joint[i] = np.exp(logp)
    return paths, joint


def path_histogram_tv(samples, paths, target_probs):
    """Total variation between empirical path frequencies and a target."""
    index = {path: i for i, path in enumerate(paths)}
    counts = np.zeros(len(paths))
    for s in samples:
        counts[index[tuple(int(v) for v in s)]] += 1
    emp = counts / counts.sum()
    return 0.5 * np.abs(emp - target_probs).sum()


# ---------------------------------------------------------------------------
# a two-topic model with strong, hand-wired transition coupling


def make_coupled_topical(stick_logit=3.0, phi=None):
    """TopicalSSL whose next-topic distribution strongly favours repeating
    the previous topic, while the start step is near uniform.

    Built from saturated gates: the forget gate is pinned near 0 and the
    input/output gates near 1, so hidden ~ tanh(tanh(w.[one-hot input])) is
    a memoryless re-encoding of the previous topic; the head then reads it
    with gain ``stick_logit``.
    """
    hidden = 2
    cols = hidden + 3  # one-hot over {topic 0, topic 1, start}
    zeros = np.zeros((hidden, cols))
    w_c = np.zeros((hidden, cols))
    w_c[0, 2] = 3.0  # previous topic 0 -> cell dim 0 high
    w_c[0, 3] = -3.0  # previous topic 1 -> cell dim 0 low
    # start token leaves the cell at zero -> uniform first-step prior
    params = LstmParams(
        w_i=zeros.copy(),
        w_f=zeros.copy(),
        w_o=zeros.copy(),
        w_c=w_c,
        b_i=np.full(hidden, 30.0),
        b_f=np.full(hidden, -30.0),
        b_o=np.full(hidden, 30.0),
        b_c=np.zeros(hidden),
    )
    head = TopicalTransitionHead(
        weights=np.array([[stick_logit, 0.0], [-stick_logit, 0.0]]),
        bias=np.zeros(2),
    )
    if phi is None:
        phi = np.array([[0.75, 0.25], [0.25, 0.75]])
    topics = TopicMatrix(np.zeros((2, phi.shape[1]), dtype=np.int64), beta=1.01, phi=phi)
    return TopicalSSL(params, head, topics)
