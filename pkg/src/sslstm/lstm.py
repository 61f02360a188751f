"""Single-layer LSTM over latent-state inputs, with exact BPTT.

The forward pass drives the generative transition; the backward pass is the
gradient engine of the M step, which fits the LSTM (and the transition head
stacked on it) to the latent paths imputed by the sampling step.

Transition heads are duck-typed objects that provide:

  - ``input_dim``: width of the LSTM input vectors,
  - ``lstm_inputs(paths, lengths)``: (N, T, input_dim) input array, with the
    start input at position 0 and the embedded latent states after it,
  - ``nll_and_grads(hiddens, paths, lengths)``: per-path negative
    log-likelihood (N,), gradient w.r.t. hiddens, and head tensor gradients,
  - ``input_grads(d_inputs)``: gradients for trainable input-side tensors
    (e.g. a learned start embedding),
  - ``tensors()`` / ``replace_tensors(mapping)``: flat parameter access.

Both heads live in :mod:`sslstm.models`.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit as _sigmoid

from sslstm.numerics import NumericalError

GATES = ("i", "f", "o", "c")


@dataclass
class LstmParams:
    """Gate weights/biases of one LSTM cell.

    Each weight matrix is (hidden, hidden + input) and acts on the
    concatenation [hidden_state; input].  ``forget_bias`` is a fixed
    (untrained) offset added to the forget-gate preactivation.
    """

    w_i: np.ndarray
    w_f: np.ndarray
    w_o: np.ndarray
    w_c: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray
    forget_bias: float = 1.0

    def __post_init__(self):
        h = self.b_i.shape[0]
        cols = self.w_i.shape[1]
        for g in GATES:
            w, b = getattr(self, f"w_{g}"), getattr(self, f"b_{g}")
            if w.shape != (h, cols) or b.shape != (h,):
                raise ValueError("inconsistent LSTM parameter shapes")
        if cols <= h:
            raise ValueError("weight matrices must have hidden+input columns")

    @property
    def hidden_size(self):
        return self.b_i.shape[0]

    @property
    def input_dim(self):
        return self.w_i.shape[1] - self.b_i.shape[0]

    def tensors(self):
        out = {}
        for g in GATES:
            out[f"w_{g}"] = getattr(self, f"w_{g}")
            out[f"b_{g}"] = getattr(self, f"b_{g}")
        return out

    def replace_tensors(self, mapping):
        return replace(self, **mapping)

    def stacked(self):
        """(4h, h+in) weight stack and (4h,) bias stack in gate order."""
        w = np.concatenate([self.w_i, self.w_f, self.w_o, self.w_c], axis=0)
        b = np.concatenate([self.b_i, self.b_f, self.b_o, self.b_c])
        return w, b


@dataclass
class LstmState:
    """Deterministic recurrent state; arrays of shape (..., hidden)."""

    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, hidden_size, batch=None):
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))

    def gather(self, idx):
        return LstmState(self.hidden[idx], self.cell[idx])


def init_lstm_params(hidden_size, input_dim, rng, forget_bias=1.0):
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    cols = hidden_size + input_dim
    lim = 1.0 / np.sqrt(cols)
    weights = {f"w_{g}": rng.gen.uniform(-lim, lim, size=(hidden_size, cols)) for g in GATES}
    biases = {f"b_{g}": np.zeros(hidden_size) for g in GATES}
    return LstmParams(**weights, **biases, forget_bias=forget_bias)


def _gate_preacts(params, z_cat):
    w, b = params.stacked()
    pre = z_cat @ w.T + b
    h = params.hidden_size
    a_i, a_f, a_o, a_c = (pre[..., j * h : (j + 1) * h] for j in range(4))
    return a_i, a_f + params.forget_bias, a_o, a_c


def lstm_step(params, state, inputs):
    """One cell update; works on single states or batches (leading axes)."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.shape[-1] != params.input_dim:
        raise ValueError(
            f"input width {inputs.shape[-1]} does not match params ({params.input_dim})"
        )
    if state.hidden.shape[-1] != params.hidden_size:
        raise ValueError("state width does not match params")
    z_cat = np.concatenate([state.hidden, inputs], axis=-1)
    a_i, a_f, a_o, a_c = _gate_preacts(params, z_cat)
    i_g, f_g, o_g = _sigmoid(a_i), _sigmoid(a_f), _sigmoid(a_o)
    cand = np.tanh(a_c)
    cell = f_g * state.cell + i_g * cand
    hidden = o_g * np.tanh(cell)
    return LstmState(hidden, cell)


def lstm_unroll(params, inputs, initial=None):
    """Fold ``lstm_step`` over an input sequence; returns one state per input."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("inputs must be a nonempty (T, input_dim) sequence")
    state = initial if initial is not None else LstmState.zeros(params.hidden_size)
    states = []
    for t in range(inputs.shape[0]):
        state = lstm_step(params, state, inputs[t])
        states.append(state)
    return states


def _forward_cached(params, inputs):
    """Batched unroll keeping the activations needed by the backward pass.

    inputs: (N, T, input_dim).  Returns hiddens (N, T, h) and per-step caches.
    """
    n, t_len, _ = inputs.shape
    h = params.hidden_size
    w, b = params.stacked()
    hidden = np.zeros((n, h))
    cell = np.zeros((n, h))
    hiddens = np.empty((n, t_len, h))
    caches = []
    for t in range(t_len):
        z_cat = np.concatenate([hidden, inputs[:, t]], axis=-1)
        pre = z_cat @ w.T + b
        a_i, a_f, a_o, a_c = (pre[:, j * h : (j + 1) * h] for j in range(4))
        i_g = _sigmoid(a_i)
        f_g = _sigmoid(a_f + params.forget_bias)
        o_g = _sigmoid(a_o)
        cand = np.tanh(a_c)
        new_cell = f_g * cell + i_g * cand
        tanh_cell = np.tanh(new_cell)
        new_hidden = o_g * tanh_cell
        caches.append((z_cat, i_g, f_g, o_g, cand, cell, tanh_cell))
        hidden, cell = new_hidden, new_cell
        hiddens[:, t] = hidden
    return hiddens, caches


def _backward(params, caches, d_hiddens):
    """Reverse-mode pass; returns LSTM tensor grads and input grads.

    d_hiddens is dLoss/d hidden_t for every step, already masked for padded
    positions; recurrent contributions are accumulated internally.
    """
    n, t_len, h = d_hiddens.shape
    w, _ = params.stacked()
    d_w = np.zeros_like(w)
    d_b = np.zeros(4 * h)
    d_inputs = np.empty((n, t_len, params.input_dim))
    dh_next = np.zeros((n, h))
    dc_next = np.zeros((n, h))
    for t in range(t_len - 1, -1, -1):
        z_cat, i_g, f_g, o_g, cand, cell_prev, tanh_cell = caches[t]
        dh = d_hiddens[:, t] + dh_next
        dc = dc_next + dh * o_g * (1.0 - tanh_cell * tanh_cell)
        da_o = dh * tanh_cell * o_g * (1.0 - o_g)
        da_f = dc * cell_prev * f_g * (1.0 - f_g)
        da_i = dc * cand * i_g * (1.0 - i_g)
        da_c = dc * i_g * (1.0 - cand * cand)
        da = np.concatenate([da_i, da_f, da_o, da_c], axis=-1)
        d_w += da.T @ z_cat
        d_b += da.sum(axis=0)
        dz = da @ w
        dh_next = dz[:, :h]
        d_inputs[:, t] = dz[:, h:]
        dc_next = dc * f_g
    grads = {}
    for j, g in enumerate(GATES):
        grads[f"w_{g}"] = d_w[j * h : (j + 1) * h]
        grads[f"b_{g}"] = d_b[j * h : (j + 1) * h]
    return grads, d_inputs


def bptt_grad(params, head, paths, lengths=None):
    """Mean per-path transition NLL and its exact gradient.

    Returns ``(loss, grads)`` where grads maps ``lstm.<name>`` and
    ``head.<name>`` to arrays shaped like the corresponding tensors.
    """
    inputs = head.lstm_inputs(paths, lengths)
    if inputs.shape[0] == 0:
        raise ValueError("empty path batch")
    n = inputs.shape[0]
    hiddens, caches = _forward_cached(params, inputs)
    nll_per_path, d_hiddens, head_grads = head.nll_and_grads(hiddens, paths, lengths)
    bad = np.flatnonzero(~np.isfinite(nll_per_path))
    if bad.size:
        raise NumericalError(f"non-finite transition loss for path {int(bad[0])}")
    lstm_grads, d_inputs = _backward(params, caches, d_hiddens)
    head_grads.update(head.input_grads(d_inputs))
    grads = {f"lstm.{k}": v / n for k, v in lstm_grads.items()}
    grads.update({f"head.{k}": v / n for k, v in head_grads.items()})
    return float(np.sum(nll_per_path)) / n, grads


@dataclass
class OptimConfig:
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    step_count: int = 50
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")
        if self.step_count < 1:
            raise ValueError("step count must be positive")
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("adam moment decay rates must lie in (0, 1)")


def global_norm(grads):
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def _clip(grads, clip_norm):
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def fit_mle(params, head, paths, config, lengths=None):
    """Run ``config.step_count`` optimizer steps on the transition NLL.

    Returns updated ``(params, head, losses)``.  If the loss turns non-finite
    mid-run, raises ``NumericalError`` carrying the last finite parameters as
    ``err.last_params`` / ``err.last_head``.
    """
    cur_params, cur_head = params, head
    m = v = None
    losses = []
    for step in range(config.step_count):
        try:
            loss, grads = bptt_grad(cur_params, cur_head, paths, lengths)
        except NumericalError as err:
            err.last_params, err.last_head = cur_params, cur_head
            raise
        losses.append(loss)
        grads = _clip(grads, config.clip_norm)
        if config.kind == "adam":
            if m is None:
                m = {k: np.zeros_like(g) for k, g in grads.items()}
                v = {k: np.zeros_like(g) for k, g in grads.items()}
            t = step + 1
            deltas = {}
            for k, g in grads.items():
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g
                v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g
                m_hat = m[k] / (1.0 - config.beta1**t)
                v_hat = v[k] / (1.0 - config.beta2**t)
                deltas[k] = config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        else:
            deltas = {k: config.learning_rate * g for k, g in grads.items()}
        lstm_new = {k[5:]: getattr(cur_params, k[5:]) - d for k, d in deltas.items() if k.startswith("lstm.")}
        head_new = {k[5:]: cur_head.tensors()[k[5:]] - d for k, d in deltas.items() if k.startswith("head.")}
        cur_params = cur_params.replace_tensors(lstm_new)
        cur_head = cur_head.replace_tensors(head_new)
    return cur_params, cur_head, losses
