"""Synthetic trajectories, synthetic corpora, and text ingestion.

Everything here is deterministic given its inputs (and the passed RNG), so
generated files are stable byte-for-byte across runs.
"""

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from sslstm.lstm import LstmParams
from sslstm.models import TopicMatrix, TopicalSSL, TopicalTransitionHead
from sslstm.numerics import categorical_sample_rows

TRAJECTORY_KINDS = ("line", "sine", "circle", "swiss_roll")

START_TYPE = "<start>"
OOV_TYPE = "<oov>"


class DataError(Exception):
    """Unusable input data: missing files, bad formats, empty corpora."""


# ---------------------------------------------------------------------------
# 2-D tracking trajectories


@dataclass
class TrajectoryConfig:
    """One synthetic 2-D curve observed under isotropic Gaussian noise.

    The curve parameter runs over a kind-specific range chosen so the
    coordinates stay within a few units of the origin; the swiss-roll span
    [roll_start, roll_end] is adjustable.
    """

    kind: str
    t_len: int = 200
    noise_sigma: float = 0.1
    slope: float = 0.5
    intercept: float = -0.3
    amplitude: float = 2.0
    angular_freq: float = 1.0
    radius: float = 2.0
    turns: float = 2.0
    roll_rate: float = 0.25
    roll_start: float = 0.5 * np.pi
    roll_end: float = 3.0 * np.pi

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.t_len < 2:
            raise ValueError("trajectories need at least two points")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be nonnegative")
        if self.roll_end <= self.roll_start:
            raise ValueError("roll_end must exceed roll_start")


def trajectory_truth(config):
    t_len = config.t_len
    if config.kind == "line":
        s = np.linspace(-3.0, 3.0, t_len)
        return np.stack([s, config.slope * s + config.intercept], axis=1)
    if config.kind == "sine":
        s = np.linspace(-2.0 * np.pi, 2.0 * np.pi, t_len)
        return np.stack(
            [s, config.amplitude * np.sin(config.angular_freq * s)], axis=1
        )
    if config.kind == "circle":
        angles = np.linspace(0.0, 2.0 * np.pi * config.turns, t_len)
        return config.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    s = np.linspace(config.roll_start, config.roll_end, t_len)
    arm = config.roll_rate * s
    return np.stack([arm * np.cos(s), arm * np.sin(s)], axis=1)


def gen_trajectory(config, rng):
    """Return ``(truth, noisy)``, both (T, 2)."""
    truth = trajectory_truth(config)
    noisy = truth + config.noise_sigma * rng.standard_normal(truth.shape)
    return truth, noisy


# ---------------------------------------------------------------------------
# corpora


@dataclass
class Corpus:
    """Integer-token documents plus optional vocabulary metadata.

    Ingested corpora carry the id->type table and reserve ids for the
    start-of-document and out-of-vocabulary pseudo-words; purely synthetic
    corpora leave the metadata unset.
    """

    documents: list
    vocab_size: int
    types: list = None
    counts: list = None
    start_index: int = None
    oov_index: int = None

    @property
    def num_documents(self):
        return len(self.documents)

    @property
    def total_tokens(self):
        return int(sum(len(d) for d in self.documents))


def gen_topical_corpus(model, num_docs, doc_length, rng):
    """Sample documents from a topical model; returns (Corpus, topic paths)."""
    if num_docs < 1:
        raise ValueError("need at least one document")
    if doc_length < 1:
        raise ValueError("documents need at least one token")
    states = model.first_states(num_docs)
    topics = np.empty((num_docs, doc_length), dtype=np.int64)
    words = np.empty((num_docs, doc_length), dtype=np.int64)
    for t in range(doc_length):
        theta = model.prior_params(states)
        z = categorical_sample_rows(theta, rng)
        words[:, t] = categorical_sample_rows(model.topics.phi[z], rng)
        topics[:, t] = z
        if t + 1 < doc_length:
            states = model.advance(states, z)
    corpus = Corpus(documents=list(words), vocab_size=model.vocab_size)
    return corpus, list(topics)


def make_cycling_topics(num_topics, vocab_size, stick_logit=5.0, bleed=0.3, beta=1.01):
    """Hand-wired topical model whose latent topic tends to step through a
    fixed cycle, with word distributions that overlap across topics.

    The long-range coupling (the next topic depends on the previous one
    through the recurrence, not on the current word alone) is what makes
    corpora from this model hard for fully factored path updates.  Gates are
    saturated so the hidden state is a clean re-encoding of the previous
    topic: input/output gates pinned at 1, forget gate at 0.
    """
    if num_topics < 2:
        raise ValueError("a cycle needs at least two topics")
    if not 0.0 <= bleed <= 1.0:
        raise ValueError("bleed must be a probability")
    hidden, width = num_topics, num_topics + 1
    zeros = np.zeros((hidden, hidden + width))
    w_c = zeros.copy()
    w_c[:, hidden : hidden + num_topics] = 3.0 * np.eye(num_topics)
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
    head_w = np.zeros((num_topics, hidden))
    for topic in range(num_topics):
        head_w[topic, (topic - 1) % num_topics] = stick_logit
    head = TopicalTransitionHead(weights=head_w, bias=np.zeros(num_topics))

    block = vocab_size // num_topics
    if block < 1:
        raise ValueError("vocab too small for the topic count")
    phi = np.full((num_topics, vocab_size), bleed / vocab_size)
    for topic in range(num_topics):
        lo = topic * block
        hi = vocab_size if topic == num_topics - 1 else lo + block
        phi[topic, lo:hi] += (1.0 - bleed) / (hi - lo)
    topics = TopicMatrix(
        np.zeros((num_topics, vocab_size), dtype=np.int64), beta, phi=phi
    )
    return TopicalSSL(params, head, topics)


def ingest_corpus(paths, vocab_size, min_doc_len=500):
    """Tokenize text files into an integer corpus with a capped vocabulary.

    Tokens are lowercased alphanumeric runs.  Documents shorter than
    ``min_doc_len`` tokens are dropped.  The ``vocab_size - 2`` most frequent
    types are kept (ties broken lexicographically) after ids 0/1 are reserved
    for the start and out-of-vocabulary pseudo-words; everything else maps to
    the oov id.
    """
    if vocab_size < 3:
        raise DataError("vocab_size must exceed the two reserved ids")
    token_docs = []
    for path in paths:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except (OSError, UnicodeDecodeError) as err:
            raise DataError(f"cannot read {path}: {err}") from err
        tokens = re.findall(r"[a-z0-9]+", text.lower())
        if len(tokens) >= min_doc_len:
            token_docs.append(tokens)
    if not token_docs:
        raise DataError("empty corpus: no document meets the minimum length")
    freq = Counter(tok for doc in token_docs for tok in doc)
    ranked = sorted(freq.items(), key=lambda item: (-item[1], item[0]))
    kept = ranked[: vocab_size - 2]
    index = {word: i + 2 for i, (word, _) in enumerate(kept)}
    documents = [
        np.array([index.get(tok, 1) for tok in doc], dtype=np.int64)
        for doc in token_docs
    ]
    kept_total = sum(count for _, count in kept)
    total = sum(freq.values())
    return Corpus(
        documents=documents,
        vocab_size=vocab_size,
        types=[START_TYPE, OOV_TYPE] + [word for word, _ in kept],
        counts=[0, total - kept_total] + [count for _, count in kept],
        start_index=0,
        oov_index=1,
    )


# ---------------------------------------------------------------------------
# train/test splits


def split(dataset, fraction, axis):
    """Deterministic prefix split; the train side gets floor(fraction * n)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly inside (0, 1)")
    if axis == "time":
        seq = np.asarray(dataset)
        cut = int(np.floor(fraction * len(seq)))
        if cut == 0 or cut == len(seq):
            raise ValueError("split leaves one side empty")
        return seq[:cut], seq[cut:]
    if axis != "documents":
        raise ValueError(f"unknown split axis {axis!r}")
    if isinstance(dataset, Corpus):
        head, tail = split(dataset.documents, fraction, "documents")

        def rewrap(docs):
            return Corpus(
                documents=docs,
                vocab_size=dataset.vocab_size,
                types=dataset.types,
                counts=dataset.counts,
                start_index=dataset.start_index,
                oov_index=dataset.oov_index,
            )

        return rewrap(head), rewrap(tail)
    docs = list(dataset)
    cut = int(np.floor(fraction * len(docs)))
    if cut == 0 or cut == len(docs):
        raise ValueError("split leaves one side empty")
    return docs[:cut], docs[cut:]


# ---------------------------------------------------------------------------
# file formats

TRAJECTORY_HEADER = ["t", "true_x", "true_y", "obs_x", "obs_y"]


def write_trajectory_csv(path, truth, noisy):
    truth, noisy = np.asarray(truth), np.asarray(noisy)
    if truth.shape != noisy.shape or truth.ndim != 2 or truth.shape[1] != 2:
        raise ValueError("trajectory arrays must both be (T, 2)")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_HEADER)
        for t in range(truth.shape[0]):
            # repr of a Python float is the shortest digit string that
            # round-trips, so reading the file back is bit-exact.
            values = [truth[t, 0], truth[t, 1], noisy[t, 0], noisy[t, 1]]
            writer.writerow([t] + [repr(float(v)) for v in values])


def read_trajectory_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err
    if not rows or rows[0] != TRAJECTORY_HEADER:
        raise DataError(f"{path}: not a trajectory file")
    try:
        body = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    except (ValueError, IndexError) as err:
        raise DataError(f"{path}: malformed trajectory row: {err}") from err
    if body.size == 0:
        raise DataError(f"{path}: trajectory file has no rows")
    return body[:, :2], body[:, 2:]


def write_corpus_jsonl(path, corpus):
    with open(path, "w") as fh:
        for doc in corpus.documents:
            fh.write(json.dumps({"tokens": [int(w) for w in doc]}, separators=(",", ":")))
            fh.write("\n")


def read_corpus_jsonl(path, vocab_size=None):
    documents = []
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            tokens = json.loads(line)["tokens"]
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise DataError(f"{path}:{lineno}: bad corpus line: {err}") from err
        doc = np.asarray(tokens, dtype=np.int64)
        if doc.ndim != 1 or doc.size == 0 or np.any(doc < 0):
            raise DataError(f"{path}:{lineno}: tokens must be a nonempty list of ids")
        documents.append(doc)
    if not documents:
        raise DataError(f"{path}: empty corpus file")
    top = max(int(doc.max()) for doc in documents) + 1
    if vocab_size is None:
        vocab_size = top
    elif top > vocab_size:
        raise DataError(f"{path}: token id {top - 1} outside vocab of {vocab_size}")
    return Corpus(documents=documents, vocab_size=vocab_size)


def write_vocab_json(path, corpus):
    if corpus.types is None:
        raise ValueError("corpus has no vocabulary table")
    with open(path, "w") as fh:
        json.dump(
            {"types": corpus.types, "counts": corpus.counts},
            fh,
            sort_keys=True,
            separators=(",", ":"),
        )


def read_vocab_json(path):
    try:
        with open(path) as fh:
            blob = json.load(fh)
        return list(blob["types"]), list(blob["counts"])
    except (OSError, json.JSONDecodeError, KeyError) as err:
        raise DataError(f"cannot read vocab {path}: {err}") from err
