"""Generators, ingestion, splits, and file formats."""

import json
from dataclasses import replace

import numpy as np
import pytest

from sslstm.data import (
    Corpus,
    DataError,
    TrajectoryConfig,
    gen_topical_corpus,
    gen_trajectory,
    ingest_corpus,
    make_cycling_topics,
    read_corpus_jsonl,
    read_trajectory_csv,
    read_vocab_json,
    split,
    trajectory_truth,
    write_corpus_jsonl,
    write_trajectory_csv,
    write_vocab_json,
)
from sslstm.models import TopicalSSL, init_topical_ssl
from sslstm.numerics import Rng


# ---------------------------------------------------------------------------
# trajectories


def test_trajectory_config_validation():
    with pytest.raises(ValueError, match="kind"):
        TrajectoryConfig("spiral")
    with pytest.raises(ValueError, match="two points"):
        TrajectoryConfig("line", t_len=1)
    with pytest.raises(ValueError, match="sigma"):
        TrajectoryConfig("line", noise_sigma=-0.1)


def test_line_noiseless_has_constant_steps():
    config = TrajectoryConfig("line", t_len=50, noise_sigma=0.0)
    truth, noisy = gen_trajectory(config, Rng(0))
    assert np.array_equal(truth, noisy)
    diffs = np.diff(truth, axis=0)
    assert np.ptp(diffs[:, 0]) < 1e-12
    assert np.ptp(diffs[:, 1]) < 1e-12
    assert np.allclose(truth[:, 1], config.slope * truth[:, 0] + config.intercept)


def test_circle_noiseless_radius_constant():
    config = TrajectoryConfig("circle", t_len=80, noise_sigma=0.0, radius=2.0)
    truth, _ = gen_trajectory(config, Rng(0))
    radii = np.hypot(truth[:, 0], truth[:, 1])
    assert np.all(np.abs(radii - 2.0) < 1e-12)


def test_sine_matches_closed_form():
    config = TrajectoryConfig("sine", t_len=64, noise_sigma=0.0)
    truth = trajectory_truth(config)
    assert np.allclose(
        truth[:, 1], config.amplitude * np.sin(config.angular_freq * truth[:, 0])
    )
    assert np.ptp(np.diff(truth[:, 0])) < 1e-12


def test_swiss_roll_arm_grows_monotonically():
    truth = trajectory_truth(TrajectoryConfig("swiss_roll", t_len=120))
    radii = np.hypot(truth[:, 0], truth[:, 1])
    assert np.all(np.diff(radii) > 0)


def test_swiss_roll_span_matches_closed_form():
    config = TrajectoryConfig(
        "swiss_roll", t_len=40, noise_sigma=0.0, roll_rate=0.5, roll_start=1.0, roll_end=7.0
    )
    truth = trajectory_truth(config)
    s = np.linspace(1.0, 7.0, 40)
    assert np.allclose(truth[:, 0], 0.5 * s * np.cos(s))
    assert np.allclose(truth[:, 1], 0.5 * s * np.sin(s))


def test_swiss_roll_rejects_empty_span():
    with pytest.raises(ValueError, match="roll_end"):
        TrajectoryConfig("swiss_roll", roll_start=2.0, roll_end=2.0)


def test_sine_noise_mse_in_chi_square_band():
    # With sigma=0.1 the per-coordinate MSE concentrates around 1e-2; the
    # band is roughly +/- 2 standard errors of a chi-square mean at T=1000.
    config = TrajectoryConfig("sine", t_len=1000, noise_sigma=0.1)
    truth, noisy = gen_trajectory(config, Rng(0))
    mse = ((noisy - truth) ** 2).mean(axis=0)
    assert np.all(mse > 0.009) and np.all(mse < 0.011)


def test_trajectory_generation_deterministic():
    config = TrajectoryConfig("circle", t_len=30)
    _, a = gen_trajectory(config, Rng(7))
    _, b = gen_trajectory(config, Rng(7))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# synthetic corpora


def test_corpus_shapes_and_ranges():
    model = make_cycling_topics(5, 50)
    corpus, paths = gen_topical_corpus(model, 7, 40, Rng(3))
    assert corpus.num_documents == 7
    assert corpus.vocab_size == 50
    assert corpus.total_tokens == 7 * 40
    for doc, path in zip(corpus.documents, paths):
        assert doc.shape == path.shape == (40,)
        assert doc.min() >= 0 and doc.max() < 50
        assert path.min() >= 0 and path.max() < 5


def test_single_topic_paths_are_constant():
    model = init_topical_ssl(1, 6, 4, Rng(0))
    _, paths = gen_topical_corpus(model, 3, 20, Rng(1))
    for path in paths:
        assert np.all(path == 0)


def test_deterministic_theta_walks_the_cycle():
    model = make_cycling_topics(4, 12, stick_logit=500.0)
    # A small bias pins the first topic (where all logits are otherwise 0)
    # without competing with the ~380-logit cycle preference afterwards.
    head = replace(model.head, bias=np.array([50.0, 0.0, 0.0, 0.0]))
    model = TopicalSSL(model.lstm_params, head, model.topics)
    _, paths = gen_topical_corpus(model, 2, 9, Rng(5))
    expected = np.array([0, 1, 2, 3, 0, 1, 2, 3, 0])
    for path in paths:
        assert np.array_equal(path, expected)


def test_word_marginals_match_the_mixture():
    model = make_cycling_topics(5, 50)
    corpus, paths = gen_topical_corpus(model, 100, 1000, Rng(42))
    words = np.concatenate(corpus.documents)
    empirical = np.bincount(words, minlength=50) / words.size
    # The cycle is rotation-symmetric and the start step is uniform, so the
    # topic marginal is uniform at every step and the word marginal is the
    # plain mixture of the topic rows.
    target = model.topics.phi.mean(axis=0)
    assert 0.5 * np.abs(empirical - target).sum() < 0.02


def test_corpus_generation_deterministic():
    model = make_cycling_topics(3, 9)
    a, pa = gen_topical_corpus(model, 4, 15, Rng(11))
    b, pb = gen_topical_corpus(model, 4, 15, Rng(11))
    for x, y in zip(a.documents + pa, b.documents + pb):
        assert np.array_equal(x, y)


def test_corpus_generation_argument_errors():
    model = make_cycling_topics(2, 6)
    with pytest.raises(ValueError):
        gen_topical_corpus(model, 0, 5, Rng(0))
    with pytest.raises(ValueError):
        gen_topical_corpus(model, 5, 0, Rng(0))


def test_cycling_model_construction_guards():
    with pytest.raises(ValueError, match="two topics"):
        make_cycling_topics(1, 10)
    with pytest.raises(ValueError, match="vocab"):
        make_cycling_topics(8, 6)
    with pytest.raises(ValueError, match="bleed"):
        make_cycling_topics(3, 9, bleed=1.5)
    model = make_cycling_topics(5, 50)
    assert np.allclose(model.topics.phi.sum(axis=1), 1.0)
    assert np.allclose(model.prior_params(model.first_states(1))[0], 0.2)
    for prev in range(5):
        states = model.advance(model.first_states(1), np.array([prev]))
        theta = model.prior_params(states)[0]
        assert np.argmax(theta) == (prev + 1) % 5
        assert theta.max() > 0.8


# ---------------------------------------------------------------------------
# ingestion


def write_docs(tmp_path, texts):
    paths = []
    for i, text in enumerate(texts):
        p = tmp_path / f"doc{i}.txt"
        p.write_text(text)
        paths.append(str(p))
    return paths


def test_ingest_frequency_cutoff_to_oov(tmp_path):
    paths = write_docs(tmp_path, ["a a b"])
    corpus = ingest_corpus(paths, vocab_size=3, min_doc_len=1)
    assert corpus.types == ["<start>", "<oov>", "a"]
    assert corpus.counts == [0, 1, 2]
    assert np.array_equal(corpus.documents[0], [2, 2, 1])
    assert corpus.start_index == 0 and corpus.oov_index == 1


def test_ingest_lowercases_and_strips_punctuation(tmp_path):
    paths = write_docs(tmp_path, ["The cat, the CAT!"])
    corpus = ingest_corpus(paths, vocab_size=4, min_doc_len=1)
    # "cat" and "the" tie at two occurrences; lexicographic order breaks it.
    assert corpus.types == ["<start>", "<oov>", "cat", "the"]
    assert np.array_equal(corpus.documents[0], [3, 2, 3, 2])


def test_ingest_drops_short_documents(tmp_path):
    paths = write_docs(tmp_path, ["one two three four five", "tiny"])
    corpus = ingest_corpus(paths, vocab_size=8, min_doc_len=3)
    assert corpus.num_documents == 1
    with pytest.raises(DataError, match="empty corpus"):
        ingest_corpus(paths, vocab_size=8, min_doc_len=100)


def test_ingest_unreadable_file_names_it(tmp_path):
    missing = str(tmp_path / "nope.txt")
    with pytest.raises(DataError, match="nope.txt"):
        ingest_corpus([missing], vocab_size=4, min_doc_len=1)


def test_ingest_vocab_too_small(tmp_path):
    paths = write_docs(tmp_path, ["a b c"])
    with pytest.raises(DataError, match="reserved"):
        ingest_corpus(paths, vocab_size=2, min_doc_len=1)


def test_ingest_is_deterministic(tmp_path):
    texts = [
        "alpha beta gamma delta alpha beta gamma alpha beta alpha",
        "beta gamma delta epsilon zeta beta gamma delta epsilon beta",
        "zeta eta theta iota kappa zeta eta theta zeta eta",
    ]
    paths = write_docs(tmp_path, texts)
    first = ingest_corpus(paths, vocab_size=6, min_doc_len=5)
    second = ingest_corpus(paths, vocab_size=6, min_doc_len=5)
    assert first.types == second.types
    assert first.counts == second.counts
    for a, b in zip(first.documents, second.documents):
        assert np.array_equal(a, b)
    out1, out2 = tmp_path / "c1.jsonl", tmp_path / "c2.jsonl"
    write_corpus_jsonl(out1, first)
    write_corpus_jsonl(out2, second)
    assert out1.read_bytes() == out2.read_bytes()


def test_ingest_oov_count_accounts_for_dropped_types(tmp_path):
    paths = write_docs(tmp_path, ["a a a b b c"])
    corpus = ingest_corpus(paths, vocab_size=4, min_doc_len=1)
    # "a" and "b" kept, "c" maps to oov
    assert corpus.counts == [0, 1, 3, 2]
    assert sum(corpus.counts) == 6


# ---------------------------------------------------------------------------
# splits


def test_split_time_prefix_floor():
    seq = np.arange(20).reshape(10, 2)
    train, test = split(seq, 0.6, "time")
    assert train.shape == (6, 2) and test.shape == (4, 2)
    assert np.array_equal(np.vstack([train, test]), seq)
    train, test = split(seq, 0.35, "time")
    assert train.shape == (3, 2) and test.shape == (7, 2)


def test_split_documents_list_and_corpus():
    docs = [np.array([i]) for i in range(5)]
    train, test = split(docs, 0.6, "documents")
    assert len(train) == 3 and len(test) == 2
    corpus = Corpus(documents=docs, vocab_size=5, types=["x"], counts=[1])
    left, right = split(corpus, 0.6, "documents")
    assert isinstance(left, Corpus) and isinstance(right, Corpus)
    assert left.num_documents == 3 and right.num_documents == 2
    assert left.vocab_size == right.vocab_size == 5
    assert left.types == right.types == ["x"]


def test_split_rejects_empty_sides_and_bad_args():
    with pytest.raises(ValueError, match="empty"):
        split(np.zeros((10, 2)), 0.05, "time")
    with pytest.raises(ValueError, match="empty"):
        split([np.array([0])], 0.5, "documents")
    with pytest.raises(ValueError, match="fraction"):
        split(np.zeros((10, 2)), 0.0, "time")
    with pytest.raises(ValueError, match="fraction"):
        split(np.zeros((10, 2)), 1.0, "time")
    with pytest.raises(ValueError, match="axis"):
        split(np.zeros((10, 2)), 0.5, "rows")


def test_split_uses_no_randomness():
    seq = np.arange(30).reshape(15, 2)
    a = split(seq, 0.4, "time")
    b = split(seq, 0.4, "time")
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# ---------------------------------------------------------------------------
# file formats


def test_trajectory_csv_round_trip(tmp_path):
    config = TrajectoryConfig("swiss_roll", t_len=25, noise_sigma=0.2)
    truth, noisy = gen_trajectory(config, Rng(9))
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, truth, noisy)
    header = path.read_text().splitlines()[0]
    assert header == "t,true_x,true_y,obs_x,obs_y"
    truth2, noisy2 = read_trajectory_csv(path)
    assert np.array_equal(truth, truth2)
    assert np.array_equal(noisy, noisy2)


def test_trajectory_csv_errors(tmp_path):
    with pytest.raises(DataError, match="cannot read"):
        read_trajectory_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(DataError, match="not a trajectory"):
        read_trajectory_csv(bad)
    malformed = tmp_path / "mal.csv"
    malformed.write_text("t,true_x,true_y,obs_x,obs_y\n0,1.0,oops,3.0,4.0\n")
    with pytest.raises(DataError, match="malformed"):
        read_trajectory_csv(malformed)
    empty = tmp_path / "empty.csv"
    empty.write_text("t,true_x,true_y,obs_x,obs_y\n")
    with pytest.raises(DataError, match="no rows"):
        read_trajectory_csv(empty)


def test_corpus_jsonl_round_trip(tmp_path):
    model = make_cycling_topics(3, 12)
    corpus, _ = gen_topical_corpus(model, 5, 8, Rng(2))
    path = tmp_path / "corpus.jsonl"
    write_corpus_jsonl(path, corpus)
    loaded = read_corpus_jsonl(path, vocab_size=12)
    assert loaded.vocab_size == 12
    assert loaded.num_documents == 5
    for a, b in zip(corpus.documents, loaded.documents):
        assert np.array_equal(a, b)
    inferred = read_corpus_jsonl(path)
    assert inferred.vocab_size == max(d.max() for d in corpus.documents) + 1


def test_corpus_jsonl_errors(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"tokens": [1, 2]}\nnot json\n')
    with pytest.raises(DataError, match="bad.jsonl:2"):
        read_corpus_jsonl(path)
    path.write_text('{"words": [1]}\n')
    with pytest.raises(DataError, match="bad corpus line"):
        read_corpus_jsonl(path)
    path.write_text('{"tokens": []}\n')
    with pytest.raises(DataError, match="nonempty"):
        read_corpus_jsonl(path)
    path.write_text('{"tokens": [5]}\n')
    with pytest.raises(DataError, match="outside vocab"):
        read_corpus_jsonl(path, vocab_size=3)
    path.write_text("")
    with pytest.raises(DataError, match="empty corpus file"):
        read_corpus_jsonl(path)


def test_vocab_json_round_trip(tmp_path):
    paths = write_docs(tmp_path, ["red green blue red green red"])
    corpus = ingest_corpus(paths, vocab_size=4, min_doc_len=1)
    vocab_path = tmp_path / "vocab.json"
    write_vocab_json(vocab_path, corpus)
    types, counts = read_vocab_json(vocab_path)
    assert types == corpus.types
    assert counts == corpus.counts
    blob = json.loads(vocab_path.read_text())
    assert set(blob) == {"types", "counts"}
    with pytest.raises(ValueError, match="no vocabulary"):
        write_vocab_json(vocab_path, Corpus(documents=[], vocab_size=3))
    with pytest.raises(DataError, match="cannot read"):
        read_vocab_json(tmp_path / "missing.json")
