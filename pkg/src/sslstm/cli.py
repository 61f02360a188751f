"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 unusable data or checkpoint,
3 numerical failure during sampling or optimization.  Every command takes
one ``--seed``; anything random inside derives a named substream from it
(data/init/sstep/mstep/eval), so a rerun with the same seed, config, and
``--threads 1`` writes byte-identical primary outputs.
"""

import argparse
import csv
import json
import sys

import numpy as np

from sslstm.checkpoint import CheckpointError, load, save
from sslstm.data import (
    DataError,
    TRAJECTORY_KINDS,
    TrajectoryConfig,
    gen_topical_corpus,
    gen_trajectory,
    make_cycling_topics,
    read_corpus_jsonl,
    read_trajectory_csv,
    split,
    write_corpus_jsonl,
    write_trajectory_csv,
)
from sslstm.evaluation import (
    blind_observation_path,
    config_hash,
    filtered_observation_path,
    metric_report,
    nnz,
    perplexity,
    tracking_error,
)
from sslstm.inference import ReferencePath, conditional_smc, sample_final_path, smc_pass
from sslstm.lstm import OptimConfig
from sslstm.numerics import NumericalError, Rng
from sslstm.training import TrainConfig, stochastic_em


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here is 1 for
    # usage problems, so route through an exception main() can map.
    def error(self, message):
        raise CliUsageError(message)


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0, help="root random seed")
    parser.add_argument(
        "--threads",
        type=int,
        default=1,
        help="worker cap (execution is sequential; kept for interface stability)",
    )
    parser.add_argument("--config", help="JSON file whose keys override defaults")
    parser.add_argument("--out", help="output file (defaults to stdout for reports)")


def _build_parser():
    parser = _Parser(prog="sslstm", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("generate", help="write synthetic data")
    _add_common(gen)
    gen.add_argument("--kind", choices=TRAJECTORY_KINDS, help="trajectory curve")
    gen.add_argument("--t-len", type=int, default=200)
    gen.add_argument("--noise", type=float, default=0.1)
    gen.add_argument("--corpus", action="store_true", help="emit a topical corpus instead")
    gen.add_argument("--topics", type=int, default=5)
    gen.add_argument("--vocab", type=int, default=50)
    gen.add_argument("--docs", type=int, default=200)
    gen.add_argument("--doc-len", type=int, default=50)
    gen.add_argument("--true-paths", help="also dump the generating topic paths (JSONL)")
    gen.set_defaults(func=cmd_generate)

    train = commands.add_parser("train", help="run stochastic EM")
    _add_common(train)
    train.add_argument("--data", required=True)
    train.add_argument("--head", choices=("gaussian", "topical"), required=True)
    train.add_argument("--iters", type=int, default=10)
    train.add_argument("--pstart", type=int, default=1)
    train.add_argument("--pmax", type=int, default=8)
    train.add_argument("--schedule", choices=("linear", "doubling"), default="linear")
    train.add_argument("--ramp", type=int, default=1)
    train.add_argument("--inference", choices=("pg", "factored"), default="pg")
    train.add_argument("--split", type=float, default=0.6, help="train fraction; 1 uses all data")
    train.add_argument("--hidden", type=int, default=0, help="0 = per-head default")
    train.add_argument("--latent-dim", type=int, default=2)
    train.add_argument("--topics", type=int, default=5)
    train.add_argument("--vocab", type=int, default=0, help="0 = infer from the corpus")
    train.add_argument("--beta", type=float, default=1.01)
    train.add_argument("--init-sigma", type=float, default=0.5)
    train.add_argument("--obs-sigma", type=float, default=1.0)
    train.add_argument("--opt-steps", type=int, default=50)
    train.add_argument("--lr", type=float, default=1e-3)
    train.add_argument("--clip", type=float, default=5.0)
    train.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    train.add_argument("--metrics", help="JSONL metrics log path")
    train.set_defaults(func=cmd_train)

    ev = commands.add_parser("eval", help="score a checkpoint")
    _add_common(ev)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--metric", choices=("perplexity", "tracking", "nnz"), required=True)
    ev.add_argument("--particles", type=int, default=64)
    ev.add_argument(
        "--heldout",
        action="store_true",
        help="score only the test side of the checkpoint's stored split",
    )
    ev.set_defaults(func=cmd_eval)

    pred = commands.add_parser("predict", help="filtered and blind predictions (CSV)")
    _add_common(pred)
    pred.add_argument("--ckpt", required=True)
    pred.add_argument("--data", required=True)
    pred.add_argument("--particles", type=int, default=64)
    pred.add_argument("--horizon", type=int, default=-1, help="-1 = test-segment length")
    pred.set_defaults(func=cmd_predict)

    paths = commands.add_parser("paths", help="dump one conditional sweep (JSON)")
    _add_common(paths)
    paths.add_argument("--ckpt", required=True)
    paths.add_argument("--data", required=True)
    paths.add_argument("--doc", type=int, default=0)
    paths.add_argument("--particles", type=int, default=8)
    paths.set_defaults(func=cmd_paths)
    return parser


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliUsageError("--threads must be at least 1")
        return args.func(args)
    except (CliUsageError, ValueError) as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 3


def _overrides(args):
    if not args.config:
        return {}
    try:
        with open(args.config) as fh:
            blob = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read config {args.config}: {err}") from err
    if not isinstance(blob, dict):
        raise CliUsageError("config file must hold a JSON object")
    return blob


def _emit(args, text):
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    if not args.out:
        raise CliUsageError("generate needs --out")
    rng = Rng(args.seed).stream("data")
    if args.corpus:
        model = make_cycling_topics(args.topics, args.vocab)
        corpus, true_paths = gen_topical_corpus(model, args.docs, args.doc_len, rng)
        write_corpus_jsonl(args.out, corpus)
        if args.true_paths:
            with open(args.true_paths, "w") as fh:
                for path in true_paths:
                    fh.write(json.dumps({"topics": [int(z) for z in path]}, separators=(",", ":")))
                    fh.write("\n")
        print(
            f"corpus: {corpus.num_documents} docs x {args.doc_len} tokens, "
            f"vocab {corpus.vocab_size} -> {args.out}"
        )
        return 0
    if not args.kind:
        raise CliUsageError("generate needs --kind or --corpus")
    try:
        config = TrajectoryConfig(
            args.kind, t_len=args.t_len, noise_sigma=args.noise, **_overrides(args)
        )
    except TypeError as err:
        raise CliUsageError(f"bad trajectory config: {err}") from err
    truth, noisy = gen_trajectory(config, rng)
    write_trajectory_csv(args.out, truth, noisy)
    print(f"{config.kind}: {config.t_len} steps, noise sigma {config.noise_sigma} -> {args.out}")
    return 0


def _train_config(args, vocab_size):
    fields = dict(
        head=args.head,
        em_iterations=args.iters,
        particles_start=args.pstart,
        particles_max=args.pmax,
        schedule=args.schedule,
        schedule_ramp=args.ramp,
        inference=args.inference,
        seed=args.seed,
        hidden_size=args.hidden,
        latent_dim=args.latent_dim,
        obs_dim=2,
        init_sigma=args.init_sigma,
        obs_sigma=args.obs_sigma,
        num_topics=args.topics,
        vocab_size=vocab_size,
        dirichlet_beta=args.beta,
    )
    optim = dict(
        step_count=args.opt_steps,
        learning_rate=args.lr,
        clip_norm=args.clip,
        kind=args.optimizer,
    )
    overrides = _overrides(args)
    optim.update(overrides.pop("optimizer", {}))
    unknown = set(overrides) - set(fields)
    if unknown:
        raise CliUsageError(f"unknown config keys: {sorted(unknown)}")
    fields.update(overrides)
    try:
        return TrainConfig(optimizer=OptimConfig(**optim), **fields)
    except TypeError as err:
        raise CliUsageError(f"bad optimizer config: {err}") from err


def _train_dataset(args):
    if args.head == "gaussian":
        _, noisy = read_trajectory_csv(args.data)
        train = noisy if args.split >= 1.0 else split(noisy, args.split, "time")[0]
        return [train], 0
    corpus = read_corpus_jsonl(args.data, vocab_size=args.vocab or None)
    docs = (
        corpus.documents
        if args.split >= 1.0
        else split(corpus, args.split, "documents")[0].documents
    )
    return docs, corpus.vocab_size


def cmd_train(args):
    if not args.out:
        raise CliUsageError("train needs --out")
    dataset, vocab_size = _train_dataset(args)
    config = _train_config(args, vocab_size)
    checkpoint = stochastic_em(dataset, config, metrics_file=args.metrics)
    checkpoint.config["split_fraction"] = args.split
    save(checkpoint, args.out)
    return 0


def _eval_perplexity(args, checkpoint, rng):
    model = checkpoint.model
    if model.kind != "topical":
        raise DataError("perplexity needs a topical checkpoint")
    corpus = read_corpus_jsonl(args.data, vocab_size=model.vocab_size)
    docs = corpus.documents
    fraction = checkpoint.config.get("split_fraction", 1.0)
    if args.heldout:
        if not 0.0 < fraction < 1.0:
            raise DataError("checkpoint stores no train/test split")
        docs = split(docs, fraction, "documents")[1]
    value = perplexity(model, docs, num_particles=args.particles, rng=rng)
    return [metric_report("perplexity", value, args.particles, args.seed, checkpoint.config)]


def _eval_tracking(args, checkpoint, rng):
    model = checkpoint.model
    if model.kind != "gaussian":
        raise DataError("tracking needs a continuous-emission checkpoint")
    truth, noisy = read_trajectory_csv(args.data)
    fraction = checkpoint.config.get("split_fraction", 0.6)
    if not 0.0 < fraction < 1.0:
        raise DataError("checkpoint stores no train/test split")
    train_len = int(np.floor(fraction * len(noisy)))
    filtered, blind = tracking_error(
        model, truth, noisy, train_len, num_particles=args.particles, rng=rng
    )
    return [
        metric_report("filtered_rmse", filtered, args.particles, args.seed, checkpoint.config),
        metric_report("blind_rmse", blind, args.particles, args.seed, checkpoint.config),
    ]


def cmd_eval(args):
    checkpoint = load(args.ckpt)
    rng = Rng(args.seed).stream("eval")
    if args.metric == "perplexity":
        reports = _eval_perplexity(args, checkpoint, rng)
    elif args.metric == "tracking":
        reports = _eval_tracking(args, checkpoint, rng)
    else:
        model = checkpoint.model
        if model.kind != "topical":
            raise DataError("nnz needs a topical checkpoint")
        reports = [
            metric_report("nnz", nnz(model.topics.counts), None, args.seed, checkpoint.config)
        ]
    _emit(args, "".join(json.dumps(r, sort_keys=True) + "\n" for r in reports))
    return 0


def cmd_predict(args):
    if not args.out:
        raise CliUsageError("predict needs --out")
    checkpoint = load(args.ckpt)
    model = checkpoint.model
    if model.kind != "gaussian":
        raise DataError("predict needs a continuous-emission checkpoint")
    _, noisy = read_trajectory_csv(args.data)
    fraction = checkpoint.config.get("split_fraction", 0.6)
    if not 0.0 < fraction < 1.0:
        raise DataError("checkpoint stores no train/test split")
    train_len = int(np.floor(fraction * len(noisy)))
    if not 0 < train_len < len(noisy):
        raise DataError("data too short for the stored split")
    rng = Rng(args.seed).stream("eval")
    filtered = filtered_observation_path(model, noisy, train_len, args.particles, rng)
    horizon = len(noisy) - train_len if args.horizon < 0 else args.horizon
    blind = blind_observation_path(model, noisy[:train_len], horizon, args.particles, rng)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "kind", "pred_x", "pred_y"])
        for i, row in enumerate(filtered):
            writer.writerow([train_len + i, "filtered", repr(float(row[0])), repr(float(row[1]))])
        for i, row in enumerate(blind):
            writer.writerow([train_len + i, "blind", repr(float(row[0])), repr(float(row[1]))])
    return 0


def cmd_paths(args):
    checkpoint = load(args.ckpt)
    model = checkpoint.model
    if model.kind != "topical":
        raise DataError("paths needs a topical checkpoint")
    corpus = read_corpus_jsonl(args.data, vocab_size=model.vocab_size)
    if not 0 <= args.doc < corpus.num_documents:
        raise DataError(f"doc index {args.doc} outside corpus of {corpus.num_documents}")
    doc = corpus.documents[args.doc]
    rng = Rng(args.seed).stream("eval")
    warmup = smc_pass(model, doc, args.particles, rng)
    reference = sample_final_path(warmup.system, rng)
    result = conditional_smc(model, doc, ReferencePath(reference), args.particles, rng)
    dump = {
        "t": list(range(len(doc))),
        "particles": result.system.particles.astype(int).tolist(),
        "weights": result.system.norm_weights[:, -1].tolist(),
    }
    _emit(args, json.dumps(dump, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
