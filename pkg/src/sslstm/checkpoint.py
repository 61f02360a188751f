"""Binary model checkpoints with bit-exact round trips.

Layout: 4 magic bytes, a little-endian uint32 header length, a UTF-8 JSON
header (schema version, head kind, tensor manifest, trainer state, config
snapshot), then the raw tensor payloads in manifest order.  Every payload
is little-endian float64; tensors with an integer logical dtype (topic
counts) are cast back on load, which is exact at any realistic count.
"""

import json
from dataclasses import dataclass

import numpy as np

from sslstm.lstm import LstmParams
from sslstm.models import (
    GaussianEmission,
    GaussianSSL,
    GaussianTransitionHead,
    TopicMatrix,
    TopicalSSL,
    TopicalTransitionHead,
)

MAGIC = b"SSLM"
SCHEMA_VERSION = 1


class CheckpointError(Exception):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    model: object  # GaussianSSL or TopicalSSL
    config: dict
    epoch: int
    seed: int
    schema_version: int = SCHEMA_VERSION


def _model_tensors(model):
    out = {f"lstm.{k}": v for k, v in model.lstm_params.tensors().items()}
    out.update({f"head.{k}": v for k, v in model.head.tensors().items()})
    if model.kind == "gaussian":
        out["emission.c"] = model.emission.c
        out["emission.b"] = model.emission.b
        out["emission.r"] = model.emission.r
    else:
        out["topics.counts"] = model.topics.counts
        out["topics.phi"] = model.topics.phi
    return out


def save(checkpoint, path):
    """Write the checkpoint; identical checkpoints produce identical bytes."""
    model = checkpoint.model
    tensors = _model_tensors(model)
    manifest = [
        {
            "name": name,
            "shape": list(arr.shape),
            "dtype": "int64" if np.issubdtype(arr.dtype, np.integer) else "float64",
        }
        for name, arr in tensors.items()
    ]
    header = {
        "schema_version": checkpoint.schema_version,
        "head": model.kind,
        "epoch": checkpoint.epoch,
        "seed": checkpoint.seed,
        "forget_bias": model.lstm_params.forget_bias,
        "config": checkpoint.config,
        "tensors": manifest,
    }
    if model.kind == "topical":
        header["dirichlet_beta"] = model.topics.beta
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(blob)).astype("<u4").tobytes())
        fh.write(blob)
        for name, arr in tensors.items():
            fh.write(np.asarray(arr, dtype="<f8").tobytes(order="C"))


def load(path):
    """Read a checkpoint back; every tensor matches what was saved bit-exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    header_len = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    if header["schema_version"] != SCHEMA_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint schema {header['schema_version']} "
            f"(expected {SCHEMA_VERSION})"
        )
    offset = 8 + header_len
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).copy()
        offset += 8 * count
        arr = data.reshape(entry["shape"])
        if entry["dtype"] == "int64":
            arr = arr.astype(np.int64)
        tensors[entry["name"]] = arr
    model = _rebuild_model(header, tensors)
    return Checkpoint(
        model=model,
        config=header["config"],
        epoch=header["epoch"],
        seed=header["seed"],
        schema_version=header["schema_version"],
    )


def _rebuild_model(header, tensors):
    lstm = {k[5:]: v for k, v in tensors.items() if k.startswith("lstm.")}
    params = LstmParams(**lstm, forget_bias=header["forget_bias"])
    if header["head"] == "gaussian":
        head = GaussianTransitionHead(
            weights=tensors["head.weights"],
            bias=tensors["head.bias"],
            log_var=tensors["head.log_var"],
            start=tensors["head.start"],
        )
        emission = GaussianEmission(
            tensors["emission.c"], tensors["emission.b"], tensors["emission.r"]
        )
        return GaussianSSL(params, head, emission)
    head = TopicalTransitionHead(
        weights=tensors["head.weights"], bias=tensors["head.bias"]
    )
    topics = TopicMatrix(
        tensors["topics.counts"], header["dirichlet_beta"], phi=tensors["topics.phi"]
    )
    return TopicalSSL(params, head, topics)
