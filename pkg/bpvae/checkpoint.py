"""Checkpoint persistence.

Layout::

    BPVAE1
    format_version: 1
    mode: "bpvae"
    architecture: {...}
    ...
    param encoder.conv1.weight: [32, 1, 4, 4]
    ...
    payload_floats: 123456
    <blank line>
    <little-endian float32 payload, parameters in header order>

Header values are JSON. The header is diff-able and fully describes the
architecture, so a checkpoint stays readable if defaults change.
"""

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .errors import CheckpointError
from .logging_config import logger
from .models import Architecture, PriorSpec, TrainConfig, validation_message
from .reports import atomic_write_bytes
from .tensor import Tensor
from .vae import BpvaeModel, VaeModel, parameter_shapes

MAGIC = "BPVAE1"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    model: VaeModel
    train_config: Optional[TrainConfig] = None
    final_loss: Optional[float] = None


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1048576), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(", ", ": "))


def encode_checkpoint(model: VaeModel, train_config: Optional[TrainConfig] = None, final_loss: Optional[float] = None) -> bytes:
    lines = [
        MAGIC,
        f"format_version: {FORMAT_VERSION}",
        f"mode: {_dump(model.mode)}",
        f"architecture: {_dump(model.architecture.model_dump(mode='json'))}",
        f"basic_sigma: {_dump(model.basic_prior.sigma)}",
        f"simple_sigmas: {_dump([p.sigma for p in model.simple_priors])}",
        f"simple_branch_prior: {_dump(model.simple_branch_prior)}",
        f"train_config: {_dump(train_config.model_dump() if train_config else None)}",
        f"final_loss: {_dump(final_loss)}",
    ]
    total = 0
    for name, tensor in model.params.items():
        lines.append(f"param {name}: {_dump(list(tensor.shape))}")
        total += tensor.size
    lines.append(f"payload_floats: {total}")

    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype=PAYLOAD_DTYPE).tobytes() for t in model.params.values())
    return header + payload


def save_checkpoint(path: str, model: VaeModel, train_config: Optional[TrainConfig] = None, final_loss: Optional[float] = None) -> str:
    """Write the checkpoint atomically and return its SHA-256."""
    atomic_write_bytes(path, encode_checkpoint(model, train_config, final_loss))
    sha = _sha256(path)
    logger.info(f"Saved checkpoint: {path} ({os.path.getsize(path)} bytes, SHA256: {sha[:16]}...)")
    return sha


def _parse_header(blob: bytes) -> Tuple[Dict[str, Any], List[Tuple[str, Tuple[int, ...]]], int]:
    if not blob.startswith(MAGIC.encode("ascii") + b"\n"):
        raise CheckpointError(f"not a checkpoint: missing {MAGIC} magic")
    end = blob.find(b"\n\n")
    if end < 0:
        raise CheckpointError("checkpoint header is not terminated by a blank line")
    try:
        text = blob[:end].decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("checkpoint header is not valid UTF-8") from None

    fields: Dict[str, Any] = {}
    params: List[Tuple[str, Tuple[int, ...]]] = []
    for line in text.split("\n")[1:]:
        key, sep, raw = line.partition(": ")
        if not sep:
            raise CheckpointError(f"malformed header line {line!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            raise CheckpointError(f"malformed header value for {key!r}") from None
        if key.startswith("param "):
            params.append((key[len("param ") :], tuple(int(d) for d in value)))
        else:
            fields[key] = value
    return fields, params, end + 2


def decode_checkpoint(blob: bytes) -> Checkpoint:
    fields, declared, offset = _parse_header(blob)
    if fields.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {fields.get('format_version')!r}")

    try:
        architecture = Architecture.model_validate(fields["architecture"])
        basic_prior = PriorSpec(sigma=fields["basic_sigma"], role="basic")
        simple_priors = [PriorSpec(sigma=s, role="simple") for s in fields.get("simple_sigmas", [])]
        raw_config = fields.get("train_config")
        train_config = TrainConfig.model_validate(raw_config) if raw_config else None
    except KeyError as e:
        raise CheckpointError(f"checkpoint header is missing {e.args[0]!r}") from None
    except ValidationError as e:
        raise CheckpointError(f"invalid checkpoint header: {validation_message(e)}") from None

    expected = parameter_shapes(architecture)
    if [name for name, _ in declared] != list(expected):
        raise CheckpointError("declared parameters do not match the recorded architecture")
    for name, shape in declared:
        if shape != expected[name]:
            raise CheckpointError(f"parameter {name}: declared shape {shape} does not match architecture {expected[name]}")

    declared_total = sum(int(np.prod(shape)) for _, shape in declared)
    if fields.get("payload_floats") != declared_total:
        raise CheckpointError(
            f"payload_floats {fields.get('payload_floats')} != sum of parameter sizes {declared_total}"
        )
    payload = blob[offset:]
    if len(payload) != declared_total * PAYLOAD_DTYPE.itemsize:
        raise CheckpointError(
            f"payload holds {len(payload)} bytes, expected {declared_total} floats "
            f"({declared_total * PAYLOAD_DTYPE.itemsize} bytes)"
        )

    flat = np.frombuffer(payload, dtype=PAYLOAD_DTYPE)
    params: Dict[str, Tensor] = {}
    cursor = 0
    for name, shape in declared:
        count = int(np.prod(shape))
        params[name] = Tensor(flat[cursor : cursor + count].reshape(shape), requires_grad=True)
        cursor += count

    try:
        if simple_priors:
            model: VaeModel = BpvaeModel(
                architecture, params, basic_prior, simple_priors, fields.get("simple_branch_prior", "simple")
            )
        else:
            model = VaeModel(architecture, params, basic_prior)
    except ValueError as e:
        raise CheckpointError(f"invalid checkpoint: {e}") from None
    return Checkpoint(model=model, train_config=train_config, final_loss=fields.get("final_loss"))


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    checkpoint = decode_checkpoint(blob)
    logger.debug(f"Loaded checkpoint {path}: {checkpoint.model.parameter_count()} parameters")
    return checkpoint
