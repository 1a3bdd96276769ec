import os
from typing import Any, Dict

from .errors import ConfigError

DEFAULT_OUT_DIR = os.path.join(os.getcwd(), "runs")

# Training defaults (200 epochs, constant lr 1e-4, Adam, batch 64)
DEFAULT_EPOCHS = 200
DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_BATCH_SIZE = 64
DEFAULT_SEED = 0

# Architecture defaults
IMAGE_SIZE = 32
DEFAULT_LATENT_DIM = 64
DEFAULT_CHANNELS = (32, 64)
DEFAULT_KERNEL = 4
LEAKY_SLOPE = 0.01

# Prior scales; every simple sigma must stay below the basic sigma. A simple
# posterior that matches its prior pays log(basic/simple) - 1/2 nats per latent
# dimension when scored against the basic prior.
DEFAULT_BASIC_SIGMA = 1.0
DEFAULT_SIMPLE_SIGMA = 0.05

# Numerics
STABILITY_EPS = 1e-7
LOG_VAR_BOUND = 10.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Reconstruction metrics
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

SCORE_BATCH_SIZE = 256
DEFAULT_BINS = 50

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def ensure_dirs(*paths: str) -> None:
    for path in paths:
        os.makedirs(path, exist_ok=True)


def read_flat_config(path: str) -> Dict[str, str]:
    """Read a flat ``key = value`` file with dotted keys and ``#`` comments."""
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")

    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = value
    return values


def unflatten(values: Dict[str, Any]) -> Dict[str, Any]:
    """Turn ``{"priors.basic_sigma": "1.0"}`` into ``{"priors": {"basic_sigma": "1.0"}}``."""
    nested: Dict[str, Any] = {}
    for key, value in values.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Key {key!r} conflicts with scalar key {part!r}")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"Key {key!r} conflicts with section of the same name")
        node[parts[-1]] = value
    return nested
