"""VAE and BPVAE: Gaussian encoder, Bernoulli decoder, bigeminal priors.

The log marginal likelihood splits into the ELBO plus KL(q(z|x) || p(z|x)).
That last term needs the true posterior, which is intractable; it is never
computed, and the single-sample ELBO is used wherever a likelihood is needed.

A BPVAE shares one encoder and one decoder between a basic dataset, scored
against a wide zero-mean Gaussian (the b-prior), and K >= 1 simple datasets,
each scored against a narrower one (an s-prior).
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from .config import LOG_VAR_BOUND, STABILITY_EPS
from .data import CyclicSampler, ImageDataset, batch_iter
from .errors import DivergenceError, ShapeError
from .logging_config import logger
from .models import Architecture, PriorSpec, TrainConfig
from .optim import AdamState, adam_step
from .tensor import (
    Tape,
    Tensor,
    backward,
    clamp,
    concat,
    conv2d,
    conv_transpose2d,
    exp,
    leaky_relu,
    log,
    matmul,
    mean,
    reshape,
    sigmoid,
    sum_,
    zero_grads,
)

BranchPrior = Literal["simple", "basic"]
Batch = Union[np.ndarray, Tensor]


@dataclass
class GaussianPosterior:
    mu: Tensor
    log_var: Tensor


def parameter_shapes(arch: Architecture) -> Dict[str, Tuple[int, ...]]:
    """Ordered parameter names and shapes for an architecture."""
    c1, c2 = arch.channels
    k, latent = arch.kernel, arch.latent_dim
    q = arch.image_size // 4
    flat = c2 * q * q
    return {
        "encoder.conv1.weight": (c1, 1, k, k),
        "encoder.conv1.bias": (1, c1, 1, 1),
        "encoder.conv2.weight": (c2, c1, k, k),
        "encoder.conv2.bias": (1, c2, 1, 1),
        "encoder.dense.weight": (flat, 2 * latent),
        "encoder.dense.bias": (1, 2 * latent),
        "decoder.dense.weight": (latent, flat),
        "decoder.dense.bias": (1, flat),
        "decoder.deconv1.weight": (c2, c1, k, k),
        "decoder.deconv1.bias": (1, c1, 1, 1),
        "decoder.deconv2.weight": (c1, 1, k, k),
        "decoder.deconv2.bias": (1, 1, 1, 1),
    }


def _init_bound(shape: Tuple[int, ...]) -> float:
    if len(shape) == 4:
        fans = (shape[0] + shape[1]) * shape[2] * shape[3]
    else:
        fans = shape[0] + shape[1]
    return math.sqrt(6.0 / fans)


def check_prior_ordering(basic_prior: PriorSpec, simple_priors: Sequence[PriorSpec]) -> None:
    if basic_prior.role != "basic":
        raise ValueError(f"basic prior has role {basic_prior.role!r}")
    if not simple_priors:
        raise ValueError("a BPVAE needs at least one simple prior")
    for k, prior in enumerate(simple_priors):
        if prior.role != "simple":
            raise ValueError(f"simple prior {k} has role {prior.role!r}")
        if not prior.sigma < basic_prior.sigma:
            raise ValueError(
                f"simple prior {k} sigma {prior.sigma} must be smaller than basic sigma {basic_prior.sigma}"
            )


class VaeModel:
    """Encoder/decoder parameters with a single (basic) prior."""

    simple_branch_prior: BranchPrior = "simple"

    def __init__(self, architecture: Architecture, params: Dict[str, Tensor], prior: PriorSpec):
        expected = parameter_shapes(architecture)
        if list(params) != list(expected):
            raise ValueError(f"parameter names {list(params)} do not match architecture {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {params[name].shape}")
        self.architecture = architecture
        self.params = params
        self.prior = prior

    @property
    def basic_prior(self) -> PriorSpec:
        return self.prior

    @property
    def simple_priors(self) -> Tuple[PriorSpec, ...]:
        return ()

    @property
    def mode(self) -> str:
        return "bpvae" if self.simple_priors else "vae"

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def priors(self) -> List[PriorSpec]:
        return [self.basic_prior, *self.simple_priors]

    def branch_priors(self) -> List[PriorSpec]:
        """Prior used for each branch of the joint loss (basic first)."""
        if self.simple_branch_prior == "basic":
            return [self.basic_prior] * (1 + len(self.simple_priors))
        return self.priors()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(p.data))) for p in self.params.values())


class BpvaeModel(VaeModel):
    def __init__(
        self,
        architecture: Architecture,
        params: Dict[str, Tensor],
        basic_prior: PriorSpec,
        simple_priors: Sequence[PriorSpec],
        simple_branch_prior: BranchPrior = "simple",
    ):
        check_prior_ordering(basic_prior, simple_priors)
        super().__init__(architecture, params, basic_prior)
        self._simple_priors = tuple(simple_priors)
        self.simple_branch_prior = simple_branch_prior

    @property
    def simple_priors(self) -> Tuple[PriorSpec, ...]:
        return self._simple_priors


def init_parameters(arch: Architecture, seed: int, dtype: type = np.float32) -> Dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, shape in parameter_shapes(arch).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            bound = _init_bound(shape)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return params


def init_model(
    architecture: Architecture,
    basic_prior: PriorSpec,
    simple_priors: Sequence[PriorSpec] = (),
    seed: int = 0,
    dtype: type = np.float32,
    simple_branch_prior: BranchPrior = "simple",
) -> VaeModel:
    """Fresh plain VAE (no simple priors) or BPVAE."""
    params = init_parameters(architecture, seed, dtype)
    if simple_priors:
        return BpvaeModel(architecture, params, basic_prior, simple_priors, simple_branch_prior)
    return VaeModel(architecture, params, basic_prior)


# Forward pass


def _input_tensor(model: VaeModel, batch: Batch, op: str) -> Tensor:
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    size = model.architecture.image_size
    if x.ndim != 4 or x.shape[1:] != (size, size, 1):
        raise ShapeError(f"{op}: expected batch of shape (N, {size}, {size}, 1), got {x.shape}")
    # NHWC with a single channel has the same memory layout as NCHW
    return Tensor(x.reshape(x.shape[0], 1, size, size), dtype=model.dtype)


def encode(model: VaeModel, batch: Batch) -> GaussianPosterior:
    p, arch = model.params, model.architecture
    x = _input_tensor(model, batch, "encode")
    h = leaky_relu(conv2d(x, p["encoder.conv1.weight"], 2, "same") + p["encoder.conv1.bias"], arch.slope)
    h = leaky_relu(conv2d(h, p["encoder.conv2.weight"], 2, "same") + p["encoder.conv2.bias"], arch.slope)
    h = reshape(h, (x.shape[0], -1))
    out = matmul(h, p["encoder.dense.weight"]) + p["encoder.dense.bias"]
    latent = arch.latent_dim
    return GaussianPosterior(
        mu=out[:, :latent],
        log_var=clamp(out[:, latent:], -LOG_VAR_BOUND, LOG_VAR_BOUND),
    )


def decode(model: VaeModel, codes: Batch) -> Tensor:
    """Latent codes (N, latent_dim) -> Bernoulli probabilities (N, 1, S, S)."""
    p, arch = model.params, model.architecture
    z = codes if isinstance(codes, Tensor) else Tensor(codes, dtype=model.dtype)
    if z.ndim != 2 or z.shape[1] != arch.latent_dim:
        raise ShapeError(f"decode: expected codes of shape (N, {arch.latent_dim}), got {z.shape}")
    c2, q, size = arch.channels[1], arch.image_size // 4, arch.image_size
    h = leaky_relu(matmul(z, p["decoder.dense.weight"]) + p["decoder.dense.bias"], arch.slope)
    h = reshape(h, (z.shape[0], c2, q, q))
    h = conv_transpose2d(h, p["decoder.deconv1.weight"], 2, "same", (2 * q, 2 * q))
    h = leaky_relu(h + p["decoder.deconv1.bias"], arch.slope)
    logits = conv_transpose2d(h, p["decoder.deconv2.weight"], 2, "same", (size, size))
    return sigmoid(logits + p["decoder.deconv2.bias"])


def reparameterize(posterior: GaussianPosterior, noise: np.ndarray) -> Tensor:
    """z = mu + exp(log_var / 2) * noise."""
    noise = np.asarray(noise)
    if noise.shape != posterior.mu.shape:
        raise ShapeError(f"reparameterize: noise shape {noise.shape} != posterior shape {posterior.mu.shape}")
    eps = Tensor(noise, dtype=posterior.mu.dtype)
    return posterior.mu + exp(posterior.log_var * 0.5) * eps


def kl_to_prior(posterior: GaussianPosterior, prior: PriorSpec) -> Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, s^2)) summed over latent dimensions, per sample."""
    s = prior.sigma
    mu, log_var = posterior.mu, posterior.log_var
    per_dim = (math.log(s) - 0.5) - log_var * 0.5 + (exp(log_var) + mu * mu) * (1.0 / (2.0 * s * s))
    return sum_(per_dim, axis=1)


def reconstruction_loglik(batch: Batch, decoded: Tensor) -> Tensor:
    """Bernoulli log-likelihood of pixel intensities, summed per sample."""
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    n = x.shape[0]
    if decoded.shape[0] != n or decoded.size != x.size:
        raise ShapeError(f"reconstruction_loglik: batch shape {x.shape} does not match decoded shape {decoded.shape}")
    x = x.reshape(n, -1).astype(decoded.dtype, copy=False)
    probs = clamp(reshape(decoded, (n, -1)), STABILITY_EPS, 1.0 - STABILITY_EPS)
    per_pixel = Tensor(x, dtype=decoded.dtype) * log(probs) + Tensor(1.0 - x, dtype=decoded.dtype) * log(1.0 - probs)
    return sum_(per_pixel, axis=1)


def elbo(model: VaeModel, batch: Batch, noise: np.ndarray, prior: Optional[PriorSpec] = None) -> Tensor:
    """Single-sample ELBO per sample, under ``prior`` (default: the basic prior)."""
    posterior = encode(model, batch)
    decoded = decode(model, reparameterize(posterior, noise))
    return reconstruction_loglik(batch, decoded) - kl_to_prior(posterior, prior or model.basic_prior)


def bpvae_loss(model: VaeModel, basic_batch: Batch, simple_batches: Sequence[Batch], noise: Sequence[np.ndarray]) -> Tensor:
    """Negative joint ELBO: -(mean ELBO_basic + sum_k mean ELBO_simple_k).

    All branches go through one shared forward pass; each branch's KL uses its
    own prior. With no simple batches this is the plain VAE negative ELBO.
    """
    k = len(model.simple_priors)
    if len(simple_batches) != k:
        raise ValueError(f"bpvae_loss: {len(simple_batches)} simple batches for {k} simple priors")
    if len(noise) != k + 1:
        raise ValueError(f"bpvae_loss: {len(noise)} noise arrays for {k + 1} branches")
    batches = [b.data if isinstance(b, Tensor) else np.asarray(b) for b in (basic_batch, *simple_batches)]
    n = batches[0].shape[0]
    if any(b.shape[0] != n for b in batches):
        raise ShapeError(f"bpvae_loss: unequal batch sizes {[b.shape[0] for b in batches]}")

    x_all = batches[0] if k == 0 else np.concatenate(batches)
    eps_all = np.asarray(noise[0]) if k == 0 else np.concatenate([np.asarray(e) for e in noise])
    posterior = encode(model, x_all)
    recon = reconstruction_loglik(x_all, decode(model, reparameterize(posterior, eps_all)))

    total: Optional[Tensor] = None
    for branch, prior in enumerate(model.branch_priors()):
        rows = slice(branch * n, (branch + 1) * n)
        branch_posterior = GaussianPosterior(posterior.mu[rows], posterior.log_var[rows])
        term = mean(recon[rows] - kl_to_prior(branch_posterior, prior))
        total = term if total is None else total + term
    assert total is not None
    return total * -1.0


def reconstruct(model: VaeModel, batch: Batch, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Decoder probabilities as pixel values, shaped like the input batch.

    Without noise the posterior mean is decoded.
    """
    posterior = encode(model, batch)
    codes = posterior.mu if noise is None else reparameterize(posterior, noise)
    decoded = decode(model, codes)
    size = model.architecture.image_size
    return np.array(decoded.data).reshape(decoded.shape[0], size, size, 1)


def generate(model: VaeModel, count: int, seed: int = 0, prior_index: int = 0) -> np.ndarray:
    """Decode ``count`` draws from the basic prior (index 0) or simple prior ``prior_index``."""
    priors = model.priors()
    if not 0 <= prior_index < len(priors):
        raise ValueError(f"prior_index {prior_index} out of range for {len(priors)} priors")
    rng = np.random.default_rng(seed)
    codes = priors[prior_index].sigma * rng.standard_normal((count, model.architecture.latent_dim))
    decoded = decode(model, codes.astype(model.dtype))
    size = model.architecture.image_size
    return np.array(decoded.data).reshape(count, size, size, 1)


# Training


@dataclass
class TrainResult:
    model: VaeModel
    epoch_losses: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.epoch_losses[-1] if self.epoch_losses else None


def train(model: VaeModel, basic: ImageDataset, simples: Sequence[ImageDataset], config: TrainConfig) -> TrainResult:
    """Adam on the joint loss, in place.

    Each step draws one shuffled basic batch and an equally sized batch from
    every simple dataset; simple datasets cycle independently of the basic
    epoch. Raises DivergenceError on a non-finite loss.
    """
    if len(simples) != len(model.simple_priors):
        raise ValueError(f"train: {len(simples)} simple datasets for {len(model.simple_priors)} simple priors")

    result = TrainResult(model=model)
    if config.epochs == 0:
        return result

    latent, dtype = model.architecture.latent_dim, model.dtype
    batch_size = min(config.batch_size, len(basic))
    noise_rng = np.random.default_rng([config.seed, 0])
    samplers = [
        CyclicSampler(len(ds), np.random.default_rng([config.seed, k + 1])) for k, ds in enumerate(simples)
    ]
    state = AdamState(learning_rate=config.learning_rate)
    params = model.params

    logger.info(
        "Training started",
        extra={"mode": model.mode, "epochs": config.epochs, "batch_size": batch_size, "basic": basic.name},
    )
    for epoch in range(config.epochs):
        total, seen = 0.0, 0
        for basic_batch in batch_iter(basic, batch_size, seed=config.seed, shuffle=True, epoch=epoch):
            n = len(basic_batch)
            simple_batches = [ds.images[s.take(n)] for ds, s in zip(simples, samplers)]
            noise = [noise_rng.standard_normal((n, latent)).astype(dtype) for _ in range(len(simples) + 1)]

            zero_grads(params)
            with Tape():
                loss = bpvae_loss(model, basic_batch, simple_batches, noise)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, value)
            backward(loss)
            adam_step(params, state)

            total += value * n
            seen += n

        epoch_loss = total / seen
        result.epoch_losses.append(epoch_loss)
        logger.info("Epoch complete", extra={"epoch": epoch, "loss": epoch_loss})

    zero_grads(params)
    return result
