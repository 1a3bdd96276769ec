import asyncio
import json
from typing import Any, Dict, List, Optional

from mcp.server.fastmcp import FastMCP

from bpvae import cli
from bpvae.config import DEFAULT_BINS, DEFAULT_OUT_DIR, DEFAULT_SEED
from bpvae.logging_config import logger, setup_logging
from bpvae.models import Architecture, PriorsConfig, RunConfig, TrainConfig

# Create MCP server
mcp = FastMCP("BPVAE OOD Detection Server")


def _run_config(values: Dict[str, Any]) -> RunConfig:
    return RunConfig.from_flat({k: v for k, v in values.items() if v is not None})


# MCP Tools using FastMCP decorators


@mcp.tool()
async def train(
    basic: str,
    simples: Optional[List[str]] = None,
    mode: str = "bpvae",
    epochs: Optional[int] = None,
    batch_size: Optional[int] = None,
    learning_rate: Optional[float] = None,
    seed: Optional[int] = None,
    basic_sigma: Optional[float] = None,
    simple_sigmas: Optional[List[float]] = None,
    simple_branch_prior: Optional[str] = None,
    latent_dim: Optional[int] = None,
    output_dir: str = DEFAULT_OUT_DIR,
    limit: Optional[int] = None,
) -> str:
    """Train a VAE or BPVAE and write a checkpoint plus loss curve"""
    logger.info(f"Training {mode} on basic dataset: {basic}")
    config = _run_config(
        {
            "mode": mode,
            "basic": basic,
            "simples": simples or [],
            "train.epochs": epochs,
            "train.batch_size": batch_size,
            "train.learning_rate": learning_rate,
            "train.seed": seed,
            "priors.basic_sigma": basic_sigma,
            "priors.simple_sigmas": simple_sigmas,
            "priors.simple_branch_prior": simple_branch_prior,
            "model.latent_dim": latent_dim,
            "output_dir": output_dir,
            "limit": limit,
        }
    )
    report = await asyncio.to_thread(cli.cmd_train, config)
    return report.model_dump_json(indent=2)


@mcp.tool()
async def detect(
    checkpoint: str,
    id_dataset: str,
    ood_dataset: str,
    output_dir: str = DEFAULT_OUT_DIR,
    bins: int = DEFAULT_BINS,
    seed: int = DEFAULT_SEED,
    limit: Optional[int] = None,
) -> str:
    """AUROC/AUPRC and likelihood histograms for an in-distribution vs an OOD dataset"""
    logger.info(f"Detecting {ood_dataset} against {id_dataset} with {checkpoint}")
    report = await asyncio.to_thread(
        cli.cmd_detect, checkpoint, id_dataset, ood_dataset, output_dir, bins, seed, limit
    )
    return report.model_dump_json(indent=2)


@mcp.tool()
async def reconstruct(
    checkpoint: str, dataset: str, count: int = 16, output_dir: str = DEFAULT_OUT_DIR, limit: Optional[int] = None
) -> str:
    """Reconstruction MSE/PSNR/SSIM with PGM dumps of originals and reconstructions"""
    logger.info(f"Reconstructing {count} images from {dataset}")
    report = await asyncio.to_thread(cli.cmd_reconstruct, checkpoint, dataset, output_dir, count, limit)
    return report.model_dump_json(indent=2)


@mcp.tool()
async def select_simple(
    basic: str,
    candidates: List[str],
    epochs: Optional[int] = None,
    batch_size: Optional[int] = None,
    seed: Optional[int] = None,
    statistic: str = "mean",
    output_dir: str = DEFAULT_OUT_DIR,
    limit: Optional[int] = None,
) -> str:
    """Train a plain VAE per dataset and mark candidates whose self-likelihood beats the basic dataset"""
    logger.info(f"Selecting simple datasets for {basic} among {len(candidates)} candidates")
    config = _run_config(
        {
            "mode": "vae",
            "basic": basic,
            "train.epochs": epochs,
            "train.batch_size": batch_size,
            "train.seed": seed,
            "output_dir": output_dir,
            "limit": limit,
        }
    )
    report = await asyncio.to_thread(cli.cmd_select_simple, config, candidates, statistic)
    return report.model_dump_json(indent=2)


@mcp.tool()
async def report(
    checkpoint: str,
    datasets: List[str],
    train_dataset: Optional[str] = None,
    output_dir: str = DEFAULT_OUT_DIR,
    bins: int = DEFAULT_BINS,
    seed: int = DEFAULT_SEED,
    limit: Optional[int] = None,
) -> str:
    """Per-dataset likelihood summaries, joint histogram and train/test likelihood ratios"""
    logger.info(f"Reporting likelihoods for {len(datasets)} datasets")
    result = await asyncio.to_thread(
        cli.cmd_report, checkpoint, datasets, output_dir, train_dataset, bins, seed, limit
    )
    return result.model_dump_json(indent=2)


@mcp.tool()
async def sample(
    checkpoint: str, count: int = 16, prior_index: int = 0, seed: int = DEFAULT_SEED, output_dir: str = DEFAULT_OUT_DIR
) -> str:
    """Decode samples drawn from the basic prior (0) or a simple prior (k)"""
    logger.info(f"Sampling {count} images from prior {prior_index}")
    result = await asyncio.to_thread(cli.cmd_sample, checkpoint, output_dir, count, prior_index, seed)
    return result.model_dump_json(indent=2)


# MCP Resource
@mcp.resource("bpvae://defaults")
async def get_defaults() -> str:
    """Default run configuration"""
    defaults = {
        "mode": "bpvae",
        "priors": PriorsConfig().model_dump(),
        "train": TrainConfig().model_dump(),
        "model": Architecture().model_dump(mode="json"),
        "output_dir": DEFAULT_OUT_DIR,
    }
    return json.dumps(defaults, indent=2)


if __name__ == "__main__":
    setup_logging(level="INFO")
    logger.info("Starting BPVAE MCP server")

    try:
        # FastMCP handles its own event loop
        mcp.run()
    except KeyboardInterrupt:
        logger.info("Server stopped by user")
