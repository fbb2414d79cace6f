"""Alternating adversarial training on self-supervised pseudo pairs.

Per batch: one discriminator step on the hinge loss, then one generator step
on lambda_recovery * L1(target, composited output) + lambda_gan * (-mean fake
score).  Optimizer state is strictly partitioned; checkpoints are written
atomically once per epoch plus at the end.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .body_model import BodyModel
from .errors import InvalidInputError, TrainingDivergedError
from .generator import (
    Generator,
    PatchDiscriminator,
    composite,
    field_to_grids,
    img_to_tensor,
    save_checkpoint,
    variant_config,
)
from .selfsup import TripletConfig, TripletFactory

VARIANTS = ("full", "G-", "M+", "C-")


@dataclass(frozen=True)
class TrainConfig:
    lambda_recovery: float = 100.0
    lambda_gan: float = 10.0
    lr_generator: float = 1e-4
    lr_discriminator: float = 4e-4
    epochs: int = 100
    batch_size: int = 8  # 8 at 256 res, 2 at 512 res
    seed: int = 0
    variant: str = "full"
    resolution: int = 256
    max_steps: int | None = None  # cap for desk-scale runs
    resample_per_epoch: bool = True
    adam_betas: tuple[float, float] = (0.5, 0.999)
    keep_epoch_checkpoints: bool = False  # False: one rolling per-epoch file

    def __post_init__(self):
        if min(self.lambda_recovery, self.lambda_gan) < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if min(self.lr_generator, self.lr_discriminator) <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise InvalidInputError("rates, batch size, and epochs must be positive")
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


def recovery_loss(target, output):
    """Mean absolute error over all pixels and channels."""
    if isinstance(target, torch.Tensor):
        if target.shape != output.shape:
            raise InvalidInputError("recovery loss inputs must share a shape")
        return (target - output).abs().mean()
    t = np.asarray(target, dtype=np.float64)
    o = np.asarray(output, dtype=np.float64)
    if t.shape != o.shape:
        raise InvalidInputError("recovery loss inputs must share a shape")
    return float(np.abs(t - o).mean())


def hinge_losses(real_scores, fake_scores):
    """(L_G, L_D) hinge GAN losses from patch score maps."""
    if isinstance(real_scores, torch.Tensor):
        l_d = torch.relu(1.0 - real_scores).mean() + torch.relu(1.0 + fake_scores).mean()
        l_g = -fake_scores.mean()
        return l_g, l_d
    real = np.asarray(real_scores, dtype=np.float64)
    fake = np.asarray(fake_scores, dtype=np.float64)
    l_d = np.maximum(1.0 - real, 0.0).mean() + np.maximum(1.0 + fake, 0.0).mean()
    return float(-fake.mean()), float(l_d)


class TripletBatcher:
    """Assembles batched generator inputs from triplets (training direction)."""

    def __init__(self, generator: Generator, resolution: int):
        self.resolutions = generator.level_resolutions(resolution, resolution)

    def collate(self, triplets) -> dict[str, torch.Tensor | list[torch.Tensor]]:
        i_f = torch.cat([img_to_tensor(t.i_f_t) for t in triplets])
        i_b = torch.cat([img_to_tensor(t.i_b) for t in triplets])
        a = torch.cat([img_to_tensor(t.a.a.astype(np.float32)) for t in triplets])
        target = torch.cat([img_to_tensor(t.target) for t in triplets])
        fg_mask = torch.cat([img_to_tensor(t.deformed_mask.astype(np.float32)) for t in triplets])
        grids = []
        for lvl in range(4):
            per = [field_to_grids(t.t_t, [self.resolutions[lvl]])[0] for t in triplets]
            grids.append(torch.cat(per))
        return {"i_f": i_f, "i_b": i_b, "a": a, "grids": grids, "target": target, "fg_mask": fg_mask}


def train(
    records: list,
    config: TrainConfig,
    out_dir: str | Path,
    model: BodyModel,
    triplet_config: TripletConfig = TripletConfig(),
    log_every: int = 1,
) -> Path:
    """Train one variant; returns the final checkpoint path.

    ``records`` are fitted image records (see ingest); triplets are sampled
    fresh each epoch unless ``resample_per_epoch`` is off.
    """
    if not records:
        raise InvalidInputError("empty manifest: nothing to train on")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)

    gen_config = variant_config(config.variant, input_resolution=config.resolution)
    generator = Generator(gen_config)
    discriminator = PatchDiscriminator()
    opt_g = torch.optim.Adam(generator.parameters(), lr=config.lr_generator, betas=config.adam_betas)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.lr_discriminator, betas=config.adam_betas)

    factory = TripletFactory(model, triplet_config)
    batcher = TripletBatcher(generator, config.resolution)
    rng = np.random.default_rng(config.seed)
    metrics_path = out_dir / "metrics.jsonl"
    last_checkpoint = out_dir / "checkpoint_init.pt"
    save_checkpoint(last_checkpoint, generator, discriminator, meta={"step": 0, "variant": config.variant})

    triplet_cache: dict[tuple[int, int], object] = {}

    def triplet_for(index: int, epoch: int) -> object:
        seed_epoch = epoch if config.resample_per_epoch else 0
        key = (index, seed_epoch)
        if key not in triplet_cache:
            seed = (config.seed * 1_000_003 + seed_epoch * 9973 + index) & 0x7FFFFFFF
            triplet_cache[key] = factory.make(records[index], seed)
            if config.resample_per_epoch and len(triplet_cache) > 4 * len(records):
                triplet_cache.clear()
        return triplet_cache[key]

    step = 0
    t_start = time.time()
    with metrics_path.open("a") as metrics:
        for epoch in range(config.epochs):
            order = rng.permutation(len(records))
            for start in range(0, len(order), config.batch_size):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                idx = order[start : start + config.batch_size]
                batch = batcher.collate([triplet_for(int(i), epoch) for i in idx])

                out = generator(batch["i_f"], batch["i_b"], batch["a"], batch["grids"], batch["fg_mask"])
                i_t = composite(batch["target"], out, batch["a"])

                # Discriminator step (generator output detached)
                opt_d.zero_grad()
                l_g_unused, l_d = hinge_losses(discriminator(batch["target"]), discriminator(i_t.detach()))
                _check_finite(l_d, "L_D", last_checkpoint)
                l_d.backward()
                opt_d.step()

                # Generator step
                opt_g.zero_grad()
                l_r = recovery_loss(batch["target"], i_t)
                l_g = -discriminator(i_t).mean()
                loss_g = config.lambda_recovery * l_r + config.lambda_gan * l_g
                _check_finite(loss_g, "generator loss", last_checkpoint)
                loss_g.backward()
                opt_g.step()

                step += 1
                if step % log_every == 0:
                    metrics.write(
                        json.dumps(
                            {
                                "step": step,
                                "epoch": epoch,
                                "l_r": float(l_r.detach()),
                                "l_g": float(l_g.detach()),
                                "l_d": float(l_d.detach()),
                                "wall_s": round(time.time() - t_start, 3),
                            }
                        )
                        + "\n"
                    )
                    metrics.flush()
            name = f"checkpoint_epoch{epoch:04d}.pt" if config.keep_epoch_checkpoints else "checkpoint_last.pt"
            ck = out_dir / name
            _atomic_checkpoint(ck, generator, discriminator, step, config.variant)
            last_checkpoint = ck
            if config.max_steps is not None and step >= config.max_steps:
                break

    final = out_dir / "checkpoint_final.pt"
    _atomic_checkpoint(final, generator, discriminator, step, config.variant)
    return final


def _atomic_checkpoint(path: Path, generator, discriminator, step: int, variant: str) -> None:
    tmp = path.with_suffix(".tmp")
    save_checkpoint(tmp, generator, discriminator, meta={"step": step, "variant": variant})
    os.replace(tmp, path)


def _check_finite(loss: torch.Tensor, name: str, last_checkpoint: Path) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{name} became non-finite", last_checkpoint=str(last_checkpoint))


def read_metrics(out_dir: str | Path) -> list[dict]:
    path = Path(out_dir) / "metrics.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
