"""Toy-scale supervised learning of the per-step transfer field.

A small convolutional model maps (latent, condition, mask, step, prompt
embedding) to the predicted image-space update. This is a desk-scale
surrogate for the full conditional generator: enough to exercise the data
path, the regression objective, dropout augmentation, the residual-mask
data filter, and gradient verification.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DivergenceDetected, ShapeError, ZeroMask
from .gbuffer import BUFFER_NAMES, DropoutSpec, N_CHANNELS

DEFAULT_RESIDUAL_THRESHOLD = 0.02


@dataclass
class TrainingBatch:
    latents: torch.Tensor      # N x 3 x H x W
    conditions: torch.Tensor   # N x 21 x H x W, post-dropout
    masks: torch.Tensor        # N x 1 x H x W
    prompts: torch.Tensor      # N x E
    steps: torch.Tensor        # N
    targets: torch.Tensor      # N x 3 x H x W

    def __post_init__(self):
        n = self.latents.shape[0]
        for name in ("conditions", "masks", "prompts", "steps", "targets"):
            if getattr(self, name).shape[0] != n:
                raise ShapeError(f"{name} batch dimension mismatch")
        if not torch.isfinite(self.targets).all():
            raise ShapeError("targets contain non-finite values")


@dataclass
class TrainingReport:
    losses: list = field(default_factory=list)
    final_loss: float = 0.0
    wall_time: float = 0.0
    epochs: int = 0
    parameter_count: int = 0


class ToyModel(nn.Module):
    """Stacked convolutions with step and prompt conditioning.

    Input channels: latent(3) + condition(21) + mask(1) + step(1). The
    prompt embedding enters as a learned per-channel bias after the first
    convolution. The output head is zero-initialized so an untrained model
    predicts the zero update.
    """

    def __init__(self, prompt_dim: int = 64, hidden: int = 32, depth: int = 3):
        super().__init__()
        in_channels = 3 + N_CHANNELS + 1 + 1
        self.prompt_dim = prompt_dim
        self.stem = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.prompt_proj = nn.Linear(prompt_dim, hidden)
        self.body = nn.ModuleList(
            nn.Conv2d(hidden, hidden, 3, padding=1) for _ in range(depth - 1))
        self.head = nn.Conv2d(hidden, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, latents, conditions, masks, steps, prompts):
        n, _, h, w = latents.shape
        step_channel = steps.view(n, 1, 1, 1).to(latents.dtype).expand(n, 1, h, w)
        x = torch.cat([latents, conditions, masks, step_channel], dim=1)
        x = self.stem(x) + self.prompt_proj(prompts)[:, :, None, None]
        x = F.silu(x)
        for conv in self.body:
            x = F.silu(conv(x))
        return self.head(x)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class LinearToyModel(nn.Module):
    """Single linear map; its analytic gradient is exact, so finite
    differences agree to near machine precision."""

    def __init__(self):
        super().__init__()
        in_channels = 3 + N_CHANNELS + 1 + 1
        self.head = nn.Conv2d(in_channels, 3, 1)

    def forward(self, latents, conditions, masks, steps, prompts):
        n, _, h, w = latents.shape
        step_channel = steps.view(n, 1, 1, 1).to(latents.dtype).expand(n, 1, h, w)
        x = torch.cat([latents, conditions, masks, step_channel], dim=1)
        return self.head(x)


def dropout_condition(data: np.ndarray, spec: DropoutSpec,
                      rng: np.random.Generator) -> np.ndarray:
    """Zero whole 3-channel buffer spans by Bernoulli draw; mask channels
    are never dropped."""
    out = data.copy()
    draw = rng.random(len(BUFFER_NAMES))
    for i in range(len(BUFFER_NAMES)):
        if draw[i] >= spec.retention_probabilities[i]:
            out[:, :, 3 * i:3 * i + 3] = 0.0
    return out


def make_training_batch(samples, dropout: DropoutSpec, codec,
                        text_embedder, prompt_dim: int = 64) -> TrainingBatch:
    """Assemble sample pairs into tensors.

    Encodes the previous image, applies seeded channel dropout to the
    conditions, and forms the regression targets x_next - x_prev. Dropout
    never touches the targets.
    """
    rng = np.random.default_rng(dropout.seed)
    latents, conds, masks, prompts, steps, targets = [], [], [], [], [], []
    shape = samples[0].x_prev.shape
    for sample in samples:
        if sample.x_prev.shape != shape or sample.x_next.shape != shape:
            raise ShapeError("samples disagree on resolution")
        z = np.asarray(codec.encode(sample.x_prev), dtype=np.float32)
        if z.shape != shape:
            raise ShapeError("trainer requires an image-shaped latent")
        latents.append(z.transpose(2, 0, 1))
        conds.append(dropout_condition(sample.condition.data, dropout,
                                       rng).transpose(2, 0, 1))
        masks.append(sample.mask.refined[None, :, :])
        emb = np.asarray(text_embedder.embed_text(sample.prompt),
                         dtype=np.float32)
        prompts.append(emb[:prompt_dim])
        steps.append(sample.step)
        targets.append((sample.x_next - sample.x_prev).transpose(2, 0, 1))
    return TrainingBatch(
        latents=torch.from_numpy(np.stack(latents)),
        conditions=torch.from_numpy(np.stack(conds)),
        masks=torch.from_numpy(np.stack(masks).astype(np.float32)),
        prompts=torch.from_numpy(np.stack(prompts)),
        steps=torch.tensor(steps, dtype=torch.float32),
        targets=torch.from_numpy(np.stack(targets)),
    )


def residual_mask_filter(sample, threshold: float = DEFAULT_RESIDUAL_THRESHOLD):
    """Keep only pairs whose edit actually changed the targeted region.

    Keep iff the mask-weighted mean absolute residual reaches the
    threshold. Returns ``("keep", None)`` or ``("reject", reason)``.
    """
    weights = np.asarray(sample.mask.refined, dtype=np.float64)
    mass = weights.sum()
    if mass == 0.0:
        return "reject", "empty_mask"
    residual = np.abs(sample.x_next.astype(np.float64)
                      - sample.x_prev.astype(np.float64)).mean(axis=2)
    value = float((weights * residual).sum() / mass)
    if value >= threshold:
        return "keep", None
    return "reject", "static_region"


def loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements (resolution-independent)."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target "
                         f"{tuple(target.shape)}")
    return F.mse_loss(pred, target)


def train_toy(model: nn.Module, batches, epochs: int, lr: float = 1e-2,
              seed: int = 0) -> TrainingReport:
    """Plain Adam loop over the given batches.

    Raises :class:`DivergenceDetected` when the loss goes NaN or grows 10x
    from its starting value.
    """
    if not batches:
        raise ValueError("need at least one batch")
    torch.manual_seed(seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    report = TrainingReport(parameter_count=sum(p.numel()
                                                for p in model.parameters()))
    start = time.perf_counter()
    initial = None
    for epoch in range(epochs):
        epoch_loss = 0.0
        for batch in batches:
            optimizer.zero_grad()
            pred = model(batch.latents, batch.conditions, batch.masks,
                         batch.steps, batch.prompts)
            value = loss(pred, batch.targets)
            value.backward()
            optimizer.step()
            epoch_loss += float(value.detach())
        epoch_loss /= len(batches)
        report.losses.append(epoch_loss)
        if initial is None:
            initial = epoch_loss
        if not np.isfinite(epoch_loss) or (initial > 0
                                           and epoch_loss > 10.0 * initial):
            raise DivergenceDetected(
                f"loss {epoch_loss} at epoch {epoch} (started at {initial})")
    report.final_loss = report.losses[-1]
    report.epochs = epochs
    report.wall_time = time.perf_counter() - start
    return report


def grad_check(model: nn.Module, batch: TrainingBatch, probe_count: int = 20,
               h: float = 1e-4, seed: int = 0) -> float:
    """Compare analytic parameter gradients against central finite
    differences on randomly probed parameters; returns the max relative
    error. Runs in float64. Frozen parameters are excluded from probing."""
    model = model.double()
    batch64 = TrainingBatch(
        latents=batch.latents.double(), conditions=batch.conditions.double(),
        masks=batch.masks.double(), prompts=batch.prompts.double(),
        steps=batch.steps.double(), targets=batch.targets.double())

    def eval_loss():
        pred = model(batch64.latents, batch64.conditions, batch64.masks,
                     batch64.steps, batch64.prompts)
        return loss(pred, batch64.targets)

    model.zero_grad()
    eval_loss().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("no trainable parameters to probe")
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat_indices = rng.choice(sizes.sum(), size=min(probe_count, sizes.sum()),
                              replace=False)

    max_rel = 0.0
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    with torch.no_grad():
        for flat in flat_indices:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            local = int(flat - offsets[pi])
            param = params[pi]
            analytic = float(param.grad.view(-1)[local])
            original = float(param.data.view(-1)[local])
            param.data.view(-1)[local] = original + h
            plus = float(eval_loss())
            param.data.view(-1)[local] = original - h
            minus = float(eval_loss())
            param.data.view(-1)[local] = original
            numeric = (plus - minus) / (2 * h)
            scale = max(abs(analytic), abs(numeric), 1e-8)
            max_rel = max(max_rel, abs(analytic - numeric) / scale)
    return max_rel


def save_checkpoint(path, model: nn.Module, config: dict | None = None,
                    seed: int = 0) -> None:
    """Self-describing checkpoint: architecture config + parameters."""
    torch.save({
        "architecture": type(model).__name__,
        "config": config or {},
        "state_dict": model.state_dict(),
        "seed": seed,
    }, path)


def load_checkpoint(path, model: nn.Module) -> dict:
    payload = torch.load(path, weights_only=True)
    model.load_state_dict(payload["state_dict"])
    return payload


def save_loss_curve(path, report: TrainingReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, value in enumerate(report.losses):
            writer.writerow([i, value])
