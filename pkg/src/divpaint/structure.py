"""Conditional autoregressive model over the structural index grid.

A gated masked-convolution network with interleaved causal self-attention
predicts each grid cell from the cells before it in raster order plus a
condition derived from the incomplete image and its mask. Sampling the grid
cell by cell yields diverse structural layouts for one incomplete input.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import StructureGenConfig


class MaskedConv2d(nn.Conv2d):
    """Raster-order causal convolution.

    mask_type "A" excludes the current cell (first layer), "B" includes it.
    """

    def __init__(self, mask_type: str, in_channels: int, out_channels: int, kernel_size: int):
        super().__init__(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        if mask_type not in ("A", "B"):
            raise ValueError("mask_type must be 'A' or 'B'")
        mask = torch.zeros_like(self.weight)
        center = kernel_size // 2
        mask[:, :, :center, :] = 1.0
        mask[:, :, center, :center] = 1.0
        if mask_type == "B":
            mask[:, :, center, center] = 1.0
        self.register_buffer("mask", mask)

    def forward(self, x: Tensor) -> Tensor:
        return self._conv_forward(x, self.weight * self.mask, self.bias)


class GatedResidualLayer(nn.Module):
    """Masked gated convolution with the condition added to both halves."""

    def __init__(self, channels: int, residual_units: int, cond_channels: int,
                 kernel_size: int, dropout: float):
        super().__init__()
        self.conv = MaskedConv2d("B", channels, 2 * residual_units, kernel_size)
        self.cond = nn.Conv2d(cond_channels, 2 * residual_units, 1)
        self.proj = nn.Conv2d(residual_units, channels, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, condition: Tensor) -> Tensor:
        y = self.conv(x) + self.cond(condition)
        a, b = y.chunk(2, dim=1)
        y = torch.tanh(a) * torch.sigmoid(b)
        return x + self.drop(self.proj(y))


class CausalSelfAttention(nn.Module):
    """Multi-head attention over strictly earlier cells in raster order.

    The first cell has no predecessors; its attention output is zero. Masking
    uses -inf so later cells contribute exactly nothing.
    """

    def __init__(self, channels: int, heads: int, grid_size: int):
        super().__init__()
        self.heads = heads
        self.head_dim = channels // heads
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.pos = nn.Parameter(0.02 * torch.randn(1, channels, grid_size, grid_size))
        n = grid_size * grid_size
        allowed = torch.tril(torch.ones(n, n, dtype=torch.bool), diagonal=-1)
        self.register_buffer("allowed", allowed.view(1, 1, n, n))

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        n = h * w
        q, k, v = self.qkv(x + self.pos).reshape(b, 3, self.heads, self.head_dim, n).unbind(1)
        scores = torch.einsum("bhdi,bhdj->bhij", q, k) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~self.allowed, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        weights = torch.where(self.allowed.any(-1, keepdim=True), weights, torch.zeros(()))
        out = torch.einsum("bhij,bhdj->bhdi", weights, v).reshape(b, c, h, w)
        return x + self.proj(out)


class GatedConv2d(nn.Module):
    """Plain (non-causal) gated convolution used by the conditioning stack."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 2 * out_channels, kernel_size,
                              stride=stride, padding=kernel_size // 2)

    def forward(self, x: Tensor) -> Tensor:
        a, b = self.conv(x).chunk(2, dim=1)
        return torch.tanh(a) * torch.sigmoid(b)


class ConditionNet(nn.Module):
    """Incomplete image + mask down to a feature grid at structural resolution."""

    def __init__(self, cfg: StructureGenConfig):
        super().__init__()
        ch = cfg.conditioning_hidden
        self.stem = GatedConv2d(4, ch)
        self.down = nn.ModuleList([GatedConv2d(ch, ch, stride=2) for _ in range(3)])
        self.res = nn.ModuleList([GatedConv2d(ch, cfg.conditioning_residual) for _ in range(2)])

    def forward(self, incomplete: Tensor, mask: Tensor) -> Tensor:
        if mask.shape[-2:] != incomplete.shape[-2:]:
            raise ValueError("mask is not aligned with the incomplete image")
        x = self.stem(torch.cat([incomplete, mask], dim=1))
        for layer in self.down:
            x = layer(x)
        for layer in self.res:
            x = x + layer(x)
        return x


class StructureModel(nn.Module):
    """Autoregressive categorical model over index grids.

    Logits at a cell depend only on strictly earlier cells (raster order) and
    on the condition; this causality is what makes sequential sampling valid.
    """

    def __init__(self, cfg: StructureGenConfig, codebook_size: int, grid_size: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.codebook_size = codebook_size
        self.grid_size = grid_size
        ch = cfg.hidden_units
        self.condition_net = ConditionNet(cfg)
        self.embed = nn.Embedding(codebook_size, ch)
        self.input_conv = MaskedConv2d("A", ch, ch, cfg.kernel_size)
        self.layers = nn.ModuleList()
        interval = max(cfg.layers // max(cfg.attention_layers, 1), 1)
        attn_used = 0
        for i in range(cfg.layers):
            self.layers.append(GatedResidualLayer(
                ch, cfg.residual_units, cfg.conditioning_hidden, cfg.kernel_size, cfg.dropout))
            if cfg.attention_layers and (i + 1) % interval == 0 and attn_used < cfg.attention_layers:
                self.layers.append(CausalSelfAttention(ch, cfg.attention_heads, grid_size))
                attn_used += 1
        head = []
        for _ in range(max(cfg.output_stack_layers - 1, 0)):
            head += [nn.ELU(), nn.Conv2d(ch, ch, 1)]
        final = nn.Conv2d(ch, codebook_size, 1)
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        head += [nn.ELU(), final]
        self.head = nn.Sequential(*head)

    def build_condition(self, incomplete: Tensor, mask: Tensor) -> Tensor:
        """Condition stack from a hole-filled image and its mask (NCHW)."""
        cond = self.condition_net(incomplete, mask)
        if cond.shape[-1] != self.grid_size:
            raise ValueError(
                f"condition grid {cond.shape[-1]} does not match structural grid {self.grid_size}"
            )
        return cond

    def forward(self, targets: Tensor, condition: Tensor) -> Tensor:
        """Teacher-forced logits, shape (B, K, h, w)."""
        if targets.dtype not in (torch.int64, torch.int32):
            raise ValueError("targets must be an integer index grid")
        if int(targets.max()) >= self.codebook_size or int(targets.min()) < 0:
            raise ValueError("target indices fall outside the codebook")
        if targets.shape[-2:] != condition.shape[-2:]:
            raise ValueError("targets and condition disagree on grid size")
        x = self.embed(targets.long()).permute(0, 3, 1, 2)
        x = self.input_conv(x)
        for layer in self.layers:
            if isinstance(layer, GatedResidualLayer):
                x = layer(x, condition)
            else:
                x = layer(x)
        return self.head(x)


def nll_loss(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean per-cell negative log likelihood, in nats."""
    if logits.shape[-2:] != targets.shape[-2:]:
        raise ValueError("logits/targets shape mismatch")
    return F.cross_entropy(logits, targets.long())


@torch.no_grad()
def sample_structure(
    model: StructureModel,
    condition: Tensor,
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
    greedy: bool = False,
) -> Tensor:
    """Sample index grids cell by cell in raster order.

    Deterministic given the generator's seed; `greedy` is the temperature-to-0
    limit (argmax decoding). Every cell of the grid is sampled.
    """
    if not greedy and temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    was_training = model.training
    model.eval()
    try:
        b = condition.shape[0]
        h = w = model.grid_size
        grid = torch.zeros(b, h, w, dtype=torch.long)
        for r in range(h):
            for c in range(w):
                logits = model(grid, condition)[:, :, r, c]
                if greedy:
                    grid[:, r, c] = logits.argmax(dim=1)
                else:
                    probs = torch.softmax(logits / temperature, dim=1)
                    grid[:, r, c] = torch.multinomial(probs, 1, generator=generator)[:, 0]
        return grid
    finally:
        model.train(was_training)


def entropy_from_logits(logits: Tensor) -> Tensor:
    """Shannon entropy in bits of softmax(logits) along the last axis."""
    p = torch.softmax(logits.double(), dim=-1)
    plogp = torch.where(p > 0, p * torch.log2(p), torch.zeros((), dtype=torch.float64))
    return -plogp.sum(-1)


@torch.no_grad()
def entropy_map(model: StructureModel, condition: Tensor, targets: Tensor) -> Tensor:
    """Per-cell predictive entropy (bits) under teacher forcing, shape (B, h, w)."""
    was_training = model.training
    model.eval()
    try:
        logits = model(targets, condition)
        return entropy_from_logits(logits.permute(0, 2, 3, 1))
    finally:
        model.train(was_training)
