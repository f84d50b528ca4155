"""
Conditional Reconstructor

A patch transformer that regresses the future latent Z_{t+delta} from the
current latent Z_t and the condition vector C_delta. Conditioning modulates
every layer normalization (shift, scale and residual gate predicted from
C_delta, all zero-initialized); there is no noise process and no timestep.
"""

from typing import Any, Dict, Tuple

import torch
import torch.nn as nn

from . import config


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class ReconstructorBlock(nn.Module):
    """Self-attention + MLP block with condition-modulated layer norms."""

    def __init__(self, dim: int, heads: int, cond_dim: int, mlp_ratio: float = 4.0, zero_init: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 6 * dim))
        if zero_init:
            nn.init.zeros_(self.modulation[-1].weight)
            nn.init.zeros_(self.modulation[-1].bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.modulation(c).chunk(6, dim=1)
        h = modulate(self.norm1(x), shift_a, scale_a)
        x = x + gate_a.unsqueeze(1) * self.attn(h, h, h, need_weights=False)[0]
        x = x + gate_m.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_m, scale_m))
        return x


class FinalLayer(nn.Module):
    def __init__(self, dim: int, patch_size: int, out_channels: int, cond_dim: int, zero_init: bool = True):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(dim, patch_size * patch_size * out_channels)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(cond_dim, 2 * dim))
        if zero_init:
            for layer in (self.linear, self.modulation[-1]):
                nn.init.zeros_(layer.weight)
                nn.init.zeros_(layer.bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm(x), shift, scale))


class ConditionalReconstructor(nn.Module):
    """
    Predict Z_hat_{t+delta} = R(Z_t, C_delta) in one deterministic forward pass.

    Parameters:
    -----------
    latent_shape : (int, int, int)
        (C_z, H_z, W_z) of the codec latents
    cond_dim : int
        Dimension of C_delta
    patch_size : int
        Side of the square latent patches forming tokens
    dim, depth, heads : int
        Token width, block count and attention heads
    mlp_ratio : float
        MLP hidden width relative to dim
    zero_init : bool
        Zero the modulation maps and the output projection, so an untrained
        reconstructor outputs zeros and ignores the condition
    """

    def __init__(
        self,
        latent_shape: Tuple[int, int, int],
        cond_dim: int = config.CONDITION_DIM,
        patch_size: int = config.RECON_PATCH_SIZE,
        dim: int = config.RECON_DIM,
        depth: int = config.RECON_DEPTH,
        heads: int = config.RECON_HEADS,
        mlp_ratio: float = 4.0,
        zero_init: bool = True
    ):
        super().__init__()
        channels, height, width = latent_shape
        if height % patch_size or width % patch_size:
            raise ValueError(f"latent grid {height}x{width} not divisible by patch size {patch_size}")
        if dim % heads:
            raise ValueError(f"token dim {dim} not divisible by {heads} heads")
        self.latent_shape = (channels, height, width)
        self.cond_dim = cond_dim
        self.patch_size = patch_size
        self.grid = (height // patch_size, width // patch_size)

        self.patch_embed = nn.Conv2d(channels, dim, kernel_size=patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid[0] * self.grid[1], dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(ReconstructorBlock(dim, heads, cond_dim, mlp_ratio, zero_init) for _ in range(depth))
        self.final = FinalLayer(dim, patch_size, channels, cond_dim, zero_init)

    @classmethod
    def from_config(cls, tree: Dict[str, Any], latent_shape: Tuple[int, int, int]) -> "ConditionalReconstructor":
        section = tree["reconstructor"]
        return cls(
            latent_shape=latent_shape,
            cond_dim=tree["model"]["cond_dim"],
            patch_size=section["patch_size"],
            dim=section["dim"],
            depth=section["depth"],
            heads=section["heads"],
            mlp_ratio=section["mlp_ratio"],
        )

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, N, p*p*C) -> (B, C, H, W)."""
        b = tokens.shape[0]
        p = self.patch_size
        c = self.latent_shape[0]
        gh, gw = self.grid
        x = tokens.reshape(b, gh, gw, p, p, c)
        x = torch.einsum("bhwpqc->bchpwq", x)
        return x.reshape(b, c, gh * p, gw * p)

    def forward(self, latents: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        if tuple(latents.shape[1:]) != self.latent_shape:
            raise ValueError(f"latent shape {tuple(latents.shape[1:])} != configured {self.latent_shape}")
        if condition.shape != (latents.shape[0], self.cond_dim):
            raise ValueError(f"condition shape {tuple(condition.shape)} != ({latents.shape[0]}, {self.cond_dim})")
        x = self.patch_embed(latents).flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            x = block(x, condition)
        return self.unpatchify(self.final(x, condition))
