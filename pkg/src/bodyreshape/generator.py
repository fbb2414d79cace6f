"""Two-headed warp-fused generator and spectral-normalized patch discriminator.

The generator is a UNet-like net with two parallel 4-layer encoders (vanilla
convolutions for the foreground, gated for the masked background), a 6-block
residual bottleneck, and a 4-layer decoder.  Foreground features are warped
with the dense field at every pyramid level and added to the background
features; the fused maps feed the bottleneck and ride the skip connections.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .errors import InvalidInputError, NotReadyError
from .warpfield import WarpField, downsample_grid

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorConfig:
    encoder_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    bottleneck_blocks: int = 6
    decoder_layers: int = 4
    background_conv: str = "gated"  # gated | vanilla (ablation switch)
    fusion_mode: str = "add"  # add | masked_add | last_layer_only (ablation switch)
    input_resolution: int = 256

    def __post_init__(self):
        if len(self.encoder_channels) != 4:
            raise InvalidInputError("encoder channel list must have length 4")
        if self.bottleneck_blocks != 6 or self.decoder_layers != 4:
            raise InvalidInputError("the full model uses 6 bottleneck blocks and 4 decoder layers")
        if self.background_conv not in ("gated", "vanilla"):
            raise InvalidInputError(f"unknown background_conv {self.background_conv!r}")
        if self.fusion_mode not in ("add", "masked_add", "last_layer_only"):
            raise InvalidInputError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.input_resolution % 8 != 0:
            raise InvalidInputError("input resolution must be divisible by 8")
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def variant_config(variant: str, input_resolution: int = 256) -> GeneratorConfig:
    """Full model or one of the ablation variants (G-, M+, C-)."""
    base = dict(input_resolution=input_resolution)
    if variant == "full":
        return GeneratorConfig(**base)
    if variant == "G-":
        return GeneratorConfig(background_conv="vanilla", **base)
    if variant == "M+":
        return GeneratorConfig(fusion_mode="masked_add", **base)
    if variant == "C-":
        return GeneratorConfig(fusion_mode="last_layer_only", **base)
    raise InvalidInputError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride, padding=(kernel - stride + 1) // 2)
        self.norm = nn.InstanceNorm2d(out_ch)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class GatedConvBlock(nn.Module):
    """feature = act(IN(conv_f(x))) * sigmoid(conv_g(x))."""

    def __init__(self, in_ch, out_ch, kernel, stride):
        super().__init__()
        self.conv_f = nn.Conv2d(in_ch, out_ch, kernel, stride, padding=(kernel - stride + 1) // 2)
        self.conv_g = nn.Conv2d(in_ch, out_ch, kernel, stride, padding=(kernel - stride + 1) // 2)
        self.norm = nn.InstanceNorm2d(out_ch)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv_f(x))) * torch.sigmoid(self.conv_g(x))

    def gate(self, x):
        return torch.sigmoid(self.conv_g(x))


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1),
            nn.InstanceNorm2d(ch),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(ch, ch, 3, 1, 1),
            nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    """4 layers: 7x7 stride-1 input conv, then three 4x4 stride-2 downsamplers."""

    def __init__(self, in_ch: int, channels, gated: bool):
        super().__init__()
        block = GatedConvBlock if gated else ConvBlock
        c1, c2, c3, c4 = channels
        self.layers = nn.ModuleList(
            [
                block(in_ch, c1, 7, 1),
                block(c1, c2, 4, 2),
                block(c2, c3, 4, 2),
                block(c3, c4, 4, 2),
            ]
        )

    def forward(self, x) -> list[torch.Tensor]:
        pyramid = []
        for layer in self.layers:
            x = layer(x)
            pyramid.append(x)
        return pyramid


class Decoder(nn.Module):
    """4 layers: three nearest-upsample + 3x3 conv stages, then a 7x7 output conv."""

    def __init__(self, channels):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.stages = nn.ModuleList([ConvBlock(c4, c3, 3, 1), ConvBlock(c3, c2, 3, 1), ConvBlock(c2, c1, 3, 1)])
        self.out_conv = nn.Conv2d(c1, 3, 7, 1, 3)

    def forward(self, x, skips: list[torch.Tensor] | None):
        # skips, when present, are the fused maps at levels 3, 2, 1 (coarse to fine)
        for i, stage in enumerate(self.stages):
            x = stage(F.interpolate(x, scale_factor=2, mode="nearest"))
            if skips is not None:
                x = x + skips[i]
        return torch.tanh(self.out_conv(x))


# ---------------------------------------------------------------------------
# Feature warping and fusion
# ---------------------------------------------------------------------------


def bilinear_sample_torch(feat: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """Edge-clamped bilinear sampling; feat [B,C,H,W], grid [B,H,W,2] pixel coords."""
    b, c, h, w = feat.shape
    x = grid[..., 0].clamp(0.0, w - 1.0)
    y = grid[..., 1].clamp(0.0, h - 1.0)
    x0 = x.floor().long()
    y0 = y.floor().long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (x - x0).unsqueeze(1)
    fy = (y - y0).unsqueeze(1)

    def gather(yy, xx):
        idx = (yy * w + xx).view(b, 1, -1).expand(-1, c, -1)
        return feat.view(b, c, -1).gather(2, idx).view(b, c, h, w)

    top = (1 - fx) * gather(y0, x0) + fx * gather(y0, x1)
    bot = (1 - fx) * gather(y1, x0) + fx * gather(y1, x1)
    return (1 - fy) * top + fy * bot


def field_to_grids(field: WarpField, resolutions: list[tuple[int, int]], dtype=torch.float32) -> list[torch.Tensor]:
    """Precompute per-level sampling grids [1,h,w,2] from a full-resolution field."""
    return [torch.from_numpy(downsample_grid(field, h, w)).to(dtype).unsqueeze(0) for h, w in resolutions]


def fuse(
    f_i: torch.Tensor,
    b_i: torch.Tensor,
    grid: torch.Tensor,
    mode: str = "add",
    warped_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Merge a warped foreground feature map with a background feature map."""
    if f_i.shape != b_i.shape:
        raise InvalidInputError(f"feature shapes differ: {tuple(f_i.shape)} vs {tuple(b_i.shape)}")
    warped = bilinear_sample_torch(f_i, grid.expand(f_i.shape[0], -1, -1, -1))
    if mode == "add" or mode == "last_layer_only":
        return warped + b_i
    if mode == "masked_add":
        if warped_mask is None:
            raise InvalidInputError("masked_add fusion needs the warped foreground mask")
        return b_i + warped * warped_mask
    raise InvalidInputError(f"unknown fusion mode {mode!r}")


def fuse_field(f_i: torch.Tensor, b_i: torch.Tensor, field: WarpField, mode: str = "add", fg_mask=None):
    """Single-map convenience wrapper over :func:`fuse` taking a WarpField."""
    if f_i.ndim == 3:
        f_i = f_i.unsqueeze(0)
        b_i = b_i.unsqueeze(0)
    h, w = f_i.shape[-2:]
    grid = field_to_grids(field, [(h, w)], dtype=f_i.dtype)[0]
    warped_mask = None
    if mode == "masked_add":
        if fg_mask is None:
            raise InvalidInputError("masked_add fusion needs the foreground mask")
        mask_t = torch.as_tensor(np.asarray(fg_mask), dtype=f_i.dtype).view(1, 1, *np.asarray(fg_mask).shape)
        full = field_to_grids(field, [tuple(mask_t.shape[-2:])], dtype=f_i.dtype)[0]
        warped_full = bilinear_sample_torch(mask_t, full)
        sy = mask_t.shape[-2] // h
        warped_mask = F.avg_pool2d(warped_full, sy) if sy > 1 else warped_full
    return fuse(f_i, b_i, grid, mode, warped_mask)


# ---------------------------------------------------------------------------
# Generator / discriminator
# ---------------------------------------------------------------------------


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        ch = config.encoder_channels
        self.fg_encoder = Encoder(3, ch, gated=False)
        self.bg_encoder = Encoder(4, ch, gated=(config.background_conv == "gated"))
        self.bottleneck = nn.Sequential(*[ResidualBlock(ch[3]) for _ in range(config.bottleneck_blocks)])
        self.decoder = Decoder(ch)
        self.apply(_init_weights)

    def level_resolutions(self, h: int, w: int) -> list[tuple[int, int]]:
        return [(h, w), (h // 2, w // 2), (h // 4, w // 4), (h // 8, w // 8)]

    def forward(
        self,
        i_f: torch.Tensor,  # [B,3,H,W] foreground, zeros outside the person
        i_b: torch.Tensor,  # [B,3,H,W] background, zeros inside the union mask
        a: torch.Tensor,  # [B,1,H,W] union mask
        grids: list[torch.Tensor],  # per-level sampling grids [B|1,h,w,2]
        fg_mask: torch.Tensor | None = None,  # [B,1,H,W], required for masked_add
    ) -> torch.Tensor:
        return self.forward_encoded(self.fg_encoder(i_f), i_b, a, grids, fg_mask)

    def forward_encoded(
        self,
        f_pyr: list[torch.Tensor],  # cached output of fg_encoder
        i_b: torch.Tensor,
        a: torch.Tensor,
        grids: list[torch.Tensor],
        fg_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        mode = self.config.fusion_mode
        b_pyr = self.bg_encoder(torch.cat([i_b, a], dim=1))

        warped_masks = [None] * 4
        if mode == "masked_add":
            if fg_mask is None:
                raise InvalidInputError("masked_add fusion needs fg_mask")
            warped_full = bilinear_sample_torch(fg_mask, grids[0].expand(fg_mask.shape[0], -1, -1, -1))
            warped_masks = [warped_full if i == 0 else F.avg_pool2d(warped_full, 2**i) for i in range(4)]

        if mode == "last_layer_only":
            phi4 = fuse(f_pyr[3], b_pyr[3], grids[3], "add")
            skips = None
        else:
            phi = [fuse(f_pyr[i], b_pyr[i], grids[i], mode, warped_masks[i]) for i in range(4)]
            phi4 = phi[3]
            skips = [phi[2], phi[1], phi[0]]

        x = self.bottleneck(phi4)
        return self.decoder(x, skips)


class PatchDiscriminator(nn.Module):
    """6 spectral-normalized convolutions emitting a patch-logit map."""

    def __init__(self, base: int = 64):
        super().__init__()
        chans = [3, base, base * 2, base * 4, base * 8, base * 8]
        strides = [2, 2, 2, 2, 1, 1]
        layers: list[nn.Module] = []
        for i in range(5):
            layers.append(spectral_norm(nn.Conv2d(chans[i], chans[i + 1], 4, strides[i], 1)))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
        layers.append(spectral_norm(nn.Conv2d(chans[5], 1, 4, strides[5], 1)))
        self.net = nn.Sequential(*layers)
        for conv in self.conv_layers():
            nn.init.normal_(conv.parametrizations.weight.original, 0.0, 0.02)
            if conv.bias is not None:
                nn.init.zeros_(conv.bias)
        self.converge_norms()

    def forward(self, x):
        return self.net(x)

    def conv_layers(self) -> list[nn.Conv2d]:
        return [m for m in self.net if isinstance(m, nn.Conv2d)]

    def converge_norms(self) -> None:
        """Seed the power-iteration vectors with the exact top singular pair."""
        with torch.no_grad():
            for conv in self.conv_layers():
                pm = conv.parametrizations.weight[0]
                w = conv.parametrizations.weight.original.flatten(1)
                u, _, vh = torch.linalg.svd(w, full_matrices=False)
                pm._u.copy_(u[:, 0])
                pm._v.copy_(vh[0])


def _init_weights(m):
    if isinstance(m, nn.Conv2d):
        nn.init.normal_(m.weight, 0.0, 0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)


def weight_spectral_norm(conv: nn.Conv2d) -> float:
    """Largest singular value of the (normalized) conv weight, flattened 2D."""
    w = conv.weight.detach().reshape(conv.weight.shape[0], -1)
    return float(torch.linalg.matrix_norm(w, ord=2))


# ---------------------------------------------------------------------------
# Compositing (the served output equation)
# ---------------------------------------------------------------------------


def composite(image, generated, union_mask):
    """Blend: union-mask pixels from the generator, everything else bit-exact input."""
    if isinstance(image, torch.Tensor):
        if image.shape != generated.shape:
            raise InvalidInputError("composite inputs must share a shape")
        mask = union_mask
        if mask.ndim == image.ndim - 1:
            mask = mask.unsqueeze(-3)
        return torch.where(mask > 0.5, generated, image)
    img = np.asarray(image)
    gen = np.asarray(generated)
    if img.shape != gen.shape:
        raise InvalidInputError("composite inputs must share a shape")
    m = np.asarray(getattr(union_mask, "a", union_mask))
    if m.shape != img.shape[:2]:
        raise InvalidInputError("union mask resolution mismatch")
    if img.ndim == 3:
        m = m[..., None]
    return np.where(m > 0.5, gen, img)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, generator: Generator, discriminator: PatchDiscriminator | None = None, meta=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(generator.config),
        "config_fingerprint": generator.config.fingerprint(),
        "generator": generator.state_dict(),
        "meta": meta or {},
    }
    if discriminator is not None:
        payload["discriminator"] = discriminator.state_dict()
    torch.save(payload, path)


def load_checkpoint(path, with_discriminator: bool = False):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise NotReadyError(f"checkpoint not found: {path}") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise NotReadyError(f"unsupported checkpoint version in {path}")
    cfg_dict = dict(payload["config"])
    cfg_dict["encoder_channels"] = tuple(cfg_dict["encoder_channels"])
    config = GeneratorConfig(**cfg_dict)
    if config.fingerprint() != payload["config_fingerprint"]:
        raise NotReadyError("checkpoint config fingerprint mismatch")
    gen = Generator(config)
    gen.load_state_dict(payload["generator"])
    gen.eval()
    if not with_discriminator:
        return gen
    disc = PatchDiscriminator()
    if "discriminator" in payload:
        disc.load_state_dict(payload["discriminator"])
    disc.eval()
    return gen, disc


# ---------------------------------------------------------------------------
# Image <-> tensor helpers ([-1, 1] HWC float <-> BCHW)
# ---------------------------------------------------------------------------


def img_to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).unsqueeze(0).to(dtype)


def tensor_to_img(t: torch.Tensor) -> np.ndarray:
    return t.detach().squeeze(0).permute(1, 2, 0).cpu().numpy()


def generate(
    i_f: np.ndarray,
    i_b: np.ndarray,
    a: np.ndarray,
    field: WarpField,
    generator: Generator,
) -> np.ndarray:
    """Inference convenience: numpy HWC [-1,1] images in, generated image out."""
    h, w = i_f.shape[:2]
    if (h, w) != field.resolution or i_b.shape[:2] != (h, w):
        raise InvalidInputError("generate inputs must share the field resolution")
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        grids = field_to_grids(field, generator.level_resolutions(h, w))
        a_arr = np.asarray(getattr(a, "a", a), dtype=np.float32)
        fg_mask = img_to_tensor((np.asarray(i_f) != 0).any(axis=-1).astype(np.float32))
        out = generator(
            img_to_tensor(i_f),
            img_to_tensor(i_b),
            img_to_tensor(a_arr),
            grids,
            fg_mask=fg_mask,
        )
    if was_training:
        generator.train()
    return tensor_to_img(out)
