"""Data-dependent frequency prompt generator.

Each image channel is treated as an independent sample: its amplitude and
phase spectra go through two small 1x1-conv encoders, are concatenated with
``exp(domain_prompt)`` and mixed by a third 1x1-conv network whose channel 2
becomes the per-image prompt. The per-image prompt is blended with the
domain prompt and multiplies the amplitude spectrum before the inverse FFT.
"""
from __future__ import annotations

import torch
from torch import nn

from .spectral import FrequencyDecomposition, SpectralError, apply_amplitude_prompt, decompose

PROMPT_MODES = ("data_freq", "domain_freq", "domain_spatial", "none")
PROMPT_INITS = ("zeros", "ones", "rand")


def _conv_bn_relu(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 1), nn.BatchNorm2d(c_out), nn.ReLU())


class PromptGenerator(nn.Module):
    """Trainable prompt state: domain prompt, spectrum encoders, fusion net.

    ``mode`` selects the prompting variant used in ablations:
    ``data_freq`` (full generator), ``domain_freq`` (exp(domain prompt) only),
    ``domain_spatial`` (additive image-space prompt) and ``none``.
    """

    def __init__(self, height: int, width: int, alpha: float = 0.2, mode: str = "data_freq",
                 init: str = "zeros", spectrum_hidden: int = 4, fusion_hidden: int = 8):
        super().__init__()
        if mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt mode {mode!r}")
        if init not in PROMPT_INITS:
            raise ValueError(f"unknown prompt init {init!r}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        self.height, self.width = height, width
        self.alpha = float(alpha)
        self.mode = mode

        self.domain_prompt = nn.Parameter(self._initial_prompt(init, height, width))
        if mode == "data_freq":
            self.s_a = nn.Sequential(_conv_bn_relu(1, spectrum_hidden), _conv_bn_relu(spectrum_hidden, 1))
            self.s_p = nn.Sequential(_conv_bn_relu(1, spectrum_hidden), _conv_bn_relu(spectrum_hidden, 1))
            self.f_fre = nn.Sequential(
                _conv_bn_relu(3, fusion_hidden),
                _conv_bn_relu(fusion_hidden, fusion_hidden),
                _conv_bn_relu(fusion_hidden, 3),
            )
            # Zero scale / unit shift on the last norm: the data prompt starts at
            # exactly 1, so the fused prompt starts as the identity.
            last_bn = self.f_fre[-1][1]
            nn.init.zeros_(last_bn.weight)
            nn.init.ones_(last_bn.bias)

    @staticmethod
    def _initial_prompt(init: str, height: int, width: int) -> torch.Tensor:
        if init == "zeros":
            return torch.zeros(height, width)
        if init == "ones":
            return torch.ones(height, width)
        return torch.rand(height, width)

    def extra_repr(self) -> str:
        return f"mode={self.mode}, alpha={self.alpha}, size=({self.height}, {self.width})"

    def _check_shape(self, shape):
        if tuple(shape[-2:]) != (self.height, self.width):
            raise SpectralError(
                f"spectrum {tuple(shape[-2:])} does not match prompt ({self.height}, {self.width})")

    def data_prompt(self, decomp: FrequencyDecomposition) -> torch.Tensor:
        """Per-image prompt (channel 2 of the fusion net output), shape ``..., H, W``."""
        if self.mode != "data_freq":
            raise RuntimeError(f"mode {self.mode!r} has no data-dependent prompt")
        self._check_shape(decomp.amplitude.shape)
        lead = decomp.amplitude.shape[:-2]
        amp = decomp.amplitude.reshape(-1, 1, self.height, self.width)
        pha = decomp.phase.reshape(-1, 1, self.height, self.width)
        # log1p keeps amplitude magnitudes in a range the norm layers can handle
        amp_feat = self.s_a(torch.log1p(amp))
        pha_feat = self.s_p(pha)
        dom = self.domain_prompt.exp().to(amp.dtype).expand_as(amp)
        out = self.f_fre(torch.cat([amp_feat, pha_feat, dom], dim=1))[:, 2]
        return out.reshape(*lead, self.height, self.width)

    def fuse(self, data_prompt: torch.Tensor) -> torch.Tensor:
        self._check_shape(data_prompt.shape)
        dom = self.domain_prompt.exp().to(data_prompt.dtype)
        return self.alpha * dom + (1.0 - self.alpha) * data_prompt

    def frequency_prompt(self, images: torch.Tensor, decomp: FrequencyDecomposition | None = None) -> torch.Tensor:
        """Final non-negative amplitude prompt for every channel of ``images``."""
        if self.mode == "data_freq":
            fused = self.fuse(self.data_prompt(decomp if decomp is not None else decompose(images)))
        elif self.mode == "domain_freq":
            fused = self.domain_prompt.exp().to(images.dtype).expand_as(images)
        else:
            fused = torch.ones_like(images)
        return fused.clamp_min(0.0)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        self._check_shape(images.shape)
        if self.mode == "none":
            return images
        if self.mode == "domain_spatial":
            return images + self.domain_prompt.to(images.dtype)
        decomp = decompose(images)
        return apply_amplitude_prompt(decomp, self.frequency_prompt(images, decomp))


def prompt_image(image: torch.Tensor, generator: PromptGenerator) -> torch.Tensor:
    """Prompt a single ``C x H x W`` image."""
    return generator(image.unsqueeze(0)).squeeze(0)
