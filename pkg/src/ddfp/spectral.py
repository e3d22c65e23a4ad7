"""Amplitude/phase decomposition of image channels and amplitude prompting.

Spectra are kept in the unshifted FFT layout (DC at ``[..., 0, 0]``); the
centred layout is only produced for display by :func:`centered_log_amplitude`.
All functions operate on the last two axes, so leading batch/channel axes
are carried through unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch


class SpectralError(ValueError):
    pass


@dataclass
class FrequencyDecomposition:
    amplitude: torch.Tensor
    phase: torch.Tensor

    def __post_init__(self):
        if self.amplitude.shape != self.phase.shape:
            raise SpectralError(
                f"amplitude {tuple(self.amplitude.shape)} and phase "
                f"{tuple(self.phase.shape)} differ in shape")

    @property
    def height(self) -> int:
        return self.amplitude.shape[-2]

    @property
    def width(self) -> int:
        return self.amplitude.shape[-1]


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x)


def decompose(channel) -> FrequencyDecomposition:
    """FFT of ``channel`` (``..., H, W``) split into modulus and argument."""
    channel = _as_tensor(channel)
    if channel.dim() < 2 or channel.shape[-1] < 2 or channel.shape[-2] < 2:
        raise SpectralError(f"need at least a 2x2 channel, got {tuple(channel.shape)}")
    if not torch.isfinite(channel).all():
        raise SpectralError("channel contains non-finite values")
    spec = torch.fft.fft2(channel)
    return FrequencyDecomposition(spec.abs(), spec.angle())


def recompose(decomp: FrequencyDecomposition) -> torch.Tensor:
    """Real part of the inverse FFT of ``amplitude * exp(i * phase)``."""
    spec = torch.polar(decomp.amplitude, decomp.phase)
    return torch.fft.ifft2(spec).real


def apply_amplitude_prompt(decomp: FrequencyDecomposition, prompt) -> torch.Tensor:
    prompt = _as_tensor(prompt).to(decomp.amplitude.dtype)
    if prompt.shape[-2:] != decomp.amplitude.shape[-2:]:
        raise SpectralError(
            f"prompt shape {tuple(prompt.shape)} does not match spectrum "
            f"{tuple(decomp.amplitude.shape)}")
    if (prompt.detach() < 0).any():
        raise SpectralError("amplitude prompt has negative entries")
    return recompose(FrequencyDecomposition(decomp.amplitude * prompt, decomp.phase))


def centered_log_amplitude(values) -> torch.Tensor:
    """log1p of a spectrum-shaped map with DC moved to the centre, for plotting."""
    values = _as_tensor(values)
    return torch.fft.fftshift(torch.log1p(values.abs()), dim=(-2, -1))
