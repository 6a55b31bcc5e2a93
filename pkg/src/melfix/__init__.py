"""Mel-spectrogram GAN postfilter lab.

Pipeline: WAV -> log-mel extraction -> invertible 16-bit grayscale image ->
conditional multi-scale GAN (numpy autodiff) -> enhanced mel + metrics.
"""

from melfix.audio import AudioBuffer, EmptyAudio, WavFormatError, read_wav, write_wav
from melfix.dsp import (
    DegenerateFilter,
    MelConfig,
    MelSpectrogram,
    SampleRateMismatch,
    StftConfig,
    hann_window,
    hz_to_mel,
    mel_filterbank,
    mel_spectrogram,
    mel_to_hz,
    profile,
    stft_magnitude,
)
from melfix.codec import (
    GrayImage,
    NormMeta,
    dequantize16,
    image_to_mel,
    mel_to_image,
    normalize,
    quantize16,
)
from melfix.pngio import PngFormatError, UnsupportedDepth, read_png, write_png

__version__ = "0.1.0"
