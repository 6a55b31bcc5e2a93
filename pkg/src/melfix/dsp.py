"""Log-mel spectrogram extraction.

The chain is the usual one: frame the signal with a hop, window each frame,
take the FFT magnitude, project onto triangular mel filters, log-compress.

Conventions fixed here (the rest of the package relies on them):
  * periodic Hann window, zero-centered inside an n_fft frame
  * centered framing with reflect padding, so T = 1 + floor(len / hop)
  * HTK mel warping, m = 2595 * log10(1 + f / 700)
  * amplitude (not power) mel energies, 20 * log10 with a 1e-5 floor,
    giving a 100 dB dynamic range that matches the image codec
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from melfix.audio import AudioBuffer

AMPLITUDE_FLOOR = 1e-5  # 20*log10(1e-5) = -100 dB


class DegenerateFilter(Exception):
    """A mel filter spans zero FFT bins (n_mels too large for n_fft)."""


class SampleRateMismatch(Exception):
    """Audio sample rate disagrees with the configured rate."""


@dataclass(frozen=True)
class StftConfig:
    win_length: int
    hop_length: int
    n_fft: int
    center: bool = True

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise ValueError("need 0 < hop_length <= win_length <= n_fft")
        if self.n_fft & (self.n_fft - 1):
            raise ValueError("n_fft must be a power of two")


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    sample_rate: int = 16000
    floor_db: float = -100.0

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (0 <= self.f_min < self.f_max <= self.sample_rate / 2):
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")


@dataclass(frozen=True)
class MelSpectrogram:
    """n_mels x T matrix of dB values plus the configs that produced it."""

    values: np.ndarray
    stft_config: StftConfig | None
    mel_config: MelConfig | None
    source_id: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2 or values.shape[1] < 1:
            raise ValueError("values must be an n_mels x T matrix with T >= 1")
        if not np.all(np.isfinite(values)):
            raise ValueError("mel values must be finite")
        if self.mel_config is not None and np.any(values < self.mel_config.floor_db):
            raise ValueError("mel values below floor_db")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


# Profile parameters: the 48 kHz profile mirrors the 12.5 ms hop of the
# upstream TTS feature chain; desk16k is the fast variant used in tests.
_PROFILES = {
    "paper48k": (
        StftConfig(win_length=2400, hop_length=600, n_fft=4096),
        MelConfig(n_mels=80, f_min=0.0, f_max=24000.0, sample_rate=48000),
    ),
    "desk16k": (
        StftConfig(win_length=800, hop_length=200, n_fft=1024),
        MelConfig(n_mels=80, f_min=0.0, f_max=8000.0, sample_rate=16000),
    ),
}


def profile(name: str) -> tuple[StftConfig, MelConfig]:
    """Return the (StftConfig, MelConfig) pair for a named profile."""
    try:
        return _PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r} (have {sorted(_PROFILES)})") from None


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window, w[k] = 0.5 * (1 - cos(2 pi k / n))."""
    if n < 1:
        raise ValueError("window length must be >= 1")
    k = np.arange(n, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def _reflect_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if x.size == 1:
        return np.full(x.size + 2 * pad, x[0], dtype=x.dtype)
    return np.pad(x, pad, mode="reflect")


def frame_count(n_samples: int, hop_length: int) -> int:
    """Frames produced by centered framing: T = 1 + floor(len / hop)."""
    return 1 + n_samples // hop_length


def stft_magnitude(audio: AudioBuffer, cfg: StftConfig) -> np.ndarray:
    """Magnitude STFT, shape (n_fft/2 + 1, T).

    The win_length Hann window sits centered inside each n_fft frame;
    the signal is reflect-padded by n_fft/2 so frame t is centered on
    sample t * hop_length.
    """
    x = audio.samples
    if x.size < 1:
        raise ValueError("audio must hold at least one sample")

    window = hann_window(cfg.win_length)
    lpad = (cfg.n_fft - cfg.win_length) // 2
    padded_window = np.zeros(cfg.n_fft, dtype=np.float64)
    padded_window[lpad : lpad + cfg.win_length] = window

    half = cfg.n_fft // 2
    xp = _reflect_pad(x, half)
    n_frames = frame_count(x.size, cfg.hop_length)
    starts = np.arange(n_frames) * cfg.hop_length
    frames = xp[starts[:, None] + np.arange(cfg.n_fft)[None, :]]
    spec = np.fft.rfft(frames * padded_window, axis=1)
    return np.abs(spec).T


def hz_to_mel(f):
    """HTK mel scale, m = 2595 * log10(1 + f / 700)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be >= 0")
    return 2595.0 * np.log10(1.0 + f / 700.0)


def mel_to_hz(m):
    """Inverse of hz_to_mel."""
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("mel value must be >= 0")
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig, n_fft: int) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft/2 + 1).

    Filter centers are equally spaced on the mel axis between f_min and
    f_max; each filter is a unit-peak triangle over its two neighbors.
    """
    n_bins = n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * cfg.sample_rate / n_fft
    mel_pts = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)

    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for i in range(cfg.n_mels):
        left, center, right = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
        if not fb[i].any():
            raise DegenerateFilter(
                f"filter {i} spans zero FFT bins "
                f"(centers {left:.1f}/{center:.1f}/{right:.1f} Hz, "
                f"bin width {cfg.sample_rate / n_fft:.1f} Hz)"
            )
    return fb


def mel_spectrogram(
    audio: AudioBuffer, scfg: StftConfig, mcfg: MelConfig, source_id: str = ""
) -> MelSpectrogram:
    """Full extraction: 20*log10(max(1e-5, filterbank @ |STFT|)), floored."""
    if audio.sample_rate != mcfg.sample_rate:
        raise SampleRateMismatch(
            f"audio is {audio.sample_rate} Hz but config expects {mcfg.sample_rate} Hz"
        )
    mag = stft_magnitude(audio, scfg)
    fb = mel_filterbank(mcfg, scfg.n_fft)
    energies = fb @ mag
    db = 20.0 * np.log10(np.maximum(AMPLITUDE_FLOOR, energies))
    db = np.maximum(db, mcfg.floor_db)
    return MelSpectrogram(db, scfg, mcfg, source_id)
