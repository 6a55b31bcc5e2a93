"""Invertible mel-spectrogram <-> grayscale image codec.

The image is the interchange format of the whole pipeline, so the mapping
is kept exactly invertible up to 16-bit quantization: a fixed dB range is
normalized to [0, 1], quantized to uint16, flipped so high frequencies sit
at the top of the image, and right-padded to a fixed width multiple. The
NormMeta sidecar records everything needed to undo all of that.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from melfix.dsp import MelSpectrogram

QUANT_MAX = 65535

# Fixed corpus-wide dB range, matched to the extraction floor so pixel
# values are comparable across files.
DEFAULT_MIN_DB = -100.0
DEFAULT_MAX_DB = 0.0
DEFAULT_PAD_MULTIPLE = 16


@dataclass(frozen=True)
class NormMeta:
    """Normalization and padding metadata required for exact inversion."""

    min_db: float
    max_db: float
    orig_frames: int
    n_mels: int
    sample_rate: int
    hop_length: int

    def __post_init__(self):
        if not self.min_db < self.max_db:
            raise ValueError("need min_db < max_db")
        if self.orig_frames < 1:
            raise ValueError("orig_frames must be >= 1")

    def write(self, path) -> None:
        lines = [f"{k}={v}" for k, v in vars(self).items()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "NormMeta":
        fields = {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        return cls(
            min_db=float(fields["min_db"]),
            max_db=float(fields["max_db"]),
            orig_frames=int(fields["orig_frames"]),
            n_mels=int(fields["n_mels"]),
            sample_rate=int(fields["sample_rate"]),
            hop_length=int(fields["hop_length"]),
        )


@dataclass(frozen=True)
class GrayImage:
    """16-bit grayscale raster, row-major, row 0 at the top."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.dtype != np.uint16:
            if np.any(pixels < 0) or np.any(pixels > QUANT_MAX):
                raise ValueError("pixels must lie in [0, 65535]")
            pixels = pixels.astype(np.uint16)
        if pixels.ndim != 2:
            raise ValueError("pixels must be a 2-D (height, width) array")
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def normalize(
    mel: MelSpectrogram, min_db: float = DEFAULT_MIN_DB, max_db: float = DEFAULT_MAX_DB
) -> tuple[np.ndarray, NormMeta]:
    """Map dB values into [0, 1] by clipping to [min_db, max_db]."""
    if not min_db < max_db:
        raise ValueError("need min_db < max_db")
    v = mel.values
    if not np.all(np.isfinite(v)):
        raise ValueError("mel contains non-finite cells")
    unit = np.clip((v - min_db) / (max_db - min_db), 0.0, 1.0)
    hop = mel.stft_config.hop_length if mel.stft_config is not None else 0
    rate = mel.mel_config.sample_rate if mel.mel_config is not None else 0
    meta = NormMeta(
        min_db=min_db,
        max_db=max_db,
        orig_frames=mel.n_frames,
        n_mels=mel.n_mels,
        sample_rate=rate,
        hop_length=hop,
    )
    return unit, meta


def quantize16(u):
    """[0, 1] -> [0, 65535], rounding ties away from zero."""
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise ValueError("unit values must lie in [0, 1]")
    return np.floor(u * QUANT_MAX + 0.5).astype(np.uint16)


def dequantize16(q):
    """[0, 65535] -> [0, 1]."""
    return np.asarray(q, dtype=np.float64) / QUANT_MAX


def mel_to_image(
    mel: MelSpectrogram,
    min_db: float = DEFAULT_MIN_DB,
    max_db: float = DEFAULT_MAX_DB,
    pad_multiple: int = DEFAULT_PAD_MULTIPLE,
) -> tuple[GrayImage, NormMeta]:
    """Encode a mel as a fixed-width grayscale image.

    Image row 0 is the highest mel bin; the width is padded up to the next
    multiple of pad_multiple with zero pixels, and meta.orig_frames keeps
    the true frame count so decoding can drop the padding.
    """
    if pad_multiple < 1:
        raise ValueError("pad_multiple must be >= 1")
    unit, meta = normalize(mel, min_db, max_db)
    pixels = quantize16(np.flipud(unit))
    t = pixels.shape[1]
    width = ((t + pad_multiple - 1) // pad_multiple) * pad_multiple
    if width > t:
        pixels = np.pad(pixels, ((0, 0), (0, width - t)))
    return GrayImage(pixels), meta


def image_to_mel(img: GrayImage, meta: NormMeta, source_id: str = "") -> MelSpectrogram:
    """Decode a grayscale image back to a mel spectrogram.

    The extraction configs are not recoverable from the sidecar, so the
    result carries config=None; n_mels/sample_rate/hop live in the meta.
    """
    if meta.orig_frames > img.width:
        raise ValueError(
            f"meta claims {meta.orig_frames} frames but image is {img.width} wide"
        )
    if meta.n_mels != img.height:
        raise ValueError(f"meta says {meta.n_mels} mel bins, image has {img.height} rows")
    q = img.pixels[:, : meta.orig_frames]
    values = meta.min_db + dequantize16(np.flipud(q)) * (meta.max_db - meta.min_db)
    return MelSpectrogram(values, None, None, source_id)
