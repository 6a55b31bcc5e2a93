"""Coarse-to-fine generator and multi-scale patch discriminators.

Generator: 7x7 input conv -> strided 4x4 downsampling convs -> residual
blocks -> transposed 4x4 upsampling convs -> 7x7 output conv -> tanh,
instance-normalized throughout, optionally wrapped by a local enhancer
that works at full resolution while the global trunk sees a 2x-pooled
input. Discriminators: three identical patch classifiers applied to an
image pyramid at scales 1, 1/2, 1/4; each consumes the condition and the
candidate concatenated on channels and emits a grid of patch logits.

Output convs (generator and discriminator heads) start at exactly zero,
so a fresh model produces 0 everywhere and the losses have closed-form
initial values: 6*ln2 for the discriminator side, 3*ln2 for the
generator's adversarial side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

import melfix.autodiff as ad
from melfix.autodiff import Tensor

WEIGHT_STD = 0.02


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 16
    n_downsample: int = 2
    n_resblocks: int = 3
    n_enhancers: int = 0

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.n_downsample < 1:
            raise ValueError("n_downsample must be >= 1")
        if self.n_resblocks < 0:
            raise ValueError("n_resblocks must be >= 0")
        if self.n_enhancers not in (0, 1):
            raise ValueError("n_enhancers must be 0 or 1")

    @property
    def divisor(self) -> int:
        """Spatial dims of inputs must divide by this."""
        return 2 ** (self.n_downsample + self.n_enhancers)


class _ParamBag:
    """Shared parameter bookkeeping for the network classes."""

    def __init__(self, seed: int, dtype):
        self.params: dict[str, Tensor] = {}
        self.dtype = dtype
        self._rng = np.random.default_rng(seed)

    def _conv(self, name: str, cout: int, cin: int, k: int, zero: bool = False):
        shape = (cout, cin, k, k)
        w = np.zeros(shape) if zero else self._rng.normal(0.0, WEIGHT_STD, size=shape)
        self.params[f"{name}.w"] = ad.parameter(w, dtype=self.dtype)
        self.params[f"{name}.b"] = ad.parameter(np.zeros(cout), dtype=self.dtype)

    def _conv_t(self, name: str, cin: int, cout: int, k: int):
        shape = (cin, cout, k, k)
        w = self._rng.normal(0.0, WEIGHT_STD, size=shape)
        self.params[f"{name}.w"] = ad.parameter(w, dtype=self.dtype)
        self.params[f"{name}.b"] = ad.parameter(np.zeros(cout), dtype=self.dtype)

    def _norm(self, name: str, c: int):
        self.params[f"{name}.g"] = ad.parameter(np.ones(c), dtype=self.dtype)
        self.params[f"{name}.b"] = ad.parameter(np.zeros(c), dtype=self.dtype)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            arr = arrays[k]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=self.dtype)

    # forward helpers
    def conv(self, name, x, stride=1, pad=0):
        return ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride, pad)

    def conv_t(self, name, x, stride=2, pad=1):
        return ad.conv_transpose2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride, pad)

    def norm(self, name, x):
        return ad.instance_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])


class Generator(_ParamBag):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0, dtype=np.float32):
        super().__init__(seed, dtype)
        self.cfg = cfg
        b, nd = cfg.base_channels, cfg.n_downsample

        # global trunk (built first so enhancer presence never shifts its init)
        self._conv("enc.conv", b, cfg.in_channels, 7)
        self._norm("enc.norm", b)
        ch = b
        for i in range(nd):
            self._conv(f"down{i}.conv", ch * 2, ch, 4)
            self._norm(f"down{i}.norm", ch * 2)
            ch *= 2
        for j in range(cfg.n_resblocks):
            self._conv(f"res{j}.conv1", ch, ch, 3)
            self._norm(f"res{j}.norm1", ch)
            self._conv(f"res{j}.conv2", ch, ch, 3)
            self._norm(f"res{j}.norm2", ch)
        for i in range(nd):
            self._conv_t(f"up{i}.conv", ch, ch // 2, 4)
            self._norm(f"up{i}.norm", ch // 2)
            ch //= 2
        self._conv("out.conv", cfg.out_channels, b, 7, zero=True)

        if cfg.n_enhancers:
            eb = max(1, b // 2)
            self._conv("enh.enc.conv", eb, cfg.in_channels, 7)
            self._norm("enh.enc.norm", eb)
            self._conv("enh.down.conv", b, eb, 4)
            self._norm("enh.down.norm", b)
            for j in range(cfg.n_resblocks):
                self._conv(f"enh.res{j}.conv1", b, b, 3)
                self._norm(f"enh.res{j}.norm1", b)
                self._conv(f"enh.res{j}.conv2", b, b, 3)
                self._norm(f"enh.res{j}.norm2", b)
            self._conv_t("enh.up.conv", b, eb, 4)
            self._norm("enh.up.norm", eb)
            self._conv("enh.out.conv", cfg.out_channels, eb, 7, zero=True)

    def _resblock(self, prefix, h):
        r = self.conv(f"{prefix}.conv1", h, 1, 1)
        r = ad.relu(self.norm(f"{prefix}.norm1", r))
        r = self.conv(f"{prefix}.conv2", r, 1, 1)
        r = self.norm(f"{prefix}.norm2", r)
        return ad.add(h, r)

    def _check_dims(self, x: Tensor):
        h, w = x.data.shape[2], x.data.shape[3]
        d = self.cfg.divisor
        if h % d or w % d:
            raise ValueError(f"input H,W={h},{w} must be divisible by {d}")

    def features(self, x: Tensor) -> Tensor:
        """Global trunk up to (but not including) the output conv."""
        h = ad.relu(self.norm("enc.norm", self.conv("enc.conv", x, 1, 3)))
        for i in range(self.cfg.n_downsample):
            h = ad.relu(self.norm(f"down{i}.norm", self.conv(f"down{i}.conv", h, 2, 1)))
        for j in range(self.cfg.n_resblocks):
            h = self._resblock(f"res{j}", h)
        for i in range(self.cfg.n_downsample):
            h = ad.relu(self.norm(f"up{i}.norm", self.conv_t(f"up{i}.conv", h)))
        return h

    def __call__(self, x: Tensor) -> Tensor:
        self._check_dims(x)
        if not self.cfg.n_enhancers:
            return ad.tanh(self.conv("out.conv", self.features(x), 1, 3))
        f = self.features(ad.avg_pool2(x))
        e = ad.relu(self.norm("enh.enc.norm", self.conv("enh.enc.conv", x, 1, 3)))
        e = ad.relu(self.norm("enh.down.norm", self.conv("enh.down.conv", e, 2, 1)))
        h = ad.add(e, f)
        for j in range(self.cfg.n_resblocks):
            h = self._resblock(f"enh.res{j}", h)
        h = ad.relu(self.norm("enh.up.norm", self.conv_t("enh.up.conv", h)))
        return ad.tanh(self.conv("enh.out.conv", h, 1, 3))


class PatchDiscriminator(_ParamBag):
    """Three strided 4x4 convs with leaky relu, then a 1x1 conv to logits.

    An (N, 2, H, W) input maps to an (N, 1, H/8, W/8) patch logit grid.
    """

    def __init__(self, in_channels: int = 2, base_channels: int = 16, seed: int = 0, dtype=np.float32):
        super().__init__(seed, dtype)
        self.in_channels = in_channels
        self.base_channels = base_channels
        ch = in_channels
        for i in range(3):
            cout = base_channels * (2**i)
            self._conv(f"conv{i}", cout, ch, 4)
            ch = cout
        self._conv("out", 1, ch, 1, zero=True)

    def __call__(self, t: Tensor) -> Tensor:
        h = t
        for i in range(3):
            h = ad.leaky_relu(self.conv(f"conv{i}", h, 2, 1))
        return self.conv("out", h, 1, 0)


class MultiScaleDiscriminator:
    """Identical patch discriminators for pyramid scales 1, 1/2, 1/4."""

    def __init__(self, in_channels: int = 2, base_channels: int = 16, n_scales: int = 3,
                 seed: int = 0, dtype=np.float32):
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.scales = [
            PatchDiscriminator(in_channels, base_channels, seed=seed + i, dtype=dtype)
            for i in range(n_scales)
        ]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, d in enumerate(self.scales):
            for k, p in d.parameters().items():
                out[f"d{i}.{k}"] = p
        return out

    def n_parameters(self) -> int:
        return sum(d.n_parameters() for d in self.scales)

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            arr = arrays[k]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)


def build_generator(cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0, dtype=np.float32) -> Generator:
    return Generator(cfg, seed=seed, dtype=dtype)


def build_discriminators(in_channels: int = 2, base_channels: int = 16, seed: int = 0,
                         dtype=np.float32) -> MultiScaleDiscriminator:
    return MultiScaleDiscriminator(in_channels, base_channels, seed=seed, dtype=dtype)


def generator_forward(gen: Generator, x: Tensor) -> Tensor:
    return gen(x)


def pyramid(t: Tensor) -> list[Tensor]:
    """[full, half, quarter] resolution via repeated 2x2 mean pooling."""
    half = ad.avg_pool2(t)
    return [t, half, ad.avg_pool2(half)]


def discriminator_forward(disc: PatchDiscriminator, x: Tensor, y: Tensor) -> Tensor:
    """Patch logits for candidate y under condition x (channel concat)."""
    return disc(ad.concat_channels(x, y))


def _real_fake_terms(logits_real: Tensor, logits_fake: Tensor, variant: str) -> Tensor:
    if variant == "vanilla":
        return ad.add(ad.bce_with_logits(logits_real, 1.0), ad.bce_with_logits(logits_fake, 0.0))
    if variant == "least_squares":
        return ad.add(ad.mse_to(logits_real, 1.0), ad.mse_to(logits_fake, 0.0))
    raise ValueError(f"unknown loss variant {variant!r}")


def loss_discriminator(gen: Generator, discs: MultiScaleDiscriminator, x: Tensor, y: Tensor,
                       variant: str = "vanilla", fake: Tensor | None = None) -> Tensor:
    """Sum over scales of real + fake classification losses.

    The generator output is treated as a constant: no gradient reaches
    the generator from this loss.
    """
    if fake is None:
        with ad.paused():
            fake = gen(x)
    fake = ad.detach(fake)
    xs, ys, fs = pyramid(x), pyramid(y), pyramid(fake)
    total = None
    for d, xi, yi, fi in zip(discs.scales, xs, ys, fs):
        term = _real_fake_terms(
            discriminator_forward(d, xi, yi), discriminator_forward(d, xi, fi), variant
        )
        total = term if total is None else ad.add(total, term)
    return total


class GeneratorLoss(NamedTuple):
    total: Tensor
    adversarial: float
    l1: float


def loss_generator(gen: Generator, discs: MultiScaleDiscriminator, x: Tensor, y: Tensor,
                   lambda_l1: float = 0.0, variant: str = "vanilla",
                   saturating: bool = False, fake: Tensor | None = None) -> GeneratorLoss:
    """Adversarial term summed over scales plus optional L1 to the target.

    Default is the non-saturating direction (maximize log D on fakes);
    saturating=True uses the literal minimize-log(1-D) form instead. No
    gradient reaches the discriminators from this loss.
    """
    if fake is None:
        fake = gen(x)
    with ad.frozen(discs.parameters().values()):
        xs, fs = pyramid(x), pyramid(fake)
        adv = None
        for d, xi, fi in zip(discs.scales, xs, fs):
            logits = discriminator_forward(d, xi, fi)
            if variant == "least_squares":
                term = ad.mse_to(logits, 1.0)
            elif variant == "vanilla":
                if saturating:
                    term = ad.scale(ad.bce_with_logits(logits, 0.0), -1.0)
                else:
                    term = ad.bce_with_logits(logits, 1.0)
            else:
                raise ValueError(f"unknown loss variant {variant!r}")
            adv = term if adv is None else ad.add(adv, term)
    l1 = ad.l1_loss(fake, y)
    total = ad.add(adv, ad.scale(l1, lambda_l1)) if lambda_l1 else adv
    return GeneratorLoss(total=total, adversarial=float(adv.data), l1=float(l1.data))
