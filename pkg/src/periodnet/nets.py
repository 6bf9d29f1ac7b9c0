"""Generators, multi-scale discriminators and the six PeriodNet topologies."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ShapeError
from .features import LF0_COL
from .tensorcore import Tensor

VARIANTS = ("BM1", "BM2", "BM3", "PM1", "PM2", "SM")
BASELINES = ("BM1", "BM2", "BM3")
SCALE_FACTORS = (1, 2, 3)

# generator input channels, in concatenation order
_BASELINE_INPUTS = {
    "BM1": ("noise", "vuv"),
    "BM2": ("sine", "vuv"),
    "BM3": ("sine", "noise", "vuv"),
}
_PERIODIC_INPUTS = ("sine", "vuv")
_APERIODIC_INPUTS = ("noise", "vuv")


class Conv1d:
    """1-D convolution with optional weight normalization (w = g * v / ||v||)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 1, dilation: int = 1,
                 bias: bool = True, weight_norm: bool = True, rng=None, dtype=np.float32):
        rng = np.random.default_rng(rng)
        fan_in = in_channels * kernel
        bound = math.sqrt(6.0 / fan_in)
        v = rng.uniform(-bound, bound, (out_channels, in_channels, kernel))
        self.weight_norm = weight_norm
        self.dilation = dilation
        self.kernel = kernel
        if weight_norm:
            self.v = Tensor(v.astype(dtype), requires_grad=True)
            self.g = Tensor(np.sqrt((v * v).sum(axis=(1, 2))).astype(dtype), requires_grad=True)
        else:
            self.weight = Tensor(v.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def effective_weight(self) -> Tensor:
        return tc.weight_norm(self.v, self.g) if self.weight_norm else self.weight

    def __call__(self, x) -> Tensor:
        return tc.conv1d(x, self.effective_weight(), self.bias, self.dilation, "same")

    def named_parameters(self, prefix: str = ""):
        if self.weight_norm:
            yield prefix + "v", self.v
            yield prefix + "g", self.g
        else:
            yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias

    def convs(self):
        yield self


# -- generator -----------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    n_layers: int = 30
    dilation_cycle: int = 10
    residual_channels: int = 64
    skip_channels: int = 64
    gate_channels: int = 64  # width of each gate half; the dilated conv emits 2x this
    kernel: int = 3
    input_channels: int = 2
    cond_channels: int = 77

    def __post_init__(self):
        if self.n_layers < 1 or self.dilation_cycle < 1:
            raise ValueError("n_layers and dilation_cycle must be positive")
        if self.n_layers > self.dilation_cycle and self.n_layers % self.dilation_cycle:
            raise ValueError(f"{self.n_layers} layers do not split into cycles of {self.dilation_cycle}")
        if self.kernel % 2 == 0:
            raise ValueError("non-causal generator needs an odd kernel")
        if min(self.residual_channels, self.skip_channels, self.gate_channels,
               self.input_channels, self.cond_channels) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def dilations(self) -> list[int]:
        return [2 ** (i % self.dilation_cycle) for i in range(self.n_layers)]

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations)


class ResidualBlock:
    def __init__(self, cfg: GeneratorConfig, dilation: int, rng, dtype):
        gate = cfg.gate_channels
        self.gate_channels = gate
        self.dilated = Conv1d(cfg.residual_channels, 2 * gate, cfg.kernel, dilation, rng=rng, dtype=dtype)
        self.cond = Conv1d(cfg.cond_channels, 2 * gate, 1, bias=False, rng=rng, dtype=dtype)
        self.skip = Conv1d(gate, cfg.skip_channels, 1, rng=rng, dtype=dtype)
        self.out = Conv1d(gate, cfg.residual_channels, 1, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        h = self.dilated(x) + self.cond(cond)
        g = self.gate_channels
        z = tc.gated_activation(h[:, :g], h[:, g:])
        return (x + self.out(z)) * math.sqrt(0.5), self.skip(z)

    def named_parameters(self, prefix: str = ""):
        for name in ("dilated", "cond", "skip", "out"):
            yield from getattr(self, name).named_parameters(f"{prefix}{name}.")

    def convs(self):
        yield from (self.dilated, self.cond, self.skip, self.out)


class Generator:
    """Non-causal WaveNet-style stack: 1x1 in, gated residual blocks, skip sum, 2x(ReLU, 1x1)."""

    def __init__(self, cfg: GeneratorConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.first = Conv1d(cfg.input_channels, cfg.residual_channels, 1, rng=rng, dtype=dtype)
        self.layers = [ResidualBlock(cfg, d, rng, dtype) for d in cfg.dilations]
        self.post1 = Conv1d(cfg.skip_channels, cfg.skip_channels, 1, rng=rng, dtype=dtype)
        self.post2 = Conv1d(cfg.skip_channels, 1, 1, rng=rng, dtype=dtype)

    def __call__(self, inputs, cond) -> Tensor:
        x = tc.as_tensor(inputs)
        c = tc.as_tensor(cond)
        squeeze = x.ndim == 2
        if squeeze:
            x = tc.reshape(x, (1,) + x.shape)
        if c.ndim == 2:
            c = tc.reshape(c, (1,) + c.shape)
        if x.shape[1] != self.cfg.input_channels:
            raise ShapeError(f"generator expects {self.cfg.input_channels} input channels, got {x.shape[1]}")
        if c.shape[1] != self.cfg.cond_channels:
            raise ShapeError(f"generator expects {self.cfg.cond_channels} cond channels, got {c.shape[1]}")
        if x.shape[-1] != c.shape[-1]:
            raise ShapeError(f"input length {x.shape[-1]} != conditioning length {c.shape[-1]}")
        if c.shape[0] != x.shape[0]:
            c = Tensor(np.broadcast_to(c.data, (x.shape[0],) + c.shape[1:]), check=False)
        h = self.first(x)
        skips = None
        for layer in self.layers:
            h, s = layer(h, c)
            skips = s if skips is None else skips + s
        out = tc.relu(skips * math.sqrt(1.0 / len(self.layers)))
        out = self.post2(tc.relu(self.post1(out)))
        return out[0] if squeeze else out

    def named_parameters(self, prefix: str = ""):
        yield from self.first.named_parameters(prefix + "first.")
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}layers.{i}.")
        yield from self.post1.named_parameters(prefix + "post1.")
        yield from self.post2.named_parameters(prefix + "post2.")

    def convs(self):
        yield self.first
        for layer in self.layers:
            yield from layer.convs()
        yield from (self.post1, self.post2)


def build_generator(cfg: GeneratorConfig, seed=0, dtype=np.float32) -> Generator:
    return Generator(cfg, seed, dtype)


def generator_forward(gen: Generator, inputs, cond) -> Tensor:
    return gen(inputs, cond)


# -- discriminator -------------------------------------------------------------


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_layers: int = 10
    kernel: int = 3
    channels: int = 64
    leaky_slope: float = 0.2
    dilations: tuple = field(default=())

    def __post_init__(self):
        if not self.dilations:
            object.__setattr__(self, "dilations", tuple(range(1, self.n_layers + 1)))
        if len(self.dilations) != self.n_layers:
            raise ValueError("one dilation per discriminator layer")
        if self.kernel % 2 == 0 or self.n_layers < 2:
            raise ValueError("discriminator needs an odd kernel and at least two layers")

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations)


class Discriminator:
    def __init__(self, cfg: DiscriminatorConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        widths = [1] + [cfg.channels] * (cfg.n_layers - 1) + [1]
        self.layers = [Conv1d(widths[i], widths[i + 1], cfg.kernel, d, rng=rng, dtype=dtype)
                       for i, d in enumerate(cfg.dilations)]

    def __call__(self, wave: Tensor) -> Tensor:
        x = wave
        for conv in self.layers[:-1]:
            x = tc.leaky_relu(conv(x), self.cfg.leaky_slope)
        return self.layers[-1](x)

    def named_parameters(self, prefix: str = ""):
        for i, conv in enumerate(self.layers):
            yield from conv.named_parameters(f"{prefix}layers.{i}.")

    def convs(self):
        yield from self.layers


class DiscriminatorBank:
    """Identically configured discriminators fed average-pooled copies of the waveform."""

    def __init__(self, cfg: DiscriminatorConfig, seed=0, dtype=np.float32, factors=SCALE_FACTORS):
        self.cfg = cfg
        self.factors = tuple(factors)
        self.discriminators = [Discriminator(cfg, [seed, i], dtype) for i in range(len(self.factors))]

    def min_length(self) -> int:
        return max(f * self.cfg.receptive_field for f in self.factors)

    def named_parameters(self, prefix: str = ""):
        for i, d in enumerate(self.discriminators):
            yield from d.named_parameters(f"{prefix}{i}.")

    def convs(self):
        for d in self.discriminators:
            yield from d.convs()


def build_discriminator_bank(cfg: DiscriminatorConfig, seed=0, dtype=np.float32) -> DiscriminatorBank:
    return DiscriminatorBank(cfg, seed, dtype)


def _as_batch_wave(wave) -> Tensor:
    w = tc.as_tensor(wave)
    if w.ndim == 1:
        return tc.reshape(w, (1, 1, w.shape[0]))
    if w.ndim == 2:
        return tc.reshape(w, (w.shape[0], 1, w.shape[1]))
    return w


def discriminate(bank: DiscriminatorBank, wave) -> list[Tensor]:
    """One ``(B, 1, T // factor)`` score map per scale."""
    x = _as_batch_wave(wave)
    T = x.shape[-1]
    scores = []
    for factor, disc in zip(bank.factors, bank.discriminators):
        if T // factor < bank.cfg.receptive_field:
            raise ShapeError(f"waveform of {T} samples too short for scale 1/{factor} "
                             f"(needs {factor * bank.cfg.receptive_field})")
        scores.append(disc(tc.avg_pool1d(x, factor)))
    return scores


# -- PeriodNet topologies ------------------------------------------------------


@dataclass
class PeriodNetOutput:
    sum: Tensor
    periodic: Tensor | None = None
    aperiodic: Tensor | None = None


class PeriodNetModel:
    def __init__(self, variant: str, single: Generator | None = None, periodic: Generator | None = None,
                 aperiodic: Generator | None = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
        self.variant = variant
        self.single = single
        self.periodic = periodic
        self.aperiodic = aperiodic
        self.aperiodic_cond_includes_f0 = variant in ("PM1", "SM")
        self.series_residual = variant == "SM"
        if variant in BASELINES:
            if single is None or periodic is not None or aperiodic is not None:
                raise ValueError(f"{variant} uses exactly one generator")
        elif single is not None or periodic is None or aperiodic is None:
            raise ValueError(f"{variant} needs a periodic and an aperiodic generator")

    @property
    def has_components(self) -> bool:
        return self.variant not in BASELINES

    def generators(self) -> dict[str, Generator]:
        if self.has_components:
            return {"periodic": self.periodic, "aperiodic": self.aperiodic}
        return {"single": self.single}

    def named_parameters(self, prefix: str = ""):
        for name, gen in self.generators().items():
            yield from gen.named_parameters(f"{prefix}{name}.")

    def convs(self):
        for gen in self.generators().values():
            yield from gen.convs()

    def config(self) -> dict:
        return {"variant": self.variant,
                **{name: asdict(gen.cfg) for name, gen in self.generators().items()}}


def _stack_signals(signals: dict, names) -> np.ndarray:
    missing = [n for n in names if signals.get(n) is None]
    if missing:
        raise ValueError(f"missing excitation signal(s): {', '.join(missing)}")
    arrs = [np.asarray(signals[n].data if isinstance(signals[n], Tensor) else signals[n]) for n in names]
    return np.stack(arrs, axis=-2)


def periodnet_forward(model: PeriodNetModel, cond, sine=None, noise=None, vuv=None) -> PeriodNetOutput:
    """Route excitation and conditioning through the variant's generator(s).

    Signals are ``(T,)`` or ``(B, T)``; ``cond`` is the full 77-channel
    conditioning ``(77, T)`` or ``(B, 77, T)``. PM2 strips the log-F0 row
    before its aperiodic generator sees it.
    """
    signals = {"sine": sine, "noise": noise, "vuv": vuv}
    c = cond.samples if hasattr(cond, "samples") else (cond.data if isinstance(cond, Tensor) else cond)
    c = np.asarray(c)
    if model.variant in BASELINES:
        x = _stack_signals(signals, _BASELINE_INPUTS[model.variant])
        out = model.single(Tensor(x, check=False), Tensor(c, check=False))
        return PeriodNetOutput(out)

    x_p = _stack_signals(signals, _PERIODIC_INPUTS)
    periodic = model.periodic(Tensor(x_p, check=False), Tensor(c, check=False))
    c_ap = c if model.aperiodic_cond_includes_f0 else np.delete(c, LF0_COL, axis=-2)
    x_ap = Tensor(_stack_signals(signals, _APERIODIC_INPUTS), check=False)
    if model.series_residual:
        x_ap = tc.concat([x_ap, periodic], axis=-2)
    aperiodic = model.aperiodic(x_ap, Tensor(c_ap, check=False))
    return PeriodNetOutput(periodic + aperiodic, periodic, aperiodic)


def forward_excitation(model: PeriodNetModel, excitation, cond) -> PeriodNetOutput:
    return periodnet_forward(model, cond, excitation.sine, excitation.noise, excitation.vuv_smooth)


# -- profiles ------------------------------------------------------------------

PROFILES = {
    # full-size widths and depths
    "full": {
        "periodic": dict(n_layers=30, dilation_cycle=10, residual_channels=64, skip_channels=64, gate_channels=64),
        "aperiodic": dict(n_layers=10, dilation_cycle=10, residual_channels=64, skip_channels=64, gate_channels=64),
        "discriminator": dict(channels=64),
    },
    # same topology laws, CPU-sized
    "desk": {
        "periodic": dict(n_layers=20, dilation_cycle=10, residual_channels=16, skip_channels=16, gate_channels=16),
        "aperiodic": dict(n_layers=10, dilation_cycle=10, residual_channels=16, skip_channels=16, gate_channels=16),
        "discriminator": dict(channels=16),
    },
}


def model_configs(variant: str, profile: str = "full", cond_channels: int = 77) -> dict[str, GeneratorConfig]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    p = PROFILES[profile]
    if variant in BASELINES:
        n_in = len(_BASELINE_INPUTS[variant])
        return {"single": GeneratorConfig(**p["periodic"], input_channels=n_in, cond_channels=cond_channels)}
    ap_in = 3 if variant == "SM" else 2
    ap_cond = cond_channels - 1 if variant == "PM2" else cond_channels
    return {
        "periodic": GeneratorConfig(**p["periodic"], input_channels=2, cond_channels=cond_channels),
        "aperiodic": GeneratorConfig(**p["aperiodic"], input_channels=ap_in, cond_channels=ap_cond),
    }


def discriminator_config(profile: str = "full") -> DiscriminatorConfig:
    return DiscriminatorConfig(**PROFILES[profile]["discriminator"])


def model_from_configs(variant: str, configs: dict, seed=0, dtype=np.float32) -> PeriodNetModel:
    gens = {name: Generator(cfg if isinstance(cfg, GeneratorConfig) else GeneratorConfig(**cfg),
                            [seed, i], dtype)
            for i, (name, cfg) in enumerate(sorted(configs.items()))}
    return PeriodNetModel(variant, **gens)


def build_model(variant: str, profile: str = "full", seed=0, dtype=np.float32) -> PeriodNetModel:
    return model_from_configs(variant, model_configs(variant, profile), seed, dtype)


def count_parameters(model) -> int:
    return int(sum(p.size for _, p in model.named_parameters()))
