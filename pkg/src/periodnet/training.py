"""RAdam, batching and the two-phase GAN schedule."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import excitation as ex
from .checkpoint import Checkpoint, RAdamState, load_checkpoint, save_checkpoint
from .errors import DataError, NumericError
from .features import FeatureTrack, NormStats, apply_normalizer, upsample_frames
from .losses import (DEFAULT_RESOLUTIONS, LAMBDA_ADV, ObjectiveWeights, STFTLossConfig,
                     adversarial_d_loss, generator_objective)
from .nets import (DiscriminatorBank, DiscriminatorConfig, PeriodNetModel, discriminate,
                   discriminator_config, model_configs, model_from_configs, periodnet_forward)
from .tensorcore import Graph

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "stft_loss", "adv_g", "adv_d", "total")


def radam_step(params: dict, grads: dict | None, state: RAdamState) -> None:
    """One rectified-Adam update, in place on ``params`` (name -> Tensor)."""
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name, g in grads.items():
        if g is None:
            raise NumericError(f"parameter {name} has no gradient")
        bad = int(g.size - np.count_nonzero(np.isfinite(g)))
        if bad:
            raise NumericError(f"non-finite gradient for {name}: {bad} of {g.size} entries "
                               f"(step {state.t + 1})")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    b2t = b2 ** t
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    bias1 = 1.0 - b1 ** t
    rect = None
    if rho_t > 4.0:
        rect = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                         / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bias1
        if rect is None:
            p.data -= state.lr * m_hat
        else:
            p.data -= (state.lr * rect) * m_hat / (np.sqrt(v / (1.0 - b2t)) + state.eps)


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class TrainSchedule:
    total_iters: int = 2000
    d_frozen_iters: int = 200
    batch_size: int = 1
    crop_samples: int = 16384
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.d_frozen_iters <= self.total_iters:
            raise ValueError("need 0 <= d_frozen_iters <= total_iters")
        if self.batch_size < 1 or self.crop_samples < 1:
            raise ValueError("batch_size and crop_samples must be positive")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "PM1"
    profile: str = "full"
    schedule: TrainSchedule = TrainSchedule()
    sample_rate: int = 48000
    frame_shift: float = ex.FRAME_SHIFT
    g_lr: float = 1e-4
    d_lr: float = 5e-5
    betas: tuple = (0.9, 0.999)
    eps_opt: float = 1e-8
    lambda_adv: float = LAMBDA_ADV
    resolutions: tuple = DEFAULT_RESOLUTIONS
    sine_amplitude: float = ex.SINE_AMPLITUDE
    vuv_window_ms: float = ex.VUV_WINDOW_MS
    checkpoint_interval: int = 500
    extra_checkpoints: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["resolutions"] = [list(r) for r in self.resolutions]
        d["extra_checkpoints"] = list(self.extra_checkpoints)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "schedule" in kw and isinstance(kw["schedule"], dict):
            kw["schedule"] = TrainSchedule(**kw["schedule"])
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        if "resolutions" in kw:
            kw["resolutions"] = tuple(tuple(r) for r in kw["resolutions"])
        if "extra_checkpoints" in kw:
            kw["extra_checkpoints"] = tuple(kw["extra_checkpoints"])
        return cls(**kw)

    @property
    def hop(self) -> int:
        return ex.hop_size(self.sample_rate, self.frame_shift)

    def loss_config(self) -> STFTLossConfig:
        return STFTLossConfig(self.resolutions)


# -- corpus and batches --------------------------------------------------------


@dataclass
class Utterance:
    wave: np.ndarray
    features: FeatureTrack  # normalized
    sine: np.ndarray
    vuv: np.ndarray


@dataclass
class Batch:
    wave: np.ndarray   # (B, T)
    sine: np.ndarray
    noise: np.ndarray
    vuv: np.ndarray
    cond: np.ndarray   # (B, C, T)
    starts: list = field(default_factory=list)


def align_wave(wave: np.ndarray, n_frames: int, hop: int, name: str = "waveform") -> np.ndarray:
    """Trim or zero-pad to ``n_frames * hop``; more than one frame of mismatch is an error."""
    want = n_frames * hop
    if abs(len(wave) - want) > hop:
        raise DataError(f"{name}: {len(wave)} samples but features imply {want} "
                        f"({n_frames} frames x {hop}); mismatch exceeds one frame")
    if len(wave) >= want:
        return wave[:want]
    return np.pad(wave, (0, want - len(wave)))


def prepare_corpus(pairs, stats: NormStats, cfg: TrainConfig) -> list[Utterance]:
    """``pairs`` is a sequence of (waveform, raw FeatureTrack)."""
    corpus = []
    for idx, (wave, track) in enumerate(pairs):
        wave = align_wave(np.asarray(wave, dtype=np.float32), track.n_frames, cfg.hop, f"utterance {idx}")
        contour = track.contour()
        phase = np.random.default_rng([cfg.schedule.seed, 0x5E, idx]).uniform(0.0, 2.0 * np.pi)
        vuv = ex.smooth_vuv(ex.upsample_vuv(contour, cfg.sample_rate), cfg.vuv_window_ms, cfg.sample_rate)
        sine = ex.gen_sine(ex.upsample_f0(contour, cfg.sample_rate), vuv, cfg.sample_rate,
                           cfg.sine_amplitude, phase)
        corpus.append(Utterance(wave, apply_normalizer(track, stats), sine.astype(np.float32),
                                vuv.astype(np.float32)))
    return corpus


def sample_batch(corpus: list[Utterance], schedule: TrainSchedule, rng, sample_rate: int = 48000) -> Batch:
    crop = schedule.crop_samples
    waves, sines, noises, vuvs, conds, starts = [], [], [], [], [], []
    for _ in range(schedule.batch_size):
        u = corpus[int(rng.integers(len(corpus)))]
        hop = ex.hop_size(sample_rate, u.features.frame_shift)
        if len(u.wave) < crop:
            raise DataError(f"utterance of {len(u.wave)} samples shorter than crop {crop}")
        start = int(rng.integers((len(u.wave) - crop) // hop + 1)) * hop
        sl = slice(start, start + crop)
        waves.append(u.wave[sl])
        sines.append(u.sine[sl])
        vuvs.append(u.vuv[sl])
        noises.append(rng.standard_normal(crop).astype(np.float32))
        conds.append(upsample_frames(u.features, sample_rate, start=start, length=crop).samples)
        starts.append(start)
    return Batch(np.stack(waves), np.stack(sines), np.stack(noises), np.stack(vuvs), np.stack(conds), starts)


# -- steps ---------------------------------------------------------------------


@contextlib.contextmanager
def frozen(tensors):
    tensors = list(tensors)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, s in zip(tensors, saved):
            t.requires_grad = s


def train_step(model: PeriodNetModel, bank: DiscriminatorBank, batch: Batch, weights: ObjectiveWeights,
               loss_cfg: STFTLossConfig, opt_g: RAdamState, opt_d: RAdamState, phase: str) -> dict:
    """Generator update, then (adversarial phase only) a discriminator update.

    The discriminator is trained on the generator output from before this
    step's generator update.
    """
    if phase not in ("warmup", "adversarial"):
        raise ValueError(f"unknown phase {phase!r}")
    adversarial = phase == "adversarial"
    gen_params = dict(model.named_parameters())
    disc_params = dict(bank.named_parameters())
    g_weights = weights if adversarial else ObjectiveWeights(0.0)

    with frozen(disc_params.values()):
        with Graph() as graph:
            out = periodnet_forward(model, batch.cond, batch.sine, batch.noise, batch.vuv)
            gl = generator_objective(out, batch.wave, bank if adversarial else None, g_weights, loss_cfg)
        graph.backward(gl.total, inputs=gen_params.values())
    radam_step(gen_params, None, opt_g)
    losses = {"stft_loss": float(gl.stft.data), "adv_g": None, "adv_d": None, "total": float(gl.total.data)}
    if not adversarial:
        return losses

    losses["adv_g"] = float(gl.adv.data)
    fake = out.sum.data
    with Graph() as graph:
        d_loss = adversarial_d_loss(discriminate(bank, batch.wave), discriminate(bank, fake))
    graph.backward(d_loss, inputs=disc_params.values())
    radam_step(disc_params, None, opt_d)
    losses["adv_d"] = float(d_loss.data)
    return losses


# -- model/checkpoint plumbing -------------------------------------------------


def build_training_state(cfg: TrainConfig, cond_channels: int = 77):
    seed = cfg.schedule.seed
    model = model_from_configs(cfg.variant, model_configs(cfg.variant, cfg.profile, cond_channels), seed)
    bank = DiscriminatorBank(discriminator_config(cfg.profile), [seed, 0xD])
    b1, b2 = cfg.betas
    opt_g = RAdamState(cfg.g_lr, b1, b2, cfg.eps_opt)
    opt_d = RAdamState(cfg.d_lr, b1, b2, cfg.eps_opt)
    return model, bank, opt_g, opt_d


def make_checkpoint(cfg: TrainConfig, model, bank, opt_g, opt_d, iteration: int, stats) -> Checkpoint:
    params = {f"generator.{n}": p.data.copy() for n, p in model.named_parameters()}
    params.update({f"discriminator.{n}": p.data.copy() for n, p in bank.named_parameters()})

    def snap(st):
        return RAdamState(st.lr, st.beta1, st.beta2, st.eps, st.t,
                          {k: a.copy() for k, a in st.m.items()}, {k: a.copy() for k, a in st.v.items()})

    config = {"train": cfg.to_dict(), "model": model.config(), "discriminator": asdict(bank.cfg)}
    config["discriminator"]["dilations"] = list(bank.cfg.dilations)
    return Checkpoint(model.variant, iteration, params,
                      {"generator": snap(opt_g), "discriminator": snap(opt_d)}, stats, config)


def _load_params(named, params: dict, prefix: str) -> None:
    for name, p in named:
        key = prefix + name
        if key not in params:
            raise DataError(f"checkpoint lacks parameter {key}")
        arr = params[key]
        if arr.shape != p.shape:
            raise DataError(f"parameter {key}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)


def model_from_checkpoint(ckpt: Checkpoint) -> PeriodNetModel:
    mcfg = dict(ckpt.config["model"])
    variant = mcfg.pop("variant")
    model = model_from_configs(variant, mcfg)
    _load_params(model.named_parameters(), ckpt.params, "generator.")
    return model


def restore_training_state(ckpt: Checkpoint):
    cfg = TrainConfig.from_dict(ckpt.config["train"])
    model = model_from_checkpoint(ckpt)
    dcfg = dict(ckpt.config["discriminator"])
    dcfg["dilations"] = tuple(dcfg["dilations"])
    bank = DiscriminatorBank(DiscriminatorConfig(**dcfg))
    _load_params(bank.named_parameters(), ckpt.params, "discriminator.")

    def thaw(st):
        return RAdamState(st.lr, st.beta1, st.beta2, st.eps, st.t,
                          {k: a.copy() for k, a in st.m.items()}, {k: a.copy() for k, a in st.v.items()})

    return cfg, model, bank, thaw(ckpt.optimizers["generator"]), thaw(ckpt.optimizers["discriminator"])


# -- loop ----------------------------------------------------------------------


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def train(cfg: TrainConfig, corpus: list[Utterance], out_dir, stats: NormStats | None = None,
          resume: Checkpoint | str | Path | None = None, log_name: str = "loss.csv",
          until: int | None = None) -> Checkpoint:
    """Run the schedule from scratch or from ``resume``; returns the last checkpoint.

    ``until`` stops early (after that iteration) without changing the
    schedule, which is how interrupted runs are produced in tests.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sched = cfg.schedule
    crop_floor = cfg.loss_config().max_fft
    if sched.crop_samples < crop_floor:
        raise ValueError(f"crop of {sched.crop_samples} samples shorter than the largest FFT {crop_floor}")

    if resume is not None:
        if not isinstance(resume, Checkpoint):
            resume = load_checkpoint(resume)
        _, model, bank, opt_g, opt_d = restore_training_state(resume)
        start = resume.iteration
        if stats is None:
            stats = resume.stats
    else:
        model, bank, opt_g, opt_d = build_training_state(cfg)
        start = 0
    rf = max(g.cfg.receptive_field for g in model.generators().values())
    if sched.crop_samples < rf:
        log.warning("crop of %d samples is shorter than the generator receptive field %d",
                    sched.crop_samples, rf)

    weights = ObjectiveWeights(cfg.lambda_adv)
    loss_cfg = cfg.loss_config()
    stop = sched.total_iters if until is None else min(until, sched.total_iters)
    log_path = out_dir / log_name
    fresh = resume is None or not log_path.exists()
    ckpt = make_checkpoint(cfg, model, bank, opt_g, opt_d, start, stats)
    with open(log_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOG_COLUMNS)
        for it in range(start + 1, stop + 1):
            rng = np.random.default_rng([sched.seed, it])
            batch = sample_batch(corpus, sched, rng, cfg.sample_rate)
            phase = "warmup" if it <= sched.d_frozen_iters else "adversarial"
            losses = train_step(model, bank, batch, weights, loss_cfg, opt_g, opt_d, phase)
            writer.writerow([it, _fmt(losses["stft_loss"]), _fmt(losses["adv_g"]),
                             _fmt(losses["adv_d"]), _fmt(losses["total"])])
            if it % 50 == 0:
                fh.flush()
                log.info("iter %d %s stft=%.4f total=%.4f", it, phase, losses["stft_loss"], losses["total"])
            if it % cfg.checkpoint_interval == 0 or it in cfg.extra_checkpoints or it == stop:
                ckpt = make_checkpoint(cfg, model, bank, opt_g, opt_d, it, stats)
                save_checkpoint(out_dir / f"ckpt_{it:07d}.pnck", ckpt)
                save_checkpoint(out_dir / "latest.pnck", ckpt)
    return ckpt


def read_loss_log(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "iter" else (float(v) if v != "" else None))
                         for k, v in row.items()})
    return rows
