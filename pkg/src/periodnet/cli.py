"""``periodnet`` command line: train, synth, analyze, eval, make-fixture."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import excitation as ex
from . import tensorcore as tc
from .checkpoint import Checkpoint, load_checkpoint
from .errors import DataError, NumericError
from .features import (FeatureTrack, NormStats, apply_normalizer, fit_normalizer, load_features,
                       load_stats, save_features, save_stats, upsample_frames)
from .losses import STFTLossConfig, mr_stft_terms
from .nets import VARIANTS, PeriodNetModel, periodnet_forward
from .training import TrainConfig, TrainSchedule, align_wave, model_from_checkpoint, prepare_corpus, train
from .wavio import WavClip, read_wav, write_wav

log = logging.getLogger("periodnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPEC_FFT, SPEC_HOP = 2048, 240
# the 2000-iteration fixture run needs a faster step than the 1e-4 / 5e-5 library defaults
DESK_G_LR, DESK_D_LR = 1e-3, 5e-4


class UsageError(Exception):
    pass


# -- config --------------------------------------------------------------------


def _resolutions(text: str) -> tuple:
    out = []
    for item in text.replace(",", " ").split():
        parts = item.split("/")
        if len(parts) != 3:
            raise UsageError(f"resolution {item!r} must look like fft/hop/win")
        out.append(tuple(int(p) for p in parts))
    return tuple(out)


@dataclass
class TrainJob:
    cfg: TrainConfig
    pairs: list
    out_dir: Path
    stats_path: Path | None


def parse_train_config(path) -> TrainJob:
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not cp.read(path, encoding="utf-8"):
        raise DataError(f"cannot read config {path}")
    base = path.parent

    def rel(p):
        p = Path(p.strip())
        return p if p.is_absolute() else base / p

    if not cp.has_option("data", "pairs"):
        raise UsageError("config needs [data] pairs = <wav> <features> lines")
    pairs = []
    for line in cp.get("data", "pairs").strip().splitlines():
        if not line.strip():
            continue
        bits = line.split()
        if len(bits) != 2:
            raise UsageError(f"pair line {line!r} must hold a wav path and a feature path")
        pairs.append((rel(bits[0]), rel(bits[1])))
    out_dir = rel(cp.get("data", "out_dir", fallback="run"))
    stats_path = rel(cp.get("data", "stats")) if cp.has_option("data", "stats") else None

    variant = cp.get("model", "variant", fallback="PM1")
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    d = TrainConfig()
    ds = d.schedule
    try:
        sched = TrainSchedule(
            total_iters=cp.getint("schedule", "total_iters", fallback=ds.total_iters),
            d_frozen_iters=cp.getint("schedule", "d_frozen_iters", fallback=ds.d_frozen_iters),
            batch_size=cp.getint("schedule", "batch_size", fallback=ds.batch_size),
            crop_samples=cp.getint("schedule", "crop_samples", fallback=ds.crop_samples),
            seed=cp.getint("schedule", "seed", fallback=ds.seed))
        extra = cp.get("schedule", "extra_checkpoints", fallback="").replace(",", " ").split()
        cfg = TrainConfig(
            variant=variant,
            profile=cp.get("model", "profile", fallback=d.profile),
            schedule=sched,
            sample_rate=cp.getint("data", "sample_rate", fallback=d.sample_rate),
            g_lr=cp.getfloat("optim", "g_lr", fallback=d.g_lr),
            d_lr=cp.getfloat("optim", "d_lr", fallback=d.d_lr),
            betas=(cp.getfloat("optim", "beta1", fallback=d.betas[0]),
                   cp.getfloat("optim", "beta2", fallback=d.betas[1])),
            eps_opt=cp.getfloat("optim", "eps", fallback=d.eps_opt),
            lambda_adv=cp.getfloat("loss", "lambda_adv", fallback=d.lambda_adv),
            resolutions=(_resolutions(cp.get("loss", "resolutions")) if cp.has_option("loss", "resolutions")
                         else d.resolutions),
            sine_amplitude=cp.getfloat("excitation", "sine_amplitude", fallback=d.sine_amplitude),
            vuv_window_ms=cp.getfloat("excitation", "vuv_window_ms", fallback=d.vuv_window_ms),
            checkpoint_interval=cp.getint("schedule", "checkpoint_interval", fallback=d.checkpoint_interval),
            extra_checkpoints=tuple(int(x) for x in extra))
    except ValueError as e:
        raise UsageError(f"{path}: {e}") from e
    return TrainJob(cfg, pairs, out_dir, stats_path)


def write_train_config(path, pairs, out_dir, variant="PM1", profile="desk", total_iters=2000,
                       d_frozen_iters=200, crop_samples=8192, seed=0, extra_checkpoints=(),
                       g_lr=None, d_lr=None) -> None:
    cp = configparser.ConfigParser()
    cp["data"] = {"pairs": "\n" + "\n".join(f"{w} {f}" for w, f in pairs), "out_dir": str(out_dir)}
    cp["model"] = {"variant": variant, "profile": profile}
    cp["schedule"] = {"total_iters": str(total_iters), "d_frozen_iters": str(d_frozen_iters),
                      "batch_size": "1", "crop_samples": str(crop_samples), "seed": str(seed),
                      "checkpoint_interval": "500",
                      "extra_checkpoints": " ".join(str(i) for i in extra_checkpoints)}
    optim = {k: repr(v) for k, v in (("g_lr", g_lr), ("d_lr", d_lr)) if v is not None}
    if optim:
        cp["optim"] = optim
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


# -- synthesis -----------------------------------------------------------------


@dataclass
class Synthesis:
    sum: np.ndarray
    periodic: np.ndarray | None
    aperiodic: np.ndarray | None
    vuv: np.ndarray          # per sample, binary
    sample_rate: int


def synthesize(model: PeriodNetModel, stats: NormStats, track: FeatureTrack, f0_scale: float = 1.0,
               seed: int = 0, sample_rate: int = 48000, sine_amplitude: float = ex.SINE_AMPLITUDE,
               vuv_window_ms: float = ex.VUV_WINDOW_MS) -> Synthesis:
    """Sine from the (scaled) F0 with zero initial phase, seeded noise, graph-free forward."""
    if track.dim != 77:
        raise DataError(f"synthesis needs 77-dim features, got {track.dim}")
    contour = ex.scale_f0(track.contour(), f0_scale, sample_rate)
    if f0_scale != 1.0:
        track = track.with_log_f0_shift(math.log(f0_scale))
    vuv = ex.upsample_vuv(contour, sample_rate)
    gate = ex.smooth_vuv(vuv, vuv_window_ms, sample_rate)
    sine = ex.gen_sine(ex.upsample_f0(contour, sample_rate), gate, sample_rate, sine_amplitude, 0.0)
    noise = ex.gen_noise(len(sine), seed)
    cond = upsample_frames(apply_normalizer(track, stats), sample_rate).samples
    dt = np.float32
    out = periodnet_forward(model, cond.astype(dt), sine.astype(dt), noise.astype(dt), gate.astype(dt))

    def flat(t):
        return None if t is None else t.data.reshape(-1).astype(np.float64)

    wave = flat(out.sum)
    if not np.all(np.isfinite(wave)):
        raise NumericError("synthesized waveform contains NaN or Inf")
    return Synthesis(wave, flat(out.periodic), flat(out.aperiodic), vuv, sample_rate)


def _load_model(ckpt_path):
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.stats is None:
        raise DataError(f"{ckpt_path}: checkpoint carries no normalizer statistics")
    train_cfg = ckpt.config.get("train", {})
    return ckpt, model_from_checkpoint(ckpt), int(train_cfg.get("sample_rate", 48000))


def _synth_kwargs(ckpt: Checkpoint) -> dict:
    t = ckpt.config.get("train", {})
    return {"sine_amplitude": t.get("sine_amplitude", ex.SINE_AMPLITUDE),
            "vuv_window_ms": t.get("vuv_window_ms", ex.VUV_WINDOW_MS)}


def spectrogram(wave: np.ndarray, fft_size: int = SPEC_FFT, hop: int = SPEC_HOP) -> np.ndarray:
    """Magnitude spectrogram, rows = frequency bins, columns = frames."""
    return tc.stft_magnitude(tc.Tensor(np.asarray(wave, dtype=np.float64)), fft_size, hop, fft_size).data


def write_pgm(path, mag: np.ndarray, floor_db: float = -80.0) -> None:
    """8-bit grayscale log-magnitude image, low frequencies at the bottom."""
    db = 20.0 * np.log10(np.maximum(mag, 1e-12))
    db = np.clip(db - db.max(), floor_db, 0.0)
    img = np.round(255.0 * (db - floor_db) / -floor_db).astype(np.uint8)[::-1]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def region_energy(wave: np.ndarray, vuv: np.ndarray) -> dict:
    e = np.asarray(wave, dtype=np.float64) ** 2
    voiced = float(e[vuv > 0].sum())
    unvoiced = float(e[vuv <= 0].sum())
    total = voiced + unvoiced
    return {"voiced": voiced, "unvoiced": unvoiced,
            "voiced_fraction": voiced / total if total > 0 else 0.0}


# -- commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    job = parse_train_config(args.config)
    cfg = job.cfg
    raw = []
    for wav_path, feat_path in job.pairs:
        clip = read_wav(wav_path)
        if clip.sample_rate != cfg.sample_rate:
            raise DataError(f"{wav_path}: {clip.sample_rate} Hz, config expects {cfg.sample_rate}")
        track = load_features(feat_path)
        raw.append((align_wave(clip.samples, track.n_frames, cfg.hop, str(wav_path)), track))
    if job.stats_path is not None and job.stats_path.exists():
        stats = load_stats(job.stats_path)
    else:
        stats = fit_normalizer([t for _, t in raw])
        if job.stats_path is not None:
            save_stats(job.stats_path, stats)
    corpus = prepare_corpus(raw, stats, cfg)
    resume = args.resume
    if resume == "auto":
        latest = job.out_dir / "latest.pnck"
        resume = latest if latest.exists() else None
    ckpt = train(cfg, corpus, job.out_dir, stats, resume=resume)
    print(f"trained {cfg.variant} to iteration {ckpt.iteration}; checkpoints in {job.out_dir}")
    return EXIT_OK


def _synth_one(model, ckpt, sr, feat_path, out_path, f0_scale, seed):
    syn = synthesize(model, ckpt.stats, load_features(feat_path), f0_scale, seed, sr, **_synth_kwargs(ckpt))
    write_wav(out_path, WavClip(syn.sum, sr))
    return out_path


def cmd_synth(args) -> int:
    ckpt, model, sr = _load_model(args.checkpoint)
    feats, out = Path(args.features), Path(args.out)
    if feats.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        jobs = sorted(feats.glob("*.pnft"))
        workers = max(1, min(int(os.environ.get("PERIODNET_THREADS", os.cpu_count() or 1)), len(jobs) or 1))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_synth_one, model, ckpt, sr, f, out / (f.stem + ".wav"), args.f0_scale, args.seed)
                    for f in jobs]
            for fut in futs:
                print(fut.result())
    else:
        print(_synth_one(model, ckpt, sr, feats, out, args.f0_scale, args.seed))
    return EXIT_OK


def cmd_analyze(args) -> int:
    ckpt, model, sr = _load_model(args.checkpoint)
    if not model.has_components:
        raise UsageError(f"{model.variant} has no periodic/aperiodic components; analyze needs PM1, PM2 or SM")
    syn = synthesize(model, ckpt.stats, load_features(args.features), args.f0_scale, args.seed, sr,
                     **_synth_kwargs(ckpt))
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    for name, wave in (("periodic", syn.periodic), ("aperiodic", syn.aperiodic), ("sum", syn.sum)):
        mag = spectrogram(wave)
        np.savetxt(out / f"{name}.csv", mag, fmt="%.7e", delimiter=",")
        if args.pgm:
            write_pgm(out / f"{name}.pgm", mag)
        if args.wav:
            write_wav(out / f"{name}.wav", WavClip(wave, sr))
        print(out / f"{name}.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt, model, sr = _load_model(args.checkpoint)
    track = load_features(args.features)
    syn = synthesize(model, ckpt.stats, track, 1.0, args.seed, sr, **_synth_kwargs(ckpt))
    ref = read_wav(args.reference)
    if ref.sample_rate != sr:
        raise DataError(f"{args.reference}: {ref.sample_rate} Hz, model runs at {sr}")
    hop = ex.hop_size(sr)
    ref_wave = align_wave(ref.samples, track.n_frames, hop, str(args.reference))
    if not np.any(ref_wave):
        raise DataError(f"{args.reference}: reference is silent; spectral convergence is undefined")
    print(json.dumps(evaluate(syn, ref_wave, STFTLossConfig(_ckpt_resolutions(ckpt))), indent=2))
    return EXIT_OK


def _ckpt_resolutions(ckpt: Checkpoint) -> tuple:
    res = ckpt.config.get("train", {}).get("resolutions")
    return tuple(tuple(r) for r in res) if res else STFTLossConfig().resolutions


def evaluate(syn: Synthesis, reference: np.ndarray, cfg: STFTLossConfig = STFTLossConfig()) -> dict:
    terms = mr_stft_terms(tc.Tensor(syn.sum), tc.Tensor(np.asarray(reference, dtype=np.float64)), cfg)
    per = [{"resolution": list(r), "spectral_convergence": float(sc.data), "log_magnitude": float(lm.data)}
           for r, (sc, lm) in zip(cfg.resolutions, terms)]
    mr = sum(p["spectral_convergence"] + p["log_magnitude"] for p in per) / len(per)
    return {"mr_stft": mr, "resolutions": per,
            "energy": {"generated": region_energy(syn.sum, syn.vuv),
                       "reference": region_energy(reference, syn.vuv)}}


def cmd_make_fixture(args) -> int:
    from .fixture import make_fixture

    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    fx = make_fixture(args.seed)
    write_wav(out / "fixture.wav", WavClip(fx.wave, fx.sample_rate))
    save_features(out / "fixture.pnft", fx.track)
    write_train_config(out / "train.ini", [("fixture.wav", "fixture.pnft")], "run", extra_checkpoints=(10,),
                       g_lr=DESK_G_LR, d_lr=DESK_D_LR)
    print(out)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="periodnet", description="PeriodNet vocoder: train, synthesize, analyze.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from an INI config")
    t.add_argument("config")
    t.add_argument("--resume", nargs="?", const="auto", default=None,
                   help="checkpoint to resume from (default: <out_dir>/latest.pnck)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="synthesize a waveform (or a directory of them)")
    s.add_argument("checkpoint")
    s.add_argument("features")
    s.add_argument("out")
    s.add_argument("--f0-scale", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("analyze", help="write periodic/aperiodic/sum spectrograms")
    a.add_argument("checkpoint")
    a.add_argument("features")
    a.add_argument("outdir")
    a.add_argument("--f0-scale", type=float, default=1.0)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--pgm", action="store_true", help="also write grayscale PGM images")
    a.add_argument("--wav", action="store_true", help="also write component waveforms")
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("eval", help="objective metrics against a reference recording")
    e.add_argument("checkpoint")
    e.add_argument("features")
    e.add_argument("reference")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("make-fixture", help="write the synthetic 2 s training fixture and a desk config")
    f.add_argument("outdir")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_make_fixture)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"periodnet: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"periodnet: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"periodnet: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"periodnet: invalid argument: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
