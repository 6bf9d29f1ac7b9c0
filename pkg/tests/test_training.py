import hashlib

import numpy as np
import pytest

from periodnet.checkpoint import (Checkpoint, RAdamState, from_bytes, load_checkpoint, save_checkpoint,
                                  to_bytes)
from periodnet.errors import CorruptionError, DataError, FormatError, NumericError
from periodnet.features import FeatureTrack, NormStats, fit_normalizer
from periodnet.losses import ObjectiveWeights, STFTLossConfig
from periodnet.nets import DiscriminatorBank, DiscriminatorConfig, GeneratorConfig, model_from_configs
from periodnet.tensorcore import Tensor
from periodnet.training import (TrainConfig, TrainSchedule, align_wave, build_training_state,
                                make_checkpoint, model_from_checkpoint, prepare_corpus, radam_step,
                                read_loss_log, restore_training_state, sample_batch, train, train_step)

from oracles import radam_scalar

# -- RAdam ---------------------------------------------------------------------


def _quad_grad(a, c):
    return lambda th: 2 * a * (th - c)


@pytest.mark.parametrize("seed", range(5))
def test_radam_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    theta0 = rng.standard_normal(5)
    a, c = rng.uniform(0.5, 3.0, 5), rng.standard_normal(5)
    grad = _quad_grad(a, c)
    lr = 10 ** rng.uniform(-3, -1)
    want = radam_scalar(theta0, grad, 50, lr=lr)
    p = Tensor(theta0.copy())
    state = RAdamState(lr)
    for t in range(50):
        radam_step({"p": p}, {"p": grad(p.data)}, state)
        assert np.max(np.abs(p.data - want[t])) <= 1e-10
    assert state.t == 50


def test_radam_first_step_is_plain_sgd():
    g = np.array([0.3, -2.0, 5.0])
    p = Tensor(np.zeros(3))
    radam_step({"p": p}, {"p": g}, RAdamState(0.01))
    np.testing.assert_allclose(p.data, -0.01 * g, rtol=1e-15)


def test_radam_rectification_switches_on_after_warmup():
    # with beta2 = 0.999 the variance rectification term first exists at t = 5
    beta2 = 0.999
    rho_inf = 2 / (1 - beta2) - 1
    rho = [rho_inf - 2 * t * beta2 ** t / (1 - beta2 ** t) for t in range(1, 8)]
    assert rho[0] == pytest.approx(1.0)
    assert [r > 4 for r in rho] == [False] * 4 + [True] * 3


def test_radam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.5, -2.0]))
    state = RAdamState(0.1)
    for _ in range(20):
        radam_step({"p": p}, {"p": np.zeros(2)}, state)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_radam_quadratic_bowl_decreases_after_warmup():
    p = Tensor(np.array([3.0]))
    state = RAdamState(0.1)
    traj = []
    for _ in range(200):
        radam_step({"p": p}, {"p": 2 * p.data}, state)
        traj.append(float(p.data[0]))
    np.testing.assert_allclose(traj, radam_scalar([3.0], lambda th: 2 * th, 200, lr=0.1)[:, 0], rtol=0, atol=1e-12)
    mag = np.abs(traj)
    # momentum carries the iterate slightly past the minimum once; until then |theta| falls every step
    cross = int(np.flatnonzero(np.diff(np.sign(traj)) != 0)[0]) + 1
    assert cross > 100
    assert np.all(np.diff(mag[4:cross]) < 0)
    assert mag[cross:].max() < 0.01 * mag[4]
    assert mag[-1] < 1e-3


def test_radam_nan_gradient_aborts_with_name():
    p = Tensor(np.zeros(3))
    state = RAdamState(0.1)
    with pytest.raises(NumericError, match="layer.v"):
        radam_step({"layer.v": p}, {"layer.v": np.array([0.0, np.nan, 1.0])}, state)
    assert state.t == 0 and np.all(p.data == 0)


# -- checkpoint ----------------------------------------------------------------


def _checkpoint(seed=0):
    rng = np.random.default_rng(seed)
    params = {"a.v": rng.standard_normal((2, 3, 3)).astype(np.float32), "a.g": rng.standard_normal(2).astype(np.float32),
              "s": np.float32(rng.standard_normal()).reshape(())}
    opt = RAdamState(1e-4, 0.9, 0.999, 1e-8, 7, {k: v * 0.1 for k, v in params.items()},
                     {k: v * v for k, v in params.items()})
    stats = NormStats(rng.standard_normal(77).astype(np.float32), rng.uniform(0.1, 2, 77).astype(np.float32))
    return Checkpoint("PM2", 123, params, {"generator": opt}, stats, {"note": "x", "n": [1, 2]})


def test_checkpoint_round_trip(tmp_path):
    ck = _checkpoint()
    path = tmp_path / "c.pnck"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.variant == "PM2" and back.iteration == 123 and back.config == ck.config
    for k in ck.params:
        np.testing.assert_array_equal(back.params[k], ck.params[k])
        assert back.params[k].shape == ck.params[k].shape
    st = back.optimizers["generator"]
    assert (st.lr, st.beta1, st.beta2, st.eps, st.t) == (1e-4, 0.9, 0.999, 1e-8, 7)
    np.testing.assert_array_equal(back.stats.std, ck.stats.std)
    save_checkpoint(tmp_path / "d.pnck", back)
    assert path.read_bytes() == (tmp_path / "d.pnck").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_without_stats():
    ck = _checkpoint()
    ck.stats = None
    assert from_bytes(to_bytes(ck)).stats is None


def test_checkpoint_errors(tmp_path):
    data = to_bytes(_checkpoint())
    with pytest.raises(FormatError):
        from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        from_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:])
    for cut in (6, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(CorruptionError):
            from_bytes(data[:cut])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x40
    with pytest.raises(CorruptionError):
        from_bytes(bytes(flipped))


# -- batching ------------------------------------------------------------------


def _track(n=80, seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((n, 77)).astype(np.float32)
    frames[:, 75] = np.log(180.0)
    frames[:, 76] = 1.0
    frames[n // 3: n // 2, 76] = 0.0
    return FeatureTrack(frames)


def _small_cfg(**kw):
    sched = dict(total_iters=4, d_frozen_iters=2, batch_size=2, crop_samples=1024, seed=3)
    sched.update(kw.pop("schedule", {}))
    base = dict(variant="PM1", profile="desk", schedule=TrainSchedule(**sched),
                resolutions=((256, 64, 256), (128, 32, 96)), checkpoint_interval=2)
    base.update(kw)
    return TrainConfig(**base)


def _corpus(cfg, n_utts=2):
    pairs = []
    for i in range(n_utts):
        tr = _track(60 + 10 * i, i)
        wave = np.random.default_rng(10 + i).standard_normal(tr.n_frames * 240) * 0.1
        pairs.append((wave, tr))
    stats = fit_normalizer([t for _, t in pairs])
    return prepare_corpus(pairs, stats, cfg), stats


def test_align_wave():
    w = np.ones(240 * 10 + 100)
    assert len(align_wave(w, 10, 240)) == 2400
    assert len(align_wave(np.ones(2300), 10, 240)) == 2400
    with pytest.raises(DataError):
        align_wave(np.ones(2400 + 241), 10, 240)
    with pytest.raises(DataError):
        align_wave(np.ones(2400 - 241), 10, 240)


def test_sample_batch_alignment_and_determinism():
    cfg = _small_cfg()
    corpus, _ = _corpus(cfg)
    a = sample_batch(corpus, cfg.schedule, np.random.default_rng(5))
    b = sample_batch(corpus, cfg.schedule, np.random.default_rng(5))
    assert a.wave.shape == (2, 1024) and a.cond.shape == (2, 77, 1024)
    assert all(s % 240 == 0 for s in a.starts)
    for k in ("wave", "sine", "noise", "vuv", "cond"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_sample_batch_slices_utterance_consistently():
    cfg = _small_cfg(schedule=dict(batch_size=1))
    corpus, _ = _corpus(cfg, 1)
    b = sample_batch(corpus, cfg.schedule, np.random.default_rng(1))
    s = b.starts[0]
    u = corpus[0]
    np.testing.assert_array_equal(b.sine[0], u.sine[s:s + 1024])
    np.testing.assert_array_equal(b.wave[0], u.wave[s:s + 1024])
    assert np.all(b.sine[0][b.vuv[0] == 0] == 0)


def test_sample_batch_clip_too_short():
    cfg = _small_cfg(schedule=dict(crop_samples=240 * 200))
    corpus, _ = _corpus(cfg, 1)
    with pytest.raises(DataError):
        sample_batch(corpus, cfg.schedule, np.random.default_rng(0))


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(total_iters=10, d_frozen_iters=11)


# -- steps ---------------------------------------------------------------------

TINY_G = dict(n_layers=2, dilation_cycle=2, residual_channels=4, skip_channels=4, gate_channels=4)


def _tiny_state(seed=0):
    model = model_from_configs("PM1", {"periodic": GeneratorConfig(**TINY_G), "aperiodic": GeneratorConfig(**TINY_G)},
                               seed)
    bank = DiscriminatorBank(DiscriminatorConfig(n_layers=3, channels=4), seed)
    return model, bank, RAdamState(1e-3), RAdamState(1e-3)


def _digest(named):
    h = hashlib.sha256()
    for name, p in named:
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def test_warmup_leaves_discriminator_bitwise_unchanged():
    cfg = _small_cfg()
    corpus, _ = _corpus(cfg)
    model, bank, og, od = _tiny_state()
    d_before = _digest(bank.named_parameters())
    g_before = _digest(model.named_parameters())
    for i in range(3):
        batch = sample_batch(corpus, cfg.schedule, np.random.default_rng(i))
        out = train_step(model, bank, batch, ObjectiveWeights(), cfg.loss_config(), og, od, "warmup")
        assert out["adv_g"] is None and out["adv_d"] is None
        assert _digest(bank.named_parameters()) == d_before
    assert od.t == 0 and og.t == 3
    assert _digest(model.named_parameters()) != g_before
    assert all(p.grad is None for _, p in bank.named_parameters())


def test_adversarial_step_updates_both():
    cfg = _small_cfg()
    corpus, _ = _corpus(cfg)
    model, bank, og, od = _tiny_state()
    d_before = _digest(bank.named_parameters())
    g_before = _digest(model.named_parameters())
    batch = sample_batch(corpus, cfg.schedule, np.random.default_rng(0))
    out = train_step(model, bank, batch, ObjectiveWeights(), cfg.loss_config(), og, od, "adversarial")
    assert _digest(bank.named_parameters()) != d_before
    assert _digest(model.named_parameters()) != g_before
    assert out["total"] == pytest.approx(out["stft_loss"] + 4.0 * out["adv_g"], rel=1e-5)
    assert all(p.requires_grad for _, p in bank.named_parameters())
    with pytest.raises(ValueError):
        train_step(model, bank, batch, ObjectiveWeights(), cfg.loss_config(), og, od, "joint")


def test_train_step_deterministic():
    cfg = _small_cfg()
    corpus, _ = _corpus(cfg)
    results = []
    for _ in range(2):
        model, bank, og, od = _tiny_state(1)
        batch = sample_batch(corpus, cfg.schedule, np.random.default_rng(9))
        results.append(train_step(model, bank, batch, ObjectiveWeights(), cfg.loss_config(), og, od, "adversarial"))
        results.append(_digest(model.named_parameters()) + _digest(bank.named_parameters()))
    assert results[0] == results[2] and results[1] == results[3]


# -- loop ----------------------------------------------------------------------


def test_train_loop_log_and_checkpoints(tmp_path):
    cfg = _small_cfg()
    corpus, stats = _corpus(cfg)
    ck = train(cfg, corpus, tmp_path, stats)
    assert ck.iteration == cfg.schedule.total_iters
    rows = read_loss_log(tmp_path / "loss.csv")
    assert [r["iter"] for r in rows] == [1, 2, 3, 4]
    assert rows[0]["adv_d"] is None and rows[3]["adv_d"] is not None
    assert (tmp_path / "ckpt_0000002.pnck").exists() and (tmp_path / "ckpt_0000004.pnck").exists()
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "iter,stft_loss,adv_g,adv_d,total"
    back = load_checkpoint(tmp_path / "latest.pnck")
    assert back.iteration == 4 and back.optimizers["discriminator"].t == 2
    assert set(back.params) == {f"generator.{n}" for n, _ in build_training_state(cfg)[0].named_parameters()} | \
        {f"discriminator.{n}" for n, _ in build_training_state(cfg)[1].named_parameters()}


def test_train_rejects_short_crop(tmp_path):
    cfg = _small_cfg(schedule=dict(crop_samples=128))
    corpus, stats = _corpus(cfg)
    with pytest.raises(ValueError):
        train(cfg, corpus, tmp_path, stats)


def test_resume_reproduces_losses_bitwise(tmp_path):
    cfg = _small_cfg(schedule=dict(total_iters=5, d_frozen_iters=2))
    corpus, stats = _corpus(cfg)
    full = train(cfg, corpus, tmp_path / "full", stats)
    train(cfg, corpus, tmp_path / "split", stats, until=3)
    resumed = train(cfg, corpus, tmp_path / "split", resume=tmp_path / "split" / "latest.pnck")
    assert (tmp_path / "full" / "loss.csv").read_bytes() == (tmp_path / "split" / "loss.csv").read_bytes()
    assert to_bytes(full) == to_bytes(resumed)


def test_restore_and_model_from_checkpoint():
    cfg = _small_cfg()
    model, bank, og, od = build_training_state(cfg)
    ck = make_checkpoint(cfg, model, bank, og, od, 0, NormStats(np.zeros(77), np.ones(77)))
    ck = from_bytes(to_bytes(ck))
    cfg2, model2, bank2, _, _ = restore_training_state(ck)
    assert cfg2 == cfg
    assert _digest(model.named_parameters()) == _digest(model2.named_parameters())
    assert _digest(bank.named_parameters()) == _digest(bank2.named_parameters())
    assert _digest(model_from_checkpoint(ck).named_parameters()) == _digest(model.named_parameters())
    ck.params.pop(next(iter(ck.params)))
    with pytest.raises(DataError):
        model_from_checkpoint(ck)


def test_config_dict_round_trip():
    cfg = _small_cfg(extra_checkpoints=(10, 20))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.hop == 240
    assert isinstance(STFTLossConfig(cfg.resolutions).max_fft, int)
