import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from periodnet import tensorcore as tc
from periodnet.errors import ShapeError
from periodnet.losses import (DEFAULT_RESOLUTIONS, LAMBDA_ADV, ObjectiveWeights, STFTLossConfig,
                              adversarial_d_loss, adversarial_g_loss, generator_objective,
                              log_stft_magnitude_loss, mr_stft_loss, mr_stft_terms, spectral_convergence)
from periodnet.nets import (DiscriminatorBank, DiscriminatorConfig, GeneratorConfig, PeriodNetOutput,
                            model_from_configs, periodnet_forward)
from periodnet.tensorcore import Graph, Tensor

from oracles import gradcheck, numeric_grad, rel_err

RES = (64, 16, 48)
SMALL = STFTLossConfig(((64, 16, 48), (32, 8, 32), (128, 32, 96)))


def rand(n, seed=0):
    return np.random.default_rng(seed).standard_normal(n)


def test_defaults():
    assert DEFAULT_RESOLUTIONS == ((2048, 240, 1200), (4096, 480, 2400), (1024, 100, 480))
    assert LAMBDA_ADV == 4.0
    assert STFTLossConfig().max_fft == 4096


def test_config_validation():
    with pytest.raises(ValueError):
        STFTLossConfig(())
    with pytest.raises(ValueError):
        STFTLossConfig(((64, 16, 128),))
    with pytest.raises(ValueError):
        ObjectiveWeights(-1.0)
    with pytest.raises(ValueError):
        ObjectiveWeights(float("nan"))


def test_spectral_convergence_examples():
    x = rand(256)
    assert float(spectral_convergence(x, x, RES).data) == 0.0
    assert float(spectral_convergence(np.zeros(256), x, RES).data) == pytest.approx(1.0, abs=1e-6)
    assert float(spectral_convergence(2 * x, x, RES).data) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        spectral_convergence(x, np.zeros(256), RES)


def test_log_magnitude_examples():
    x = rand(256, 1)
    assert float(log_stft_magnitude_loss(x, x, RES).data) == 0.0
    assert float(log_stft_magnitude_loss(math.e * x, x, RES).data) == pytest.approx(1.0, abs=1e-9)
    y = rand(256, 2)
    assert float(log_stft_magnitude_loss(x, y, RES).data) == pytest.approx(
        float(log_stft_magnitude_loss(y, x, RES).data), rel=1e-12)


def test_mr_stft_single_resolution_is_term_sum():
    x, y = rand(256, 3), rand(256, 4)
    cfg = STFTLossConfig((RES,))
    want = float(spectral_convergence(y, x, RES).data) + float(log_stft_magnitude_loss(y, x, RES).data)
    assert float(mr_stft_loss(y, x, cfg).data) == pytest.approx(want, rel=1e-12)


def test_mr_stft_average_of_terms():
    x, y = rand(256, 5), rand(256, 6)
    terms = mr_stft_terms(y, x, SMALL)
    want = sum(float(a.data) + float(b.data) for a, b in terms) / 3
    assert float(mr_stft_loss(y, x, SMALL).data) == pytest.approx(want, rel=1e-12)


def test_mr_stft_errors():
    with pytest.raises(ShapeError):
        mr_stft_loss(rand(100), rand(100), SMALL)
    with pytest.raises(ShapeError):
        mr_stft_loss(rand(256), rand(300), SMALL)
    with pytest.raises(ValueError):
        mr_stft_loss(rand(256), np.zeros(256), SMALL)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 10.0))
def test_mr_stft_nonnegative_and_zero_on_identity(seed, scale):
    x = rand(256, seed) * scale
    y = rand(256, seed + 1)
    assert float(mr_stft_loss(x, x, SMALL).data) == 0.0
    assert float(mr_stft_loss(y, x, SMALL).data) >= 0.0


def test_mr_stft_gradient_finite_differences():
    cfg = STFTLossConfig(((64, 16, 64), (32, 8, 24)))
    worst = 0.0
    for seed in range(20):
        x = rand(256, 100 + seed)
        y = rand(256, 200 + seed)
        worst = max(worst, gradcheck(lambda a: mr_stft_loss(a, Tensor(x), cfg), [y]))
    assert worst <= 1e-4


def test_log_magnitude_and_sc_gradients():
    x = rand(128, 7)
    for seed in range(20):
        y = rand(128, 300 + seed)
        assert gradcheck(lambda a: spectral_convergence(a, Tensor(x), RES), [y]) <= 1e-4
        assert gradcheck(lambda a: log_stft_magnitude_loss(a, Tensor(x), RES), [y]) <= 1e-4


def _scores(seed, shapes=((1, 1, 20), (1, 1, 10), (1, 1, 6))):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(s) for s in shapes]


def _g_oracle(scores):
    per = []
    for s in scores:
        vals = [(1.0 - v) ** 2 for v in np.ravel(s)]
        per.append(math.fsum(vals) / len(vals))
    return math.fsum(per) / len(per)


def _d_oracle(real, fake):
    per = []
    for r, f in zip(real, fake):
        a = [(1.0 - v) ** 2 for v in np.ravel(r)]
        b = [v * v for v in np.ravel(f)]
        per.append(math.fsum(a) / len(a) + math.fsum(b) / len(b))
    return math.fsum(per) / len(per)


def test_adversarial_examples():
    ones = [np.ones((1, 1, 5)), np.ones((1, 1, 3))]
    zeros = [np.zeros((1, 1, 5)), np.zeros((1, 1, 3))]
    assert float(adversarial_g_loss([Tensor(s) for s in ones]).data) == 0.0
    assert float(adversarial_g_loss([Tensor(s) for s in zeros]).data) == 1.0
    assert float(adversarial_d_loss([Tensor(s) for s in ones], [Tensor(s) for s in zeros]).data) == 0.0
    assert float(adversarial_d_loss([Tensor(s) for s in zeros], [Tensor(s) for s in ones]).data) == 2.0
    with pytest.raises(ValueError):
        adversarial_g_loss([])
    with pytest.raises(ValueError):
        adversarial_d_loss([Tensor(ones[0])], [])


@pytest.mark.parametrize("seed", range(10))
def test_adversarial_losses_match_scalar_oracle(seed):
    real, fake = _scores(seed), _scores(seed + 100)
    assert abs(float(adversarial_g_loss([Tensor(s) for s in fake]).data) - _g_oracle(fake)) <= 1e-12
    got = float(adversarial_d_loss([Tensor(s) for s in real], [Tensor(s) for s in fake]).data)
    assert abs(got - _d_oracle(real, fake)) <= 1e-12


def test_adversarial_gradients():
    for seed in range(20):
        s = _scores(seed)
        assert gradcheck(lambda a, b, c: adversarial_g_loss([a, b, c]), s) <= 1e-4
        r = _scores(seed + 50)
        assert gradcheck(lambda a, b, c: adversarial_d_loss([Tensor(x) for x in r], [a, b, c]), s) <= 1e-4


# -- composed objective --------------------------------------------------------

TINY_G = GeneratorConfig(n_layers=2, dilation_cycle=2, residual_channels=2, skip_channels=2, gate_channels=2,
                         kernel=3, input_channels=2, cond_channels=77)
TINY_D = DiscriminatorConfig(n_layers=2, kernel=3, channels=2)


def _tiny_setup(seed):
    model = model_from_configs("PM1", {"periodic": TINY_G, "aperiodic": TINY_G}, seed, np.float64)
    bank = DiscriminatorBank(TINY_D, seed, np.float64)
    rng = np.random.default_rng(seed)
    T = 160
    sig = dict(cond=rng.standard_normal((77, T)), sine=np.sin(np.arange(T) * 0.3), noise=rng.standard_normal(T),
               vuv=np.ones(T))
    ref = rng.standard_normal(T)
    return model, bank, sig, ref


def test_generator_objective_gradient_finite_differences():
    cfg = STFTLossConfig(((64, 16, 64), (32, 8, 32)))
    w = ObjectiveWeights(4.0)
    worst = 0.0
    for seed in range(20):
        model, bank, sig, ref = _tiny_setup(seed)
        params = dict(model.named_parameters())
        # a representative slice: output layers of both generators plus one gate conv
        names = ["periodic.post2.v", "aperiodic.post2.g", "periodic.layers.1.dilated.v", "aperiodic.first.bias"]

        def value():
            out = periodnet_forward(model, sig["cond"], sig["sine"], sig["noise"], sig["vuv"])
            return generator_objective(out, ref, bank, w, cfg).total

        with Graph() as g:
            loss = value()
        g.backward(loss, inputs=[params[n] for n in names])
        analytic = [params[n].grad.copy() for n in names]

        def f(*arrs):
            saved = [params[n].data for n in names]
            for n, a in zip(names, arrs):
                params[n].data = a
            try:
                return float(value().data)
            finally:
                for n, s in zip(names, saved):
                    params[n].data = s

        numeric = numeric_grad(f, [params[n].data.copy() for n in names])
        # relative error of the whole gradient vector over the checked parameters
        worst = max(worst, rel_err(np.concatenate([a.ravel() for a in analytic]),
                                   np.concatenate([b.ravel() for b in numeric])))
    assert worst <= 1e-4


def test_generator_objective_single_precision_path():
    # float32 analytic gradients against double-precision central differences
    cfg = STFTLossConfig(((64, 16, 64),))
    _, _, sig, ref = _tiny_setup(0)
    names = ["periodic.post2.v", "periodic.post2.g", "periodic.layers.0.dilated.v", "aperiodic.post2.bias"]
    grads, numeric = {}, {}
    for dt in (np.float32, np.float64):
        model = model_from_configs("PM1", {"periodic": TINY_G, "aperiodic": TINY_G}, 0, dt)
        bank = DiscriminatorBank(TINY_D, 0, dt)
        s = {k: v.astype(dt) for k, v in sig.items()}
        params = dict(model.named_parameters())

        def value():
            out = periodnet_forward(model, s["cond"], s["sine"], s["noise"], s["vuv"])
            return generator_objective(out, ref.astype(dt), bank, ObjectiveWeights(), cfg).total

        if dt is np.float32:
            with Graph() as g:
                loss = value()
            assert loss.data.dtype == np.float32
            g.backward(loss, inputs=[params[n] for n in names])
            grads = np.concatenate([params[n].grad.ravel() for n in names])
            f32 = {n: p.data.copy() for n, p in params.items()}
            continue
        for n, p in params.items():
            p.data = f32[n].astype(np.float64)

        def f(*arrs):
            saved = [params[n].data for n in names]
            for n, a in zip(names, arrs):
                params[n].data = a
            try:
                return float(value().data)
            finally:
                for n, old in zip(names, saved):
                    params[n].data = old

        numeric = np.concatenate([a.ravel() for a in numeric_grad(f, [params[n].data.copy() for n in names])])
    assert rel_err(grads, numeric) <= 1e-3


def test_objective_lambda_zero_is_pure_stft():
    x, y = rand(256, 1), rand(256, 2)
    gl = generator_objective(y, x, None, ObjectiveWeights(0.0), SMALL)
    assert float(gl.total.data) == float(mr_stft_loss(y, x, SMALL).data)
    assert gl.adv is None
    with pytest.raises(ValueError):
        generator_objective(y, x, None, ObjectiveWeights(1.0), SMALL)


def test_objective_zero_at_perfect_output_and_discriminator():
    x = rand(256, 3)
    bank = DiscriminatorBank(TINY_D, 0, np.float64)
    for d in bank.discriminators:
        last = d.layers[-1]
        last.g.data[:] = 0
        last.bias.data[:] = 1.0
    gl = generator_objective(x, x, bank, ObjectiveWeights(), SMALL)
    assert float(gl.total.data) == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_objective_sees_only_the_sum(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(256)
    p, a = rng.standard_normal(256), rng.standard_normal(256)
    delta = rng.standard_normal(256)
    bank = DiscriminatorBank(TINY_D, 1, np.float64)
    w = ObjectiveWeights()

    def obj(per, ap):
        out = PeriodNetOutput(Tensor(per) + Tensor(ap), Tensor(per), Tensor(ap))
        return float(generator_objective(out, x, bank, w, SMALL).total.data)

    # (p+d)+(a-d) may differ from p+a by rounding; compare with the sum formed identically
    s1 = (p + delta) + (a - delta)
    assert obj(p + delta, a - delta) == float(generator_objective(Tensor(s1), x, bank, w, SMALL).total.data)
    assert obj(p + delta, a - delta) == pytest.approx(obj(p, a), rel=1e-9)
    assert obj(p, a) == obj(a, p)
