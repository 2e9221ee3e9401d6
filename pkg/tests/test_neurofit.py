import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microfit import models, phantom, pipeline
from microfit.protocol import subprotocol
from microfit.neurofit import autodiff as ad
from microfit.neurofit.checkpoint import load_checkpoint, save_checkpoint
from microfit.neurofit.decoder import decode
from microfit.neurofit.network import (MlpSpec, SpecError, build_mlp, encode, SIGMOID_SCALE,
                                       SOFTPLUS_CLAMP)
from microfit.neurofit.training import (AdamState, GridSpec, StepSchedule, TrainConfig, adam_step,
                                        dataset_loss, grid_search, loss_and_grads, lr_at_epoch,
                                        predict_params, train_ssl)

SP1 = subprotocol("SP1")


def _verdict_theta(rng, n):
    f_ic = rng.uniform(0.05, 0.7, n)
    f_ees = rng.uniform(0.05, 1.0, n) * (1 - f_ic)
    return np.column_stack([f_ic, f_ees, rng.uniform(1, 14, n), rng.uniform(0.6, 2.9, n)])


def _dki_theta(rng, n):
    th = np.column_stack([rng.uniform(0.3, 2.5, 4 * n), rng.uniform(0.1, 1.5, 4 * n)])
    # keep the kurtosis expansion monotone over b <= 3
    return th[th[:, 0] * th[:, 1] < 0.9][:n]


# autodiff


def test_square_gradient():
    (g,) = ad.grad(lambda x: x * x, np.array(3.0))
    assert g == 6.0


def test_constant_has_zero_gradient():
    (g,) = ad.grad(lambda x: ad.tsum(x * 0.0) + 5.0, np.ones(3))
    np.testing.assert_array_equal(g, np.zeros(3))


def test_unused_input_gets_zero_gradient():
    _, g = ad.grad(lambda x, y: ad.tsum(x * x), np.ones(2), np.ones(3))
    np.testing.assert_array_equal(g, np.zeros(3))


def _fd(fn, x, h=1e-6):
    out = np.empty_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (fn(ad.Tensor(xp)).data - fn(ad.Tensor(xm)).data) / (2 * h)
    return out


PRIMITIVES = {
    "add": lambda x: ad.tsum(x + x * 2.0 + 1.0),
    "sub": lambda x: ad.tsum(3.0 - x - x * x),
    "div": lambda x: ad.tsum(1.0 / (x + 3.0) + x / 2.0),
    "exp": lambda x: ad.tsum(ad.exp(x)),
    "log": lambda x: ad.tsum(ad.log(x + 3.0)),
    "sqrt": lambda x: ad.tsum(ad.sqrt(x + 3.0)),
    "power": lambda x: ad.tsum(ad.power(x + 3.0, 2.5)),
    "erf": lambda x: ad.tsum(ad.erf(x)),
    "sigmoid": lambda x: ad.tsum(ad.sigmoid(x)),
    "softplus": lambda x: ad.tsum(ad.softplus(x)),
    "prelu": lambda x: ad.tsum(ad.prelu(x, np.array([0.3]))),
    "mean": lambda x: ad.mean(x * x, axis=0).sum(),
    "matmul": lambda x: ad.tsum(ad.exp(x @ np.full((3, 2), 0.1))),
    "getitem": lambda x: ad.tsum(x[:, 1:] * x[:, :1]),
    "fancy_index": lambda x: ad.tsum(x[np.array([0, 0, 1]), np.array([2, 2, 0])] ** 2),
    "concat": lambda x: ad.tsum(ad.concat([x, x * x], axis=1) * np.arange(6.0)),
    "maximum": lambda x: ad.tsum(ad.maximum(x, 0.1)),
    "broadcast": lambda x: ad.tsum(x * np.arange(3.0)[None, :] + ad.tsum(x, axis=0, keepdims=True)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name, rng):
    fn = PRIMITIVES[name]
    x = rng.uniform(-1.5, 1.5, (2, 3))
    x[np.abs(x) < 0.05] = 0.3  # stay off the kinks of prelu/maximum
    x[np.abs(x - 0.1) < 0.05] = 0.5
    (g,) = ad.grad(fn, x)
    np.testing.assert_allclose(g, _fd(fn, x), rtol=1e-6, atol=1e-8)


def test_prelu_at_zero_uses_positive_branch():
    gx, ga = ad.grad(lambda x, a: ad.tsum(ad.prelu(x, a)), np.zeros(3), np.array([0.25]))
    np.testing.assert_array_equal(gx, np.ones(3))
    assert ga[0] == 0.0


def test_gradient_accumulates_over_reused_nodes():
    (g,) = ad.grad(lambda x: ad.tsum((x * x) + (x * x)), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [4.0, 8.0])


# networks


@pytest.mark.parametrize("arch,model,count", [("baseline", "verdict", 337), ("baseline", "dki", 315),
                                              ("dense", "verdict", 21129), ("dense", "dki", 21063)])
def test_parameter_counts(arch, model, count):
    spec = MlpSpec.preset(arch, model)
    assert spec.n_params() == count
    assert build_mlp(spec).n_params == count


def test_presets():
    b = MlpSpec.baseline("verdict")
    assert b.hidden_widths == (10, 10, 10) and b.output_map == SOFTPLUS_CLAMP and b.dropout_rate == 0.2
    d = MlpSpec.dense("dki")
    assert d.hidden_widths == (32, 64, 128, 64, 32) and d.output_map == SIGMOID_SCALE
    assert d.latent_width == 2 and b.latent_width == 4


@pytest.mark.parametrize("kw", [dict(hidden_widths=()), dict(hidden_widths=(4, 0)),
                                dict(output_map="relu"), dict(dropout_rate=1.0)])
def test_bad_specs_rejected(kw):
    base = dict(model="verdict", hidden_widths=(4,), output_map=SIGMOID_SCALE)
    base.update(kw)
    with pytest.raises(SpecError):
        MlpSpec(**base)


def test_weight_shape_mismatch_rejected():
    net = build_mlp(MlpSpec.baseline("dki"))
    with pytest.raises(SpecError):
        type(net)(net.spec, net.weights[:-1])
    with pytest.raises(SpecError):
        net.set_flat(np.zeros(3))


def test_same_seed_same_weights():
    a = build_mlp(MlpSpec.dense("verdict"), seed=4)
    b = build_mlp(MlpSpec.dense("verdict"), seed=4)
    c = build_mlp(MlpSpec.dense("verdict"), seed=5)
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())


def test_flat_round_trip():
    net = build_mlp(MlpSpec.baseline("verdict"), seed=1)
    other = build_mlp(MlpSpec.baseline("verdict"), seed=2)
    other.set_flat(net.flat())
    np.testing.assert_array_equal(other.flat(), net.flat())


@pytest.mark.parametrize("arch", ["baseline", "dense"])
@pytest.mark.parametrize("model", ["dki", "verdict"])
def test_outputs_within_bounds(arch, model, rng):
    net = build_mlp(MlpSpec.preset(arch, model), seed=0)
    net.set_flat(net.flat() + rng.normal(0, 3.0, net.n_params))
    out = encode(net, rng.uniform(0, 1, (200, 6))).data
    assert np.all(out >= net.bounds.lo) and np.all(out <= net.bounds.hi)


def test_sigmoid_scale_strictly_inside(rng):
    net = build_mlp(MlpSpec.dense("verdict"), seed=0)
    out = encode(net, rng.uniform(0, 1, (500, 6))).data
    assert np.all(out > net.bounds.lo) and np.all(out < net.bounds.hi)


def test_softplus_clamp_floor():
    net = build_mlp(MlpSpec.baseline("verdict"), seed=0)
    net.weights[-2] = np.zeros_like(net.weights[-2])
    net.weights[-1] = np.array([-50.0, 0.0, 0.0, 0.0])
    out = encode(net, np.ones((1, 6))).data
    # softplus(-50) is 2e-22, so the floor at 0 holds to double precision
    assert 0.0 <= out[0, 0] < 1e-20


def test_dropout_only_in_training(rng):
    net = build_mlp(MlpSpec.dense("verdict"), seed=0)
    x = rng.uniform(0, 1, (50, 6))
    np.testing.assert_array_equal(encode(net, x).data, encode(net, x).data)
    t1 = encode(net, x, training=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(t1, encode(net, x).data)
    with pytest.raises(ValueError):
        encode(net, x, training=True)


def test_initial_output_is_interior(rng):
    for model in ("dki", "verdict"):
        for arch in ("baseline", "dense"):
            net = build_mlp(MlpSpec.preset(arch, model), seed=0)
            out = encode(net, rng.uniform(0.1, 1, (100, 6))).data
            lo, hi = net.bounds.lo, net.bounds.hi
            assert np.all(out > lo + 0.01 * (hi - lo)) and np.all(out < hi - 0.01 * (hi - lo))


# decoders


def test_decoders_match_models(rng):
    for sp in ("SP1", "SP2", "SP3"):
        prot = subprotocol(sp)
        th = _verdict_theta(rng, 100)
        np.testing.assert_allclose(decode("verdict", th, prot).data, models.verdict_forward(th, prot),
                                   rtol=1e-12, atol=1e-14)
        dk = np.column_stack([rng.uniform(0.01, 3, 100), rng.uniform(0, 5, 100)])
        np.testing.assert_allclose(decode("dki", dk, prot).data, models.dki_forward(dk, prot.b_array),
                                   rtol=1e-12, atol=1e-14)


def test_decoder_fraction_rescaling_matches_models(rng):
    th = _verdict_theta(rng, 50)
    th[:, 0] = rng.uniform(0.3, 1.0, 50)
    th[:, 1] = rng.uniform(0.3, 1.0, 50)
    np.testing.assert_allclose(decode("verdict", th, SP1).data, models.verdict_forward(th, SP1), rtol=1e-12)


def test_decoder_pure_extracellular_is_ball():
    th = np.array([[0.0, 1.0, 8.0, 1.7]])
    np.testing.assert_allclose(decode("verdict", th, SP1).data[0], models.ball_signal(1.7, SP1.b_array),
                               rtol=1e-14)


def _grad_fd_errors(net, y):
    """Analytic vs central-difference gradient of the full loss, as vector-norm relative errors."""
    _, grads = loss_and_grads(net, y, SP1)
    g = np.concatenate([w.ravel() for w in grads])
    w0 = net.flat()
    fd = np.empty_like(w0)
    for i in range(w0.size):
        h = 1e-6 * max(1.0, abs(w0[i]))
        w = w0.copy()
        w[i] += h
        net.set_flat(w)
        lp = dataset_loss(net, y, SP1)
        w[i] -= 2 * h
        net.set_flat(w)
        lm = dataset_loss(net, y, SP1)
        fd[i] = (lp - lm) / (2 * h)
    net.set_flat(w0)
    return np.linalg.norm(g - fd) / np.linalg.norm(fd), np.max(np.abs(g - fd)) / np.max(np.abs(fd))


@pytest.mark.parametrize("model", ["dki", "verdict"])
def test_full_loss_gradient_matches_finite_differences(model, rng):
    net = build_mlp(MlpSpec.baseline(model), seed=3)
    net.set_flat(net.flat() + rng.normal(0, 0.05, net.n_params))
    th = _verdict_theta(rng, 40) if model == "verdict" else _dki_theta(rng, 40)
    y = models.forward(model, th, SP1)
    rel2, relinf = _grad_fd_errors(net, y)
    assert rel2 < 1e-5 and relinf < 1e-5


# training


def test_adam_hand_value():
    w, state = adam_step([np.array([1.0])], [np.array([1.0])], AdamState.zeros_like([np.zeros(1)]), 0.1)
    assert w[0][0] == pytest.approx(0.9, abs=1e-6)
    assert state.t == 1


def test_adam_zero_gradient_keeps_weights(rng):
    ws = [rng.normal(size=(3, 2)), rng.normal(size=2)]
    new, _ = adam_step(ws, [np.zeros((3, 2)), np.zeros(2)], AdamState.zeros_like(ws), 0.01)
    for a, b in zip(ws, new):
        np.testing.assert_array_equal(a, b)


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState.zeros_like([np.zeros(2)]), 0.1)


@settings(max_examples=30)
@given(st.floats(-5, 5).filter(lambda g: abs(g) > 1e-3), st.floats(1e-4, 1.0))
def test_adam_first_step_moves_by_lr(g, lr):
    w, _ = adam_step([np.array([0.0])], [np.array([g])], AdamState.zeros_like([np.zeros(1)]), lr)
    assert w[0][0] == pytest.approx(-np.sign(g) * lr, rel=1e-4)


def test_lr_schedule():
    cfg = TrainConfig(lr0=0.01, scheduler=StepSchedule(0.1, 10))
    assert lr_at_epoch(cfg, 0) == 0.01
    assert lr_at_epoch(cfg, 25) == pytest.approx(1e-4)
    assert lr_at_epoch(cfg, 9) == 0.01 and lr_at_epoch(cfg, 10) == pytest.approx(1e-3)
    const = TrainConfig(lr0=0.003)
    assert all(lr_at_epoch(const, e) == 0.003 for e in range(50))


def test_train_presets():
    b = TrainConfig.baseline("verdict")
    assert (b.batch_size, b.lr0, b.epochs, b.scheduler) == (256, 1e-3, 300, None)
    assert TrainConfig.baseline("dki").epochs == 60
    d = TrainConfig.dense("verdict", "SP2")
    assert (d.batch_size, d.lr0, d.epochs) == (256, 0.01, 60)
    assert d.scheduler == StepSchedule(0.1, 10)
    assert TrainConfig.from_dict(d.to_dict()) == d


@pytest.fixture(scope="module")
def small_dki():
    rng = np.random.default_rng(7)
    y = models.forward("dki", _dki_theta(rng, 600), SP1)
    return y[:500], y[500:]


def test_zero_lr_keeps_weights_and_flat_history(small_dki):
    tr, va = small_dki
    cfg = TrainConfig(batch_size=100, lr0=0.0, epochs=3)
    res = train_ssl(MlpSpec.baseline("dki"), cfg, tr, va, SP1)
    np.testing.assert_array_equal(res.final_network.flat(), build_mlp(MlpSpec.baseline("dki"), seed=0).flat())
    assert len(set(res.train_loss)) == 1 and res.train_loss[0] == res.initial_train_loss


def test_history_lengths_and_best_epoch(small_dki):
    tr, va = small_dki
    res = train_ssl(MlpSpec.baseline("dki"), TrainConfig(100, 1e-2, 5), tr, va, SP1)
    assert len(res.train_loss) == len(res.val_loss) == len(res.lrs) == 5
    assert res.best_val_loss == min(res.val_loss)
    assert dataset_loss(res.network, va, SP1) == pytest.approx(res.best_val_loss, rel=1e-12)


def test_training_is_bit_reproducible(small_dki):
    tr, va = small_dki
    cfg = TrainConfig(64, 1e-2, 3, seed=2)
    a = train_ssl(MlpSpec.dense("dki"), cfg, tr, va, SP1)
    b = train_ssl(MlpSpec.dense("dki"), cfg, tr, va, SP1)
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
    np.testing.assert_array_equal(a.network.flat(), b.network.flat())


def test_input_width_checked(small_dki):
    tr, va = small_dki
    with pytest.raises(ValueError):
        train_ssl(MlpSpec.baseline("dki"), TrainConfig(epochs=1), tr[:, :5], va, SP1)


def test_noise_free_dki_reconstruction_converges():
    rng = np.random.default_rng(0)
    y = models.forward("dki", _dki_theta(rng, 5000), SP1)
    cfg = TrainConfig(64, 1e-2, 100, StepSchedule(0.3, 20))
    # dropout keeps the preset's weights slightly blurred; the converged pipeline uses rate 0
    spec = dataclasses.replace(MlpSpec.dense("dki"), dropout_rate=0.0)
    assert train_ssl(spec, cfg, y[:4000], y[4000:], SP1).best_val_loss < 1e-6


@pytest.fixture(scope="module")
def phantom_split():
    spec = phantom.PhantomSpec(grid=(1, 48, 48))
    _, vols = phantom.simulate_cohort(spec, SP1)
    tables = [pipeline.preprocess_volume(v, "gland").signals for v in vols.values()]
    return np.vstack(tables[:5]), np.vstack(tables[5:7])


def test_dense_verdict_phantom_val_loss_drops_tenfold(phantom_split):
    tr, va = phantom_split
    res = train_ssl(MlpSpec.dense("verdict"), TrainConfig(128, 0.01, 20, StepSchedule(0.1, 10)), tr, va, SP1)
    assert res.initial_val_loss / res.best_val_loss >= 10


def test_grid_search_avoids_largest_lr(phantom_split):
    tr, va = phantom_split
    grid = GridSpec((128,), (1e-3, 1e-2, 1e-1))
    res = grid_search(grid, MlpSpec.dense("verdict"), TrainConfig(epochs=10, scheduler=StepSchedule(0.1, 10)),
                      tr, va, SP1)
    assert res.val_loss.shape == (1, 3)
    assert res.best_lr != 1e-1
    assert res.best_result.best_val_loss == res.val_loss.min()


def test_grid_single_cell_and_cardinality(small_dki):
    tr, va = small_dki
    one = grid_search(GridSpec((50,), (1e-3,)), MlpSpec.baseline("dki"), TrainConfig(epochs=1), tr, va, SP1)
    assert (one.best_batch_size, one.best_lr) == (50, 1e-3)
    g = GridSpec((50, 100), (1e-3, 1e-2, 1e-1))
    res = grid_search(g, MlpSpec.baseline("dki"), TrainConfig(epochs=1), tr, va, SP1)
    assert res.val_loss.shape == (2, 3)
    assert GridSpec.for_model("dki").batch_sizes == (32, 64, 128, 256)
    assert GridSpec.for_model("verdict").batch_sizes == (64, 128, 256, 512)
    assert GridSpec.for_model("verdict").lrs == (1e-4, 1e-3, 1e-2, 1e-1)


def test_grid_tie_breaks_to_smaller_batch_then_lr(small_dki):
    tr, va = small_dki
    # lr = 0 never moves the weights, so every cell ties at the initial loss
    res = grid_search(GridSpec((100, 50), (0.0, 0.0)), MlpSpec.baseline("dki"), TrainConfig(epochs=1),
                      tr, va, SP1)
    assert res.best_batch_size == 50


def test_predict_params_rescales_fractions(rng):
    net = build_mlp(MlpSpec.baseline("verdict"), seed=0)
    net.weights[-1] = np.array([0.9, 0.9, 7.0, 1.5])
    net.weights[-2] = np.zeros_like(net.weights[-2])
    p = predict_params(net, rng.uniform(0, 1, (5, 6)))
    assert np.all(p[:, 0] + p[:, 1] <= 1 + 1e-12)


def test_checkpoint_round_trip(tmp_path, small_dki):
    tr, va = small_dki
    cfg = TrainConfig(100, 1e-2, 2)
    res = train_ssl(MlpSpec.baseline("dki"), cfg, tr, va, SP1)
    save_checkpoint(tmp_path / "net.bin", res.network, cfg, res)
    net, header = load_checkpoint(tmp_path / "net.bin")
    assert header["epoch"] == res.best_epoch and header["n_params"] == 315
    assert TrainConfig.from_dict(header["config"]) == cfg
    # weights travel as float32
    np.testing.assert_allclose(net.flat(), res.network.flat(), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(predict_params(net, va), predict_params(res.network, va), rtol=1e-5, atol=1e-6)
