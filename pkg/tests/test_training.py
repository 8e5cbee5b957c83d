import numpy as np
import pytest

from unfoldreg.diffnet import project_nonneg
from unfoldreg.errors import ConfigError, NumericalError
from unfoldreg.linops import MaskedDFT, random_2d_mask
from unfoldreg.manifold import SyntheticManifold
from unfoldreg.penalty import ConstantPenalty, IcnnPenalty, QuadraticPenalty, ZeroPenalty
from unfoldreg.training import (
    TrainConfig,
    TrainData,
    TrainRecord,
    TrainState,
    layer_outputs,
    loss_J1,
    loss_J1_grad,
    loss_J2,
    train,
    validation_curve,
)
from unfoldreg.unfolded import UnfoldedModel

from conftest import crandn
from test_unfolded import quadratic_prox_model

SMALL = dict(K=3, icnn_channels=(4, 4), prox_channels=(4,), seed=3)


@pytest.fixture
def data8():
    op = MaskedDFT(random_2d_mask((8, 8), 0.3, seed=0))
    m = SyntheticManifold.create((8, 8), 4, lo=-10.0, hi=10.0)
    return TrainData.from_signals(op, m.sample(6, seed=1))


def perturbed_model(shape=(8, 8), seed=0, **kw):
    rng = np.random.default_rng(seed)
    m = UnfoldedModel.init(shape, seed=seed, **kw)
    return m.with_params(m.params.map(lambda w: w + 0.05 * rng.standard_normal(w.shape)))


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.T_Theta, cfg.T_phi, cfg.gamma, cfg.beta1, cfg.beta2, cfg.K, cfg.batch_size) == \
        (2, 6, 1e-4, 0.9, 0.999, 10, 1)
    for bad in ({"eta": 0.5}, {"K": 0}, {"gamma": 0.0}, {"mode": "other"}, {"mu1": -1.0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"K": 2, "typo": 1})
    assert TrainConfig.from_dict(cfg.as_dict()) == cfg
    assert TrainConfig(epochs=3).total_loops(5) == 15
    assert TrainConfig(epochs=3, batch_size=2).total_loops(5) == 9


def test_j1_zero_modules_consistent_data(data8):
    cfg = TrainConfig(K=3, mu1=0.0)
    m = UnfoldedModel.init((8, 8), K=3)
    m = m.with_params(m.params.zeros_like())
    assert loss_J1(m, ZeroPenalty(), data8.op, data8.xs[:1], data8.ys[:1], cfg) == 0.0


def test_j1_constant_penalty_shift(data8):
    cfg = TrainConfig(K=3, mu1=0.0)
    m = perturbed_model(K=3, channels=(4,))
    xs, ys = data8.xs[:2], data8.ys[:2]
    base = loss_J1(m, ZeroPenalty(), data8.op, xs, ys, cfg)
    shifted = loss_J1(m, ConstantPenalty(0.7), data8.op, xs, ys, cfg)
    assert base > 0
    assert shifted - base == pytest.approx(3 * 2 * 0.7, rel=1e-12)


@pytest.mark.parametrize("nu", [0.25, 1.0])
def test_j1_quadratic_moreau_envelope(nu):
    op = MaskedDFT(random_2d_mask((4, 4), 0.5, seed=2))
    rng = np.random.default_rng(0)
    xs = crandn(rng, (2, 4, 4))
    ys = op.apply(xs)
    xis = op.pseudo_inverse(ys)  # data step is stationary at A^dagger y
    m = quadratic_prox_model(nu)
    cfg = TrainConfig(K=1, mu1=0.0)
    expected = sum(nu * np.sum(np.abs(xi) ** 2) / (1 + 2 * nu) for xi in xis)
    assert loss_J1(m, QuadraticPenalty(nu), op, xs, ys, cfg) == pytest.approx(expected, rel=1e-12)


def test_j1_gradient_matches_fd(data8):
    cfg = TrainConfig(K=2, mu1=0.5)
    m = perturbed_model(K=2, channels=(3,), seed=4)
    f = IcnnPenalty.init((8, 8), (3, 3), seed=2)
    xs, ys = data8.xs[:2], data8.ys[:2]
    _, g = loss_J1_grad(m, f, data8.op, xs, ys, cfg)
    h = 1e-6
    for name in ("S_1/W1", "S_2/W2", "S_1/b2"):
        idx = tuple(np.unravel_index(np.argmax(np.abs(g[name])), g[name].shape))
        qp, qm = m.params.copy(), m.params.copy()
        qp[name][idx] += h
        qm[name][idx] -= h
        fd = (loss_J1(m.with_params(qp), f, data8.op, xs, ys, cfg)
              - loss_J1(m.with_params(qm), f, data8.op, xs, ys, cfg)) / (2 * h)
        assert g[name][idx] == pytest.approx(fd, rel=1e-5), name


def test_j2_examples(data8):
    m = UnfoldedModel.init((8, 8), K=2)
    xs, ys = data8.xs[:2], data8.ys[:2]
    assert loss_J2(m, ZeroPenalty(), xs, ys, TrainConfig(mu2=0.0), op=data8.op, rng=0) == 0.0
    assert loss_J2(m, ConstantPenalty(3.0), xs, ys, TrainConfig(mu2=0.0), op=data8.op, rng=0) == 0.0
    assert loss_J2(m, ZeroPenalty(), xs, ys, TrainConfig(mu2=10.0), op=data8.op, rng=0) == 10.0


def test_j2_gradient_matches_fd(data8):
    cfg = TrainConfig(K=2, mu2=10.0)
    m = perturbed_model(K=2, channels=(3,), seed=1)
    f = IcnnPenalty.init((8, 8), (3, 3), seed=5)
    rng = np.random.default_rng(8)
    f = f.with_params(project_nonneg(f.params.map(lambda w: w + 0.1 * rng.standard_normal(w.shape))))
    xs, ys = data8.xs[:2], data8.ys[:2]
    outs = layer_outputs(m, data8.op, ys)
    value, g, _ = loss_J2(m, f, xs, ys, cfg, outs=outs, rng=1, with_grad=True)
    assert value == pytest.approx(loss_J2(m, f, xs, ys, cfg, outs=outs, rng=1), rel=1e-12)
    h = 1e-6
    for name in ("Wx0", "Wz1", "Wx1"):
        idx = tuple(np.unravel_index(np.argmax(np.abs(g[name])), g[name].shape))
        qp, qm = f.params.copy(), f.params.copy()
        qp[name][idx] += h
        qm[name][idx] -= h
        fd = (loss_J2(m, f.with_params(qp), xs, ys, cfg, outs=outs, rng=1)
              - loss_J2(m, f.with_params(qm), xs, ys, cfg, outs=outs, rng=1)) / (2 * h)
        assert g[name][idx] == pytest.approx(fd, rel=1e-5), name


def test_zero_outer_loops_returns_initial(data8):
    cfg = TrainConfig(outer_loops=0, **SMALL)
    model, f, record = train(cfg, data8)
    init = TrainState.init(cfg, (8, 8))
    assert model.params == init.model.params and f.params == init.penalty.params
    assert record.rows == []


def test_zero_data_leaves_network_unchanged():
    op = MaskedDFT(random_2d_mask((8, 8), 0.3, seed=0))
    data = TrainData.from_signals(op, np.zeros((2, 8, 8)))
    cfg = TrainConfig(outer_loops=1, T_Theta=1, T_phi=0, **SMALL)
    model, _, _ = train(cfg, data)
    assert model.params == TrainState.init(cfg, (8, 8)).model.params


def test_phase_order_and_logging(data8):
    cfg = TrainConfig(outer_loops=3, T_Theta=2, T_phi=3, **SMALL)
    messages = []
    _, f, record = train(cfg, data8, log=messages.append)
    assert record.phase_sequence() == (["theta"] * 2 + ["phi"] * 3) * 3
    assert [r["step"] for r in record.rows] == list(range(1, 16))
    assert messages[:2] == ["t=0 phase=theta", "t=0 phase=phi"]
    for k in f.params.nonneg:
        assert np.all(f.params[k] >= 0)


def test_freezing_contract(data8):
    init = TrainState.init(TrainConfig(**SMALL), (8, 8))
    model, f, _ = train(TrainConfig(outer_loops=2, T_phi=0, **SMALL), data8)
    assert f.params == init.penalty.params and model.params != init.model.params
    model, f, _ = train(TrainConfig(outer_loops=2, T_Theta=0, **SMALL), data8)
    assert model.params == init.model.params and f.params != init.penalty.params


def test_training_is_deterministic(data8):
    cfg = TrainConfig(outer_loops=4, gamma=1e-3, **SMALL)
    a = train(cfg, data8)
    b = train(cfg, data8)
    assert a[0].params == b[0].params and a[1].params == b[1].params
    assert a[2].rows == b[2].rows


def test_resume_is_bit_exact(tmp_path, data8):
    cfg = TrainConfig(epochs=2, gamma=1e-3, **SMALL)
    straight = train(cfg, data8)

    saved = {}

    def checkpoint(state, record):
        if state.t == 4:
            state.save(tmp_path / "state")
            saved["rows"] = list(record.rows)

    train(TrainConfig(epochs=2, gamma=1e-3, checkpoint_every=1, **SMALL), data8, checkpoint=checkpoint)
    state = TrainState.load(tmp_path / "state", cfg)
    assert state.t == 4
    resumed = train(cfg, data8, state=state, record=TrainRecord(cfg.K, saved["rows"]))
    assert resumed[0].params == straight[0].params
    assert resumed[1].params == straight[1].params
    assert resumed[2].rows == straight[2].rows


def test_divergence_aborts_with_record(data8):
    data = TrainData(data8.op, data8.xs * 1e4, data8.ys * 1e4)
    record = TrainRecord(3)
    with pytest.raises(NumericalError, match="exceeds"):
        train(TrainConfig(outer_loops=2, **SMALL), data, record=record)
    assert record.state.t == 0


def test_pgdnet_mode_trains_network_only(data8):
    cfg = TrainConfig(outer_loops=3, mode="pgdnet", **SMALL)
    model, f, record = train(cfg, data8)
    assert set(record.phase_sequence()) == {"theta"}
    assert f.params == TrainState.init(cfg, (8, 8)).penalty.params
    m = model
    assert loss_J1(m, None, data8.op, data8.xs[:1], data8.ys[:1], cfg) == pytest.approx(
        np.sum(np.abs(m.forward_batch(data8.op, data8.ys[:1])[-1] - data8.xs[:1]) ** 2))


def test_record_csv_round_trip(tmp_path, data8):
    cfg = TrainConfig(outer_loops=2, T_phi=1, **SMALL)
    _, _, record = train(cfg, data8, val=data8, )
    record.attach_validation(validation_curve(record.state.model, data8))
    record.write_csv(tmp_path / "rec.csv", config_hash="abc")
    text = (tmp_path / "rec.csv").read_text().splitlines()
    assert text[0] == "# config_hash: abc"
    assert text[1].split(",")[:6] == ["t", "phase", "step", "J1", "J2", "gp_mean"]
    back = TrainRecord.read_csv(tmp_path / "rec.csv")
    assert back.K == 3 and len(back.rows) == len(record.rows)
    assert back.rows[-1]["val_nmse_k3"] == record.rows[-1]["val_nmse_k3"]


def test_smoke_training_beats_zero_filled(manifold16, op16):
    """8 samples, 16x16, 50 epochs: layer-K NMSE below the zero-filled start."""
    data = TrainData.from_signals(op16, manifold16.sample(8, seed=10))
    val = TrainData.from_signals(op16, manifold16.sample(8, seed=11))
    model, _, _ = train(TrainConfig(epochs=50, seed=0), data)
    curve = validation_curve(model, val)
    assert curve[-1] < curve[0]
