from dataclasses import replace

import numpy as np
import pytest

from crpslam import autodiff as ad
from crpslam import net
from crpslam.autodiff import Tensor
from crpslam.domain import DomainSpec, Trajectory
from crpslam.errors import ConfigError, DataError, NumericError
from crpslam.rng import Stream
from crpslam.selftest import network_gradient_check, small_problem
from crpslam.trainer import (
    DESK_STAGES,
    FULL_STAGES,
    Adam,
    Stage,
    TrainConfig,
    ar_loss,
    clip_global_norm,
    ensemble_crps_loss,
    loss_step,
    train,
)

D1 = DomainSpec(d_x=1)
D2 = DomainSpec(d_x=2)


def const_traj(domain, value=0.0, length=5):
    shape = (length, domain.d_x, domain.height, domain.width)
    forc = np.zeros((length, domain.d_f, domain.height, domain.width), np.float32)
    return Trajectory(np.full(shape, value, np.float32), forc,
                      np.zeros((domain.d_s, domain.height, domain.width), np.float32), 0)


def stub(values_per_call, domain):
    """Predictor returning, for call k, member m the constant ``values_per_call[k][m]``."""
    calls = []

    def predict(inputs, z, current):
        vals = values_per_call[len(calls)]
        calls.append(1)
        rows = inputs.shape[0]
        n = len(vals)
        out = np.stack([np.full((domain.d_x, domain.interior_height, domain.interior_width), vals[r % n])
                        for r in range(rows)]).astype(np.float32)
        return Tensor(out)

    return predict


def test_loss_perfect_predictor_is_zero():
    tr = const_traj(D2, 0.7)
    loss = loss_step(stub([[0.7] * 4], D2), [(tr, 1), (tr, 2)], D2, 4, 0, 8)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-7)


def test_loss_hand_value_zero():
    tr = const_traj(D1, 1.0)
    assert float(loss_step(stub([[0.0, 2.0]], D1), [(tr, 1)], D1, 2, 0, 8).data) == 0.0


def test_loss_hand_value_sums_variables():
    tr = const_traj(D2, 2.0)
    assert float(loss_step(stub([[0.0, 1.0]], D2), [(tr, 1)], D2, 2, 0, 8).data) == pytest.approx(2.0)


def test_fair_loss_needs_two_members():
    tr = const_traj(D1)
    with pytest.raises(ConfigError):
        loss_step(stub([[0.0]], D1), [(tr, 1)], D1, 1, 0, 8)
    with pytest.raises(ConfigError):
        TrainConfig(n_members=1)


def test_ar_loss_identity_on_constant_trajectory():
    tr = const_traj(D2, 0.3)
    assert float(ar_loss(stub([[0.3] * 2] * 2, D2), [(tr, 1)], D2, 2, 2, 0, 8).data) == pytest.approx(0, abs=1e-7)


def test_ar_loss_is_mean_of_step_losses():
    tr = const_traj(D1, 0.0)
    total, steps = ar_loss(stub([[1.0, 1.0], [3.0, 3.0]], D1), [(tr, 1)], D1, 2, 2, 0, 8, return_steps=True)
    assert [float(s.data) for s in steps] == [1.0, 3.0]
    assert float(total.data) == 2.0


def test_ar_loss_too_short():
    tr = const_traj(D1, length=3)
    with pytest.raises(DataError):
        ar_loss(stub([[0, 1]] * 2, D1), [(tr, 1)], D1, 2, 2, 0, 8)


def test_ar_loss_two_parameter_gradient():
    """pred = a * current + b + z-offset; gradient through both rollout steps vs central differences."""
    s = Stream(4, lanes=32)
    shape = (5, 1, 24, 24)
    traj = Trajectory(s.normal(int(np.prod(shape))).reshape(shape), np.zeros((5, 2, 24, 24)),
                      np.zeros((1, 24, 24)), 0)
    theta = np.array([0.8, 0.1])

    def loss_for(th, track):
        a = Tensor(np.array([[[[th[0]]]]]), requires_grad=track, dtype=np.float64)
        b = Tensor(np.array([th[1]]), requires_grad=track, dtype=np.float64)

        def predict(inputs, z, current):
            cur = current if isinstance(current, Tensor) else Tensor(current, dtype=np.float64)
            shift = Tensor(np.broadcast_to(z[:, :1, None, None], cur.shape).copy(), dtype=np.float64)
            return ad.add(ad.conv2d(cur, a, b), ad.scale(shift, 0.3))

        return ar_loss(predict, [(traj, 1), (traj, 2)], D1, 3, 2, 5, 4, dtype=np.float64), (a, b)

    loss, (a, b) = loss_for(theta, True)
    ad.backward(loss)
    auto = [float(a.grad.ravel()[0]), float(b.grad[0])]
    h = 1e-6
    for k in range(2):
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        num = (float(loss_for(up, False)[0].data) - float(loss_for(dn, False)[0].data)) / (2 * h)
        assert abs(auto[k] - num) <= 1e-3 * max(abs(num), 1e-8)


def test_ar_loss_network_gradient_two_steps():
    r = network_gradient_check(probes=15, seed=2, ar_steps=2)
    assert r["worst"] < 1e-3


def test_interior_only_loss():
    s = Stream(8, lanes=32)
    members = Tensor(s.normal(2 * 3 * 2 * 16 * 16).reshape(2, 3, 2, 16, 16))
    target = s.normal(2 * 2 * 24 * 24).reshape(2, 2, 24, 24)
    base = float(ensemble_crps_loss(members, target, "fair", D2).data)
    mask = D2.boundary_mask().astype(bool)
    for _ in range(10):
        t2 = target.copy()
        t2[..., mask] += 100 * s.normal(int(t2[..., mask].size)).reshape(t2[..., mask].shape)
        assert float(ensemble_crps_loss(members, t2, "fair", D2).data) == base


def test_estimator_switch_consistency():
    s = Stream(9, lanes=32)
    n = 4
    m = s.normal(1 * n * 2 * 16 * 16).reshape(1, n, 2, 16, 16)
    target = s.normal(2 * 16 * 16).reshape(1, 2, 16, 16)
    fair = float(ensemble_crps_loss(Tensor(m, dtype=np.float64), target, "fair").data)
    biased = float(ensemble_crps_loss(Tensor(m, dtype=np.float64), target, "biased").data)
    spread = np.abs(m[0][:, None] - m[0][None, :]).sum(axis=(0, 1)).mean(axis=(-2, -1)).sum()
    expected = spread / (2 * n * (n - 1)) - spread / (2 * n * n)
    assert biased - fair == pytest.approx(expected, abs=1e-5)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0], np.float32)}
    Adam(p).step(p, {"w": np.zeros(2, np.float32)}, 1e-3)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_one_step_algebra():
    p = {"w": np.array([0.5, 0.5], np.float32)}
    g = np.array([0.2, -3.0], np.float32)
    Adam(p).step(p, {"w": g}, 0.01)
    # m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
    expected = 0.5 - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["w"], expected, rtol=1e-6)


def test_adam_is_deterministic_and_rejects_nan():
    runs = []
    for _ in range(2):
        p = {"w": np.ones(3, np.float32)}
        opt = Adam(p)
        for k in range(5):
            opt.step(p, {"w": np.array([0.1 * k, -1.0, 2.0], np.float32)}, 1e-2)
        runs.append(p["w"].tobytes())
    assert runs[0] == runs[1]
    with pytest.raises(NumericError):
        opt.step(p, {"w": np.array([np.nan, 0, 0], np.float32)}, 1e-2)


def test_clip_global_norm():
    g = {"a": np.array([3.0, 0.0], np.float32), "b": np.array([4.0], np.float32)}
    assert clip_global_norm(g, 1.0) == pytest.approx(5.0)
    total = np.sqrt(sum(np.sum(v**2) for v in g.values()))
    assert total == pytest.approx(1.0, rel=1e-6)
    small = {"a": np.array([0.1], np.float32)}
    clip_global_norm(small, 1.0)
    assert small["a"][0] == np.float32(0.1)


def test_schedules():
    assert [(s.epochs, s.lr, s.ar_steps) for s in FULL_STAGES] == [(600, 1e-3, 1), (400, 1e-4, 1), (200, 1e-5, 2)]
    assert [s.epochs * 10 for s in DESK_STAGES] == [s.epochs for s in FULL_STAGES]
    assert TrainConfig().with_full_schedule().total_epochs == 1200
    with pytest.raises(ConfigError):
        TrainConfig(stages=(Stage(1, 1e-3, 3),))
    assert TrainConfig().stage_of(60) == (1, DESK_STAGES[1])


# small end-to-end runs -----------------------------------------------------------------

TINY_NET = net.ForecasterConfig(d_z=8, channels=(8, 16), embed_dim=16, mlp_hidden=16)
TINY = TrainConfig(stages=(Stage(2, 1e-3, 1), Stage(1, 1e-4, 2)), batches_per_epoch=2, batch_size=2,
                   n_members=2, val_windows=2, val_members=4, seed=3)


@pytest.fixture(scope="module")
def toy_trajs():
    trajs = [small_problem(seed=s, length=6, dtype=np.float32)[1] for s in range(4)]
    return trajs[:3], trajs[3:]


def test_smoke_run_and_resume_bitwise(toy_trajs):
    tr, va = toy_trajs
    full = train(tr, va, D2, TINY_NET, TINY)
    assert full.epoch == 3 and len(full.log) == 3
    assert set(full.stage_params) == {1, 2}
    assert full.log[-1]["ar_steps"] == 2
    part = train(tr, va, D2, TINY_NET, TINY, stop_after=1)
    resumed = train(tr, va, D2, TINY_NET, TINY, state=part)
    assert all(full.params[k].tobytes() == resumed.params[k].tobytes() for k in full.params)
    assert [r["val_crps"] for r in full.log] == [r["val_crps"] for r in resumed.log]


def test_collapse_monitor_fires_with_frozen_zero_noise(toy_trajs):
    tr, va = toy_trajs
    params = net.init_params(TINY_NET, D2, 0)
    params["noise.w"][:] = 0
    params["noise.b"][:] = 0
    cfg = replace(TINY, stages=(Stage(6, 1e-3, 1),), frozen=("noise.w", "noise.b"), warmup_epochs=2)
    st = train(tr, va, D2, TINY_NET, cfg, init_params=params)
    assert st.log[4]["event"].startswith("collapse-warning")
    assert all(r["val_spread"] == 0 for r in st.log)
    assert np.all(st.params["noise.w"] == 0)
    # warmup configured: the biased estimator with the larger ensemble takes over
    assert st.log[5]["estimator"] == "biased" and st.log[5]["members"] == cfg.warmup_members


def test_collapse_monitor_quiet_on_normal_run(toy_trajs):
    tr, va = toy_trajs
    st = train(tr, va, D2, TINY_NET, replace(TINY, stages=(Stage(5, 1e-3, 1),)))
    assert st.events == []
    assert min(r["val_spread"] for r in st.log) > 0.01


def test_numeric_failure_keeps_last_good(toy_trajs):
    tr, va = toy_trajs
    bad = [Trajectory(t.states.copy(), t.forcings, t.statics, 0) for t in tr]
    for t in bad:
        t.states[:] = 3e38
    params = net.init_params(TINY_NET, D2, 0)
    from crpslam.trainer import TrainState

    state = TrainState(params={k: v.copy() for k, v in params.items()}, adam=Adam(params))
    with np.errstate(all="ignore"), pytest.raises(NumericError):
        train(bad, va, D2, TINY_NET, TINY, state=state)
    assert all(state.params[k].tobytes() == params[k].tobytes() for k in params)


# reference run ------------------------------------------------------------------------


def test_reference_train_loss_decreases(reference):
    log = reference[1].log
    assert len(log) == 120
    assert log[-1]["train_loss"] < log[0]["train_loss"]


def conditional_std(ds, windows, realizations=16):
    """One-step spread of the toy system itself, in normalised units, from re-simulated forcing draws."""
    from crpslam.rng import derive_seed
    from crpslam.toy_atmos import crop, make_orography, simulate_parent

    cfg = ds.config
    orography = make_orography(cfg, derive_seed(ds.seed, "geography"))
    one = replace(cfg, steps=2)
    variances = []
    for i, t in windows:
        seed = ds.seeds["val"][i]
        parent, phase0 = simulate_parent(cfg, seed, orography)
        draws = np.stack([crop(cfg, simulate_parent(one, derive_seed(seed, "redraw", member=r), orography,
                                                     parent[t], phase0 + t)[0][1]) for r in range(realizations)])
        draws = ds.stats.normalize(ds.domain.crop_interior(draws))
        variances.append(np.mean(draws.var(axis=0, ddof=1)))
    return float(np.sqrt(np.mean(variances)))


def test_reference_spread_not_collapsed(reference):
    from crpslam.trainer import validation_windows

    ds, state, _, tcfg = reference
    windows = validation_windows(ds.normalized("val"), 6)
    ratio = state.log[-1]["val_spread"] / conditional_std(ds, windows)
    assert 0.3 <= ratio <= 2.0, ratio
