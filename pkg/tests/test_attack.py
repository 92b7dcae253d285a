import numpy as np
import pytest

from securefl import attack, nn
from securefl.data import derive_rng, synthetic_images
from securefl.ring import encode_fixed

from conftest import plaintext_windows, transcript_hits

MLP = nn.Architecture.from_tag("mlp:1x4x4:8:3")


def victim(seed=0, n=1, arch=MLP):
    rng = np.random.default_rng(seed)
    params = nn.init_params(arch, rng)
    x = rng.standard_normal((n,) + arch.input_shape)
    y = rng.integers(0, arch.num_classes, size=n)
    return params, x, y


def tv_oracle(x):
    total = 0.0
    h, w = x.shape[-2:]
    for idx in np.ndindex(x.shape[:-2]):
        img = x[idx]
        for i in range(h):
            for j in range(w):
                if j + 1 < w:
                    total += abs(img[i, j + 1] - img[i, j])
                if i + 1 < h:
                    total += abs(img[i + 1, j] - img[i, j])
    return total


def test_local_capture_is_the_exact_gradient():
    params, x, y = victim()
    upd = attack.capture_update("local", params, x, y)
    _, g = nn.backward(params, x, y)
    assert np.array_equal(upd.tensors.flat(), g.flat())
    assert np.array_equal(upd.pseudo_gradient().flat(), g.flat())


def test_fed_plain_capture_is_the_victims_own_delta():
    params, x, y = victim(1)
    others = [victim(2)[1:], victim(3)[1:]]
    upd = attack.capture_update("fed-plain", params, x, y, others=others, local_steps=3, lr=0.05)
    want = attack.local_update(params, x, y, 3, 0.05).zip_map(params, np.subtract)
    assert np.array_equal(upd.tensors.flat(), want.flat())
    assert np.array_equal(upd.pseudo_gradient().flat(), -want.flat())


def test_fed_secure_capture_is_the_aggregate_and_hides_the_victim():
    params, x, y = victim(4)
    others = [victim(5)[1:], victim(6)[1:]]
    upd = attack.capture_update("fed-secure", params, x, y, others=others, local_steps=2, lr=0.1)
    locals_ = [attack.local_update(params, ox, oy, 2, 0.1) for ox, oy in [(x, y)] + others]
    mean = np.mean([w.flat() for w in locals_], axis=0) - params.flat()
    assert np.max(np.abs(upd.tensors.flat() - mean)) <= 3 * 2.0**-16
    assert upd.network is not None and upd.network.transcript
    plain = [encode_fixed(np.concatenate([w.flat(), [1.0]])).data for w in locals_]
    assert transcript_hits(plaintext_windows(plain), upd.network.transcript) == 0


def test_unknown_scenario():
    params, x, y = victim()
    with pytest.raises(ValueError):
        attack.capture_update("eavesdrop", params, x, y)


def test_zero_iterations_returns_the_initialization():
    params, x, y = victim()
    upd = attack.capture_update("local", params, x, y)
    rep = attack.invert(upd, params, attack.AttackConfig(iterations=0, seed=9), truth=x)
    init = derive_rng(9, "attack-restart", 0).standard_normal((1,) + MLP.input_shape)
    assert np.array_equal(rep.reconstructions[0], init)
    assert rep.best_mse == pytest.approx(np.mean((init - x) ** 2))


def test_analytic_label_recovery():
    for seed in range(100):
        params, x, y = victim(seed, arch=nn.Architecture.from_tag("mlp:1x4x4:8:5"))
        assert attack.recover_label(attack.capture_update("local", params, x, y).tensors) == y[0]


def test_evaluate_reconstruction():
    rng = np.random.default_rng(0)
    truth = rng.uniform(size=(3, 1, 4, 4))
    assert attack.evaluate_reconstruction(truth, truth)["mse"] == 0.0
    assert attack.evaluate_reconstruction(truth + 1.0, truth)["mse"] == pytest.approx(1.0)
    other = rng.uniform(size=truth.shape)
    cost = [[np.mean((other[i] - truth[j]) ** 2) for j in range(3)] for i in range(3)]
    best = min(np.mean([cost[i][p[i]] for i in range(3)])
               for p in [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)])
    assert attack.evaluate_reconstruction(other, truth)["mse"] == pytest.approx(best)
    assert attack.evaluate_reconstruction(truth[[2, 0, 1]], truth)["mse"] == 0.0
    with pytest.raises(ValueError):
        attack.evaluate_reconstruction(truth[:2], truth)


def test_total_variation_matches_loops_and_subgradient():
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 5))
    tv, g = attack.total_variation(x)
    assert tv == pytest.approx(tv_oracle(x), abs=1e-12)
    h = 1e-6
    for idx in [(0, 0, 1, 2), (1, 0, 3, 4), (0, 0, 0, 0)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        assert (tv_oracle(xp) - tv_oracle(xm)) / (2 * h) == pytest.approx(g[idx], abs=1e-6)
    assert attack.total_variation(np.ones((1, 4, 4)))[0] == 0.0


def test_cosine_objective_input_gradient():
    params, x, y = victim(3)
    target = attack.capture_update("local", params, *victim(8)[1:]).tensors.flat()
    obj, dx, _ = attack.cosine_objective(params, target, x, y)
    h = 1e-5
    idx = (0, 0, 1, 2)
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    num = (attack.cosine_objective(params, target, xp, y)[0] - attack.cosine_objective(params, target, xm, y)[0]) / (2 * h)
    assert dx[idx] == pytest.approx(num, rel=1e-3, abs=1e-6)
    assert 0.0 <= obj <= 2.0


def test_objective_trajectory_is_monotone_and_seeded():
    params, x, y = victim(2)
    upd = attack.capture_update("local", params, x, y)
    cfg = attack.AttackConfig(iterations=40, restarts=2, seed=1)
    a = attack.invert(upd, params, cfg, truth=x)
    b = attack.invert(upd, params, cfg, truth=x)
    for traj in a.objective:
        assert all(later <= earlier for earlier, later in zip(traj, traj[1:]))
    assert a.restart_mse == b.restart_mse and a.best_mse == min(a.restart_mse)
    assert a.labels == [[int(y[0])]] * 2


def test_attack_recovers_a_small_mlp_input():
    params, x, y = victim(0, arch=nn.Architecture.from_tag("mlp:1x4x4:16:3"))
    upd = attack.capture_update("local", params, x, y)
    start = attack.invert(upd, params, attack.AttackConfig(iterations=0), truth=x).best_mse
    rep = attack.invert(upd, params, attack.AttackConfig(iterations=600, tv_weight=0.0), truth=x)
    assert rep.best_mse < 0.1 * start


def test_joint_label_mode_runs():
    params, x, y = victim(0, n=2)
    upd = attack.capture_update("local", params, x, y)
    rep = attack.invert(upd, params, attack.AttackConfig(iterations=5, batch_size=2, label_mode="joint"), truth=x)
    assert rep.reconstructions[0].shape == x.shape and len(rep.labels[0]) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        attack.AttackConfig(iterations=-1)
    with pytest.raises(ValueError):
        attack.AttackConfig(tv_weight=-1.0)
    with pytest.raises(ValueError):
        attack.AttackConfig(label_mode="guess")


def test_frechet_distance_zero_for_identical_sets():
    params = nn.init_params(MLP, np.random.default_rng(0))
    raw, _ = synthetic_images(6, np.random.default_rng(1), 4)
    x = attack._normalize(raw)
    assert attack.feature_frechet_distance(params, x, x) == pytest.approx(0.0, abs=1e-6)
    assert attack.feature_frechet_distance(params, x, x + 1.0) > 0.0


def test_trial_is_deterministic():
    setup = attack.BenchmarkSetup(kind="mlp", image_size=4, hidden=8, trials=1)
    cfg = attack.AttackConfig(iterations=10)
    assert attack.attack_trial(setup, cfg, 0) == attack.attack_trial(setup, cfg, 0)
