import math
import os

import numpy as np
import pytest

from rclab.errors import (ContractError, DegenerateComparison, DivergedPath,
                          InvalidControl, UnstableMoment)
from rclab.sde import (ControlledSDE, ControlSet, FlowConfig, audit_sde,
                       constant_policy, estimate_flow_lipschitz,
                       feedback_policy, load_bundle, moment_report,
                       piecewise_policy, save_bundle, simulate_paths)


def test_zero_dynamics_paths_are_constant(still_sde, null_policy):
    b = simulate_paths(still_sde, null_policy, 0.0, [3.0], steps=20,
                       n_paths=16, seed=5)
    assert np.all(b.paths == 3.0)
    assert np.array_equal(b.paths[:, 0, :], np.full((16, 1), 3.0))


def test_gbm_terminal_mean_matches_lognormal_oracle(gbm_sde, null_policy):
    # E[X_T] = exp(0.05) for dX = 0.05 X dt + 0.2 X dB, X_0 = 1
    b = simulate_paths(gbm_sde, null_policy, 0.0, [1.0], steps=1000,
                       n_paths=100_000, seed=31)
    xt = b.paths[:, -1, 0]
    se = xt.std(ddof=1) / np.sqrt(len(xt))
    assert abs(xt.mean() - math.exp(0.05)) < 3 * se + 2e-3


def test_same_seed_bitwise_identical(gbm_sde, null_policy):
    b1 = simulate_paths(gbm_sde, null_policy, 0.0, [1.0], 50, 200, seed=7)
    b2 = simulate_paths(gbm_sde, null_policy, 0.0, [1.0], 50, 200, seed=7)
    assert np.array_equal(b1.paths, b2.paths)
    assert np.array_equal(b1.brownian_increments, b2.brownian_increments)


def test_brownian_increment_statistics(gbm_sde, null_policy):
    b = simulate_paths(gbm_sde, null_policy, 0.0, [1.0], 100, 5000, seed=3)
    diag = b.brownian_diagnostics()
    assert diag["mean_z"] < 5.0
    assert diag["var_z"] < 5.0


def test_bundle_is_immutable(gbm_sde, null_policy):
    b = simulate_paths(gbm_sde, null_policy, 0.0, [1.0], 10, 8, seed=1)
    with pytest.raises(ValueError):
        b.paths[0, 0, 0] = 99.0


def test_diverging_coefficients_raise_with_step_index(null_policy):
    def drift(t, x, v):
        with np.errstate(over="ignore", invalid="ignore"):
            return x ** 3  # explodes

    def diffusion(t, x, v):
        return np.zeros((x.shape[0], 1, 1))

    sde = ControlledSDE(1, 1, 1, drift, diffusion, 1.0, 1.0, [(-10, 10)])
    with pytest.raises(DivergedPath) as err:
        simulate_paths(sde, null_policy, 0.0, [5.0], steps=60, n_paths=4,
                       seed=2)
    assert err.value.step_index >= 0


def test_policy_outside_control_set_rejected(still_sde):
    cs = ControlSet.box([0.0], [1.0])
    rogue = feedback_policy(cs, lambda t, x: np.full((x.shape[0], 1), 2.0))
    with pytest.raises(InvalidControl):
        simulate_paths(still_sde, rogue, 0.0, [0.0], 5, 4, seed=1)


def test_piecewise_policy_switches_at_breakpoints():
    cs = ControlSet.box([-1.0], [1.0])
    pol = piecewise_policy(cs, [0.5], [[-1.0], [1.0]])
    x = np.zeros((3, 1))
    assert np.all(pol.controls_at(0.2, x) == -1.0)
    assert np.all(pol.controls_at(0.7, x) == 1.0)


# -- flow Lipschitz estimate -------------------------------------------------

def test_flow_identical_inputs_degenerate(gbm_sde, null_policy):
    with pytest.raises(DegenerateComparison):
        estimate_flow_lipschitz(gbm_sde, (null_policy, null_policy),
                                ([1.0], [1.0]))


def test_flow_ratio_identity_for_zero_dynamics(still_sde, null_policy):
    r = estimate_flow_lipschitz(still_sde, (null_policy, null_policy),
                                ([1.0], [2.0]))
    assert r == pytest.approx(1.0, abs=1e-12)


def test_flow_ratio_stable_under_refinement(gbm_sde, null_policy):
    ratios = [estimate_flow_lipschitz(
        gbm_sde, (null_policy, null_policy), ([1.0], [1.1]),
        FlowConfig(steps=n, n_paths=4000, seed=9)) for n in (250, 500, 1000)]
    assert all(np.isfinite(ratios))
    # coupled-flow estimate converges: refinement changes it by < 10%
    assert max(ratios) / min(ratios) < 1.1


# -- moment report -----------------------------------------------------------

def test_moment_exact_for_constant_paths(still_sde, null_policy):
    b = simulate_paths(still_sde, null_policy, 0.0, [2.0], 10, 64, seed=4)
    rep = moment_report(b, q=1)
    assert rep.sup_moment == 4.0
    assert rep.bound_ok


def test_moment_stable_across_ensemble_sizes(gbm_sde, null_policy):
    b_small = simulate_paths(gbm_sde, null_policy, 0.0, [1.0], 100, 10_000,
                             seed=11)
    b_big = simulate_paths(gbm_sde, null_policy, 0.0, [1.0], 100, 100_000,
                           seed=11)
    m_small = moment_report(b_small, q=1).sup_moment
    m_big = moment_report(b_big, q=1).sup_moment
    assert abs(m_small - m_big) / m_big < 0.10


def test_moment_rejects_excessive_order(still_sde, null_policy):
    b = simulate_paths(still_sde, null_policy, 0.0, [1.0], 5, 8, seed=1)
    with pytest.raises(ContractError):
        moment_report(b, q=3)  # 2q = 6 > default max 4


def test_moment_flags_heavy_tail_instability(still_sde, null_policy):
    b = simulate_paths(still_sde, null_policy, 0.0, [1.0], 5, 64, seed=1)
    spiked = np.array(b.paths)
    spiked[-1] = 50.0  # one extreme path doubles the estimate
    from dataclasses import replace
    bad = replace(b, paths=spiked)
    with pytest.raises(UnstableMoment):
        moment_report(bad, q=2)


# -- coefficient audit ---------------------------------------------------------

def test_audit_accepts_correct_lipschitz_declaration(gbm_sde):
    rep = audit_sde(gbm_sde, ControlSet.box([0.0], [0.0]), n_points=2048)
    assert rep.ok
    assert rep.lipschitz_hat <= 0.26


def test_audit_flags_understated_lipschitz():
    def drift(t, x, v):
        return 3.0 * x

    def diffusion(t, x, v):
        return np.zeros((x.shape[0], 1, 1))

    sde = ControlledSDE(1, 1, 1, drift, diffusion, 1.0, 0.5, [(-2, 2)])
    rep = audit_sde(sde, ControlSet.box([0.0], [0.0]), n_points=1024)
    assert not rep.ok
    assert rep.lipschitz_hat > 2.9
    assert rep.worst_pair is not None


# -- cache file ----------------------------------------------------------------

def test_bundle_cache_roundtrip_bit_exact(tmp_path, gbm_sde, null_policy):
    b = simulate_paths(gbm_sde, null_policy, 0.0, [1.0], 30, 100, seed=99)
    path = tmp_path / "bundle.rclb"
    save_bundle(b, path)
    with open(path, "rb") as fh:
        assert fh.read(5) == b"RCLB1"
    loaded = load_bundle(path)
    assert np.array_equal(loaded.paths, b.paths)
    assert np.array_equal(loaded.brownian_increments, b.brownian_increments)
    assert np.array_equal(loaded.time_grid, b.time_grid)
    assert loaded.seed == b.seed


def test_bundle_cache_rejects_garbage(tmp_path):
    path = tmp_path / "junk.rclb"
    path.write_bytes(b"NOTRC" + os.urandom(64))
    with pytest.raises(ContractError):
        load_bundle(path)
