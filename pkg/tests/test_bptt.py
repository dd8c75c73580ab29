import numpy as np
import pytest

from condiff.bptt import bptt_through_rollout, sample_truncation
from condiff.finetune import AugmentedDrift, ExploratoryDistribution, make_reward_fn
from condiff.sde import ConfigurationError, RngStream, accumulate_kl, rollout
from condiff.worlds import make_world_w1


def tiny_setup(seed=0, batch=4, steps=8, hidden=(8, 8)):
    world = make_world_w1(horizon=1.0, steps=steps)
    rng = np.random.default_rng(seed)
    aug = AugmentedDrift(world, rng, embed_dim=3, hidden=hidden)
    contexts = np.array([0, 1, 0, 1])[:batch]
    labels = np.array([[0], [1], [2], [3]])[:batch]
    return world, aug, contexts, labels


def roll(world, aug, contexts, labels, stream):
    sched = world.noise_schedule()
    batch = rollout(aug.drift, sched, world.grid, world.gaussian_init(), contexts, labels, stream)
    return accumulate_kl(batch, aug.base_drift_fn(), aug.drift, sched, world.grid)


def objective_value(world, aug, contexts, labels, stream, gamma):
    batch = roll(world, aug, contexts, labels, stream)
    reward, _ = make_reward_fn(world, None, "oracle")(batch.terminal(), contexts, labels)
    return float(gamma * reward.mean() - batch.path_kl().mean())


class TestBpttGradients:
    def test_full_bptt_matches_finite_differences(self):
        world, aug, contexts, labels, = tiny_setup()
        pv = aug.param_vector
        rng = np.random.default_rng(42)
        pv.assign(0.15 * rng.standard_normal(pv.size))  # move off the degenerate zero init
        stream = RngStream(101)
        gamma = 1.5

        batch = roll(world, aug, contexts, labels, stream)
        grads, _ = bptt_through_rollout(
            batch, aug, world.noise_schedule(), make_reward_fn(world, None, "oracle"), gamma
        )
        flat = pv.pack(grads)

        base = pv.flatten()
        fd = np.empty_like(base)
        h = 1e-5
        for i in range(len(base)):
            p = base.copy()
            p[i] += h
            pv.assign(p)
            up = objective_value(world, aug, contexts, labels, stream, gamma)
            p[i] = base[i] - h
            pv.assign(p)
            dn = objective_value(world, aug, contexts, labels, stream, gamma)
            fd[i] = (up - dn) / (2 * h)
        pv.assign(base)

        denom = max(np.linalg.norm(fd), 1e-12)
        assert np.linalg.norm(flat - fd) / denom <= 1e-4
        assert np.max(np.abs(flat - fd) / np.maximum(np.abs(fd), 1e-6)) <= 1e-3

    def test_truncation_full_depth_is_bitwise_untruncated(self):
        world, aug, contexts, labels = tiny_setup(seed=3)
        pv = aug.param_vector
        pv.assign(0.1 * np.random.default_rng(5).standard_normal(pv.size))
        batch = roll(world, aug, contexts, labels, RngStream(7))
        reward_fn = make_reward_fn(world, None, "oracle")
        sched = world.noise_schedule()
        full, _ = bptt_through_rollout(batch, aug, sched, reward_fn, 1.0, truncation=None)
        at_L, _ = bptt_through_rollout(batch, aug, sched, reward_fn, 1.0, truncation=world.grid.steps)
        for name in full:
            assert np.array_equal(full[name], at_L[name])

    def test_truncation_zero_is_one_step_chain_rule(self):
        # at the zero initialization the correction is the zero map, so the
        # K=0 gradient of the final bias is exactly (gamma/n) sum_k dr_k * dt
        world, aug, contexts, labels = tiny_setup(seed=4)
        gamma = 2.0
        batch = roll(world, aug, contexts, labels, RngStream(9))
        reward_fn = make_reward_fn(world, None, "oracle")
        grads, _ = bptt_through_rollout(batch, aug, world.noise_schedule(), reward_fn, gamma, truncation=0)
        _, dr = reward_fn(batch.terminal(), contexts, labels)
        n = len(contexts)
        expected_bias = (gamma / n) * dr.sum(axis=0) * world.grid.dt
        last = aug.net.n_layers - 1
        assert np.allclose(grads[f"net.b{last}"], expected_bias, rtol=1e-12)
        # and nothing flows into the hidden layers through the zero output layer
        assert np.allclose(grads["net.w0"], 0.0)

    def test_gamma_zero_gradient_vanishes_at_initialization(self):
        world, aug, contexts, labels = tiny_setup(seed=6)
        batch = roll(world, aug, contexts, labels, RngStream(11))
        grads, stats = bptt_through_rollout(
            batch, aug, world.noise_schedule(), make_reward_fn(world, None, "oracle"), 0.0
        )
        flat = aug.param_vector.pack(grads)
        assert np.linalg.norm(flat) <= 1e-8
        assert stats["mean_kl"] == 0.0

    def test_requires_recorded_batch(self):
        world, aug, contexts, labels = tiny_setup(seed=8)
        batch = roll(world, aug, contexts, labels, RngStream(13))
        batch.noises = None
        with pytest.raises(ConfigurationError):
            bptt_through_rollout(batch, aug, world.noise_schedule(), make_reward_fn(world, None, "oracle"), 1.0)

    def test_truncation_out_of_range_rejected(self):
        world, aug, contexts, labels = tiny_setup(seed=9)
        batch = roll(world, aug, contexts, labels, RngStream(15))
        with pytest.raises(ConfigurationError):
            bptt_through_rollout(
                batch, aug, world.noise_schedule(), make_reward_fn(world, None, "oracle"), 1.0, truncation=99
            )


class TestTruncationLaw:
    def test_laws(self):
        rng = np.random.default_rng(0)
        assert sample_truncation("full", 16, rng) is None
        assert sample_truncation(None, 16, rng) is None
        assert sample_truncation(5, 16, rng) == 5
        draws = {sample_truncation("uniform", 4, rng) for _ in range(200)}
        assert draws == {0, 1, 2, 3, 4}
        with pytest.raises(ConfigurationError):
            sample_truncation(17, 16, rng)


class TestAugmentedDriftInit:
    def test_initialization_identity_paths_match_pretrained(self):
        world, aug, contexts, labels = tiny_setup(seed=10)
        sched = world.noise_schedule()
        shared = RngStream(21)
        guided = rollout(aug.drift, sched, world.grid, world.gaussian_init(), contexts, labels, shared)
        plain = rollout(
            world.drift_fn(), sched, world.grid, world.gaussian_init(), contexts, labels, shared
        )
        assert np.max(np.abs(guided.states - plain.states)) == 0.0

    def test_null_rows_give_finite_correction(self):
        world, aug, contexts, labels = tiny_setup(seed=11)
        h = aug.correction(0.5, np.zeros((2, 1)), np.array([-1, -1]), np.array([[-1], [-1]]))
        assert np.all(h == 0.0)  # zero-initialized output layer

    def test_exploratory_distribution_uniform_product(self):
        world, *_ = tiny_setup()
        pi = ExploratoryDistribution.for_world(world)
        cells = pi.cells()
        assert len(cells) == 2 * 4
        rng = np.random.default_rng(1)
        c, y = pi.sample(8000, rng)
        assert y.shape == (8000, 1)
        counts = np.bincount(c * 4 + y[:, 0], minlength=8)
        assert counts.min() > 8000 / 8 * 0.8
