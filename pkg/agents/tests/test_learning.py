import math
from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from agents.services.learning import (
    CachedTuple,
    Caches,
    PPOConfig,
    PreferencePair,
    RewardModel,
    RLSample,
    RMTrainConfig,
    SFTConfig,
    categorical_kl,
    composite_objective,
    compute_advantages,
    cross_entropy_grad,
    discounted_returns,
    forward_kl,
    near_threshold_sample,
    pairwise_accuracy,
    pairwise_loss,
    policy_kl,
    policy_kl_grad,
    ppo_objective,
    ppo_update,
    preference_pairs,
    rm_train,
    schema_violation_rate,
    sft_anchor_step,
    sft_fit,
    two_stage_update,
)
from agents.services.toyworld import (
    DEFAULT_CATALOG,
    FINISH,
    EdgePolicy,
    StructuredAction,
    Task,
    generate_tasks,
    initial_context,
    malformed_action,
    sft_examples,
)
from lab.exceptions import UsageError
from lab.services.net_model import GOOD, get_regime

FD_STEP = 1e-6


def slot_task():
    names = [FINISH, 'measure_rtt', 'allocate_slice', 'verify_path']
    return Task(
        id='fixture',
        query='fixture task',
        tools=tuple(DEFAULT_CATALOG.spec(n) for n in sorted(names, key=DEFAULT_CATALOG.index.get)),
        target=(
            StructuredAction('allocate_slice', {'profile': 'embb', 'priority': 'high'}),
            StructuredAction(FINISH),
        ),
        prior_steps=(),
        anchor='query_link_stats',
    )


def random_policy(seed, scale=0.3):
    size = EdgePolicy().theta.size
    return EdgePolicy(theta=np.random.default_rng(seed).normal(scale=scale, size=size))


def finite_difference(fn, theta, indices):
    numeric = []
    for i in indices:
        plus, minus = theta.copy(), theta.copy()
        plus[i] += FD_STEP
        minus[i] -= FD_STEP
        numeric.append((fn(plus) - fn(minus)) / (2 * FD_STEP))
    return np.array(numeric)


def checked_indices(analytic, rng, count=40):
    nonzero = np.flatnonzero(analytic)
    picked = rng.choice(nonzero, size=min(count, nonzero.size), replace=False)
    return np.concatenate([picked, rng.choice(analytic.size, size=10, replace=False)])


class RewardModelTests(SimpleTestCase):

    def setUp(self):
        self.task = slot_task()
        self.ctx = initial_context(self.task)
        self.good = self.task.target[0]
        self.bad = StructuredAction('verify_path')

    def test_zero_model_scores_zero(self):
        rm = RewardModel()
        self.assertEqual(rm.score(self.task, self.ctx, self.good), 0.0)
        self.assertEqual(rm.score(self.task, self.ctx, malformed_action()), 0.0)

    def test_loss_at_zero_init_is_ln2(self):
        pairs = [PreferencePair(self.task, self.ctx, self.good, self.bad)]
        result = rm_train(RewardModel(), pairs, RMTrainConfig(epochs=1))
        self.assertAlmostEqual(result.train_losses[0], math.log(2.0))

    def test_invalid_rejected_action_gets_margin(self):
        pairs = [PreferencePair(self.task, self.ctx, self.good, malformed_action())]
        result = rm_train(RewardModel(), pairs, RMTrainConfig(epochs=1, schema_margin=1.0))
        self.assertAlmostEqual(result.train_losses[0], math.log1p(math.exp(-1.0)))

    def test_training_generalizes_to_held_out_tasks(self):
        def wrong_tool_pairs(tasks):
            pairs = []
            for task, ctx, action in sft_examples(tasks):
                wrong = next(t for t in task.tools if t.name != action.tool)
                pairs.append(PreferencePair(task, ctx, action, StructuredAction(wrong.name, wrong.canonical_args())))
            return pairs

        train, held_out = wrong_tool_pairs(generate_tasks(100, seed=4)), wrong_tool_pairs(generate_tasks(40, seed=99))
        result = rm_train(RewardModel(), train, RMTrainConfig(epochs=100))
        self.assertLess(result.train_losses[-1], result.train_losses[0])
        self.assertGreaterEqual(pairwise_accuracy(result.rm, held_out), 0.9)

    def test_pairwise_loss(self):
        np.testing.assert_allclose(pairwise_loss([0.0, 50.0]), [math.log(2.0), math.log1p(math.exp(-50.0))])

    def test_empty_pairs(self):
        with self.assertRaises(UsageError):
            rm_train(RewardModel(), [])

    def test_preference_pairs_skip_identical_actions(self):
        state = get_regime(GOOD).midpoint
        same = CachedTuple(self.task, self.ctx, self.good, StructuredAction(self.good.tool, dict(self.good.args)),
                           0.0, state)
        different = CachedTuple(self.task, self.ctx, self.bad, self.good, 0.0, state)
        pairs = preference_pairs([same, different])
        self.assertEqual(len(pairs), 1)
        self.assertEqual(pairs[0].preferred, self.good)
        self.assertEqual(pairs[0].rejected, self.bad)


class ReturnsAndCachesTests(SimpleTestCase):

    def test_discounted_returns(self):
        self.assertEqual(discounted_returns([1.0, 1.0, 1.0], 0.5), [1.75, 1.5, 1.0])
        self.assertEqual(discounted_returns([2.0, 3.0], 0.0), [2.0, 3.0])
        self.assertEqual(discounted_returns([], 0.9), [])
        with self.assertRaises(UsageError):
            discounted_returns([1.0], 1.5)

    def test_caches_evict_oldest_first(self):
        task = slot_task()
        ctx = initial_context(task)
        caches = Caches(rm_capacity=3, rl_capacity=2)
        for i in range(5):
            caches.add_rl_sample(RLSample(task, ctx, task.target[0], -1.0, float(i), f'ep{i}', 0))
        self.assertEqual([s.reward for s in caches.rl_snapshot()], [3.0, 4.0])
        with self.assertRaises(UsageError):
            Caches(rm_capacity=0)

    def test_near_threshold_sample_size(self):
        rng = np.random.default_rng(0)
        steps = [(0.1, 0.0)] * 10_000
        picked = near_threshold_sample(steps, delta=0.2, fraction=0.05, rng=rng)
        self.assertEqual(len(picked), 500)
        self.assertEqual(picked, sorted(set(picked)))

    def test_near_threshold_sample_band(self):
        rng = np.random.default_rng(0)
        steps = [(1.0, 0.0), (0.5, 0.0), (-0.1, 0.0), (0.0, 0.0)]
        self.assertEqual(near_threshold_sample(steps, delta=0.5, fraction=1.0, rng=rng), [1, 3])
        self.assertEqual(near_threshold_sample(steps[:1], delta=0.5, fraction=1.0, rng=rng), [])
        self.assertEqual(near_threshold_sample(steps, delta=0.5, fraction=0.05, rng=rng), [])

    def test_advantages_of_constant_rewards_are_zero(self):
        task = slot_task()
        ctx = initial_context(task)
        batch = [RLSample(task, ctx, task.target[0], -1.0, 1.0, f'ep{i}', 0) for i in range(4)]
        np.testing.assert_allclose(compute_advantages(batch, 0.99), np.zeros(4))


class GradientTests(SimpleTestCase):

    def setUp(self):
        self.task = slot_task()
        self.ctx = initial_context(self.task)
        self.rng = np.random.default_rng(11)

    def test_policy_kl_gradient(self):
        policy, other = random_policy(1), random_policy(2)
        dist_q = other.distribution(self.task, self.ctx)
        analytic = policy_kl_grad(policy, policy.distribution(self.task, self.ctx), dist_q)

        def kl(theta):
            return policy_kl(EdgePolicy(theta=theta).distribution(self.task, self.ctx), dist_q)

        indices = checked_indices(analytic, self.rng)
        np.testing.assert_allclose(finite_difference(kl, policy.theta, indices), analytic[indices],
                                   rtol=1e-5, atol=1e-8)

    def test_cross_entropy_gradient(self):
        policy, reference = random_policy(3), random_policy(4)
        dist_ref = reference.distribution(self.task, self.ctx)
        analytic = cross_entropy_grad(policy, dist_ref, policy.distribution(self.task, self.ctx))

        # H(ref, pi) and KL(ref || pi) differ by a constant in theta
        def forward(theta):
            return policy_kl(dist_ref, EdgePolicy(theta=theta).distribution(self.task, self.ctx))

        indices = checked_indices(analytic, self.rng)
        np.testing.assert_allclose(finite_difference(forward, policy.theta, indices), analytic[indices],
                                   rtol=1e-5, atol=1e-8)

    def test_ppo_objective_gradient(self):
        old = random_policy(5)
        policy = EdgePolicy(theta=old.theta + np.random.default_rng(6).normal(scale=0.05, size=old.theta.size))
        ctx2 = self.ctx.advanced()
        actions = [
            (self.ctx, self.task.target[0]),
            (self.ctx, StructuredAction('allocate_slice', {'profile': 'mmtc', 'priority': 'low'})),
            (self.ctx, malformed_action()),
            (ctx2, StructuredAction(FINISH)),
            (ctx2, StructuredAction('verify_path')),
        ]
        batch = [
            RLSample(self.task, ctx, action, old.log_prob(self.task, ctx, action), 0.0, f'ep{i}', 0)
            for i, (ctx, action) in enumerate(actions)
        ]
        advantages = np.array([1.0, -0.5, -1.2, 0.7, 0.3])
        _, analytic, _ = ppo_objective(policy, old, batch, advantages, 0.2, 0.05)

        def objective(theta):
            return ppo_objective(EdgePolicy(theta=theta), old, batch, advantages, 0.2, 0.05)[0]

        indices = checked_indices(analytic, self.rng, count=60)
        np.testing.assert_allclose(finite_difference(objective, policy.theta, indices), analytic[indices],
                                   rtol=1e-5, atol=1e-8)


class PPOTests(SimpleTestCase):

    def setUp(self):
        self.task = slot_task()
        self.ctx = initial_context(self.task)
        self.policy = random_policy(7)
        rng = np.random.default_rng(8)
        self.batch = []
        for i in range(16):
            action, logp = self.policy.sample(self.task, self.ctx, rng)
            reward = 1.0 if action == self.task.target[0] or action.tool == 'allocate_slice' else -1.0
            self.batch.append(RLSample(self.task, self.ctx, action, logp, reward, f'ep{i}', 0))

    def test_first_epoch_starts_at_ratio_one_and_zero_kl(self):
        _, stats = ppo_update(self.policy, self.batch, PPOConfig(epochs=2))
        self.assertAlmostEqual(stats['initial'].mean_ratio, 1.0, places=12)
        self.assertAlmostEqual(stats['initial'].kl, 0.0, places=12)
        self.assertEqual(stats['initial'].clip_frac, 0.0)

    def test_update_improves_the_surrogate(self):
        updated, stats = ppo_update(self.policy, self.batch, PPOConfig(lr=0.05, epochs=4))
        self.assertGreater(stats['final'].objective, stats['initial'].objective)
        self.assertFalse(np.array_equal(updated.theta, self.policy.theta))

    def test_rejects_empty_batch_and_missing_logp(self):
        with self.assertRaises(UsageError):
            ppo_update(self.policy, [], PPOConfig())
        bare = [RLSample(self.task, self.ctx, self.task.target[0], None, 1.0, 'ep', 0)]
        with self.assertRaises(UsageError):
            ppo_update(self.policy, bare, PPOConfig())

    def test_config_validation(self):
        with self.assertRaises(UsageError):
            PPOConfig(clip_eps=0.0)
        with self.assertRaises(UsageError):
            PPOConfig(anchor_period=0)

    def test_anchor_schedule(self):
        caches = Caches()
        for sample in self.batch:
            caches.add_rl_sample(sample)
        reference = EdgePolicy()
        anchors = [(self.task, self.ctx)]
        every = PPOConfig(updates_per_window=3, epochs=1, anchor_period=1)
        _, rows = two_stage_update(self.policy, caches, reference, every, anchors)
        self.assertEqual([r.anchored for r in rows], [True, True, True])
        self.assertEqual([r.update for r in rows], [1, 2, 3])

        rare = PPOConfig(updates_per_window=2, epochs=1, anchor_period=10)
        _, rows = two_stage_update(self.policy, caches, reference, rare, anchors, start_update=9)
        self.assertEqual([r.anchored for r in rows], [True, False])

        _, rows = two_stage_update(self.policy, caches, reference, rare, anchors)
        self.assertFalse(any(r.anchored for r in rows))

    def test_two_stage_update_needs_samples(self):
        with self.assertRaises(UsageError):
            two_stage_update(self.policy, Caches(), EdgePolicy(), PPOConfig())

    def one_sample(self, ratio):
        action = self.task.target[0]
        logp = self.policy.log_prob(self.task, self.ctx, action) - math.log(ratio)
        return [RLSample(self.task, self.ctx, action, logp, 0.0, 'ep', 0)]

    def test_unit_ratio_surrogate_is_the_mean_advantage(self):
        batch = [RLSample(s.task, s.ctx, s.action, self.policy.log_prob(s.task, s.ctx, s.action), s.reward,
                          s.episode, s.step) for s in self.batch]
        advantages = np.linspace(-1.0, 2.0, len(batch))
        _, _, stats = ppo_objective(self.policy, self.policy, batch, advantages, 0.2, 0.05)
        self.assertAlmostEqual(stats.surrogate, advantages.mean(), places=12)
        self.assertAlmostEqual(stats.kl, 0.0, places=12)
        self.assertAlmostEqual(stats.objective, advantages.mean(), places=12)
        self.assertEqual(stats.clip_frac, 0.0)

    def test_clipped_ratios_are_bounded_and_carry_no_gradient(self):
        eps = 0.2
        for ratio, adv, bound in ((1.5, 1.0, 1.0 + eps), (0.5, -1.0, 1.0 - eps)):
            value, grad, stats = ppo_objective(self.policy, self.policy, self.one_sample(ratio), [adv], eps, 0.0)
            self.assertAlmostEqual(value, bound * adv)
            self.assertEqual(stats.clip_frac, 1.0)
            self.assertFalse(np.any(grad))

    def test_ratios_moving_against_the_advantage_keep_their_gradient(self):
        for ratio, adv in ((1.5, -1.0), (0.5, 1.0)):
            value, grad, stats = ppo_objective(self.policy, self.policy, self.one_sample(ratio), [adv], 0.2, 0.0)
            self.assertAlmostEqual(value, ratio * adv)
            self.assertEqual(stats.clip_frac, 0.0)
            self.assertTrue(np.any(grad))

    def test_composite_with_zero_weights_is_the_weighted_advantage(self):
        older = random_policy(13)
        advantages = compute_advantages(self.batch, 0.99)
        ratios = np.array([
            math.exp(self.policy.log_prob(s.task, s.ctx, s.action) - older.log_prob(s.task, s.ctx, s.action))
            for s in self.batch
        ])
        value = composite_objective(self.policy, older, EdgePolicy(), self.batch, eta=0.0, mu=0.0)
        self.assertAlmostEqual(value, float(np.mean(ratios * advantages)), places=10)
        same = composite_objective(self.policy, self.policy, self.policy, self.batch, eta=0.0, mu=0.0)
        self.assertAlmostEqual(same, float(np.mean(advantages)), places=10)

    def test_composite_kl_terms_vanish_at_the_reference(self):
        plain = composite_objective(self.policy, self.policy, self.policy, self.batch, eta=0.0, mu=0.0)
        weighted = composite_objective(self.policy, self.policy, self.policy, self.batch, eta=3.0, mu=7.0)
        self.assertAlmostEqual(weighted, plain, places=12)
        penalized = composite_objective(self.policy, self.policy, EdgePolicy(), self.batch, eta=0.0, mu=1.0)
        expected = plain - forward_kl(self.policy, EdgePolicy(), [(s.task, s.ctx) for s in self.batch])
        self.assertAlmostEqual(penalized, expected, places=10)

    def test_categorical_kl(self):
        self.assertAlmostEqual(categorical_kl(np.array([1.0, 0.0]), np.array([0.5, 0.5])), math.log(2.0))
        self.assertEqual(categorical_kl(np.array([0.3, 0.7]), np.array([0.3, 0.7])), 0.0)

    def test_anchoring_keeps_the_policy_valid_and_near_the_reference(self):
        reference, _ = sft_fit(EdgePolicy(), sft_examples([self.task]), SFTConfig(epochs=20))
        caches = Caches()
        for i in range(16):
            action, reward = (malformed_action(), 1.0) if i % 2 else (self.task.target[0], -1.0)
            caches.add_rl_sample(RLSample(self.task, self.ctx, action, None, reward, f'ep{i}', 0))
        anchors = [(self.task, self.ctx)]
        drifting = PPOConfig(lr=0.5, epochs=4, updates_per_window=5, anchor=False)
        free, _ = two_stage_update(reference.copy(), caches, reference, drifting, anchors)
        anchored, _ = two_stage_update(
            reference.copy(), caches, reference, replace(drifting, anchor=True, anchor_period=1, anchor_steps=3),
            anchors)
        self.assertLess(schema_violation_rate(anchored, anchors), schema_violation_rate(free, anchors))
        self.assertGreater(schema_violation_rate(free, anchors), schema_violation_rate(reference, anchors))
        self.assertLess(forward_kl(anchored, reference, anchors), forward_kl(free, reference, anchors))


class AnchorAndSFTTests(SimpleTestCase):

    def setUp(self):
        self.task = slot_task()
        self.anchors = [(self.task, initial_context(self.task)), (self.task, initial_context(self.task).advanced())]

    def test_anchor_step_at_reference_is_a_fixed_point(self):
        policy = random_policy(9)
        updated = sft_anchor_step(policy, policy.copy(), self.anchors, lr=0.5)
        np.testing.assert_allclose(updated.theta, policy.theta, atol=1e-12)

    def test_anchor_step_moves_toward_reference(self):
        policy, reference = random_policy(9), random_policy(10)
        before = forward_kl(policy, reference, self.anchors)
        updated = sft_anchor_step(policy, reference, self.anchors, lr=0.05)
        self.assertLess(forward_kl(updated, reference, self.anchors), before)

    def test_empty_anchor_set_is_a_no_op(self):
        policy = random_policy(9)
        np.testing.assert_array_equal(sft_anchor_step(policy, EdgePolicy(), [], lr=0.5).theta, policy.theta)

    def test_sft_reduces_negative_log_likelihood(self):
        examples = sft_examples(generate_tasks(20, seed=1))
        start = -np.mean([EdgePolicy().log_prob(t, c, a) for t, c, a in examples])
        _, losses = sft_fit(EdgePolicy(), examples)
        self.assertEqual(len(losses), 2)
        self.assertLess(losses[-1], start)

    def test_sft_needs_examples(self):
        with self.assertRaises(UsageError):
            sft_fit(EdgePolicy(), [])
