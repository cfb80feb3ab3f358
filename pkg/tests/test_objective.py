import math
import unittest

import numpy as np
from scipy.special import logsumexp

from acceptance import KB_BLOCKS, fixture_config, gradient_errors, make_fixture, random_gradient_case
from core_math import derive_rng
from errors import EmptyOutOfBatchSet, NonPositivePotential, NonPositiveTau
from injection import enhance_batch
from objective import (
    ask_loss,
    baseline_loss,
    directional_loss,
    evaluate,
    grad_embeddings,
    modulated_loss,
    ntxent,
    ntxent_grad,
    obi,
    reliability_term,
    resolve_mechanisms,
)
from ot_align import realign, sinkhorn
from reliability import batch_potentials


def build_batch(fixture):
    return list(zip(fixture.audio, fixture.text))


class NTXentTests(unittest.TestCase):
    def test_single_item_is_zero(self):
        self.assertEqual(ntxent(np.array([[0.4]]), 0.07), 0.0)

    def test_constant_matrix(self):
        self.assertAlmostEqual(ntxent(np.full((5, 5), 0.2), 0.07), math.log(5), places=12)

    def test_matches_row_oracle(self):
        S = derive_rng(1, "ntxent").uniform(-1, 1, size=(3, 3))
        tau = 0.07
        rows = [-(S[i, i] / tau - logsumexp(S[i] / tau)) for i in range(3)]
        self.assertAlmostEqual(ntxent(S, tau), sum(rows) / 3, delta=1e-10)

    def test_tau_must_be_positive(self):
        with self.assertRaises(NonPositiveTau):
            ntxent(np.eye(2), 0.0)


class DirectionalLossTests(unittest.TestCase):
    def test_constant_matrices(self):
        C = np.full((4, 4), -0.3)
        self.assertAlmostEqual(directional_loss(C, C, 0.07), 2 * math.log(4), places=12)

    def test_equal_matrices(self):
        S = derive_rng(2, "dir").uniform(-1, 1, size=(4, 4))
        self.assertAlmostEqual(directional_loss(S, S, 0.1), 2 * ntxent(S, 0.1), places=12)

    def test_decomposes(self):
        rng = derive_rng(3, "dir")
        F, C = rng.uniform(-1, 1, size=(2, 4, 4))
        self.assertAlmostEqual(directional_loss(F, C, 0.1), ntxent(F, 0.1) + ntxent(C, 0.1), places=12)


class ModulationTests(unittest.TestCase):
    def test_reliability_term_examples(self):
        self.assertEqual(reliability_term([1.0, 1.0, 1.0]), 0.0)
        self.assertAlmostEqual(reliability_term([math.e, math.e]), -1.0, places=12)
        self.assertAlmostEqual(reliability_term([1.0, math.e]), -0.5, places=12)

    def test_reliability_term_rejects_non_positive(self):
        with self.assertRaises(NonPositivePotential):
            reliability_term([1.0, 0.0])

    def test_modulated_loss_examples(self):
        self.assertEqual(modulated_loss(2.5, 0.7, -0.4, 0.0, 0.0), 2.5)
        self.assertEqual(modulated_loss(2.5, 0.0, 0.0, 0.2, 0.3), 2.5)
        self.assertAlmostEqual(modulated_loss(1.0, 1.0, 1.0, 0.2, 0.3), 1.5, places=12)


class MechanismTests(unittest.TestCase):
    def test_baseline_variant_disables_everything(self):
        mech = resolve_mechanisms(fixture_config(rho=0.2, beta=0.2), "baseline")
        self.assertEqual((mech.rho, mech.beta, mech.lambda_f, mech.lambda_c), (1.0, 0.0, 0.0, 0.0))
        self.assertFalse(mech.needs_retrieval)

    def test_ablation_switches(self):
        config = fixture_config(use_injection=False, use_ot=False, use_coarse=False)
        mech = resolve_mechanisms(config)
        self.assertEqual(mech.rho, 1.0)
        self.assertEqual(mech.beta, 0.0)
        self.assertEqual(mech.lambda_c, 0.0)
        self.assertEqual(mech.lambda_f, config.lambda_f)
        self.assertEqual(mech.granularities, ("fine",))
        self.assertTrue(mech.needs_retrieval)

        mech = resolve_mechanisms(fixture_config(use_reliability=False))
        self.assertEqual((mech.lambda_f, mech.lambda_c), (0.0, 0.0))


class AskLossTests(unittest.TestCase):
    def test_reduces_to_baseline(self):
        fixture = make_fixture(0)
        config = fixture_config(rho=1.0, beta=0.0, lambda_f=0.0, lambda_c=0.0)
        breakdown = ask_loss(build_batch(fixture), fixture.fine, fixture.coarse, config)
        reference = baseline_loss(fixture.audio, fixture.text, config.tau)
        self.assertAlmostEqual(breakdown.total, reference, delta=1e-10)

    def test_single_fine_granularity_halves_baseline(self):
        fixture = make_fixture(1)
        config = fixture_config(rho=1.0, beta=0.0, lambda_f=0.0, lambda_c=0.0, use_coarse=False)
        breakdown = ask_loss(build_batch(fixture), fixture.fine, fixture.coarse, config)
        reference = baseline_loss(fixture.audio, fixture.text, config.tau)
        self.assertAlmostEqual(breakdown.total, 0.5 * reference, delta=1e-10)

    def test_batch_of_one(self):
        fixture = make_fixture(2, batch_size=1)
        breakdown = ask_loss(build_batch(fixture), fixture.fine, fixture.coarse, fixture_config(), self_ids=[0])
        self.assertEqual(breakdown.l_t2a, 0.0)
        self.assertEqual(breakdown.l_a2t, 0.0)
        self.assertEqual(breakdown.total, 0.0)

    def test_matches_composition(self):
        fixture = make_fixture(3)
        config = fixture_config(rho=0.2, beta=0.2, lambda_f=0.2, lambda_c=0.3)
        batch = build_batch(fixture)
        ids = fixture.batch_ids
        breakdown = ask_loss(batch, fixture.fine, fixture.coarse, config, self_ids=ids)

        enhanced = enhance_batch(batch, fixture.fine, fixture.coarse, config.K, config.rho, self_ids=ids)
        potentials = batch_potentials(batch, fixture.fine, fixture.coarse, config.K, self_ids=ids)
        options = dict(epsilon=config.epsilon, max_iters=config.sinkhorn_max_iters, tol=config.sinkhorn_tol)
        losses = {"t2a": 0.0, "a2t": 0.0}
        for u_slot, v_slot in (("u_fine", "v_fine"), ("u_coarse", "v_coarse")):
            Ue = np.vstack([getattr(p, u_slot) for p in enhanced])
            Ve = np.vstack([getattr(p, v_slot) for p in enhanced])
            S = Ve @ Ue.T
            losses["t2a"] += ntxent(realign(S, sinkhorn(S, **options), config.beta), config.tau)
            losses["a2t"] += ntxent(realign(S.T, sinkhorn(S.T, **options), config.beta), config.tau)

        f = {
            "t2a": (reliability_term([p.psi_f_t2a for p in potentials]), reliability_term([p.psi_c_t2a for p in potentials])),
            "a2t": (reliability_term([p.psi_f_a2t for p in potentials]), reliability_term([p.psi_c_a2t for p in potentials])),
        }
        l_star = {d: modulated_loss(losses[d], *f[d], config.lambda_f, config.lambda_c) for d in losses}
        self.assertAlmostEqual(breakdown.l_t2a, losses["t2a"], delta=1e-8)
        self.assertAlmostEqual(breakdown.f_c_a2t, f["a2t"][1], delta=1e-10)
        self.assertAlmostEqual(breakdown.total, 0.5 * (l_star["t2a"] + l_star["a2t"]), delta=1e-8)


class GradientTests(unittest.TestCase):
    def test_baseline_gradient_matches_closed_form(self):
        fixture = make_fixture(4)
        config = fixture_config()
        U, V = fixture.audio, fixture.text
        grads = evaluate(U, V, fixture.fine, fixture.coarse, config, variant="baseline").gradients

        S = V @ U.T
        dS = ntxent_grad(S, config.tau) + ntxent_grad(S.T, config.tau).T
        np.testing.assert_allclose(grads.text, dS @ U, atol=1e-12)
        np.testing.assert_allclose(grads.audio, dS.T @ V, atol=1e-12)

    def test_rho_one_gives_exactly_zero_kb_gradient(self):
        fixture = make_fixture(5)
        grads = grad_embeddings(
            build_batch(fixture), fixture.fine, fixture.coarse, fixture_config(rho=1.0), self_ids=fixture.batch_ids
        )
        for name in ("fine_audio", "fine_text", "coarse_audio", "coarse_text"):
            self.assertFalse(getattr(grads, name).any(), msg=name)

    def test_matches_finite_differences(self):
        for seed in range(3):
            fixture = make_fixture(10 + seed)
            errors = gradient_errors(fixture, fixture_config(rho=0.3, beta=0.4))
            self.assertEqual(sorted(errors), sorted(["audio", "text", *KB_BLOCKS]))
            for name, error in errors.items():
                self.assertLessEqual(error, 1e-4, msg=f"seed {seed} {name}: {errors}")

    def test_matches_finite_differences_without_renormalisation(self):
        fixture = make_fixture(20)
        errors = gradient_errors(fixture, fixture_config(rho=0.5, beta=0.3, renormalize_enhanced=False))
        self.assertLessEqual(max(errors.values()), 1e-4, msg=str(errors))

    def test_random_cases_at_default_settings(self):
        worst = {}
        for seed in range(100):
            fixture, config = random_gradient_case(seed)
            for name, error in gradient_errors(fixture, config).items():
                worst[name] = max(worst.get(name, 0.0), error)
        self.assertLessEqual(max(worst.values()), 1e-4, msg=str(worst))

    def test_batch_order_does_not_change_loss_or_gradients(self):
        for seed in range(5):
            fixture, config = random_gradient_case(30 + seed)
            perm = derive_rng(seed, "perm").permutation(fixture.audio.shape[0])
            first = evaluate(fixture.audio, fixture.text, fixture.fine, fixture.coarse, config, fixture.batch_ids)
            second = evaluate(
                fixture.audio[perm], fixture.text[perm], fixture.fine, fixture.coarse, config, fixture.batch_ids[perm]
            )
            self.assertAlmostEqual(first.breakdown.total, second.breakdown.total, delta=1e-10)
            np.testing.assert_allclose(first.gradients.audio[perm], second.gradients.audio, atol=1e-10)
            np.testing.assert_allclose(first.gradients.text[perm], second.gradients.text, atol=1e-10)
            for name in KB_BLOCKS:
                np.testing.assert_allclose(getattr(first.gradients, name), getattr(second.gradients, name), atol=1e-10)


class OBITests(unittest.TestCase):
    def test_baseline_is_exactly_zero(self):
        fixture = make_fixture(6)
        report = obi(build_batch(fixture), fixture.fine, fixture_config(), "baseline",
                     coarse=fixture.coarse, batch_ids=fixture.batch_ids)
        self.assertEqual(report.mean, 0.0)
        self.assertEqual(report.entry_ids, list(range(4, 12)))

    def test_ask_is_positive(self):
        fixture = make_fixture(7)
        report = obi(build_batch(fixture), fixture.fine, fixture_config(rho=0.2), "ask",
                     coarse=fixture.coarse, batch_ids=fixture.batch_ids)
        self.assertGreater(report.mean, 0.0)

    def test_builds_coarse_base_when_missing(self):
        fixture = make_fixture(8)
        report = obi(build_batch(fixture), fixture.fine, fixture_config(), "ask", batch_ids=fixture.batch_ids)
        self.assertEqual(len(report.per_entry_grad_norms), 8)

    def test_empty_out_of_batch_set(self):
        fixture = make_fixture(9, batch_size=12)
        with self.assertRaises(EmptyOutOfBatchSet):
            obi(build_batch(fixture), fixture.fine, fixture_config(), "ask",
                coarse=fixture.coarse, batch_ids=fixture.batch_ids)


if __name__ == "__main__":
    unittest.main()
