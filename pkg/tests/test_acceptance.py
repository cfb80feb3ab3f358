import unittest

import numpy as np

from acceptance import FAST_CHECKS, fixture_config, make_fixture, run_fast_checks


class FixtureTests(unittest.TestCase):
    def test_batch_is_prefix_of_kb(self):
        fixture = make_fixture(0)
        self.assertEqual(fixture.audio.shape, (4, 4))
        self.assertEqual(len(fixture.fine), 12)
        self.assertEqual(len(fixture.coarse), 4)
        np.testing.assert_array_equal(fixture.fine.audio[:4], fixture.audio)
        np.testing.assert_array_equal(fixture.batch_ids, np.arange(4))
        np.testing.assert_allclose(np.linalg.norm(fixture.text, axis=1), np.ones(4), atol=1e-12)

    def test_same_seed_same_fixture(self):
        first, second = make_fixture(5), make_fixture(5)
        np.testing.assert_array_equal(first.text, second.text)
        np.testing.assert_array_equal(first.coarse.audio, second.coarse.audio)

    def test_config_overrides(self):
        config = fixture_config(rho=1.0)
        self.assertEqual(config.rho, 1.0)
        self.assertEqual(config.epsilon, 0.5)


class FastCheckTests(unittest.TestCase):
    def test_every_check_passes(self):
        report = run_fast_checks(seed=1)
        failed = [check for check in report.checks if not check.passed]
        self.assertEqual(failed, [])
        self.assertTrue(report.passed)
        self.assertEqual(len(report.checks), len(FAST_CHECKS))
        self.assertEqual(len({check.name for check in report.checks}), len(FAST_CHECKS))


if __name__ == "__main__":
    unittest.main()
