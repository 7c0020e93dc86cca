import os
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from app import utils
from app.processing import bpfa, core, sampling
from app.processing.models import BpfaConfig, PhantomSpec
from app.processing.phantom import generate_phantom


def _phantom_measurement(side=16, ratio=0.5, seed=0):
    truth = generate_phantom(PhantomSpec(n1=side, n2=side, n3=1), seed).layer(0)
    mask = sampling.uds_mask(side * side, int(ratio * side * side), seed, shape=(side, side))
    return truth, core.apply_mask(truth, mask)


def _full_measurement(image):
    image = np.asarray(image, dtype=np.float64)
    return core.apply_mask(image, core.full_mask(*image.shape))


def _state(atoms, z, w, pi, gamma_n=1.0, gamma_w=1.0, a=1.0, b_param=1.0):
    return bpfa.BpfaState(
        dictionary=bpfa.Dictionary(atoms=np.asarray(atoms, dtype=np.float64)),
        z=np.asarray(z, dtype=bool),
        w=np.asarray(w, dtype=np.float64),
        pi=np.asarray(pi, dtype=np.float64),
        gamma_n=gamma_n,
        gamma_w=gamma_w,
        a=a,
        b_param=b_param,
    )


def _patchset(patches, observed=None, b=2):
    patches = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    if observed is None:
        observed = np.ones_like(patches, dtype=bool)
    n_p = patches.shape[0]
    return bpfa.PatchSet(
        b=b,
        shape=(b, b + n_p - 1),
        patches=patches,
        masks=np.asarray(observed, dtype=bool),
        anchors=np.stack([np.zeros(n_p, dtype=np.int64), np.arange(n_p)], axis=1),
    )


class PatchExtractionTests(unittest.TestCase):
    def test_patch_count_for_every_size(self):
        for side in range(1, 33, 3):
            measurement = _full_measurement(np.zeros((side, side)))
            for b in range(1, side + 1):
                patchset = bpfa.extract_patches(measurement, side, side, b)
                self.assertEqual(patchset.n_p, (side - b + 1) ** 2)
                self.assertEqual(patchset.patches.shape, (patchset.n_p, b * b))

    def test_rectangular_slice(self):
        patchset = bpfa.extract_patches(_full_measurement(np.zeros((10, 12))), 10, 12, 4)
        self.assertEqual(patchset.n_p, 63)

    def test_anchors_are_row_major(self):
        image = core.make_rng(0).random((6, 7))
        patchset = bpfa.extract_patches(_full_measurement(image), 6, 7, 3)
        assert_array_equal(patchset.anchors[0], [0, 0])
        assert_array_equal(patchset.anchors[1], [0, 1])
        assert_array_equal(patchset.anchors[5], [1, 0])
        assert_array_equal(patchset.anchors[-1], [3, 4])
        for i in (0, 7, 19):
            r, c = patchset.anchors[i]
            assert_array_equal(patchset.patches[i], image[r:r + 3, c:c + 3].ravel())

    def test_patch_masks_follow_sampled_pixels(self):
        image = core.make_rng(1).random((8, 8))
        mask = sampling.uds_mask(64, 20, 2, shape=(8, 8))
        measurement = core.apply_mask(image, mask)
        patchset = bpfa.extract_patches(measurement, 8, 8, 8)
        assert_array_equal(patchset.masks[0], mask.indicator())
        self.assertEqual(patchset.masks.dtype, bool)

    def test_patch_larger_than_slice_raises(self):
        with self.assertRaises(ValueError):
            bpfa.extract_patches(_full_measurement(np.zeros((5, 5))), 5, 5, 6)


class InitialStateTests(unittest.TestCase):
    def test_atom_variance_matches_prior(self):
        config = BpfaConfig(k=36, b=14)
        state = bpfa.init_state(config, 10, 0)
        self.assertEqual(state.dictionary.atoms.shape, (36, 196))
        self.assertAlmostEqual(float(np.var(state.dictionary.atoms)), 1 / 196, delta=0.1 / 196)

    def test_zero_beta_parameter_puts_usage_near_one(self):
        state = bpfa.init_state(BpfaConfig(k=36, b=4, b_param=0.0), 5, 1)
        assert_allclose(state.pi, 1.0, atol=1e-4)
        self.assertTrue(np.all(state.pi < 1.0))

    def test_initial_dictionary_is_used(self):
        atoms = np.eye(4)
        state = bpfa.init_state(BpfaConfig(k=4, b=2), 3, 2, initial_dictionary=atoms)
        assert_array_equal(state.dictionary.atoms, atoms)

    def test_initial_weights_follow_supplied_atom_norm(self):
        config = BpfaConfig(k=4, b=2)
        unit = bpfa.init_state(config, 50, 2, initial_dictionary=np.eye(4))
        doubled = bpfa.init_state(config, 50, 2, initial_dictionary=2 * np.eye(4))
        assert_array_equal(doubled.z, unit.z)
        assert_allclose(doubled.w, unit.w / 2)

    def test_initial_dictionary_shape_is_checked(self):
        with self.assertRaises(ValueError):
            bpfa.init_state(BpfaConfig(k=4, b=2), 3, 2, initial_dictionary=np.eye(3))


class EStepTests(unittest.TestCase):
    def test_single_atom_gets_least_squares_weight(self):
        state = _state([[1.0, 0.0, 0.0, 0.0]], [[False]], [[0.0]], [0.5], gamma_n=1e6, gamma_w=1.0)
        bpfa.e_step(state, [0], _patchset([0.5, 0.0, 0.0, 0.0]))
        self.assertTrue(state.z[0, 0])
        self.assertAlmostEqual(state.w[0, 0], 0.5, places=5)

    def test_strong_weight_prior_switches_atom_off(self):
        state = _state([[1.0, 0.0, 0.0, 0.0]], [[False]], [[0.0]], [0.5], gamma_n=1.0, gamma_w=1e12)
        bpfa.e_step(state, [0], _patchset([0.5, 0.0, 0.0, 0.0]))
        self.assertLess(abs(state.alpha[0, 0]), 1e-9)

    def test_near_certain_usage_prior_does_not_switch_atoms_on(self):
        state = _state([[1.0, 0.0, 0.0, 0.0]], [[False]], [[0.0]], [1 - 1e-6], gamma_n=1.0, gamma_w=1.0)
        bpfa.e_step(state, [0], _patchset([0.0, 0.5, 0.0, 0.0]))
        self.assertFalse(state.z[0, 0])
        self.assertEqual(state.alpha[0, 0], 0.0)

    def test_active_weights_are_joint_posterior_means(self):
        atoms = [[1.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]
        state = _state(atoms, [[False, False]], [[0.0, 0.0]], [0.5, 0.5], gamma_n=1e9, gamma_w=1.0)
        bpfa.e_step(state, [0], _patchset([2.0, 1.0, 0.0, 0.0]))
        assert_array_equal(state.z, [[True, True]])
        assert_allclose(state.w, [[1.0, 1.0]], atol=1e-6)

    def test_weight_scale_is_mean_square_of_active_weights(self):
        state = _state(np.eye(4)[:2], [[True, False], [True, False]], [[0.5, 0.0], [-1.5, 0.0]], [0.5, 0.5],
                       gamma_w=4.0)
        assert_allclose(bpfa.weight_scale(state), [1.25, 0.25])

    def test_activation_does_not_depend_on_atom_scale(self):
        rng = core.make_rng(6)
        patches = rng.random((30, 4))
        atoms = rng.normal(size=(3, 4))
        w = rng.normal(size=(30, 3))
        unit = _state(atoms, np.ones((30, 3)), w, [0.4, 0.4, 0.4], gamma_n=20.0, gamma_w=1e-12)
        scaled = _state(atoms * 1e4, np.ones((30, 3)), w / 1e4, [0.4, 0.4, 0.4], gamma_n=20.0, gamma_w=1e-12)
        bpfa.e_step(unit, np.arange(30), _patchset(patches))
        bpfa.e_step(scaled, np.arange(30), _patchset(patches))
        assert_array_equal(unit.z, scaled.z)

    def test_patch_without_observations_has_no_code(self):
        state = _state(np.eye(4)[:2], [[True, True]], [[0.4, 0.2]], [0.9, 0.9])
        bpfa.e_step(state, [0], _patchset([0.0, 0.0, 0.0, 0.0], observed=np.zeros((1, 4), dtype=bool)))
        assert_array_equal(state.alpha, [[0.0, 0.0]])

    def test_threaded_batches_match_serial(self):
        rng = core.make_rng(3)
        patches = rng.random((40, 4))
        atoms = rng.normal(size=(3, 4))
        serial = _state(atoms, np.ones((40, 3)), np.zeros((40, 3)), [0.6, 0.6, 0.6], gamma_n=50.0)
        threaded = _state(atoms, np.ones((40, 3)), np.zeros((40, 3)), [0.6, 0.6, 0.6], gamma_n=50.0)
        batch = np.arange(40)
        bpfa.e_step(serial, batch, _patchset(patches), n_sweeps=2, workers=1)
        bpfa.e_step(threaded, batch, _patchset(patches), n_sweeps=2, workers=4)
        assert_array_equal(serial.z, threaded.z)
        assert_allclose(serial.w, threaded.w, rtol=1e-12, atol=1e-15)


class MStepTests(unittest.TestCase):
    def test_atom_is_least_squares_fit(self):
        y = np.array([1.0, 0.5, 0.25, 0.0])
        state = _state([[0.1, 0.1, 0.1, 0.1]], [[True]], [[2.0]], [0.5])
        bpfa.m_step(state, [0], _patchset(y), eta=1.0)
        assert_allclose(state.dictionary.atoms[0], y / 2, rtol=1e-9)
        self.assertEqual(state.gamma_n, bpfa.GAMMA_N_MAX)

    def test_exact_fit_is_stationary(self):
        d = np.array([0.5, -0.25, 0.75, 0.125])
        state = _state([d], [[True]], [[1.5]], [0.5])
        bpfa.m_step(state, [0], _patchset(1.5 * d), eta=0.5)
        assert_allclose(state.dictionary.atoms[0], d, rtol=1e-9)

    def test_correlated_atoms_are_fitted_jointly(self):
        d0 = np.array([0.5, 0.25, -0.5, 1.0])
        d1 = np.array([0.2, -0.4, 0.6, 0.1])
        alpha = np.array([[1.0, 1.0], [1.0, 0.0], [0.5, 2.0]])
        state = _state(np.full((2, 4), 0.1), alpha != 0, alpha, [0.5, 0.5])
        bpfa.m_step(state, [0, 1, 2], _patchset(alpha @ np.stack([d0, d1])), eta=1.0)
        assert_allclose(state.dictionary.atoms, np.stack([d0, d1]), atol=1e-9)

    def test_noise_precision_can_be_held(self):
        state = _state([[0.1, 0.1, 0.1, 0.1]], [[True]], [[2.0]], [0.5], gamma_n=3.0)
        bpfa.m_step(state, [0], _patchset([1.0, 0.5, 0.25, 0.0]), eta=1.0, learn_gamma_n=False)
        self.assertEqual(state.gamma_n, 3.0)

    def test_unused_atom_is_unchanged(self):
        atoms = np.array([[0.2, 0.2, 0.2, 0.2], [0.3, -0.1, 0.4, 0.0]])
        state = _state(atoms, [[True, False]], [[1.0, 0.0]], [0.5, 0.5])
        bpfa.m_step(state, [0], _patchset([0.4, 0.1, 0.0, 0.2]), eta=0.85)
        assert_array_equal(state.dictionary.atoms[1], atoms[1])

    def test_usage_follows_indicator_counts(self):
        n = 100
        z = np.zeros((n, 2), dtype=bool)
        z[:, 0] = True
        w = np.where(z, 1.0, 0.0)
        state = _state([[0.5, 0.5, 0.5, 0.5], [0.1, 0.2, 0.3, 0.4]], z, w, [0.5, 0.5])
        bpfa.m_step(state, np.arange(n), _patchset(np.full((n, 4), 0.5)), eta=1.0)
        self.assertGreater(state.pi[0], 0.99)
        self.assertLess(state.pi[1], 0.01)


class InferenceTests(unittest.TestCase):
    def test_batch_count(self):
        _, measurement = _phantom_measurement()
        one_batch = bpfa.infer(measurement, 16, 16, BpfaConfig(k=4, b=4, n_epoch=3), 0)
        self.assertEqual(one_batch.n_batches, 3)
        split = bpfa.infer(measurement, 16, 16, BpfaConfig(k=4, b=4, n_epoch=2, n_batch=50), 0)
        self.assertEqual(split.n_batches, 2 * 4)
        self.assertEqual(len(split.rss_history), 2)

    def test_same_seed_gives_same_state(self):
        _, measurement = _phantom_measurement()
        config = BpfaConfig(k=4, b=4, n_epoch=2)
        first = bpfa.infer(measurement, 16, 16, config, 9)
        second = bpfa.infer(measurement, 16, 16, config, 9)
        assert_array_equal(first.dictionary.atoms, second.dictionary.atoms)
        self.assertEqual(first.rss_history, second.rss_history)

    def test_masked_residual_does_not_grow_between_epochs(self):
        config = BpfaConfig(k=12, b=6, n_epoch=2)
        shrinking = 0
        for seed in range(10):
            truth = generate_phantom(PhantomSpec(n1=32, n2=32, n3=1), seed).layer(0)
            mask = sampling.uds_mask(1024, 102, seed, shape=(32, 32))
            state = bpfa.infer(core.apply_mask(truth, mask), 32, 32, config, seed)
            if state.rss_history[1] <= state.rss_history[0] * (1 + 1e-9):
                shrinking += 1
        self.assertGreaterEqual(shrinking, 9)

    def test_two_atom_checkerboard_is_learned_from_random_start(self):
        rows, cols = np.indices((64, 64))
        image = np.where((rows + cols) % 2 == 0, 0.8, 0.2)
        config = BpfaConfig(k=2, b=4, gamma_w_init=1.0, gamma_n_init=1e9, learn_gamma_n=False, n_epoch=10)
        measurement = _full_measurement(image)
        patchset = bpfa.extract_patches(measurement, 64, 64, 4)
        state = bpfa.infer(measurement, 64, 64, config, 5, patchset=patchset)
        recon = bpfa.reconstruct_slice(state, patchset, 64, 64)
        self.assertLess(float(np.abs(recon - image).max()), 1e-3)
        self.assertLess(state.rss_history[-1] / patchset.masks.sum(), 1e-4)

    def test_default_learner_leaves_atoms_unused(self):
        truth = generate_phantom(PhantomSpec(n1=64, n2=64, n3=1), 0).layer(0)
        config = BpfaConfig()
        masks = {
            "uds": sampling.uds_mask(4096, 409, 3, shape=(64, 64)),
            "full": core.full_mask(64, 64),
        }
        for name, mask in masks.items():
            state = bpfa.infer(core.apply_mask(truth, mask), 64, 64, config, 3)
            active = np.count_nonzero(state.alpha, axis=1)
            self.assertGreaterEqual(float(np.mean(active < config.k)), 0.99, name)

    def test_fixed_noise_precision_keeps_observed_pixels(self):
        truth = generate_phantom(PhantomSpec(n1=64, n2=64, n3=1, kind="stripes"), 0).layer(0)
        config = BpfaConfig(gamma_n_init=1e9, learn_gamma_n=False, n_epoch=4)
        measurement = _full_measurement(truth)
        patchset = bpfa.extract_patches(measurement, 64, 64, config.b)
        state = bpfa.infer(measurement, 64, 64, config, 2, patchset=patchset)
        self.assertEqual(state.gamma_n, 1e9)
        recon = bpfa.reconstruct_slice(state, patchset, 64, 64)
        self.assertLessEqual(float(np.abs(recon - truth).max()), 1e-2)

    def test_non_finite_state_is_reported(self):
        state = _state([[1.0, 0.0, 0.0, 0.0]], [[True]], [[np.inf]], [0.5])
        with self.assertRaises(bpfa.NumericalFailureError):
            bpfa.m_step(state, [0], _patchset([0.5, 0.0, 0.0, 0.0]), eta=1.0)


class ReconstructionTests(unittest.TestCase):
    def test_identity_codes_reproduce_dyadic_image(self):
        image = core.make_rng(4).integers(0, 9, size=(7, 6)) / 8.0
        measurement = _full_measurement(image)
        patchset = bpfa.extract_patches(measurement, 7, 6, 2)
        state = _state(np.eye(4), np.ones((patchset.n_p, 4)), patchset.patches, np.full(4, 0.5))
        assert_array_equal(bpfa.reconstruct_slice(state, patchset, 7, 6), image)

    def test_overlapping_estimates_are_averaged(self):
        measurement = _full_measurement(np.zeros((2, 3)))
        patchset = bpfa.extract_patches(measurement, 2, 3, 2)
        w = np.array([[0.2, 0.2, 0.2, 0.2], [0.6, 0.6, 0.6, 0.6]])
        state = _state(np.eye(4), np.ones((2, 4)), w, np.full(4, 0.5))
        expected = np.array([[0.2, 0.4, 0.6], [0.2, 0.4, 0.6]])
        assert_allclose(bpfa.reconstruct_slice(state, patchset, 2, 3), expected)

    def test_output_is_clamped(self):
        measurement = _full_measurement(np.zeros((2, 2)))
        patchset = bpfa.extract_patches(measurement, 2, 2, 2)
        state = _state(np.eye(4), np.ones((1, 4)), [[-0.5, 0.5, 1.5, 1.0]], np.full(4, 0.5))
        assert_array_equal(bpfa.reconstruct_slice(state, patchset, 2, 2), [[0.0, 0.5], [1.0, 1.0]])


class CheckpointTests(unittest.TestCase):
    def test_saved_state_loads_back(self):
        _, measurement = _phantom_measurement(side=12)
        state = bpfa.infer(measurement, 12, 12, BpfaConfig(k=3, b=3, n_epoch=2), 1)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "state.npz")
            utils.save_state(state, path)
            self.assertTrue(os.path.exists(os.path.join(tmp, "state.json")))
            loaded = utils.load_state(path)
        assert_array_equal(loaded.dictionary.atoms, state.dictionary.atoms)
        assert_array_equal(loaded.z, state.z)
        assert_array_equal(loaded.w, state.w)
        self.assertEqual(loaded.gamma_n, state.gamma_n)
        self.assertEqual(loaded.rss_history, state.rss_history)
        self.assertEqual(loaded.n_batches, 2)


if __name__ == "__main__":
    unittest.main()
