"""
Adversarial cube: parametrization, placement, embedding, losses, optimization loop, persistence
"""
import math
import os

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError
from scipy.special import softmax

import attack
from attack import (TRACE_COLUMNS, AttackConfig, AttackError, CubeParams, CubeSlot, NonFiniteLossError,
                    PlacementError, Transform, build_attack_graph, center_transforms, embed, identity_transform,
                    init_params, load_attack_result, loss_bias, loss_cloak, loss_nps, loss_total, optimize_cube,
                    psi_from_confidences, random_crop, realize_cube, sample_transform, save_attack_result)
from cubes import BANDS_V, DataCube
from evaluation import attack_metrics
from grad import finite_difference_check, make_rng
from spectra import SpectralIndex


def _small_attack(**overrides) -> AttackConfig:
    values = dict(steps=3, batch_size=2, layout=[CubeSlot(height=4, width=4)], seed=2)
    values.update(overrides)
    return AttackConfig(**values)


def _rects(transforms, slots):
    rects = []
    for t, s in zip(transforms, slots):
        m, n = t.placed_shape(s.height, s.width)
        rects.append((t.position[0], t.position[1], m, n))
    return rects


class TestConfig:
    def test_loss_terms_are_normalized(self):
        assert AttackConfig(loss='cloak + PSI').loss == 'psi+cloak'

    def test_psi_is_required(self):
        with pytest.raises(ValidationError, match='psi'):
            AttackConfig(loss='nps+cloak')

    def test_unknown_term(self):
        with pytest.raises(ValidationError, match='unknown'):
            AttackConfig(loss='psi+tv')

    def test_missing_terms_zero_their_weight(self):
        cfg = AttackConfig(loss='psi')
        assert cfg.effective_alpha == 0.0 and cfg.effective_beta == 0.0
        assert AttackConfig().effective_alpha == 5.0

    def test_empty_layout(self):
        with pytest.raises(ValidationError):
            AttackConfig(layout=[])

    def test_config_hash_tracks_values(self):
        assert AttackConfig().config_hash() == AttackConfig().config_hash()
        assert AttackConfig().config_hash() != AttackConfig(steps=10).config_hash()


class TestParametrization:
    def test_zero_logits_give_mean_material(self, tiny_index):
        params = init_params(3, 2, tiny_index.q, seed=0, sigma=0.0)
        cube = realize_cube(params, tiny_index)
        assert cube.shape == (3, 2, 13)
        np.testing.assert_allclose(cube, np.broadcast_to(tiny_index.matrix.mean(axis=1), cube.shape))

    def test_hull_keeps_pixels_inside_index_range(self, tiny_index):
        params = CubeParams(make_rng(1, 'logits').normal(0.0, 5.0, (4, 4, tiny_index.q)))
        cube = realize_cube(params, tiny_index)
        lo, hi = tiny_index.matrix.min(axis=1), tiny_index.matrix.max(axis=1)
        assert np.all(cube >= lo - 1e-12) and np.all(cube <= hi + 1e-12)

    def test_single_material(self):
        index = SpectralIndex(np.linspace(0.1, 0.7, 13)[:, None], ('only',))
        cube = realize_cube(init_params(3, 3, 1, seed=4, sigma=1.0), index)
        assert np.array_equal(cube, np.broadcast_to(index.matrix[:, 0], cube.shape))

    def test_dominant_logit_selects_material(self, tiny_index):
        logits = np.zeros((1, 1, tiny_index.q))
        logits[0, 0, 2] = 50.0
        cube = realize_cube(CubeParams(logits), tiny_index)
        np.testing.assert_allclose(cube[0, 0], tiny_index.matrix[:, 2], atol=1e-12)

    def test_unconstrained_cube(self, tiny_index):
        params = init_params(2, 2, 13, seed=0, sigma=0.0, hull=False)
        np.testing.assert_allclose(realize_cube(params, tiny_index), 0.5)

    def test_logit_count_must_match_index(self, tiny_index):
        with pytest.raises(AttackError, match='columns'):
            realize_cube(init_params(2, 2, tiny_index.q + 1, seed=0), tiny_index)

    def test_init_is_seeded(self, tiny_index):
        a = init_params(4, 4, tiny_index.q, seed=7)
        b = init_params(4, 4, tiny_index.q, seed=7)
        assert np.array_equal(a.logits, b.logits)
        assert not np.array_equal(a.logits, init_params(4, 4, tiny_index.q, seed=7, key=1).logits)

    def test_non_finite_logits(self):
        with pytest.raises(AttackError):
            CubeParams(np.full((2, 2, 3), np.nan))

    def test_pixels_are_convex_combinations(self, tiny_index):
        logits = make_rng(8, 'simplex').normal(0.0, 3.0, (200, 500, tiny_index.q))
        weights = softmax(logits, axis=-1)
        assert np.all(weights >= 0.0)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
        cube = realize_cube(CubeParams(logits), tiny_index)
        np.testing.assert_allclose(cube, weights @ tiny_index.matrix.T, atol=1e-6)


class TestPlacement:
    def test_low_proximity_patches_do_not_overlap(self):
        slots = [CubeSlot(height=4, width=4) for _ in range(4)]
        cfg = AttackConfig(layout=slots)
        for k in range(20):
            transforms = sample_transform(make_rng(0, 'place', k), cfg, (16, 16))
            rects = _rects(transforms, slots)
            for i, (r, c, m, n) in enumerate(rects):
                assert 0 <= r <= 16 - m and 0 <= c <= 16 - n
                for r2, c2, m2, n2 in rects[i + 1:]:
                    assert r + m <= r2 or r2 + m2 <= r or c + n <= c2 or c2 + n2 <= c

    def test_high_proximity_keeps_patches_together(self):
        slots = [CubeSlot(height=2, width=2) for _ in range(3)]
        cfg = AttackConfig(layout=slots, proximity='high')
        for k in range(20):
            rects = _rects(sample_transform(make_rng(1, 'place', k), cfg, (40, 40)), slots)
            rows = [r for r, _, _, _ in rects]
            cols = [c for _, c, _, _ in rects]
            assert max(rows) - min(rows) <= 5 and max(cols) - min(cols) <= 5

    def test_rotations_are_quarter_turns(self):
        cfg = AttackConfig(layout=[CubeSlot(height=2, width=5)])
        rotations = {sample_transform(make_rng(2, 'rot', k), cfg, (16, 16))[0].rotation for k in range(40)}
        assert rotations <= {0, 90, 180, 270}
        assert len(rotations) > 1

    def test_augmentation_ranges(self):
        cfg = AttackConfig(layout=[CubeSlot(height=3, width=3)])
        t = sample_transform(make_rng(3, 'aug'), cfg, (16, 16))[0]
        assert 0.9 <= t.scale <= 1.1
        assert np.all(np.abs(t.noise) <= cfg.noise_clip)
        assert t.corrupt.shape == (13,) and t.corrupt.dtype == bool

    def test_patch_larger_than_host(self):
        cfg = AttackConfig(layout=[CubeSlot(height=20, width=20)])
        with pytest.raises(PlacementError):
            sample_transform(make_rng(0, 'big'), cfg, (16, 16))

    def test_too_many_patches(self):
        cfg = AttackConfig(layout=[CubeSlot(height=8, width=8) for _ in range(5)], placement_retries=5)
        with pytest.raises(PlacementError, match='non-overlapping'):
            sample_transform(make_rng(0, 'crowd'), cfg, (16, 16))

    def test_center_grid(self):
        slots = [CubeSlot(height=4, width=4) for _ in range(4)]
        positions = [t.position for t in center_transforms((16, 16), slots)]
        assert positions == [(4, 4), (4, 8), (8, 4), (8, 8)]

    def test_center_does_not_fit(self):
        with pytest.raises(PlacementError):
            center_transforms((6, 6), [CubeSlot(height=4, width=4) for _ in range(2)])


class TestEmbedding:
    def test_paste_leaves_rest_of_host(self):
        host = np.zeros((8, 8, 13), dtype=np.float32)
        out = embed(host, np.full((2, 3, 13), 0.5), identity_transform((1, 2)))
        assert np.all(out.data[1:3, 2:5] == 0.5)
        outside = out.data.copy()
        outside[1:3, 2:5] = 0.0
        assert np.all(outside == 0.0)

    def test_rotation_matches_numpy(self):
        patch = make_rng(4, 'patch').uniform(0.0, 1.0, (2, 3, 13))
        out = embed(np.zeros((6, 6, 13)), patch, Transform(90, (0, 0)))
        np.testing.assert_allclose(out.data[:3, :2], np.rot90(patch, 1, axes=(0, 1)), atol=1e-6)

    def test_noise_is_clamped(self):
        t = Transform(0, (0, 0), noise=np.full((2, 2, 13), 0.8))
        out = embed(np.zeros((4, 4, 13)), np.full((2, 2, 13), 0.5), t)
        assert np.all(out.data[:2, :2] == 1.0)

    def test_brightness_scale(self):
        out = embed(np.zeros((4, 4, 13)), np.full((2, 2, 13), 0.5), Transform(0, (0, 0), scale=1.2))
        np.testing.assert_allclose(out.data[:2, :2], 0.6, atol=1e-6)

    def test_corrupted_bands_keep_host_values(self):
        host = np.full((4, 4, 13), 0.25)
        corrupt = np.zeros(13, dtype=bool)
        corrupt[[0, 5]] = True
        out = embed(host, np.full((2, 2, 13), 0.75), Transform(0, (1, 1), corrupt=corrupt))
        patch_region = out.data[1:3, 1:3]
        assert np.all(patch_region[..., [0, 5]] == 0.25)
        assert np.all(patch_region[..., 1] == 0.75)

    def test_patch_leaving_host(self):
        with pytest.raises(PlacementError):
            embed(np.zeros((4, 4, 13)), np.zeros((2, 2, 13)), identity_transform((3, 0)))

    def test_band_mismatch(self):
        with pytest.raises(AttackError):
            embed(np.zeros((4, 4, 13)), np.zeros((2, 2, 3)), identity_transform())

    def test_full_corruption_keeps_host(self):
        host = make_rng(5, 'host').uniform(0.0, 1.0, (5, 5, 13)).astype(np.float32)
        out = embed(host, np.full((2, 2, 13), 0.9), Transform(0, (2, 1), corrupt=np.ones(13, dtype=bool)))
        assert np.array_equal(out.data, host)

    def test_two_quarter_turns_make_a_half_turn(self):
        patch = make_rng(6, 'patch').uniform(0.0, 1.0, (2, 3, 13))
        once = embed(np.zeros((3, 2, 13)), patch, Transform(90, (0, 0))).data
        twice = embed(np.zeros((2, 3, 13)), once, Transform(90, (0, 0))).data
        half = embed(np.zeros((2, 3, 13)), patch, Transform(180, (0, 0))).data
        assert np.array_equal(twice, half)

    def test_metadata_survives(self):
        host = DataCube(np.zeros((4, 4, 13)), terrain='desert', seed=9)
        out = embed(host, np.zeros((1, 1, 13)), identity_transform())
        assert out.terrain == 'desert' and out.seed == 9


class TestLosses:
    def test_total_weights(self):
        assert loss_total(1.0, 2.0, 10.0, 5.0, 0.05).total == pytest.approx(11.5)

    def test_negative_weight(self):
        with pytest.raises(AttackError):
            loss_total(1.0, 1.0, 1.0, alpha=-1.0)

    def test_psi_single_confidence(self):
        assert psi_from_confidences([0.05]) == pytest.approx(2.9957, abs=1e-4)

    def test_psi_sums_over_batch(self):
        assert psi_from_confidences([0.5, 0.5]) == pytest.approx(2 * math.log(2))

    def test_psi_zero_confidence_is_finite(self):
        assert psi_from_confidences([0.0]) == pytest.approx(-math.log(1e-7))

    def test_bias_loss_confident_detector(self, tiny_detector, tiny_scenes):
        tiny_detector.weights['dense1.b'][:] = 30.0
        assert loss_bias(tiny_detector, tiny_scenes[:2]) == pytest.approx(0.0, abs=1e-6)

    def test_nps_zero_for_index_materials(self, tiny_index):
        cube = np.broadcast_to(tiny_index.matrix[:, 3], (3, 3, 13)).copy()
        assert loss_nps(cube, tiny_index) == pytest.approx(0.0, abs=1e-12)

    def test_bias_loss_is_additive(self, tiny_detector, tiny_scenes):
        single = loss_bias(tiny_detector, tiny_scenes[:1])
        assert loss_bias(tiny_detector, [tiny_scenes[0], tiny_scenes[0]]) == pytest.approx(2 * single)

    def test_nps_midpoint_of_two_materials(self):
        index = SpectralIndex(np.stack([np.full(13, 0.2), np.full(13, 0.6)], axis=1), ('dark', 'light'))
        d = np.linalg.norm(index.matrix[:, 1] - index.matrix[:, 0])
        assert loss_nps(np.full((1, 1, 13), 0.4), index) == pytest.approx(d / 2)

    def test_nps_distance(self, tiny_index):
        cube = np.broadcast_to(tiny_index.matrix[:, 0] + 0.01, (2, 2, 13)).copy()
        distances = np.linalg.norm(tiny_index.matrix - cube[0, 0][:, None], axis=0)
        assert loss_nps(cube, tiny_index) == pytest.approx(distances.min())

    def test_cloak_matches_flat_roa(self):
        roa = np.full((8, 8, 13), 0.25)
        cube = np.full((2, 2, 13), 0.25)
        assert loss_cloak(cube, roa, make_rng(0, 'crop')) == pytest.approx(0.0, abs=1e-12)

    def test_cloak_distance(self):
        roa = np.full((8, 8, 13), 0.25)
        cube = np.full((2, 2, 13), 0.75)
        expected = math.sqrt(2 * 2 * len(BANDS_V.positions) * 0.25)
        assert loss_cloak(cube, roa, make_rng(0, 'crop')) == pytest.approx(expected)

    def test_crop_larger_than_roa(self):
        with pytest.raises(AttackError):
            random_crop(np.zeros((3, 3, 3)), 4, 4, make_rng(0, 'crop'))


class TestOptimization:
    def test_attack_gradient_matches_finite_differences(self, tiny_detector, tiny_scenes, tiny_index):
        params = [init_params(4, 4, tiny_index.q, seed=3, sigma=0.5)]
        host = tiny_scenes[0].data.astype(np.float64)
        noise = make_rng(3, 'fd-noise').normal(0.0, 0.01, (4, 4, 13))
        transforms = [[Transform(90, (5, 6), 1.05, noise)]]
        crop = tiny_scenes[2].data[:4, :4, list(BANDS_V.positions)].astype(np.float64)
        graph = build_attack_graph(params, [host], transforms, [crop], tiny_detector, tiny_index, AttackConfig())
        report = finite_difference_check(graph, {'logits0': params[0].logits}, ['logits0'], h=1e-4, tol=1e-2,
                                         seed_output='total', max_coords=20)
        assert report.passed, report.worst

    def test_trace_and_frozen_detector(self, tiny_detector, tiny_scenes, tiny_index):
        digest = tiny_detector.digest()
        cfg = _small_attack()
        result = optimize_cube(init_params(4, 4, tiny_index.q, seed=2), tiny_scenes, tiny_scenes[1],
                               tiny_detector, tiny_index, cfg)
        assert tiny_detector.digest() == digest == result.detector_digest
        assert list(result.trace.columns) == TRACE_COLUMNS
        assert list(result.trace['step']) == [0, 1, 2]
        assert np.all(np.isfinite(result.trace[['psi', 'phi', 'omega', 'total']].to_numpy()))
        assert 0 <= result.best_step < 3
        assert result.params[0].logits.shape == (4, 4, tiny_index.q)
        assert result.config_hash == cfg.config_hash()

    def test_total_combines_terms(self, tiny_detector, tiny_scenes, tiny_index):
        result = optimize_cube(init_params(4, 4, tiny_index.q, seed=2), tiny_scenes, tiny_scenes[1],
                               tiny_detector, tiny_index, _small_attack(steps=1))
        row = result.trace.iloc[0]
        assert row['total'] == pytest.approx(row['psi'] + 5.0 * row['phi'] + 0.05 * row['omega'])

    def test_deterministic(self, tiny_detector, tiny_scenes, tiny_index):
        def once():
            return optimize_cube(init_params(4, 4, tiny_index.q, seed=2), tiny_scenes, tiny_scenes[1],
                                 tiny_detector, tiny_index, _small_attack())
        a, b = once(), once()
        assert np.array_equal(a.params[0].logits, b.params[0].logits)
        pd.testing.assert_frame_equal(a.trace, b.trace)

    def test_nan_detector_aborts_with_initial_params(self, tiny_detector, tiny_scenes, tiny_index):
        tiny_detector.weights['dense1.b'][:] = np.nan
        params = init_params(4, 4, tiny_index.q, seed=2)
        with pytest.raises(NonFiniteLossError) as info:
            optimize_cube(params, tiny_scenes, tiny_scenes[1], tiny_detector, tiny_index, _small_attack())
        assert info.value.trace.empty
        assert np.array_equal(info.value.last_params[0].logits, params.logits)

    def test_nan_mid_run_keeps_last_finite_step(self, monkeypatch, tiny_detector, tiny_scenes, tiny_index):
        real = attack.value_and_gradient
        seen = []

        def poisoned(graph, bindings, wrt, seed_output):
            seen.append(np.array(bindings['logits0']))
            outputs, grads = real(graph, bindings, wrt, seed_output)
            if len(seen) == 3:
                outputs = dict(outputs, psi=np.array(np.nan))
            return outputs, grads

        monkeypatch.setattr(attack, 'value_and_gradient', poisoned)
        with pytest.raises(NonFiniteLossError, match='step 2') as info:
            optimize_cube(init_params(4, 4, tiny_index.q, seed=2), tiny_scenes, tiny_scenes[1],
                          tiny_detector, tiny_index, _small_attack(steps=5))
        last = info.value.last_params[0].logits
        assert list(info.value.trace['step']) == [0, 1]
        assert np.all(np.isfinite(last))
        assert np.array_equal(last, seen[1])
        assert not np.array_equal(last, seen[2])

    def test_best_waits_for_full_window(self, monkeypatch, tiny_detector, tiny_scenes, tiny_index):
        real = attack.value_and_gradient
        calls = []

        # a lucky first step must not win before the window has filled
        def lucky_start(graph, bindings, wrt, seed_output):
            outputs, grads = real(graph, bindings, wrt, seed_output)
            calls.append(seed_output)
            psi = -100.0 if len(calls) == 1 else 1.0
            return dict(outputs, psi=np.array(psi)), grads

        monkeypatch.setattr(attack, 'value_and_gradient', lucky_start)
        result = optimize_cube(init_params(4, 4, tiny_index.q, seed=2), tiny_scenes, tiny_scenes[1],
                               tiny_detector, tiny_index, _small_attack(steps=6, best_window=3))
        assert result.best_step == 2
        assert result.best_psi == pytest.approx((-100.0 + 1.0 + 1.0) / 3)

    def test_short_run_still_picks_best(self, tiny_detector, tiny_scenes, tiny_index):
        result = optimize_cube(init_params(4, 4, tiny_index.q, seed=2), tiny_scenes, tiny_scenes[1],
                               tiny_detector, tiny_index, _small_attack(steps=2, best_window=10))
        assert result.best_step in (0, 1)
        assert math.isfinite(result.best_psi)

    def test_zero_steps_returns_initial_params(self, tiny_detector, tiny_scenes, tiny_index):
        params = init_params(4, 4, tiny_index.q, seed=2)
        result = optimize_cube(params, tiny_scenes, tiny_scenes[1], tiny_detector, tiny_index,
                               _small_attack(steps=0))
        assert result.trace.empty
        assert np.array_equal(result.params[0].logits, params.logits)

    def test_two_cube_layout(self, tiny_detector, tiny_scenes, tiny_index):
        cfg = _small_attack(steps=2, layout=[CubeSlot(height=3, width=3), CubeSlot(height=3, width=3)])
        params = [init_params(3, 3, tiny_index.q, seed=2, key=j) for j in range(2)]
        result = optimize_cube(params, tiny_scenes, tiny_scenes[1], tiny_detector, tiny_index, cfg)
        assert len(result.params) == 2

    def test_layout_mismatch(self, tiny_detector, tiny_scenes, tiny_index):
        with pytest.raises(AttackError, match='layout slot'):
            optimize_cube(init_params(5, 5, tiny_index.q, seed=0), tiny_scenes, tiny_scenes[1],
                          tiny_detector, tiny_index, _small_attack())

    def test_empty_training_set(self, tiny_detector, tiny_scenes, tiny_index):
        with pytest.raises(AttackError, match='empty'):
            optimize_cube(init_params(4, 4, tiny_index.q, seed=0), [], tiny_scenes[1],
                          tiny_detector, tiny_index, _small_attack())


    @pytest.mark.slow
    def test_desk_scale_psi_attack(self, desk_bench):
        assets = desk_bench.assets(['default'])
        detector, sets = assets.detectors['default'], assets.attack_sets['default']
        cfg = AttackConfig(loss='psi', steps=500, layout=[CubeSlot(height=25, width=25)], seed=0)
        start = init_params(25, 25, assets.index.q, seed=0, sigma=cfg.init_sigma)
        result = optimize_cube(start, sets.train, sets.roa, detector, assets.index, cfg)

        baseline = float(np.mean(sets.train_confidences))
        attacked = attack_metrics(detector, sets, result.params, assets.index, cfg, seed=0)
        assert baseline <= 0.5
        assert attacked.cloudy_train >= 0.6
        assert result.trace['mean_conf'].iloc[-50:].mean() > result.trace['mean_conf'].iloc[:10].mean()


class TestPersistence:
    def test_save_and_load(self, tmp_path, tiny_detector, tiny_scenes, tiny_index):
        cfg = _small_attack(steps=2)
        result = optimize_cube(init_params(4, 4, tiny_index.q, seed=2), tiny_scenes, tiny_scenes[1],
                               tiny_detector, tiny_index, cfg)
        out = str(tmp_path / 'attack' / 'cube.msc1')
        written = save_attack_result(result, out, tiny_index, cfg, seed=2)
        assert all(os.path.exists(p) for p in written)
        assert out in written

        params, loaded_cfg, roa = load_attack_result(out)
        assert np.array_equal(params[0].logits, result.params[0].logits)
        assert loaded_cfg == cfg
        assert roa.terrain == 'desert'
        assert np.array_equal(roa.data, tiny_scenes[1].data)

        trace = pd.read_csv(tmp_path / 'attack' / 'cube.trace.csv')
        assert list(trace.columns) == TRACE_COLUMNS and len(trace) == 2

    def test_missing_sidecar(self, tmp_path):
        with pytest.raises(AttackError, match='sidecar'):
            load_attack_result(str(tmp_path / 'nothing.msc1'))
