import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from buildfunc import oracles
from buildfunc.errors import KTooLarge, PipelineError, PipelineOrderError
from buildfunc.labeling import (CorrectionParams, Labeling, Stage1Params, Stage2Params,
                                category_weight, majority_step, neighbor_table, proximity_score,
                                read_labels, run_pipeline, stage1_candidate_labels,
                                stage2_refine, stage3_correct, write_labels)
from buildfunc.model import Block, FunctionClass, Stage
from buildfunc.synth import SynthConfig, generate_scene

from conftest import C, E, R, box_building, poi, row_scene, scene_of


def uniform_freqs(scene, value=1):
    blk = scene.blocks[0]
    only = Block(blk.id, blk.polygon, (value,) * 5, 5 * value)
    return dataclasses.replace(scene, blocks=(only,) + tuple(
        Block(b.id, b.polygon, (0,) * 5, 0) for b in scene.blocks[1:]))


class TestFormulas:
    def test_proximity(self):
        assert proximity_score(0.0) == 1.0
        for d in [0.5, 1.0, 2.0, 17.3, 49.9]:
            assert proximity_score(d) == 1.0 / (1.0 + d)

    def test_weight(self):
        assert category_weight(0, 0.5) == 1.0
        assert category_weight(0, 1.0) == 1.0
        assert category_weight(3, 0.5) == 0.5

    @given(st.floats(0, 1e4), st.floats(1e-6, 1e3))
    def test_proximity_strictly_decreasing(self, d, step):
        assert proximity_score(d + step) < proximity_score(d)

    @given(st.integers(0, 10_000), st.floats(0.3, 1.0))
    def test_weight_strictly_decreasing(self, f, alpha):
        assert category_weight(f + 1, alpha) < category_weight(f, alpha)

    def test_alpha_outside_range_is_clamped(self):
        with pytest.warns(UserWarning):
            assert Stage1Params(alpha=2.0).alpha == 1.0


class TestStage1:
    def test_single_poi_inside(self):
        scene = scene_of([box_building("b1", 0, 0)], [poi("p1", 5, 5, R)])
        scene = uniform_freqs(scene, 0)
        lab = stage1_candidate_labels(scene, Stage1Params(alpha=1.0))
        assert lab[0].label is R
        assert lab[0].score_vector[R] == 1.0

    def test_contribution_at_one_meter(self):
        scene = scene_of([box_building("b1", 0, 0)], [poi("p1", 11, 5, C)])
        blk = scene.blocks[0]
        scene = dataclasses.replace(scene, blocks=(Block(blk.id, blk.polygon, (0, 3, 0, 0, 0), 3),))
        lab = stage1_candidate_labels(scene, Stage1Params(alpha=0.5))
        assert lab[0].score_vector[C] == 0.25
        assert lab[0].label is C

    def test_mixed_building(self):
        pois = [poi("p1", 5, 5, C), poi("p2", 12, 5, C), poi("p3", 3, 3, R)]
        scene = uniform_freqs(scene_of([box_building("b1", 0, 0)], pois), 1)
        lab = stage1_candidate_labels(scene, Stage1Params(alpha=0.5))
        s = lab[0].score_vector
        assert s[C] == pytest.approx(2 ** -0.5 * (1 + 1 / 3), abs=1e-12)
        assert s[R] == pytest.approx(2 ** -0.5, abs=1e-12)
        assert round(s[C], 4) == 0.9428 and round(s[R], 4) == 0.7071
        assert lab[0].label is C

    def test_tie_goes_to_lowest_code(self):
        scene = scene_of([box_building("b1", 0, 0)], [poi("p1", 5, 5, E), poi("p2", 4, 4, C)])
        scene = uniform_freqs(scene, 0)
        assert stage1_candidate_labels(scene)[0].label is C

    def test_no_pois_is_unlabeled(self):
        scene = scene_of([box_building("b1", 0, 0), box_building("b2", 500, 0)],
                         [poi("p1", 5, 5, R)])
        lab = stage1_candidate_labels(scene)
        assert lab[1].label is None and lab[0].label is R

    def test_d_max_inclusive_and_nearest_only(self):
        a, b = box_building("a", 0, 0), box_building("b", 30, 0)
        scene = scene_of([a, b], [poi("p1", 15, 5, R), poi("p2", 90, 5, C), poi("p3", 91, 5, E)])
        lab = stage1_candidate_labels(scene, Stage1Params(d_max=50.0))
        # p1 is 5 m from a, 15 m from b; p2 is exactly 50 m from b; p3 beyond
        assert lab[0].label is R
        assert lab[1].label is C
        assert lab[1].score_vector[E] == 0.0

    def test_missing_blocks(self):
        scene = scene_of([box_building("b1", 0, 0)], [poi("p1", 5, 5, R)])
        with pytest.raises(PipelineOrderError):
            stage1_candidate_labels(dataclasses.replace(scene, blocks=()))

    @pytest.mark.parametrize("seed", range(4))
    def test_argmax_scale_invariance(self, seed):
        scene, _ = generate_scene(SynthConfig.grid(2, 2, seed=seed, buildings_per_zone=25,
                                                   poi_noise_rate=0.4, poi_jitter=10.0))
        lab = stage1_candidate_labels(scene)
        scaled = np.asarray(lab.scores) * 3.7
        has = lab.labeled_mask
        assert np.array_equal((scaled.argmax(axis=1) + 1)[has], np.asarray(lab.codes)[has])

    def test_trivial_scene_matches_oracle(self):
        scene = scene_of([box_building("b1", 0, 0)], [poi("p1", 5, 5, R), poi("p2", 12, 1, C)])
        codes, scores = oracles.oracle_stage1(scene, 0.5, 50.0)
        lab = stage1_candidate_labels(scene)
        assert list(lab.codes) == codes
        assert np.abs(np.asarray(lab.scores) - scores).max() <= 1e-12


class TestStage2:
    def test_center_flips(self):
        scene = row_scene([R, R, C, R, R])
        s1 = stage1_candidate_labels(scene)
        assert [int(c) for c in s1.codes] == [1, 1, 2, 1, 1]
        out = stage2_refine(s1, scene, Stage2Params(k=2))
        assert [int(c) for c in out.labels.codes] == [1] * 5
        assert out.change_counts == [1, 0]
        assert out.iterations_used == 2

    def test_uniform_fixed_point(self):
        scene = row_scene([R] * 8)
        out = stage2_refine(stage1_candidate_labels(scene), scene, Stage2Params(k=3))
        assert out.iterations_used == 1
        assert out.change_counts == [0]

    def test_k_too_large(self):
        scene = row_scene([R] * 4)
        with pytest.raises(KTooLarge):
            stage2_refine(stage1_candidate_labels(scene), scene, Stage2Params(k=4))

    def test_unlabeled_never_votes_but_can_be_filled(self):
        scene = row_scene([R, R, None, R, R, None, None, None])
        out = stage2_refine(stage1_candidate_labels(scene), scene, Stage2Params(k=2))
        codes = [int(c) for c in out.labels.codes]
        assert codes[2] == 1
        assert codes[6] == 0 and codes[7] == 0

    @settings(max_examples=60)
    @given(st.integers(1, 9), st.data())
    def test_no_strict_majority_means_no_change(self, k, data):
        votes = data.draw(st.lists(st.integers(0, 5), min_size=k, max_size=k))
        counts = [votes.count(c) for c in range(1, 6)]
        codes = np.asarray([data.draw(st.integers(0, 5))] + votes)
        nbrs = np.arange(1, k + 1)[None, :]
        out = majority_step(codes, np.vstack([nbrs, np.zeros((k, k), dtype=int)]), k)
        if max(counts) * 2 <= k:
            assert out[0] == codes[0]
        else:
            assert out[0] == counts.index(max(counts)) + 1

    def test_random_20_matches_oracle_step_for_step(self):
        rng = np.random.default_rng(11)
        buildings = [box_building(f"b{i:02d}", *rng.uniform(0, 300, 2), size=6.0)
                     for i in range(20)]
        centers = [b.centroid for b in buildings]
        pois = [poi(f"p{i:02d}", cx, cy, FunctionClass(int(rng.integers(1, 6))))
                for i, (cx, cy) in enumerate(centers) if rng.random() < 0.8]
        scene = scene_of(buildings, pois)
        s1 = stage1_candidate_labels(scene)
        out = stage2_refine(s1, scene, Stage2Params(k=5, max_iterations=10), keep_history=True)
        want = oracles.oracle_stage2(list(s1.codes), scene, 5, 10)
        assert [h.tolist() for h in out.history] == want

    def test_processing_order_irrelevant(self):
        scene, _ = generate_scene(SynthConfig.grid(3, 3, seed=5, buildings_per_zone=30,
                                                   poi_noise_rate=0.3, poi_jitter=8.0))
        s1 = stage1_candidate_labels(scene)
        base = stage2_refine(s1, scene, Stage2Params(k=7)).labels.as_dict()
        # rename ids so that sorted order reverses; geometry is unchanged
        n = len(scene.buildings)
        ren = {b.id: f"x{n - i:05d}" for i, b in enumerate(scene.buildings)}
        from buildfunc.ingest import make_scene
        renamed = make_scene([dataclasses.replace(b, id=ren[b.id], block_id=None)
                              for b in scene.buildings],
                             list(scene.pois), scene.block_config)
        r1 = stage1_candidate_labels(renamed)
        out = stage2_refine(r1, renamed, Stage2Params(k=7)).labels.as_dict()
        assert {bid: out[ren[bid]] for bid in base} == base


class TestStage3:
    def mall_scene(self):
        buildings = [box_building("a_near", 45, -5), box_building("b_far", 300, 0)]
        pois = [poi("p1", 50, 0, R), poi("p2", 305, 5, R),
                poi("h1", 0, 0, C, high=True, radius=200.0)]
        return scene_of(buildings, pois)

    def test_mall_relabels_neighbour(self):
        scene = self.mall_scene()
        s1 = stage1_candidate_labels(scene)
        out, n = stage3_correct(s1, scene)
        assert out[0].label is C and out[0].stage is Stage.CORRECTED
        assert out[1].label is R
        assert n == 1

    def test_no_high_level(self):
        scene = row_scene([R, C, R])
        s1 = stage1_candidate_labels(scene)
        out, n = stage3_correct(s1, scene)
        assert out == s1 and n == 0

    def test_overlapping_buffers_nearest_wins(self):
        b = box_building("b1", -5, -5)
        pois = [poi("h1", 80, 0, C, high=True, radius=200.0),
                poi("h2", -120, 0, E, high=True, radius=200.0),
                poi("p1", 0, 0, R)]
        scene = scene_of([b, box_building("b2", 1000, 1000)], pois)
        s1 = stage1_candidate_labels(scene)
        out, _ = stage3_correct(s1, scene)
        assert out[0].label is C
        ratio, _ = stage3_correct(s1, scene, CorrectionParams("smallest_radius_ratio"))
        assert ratio[0].label is C
        want = oracles.oracle_stage3(list(s1.codes), scene)
        assert [int(c) for c in out.codes] == want

    def test_equal_distance_lowest_poi_id(self):
        pois = [poi("h2", 50, 0, E, high=True, radius=100.0),
                poi("h1", -50, 0, C, high=True, radius=100.0)]
        scene = scene_of([box_building("b1", -5, -5)], pois)
        out, _ = stage3_correct(stage1_candidate_labels(scene), scene)
        assert out[0].label is C

    def test_idempotent(self):
        scene = self.mall_scene()
        once, _ = stage3_correct(stage1_candidate_labels(scene), scene)
        twice, n = stage3_correct(once, scene)
        assert twice == once and n == 0


class TestPipeline:
    def test_all_pois_stripped(self):
        scene, _ = generate_scene(SynthConfig.grid(2, 2, seed=1, buildings_per_zone=20))
        run = run_pipeline(scene.without_pois())
        assert not run.stage1.labeled_mask.any()
        assert not run.labels.labeled_mask.any()

    def test_noise_free_recovers_truth(self):
        scene, truth = generate_scene(SynthConfig.grid(3, 3, seed=2, buildings_per_zone=49))
        run = run_pipeline(scene)
        assert run.labels.accuracy(truth) == 1.0

    def test_two_runs_same_digest(self):
        scene, _ = generate_scene(SynthConfig.grid(2, 2, seed=3, buildings_per_zone=40,
                                                   poi_noise_rate=0.3))
        assert run_pipeline(scene).digest == run_pipeline(scene, threads=4).digest

    def test_stage_attribution(self):
        scene = row_scene([R, C])
        with pytest.raises(PipelineError) as info:
            run_pipeline(scene, stage2=Stage2Params(k=5))
        assert info.value.stage == 2 and info.value.kind == "KTooLarge"

    def test_label_file_round_trip(self, tmp_path):
        scene, _ = generate_scene(SynthConfig.grid(2, 1, seed=4, buildings_per_zone=10,
                                                   pois_per_building=0.5))
        run = run_pipeline(scene, stage2=Stage2Params(k=3))
        write_labels(scene, run.labels, tmp_path / "l.geojson")
        back = read_labels(tmp_path / "l.geojson", scene)
        assert back.as_dict() == run.labels.as_dict()
