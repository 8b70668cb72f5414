import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from buildfunc import oracles
from buildfunc.errors import GridMismatch, InvalidParams, OutOfExtent, SkippedBuilding
from buildfunc.evaluation import (ClassRaster, GridSpec, KdeParams, evaluate_labeling,
                                  kde_density, normalize_probability, read_raster,
                                  score_building, write_raster, zonal_mean)
from buildfunc.geometry import Polygon
from buildfunc.labeling import run_pipeline
from buildfunc.model import CLASSES, BuildingFootprint, ClassScores, FunctionClass
from buildfunc.synth import SynthConfig, generate_scene, random_labels

from conftest import C, R


def constant_stack(vec, spec):
    return [ClassRaster(np.full((spec.rows, spec.cols), v), spec, c, "probability")
            for v, c in zip(vec, CLASSES)]


def gradient_stack(spec, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(spec.rows), np.arange(spec.cols), indexing="ij")
    layers = []
    for _ in CLASSES:
        a, b, c = rng.uniform(0.1, 1.0, 3)
        layers.append(a + b * xx / spec.cols + c * yy / spec.rows + rng.uniform(0, 0.05, xx.shape))
    stack = np.stack(layers)
    return stack / stack.sum(axis=0)


class TestKde:
    def test_single_point_peak(self):
        spec = GridSpec(0.0, 0.0, 20.0, 11, 11)
        p = KdeParams(bandwidth=200.0)
        r = kde_density([(110.0, 110.0)], p, spec)
        assert r.grid[5, 5] == pytest.approx(1 / (2 * math.pi * 200.0 ** 2), rel=1e-14)
        assert r.grid[5, 5] == r.grid.max()
        assert r.grid[5, 6] < r.grid[5, 5] and r.grid[5, 8] < r.grid[5, 7]

    def test_zero_points(self):
        r = kde_density(np.empty((0, 2)), KdeParams(), (0, 0, 100, 100))
        assert not r.grid.any()

    @pytest.mark.parametrize("bad", [dict(bandwidth=0), dict(cell_size=-1), dict(bandwidth=math.nan)])
    def test_bad_params(self, bad):
        with pytest.raises(InvalidParams):
            KdeParams(**bad)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 1000, (100, 2))
        spec = GridSpec(-200.0, -200.0, 100.0, 14, 14)
        r = kde_density(pts, KdeParams(bandwidth=150.0), spec)
        want = oracles.oracle_kde(pts.tolist(), spec.x_centers, spec.y_centers, 150.0)
        assert np.abs(r.grid - want).max() <= 1e-9 * max(1.0, np.abs(want).max())

    def test_mass_with_padding(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 2000, (300, 2))
        p = KdeParams(bandwidth=200.0, cell_size=20.0)
        r = kde_density(pts, p, (0.0, 0.0, 2000.0, 2000.0))
        mass = r.grid.sum() * p.cell_size ** 2
        assert abs(mass - 300) / 300 < 0.02

    def test_threads_bit_identical(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 5000, (5000, 2))
        p = KdeParams(bandwidth=100.0, cell_size=25.0)
        a = kde_density(pts, p, (0, 0, 5000, 5000), threads=1)
        b = kde_density(pts, p, (0, 0, 5000, 5000), threads=4)
        assert np.array_equal(a.grid, b.grid)


class TestNormalize:
    def spec(self):
        return GridSpec(0.0, 0.0, 1.0, 1, 2)

    def test_shares(self):
        spec = self.spec()
        dens = [ClassRaster(np.array([[d, 0.0]]), spec, c) for d, c in zip((2, 1, 1, 0, 0), CLASSES)]
        prob = normalize_probability(dens, 1e-12)
        assert [r.grid[0, 0] for r in prob] == pytest.approx([0.5, 0.25, 0.25, 0, 0], abs=1e-12)
        assert [r.grid[0, 1] for r in prob] == [0.2] * 5

    def test_mismatched(self):
        a = ClassRaster(np.zeros((1, 2)), self.spec(), R)
        b = ClassRaster(np.zeros((2, 2)), GridSpec(0.0, 0.0, 1.0, 2, 2), C)
        with pytest.raises(GridMismatch):
            normalize_probability([a, b, a, a, a])

    @given(st.integers(0, 2**32 - 1))
    def test_random_stacks_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        spec = GridSpec(0.0, 0.0, 1.0, 6, 7)
        dens = [ClassRaster(rng.exponential(1e-6, (6, 7)) * (rng.random((6, 7)) < 0.7), spec, c)
                for c in CLASSES]
        prob = normalize_probability(dens)
        total = sum(r.grid for r in prob)
        assert np.abs(total - 1).max() <= 1e-6


class TestZonal:
    spec = GridSpec(0.0, 0.0, 10.0, 20, 20)

    def test_constant_field(self):
        vec = (0.1, 0.2, 0.3, 0.25, 0.15)
        stack = constant_stack(vec, self.spec)
        for poly in [Polygon.box(12, 12, 77, 40), Polygon([(50, 50), (90, 60), (60, 95)])]:
            assert zonal_mean(stack, poly).values == pytest.approx(vec, abs=1e-12)

    def test_tiny_building_uses_centroid_cell(self):
        stack = gradient_stack(self.spec)
        got = zonal_mean((stack, self.spec), Polygon.box(41, 72, 43, 73))
        assert got.values == pytest.approx(tuple(stack[:, 7, 4] / stack[:, 7, 4].sum()), abs=1e-15)

    def test_out_of_extent(self):
        with pytest.raises(OutOfExtent):
            zonal_mean(constant_stack((0.2,) * 5, self.spec), Polygon.box(190, 190, 210, 199))

    @pytest.mark.parametrize("seed", range(5))
    def test_irregular_polygon_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        stack = gradient_stack(self.spec, seed)
        ang = np.sort(rng.uniform(0, 2 * np.pi, 9))
        rad = rng.uniform(15, 60, 9)
        poly = Polygon(list(zip(100 + rad * np.cos(ang), 100 + rad * np.sin(ang))))
        b = BuildingFootprint("b", poly)
        want = oracles.oracle_zonal(stack, (0.0, 0.0), 10.0, b)
        got = zonal_mean((stack, self.spec), b)
        assert np.abs(np.asarray(got.values) - want).max() <= 1e-9


class TestScoreBuilding:
    def test_perfect(self):
        e = score_building(ClassScores((1.0, 0, 0, 0, 0), normalized=True), R)
        assert (e.top1, e.cosine) == (1, 1.0)

    def test_uniform(self):
        u = ClassScores((0.2,) * 5, normalized=True)
        for c in CLASSES:
            e = score_building(u, c)
            assert e.cosine == pytest.approx(0.4472, abs=1e-4)
            assert e.top1 == (1 if c is R else 0)

    def test_mixed(self):
        e = score_building(ClassScores((0.5, 0.3, 0.1, 0.05, 0.05), normalized=True), C)
        assert e.top1 == 0
        # 0.3 / sqrt(0.25 + 0.09 + 0.01 + 0.0025 + 0.0025)
        assert e.cosine == pytest.approx(oracles.cosine((0.5, 0.3, 0.1, 0.05, 0.05), C), abs=1e-15)
        assert e.cosine == pytest.approx(0.5035, abs=1e-4)

    def test_unlabeled(self):
        with pytest.raises(SkippedBuilding):
            score_building(ClassScores((0.2,) * 5, normalized=True), None)

    @settings(max_examples=50)
    @given(st.lists(st.floats(0, 1), min_size=5, max_size=5).filter(lambda v: sum(v) > 1e-3),
           st.sampled_from(list(FunctionClass)))
    def test_cosine_bounds(self, raw, label):
        vals = tuple(v / sum(raw) for v in raw)
        e = score_building(ClassScores(vals), label)
        assert 0.0 <= e.cosine <= 1.0
        if vals[label - 1] == 1.0:
            assert e.cosine == 1.0


@pytest.fixture(scope="module")
def city():
    scene, truth = generate_scene(SynthConfig.grid(3, 3, seed=8, buildings_per_zone=36,
                                                   poi_noise_rate=0.2))
    return scene, truth, run_pipeline(scene).labels


class TestEvaluateLabeling:
    def test_endpoints(self, city):
        scene, _, labels = city
        r1 = evaluate_labeling(scene, labels, w=1.0)
        r0 = evaluate_labeling(scene, labels, w=0.0)
        assert r1.bfmi == r1.mean_top1
        assert r0.bfmi == r0.mean_cosine

    def test_linearity(self, city):
        scene, _, labels = city
        r = evaluate_labeling(scene, labels, w=0.3)
        assert r.bfmi == pytest.approx(0.3 * r.mean_top1 + 0.7 * r.mean_cosine, abs=1e-12)

    def test_argmax_labels_score_full_top1(self, city):
        scene, _, labels = city
        r = evaluate_labeling(scene, labels)
        own = {e.building_id: e.poi_probability.argmax() for e in r.per_building}
        assert evaluate_labeling(scene, own).mean_top1 == 1.0

    def test_pipeline_beats_random(self, city):
        scene, _, labels = city
        ours = evaluate_labeling(scene, labels).bfmi
        rand = evaluate_labeling(scene, random_labels(scene, 1)).bfmi
        assert ours > rand

    def test_unlabeled_excluded(self, city):
        scene, truth, _ = city
        partial = {bid: fc for i, (bid, fc) in enumerate(truth.items()) if i % 3}
        r = evaluate_labeling(scene, partial)
        assert r.evaluated_count == len(partial)
        assert r.excluded_count == len(truth) - len(partial)

    def test_order_invariant(self, city):
        scene, truth, _ = city
        a = evaluate_labeling(scene, dict(truth))
        b = evaluate_labeling(scene, dict(reversed(list(truth.items()))))
        assert a.bfmi == b.bfmi

    def test_raster_round_trip(self, tmp_path):
        r = kde_density([(5.0, 5.0)], KdeParams(bandwidth=10.0, cell_size=2.0), (0, 0, 10, 10))
        write_raster(r, tmp_path / "r.txt")
        back = read_raster(tmp_path / "r.txt")
        assert back.spec == r.spec and np.array_equal(back.grid, r.grid)
