import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from evotune.tasks import (
    InvalidOutputError,
    generate_instances,
    get_task,
    load_instance_set,
    run_rollouts,
    save_instance_set,
)
from evotune.tasks import bin_packing as bp
from evotune.tasks import flatpack as fp
from evotune.tasks import tsp
from evotune.tasks.tsplib import load_optima_table, load_tsplib, parse_tsplib

BERLIN52_TOUR = [1, 49, 32, 45, 19, 41, 8, 9, 10, 43, 33, 51, 11, 52, 14, 13, 47, 26, 27, 28, 12, 25, 4, 6,
                 15, 5, 24, 48, 38, 37, 40, 39, 36, 35, 34, 44, 46, 16, 29, 50, 20, 23, 30, 2, 7, 42, 21,
                 17, 3, 18, 31, 22]


def best_fit(item, bins):
    return -(bins - item)


# -- bin packing -----------------------------------------------------------------

def test_bp_lower_bound_and_gap():
    inst = bp.BinPackingInstance(150, [100, 100, 51])
    assert bp.lower_bound(inst) == 2
    assert bp.rollout(best_fit, inst) == 3
    assert bp.gap_percent(3, inst) == pytest.approx(50.0)


def test_bp_small_instances_match_exact_optimum_when_trivial():
    inst = bp.BinPackingInstance(150, [75, 75, 75, 75])
    assert bp.rollout(best_fit, inst) == oracles.optimal_bins(inst.items, 150) == 2


def test_bp_heuristic_only_sees_feasible_bins():
    seen = []

    def spy(item, bins):
        seen.append((item, bins.copy()))
        assert np.all(bins >= item)
        return np.zeros(bins.size)

    bp.rollout(spy, bp.BinPackingInstance(150, [100, 40, 60, 20, 30]))
    assert seen[0] == (40, np.array([50.0]))


def test_bp_ties_go_to_lowest_index():
    def flat(item, bins):
        return np.ones(bins.size)

    # first fit under constant scores
    assert bp.rollout(flat, bp.BinPackingInstance(10, [6, 6, 3, 3])) == 2


@pytest.mark.parametrize("bad", [
    lambda item, bins: np.ones(bins.size + 1),
    lambda item, bins: np.full(bins.size, np.nan),
    lambda item, bins: "x",
])
def test_bp_rejects_bad_scores(bad):
    with pytest.raises(InvalidOutputError):
        bp.rollout(bad, bp.BinPackingInstance(150, [50, 50, 50]))


def test_bp_instance_validation():
    with pytest.raises(ValueError):
        bp.BinPackingInstance(150, [151])
    with pytest.raises(ValueError):
        bp.BinPackingInstance(0, [])


def test_bp_suite_splits():
    suite = bp.BinPackingSuite(num_instances=3, num_items=40)
    val = suite.generate("validation", 1)
    pert = suite.generate("validation_perturbed", 1)
    test = suite.generate("test", 1)
    assert [sorted(a.items) for a in val] == [sorted(b.items) for b in pert]
    assert [a.items for a in val] != [b.items for b in pert]
    assert [a.items for a in val] != [b.items for b in test]
    assert [a.items for a in val] == [a.items for a in suite.generate("validation", 1)]
    assert all(20 <= x <= 100 for inst in val for x in inst.items)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(1, 150), min_size=1, max_size=60))
def test_bp_rollout_matches_best_fit_oracle(items):
    inst = bp.BinPackingInstance(150, items)
    used = bp.rollout(best_fit, inst)
    assert used == oracles.best_fit_bins(items, 150)
    assert bp.lower_bound(inst) <= used <= len(items)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(20, 100), min_size=1, max_size=9))
def test_bp_never_beats_exact(items):
    inst = bp.BinPackingInstance(150, items)
    assert bp.rollout(best_fit, inst) >= oracles.optimal_bins(items, 150) >= bp.lower_bound(inst)


# -- TSP ---------------------------------------------------------------------

def random_matrix(rng, n, integer=False):
    d = tsp.euclidean_matrix(rng.random((n, 2)) * (1000 if integer else 1))
    return np.rint(d) if integer else d


def test_tour_cost_and_nearest_neighbor():
    d = np.array([[0, 1, 4, 3], [1, 0, 2, 5], [4, 2, 0, 1], [3, 5, 1, 0]], dtype=float)
    assert tsp.nearest_neighbor(d) == [0, 1, 2, 3]
    assert tsp.tour_cost([0, 1, 2, 3], d) == 7.0
    assert tsp.held_karp(d) == 7.0


def test_two_opt_deltas_match_recomputed_costs():
    rng = np.random.default_rng(0)
    d = random_matrix(rng, 9)
    tour = np.array(rng.permutation(9))
    delta = tsp.two_opt_deltas(tour, d)
    base = tsp.tour_cost(tour, d)
    for i in range(9):
        for j in range(9):
            if np.isfinite(delta[i, j]):
                cand = list(tour[: i + 1]) + list(tour[i + 1 : j + 1][::-1]) + list(tour[j + 1 :])
                assert tsp.tour_cost(cand, d) - base == pytest.approx(delta[i, j], abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 9), st.integers(0, 2**32 - 1))
def test_held_karp_equals_enumeration(n, seed):
    d = random_matrix(np.random.default_rng(seed), n, integer=True)
    assert tsp.held_karp(d) == oracles.brute_force_tsp(d)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 14), st.integers(0, 2**32 - 1))
def test_local_search_reaches_two_opt_optimum(n, seed):
    rng = np.random.default_rng(seed)
    d = random_matrix(rng, n)
    start = list(rng.permutation(n))
    out = tsp.local_search(start, d)
    assert tsp.is_permutation(out, n)
    assert tsp.tour_cost(out, d) <= tsp.tour_cost(start, d) + 1e-12
    assert not oracles.has_improving_two_opt(out, d)
    assert np.all(tsp.relocate_deltas(np.array(out), d) >= -1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(4, 9), st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_gls_tour_is_valid_and_no_worse_than_nn(n, seed, rounds):
    rng = np.random.default_rng(seed)
    d = random_matrix(rng, n)
    guide = rng.random((n, n))
    tour = tsp.guided_local_search(d, guide, tsp.GLSConfig(rounds=rounds))
    assert tsp.is_permutation(tour, n)
    assert tsp.tour_cost(tour, d) <= tsp.tour_cost(tsp.nearest_neighbor(d), d) + 1e-12
    assert tsp.tour_cost(tour, d) >= tsp.held_karp(d) - 1e-9


def test_gls_rejects_bad_guides():
    d = random_matrix(np.random.default_rng(1), 6)
    with pytest.raises(InvalidOutputError):
        tsp.guided_local_search(d, np.ones((5, 5)), tsp.GLSConfig())
    bad = np.ones((6, 6))
    bad[0, 1] = np.inf
    with pytest.raises(InvalidOutputError):
        tsp.guided_local_search(d, bad, tsp.GLSConfig())
    with pytest.raises(ValueError):
        tsp.GLSConfig(rounds=0)
    inst = tsp.TSPInstance(d)
    with pytest.raises(InvalidOutputError):
        tsp.solve(lambda m: [[1, 2]], inst)


def test_utility_and_defaults():
    assert tsp.utility(4.0, 3.0) == 1.0
    assert tsp.default_rounds(100) == 16 and tsp.default_rounds(200) == 8


def test_perturbation_is_symmetric_and_recorded():
    inst = tsp.TSPInstance.from_coordinates(np.random.default_rng(2).random((12, 2)))
    p = tsp.perturb(inst, np.random.default_rng(3), prob=0.3)
    assert p.perturbed_edges
    for i, j in p.perturbed_edges:
        assert p.distance_matrix[i, j] == p.distance_matrix[j, i] == tsp.HIGH_VALUE
    back = tsp.TSPInstance.from_dict(p.to_dict())
    assert np.array_equal(back.distance_matrix, p.distance_matrix)


def test_tsp_instance_validation():
    with pytest.raises(ValueError):
        tsp.TSPInstance(np.array([[0, 1], [2, 0]]))
    with pytest.raises(ValueError):
        tsp.TSPInstance(np.ones((3, 3)))


def test_exact_optimum_needs_reference_for_large_instances():
    inst = tsp.TSPInstance.from_coordinates(np.random.default_rng(0).random((20, 2)))
    with pytest.raises(ValueError):
        tsp.exact_optimum(inst)
    inst.optimum_cost = 3.0
    assert tsp.exact_optimum(inst) == 3.0


def test_tsp_suite_attaches_references():
    insts = tsp.TSPSuite(sizes=(8, 20), per_size=1, reference_rounds=10).generate("validation", 0)
    assert [i.optimum_source for i in insts] == ["held_karp", "best_known"]
    gaps = tsp.evaluate(lambda m: m, insts[:1])
    assert gaps[0] >= -1e-9


def test_berlin52(data_dir):
    inst = load_tsplib(data_dir / "berlin52.tsp", {"berlin52": 7542})
    assert inst.size == 52 and inst.optimum_source == "supplied"
    assert tsp.tour_cost([c - 1 for c in BERLIN52_TOUR], inst.distance_matrix) == 7542.0


def test_tsplib_formats(tmp_path):
    text = "NAME: tiny\nTYPE: TSP\nDIMENSION: 3\nEDGE_WEIGHT_TYPE: EXPLICIT\nEDGE_WEIGHT_FORMAT: FULL_MATRIX\n" \
           "EDGE_WEIGHT_SECTION\n0 1 2\n1 0 3\n2 3 0\nEOF\n"
    header, m = parse_tsplib(text)
    assert header["NAME"] == "tiny" and m[1, 2] == 3
    with pytest.raises(ValueError):
        parse_tsplib("NAME: x\nEDGE_WEIGHT_TYPE: GEO\n")
    opt = tmp_path / "opt.txt"
    opt.write_text("# name cost\nberlin52 : 7542\nkroA100 21282\n")
    assert load_optima_table(opt) == {"berlin52": 7542.0, "kroA100": 21282.0}


# -- flat pack -------------------------------------------------------------------

def test_rotations_follow_rot90():
    block = np.array([[1, 1, 0], [0, 1, 0], [0, 1, 1]], dtype=np.int8)
    rot = fp.rotations(block[None])
    for k in range(4):
        assert np.array_equal(rot[0, k], np.rot90(block, k))


def test_obstacle_sizes():
    assert fp.obstacle_size(9, 9) == (3, 3)
    assert fp.obstacle_size(11, 11) == (3, 3)
    assert fp.obstacle_size(15, 15) == (4, 4)
    inst = fp.with_center_obstacle(fp.generate_tiling(9, 9, np.random.default_rng(0)))
    assert inst.obstacle_mask.sum() == 9 and inst.obstacle_mask[3:6, 3:6].all()


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.integers(0, 2**32 - 1))
def test_generated_tiling_partitions_the_grid(rows, cols, seed):
    inst = fp.generate_tiling(rows, cols, np.random.default_rng(seed))
    assert int(inst.blocks.sum()) == rows * cols
    assert all(fp.is_connected(b) for b in inst.blocks)
    assert fp.replay(inst, inst.solution) == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 8), st.integers(0, 2**32 - 1), st.floats(0, 0.7))
def test_mask_matches_brute_force(side, seed, density):
    rng = np.random.default_rng(seed)
    inst = fp.generate_tiling(side, side, rng)
    occ = rng.random((side, side)) < density
    placed = rng.random(inst.num_blocks) < 0.3
    mask = fp.action_mask(occ, fp.rotations(inst.blocks), placed)
    got = {tuple(int(v) for v in ix) for ix in np.argwhere(mask)}
    assert got == oracles.legal_actions(occ, inst.blocks, placed)


def test_fp_rollout_and_invalid_scores():
    inst = fp.generate_tiling(6, 6, np.random.default_rng(1))
    cov = fp.rollout(lambda g, b, m: np.zeros(m.shape), inst)
    assert 0 < cov <= 1
    with pytest.raises(InvalidOutputError):
        fp.rollout(lambda g, b, m: np.zeros(3), inst)
    with pytest.raises(InvalidOutputError):
        fp.rollout(lambda g, b, m: np.full(m.shape, np.nan), inst)

    # non-finite scores on illegal actions are ignored
    def masked(g, b, m):
        return np.where(m, 1.0, np.nan)

    assert fp.rollout(masked, inst) > 0


def test_fp_obstacle_seen_as_negative():
    inst = fp.with_center_obstacle(fp.generate_tiling(9, 9, np.random.default_rng(2)))
    grids = []
    fp.rollout(lambda g, b, m: (grids.append(g) or np.zeros(m.shape)), inst)
    assert (grids[0][inst.obstacle_mask] == fp.OBSTACLE).all()


def test_fp_roundtrip_and_validation():
    inst = fp.generate_tiling(7, 5, np.random.default_rng(3), name="x")
    back = fp.FlatPackInstance.from_dict(inst.to_dict())
    assert np.array_equal(back.blocks, inst.blocks) and back.solution == inst.solution
    with pytest.raises(ValueError):
        fp.FlatPackInstance(3, 3, np.array([[1, 0, 1], [0, 0, 0], [0, 0, 0]]))
    assert fp.gap(0.75) == 0.25


# -- registry and instance files -----------------------------------------------------

@pytest.mark.parametrize("task,params", [
    ("bin_packing", {"num_instances": 2, "num_items": 30}),
    ("tsp", {"sizes": [8], "per_size": 2}),
    ("flatpack", {"size_mix": [[9, 2]]}),
])
def test_instance_files_roundtrip(tmp_path, task, params):
    iset = generate_instances(task, "validation_perturbed", 5, params)
    again = generate_instances(task, "validation_perturbed", 5, params)
    assert iset.to_dict() == again.to_dict()
    path = save_instance_set(iset, tmp_path / "i.json")
    back = load_instance_set(path)
    assert back.to_dict() == iset.to_dict()
    spec = get_task(task)
    ns = {"np": np, "math": math}
    exec(spec.seed_program, ns)
    gaps = run_rollouts(task, ns[spec.function_name], back.instances, back.options)
    assert len(gaps) == 2 and all(math.isfinite(g) for g in gaps)


def test_optima_sidecar(tmp_path):
    iset = generate_instances("tsp", "test", 0, {"sizes": [20], "per_size": 1, "reference_rounds": 5})
    path = save_instance_set(iset, tmp_path / "tsp.json")
    (tmp_path / "tsp.optima.json").write_text('{"%s": 1.5}' % iset.instances[0].name)
    inst = load_instance_set(path).instances[0]
    assert inst.optimum_cost == 1.5 and inst.optimum_source == "supplied"


def test_unknown_names():
    with pytest.raises(ValueError):
        get_task("knapsack")
    with pytest.raises(ValueError):
        generate_instances("bin_packing", "train", 0)
