import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tuplevote.experiments import _scene
from tuplevote.geometry import random_rotation, rotation_angle_deg
from tuplevote.pipeline import PipelineConfig, estimate_pose
from tuplevote.predictor import OraclePredictor
from tuplevote.scene import NoiseConfig
from tuplevote.targets import center_targets, orientation_targets
from tuplevote.voting import (
    CenterGrid,
    FilterConfig,
    OrientationGrid,
    PairVotes,
    build_votes,
    derive_pair_targets,
    filter_noisy_pairs,
    point_membership,
    reweight,
    vote_center,
    vote_orientation,
    vote_scale,
)

VOXEL = 0.002


def _records(p1, p2, mu=None, nu=None, alpha=None, beta=None, scale=None, idx=None):
    """Hand-built records; unspecified targets default to zero."""
    p1, p2 = np.atleast_2d(p1).astype(float), np.atleast_2d(p2).astype(float)
    k = len(p1)
    z = np.zeros(k)
    if idx is None:
        idx = np.arange(2 * k).reshape(k, 2)
    return PairVotes(
        tuple_index=np.arange(k), idx1=idx[:, 0], idx2=idx[:, 1], p1=p1, p2=p2,
        canon1=np.zeros((k, 3)), canon2=np.zeros((k, 3)),
        scale=np.ones((k, 3)) if scale is None else np.asarray(scale, float),
        mu=z if mu is None else np.asarray(mu, float), nu=z if nu is None else np.asarray(nu, float),
        alpha=z if alpha is None else np.asarray(alpha, float),
        beta=z if beta is None else np.asarray(beta, float),
    )


def _rigid_object(rng, n=200, k=2000):
    """Exact canonical coordinates of random points under a random 9D pose."""
    scale = rng.uniform(0.02, 0.06, 3)
    bar = rng.uniform(-1, 1, (n, 3))
    R, t = random_rotation(rng), np.array([0.0, 0.0, 0.5]) + rng.normal(0, 0.03, 3)
    cam = (bar * scale) @ R.T + t
    idx = np.stack([rng.permutation(n)[:2] for _ in range(k)])
    votes = build_votes(cam, idx, bar[idx], np.tile(scale, (k, 1)))
    return votes, cam, R, t, scale


# -- derive_pair_targets ---------------------------------------------------

def test_targets_for_pair_symmetric_about_origin(rng):
    a = rng.normal(size=3)
    mu, nu, alpha, beta, ok = derive_pair_targets(-a, a, np.ones(3))
    assert ok and mu == pytest.approx(np.linalg.norm(2 * a) / 2) and nu == pytest.approx(0, abs=1e-12)
    # off-origin pair against the direct formula
    p1, p2 = rng.normal(size=3), rng.normal(size=3)
    d = (p2 - p1) / np.linalg.norm(p2 - p1)
    mu, nu, *_ = derive_pair_targets(p1, p2, np.ones(3))
    assert mu == pytest.approx(-p1 @ d, abs=1e-12)
    assert nu == pytest.approx(np.linalg.norm(-p1 - (-p1 @ d) * d), abs=1e-12)


def test_pair_along_canonical_up():
    _, _, alpha, beta, _ = derive_pair_targets([0, -0.5, 0], [0, 0.5, 0], np.ones(3))
    assert alpha == 1.0 and beta == 0.0


def test_targets_are_metric(rng):
    s = np.array([0.1, 0.2, 0.3])
    a, b = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    got = derive_pair_targets(a, b, s)
    want = derive_pair_targets(a * s, b * s, np.ones(3))
    assert np.allclose(got[:4], want[:4], atol=1e-12)


def test_canonical_and_camera_targets_agree(rng):
    votes, cam, R, t, _ = _rigid_object(rng, k=500)
    mu, nu = center_targets(t, votes.p1, votes.p2)
    al, be = orientation_targets(R[:, 1], R[:, 0], votes.p1, votes.p2)
    assert np.abs(mu - votes.mu).max() < 1e-9 and np.abs(nu - votes.nu).max() < 1e-9
    assert np.abs(al - votes.alpha).max() < 1e-9 and np.abs(be - votes.beta).max() < 1e-9


def test_degenerate_canonical_pair_dropped_and_counted(rng):
    pts = rng.normal(size=(6, 3))
    canon = rng.uniform(-1, 1, (3, 2, 3))
    canon[1, 1] = canon[1, 0]
    votes = build_votes(pts, np.array([[0, 1], [2, 3], [4, 5]]), canon, np.ones((3, 3)))
    assert len(votes) == 2 and votes.dropped == 1
    assert list(votes.tuple_index) == [0, 2]


# -- center ----------------------------------------------------------------

def test_grid_covers_input_box(rng):
    pts = rng.uniform(-0.1, 0.2, (100, 3))
    g = CenterGrid.around(pts, 0.002, 1.0)
    lin, inside = g.linear_index(pts)
    assert inside.all()
    assert np.all(g.origin + np.array(g.dims) * g.voxel >= pts.max(0))


def test_single_record_on_axis():
    p1, p2 = np.array([0.0, 0.0, 0.5]), np.array([0.01, 0.0, 0.5])
    v = _records(p1, p2, mu=[0.004], nu=[0.0])
    center, grid = vote_center(v, np.vstack([p1, p2]))
    assert np.linalg.norm(center - (p1 + [0.004, 0, 0])) <= VOXEL * math.sqrt(3) / 2
    assert grid.counts.max() == 360 and np.count_nonzero(grid.counts) == 1


def test_majority_cluster_wins(rng):
    A, B = np.array([0.0, 0.0, 0.5]), np.array([0.03, 0.01, 0.52])
    p1, p2, mu = [], [], []
    for target, n in ((A, 60), (B, 40)):
        for _ in range(n):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            m = rng.uniform(-0.02, 0.02)
            p1.append(target - m * d)
            p2.append(target - m * d + 0.01 * d)
            mu.append(m)
    v = _records(p1, p2, mu=mu, nu=np.zeros(100))
    center, _ = vote_center(v, np.vstack([p1, p2]))
    assert np.linalg.norm(center - A) < VOXEL


def test_center_tie_goes_to_lowest_index():
    p = np.array([[0.0, 0.0, 0.5], [0.02, 0.0, 0.5]])
    v = _records(p, p + [0, 0, 0.01], mu=[0.001, 0.001], nu=[0, 0])
    center, grid = vote_center(v, p)
    cells = np.flatnonzero(grid.counts)
    assert len(cells) == 2 and grid.counts[cells[0]] == grid.counts[cells[1]]
    assert np.allclose(center, grid.cell_center(cells[0]))


def test_center_needs_records():
    with pytest.raises(ValueError):
        vote_center(_records(np.zeros((0, 3)), np.zeros((0, 3))), np.zeros((2, 3)))


def test_closed_loop_raw_votes():
    """Raw (unrefined) votes of the zero-noise oracle on clean views.

    A view that sees almost only one flat face cannot tell the center from
    its mirror image across that face, so a rare miss is tolerated here;
    refinement resolves it downstream.
    """
    center_ok, rot_ok, runs = 0, 0, 0
    for mesh in ("cube", "cylinder", "lshape"):
        for i in range(4):
            s = _scene(mesh, [3, i, len(mesh)])
            est = estimate_pose(s.cloud, OraclePredictor.for_sample(s), PipelineConfig(refine_enabled=False))
            runs += 1
            center_ok += np.linalg.norm(est.voted.translation - s.gt_pose.translation) <= VOXEL * math.sqrt(3)
            if mesh == "lshape":
                rot_ok += rotation_angle_deg(est.voted.rotation, s.gt_pose.rotation) <= 2.0
            else:  # the up axis is well defined for every shape
                rot_ok += np.degrees(np.arccos(min(1, est.voted.rotation[:, 1] @ s.gt_pose.rotation[:, 1]))) <= 2.0
            assert np.max(np.abs(est.voted.scale / s.gt_pose.scale - 1)) < 1e-12
    assert center_ok >= runs - 1 and rot_ok >= runs - 1


def test_planar_pairs_vote_for_mirror_center(rng):
    # every circle around a line in a plane is symmetric across that plane
    o = np.array([0.0, 0.0, 0.55])
    mirror = o * [1, 1, -1] + [0, 0, 2 * 0.5]
    p1 = np.c_[rng.uniform(-0.03, 0.03, (50, 2)), np.full(50, 0.5)]
    p2 = np.c_[rng.uniform(-0.03, 0.03, (50, 2)), np.full(50, 0.5)]
    mu, nu = center_targets(o, p1, p2)
    mu_m, nu_m = center_targets(mirror, p1, p2)
    assert np.allclose(mu, mu_m) and np.allclose(nu, nu_m)


# -- filtering -------------------------------------------------------------

def test_tau_zero_keeps_everything(rng):
    votes, cam, *_ = _rigid_object(rng, k=300)
    filter_noisy_pairs(votes, cam.mean(0), 0.0)
    assert votes.kept.all() and np.all(votes.epsilon >= 0)


@pytest.mark.parametrize("tau,k", [(0.5, 10), (0.5, 11), (0.3, 7), (0.99, 3)])
def test_equal_errors_drop_ceil_tau_k_in_stable_order(tau, k):
    p1 = np.tile([0.0, 0.0, 0.5], (k, 1))
    v = _records(p1, p1 + [0.01, 0, 0], mu=np.full(k, 0.1), nu=np.zeros(k))
    filter_noisy_pairs(v, np.array([0.0, 0.0, 0.5]), tau)
    n = math.ceil(tau * k)
    assert (~v.kept).sum() == n
    assert v.kept[: k - n].all() and not v.kept[k - n:].any()


def test_filter_epsilon_is_target_distance(rng):
    votes, cam, R, t, _ = _rigid_object(rng, k=50)
    filter_noisy_pairs(votes, t, 0.5)
    assert votes.epsilon.max() < 1e-9


@settings(max_examples=30)
@given(st.floats(0, 0.98), st.floats(0, 0.98), st.integers(0, 10_000))
def test_filtering_is_monotone_in_tau(t1, t2, seed):
    t1, t2 = sorted((t1, t2))
    rng = np.random.default_rng(seed)
    p1 = rng.normal(size=(40, 3))
    p2 = p1 + rng.normal(size=(40, 3))
    mu, nu = rng.normal(size=40), rng.uniform(0, 1, 40)
    a = filter_noisy_pairs(_records(p1, p2, mu, nu), np.zeros(3), t1)
    b = filter_noisy_pairs(_records(p1, p2, mu, nu), np.zeros(3), t2)
    assert np.all(~b.kept | a.kept)  # dropped(t1) is a subset of dropped(t2)


def test_clutter_records_dominate_the_discarded_set():
    share = []
    for i, mesh in enumerate(["cube", "cylinder", "lshape"]):
        s = _scene(mesh, [5, i], noise=NoiseConfig(clutter_fraction=0.5))
        est = estimate_pose(s.cloud, OraclePredictor.for_sample(s, seed=i),
                            PipelineConfig(refine_enabled=False, seed=i))
        v = est.votes
        clutter = s.noise_mask[v.idx1] | s.noise_mask[v.idx2]
        assert 0.45 < clutter.mean() < 0.6
        share.append((~v.kept & clutter).sum() / (~v.kept).sum())
    assert min(share) >= 0.8


# -- reweighting -----------------------------------------------------------

def test_uniform_membership_gives_equal_weights():
    idx = np.array([[0, 1], [2, 3], [1, 2], [3, 0]])  # every point in two records
    p = np.zeros((4, 3))
    v = reweight(_records(p, p + 1, idx=idx), eta=0.0, n_points=4)
    assert np.all(v.weight == 0.25)


def test_reweight_slot_factors():
    # point 0 sits in 9 records, points 1..9 in one each, point 10 is the partner of 1
    idx = np.array([[0, i] for i in range(1, 10)] + [[10, 11]])
    p = np.zeros((10, 3))
    v = reweight(_records(p, p + 1, idx=idx), eta=1.0)
    assert point_membership(v, 12)[0] == 9
    assert v.weight[0] == pytest.approx(0.1 * 0.5)
    assert v.weight[-1] == pytest.approx(0.5 * 0.5)


def test_discarded_records_get_zero_weight_and_no_membership():
    idx = np.array([[0, 1], [0, 2], [3, 4]])
    p = np.zeros((3, 3))
    v = _records(p, p + 1, idx=idx)
    v.kept = np.array([True, False, True])
    reweight(v, 1.0)
    assert v.weight[1] == 0 and v.weight[0] == pytest.approx(0.25)


def test_reweighting_balances_point_mass(rng):
    n = 50
    pop = rng.pareto(1.5, n) + 0.05  # heavily skewed point popularity
    pop /= pop.sum()
    idx = np.array([rng.choice(n, 2, replace=False, p=pop) for _ in range(3000)])
    p = np.zeros((3000, 3))
    v = _records(p, p + 1, idx=idx)

    def mass(w):
        return np.bincount(idx[:, 0], w, n) + np.bincount(idx[:, 1], w, n)

    before = mass(np.ones(3000))
    reweight(v, 1.0, n)
    after = mass(v.weight)
    used = before > 0
    assert after[used].max() / after[used].min() < before[used].max() / before[used].min()


# -- orientation -----------------------------------------------------------

def _axis_records(rng, u, n=50, beta_axis=None):
    """Pairs along +/-u, so alpha = +/-1 and the up-cone degenerates to u."""
    sign = rng.choice([-1.0, 1.0], n)
    p1 = rng.normal(0, 0.05, (n, 3)) + [0, 0, 0.5]
    p2 = p1 + 0.01 * sign[:, None] * u
    beta = np.zeros(n) if beta_axis is None else (p2 - p1) @ beta_axis / 0.01
    return _records(p1, p2, alpha=sign, beta=beta)


def test_alpha_plus_minus_one_recovers_axis(rng):
    for _ in range(5):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        vote = vote_orientation(_axis_records(rng, u), FilterConfig(use_beta=False))
        # within the half diagonal of a 1 degree bin
        assert np.degrees(np.arccos(min(1.0, vote.e1 @ u))) <= 1.0
        assert vote.ambiguous


def test_parallel_right_winner_falls_through(rng):
    u = np.array([0.3, -0.2, 0.9])
    u /= np.linalg.norm(u)
    v = _axis_records(rng, u)
    v.beta = v.alpha.copy()  # right cone identical to the up cone
    vote = vote_orientation(v)
    assert abs(vote.e1 @ vote.e2) < 1e-9 and vote.e2 @ vote.e2 == pytest.approx(1)
    R = vote.rotation()
    assert np.allclose(R.T @ R, np.eye(3)) and np.linalg.det(R) == pytest.approx(1)


def test_votes_recover_rigid_frame(rng):
    votes, cam, R, t, _ = _rigid_object(rng, k=2000)
    vote = vote_orientation(votes)
    assert rotation_angle_deg(vote.rotation(), R) <= 2.0
    assert not vote.ambiguous


def test_weight_scaling_leaves_argmax_unchanged(rng):
    votes, cam, *_ = _rigid_object(rng, k=1500)
    cfg = FilterConfig()
    c1, _ = vote_center(votes, cam, cfg)
    filter_noisy_pairs(votes, c1, cfg.tau)
    reweight(votes, cfg.eta, len(cam))
    o1 = vote_orientation(votes, cfg)
    w0 = votes.weight.copy()
    for c in (2.0, 1e-3, 37.5):
        votes.weight = w0 * c
        o2 = vote_orientation(votes, cfg)
        c2, _ = vote_center(votes, cam, cfg, weights=np.ones(len(votes)) * c)
        assert np.array_equal(o1.e1, o2.e1) and np.array_equal(o1.e2, o2.e2)
        assert np.array_equal(c1, c2)


def test_area_weight_flattens_uniform_sphere(rng):
    g = OrientationGrid(5.0)
    u = rng.normal(size=(400_000, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    lin = g.bin_index(u)
    n_inc, n_az = g.shape
    w = g.area_weight()[lin // n_az]
    rows = np.bincount(lin // n_az, w, n_inc)
    raw = np.bincount(lin // n_az, minlength=n_inc)
    inner = rows[2:-2]
    assert inner.std() / inner.mean() < 0.05
    assert raw[2:-2].std() / raw[2:-2].mean() > 0.3


def test_grid_direction_round_trips(rng):
    g = OrientationGrid()
    for lin in rng.integers(0, np.prod(g.shape), 200):
        assert g.bin_index(g.direction(lin)[None])[0] == lin


@pytest.mark.parametrize("dyadic", [True, False])
def test_parallel_accumulation_matches_serial(dyadic, rng):
    votes, cam, *_ = _rigid_object(rng, k=3000)
    votes.weight = rng.integers(1, 8, len(votes)) / 8.0 if dyadic else rng.uniform(0.1, 1, len(votes))
    cfg = FilterConfig()
    c1, g1 = vote_center(votes, cam, cfg, weights=votes.weight, workers=1)
    c4, g4 = vote_center(votes, cam, cfg, weights=votes.weight, workers=4)
    o1 = vote_orientation(votes, cfg, workers=1)
    o4 = vote_orientation(votes, cfg, workers=4)
    # chunks are summed in a fixed order, so even real weights match exactly
    assert np.array_equal(g1.counts, g4.counts) and np.array_equal(c1, c4)
    assert np.array_equal(o1.up_grid.counts, o4.up_grid.counts)
    assert np.array_equal(o1.right_grid.counts, o4.right_grid.counts)


def test_orientation_needs_kept_records(rng):
    v = _axis_records(rng, np.array([0.0, 1.0, 0.0]), n=3)
    v.kept[:] = False
    with pytest.raises(ValueError):
        vote_orientation(v)


# -- scale -----------------------------------------------------------------

def test_constant_scale():
    p = np.zeros((4, 3))
    v = _records(p, p + 1, scale=np.tile([0.1, 0.2, 0.3], (4, 1)))
    v.weight = np.array([0.3, 1.0, 0.2, 5.0])
    assert np.allclose(vote_scale(v), [0.1, 0.2, 0.3], rtol=0, atol=1e-15)


def test_two_record_mean():
    p = np.zeros((2, 3))
    v = _records(p, p + 1, scale=[[0.1, 0.1, 0.1], [0.3, 0.3, 0.3]])
    assert vote_scale(v)[0] == pytest.approx(0.2)


def test_weighted_scale_matches_direct_sum(rng):
    k = 500
    p = np.zeros((k, 3))
    s = rng.uniform(0.01, 0.1, (k, 3))
    v = _records(p, p + 1, scale=s)
    v.weight = rng.uniform(0, 1, k)
    v.kept = rng.random(k) < 0.6
    w = np.where(v.kept, v.weight, 0)
    want = [sum(w[i] * s[i, a] for i in range(k)) / sum(w) for a in range(3)]
    assert np.abs(vote_scale(v) - want).max() < 1e-12


def test_records_csv(tmp_path, rng):
    votes, *_ = _rigid_object(rng, k=20)
    votes.to_csv(tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0].startswith("tuple,i1,i2,mu,nu") and len(rows) == 21
    assert float(rows[1].split(",")[3]) == votes.mu[0]


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(tau=1.0)
    with pytest.raises(ValueError):
        FilterConfig(sigma_samples=0)
    assert replace(FilterConfig(), tau=0.0).tau == 0.0
