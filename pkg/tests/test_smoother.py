import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import uniform_patch
from fcmg import smoother as sm
from fcmg.assembly import PhysicalParams, SaddleOperator, assemble, compute_quadratures
from fcmg.geometry import Circle, Complement, LevelSetDomain
from fcmg.linalg import SingularBlockError, SparseMatrix
from fcmg.mesh import Forest, make_level


def connectivity_sets(grid, n_u):
    """Input sets from element connectivity alone (dense boolean oracle)."""
    n = grid.n_free
    adj = np.zeros((n, n), dtype=bool)
    for c in grid.corner_nodes:
        adj[np.ix_(c, c)] = True
    out = []
    for i in range(n):
        pres = np.nonzero(adj[i])[0]
        vel_nodes = np.nonzero(adj[pres].any(axis=0))[0]
        vel = np.sort(np.concatenate([2 * vel_nodes, 2 * vel_nodes + 1]))
        out.append(np.concatenate([vel, n_u + pres]))
    return out


def dense_smoother(op, subs, omega):
    """S = sum_i Rt_i^T omega L_i^{-1} R_i as a dense matrix."""
    D = op.matrix.todense()
    S = np.zeros_like(D)
    for i in range(len(subs)):
        I = subs.input_set(i)
        Linv = np.linalg.inv(D[np.ix_(I, I)])
        Rt = np.zeros((3, len(I)))
        Rt[np.arange(3), subs.out_pos[i]] = 1.0
        # rows of the correction restricted to the output DoFs
        S[np.ix_(subs.out_dofs[i], I)] += omega * (Rt @ Linv)
    return S


def cylinder_patch():
    dom = LevelSetDomain(Complement(Circle(1.5, 1.5, 0.6)), (0.0, 3.0, 0.0, 3.0))
    grid = make_level(Forest.uniform(3, 3, (0.0, 0.0), 1.0))
    quad = compute_quadratures(grid, dom)
    return grid, assemble(grid, quad, PhysicalParams(eta=1e-3))


def test_interior_subdomain_sizes_match_connectivity_oracle(patch):
    grid, op = patch
    subs = sm.build_subdomains(op)
    oracle = connectivity_sets(grid, op.dofmap.n_u)
    for i in range(len(subs)):
        np.testing.assert_array_equal(subs.input_set(i), oracle[i])
    xy = grid.nodes.free_coords()
    interior = (xy[:, 0] >= 2) & (xy[:, 0] <= 4) & (xy[:, 1] >= 2) & (xy[:, 1] <= 4)
    assert np.all(subs.sizes()[interior] == 59)
    assert subs.out_dofs.shape == (len(subs), 3)


def test_output_sets_partition_the_dofs(small_channel):
    subs = small_channel.fine.smoother.subs
    n = small_channel.fine.op.n
    assert np.array_equal(np.sort(subs.out_dofs.ravel()), np.arange(n))
    for i in (0, len(subs) // 2, len(subs) - 1):
        I = subs.input_set(i)
        np.testing.assert_array_equal(I[subs.out_pos[i]], subs.out_dofs[i])


@pytest.mark.parametrize("make", [lambda: uniform_patch(3), cylinder_patch], ids=["uniform", "cut"])
def test_apply_matches_dense_formula(make):
    _, op = make()
    subs = sm.build_subdomains(op)
    S = dense_smoother(op, subs, 0.8)
    st_ = sm.init(op, "cache_inverse", 0.8)
    rng = np.random.default_rng(5)
    for _ in range(20):
        r = rng.standard_normal(op.n)
        ref = S @ r
        got = sm.apply(st_, r)
        assert np.linalg.norm(got - ref) <= 1e-12 * np.linalg.norm(ref)


def test_policies_agree(tiny_channel):
    op = tiny_channel.fine.op
    r = np.random.default_rng(2).standard_normal(op.n)
    out = {p: sm.apply(sm.init(op, p, 0.8), r) for p in sm.POLICIES}
    # every policy applies the same inverse rows with the same dot product
    assert np.array_equal(out["cache_none"], out["cache_inverse"])
    assert np.array_equal(out["cache_matrix"], out["cache_inverse"])


@settings(max_examples=12, deadline=None)
@given(P=st.integers(1, 40), seed=st.integers(0, 100))
def test_partitioned_apply_is_bitwise_serial(tiny_channel, P, seed):
    lev = tiny_channel.fine
    r = np.random.default_rng(seed).standard_normal(lev.op.n)
    part = sm.PartitionMap.contiguous(len(lev.smoother.subs), P)
    assert np.array_equal(sm.apply_partitioned(lev.smoother, r, part), sm.apply(lev.smoother, r))


def test_partition_map_validation():
    with pytest.raises(sm.PartitionError):
        sm.PartitionMap.contiguous(10, 0)
    with pytest.raises(sm.PartitionError):
        sm.PartitionMap.contiguous(3, 4)
    pm = sm.PartitionMap(2, np.array([0, 1, 2]))
    with pytest.raises(sm.PartitionError, match="pressure id 2"):
        pm.validate(3)
    with pytest.raises(sm.PartitionError, match="covers 3 of 4"):
        pm.validate(4)


def test_offprocess_subdomains_only_at_rank_boundaries(patch):
    _, op = patch
    subs = sm.build_subdomains(op)
    one = sm.PartitionMap.contiguous(len(subs), 1)
    assert one.offprocess_subdomains(subs, op.dofmap.n_u).tolist() == [0]
    two = sm.PartitionMap.contiguous(len(subs), 2)
    counts = two.offprocess_subdomains(subs, op.dofmap.n_u)
    assert np.all(counts > 0) and counts.sum() < len(subs)


def test_singular_local_block_names_pressure_id(patch):
    _, op = patch
    dm = op.dofmap
    M = op.matrix
    target = dm.n_u + 10
    rows = M.row_ids()
    data = M.data.copy()
    data[(rows == target) | (M.indices == target)] = 0.0
    bad = SaddleOperator(SparseMatrix(M.indptr, M.indices, data, M.shape), op.rhs, dm)
    for policy in ("cache_inverse", "cache_none"):
        st_ = None
        with pytest.raises(SingularBlockError, match="pressure id"):
            st_ = sm.init(bad, policy)
            sm.apply(st_, np.ones(op.n))


def test_rejects_unknown_policy_and_bad_residual(patch):
    _, op = patch
    with pytest.raises(ValueError, match="unknown cache policy"):
        sm.init(op, "cache_everything")
    st_ = sm.init(op)
    with pytest.raises(ValueError, match="dimension mismatch"):
        sm.apply(st_, np.ones(op.n + 1))


def test_memory_ledger(tiny_channel):
    op = tiny_channel.fine.op
    subs = tiny_channel.fine.smoother.subs
    rep = {p: sm.memory_report(sm.init(op, p, subs=subs)) for p in sm.POLICIES}
    assert rep["cache_none"]["cached_bytes"] == 0
    assert rep["cache_inverse"]["cached_slab_bytes"] == int(np.sum(3 * subs.sizes() * 8))
    assert rep["cache_matrix"]["cached_matrix_bytes"] > rep["cache_inverse"]["cached_slab_bytes"]
    assert len({r["index_bytes"] for r in rep.values()}) == 1
