import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from sftg.errors import CapacityError, DegenerateChannelError, ShapeError, ValidationError
from sftg.graph import (
    Adjacency,
    ElectrodeLayout,
    build_functional_adjacency,
    build_graph,
    build_spatial_adjacency,
    combine_adjacency,
    connected_components,
    normalized_laplacian,
    pearson_matrix,
    positional_encodings,
    read_adjacency_csv,
    read_layout_csv,
    standard_layout,
    write_adjacency_csv,
    write_layout_csv,
)


def union_find_components(matrix) -> int:
    parent = list(range(len(matrix)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in zip(*np.nonzero(matrix)):
        parent[find(i)] = find(j)
    return len({find(i) for i in range(len(matrix))})


def line_layout(n):
    return ElectrodeLayout([f"e{i}" for i in range(n)], np.c_[np.arange(n, dtype=float), np.zeros(n), np.zeros(n)])


def adjacency_from_edges(n, edges):
    a = np.zeros((n, n))
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    return Adjacency(a, "spatial")


class TestLayout:
    def test_duplicate_names(self):
        with pytest.raises(ValidationError):
            ElectrodeLayout(["a", "a"], np.eye(2, 3))

    def test_shared_position(self):
        with pytest.raises(ValidationError):
            ElectrodeLayout(["a", "b"], np.zeros((2, 3)))

    def test_too_few(self):
        with pytest.raises(ValidationError):
            ElectrodeLayout(["a"], np.zeros((1, 3)))

    def test_non_finite(self):
        with pytest.raises(ValidationError):
            ElectrodeLayout(["a", "b"], [[0, 0, 0], [np.inf, 0, 0]])

    def test_bad_shape(self):
        with pytest.raises(ShapeError):
            ElectrodeLayout(["a", "b"], np.zeros((2, 2)))

    def test_csv_round_trip(self, tmp_path):
        lay = standard_layout(16)
        write_layout_csv(lay, tmp_path / "l.csv")
        back = read_layout_csv(tmp_path / "l.csv")
        assert back.names == lay.names
        assert back.positions.tobytes() == lay.positions.tobytes()

    def test_csv_bad_header(self, tmp_path):
        (tmp_path / "l.csv").write_text("label,x,y,z\na,0,0,0\nb,1,0,0\n")
        with pytest.raises(ValidationError):
            read_layout_csv(tmp_path / "l.csv")

    @pytest.mark.parametrize("n", [16, 63])
    def test_standard_layouts_on_unit_sphere(self, n):
        lay = standard_layout(n)
        assert lay.J == n
        assert_allclose(np.linalg.norm(lay.positions, axis=1), 1.0, atol=1e-12)

    def test_unknown_standard_size(self):
        with pytest.raises(ValidationError):
            standard_layout(17)


class TestSpatialAdjacency:
    def test_collinear_knn1_is_path(self):
        a = build_spatial_adjacency(line_layout(3), k=1).matrix
        assert_array_equal(a, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])

    def test_large_radius_is_complete(self):
        lay = standard_layout(16)
        a = build_spatial_adjacency(lay, radius=lay.distances().max()).matrix
        assert_array_equal(a, 1.0 - np.eye(16))

    def test_distance_ties_go_to_lower_index(self):
        # node 1 is equidistant from 0 and 2
        a = build_spatial_adjacency(line_layout(3), k=1).matrix
        assert a[1, 0] == 1.0

    def test_63_knn4_against_bruteforce(self):
        lay = standard_layout(63)
        a = build_spatial_adjacency(lay, k=4).matrix
        pos = lay.positions
        oracle = np.zeros((63, 63))
        for i in range(63):
            d = [(float(np.sqrt(np.sum((pos[i] - pos[j]) ** 2))), j) for j in range(63) if j != i]
            for _, j in sorted(d)[:4]:
                oracle[i, j] = oracle[j, i] = 1.0
        assert_array_equal(a, oracle)
        assert_array_equal(a, a.T)
        assert np.all(np.diag(a) == 0)
        assert np.all(a.sum(axis=1) >= 4)

    @pytest.mark.parametrize("kw", [{"k": 0}, {"k": 16}, {"radius": 0.0}, {}, {"k": 2, "radius": 1.0}])
    def test_bad_rules(self, kw):
        with pytest.raises(ValidationError):
            build_spatial_adjacency(standard_layout(16), **kw)


class TestFunctionalAdjacency:
    def test_copy_and_negation(self, rng):
        x = rng.standard_normal(50)
        rho = pearson_matrix(np.stack([x, x, -x]))
        assert rho[0, 1] == pytest.approx(1.0, abs=1e-15)
        assert rho[0, 2] == pytest.approx(-1.0, abs=1e-15)
        a = build_functional_adjacency(np.stack([x, -x]), threshold=1.0).matrix
        assert a[0, 1] == 1.0

    def test_two_pass_oracle(self, rng):
        mix = rng.standard_normal((8, 8))
        x = mix @ rng.standard_normal((8, 200))
        rho = pearson_matrix(x)
        oracle = np.empty((8, 8))
        for i in range(8):
            for j in range(8):
                mi, mj = sum(x[i]) / 200, sum(x[j]) / 200
                cov = sum((x[i] - mi) * (x[j] - mj))
                oracle[i, j] = cov / np.sqrt(sum((x[i] - mi) ** 2) * sum((x[j] - mj) ** 2))
        assert_allclose(rho, oracle, rtol=0, atol=1e-12)

    def test_affine_invariance(self, rng):
        x = rng.standard_normal((4, 100))
        y = x.copy()
        y[2] = 3.7 * y[2] + 5.0
        assert_allclose(pearson_matrix(x)[2], pearson_matrix(y)[2], atol=1e-12)

    def test_zero_variance_names_channel(self, rng):
        x = rng.standard_normal((3, 10))
        x[1] = 2.0
        with pytest.raises(DegenerateChannelError, match="Fz") as info:
            pearson_matrix(x, names=["Cz", "Fz", "Pz"])
        assert info.value.channel == "Fz"

    def test_weighted_mode_stores_rho(self, rng):
        x = rng.standard_normal((3, 40))
        adj = build_functional_adjacency(x, 0.5, weighted=True)
        expected = pearson_matrix(x)
        np.fill_diagonal(expected, 0.0)
        assert_array_equal(adj.matrix, expected)

    def test_threshold_range(self, rng):
        with pytest.raises(ValidationError):
            build_functional_adjacency(rng.standard_normal((2, 5)), 1.5)

    def test_binary_invariants(self, rng):
        a = build_functional_adjacency(rng.standard_normal((6, 30)), 0.1).matrix
        assert_array_equal(a, a.T)
        assert np.all(np.diag(a) == 0)
        assert set(np.unique(a)) <= {0.0, 1.0}


def test_combine_is_logical_or():
    a = adjacency_from_edges(3, [(0, 1)])
    b = adjacency_from_edges(3, [(1, 2), (0, 1)])
    assert_array_equal(combine_adjacency(a, b).matrix, adjacency_from_edges(3, [(0, 1), (1, 2)]).matrix)


def test_build_graph_default_adds_functional_edges(rng):
    lay = standard_layout(16)
    x = rng.standard_normal((16, 100))
    x[15] = x[0]  # Fp1 and Oz are far apart but perfectly correlated
    a = build_graph(lay, x).matrix
    assert a[0, 15] == 1.0
    assert build_graph(lay).matrix[0, 15] == 0.0


def test_adjacency_csv_round_trip(tmp_path):
    adj = build_spatial_adjacency(standard_layout(16), k=3)
    write_adjacency_csv(adj, tmp_path / "a.csv", standard_layout(16).names)
    back, names = read_adjacency_csv(tmp_path / "a.csv")
    assert_array_equal(back.matrix, adj.matrix)
    assert tuple(names) == standard_layout(16).names


class TestLaplacian:
    def test_two_isolated_nodes(self):
        g = normalized_laplacian(Adjacency(np.zeros((2, 2)), "spatial"))
        assert_array_equal(g.laplacian, np.zeros((2, 2)))
        assert_array_equal(g.eig.eigenvalues, [0.0, 0.0])

    def test_single_edge(self):
        g = normalized_laplacian(adjacency_from_edges(2, [(0, 1)]))
        assert_allclose(g.laplacian, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)
        assert_allclose(g.eig.eigenvalues, [0.0, 1.0], atol=1e-15)

    def test_triangle(self):
        g = normalized_laplacian(adjacency_from_edges(3, [(0, 1), (1, 2), (0, 2)]))
        assert_allclose(g.eig.eigenvalues, [0.0, 1.0, 1.0], atol=1e-10)

    def test_formula(self, rng):
        a = (rng.random((7, 7)) < 0.4).astype(float)
        a = np.triu(a, 1)
        a = a + a.T
        g = normalized_laplacian(Adjacency(a, "spatial"))
        at = a + np.eye(7)
        d = at.sum(axis=1)
        oracle = np.eye(7) - np.diag(d ** -0.5) @ at @ np.diag(d ** -0.5)
        assert_allclose(g.laplacian, oracle, atol=1e-12)
        assert_array_equal(g.degree, d)

    def test_negative_weights_use_magnitude(self):
        g = normalized_laplacian(Adjacency(np.array([[0.0, -0.5], [-0.5, 0.0]]), "functional", weighted=True))
        assert_allclose(g.degree, [1.5, 1.5])

    def test_asymmetric_rejected(self):
        with pytest.raises(ValidationError):
            Adjacency(np.array([[0.0, 1.0], [0.0, 0.0]]), "spatial")

    @given(st.integers(2, 16), st.floats(0.0, 0.6), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_spectrum_and_components(self, n, p, seed):
        r = np.random.default_rng(seed)
        a = np.triu((r.random((n, n)) < p).astype(float), 1)
        a = a + a.T
        g = normalized_laplacian(Adjacency(a, "spatial"))
        w = g.eig.eigenvalues
        assert w.min() >= -1e-10 and w.max() <= 2 + 1e-10
        assert int(np.sum(w <= 1e-8)) == union_find_components(a) == connected_components(a)


class TestPositionalEncodings:
    def test_p2(self):
        pe = positional_encodings(normalized_laplacian(adjacency_from_edges(2, [(0, 1)])), 1)
        r = 1 / np.sqrt(2)
        assert_allclose(pe.vectors[:, 0], [r, -r], atol=1e-15)

    def test_two_components_skip_two(self):
        g = normalized_laplacian(adjacency_from_edges(4, [(0, 1), (2, 3)]))
        pe = positional_encodings(g, 2)
        assert np.all(pe.eigenvalues > 1e-8)
        with pytest.raises(CapacityError) as info:
            positional_encodings(g, 3)
        assert info.value.max_feasible == 2

    def test_k_range(self):
        g = normalized_laplacian(adjacency_from_edges(3, [(0, 1), (1, 2)]))
        with pytest.raises(CapacityError) as info:
            positional_encodings(g, 3)
        assert info.value.max_feasible == 2

    def test_63_node_knn4(self):
        adj = build_spatial_adjacency(standard_layout(63), k=4)
        a = positional_encodings(normalized_laplacian(adj), 8)
        b = positional_encodings(normalized_laplacian(adj), 8)
        assert a.vectors.tobytes() == b.vectors.tobytes()
        assert_allclose(a.vectors.T @ a.vectors, np.eye(8), atol=1e-8)
        assert np.all(np.diff(a.eigenvalues) >= 0)

    def test_permutation_consistency(self, rng):
        # simple spectrum: path on 6 nodes
        adj = adjacency_from_edges(6, [(i, i + 1) for i in range(5)])
        pe = positional_encodings(normalized_laplacian(adj), 3)
        perm = rng.permutation(6)
        p_adj = Adjacency(adj.matrix[np.ix_(perm, perm)], "spatial")
        p_pe = positional_encodings(normalized_laplacian(p_adj), 3)
        # same vectors up to the per-column sign fixed by the convention
        for k in range(3):
            col, ref = p_pe.vectors[:, k], pe.vectors[perm, k]
            assert np.allclose(col, ref, atol=1e-10) or np.allclose(col, -ref, atol=1e-10)
