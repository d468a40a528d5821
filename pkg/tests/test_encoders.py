import numpy as np
import pytest

from _oracles import act_ref, dense_gat, gradient_error, projected, random_adjacency
from peptrix import numkit as nk
from peptrix.contactgraph import ResidueGraph
from peptrix.encoders import (
    FileProvider,
    GatLayerParams,
    TableProvider,
    gat_encode,
    gat_layer,
    seq_encode,
    sinusoidal_positions,
)
from peptrix.ioformats import EmbeddingFile, FormatError, Peptide


def layer_from(Ws, As, activation="gelu"):
    return GatLayerParams(
        [nk.parameter(w.copy(), name=f"W{i}") for i, w in enumerate(Ws)],
        [nk.parameter(a.copy(), name=f"a{i}") for i, a in enumerate(As)],
        activation,
    )


def random_layer(rng, d_in, d_head, heads=1, activation="gelu"):
    Ws = [rng.normal(size=(d_head, d_in)) for _ in range(heads)]
    As = [rng.normal(size=(2 * d_head, 1)) for _ in range(heads)]
    return Ws, As, layer_from(Ws, As, activation)


def path_graph(n):
    adj = np.eye(n, dtype=bool)
    for i in range(n - 1):
        adj[i, i + 1] = adj[i + 1, i] = True
    return ResidueGraph.from_adjacency(adj)


class TestProviders:
    def test_table_same_residue_differs_by_position_only(self):
        prov = TableProvider(6, np.random.default_rng(0))
        S = seq_encode(Peptide("aa", "AA"), prov).value
        pos = sinusoidal_positions(2, 6)
        np.testing.assert_allclose(S[1] - S[0], pos[1] - pos[0], atol=1e-15)

    def test_file_same_dim_verbatim(self):
        cache = EmbeddingFile(dim=8)
        rows = np.random.default_rng(1).normal(size=(3, 8))
        cache.add("p", rows)
        prov = FileProvider(cache, 8)
        assert prov.parameters() == {}
        out = seq_encode(Peptide("p", "KLA"), prov).value
        np.testing.assert_array_equal(out, rows.astype(np.float32).astype(np.float64))

    def test_file_projects_other_dim(self):
        cache = EmbeddingFile(dim=8)
        cache.add("p", np.ones((3, 8)))
        prov = FileProvider(cache, 4, np.random.default_rng(0))
        assert prov.encode(Peptide("p", "KLA")).shape == (3, 4)
        assert set(prov.parameters()) == {"seq.proj"}

    def test_file_length_mismatch(self):
        cache = EmbeddingFile(dim=8)
        cache.add("p", np.ones((5, 8)))
        with pytest.raises(FormatError, match="5 rows"):
            FileProvider(cache, 8).encode(Peptide("p", "KLAK"))

    def test_file_missing_entry(self):
        with pytest.raises(KeyError, match="q"):
            FileProvider(EmbeddingFile(dim=2), 2).encode(Peptide("q", "KL"))


class TestGatLayer:
    def test_isolated_node_attends_to_itself(self):
        rng = np.random.default_rng(3)
        adj = np.eye(3, dtype=bool)
        adj[0, 1] = adj[1, 0] = True
        Ws, As, layer = random_layer(rng, 4, 4)
        h = rng.normal(size=(3, 4))
        out, coeffs = gat_layer(nk.constant(h), ResidueGraph.from_adjacency(adj), layer)
        assert coeffs.neighbors(2) == {2: 1.0}
        np.testing.assert_allclose(out.value[2], act_ref("gelu")(Ws[0] @ h[2]), atol=1e-12)

    def test_identical_neighbors_get_equal_weight(self):
        rng = np.random.default_rng(4)
        adj = np.eye(3, dtype=bool)
        adj[0, 1:] = adj[1:, 0] = True
        h = rng.normal(size=(3, 3))
        h[2] = h[1]
        _, _, layer = random_layer(rng, 3, 3)
        _, coeffs = gat_layer(nk.constant(h), ResidueGraph.from_adjacency(adj), layer)
        alpha = coeffs.neighbors(0)
        assert alpha[1] == pytest.approx(alpha[2], abs=1e-15)

    def test_matches_dense_reference(self):
        rng = np.random.default_rng(5)
        adj = random_adjacency(rng, 5)
        h = rng.normal(size=(5, 3))
        Ws, As, layer = random_layer(rng, 3, 3)
        out, coeffs = gat_layer(nk.constant(h), ResidueGraph.from_adjacency(adj), layer)
        ref, alphas = dense_gat(h, adj, Ws, As)
        np.testing.assert_allclose(out.value, ref, atol=1e-10, rtol=0)
        np.testing.assert_allclose(coeffs.alpha[0], alphas[0], atol=1e-12, rtol=0)

    def test_multi_head_concatenates(self):
        rng = np.random.default_rng(6)
        adj = random_adjacency(rng, 6)
        h = rng.normal(size=(6, 4))
        Ws, As, layer = random_layer(rng, 4, 2, heads=3, activation="relu")
        out, coeffs = gat_layer(nk.constant(h), ResidueGraph.from_adjacency(adj), layer)
        assert out.shape == (6, 6) and coeffs.alpha.shape == (3, 6, 6)
        ref, _ = dense_gat(h, adj, Ws, As, "relu")
        np.testing.assert_allclose(out.value, ref, atol=1e-10, rtol=0)

    def test_rows_stochastic_and_positive_on_support(self):
        rng = np.random.default_rng(7)
        adj = random_adjacency(rng, 8)
        _, _, layer = random_layer(rng, 3, 3)
        _, coeffs = gat_layer(nk.constant(rng.normal(size=(8, 3))), ResidueGraph.from_adjacency(adj), layer)
        np.testing.assert_allclose(coeffs.alpha[0].sum(axis=1), 1.0, atol=1e-10)
        support = coeffs.alpha[0][adj]
        assert np.all(support > 0) and np.all(support <= 1)
        assert np.all(coeffs.alpha[0][~adj] == 0)

    def test_raw_scores_match_leaky_relu(self):
        rng = np.random.default_rng(8)
        adj = random_adjacency(rng, 4)
        h = rng.normal(size=(4, 2))
        Ws, As, layer = random_layer(rng, 2, 2)
        _, coeffs = gat_layer(nk.constant(h), ResidueGraph.from_adjacency(adj), layer)
        a = As[0].ravel()
        for i in range(4):
            for j, e in coeffs.raw_scores(i).items():
                s = a @ np.concatenate([Ws[0] @ h[i], Ws[0] @ h[j]])
                assert e == pytest.approx(s if s > 0 else 0.2 * s, abs=1e-12)

    def test_shape_errors(self):
        rng = np.random.default_rng(9)
        _, _, layer = random_layer(rng, 3, 3)
        with pytest.raises(nk.ShapeError):
            gat_layer(nk.constant(np.ones((4, 3))), path_graph(5), layer)
        with pytest.raises(nk.ShapeError):
            GatLayerParams([nk.parameter(np.ones((2, 3)))], [nk.parameter(np.ones((2, 1)))])

    def test_gradient(self):
        rng = np.random.default_rng(10)
        adj = random_adjacency(rng, 5)
        h = nk.parameter(rng.normal(size=(5, 4)), name="h")
        _, _, layer = random_layer(rng, 4, 4)
        graph = ResidueGraph.from_adjacency(adj)
        R = rng.uniform(-1, 1, size=(5, 4))
        build = lambda: nk.sum_all(nk.mul(gat_layer(h, graph, layer)[0], nk.constant(R)))
        assert gradient_error(build, [h, *layer.parameters()]) <= 1e-4


class TestGatEncode:
    def test_zero_weights_give_activation_of_zero(self):
        layers = [layer_from([np.zeros((4, 4))], [np.zeros((8, 1))]) for _ in range(2)]
        out, coeffs = gat_encode(nk.constant(np.random.default_rng(0).normal(size=(5, 4))), path_graph(5), layers)
        np.testing.assert_array_equal(out.value, np.zeros((5, 4)))
        assert len(coeffs) == 2

    def test_dimension_chain_checked(self):
        rng = np.random.default_rng(1)
        layers = [random_layer(rng, 4, 3)[2], random_layer(rng, 4, 4)[2]]
        with pytest.raises(nk.ShapeError, match="layer 1"):
            gat_encode(nk.constant(np.ones((3, 4))), path_graph(3), layers)

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        adj = random_adjacency(rng, 6)
        h = rng.normal(size=(6, 4))
        layers = [random_layer(rng, 4, 4)[2] for _ in range(2)]
        perm = rng.permutation(6)
        out, _ = gat_encode(nk.constant(h), ResidueGraph.from_adjacency(adj), layers)
        pout, _ = gat_encode(
            nk.constant(h[perm]), ResidueGraph.from_adjacency(adj[np.ix_(perm, perm)]), layers
        )
        np.testing.assert_allclose(pout.value, out.value[perm], atol=1e-10, rtol=0)

    @pytest.mark.parametrize("n_layers", [1, 2])
    def test_locality(self, n_layers):
        rng = np.random.default_rng(11)
        layers = [random_layer(rng, 3, 3)[2] for _ in range(n_layers)]
        graph = path_graph(7)
        h = rng.normal(size=(7, 3))
        far = h.copy()
        far[n_layers + 1] += 5.0  # strictly more than n_layers hops from node 0
        a, _ = gat_encode(nk.constant(h), graph, layers)
        b, _ = gat_encode(nk.constant(far), graph, layers)
        np.testing.assert_array_equal(a.value[0], b.value[0])
        near = h.copy()
        near[n_layers] += 5.0
        c, _ = gat_encode(nk.constant(near), graph, layers)
        assert not np.array_equal(a.value[0], c.value[0])
