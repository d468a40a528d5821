"""One test per acceptance criterion.

A summary line per criterion (PASS/FAIL plus the measured value) is printed
at the end of the pytest run; see ``conftest.py``.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from _oracles import co_attention_ref, dense_gat, gradient_error, random_adjacency
from peptrix import numkit as nk
from peptrix.cli import main
from peptrix.contactgraph import ResidueGraph
from peptrix.encoders import GatLayerParams, gat_layer
from peptrix.explain import export_attention_csv, read_attention_csv, top_residues
from peptrix.fusion import AttentionMap, ClassifierHead, CoAttentionParams, SEQ, STRUCT, classify, co_attend, pool
from peptrix.ioformats import (
    EmbeddingFile,
    FormatError,
    Peptide,
    parse_fasta,
    parse_pdb_ca,
    read_embeddings,
    write_embeddings,
)
from peptrix.losses import LAMBDA_SWEEP, info_nce
from peptrix.model import ModelConfig, PeptideClassifier
from peptrix.synthetic import planted_motif_corpus, split_corpus, write_fixture
from peptrix.trainer import (
    TrainConfig,
    build_samples,
    evaluate,
    load_snapshot,
    save_snapshot,
    train,
)

DATA = Path(__file__).parent / "data"
CASES = 100
GRAD_TOL = 1e-4


def _param(rng, shape, name, low=-1.0, high=1.0):
    return nk.parameter(rng.uniform(low, high, size=shape), name=name)


def projected_weights(rng, shape):
    return nk.constant(rng.uniform(-1, 1, size=shape))


def _away_from_zero(rng, shape):
    # keep finite-difference probes off the LeakyReLU kink
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.05, 2.0, size=shape)


def _case_matmul(rng):
    r, k, c = rng.integers(1, 9, size=3)
    A, B = _param(rng, (r, k), "A"), _param(rng, (k, c), "B")
    R = projected_weights(rng, (r, c))
    return lambda: nk.sum_all(nk.mul(nk.matmul(A, B), R)), [A, B]


def _unary(op, make=None):
    def case(rng):
        shape = tuple(rng.integers(1, 9, size=2))
        x = nk.parameter(make(rng, shape) if make else rng.uniform(-3, 3, size=shape), name="x")
        R = projected_weights(rng, shape)
        return lambda: nk.sum_all(nk.mul(op(x), R)), [x]
    return case


def _case_gat(rng):
    n = int(rng.integers(1, 6))
    d_in, d_head = (int(v) for v in rng.integers(1, 5, size=2))
    heads = int(rng.integers(1, 3))
    graph = ResidueGraph.from_adjacency(random_adjacency(rng, n))
    layer = GatLayerParams.init(rng, d_in, d_head * heads, heads)
    h = _param(rng, (n, d_in), "h", -2, 2)
    R = projected_weights(rng, (n, d_head * heads))
    return lambda: nk.sum_all(nk.mul(gat_layer(h, graph, layer)[0], R)), [h, *layer.parameters()]


def _case_co_attend(rng):
    n, d, d_k = (int(v) for v in rng.integers(1, 6, size=3))
    params = CoAttentionParams.init(rng, d, d_k)
    S, G = _param(rng, (n, d), "S"), _param(rng, (n, d), "G")
    R1, R2 = projected_weights(rng, (n, d_k)), projected_weights(rng, (n, d_k))

    def build():
        s_new, g_new, _ = co_attend(S, G, params)
        return nk.add(nk.sum_all(nk.mul(s_new, R1)), nk.sum_all(nk.mul(g_new, R2)))

    return build, [S, G, *params.parameters()]


def _case_info_nce(rng):
    n, d = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    tau = float(rng.uniform(0.1, 1.0))
    zs, zt = _param(rng, (n, d), "zs"), _param(rng, (n, d), "zt")
    return lambda: info_nce(zs, zt, tau), [zs, zt]


def _case_bce(rng):
    p = nk.parameter(rng.uniform(0.02, 0.98, size=(1, 1)), name="p")
    y = float(rng.integers(0, 2))
    return lambda: nk.bce(p, y), [p]


def _case_classify(rng):
    d = int(rng.integers(1, 5))
    zs, zt = _param(rng, (1, d), "zs"), _param(rng, (1, d), "zt")
    head = ClassifierHead.init(rng, d)
    head.b.value[:] = rng.uniform(-1, 1)
    y = float(rng.integers(0, 2))
    build = lambda: nk.bce(classify(pool(zs, SEQ), pool(zt, STRUCT), head), y)
    return build, [zs, zt, *head.parameters()]


GRADIENT_CASES = {
    "matmul": _case_matmul,
    "softmax_rows": _unary(nk.softmax_rows),
    "leaky_relu": _unary(nk.leaky_relu, _away_from_zero),
    "gelu": _unary(nk.gelu),
    "sigmoid": _unary(nk.sigmoid),
    "gat_layer": _case_gat,
    "co_attend": _case_co_attend,
    "info_nce": _case_info_nce,
    "bce": _case_bce,
    "classify": _case_classify,
}


@pytest.mark.criterion(1, "gradient suite: central finite differences, 100 cases per operation")
def test_gradient_suite(detail):
    start = time.perf_counter()
    worst = {}
    for k, (name, make) in enumerate(GRADIENT_CASES.items()):
        rng = np.random.default_rng(1000 + k)
        errors = []
        for _ in range(CASES):
            build, leaves = make(rng)
            errors.append(gradient_error(build, leaves))
        worst[name] = max(errors)
    elapsed = time.perf_counter() - start
    detail(f"worst rel err {max(worst.values()):.2e} ({max(worst, key=worst.get)}), {elapsed:.1f}s")
    assert all(err <= GRAD_TOL for err in worst.values()), worst
    assert elapsed < 120


@pytest.mark.criterion(2, "GAT layer equals dense reference and is permutation equivariant")
def test_gat_oracle(detail):
    rng = np.random.default_rng(2)
    worst_ref = worst_perm = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        d_in, d_head = (int(v) for v in rng.integers(1, 6, size=2))
        heads = int(rng.integers(1, 3))
        adj = random_adjacency(rng, n, p=float(rng.uniform(0.1, 0.9)))
        Ws = [rng.normal(size=(d_head, d_in)) for _ in range(heads)]
        As = [rng.normal(size=(2 * d_head, 1)) for _ in range(heads)]
        layer = GatLayerParams([nk.parameter(w) for w in Ws], [nk.parameter(a) for a in As])
        h = rng.normal(size=(n, d_in))
        out, _ = gat_layer(nk.constant(h), ResidueGraph.from_adjacency(adj), layer)
        ref, _ = dense_gat(h, adj, Ws, As)
        worst_ref = max(worst_ref, float(np.max(np.abs(out.value - ref))))
        perm = rng.permutation(n)
        pout, _ = gat_layer(nk.constant(h[perm]), ResidueGraph.from_adjacency(adj[np.ix_(perm, perm)]), layer)
        worst_perm = max(worst_perm, float(np.max(np.abs(pout.value - out.value[perm]))))
    detail(f"max |diff| reference {worst_ref:.1e}, permutation {worst_perm:.1e}")
    assert worst_ref <= 1e-10 and worst_perm <= 1e-10


@pytest.mark.criterion(3, "InfoNCE closed forms and swap symmetry")
def test_info_nce_closed_forms(detail):
    eye = nk.constant(np.eye(2))
    ortho = info_nce(eye, eye, 1.0).item()
    identical = {}
    for n in (2, 3, 4):
        z = nk.constant(np.tile([0.4, -1.1, 2.5], (n, 1)))
        identical[n] = abs(info_nce(z, z, 0.07).item() - math.log(n))
    rng = np.random.default_rng(3)
    swaps = []
    for _ in range(50):
        n, d = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        zs, zt = nk.constant(rng.normal(size=(n, d))), nk.constant(rng.normal(size=(n, d)))
        tau = float(rng.uniform(0.05, 2.0))
        swaps.append(info_nce(zs, zt, tau).item() == info_nce(zt, zs, tau).item())
    detail(f"orthonormal {ortho:.6f}, log N max err {max(identical.values()):.1e}, swap exact {all(swaps)}")
    assert abs(ortho - 0.31326) <= 1e-4
    assert all(err <= 1e-10 for err in identical.values())
    assert all(swaps)


@pytest.mark.criterion(4, "co-attention equals literal reference; exported rows sum to 1")
def test_co_attention_oracle(detail, tmp_path):
    rng = np.random.default_rng(4)
    worst = worst_row = 0.0
    for case in range(200):
        n, d, d_k = int(rng.integers(1, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
        mats = [rng.normal(size=(d, d_k)) for _ in range(6)]
        S, G = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        params = CoAttentionParams(*(nk.parameter(m) for m in mats))
        s_new, g_new, maps = co_attend(nk.constant(S), nk.constant(G), params)
        rs, rg, _, _ = co_attention_ref(S, G, *mats)
        worst = max(worst, float(np.max(np.abs(s_new.value - rs))), float(np.max(np.abs(g_new.value - rg))))
        for k, amap in enumerate(maps):
            path = tmp_path / f"{case}_{k}.csv"
            export_attention_csv(amap, path)
            back = read_attention_csv(path).weights
            worst_row = max(worst_row, float(np.max(np.abs(back.sum(axis=1) - 1.0))))
    detail(f"max |diff| {worst:.1e}, exported row-sum err {worst_row:.1e}")
    assert worst <= 1e-10
    assert worst_row <= 1e-5


@pytest.fixture(scope="module")
def planted():
    peptides, coords = planted_motif_corpus(n=500, length=20, seed=42)
    train_set, test_set = split_corpus(peptides, 0.2, seed=42)
    return train_set, test_set, coords


def _planted_f1(planted, lam):
    train_set, test_set, coords = planted
    model = PeptideClassifier(ModelConfig(), seed=42)
    train(train_set, coords, model, TrainConfig(lam=lam, tau=0.07, seed=42))
    return evaluate(model, build_samples(test_set, coords, model)).f1_weighted


@pytest.fixture(scope="module")
def lambda_sweep(planted):
    out = {}
    for lam in LAMBDA_SWEEP:
        start = time.perf_counter()
        out[lam] = (_planted_f1(planted, lam), time.perf_counter() - start)
    return out


@pytest.mark.slow
@pytest.mark.criterion(5, "planted-motif end-to-end with defaults: weighted F1 >= 0.95")
def test_planted_motif(detail, lambda_sweep):
    f1, seconds = lambda_sweep[0.5]
    detail(f"weighted F1 {f1:.4f} in {seconds:.1f}s")
    assert f1 >= 0.95
    assert seconds <= 300


@pytest.mark.slow
@pytest.mark.criterion(6, "lambda insensitivity: F1 spread over {0.01, 0.1, 0.5} <= 0.10")
def test_lambda_insensitivity(detail, lambda_sweep):
    scores = {lam: round(float(f1), 4) for lam, (f1, _) in lambda_sweep.items()}
    spread = max(scores.values()) - min(scores.values())
    detail(f"F1 by lambda {scores}, spread {spread:.4f}")
    assert spread <= 0.10


@pytest.mark.slow
@pytest.mark.criterion(7, "overfit: 32 examples memorized within 50 epochs")
def test_overfit(detail, planted):
    train_set, _, coords = planted
    subset = train_set[:32]
    model = PeptideClassifier(ModelConfig(), seed=42)
    cfg = TrainConfig(max_epochs=50, patience=None, gamma=1.0, val_fraction=0.0, seed=42)
    result = train(subset, coords, model, cfg)
    f1 = evaluate(model, build_samples(subset, coords, model)).f1_weighted
    detail(f"train F1 {f1:.4f} after {len(result.history)} epochs")
    assert f1 == 1.0


@pytest.mark.criterion(8, "early stopping with frozen parameters: patience+1 epochs, epoch-1 snapshot")
def test_early_stopping(detail, planted):
    train_set, _, coords = planted
    peptides = train_set[:40]
    model = PeptideClassifier(ModelConfig(dim=16), seed=8)
    initial = model.state()
    results = []
    for patience in (1, 2, 3):
        cfg = TrainConfig(batch_size=16, max_epochs=10, patience=patience, lr0=0.0, seed=8)
        result = train(peptides, coords, model, cfg)
        results.append((patience, len(result.history), result.best_epoch))
        same = all(np.array_equal(result.best_state[k], initial[k]) for k in initial)
        assert same and all(np.array_equal(model.state()[k], initial[k]) for k in initial)
    detail(f"(patience, epochs run, best epoch): {results}")
    assert all(epochs == p + 1 and best == 1 for p, epochs, best in results)


@pytest.mark.criterion(9, "format fidelity: binary round trips, text fixtures, CSV column sums")
def test_format_fidelity(detail, tmp_path):
    rng = np.random.default_rng(9)
    # PTRIXEMB
    emb = EmbeddingFile(dim=4)
    emb.add("a", rng.normal(size=(3, 4)))
    emb.add("b", rng.normal(size=(2, 4)))
    write_embeddings(emb, tmp_path / "e.bin")
    back = read_embeddings(tmp_path / "e.bin")
    assert all(back.entries[k].tobytes() == emb.entries[k].tobytes() for k in emb.entries)
    write_embeddings(back, tmp_path / "e2.bin")
    assert (tmp_path / "e.bin").read_bytes() == (tmp_path / "e2.bin").read_bytes()
    with open(tmp_path / "bad.bin", "wb") as fh:
        fh.write(b"BADMAGIC" + (tmp_path / "e.bin").read_bytes()[8:])
    with pytest.raises(FormatError, match="bad magic"):
        read_embeddings(tmp_path / "bad.bin")
    # PTRIXMDL
    weights = PeptideClassifier(ModelConfig(dim=8), seed=9).state()
    save_snapshot(tmp_path / "m.bin", weights, {"note": "x"})
    loaded, meta = load_snapshot(tmp_path / "m.bin")
    save_snapshot(tmp_path / "m2.bin", loaded, meta)
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()
    assert all(loaded[k].tobytes() == weights[k].astype("<f4").astype(np.float64).tobytes() for k in weights)
    # FASTA fixtures
    assert parse_fasta(b">p1\nACDK\n") == [Peptide("p1", "ACDK")]
    with pytest.raises(FormatError, match="'9'"):
        parse_fasta((DATA / "bad_residue.fasta").read_text())
    with pytest.raises(FormatError, match="empty record"):
        parse_fasta((DATA / "empty_record.fasta").read_text())
    with pytest.raises(FormatError, match="duplicate id"):
        parse_fasta((DATA / "duplicate.fasta").read_text())
    # PDB fixtures
    assert len(parse_pdb_ca((DATA / "three_ca.pdb").read_text())) == 3
    with pytest.raises(FormatError, match="zero CA atoms"):
        parse_pdb_ca((DATA / "hetatm_only.pdb").read_text())
    with pytest.raises(FormatError, match="record 2: unparseable coordinate"):
        parse_pdb_ca((DATA / "mangled.pdb").read_text())
    # heatmap CSV column sums against the ranking reported from the export
    worst = 0.0
    for case in range(50):
        n_q, n_k = (int(v) for v in rng.integers(1, 25, size=2))
        x = np.exp(3 * rng.normal(size=(n_q, n_k)))
        weights = x / x.sum(axis=1, keepdims=True)
        path = tmp_path / f"map{case}.csv"
        export_attention_csv(AttentionMap(weights), path)
        lines = [line.split(",") for line in path.read_text().splitlines()[1:]]
        sums = [math.fsum(float(r[j + 1]) for r in lines) for j in range(n_k)]
        for label, score in top_residues(read_attention_csv(path), n_k):
            worst = max(worst, abs(score - sums[int(label) - 1]))
    detail(f"binary round trips bit-identical, CSV column-sum err {worst:.1e}")
    assert worst <= 1e-6


@pytest.mark.criterion(10, "determinism: two CLI training runs give identical history and snapshot")
def test_cli_determinism(detail, tmp_path, capsys):
    cfg = write_fixture(tmp_path / "fx", n=48, length=16, seed=42, config={"max_epochs": 3})
    outputs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        outputs.append(((out / "history.csv").read_bytes(), (out / "model.ptrixmdl").read_bytes()))
    capsys.readouterr()
    manifest = json.loads((tmp_path / "run0" / "manifest.json").read_text())
    detail(f"history {len(outputs[0][0])} bytes, snapshot {len(outputs[0][1])} bytes, seed {manifest['seed']}")
    assert outputs[0] == outputs[1]
