import itertools
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtplm import model
from mtplm.evalharness import head as H
from mtplm.evalharness import metrics as M
from mtplm.evalharness import tasks as T


# -- oracles ---------------------------------------------------------------

def brute_ranks(x):
    return [1 + sum(v < xi for v in x) + (sum(v == xi for v in x) - 1) / 2 for xi in x]


def brute_spearman(a, b):
    ra, rb = brute_ranks(a), brute_ranks(b)
    ma, mb = sum(ra) / len(ra), sum(rb) / len(rb)
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return cov / math.sqrt(va * vb)


def brute_precision(scores, truth, k):
    L = len(scores)
    pairs = [(i, j) for i in range(L) for j in range(i + 1, L) if j - i >= 6]
    sym = {(i, j): (scores[i][j] + scores[j][i]) / 2 for i, j in pairs}
    ranked = sorted(pairs, key=lambda ij: (-sym[ij], ij[0], ij[1]))
    n = L if k == "L" else max(1, L // 5)
    return sum(truth[i][j] for i, j in ranked[:n]) / n


# -- spearman / accuracy ----------------------------------------------------

def test_spearman_examples():
    assert M.spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert M.spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert abs(M.spearman([1, 1, 2], [1, 2, 3]) - brute_spearman([1, 1, 2], [1, 2, 3])) <= 1e-12
    assert M.spearman([1, 1, 2], [1, 2, 3]) == pytest.approx(math.sqrt(3) / 2, abs=1e-15)


def test_spearman_degenerate():
    with pytest.raises(M.DegenerateInput):
        M.spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(M.LengthMismatch):
        M.spearman([1, 2], [1, 2, 3])


def test_rankdata_agrees_with_scipy():
    from scipy.stats import rankdata
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.integers(0, 5, size=int(rng.integers(1, 30))).astype(float)
        assert np.array_equal(M.rankdata(x), rankdata(x))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-4, 4), st.floats(-10, 10, allow_nan=False)), min_size=2, max_size=25))
def test_spearman_property(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    if len(set(a)) < 2 or len(set(b)) < 2:
        return
    assert abs(M.spearman(a, b) - brute_spearman(a, b)) <= 1e-12


def test_accuracy():
    assert M.accuracy([1, 2, 0], [1, 2, 0]) == 1.0
    assert M.accuracy([1, 1], [0, 0]) == 0.0
    assert M.accuracy([1, 2, 0, 1], [1, 2, 0, 0]) == 0.75
    assert M.accuracy([1, 2, 0], [1, -1, 1]) == 0.5
    with pytest.raises(M.LengthMismatch):
        M.accuracy([1], [1, 2])


# -- contacts ---------------------------------------------------------------

def test_contact_threshold_is_strict():
    assert M.contact_map_from_coords([[0, 0, 0], [7.9, 0, 0]])[0, 1] == 1
    assert M.contact_map_from_coords([[0, 0, 0], [8.0, 0, 0]])[0, 1] == 0
    cmap = M.contact_map_from_coords(np.zeros((4, 3)))
    assert np.all(np.diag(cmap) == 0) and cmap.sum() == 12


def test_contact_non_finite():
    with pytest.raises(M.NonFiniteCoordinate):
        M.contact_map_from_coords([[0, 0, 0], [np.nan, 0, 0]])


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_contact_map_invariances():
    rng = np.random.default_rng(0)
    for _ in range(20):
        xyz = np.cumsum(rng.normal(scale=3.8 / math.sqrt(3), size=(40, 3)), axis=0)
        cmap = M.contact_map_from_coords(xyz)
        assert np.array_equal(cmap, cmap.T) and not np.diag(cmap).any()
        moved = xyz @ random_rotation(rng).T + rng.normal(scale=50, size=3)
        assert np.array_equal(M.contact_map_from_coords(moved), cmap)


def test_precision_examples():
    L = 12
    truth = np.zeros((L, L), dtype=int)
    for i, j in [(0, 7), (1, 9)]:
        truth[i, j] = truth[j, i] = 1
    scores = np.zeros((L, L))
    scores[0, 7] = scores[7, 0] = 2.0
    scores[1, 9] = scores[9, 1] = 1.5
    assert M.precision_at(scores, truth, 2) == 1.0
    assert M.precision_at(np.random.default_rng(0).random((L, L)), np.zeros((L, L)), "L") == 0.0
    with pytest.raises(M.NoQualifyingPairs):
        M.precision_at(np.zeros((6, 6)), np.zeros((6, 6)), "L")


def test_precision_against_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        L = int(rng.integers(7, 30))
        scores = rng.integers(0, 4, size=(L, L)).astype(float)  # many ties
        truth = (rng.random((L, L)) < 0.2).astype(int)
        truth = np.triu(truth, 1) + np.triu(truth, 1).T
        for k in ("L", "L/5"):
            assert abs(M.precision_at(scores, truth, k) - brute_precision(scores.tolist(), truth.tolist(), k)) <= 1e-12


def test_top_k():
    assert M.top_k(12, "L") == 12 and M.top_k(12, "L/5") == 2 and M.top_k(4, "L/5") == 1


def test_mean_std_hand_computed():
    m, s = M.mean_std([0.78, 0.79, 0.80])
    assert m == pytest.approx(0.79, abs=1e-15) and s == pytest.approx(0.01, abs=1e-15)
    assert M.format_mean_std([0.7803, 0.7792, 0.7814]) == "78.03 ± 0.11"
    assert M.mean_std([0.5]) == (0.5, 0.0)


# -- head -------------------------------------------------------------------

def test_head_config_defaults():
    cfg = H.HeadConfig(embedding_dim=64)
    assert (cfg.num_layers, cfg.feedforward_dim, cfg.num_heads, cfg.dropout, cfg.kernel_size) == (1, 32, 4, 0.1, 7)
    assert (cfg.learning_rate, cfg.warmup_steps, cfg.num_epochs, cfg.gradient_accumulation,
            cfg.batch_size, cfg.weight_decay) == (1e-2, 1000, 20, 16, 1, 0.0)
    with pytest.raises(ValueError):
        H.HeadConfig(embedding_dim=30)


def make_head(task="ssp3", d=16, seed=0):
    torch.manual_seed(seed)
    return H.ConvBertHead(H.HeadConfig(embedding_dim=d), task).double()


def test_head_forward_shape_and_determinism():
    head = make_head()
    emb = torch.randn(20, 16, dtype=torch.float64)
    a = H.convbert_head_forward(head, emb)
    assert a.shape == emb.shape and torch.equal(a, H.convbert_head_forward(head, emb))
    with pytest.raises(H.ShapeMismatch):
        H.convbert_head_forward(head, torch.randn(20, 8))


def test_conv_branch_receptive_field():
    head = make_head(d=16, seed=1)
    attn = head.layers[0].mixer
    with torch.no_grad():
        attn.value.weight.zero_()
        attn.value.bias.zero_()
    emb = torch.randn(25, 16, dtype=torch.float64)
    base = H.convbert_head_forward(head, emb)
    for p in (0, 5, 12, 24):
        changed = emb.clone()
        changed[p] += torch.randn(16, dtype=torch.float64)
        diff = (H.convbert_head_forward(head, changed) - base).abs().amax(-1)
        near = [q for q in range(25) if abs(q - p) <= 3]
        far = [q for q in range(25) if abs(q - p) > 3]
        assert (diff[far] == 0).all()
        assert (diff[near] > 0).all()


def test_attention_branch_is_global():
    head = make_head(d=16, seed=2)
    emb = torch.randn(25, 16, dtype=torch.float64)
    changed = emb.clone()
    changed[0] += 1.0
    diff = (H.convbert_head_forward(head, changed) - H.convbert_head_forward(head, emb)).abs().amax(-1)
    assert diff[24] > 0


def test_global_average_pooling_of_constant():
    head = make_head("fluorescence")
    v = torch.full((1, 9, 16), 0.375, dtype=torch.float64)
    assert torch.equal(v.mean(dim=1), torch.full((1, 16), 0.375, dtype=torch.float64))
    assert head(v[0]).dim() == 0


def test_contact_head_symmetric():
    head = make_head("contact")
    head.eval()
    out = head(torch.randn(11, 16, dtype=torch.float64))
    assert out.shape == (11, 11) and torch.equal(out, out.T)


def test_warmup_factor():
    assert H.warmup_factor(1, 1000) == 0.001
    assert H.warmup_factor(1000, 1000) == 1.0 == H.warmup_factor(5000, 1000)


def synthetic_token_set(n, d, seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(3, d)) * 3
    embs, labels = [], []
    for _ in range(n):
        y = rng.integers(0, 3, size=int(rng.integers(10, 20)))
        embs.append(torch.tensor(centers[y] + rng.normal(size=(len(y), d)) * 0.3, dtype=torch.float32))
        labels.append(y)
    return embs, labels


def test_train_head_separable_and_deterministic():
    embs, labels = synthetic_token_set(48, 16, 0)
    cfg = H.HeadConfig(embedding_dim=16, num_epochs=6, warmup_steps=10)
    a = H.train_head(embs, labels, "ssp3", cfg, seed=7)
    b = H.train_head(embs, labels, "ssp3", cfg, seed=7)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    pred = np.concatenate([H.predict(a, e) for e in embs])
    assert M.accuracy(pred, np.concatenate(labels)) >= 0.95


def test_train_head_regression_and_contact_run():
    rng = np.random.default_rng(0)
    embs = [torch.randn(int(rng.integers(8, 14)), 16) for _ in range(8)]
    cfg = H.HeadConfig(embedding_dim=16, num_epochs=1)
    head = H.train_head(embs, [float(e.mean()) for e in embs], "gb1", cfg, seed=0)
    assert np.isfinite(H.predict(head, embs[0]))
    maps = [M.contact_map_from_coords(np.cumsum(rng.normal(size=(len(e), 3)) * 2.2, 0)) for e in embs]
    head = H.train_head(embs, maps, "contact", cfg, seed=0)
    assert H.predict(head, embs[0]).shape == (len(embs[0]), len(embs[0]))


# -- task files and extraction ------------------------------------------------

def test_task_file_parsing(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text(json.dumps({"sequence": "MKT", "labels": "HEC"}) + "\n" +
                    json.dumps({"sequence": "AC", "labels": [0, 2], "split": "test"}) + "\n")
    recs = T.load_task_file(path, "ssp3")
    assert recs[0].labels.tolist() == [0, 1, 2] and recs[1].split == "test"
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"sequence": "MKT", "labels": "HEC"}) + "\n{oops\n")
    with pytest.raises(T.TaskFileError) as err:
        T.load_task_file(bad, "ssp3")
    assert err.value.line_number == 2
    coords = tmp_path / "c.jsonl"
    coords.write_text(json.dumps({"sequence": "MK", "ca_coords": [[0, 0, 0], [3.8, 0, 0]]}) + "\n")
    assert T.load_task_file(coords, "contact")[0].labels.tolist() == [[0, 1], [1, 0]]
    reg = tmp_path / "r.jsonl"
    reg.write_text(json.dumps({"sequence": "MK", "target": 1.5}) + "\n")
    assert T.load_task_file(reg, "fluorescence")[0].labels == 1.5


def test_extract_embeddings_strips_prefix_and_eos():
    cfg = model.ModelConfig(d_model=16, num_encoder_layers=1, num_decoder_layers=1, d_ff=32, num_heads=2, d_kv=8)
    params = model.init_params(cfg, 0)
    seq = "MKTAYIAKQRQISFVKSHFSRQLEERLGLIEVQAPILSRVGDGTQDNLSGAE"[:50]
    (nlu,) = T.extract_embeddings(params, cfg, [seq], "NLU")
    (s2s,) = T.extract_embeddings(params, cfg, [seq], "S2S")
    assert nlu.shape == (50, 16) and s2s.shape == (50, 16)
    assert not torch.equal(nlu, s2s)
    assert torch.equal(nlu, T.extract_embeddings(params, cfg, [seq], "NLU")[0])
