import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from geofm.backbone import LayerRouting, RoutingStats
from geofm.errors import NonFiniteError
from geofm.objectives import (
    HeadPair, LossParts, ProjectionHead, QueryDecoder, TextTable, cluster_objects, entropy, head_forward,
    loss_cl, loss_fgcl, loss_image, loss_ita, loss_mgcl, loss_object, loss_pixel, loss_qsacl, moe_aux_loss,
    qsacl_aggregate, total_loss,
)

D = torch.float64


def _t(x):
    return torch.as_tensor(np.asarray(x), dtype=D)


def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _ce(q, p):
    return float(-(q * np.log(p)).sum())


def identity_heads(tau_s=0.1, tau_t=0.04, center=None, dim=3):
    c = torch.zeros(dim, dtype=D) if center is None else _t(center)
    return HeadPair(torch.nn.Identity(), torch.nn.Identity(), c, tau_s, tau_t)


# -- heads ---------------------------------------------------------------------

def test_head_forward_examples():
    zero = torch.nn.Identity()
    for tau in (0.04, 0.1, 1.0):
        assert torch.allclose(head_forward(torch.zeros(5, dtype=D), zero, "student", tau),
                              torch.full((5,), 0.2, dtype=D))
    x = _t([0.3, -1.0, 2.0])
    sharp = head_forward(x, zero, "teacher", 1e-4)
    assert torch.allclose(sharp, _t([0.0, 0.0, 1.0]))
    assert np.allclose(head_forward(x, zero, "student", 1.0).numpy(), _softmax(x.numpy()), atol=1e-15)
    c = _t([0.1, 0.2, 0.3])
    assert np.allclose(head_forward(x, zero, "teacher", 0.5, c).numpy(), _softmax((x - c).numpy() / 0.5))
    with pytest.raises(ValueError):
        head_forward(x, zero, "critic", 1.0)


def test_projection_head_logits_are_cosines():
    head = ProjectionHead(8, 16, 32, bottleneck=4)
    out = head(torch.randn(10, 8))
    assert out.shape == (10, 32)
    assert out.abs().max() <= 1 + 1e-6


# -- L_CL ----------------------------------------------------------------------

def test_loss_cl_worked_values():
    assert float(loss_cl(_t([0.5, 0.5]), _t([0.0, 1.0]))) == pytest.approx(math.log(2), abs=1e-12)
    assert float(loss_cl(_t([0.5, 0.5]), _t([0.5, 0.5]))) == pytest.approx(math.log(2), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_cross_entropy_bounds_entropy(k, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
    ce = float(loss_cl(_t(p), _t(q)))
    assert ce >= 0
    assert ce - float(entropy(_t(q))) >= -1e-12
    assert float(loss_cl(_t(q), _t(q))) == pytest.approx(float(entropy(_t(q))), abs=1e-12)
    assert ce == pytest.approx(_ce(q, p), abs=1e-9)


def test_loss_cl_gradient_reaches_student_only():
    p = torch.tensor([0.3, 0.7], dtype=D, requires_grad=True)
    q = torch.tensor([0.6, 0.4], dtype=D, requires_grad=True)
    loss_cl(p, q).backward()
    assert p.grad is not None and q.grad is None


def test_loss_cl_clamps_zero_probabilities():
    assert math.isfinite(float(loss_cl(_t([0.0, 1.0]), _t([0.5, 0.5]))))


# -- MGCL pieces -----------------------------------------------------------

def test_pixel_identical_features_hit_entropy_floor():
    heads = identity_heads(0.5, 0.5)
    F = torch.randn(2, 4, 3, dtype=D)
    loss, skipped = loss_pixel(F, F, [(0, 0), (3, 3)], heads)
    expect = entropy(torch.softmax(F[:, [0, 3]] / 0.5, -1)).mean()
    assert not skipped and float(loss) == pytest.approx(float(expect), abs=1e-12)


def test_pixel_empty_correspondence_is_skipped():
    loss, skipped = loss_pixel(torch.randn(1, 4, 3), torch.randn(1, 4, 3), [], identity_heads())
    assert skipped and float(loss) == 0.0


def test_pixel_two_pair_oracle():
    rng = np.random.default_rng(0)
    Fs, Ft = rng.normal(size=(1, 3, 3)), rng.normal(size=(1, 4, 3))
    center = rng.normal(size=3) * 0.1
    pairs = [(0, 2), (2, 1)]
    ref = np.mean([_ce(_softmax((Ft[0, b] - center) / 0.04), _softmax(Fs[0, a] / 0.1)) for a, b in pairs])
    got, _ = loss_pixel(_t(Fs), _t(Ft), pairs, identity_heads(center=center))
    assert float(got) == pytest.approx(ref, abs=1e-9)


def test_single_cluster_center_is_the_mean():
    F = torch.randn(7, 3, dtype=D)
    c = cluster_objects(F, torch.randn(1, 3, dtype=D))
    assert torch.allclose(c[0], F.mean(0), atol=1e-12)


def test_clusters_find_separated_blobs():
    rng = np.random.default_rng(1)
    a = rng.normal([5, 0, 0], 0.1, size=(10, 3))
    b = rng.normal([0, 5, 0], 0.1, size=(10, 3))
    F = _t(np.concatenate([a, b]))
    clusters = _t([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    centers, S = cluster_objects(F, clusters, eps=0.05, iters=10, return_assignment=True)
    # Lloyd iterations seeded at the cluster embeddings
    X, mu = F.numpy(), clusters.numpy().copy()
    for _ in range(5):
        near = np.argmin(((X[:, None] - mu[None]) ** 2).sum(-1), axis=1)
        mu = np.stack([X[near == j].mean(0) for j in range(2)])
    assert np.abs(centers.numpy() - mu).max() < 1e-3
    assert np.allclose(S.sum(0).numpy(), 0.5, atol=1e-12)


def test_object_and_image_identical_views_hit_entropy_floor():
    heads = identity_heads(0.3, 0.3)
    F = torch.randn(1, 6, 3, dtype=D)
    cl = torch.randn(2, 3, dtype=D)
    centers = cluster_objects(F, cl)
    assert float(loss_object(F, F, cl, cl, heads)) == pytest.approx(
        float(entropy(torch.softmax(centers / 0.3, -1)).mean()), abs=1e-12)
    assert float(loss_image(F, F, heads)) == pytest.approx(
        float(entropy(torch.softmax(F.mean(1) / 0.3, -1)).mean()), abs=1e-12)


def test_single_cluster_object_equals_image_term():
    heads = identity_heads()
    Fs, Ft = torch.randn(2, 5, 3, dtype=D), torch.randn(2, 5, 3, dtype=D)
    cl = torch.randn(1, 3, dtype=D)
    assert float(loss_object(Fs, Ft, cl, cl, heads)) == pytest.approx(float(loss_image(Fs, Ft, heads)), abs=1e-12)


def test_image_term_on_single_location_equals_pixel_term():
    heads = identity_heads()
    Fs, Ft = torch.randn(2, 1, 3, dtype=D), torch.randn(2, 1, 3, dtype=D)
    pix, _ = loss_pixel(Fs, Ft, [(0, 0)], heads)
    assert float(loss_image(Fs, Ft, heads)) == pytest.approx(float(pix), abs=1e-12)


def test_object_two_center_oracle():
    rng = np.random.default_rng(2)
    Fs, Ft = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    cl = rng.normal(size=(2, 3))

    def centers(F):
        cos = (F / np.linalg.norm(F, axis=1, keepdims=True)) @ (cl / np.linalg.norm(cl, axis=1, keepdims=True)).T
        K = np.exp(cos / 0.05)
        u, v = np.ones(4), np.ones(2)
        for _ in range(3):
            u = 0.25 / (K @ v)
            v = 0.5 / (K.T @ u)
        S = u[:, None] * K * v[None]
        return (S / S.sum(0)).T @ F

    cs, ct = centers(Fs), centers(Ft)
    ref = np.mean([_ce(_softmax(ct[i] / 0.04), _softmax(cs[i] / 0.1)) for i in range(2)])
    got = loss_object(_t(Fs), _t(Ft), _t(cl), _t(cl), identity_heads())
    assert float(got) == pytest.approx(ref, abs=1e-9)


def test_fgcl_is_the_sum_of_its_levels():
    heads = identity_heads()
    Fs, Ft = torch.randn(2, 4, 3, dtype=D), torch.randn(2, 4, 3, dtype=D)
    cl = torch.randn(2, 3, dtype=D)
    pairs = [(0, 1), (2, 2)]
    parts = loss_pixel(Fs, Ft, pairs, heads)[0] + loss_object(Fs, Ft, cl, cl, heads) + loss_image(Fs, Ft, heads)
    assert float(loss_fgcl(Fs, Ft, pairs, heads, cl, cl)) == pytest.approx(float(parts), abs=1e-12)


def test_mgcl_sums_and_skips_missing():
    assert float(loss_mgcl({"HR": _t(0.5), "MS": None, "SAR": None}, _t(0.25))) == pytest.approx(0.75)
    assert float(loss_mgcl({"HR": _t(0.5), "MS": _t(1.0), "SAR": _t(2.0)}, _t(0.25))) == pytest.approx(3.75)
    with pytest.raises(ValueError):
        loss_mgcl({}, None)


# -- QSACL -------------------------------------------------------------------

def test_single_feature_aggregation():
    dec = QueryDecoder(4, n_queries=5).double()
    f = torch.randn(1, 4, dtype=D)
    z, attn = qsacl_aggregate(dec, f, return_attn=True)
    assert torch.equal(attn, torch.ones(5, 1, dtype=D))
    assert torch.allclose(z, z[0].expand(5, -1))


def test_default_query_count_and_row_sums():
    dec = QueryDecoder(8)
    assert dec.n_queries == 16
    _, attn = qsacl_aggregate(dec, torch.randn(3, 20, 8), return_attn=True)
    assert attn.shape == (3, 16, 20)
    assert torch.allclose(attn.sum(-1), torch.ones(3, 16), atol=1e-6)


def test_two_feature_cross_attention_oracle():
    torch.manual_seed(3)
    dec = QueryDecoder(2, n_queries=2, mlp_ratio=1.0).double()
    f = torch.randn(2, 2, dtype=D)
    W = {k: v.detach().numpy() for k, v in dec.state_dict().items()}

    def ln(x, n):
        mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * W[f"{n}.weight"] + W[f"{n}.bias"]

    def lin(x, n):
        return x @ W[f"{n}.weight"].T + W[f"{n}.bias"]

    q = lin(ln(W["queries"], "norm_q"), "q")
    kv = ln(f.numpy(), "norm_kv")
    a = _softmax(q @ lin(kv, "k").T / math.sqrt(2))
    h = lin(a @ lin(kv, "v"), "out")
    m = lin(ln(h, "norm_mlp"), "mlp.fc1")
    m = 0.5 * m * (1 + np.vectorize(math.erf)(m / math.sqrt(2)))
    z_ref = h + lin(m, "mlp.fc2")
    z, attn = qsacl_aggregate(dec, f, return_attn=True)
    assert np.abs(z.detach().numpy() - z_ref).max() < 1e-12
    assert np.abs(attn.detach().numpy() - a).max() < 1e-12


def test_qsacl_identical_branches_hit_entropy_floor():
    heads = identity_heads(0.2, 0.2)
    z = torch.randn(1, 3, 3, dtype=D)
    # one global and one local view carrying the same aggregated features
    got = loss_qsacl(z, z, z, z, heads)
    assert float(got) == pytest.approx(float(entropy(torch.softmax(z / 0.2, -1)).mean()), abs=1e-12)


def test_qsacl_hand_case_four_pairs():
    rng = np.random.default_rng(9)
    zs_g, zs_l, zt_g, zt_l = (rng.normal(size=(2, 2, 3)) for _ in range(4))
    terms = []
    for g in range(2):
        for l in range(2):
            for i in range(2):
                terms.append(_ce(_softmax(zt_l[l, i] / 0.04), _softmax(zs_g[g, i] / 0.1)))
                terms.append(_ce(_softmax(zt_g[g, i] / 0.04), _softmax(zs_l[l, i] / 0.1)))
    got = loss_qsacl(_t(zs_g), _t(zs_l), _t(zt_g), _t(zt_l), identity_heads())
    assert float(got) == pytest.approx(np.mean(terms), abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_qsacl_query_relabeling_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    zs = [torch.randn(2, 4, 3, generator=g, dtype=D) for _ in range(4)]
    perm = torch.randperm(4, generator=g)
    heads = identity_heads()
    a = loss_qsacl(*zs, heads)
    b = loss_qsacl(*(z[:, perm] for z in zs), heads)
    assert float(a) == pytest.approx(float(b), abs=1e-12)


# -- ITA ---------------------------------------------------------------------

def test_ita_examples():
    table = TextTable(torch.eye(2, dtype=D), tau=1.0)
    assert float(loss_ita(_t([[1.0, 0.0]]), torch.tensor([0]), table)) == pytest.approx(
        -math.log(math.e / (math.e + 1)), abs=1e-12)
    three = TextTable.from_array(torch.eye(3, dtype=D), tau=0.5)
    assert float(loss_ita(torch.zeros(4, 3, dtype=D), torch.tensor([0, 1, 2, 0]), three)) == pytest.approx(
        math.log(3), abs=1e-12)
    sharp = TextTable(torch.eye(2, dtype=D), tau=1e-3)
    assert float(loss_ita(_t([[1.0, 0.0], [0.0, 1.0]]), torch.tensor([0, 1]), sharp)) < 1e-12


def test_ita_rejects_bad_labels_and_tau():
    table = TextTable(torch.eye(2, dtype=D))
    with pytest.raises(ValueError):
        loss_ita(torch.zeros(1, 2, dtype=D), torch.tensor([2]), table)
    with pytest.raises(ValueError):
        TextTable(torch.eye(2), tau=0.0)


def test_ita_decreases_toward_label_embedding():
    table = TextTable.random(4, 6, seed=1)
    F = torch.randn(5, 6, dtype=D)
    labels = torch.tensor([0, 1, 2, 3, 1])
    before = float(loss_ita(F, labels, table))
    F2 = F.clone()
    F2[2] += 0.5 * table.embeddings[2].to(D)
    assert float(loss_ita(F2, labels, table)) < before


def test_text_table_rows_are_unit():
    t = TextTable.random(5, 7, seed=0)
    assert torch.allclose(t.embeddings.norm(dim=1), torch.ones(5), atol=1e-6)


# -- aux + total ---------------------------------------------------------------

def test_aux_two_expert_oracle():
    counts = torch.tensor([3.0, 1.0])
    gates = torch.tensor([2.6, 1.4], dtype=D)
    stats = RoutingStats({"x": LayerRouting(counts, gates, 4, 1)})
    f, p = np.array([0.75, 0.25]), np.array([0.65, 0.35])
    assert float(moe_aux_loss(stats)) == pytest.approx(2 * float((f * p).sum()), abs=1e-12)


def test_total_loss_arithmetic():
    parts = LossParts(*(torch.tensor(v, dtype=D) for v in (0.5, 0.25, 0.25, 1.0)))
    assert float(total_loss(parts)) == pytest.approx(1.01, abs=1e-12)
    zero = LossParts(*(torch.zeros((), dtype=D) for _ in range(4)))
    assert float(total_loss(zero)) == 0.0
    bad = LossParts(torch.tensor(float("nan")), torch.tensor(0.0), torch.tensor(0.0), torch.tensor(0.0))
    with pytest.raises(NonFiniteError):
        total_loss(bad)
