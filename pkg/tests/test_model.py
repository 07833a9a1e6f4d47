import numpy as np
import pytest

from graphvae import autodiff as ad
from graphvae.autodiff import Tensor
from graphvae.graph import DiscreteGraph, GraphLabel, ProbabilisticGraph, label_of
from graphvae.matching import match_batch
from graphvae.model import (DecoderConfig, EncoderConfig, GraphVAE, LossWeights, ecc_layer, elbo, gated_pool,
                            implicit_node_probabilities, kl_divergence, kl_divergence_np, load_checkpoint,
                            make_trainer, pad_graphs, reconstruction_loss, reconstruction_terms, reparameterize,
                            train_step)

from conftest import numerical_grad, random_graph, rel_error


def tiny(conditional=False, implicit=False, deterministic=False, k=3, seed=0):
    return GraphVAE(EncoderConfig((4, 4), 5, 2), DecoderConfig(k, 4, 4, (6, 5), implicit, conditional),
                    deterministic, seed)


# -- encoder -------------------------------------------------------------------------

def test_encode_shapes_and_determinism(rng):
    m = GraphVAE(seed=1)
    graphs = [random_graph(rng, n) for n in (3, 9, 1)]
    post = m.encode(graphs)
    assert post.mu.shape == (3, 40) and post.sigma.shape == (3, 40) and np.all(post.sigma > 0)
    again = m.encode([graphs[1]])
    np.testing.assert_allclose(again.mu[0], post.mu[1], rtol=0, atol=1e-12)


def test_zero_weight_encoder():
    m = GraphVAE(seed=1).zero_weights()
    post = m.encode([DiscreteGraph.from_edges([0, 1], [(0, 1, 0)], 4, 4)])
    np.testing.assert_array_equal(post.mu, 0)
    np.testing.assert_array_equal(post.sigma, 1)


def test_encoder_permutation_invariance(rng):
    m = GraphVAE(seed=3)
    for _ in range(5):
        g = random_graph(rng, 7)
        a = m.encode([g]).mu
        b = m.encode([g.permute(rng.permutation(7))]).mu
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_label_checks(rng):
    g = random_graph(rng, 3)
    with pytest.raises(ValueError):
        tiny(conditional=True).encode([g])
    with pytest.raises(ValueError):
        tiny(conditional=True).encode([g], [GraphLabel((1, 2, 0))])
    with pytest.raises(ValueError):
        tiny().encode([g], [label_of(g)])
    assert tiny(conditional=True).encode([g], [label_of(g)]).mu.shape == (1, 2)


def _ecc_inputs(graphs, c_in=3, c_out=2, seed=0):
    rng = np.random.default_rng(seed)
    F, E, deg, mask = pad_graphs(graphs)
    H = rng.standard_normal(F.shape[:2] + (c_in,))
    ws, bs, we = rng.standard_normal((c_in, c_out)), rng.standard_normal(c_out), rng.standard_normal((c_in, 4 * c_out))
    return H, E, deg, ws, bs, we


def test_ecc_without_edges_is_self_transform():
    g = DiscreteGraph.from_edges([0, 1, 2], [], 4, 4)
    H, E, deg, ws, bs, we = _ecc_inputs([g])
    out = ecc_layer(Tensor(H), E, deg, Tensor(ws), Tensor(bs), Tensor(we))
    np.testing.assert_allclose(out.data, H @ ws + bs)


@pytest.mark.parametrize("t", range(4))
def test_ecc_single_edge_uses_its_class_matrix(t):
    g = DiscreteGraph.from_edges([0, 1], [(0, 1, t)], 4, 4)
    H, E, deg, ws, bs, we = _ecc_inputs([g])
    out = ecc_layer(Tensor(H), E, deg, Tensor(ws), Tensor(bs), Tensor(we)).data
    Wt = we[:, 2 * t:2 * t + 2]
    np.testing.assert_allclose(out[0, 0], H[0, 0] @ ws + bs + H[0, 1] @ Wt)
    np.testing.assert_allclose(out[0, 1], H[0, 1] @ ws + bs + H[0, 0] @ Wt)


def test_ecc_gradient_matches_finite_differences(rng):
    graphs = [random_graph(rng, 5), random_graph(rng, 3)]
    H, E, deg, ws, bs, we = _ecc_inputs(graphs)
    weights = rng.standard_normal((2, 5, 2))

    def value(we_arr):
        return (ecc_layer(Tensor(H), E, deg, Tensor(ws), Tensor(bs), we_arr).data * weights).sum()

    t = Tensor(we, requires_grad=True)
    (ecc_layer(Tensor(H), E, deg, Tensor(ws), Tensor(bs), t) * weights).sum().backward()
    assert rel_error(t.grad, numerical_grad(lambda: value(Tensor(we)), we)) < 1e-4


def _pool(H, mask, seed=0):
    rng = np.random.default_rng(seed)
    c = H.shape[2]
    args = [Tensor(rng.standard_normal((c, 6))), Tensor(rng.standard_normal(6)),
            Tensor(rng.standard_normal((c, 6))), Tensor(rng.standard_normal(6))]
    return gated_pool(Tensor(H), mask, *args).data


def test_gated_pool_properties(rng):
    H = rng.standard_normal((1, 5, 3))
    mask = np.ones((1, 5))
    base = _pool(H, mask)
    np.testing.assert_allclose(_pool(H[:, rng.permutation(5)], mask), base, atol=1e-12)
    np.testing.assert_allclose(_pool(np.concatenate([H, H], axis=1), np.ones((1, 10))), 2 * base, atol=1e-12)
    single = _pool(H[:, :1], np.ones((1, 1)))
    np.testing.assert_allclose(_pool(np.concatenate([H[:, :1], H[:, 1:] * 0], 1), np.array([[1, 0, 0, 0, 0.0]])),
                               single, atol=1e-12)
    with pytest.raises(ValueError):
        _pool(H, np.zeros((1, 5)))


def test_reparameterize():
    mu = Tensor(np.array([[0.5, -1.0, 2.0, 0.0]]), requires_grad=True)
    z = reparameterize(mu, Tensor(np.zeros((1, 4))), np.random.default_rng(0))
    np.testing.assert_array_equal(z.data, mu.data)
    a = reparameterize(mu, Tensor(np.ones((1, 4))), np.random.default_rng(5)).data
    b = reparameterize(mu, Tensor(np.ones((1, 4))), np.random.default_rng(5)).data
    np.testing.assert_array_equal(a, b)
    many = reparameterize(Tensor(np.tile(mu.data, (100_000, 1))), Tensor(np.ones((100_000, 4))),
                          np.random.default_rng(1)).data
    assert np.max(np.abs(many.mean(axis=0) - mu.data[0])) < 0.02


def test_reparameterize_gradients_flow():
    mu = Tensor(np.zeros((1, 3)), requires_grad=True)
    sigma = Tensor(np.ones((1, 3)), requires_grad=True)
    rng = np.random.default_rng(2)
    eps = np.random.default_rng(2).standard_normal((1, 3))
    reparameterize(mu, sigma, rng).sum().backward()
    np.testing.assert_array_equal(mu.grad, 1)
    np.testing.assert_allclose(sigma.grad, eps)


# -- decoder -------------------------------------------------------------------------

def test_decoder_outputs_are_valid_probabilistic_graphs(rng):
    for implicit in (False, True):
        m = GraphVAE(EncoderConfig(), DecoderConfig(implicit_node_prob=implicit), seed=2)
        for pg in m.decode(rng.normal(0, 3, (20, 40))):
            pg.check()
            assert pg.k == 9


def test_implicit_node_probability():
    A = np.array([[0.9, 0.1, 0.7, 0.3], [0.1, 0.2, 0.4, 0.0], [0.7, 0.4, 0.5, 0.2], [0.3, 0.0, 0.2, 0.1]])
    out = implicit_node_probabilities(Tensor(A[None])).data[0]
    assert out[0, 0] == 0.7 and out[1, 1] == 0.4 and out[3, 3] == 0.3
    np.testing.assert_array_equal(out - np.diag(np.diag(out)), A - np.diag(np.diag(A)))


def test_zero_weight_decoder():
    m = GraphVAE(seed=0).zero_weights()
    pg = m.decode(np.random.default_rng(0).standard_normal((1, 40)))[0]
    np.testing.assert_array_equal(pg.A, 0.5)
    np.testing.assert_array_equal(pg.E, 0.25)
    np.testing.assert_array_equal(pg.F, 0.25)


def test_conditional_decode_shapes():
    m = tiny(conditional=True)
    pgs = m.decode(np.zeros((2, 2)), [GraphLabel((1, 0, 1, 0)), GraphLabel((2, 0, 0, 0))])
    assert len(pgs) == 2
    with pytest.raises(ValueError):
        m.decode(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        m.decode(np.zeros((1, 3)), [GraphLabel((1, 0, 1, 0))])


# -- losses --------------------------------------------------------------------------

def test_perfect_prediction_has_zero_loss(rng):
    for n in (1, 4, 7):
        g = random_graph(rng, n)
        for k in (n, 9):
            pg = ProbabilisticGraph.from_discrete(g, k)
            X = np.eye(k)[:, :n]
            assert reconstruction_loss(g, pg, X) == 0.0


def test_uniform_ignorance_single_node():
    g = DiscreteGraph.from_edges([2], [], 4, 4)
    pg = ProbabilisticGraph(np.full((1, 1), 0.5), np.full((1, 1, 4), 0.25), np.full((1, 4), 0.25))
    w = LossWeights(lambda_a=0.7, lambda_f=1.9, lambda_e=3.0)
    assert reconstruction_loss(g, pg, np.ones((1, 1)), w) == pytest.approx(0.7 * np.log(2) + 1.9 * np.log(4), abs=1e-12)


def test_loss_by_hand_two_nodes():
    # k = 3 predicted nodes, n = 2 input nodes joined by a double bond
    g = DiscreteGraph.from_edges([0, 2], [(0, 1, 1)], 4, 4)
    A = np.array([[0.9, 0.6, 0.2], [0.6, 0.3, 0.1], [0.2, 0.1, 0.8]])
    E = np.full((3, 3, 4), 0.25)
    E[0, 2] = E[2, 0] = [0.1, 0.6, 0.2, 0.1]
    F = np.array([[0.5, 0.1, 0.3, 0.1], [0.25] * 4, [0.2, 0.1, 0.6, 0.1]])
    X = np.array([[1, 0], [0, 0], [0, 1.0]])  # input 0 -> a0, input 1 -> a2
    diag = (np.log(0.9) + np.log(0.7) + np.log(0.8)) / 3
    off = 2 * (np.log(0.4) + np.log(0.2) + np.log(0.9)) / 6
    feat = (np.log(0.5) + np.log(0.6)) / 2
    edge = (np.log(0.6) + np.log(0.6)) / 2
    expected = -(diag + off) - feat - edge
    assert reconstruction_loss(g, ProbabilisticGraph(A, E, F), X) == pytest.approx(expected, abs=1e-12)


def test_loss_invariant_to_relabeling(rng):
    k = 6
    g = random_graph(rng, 4)
    A = rng.random((k, k))
    A = (A + A.T) / 2
    E = rng.dirichlet(np.ones(4), (k, k))
    E = (E + E.transpose(1, 0, 2)) / 2
    pg = ProbabilisticGraph(A, E, rng.dirichlet(np.ones(4), k))
    X = match_batch([(g, pg)])[0]
    p = rng.permutation(4)
    assert reconstruction_loss(g.permute(p), pg, X[:, p]) == pytest.approx(reconstruction_loss(g, pg, X), abs=1e-12)


def test_loss_rejects_bad_assignment(rng):
    g = random_graph(rng, 2)
    pg = ProbabilisticGraph.from_discrete(g, 3)
    with pytest.raises(ValueError):
        reconstruction_loss(g, pg, np.array([[1, 1], [0, 0], [0, 0.0]]))


def test_kl_examples():
    assert kl_divergence_np([0, 0], [1, 1]) == 0
    assert kl_divergence_np([1], [1]) == 0.5
    assert kl_divergence_np([0], [2]) == pytest.approx(0.5 * (4 - 1 - 2 * np.log(2)), abs=1e-15)
    assert kl_divergence_np([0], [2]) == pytest.approx(0.8068528194400547, abs=1e-12)
    t = kl_divergence(Tensor(np.array([[0.0]])), Tensor(np.array([[2 * np.log(2)]]))).data[0]
    assert t == pytest.approx(0.8068528194400547, abs=1e-12)


def test_kl_nonnegative(rng):
    for _ in range(200):
        mu, sigma = rng.normal(0, 2, 5), np.exp(rng.normal(0, 1, 5))
        assert kl_divergence_np(mu, sigma) >= 0


# -- training ------------------------------------------------------------------------

def _params_with_grads(model):
    return {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in model.params.items()}


def end_to_end_gradient_error(seed: int = 0) -> float:
    """Worst relative error of backprop against central differences on a tiny model (k=3, c=2)."""
    rng = np.random.default_rng(seed)
    m = tiny(seed=seed + 4)
    graphs = [random_graph(rng, 3), random_graph(rng, 2)]
    eps = rng.standard_normal((2, 2))
    w = LossWeights()
    mu, logvar = m.encode_tensors(graphs, training=True)
    A, E, F = m.decode_tensors(mu + ad.exp(logvar * 0.5) * eps, training=True)
    # the assignment is held fixed, as in training
    Xs = match_batch([(g, ProbabilisticGraph(A.data[b], E.data[b], F.data[b])) for b, g in enumerate(graphs)])

    def objective():
        mu, logvar = m.encode_tensors(graphs, training=True)
        A, E, F = m.decode_tensors(mu + ad.exp(logvar * 0.5) * eps, training=True)
        return (reconstruction_terms(graphs, A, E, F, Xs, w) + kl_divergence(mu, logvar)).mean()

    objective().backward()
    grads = _params_with_grads(m)
    worst = 0.0
    for name, p in m.params.items():
        num = numerical_grad(lambda: objective().item(), p.data)
        err = np.abs(grads[name] - num) / np.maximum(np.abs(grads[name]) + np.abs(num), 1e-6)
        worst = max(worst, float(err.max()))
    return worst


def test_end_to_end_gradient():
    assert end_to_end_gradient_error(0) < 1e-3


def test_training_loss_decreases_on_one_graph():
    g = DiscreteGraph.from_edges([0, 0, 2, 1], [(0, 1, 0), (1, 2, 1), (1, 3, 0)], 4, 4)
    m = GraphVAE(seed=0)
    state = make_trainer(m, LossWeights(kl_weight=0.0))
    rng = np.random.default_rng(0)
    losses = [train_step(state, [g], None, rng) for _ in range(50)]
    assert sum(b >= a for a, b in zip(losses, losses[1:])) <= 5
    assert losses[-1] < losses[0]


def test_batch_of_copies_matches_single_sample_gradient(rng):
    g = random_graph(rng, 3)
    grads = []
    for copies in (1, 4):
        m = tiny(seed=9)
        total, _, _ = m.loss([g] * copies, None, LossWeights(), np.random.default_rng(0), training=True, z_noise=False)
        total.backward()
        grads.append(np.concatenate([v.ravel() for v in _params_with_grads(m).values()]))
    np.testing.assert_allclose(grads[0], grads[1], atol=1e-12)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        train_step(make_trainer(tiny()), [], None, np.random.default_rng(0))


def test_elbo_properties(rng):
    m = tiny(seed=1)
    graphs = [random_graph(rng, 3) for _ in range(4)]
    e1 = elbo(m, graphs, None, np.random.default_rng(3))
    e2 = elbo(m, graphs, None, np.random.default_rng(3))
    np.testing.assert_array_equal(e1, e2)
    post = m.encode(graphs)
    kl = np.array([kl_divergence_np(mu, s) for mu, s in zip(post.mu, post.sigma)])
    assert np.all(e1 <= -kl + 1e-12)


def test_perfect_degenerate_model_has_zero_elbo():
    g = DiscreteGraph.from_edges([0, 2], [(0, 1, 1)], 4, 4)
    m = tiny(k=2).zero_weights()
    P = m.params
    P["dec.adj.b"].data = np.array([40.0, 40.0, 40.0])          # triangle (0,0), (0,1), (1,1)
    eb = np.full((3, 4), -100.0)
    eb[:, 1] = 0.0
    P["dec.edge.b"].data = eb.ravel()
    fb = np.full((2, 4), -100.0)
    fb[0, 0] = fb[1, 2] = 0.0
    P["dec.node.b"].data = fb.ravel()
    assert elbo(m, [g], None, np.random.default_rng(0))[0] == 0.0


def test_checkpoint_round_trip(tmp_path, rng):
    m = tiny(conditional=True, implicit=True, seed=5)
    state = make_trainer(m)
    g = random_graph(rng, 3)
    train_step(state, [g, g], [label_of(g)] * 2, rng)
    path = tmp_path / "model.ckpt"
    m.save(path)
    header, tensors = load_checkpoint(path)
    assert {t["name"] for t in header["tensors"]} == set(m.state())
    m2 = GraphVAE.load(path)
    for name, arr in m.state().items():
        assert np.array_equal(arr, m2.state()[name])
    m2.save(tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
