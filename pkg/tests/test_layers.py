from dataclasses import replace

import numpy as np
import pytest
import reference as ref
from hypothesis import given, settings
from hypothesis import strategies as st

from msg3d.autodiff import Parameter, Tensor, finite_diff_check, no_grad
from msg3d.graph_core import (
    KAdjacencySet,
    NormalizationMode,
    SkeletonTopology,
    add_self_loops,
    build_adjacency,
    degree_scaling,
    path_graph,
    sym_normalize,
)
from msg3d.layers import (
    MASK_INIT_RANGE,
    ConfigError,
    G3DPathway,
    Module,
    MSG3DNet,
    MultiScaleGraphConv,
    MultiScaleTemporalConv,
    NetworkConfig,
    WindowCollapse,
    count_parameters,
    disentangled_layer,
    gcn_layer,
    powered_layer,
)
from msg3d.spacetime import WindowSpec, st_k_adjacency, tile_block_adjacency

RNG = np.random.default_rng(7)


def a_tilde(topo):
    return add_self_loops(build_adjacency(topo))


def set_weights(layer, values):
    for p, v in zip(layer.weights, values):
        p.data[...] = v


def zero_masks(layer):
    for m in layer.masks:
        m.data[...] = 0


# -- single-scale graph convolution ----------------------------------------------------

def test_gcn_edgeless_identity():
    layer = gcn_layer(np.eye(4), 3, 3)
    set_weights(layer, [np.eye(3)])
    x = RNG.standard_normal((4, 3))
    assert np.array_equal(layer(Tensor(x)).data, x)


def test_gcn_p2_averages():
    layer = gcn_layer(a_tilde(path_graph(2)), 1, 1)
    set_weights(layer, [np.ones((1, 1))])
    out = layer(Tensor(np.array([[1.0], [3.0]]))).data
    assert np.allclose(out, [[2.0], [2.0]])


def test_gcn_matches_dense_composition(ntu):
    a = a_tilde(ntu)
    layer = gcn_layer(a, 3, 5, activation=True)
    x = RNG.standard_normal((25, 3))
    expected = ref.relu(ref.sym_norm_dense(a) @ x @ layer.weights[0].data)
    assert np.allclose(layer(Tensor(x)).data, expected, atol=1e-12)


def test_graph_conv_shape_errors():
    layer = gcn_layer(np.eye(4), 3, 2)
    with pytest.raises(ValueError):
        layer(Tensor(np.ones((5, 3))))
    with pytest.raises(ValueError):
        layer(Tensor(np.ones((4, 2))))
    with pytest.raises(ValueError):
        MultiScaleGraphConv(np.ones((3, 3)), 1, 1)


# -- powered multi-scale ---------------------------------------------------------------

def test_powered_k0_is_plain_linear():
    layer = powered_layer(build_adjacency(path_graph(5)), 0, 3, 2)
    x = RNG.standard_normal((5, 3))
    assert np.allclose(layer(Tensor(x)).data, x @ layer.weights[0].data)


def test_powered_k1_is_identity_plus_gcn():
    topo = path_graph(5)
    layer = powered_layer(build_adjacency(topo), 1, 3, 2)
    x = RNG.standard_normal((5, 3))
    w0, w1 = (w.data for w in layer.weights)
    expected = x @ w0 + ref.sym_norm_dense(a_tilde(topo)) @ x @ w1
    assert np.allclose(layer(Tensor(x)).data, expected)


@pytest.mark.parametrize("mode", list(NormalizationMode))
def test_powered_k4_sum_of_explicit_powers(mode):
    a = build_adjacency(path_graph(5))
    layer = powered_layer(a, 4, 2, 3, mode=mode)
    if mode is NormalizationMode.SYM_SELF_LOOP:
        hat = ref.sym_norm_dense(a + np.eye(5))
    elif mode is NormalizationMode.RANDOM_WALK:
        hat = a / a.sum(axis=1, keepdims=True)
    else:
        hat = np.eye(5) - ref.sym_norm_dense(a)
    x = RNG.standard_normal((5, 2))
    expected = sum(np.linalg.matrix_power(hat, k) @ x @ layer.weights[k].data for k in range(5))
    assert np.allclose(layer(Tensor(x)).data, expected)


# -- disentangled multi-scale -------------------------------------------------------------

def test_disentangled_k1_zero_masks(ntu):
    layer = disentangled_layer(KAdjacencySet.build(ntu, 1), 3, 4)
    zero_masks(layer)
    x = RNG.standard_normal((25, 3))
    w0, w1 = (w.data for w in layer.weights)
    expected = x @ w0 + ref.sym_norm_dense(a_tilde(ntu)) @ x @ w1
    assert np.allclose(layer(Tensor(x)).data, expected)


def test_disentangled_with_masks_matches_dense(ntu):
    ks = KAdjacencySet.build(ntu, 4)
    layer = disentangled_layer(ks, 3, 4)
    for m in layer.masks:
        m.data[...] = RNG.standard_normal(m.shape) * 0.1
    x = RNG.standard_normal((2, 25, 3))
    ops = [ref.masked_operator(ks.raw[k], layer.masks[k].data) for k in range(5)]
    expected = ref.graph_conv(x, ops, [w.data for w in layer.weights])
    assert np.allclose(layer(Tensor(x)).data, expected)


def test_mask_init_and_counts(ntu):
    layer = disentangled_layer(KAdjacencySet.build(ntu, 12), 3, 96)
    assert len(layer.weights) == len(layer.masks) == 13
    for m in layer.masks:
        assert m.shape == (25, 25)
        assert np.abs(m.data).max() <= MASK_INIT_RANGE
    assert count_parameters(layer) == 13 * 3 * 96 + 13 * 625 == 3744 + 8125


def test_one_hot_support(ntu):
    ks = KAdjacencySet.build(ntu, 12)
    layer = disentangled_layer(ks, 1, 1, masks=False)
    dist = ntu.distances
    for v in (0, 7, 19):
        x = np.zeros((25, 1))
        x[v] = 1.0
        for k in range(13):
            single = MultiScaleGraphConv(ks.normalized[k:k + 1], 1, 1)
            set_weights(single, [np.ones((1, 1))])
            support = np.flatnonzero(single(Tensor(x)).data[:, 0])
            assert set(support) == set(np.flatnonzero((dist[v] == k) | (np.arange(25) == v)))
    assert layer.num_scales == 13


def test_mask_perturbation_is_first_order(ntu):
    ks = KAdjacencySet.build(ntu, 3)
    layer = disentangled_layer(ks, 3, 4)
    x = Tensor(RNG.standard_normal((25, 3)))
    zero_masks(layer)
    base = layer(x).data
    noise = [RNG.uniform(-1, 1, (25, 25)) for _ in range(4)]
    diffs = []
    for eps in (1e-3, 1e-4, 1e-5):
        for m, n in zip(layer.masks, noise):
            m.data[...] = eps * n
        diffs.append(np.abs(layer(x).data - base).max())
    assert diffs[0] > 0
    assert diffs[0] / diffs[1] == pytest.approx(10, rel=1e-6)
    assert diffs[1] / diffs[2] == pytest.approx(10, rel=1e-4)


def test_reduction_k1_zero_theta0_bit_exact(ntu):
    ks = KAdjacencySet.build(ntu, 1)
    ms = disentangled_layer(ks, 6, 5)
    zero_masks(ms)
    ms.weights[0].data[...] = 0
    gcn = gcn_layer(a_tilde(ntu), 6, 5)
    gcn.weights[0].data[...] = ms.weights[1].data
    x = Tensor(RNG.standard_normal((4, 25, 6)))
    assert np.array_equal(ms(x).data, gcn(x).data)


def test_permutation_equivariance(ntu):
    perm = RNG.permutation(25)
    inv = np.argsort(perm)
    edges = tuple((int(inv[i]), int(inv[j])) for i, j in ntu.edges)
    relabeled = SkeletonTopology(25, edges, int(inv[ntu.center_joint]))
    ks, ks_p = KAdjacencySet.build(ntu, 4), KAdjacencySet.build(relabeled, 4)
    layer, layer_p = disentangled_layer(ks, 3, 4), disentangled_layer(ks_p, 3, 4)
    for w, wp in zip(layer.weights, layer_p.weights):
        wp.data[...] = w.data
    for m, mp in zip(layer.masks, layer_p.masks):
        m.data[...] = RNG.standard_normal((25, 25))
        mp.data[...] = m.data[np.ix_(perm, perm)]
    x = RNG.standard_normal((2, 25, 3))
    out = layer(Tensor(x)).data
    out_p = layer_p(Tensor(x[:, perm])).data
    assert np.allclose(out_p, out[:, perm])


# -- unified spatial-temporal ---------------------------------------------------------

def g3d_single(topo, tau, cin, cout):
    st_ = tile_block_adjacency(a_tilde(topo), tau)
    return gcn_layer(st_.raw, cin, cout)


def test_g3d_tau1_equals_gcn_per_frame(ntu):
    g3d = g3d_single(ntu, 1, 3, 4)
    gcn = gcn_layer(a_tilde(ntu), 3, 4)
    gcn.weights[0].data[...] = g3d.weights[0].data
    x = Tensor(RNG.standard_normal((2, 6, 25, 3)))
    wins = g3d.forward(Tensor(ref.windows(x.data, 1, 1, 1)))
    assert np.array_equal(wins.data, gcn(x).data)


def test_g3d_p2_tau2_complete_graph_mean():
    layer = g3d_single(path_graph(2), 1, 2, 2)
    layer = gcn_layer(np.ones((4, 4)), 2, 3)
    x = RNG.standard_normal((4, 2))
    out = layer(Tensor(x)).data
    expected = np.tile(x.mean(axis=0) @ layer.weights[0].data, (4, 1))
    assert np.allclose(out, expected)


def test_g3d_ntu_tau3_dense_oracle(ntu):
    layer = g3d_single(ntu, 3, 3, 4)
    x = RNG.standard_normal((2, 5, 75, 3))
    raw = np.tile(a_tilde(ntu), (3, 3))
    expected = ref.graph_conv(x, [ref.sym_norm_dense(raw)], [layer.weights[0].data])
    assert np.allclose(layer(Tensor(x)).data, expected)


def test_ms_g3d_k0_plain_linear(ntu):
    st_ = st_k_adjacency(tile_block_adjacency(a_tilde(ntu), 3), 0)
    layer = disentangled_layer(KAdjacencySet.from_self_looped(st_.raw, 0), 3, 4)
    zero_masks(layer)
    x = RNG.standard_normal((75, 3))
    assert np.allclose(layer(Tensor(x)).data, x @ layer.weights[0].data)


def pathway_config(**kw):
    base = dict(num_classes=4, channels=(8,), k_spatial=3, k_g3d=3, pathways=((1, 1),),
                expand_at_collapse=False, tcn_dilations=(1, 2))
    base.update(kw)
    return NetworkConfig(**base)


def test_ms_g3d_tau1_equals_ms_gcn_bit_exact(ntu):
    cfg = pathway_config()
    path = G3DPathway(a_tilde(ntu), WindowSpec(1), 3, 6, 6, cfg, rng=1)
    ms = disentangled_layer(KAdjacencySet.build(ntu, 3), 3, 6, rng=2)
    for a, b in zip(ms.weights, path.gconv.weights):
        a.data[...] = b.data
    for a, b in zip(ms.masks, path.gconv.masks):
        a.data[...] = b.data
    x = Tensor(RNG.standard_normal((2, 7, 25, 3)))
    assert np.array_equal(path.gconv(path.windows(x)).data, ms(x).data)


def test_ms_g3d_tau5_supports_disjoint(ntu):
    st5 = st_k_adjacency(tile_block_adjacency(a_tilde(ntu), 5), 5)
    supports = []
    probe = np.zeros((125, 1))
    probe[25 * 2 + 4] = 1.0
    for k in range(1, 6):
        layer = MultiScaleGraphConv(st5.k_normalized[k:k + 1], 1, 1)
        set_weights(layer, [np.ones((1, 1))])
        s = set(np.flatnonzero(layer(Tensor(probe)).data[:, 0])) - {54}
        supports.append(s)
    for i in range(5):
        for j in range(i + 1, 5):
            assert not supports[i] & supports[j]


# -- collapse -----------------------------------------------------------------------------

def test_collapse_tau1_identity():
    col = WindowCollapse(1, 4, 3, 3)
    col.weight.data[...] = np.eye(3)
    y = RNG.standard_normal((2, 4, 3))
    assert np.array_equal(col(Tensor(y)).data, y)


def test_collapse_tau2_average():
    col = WindowCollapse(2, 3, 2, 2)
    col.weight.data[...] = np.vstack([np.eye(2), np.eye(2)]) / 2
    y = RNG.standard_normal((6, 2))
    assert np.allclose(col(Tensor(y)).data, (y[:3] + y[3:]) / 2)


def test_collapse_random_map_oracle():
    col = WindowCollapse(3, 5, 4, 6)
    y = RNG.standard_normal((2, 3, 15, 4))
    expected = ref.collapse(y, 3, 5, col.weight.data)
    assert np.allclose(col(Tensor(y)).data, expected)
    with pytest.raises(ValueError):
        col(Tensor(np.ones((14, 4))))


# -- temporal ---------------------------------------------------------------------------------

def test_tcn_identity_through_residual():
    tcn = MultiScaleTemporalConv(4, 4, 1, dilations=(1,)).eval()
    for b in tcn.branches:
        b.bottleneck.data[...] = 0
    x = np.abs(RNG.standard_normal((2, 9, 3, 4)))
    out = tcn(Tensor(x)).data
    assert np.allclose(out, x, rtol=1e-5)
    assert tcn.residual is None


def test_tcn_stride_ceiling():
    tcn = MultiScaleTemporalConv(2, 4, 2)
    with no_grad():
        assert tcn(Tensor(RNG.standard_normal((1, 300, 2, 2)))).shape == (1, 150, 2, 4)
        assert tcn(Tensor(RNG.standard_normal((1, 7, 2, 2)))).shape == (1, 4, 2, 4)
    assert tcn.residual is not None


def test_tcn_branch_receptive_fields():
    tcn = MultiScaleTemporalConv(1, 4, 1).eval()
    for b in tcn.branches:
        b.bottleneck.data[...] = 1.0
        b.conv.data[...] = 1.0
    x = np.zeros((1, 31, 1, 1))
    x[0, 15] = 1.0
    fields = []
    for b in tcn.branches:
        nz = np.flatnonzero(b(Tensor(x)).data[0, :, 0, 0])
        fields.append(int(nz[-1] - nz[0] + 1))
    assert fields == [3, 5, 7, 9]
    assert [b.receptive_field for b in tcn.branches] == [3, 5, 7, 9]


def test_tcn_branch_split_validation():
    with pytest.raises(ValueError):
        MultiScaleTemporalConv(4, 6, dilations=(1, 2, 3, 4))


# -- blocks and network -------------------------------------------------------------------

def tiny_config(**kw):
    base = dict(num_classes=3, channels=(4, 8), k_spatial=2, k_g3d=1, pathways=((3, 1),),
                expand_at_collapse=False, tcn_dilations=(1, 2), topology="path5")
    base.update(kw)
    return NetworkConfig(**base)


def test_zero_g3d_reduces_block_to_factorized():
    net = MSG3DNet(tiny_config(), path_graph(5), rng=0)
    block = net.blocks[0]
    g3d, fact = block.pathways
    for w in g3d.gconv.weights:
        w.data[...] = 0
    x = Tensor(RNG.standard_normal((2, 8, 5, 3)))
    assert np.allclose(block(x).data, fact(x).data)


def test_full_forward_shapes_and_pool_width():
    net = MSG3DNet(NetworkConfig(num_classes=60), rng=0, dtype=np.float32).eval()
    assert net.config.strides() == (1, 2, 2)
    assert net.feature_width == 384
    with no_grad():
        feats = net.features(RNG.standard_normal((1, 300, 25, 3)).astype(np.float32))
    assert feats.shape == (1, 384)


@settings(max_examples=6, deadline=None)
@given(t=st.sampled_from([4, 8, 12, 16]), b=st.integers(1, 3))
def test_output_shape_contract(t, b):
    net = MSG3DNet(tiny_config(channels=(4, 8, 8)), path_graph(5), rng=0)
    with no_grad():
        assert net(RNG.standard_normal((b, t, 5, 3))).shape == (b, 3)


def test_single_sequence_forward():
    net = MSG3DNet(tiny_config(), path_graph(5), rng=0)
    with no_grad():
        assert net(RNG.standard_normal((8, 5, 3))).shape == (1, 3)
    with pytest.raises(ValueError):
        net(RNG.standard_normal((1, 8, 4, 3)))


def oracle_forward(net, x):
    """Straight-line numpy composition of the tiny network in training mode."""
    bn = lambda h, m: ref.batch_norm_train(h, m.gamma.data, m.beta.data)  # noqa: E731

    def gconv(h, layer):
        ops = [layer.bases[s] + (layer.mask_scales[s] * layer.masks[s].data if layer.masks else 0)
               for s in range(layer.num_scales)]
        return ref.graph_conv(h, ops, [w.data for w in layer.weights])

    def tcn(h, m):
        outs = []
        for b in m.branches:
            z = ref.relu(bn(ref.temporal_conv(h, b.bottleneck.data), b.bn))
            outs.append(ref.temporal_conv(z, b.conv.data, m.stride, b.dilation))
        res = h if m.residual is None else ref.temporal_conv(h, m.residual.data, m.stride)
        return ref.relu(bn(np.concatenate(outs, axis=-1) + res, m.bn))

    h = x
    for block in net.blocks:
        total = 0
        for p in block.pathways:
            if isinstance(p, G3DPathway):
                w = ref.windows(h, p.spec.tau, p.spec.dilation, p.spec.stride)
                z = ref.relu(bn(gconv(w, p.gconv), p.gconv_bn))
                total = total + ref.relu(bn(ref.collapse(z, p.spec.tau, p.num_joints, p.collapse.weight.data), p.bn))
            else:
                z = ref.relu(bn(gconv(h, p.gconv), p.bn))
                total = total + tcn(tcn(z, p.tcn1), p.tcn2)
        h = total
    return h.mean(axis=(1, 2)) @ net.fc_weight.data + net.fc_bias.data


def test_full_forward_matches_composition_oracle():
    net = MSG3DNet(tiny_config(), path_graph(5), rng=3)
    for p in net.parameters():
        if p.name.endswith("gamma"):
            p.data[...] = RNG.uniform(0.5, 1.5, p.shape)
        elif p.name.endswith("beta"):
            p.data[...] = RNG.standard_normal(p.shape) * 0.1
        elif ".masks." in p.name:
            p.data[...] = RNG.standard_normal(p.shape) * 0.1
    x = RNG.standard_normal((3, 8, 5, 3))
    assert np.allclose(net(Tensor(x)).data, oracle_forward(net, x), atol=1e-10)


def test_count_parameters_trivial():
    class Lin(Module):
        def __init__(self):
            self.w = Parameter(np.ones((1, 1)))

    assert count_parameters(Lin()) == 1


def test_full_configuration_parameter_budget():
    n = count_parameters(MSG3DNet(NetworkConfig(num_classes=60), rng=0, dtype=np.float32))
    assert abs(n - 3.2e6) <= 0.25 * 3.2e6


def test_build_time_validation():
    with pytest.raises(ConfigError):
        MSG3DNet(tiny_config(pathways=((4, 1),)), path_graph(5))
    with pytest.raises(ConfigError):
        MSG3DNet(tiny_config(pathways=(), factorized=False), path_graph(5))
    with pytest.raises(ConfigError):
        MSG3DNet(tiny_config(channels=(5,)), path_graph(5))


def test_registry_names_unique_and_state_roundtrip():
    net = MSG3DNet(tiny_config(), path_graph(5), rng=0)
    names = [n for n, _ in net.named_parameters()]
    assert len(names) == len(set(names))
    state = net.state_dict()
    other = MSG3DNet(tiny_config(), path_graph(5), rng=99)
    other.load_state_dict(state)
    x = RNG.standard_normal((2, 8, 5, 3))
    net.eval(), other.eval()
    with no_grad():
        assert np.array_equal(net(x).data, other(x).data)
    with pytest.raises(KeyError):
        other.load_state_dict({k: v for k, v in state.items() if "fc" not in k})


def test_duplicate_parameter_rejected():
    class Shared(Module):
        def __init__(self):
            self.a = Parameter(np.ones(2))
            self.b = self.a

    with pytest.raises(ValueError, match="twice"):
        Shared().named_parameters()


def test_powered_aggregation_builds(ntu):
    cfg = replace(NetworkConfig.toy(), aggregation="powered", masks=False, channels=(8,), k_spatial=4)
    net = MSG3DNet(cfg, rng=0)
    with no_grad():
        assert net(RNG.standard_normal((1, 4, 25, 3))).shape == (1, 4)


# -- config file ----------------------------------------------------------------------------

def test_config_roundtrip_exact(tmp_path):
    for cfg in (NetworkConfig(), NetworkConfig.toy(), tiny_config(pathways=(), masks=False)):
        text = cfg.to_text()
        again = NetworkConfig.from_text(text)
        assert again == cfg and again.to_text() == text
    p = tmp_path / "net.cfg"
    NetworkConfig.toy().save(p)
    assert NetworkConfig.from_file(p) == NetworkConfig.toy()


@pytest.mark.parametrize("text, msg", [
    ("blocks = 2\nchannels = 8\n", "blocks"),
    ("depth = 3\n", "unknown key"),
    ("masks = maybe\n", "line 1"),
    ("channels\n", "key = value"),
    ("k_g3d = 1\nk_g3d = 2\n", "duplicate"),
    ("pathways = 4:1\n", "odd"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        NetworkConfig.from_text(text)


# -- gradients ---------------------------------------------------------------------------

def weighted(y, seed=0):
    return (y * Tensor(np.random.default_rng(seed).standard_normal(y.shape))).sum()


def params_pass(module, f, probes=12):
    for name, p in module.named_parameters():
        rep = finite_diff_check(lambda _: f(), p, max_probes=probes, seed=len(name))
        assert rep.passed, f"{name}: {rep}"


def test_gradients_masked_graph_conv():
    topo = path_graph(5)
    layer = disentangled_layer(KAdjacencySet.build(topo, 3), 3, 4, activation=True)
    for m in layer.masks:
        m.data[...] = RNG.standard_normal(m.shape) * 0.1
    x = RNG.standard_normal((2, 5, 3))
    rep = finite_diff_check(lambda t: weighted(layer(t)), x)
    assert rep.passed, str(rep)
    params_pass(layer, lambda: weighted(layer(Tensor(x))))
