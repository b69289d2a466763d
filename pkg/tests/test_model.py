import numpy as np
import pytest

from gsnet import tensor as T
from gsnet.blocks import zero_
from gsnet.checkpoint import dumps, loads
from gsnet.errors import ConfigError, DimensionError
from gsnet.model import EncoderStage, ModelConfig, build_model
from gsnet.nn import make_rng, to_channels_first
from gsnet.tensor import Tensor, backward, no_grad

from test_blocks import conv

SMALL = dict(image_size=16, embed_dim=8, window_size=2, num_heads=(2, 4), dense_layers=(1, 1), growth_rate=4,
             psnl_patch=2, iawca_reduction=2)


@pytest.fixture(scope="module")
def desk():
    return build_model(ModelConfig(), 0)


# ---------------------------------------------------------------- parameter count oracle


def n_conv(cin, cout, k, bias=True):
    return cout * cin * k * k + (cout if bias else 0)


def n_linear(din, dout, bias=True):
    return din * dout + (dout if bias else 0)


def n_wattn(D, heads, M):
    # qkv weight, query and value biases, relative bias table, output projection
    return n_linear(D, 3 * D, False) + 2 * D + (2 * M - 1) ** 2 * heads + n_linear(D, D)


def n_swin_block(D, heads, M):
    return 2 * 2 * D + n_wattn(D, heads, M) + n_linear(D, 4 * D) + n_linear(4 * D, D)


def n_dense(cin, L, k):
    return sum(n_conv(cin + i * k, 4 * k, 1) + n_conv(4 * k, k, 3) for i in range(L))


def n_iawca(C, r):
    return C + 2 * C * (C // r)


def param_count(cfg: ModelConfig) -> int:
    total = n_conv(1, cfg.embed_dim, cfg.patch_size)
    cin = cfg.embed_dim
    for s in range(cfg.num_stages):
        D, L, k = cfg.stage_dim(s), cfg.dense_layers[s], cfg.growth_rate
        total += 2 * 4 * cin + n_linear(4 * cin, 2 * cin, False)  # patch merging
        total += cfg.stage_depths[s] * n_swin_block(D, cfg.num_heads[s], cfg.window_size)
        dense_out = cin + L * k
        total += n_dense(cin, L, k) + n_conv(dense_out, dense_out, 3)
        total += n_conv(D, D, 1) + n_conv(dense_out, D, 1)
        total += n_dense(2 * D, L, k) + n_conv(2 * D + L * k, D, 1)
        if cfg.iawca:
            total += n_iawca(D, cfg.iawca_reduction)
        cin = D
    D = cfg.out_dim
    M, h = cfg.window_size, cfg.num_heads[-1]
    if cfg.guided:
        total += n_linear(D, D) + n_linear(D, 2 * D, False) + D + (2 * M - 1) ** 2 * h + n_linear(D, D)
    else:
        total += n_wattn(D, h, M)
    if cfg.triple:
        if cfg.iawca:
            total += n_iawca(D, cfg.iawca_reduction)
        total += n_conv(D, D // 2, 1) + n_conv(D, D // 2, 1, False) + n_conv(D, D // 2, 1) + n_conv(D // 2, D, 1)
        total += 2 * n_conv(D, D, 3)
    return total + 2 * cfg.head_dim + n_linear(cfg.head_dim, cfg.num_classes)


class TestBuild:
    def test_determinism(self):
        a = build_model(ModelConfig(**SMALL), 7).state_dict()
        b = build_model(ModelConfig(**SMALL), 7).state_dict()
        assert list(a) == list(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_different_seeds_differ(self):
        a = build_model(ModelConfig(**SMALL), 1).state_dict()
        b = build_model(ModelConfig(**SMALL), 2).state_dict()
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError, match="num_classes"):
            build_model(ModelConfig(num_classes=1), 0)

    @pytest.mark.parametrize("bad,needle", [(dict(window_size=3), "window_size"), (dict(num_heads=(5, 6)), "num_heads"),
                                            (dict(stage_depths=(2,)), "stage_depths"), (dict(image_size=30), "divisible")])
    def test_invalid_configs_name_constraint(self, bad, needle):
        with pytest.raises(ConfigError, match=needle):
            build_model(ModelConfig(**bad), 0)

    def test_desk_param_count(self, desk):
        assert desk.num_parameters() == param_count(ModelConfig())

    @pytest.mark.parametrize("flags", [dict(triple=False), dict(guided=False), dict(iawca=False)])
    def test_ablation_param_counts(self, flags):
        cfg = ModelConfig(**SMALL, **flags)
        assert build_model(cfg, 0).num_parameters() == param_count(cfg)

    def test_parameters_registered_once(self, desk):
        ids = [id(p) for p in desk.parameters()]
        assert len(ids) == len(set(ids))

    def test_config_dict_round_trip(self):
        cfg = ModelConfig(**SMALL, guided=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


class TestEncoder:
    def test_stage_shapes(self, desk, rng):
        with no_grad():
            fe, fs = desk.encode(Tensor(rng.uniform(size=(2, 1, 32, 32))))
        assert fe.shape == (2, 96, 4, 4) and fs.shape == (2, 4, 4, 96)

    def test_wrong_input_shape(self, desk):
        with pytest.raises(DimensionError):
            desk(Tensor(np.zeros((1, 1, 16, 16))))

    def test_zeroed_branch_oracle(self, rng):
        cfg = ModelConfig(**SMALL)
        stage = EncoderStage(8, 16, cfg, 0, make_rng(0))
        for m in (stage.dense, stage.down, stage.align_dense, stage.merge, stage.iawca.w2):
            zero_(m)
        x = rng.normal(size=(1, 8, 8, 8))
        fused, swin = stage(Tensor(x))
        swin_cf = to_channels_first(swin).data
        aligned = conv(swin_cf, stage.align_swin)
        stacked = np.concatenate([aligned, np.zeros((1, 16 + 4, 4, 4))], axis=1)
        want = 0.5 * conv(stacked, stage.transition)
        np.testing.assert_allclose(fused.data, want, rtol=0, atol=1e-12)

    def test_no_dead_parameters(self, rng):
        m = build_model(ModelConfig(**SMALL), 3)
        backward(T.cross_entropy(m(Tensor(rng.uniform(-1, 1, size=(3, 1, 16, 16)))), [0, 1, 3]))
        dead = [k for k, p in m.named_parameters() if not np.any(p.grad)]
        assert dead == []


class TestTripleMerge:
    def test_unit_stream2_passes_stream1(self, rng):
        m = build_model(ModelConfig(**SMALL), 0)
        m.stream2 = lambda fe: Tensor(np.ones(fe.shape))
        g, fe = Tensor(rng.normal(size=(1, 32, 2, 2))), Tensor(rng.normal(size=(1, 32, 2, 2)))
        out = m.triple_stream_merge(g, fe)
        assert out.shape == (1, 64, 2, 2)
        assert np.array_equal(out.data[:, :32], g.data)

    def test_composition_oracle(self, rng):
        m = build_model(ModelConfig(**SMALL), 0)
        g, fe = rng.normal(size=(1, 32, 2, 2)), rng.normal(size=(1, 32, 2, 2))
        s2 = m.stream2_psnl(m.stream2_iawca(Tensor(fe))).data
        r = m.stream3.conv1
        s3 = fe + conv(np.maximum(conv(fe, r), 0), m.stream3.conv2)
        want = np.concatenate([g * s2, s3], axis=1)
        np.testing.assert_allclose(m.triple_stream_merge(Tensor(g), Tensor(fe)).data, want, rtol=0, atol=1e-12)

    def test_shape_mismatch(self, rng):
        m = build_model(ModelConfig(**SMALL), 0)
        with pytest.raises(DimensionError):
            m.triple_stream_merge(Tensor(np.ones((1, 32, 2, 2))), Tensor(np.ones((1, 32, 4, 4))))


class TestForward:
    @pytest.mark.parametrize("B", [1, 3])
    def test_logit_shape(self, desk, rng, B):
        with no_grad():
            assert desk(Tensor(rng.uniform(size=(B, 1, 32, 32)))).shape == (B, 4)

    def test_batch_independence(self, desk, rng):
        x = rng.uniform(size=(3, 1, 32, 32))
        x[2] = x[0]
        with no_grad():
            full = desk(Tensor(x)).data
            single = np.concatenate([desk(Tensor(x[i:i + 1])).data for i in range(3)])
        np.testing.assert_allclose(full, single, rtol=0, atol=1e-10)
        np.testing.assert_allclose(full[0], full[2], rtol=0, atol=1e-12)

    def test_classifier_permutation(self, rng):
        m = build_model(ModelConfig(**SMALL), 0)
        x = Tensor(rng.uniform(size=(2, 1, 16, 16)))
        before = m(x).data
        perm = np.array([2, 0, 3, 1])
        m.head.weight.data[...] = m.head.weight.data[:, perm]
        m.head.bias.data[...] = rng.normal(size=4)[perm] * 0  # biases stay zero
        np.testing.assert_allclose(m(x).data, before[:, perm], rtol=0, atol=1e-12)

    def test_checkpoint_round_trip_bit_exact(self, rng):
        cfg = ModelConfig(**SMALL)
        m = build_model(cfg, 4)
        x = Tensor(rng.uniform(size=(2, 1, 16, 16)))
        before = m(x).data
        fresh = build_model(cfg, 99)
        fresh.load_state_dict(loads(dumps(m.state_dict())))
        assert fresh(x).data.tobytes() == before.tobytes()

    @pytest.mark.parametrize("flags", [dict(triple=False), dict(guided=False), dict(iawca=False)])
    def test_ablation_variants_run(self, rng, flags):
        m = build_model(ModelConfig(**SMALL, **flags), 0)
        assert m(Tensor(rng.uniform(size=(2, 1, 16, 16)))).shape == (2, 4)

    def test_features(self, rng):
        m = build_model(ModelConfig(**SMALL), 0)
        f = m.features(Tensor(rng.uniform(size=(1, 1, 16, 16))))
        assert f["feat_e"].shape == f["feat_s"].shape == f["guided"].shape == (1, 32, 2, 2)
        np.testing.assert_allclose(f["attention"].data.sum(-1), 1.0, atol=1e-12)
