"""Tests for the curvature approximations and their serialization."""

import numpy as np
import pytest

from oneshot_fl import models
from oneshot_fl.fisher import (
    DiagFisher,
    FullFisher,
    KFACFisher,
    KFACLayer,
    diag_fisher,
    fisher_matvec,
    full_fisher_two_layer,
    kfac_fisher,
    load_fisher,
    save_fisher,
)
from oneshot_fl.models import (
    LOSS_SOFTMAX,
    LOSS_SQUARED,
    TwoLayerReLU,
    init_mlp,
    init_two_layer,
)
from oneshot_fl.oracle import mc_fisher


def _unit_rows(rng, n, dim):
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _dense_kfac(f: KFACFisher) -> np.ndarray:
    blocks = [np.kron(layer.a, layer.b) for layer in f.layers]
    d = sum(b.shape[0] for b in blocks)
    out = np.zeros((d, d))
    offset = 0
    for b in blocks:
        k = b.shape[0]
        out[offset : offset + k, offset : offset + k] = b
        offset += k
    return out


class TestFullFisher:
    def test_single_unit_hand_instance(self):
        # m=1, p=1, a=1, w=1, x=1: phi = 1, so F = [[1]].
        model = TwoLayerReLU(weights=np.array([[1.0]]), signs=np.array([1.0]))
        f = full_fisher_two_layer(model, np.array([[1.0]]))
        assert f.matrix.shape == (1, 1)
        assert f.matrix[0, 0] == pytest.approx(1.0)

    def test_all_inactive_gives_zero(self):
        model = TwoLayerReLU(
            weights=np.array([[1.0, 0.0], [0.0, 1.0]]), signs=np.array([1.0, 1.0])
        )
        f = full_fisher_two_layer(model, np.array([[-1.0, -1.0], [-0.5, -2.0]]))
        assert np.all(f.matrix == 0.0)

    def test_equals_mean_feature_outer_product(self):
        for seed in range(8):
            rng = np.random.default_rng(seed)
            model = init_two_layer(int(rng.integers(2, 10)), 4, kappa=1.0, seed=seed)
            x = _unit_rows(rng, 12, 4)
            phi = models.feature_map(model, x)
            want = phi.T @ phi / 12
            got = full_fisher_two_layer(model, x).matrix
            assert np.max(np.abs(got - want)) <= 1e-12

    def test_symmetric_psd_trace_bounded(self):
        rng = np.random.default_rng(8)
        model = init_two_layer(6, 3, kappa=0.5, seed=9)
        x = _unit_rows(rng, 20, 3)
        f = full_fisher_two_layer(model, x).matrix
        assert np.allclose(f, f.T)
        vals = np.linalg.eigvalsh(f)
        assert vals[0] >= -1e-8 * np.trace(f)
        assert np.trace(f) <= 1.0 + 1e-12

    def test_matches_mc_oracle(self):
        model = init_two_layer(4, 3, kappa=1.0, seed=10)
        rng = np.random.default_rng(11)
        x = _unit_rows(rng, 5, 3)
        want = full_fisher_two_layer(model, x).matrix
        got = mc_fisher(model, x, LOSS_SQUARED, draws=100_000, seed=12)
        rel = np.linalg.norm(got - want) / np.linalg.norm(want)
        assert rel <= 5.0 / np.sqrt(100_000)

    def test_sampled_mode_converges_to_expected(self):
        model = init_two_layer(4, 2, kappa=1.0, seed=13)
        rng = np.random.default_rng(14)
        x = _unit_rows(rng, 6, 2)
        want = full_fisher_two_layer(model, x).matrix
        got = full_fisher_two_layer(model, x, mode="sampled", draws=40_000, seed=15).matrix
        rel = np.linalg.norm(got - want) / np.linalg.norm(want)
        assert rel <= 5.0 / np.sqrt(40_000)

    def test_dimension_cap(self):
        model = init_two_layer(1001, 2, kappa=1.0, seed=0)
        with pytest.raises(ValueError, match="m\\*dim"):
            full_fisher_two_layer(model, np.ones((1, 2)))

    def test_rejects_mlp(self):
        with pytest.raises(ValueError):
            full_fisher_two_layer(init_mlp([2, 2], seed=0), np.ones((1, 2)))


class TestDiagFisher:
    def test_two_layer_equals_full_diagonal(self):
        # Same definition, different summation order (GEMM diagonal vs
        # squared-column sum): equal to double precision, a few ulps apart.
        for seed in range(6):
            rng = np.random.default_rng(seed)
            model = init_two_layer(5, 3, kappa=1.0, seed=seed)
            x = _unit_rows(rng, 9, 3)
            full = full_fisher_two_layer(model, x).matrix
            diag = diag_fisher(model, x, LOSS_SQUARED).diag
            assert np.allclose(diag, np.diag(full), rtol=1e-12, atol=1e-16)

    def test_mlp_squared_matches_dense_diag(self):
        # Small MLP: build the exact dense curvature from per-class gradients
        # and compare diagonals.
        model = init_mlp([3, 4, 2], seed=16, head=LOSS_SQUARED)
        rng = np.random.default_rng(17)
        x = rng.standard_normal((6, 3))
        d = models.param_count(model)
        dense = np.zeros((d, d))
        for j in range(6):
            for c in range(2):
                g = -models.gradient(
                    model, x[j : j + 1], models.forward(model, x[j : j + 1]) + np.eye(2)[c][None, :], LOSS_SQUARED
                )
                dense += np.outer(g, g)
        dense /= 6
        got = diag_fisher(model, x, LOSS_SQUARED).diag
        assert np.allclose(got, np.diag(dense), atol=1e-10)

    def test_softmax_two_class_closed_form(self):
        # Single linear layer (no hidden), 2 classes: for input a and probs p,
        # E[g g^T] over the predictive has diagonal p1 p2 on each logit row
        # (variance of a Bernoulli score), scaled by a_i^2 per weight.
        w = np.array([[0.3, -0.2], [0.1, 0.4]])
        b = np.array([0.05, -0.1])
        model = models.MLP([w], [b], head=LOSS_SOFTMAX)
        a = np.array([[0.7, -0.5]])
        z = a @ w.T + b
        p = np.exp(z[0] - z[0].max())
        p /= p.sum()
        var = p[0] * p[1]  # two-class score variance per logit
        a_aug = np.array([0.7, -0.5, 1.0])
        want = np.concatenate([var * a_aug[i] ** 2 * np.ones(2) for i in range(3)])
        got = diag_fisher(model, a, LOSS_SOFTMAX).diag
        assert np.allclose(got, want, atol=1e-12)

    def test_sampled_converges_to_expected(self):
        model = init_mlp([3, 5, 4], seed=18)
        rng = np.random.default_rng(19)
        x = rng.standard_normal((8, 3))
        want = diag_fisher(model, x, LOSS_SOFTMAX).diag
        got = diag_fisher(model, x, LOSS_SOFTMAX, mode="sampled", draws=40_000, seed=20).diag
        rel = np.linalg.norm(got - want) / np.linalg.norm(want)
        assert rel <= 5.0 / np.sqrt(40_000)

    def test_nonnegative_entries(self):
        model = init_mlp([4, 6, 3], seed=21)
        rng = np.random.default_rng(22)
        x = rng.standard_normal((10, 4))
        for loss in (LOSS_SQUARED, LOSS_SOFTMAX):
            m = model if loss == LOSS_SOFTMAX else init_mlp([4, 6, 3], seed=21, head=loss)
            assert np.all(diag_fisher(m, x, loss).diag >= 0.0)

    def test_mode_validation(self):
        model = init_two_layer(2, 2, kappa=1.0, seed=0)
        with pytest.raises(ValueError):
            diag_fisher(model, np.eye(2), LOSS_SQUARED, mode="exact")
        with pytest.raises(ValueError):
            diag_fisher(model, np.eye(2), LOSS_SQUARED, mode="sampled", draws=0)


class TestKfacFisher:
    def test_single_layer_squared_is_exact(self):
        # One linear layer, one example, squared loss: A = a_aug a_aug^T,
        # B = I, and A kron B is the exact curvature of that layer.
        w = np.array([[0.5, -0.3]])
        b = np.array([0.2])
        model = models.MLP([w], [b], head=LOSS_SQUARED)
        a = np.array([[2.0, 1.0]])
        f = kfac_fisher(model, a, LOSS_SQUARED, damping=0.0)
        a_aug = np.array([2.0, 1.0, 1.0])
        assert np.allclose(f.layers[0].a, np.outer(a_aug, a_aug))
        assert np.allclose(f.layers[0].b, np.eye(1))
        dense = _dense_kfac(f)
        g = a_aug  # gradient of the single output wrt [w | b] flat coords
        assert np.allclose(dense, np.outer(g, g))

    def test_zero_inputs_zero_a_blocks(self):
        model = init_mlp([3, 4, 2], seed=23, head=LOSS_SQUARED)
        x = np.zeros((5, 3))
        f = kfac_fisher(model, x, LOSS_SQUARED, damping=0.0)
        # Bias coordinate keeps a 1 in A; the input block is zero.
        a0 = f.layers[0].a
        assert np.all(a0[:3, :3] == 0.0)
        assert a0[3, 3] == pytest.approx(1.0)

    def test_factors_psd(self):
        model = init_mlp([5, 7, 4], seed=24)
        rng = np.random.default_rng(25)
        x = rng.standard_normal((12, 5))
        for mode, draws in (("expected", 1), ("sampled", 3)):
            f = kfac_fisher(model, x, LOSS_SOFTMAX, mode=mode, draws=draws, seed=26)
            for layer in f.layers:
                for factor in (layer.a, layer.b):
                    assert np.allclose(factor, factor.T)
                    vals = np.linalg.eigvalsh(factor)
                    assert vals[0] >= -1e-8 * max(np.trace(factor), 1e-30)

    def test_damping_adds_scaled_identity(self):
        model = init_mlp([3, 4, 2], seed=27)
        rng = np.random.default_rng(28)
        x = rng.standard_normal((6, 3))
        raw = kfac_fisher(model, x, LOSS_SOFTMAX, damping=0.0)
        damped = kfac_fisher(model, x, LOSS_SOFTMAX, damping=1e-2)
        for lr, ld in zip(raw.layers, damped.layers):
            bump = 1e-2 * np.trace(lr.a) / lr.a.shape[0]
            assert np.allclose(ld.a, lr.a + bump * np.eye(lr.a.shape[0]), atol=1e-12)

    def test_rejects_two_layer(self):
        with pytest.raises(ValueError):
            kfac_fisher(init_two_layer(2, 2, kappa=1.0, seed=0), np.eye(2))

    def test_negative_damping_rejected(self):
        with pytest.raises(ValueError):
            kfac_fisher(init_mlp([2, 2], seed=0), np.eye(2), damping=-1.0)


class TestFisherMatvec:
    def test_diag_ones_is_identity(self):
        rng = np.random.default_rng(29)
        v = rng.standard_normal(7)
        assert np.allclose(fisher_matvec(DiagFisher(np.ones(7)), v), v)

    def test_full_zero_matrix(self):
        v = np.ones(4)
        assert np.all(fisher_matvec(FullFisher(np.zeros((4, 4))), v) == 0.0)

    def test_kfac_matches_dense_blocks(self):
        model = init_mlp([3, 5, 2], seed=30)
        rng = np.random.default_rng(31)
        x = rng.standard_normal((8, 3))
        f = kfac_fisher(model, x, LOSS_SOFTMAX)
        dense = _dense_kfac(f)
        for _ in range(5):
            v = rng.standard_normal(f.dim)
            got = fisher_matvec(f, v)
            assert np.linalg.norm(got - dense @ v) <= 1e-10 * max(
                1.0, np.linalg.norm(dense @ v)
            )

    def test_kfac_dim_matches_model_params(self):
        model = init_mlp([3, 5, 2], seed=32)
        f = kfac_fisher(model, np.zeros((2, 3)), LOSS_SOFTMAX)
        assert f.dim == models.param_count(model)

    def test_psd_quadratic_form_all_variants(self):
        rng = np.random.default_rng(33)
        model2 = init_two_layer(4, 3, kappa=1.0, seed=34)
        x2 = _unit_rows(rng, 6, 3)
        mlp = init_mlp([3, 4, 3], seed=35)
        xm = rng.standard_normal((6, 3))
        variants = [
            full_fisher_two_layer(model2, x2),
            diag_fisher(model2, x2, LOSS_SQUARED),
            diag_fisher(mlp, xm, LOSS_SOFTMAX),
            kfac_fisher(mlp, xm, LOSS_SOFTMAX),
        ]
        for f in variants:
            trace = {
                FullFisher: lambda g: np.trace(g.matrix),
                DiagFisher: lambda g: g.diag.sum(),
                KFACFisher: lambda g: sum(
                    np.trace(l.a) * np.trace(l.b) for l in g.layers
                ),
            }[type(f)](f)
            for _ in range(100):
                v = rng.standard_normal(f.dim)
                q = v @ fisher_matvec(f, v)
                assert q >= -1e-8 * (v @ v) * max(trace, 1e-30)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            fisher_matvec(DiagFisher(np.ones(3)), np.ones(4))


class TestFisherSerialization:
    def test_full_round_trip(self, tmp_path):
        rng = np.random.default_rng(36)
        a = rng.standard_normal((5, 5))
        f = FullFisher(a @ a.T)
        p = str(tmp_path / "f.bin")
        save_fisher(f, p)
        back = load_fisher(p)
        assert isinstance(back, FullFisher)
        assert np.array_equal(back.matrix, f.matrix)

    def test_diag_round_trip(self, tmp_path):
        f = DiagFisher(np.array([0.5, 0.0, 2.5]))
        p = str(tmp_path / "f.bin")
        save_fisher(f, p)
        back = load_fisher(p)
        assert isinstance(back, DiagFisher)
        assert np.array_equal(back.diag, f.diag)

    def test_kfac_round_trip(self, tmp_path):
        rng = np.random.default_rng(37)
        layers = []
        for p_dim, q_dim in ((4, 3), (3, 2)):
            ga = rng.standard_normal((p_dim, p_dim))
            gb = rng.standard_normal((q_dim, q_dim))
            layers.append(KFACLayer(ga @ ga.T, gb @ gb.T))
        f = KFACFisher(layers)
        path = str(tmp_path / "f.bin")
        save_fisher(f, path)
        back = load_fisher(path)
        assert isinstance(back, KFACFisher)
        assert len(back.layers) == 2
        for la, lb in zip(back.layers, f.layers):
            assert np.array_equal(la.a, lb.a)
            assert np.array_equal(la.b, lb.b)

    def test_wrong_descriptor(self, tmp_path):
        from oneshot_fl.models import init_two_layer, save_checkpoint

        p = str(tmp_path / "m.ckpt")
        save_checkpoint(init_two_layer(2, 2, kappa=1.0, seed=0), p)
        with pytest.raises(ValueError, match="not a curvature payload"):
            load_fisher(p)

    def test_trailing_bytes(self, tmp_path):
        f = DiagFisher(np.ones(2))
        p = tmp_path / "f.bin"
        save_fisher(f, str(p))
        p.write_bytes(p.read_bytes() + b"\x01")
        with pytest.raises(ValueError, match="trailing"):
            load_fisher(str(p))

    def test_unknown_tag(self, tmp_path):
        import struct

        from oneshot_fl.models import _pack_text

        p = tmp_path / "f.bin"
        p.write_bytes(_pack_text("fisher") + struct.pack("<BI", 9, 1))
        with pytest.raises(ValueError, match="tag"):
            load_fisher(str(p))
