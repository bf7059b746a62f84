import numpy as np
import pytest

from rosemap.splat.losses import (
    LossShapeError,
    edge_aware_tv,
    _edge_aware_tv_with_grad,
    loss_reconstruction,
    ssim,
    ssim_error_map_full,
    ssim_with_grad,
)
from rosemap.splat.uncertainty import (
    UncertaintyModel,
    image_features,
    kmeans_labels,
    loss_uncertainty,
    uncertainty_forward,
    _forward_cached,
    _backward_weights,
)

from reference_ssim import ssim_reference


def random_image(rng, h=32, w=32, c=3):
    base = rng.uniform(0.1, 0.9, (h, w, c))
    return np.clip(base, 0, 1)


class TestSsim:
    def test_self_similarity(self):
        img = random_image(np.random.default_rng(0))
        val, smap = ssim(img, img)
        assert abs(val - 1.0) < 1e-12
        assert np.allclose(smap, 1.0, atol=1e-12)

    def test_checkerboard_inversion_negative(self):
        yy, xx = np.mgrid[0:32, 0:32]
        board = ((yy // 4 + xx // 4) % 2).astype(float)
        val, _ = ssim(board, 1.0 - board)
        assert val < 0.0

    def test_matches_reference(self):
        rng = np.random.default_rng(77)
        a = random_image(rng)
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        val, _ = ssim(a, b)
        assert abs(val - ssim_reference(a, b)) < 1e-6

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        a, b = random_image(rng), random_image(rng)
        assert abs(ssim(a, b)[0] - ssim(b, a)[0]) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(LossShapeError):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(1)
        a = random_image(rng, 16, 16, 1)[:, :, 0]
        b = random_image(rng, 16, 16, 1)[:, :, 0]
        _, _, grad = ssim_with_grad(a, b)
        h = 1e-6
        for (y, x) in [(0, 0), (3, 7), (8, 8), (15, 15), (5, 12)]:
            b[y, x] += h
            hi, _ = ssim(a, b)
            b[y, x] -= 2 * h
            lo, _ = ssim(a, b)
            b[y, x] += h
            fd = (hi - lo) / (2 * h)
            assert abs(grad[y, x] - fd) < 1e-6 + 1e-4 * abs(fd)

    def test_full_resolution_error_map(self):
        rng = np.random.default_rng(2)
        a, b = random_image(rng), random_image(rng)
        m = ssim_error_map_full(a, b)
        assert m.shape == a.shape[:2]
        assert np.all(m >= 0.0)


class TestEdgeAwareTv:
    def test_constant_depth_is_zero(self):
        img = random_image(np.random.default_rng(0), 16, 16)
        assert edge_aware_tv(np.full((16, 16), 2.0), img) == 0.0

    def test_edge_aligned_step_much_cheaper(self):
        depth = np.ones((16, 16))
        depth[:, 8:] = 2.0
        flat_img = np.full((16, 16, 3), 0.5)
        edge_img = flat_img.copy()
        edge_img[:, 8:] = 1.0  # strong brightness edge at the depth step
        loss_flat = edge_aware_tv(depth, flat_img)
        loss_edge = edge_aware_tv(depth, edge_img)
        assert loss_edge < 0.1 * loss_flat

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            depth = rng.uniform(1, 3, (12, 12))
            img = random_image(rng, 12, 12)
            assert edge_aware_tv(depth, img) >= 0.0

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(4)
        depth = rng.uniform(1, 3, (12, 12))
        img = random_image(rng, 12, 12)
        _, grad = _edge_aware_tv_with_grad(depth, img)
        h = 1e-7
        for (y, x) in [(0, 0), (5, 5), (11, 11), (2, 9)]:
            depth[y, x] += h
            hi = edge_aware_tv(depth, img)
            depth[y, x] -= 2 * h
            lo = edge_aware_tv(depth, img)
            depth[y, x] += h
            fd = (hi - lo) / (2 * h)
            assert abs(grad[y, x] - fd) < 1e-6 + 1e-4 * abs(fd)


class TestReconstructionLoss:
    def test_perfect_render_zero_loss(self):
        img = random_image(np.random.default_rng(0))
        res = loss_reconstruction(img, img.copy(), np.full(img.shape[:2], 2.0),
                                  beta=1.0, lam1=0.2, lam2=0.05)
        assert abs(res.value) < 1e-12

    def test_reduces_to_plain_l1(self):
        rng = np.random.default_rng(1)
        img, render = random_image(rng), random_image(rng)
        res = loss_reconstruction(img, render, None, beta=1.0, lam1=0.0, lam2=0.0)
        assert abs(res.value - np.abs(img - render).mean()) < 1e-12

    def test_beta_halves_contribution(self):
        rng = np.random.default_rng(2)
        img, render = random_image(rng), random_image(rng)
        beta = np.ones(img.shape[:2])
        base = loss_reconstruction(img, render, None, beta, lam1=0.0, lam2=0.0)
        beta2 = beta.copy()
        beta2[:, 16:] = 2.0
        halved = loss_reconstruction(img, render, None, beta2, lam1=0.0, lam2=0.0)
        left = np.abs(img - render)[:, :16].sum() / img.size
        right = np.abs(img - render)[:, 16:].sum() / img.size
        assert abs(halved.value - (left + right / 2.0)) < 1e-12
        assert abs(base.value - (left + right)) < 1e-12

    def test_color_grad_matches_fd(self):
        rng = np.random.default_rng(3)
        img = random_image(rng, 16, 16)
        render = random_image(rng, 16, 16)
        depth = rng.uniform(1, 3, (16, 16))
        beta = rng.uniform(0.5, 2.0, (16, 16))
        res = loss_reconstruction(img, render, depth, beta, lam1=0.2, lam2=0.05)
        h = 1e-6
        for (y, x, c) in [(0, 0, 0), (7, 9, 1), (15, 15, 2)]:
            render[y, x, c] += h
            hi = loss_reconstruction(img, render, depth, beta, 0.2, 0.05).value
            render[y, x, c] -= 2 * h
            lo = loss_reconstruction(img, render, depth, beta, 0.2, 0.05).value
            render[y, x, c] += h
            fd = (hi - lo) / (2 * h)
            assert abs(res.d_color[y, x, c] - fd) < 1e-6 + 1e-3 * abs(fd)

    def test_depth_grad_matches_fd(self):
        rng = np.random.default_rng(6)
        img = random_image(rng, 16, 16)
        render = random_image(rng, 16, 16)
        depth = rng.uniform(1, 3, (16, 16))
        res = loss_reconstruction(img, render, depth, 1.0, lam1=0.2, lam2=0.05)
        h = 1e-7
        for (y, x) in [(0, 0), (8, 8), (15, 3)]:
            depth[y, x] += h
            hi = loss_reconstruction(img, render, depth, 1.0, 0.2, 0.05).value
            depth[y, x] -= 2 * h
            lo = loss_reconstruction(img, render, depth, 1.0, 0.2, 0.05).value
            depth[y, x] += h
            fd = (hi - lo) / (2 * h)
            assert abs(res.d_depth[y, x] - fd) < 1e-6 + 1e-3 * abs(fd)


class TestUncertainty:
    def test_zero_weight_constant_beta(self):
        model = UncertaintyModel.create(hidden=8, beta_min=0.1, seed=0)
        for name in model.WEIGHT_NAMES:
            setattr(model, name, np.zeros_like(getattr(model, name)))
        feats = np.random.default_rng(0).normal(size=(6, 6, 6))
        beta = uncertainty_forward(model, feats)
        expected = np.log(2.0) + 0.1  # softplus(0) + beta_min
        assert np.allclose(beta, expected, atol=1e-12)

    def test_beta_floor(self):
        rng = np.random.default_rng(1)
        model = UncertaintyModel.create(hidden=8, beta_min=0.25, seed=1)
        feats = rng.normal(size=(5, 5, 6)) * 10
        beta = uncertainty_forward(model, feats)
        assert np.all(beta > 0.25)

    def test_mlp_grad_matches_fd(self):
        rng = np.random.default_rng(2)
        model = UncertaintyModel.create(hidden=6, seed=2)
        feats = rng.normal(size=(4, 4, 6))
        d_beta = rng.normal(size=(4, 4))

        def total():
            return float((uncertainty_forward(model, feats) * d_beta).sum())

        _, cache = _forward_cached(model, feats)
        grads = _backward_weights(model, cache, d_beta)
        h = 1e-6
        for name in model.WEIGHT_NAMES:
            arr = getattr(model, name)
            flat_idx = [(0,) * arr.ndim, tuple(np.array(arr.shape) - 1)]
            for idx in flat_idx:
                old = arr[idx]
                arr[idx] = old + h
                hi = total()
                arr[idx] = old - h
                lo = total()
                arr[idx] = old
                fd = (hi - lo) / (2 * h)
                assert abs(grads[name][idx] - fd) < 1e-7 + 1e-4 * abs(fd)

    def test_loss_weight_grads_match_fd(self):
        rng = np.random.default_rng(3)
        model = UncertaintyModel.create(hidden=6, seed=3)
        feats = rng.normal(size=(6, 6, 6))
        err = rng.uniform(0, 0.5, (6, 6))
        labels = kmeans_labels(feats, k=3, seed=0)
        res = loss_uncertainty(model, feats, err, lam3=0.1, lam4=0.01, cluster_labels=labels)
        h = 1e-6
        for name in ("w1", "w3", "b2"):
            arr = getattr(model, name)
            idx = (0,) * arr.ndim
            old = arr[idx]
            arr[idx] = old + h
            hi = loss_uncertainty(model, feats, err, 0.1, 0.01, cluster_labels=labels).value
            arr[idx] = old - h
            lo = loss_uncertainty(model, feats, err, 0.1, 0.01, cluster_labels=labels).value
            arr[idx] = old
            fd = (hi - lo) / (2 * h)
            assert abs(res.weight_grads[name][idx] - fd) < 1e-7 + 1e-3 * abs(fd)

    def test_perfect_render_drives_beta_to_floor(self):
        # one pixel, zero error: only the log term remains, so beta -> beta_min
        model = UncertaintyModel.create(hidden=4, beta_min=0.1, seed=4)
        feats = np.ones((1, 1, 6))
        err = np.zeros((1, 1))
        labels = np.zeros((1, 1), dtype=int)
        for _ in range(3000):
            res = loss_uncertainty(model, feats, err, lam3=0.0, lam4=0.01, cluster_labels=labels)
            model.apply_gradients(res.weight_grads, lr=0.5)
        beta = uncertainty_forward(model, feats)[0, 0]
        assert beta < 0.12

    def test_one_pixel_analytic_optimum(self):
        # lam3 = 0: stationary point of err/b^2 + lam4 log b is b = sqrt(2 err / lam4)
        err_val, lam4 = 0.08, 0.01
        model = UncertaintyModel.create(hidden=4, beta_min=0.1, seed=5)
        feats = np.ones((1, 1, 6))
        err = np.full((1, 1), err_val)
        labels = np.zeros((1, 1), dtype=int)
        for _ in range(4000):
            res = loss_uncertainty(model, feats, err, lam3=0.0, lam4=lam4, cluster_labels=labels)
            model.apply_gradients(res.weight_grads, lr=0.5)
        beta = uncertainty_forward(model, feats)[0, 0]
        assert abs(beta - np.sqrt(2 * err_val / lam4)) < 1e-2

    def test_uniform_features_prefer_constant_beta(self):
        # a single cluster: the variance term vanishes iff beta is constant
        rng = np.random.default_rng(6)
        model = UncertaintyModel.create(hidden=6, seed=6)
        feats = rng.normal(size=(8, 8, 6))
        err = rng.uniform(0, 0.3, (8, 8))
        labels = np.zeros((8, 8), dtype=int)
        res = loss_uncertainty(model, feats, err, lam3=1.0, lam4=0.0, cluster_labels=labels)
        beta = uncertainty_forward(model, feats)
        assert res.var_term == pytest.approx(float(beta.var()), rel=1e-9)
        const_beta_model = UncertaintyModel.create(hidden=6, seed=7)
        for name in const_beta_model.WEIGHT_NAMES:
            setattr(const_beta_model, name, np.zeros_like(getattr(const_beta_model, name)))
        res_const = loss_uncertainty(const_beta_model, feats, err, lam3=1.0, lam4=0.0,
                                     cluster_labels=labels)
        assert res_const.var_term < 1e-20

    def test_kmeans_deterministic(self):
        rng = np.random.default_rng(8)
        feats = rng.normal(size=(10, 10, 6))
        l1 = kmeans_labels(feats, k=4, seed=3)
        l2 = kmeans_labels(feats, k=4, seed=3)
        assert np.array_equal(l1, l2)

    def test_feature_shape(self):
        img = random_image(np.random.default_rng(9), 24, 20)
        feats = image_features(img)
        assert feats.shape == (24, 20, 6)
