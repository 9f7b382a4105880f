"""Reference edge maps, the Canny detector, the edge sub-network, and the
balanced edge loss."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfpnet import autodiff as ad
from rfpnet.autodiff import Tape
from rfpnet.edges import (CannyParams, EdgeMap, canny_2d, edge_subnet_forward,
                          generate_reference_edges, init_edge_subnet, weighted_bce)
from rfpnet.gradcheck import grad_check


def square_volume(size=12, lo=4, hi=8, depth=3):
    labels = np.zeros((size, size, depth), dtype=np.uint8)
    labels[lo:hi, lo:hi, 1] = 1
    return labels


class TestReferenceEdges:
    def test_uniform_volume_has_no_edges(self):
        em = generate_reference_edges(np.zeros((8, 8, 4), dtype=np.uint8), "transition")
        assert em.n_edge == 0
        em2 = generate_reference_edges(np.full((8, 8, 4), 3, dtype=np.uint8), "transition")
        assert em2.n_edge == 0

    def test_all_background_canny_ok(self):
        em = generate_reference_edges(np.zeros((8, 8, 2), dtype=np.uint8), "canny")
        assert em.n_edge == 0

    def test_transition_square_exact_set(self):
        labels = square_volume()
        em = generate_reference_edges(labels, "transition")
        # expected: perimeter ring of the 4x4 square plus the adjacent
        # background ring, both confined to slice 1; enumerate the rule
        expected = np.zeros_like(labels)
        lab = labels[:, :, 1]
        h, w = lab.shape
        for r in range(h):
            for c in range(w):
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        if dr == dc == 0:
                            continue
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and lab[rr, cc] != lab[r, c]:
                            expected[r, c, 1] = 1
        assert np.array_equal(em.data, expected)
        # interior 2x2 of the square and far background are not edges
        assert em.data[5:7, 5:7, 1].sum() == 0
        assert em.data[:, :, 0].sum() == 0 and em.data[:, :, 2].sum() == 0

    def test_transition_deterministic(self):
        labels = square_volume()
        a = generate_reference_edges(labels, "transition").data
        b = generate_reference_edges(labels, "transition").data
        assert np.array_equal(a, b)

    def test_canny_vs_transition_iou(self):
        labels = np.zeros((24, 24, 2), dtype=np.uint8)
        labels[6:18, 7:17, 0] = 1
        labels[4:12, 4:12, 1] = 2
        canny = generate_reference_edges(labels, "canny").data.astype(bool)
        trans = generate_reference_edges(labels, "transition").data.astype(bool)
        iou = (canny & trans).sum() / (canny | trans).sum()
        assert iou >= 0.5

    def test_canny_mode_validation(self):
        with pytest.raises(ValueError, match="mode"):
            generate_reference_edges(np.zeros((4, 4, 2), dtype=np.uint8), "sobel")
        with pytest.raises(ValueError):
            CannyParams(low_threshold=0.5, high_threshold=0.2)

    def test_canny_2d_detects_disk_boundary(self):
        yy, xx = np.mgrid[:32, :32]
        disk = ((yy - 16) ** 2 + (xx - 16) ** 2 <= 64).astype(np.float64)
        edges = canny_2d(disk, CannyParams())
        assert edges.any()
        rr = np.sqrt((yy[edges] - 16.0) ** 2 + (xx[edges] - 16.0) ** 2)
        assert np.all(np.abs(rr - 8.0) < 3.0)


class TestEdgeMapType:
    def test_counts_and_alpha(self):
        data = np.zeros((10, 10, 10), dtype=np.uint8)
        data.reshape(-1)[:10] = 1
        em = EdgeMap(data)
        assert em.n_edge == 10 and em.n_background == 990
        assert em.n_edge + em.n_background == data.size
        assert em.alpha == 0.99

    def test_rejects_nonbinary(self):
        with pytest.raises(ValueError, match="binary"):
            EdgeMap(np.full((2, 2, 2), 7, dtype=np.uint8))


class TestEdgeSubnet:
    def _inputs(self, rng, c2=3, c5=5, base=(16, 16, 16)):
        full = base
        e2_sp = tuple(s // 2 for s in full)
        e5_sp = tuple(s // 16 for s in full)
        e2 = rng.normal(size=(1, c2) + e2_sp).astype(np.float32)
        e5 = rng.normal(size=(1, c5) + e5_sp).astype(np.float32)
        return e2, e5, full

    def test_zero_params_zero_features_constant_logits(self):
        rng = np.random.default_rng(0)
        params = init_edge_subnet(rng, 3, 5)
        for unit in (params.adapt_unit, params.enc_unit1, params.enc_unit2):
            unit.kernel[:] = 0
            unit.bn_gamma[:] = 0
        params.head_kernel = np.zeros_like(params.head_kernel)
        params.head_bias = params.head_bias + 0.7
        e2, e5, full = self._inputs(rng)
        t = Tape()
        f_edge, logits = edge_subnet_forward(t.leaf(e2 * 0), t.leaf(e5 * 0), params, full)
        assert np.all(f_edge.value == 0)
        assert np.allclose(logits.value, 0.7, atol=1e-6)

    def test_shapes_and_resolution_contract(self):
        rng = np.random.default_rng(1)
        params = init_edge_subnet(rng, 3, 5)
        e2, e5, full = self._inputs(rng)
        t = Tape()
        f_edge, logits = edge_subnet_forward(t.leaf(e2), t.leaf(e5), params, full)
        assert f_edge.shape == (1, 3) + tuple(s // 2 for s in full)
        assert logits.shape == (1, 1) + full

    def test_resolution_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        params = init_edge_subnet(rng, 3, 5)
        t = Tape()
        e2 = t.leaf(rng.normal(size=(1, 3, 8, 8, 4)).astype(np.float32))
        e5 = t.leaf(rng.normal(size=(1, 5, 2, 2, 1)).astype(np.float32))
        with pytest.raises(ValueError, match="1/8"):
            edge_subnet_forward(e2, e5, params, (16, 16, 8))

    def test_zero_deep_features_probe_shallow_only(self):
        rng = np.random.default_rng(3)
        params = init_edge_subnet(rng, 3, 5)
        e2, e5, full = self._inputs(rng)
        t1 = Tape()
        fa, _ = edge_subnet_forward(t1.leaf(e2), t1.leaf(np.zeros_like(e5)), params, full,
                                    mode="eval")
        # additive merge: with zero deep features the adapted branch is a
        # constant map, so shifting e2 by that constant reproduces the output
        t2 = Tape()
        adapted = t2.leaf(np.zeros_like(e5))
        from rfpnet.nn_ops import conv_unit, resize_trilinear
        const = resize_trilinear(conv_unit(adapted, params.adapt_unit, 1, 0, "eval"),
                                 fa.shape[2:])
        t3 = Tape()
        fb, _ = edge_subnet_forward(t3.leaf(e2 + const.value), t3.leaf(np.zeros_like(e5)),
                                    params, full, mode="eval")
        # same inputs to the shared trunk minus the (re-added) constant branch
        assert fa.shape == fb.shape


class TestWeightedBce:
    def test_alpha_example(self):
        data = np.zeros((10, 10, 10), dtype=np.uint8)
        data.reshape(-1)[:10] = 1
        assert EdgeMap(data).alpha == 0.99

    def test_near_perfect_predictions_tiny_loss(self):
        rng = np.random.default_rng(4)
        mask = (rng.random((6, 6, 3)) < 0.3).astype(np.uint8)
        logits = np.where(mask > 0, 40.0, -40.0).astype(np.float32)[None, None]
        t = Tape()
        loss = weighted_bce(t.leaf(logits), EdgeMap(mask))
        assert float(loss.value) < 1e-6

    def test_balanced_uniform_half_is_half_ln2(self):
        mask = np.zeros((4, 4, 2), dtype=np.uint8)
        mask.reshape(-1)[:16] = 1  # exactly half positive
        t = Tape(np.float64)
        loss = weighted_bce(t.leaf(np.zeros((1, 1, 4, 4, 2))), EdgeMap(mask))
        assert abs(float(loss.value) - 0.5 * np.log(2.0)) < 1e-9

    def test_no_positives_alpha_one_zero_loss_on_perfect_background(self):
        mask = np.zeros((4, 4, 2), dtype=np.uint8)
        em = EdgeMap(mask)
        assert em.alpha == 1.0
        t = Tape(np.float64)
        loss = weighted_bce(t.leaf(np.full((1, 1, 4, 4, 2), -3.0)), em)
        # background term carries weight (1 - alpha) = 0, positive sum is empty
        assert float(loss.value) == 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        mask = (rng.random(60) < 0.25).astype(np.uint8)
        logits = rng.normal(size=60)
        perm = rng.permutation(60)
        t1 = Tape(np.float64)
        l1 = weighted_bce(t1.leaf(logits.reshape(1, 1, 3, 4, 5)),
                          EdgeMap(mask.reshape(3, 4, 5)))
        t2 = Tape(np.float64)
        l2 = weighted_bce(t2.leaf(logits[perm].reshape(1, 1, 3, 4, 5)),
                          EdgeMap(mask[perm].reshape(3, 4, 5)))
        assert abs(float(l1.value) - float(l2.value)) < 1e-12

    @given(n_pos=st.integers(0, 40))
    @settings(max_examples=12, deadline=None)
    def test_alpha_in_unit_interval_and_majority(self, n_pos):
        mask = np.zeros(40, dtype=np.uint8)
        mask[:n_pos] = 1
        em = EdgeMap(mask.reshape(4, 5, 2))
        assert 0.0 <= em.alpha <= 1.0
        if n_pos < 20:
            assert em.alpha > 0.5

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        mask = (rng.random((3, 4, 2)) < 0.3).astype(np.uint8)
        logits = rng.normal(size=(1, 1, 3, 4, 2))
        rep = grad_check(lambda t, lv: weighted_bce(lv["logits"], EdgeMap(mask)),
                         {"logits": logits}, tol=1e-3)
        assert rep.passed, str(rep)
