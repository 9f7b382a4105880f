"""Recurrent propagation head: slicing, fusion, residual, cost model."""

import numpy as np
import pytest

from rfpnet.autodiff import Tape
from rfpnet.gridscan import (DIRECTIONS, ScanWeights, cell_update_count,
                             dag_scan_forward, layouts_for, reset_cell_update_counter)
from rfpnet.rfp_head import (CostReport, RfpHeadParams, cost_count, init_head_params,
                             lift_head_params, rfp_forward, rfp_logits_to_fullres,
                             scan_feature_stack)


def make_head(rng, c, depth, k, directions=DIRECTIONS, fusion="sum"):
    return init_head_params(rng, c, depth, k, directions, fusion)


def run_head(e5_np, head, directions, fusion="sum", neighborhood="four"):
    tape = Tape(np.float64)
    e5 = tape.leaf(e5_np)
    lifted = lift_head_params(tape, head)
    enhanced, logits = rfp_forward(e5, lifted, directions, neighborhood=neighborhood,
                                   fusion=fusion)
    return enhanced.value, logits.value


class TestHeadForward:
    def test_zero_scan_weights_residual_passthrough(self):
        rng = np.random.default_rng(0)
        c, k = 4, 3
        head = make_head(rng, c, 2, k)
        for per_dir in head.slice_weights:
            for sw in per_dir.values():
                sw.input_weight[:] = 0
                sw.hidden_weight[:] = 0
                sw.bias[:] = 0
        e5 = rng.normal(size=(1, c, 3, 4, 2))
        enhanced, _ = run_head(e5, head, DIRECTIONS)
        assert np.allclose(enhanced, e5)

    def test_depth_one_equals_direct_scan_call(self):
        rng = np.random.default_rng(1)
        c = 3
        head = make_head(rng, c, 1, 2, directions=("dr",))
        e5 = rng.normal(size=(1, c, 4, 5, 1))
        enhanced, _ = run_head(e5, head, ("dr",))
        lay = layouts_for(4, 5, "four", ("dr",))["dr"]
        sw = head.slice_weights[0]["dr"]
        f_hwc = e5[0, :, :, :, 0].transpose(1, 2, 0)
        ref = dag_scan_forward(f_hwc, lay,
                               ScanWeights(sw.input_weight.astype(np.float64),
                                           sw.hidden_weight.astype(np.float64),
                                           sw.bias.astype(np.float64)))
        assert np.allclose(enhanced[0, :, :, :, 0], (f_hwc + ref).transpose(2, 0, 1))

    def test_slice_permutation_permutes_outputs(self):
        rng = np.random.default_rng(2)
        c = 3
        head = make_head(rng, c, 2, 2)
        e5 = rng.normal(size=(1, c, 3, 3, 2))
        enh_a, _ = run_head(e5, head, DIRECTIONS)

        swapped = RfpHeadParams(slice_weights=[head.slice_weights[1], head.slice_weights[0]],
                                proj_kernel=head.proj_kernel, proj_bias=head.proj_bias)
        e5_sw = e5[:, :, :, :, ::-1].copy()
        enh_b, _ = run_head(e5_sw, swapped, DIRECTIONS)
        assert np.allclose(enh_b, enh_a[:, :, :, :, ::-1])

    def test_slice_independence_perturbation(self):
        rng = np.random.default_rng(3)
        c, depth = 3, 3
        head = make_head(rng, c, depth, 2)
        e5 = rng.normal(size=(1, c, 3, 3, depth))
        base, _ = run_head(e5, head, DIRECTIONS)
        bumped = e5.copy()
        bumped[0, :, :, :, 1] += rng.normal(size=(c, 3, 3))

        tape = Tape(np.float64)
        lifted = lift_head_params(tape, head)
        hidden_base = scan_feature_stack(tape.leaf(e5), lifted,
                                         layouts_for(3, 3, "four", DIRECTIONS), DIRECTIONS)
        tape2 = Tape(np.float64)
        lifted2 = lift_head_params(tape2, head)
        hidden_bump = scan_feature_stack(tape2.leaf(bumped), lifted2,
                                         layouts_for(3, 3, "four", DIRECTIONS), DIRECTIONS)
        diff = np.abs(hidden_base.value - hidden_bump.value).sum(axis=(0, 1, 2, 3))
        assert diff[1] > 0
        assert diff[0] == 0 and diff[2] == 0

    def test_empty_direction_set_rejected(self):
        rng = np.random.default_rng(4)
        head = make_head(rng, 2, 1, 2)
        tape = Tape()
        with pytest.raises(ValueError, match="direction"):
            rfp_forward(tape.leaf(np.zeros((1, 2, 2, 2, 1))), lift_head_params(tape, head), ())

    def test_concat_fusion_with_tiled_identity_matches_sum(self):
        rng = np.random.default_rng(5)
        c, depth = 3, 2
        head = make_head(rng, c, depth, 2, fusion="concat")
        for d in range(depth):
            head.fuse_proj[d] = np.tile(np.eye(c, dtype=np.float32), (1, len(DIRECTIONS)))
        e5 = rng.normal(size=(1, c, 3, 4, depth))
        enh_concat, _ = run_head(e5, head, DIRECTIONS, fusion="concat")
        head_sum = RfpHeadParams(slice_weights=head.slice_weights,
                                 proj_kernel=head.proj_kernel, proj_bias=head.proj_bias)
        enh_sum, _ = run_head(e5, head_sum, DIRECTIONS, fusion="sum")
        assert np.allclose(enh_concat, enh_sum, atol=1e-12)

    def test_instrumented_updates_match_cost_report(self):
        rng = np.random.default_rng(6)
        c, depth, h, w = 2, 3, 4, 5
        head = make_head(rng, c, depth, 2)
        e5 = rng.normal(size=(1, c, h, w, depth))
        reset_cell_update_counter()
        run_head(e5, head, DIRECTIONS)
        predicted = cost_count(h, w, depth, "slice_wise", 4).cell_updates
        assert cell_update_count() == predicted == 4 * h * w * depth


class TestCostModel:
    def test_formula_examples(self):
        assert cost_count(10, 10, 4, "slice_wise", 4).cell_updates == 1600
        vol = cost_count(10, 10, 4, "volumetric_3d")
        assert vol.cell_updates == 3200
        assert cost_count(10, 10, 4, "slice_wise", 4).cell_updates / vol.cell_updates == 0.5

    def test_ratio_is_half_for_any_extent(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            h, w, d = rng.integers(1, 40, 3)
            sw = cost_count(h, w, d, "slice_wise", 4)
            vol = cost_count(h, w, d, "volumetric_3d")
            assert sw.cell_updates / vol.cell_updates == 0.5

    def test_predecessor_visits_by_enumeration(self):
        h, w, d = 16, 16, 8
        sw = cost_count(h, w, d, "slice_wise", 4, "four")
        # per direction each grid edge is visited once: 4 scans x D slices x |E|
        edges_2d = h * (w - 1) + w * (h - 1)
        assert sw.predecessor_visits == 4 * d * edges_2d
        vol = cost_count(h, w, d, "volumetric_3d")
        edges_3d = (h - 1) * w * d + h * (w - 1) * d + h * w * (d - 1)
        assert vol.predecessor_visits == 8 * edges_3d
        assert vol.predecessor_visits > sw.predecessor_visits

    def test_eight_neighborhood_visits(self):
        sw4 = cost_count(16, 16, 1, "slice_wise", 4, "four")
        sw8 = cost_count(16, 16, 1, "slice_wise", 4, "eight")
        assert sw8.predecessor_visits - sw4.predecessor_visits == 4 * 2 * 15 * 15

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            cost_count(4, 4, 4, "quantum")
        with pytest.raises(ValueError):
            cost_count(0, 4, 4)


class TestLogitsResize:
    def test_identity_and_constant(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 3, 2, 2, 1)).astype(np.float32)
        t = Tape()
        out = rfp_logits_to_fullres(t.leaf(x), (2, 2, 1))
        assert np.array_equal(out.value, x)

        t = Tape()
        const = t.leaf(np.full((1, 2, 2, 2, 2), 3.25, np.float32))
        up = rfp_logits_to_fullres(const, (8, 8, 4))
        assert np.all(up.value == 3.25)

    def test_ramp_two_x_upsample(self):
        x = np.array([0.0, 1.0], np.float32).reshape(1, 1, 2, 1, 1)
        t = Tape()
        out = rfp_logits_to_fullres(t.leaf(x), (4, 1, 1))
        assert np.allclose(out.value.ravel(), [0.0, 0.25, 0.75, 1.0])
