"""Canned gradient-check suites for the CLI and the test suite.

Three scopes: per-op primitives, composed modules (scan head, edge loss,
segmentation loss), and the full micro-scale network.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn_ops
from .edges import generate_reference_edges, weighted_bce
from .gradcheck import GradCheckReport, grad_check
from .gridscan import ScanWeights, layouts_for
from .rfp_head import RfpHeadParams, rfp_forward
from .segnet import NetworkConfig, SegNet, seg_loss, total_loss

MICRO_CONFIG = NetworkConfig(input_shape=(16, 16, 16), num_classes=3,
                             stage_channels=(4, 8, 8, 8, 8),
                             edge_enabled=True, esc_count=4, dag_count=4,
                             edge_mode="transition")


def _r(rng, *shape):
    return rng.normal(0.0, 1.0, size=shape)


def _scalarize(x):
    # squared sum keeps every output path active and the root scalar
    return ad.sum_all(ad.mul(x, x))


def _op_case(name, rng):
    """Returns (build, params dict) exercising one primitive op."""
    if name in ("add", "sub", "mul", "div"):
        a, b = _r(rng, 2, 3, 4), _r(rng, 2, 3, 4) + 3.0  # offset keeps div well-conditioned
        fn = getattr(ad, name)
        return (lambda t, lv: _scalarize(fn(lv["a"], lv["b"]))), {"a": a, "b": b}
    if name == "scale":
        return (lambda t, lv: _scalarize(ad.scale(lv["a"], -1.7))), {"a": _r(rng, 3, 5)}
    if name == "add_const":
        return (lambda t, lv: _scalarize(ad.add_const(lv["a"], 0.37))), {"a": _r(rng, 3, 5)}
    if name == "relu":
        a = _r(rng, 4, 4) * 2.0
        a[np.abs(a) < 1e-2] += 0.1  # keep clear of the kink
        return (lambda t, lv: _scalarize(ad.relu(lv["a"]))), {"a": a}
    if name == "sigmoid":
        return (lambda t, lv: _scalarize(ad.sigmoid(lv["a"]))), {"a": _r(rng, 3, 4)}
    if name == "log":
        return (lambda t, lv: _scalarize(ad.log(lv["a"]))), {"a": np.abs(_r(rng, 3, 4)) + 0.5}
    if name == "clamp":
        a = _r(rng, 4, 4)
        a[np.abs(a - 1.0) < 5e-3] = 0.0  # avoid the clamp boundary
        a[np.abs(a + 1.0) < 5e-3] = 0.0
        return (lambda t, lv: _scalarize(ad.clamp(lv["a"], -1.0, 1.0))), {"a": a}
    if name == "softmax_channel":
        return (lambda t, lv: _scalarize(ad.softmax_channel(lv["a"]))), {"a": _r(rng, 2, 5, 3)}
    if name == "sum_all":
        return (lambda t, lv: ad.mul(ad.sum_all(lv["a"]), ad.sum_all(lv["a"]))), {"a": _r(rng, 3, 4)}
    if name == "channel_sums":
        return (lambda t, lv: _scalarize(ad.channel_sums(lv["a"]))), {"a": _r(rng, 2, 3, 4)}
    if name == "concat_channel":
        p = {"a": _r(rng, 2, 2, 3), "b": _r(rng, 2, 4, 3)}
        return (lambda t, lv: _scalarize(ad.concat_channel([lv["a"], lv["b"]]))), p
    if name == "slice_channel":
        return (lambda t, lv: _scalarize(ad.slice_channel(lv["a"], 1))), {"a": _r(rng, 2, 4, 3)}
    if name == "slice_depth":
        return (lambda t, lv: _scalarize(ad.slice_depth(lv["a"], 2))), {"a": _r(rng, 2, 3, 4)}
    if name == "stack_depth":
        p = {"a": _r(rng, 2, 3), "b": _r(rng, 2, 3)}
        return (lambda t, lv: _scalarize(ad.stack_depth([lv["a"], lv["b"]]))), p
    if name == "matvec":
        return (lambda t, lv: _scalarize(ad.matvec(lv["m"], lv["v"]))), \
            {"m": _r(rng, 4, 4), "v": _r(rng, 4)}
    if name == "conv3d":
        p = {"x": _r(rng, 1, 2, 6, 6, 3), "k": _r(rng, 3, 2, 3, 3, 3) * 0.4, "b": _r(rng, 3)}
        return (lambda t, lv: _scalarize(
            nn_ops.conv3d(lv["x"], lv["k"], lv["b"], stride=(2, 1, 1), padding=(1, 1, 0)))), p
    if name == "batchnorm_train":
        p = {"x": _r(rng, 2, 3, 4, 4, 2), "g": np.abs(_r(rng, 3)) + 0.5, "be": _r(rng, 3)}
        # a plain sum of squares of standardized outputs is nearly invariant to x
        # (zero mean, fixed variance), so weight each element to break the symmetry
        wobble = _r(rng, 2, 3, 4, 4, 2)

        def build(t, lv):
            y, _, _ = nn_ops.batchnorm_train(lv["x"], lv["g"], lv["be"])
            wy = ad.mul(y, t.leaf(wobble))
            return ad.add(ad.sum_all(wy), _scalarize(wy))
        return build, p
    if name == "batchnorm_eval":
        rm = _r(rng, 3) * 0.3
        rv = np.abs(_r(rng, 3)) + 0.5
        p = {"x": _r(rng, 2, 3, 4, 4, 2), "g": np.abs(_r(rng, 3)) + 0.5, "be": _r(rng, 3)}
        return (lambda t, lv: _scalarize(
            nn_ops.batchnorm_eval(lv["x"], lv["g"], lv["be"], rm, rv))), p
    if name == "maxpool3d":
        return (lambda t, lv: _scalarize(nn_ops.maxpool3d(lv["x"], 2, 2))), \
            {"x": _r(rng, 1, 2, 4, 6, 4)}
    if name == "resize_trilinear":
        return (lambda t, lv: _scalarize(nn_ops.resize_trilinear(lv["x"], (5, 3, 4)))), \
            {"x": _r(rng, 1, 2, 3, 5, 2)}
    raise KeyError(name)


OP_NAMES = ("add", "sub", "mul", "div", "scale", "add_const", "relu", "sigmoid",
            "log", "clamp", "softmax_channel", "sum_all", "channel_sums",
            "concat_channel", "slice_channel", "slice_depth", "stack_depth",
            "matvec", "conv3d", "batchnorm_train", "batchnorm_eval",
            "maxpool3d", "resize_trilinear")


def run_op_checks(instances: int = 5, tol: float = 1e-3, seed: int = 0):
    """(name, GradCheckReport) per primitive op, `instances` random draws each."""
    results = []
    for name in OP_NAMES:
        worst = None
        for i in range(instances):
            rng = np.random.default_rng([seed, hash(name) % (2 ** 31), i])
            build, params = _op_case(name, rng)
            rep = grad_check(build, params, tol=tol, seed=i)
            if worst is None or rep.max_rel_err > worst.max_rel_err or not rep.passed:
                worst = rep
            if not rep.passed:
                break
        results.append((name, worst))
    return results


def _scan_case(rng, h=4, w=5, c=3, directions=("dr", "ul"), neighborhood="four"):
    layouts = layouts_for(h, w, neighborhood, directions)
    params = {"e5": _r(rng, 1, c, h, w, 2)}
    for d in range(2):
        for dn in directions:
            params[f"u{d}{dn}"] = _r(rng, c, c) * 0.5
            params[f"w{d}{dn}"] = _r(rng, c, c) * 0.3
            params[f"b{d}{dn}"] = _r(rng, c) * 0.2
    params["pk"] = _r(rng, 2, c, 1, 1, 1) * 0.5
    params["pb"] = _r(rng, 2)

    def build(tape, lv):
        head = RfpHeadParams(
            slice_weights=[{dn: ScanWeights(lv[f"u{d}{dn}"], lv[f"w{d}{dn}"], lv[f"b{d}{dn}"])
                            for dn in directions} for d in range(2)],
            proj_kernel=lv["pk"], proj_bias=lv["pb"])
        enhanced, logits = rfp_forward(lv["e5"], head, directions, layouts=layouts)
        return ad.add(_scalarize(enhanced), _scalarize(logits))

    return build, params


def run_module_checks(tol: float = 1e-3, seed: int = 0):
    """Composite checks: scan head, balanced edge loss, segmentation loss."""
    results = []
    rng = np.random.default_rng([seed, 11])
    results.append(("scan_head", grad_check(*_scan_case(rng), tol=tol)))

    rng = np.random.default_rng([seed, 12])
    mask = (rng.random((1, 1, 4, 4, 3)) < 0.3).astype(np.float64)
    logits = _r(rng, 1, 1, 4, 4, 3)
    results.append(("weighted_bce", grad_check(
        lambda t, lv: weighted_bce(lv["logits"], mask), {"logits": logits}, tol=tol)))

    rng = np.random.default_rng([seed, 13])
    labels = rng.integers(0, 3, size=(1, 4, 4, 2))
    lg = _r(rng, 1, 3, 4, 4, 2)
    results.append(("seg_loss", grad_check(
        lambda t, lv: seg_loss(lv["logits"], labels), {"logits": lg}, tol=tol)))
    return results


def network_micro_check(tol: float = 1e-3, max_entries: int = 3, seed: int = 0,
                        config: NetworkConfig = MICRO_CONFIG, batch: int = 4) -> GradCheckReport:
    """Finite-difference check of every parameter group of the micro network.

    Needs batch >= 3: the deepest stage is 1x1x1 spatial here, so smaller
    batches make train-mode batch norm degenerate (outputs collapse onto the
    ReLU kink and one-sided finite differences disagree with the exact
    subgradient convention).
    """
    net = SegNet(config, seed=seed)
    rng = np.random.default_rng([seed, 99])
    volume = rng.normal(0.0, 1.0, size=(batch, 1) + tuple(config.input_shape)).astype(np.float64)
    labels = rng.integers(0, config.num_classes, size=(batch,) + tuple(config.input_shape))
    edge_ref = None
    if config.edge_enabled:
        edge_ref = np.stack([generate_reference_edges(labels[b], mode="transition").data
                             for b in range(batch)])[:, None]

    def build(tape, leaves):
        outputs, _ = net.forward(tape, volume, mode="train", update_running=False,
                                 leaves=leaves)
        total, _ = total_loss(outputs, labels, edge_ref, config)
        return total

    params = {n: net.params[n] for n in net.trainable_names()}
    return grad_check(build, params, tol=tol, max_entries=max_entries, seed=seed)
