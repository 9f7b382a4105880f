"""Edge supervision: reference edge maps from label volumes, the edge-detector
sub-network over shallow+deep encoder features, and the class-balanced
weighted binary cross-entropy.

Reference edges are extracted per axial (H, W) slice. Transition mode marks
every voxel whose 8-neighborhood contains a different label; Canny mode runs
the classic detector (Gaussian smoothing, Sobel gradients, non-maximum
suppression, double-threshold hysteresis) on each foreground class mask and
unions the results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Node, add, clamp, log, mul, scale, sigmoid, sub, sum_all
from .nn_ops import ConvUnitParams, conv3d, conv_unit, init_conv_unit, init_plain_conv, resize_trilinear


@dataclass
class EdgeMap:
    """Binary edge volume with cached positive/negative counts."""
    data: np.ndarray  # u8, (H, W, D); 1 = edge voxel

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if not np.isin(self.data, (0, 1)).all():
            raise ValueError("edge map must be binary")
        self.n_edge = int(self.data.sum())
        self.n_background = int(self.data.size - self.n_edge)

    @property
    def alpha(self) -> float:
        """Background fraction |P-| / N; weights the edge term of the loss."""
        return self.n_background / self.data.size


@dataclass
class CannyParams:
    """Smoothing sigma and hysteresis thresholds. Thresholds are fractions of
    the per-mask maximum gradient magnitude.

    On a binarized mask the gradient ridge sits between the two voxel rows
    flanking the label transition; strict non-maximum suppression would pick
    one side by floating-point luck, so magnitudes within nms_tie_tolerance
    of the along-gradient neighbor both survive.
    """
    gaussian_sigma: float = 1.0
    low_threshold: float = 0.1
    high_threshold: float = 0.2
    nms_tie_tolerance: float = 0.05

    def __post_init__(self):
        if self.low_threshold > self.high_threshold:
            raise ValueError("canny low threshold must be <= high threshold")


_SHIFTS8 = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


def _transition_slice(lab: np.ndarray) -> np.ndarray:
    """Voxels with any 8-neighbor of a different label (in-plane)."""
    h, w = lab.shape
    out = np.zeros((h, w), dtype=bool)
    for dr, dc in _SHIFTS8:
        a_r = slice(max(dr, 0), h + min(dr, 0))
        a_c = slice(max(dc, 0), w + min(dc, 0))
        b_r = slice(max(-dr, 0), h + min(-dr, 0))
        b_c = slice(max(-dc, 0), w + min(-dc, 0))
        out[a_r, a_c] |= lab[a_r, a_c] != lab[b_r, b_c]
    return out


def canny_2d(mask: np.ndarray, params: CannyParams) -> np.ndarray:
    """Classic Canny on one 2-d float mask; returns a boolean edge image.

    Non-maximum suppression keeps ties, so perfectly symmetric ridges (binary
    masks smooth into these) retain both flanking pixels.
    """
    img = ndimage.gaussian_filter(mask.astype(np.float64), params.gaussian_sigma)
    gr = ndimage.sobel(img, axis=0)
    gc = ndimage.sobel(img, axis=1)
    mag = np.hypot(gr, gc)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(mask.shape, dtype=bool)

    # quantize gradient orientation into 4 sectors and compare along it
    angle = np.mod(np.arctan2(gc, gr), np.pi)
    sector = ((angle + np.pi / 8) // (np.pi / 4)).astype(int) % 4
    offsets = {0: (1, 0), 1: (1, 1), 2: (0, 1), 3: (-1, 1)}
    padded = np.pad(mag, 1)
    nms = np.zeros_like(mag)
    slack = 1.0 - params.nms_tie_tolerance
    for s, (dr, dc) in offsets.items():
        sel = sector == s
        fwd = padded[1 + dr:1 + dr + mag.shape[0], 1 + dc:1 + dc + mag.shape[1]]
        bwd = padded[1 - dr:1 - dr + mag.shape[0], 1 - dc:1 - dc + mag.shape[1]]
        keep = sel & (mag >= slack * fwd) & (mag >= slack * bwd)
        nms[keep] = mag[keep]

    strong = nms >= params.high_threshold * peak
    weak = nms >= params.low_threshold * peak
    if not strong.any():
        return np.zeros(mask.shape, dtype=bool)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    keep_ids = np.unique(labels[strong])
    keep_ids = keep_ids[keep_ids > 0]
    return np.isin(labels, keep_ids)


def generate_reference_edges(labels: np.ndarray, mode: str = "canny",
                             canny_params: CannyParams = None) -> EdgeMap:
    """Binary reference edge map from an integer label volume (H, W, D)."""
    if labels.ndim != 3:
        raise ValueError(f"label volume must be 3-d, got shape {labels.shape}")
    if mode not in ("canny", "transition"):
        raise ValueError(f"edge mode must be 'canny' or 'transition', got {mode!r}")
    labels = np.asarray(labels)
    out = np.zeros(labels.shape, dtype=np.uint8)
    if mode == "transition":
        for d in range(labels.shape[2]):
            out[:, :, d] = _transition_slice(labels[:, :, d])
        return EdgeMap(out)
    params = canny_params or CannyParams()
    classes = np.unique(labels)
    classes = classes[classes > 0]
    for d in range(labels.shape[2]):
        lab = labels[:, :, d]
        acc = np.zeros(lab.shape, dtype=bool)
        for k in classes:
            m = lab == k
            if not m.any():
                continue
            acc |= canny_2d(m.astype(np.float64), params)
        out[:, :, d] = acc
    return EdgeMap(out)


# ---------------------------------------------------------------------------
# edge detector sub-network
# ---------------------------------------------------------------------------

@dataclass
class EdgeSubnetParams:
    """Channel adapter for the deep features, two 3x3x3 encoding units over the
    merged features, and a single-channel logit head (plain conv)."""
    adapt_unit: ConvUnitParams
    enc_unit1: ConvUnitParams
    enc_unit2: ConvUnitParams
    head_kernel: object
    head_bias: object


def init_edge_subnet(rng: np.random.Generator, e2_channels: int, e5_channels: int) -> EdgeSubnetParams:
    head_kernel, head_bias = init_plain_conv(rng, e2_channels, 1, 1)
    return EdgeSubnetParams(
        adapt_unit=init_conv_unit(rng, e5_channels, e2_channels, 1),
        enc_unit1=init_conv_unit(rng, e2_channels, e2_channels, 3),
        enc_unit2=init_conv_unit(rng, e2_channels, e2_channels, 3),
        head_kernel=head_kernel,
        head_bias=head_bias,
    )


def edge_subnet_forward(e2: Node, e5: Node, params: EdgeSubnetParams,
                        full_spatial, mode: str = "train", update_running: bool = True):
    """Merge adapted deep features into the shallow ones and encode edges.

    Returns (edge_features at e2 resolution, single-channel logits resized to
    the full input resolution). Sigmoid is applied by the loss, not here.
    """
    e2_sp = e2.shape[2:]
    e5_sp = e5.shape[2:]
    if tuple(8 * s for s in e5_sp) != tuple(e2_sp):
        raise ValueError(
            f"deep features {e5_sp} must be 1/8 of shallow features {e2_sp} to merge")
    tape = e2.tape
    adapted = conv_unit(e5, params.adapt_unit, stride=1, padding=0, mode=mode,
                        update_running=update_running)
    adapted = resize_trilinear(adapted, e2_sp)
    merged = add(e2, adapted)
    f = conv_unit(merged, params.enc_unit1, stride=1, padding=1, mode=mode,
                  update_running=update_running)
    f_edge = conv_unit(f, params.enc_unit2, stride=1, padding=1, mode=mode,
                       update_running=update_running)
    hk = params.head_kernel if isinstance(params.head_kernel, Node) else tape.leaf(params.head_kernel)
    hb = params.head_bias if isinstance(params.head_bias, Node) else tape.leaf(params.head_bias)
    logits_low = conv3d(f_edge, hk, hb, stride=1, padding=0)
    edge_logits = resize_trilinear(logits_low, full_spatial)
    return f_edge, edge_logits


# ---------------------------------------------------------------------------
# class-balanced edge loss
# ---------------------------------------------------------------------------

def weighted_bce(edge_logits: Node, reference) -> Node:
    """Background-fraction-weighted binary cross-entropy.

    With alpha = |P-| / N, edge voxels contribute -alpha*log(p) and background
    voxels -(1-alpha)*log(1-p), averaged over all N voxels. Probabilities are
    sigmoid outputs clamped to [1e-7, 1 - 1e-7].
    """
    mask = reference.data if isinstance(reference, EdgeMap) else np.asarray(reference)
    if mask.size != edge_logits.value.size:
        raise ValueError(
            f"edge logits shape {edge_logits.shape} does not cover reference of shape {mask.shape}")
    tape = edge_logits.tape
    mask = mask.reshape(edge_logits.shape).astype(tape.dtype.type)
    n = mask.size
    n_pos = float(mask.sum())
    alpha = (n - n_pos) / n

    pos = tape.leaf(mask)
    neg = tape.leaf(1.0 - mask)
    p = clamp(sigmoid(edge_logits), 1e-7, 1.0 - 1e-7)
    one_minus_p = clamp(sub(tape.leaf(np.ones_like(mask)), p), 1e-7, 1.0)
    pos_term = scale(sum_all(mul(pos, log(p))), alpha)
    neg_term = scale(sum_all(mul(neg, log(one_minus_p))), 1.0 - alpha)
    return scale(add(pos_term, neg_term), -1.0 / n)
