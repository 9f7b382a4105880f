"""Full segmentation network: shared encoder, edge detector, decoder with
edge skip-connections and deep supervision, recurrent propagation head, and
the fused output, plus the composite training objective.

Every configuration axis (edge detector on/off, number of edge
skip-connections, number of scan directions, grid neighborhood, direction
fusion mode) is reachable from NetworkConfig alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .autodiff import (Node, Tape, add, add_const, channel_sums, clamp,
                       concat_channel, div, log, mul, scale, softmax_channel, sum_all)
from .edges import EdgeSubnetParams, edge_subnet_forward, init_edge_subnet, weighted_bce
from .gridscan import DIRECTIONS, ScanWeights, layouts_for
from .nn_ops import (ConvUnitParams, conv3d, conv_unit, init_conv_unit,
                     init_plain_conv, maxpool3d, resize_trilinear)
from .rfp_head import RfpHeadParams, init_head_params, rfp_forward, rfp_logits_to_fullres

# direction subsets used for the reduced-scan ablations (opposite corners first)
DAG_SUBSETS = {
    0: (),
    1: ("dr",),
    2: ("dr", "ul"),
    3: ("dr", "ul", "dl"),
    4: DIRECTIONS,
}

DICE_EPS = 1e-5
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple
    num_classes: int
    stage_channels: tuple = (16, 32, 64, 128, 256)
    edge_enabled: bool = True
    esc_count: int = 4
    dag_count: int = 4
    neighborhood: str = "four"
    fusion_mode: str = "sum"
    edge_mode: str = "canny"
    loss_seg_decoder: float = 1.0
    loss_seg_final: float = 1.0
    loss_edge: float = 1.0

    def __post_init__(self):
        h, w, d = self.input_shape
        for name, v in (("H", h), ("W", w), ("D", d)):
            if v <= 0 or v % 16 != 0:
                raise ValueError(f"input extent {name}={v} must be a positive multiple of 16 "
                                 "(five stages at scales 1 .. 1/16)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.stage_channels) != 5:
            raise ValueError("stage_channels must list 5 stages")
        if not 0 <= self.esc_count <= 4:
            raise ValueError("esc_count must be in 0..4")
        if self.dag_count not in DAG_SUBSETS:
            raise ValueError("dag_count must be in 0..4")
        if self.esc_count > 0 and not self.edge_enabled:
            raise ValueError("edge skip-connections need the edge detector enabled")
        if self.neighborhood not in ("four", "eight"):
            raise ValueError(f"unknown neighborhood {self.neighborhood!r}")
        if self.fusion_mode not in ("sum", "concat"):
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.edge_mode not in ("canny", "transition"):
            raise ValueError(f"unknown edge_mode {self.edge_mode!r}")

    @property
    def directions(self):
        return DAG_SUBSETS[self.dag_count]

    @property
    def deep_spatial(self):
        h, w, d = self.input_shape
        return (h // 16, w // 16, d // 16)


@dataclass
class ForwardOutputs:
    encoder: list
    decoder: dict
    side_outputs: dict
    side_fullres: list
    edge_features: Optional[Node]
    edge_logits: Optional[Node]
    rfp_logits: Optional[Node]
    decoder_scores: Node = None
    final_logits: Node = None


_UNIT_FIELDS = ("kernel", "bias", "gamma", "beta", "running_mean", "running_var")


class SegNet:
    """Parameter store plus the forward wiring for one NetworkConfig."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(seed))
        if config.dag_count > 0:
            eh, ew, _ = config.deep_spatial
            self.layouts = layouts_for(eh, ew, config.neighborhood, config.directions)
        else:
            self.layouts = None

    # -- parameter construction ------------------------------------------------

    def _store_unit(self, prefix: str, unit: ConvUnitParams):
        p = self.params
        p[f"{prefix}.kernel"] = unit.kernel
        p[f"{prefix}.bias"] = unit.bias
        p[f"{prefix}.gamma"] = unit.bn_gamma
        p[f"{prefix}.beta"] = unit.bn_beta
        p[f"{prefix}.running_mean"] = unit.bn_running_mean
        p[f"{prefix}.running_var"] = unit.bn_running_var

    def _store_conv(self, prefix: str, kernel, bias):
        self.params[f"{prefix}.kernel"] = kernel
        self.params[f"{prefix}.bias"] = bias

    def _init_params(self, rng):
        cfg = self.config
        c1, c2, c3, c4, c5 = cfg.stage_channels
        k = cfg.num_classes

        self._store_unit("enc1.a", init_conv_unit(rng, 1, c1, 3))
        self._store_unit("enc2.a", init_conv_unit(rng, c1, c2, 3))
        self._store_unit("enc2.b", init_conv_unit(rng, c2, c2, 3))
        self._store_unit("enc3.a", init_conv_unit(rng, c2, c3, 3))
        self._store_unit("enc3.b", init_conv_unit(rng, c3, c3, 3))
        self._store_unit("enc4.a", init_conv_unit(rng, c3, c4, 3))
        self._store_unit("enc4.b", init_conv_unit(rng, c4, c4, 3))
        self._store_unit("enc5.a", init_conv_unit(rng, c4, c5, 3))
        self._store_unit("enc5.b", init_conv_unit(rng, c5, c5, 3))

        if cfg.edge_enabled:
            sub = init_edge_subnet(rng, c2, c5)
            self._store_unit("edge.adapt", sub.adapt_unit)
            self._store_unit("edge.enc1", sub.enc_unit1)
            self._store_unit("edge.enc2", sub.enc_unit2)
            self._store_conv("edge.head", sub.head_kernel, sub.head_bias)

        skip = {4: c4, 3: c3, 2: c2, 1: c1}
        above = {4: c5, 3: c4, 2: c3, 1: c2}
        out_ch = {4: c4, 3: c3, 2: c2, 1: c1}
        for s in (4, 3, 2, 1):
            in_ch = above[s] + skip[s]
            if cfg.edge_enabled and s <= cfg.esc_count:
                in_ch += c2
            self._store_unit(f"dec{s}.a", init_conv_unit(rng, in_ch, out_ch[s], 3))
            self._store_unit(f"dec{s}.b", init_conv_unit(rng, out_ch[s], out_ch[s], 3))
            self._store_conv(f"side{s}", *init_plain_conv(rng, out_ch[s], k, 1))

        self._store_conv("dsup", *init_plain_conv(rng, 4 * k, k, 1))

        if cfg.dag_count > 0:
            depth = cfg.deep_spatial[2]
            head = init_head_params(rng, c5, depth, k, cfg.directions, cfg.fusion_mode)
            for d in range(depth):
                for dn in cfg.directions:
                    sw = head.slice_weights[d][dn]
                    self.params[f"rfp.d{d}.{dn}.u"] = sw.input_weight
                    self.params[f"rfp.d{d}.{dn}.w"] = sw.hidden_weight
                    self.params[f"rfp.d{d}.{dn}.b"] = sw.bias
                if cfg.fusion_mode == "concat":
                    self.params[f"rfp.d{d}.fusemat"] = head.fuse_proj[d]
            self._store_conv("rfp.proj", head.proj_kernel, head.proj_bias)

        fuse_in = 4 * k + (k if cfg.dag_count > 0 else 0)
        self._store_conv("fuse", *init_plain_conv(rng, fuse_in, k, 1))

    # -- parameter access --------------------------------------------------------

    def trainable_names(self):
        return [n for n in self.params
                if not (n.endswith(".running_mean") or n.endswith(".running_var"))]

    def parameter_count(self) -> int:
        return sum(self.params[n].size for n in self.trainable_names())

    def _unit_view(self, leaves, prefix) -> ConvUnitParams:
        return ConvUnitParams(
            kernel=leaves[f"{prefix}.kernel"], bias=leaves[f"{prefix}.bias"],
            bn_gamma=leaves[f"{prefix}.gamma"], bn_beta=leaves[f"{prefix}.beta"],
            bn_running_mean=self.params[f"{prefix}.running_mean"],
            bn_running_var=self.params[f"{prefix}.running_var"])

    def _head_view(self, leaves) -> RfpHeadParams:
        cfg = self.config
        depth = cfg.deep_spatial[2]
        slices = []
        fuse = [] if cfg.fusion_mode == "concat" else None
        for d in range(depth):
            slices.append({dn: ScanWeights(leaves[f"rfp.d{d}.{dn}.u"],
                                           leaves[f"rfp.d{d}.{dn}.w"],
                                           leaves[f"rfp.d{d}.{dn}.b"])
                           for dn in cfg.directions})
            if fuse is not None:
                fuse.append(leaves[f"rfp.d{d}.fusemat"])
        return RfpHeadParams(slice_weights=slices, proj_kernel=leaves["rfp.proj.kernel"],
                             proj_bias=leaves["rfp.proj.bias"], fuse_proj=fuse)

    # -- forward -----------------------------------------------------------------

    def forward(self, tape: Tape, volume, mode: str = "train",
                update_running: bool = None, leaves: dict = None):
        """Run the network on a (B, 1, H, W, D) batch.

        Returns (ForwardOutputs, leaves) where leaves maps every trainable
        parameter name to its tape node for gradient retrieval. A caller may
        supply pre-recorded leaves (gradient checking does, to perturb them).
        """
        cfg = self.config
        if update_running is None:
            update_running = mode == "train"
        x = volume if isinstance(volume, Node) else tape.leaf(volume)
        if x.shape[1] != 1 or tuple(x.shape[2:]) != tuple(cfg.input_shape):
            raise ValueError(f"volume shape {x.shape} does not match config "
                             f"(B, 1, {cfg.input_shape})")
        full_spatial = cfg.input_shape
        if leaves is None:
            leaves = {n: tape.leaf(self.params[n]) for n in self.trainable_names()}

        def cu(h, prefix, stride):
            return conv_unit(h, self._unit_view(leaves, prefix), stride=stride,
                             padding=1, mode=mode, update_running=update_running)

        e1 = cu(x, "enc1.a", 1)
        e2 = cu(cu(e1, "enc2.a", 2), "enc2.b", 1)
        e3 = cu(cu(e2, "enc3.a", 2), "enc3.b", 1)
        e4 = cu(cu(maxpool3d(e3, 2, 2), "enc4.a", 1), "enc4.b", 1)
        e5 = cu(cu(e4, "enc5.a", 2), "enc5.b", 1)

        f_edge = edge_logits = None
        if cfg.edge_enabled:
            sub = EdgeSubnetParams(
                adapt_unit=self._unit_view(leaves, "edge.adapt"),
                enc_unit1=self._unit_view(leaves, "edge.enc1"),
                enc_unit2=self._unit_view(leaves, "edge.enc2"),
                head_kernel=leaves["edge.head.kernel"], head_bias=leaves["edge.head.bias"])
            f_edge, edge_logits = edge_subnet_forward(
                e2, e5, sub, full_spatial, mode=mode, update_running=update_running)

        rfp_full = None
        if cfg.dag_count > 0:
            head = self._head_view(leaves)
            _, rfp_logits = rfp_forward(e5, head, cfg.directions,
                                        neighborhood=cfg.neighborhood,
                                        fusion=cfg.fusion_mode, layouts=self.layouts)
            rfp_full = rfp_logits_to_fullres(rfp_logits, full_spatial)

        enc = {5: e5, 4: e4, 3: e3, 2: e2, 1: e1}
        prev = e5
        decoder, sides = {}, {}
        for s in (4, 3, 2, 1):
            target = enc[s].shape[2:]
            parts = [resize_trilinear(prev, target), enc[s]]
            if cfg.edge_enabled and s <= cfg.esc_count:
                parts.append(resize_trilinear(f_edge, target))
            h = cu(concat_channel(parts), f"dec{s}.a", 1)
            d_s = cu(h, f"dec{s}.b", 1)
            decoder[s] = d_s
            sides[s] = conv3d(d_s, leaves[f"side{s}.kernel"], leaves[f"side{s}.bias"])
            prev = d_s

        side_fullres = [resize_trilinear(sides[s], full_spatial) for s in (1, 2, 3, 4)]
        decoder_scores = conv3d(concat_channel(side_fullres),
                                leaves["dsup.kernel"], leaves["dsup.bias"])
        fuse_parts = side_fullres + ([rfp_full] if rfp_full is not None else [])
        final_logits = conv3d(concat_channel(fuse_parts),
                              leaves["fuse.kernel"], leaves["fuse.bias"])

        outputs = ForwardOutputs(
            encoder=[e1, e2, e3, e4, e5], decoder=decoder, side_outputs=sides,
            side_fullres=side_fullres, edge_features=f_edge, edge_logits=edge_logits,
            rfp_logits=rfp_full, decoder_scores=decoder_scores, final_logits=final_logits)
        return outputs, leaves


def config_variant(config: NetworkConfig, **overrides) -> NetworkConfig:
    return replace(config, **overrides)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    lb = np.asarray(labels)
    if lb.ndim == 3:
        lb = lb[None]
    out = np.zeros((lb.shape[0], num_classes) + lb.shape[1:], dtype=np.float32)
    for c in range(num_classes):
        out[:, c] = lb == c
    return out


def seg_loss(logits: Node, labels: np.ndarray, eps: float = DICE_EPS) -> Node:
    """Soft Dice (per-class, epsilon-smoothed, class-averaged) plus voxel-mean
    cross-entropy over softmax probabilities."""
    k = logits.shape[1]
    y_np = one_hot(labels, k)
    if y_np.shape != logits.shape:
        raise ValueError(f"labels one-hot shape {y_np.shape} vs logits {logits.shape}")
    tape = logits.tape
    y = tape.leaf(y_np)
    n = y_np.size // k

    p = softmax_channel(logits)
    p_safe = clamp(p, PROB_CLAMP, 1.0)
    ce = scale(sum_all(mul(y, log(p_safe))), -1.0 / n)

    overlap = channel_sums(mul(y, p))
    pred_mass = channel_sums(mul(p, p))
    ref_mass = tape.leaf((y_np * y_np).sum(axis=(0, 2, 3, 4)))
    ratio = div(add_const(scale(overlap, 2.0), eps),
                add_const(add(pred_mass, ref_mass), eps))
    dice_mean = scale(sum_all(ratio), 1.0 / k)
    l_dice = add_const(scale(dice_mean, -1.0), 1.0)
    return add(l_dice, ce)


def total_loss(outputs: ForwardOutputs, labels: np.ndarray, edge_reference,
               config: NetworkConfig):
    """Weighted sum of decoder supervision, final supervision, and (when the
    edge detector is on) the balanced edge loss. Returns (total, components)."""
    comps = {}
    comps["seg_decoder"] = seg_loss(outputs.decoder_scores, labels)
    comps["seg_final"] = seg_loss(outputs.final_logits, labels)
    total = add(scale(comps["seg_decoder"], config.loss_seg_decoder),
                scale(comps["seg_final"], config.loss_seg_final))
    if config.edge_enabled:
        if edge_reference is None:
            raise ValueError("edge detector enabled but no reference edge map supplied")
        comps["edge"] = weighted_bce(outputs.edge_logits, edge_reference)
        total = add(total, scale(comps["edge"], config.loss_edge))
    return total, comps
