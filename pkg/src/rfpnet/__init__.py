"""Recurrent grid-scan feature propagation and edge-guided volumetric
segmentation on a from-scratch tape-autodiff core."""

from .autodiff import Node, Tape
from .gridscan import (DIRECTIONS, DagLayout, GridGraph, ScanWeights, build_ucg,
                       cell_update_count, dag_scan_backward, dag_scan_forward,
                       fuse_directions, induce_dag, layouts_for,
                       reset_cell_update_counter)
from .nn_ops import ConvUnitParams, conv3d, conv_unit, maxpool3d, resize_trilinear
from .rfp_head import CostReport, RfpHeadParams, cost_count, rfp_forward, rfp_logits_to_fullres
from .edges import CannyParams, EdgeMap, EdgeSubnetParams, generate_reference_edges, weighted_bce
from .segnet import NetworkConfig, SegNet, ForwardOutputs, seg_loss, total_loss
from .synthdata import SyntheticSpec, VolumeSample, augment, gen_synthetic, preprocess
from .metrics import MetricsReport, assd, dsc, hd95, surface_distances
from .gradcheck import grad_check
from .trainer import AdamState, poly_lr, train_loop, train_step, validate

__version__ = "0.1.0"
