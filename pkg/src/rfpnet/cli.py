"""Command-line driver: dataset generation, training, evaluation, scan-cost
benchmarking, and gradient checking.

Exit codes: 0 success, 1 validation/config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .checksuite import network_micro_check, run_module_checks, run_op_checks
from .edges import generate_reference_edges
from .gradcheck import corrupted_vjp
from .gridscan import ScanWeights, dag_scan_forward, layouts_for
from .metrics import evaluate_corpus
from .rfp_head import cost_count
from .segnet import SegNet
from .synthdata import SyntheticSpec, VolumeSample, gen_synthetic, preprocess
from .trainer import AdamState, DivergenceError, predict_labels, train_loop
from .volio import (FormatError, RunConfig, apply_overrides, checkpoint_from_state,
                    config_digest, load_config, read_checkpoint, read_volume,
                    save_config, state_from_checkpoint, write_checkpoint, write_volume)

VERBOSE = os.environ.get("RFPNET_VERBOSE", "1") != "0"


def _say(msg: str):
    if VERBOSE:
        print(msg)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _record_line(record: dict) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in record.items())


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    return cfg


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out = cfg.data_dir
    if os.path.isdir(out) and os.listdir(out):
        if not args.force:
            print(f"error: {out} exists and is not empty (use --force to overwrite)",
                  file=sys.stderr)
            return 1
    os.makedirs(os.path.join(out, "images"), exist_ok=True)
    os.makedirs(os.path.join(out, "labels"), exist_ok=True)
    spec = SyntheticSpec(seed=cfg.seed, volume_shape=tuple(cfg.input_shape),
                         num_structures=cfg.gen_num_structures,
                         contrast_delta=cfg.gen_contrast_delta,
                         noise_sigma=cfg.gen_noise_sigma,
                         adjacency=cfg.gen_adjacency)
    samples = gen_synthetic(spec, cfg.gen_count)
    lines = []
    for i, s in enumerate(samples):
        img_rel = f"images/{i:04d}.rfpv"
        lab_rel = f"labels/{i:04d}.rfpv"
        write_volume(os.path.join(out, img_rel), s.image, s.spacing)
        write_volume(os.path.join(out, lab_rel), s.labels, s.spacing)
        lines.append(f"id={i:04d} image={img_rel} label={lab_rel} seed={s.seed}")
    with open(os.path.join(out, "manifest.txt"), "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
    _say(f"wrote {len(samples)} samples to {out}")
    return 0


def load_dataset(data_dir: str):
    manifest = os.path.join(data_dir, "manifest.txt")
    if not os.path.isfile(manifest):
        raise FormatError(f"no manifest at {manifest}")
    samples = []
    with open(manifest, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            kv = dict(part.split("=", 1) for part in line.split())
            image, spacing = read_volume(os.path.join(data_dir, kv["image"]))
            labels, _ = read_volume(os.path.join(data_dir, kv["label"]))
            samples.append(VolumeSample(image=image.astype(np.float32),
                                        labels=labels.astype(np.uint8), edges=None,
                                        spacing=spacing, seed=int(kv.get("seed", 0))))
    return samples


def prepare_samples(samples, cfg: RunConfig):
    """Preprocess intensities and derive reference edges once per sample."""
    out = []
    for s in samples:
        edges = None
        if cfg.edge_enabled:
            edges = generate_reference_edges(s.labels, mode=cfg.edge_mode).data
        out.append(VolumeSample(image=preprocess(s.image), labels=s.labels,
                                edges=edges, spacing=s.spacing, seed=s.seed))
    return out


def split_dataset(samples, val_count: int):
    if val_count <= 0 or val_count >= len(samples):
        return samples, []
    return samples[:-val_count], samples[-val_count:]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    samples = prepare_samples(load_dataset(cfg.data_dir), cfg)
    train_samples, val_samples = split_dataset(samples, cfg.val_count)
    if not train_samples:
        print("error: empty training split", file=sys.stderr)
        return 1

    net = SegNet(cfg.network_config(), seed=cfg.seed)
    opt = AdamState.for_net(net)
    digest = config_digest(cfg)
    start_epoch = 0
    if args.resume:
        ck_digest, tensors = read_checkpoint(args.resume)
        if ck_digest != digest:
            print("error: checkpoint config digest does not match the current config",
                  file=sys.stderr)
            return 1
        start_epoch = state_from_checkpoint(tensors, net, opt) + 1
        _say(f"resumed from {args.resume} at epoch {start_epoch}")

    os.makedirs(cfg.out_dir, exist_ok=True)
    save_config(os.path.join(cfg.out_dir, "config.txt"), cfg)
    log_path = os.path.join(cfg.out_dir, "train_log.txt")
    log_file = open(log_path, "a" if args.resume else "w", encoding="utf-8")

    def log_fn(record):
        line = _record_line(record)
        log_file.write(line + "\n")
        log_file.flush()
        _say(line)

    def checkpoint_fn(epoch, net_, opt_, is_best, record):
        tensors = checkpoint_from_state(net_, opt_, epoch)
        if (epoch + 1) % cfg.checkpoint_interval == 0:
            write_checkpoint(os.path.join(cfg.out_dir, f"ckpt_epoch{epoch:04d}.rfpc"),
                             digest, tensors)
        if is_best:
            write_checkpoint(os.path.join(cfg.out_dir, "ckpt_best.rfpc"), digest, tensors)

    try:
        train_loop(net, train_samples, val_samples,
                   total_epochs=cfg.total_epochs, base_lr=cfg.base_lr,
                   weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                   seed=cfg.seed, start_epoch=start_epoch, opt=opt,
                   val_interval=cfg.val_interval, augment_enabled=cfg.augment_enabled,
                   augment_angle=cfg.augment_angle, early_stop_dsc=cfg.early_stop_dsc,
                   log_fn=log_fn, checkpoint_fn=checkpoint_fn)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        print("last periodic checkpoint retained", file=sys.stderr)
        log_file.close()
        return 2
    final_epoch = cfg.total_epochs - 1
    write_checkpoint(os.path.join(cfg.out_dir, "ckpt_final.rfpc"), digest,
                     checkpoint_from_state(net, opt, final_epoch))
    log_file.close()
    _say(f"training done; artifacts in {cfg.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    config_path = args.config or os.path.join(os.path.dirname(args.checkpoint), "config.txt")
    cfg = load_config(config_path)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    ck_digest, tensors = read_checkpoint(args.checkpoint)
    if ck_digest != config_digest(cfg) and not args.override:
        print("error: config digest mismatch between checkpoint and config "
              "(pass --override to evaluate anyway)", file=sys.stderr)
        return 1
    net = SegNet(cfg.network_config(), seed=cfg.seed)
    opt = AdamState.for_net(net)
    state_from_checkpoint(tensors, net, opt)

    data_dir = args.dataset or cfg.data_dir
    samples = prepare_samples(load_dataset(data_dir), cfg)
    if args.split == "val":
        _, samples = split_dataset(samples, cfg.val_count)
    elif args.split == "train":
        samples, _ = split_dataset(samples, cfg.val_count)
    if not samples:
        print("error: selected split is empty", file=sys.stderr)
        return 1

    pairs = []
    for i, s in enumerate(samples):
        pairs.append((f"{i:04d}", predict_labels(net, s.image), s.labels))
    classes = list(range(1, cfg.num_classes))
    report = evaluate_corpus(pairs, spacing=samples[0].spacing, classes=classes)

    agg = report.aggregate()
    print(f"{'class':>6} {'DSC mean±sd':>18} {'ASSD mean±sd (mm)':>20} {'HD95 mean±sd (mm)':>20} {'n':>4}")
    for k in classes:
        cells = []
        for metric in ("dsc", "assd", "hd95"):
            m, sd, n = agg[(k, metric)]
            cells.append(f"{m:8.4f}±{sd:7.4f}" if np.isfinite(m) else "   missing   ")
        n = agg[(k, 'dsc')][2]
        print(f"{k:>6} {cells[0]:>18} {cells[1]:>20} {cells[2]:>20} {n:>4}")
    print(f"mean foreground DSC: {report.mean_foreground_dsc():.4f}")

    if args.records:
        with open(args.records, "w", encoding="utf-8") as f:
            for case in report.cases:
                for k, r in case.per_class.items():
                    flags = []
                    if r.vacuous:
                        flags.append("vacuous")
                    if r.missing_surface:
                        flags.append("missing_surface")
                    f.write(f"case={case.case_id} class={k} dsc={_fmt(r.dsc)} "
                            f"assd={_fmt(r.assd)} hd95={_fmt(r.hd95)} "
                            f"flags={','.join(flags)}\n")
        _say(f"wrote per-case records to {args.records}")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _time_scan(features, layouts, weights, directions, repeats=5):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for d in range(features.shape[3]):
            f_hwc = np.ascontiguousarray(features[:, :, :, d].transpose(1, 2, 0))
            for dn in directions:
                dag_scan_forward(f_hwc, layouts[dn], weights)
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    cfg = _load_run_config(args)
    net_cfg = cfg.network_config()
    eh, ew, ed = net_cfg.deep_spatial
    c = net_cfg.stage_channels[4]
    ndirs = max(1, net_cfg.dag_count)

    sw = cost_count(eh, ew, ed, "slice_wise", ndirs, net_cfg.neighborhood)
    vol = cost_count(eh, ew, ed, "volumetric_3d")
    print(f"deep feature extent: {eh}x{ew}x{ed}, {c} channels, "
          f"{ndirs} scan directions, {net_cfg.neighborhood}-neighborhood")
    print(f"{'mode':>14} {'cell_updates':>14} {'predecessor_visits':>20}")
    print(f"{'slice_wise':>14} {sw.cell_updates:>14} {sw.predecessor_visits:>20}")
    print(f"{'volumetric_3d':>14} {vol.cell_updates:>14} {vol.predecessor_visits:>20}")
    print(f"cell-update ratio slice_wise/volumetric = {sw.cell_updates / vol.cell_updates:.4f}")

    rng = np.random.default_rng(cfg.seed)
    features = rng.normal(0, 1, size=(c, eh, ew, ed)).astype(np.float32)
    bound = np.sqrt(6.0 / c)
    weights = ScanWeights(
        input_weight=rng.uniform(-bound, bound, (c, c)).astype(np.float32),
        hidden_weight=(0.25 * rng.uniform(-bound, bound, (c, c))).astype(np.float32),
        bias=np.zeros(c, dtype=np.float32))
    layouts = layouts_for(eh, ew, net_cfg.neighborhood)
    t1 = _time_scan(features, layouts, weights, ("dr",))
    t4 = _time_scan(features, layouts, weights, ("dr", "dl", "ur", "ul"))
    print(f"measured slice-wise scan wall-clock: 1 direction {t1 * 1e3:.2f} ms, "
          f"4 directions {t4 * 1e3:.2f} ms, ratio {t1 / t4:.3f}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    tol = args.tol
    failed = False

    def show(name, report):
        nonlocal failed
        status = "PASS" if report.passed else "FAIL"
        if not report.passed:
            failed = True
        print(f"[{status}] {name}: max_rel_err={report.max_rel_err:.3e} (tol {tol:g})")
        if not report.passed and VERBOSE:
            for line in report.lines():
                print("   " + line)

    if args.mutate:
        with corrupted_vjp("matvec"):
            for name, report in run_op_checks(instances=1, tol=tol):
                if name == "matvec":
                    show("matvec (mutated backward rule)", report)
        return 2 if failed else 0

    if args.scope in ("op", "all"):
        for name, report in run_op_checks(instances=args.instances, tol=tol):
            show(f"op:{name}", report)
    if args.scope in ("module", "all"):
        for name, report in run_module_checks(tol=tol):
            show(f"module:{name}", report)
    if args.scope in ("network", "all"):
        show("network:micro", network_micro_check(tol=tol))
    return 2 if failed else 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfpnet",
                                description="grid-scan recurrent segmentation workbench")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field (repeatable)")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset + manifest")
    common(sp)
    sp.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model on a generated dataset")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint with DSC/ASSD/HD95")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", help="dataset directory (default: config data_dir)")
    sp.add_argument("--split", choices=("all", "train", "val"), default="all")
    sp.add_argument("--records", help="write per-case key=value records here")
    sp.add_argument("--override", action="store_true",
                    help="evaluate despite a config digest mismatch")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("bench", help="analytic scan cost model + measured wall-clock")
    common(sp)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    sp.add_argument("--scope", choices=("op", "module", "network", "all"), default="all")
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--instances", type=int, default=5, help="random draws per op")
    sp.add_argument("--mutate", action="store_true",
                    help="corrupt one backward rule; the checker must then fail")
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FormatError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
