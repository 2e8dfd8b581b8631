"""Command line entry point: ``mgafnet {gen,train,eval,matrix,ensemble,gradcheck}``.

Every command accepts ``--config FILE`` and repeated ``--set key=value``
overrides (keys as in ``mgafnet.experiment.ExperimentConfig``, e.g.
``optim.lr``). Errors print a single ``error: <Type>: <message>`` line to
stderr and exit with status 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import experiment as ex
from . import synth
from .tracks import write_track_file


def _config(args):
    cfg = ex.load_config(args.config, args.set or ())
    return cfg.replace(out_dir=args.out) if getattr(args, "out", None) else cfg


def _print_report(report, label=""):
    prefix = f"{label} " if label else ""
    print(f"{prefix}top1={report.top1:.4f} top5={report.top5:.4f} macro={report.macro:.4f} n={report.n}")


def cmd_gen(args):
    cfg = _config(args)
    dc = cfg.data
    out = args.out or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    data_seed, _ = ex.seed_streams(cfg.seed)
    vocab = synth.Vocabulary()
    split = synth.make_split(vocab, dc.split_seed)
    records = synth.generate_dataset(vocab, split, dc.n_per_pair, data_seed, dc.n_test_per_pair)
    synth.write_manifest(os.path.join(out, "manifest.csv"), records)
    rcfg = synth.RenderConfig(frames=dc.frames, height=dc.height, width=dc.width)
    track_rows = []
    video_dir = os.path.join(out, "videos")
    if args.raw:
        os.makedirs(video_dir, exist_ok=True)
    for rec in records:
        s = synth.render_sample(rec.verb, rec.noun, rec.seed, rcfg, vocab)
        dets = s.tracks
        if dc.track_noise:
            dets = synth.jitter_tracks(dets, dc.sigma_pos, dc.p_drop, seed=[data_seed, rec.seed, 3])
        track_rows.extend((rec.sample_id, d) for d in dets)
        if args.raw:
            synth.write_raw_tensor(os.path.join(video_dir, f"{rec.sample_id}.bin"), s.video)
    write_track_file(os.path.join(out, "tracks.csv"), track_rows)
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    report = ex.run_experiment(cfg)
    _print_report(report, cfg.mode)
    if cfg.out_dir:
        print(f"artifacts in {cfg.out_dir}")
    return 0


def cmd_eval(args):
    model, ckpt_cfg = ex.load_checkpoint(args.checkpoint)
    cfg = _config(args) if (args.config or args.set) else ckpt_cfg
    _, test = ex.build_datasets(cfg)
    report, _ = ex.evaluate(model, test)
    report.param_count = model.net_.num_parameters()
    _print_report(report, model.mode)
    if args.metrics:
        ex.write_metrics(args.metrics, report)
    return 0


def cmd_matrix(args):
    cfg = _config(args)
    modes = args.modes or list(ex.MODES)
    seeds = [int(s) for s in args.seeds]
    rows = ex.run_matrix(cfg, modes, seeds, table_path=args.table)
    sys.stdout.write(ex.format_table(rows))
    return 0


def cmd_ensemble(args):
    cfg = _config(args)
    if args.checkpoints:
        _, test = ex.build_datasets(cfg)
        report = ex.ensemble_predict(args.checkpoints, test)
        if cfg.out_dir:
            os.makedirs(cfg.out_dir, exist_ok=True)
            ex.write_metrics(os.path.join(cfg.out_dir, "metrics.csv"), report)
    else:
        report = ex.run_experiment(cfg.replace(mode=ex.ENSEMBLE))
    _print_report(report, "ensemble")
    return 0


def cmd_gradcheck(args):
    from .verify import run_suite
    results = run_suite(max_coords=args.max_coords, seed=args.seed,
                        include_network=not args.skip_network, log=print)
    failed = [name for name, rep, _ in results if not rep.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    if failed:
        raise RuntimeError("gradient check failed: " + ", ".join(failed))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mgafnet", description="Dual-pathway interaction recognition with object-guided fusion.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if out:
            sp.add_argument("--out", help="output directory (overrides out_dir)")

    sp = sub.add_parser("gen", help="build a synthetic dataset: manifest, tracks and optional raw tensors")
    common(sp)
    sp.add_argument("--raw", action="store_true", help="also dump each clip as a raw tensor file")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train and evaluate one configuration")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the configured test split")
    common(sp, out=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--metrics", help="write metrics to this file")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("matrix", help="run the ablation matrix over modes and seeds")
    common(sp)
    sp.add_argument("--modes", nargs="+", help="modes in table order (default: all ten)")
    sp.add_argument("--seeds", nargs="+", default=["0", "1", "2"])
    sp.add_argument("--table", help="write the comparison table here")
    sp.set_defaults(func=cmd_matrix)

    sp = sub.add_parser("ensemble", help="average softmax outputs of several models")
    common(sp)
    sp.add_argument("checkpoints", nargs="*", help="checkpoint files; trains ensemble.members if omitted")
    sp.set_defaults(func=cmd_ensemble)

    sp = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    sp.add_argument("--max-coords", type=int, default=6, help="coordinates sampled per tensor of the full network")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--skip-network", action="store_true", help="skip the composed network case")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one machine-parsable line, no traceback
        msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"error: {type(exc).__name__}: {' '.join(msg.split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
