"""Command-line entry point: ``meanflow-dance <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path


from . import checkpoint as ckpt_io
from .autodiff import ParameterStore
from .config import ConfigError, RunConfig, deep_merge, load_config
from .data import (DatasetRecord, MotionSequence, RecordFormatError, load_dataset, load_record,
                   save_dataset, save_record, synth_dataset)
from .kinematics import PRESETS, get_skeleton
from .metrics import evaluate
from .network import VelocityNet
from .sampler import (EDIT_MODES, SOLVERS, EditSpecError, SampleConfig, boundary_jerk, edit_sample,
                      mask_edges, parse_edit_spec, sample)
from .training import Adan, Ema, Trainer, parse_log_line, stack_windows

log = logging.getLogger("meanflow_dance")

FCL_DEFAULT = 0.1
CURVE_COLUMNS = ("step", "l_mf", "l_rec", "l_pos", "l_vel", "total")


class CliError(Exception):
    pass


def _range(text: str):
    try:
        a, b = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B, got {text!r}") from None
    if not 0 < a <= b:
        raise argparse.ArgumentTypeError("bpm range needs 0 < A <= B")
    return a, b


def _solver(text: str) -> str:
    if text not in SOLVERS:
        raise argparse.ArgumentTypeError(f"invalid solver {text!r}; choose from {{{', '.join(SOLVERS)}}}")
    return text


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    skel = get_skeleton(args.skeleton)
    recs = synth_dataset(args.sequences, args.frames, skel, args.seed, args.bpm_range, args.genres)
    save_dataset(recs, args.out)
    print(f"wrote {len(recs)} records of {args.frames} frames to {args.out}")
    return 0


def _run_config(args, base: dict | None = None) -> RunConfig:
    overrides = {}
    train = {}
    if args.steps is not None:
        train["steps"] = args.steps
    if args.cfg_dropout is not None:
        train["cfg_dropout"] = args.cfg_dropout
    if args.jvp_mode is not None:
        train["jvp_mode"] = args.jvp_mode
    if args.batch_size is not None:
        train["batch_size"] = args.batch_size
    if train:
        overrides["train"] = train
    if args.fcl is not None:
        overrides["loss"] = {"fcl": args.fcl}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.skeleton is not None:
        overrides["skeleton"] = args.skeleton
    if base is not None and args.config is None:
        overrides = deep_merge(base, overrides)
    return load_config(args.config, overrides, paper_scale=args.paper_scale)


def cmd_train(args) -> int:
    base = None
    if args.resume:
        resumed = ckpt_io.load_checkpoint(args.resume)
        base = resumed.meta.get("config")
        if base is None and args.config is None:
            raise CliError(f"{args.resume} carries no run config; pass --config")
    run = _run_config(args, base)
    data_dir = args.data or run.data.get("train")
    if not data_dir:
        raise CliError("no training data: pass --data or set data.train in the config")
    records = load_dataset(data_dir, run.skeleton.motion_dim)
    if not records:
        raise CliError(f"no records in {data_dir}")
    data = stack_windows(records, run.train.window, run.train.stride)
    model = VelocityNet(run.network, seed=run.seed)
    opt = ema = None
    if args.resume:
        ckpt_io.check_registry(resumed.params, run.network)
        params = ParameterStore()
        for name, arr in resumed.params.items():
            params[name] = arr.copy()
        model = VelocityNet(run.network, params)
        opt = Adan(run.train.lr, run.train.betas, run.train.weight_decay)
        opt.load_state_arrays(resumed.optimizer or {}, resumed.optimizer_step)
        shadow = ParameterStore()
        for name, arr in (resumed.ema or resumed.params).items():
            shadow[name] = arr.copy()
        ema = Ema(shadow, run.train.ema_decay, run.train.ema_warmup, resumed.ema_updates)
    trainer = Trainer(model, data, run.skeleton, run.train, run.loss, opt, ema)
    meta = {"config": run.to_dict(), "cfg_dropout": run.train.cfg_dropout}

    def save(tr):
        ckpt_io.save_checkpoint(ckpt_io.from_trainer(tr, meta), args.out)

    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    with open(log_path, "a" if args.resume else "w") as fh:
        trainer.run(log_file=fh, on_checkpoint=save)
    save(trainer)
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained to step {trainer.step}; final total loss {last.get('total', float('nan')):.6g}; "
          f"checkpoint {args.out}")
    return 0


def _load_model(args):
    ck = ckpt_io.load_checkpoint(args.ckpt)
    model = ckpt_io.build_model(ck, use_ema=args.ema)
    conf = ck.meta.get("config", {})
    skel = get_skeleton(conf.get("skeleton", "toy13"))
    if skel.motion_dim != ck.network.motion_dim:
        raise CliError(f"checkpoint motion_dim {ck.network.motion_dim} does not match skeleton {skel.name}")
    return ck, model, skel


def cmd_sample(args) -> int:
    ck, model, skel = _load_model(args)
    if args.guidance is not None and not ck.meta.get("cfg_dropout", 0):
        log.warning("--guidance used with a checkpoint trained without --cfg-dropout; "
                    "the null condition was never learned")
    rec = load_record(args.music)
    cfg = SampleConfig(args.steps, args.solver, args.seed, args.guidance)
    motion = sample(model, rec.music.features, rec.music.genre, cfg)[0]
    save_record(DatasetRecord(rec.music, MotionSequence(motion), rec.id), args.out)
    print(f"wrote {args.out} ({motion.shape[0]} frames, {cfg.solver}, {cfg.steps} steps)")
    return 0


def cmd_edit(args) -> int:
    ck, model, skel = _load_model(args)
    rec = load_record(args.music, skel.motion_dim)
    spec_path = Path(args.edit)
    edit = parse_edit_spec(spec_path.read_text(), skel, rec.T, base_dir=spec_path.parent,
                           default_constraint=rec.motion.frames, mode=args.mode)
    cfg = SampleConfig(args.steps, "euler", args.seed, args.guidance, args.fresh_noise)
    motion = edit_sample(model, rec.music.features, rec.music.genre, cfg, edit)[0]
    save_record(DatasetRecord(rec.music, MotionSequence(motion), rec.id), args.out)
    edges = mask_edges(edit.frame_mask)
    jerk = boundary_jerk(motion, edit.frame_mask, skel)
    report = Path(args.jerk_report) if args.jerk_report else Path(str(args.out) + ".jerk.txt")
    report.write_text(f"mode = {edit.mode}\nedges = {' '.join(map(str, edges.tolist()))}\n"
                      f"boundary_jerk = {jerk:.6g}\n")
    print(f"wrote {args.out}; boundary jerk {jerk:.6g} m/s at {len(edges)} mask edges")
    return 0


def cmd_eval(args) -> int:
    skel = get_skeleton(args.skeleton)
    report = evaluate(args.gen, args.ref, skel, out=args.out, csv_path=args.csv)
    for k, v in report.items():
        print(f"{k} = {v:.6g}")
    return 0


def cmd_curves(args) -> int:
    rows = []
    for line in Path(args.log).read_text().splitlines():
        parsed = parse_log_line(line.strip())
        if parsed is not None:
            rows.append(parsed)
    if not rows:
        raise CliError(f"{args.log} has no loss lines")
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([r.get(c, "") for c in CURVE_COLUMNS])
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meanflow-dance", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic beat-locked dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--sequences", type=int, default=64)
    g.add_argument("--frames", type=int, default=240)
    g.add_argument("--bpm-range", type=_range, default=(90.0, 150.0))
    g.add_argument("--genres", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--skeleton", choices=sorted(PRESETS), default="toy13")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write an FLDN checkpoint")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--fcl", type=float, nargs="?", const=FCL_DEFAULT, default=None,
                   help=f"enable the foot contact loss (weight, default {FCL_DEFAULT})")
    t.add_argument("--cfg-dropout", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--skeleton", choices=sorted(PRESETS))
    t.add_argument("--jvp-mode", choices=("exact", "fd"))
    t.add_argument("--paper-scale", action="store_true",
                   help="latent 512, 4/8 layers, d_state 16, batch 128, 24-joint skeleton")
    t.add_argument("--log")
    t.set_defaults(func=cmd_train)

    def model_args(q):
        q.add_argument("--ckpt", required=True)
        q.add_argument("--music", required=True)
        q.add_argument("--steps", type=int, default=20)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--out", required=True)
        q.add_argument("--ema", action="store_true", help="use EMA shadow weights")
        q.add_argument("--guidance", type=float)

    s = sub.add_parser("sample", help="generate motion for a music record")
    model_args(s)
    s.add_argument("--solver", type=_solver, default="euler")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("edit", help="constraint-aware sampling from an edit spec")
    model_args(e)
    e.add_argument("--edit", required=True)
    e.add_argument("--mode", choices=EDIT_MODES)
    e.add_argument("--fresh-noise", action="store_true")
    e.add_argument("--jerk-report")
    e.set_defaults(func=cmd_edit)

    v = sub.add_parser("eval", help="metric report for generated vs reference records")
    v.add_argument("--gen", required=True)
    v.add_argument("--ref", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--csv")
    v.add_argument("--skeleton", choices=sorted(PRESETS), default="toy13")
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("curves", help="loss curves from a training log as CSV")
    c.add_argument("--log", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, ConfigError, EditSpecError, RecordFormatError, ckpt_io.CheckpointError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
