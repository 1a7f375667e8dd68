"""Command line entry point: ``python -m hoifit <command> ...``.

Every path is resolved against ``--workdir``. Final artifacts are written into a
temporary sibling and moved into place only on success. Failures exit nonzero and
print one JSON line ``{"status": "error", "command": ..., "type": ..., "message": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__


def _path(args, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


class _Staged:
    """Directory or file written under a temporary name and renamed on success."""

    def __init__(self, target: Path, is_dir: bool = True):
        self.target = target
        self.is_dir = is_dir

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        if self.is_dir:
            self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        else:
            fd, name = tempfile.mkstemp(prefix=f".{self.target.name}.", dir=self.target.parent)
            os.close(fd)
            self.tmp = Path(name)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            if self.is_dir:
                shutil.rmtree(self.tmp, ignore_errors=True)
            else:
                self.tmp.unlink(missing_ok=True)
            return False
        if self.is_dir and self.target.exists():
            shutil.rmtree(self.target)
        os.replace(self.tmp, self.target)
        return False


def _fit_config(args, seed):
    from .fitting import FitConfig
    from .io import read_config

    values = read_config(_path(args, args.config)) if args.config else {}
    values.setdefault("seed", str(seed))
    return FitConfig.from_dict(values)


def _provider_factory(args):
    from .pipeline import oracle_provider

    if args.provider == "oracle":
        return oracle_provider
    from .fieldnet import LearnedFieldProvider, load_checkpoint

    path = _path(args, args.provider)
    if path.is_dir():  # a `train` output directory
        path = path / "decoder.bin"
    params, tcfg = load_checkpoint(path)
    return lambda frame: LearnedFieldProvider(params, frame.cloud, tcfg)


def _noise(args):
    from .synth import NoiseModel

    return NoiseModel(args.sigma, args.dropout)


def _synth_frames(kind, seed, count, noise, max_tries=20):
    """``count`` scenes from consecutive seeds, skipping unsatisfiable ones."""
    from .errors import UnsatisfiableScene
    from .synth import generate_scene, occluded_grasp_spec, random_scene_spec

    frames, s = [], seed
    while len(frames) < count:
        for _ in range(max_tries):
            try:
                if kind == "occluded_grasp":
                    spec = occluded_grasp_spec(s, sigma=noise.sigma, dropout=noise.dropout)
                else:
                    spec = random_scene_spec(kind, s, noise=noise)
                frames.append(generate_scene(spec))
                s += 1
                break
            except UnsatisfiableScene:
                s += 1
        else:
            raise RuntimeError(f"no satisfiable {kind} scene in {max_tries} consecutive seeds")
    return frames


# ---------------------------------------------------------------------------- commands


def cmd_synth(args) -> dict:
    from .manifest import write_frame, write_sequence
    from .synth import make_sequence, random_scene_spec

    out = _path(args, args.out)
    noise = _noise(args)
    with _Staged(out) as tmp:
        if args.frames > 1:
            frames = make_sequence(random_scene_spec(args.kind, args.seed, noise=noise), args.script,
                                   args.frames)
            write_sequence(tmp, frames)
        elif args.count > 1:
            frames = _synth_frames(args.kind, args.seed, args.count, noise)
            write_sequence(tmp, frames)
        else:
            frames = _synth_frames(args.kind, args.seed, 1, noise)
            write_frame(tmp, frames[0])
    return {"out": str(out), "frames": len(frames)}


def _load_frames(path: Path):
    from .manifest import is_sequence, read_frame, read_sequence

    return read_sequence(path) if is_sequence(path) else [read_frame(path)]


def cmd_train(args) -> dict:
    from .fieldnet import TrainConfig, save_checkpoint, train, write_loss_curve
    from .io import read_config, write_config

    values = read_config(_path(args, args.config)) if args.config else {}
    values.setdefault("seed", str(args.seed))
    if args.steps is not None:
        values["steps"] = str(args.steps)
    cfg = TrainConfig.from_dict(values)
    if args.data:
        frames = _load_frames(_path(args, args.data))
    else:
        frames = []
        kinds = ("hand_on_top", "table", "lift", "grasp")
        per = -(-args.scenes // len(kinds))
        for k, kind in enumerate(kinds):
            frames += _synth_frames(kind, args.seed + 1000 * k, per, _noise(args))
        frames = frames[:args.scenes]
    res = train(frames, cfg)
    out = _path(args, args.out)
    with _Staged(out) as tmp:
        save_checkpoint(tmp / "decoder.bin", res.params, cfg)
        write_loss_curve(tmp / "loss.csv", res.curve)
        write_config(tmp / "train.cfg", {k: v for k, v in vars(cfg).items()})
    last = res.curve[-1] if res.curve else {}
    return {"out": str(out), "scenes": len(frames), "final_loss": last.get("total")}


def cmd_fit(args) -> dict:
    from .manifest import read_frame, write_result
    from .fitting import fit_frame

    frame = read_frame(_path(args, args.frame))
    cfg = _fit_config(args, args.seed)
    provider = _provider_factory(args)(frame)
    res = fit_frame(frame, provider, frame.template, frame.object_template, config=cfg)
    out = _path(args, args.out)
    with _Staged(out) as tmp:
        write_result(tmp, res, frame.template, frame.object_template)
    return {"out": str(out), "final_energy": res.final_energy, "contacts": len(res.contacts),
            "flags": res.flags}


def cmd_track(args) -> dict:
    from .manifest import read_sequence, write_result
    from .metrics import write_metrics_csv
    from .pipeline import track_sequence

    frames = read_sequence(_path(args, args.sequence))
    if not frames:
        raise ValueError("sequence has no frames")
    cfg = _fit_config(args, args.seed)
    out = _path(args, args.out)
    tr = track_sequence(frames, _provider_factory(args), frames[0].template,
                        frames[0].object_template, cfg, warm_start=not args.no_warm_start,
                        fallback=not args.no_fallback, evaluate=True)
    with _Staged(out) as tmp:
        for t, res in enumerate(tr.results):
            if res is not None:
                write_result(tmp / f"frame_{t:04d}", res, frames[0].template, frames[0].object_template)
        write_metrics_csv(tmp / "metrics.csv", tr.reports)
        with open(tmp / "frames.csv", "w") as fh:
            fh.write("frame,init,error\n")
            for t, mode in enumerate(tr.init_modes):
                fh.write(f"{t},{mode},{json.dumps(tr.errors.get(t, ''))}\n")
    agg = tr.aggregate
    return {"out": str(out), "frames": len(frames), "failed": sorted(tr.errors),
            "body_v2v": agg.body_v2v if agg else None, "object_v2v": agg.object_v2v if agg else None}


def cmd_eval(args) -> dict:
    from .bodymodel import BodyEvaluation
    from .manifest import is_sequence, read_frame, read_result
    from .metrics import aggregate, evaluate_frame, write_metrics_csv

    gt_root = _path(args, args.gt)
    res_root = _path(args, args.result)
    if is_sequence(gt_root):
        pairs = [(gt_root / d.name, res_root / d.name)
                 for d in sorted(gt_root.iterdir()) if d.name.startswith("frame_")]
    else:
        pairs = [(gt_root, res_root)]
    reports = []
    for t, (g, r) in enumerate(pairs):
        gt = read_frame(g)
        if (r / "result.txt").exists():
            body, pose, idx = read_result(r, gt.template)
            body_mesh = BodyEvaluation(gt.template, body, grad=False).mesh()
            obj_mesh = gt.object_template.transformed(pose.R, pose.t)
        elif (r / "params.txt").exists():
            fr = read_frame(r)
            body_mesh, obj_mesh, idx = fr.body_mesh, fr.object_mesh, fr.contacts.indices
        else:
            raise FileNotFoundError(f"{r}: neither a result nor a frame manifest")
        reports.append(evaluate_frame(body_mesh, obj_mesh, gt.body_mesh, gt.object_mesh,
                                      gt.contacts.labels, idx, frame=t, seed=args.seed))
    out = _path(args, args.out)
    with _Staged(out, is_dir=False) as tmp:
        write_metrics_csv(tmp, reports)
    agg = aggregate(reports)
    return {"out": str(out), **{k: v for k, v in agg.row().items() if k != "frame"}}


def cmd_annotate(args) -> dict:
    from .io import read_obj
    from .manifest import write_contacts
    from .metrics import annotate_contacts

    body = read_obj(_path(args, args.body))
    obj = read_obj(_path(args, args.object))
    labels = annotate_contacts(body, obj, args.threshold)
    out = _path(args, args.out)
    with _Staged(out, is_dir=False) as tmp:
        write_contacts(tmp, labels)
    return {"out": str(out), "contacts": int(labels.labels.sum()), "vertices": len(labels.labels)}


def cmd_gradcheck(args) -> dict:
    from .gradcheck import check_all

    rep = check_all(n_states=args.states, seed=args.seed)
    worst = rep.worst()
    for k, v in worst.items():
        print(f"{k:18s} max_rel_err={v:.3e} {'ok' if v < args.tol else 'FAIL'}")
    result = {"max_rel_err": rep.max_error(), "seconds": round(rep.seconds, 1)}
    if not rep.passed(args.tol):
        raise GradientMismatch(f"max relative error {rep.max_error():.3e} exceeds {args.tol:g}")
    return result


class GradientMismatch(RuntimeError):
    pass


# ------------------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hoifit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="root for all relative paths")
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    sub = ap.add_subparsers(dest="command", required=True)

    noise = argparse.ArgumentParser(add_help=False)
    noise.add_argument("--sigma", type=float, default=0.005, help="depth noise (m)")
    noise.add_argument("--dropout", type=float, default=0.1, help="uniform point dropout")

    p = sub.add_parser("synth", parents=[common, noise], help="generate a scene or sequence manifest")
    p.add_argument("--kind", default="grasp",
                   choices=["hand_on_top", "table", "lift", "grasp", "far", "occluded_grasp"])
    p.add_argument("--frames", type=int, default=1, help="sequence length (uses --script)")
    p.add_argument("--script", default="lift_box", choices=["static", "lift_box"])
    p.add_argument("--count", type=int, default=1, help="independent scenes from consecutive seeds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, noise], help="train the field decoders")
    p.add_argument("--data", help="frame manifest or directory of frames; default synthesizes")
    p.add_argument("--scenes", type=int, default=50, help="synthetic scenes when --data is absent")
    p.add_argument("--config", help="key = value training config")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, helptext in (("fit", "fit one frame"), ("track", "fit a sequence")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name == "fit":
            p.add_argument("--frame", required=True)
        else:
            p.add_argument("--sequence", required=True)
            p.add_argument("--no-warm-start", action="store_true")
            p.add_argument("--no-fallback", action="store_true")
        p.add_argument("--provider", default="oracle", help="'oracle' or a decoder checkpoint path")
        p.add_argument("--config", help="key = value fitting config")
        p.add_argument("--out", required=True)
        p.set_defaults(func=cmd_fit if name == "fit" else cmd_track)

    p = sub.add_parser("eval", parents=[common], help="metrics of a result against ground truth")
    p.add_argument("--result", required=True, help="result directory (or a frame manifest)")
    p.add_argument("--gt", required=True, help="ground-truth frame or sequence manifest")
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("annotate", parents=[common], help="contact labels from two meshes")
    p.add_argument("--body", required=True)
    p.add_argument("--object", required=True)
    p.add_argument("--threshold", type=float, default=0.02)
    p.add_argument("--out", default="contacts.csv")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--states", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return str(x)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code:
            print(json.dumps({"status": "error", "command": None, "type": "UsageError",
                              "message": "invalid command line"}), file=sys.stderr)
        return int(exc.code or 0)
    try:
        if not Path(args.workdir).is_dir():
            raise NotADirectoryError(f"workdir {args.workdir!r} does not exist")
        info = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        print(json.dumps({"status": "error", "command": args.command, "type": type(exc).__name__,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **info}, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
