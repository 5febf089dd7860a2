"""Command-line entry points: gen, train, track, eval, viz.

Exit status is 0 on success, 1 for usage errors (unknown flags, missing
arguments) and 2 when an input file is missing or malformed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .metrics import evaluate
from .nets import SearchTrackNet
from .scenegen import (
    MotRecord,
    SceneConfig,
    find_sequences,
    generate,
    load_sequence,
    read_mot,
    records_to_gt,
    render_overlay,
    save_sequence,
    write_mot,
    write_ppm,
)
from .searcher import write_pgm
from .tracker import ResultEntry, TrackerConfig, TrainConfig, Tracker, make_train_sequence, train

log = logging.getLogger("searchtrack")


class DataError(Exception):
    """Bad or missing input data; reported without a traceback."""


def _cmd_gen(args) -> None:
    cfg = SceneConfig.from_json(args.config)
    out = Path(args.out)
    if args.num_sequences == 1:
        save_sequence(out, *generate(cfg), cfg)
        return
    for i in range(args.num_sequences):
        c = SceneConfig.from_dict({**json.loads(cfg.to_json()), "seed": cfg.seed + i})
        save_sequence(out / f"seq{i:04d}", *generate(c), c)


def _cmd_train(args) -> None:
    seqs = [make_train_sequence(*load_sequence(p)) for p in find_sequences(args.data)]
    log.info("training on %d sequences", len(seqs))
    model = SearchTrackNet(num_classes=1, seed=args.seed)
    cfg = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        use_motion=not args.no_motion,
        pairs_per_epoch=args.pairs_per_epoch,
    )
    train(model, seqs, cfg)
    model.save(args.out)


def _single_sequence(data) -> Path:
    seqs = find_sequences(data)
    if len(seqs) != 1:
        raise DataError(f"{data}: expected one sequence, found {len(seqs)}")
    return seqs[0]


def _cmd_track(args) -> None:
    model = SearchTrackNet.load(args.model)
    frames, _ = load_sequence(_single_sequence(args.data))
    hook = None
    if args.dump_responses:
        dump = Path(args.dump_responses)
        dump.mkdir(parents=True, exist_ok=True)

        def hook(frame_index, track_id, response):
            write_pgm(dump / f"{frame_index + 1:06d}_{track_id:04d}.pgm", response)

    tracker = Tracker(model, TrackerConfig(use_motion=not args.no_motion), on_response=hook)
    records = []
    for fr in frames:
        for e in tracker.step(fr).entries:
            records.append(MotRecord(fr.frame_index + 1, e.track_id, *e.box, conf=e.score))
    write_mot(args.out, records)


def _sequence_length(gt_path: Path, records) -> int:
    cfg_path = gt_path.parent / "config.json"
    if cfg_path.exists():
        return SceneConfig.from_json(cfg_path).length
    return max((r.frame for r in records), default=0)


def _annotations(records, n, visible_only):
    frames = records_to_gt(records, n)
    return [[(o.obj_id, o.box) for o in rows if o.visible or not visible_only] for rows in frames]


def _cmd_eval(args) -> None:
    gt_path = Path(args.gt)
    gt_recs, res_recs = read_mot(gt_path), read_mot(args.results)
    n = _sequence_length(gt_path, gt_recs)
    last = max((r.frame for r in res_recs), default=0)
    if last > n:
        raise DataError(f"results reach frame {last} but the ground truth covers frames 1..{n}")
    # conf 0 marks objects whose center has left the image; they are not scored
    report = evaluate(_annotations(gt_recs, n, True), _annotations(res_recs, n, False))
    text = json.dumps(report.to_dict(), indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)


def _cmd_viz(args) -> None:
    frames, gt = load_sequence(_single_sequence(args.data))
    results = [[] for _ in frames]
    for r in read_mot(args.results):
        if r.frame > len(frames):
            raise DataError(f"results reach frame {r.frame} but the sequence has {len(frames)} frames")
        results[r.frame - 1].append(ResultEntry(r.obj_id, (r.left, r.top, r.width, r.height), r.conf))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fr, res_rows, gt_rows in zip(frames, results, gt):
        write_ppm(out / f"{fr.frame_index + 1:06d}.ppm", render_overlay(fr, res_rows, gt_rows))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="searchtrack", description="Synthetic multi-object tracking toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic sequences")
    g.add_argument("--config", required=True, help="SceneConfig JSON file")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--num-sequences", type=int, default=1,
                   help="write N sequences (seeds seed..seed+N-1) into numbered subdirectories")
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="train a model on generated sequences")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, required=True)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path (.stck)")
    t.add_argument("--pairs-per-epoch", type=int, default=None)
    t.add_argument("--no-motion", action="store_true", help="zero the motion channels")
    t.set_defaults(func=_cmd_train)

    k = sub.add_parser("track", help="run the tracker on one sequence")
    k.add_argument("--model", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--out", required=True, help="results CSV")
    k.add_argument("--no-motion", action="store_true", help="zero the motion channels")
    k.add_argument("--dump-responses", metavar="DIR", help="write every search response map as PGM")
    k.set_defaults(func=_cmd_track)

    e = sub.add_parser("eval", help="score results against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--results", required=True)
    e.add_argument("--report", help="write the metric report as JSON")
    e.set_defaults(func=_cmd_eval)

    v = sub.add_parser("viz", help="draw result boxes over the frames")
    v.add_argument("--data", required=True)
    v.add_argument("--results", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=_cmd_viz)
    return p


EXIT_USAGE = 1
EXIT_DATA = 2


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 after --help and 2 after printing a usage error
        return 0 if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (DataError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"searchtrack {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
