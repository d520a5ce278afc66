"""Command-line entry point.

Exit codes: 0 success, 1 input or validation error, 2 fatal backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_INPUT, EXIT_BACKEND = 0, 1, 2

log = logging.getLogger("walkguide")


class InputError(Exception):
    pass


def _read_jsonl(path) -> list[dict]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    rows = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise InputError(f"{path}:{line_no}: expected a JSON object")
        rows.append(rec)
    return rows


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_cfg(args):
    from .config import load_config

    return load_config(getattr(args, "config", None))


def _mock_backend(path):
    from .hplanner.backends import MockBackend

    if path is None:
        return MockBackend()
    try:
        return MockBackend.from_file(path)
    except OSError as exc:
        raise InputError(f"cannot read mock responses {path}: {exc.strerror}") from None
    except (ValueError, AttributeError) as exc:
        raise InputError(f"{path}: bad mock responses file ({exc})") from None


def _backend(args, cfg):
    """Backend instance chosen by --backend, falling back to the config descriptor."""
    from .hplanner.backends import BackendDescriptor, HttpBackend

    desc = cfg.engine.backend
    kind = getattr(args, "backend", None) or desc.kind
    if kind == "mock":
        return _mock_backend(getattr(args, "mock_responses", None) or cfg.mock_responses), replace(desc, kind="mock")
    if desc.kind != "http":
        desc = BackendDescriptor("http", desc.endpoint_url, desc.model_name, desc.api_key_env) if desc.endpoint_url else None
    if desc is None:
        raise InputError("--backend http needs engine.backend.endpoint_url in the config file")
    return HttpBackend(desc), desc


# ---- run ----

def cmd_run(args) -> int:
    from .engine import REMINDER_EMITTED, TAP_DECISION, run_stream

    cfg = _load_cfg(args)
    backend, desc = _backend(args, cfg)
    engine_cfg = replace(cfg.engine, backend=desc)
    evlog = run_stream(
        engine_cfg,
        args.frames,
        args.detections,
        args.tap_model,
        args.out,
        interactive=args.interactive,
        backend=backend,
        stdin=sys.stdin,
    )
    print(f"events: {len(evlog.events)} (TapDecision {evlog.count(TAP_DECISION)}, ReminderEmitted {evlog.count(REMINDER_EMITTED)})")
    print(f"log written to {args.out}")
    return EXIT_OK


# ---- eval ----

def _read_levels(path) -> list:
    """Danger levels, one per line: a letter/name, or JSON with "level"/"gt_state".

    Event logs are accepted too; their TapDecision levels are used.
    """
    from .domain import TriggerState

    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    levels = []
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            if line.startswith("{"):
                rec = json.loads(line)
                if "format" in rec:
                    continue
                if "kind" in rec:
                    if rec["kind"] != "TapDecision":
                        continue
                    rec = rec["payload"]
                value = rec.get("level", rec.get("gt_state"))
                if value is None:
                    raise ValueError("record has no level")
                levels.append(TriggerState.parse(value))
            else:
                levels.append(TriggerState.parse(line))
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise InputError(f"{path}:{line_no}: {exc}") from None
    return levels


def cmd_eval_text(args) -> int:
    from .metrics.text import EvalPair, evaluate_pairs

    rows = _read_jsonl(args.pairs)
    try:
        pairs = [EvalPair(str(r["id"]), str(r["reference"]), str(r["candidate"])) for r in rows]
    except KeyError as exc:
        raise InputError(f"{args.pairs}: pair record missing {exc}") from None
    if not pairs:
        raise InputError(f"{args.pairs}: no pairs")
    report = evaluate_pairs(pairs)
    if args.out:
        _write_json(args.out, report)
    agg = report["aggregate"]
    print(f"{'metric':<8} {'mean':>8}")
    for key in ("rouge1", "rouge2", "rougeL", "tfidf"):
        print(f"{key:<8} {agg[key]:>8.4f}")
    print(f"pairs: {agg['pairs']}")
    return EXIT_OK


def cmd_eval_trf(args) -> int:
    from .metrics.trf import confusion_matrix, per_class_f1, trf_macro_f1

    pred, gt = _read_levels(args.pred), _read_levels(args.gt)
    cfg = _load_cfg(args)
    micro = args.micro or cfg.metrics.micro_f1
    score = trf_macro_f1(pred, gt, micro=micro)
    cm = confusion_matrix(pred, gt)
    f1s = per_class_f1(cm)
    report = {"trf_f1": score, "averaging": "micro" if micro else "macro", "per_class_f1": dict(zip("ABC", f1s)), "confusion": cm.tolist(), "n": len(pred)}
    if args.out:
        _write_json(args.out, report)
    for letter, f in zip("ABC", f1s):
        print(f"F1[{letter}] {f:.4f}")
    print(f"TRF {'micro' if micro else 'macro'}-F1: {score:.4f}")
    return EXIT_OK


def cmd_eval_judge(args) -> int:
    from .metrics.judge import gpt_score

    rows = _read_jsonl(args.samples)
    try:
        samples = [(r["gt"], r["a"], r["b"]) for r in rows]
    except KeyError as exc:
        raise InputError(f"{args.samples}: sample record missing {exc}") from None
    if not samples:
        raise InputError(f"{args.samples}: no samples")
    cfg = _load_cfg(args)
    backend, _ = _backend(args, cfg)
    report = gpt_score(samples, backend, cfg.engine.vlm_timeout_ms)
    if args.out:
        _write_json(args.out, report)

    def fmt(v):
        return "null" if v is None else f"{v:.4f}"

    print(f"win_rate_a {fmt(report['win_rate_a'])}")
    print(f"win_rate_b {fmt(report['win_rate_b'])}")
    print(f"invalid {report['invalid_count']} of {report['comparisons']}")
    return EXIT_OK


# ---- tap ----

def _frames_by_index(frame_dir, fps):
    from .engine import load_frame_dir

    return {f.index: f for f in load_frame_dir(frame_dir, fps)}


def cmd_tap_train(args) -> int:
    from .annotation import load_tap_samples
    from .tap.store import model_save
    from .tap.train import FrameTensorCache, accuracy, predict, tap_train

    cfg = _load_cfg(args)
    tap_cfg = cfg.tap if args.seed is None else replace(cfg.tap, seed=args.seed)
    tc = cfg.train
    epochs = args.epochs or tc.epochs
    samples = load_tap_samples(args.samples)
    if not samples:
        raise InputError(f"{args.samples}: no samples")
    store = FrameTensorCache(_frames_by_index(args.frames, cfg.engine.fps), tap_cfg)

    def progress(epoch, loss, acc):
        log.info("epoch %d loss %.6f running-acc %.4f", epoch, loss, acc)

    result = tap_train(
        samples, store, tap_cfg, epochs, lr=tc.lr, momentum=tc.momentum, clip_norm=tc.clip_norm,
        stop_at_accuracy=tc.stop_at_accuracy, on_epoch=progress,
    )
    model_save(result.model, args.out)
    history = args.history or str(args.out) + ".history.json"
    final_acc = accuracy(predict(result.model, samples, store), [s.gt_state for s in samples])
    _write_json(history, {"loss": result.loss_history, "running_accuracy": result.accuracy_history, "final_train_accuracy": final_acc})
    print(f"epochs: {result.epochs_run}")
    print(f"final loss: {result.loss_history[-1]:.6f}")
    print(f"final train accuracy: {final_acc:.4f}")
    return EXIT_OK


def cmd_tap_gradcheck(args) -> int:
    from .tap.gradcheck import grad_check_report, smooth_sample
    from .tap.model import init_model

    cfg = _load_cfg(args)
    model = init_model(cfg.tap, seed=args.seed)
    sample = smooth_sample(model, args.seed)
    report = grad_check_report(model, sample, eps=args.eps)
    worst = max(report.per_param, key=report.per_param.get)
    err = report.max_relative_error
    print(f"max relative error: {err:.3e} ({worst})")
    if err >= args.tolerance:
        print(f"FAIL: above tolerance {args.tolerance:g}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def cmd_tap_eval(args) -> int:
    from .annotation import load_tap_samples
    from .metrics.trf import trf_macro_f1
    from .tap.store import model_load
    from .tap.train import FrameTensorCache, accuracy, predict

    cfg = _load_cfg(args)
    model = model_load(args.model)
    samples = load_tap_samples(args.samples)
    if not samples:
        raise InputError(f"{args.samples}: no samples")
    store = FrameTensorCache(_frames_by_index(args.frames, cfg.engine.fps), model.config)
    pred = predict(model, samples, store)
    truth = [s.gt_state for s in samples]
    print(f"accuracy: {accuracy(pred, truth):.4f}")
    print(f"TRF macro-F1: {trf_macro_f1(pred, truth):.4f}")
    return EXIT_OK


def cmd_tap_synth(args) -> int:
    from .annotation import save_tap_samples
    from .synthetic import brightness_dataset, write_frame_dir

    samples, frames = brightness_dataset(args.n, n_history=args.n_history, seed=args.seed, size=args.size)
    out = Path(args.out_dir)
    write_frame_dir(out / "frames", [frames[i] for i in sorted(frames)])
    save_tap_samples(samples, out / "samples.jsonl")
    print(f"wrote {len(samples)} samples and {len(frames)} frames to {out}")
    return EXIT_OK


# ---- annotate ----

def cmd_annotate_check(args) -> int:
    from .annotation import parse_annotation, serialize_annotation

    path = Path(args.file)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = parse_annotation(text)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    again = parse_annotation(serialize_annotation(doc))
    counts = doc.code_counts()
    print("events: " + " ".join(f"{c}:{n}" for c, n in counts.items()) if counts else "events: none")
    if again != doc:
        print(f"{path}: serialize/parse round trip is not a fixpoint", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


# ---- parser ----

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="walkguide", description="Walking-guidance stream runtime and evaluation tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="replay a frame directory through the stream engine")
    run.add_argument("--frames", required=True)
    run.add_argument("--detections")
    run.add_argument("--tap-model", required=True)
    run.add_argument("--config")
    run.add_argument("--out", required=True)
    run.add_argument("--interactive", action="store_true", help="read one question line from stdin per tick; ':quit' stops")
    run.add_argument("--backend", choices=("mock", "http"))
    run.add_argument("--mock-responses", help='JSON {"table": {...}, "fallback": "..."} for the mock backend')
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="offline metrics").add_subparsers(dest="eval_command", required=True)
    text = ev.add_parser("text", help="ROUGE-1/2/L and TF-IDF over {id, reference, candidate} lines")
    text.add_argument("--pairs", required=True)
    text.add_argument("--out")
    text.set_defaults(func=cmd_eval_text)
    trf = ev.add_parser("trf", help="F1 between predicted and ground-truth danger levels")
    trf.add_argument("--pred", required=True)
    trf.add_argument("--gt", required=True)
    trf.add_argument("--micro", action="store_true")
    trf.add_argument("--config")
    trf.add_argument("--out")
    trf.set_defaults(func=cmd_eval_trf)
    judge = ev.add_parser("judge", help="order-swapped pairwise judging over {gt, a, b} lines")
    judge.add_argument("--samples", required=True)
    judge.add_argument("--backend", choices=("mock", "http"))
    judge.add_argument("--mock-responses")
    judge.add_argument("--config")
    judge.add_argument("--out")
    judge.set_defaults(func=cmd_eval_judge)

    tap = sub.add_parser("tap", help="train, check and evaluate the trigger predictor").add_subparsers(dest="tap_command", required=True)
    tr = tap.add_parser("train")
    tr.add_argument("--samples", required=True)
    tr.add_argument("--frames", required=True)
    tr.add_argument("--config")
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--history", help="loss history path (default: <out>.history.json)")
    tr.set_defaults(func=cmd_tap_train)
    gc = tap.add_parser("gradcheck")
    gc.add_argument("--config")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tolerance", type=float, default=1e-6)
    gc.set_defaults(func=cmd_tap_gradcheck)
    te = tap.add_parser("eval")
    te.add_argument("--model", required=True)
    te.add_argument("--samples", required=True)
    te.add_argument("--frames", required=True)
    te.add_argument("--config")
    te.set_defaults(func=cmd_tap_eval)
    sy = tap.add_parser("synth", help="write a brightness-coded synthetic training set")
    sy.add_argument("--out-dir", required=True)
    sy.add_argument("--n", type=int, default=300)
    sy.add_argument("--n-history", type=int, default=3)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--size", type=int, default=64)
    sy.set_defaults(func=cmd_tap_synth)

    ann = sub.add_parser("annotate", help="annotation file tools").add_subparsers(dest="annotate_command", required=True)
    chk = ann.add_parser("check", help="parse, re-serialize and re-parse an annotation file")
    chk.add_argument("file")
    chk.set_defaults(func=cmd_annotate_check)
    return p


def main(argv=None) -> int:
    from .hplanner.backends import FATAL_ERRORS, BackendError

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; 2 is reserved for the backend here
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FATAL_ERRORS as exc:
        print(f"error: backend: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except BackendError as exc:
        print(f"error: backend: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing {exc}"
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
