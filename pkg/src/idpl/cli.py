"""``idpl-lab``: data generation, training stages, evaluation, ablations and plots.

Exit codes: 0 success, 1 bad input (validation error, missing file, usage),
2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import torch

from idpl import evalkit, pldg, plots, trainer
from idpl.datamodel import LabeledImage, NumericError, ProbMap, StateError, ValidationError
from idpl.segnet import InterDiscriminator, SegModel, load_checkpoint
from idpl.synthdata import load_label_png, save_dataset, save_image_png, save_label_png

log = logging.getLogger("idpl")

ABLATE_PARAMS = ("alpha", "beta", "lambda", "beta_lambda", "modules")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", help="JSON or TOML file with TrainConfig fields")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="idpl-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic source/target/eval sets")
    _common(p)

    p = sub.add_parser("pretrain", help="source supervision + inter-domain adversarial PT")
    _common(p)

    p = sub.add_parser("idpl", help="PT followed by the intra-domain rounds")
    _common(p)
    p.add_argument("--checkpoint", help="start from this pre-training checkpoint")
    p.add_argument("--samples", type=int, default=3, help="triptych samples to dump")

    for name, text in (("split", "easy/difficult split of the target set"),
                       ("pseudo", "dump pseudo labels with threshold sidecars")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", help="pre-training checkpoint to use")

    p = sub.add_parser("eval", help="score label maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="hyperparameter sweep or module ablation")
    _common(p)
    p.add_argument("--param", required=True, choices=ABLATE_PARAMS)
    p.add_argument("--values", help="comma-separated grid overriding the default")

    p = sub.add_parser("plot", help="render figures for a run directory")
    p.add_argument("run", nargs="?")
    p.add_argument("--out", help="run directory (alternative to the positional)")
    return parser


# --- helpers ---------------------------------------------------------------------


def _config(args) -> trainer.TrainConfig:
    cfg = trainer.load_config(args.config) if args.config else trainer.TrainConfig()
    return cfg.with_overrides(seed=args.seed, rounds=args.rounds, alpha=args.alpha,
                              beta=args.beta, lambda_=args.lambda_)


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: trainer.TrainConfig | None = None) -> Path:
    """manifest.json: the command, its config and a digest of every file under ``out``."""
    files = {}
    for f in sorted(out.rglob("*")):
        if f.is_file() and f.name != "manifest.json":
            files[f.relative_to(out).as_posix()] = _sha256(f)
    data = {"command": command, "files": files}
    if cfg is not None:
        data["config"] = cfg.to_dict()
    return _write_json(out / "manifest.json", data)


def _series(history: list[dict]) -> dict:
    keys = sorted({k for h in history for k in h if k != "step"})
    return {k: [h.get(k) for h in history] for k in keys}


def _model_from(args, cfg, bench) -> SegModel:
    if getattr(args, "checkpoint", None):
        path = Path(args.checkpoint)
        if not path.exists():
            raise ValidationError(f"checkpoint {path} not found")
        model = SegModel(cfg.num_classes, cfg.height, cfg.width, cfg.features)
        load_checkpoint(path, {"gen": model})
        return model
    return trainer.pretrained(cfg, bench)


def dump_samples(state: trainer.IDPLState, monitor: trainer.HiddenLabelMonitor, k: int,
                 out: Path) -> None:
    """Image, prediction, pseudo label (final thresholds) and truth for ``k`` eval images."""
    out.mkdir(parents=True, exist_ok=True)
    samples = monitor.eval_samples(k)
    if not samples:
        return
    probs, _ = trainer.predict(state.model, [im for im, _ in samples])
    theta = state.thresholds.global_
    for (im, truth), p in zip(samples, probs):
        save_image_png(out / f"{im.id}_image.png", im.pixels)
        save_label_png(out / f"{im.id}_pred.png", p.argmax(-1))
        save_label_png(out / f"{im.id}_pseudo.png",
                       pldg.assign_pseudo_labels(ProbMap(p), theta).labels)
        save_label_png(out / f"{im.id}_truth.png", truth)


# --- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    bench = trainer.build_benchmark(cfg)
    save_dataset(bench.source, out / "source", bench.scene)
    save_dataset(bench.target, out / "target", bench.scene)
    # hidden target labels live outside the training tree, for evaluation only
    truth_dir = out / "target_truth"
    truth_dir.mkdir(parents=True, exist_ok=True)
    for iid, labels in sorted(bench.monitor.export_target_truth().items()):
        save_label_png(truth_dir / f"{iid}.png", labels)
    save_dataset([LabeledImage(im.pixels, lab, id=im.id)
                  for im, lab in bench.monitor.eval_samples(cfg.n_eval)],
                 out / "eval", bench.scene)
    write_manifest(out, "gen-data", cfg)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench = trainer.benchmark_for(cfg)
    history: list = []
    model = trainer.pretrain_pt(bench.source, bench.target, cfg, history=history, out_dir=out,
                                discriminator=InterDiscriminator(cfg.num_classes))
    _write_json(out / "metrics.json", {"pt": bench.monitor.evaluate(model)})
    _write_json(out / "history.json", {"pretrain": _series(history)})
    write_manifest(out, "pretrain", cfg)
    return 0


def cmd_idpl(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench = trainer.benchmark_for(cfg)
    init = _model_from(args, cfg, bench) if args.checkpoint else None
    result, state = trainer.run_experiment(cfg, bench, out_dir=out, init_model=init)
    _write_json(out / "metrics.json", {"pt": result.pt_metrics, "final": result.final_metrics})
    _write_json(out / "rounds.json", [r.to_json() for r in result.reports])
    idpl_hist: dict = {}
    for r in result.reports:
        for k, v in r.losses.items():
            idpl_hist.setdefault(k, []).extend(v)
    _write_json(out / "history.json",
                {"pretrain": _series(result.pt_history), "idpl": idpl_hist})
    if state.thresholds is not None:
        _write_json(out / "thresholds.json", state.thresholds.to_json())
        dump_samples(state, bench.monitor, args.samples, out / "samples")
    write_manifest(out, "idpl", cfg)
    return 0


def _stage(args):
    cfg = _config(args)
    bench = trainer.benchmark_for(cfg)
    model = _model_from(args, cfg, bench)
    state = trainer.init_idpl_state(model, cfg)
    return cfg, bench, trainer.pseudo_stage(state, bench.target, cfg)


def cmd_split(args) -> int:
    cfg, _, stage = _stage(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(stage.split.dumps() + "\n")
    write_manifest(out, "split", cfg)
    return 0


def cmd_pseudo(args) -> int:
    cfg, bench, stage = _stage(args)
    out = Path(args.out)
    pdir = out / "pseudo"
    pdir.mkdir(parents=True, exist_ok=True)
    sidecar = {}
    for iid, pm in sorted(stage.pseudo.items()):
        save_label_png(pdir / f"{iid}.png", pm.labels)
        sidecar[iid] = {"fused_thresholds": [round(float(v), 10) for v in stage.fused[iid]],
                        "coverage": round(float(pm.coverage), 10)}
    _write_json(pdir / "thresholds.json", sidecar)
    _write_json(out / "pseudo_quality.json", bench.monitor.pseudo_quality(stage.pseudo))
    write_manifest(out, "pseudo", cfg)
    return 0


def evaluate_dirs(pred_dir, truth_dir, num_classes: int | None = None) -> dict:
    """Metrics for label PNGs in ``pred_dir`` matched by file name to ``truth_dir``."""
    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    for d in (pred_dir, truth_dir):
        if not d.is_dir():
            raise ValidationError(f"{d} is not a directory")
    truths = sorted(truth_dir.glob("*.png"))
    if not truths:
        raise ValidationError(f"no label PNGs in {truth_dir}")
    pairs = []
    for t in truths:
        p = pred_dir / t.name
        if not p.exists():
            raise ValidationError(f"no prediction for {t.name}")
        pairs.append((load_label_png(p), load_label_png(t)))
    if num_classes is None:
        manifest = truth_dir / "dataset.json"
        if manifest.exists() and "C" in json.loads(manifest.read_text()):
            num_classes = json.loads(manifest.read_text())["C"]
        else:
            num_classes = trainer.TrainConfig().num_classes
    cm = evalkit.ConfusionMatrix(num_classes)
    for pred, truth in pairs:
        evalkit.accumulate(cm, pred, truth)
    names = [f"class_{c}" for c in range(num_classes)]
    if num_classes == len(trainer.TrainConfig().scene.class_names):
        names = list(trainer.TrainConfig().scene.class_names)
    return evalkit.metrics_dict(cm, names)


def cmd_eval(args) -> int:
    metrics = evaluate_dirs(args.pred, args.truth, args.num_classes)
    text = evalkit.dumps_metrics(metrics)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text)
        write_manifest(out, "eval")
    return 0


def ablation_rows(cfg: trainer.TrainConfig, param: str, values=None) -> list[dict]:
    if param == "modules":
        return trainer.module_ablation(cfg)
    if param == "beta_lambda":
        bs = values or trainer.SWEEP_GRIDS["beta"]
        ls = values or trainer.SWEEP_GRIDS["lambda"]
        grid = [{"beta": b, "lambda": l} for b in bs for l in ls]
        return trainer.ablation_suite(cfg, grid)
    return trainer.sweep(cfg, param, values)


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def cmd_ablate(args) -> int:
    cfg = _config(args)
    values = None
    if args.values:
        try:
            values = [float(v) for v in args.values.split(",")]
        except ValueError as exc:
            raise ValidationError(f"bad --values: {exc}") from None
    rows = ablation_rows(cfg, args.param, values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = ablation_csv(rows)
    (out / f"ablate_{args.param}.csv").write_text(text)
    sys.stdout.write(text)
    write_manifest(out, "ablate", cfg)
    return 0


def cmd_plot(args) -> int:
    run = args.run or args.out
    if run is None:
        raise UsageError("plot needs a run directory")
    for path in plots.emit_plots(run):
        print(path)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "idpl": cmd_idpl,
    "split": cmd_split,
    "pseudo": cmd_pseudo,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def _limit_threads():
    n = os.environ.get("IDPL_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise ValidationError(f"IDPL_THREADS must be an integer, got {n!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _limit_threads()
        return COMMANDS[args.command](args)
    except (ValidationError, TypeError, FileNotFoundError) as exc:
        print(f"idpl-lab: error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, StateError, RuntimeError) as exc:
        print(f"idpl-lab: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
