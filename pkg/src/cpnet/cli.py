"""Command-line workbench: gen-data, train, eval, analyze, ablate.

All outputs go under ``--run-dir``::

    <run>/data/manifest.txt, data/<video>/frame_*.png, data/digest.txt
    <run>/models/<label>/checkpoint.bin   (params + Adam moments)
    <run>/models/<label>/model.bin        (params + config block)
    <run>/models/<label>/train_log.txt
    <run>/eval/<label>/scores.csv, roc.csv, report.txt
    <run>/analyze/<label>.txt, <label>.kv, ratios.txt
    <run>/ablate/summary.txt
    <run>/<command>.config.ini            (effective config)

Errors exit nonzero with a single ``error[<category>]: <message>`` line
on stderr. Categories: usage, config, data, train, io, internal.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import shutil
import sys
from pathlib import Path

from . import complexity, scoring, synth, training
from .config import ConfigError, RunConfig, load_config
from .models import VARIANTS, build_cpnet, load_model, save_model, variant_label

log = logging.getLogger("cpnet")

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "train": 5, "io": 6, "internal": 1}
WINDOW = 4


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------


def _run_dir(args) -> Path:
    return Path(args.run_dir)


def _config(args, command: str) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"data.seed={args.seed}", f"train.seed={args.seed}", f"model.init_seed={args.seed}"]
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if getattr(args, "videos", None) is not None:
        overrides.append(f"data.n_train={args.videos}")
    cfg = load_config(args.config, overrides)
    cfg.write(_run_dir(args) / f"{command}.config.ini")
    return cfg


def _variant(args) -> tuple[str, bool]:
    name = args.variant
    shift = args.shift == "on" or (args.shift is None and name != "baseline")
    if name == "baseline" and shift:
        raise CliError("usage", "the baseline has no parallel paths; --shift on is not applicable")
    return name, shift


def _digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "digest.txt":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _manifest(run: Path) -> Path:
    path = run / "data" / "manifest.txt"
    if not path.exists():
        raise CliError("data", f"no dataset at {path}; run gen-data first")
    return path


def _train_clips(run: Path, cfg: RunConfig):
    h, w = cfg.get("model", "height"), cfg.get("model", "width")
    videos = synth.load_manifest_videos(_manifest(run), "train", (h, w))
    clips = [c for _, v in videos for c in training.make_clips(v, WINDOW)]
    if not clips:
        raise CliError("data", "training videos yield no clips")
    return clips


def _test_videos(run: Path, cfg: RunConfig):
    h, w = cfg.get("model", "height"), cfg.get("model", "width")
    videos = synth.load_manifest_videos(_manifest(run), "test", (h, w))
    if not videos:
        raise CliError("data", "manifest lists no test videos")
    return videos


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def generate_dataset(run: Path, cfg: RunConfig, force: bool = False) -> str:
    data = run / "data"
    if data.exists() and any(data.iterdir()):
        if not force:
            raise CliError("io", f"{data} is not empty; pass --force to overwrite")
        shutil.rmtree(data)
    data.mkdir(parents=True)
    entries = []
    for role, vid, seq in synth.generate_corpus(cfg.corpus()):
        synth.write_frame_dir(seq, data / vid)
        entries.append(synth.ManifestEntry(role, vid, f"{vid}/labels.txt"))
    synth.write_manifest(entries, data / "manifest.txt")
    digest = _digest(data)
    (data / "digest.txt").write_text(digest + "\n")
    return digest


def cmd_gen_data(args) -> int:
    run = _run_dir(args)
    cfg = _config(args, "gen-data")
    digest = generate_dataset(run, cfg, args.force)
    c = cfg.corpus()
    print(f"wrote {c.n_train} train + {c.n_test} test videos to {run / 'data'} (sha256 {digest[:16]})")
    return 0


def train_variant(run: Path, cfg: RunConfig, name: str, shift: bool, resume: bool = False,
                  stop_after: int | None = None):
    tcfg = cfg.train()
    mcfg = cfg.cpnet(name, shift)
    label = variant_label(mcfg)
    out = run / "models" / label
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.bin"
    model = build_cpnet(mcfg, seed=cfg.get("model", "init_seed"), dtype=tcfg.dtype)
    clips = _train_clips(run, cfg)
    prior = None
    if resume:
        if not ckpt_path.exists():
            raise CliError("io", f"no checkpoint to resume at {ckpt_path}")
        prior = training.Checkpoint.load(ckpt_path)
    else:
        (out / "train_log.txt").unlink(missing_ok=True)
    try:
        ckpt = training.train(model, clips, tcfg, resume=prior, log_path=out / "train_log.txt", epochs=stop_after)
    except training.TrainingDiverged as exc:
        raise CliError("train", str(exc)) from exc
    ckpt.meta.update({"label": label})
    ckpt.save(ckpt_path)
    save_model(model, out / "model.bin")
    return model, ckpt


def cmd_train(args) -> int:
    run = _run_dir(args)
    cfg = _config(args, "train")
    name, shift = _variant(args)
    model, ckpt = train_variant(run, cfg, name, shift, args.resume, args.stop_after)
    last = ckpt.loss_history[-1] if ckpt.loss_history else float("nan")
    print(f"{model.label}: {ckpt.epoch}/{cfg.get('train', 'epochs')} epochs, final mean loss {last:.6f}")
    return 0


def evaluate_variant(run: Path, cfg: RunConfig, label: str, model=None, checkpoint: Path | None = None):
    if model is None:
        path = checkpoint or run / "models" / label / "model.bin"
        if not Path(path).exists():
            raise CliError("io", f"no trained model at {path}; run train first")
        model = load_model(path)
    result = scoring.evaluate(model, _test_videos(run, cfg), WINDOW, cfg.get("eval", "psnr_mode"))
    out = run / "eval" / model.label
    out.mkdir(parents=True, exist_ok=True)
    scoring.write_scores_csv(result.series, out / "scores.csv", cfg.decision())
    scoring.write_roc_csv(result.roc, out / "roc.csv")
    kv = {"label": model.label, "auc": f"{result.auc:.4f}", "auc_exact": repr(result.auc),
          "frames": str(sum(len(s.label) for s in result.series))}
    kv.update({k: f"{v:.6f}" for k, v in result.margins.as_dict().items()})
    complexity.write_keyvalues(kv, out / "report.txt")
    return result


def cmd_eval(args) -> int:
    run = _run_dir(args)
    cfg = _config(args, "eval")
    name, shift = _variant(args)
    label = variant_label(cfg.cpnet(name, shift))
    result = evaluate_variant(run, cfg, label, checkpoint=args.checkpoint)
    m = result.margins
    print(f"{label}: AUC {result.auc:.4f}")
    print(f"  PSNR normal/abnormal {m.psnr_normal:.2f} / {m.psnr_abnormal:.2f} (margin {m.psnr_margin:.2f})")
    print(f"  score normal/abnormal {m.score_normal:.2f} / {m.score_abnormal:.2f} (margin {m.score_margin:.2f})")
    return 0


ALL_ROWS = (("baseline", False), ("cpnet075", False), ("cpnet075", True), ("cpnet037", False), ("cpnet037", True))


def analyze(cfg: RunConfig, out: Path, flops: bool = False) -> dict[str, complexity.ComplexityReport]:
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for name, shift in ALL_ROWS:
        model = build_cpnet(cfg.cpnet(name, shift))
        reports[model.label] = complexity.count_model(model)
    ref = reports["baseline"]
    for label, rep in reports.items():
        (out / f"{label}.txt").write_text(complexity.render_table(rep, flops))
        complexity.write_keyvalues(complexity.report_keyvalues(rep, ref), out / f"{label}.kv")
    (out / "ratios.txt").write_text(complexity.ratio_table(list(reports.values()), ref, flops))
    return reports


def cmd_analyze(args) -> int:
    run = _run_dir(args)
    cfg = _config(args, "analyze")
    reports = analyze(cfg, run / "analyze", args.flops)
    sys.stdout.write((run / "analyze" / "ratios.txt").read_text())
    for label in ("cpnet075", "cpnet037"):
        same = reports[label].total_macs == reports[f"{label}+shift"].total_macs
        print(f"{label}: shift on/off MAC totals {'identical' if same else 'DIFFER'}")
    return 0


def parse_rows(spec: str | None) -> list[tuple[str, bool]]:
    if not spec:
        return list(ALL_ROWS)
    rows = []
    for item in spec.split(","):
        item = item.strip()
        name, _, suffix = item.partition("+")
        if name not in VARIANTS or suffix not in ("", "shift") or (name == "baseline" and suffix):
            raise CliError("usage", f"unknown ablation row {item!r}")
        rows.append((name, suffix == "shift"))
    return rows


def ablate(run: Path, cfg: RunConfig, rows: list[tuple[str, bool]]) -> str:
    if not (run / "data" / "manifest.txt").exists():
        generate_dataset(run, cfg)
    ref = complexity.count_model(build_cpnet(cfg.cpnet("baseline", False)))
    lines = [("model", "AUC", "GMACs", "MACs%", "MParams", "params%", "PSNR_n", "PSNR_a", "PSNR_margin",
              "S_n", "S_a", "S_margin", "final_loss")]
    for name, shift in rows:
        model, ckpt = train_variant(run, cfg, name, shift)
        res = evaluate_variant(run, cfg, model.label, model=model)
        rep = complexity.count_model(model)
        r = complexity.compare(rep, ref)
        m = res.margins
        log.info("%s AUC %.4f", model.label, res.auc)
        lines.append((model.label, f"{res.auc:.4f}", f"{rep.total_macs / 1e9:.4f}", complexity.Ratio.pct(r.macs),
                      f"{rep.total_params / 1e6:.4f}", complexity.Ratio.pct(r.params),
                      f"{m.psnr_normal:.2f}", f"{m.psnr_abnormal:.2f}", f"{m.psnr_margin:.2f}",
                      f"{m.score_normal:.3f}", f"{m.score_abnormal:.3f}", f"{m.score_margin:.3f}",
                      f"{ckpt.loss_history[-1]:.3f}"))
    widths = [max(len(r[i]) for r in lines) for i in range(len(lines[0]))]
    text = "\n".join("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                     for r in lines) + "\n"
    out = run / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text(text)
    return text


def cmd_ablate(args) -> int:
    run = _run_dir(args)
    cfg = _config(args, "ablate")
    if args.force and (run / "data").exists():
        shutil.rmtree(run / "data")
    sys.stdout.write(ablate(run, cfg, parse_rows(args.variants)))
    return 0


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpnet", description="CPNet anomaly-detection workbench")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--run-dir", required=True, help="directory holding all inputs and outputs of a run")
        sp.add_argument("--config", help="INI config file ([model], [train], [data], [eval])")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        sp.add_argument("--seed", type=int, help="set data, training and init seeds at once")

    def variant(sp):
        sp.add_argument("--variant", choices=VARIANTS, default="cpnet037")
        sp.add_argument("--shift", choices=("on", "off"), help="feature shift (default: on, off for baseline)")

    sp = sub.add_parser("gen-data", help="write the synthetic corpus and manifest")
    common(sp)
    sp.add_argument("--videos", type=int, help="number of training videos")
    sp.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one model variant")
    common(sp)
    variant(sp)
    sp.add_argument("--epochs", type=int, help="total epochs of the schedule")
    sp.add_argument("--resume", action="store_true", help="continue from the variant's checkpoint")
    sp.add_argument("--stop-after", type=int, help="run at most this many epochs in this invocation")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score test videos: CSV, AUC, margin report")
    common(sp)
    variant(sp)
    sp.add_argument("--checkpoint", help="model file (default: <run>/models/<label>/model.bin)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="MAC / parameter reports for every variant")
    common(sp)
    sp.add_argument("--flops", action="store_true", help="report FLOPs (2 x MACs) instead of MACs")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("ablate", help="train and evaluate every variant; write a summary table")
    common(sp)
    sp.add_argument("--epochs", type=int, help="total epochs per model")
    sp.add_argument("--variants", help="comma list, e.g. baseline,cpnet037,cpnet037+shift (default: all five)")
    sp.add_argument("--force", action="store_true", help="regenerate the dataset")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            print("error[usage]: invalid command line (see --help)", file=sys.stderr)
            return EXIT_CODES["usage"]
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        category, msg = exc.category, str(exc)
    except ConfigError as exc:
        category, msg = "config", str(exc)
    except (FileNotFoundError, PermissionError) as exc:
        category, msg = "io", str(exc)
    except ValueError as exc:
        category, msg = "data", str(exc)
    print(f"error[{category}]: {msg}".replace("\n", " "), file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
