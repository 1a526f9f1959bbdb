"""Command-line entry point: ``hiresvdd <command> [--config FILE] [flags]``.

Config files hold flat ``key = value`` lines named after the long flags
(dashes or underscores); flags given on the command line win. Every command
writes into ``--run-dir`` using fixed names::

    <command>.config.txt       resolved configuration
    <command>.provenance.json  input/output hashes and skipped items
    checkpoints/  scores/  reports/  overlays/
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import band_energy_fraction, export_overlay, gradcam, write_fraction_csv
from .dsp import HIRES_RATE, StftConfig, SubbandPartition, band_boundaries
from .engine import TrainSchedule
from .errors import ConfigError, HiResError
from .evaluate import evaluate_scores, report_table
from .expert import ExpertConfig, ExpertModel, FeatureBank, score_dataset, train_expert
from .records import DatasetManifest, ScoreSet

log = logging.getLogger("hiresvdd")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_PARTIAL = 3

RUN_SUBDIRS = ("checkpoints", "scores", "reports", "overlays")


# -- argument types -------------------------------------------------------------


def band_arg(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"band must look like LO:HI in Hz, got {text!r}") from None
    return lo, hi


def float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def str_list(text: str) -> list[str]:
    return [v for v in text.split(",") if v]


# -- config handling ------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` and ``;`` start comments."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return {k.replace("-", "_"): v for k, v in parser["run"].items()}


def apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Install config values as parser defaults so explicit flags still win."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        if key not in actions:
            raise ConfigError(f"unknown config key {key!r}")
        action = actions[key]
        if action.nargs == 0:
            defaults[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            continue
        items = raw.split() if action.nargs in ("+", "*") else [raw]
        try:
            conv = [action.type(v) if action.type else v for v in items]
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and any(v not in action.choices for v in conv):
            raise ConfigError(f"config key {key!r}: {raw!r} not in {sorted(action.choices)}")
        defaults[key] = conv if action.nargs in ("+", "*") else conv[0]
    sub.set_defaults(**defaults)


def _resolved(args) -> dict:
    skip = {"func", "config", "command", "verbose"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        if isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


BAND_KEYS = ("band", "artifact_band")
COMMA_KEYS = ("weights", "split", "ids", "names")


def _format_value(key: str, v) -> str:
    """Render a resolved value so that ``read_config`` parses it back to the same thing."""
    if key in BAND_KEYS:
        return f"{v[0]!r}:{v[1]!r}"
    if key in COMMA_KEYS:
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, list):
        return " ".join(map(str, v))
    return str(v)


def require(args, *keys: str) -> None:
    missing = [k for k in keys if not getattr(args, k)]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# -- run directory --------------------------------------------------------------


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    def __init__(self, args):
        self.args = args
        self.dir = Path(args.run_dir)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.skipped: list[tuple[str, str]] = []
        for sub in RUN_SUBDIRS:
            (self.dir / sub).mkdir(parents=True, exist_ok=True)

    def path(self, sub: str, name: str) -> Path:
        return self.dir / sub / name

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        self.outputs[str(Path(path).relative_to(self.dir))] = sha256_file(path)

    def finish(self) -> int:
        cmd = self.args.command
        resolved = _resolved(self.args)
        lines = [f"{k} = {_format_value(k, v)}" for k, v in resolved.items() if v is not None]
        (self.dir / f"{cmd}.config.txt").write_text("\n".join(lines) + "\n")
        prov = {
            "command": cmd,
            "version": __version__,
            "config": resolved,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "skipped": [list(s) for s in self.skipped],
        }
        (self.dir / f"{cmd}.provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")
        for uid, reason in self.skipped:
            print(f"skipped {uid}: {reason}", file=sys.stderr)
        return EXIT_PARTIAL if self.skipped else EXIT_OK


def _load_manifest(run: Run, path, splits=None) -> DatasetManifest:
    run.add_input(path)
    manifest = DatasetManifest.read(path)
    if splits:
        manifest = manifest.split(*splits)
        if not manifest.rows:
            raise ConfigError(f"no rows in splits {splits} of {path}")
    return manifest


def _load_expert(run: Run, path) -> ExpertModel:
    run.add_input(path)
    return ExpertModel.load(path)


def _band_name(band) -> str:
    return f"{band[0]:g}-{band[1]:g}"


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synthdata import ArtifactSpec, SynthConfig, build_corpus

    run = Run(args)
    cfg = SynthConfig(
        seed=args.seed,
        n_bonafide=args.n_bonafide,
        n_deepfake=args.n_deepfake,
        artifact=ArtifactSpec(args.artifact, args.artifact_band, args.strength),
        duration=args.duration,
        n_testb=args.n_testb,
    )
    out = Path(args.out) if args.out else run.dir / "corpus"
    manifest = build_corpus(cfg, out)
    run.outputs[str(out / "manifest.tsv")] = sha256_file(out / "manifest.tsv")
    print(f"wrote {len(manifest)} clips to {out}")
    return run.finish()


def _resolve_band(args) -> tuple[float, float]:
    nyquist = HIRES_RATE / 2
    if args.band is not None:
        if args.partition is not None:
            raise ConfigError("give either --band or --partition/--index, not both")
        return args.band
    if args.partition is None:
        return (0.0, nyquist)
    if args.index is None or not 0 <= args.index < args.partition:
        raise ConfigError(f"--index must lie in [0, {args.partition}) for --partition {args.partition}")
    return band_boundaries(args.partition, nyquist)[args.index]


def _schedule(args) -> TrainSchedule:
    return TrainSchedule(lr_max=args.lr, lr_min=args.lr_min, weight_decay=args.weight_decay)


def cmd_train_expert(args) -> int:
    require(args, "manifest")
    run = Run(args)
    band = _resolve_band(args)
    manifest = _load_manifest(run, args.manifest)
    stft = StftConfig(args.window, args.hop)
    model = ExpertModel(ExpertConfig(band=band, seed=args.seed, stft=stft, target_seconds=args.seconds))
    result = train_expert(model, manifest, _schedule(args), args.epochs, batch_size=args.batch_size, loss=args.loss)
    name = args.name or f"expert_{_band_name(band)}"
    ckpt = run.path("checkpoints", f"{name}.sbck")
    model.save(ckpt)
    run.add_output(ckpt)
    run.add_output(ckpt.with_suffix(".json"))
    print(f"{model.role} expert {band} Hz: final loss {result.loss_history[-1] if result.loss_history else float('nan'):.4f}"
          f", valid EER {result.valid_eer}")
    return run.finish()


def cmd_score(args) -> int:
    require(args, "checkpoint", "manifest")
    run = Run(args)
    model = _load_expert(run, args.checkpoint)
    manifest = _load_manifest(run, args.manifest, args.split)
    scores = score_dataset(model, manifest)
    out = run.path("scores", f"{args.name or Path(args.checkpoint).stem}.tsv")
    scores.write(out)
    run.add_output(out)
    run.skipped.extend(scores.skipped)
    print(f"scored {len(scores)} utterances -> {out}")
    return run.finish()


def cmd_fuse(args) -> int:
    from .fusion import (
        CLI_KINDS,
        FusionHead,
        aggregate_score_sets,
        fuse_scores,
        load_pool,
        read_pool_descriptor,
        train_fusion_head,
    )

    run = Run(args)
    kind = CLI_KINDS[args.kind]
    out = run.path("scores", f"{args.name or 'fused_' + args.kind}.tsv")
    if args.scores:
        if kind != "aggregation":
            raise ConfigError("--scores inputs only support the aggregate kind")
        sets = []
        for p in args.scores:
            run.add_input(p)
            sets.append(ScoreSet.read(p))
        fused = aggregate_score_sets(sets)
    else:
        if not args.pool or not args.manifest:
            raise ConfigError("fuse needs --pool and --manifest (or --scores for aggregation)")
        doc, sha = read_pool_descriptor(args.pool)
        run.inputs[str(args.pool)] = sha
        for m in doc["members"]:
            run.add_input(m["checkpoint"])
        pool = load_pool(doc)
        manifest = _load_manifest(run, args.manifest)
        head = FusionHead(kind, pool.size, pool.members[0].config.embed_dim, seed=args.seed)
        if head.trainable:
            train_fusion_head(head, pool, manifest, _schedule(args), args.epochs, batch_size=args.batch_size,
                              loss=args.loss)
            ckpt = run.path("checkpoints", f"head_{args.kind}.sbck")
            head.save(ckpt)
            run.add_output(ckpt)
            # score with the float32 weights the checkpoint holds
            head = FusionHead.load(ckpt)
        fused = fuse_scores(pool, head, manifest.split(*args.split))
        run.skipped.extend(fused.skipped)
    fused.write(out)
    run.add_output(out)
    print(f"fused {len(fused)} utterances ({kind}) -> {out}")
    return run.finish()


def cmd_distill(args) -> int:
    from .distill import DistillConfig, TeacherEnsemble, distill_train, write_run_manifest

    require(args, "manifest", "teacher")
    run = Run(args)
    teachers = [_load_expert(run, p) for p in args.teacher]
    weights = args.weights if args.weights is not None else tuple(1.0 / len(teachers) for _ in teachers)
    cfg = DistillConfig(args.tau, args.alpha, args.beta, tuple(weights), args.supervised_loss)
    ensemble = TeacherEnsemble(teachers, cfg.teacher_weights)
    manifest = _load_manifest(run, args.manifest)
    t0 = teachers[0].config
    if args.student:
        student = _load_expert(run, args.student)
    else:
        student = ExpertModel(ExpertConfig(seed=args.seed, stft=t0.stft, target_seconds=t0.target_seconds))
    result = distill_train(student, ensemble, cfg, manifest, _schedule(args), args.epochs, batch_size=args.batch_size)
    ckpt = run.path("checkpoints", f"{args.name}.sbck")
    digest = student.save(ckpt)
    run.add_output(ckpt)
    run.add_output(ckpt.with_suffix(".json"))
    manifest_path = run.path("reports", f"{args.name}.distill.json")
    write_run_manifest(manifest_path, result, digest)
    run.add_output(manifest_path)
    print(f"distilled student -> {ckpt}")
    return run.finish()


def cmd_eval(args) -> int:
    require(args, "scores")
    run = Run(args)
    names = args.names or [Path(p).stem for p in args.scores]
    if len(names) != len(args.scores):
        raise ConfigError(f"{len(names)} names for {len(args.scores)} score files")
    results = []
    for name, p in zip(names, args.scores):
        run.add_input(p)
        results.append((name, evaluate_scores(ScoreSet.read(p), args.bootstrap, args.level, args.seed)))
    text, csv_text = report_table(results)
    for fname, content in (("report.txt", text), ("report.csv", csv_text)):
        path = run.path("reports", fname)
        path.write_text(content)
        run.add_output(path)
    print(text, end="")
    return run.finish()


def cmd_gradcam(args) -> int:
    require(args, "checkpoint", "manifest")
    run = Run(args)
    model = _load_expert(run, args.checkpoint)
    manifest = _load_manifest(run, args.manifest, args.split)
    rows = sorted(manifest.rows, key=lambda r: r.id)
    if args.ids:
        wanted = set(args.ids)
        rows = [r for r in rows if r.id in wanted]
        missing = wanted - {r.id for r in rows}
        if missing:
            raise ConfigError(f"ids not in manifest: {sorted(missing)}")
    if args.limit:
        rows = rows[: args.limit]
    bank = FeatureBank(model.config.stft, model.config.target_seconds)
    bank.add(manifest, rows)
    model_name = Path(args.checkpoint).stem
    fractions = []
    for row in rows:
        if row.id in bank.failures:
            run.skipped.append((row.id, bank.failures[row.id]))
            continue
        spec = bank.slice(row.id, model.band)
        part = SubbandPartition(args.partition, spec.nyquist, spec.freq_bins) if model.role == "fullband" else None
        target = args.target if args.target != "label" else row.label
        cam = gradcam(model, spec, target, model_name)
        out = run.path("overlays", f"{row.id}.png")
        export_overlay(cam, spec, out, part)
        run.add_output(out)
        fractions.append((row.id, model_name, band_energy_fraction(cam, part) if part else np.ones(1)))
    csv_path = run.path("reports", f"{model_name}.band_fractions.csv")
    write_fraction_csv(csv_path, fractions)
    run.add_output(csv_path)
    print(f"wrote {len(fractions)} overlays and {csv_path}")
    return run.finish()


# -- parser ---------------------------------------------------------------------


def _training_flags(p, epochs: int) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=1e-3, help="peak learning rate of the cosine schedule")
    p.add_argument("--lr-min", type=float, default=1e-6)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiresvdd", description="Fullband/subband singing deepfake detection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command")

    def sub(name, func, help_):
        p = subs.add_parser(name, help=help_)
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--run-dir", default="run")
        p.set_defaults(func=func)
        return p

    p = sub("synth", cmd_synth, "render the synthetic corpus")
    p.add_argument("--out", help="corpus directory (default RUN_DIR/corpus)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n-bonafide", type=int, default=100)
    p.add_argument("--n-deepfake", type=int, default=100)
    p.add_argument("--n-testb", type=int, default=0, help="per-class clips in the shifted-pitch testB split")
    p.add_argument("--artifact", default="band_notch",
                   choices=("band_notch", "mirrored_tones", "bandlimited_resynthesis"))
    p.add_argument("--artifact-band", type=band_arg, default=(11025.0, 16537.5))
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--duration", type=float, default=4.0)

    p = sub("train-expert", cmd_train_expert, "train a fullband or subband expert")
    p.add_argument("--manifest")
    p.add_argument("--band", type=band_arg, help="LO:HI in Hz")
    p.add_argument("--partition", type=int, help="number of equal subbands")
    p.add_argument("--index", type=int, help="subband index within --partition")
    p.add_argument("--window", type=int, default=2048)
    p.add_argument("--hop", type=int, default=512)
    p.add_argument("--seconds", type=float, default=4.0, help="clip length after padding or cropping")
    p.add_argument("--loss", default="focal", choices=("focal", "bce"))
    p.add_argument("--name", help="checkpoint stem")
    _training_flags(p, 10)

    p = sub("score", cmd_score, "score a manifest with one expert")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", type=str_list, default=None, help="comma-separated splits (default all)")
    p.add_argument("--name", help="score file stem")

    p = sub("fuse", cmd_fuse, "fuse a pool of experts")
    p.add_argument("--kind", default="aggregate", choices=("aggregate", "concat", "interact"))
    p.add_argument("--pool", help="pool descriptor JSON")
    p.add_argument("--manifest")
    p.add_argument("--split", type=str_list, default=["testA"], help="splits to score")
    p.add_argument("--scores", nargs="+", help="score TSVs to average instead of a pool")
    p.add_argument("--loss", default="focal", choices=("focal", "bce"))
    p.add_argument("--name")
    _training_flags(p, 20)

    p = sub("distill", cmd_distill, "distill subband teachers into a fullband student")
    p.add_argument("--manifest")
    p.add_argument("--teacher", nargs="+", help="teacher checkpoints")
    p.add_argument("--weights", type=float_list, help="comma-separated teacher weights summing to 1")
    p.add_argument("--student", help="start from this fullband checkpoint instead of a fresh model")
    p.add_argument("--tau", type=float, default=3.0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--supervised-loss", default="bce", choices=("bce", "focal"))
    p.add_argument("--name", default="student")
    _training_flags(p, 10)

    p = sub("eval", cmd_eval, "pooled EER with bootstrap intervals")
    p.add_argument("scores", nargs="*", help="score TSVs")
    p.add_argument("--names", type=str_list)
    p.add_argument("--bootstrap", type=int, default=1000, help="resamples (0 disables intervals)")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)

    p = sub("gradcam", cmd_gradcam, "Grad-CAM overlays and band fractions")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", type=str_list, default=["testA"])
    p.add_argument("--ids", type=str_list)
    p.add_argument("--limit", type=int)
    p.add_argument("--partition", type=int, default=4)
    p.add_argument("--target", default="deepfake", choices=("deepfake", "bonafide", "label"))
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        apply_config(sub, read_config(args.config))
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HiResError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
