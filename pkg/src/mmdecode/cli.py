"""Command-line driver: synth | train | finetune | evaluate | curve | fuse.

Each stage reads a JSON run config, writes its artefacts under ``--out`` and
leaves ``resolved_config.<command>.json`` there with every default filled in
(``synth`` writes ``resolved_config.json`` next to the manifest).

Exit codes: 0 ok, 1 runtime failure, 2 config error, 3 data-contract violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mmdecode import numcore as nc
from mmdecode.dataio import (
    SPLITS,
    Manifest,
    TensorFileError,
    build_dataset,
    load_recordings,
    load_weights,
    recording_pairs,
    save_weights,
)
from mmdecode.ensemble import (
    AlignmentError,
    OutputMatrix,
    average_outputs,
    bootstrap_curve,
    check_aligned,
    ensemble_accuracy,
    fuse,
    lda_fit,
    pearson_r,
    write_curve_csv,
    write_fusion_csv,
    write_scatter_csv,
)
from mmdecode.evalstat import (
    InsufficientPairsError,
    accuracy,
    per_subject,
    pooled_accuracy,
    wilcoxon_signed_rank,
    write_prepost_csv,
    write_subject_csv,
)
from mmdecode.model import ModelConfig, predict_batch
from mmdecode.synth import SyntheticConfig, synth_generate
from mmdecode.trainer import (
    FINETUNE_HOP,
    TrainConfig,
    finetune_subject,
    instance_rng,
    subject_dataset,
    train_instance,
)

logger = logging.getLogger("mmdecode")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_CONTRACT = 0, 1, 2, 3
EVAL_HOP = 1.0


class ConfigError(ValueError):
    pass


class DataContractError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run configuration


def _strict(section: dict, allowed: set[str], where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "run"
    manifest: str = "data/manifest.json"
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    models: dict[str, ModelConfig] = field(
        default_factory=lambda: {"baseline": ModelConfig(), "ffr": ModelConfig(sample_rate=512.0)}
    )
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(hop_seconds=FINETUNE_HOP, mode="finetune"))
    finetune_alternative: str = "two_sided"
    decoder: str = "baseline"
    n_instances: int = 2
    ks: list[int] = field(default_factory=lambda: [1, 2])
    draws: int = 100
    eval_splits: list[str] = field(default_factory=lambda: ["lda_fit", "heldout"])
    fit_split: str = "lda_fit"
    fuse_split: str = "heldout"
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path = Path(".")) -> "RunConfig":
        _strict(doc, {"seed", "output_dir", "data", "model", "train", "finetune", "ensemble", "evaluate", "fusion"}, "config")
        cfg = cls(base_dir=base_dir)
        try:
            cfg.seed = int(doc.get("seed", cfg.seed))
            cfg.output_dir = str(doc.get("output_dir", cfg.output_dir))
            data = doc.get("data", {})
            _strict(data, {"manifest", "synthetic"}, "data")
            cfg.manifest = str(data.get("manifest", cfg.manifest))
            cfg.synthetic = SyntheticConfig.from_dict(data.get("synthetic", {}))
            model = doc.get("model", {})
            _strict(model, {"baseline", "ffr"}, "model")
            cfg.models = {
                "baseline": ModelConfig.from_dict(model.get("baseline", {})),
                "ffr": ModelConfig.from_dict({"sample_rate": 512.0, **model.get("ffr", {})}),
            }
            cfg.train = TrainConfig.from_dict(doc.get("train", {}))
            cfg.finetune = TrainConfig.from_dict(
                {"hop_seconds": FINETUNE_HOP, "mode": "finetune", **doc.get("finetune", {})}
            )
            ens = doc.get("ensemble", {})
            _strict(ens, {"decoder", "n_instances", "ks", "draws"}, "ensemble")
            cfg.decoder = ens.get("decoder", cfg.decoder)
            cfg.n_instances = int(ens.get("n_instances", cfg.n_instances))
            cfg.ks = [int(k) for k in ens.get("ks", cfg.ks)]
            cfg.draws = int(ens.get("draws", cfg.draws))
            ev = doc.get("evaluate", {})
            _strict(ev, {"splits", "finetune_alternative"}, "evaluate")
            cfg.eval_splits = list(ev.get("splits", cfg.eval_splits))
            cfg.finetune_alternative = ev.get("finetune_alternative", cfg.finetune_alternative)
            fus = doc.get("fusion", {})
            _strict(fus, {"fit_split", "eval_split"}, "fusion")
            cfg.fit_split = fus.get("fit_split", cfg.fit_split)
            cfg.fuse_split = fus.get("eval_split", cfg.fuse_split)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.synthetic.validate()
            for m in self.models.values():
                m.validate()
            self.train.validate()
            self.finetune.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.decoder not in self.models:
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if self.train.mode != "population" or self.finetune.mode != "finetune":
            raise ConfigError("train.mode must be 'population' and finetune.mode 'finetune'")
        if self.n_instances < 1 or self.draws < 1 or not self.ks:
            raise ConfigError("n_instances, draws and ks must be positive / non-empty")
        for s in self.eval_splits + [self.fit_split, self.fuse_split]:
            if s not in SPLITS:
                raise ConfigError(f"unknown split {s!r}")
        if self.finetune_alternative not in ("two_sided", "greater", "less"):
            raise ConfigError(f"unknown alternative {self.finetune_alternative!r}")

    def resolved(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": {"manifest": self.manifest, "synthetic": self.synthetic.to_dict()},
            "model": {k: m.to_dict() for k, m in self.models.items()},
            "train": self.train.to_dict(),
            "finetune": self.finetune.to_dict(),
            "ensemble": {"decoder": self.decoder, "n_instances": self.n_instances, "ks": self.ks, "draws": self.draws},
            "evaluate": {"splits": self.eval_splits, "finetune_alternative": self.finetune_alternative},
            "fusion": {"fit_split": self.fit_split, "eval_split": self.fuse_split},
        }

    def _resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def manifest_path(self) -> Path:
        return self._resolve(self.manifest)

    def output_path(self) -> Path:
        return self._resolve(self.output_dir)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {p} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc, p.parent)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_manifest(cfg: RunConfig) -> Manifest:
    path = cfg.manifest_path()
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} not found")
    return Manifest.load(path)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(cfg: RunConfig, out: Path, args) -> int:
    dest = Path(args.out) if args.out else cfg.manifest_path().parent
    manifest = synth_generate(cfg.synthetic, nc.split(nc.seeded_rng(cfg.seed), "synth"), dest)
    _write_json(dest / "resolved_config.json", cfg.resolved())
    s = cfg.synthetic
    print(
        f"subjects={len(manifest.subjects())} recordings={len(manifest.recordings)} "
        f"duration={s.duration_seconds:g}s snr_db={s.snr_db:g} -> {dest / 'manifest.json'}"
    )
    return EXIT_OK


def _checkpoint_ok(ckpt: Path, report: Path) -> bool:
    if not ckpt.exists() or not report.exists():
        return False
    try:
        load_weights(ckpt)
        json.loads(report.read_text(encoding="utf-8"))
    except (TensorFileError, KeyError, ValueError) as exc:
        logger.warning("checkpoint %s is unreadable (%s); retraining", ckpt, exc)
        return False
    return True


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    decoder = args.decoder or cfg.decoder
    manifest = _load_manifest(cfg)
    dest = out / decoder
    dest.mkdir(parents=True, exist_ok=True)
    todo = [
        i for i in range(cfg.n_instances)
        if not _checkpoint_ok(dest / f"instance_{i}.mmd", dest / f"instance_{i}.json")
    ]
    if not todo:
        print(f"{cfg.n_instances} checkpoints already complete in {dest}")
        return EXIT_OK
    train_recs = load_recordings(manifest, ["train"], decoder=decoder)
    val_recs = load_recordings(manifest, ["validation"], decoder=decoder)
    dataset = build_dataset(
        train_recs, decoder, cfg.train.hop_seconds, nc.split(nc.seeded_rng(cfg.seed), "train_pairs"),
        cfg.train.validation_fraction, val_recs or None,
    )

    def one(i):
        weights, report = train_instance(dataset, cfg.models[decoder], cfg.train, instance_rng(cfg.seed, i))
        save_weights(dest / f"instance_{i}.mmd", weights)
        (dest / f"instance_{i}.json").write_text(report.to_json(), encoding="utf-8")
        return i, report

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        for i, report in pool.map(one, todo):
            print(f"instance {i}: best epoch {report.best_epoch}, val acc {report.val_accuracy[report.best_epoch - 1]:.4f}")
    return EXIT_OK


def _eval_pairs(cfg: RunConfig, manifest: Manifest, decoder: str, splits, subjects=None):
    recs = load_recordings(manifest, splits, subjects, decoder=decoder)
    pairs = []
    # one pass per split keeps the split tags attached to the pairs
    for split in splits:
        chunk = recording_pairs(
            [r for r in recs if r.split == split], decoder, EVAL_HOP, nc.split(nc.seeded_rng(cfg.seed), "eval_pairs")
        )
        pairs.extend((split, p) for p in chunk)
    return pairs


def _default_checkpoints(out: Path, decoder: str) -> list[Path]:
    found = sorted((out / decoder).glob("instance_*.mmd"), key=lambda p: int(p.stem.split("_")[1]))
    if not found:
        raise FileNotFoundError(f"no checkpoints under {out / decoder}")
    return found


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> int:
    decoder = args.decoder or cfg.decoder
    splits = args.split.split(",") if args.split else cfg.eval_splits
    for s in splits:
        if s not in SPLITS:
            raise ConfigError(f"unknown split {s!r}")
    manifest = _load_manifest(cfg)
    ckpts = [Path(p) for p in args.checkpoints] if args.checkpoints else _default_checkpoints(out, decoder)
    tagged = _eval_pairs(cfg, manifest, decoder, splits)
    if not tagged:
        raise DataContractError(f"no evaluation pairs in splits {splits}")
    pairs = [p for _, p in tagged]
    values = np.stack([predict_batch(load_weights(c), pairs) for c in ckpts])
    labels = np.array([p.label for p in pairs])
    matrix = OutputMatrix(values, labels, [p.key for p in pairs], [s for s, _ in tagged])

    dest = out / "evaluate" / decoder
    dest.mkdir(parents=True, exist_ok=True)
    matrix.save(dest / "outputs.mmd")
    preds = (average_outputs(matrix) >= 0.5).astype(int)
    scores = per_subject(preds, labels, [p.subject_id for p in pairs], decoder)
    write_subject_csv(dest / "per_subject.csv", scores)
    metrics = {
        "decoder": decoder,
        "splits": splits,
        "n_pairs": int(labels.size),
        "n_instances": len(ckpts),
        "ensemble_accuracy": accuracy(preds, labels),
        "pooled_subject_accuracy": pooled_accuracy(scores),
        "instance_accuracy": [ensemble_accuracy(matrix, [i]) for i in range(len(ckpts))],
        "per_split_accuracy": {s: ensemble_accuracy(matrix.split(s)) for s in splits if s in matrix.splits},
    }
    _write_json(dest / "metrics.json", metrics)
    print(f"{decoder}: {len(ckpts)} instances, {labels.size} pairs, averaged accuracy {metrics['ensemble_accuracy']:.4f}")
    return EXIT_OK


def cmd_curve(cfg: RunConfig, out: Path, args) -> int:
    decoder = args.decoder or cfg.decoder
    path = Path(args.outputs) if args.outputs else out / "evaluate" / decoder / "outputs.mmd"
    matrix = OutputMatrix.load(path)
    ks = [int(k) for k in args.ks.split(",")] if args.ks else cfg.ks
    draws = args.draws or cfg.draws
    if max(ks) > matrix.n_instances:
        raise ConfigError(f"k={max(ks)} exceeds the {matrix.n_instances} available instances")
    points = bootstrap_curve(matrix, ks, draws, nc.split(nc.seeded_rng(cfg.seed), "curve"))
    dest = out / "curve"
    dest.mkdir(parents=True, exist_ok=True)
    write_curve_csv(dest / "fig1.csv", points)
    for p in points:
        print(f"k={p.k}: mean {p.mean:.4f} [{p.min:.4f}, {p.max:.4f}]")
    return EXIT_OK


def cmd_fuse(cfg: RunConfig, out: Path, args) -> int:
    base = OutputMatrix.load(args.baseline or out / "evaluate" / "baseline" / "outputs.mmd")
    ffr = OutputMatrix.load(args.ffr or out / "evaluate" / "ffr" / "outputs.mmd")
    try:
        check_aligned(base, ffr)
    except AlignmentError as exc:
        raise DataContractError(str(exc)) from exc
    fit_b, fit_f = base.split(cfg.fit_split), ffr.split(cfg.fit_split)
    ev_b, ev_f = base.split(cfg.fuse_split), ffr.split(cfg.fuse_split)
    if fit_b.n_pairs < 4 or ev_b.n_pairs == 0:
        raise DataContractError(f"need pairs in both '{cfg.fit_split}' and '{cfg.fuse_split}' splits")
    pb_fit, pf_fit = average_outputs(fit_b), average_outputs(fit_f)
    pb, pf = average_outputs(ev_b), average_outputs(ev_f)
    lda = lda_fit(np.column_stack([pb_fit, pf_fit]), fit_b.labels)
    fused = fuse(pb, pf, lda)

    dest = out / "fuse"
    dest.mkdir(parents=True, exist_ok=True)
    write_fusion_csv(dest / "fused.csv", ev_b.keys, pb, pf, fused, ev_b.labels)
    write_scatter_csv(dest / "fig2.csv", pb, pf, ev_b.labels)

    def safe_r(x, y):
        try:
            return pearson_r(x, y)
        except ValueError:
            return None

    summary = {
        "w": lda.w.tolist(),
        "b": lda.b,
        "r_fit": safe_r(pb_fit, pf_fit),
        "r_eval": safe_r(pb, pf),
        "accuracy_baseline": accuracy((pb >= 0.5).astype(int), ev_b.labels),
        "accuracy_ffr": accuracy((pf >= 0.5).astype(int), ev_b.labels),
        "accuracy_fused": accuracy(fused, ev_b.labels),
        "n_fit": fit_b.n_pairs,
        "n_eval": ev_b.n_pairs,
    }
    _write_json(dest / "fusion.json", summary)
    print(
        f"fused {summary['accuracy_fused']:.4f} (baseline {summary['accuracy_baseline']:.4f}, "
        f"ffr {summary['accuracy_ffr']:.4f}); r fit {summary['r_fit']}, r eval {summary['r_eval']}"
    )
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, out: Path, args) -> int:
    decoder = args.decoder or cfg.decoder
    manifest = _load_manifest(cfg)
    population = load_weights(args.checkpoint) if args.checkpoint else load_weights(_default_checkpoints(out, decoder)[0])
    dest = out / "finetune" / decoder
    dest.mkdir(parents=True, exist_ok=True)
    subjects = manifest.subjects()
    root = nc.seeded_rng(cfg.seed)

    def one(sid):
        train_recs = load_recordings(manifest, ["train"], [sid], decoder)
        val_recs = load_recordings(manifest, ["validation"], [sid], decoder)
        data = subject_dataset(train_recs, decoder, cfg.finetune, nc.split(root, "finetune_pairs", sid), val_recs or None)
        tuned, report = finetune_subject(population, data, cfg.models[decoder], cfg.finetune, nc.split(root, "finetune", sid))
        save_weights(dest / f"subject_{sid}.mmd", tuned)
        (dest / f"subject_{sid}.json").write_text(report.to_json(), encoding="utf-8")
        test = [p for _, p in _eval_pairs(cfg, manifest, decoder, ["heldout"], [sid])]
        if not test:
            raise DataContractError(f"subject {sid} has no heldout pairs")
        labels = np.array([p.label for p in test])
        pre = accuracy((predict_batch(population, test) >= 0.5).astype(int), labels)
        post = accuracy((predict_batch(tuned, test) >= 0.5).astype(int), labels)
        return sid, pre, post

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        rows = list(pool.map(one, subjects))
    write_prepost_csv(dest / "finetune.csv", [r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])
    pre = [r[1] for r in rows]
    post = [r[2] for r in rows]
    try:
        res = wilcoxon_signed_rank(pre, post, cfg.finetune_alternative)
        summary = {"W_plus": res.w_plus, "n_effective": res.n_effective, "p": res.p_value,
                   "method": res.method, "alternative": res.alternative}
    except InsufficientPairsError as exc:
        summary = {"W_plus": None, "n_effective": None, "p": None, "method": None,
                   "alternative": cfg.finetune_alternative, "error": str(exc)}
    _write_json(dest / "signed_rank.json", summary)
    for sid, a, b in rows:
        print(f"{sid}: {a:.4f} -> {b:.4f}")
    print(f"signed-rank: p={summary['p']}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "curve": cmd_curve,
    "fuse": cmd_fuse,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for instances/subjects")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("--decoder", choices=["baseline", "ffr"])

    parser = argparse.ArgumentParser(prog="mmdecode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train population decoder instances")
    p = sub.add_parser("finetune", parents=[common], help="fine-tune a population decoder per subject")
    p.add_argument("--checkpoint", help="population checkpoint (default: instance_0)")
    p = sub.add_parser("evaluate", parents=[common], help="score checkpoints on a split")
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--split", help="comma-separated splits")
    p = sub.add_parser("curve", parents=[common], help="bootstrap accuracy vs ensemble size")
    p.add_argument("--outputs", help="OutputMatrix file")
    p.add_argument("--ks", help="comma-separated ensemble sizes")
    p.add_argument("--draws", type=int)
    p = sub.add_parser("fuse", parents=[common], help="LDA fusion of baseline and FFR outputs")
    p.add_argument("--baseline", help="baseline OutputMatrix file")
    p.add_argument("--ffr", help="FFR OutputMatrix file")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("MMDECODE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out) if args.out else cfg.output_path()
        if args.command != "synth":
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / f"resolved_config.{args.command}.json", cfg.resolved())
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataContractError, TensorFileError) as exc:
        print(f"data contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except Exception as exc:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
