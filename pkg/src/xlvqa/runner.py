"""Experiment orchestration: staged pipeline with content-addressed caching.

Every stage writes into ``<out>/<kind>/<key>/`` where the key hashes the
stage's config section plus its upstream artifact keys; re-running with an
unchanged config is a pure cache hit. The stage-1 fine-tuning phase is its
own artifact, so ft-short, sb and ft-star runs with the same seed share it.
A RunManifest at the output root records keys, paths, and wall-clock per
stage; result files themselves contain no timestamps, so identical configs
and seeds reproduce them byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__, nn
from .config import ConfigError, config_hash, dataclass_from_dict, dataclass_to_dict
from .data.corpus import DataConfig, Dataset, build_corpus_and_splits, load_dataset, save_dataset
from .diagnostics import (
    EvalReport,
    Protocol,
    chance_baselines,
    evaluate,
    add_evaluation,
    CellKey,
    run_protocol,
)
from .model import MODEL_PRESETS, HeadKind, Model, ModelConfig, ParameterSet, build_model
from .report import (
    MissingCoverageError,
    emit_comparison,
    method_label,
    trend_check,
    trends_to_json,
    trends_to_text,
)
from .training import (
    PretrainConfig,
    PretrainedSnapshot,
    StageSchedule,
    Strategy,
    fewshot_adapt,
    finetune,
    schedule_from_preset,
    SCHEDULE_PRESETS,
)


class MissingArtifactError(RuntimeError):
    """An upstream stage has not been run for this config."""


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    model_preset: str = ""  # '', 'small', 'base'; overrides model.layers
    head: str = "deep"
    with_qtype: bool = True
    strategy: str = "sb"
    stage_preset: str = ""  # '', 'm3p-like', 'uc2-like'; overrides schedule epochs
    schedule: StageSchedule = field(default_factory=StageSchedule)
    pretrain_enabled: bool = True
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    protocols: tuple[str, ...] = ("MM", "MM-V", "MM-T")
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    fewshot_ks: tuple[int, ...] = ()
    fewshot_languages: tuple[str, ...] = ()  # empty = all target languages


def load_experiment_config(path) -> ExperimentConfig:
    doc = json.loads(Path(path).read_text())
    return dataclass_from_dict(ExperimentConfig, doc)


def resolve_config(config: ExperimentConfig) -> ExperimentConfig:
    """Apply preset names onto the explicit schedule/model sections."""
    if config.stage_preset:
        if config.stage_preset not in SCHEDULE_PRESETS:
            raise ConfigError(f"unknown stage_preset {config.stage_preset!r}")
        epochs = SCHEDULE_PRESETS[config.stage_preset]
        config = dataclasses.replace(
            config, schedule=dataclasses.replace(config.schedule, **epochs)
        )
    if config.model_preset:
        if config.model_preset not in MODEL_PRESETS:
            raise ConfigError(f"unknown model_preset {config.model_preset!r}")
        config = dataclasses.replace(
            config, model=dataclasses.replace(config.model, **MODEL_PRESETS[config.model_preset])
        )
    Strategy(config.strategy)
    HeadKind(config.head)
    for p in config.protocols:
        Protocol(p)
    if not config.seeds:
        raise ConfigError("seeds must be non-empty")
    return config


class Pipeline:
    def __init__(self, config: ExperimentConfig, out_dir):
        self.config = resolve_config(config)
        self.out = Path(out_dir)
        self.manifest: dict = {
            "config_hash": config_hash(self.config),
            "version": __version__,
            "stages": {},
        }
        self._dataset: Dataset | None = None

    # -- caching core ---------------------------------------------------------

    def _stage_dir(self, kind: str, key: str) -> Path:
        return self.out / kind / key

    def _stage(self, stage_id: str, kind: str, key: str, build) -> Path:
        """Run ``build(dir)`` unless the keyed artifact already exists."""
        path = self._stage_dir(kind, key)
        done = path / "DONE"
        cached = done.exists() and done.read_text().strip() == key
        t0 = time.monotonic()
        if not cached:
            path.mkdir(parents=True, exist_ok=True)
            build(path)
            done.write_text(key + "\n")
        self.manifest["stages"][stage_id] = {
            "key": key,
            "path": str(path.relative_to(self.out)),
            "seconds": round(time.monotonic() - t0, 3),
            "cached": cached,
        }
        self._write_manifest()
        return path

    def _require(self, kind: str, key: str, hint: str) -> Path:
        path = self._stage_dir(kind, key)
        if not (path / "DONE").exists():
            raise MissingArtifactError(f"missing upstream artifact {kind}/{key[:12]}; run `{hint}` first")
        return path

    def _write_manifest(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "manifest.json").write_text(
            json.dumps(self.manifest, sort_keys=True, indent=1) + "\n"
        )

    # -- keys -------------------------------------------------------------------

    @property
    def data_key(self) -> str:
        return config_hash(self.config.data)

    def _model_cfg(self, dataset: Dataset) -> ModelConfig:
        return dataclasses.replace(
            self.config.model, vocab_size=len(dataset.vocab), d_v=dataset.config.d_v
        )

    def pretrain_key(self, dataset: Dataset) -> str:
        return config_hash(
            {
                "data": self.data_key,
                "model": dataclass_to_dict(self._model_cfg(dataset)),
                "head": self.config.head,
                "enabled": self.config.pretrain_enabled,
                "pretrain": dataclass_to_dict(self.config.pretrain),
            }
        )

    def _schedule_doc(self) -> dict:
        return dataclass_to_dict(self.config.schedule)

    def stage1_key(self, pretrain_key: str, seed: int) -> str:
        sched = self.config.schedule
        doc = {
            "pretrain": pretrain_key,
            "epochs": sched.stage1_epochs,
            "lr": sched.lr,
            "batch_size": sched.batch_size,
            "weight_decay": sched.weight_decay,
            "clip_norm": sched.clip_norm,
            "lr_decay": sched.lr_decay,
            "freeze_positions_too": sched.freeze_positions_too,
            "head": self.config.head,
            "with_qtype": self.config.with_qtype,
            "seed": seed,
        }
        return config_hash(doc)

    def run_key(self, pretrain_key: str, seed: int, strategy: str | None = None) -> str:
        return config_hash(
            {
                "pretrain": pretrain_key,
                "schedule": self._schedule_doc(),
                "strategy": strategy or self.config.strategy,
                "head": self.config.head,
                "with_qtype": self.config.with_qtype,
                "seed": seed,
            }
        )

    def eval_key(self, run_key: str, protocol: str) -> str:
        return config_hash({"run": run_key, "protocol": protocol})

    # -- stages -------------------------------------------------------------------

    def gen_data(self) -> Path:
        def build(path: Path):
            dataset = build_corpus_and_splits(self.config.data)
            save_dataset(dataset, path)

        return self._stage("gen-data", "data", self.data_key, build)

    def dataset(self, require: bool = True) -> Dataset:
        if self._dataset is None:
            if require:
                path = self._require("data", self.data_key, "xlvqa gen-data")
            else:
                path = self.gen_data()
            self._dataset = load_dataset(path)
        return self._dataset

    def pretrain_stage(self) -> Path:
        dataset = self.dataset()
        cfg = self._model_cfg(dataset)
        key = self.pretrain_key(dataset)

        def build(path: Path):
            params = build_model(cfg, HeadKind(self.config.head), seed=nn.seed_from(self.config.pretrain.seed, "init"))
            meta = {"pretrained": self.config.pretrain_enabled, "model": dataclass_to_dict(cfg), "head": self.config.head}
            if self.config.pretrain_enabled:
                from .training import pretrain as run_pretrain

                snapshot, log = run_pretrain(params, dataset, cfg, self.config.pretrain)
                snapshot.corpus_fingerprint = dataset.fingerprint
                snapshot.meta.update(meta)
                (path / "log.jsonl").write_text(
                    "\n".join(json.dumps(row, sort_keys=True) for row in log) + "\n"
                )
            else:
                snapshot = PretrainedSnapshot(params, dataset.fingerprint, self.config.pretrain.seed, meta)
                (path / "log.jsonl").write_text("")
            snapshot.save(path / "snapshot.xtc")

        return self._stage("pretrain", "pretrain", key, build)

    def _snapshot(self) -> tuple[PretrainedSnapshot, ModelConfig, str]:
        dataset = self.dataset()
        key = self.pretrain_key(dataset)
        path = self._require("pretrain", key, "xlvqa pretrain")
        return PretrainedSnapshot.load(path / "snapshot.xtc"), self._model_cfg(dataset), key

    def _method_label(self) -> str:
        return method_label(self.config.strategy, self.config.head, self.config.with_qtype)

    def _write_log(self, path: Path, log: list[dict]) -> None:
        path.write_text("\n".join(json.dumps(row, sort_keys=True) for row in log) + "\n")

    def _ensure_stage1(self, snapshot, cfg, pre_key: str, seed: int) -> Path:
        """Shared stage-1 artifact for ft-short / sb / ft-star runs."""
        key = self.stage1_key(pre_key, seed)

        def build(path: Path):
            result = finetune(
                snapshot, self.dataset(), Strategy.FT_SHORT, self.config.schedule, cfg,
                HeadKind(self.config.head), self.config.with_qtype, seed,
            )
            result.model.params.save(path / "model.xtc", meta={"phase": "stage1", "seed": seed})
            self._write_log(path / "log.jsonl", result.log)
            (path / "steps.json").write_text(json.dumps(result.step_counts, sort_keys=True) + "\n")

        return self._stage(f"stage1[seed={seed}]", "stage1", key, build)

    def finetune_stage(self) -> dict[int, Path]:
        snapshot, cfg, pre_key = self._snapshot()
        strategy = Strategy(self.config.strategy)
        out = {}
        for seed in self.config.seeds:
            key = self.run_key(pre_key, seed)

            def build(path: Path, seed=seed):
                stage1_params = None
                stage1_log: list[dict] = []
                if strategy in (Strategy.FT_SHORT, Strategy.SB, Strategy.FT_STAR):
                    s1dir = self._ensure_stage1(snapshot, cfg, pre_key, seed)
                    stage1_params, _ = ParameterSet.load(s1dir / "model.xtc")
                    stage1_log = [
                        json.loads(line) for line in (s1dir / "log.jsonl").read_text().splitlines()
                    ]
                if strategy is Strategy.FT_SHORT:
                    params = stage1_params
                    log = stage1_log
                    steps = json.loads((s1dir / "steps.json").read_text())
                    model = Model(cfg, HeadKind(self.config.head), self.config.with_qtype, params)
                else:
                    result = finetune(
                        snapshot, self.dataset(), strategy, self.config.schedule, cfg,
                        HeadKind(self.config.head), self.config.with_qtype, seed,
                        resume_stage1=stage1_params,
                    )
                    model = result.model
                    log = stage1_log + result.log
                    steps = result.step_counts
                    if result.stage1_params is not None:
                        result.stage1_params.save(path / "stage1.xtc", meta={"phase": "stage1", "seed": seed})
                model.params.save(
                    path / "model.xtc",
                    meta={
                        "strategy": strategy.value,
                        "head": self.config.head,
                        "with_qtype": self.config.with_qtype,
                        "seed": seed,
                        "label": self._method_label(),
                    },
                )
                self._write_log(path / "log.jsonl", log)
                (path / "steps.json").write_text(json.dumps(steps, sort_keys=True) + "\n")
                (path / "run.json").write_text(
                    json.dumps(
                        {
                            "strategy": strategy.value,
                            "head": self.config.head,
                            "with_qtype": self.config.with_qtype,
                            "seed": seed,
                            "label": self._method_label(),
                            "model": dataclass_to_dict(cfg),
                        },
                        sort_keys=True,
                        indent=1,
                    )
                    + "\n"
                )

            out[seed] = self._stage(f"finetune[seed={seed}]", "runs", key, build)
        return out

    def _load_run_model(self, seed: int) -> Model:
        dataset = self.dataset()
        pre_key = self.pretrain_key(dataset)
        path = self._require("runs", self.run_key(pre_key, seed), "xlvqa finetune")
        params, meta = ParameterSet.load(path / "model.xtc")
        cfg = self._model_cfg(dataset)
        return Model(cfg, HeadKind(meta["head"]), meta["with_qtype"], params)

    def _eval_one(self, protocol: str, seed: int) -> Path:
        """Evaluate one protocol for one seed (training fresh models for V-V etc.)."""
        dataset = self.dataset()
        snapshot, cfg, pre_key = self._snapshot()
        protocol = Protocol(protocol)
        label = self._method_label()
        if protocol in (Protocol.MM, Protocol.MM_V, Protocol.MM_T):
            base_key = self.run_key(pre_key, seed)
        else:
            base_key = config_hash(
                {
                    "pretrain": pre_key,
                    "schedule": self._schedule_doc(),
                    "strategy": self.config.strategy,
                    "head": self.config.head,
                    "with_qtype": self.config.with_qtype,
                    "seed": seed,
                    "unimodal": protocol.value,
                }
            )
        key = self.eval_key(base_key, protocol.value)

        def build(path: Path):
            report = EvalReport(dataset.config.source_language)
            if protocol in (Protocol.MM, Protocol.MM_V, Protocol.MM_T):
                trained = {seed: self._load_run_model(seed)}
            else:
                trained = None
            run_protocol(
                protocol, Strategy(self.config.strategy), dataset, snapshot, cfg,
                HeadKind(self.config.head), self.config.with_qtype, self.config.schedule,
                [seed], trained=trained, report=report, label=label,
            )
            (path / "counts.json").write_text(
                json.dumps(
                    {
                        "meta": {
                            "protocol": protocol.value,
                            "label": label,
                            "strategy": self.config.strategy,
                            "head": self.config.head,
                            "with_qtype": self.config.with_qtype,
                            "seed": seed,
                        },
                        "report": report.to_nested(),
                    },
                    sort_keys=True,
                    indent=1,
                )
                + "\n"
            )

        return self._stage(f"eval[{protocol.value},seed={seed}]", "evals", key, build)

    def evaluate_stage(self) -> list[Path]:
        return [self._eval_one("MM", seed) for seed in self.config.seeds]

    def ablate_stage(self, protocols: tuple[str, ...] | None = None) -> list[Path]:
        wanted = protocols or tuple(p for p in self.config.protocols if p != "MM")
        return [self._eval_one(p, seed) for p in wanted for seed in self.config.seeds]

    def fewshot_stage(self) -> list[Path]:
        if not self.config.fewshot_ks:
            return []
        dataset = self.dataset()
        pre_key = self.pretrain_key(dataset)
        label = self._method_label()
        langs = self.config.fewshot_languages or tuple(sorted(dataset.splits.fewshot))
        out = []
        for seed in self.config.seeds:
            run_key = self.run_key(pre_key, seed)
            for lang in langs:
                for k in self.config.fewshot_ks:
                    key = config_hash({"run": run_key, "lang": lang, "k": k})

                    def build(path: Path, seed=seed, lang=lang, k=k):
                        model = self._load_run_model(seed)
                        adapted = fewshot_adapt(
                            model, dataset, lang, k, seed, self.config.schedule,
                            Strategy(self.config.strategy),
                        )
                        counts = evaluate(adapted, dataset.splits.test, dataset.vocab, [lang])
                        report = EvalReport(dataset.config.source_language)
                        report.chance.update(chance_baselines(dataset.splits.test))
                        add_evaluation(report, f"FS{k}", label, seed, counts)
                        (path / "counts.json").write_text(
                            json.dumps(
                                {
                                    "meta": {
                                        "protocol": f"FS{k}",
                                        "label": label,
                                        "language": lang,
                                        "seed": seed,
                                        "k": k,
                                    },
                                    "report": report.to_nested(),
                                },
                                sort_keys=True,
                                indent=1,
                            )
                            + "\n"
                        )

                    out.append(
                        self._stage(f"fewshot[{lang},k={k},seed={seed}]", "fewshot", key, build)
                    )
        return out

    # -- reporting ----------------------------------------------------------------

    def _collect_counts(self) -> tuple[EvalReport, list[str]]:
        source = self.config.data.source_language
        merged = EvalReport(source)
        keys = []
        for kind in ("evals", "fewshot"):
            base = self.out / kind
            if not base.is_dir():
                continue
            for counts_file in sorted(base.glob("*/counts.json")):
                if not (counts_file.parent / "DONE").exists():
                    continue
                doc = json.loads(counts_file.read_text())
                merged.merge(EvalReport.from_nested(doc["report"]))
                keys.append(f"{kind}/{counts_file.parent.name}")
        if not merged.cells:
            raise MissingArtifactError("no evaluation counts found; run `xlvqa evaluate` first")
        return merged, keys

    def report_stage(self, min_trend_seeds: int = 5) -> Path:
        merged, keys = self._collect_counts()
        path = self.out / "report"
        path.mkdir(parents=True, exist_ok=True)
        merged.save(path / "report.json", path / "report.tsv")
        (path / "sources.json").write_text(json.dumps(keys, indent=1) + "\n")
        skipped = []
        for layout in ("table1", "table2", "table3", "fig2"):
            try:
                (path / f"{layout}.tsv").write_text(emit_comparison(merged, layout))
            except MissingCoverageError as exc:
                skipped.append(f"{layout}: {exc}")
        try:
            trends = trend_check(merged, min_seeds=min_trend_seeds)
            (path / "trends.json").write_text(trends_to_json(trends))
            (path / "trends.txt").write_text(trends_to_text(trends))
        except Exception as exc:  # insufficient seeds is a report-level condition
            (path / "trends.txt").write_text(f"[SKIPPED] trend checks: {exc}\n")
        if skipped:
            (path / "skipped.txt").write_text("\n".join(skipped) + "\n")
        t0 = time.monotonic()
        self.manifest["stages"]["report"] = {
            "key": "report",
            "path": "report",
            "seconds": round(time.monotonic() - t0, 3),
            "cached": False,
        }
        self._write_manifest()
        return path

    def audit(self) -> list[str]:
        """Re-derive every emitted number from raw counts; list mismatches."""
        problems = []
        report_dir = self.out / "report"
        if not (report_dir / "report.json").exists():
            raise MissingArtifactError("no report to audit; run `xlvqa report` first")
        merged, _ = self._collect_counts()
        want = json.dumps(merged.to_nested(), sort_keys=True, indent=1) + "\n"
        have = (report_dir / "report.json").read_text()
        if want != have:
            problems.append("report.json does not match a recomputation from raw counts")
        for layout in ("table1", "table2", "table3", "fig2"):
            f = report_dir / f"{layout}.tsv"
            if not f.exists():
                continue
            try:
                if emit_comparison(merged, layout) != f.read_text():
                    problems.append(f"{layout}.tsv does not match a recomputation from raw counts")
            except MissingCoverageError:
                problems.append(f"{layout}.tsv exists but counts no longer cover it")
        problems.extend(self._audit_totals(merged))
        return problems

    def _audit_totals(self, merged: EvalReport) -> list[str]:
        """Cell denominators must equal the dataset manifest's record counts."""
        problems = []
        try:
            dataset = self.dataset()
        except MissingArtifactError:
            return ["dataset artifact missing; cannot audit cell totals"]
        manifest_counts: dict[tuple[str, str], int] = {}
        for r in dataset.splits.test.records:
            key = (r.language, r.qtype)
            manifest_counts[key] = manifest_counts.get(key, 0) + 1
        for cell_key, cell in merged.cells.items():
            want = manifest_counts.get((cell_key.language, cell_key.qtype))
            if want is None:
                problems.append(f"cell {cell_key} has no matching manifest rows")
            elif cell.total != want:
                problems.append(
                    f"cell {cell_key}: total {cell.total} != manifest count {want}"
                )
            if cell.correct > cell.total:
                problems.append(f"cell {cell_key}: correct exceeds total")
        return problems

    # -- whole pipeline -------------------------------------------------------------

    def run_all(self) -> Path:
        self.gen_data()
        self._dataset = None  # reload from files, as the staged commands would
        self.dataset(require=True)
        self.pretrain_stage()
        self.finetune_stage()
        self.evaluate_stage()
        self.ablate_stage()
        self.fewshot_stage()
        return self.report_stage()
