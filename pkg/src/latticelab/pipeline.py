"""Staged experiment pipeline over a single output directory.

Every stage reads artifacts written by earlier stages and writes its own,
plus a small meta sidecar recording the config hash and master seed.  Given
the same config and seed the whole tree is byte-identical across runs, so
two output directories can be diffed to prove reproducibility.

Stage map (canonical order):

    preprocess  .cha transcripts -> corpus/participants/manifest/lm corpus
    synth       generated corpus + lattices instead of preprocess
    train-lm    lm_corpus.txt -> lm.arpa
    decode      lattices/*.lat -> decodes.jsonl
    score       corpus + decodes -> scores.json (WER/CER)
    classify    participant texts -> classify.json (bootstrap CIs)
    attribute   spans -> attributions/*.jsonl + content_units.json
    report      everything above -> report.json + report.txt
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .attribution import (
    EXACT_TOKEN_LIMIT,
    AttributionEntry,
    AttributionSet,
    ContentUnitLexicon,
    default_lexicon,
    deletion_value_fn,
    group_content_units,
    load_lexicon,
    shapley_exact,
    shapley_permutation,
    write_attributions,
)
from .chat import (
    filter_participant,
    merge_to_participant,
    parse_chat_file,
    participant_metadata,
    segment_manifest,
    utterance_id as make_utterance_id,
    CONTROL_LABEL,
    DEMENTIA_LABEL,
)
from .classifier import FeatureSpec, ProxyModel, TrainSettings, predict_proba
from .classifier import train as train_classifier
from .decoder import DecoderConfig, decode
from .lattice import NoiseSpec, read_lattice, write_lattice
from .lm import read_arpa, write_arpa
from .lm import train as train_language_model
from .metrics import (
    Alignment,
    accuracy,
    align,
    auc,
    bootstrap_runs,
    corpus_error_rate,
    t_confidence_interval,
)
from .report import RunReport, write_report
from .synthetic import SyntheticSpec, generate_synthetic_experiment

logger = logging.getLogger(__name__)

LATTICE_SUFFIX = ".lat"

CLASSIFY_DOMAINS = ("manual", "asr")
DEFAULT_CONDITIONS = (
    ("manual", "manual"),
    ("manual", "asr"),
    ("asr", "manual"),
    ("asr", "asr"),
)

STAGE_ORDER = (
    "preprocess",
    "synth",
    "train-lm",
    "decode",
    "score",
    "classify",
    "attribute",
    "report",
)

DEFAULT_STAGES = (
    "synth",
    "train-lm",
    "decode",
    "score",
    "classify",
    "attribute",
    "report",
)


class ConfigError(ValueError):
    """The configuration is unusable; raised before any stage runs."""


class PipelineError(RuntimeError):
    """A stage failed.  Artifacts written so far are left in place."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs, mirrored one-to-one by the JSON config."""

    seed: int = 0
    out_dir: str = "out"
    stages: tuple[str, ...] = DEFAULT_STAGES
    corpus_dir: str | None = None
    lexicon_path: str | None = None
    lm_order: int = 5
    lm_path: str | None = None
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    training: TrainSettings = field(default_factory=TrainSettings)
    n_bootstrap: int = 100
    confidence_level: float = 0.95
    conditions: tuple[tuple[str, str], ...] = DEFAULT_CONDITIONS
    attribution_domain: str = "asr"
    attribution_permutations: int = 2000
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        unknown = set(self.stages) - set(STAGE_ORDER)
        if unknown:
            raise ConfigError(f"unknown stages: {sorted(unknown)}")
        if "preprocess" in self.stages and "synth" in self.stages:
            raise ConfigError("preprocess and synth both build the corpus; pick one")
        if "preprocess" in self.stages and not self.corpus_dir:
            raise ConfigError("preprocess needs corpus_dir")
        if "synth" in self.stages and self.synthetic is None:
            raise ConfigError("synth needs a synthetic section")
        if not 1 <= self.lm_order <= 6:
            raise ConfigError("lm_order must be between 1 and 6")
        if self.n_bootstrap < 2:
            raise ConfigError("n_bootstrap must be at least 2")
        if not 0 <= self.confidence_level < 1:
            raise ConfigError("confidence_level must be in [0, 1)")
        if self.attribution_permutations < 1:
            raise ConfigError("attribution_permutations must be positive")
        for pair in self.conditions:
            if len(pair) != 2 or any(d not in CLASSIFY_DOMAINS for d in pair):
                raise ConfigError(f"bad classify condition {pair!r}")
        if self.attribution_domain not in CLASSIFY_DOMAINS:
            raise ConfigError(f"bad attribution_domain {self.attribution_domain!r}")
        if (
            "decode" in self.stages
            and self.decoder.mode == "beam"
            and self.lm_path is None
            and "train-lm" not in self.stages
        ):
            raise ConfigError(
                "beam decoding needs a language model: set lm_path or enable train-lm"
            )


def resolved_lm_path(config: ExperimentConfig) -> Path:
    if config.lm_path is not None:
        return Path(config.lm_path)
    return Path(config.out_dir) / "lm.arpa"


def _noise_to_dict(noise: NoiseSpec) -> dict:
    return {
        "substitution_mass": noise.substitution_mass,
        "deletion_mass": noise.deletion_mass,
        "insertion_rate": noise.insertion_rate,
        "frames_per_token": noise.frames_per_token,
    }


def to_dict(config: ExperimentConfig) -> dict:
    """JSON-native mirror of the config; inverse of :func:`from_dict`."""
    synth = config.synthetic
    return {
        "seed": config.seed,
        "out_dir": config.out_dir,
        "stages": list(config.stages),
        "corpus_dir": config.corpus_dir,
        "lexicon_path": config.lexicon_path,
        "lm_order": config.lm_order,
        "lm_path": config.lm_path,
        "decoder": {
            "mode": config.decoder.mode,
            "beam_width": config.decoder.beam_width,
            "lm_weight": config.decoder.lm_weight,
            "word_bonus": config.decoder.word_bonus,
            "token_prune_log_threshold": config.decoder.token_prune_log_threshold,
        },
        "features": {
            "word_ngram_orders": list(config.features.word_ngram_orders),
            "char_ngram_orders": list(config.features.char_ngram_orders),
            "n_features": config.features.n_features,
        },
        "training": {
            "learning_rate": config.training.learning_rate,
            "max_iterations": config.training.max_iterations,
            "l2_penalty": config.training.l2_penalty,
        },
        "n_bootstrap": config.n_bootstrap,
        "confidence_level": config.confidence_level,
        "conditions": [list(pair) for pair in config.conditions],
        "attribution_domain": config.attribution_domain,
        "attribution_permutations": config.attribution_permutations,
        "synthetic": None
        if synth is None
        else {
            "participants_per_class": synth.participants_per_class,
            "utterances_per_participant": synth.utterances_per_participant,
            "text_mode": synth.text_mode,
            "templates": list(synth.templates),
            "control_noise": _noise_to_dict(synth.control_noise),
            "dementia_noise": _noise_to_dict(synth.dementia_noise),
            "vocab": list(synth.vocab),
        },
    }


def _build(cls, data: Mapping, what: str):
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from exc


def from_dict(data: Mapping) -> ExperimentConfig:
    """Hydrate a config from its JSON form, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict = {
        k: data[k]
        for k in (
            "seed",
            "out_dir",
            "corpus_dir",
            "lexicon_path",
            "lm_order",
            "lm_path",
            "n_bootstrap",
            "confidence_level",
            "attribution_domain",
            "attribution_permutations",
        )
        if k in data
    }
    if "stages" in data:
        kwargs["stages"] = tuple(data["stages"])
    if "conditions" in data:
        kwargs["conditions"] = tuple(tuple(pair) for pair in data["conditions"])
    if "decoder" in data:
        kwargs["decoder"] = _build(DecoderConfig, data["decoder"], "decoder")
    if "features" in data:
        feats = dict(data["features"])
        for key in ("word_ngram_orders", "char_ngram_orders"):
            if key in feats:
                feats[key] = tuple(feats[key])
        kwargs["features"] = _build(FeatureSpec, feats, "features")
    if "training" in data:
        kwargs["training"] = _build(TrainSettings, data["training"], "training")
    if "synthetic" in data:
        section = data["synthetic"]
        if section is None:
            kwargs["synthetic"] = None
        else:
            synth = dict(section)
            for key in ("control_noise", "dementia_noise"):
                if key in synth:
                    synth[key] = _build(NoiseSpec, synth[key], key)
            for key in ("templates", "vocab"):
                if key in synth:
                    synth[key] = tuple(synth[key])
            kwargs["synthetic"] = _build(SyntheticSpec, synth, "synthetic")
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return from_dict(data)


def config_digest(config: ExperimentConfig) -> str:
    """Hash of the effective config (CLI overrides already applied)."""
    canonical = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ArtifactPaths:
    out: Path
    corpus: Path
    participants: Path
    manifest: Path
    lm_corpus: Path
    lm: Path
    lattices: Path
    decodes: Path
    scores: Path
    classify: Path
    attributions: Path
    units: Path
    meta: Path


def artifact_paths(config: ExperimentConfig) -> ArtifactPaths:
    out = Path(config.out_dir)
    return ArtifactPaths(
        out=out,
        corpus=out / "corpus.jsonl",
        participants=out / "participants.jsonl",
        manifest=out / "manifest.jsonl",
        lm_corpus=out / "lm_corpus.txt",
        lm=resolved_lm_path(config),
        lattices=out / "lattices",
        decodes=out / "decodes.jsonl",
        scores=out / "scores.json",
        classify=out / "classify.json",
        attributions=out / "attributions",
        units=out / "content_units.json",
        meta=out / "meta",
    )


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(_dump(row) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _require(path: Path, stage: str, hint: str) -> Path:
    if not path.exists():
        raise PipelineError(stage, f"missing {path} ({hint})")
    return path


def _write_meta(config: ExperimentConfig, stage: str) -> None:
    paths = artifact_paths(config)
    _write_json(
        paths.meta / f"{stage}.json",
        {"stage": stage, "config_sha256": config_digest(config), "seed": config.seed},
    )


def _derived_seed(config: ExperimentConfig, *scope: str | int) -> int:
    """A stable sub-seed for one named consumer of the master seed."""
    entropy = [config.seed] + [
        int.from_bytes(hashlib.sha256(str(s).encode()).digest()[:4], "big")
        for s in scope
    ]
    seq = np.random.SeedSequence(entropy)
    return int(seq.generate_state(1, dtype=np.uint64)[0])


# --- corpus producers ----------------------------------------------------


def stage_synth(config: ExperimentConfig) -> None:
    paths = artifact_paths(config)
    experiment = generate_synthetic_experiment(config.synthetic, config.seed)

    corpus_rows = [
        {
            "utterance_id": u.utterance_id,
            "participant_id": u.participant_id,
            "label": u.label,
            "text": u.text,
        }
        for u in experiment.utterances
    ]
    _write_jsonl(paths.corpus, corpus_rows)

    participant_rows = [
        {
            "participant_id": p.participant_id,
            "label": p.label,
            "merged_text": p.merged_text,
            "utterance_count": p.utterance_count,
            "age": p.age,
            "sex": p.sex,
            "mmse": p.mmse,
        }
        for p in experiment.participants
    ]
    _write_jsonl(paths.participants, participant_rows)

    paths.lattices.mkdir(parents=True, exist_ok=True)
    for lattice in experiment.lattices:
        write_lattice(lattice, paths.lattices / f"{lattice.utterance_id}{LATTICE_SUFFIX}")

    paths.lm_corpus.parent.mkdir(parents=True, exist_ok=True)
    with open(paths.lm_corpus, "w", encoding="utf-8") as fh:
        for u in experiment.utterances:
            if u.text:
                fh.write(u.text + "\n")

    _write_meta(config, "synth")
    logger.info(
        "synth: %d utterances, %d participants",
        len(experiment.utterances),
        len(experiment.participants),
    )


def stage_preprocess(config: ExperimentConfig) -> None:
    stage = "preprocess"
    paths = artifact_paths(config)
    corpus_dir = Path(config.corpus_dir)
    if not corpus_dir.is_dir():
        raise PipelineError(stage, f"corpus_dir {corpus_dir} is not a directory")
    files = sorted(corpus_dir.glob("*.cha"))
    if not files:
        raise PipelineError(stage, f"no .cha files under {corpus_dir}")

    corpus_rows: list[dict] = []
    participant_rows: list[dict] = []
    manifest_rows: list[dict] = []
    lm_lines: list[str] = []

    for path in files:
        records = filter_participant(parse_chat_file(path))
        if not records:
            logger.warning("%s has no participant utterances; skipped", path.name)
            continue
        metadata = participant_metadata(path.read_text(encoding="utf-8"))
        participant = merge_to_participant(records, metadata)
        participant_rows.append(
            {
                "participant_id": participant.participant_id,
                "label": participant.label,
                "merged_text": participant.merged_text,
                "utterance_count": participant.utterance_count,
                "age": participant.age,
                "sex": participant.sex,
                "mmse": participant.mmse,
            }
        )
        for index, record in enumerate(records):
            corpus_rows.append(
                {
                    "utterance_id": make_utterance_id(record, index),
                    "participant_id": record.participant_id,
                    "label": participant.label,
                    "text": record.text,
                    "start_ms": record.start_ms,
                    "end_ms": record.end_ms,
                }
            )
            if record.text:
                lm_lines.append(record.text)
        for row in segment_manifest(records):
            manifest_rows.append(
                {
                    "utterance_id": row.utterance_id,
                    "source_audio": row.source_audio,
                    "start_ms": row.start_ms,
                    "end_ms": row.end_ms,
                    "target_sample_rate": row.target_sample_rate,
                }
            )

    if not participant_rows:
        raise PipelineError(stage, "no usable transcripts found")
    _write_jsonl(paths.corpus, corpus_rows)
    _write_jsonl(paths.participants, participant_rows)
    _write_jsonl(paths.manifest, manifest_rows)
    paths.lm_corpus.write_text(
        "".join(line + "\n" for line in lm_lines), encoding="utf-8"
    )
    _write_meta(config, stage)
    logger.info(
        "preprocess: %d files -> %d utterances", len(files), len(corpus_rows)
    )


# --- model stages --------------------------------------------------------


def stage_train_lm(config: ExperimentConfig) -> None:
    stage = "train-lm"
    paths = artifact_paths(config)
    _require(paths.lm_corpus, stage, "run preprocess or synth first")
    lines = [
        line
        for line in paths.lm_corpus.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not lines:
        raise PipelineError(stage, f"{paths.lm_corpus} is empty")
    model = train_language_model(lines, order=config.lm_order)
    paths.lm.parent.mkdir(parents=True, exist_ok=True)
    write_arpa(model, paths.lm)
    _write_meta(config, stage)
    logger.info("train-lm: order %d over %d lines", config.lm_order, len(lines))


def stage_decode(config: ExperimentConfig) -> None:
    stage = "decode"
    paths = artifact_paths(config)
    if not paths.lattices.is_dir():
        raise PipelineError(stage, f"missing lattice directory {paths.lattices}")
    files = sorted(paths.lattices.glob(f"*{LATTICE_SUFFIX}"))
    if not files:
        raise PipelineError(stage, f"no lattices under {paths.lattices}")

    lm = None
    if config.decoder.mode == "beam":
        _require(paths.lm, stage, "train-lm writes it, or set lm_path")
        lm = read_arpa(paths.lm)

    rows = []
    for path in files:
        result = decode(read_lattice(path), config.decoder, lm)
        rows.append(
            {
                "utterance_id": result.utterance_id,
                "transcript": result.transcript,
                "acoustic_log_prob": result.acoustic_log_prob,
                "fused_score": result.fused_score,
                "mode": result.mode,
            }
        )
    _write_jsonl(paths.decodes, rows)
    _write_meta(config, stage)
    logger.info("decode: %d lattices in %s mode", len(rows), config.decoder.mode)


def stage_score(config: ExperimentConfig) -> None:
    stage = "score"
    paths = artifact_paths(config)
    corpus = _read_jsonl(_require(paths.corpus, stage, "run preprocess or synth first"))
    decodes = _read_jsonl(_require(paths.decodes, stage, "run decode first"))

    hyps = {row["utterance_id"]: row["transcript"] for row in decodes}
    refs = {row["utterance_id"]: row["text"] for row in corpus}
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise PipelineError(stage, f"no decode for utterances {missing[:5]}")
    stray = sorted(set(hyps) - set(refs))
    if stray:
        raise PipelineError(stage, f"decodes for unknown utterances {stray[:5]}")

    word_alignments: list[Alignment] = []
    char_alignments: list[Alignment] = []
    skipped = 0
    for uid in sorted(refs):
        ref, hyp = refs[uid], hyps[uid]
        if not ref and not hyp:
            skipped += 1
            continue
        word_alignments.append(align(ref.split(), hyp.split()))
        char_alignments.append(align(list(ref), list(hyp)))

    if not word_alignments:
        raise PipelineError(stage, "nothing to score: all pairs were empty")
    scores = {
        "n_utterances": len(word_alignments),
        "n_empty_pairs": skipped,
        "word": {
            "micro": corpus_error_rate(word_alignments, aggregation="micro"),
            "macro": corpus_error_rate(word_alignments, aggregation="macro"),
        },
        "char": {
            "micro": corpus_error_rate(char_alignments, aggregation="micro"),
            "macro": corpus_error_rate(char_alignments, aggregation="macro"),
        },
    }
    _write_json(paths.scores, scores)
    _write_meta(config, stage)
    logger.info("score: wer %.4f over %d utterances", scores["word"]["micro"], len(word_alignments))


# --- classification ------------------------------------------------------


def _participant_labels(rows: list[dict], stage: str) -> dict[str, int]:
    labels: dict[str, int] = {}
    for row in rows:
        label = row["label"]
        if label == DEMENTIA_LABEL:
            labels[row["participant_id"]] = 1
        elif label == CONTROL_LABEL:
            labels[row["participant_id"]] = 0
        else:
            raise PipelineError(
                stage, f"participant {row['participant_id']} lacks a usable label"
            )
    return labels


def _asr_texts(corpus: list[dict], decodes: list[dict]) -> dict[str, str]:
    """Per-participant transcript joined from decoded utterances in order."""
    hyp = {row["utterance_id"]: row["transcript"] for row in decodes}
    by_participant: dict[str, list[tuple[str, str]]] = {}
    for row in corpus:
        uid = row["utterance_id"]
        if uid in hyp:
            by_participant.setdefault(row["participant_id"], []).append((uid, hyp[uid]))
    return {
        pid: " ".join(text for _, text in sorted(pairs) if text)
        for pid, pairs in by_participant.items()
    }


def split_participants(
    labels: Mapping[str, int], seed: int
) -> tuple[list[str], list[str]]:
    """Deterministic stratified half split; the larger half trains."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51B11]))
    train: list[str] = []
    test: list[str] = []
    for cls in (0, 1):
        ids = sorted(pid for pid, label in labels.items() if label == cls)
        if len(ids) < 2:
            raise ValueError(f"need at least 2 participants per class, got {len(ids)}")
        order = rng.permutation(len(ids))
        cut = len(ids) // 2
        test.extend(ids[i] for i in order[:cut])
        train.extend(ids[i] for i in order[cut:])
    return sorted(train), sorted(test)


def _domain_text(
    domain: str,
    pid: str,
    manual: Mapping[str, str],
    asr: Mapping[str, str],
    stage: str,
) -> str:
    if domain == "manual":
        return manual[pid]
    if pid not in asr:
        raise PipelineError(stage, f"no decoded transcript for participant {pid}")
    return asr[pid]


def stage_classify(config: ExperimentConfig) -> None:
    stage = "classify"
    paths = artifact_paths(config)
    participants = _read_jsonl(
        _require(paths.participants, stage, "run preprocess or synth first")
    )
    labels = _participant_labels(participants, stage)
    manual = {row["participant_id"]: row["merged_text"] for row in participants}

    needs_asr = any("asr" in pair for pair in config.conditions)
    asr: dict[str, str] = {}
    if needs_asr:
        corpus = _read_jsonl(_require(paths.corpus, stage, "run preprocess or synth first"))
        decodes = _read_jsonl(_require(paths.decodes, stage, "run decode first"))
        asr = _asr_texts(corpus, decodes)

    try:
        train_ids, test_ids = split_participants(labels, config.seed)
    except ValueError as exc:
        raise PipelineError(stage, str(exc)) from exc

    conditions: dict[str, dict] = {}
    for index, (train_domain, test_domain) in enumerate(config.conditions):
        name = f"{train_domain}-{test_domain}"
        train_rows = [
            (_domain_text(train_domain, pid, manual, asr, stage), labels[pid])
            for pid in train_ids
        ]
        # The optimizer is deterministic and draws no randomness, so one fit
        # per condition equals refitting per bootstrap run; run seeds drive
        # the test resampling.
        model = train_classifier(
            train_rows,
            config.features,
            config.training,
            seed=_derived_seed(config, "classify-train", name),
        )
        test_texts = [
            _domain_text(test_domain, pid, manual, asr, stage) for pid in test_ids
        ]
        test_labels = np.array([labels[pid] for pid in test_ids], dtype=np.int64)
        probs = np.asarray(predict_proba(model, test_texts), dtype=np.float64)

        def runner(seed: int, probs=probs, test_labels=test_labels) -> tuple[float, float]:
            rng = np.random.default_rng(seed)
            idx = rng.integers(0, len(test_labels), size=len(test_labels))
            p = probs[idx]
            y = test_labels[idx]
            predicted = (p >= 0.5).astype(np.int64)
            return (
                accuracy(predicted.tolist(), y.tolist()),
                auc(p.tolist(), y.tolist()),
            )

        boot = bootstrap_runs(
            runner, config.n_bootstrap, seed=_derived_seed(config, "classify", name)
        )
        if not boot.values:
            raise PipelineError(stage, f"every bootstrap run failed for {name}")
        arr = np.array(boot.values, dtype=np.float64)
        conditions[name] = {
            "accuracy": dataclasses.asdict(
                t_confidence_interval(
                    arr[:, 0], config.confidence_level, metric=f"accuracy {name}"
                )
            ),
            "auc": dataclasses.asdict(
                t_confidence_interval(
                    arr[:, 1], config.confidence_level, metric=f"auc {name}"
                )
            ),
            "n_failed": boot.n_failed,
            "n_runs": boot.n_runs,
        }
        logger.info(
            "classify %s: auc %.4f", name, conditions[name]["auc"]["point"]
        )

    _write_json(
        paths.classify,
        {"split": {"train": train_ids, "test": test_ids}, "conditions": conditions},
    )
    _write_meta(config, stage)


# --- attribution ---------------------------------------------------------


def _load_lexicon(config: ExperimentConfig) -> ContentUnitLexicon:
    if config.lexicon_path is not None:
        return load_lexicon(config.lexicon_path)
    return default_lexicon()


def _participant_spans(
    domain: str,
    pid: str,
    corpus: list[dict],
    hyp: Mapping[str, str],
) -> list[tuple[int, str]]:
    """(utterance position, text) spans for one participant, empties dropped."""
    spans = []
    rows = sorted(
        (row["utterance_id"], row) for row in corpus if row["participant_id"] == pid
    )
    for position, (uid, row) in enumerate(rows):
        text = hyp[uid] if domain == "asr" else row["text"]
        if text:
            spans.append((position, text))
    return spans


def stage_attribute(config: ExperimentConfig) -> None:
    stage = "attribute"
    paths = artifact_paths(config)
    participants = _read_jsonl(
        _require(paths.participants, stage, "run preprocess or synth first")
    )
    corpus = _read_jsonl(_require(paths.corpus, stage, "run preprocess or synth first"))
    labels = _participant_labels(participants, stage)
    manual = {row["participant_id"]: row["merged_text"] for row in participants}

    hyp: dict[str, str] = {}
    asr: dict[str, str] = {}
    if config.attribution_domain == "asr":
        decodes = _read_jsonl(_require(paths.decodes, stage, "run decode first"))
        hyp = {row["utterance_id"]: row["transcript"] for row in decodes}
        asr = _asr_texts(corpus, decodes)

    try:
        train_ids, test_ids = split_participants(labels, config.seed)
    except ValueError as exc:
        raise PipelineError(stage, str(exc)) from exc

    domain = config.attribution_domain
    train_rows = [
        (_domain_text(domain, pid, manual, asr, stage), labels[pid])
        for pid in train_ids
    ]
    model = train_classifier(
        train_rows,
        config.features,
        config.training,
        seed=_derived_seed(config, "attribute-train"),
    )

    def predict(text: str) -> float:
        return float(predict_proba(model, text))

    lexicon = _load_lexicon(config)
    paths.attributions.mkdir(parents=True, exist_ok=True)
    unit_values: dict[str, list[float]] = {}
    unit_spans: dict[str, int] = {}
    ordered_names: list[str] = []

    for pid in test_ids:
        positioned = _participant_spans(domain, pid, corpus, hyp)
        if not positioned:
            logger.warning("participant %s has no spans to attribute", pid)
            continue
        positions = [pos for pos, _ in positioned]
        spans = [text for _, text in positioned]
        value_fn = deletion_value_fn(predict, spans)
        if len(spans) <= EXACT_TOKEN_LIMIT:
            result = shapley_exact(value_fn, spans, participant_id=pid)
        else:
            result = shapley_permutation(
                value_fn,
                spans,
                n_permutations=config.attribution_permutations,
                seed=_derived_seed(config, "attribute", pid),
                participant_id=pid,
            )
        result = AttributionSet(
            participant_id=pid,
            base_value=result.base_value,
            full_value=result.full_value,
            entries=tuple(
                AttributionEntry(e.span, positions[i], e.value, e.stderr)
                for i, e in enumerate(result.entries)
            ),
        )
        write_attributions(result, paths.attributions / f"{pid}.jsonl")
        for unit in group_content_units(result, lexicon):
            if unit.name not in unit_values:
                unit_values[unit.name] = []
                unit_spans[unit.name] = 0
                ordered_names.append(unit.name)
            unit_values[unit.name].append(unit.value)
            unit_spans[unit.name] += len(unit.entries)

    lexicon_order = {unit.name: i for i, unit in enumerate(lexicon.units)}
    ordered_names.sort(key=lambda n: lexicon_order.get(n, len(lexicon_order)))
    units = [
        {
            "name": name,
            "value": math.fsum(unit_values[name]),
            "n_spans": unit_spans[name],
        }
        for name in ordered_names
    ]
    _write_json(
        paths.units,
        {"domain": domain, "participants": test_ids, "units": units},
    )
    _write_meta(config, stage)
    logger.info("attribute: %d participants, %d units", len(test_ids), len(units))


# --- report and orchestration --------------------------------------------


def build_report(config: ExperimentConfig) -> RunReport:
    """Assemble a report from whatever artifacts exist right now."""
    paths = artifact_paths(config)
    return RunReport(
        config=to_dict(config),
        config_sha256=config_digest(config),
        seed=config.seed,
        stages=list(config.stages),
        scores=_read_json(paths.scores) if paths.scores.exists() else None,
        classification=_read_json(paths.classify) if paths.classify.exists() else None,
        content_units=_read_json(paths.units) if paths.units.exists() else None,
    )


def stage_report(config: ExperimentConfig) -> None:
    write_report(build_report(config), config.out_dir)
    _write_meta(config, "report")


STAGE_FUNCTIONS: dict[str, Callable[[ExperimentConfig], None]] = {
    "preprocess": stage_preprocess,
    "synth": stage_synth,
    "train-lm": stage_train_lm,
    "decode": stage_decode,
    "score": stage_score,
    "classify": stage_classify,
    "attribute": stage_attribute,
    "report": stage_report,
}


def run_pipeline(config: ExperimentConfig) -> RunReport:
    """Run the configured stages in canonical order and report.

    A failing stage raises :class:`PipelineError` naming the stage;
    artifacts written before the failure stay on disk.
    """
    Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    for stage in (s for s in STAGE_ORDER if s in config.stages):
        logger.info("running stage %s", stage)
        try:
            STAGE_FUNCTIONS[stage](config)
        except PipelineError:
            raise
        except ConfigError as exc:
            raise PipelineError(stage, str(exc)) from exc
        except Exception as exc:
            raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc
    return build_report(config)
