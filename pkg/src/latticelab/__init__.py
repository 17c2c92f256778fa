"""Lattice decoding and screening evaluation for clinical speech studies.

The package covers the full loop: CHAT transcript ingestion, emission
lattice handling, n-gram language modeling, CTC decoding with optional
shallow fusion, error-rate and screening metrics, a deterministic proxy
classifier, Shapley span attribution, and a staged experiment pipeline.
"""

from .attribution import (
    AttributionEntry,
    AttributionSet,
    ContentUnit,
    ContentUnitLexicon,
    UnitAttribution,
    default_lexicon,
    deletion_value_fn,
    group_content_units,
    load_lexicon,
    read_external_attributions,
    shapley_exact,
    shapley_permutation,
    write_attributions,
)
from .chat import (
    ManifestRow,
    ParticipantRecord,
    UtteranceRecord,
    filter_participant,
    merge_to_participant,
    normalize_text,
    parse_chat,
    parse_chat_file,
    segment_manifest,
)
from .classifier import (
    FeatureSpec,
    ProxyModel,
    TrainSettings,
    featurize,
    load_model,
    predict_proba,
    save_model,
)
from .classifier import train as train_classifier
from .decoder import (
    DecodeResult,
    DecoderConfig,
    best_path_decode,
    collapse_ctc,
    decode,
    exhaustive_decode,
    prefix_beam_search,
)
from .lattice import (
    BLANK_TOKEN,
    WORD_BOUNDARY,
    EmissionLattice,
    NoiseSpec,
    default_vocab,
    lattice_from_linear,
    read_lattice,
    synth_lattice,
    write_lattice,
)
from .lm import (
    NGramModel,
    count_ngrams,
    estimate_kneser_ney,
    perplexity,
    read_arpa,
    score,
    score_token,
    write_arpa,
)
from .lm import train as train_language_model
from .metrics import (
    Alignment,
    BootstrapResult,
    MetricReport,
    accuracy,
    align,
    auc,
    bootstrap_runs,
    char_error_rate,
    corpus_error_rate,
    error_rate,
    t_confidence_interval,
    word_error_rate,
)
from .pipeline import (
    ExperimentConfig,
    PipelineError,
    ConfigError,
    build_report,
    from_dict,
    load_config,
    run_pipeline,
    to_dict,
)
from .report import RunReport, emit_report, render_text, write_report
from .synthetic import SyntheticSpec, generate_synthetic_experiment

__version__ = "0.1.0"
