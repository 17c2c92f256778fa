"""Run reports: one machine-readable document plus a human rendering.

The machine form is plain JSON built from JSON-native values, so parsing
it back yields an equal report.  The human rendering is a fixed-width text
summary that sets this run's numbers beside reference values from earlier
published work on real cohort data; those are context only and carry an
explicit "reference, not reproduced" label.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

REFERENCE_LABEL = "reference, not reproduced"

# Headline numbers from the published study this workbench is patterned
# after: word error rates for an off-the-shelf versus a domain-adapted
# acoustic model, and screening performance on manual versus recognized
# transcripts.  They come from real cohort recordings that are not shipped
# here, so a synthetic run is not expected to match them.
REFERENCE_VALUES = {
    "wer_pretrained_best_path": 0.415,
    "wer_adapted_beam_lm": 0.285,
    "accuracy_manual_transcripts": 0.826,
    "auc_manual_transcripts": 0.873,
    "accuracy_asr_transcripts": 0.867,
    "auc_asr_transcripts": 0.903,
}

_FIELDS = (
    "config",
    "config_sha256",
    "seed",
    "stages",
    "scores",
    "classification",
    "content_units",
    "reference",
)


def _default_reference() -> dict:
    return {"label": REFERENCE_LABEL, "values": dict(REFERENCE_VALUES)}


@dataclass
class RunReport:
    """Everything a finished (or partial) run produced, JSON-native."""

    config: dict
    config_sha256: str
    seed: int
    stages: list[str]
    scores: dict | None = None
    classification: dict | None = None
    content_units: dict | None = None
    reference: dict = field(default_factory=_default_reference)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        data = json.loads(text)
        unknown = set(data) - set(_FIELDS)
        if unknown:
            raise ValueError(f"unknown report fields: {sorted(unknown)}")
        missing = {"config", "config_sha256", "seed", "stages"} - set(data)
        if missing:
            raise ValueError(f"report is missing fields: {sorted(missing)}")
        return cls(**data)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _interval(metric: dict | None) -> str:
    if not metric:
        return "-"
    return (
        f"{_fmt(metric['point'])} "
        f"[{_fmt(metric['ci_low'])}, {_fmt(metric['ci_high'])}]"
    )


def render_text(report: RunReport) -> str:
    """Fixed-width human summary of a run report."""
    lines: list[str] = []
    lines.append("experiment run report")
    lines.append("=" * 60)
    lines.append(f"seed:        {report.seed}")
    lines.append(f"config hash: {report.config_sha256}")
    lines.append(f"stages:      {', '.join(report.stages)}")

    ref = report.reference.get("values", {})
    ref_label = report.reference.get("label", REFERENCE_LABEL)

    lines.append("")
    lines.append("transcription error")
    lines.append("-" * 60)
    if report.scores:
        word = report.scores.get("word", {})
        char = report.scores.get("char", {})
        lines.append(
            f"{'metric':<22}{'this run':>12}{'(' + ref_label + ')':>26}"
        )
        ref_wer = f"{_fmt(ref.get('wer_pretrained_best_path'))}"
        lines.append(f"{'wer micro':<22}{_fmt(word.get('micro')):>12}{ref_wer:>26}")
        lines.append(f"{'wer macro':<22}{_fmt(word.get('macro')):>12}{'':>26}")
        lines.append(f"{'cer micro':<22}{_fmt(char.get('micro')):>12}{'':>26}")
        lines.append(f"{'cer macro':<22}{_fmt(char.get('macro')):>12}{'':>26}")
        lines.append(f"utterances scored: {report.scores.get('n_utterances', '-')}")
    else:
        lines.append("not run")

    lines.append("")
    lines.append("screening performance (train domain -> test domain)")
    lines.append("-" * 60)
    if report.classification:
        conditions = report.classification.get("conditions", {})
        for name in sorted(conditions):
            cond = conditions[name]
            lines.append(f"{name}:")
            lines.append(f"    accuracy  {_interval(cond.get('accuracy'))}")
            lines.append(f"    auc       {_interval(cond.get('auc'))}")
            failed = cond.get("n_failed", 0)
            if failed:
                lines.append(f"    failed runs: {failed}")
        lines.append("")
        lines.append(f"for context ({ref_label}):")
        lines.append(
            f"    manual transcripts  accuracy "
            f"{_fmt(ref.get('accuracy_manual_transcripts'))}  "
            f"auc {_fmt(ref.get('auc_manual_transcripts'))}"
        )
        lines.append(
            f"    asr transcripts     accuracy "
            f"{_fmt(ref.get('accuracy_asr_transcripts'))}  "
            f"auc {_fmt(ref.get('auc_asr_transcripts'))}"
        )
    else:
        lines.append("not run")

    lines.append("")
    lines.append("content-unit attribution")
    lines.append("-" * 60)
    if report.content_units:
        units = report.content_units.get("units", [])
        shown = sorted(units, key=lambda u: -abs(u["value"]))[:15]
        for unit in shown:
            lines.append(
                f"{unit['name']:<28}{unit['value']:>10.4f}"
                f"{unit['n_spans']:>8} spans"
            )
        if len(units) > len(shown):
            lines.append(f"... and {len(units) - len(shown)} more units")
    else:
        lines.append("not run")

    lines.append("")
    return "\n".join(lines)


REPORT_FORMATS = ("text", "json")


def emit_report(report: RunReport, fmt: str = "text") -> str:
    """Render the report in the requested format."""
    if fmt == "json":
        return report.to_json()
    if fmt == "text":
        return render_text(report)
    raise ValueError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")


def write_report(report: RunReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``report.json`` and ``report.txt`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    text_path = out / "report.txt"
    json_path.write_text(emit_report(report, "json"), encoding="utf-8")
    text_path.write_text(emit_report(report, "text"), encoding="utf-8")
    return json_path, text_path
