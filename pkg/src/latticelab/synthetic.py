"""Synthetic two-class speech corpora with class-conditional acoustic noise.

Builds a balanced cohort of control and dementia participants, assigns each
a handful of picture-description style sentences, and renders every sentence
into an emission lattice whose corruption level depends on the class label.
The point is a fully self-contained end-to-end fixture: the texts are clean,
the lattices carry the signal, and everything is reproducible from one seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chat import CONTROL_LABEL, DEMENTIA_LABEL, ParticipantRecord
from .lattice import EmissionLattice, NoiseSpec, default_vocab, synth_lattice

TEXT_MODES = ("identical", "sampled")

# Clean sentences in the normalized alphabet (lowercase letters, apostrophes,
# single spaces).  Loosely themed around a kitchen scene so the content-unit
# lexicon has something to latch onto.
DEFAULT_TEMPLATES = (
    "the boy is standing on a stool",
    "the stool is falling over",
    "he is taking a cookie from the jar",
    "the girl is asking for a cookie",
    "the mother is washing the dishes",
    "the water is overflowing the sink",
    "the floor is getting wet",
    "she is drying a plate by the window",
    "the curtains are open",
    "the children are behind her",
    "the cupboard door is open",
    "he is handing one to his sister",
)

DEFAULT_CONTROL_NOISE = NoiseSpec(
    substitution_mass=0.04, deletion_mass=0.04, insertion_rate=0.02
)
DEFAULT_DEMENTIA_NOISE = NoiseSpec(
    substitution_mass=0.25, deletion_mass=0.25, insertion_rate=0.10
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and noise profile of a generated experiment."""

    participants_per_class: int = 30
    utterances_per_participant: int = 6
    text_mode: str = "identical"
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    control_noise: NoiseSpec = field(default_factory=lambda: DEFAULT_CONTROL_NOISE)
    dementia_noise: NoiseSpec = field(default_factory=lambda: DEFAULT_DEMENTIA_NOISE)
    vocab: tuple[str, ...] = field(default_factory=default_vocab)

    def __post_init__(self):
        if self.participants_per_class < 1:
            raise ValueError("participants_per_class must be positive")
        if self.utterances_per_participant < 1:
            raise ValueError("utterances_per_participant must be positive")
        if self.text_mode not in TEXT_MODES:
            raise ValueError(f"text_mode must be one of {TEXT_MODES}")
        if not self.templates:
            raise ValueError("template pool is empty")


@dataclass(frozen=True)
class SyntheticUtterance:
    utterance_id: str
    participant_id: str
    label: str
    text: str


@dataclass(frozen=True)
class SyntheticExperiment:
    spec: SyntheticSpec
    seed: int
    utterances: tuple[SyntheticUtterance, ...]
    lattices: tuple[EmissionLattice, ...]
    participants: tuple[ParticipantRecord, ...]


def _pick_texts(
    spec: SyntheticSpec, rng: np.random.Generator, count: int
) -> list[str]:
    if spec.text_mode == "identical":
        pool = spec.templates
        return [pool[i % len(pool)] for i in range(count)]
    indices = rng.integers(0, len(spec.templates), size=count)
    return [spec.templates[int(i)] for i in indices]


def generate_synthetic_experiment(
    spec: SyntheticSpec, seed: int
) -> SyntheticExperiment:
    """Generate a balanced labeled corpus plus one lattice per utterance.

    In "identical" text mode every participant reads the same sentences in
    the same order, so transcripts carry no class signal and only the
    lattice noise separates the groups.  In "sampled" mode sentences are
    drawn per participant from the template pool.
    """
    root = np.random.SeedSequence(seed)
    text_seq, noise_seq = root.spawn(2)
    text_rng = np.random.default_rng(text_seq)

    utterances: list[SyntheticUtterance] = []
    lattices: list[EmissionLattice] = []
    participants: list[ParticipantRecord] = []

    groups = (
        (CONTROL_LABEL, "con", spec.control_noise),
        (DEMENTIA_LABEL, "dem", spec.dementia_noise),
    )
    noise_children = iter(noise_seq.spawn(2 * spec.participants_per_class * spec.utterances_per_participant))
    for label, prefix, noise in groups:
        for p in range(spec.participants_per_class):
            participant_id = f"{prefix}{p:03d}"
            texts = _pick_texts(spec, text_rng, spec.utterances_per_participant)
            for index, text in enumerate(texts):
                utterance_id = f"{participant_id}-{index:04d}"
                child = next(noise_children)
                lattice_seed = int(child.generate_state(1, dtype=np.uint64)[0])
                utterances.append(
                    SyntheticUtterance(utterance_id, participant_id, label, text)
                )
                lattices.append(
                    synth_lattice(
                        text,
                        spec.vocab,
                        noise,
                        seed=lattice_seed,
                        utterance_id=utterance_id,
                    )
                )
            participants.append(
                ParticipantRecord(
                    participant_id=participant_id,
                    merged_text=" ".join(t for t in texts if t),
                    utterance_count=len(texts),
                    label=label,
                )
            )

    return SyntheticExperiment(
        spec=spec,
        seed=seed,
        utterances=tuple(utterances),
        lattices=tuple(lattices),
        participants=tuple(participants),
    )
