"""Mini-TOFU: fictitious entity profiles rendered as templated QA sequences.

Each sample is ``<bos> question ? answer .`` over a fixed word vocabulary.
The entity name (two tokens) fills the question's knowledge slots; the answer
never repeats the name, so its only knowledge-bearing token is the attribute
value while the rest of the answer sentence is fixed by the question type.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .lm import TokenSequence, Vocabulary

SCHEMA_VERSION = 1
SPECIALS = ("<pad>", "<bos>")

FIRST_NAMES = (
    "alar bren cael dova eryn fenn gorra hael isko jaru kelm lira mavo nesh orin pell "
    "quen rusa sivo tarn ulme vesk wyla xand yorr zeph"
).split()
LAST_NAMES = (
    "ashvane brightmoor coldrake dunmere evershaw fallowind graymark holloway ironvale "
    "jadecrest kestrel lowmoor marrowfield northgate oakhurst pinecroft quarlow "
    "ravensong stormvale thornbury umberlee vantreck westerly yarrowby zelling"
).split()

# attribute -> (value pool, question templates, answer template); "{name}" and
# "{value}" are placeholders.  Value pools are disjoint across attributes.
ATTRIBUTES: dict[str, tuple[list[str], list[str], str]] = {
    "birthplace": (
        "tallinn lisbon osaka quito nairobi hobart tromso cusco dakar lyon bergen "
        "kyoto perth hanoi tunis malaga".split(),
        [
            "where was {name} born ?",
            "in which city was {name} born ?",
            "what is the birthplace of {name} ?",
            "which city is the hometown of {name} ?",
            "where does {name} come from ?",
        ],
        "they were born in {value} .",
    ),
    "genre": (
        "fantasy satire horror romance thriller poetry mystery western drama fable "
        "memoir noir".split(),
        [
            "what genre does {name} write ?",
            "which genre is {name} known for ?",
            "in what genre does {name} work ?",
            "what kind of books does {name} write ?",
            "which literary genre does {name} favor ?",
        ],
        "they mostly write {value} books .",
    ),
    "award": (
        "lumen aster corvid halcyon meridian obelisk quill sable tessera verdant "
        "zenith cinder".split(),
        [
            "what award did {name} win ?",
            "which prize was given to {name} ?",
            "what honor has {name} received ?",
            "which award does {name} hold ?",
            "what prize did {name} earn ?",
        ],
        "they won the {value} prize .",
    ),
    "year": (
        "1951 1954 1958 1961 1963 1967 1970 1972 1975 1979 1982 1986".split(),
        [
            "when was {name} born ?",
            "in what year was {name} born ?",
            "what is the birth year of {name} ?",
            "which year saw the birth of {name} ?",
            "when did {name} enter the world ?",
        ],
        "they were born in the year {value} .",
    ),
    "parent": (
        "baker sailor surgeon weaver miner tailor pilot farmer chemist mason glazier "
        "cooper".split(),
        [
            "what did the parent of {name} do ?",
            "what was the job of the parent of {name} ?",
            "which trade did the parent of {name} follow ?",
            "how did the parent of {name} earn a living ?",
            "what work did the parent of {name} do ?",
        ],
        "their parent worked as a {value} .",
    ),
    "language": (
        "basque welsh tamil czech yoruba icelandic maltese latvian khmer quechua "
        "frisian sami".split(),
        [
            "what language does {name} write in ?",
            "in which language does {name} publish ?",
            "which language do the books of {name} use ?",
            "what is the writing language of {name} ?",
            "which tongue does {name} write in ?",
        ],
        "they publish in {value} .",
    ),
}


@dataclasses.dataclass(frozen=True)
class FactProfile:
    entity_id: int
    name: tuple[str, str]
    attributes: dict


@dataclasses.dataclass(frozen=True)
class QASample:
    sequence: TokenSequence
    answer_knowledge_positions: frozenset[int]
    split: str
    entity_id: int
    attribute: str = ""

    def __post_init__(self):
        object.__setattr__(self, "answer_knowledge_positions", frozenset(int(p) for p in self.answer_knowledge_positions))
        if self.split not in ("forget", "retain"):
            raise ValueError(f"split must be 'forget' or 'retain', got {self.split!r}")
        akp = self.answer_knowledge_positions
        if not akp or min(akp) < self.sequence.answer_start or max(akp) > self.sequence.T:
            raise ValueError("answer knowledge positions must be a nonempty subset of the answer region")

    @property
    def answer_structural_positions(self) -> list[int]:
        return [p for p in self.sequence.answer_positions if p not in self.answer_knowledge_positions]

    def to_record(self) -> dict:
        s = self.sequence
        return {
            "schema_version": SCHEMA_VERSION,
            "entity_id": self.entity_id,
            "split": self.split,
            "attribute": self.attribute,
            "ids": list(s.ids),
            "answer_start": s.answer_start,
            "knowledge_slots": sorted(s.knowledge_slots),
            "answer_knowledge_positions": sorted(self.answer_knowledge_positions),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "QASample":
        if rec.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {rec.get('schema_version')!r}")
        seq = TokenSequence(tuple(rec["ids"]), int(rec["answer_start"]), frozenset(rec["knowledge_slots"]))
        return cls(seq, frozenset(rec["answer_knowledge_positions"]), rec["split"], int(rec["entity_id"]), rec.get("attribute", ""))


@dataclasses.dataclass
class Dataset:
    samples: list[QASample]
    vocab: Vocabulary
    profiles: list[FactProfile] = dataclasses.field(default_factory=list)

    @property
    def forget(self) -> list[QASample]:
        return [s for s in self.samples if s.split == "forget"]

    @property
    def retain(self) -> list[QASample]:
        return [s for s in self.samples if s.split == "retain"]

    def entity_ids(self, split: str) -> set[int]:
        return {s.entity_id for s in self.samples if s.split == split}


def build_vocabulary() -> Vocabulary:
    words = list(SPECIALS) + FIRST_NAMES + LAST_NAMES
    for pool, questions, answer in ATTRIBUTES.values():
        for text in questions + [answer]:
            words += [w for w in text.split() if w not in ("{name}", "{value}")]
        words += pool
    return Vocabulary.build(words)


def generate(num_entities: int = 40, qa_per_entity: int = 5, forget_fraction: float = 0.1, seed: int = 0) -> Dataset:
    """Deterministic mini-TOFU dataset split by entity into forget/retain."""
    if num_entities < 10:
        raise ValueError("num_entities must be at least 10")
    if not 0.0 < forget_fraction < 1.0:
        raise ValueError("forget_fraction must lie in (0, 1)")
    if not 2 <= qa_per_entity <= len(ATTRIBUTES) * 5:
        raise ValueError(f"qa_per_entity must lie in [2, {len(ATTRIBUTES) * 5}]")
    if num_entities > len(FIRST_NAMES) * len(LAST_NAMES):
        raise ValueError("not enough distinct names")
    rng = np.random.default_rng(seed)
    vocab = build_vocabulary()
    bos = vocab.encode(["<bos>"])[0]

    pairs = [(f, l) for f in FIRST_NAMES for l in LAST_NAMES]
    picks = rng.choice(len(pairs), size=num_entities, replace=False)
    attr_names = list(ATTRIBUTES)
    profiles = []
    for eid, k in enumerate(picks):
        values = {a: ATTRIBUTES[a][0][rng.integers(len(ATTRIBUTES[a][0]))] for a in attr_names}
        profiles.append(FactProfile(eid, pairs[k], values))

    n_forget = int(round(forget_fraction * num_entities))
    forget_ids = set(int(i) for i in rng.choice(num_entities, size=n_forget, replace=False))

    # every (attribute, template) combination, visited attribute-major so the
    # first len(ATTRIBUTES) questions cover distinct attributes
    combos = [(a, t) for t in range(5) for a in attr_names]
    samples = []
    for prof in profiles:
        order = rng.permutation(len(attr_names))
        chosen = []
        for j in range(qa_per_entity):
            a = attr_names[order[j % len(attr_names)]]
            used = {t for (aa, t) in chosen if aa == a}
            free = [t for (aa, t) in combos if aa == a and t not in used]
            chosen.append((a, int(free[rng.integers(len(free))])))
        split = "forget" if prof.entity_id in forget_ids else "retain"
        for a, t in chosen:
            samples.append(_render(prof, a, t, vocab, bos, split))
    return Dataset(samples, vocab, profiles)


def _render(prof: FactProfile, attr: str, template: int, vocab: Vocabulary, bos: int, split: str) -> QASample:
    _, questions, answer = ATTRIBUTES[attr]
    q_words, slots = ["<bos>"], []
    for w in questions[template].split():
        if w == "{name}":
            slots += [len(q_words) + 1, len(q_words) + 2]
            q_words += list(prof.name)
        else:
            q_words.append(w)
    a_words, knowledge = [], []
    for w in answer.split():
        if w == "{value}":
            knowledge.append(len(q_words) + len(a_words) + 1)
            a_words.append(prof.attributes[attr])
        else:
            a_words.append(w)
    ids = vocab.encode(q_words + a_words)
    seq = TokenSequence(tuple(ids), len(q_words) + 1, frozenset(slots))
    return QASample(seq, frozenset(knowledge), split, prof.entity_id, attr)


def save_samples(samples: Sequence[QASample], path) -> None:
    """JSON-lines, one sample per line (empty dataset -> empty file)."""
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record()) + "\n")


def load_samples(path) -> list[QASample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(QASample.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed sample: {exc}") from exc
    return out


def save_dataset(ds: Dataset, directory) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_samples(ds.samples, d / "data.jsonl")
    ds.vocab.save(d / "vocab.json")
    return d / "data.jsonl", d / "vocab.json"


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    return Dataset(load_samples(d / "data.jsonl"), Vocabulary.load(d / "vocab.json"))
