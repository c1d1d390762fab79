"""Corpus layer: instances, datasets, session splits, episodic sampling, exemplars.

Instances are immutable sentence-level records with BIO label sequences.
A session plan partitions a dataset's event classes into one large base
subset and a series of disjoint few-shot increments; all sampling is a
pure function of (inputs, seed) so plans and episodes can be reproduced
from a manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import as_rng, rng_from

O_LABEL = "O"


def label_space(classes: Sequence[str]) -> list[str]:
    """BIO label list for ``classes``: O first, then all B- tags, then all I- tags.

    Length is always ``2 * len(classes) + 1``.
    """
    seen: set[str] = set()
    for c in classes:
        if c in seen:
            raise ValueError(f"duplicate event class id: {c!r}")
        seen.add(c)
    return [O_LABEL] + [f"B-{c}" for c in classes] + [f"I-{c}" for c in classes]


def class_of_label(label: str) -> str | None:
    """Event class named by a BIO tag, or None for O."""
    if label == O_LABEL:
        return None
    return label.split("-", 1)[1]


@dataclass(frozen=True)
class Instance:
    """One sentence with aligned BIO labels.

    Validation is strict: malformed BIO sequences are rejected rather than
    repaired, since silent repair would corrupt span-F1 accounting.
    """

    tokens: tuple[str, ...]
    labels: tuple[str, ...]
    doc_id: str | None = None

    def __post_init__(self) -> None:
        if not self.tokens:
            raise ValueError("instance has no tokens")
        if len(self.tokens) != len(self.labels):
            raise ValueError(
                f"token/label length mismatch: {len(self.tokens)} tokens "
                f"vs {len(self.labels)} labels"
            )
        prev = O_LABEL
        for i, lab in enumerate(self.labels):
            if lab == O_LABEL:
                prev = lab
                continue
            if "-" not in lab or lab.split("-", 1)[0] not in ("B", "I"):
                raise ValueError(f"invalid BIO tag at position {i}: {lab!r}")
            prefix, cls = lab.split("-", 1)
            if prefix == "I":
                if prev == O_LABEL or class_of_label(prev) != cls:
                    raise ValueError(
                        f"I-{cls} at position {i} not preceded by B-{cls} or I-{cls}"
                    )
            prev = lab

    @cached_property
    def class_ids(self) -> frozenset[str]:
        return frozenset(c for lab in self.labels if (c := class_of_label(lab)) is not None)

    def __len__(self) -> int:
        return len(self.tokens)

    def trigger_tokens(self, cls: str) -> tuple[str, ...]:
        """Tokens of the first trigger span of ``cls`` (empty if absent)."""
        out: list[str] = []
        for tok, lab in zip(self.tokens, self.labels):
            if lab == f"B-{cls}":
                if out:
                    break
                out.append(tok)
            elif lab == f"I-{cls}" and out:
                out.append(tok)
            elif out:
                break
        return tuple(out)

    def to_record(self) -> dict:
        rec = {"tokens": list(self.tokens), "labels": list(self.labels)}
        if self.doc_id is not None:
            rec["doc_id"] = self.doc_id
        return rec


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of instances with a per-class index."""

    instances: tuple[Instance, ...]

    @cached_property
    def classes(self) -> tuple[str, ...]:
        out: set[str] = set()
        for ins in self.instances:
            out |= ins.class_ids
        return tuple(sorted(out))

    @cached_property
    def by_class(self) -> dict[str, tuple[int, ...]]:
        index: dict[str, list[int]] = {}
        for i, ins in enumerate(self.instances):
            for c in ins.class_ids:
                index.setdefault(c, []).append(i)
        return {c: tuple(ix) for c, ix in index.items()}

    def instances_of(self, cls: str) -> tuple[Instance, ...]:
        return tuple(self.instances[i] for i in self.by_class.get(cls, ()))

    def subset(self, classes: Iterable[str]) -> "Dataset":
        """Instances whose classes fall entirely inside ``classes``.

        Instances touching classes outside the set (or with no trigger at
        all) are excluded; they cannot live in any single disjoint subset.
        """
        keep = frozenset(classes)
        kept = tuple(
            ins for ins in self.instances if ins.class_ids and ins.class_ids <= keep
        )
        return Dataset(kept)

    def __len__(self) -> int:
        return len(self.instances)


def union_dataset(datasets: Sequence[Dataset]) -> Dataset:
    out: list[Instance] = []
    for ds in datasets:
        out.extend(ds.instances)
    return Dataset(tuple(out))


@dataclass(frozen=True)
class Episode:
    """N-way K-shot support/query pair with per-instance class attribution."""

    support: tuple[Instance, ...]
    support_classes: tuple[str, ...]
    query: tuple[Instance, ...]
    query_classes: tuple[str, ...]
    way: int
    shot: int
    query_size: int

    def __post_init__(self) -> None:
        counts: dict[str, int] = {}
        for c in self.support_classes:
            counts[c] = counts.get(c, 0) + 1
        if len(counts) != self.way or any(n != self.shot for n in counts.values()):
            raise ValueError(
                f"support must hold exactly {self.shot} instances for each of "
                f"{self.way} classes, got {counts}"
            )
        if len(self.support) != len(self.support_classes) or len(self.query) != len(
            self.query_classes
        ):
            raise ValueError("instance/class attribution lengths disagree")

    @property
    def classes(self) -> tuple[str, ...]:
        seen: list[str] = []
        for c in self.support_classes:
            if c not in seen:
                seen.append(c)
        return tuple(seen)


@dataclass(frozen=True)
class SessionPlan:
    """Base dataset plus ordered few-shot increments with disjoint classes."""

    source: Dataset
    base_classes: tuple[str, ...]
    increment_classes: tuple[tuple[str, ...], ...]
    way: int
    seed: int
    dropped_instances: int = 0
    datasets: tuple[Dataset, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if not self.datasets:
            built = [self.source.subset(self.base_classes)]
            built.extend(self.source.subset(cs) for cs in self.increment_classes)
            object.__setattr__(self, "datasets", tuple(built))

    @property
    def num_sessions(self) -> int:
        """M: number of incremental sessions."""
        return len(self.increment_classes)

    @property
    def base_count(self) -> int:
        return len(self.base_classes)

    def dataset(self, m: int) -> Dataset:
        return self.datasets[m]

    @cached_property
    def class_order(self) -> tuple[str, ...]:
        """All classes in arrival order: base split order, then increments."""
        out = list(self.base_classes)
        for cs in self.increment_classes:
            out.extend(cs)
        return tuple(out)

    def covered_classes(self, m: int) -> tuple[str, ...]:
        """Classes seen through session ``m``, in arrival order."""
        n = self.base_count + m * self.way
        return self.class_order[:n]

    @cached_property
    def origin_session(self) -> dict[str, int]:
        out = {c: 0 for c in self.base_classes}
        for i, cs in enumerate(self.increment_classes, start=1):
            for c in cs:
                out[c] = i
        return out

    def union_through(self, m: int) -> Dataset:
        return union_dataset(self.datasets[: m + 1])

    def manifest(self) -> dict:
        """Reproducibility record: class assignment plus sampling policy."""
        return {
            "seed": self.seed,
            "way": self.way,
            "base_count": self.base_count,
            "num_sessions": self.num_sessions,
            "class_to_session": {c: self.origin_session[c] for c in self.class_order},
            "dropped_instances": self.dropped_instances,
            "evaluation_queries": "re-sampled per evaluation episode under a fixed seed",
        }


def split_sessions(
    dataset: Dataset, way: int, base_count: int, seed: int
) -> SessionPlan:
    """Randomly assign ``base_count`` classes to the base session and split the
    rest into equally sized increments of ``way`` classes each."""
    if way <= 0 or base_count <= 0:
        raise ValueError("way and base_count must be positive")
    classes = dataset.classes
    rest = len(classes) - base_count
    if rest < way:
        raise ValueError(
            f"dataset has {len(classes)} classes; need at least {base_count + way}"
        )
    if rest % way != 0:
        raise ValueError(
            f"{rest} non-base classes cannot be split into subsets of {way} "
            f"(remainder {rest % way})"
        )
    rng = rng_from(seed, "session-split")
    order = [classes[i] for i in rng.permutation(len(classes))]
    base = tuple(order[:base_count])
    increments = tuple(
        tuple(order[base_count + i * way : base_count + (i + 1) * way])
        for i in range(rest // way)
    )
    plan = SessionPlan(
        source=dataset,
        base_classes=base,
        increment_classes=increments,
        way=way,
        seed=seed,
    )
    kept = sum(len(ds) for ds in plan.datasets)
    object.__setattr__(plan, "dropped_instances", len(dataset) - kept)
    return plan


def sample_episode(
    data: Dataset | Sequence[Dataset],
    way: int,
    shot: int,
    query_size: int,
    seed: int | np.random.Generator,
) -> Episode:
    """Sample an N-way K-shot episode with disjoint support/query instances."""
    ds = data if isinstance(data, Dataset) else union_dataset(data)
    classes = ds.classes
    if way > len(classes):
        raise ValueError(f"cannot sample {way} classes from {len(classes)}")
    rng = as_rng(seed, "episode")
    picked = [classes[i] for i in rng.choice(len(classes), size=way, replace=False)]
    used: set[int] = set()
    support: list[Instance] = []
    support_classes: list[str] = []
    query: list[Instance] = []
    query_classes: list[str] = []
    for c in picked:
        pool = [i for i in ds.by_class[c] if i not in used]
        need = shot + query_size
        if len(pool) < need:
            raise ValueError(
                f"class {c!r} has {len(pool)} unused instances, needs {need}"
            )
        chosen = [pool[j] for j in rng.choice(len(pool), size=need, replace=False)]
        used.update(chosen)
        for idx in chosen[:shot]:
            support.append(ds.instances[idx])
            support_classes.append(c)
        for idx in chosen[shot:]:
            query.append(ds.instances[idx])
            query_classes.append(c)
    return Episode(
        support=tuple(support),
        support_classes=tuple(support_classes),
        query=tuple(query),
        query_classes=tuple(query_classes),
        way=way,
        shot=shot,
        query_size=query_size,
    )


def session_episode(plan: SessionPlan, m: int, shot: int, query_size: int) -> Episode:
    """The single training episode of incremental session ``m`` (or a base
    episode for m=0). Fully determined by the plan's seed."""
    ds = plan.dataset(m)
    way = plan.way if m >= 1 else min(plan.way, len(ds.classes))
    return sample_episode(
        ds, way, shot, query_size, rng_from(plan.seed, "session-episode", m)
    )


@dataclass(frozen=True)
class ExemplarEntry:
    cls: str
    learned_session: int
    instances: tuple[Instance, ...]


@dataclass(frozen=True)
class ExemplarStore:
    """Replay buffer built for one session: a few base-class instances plus
    every support instance of the earlier few-shot sessions."""

    session: int
    entries: tuple[ExemplarEntry, ...]

    @cached_property
    def by_class(self) -> dict[str, ExemplarEntry]:
        return {e.cls: e for e in self.entries}

    def total(self) -> int:
        return sum(len(e.instances) for e in self.entries)

    def instance_keys(self, cls: str) -> set[int]:
        entry = self.by_class.get(cls)
        if entry is None:
            return set()
        return {id(ins) for ins in entry.instances}


def select_exemplars(
    plan: SessionPlan,
    session: int,
    per_base: int,
    seed: int | np.random.Generator,
    *,
    shot: int,
    query_size: int,
) -> ExemplarStore:
    """Exemplars available when session ``session`` starts.

    Base classes contribute ``per_base`` random instances each; every class
    learned in sessions 1..session-1 contributes all of its support
    instances (recomputed deterministically from the plan seed).
    """
    if session < 1:
        raise ValueError("exemplars exist only for sessions >= 1")
    rng = as_rng(seed, "exemplars", session)
    entries: list[ExemplarEntry] = []
    base = plan.dataset(0)
    for c in plan.base_classes:
        pool = base.by_class[c]
        if per_base > len(pool):
            raise ValueError(
                f"base class {c!r} has {len(pool)} instances, cannot keep {per_base}"
            )
        if per_base == 0:
            continue
        chosen = rng.choice(len(pool), size=per_base, replace=False)
        entries.append(
            ExemplarEntry(
                cls=c,
                learned_session=0,
                instances=tuple(base.instances[pool[j]] for j in chosen),
            )
        )
    for i in range(1, session):
        ep = session_episode(plan, i, shot, query_size)
        grouped: dict[str, list[Instance]] = {}
        for ins, c in zip(ep.support, ep.support_classes):
            grouped.setdefault(c, []).append(ins)
        for c in plan.increment_classes[i - 1]:
            entries.append(
                ExemplarEntry(cls=c, learned_session=i, instances=tuple(grouped[c]))
            )
    return ExemplarStore(session=session, entries=tuple(entries))


@dataclass(frozen=True)
class AugmentedSession:
    """Replay-augmented support/query sets for one incremental session."""

    session: int
    support: tuple[Instance, ...]
    support_classes: tuple[str, ...]
    support_learned: tuple[int, ...]
    query: tuple[Instance, ...]
    query_classes: tuple[str, ...]
    classes: tuple[str, ...]

    def __post_init__(self) -> None:
        covered = set(self.support_classes)
        missing = [c for c in self.query_classes if c not in covered]
        if missing:
            raise ValueError(
                f"query classes absent from support set: {sorted(set(missing))}"
            )


def augment_session(
    plan: SessionPlan,
    m: int,
    store: ExemplarStore | None,
    *,
    shot: int,
    query_size: int,
    seed: int | np.random.Generator,
) -> AugmentedSession:
    """Merge session ``m``'s episode with the exemplar store and draw fresh
    query instances for every replayed class."""
    episode = session_episode(plan, m, shot, query_size)
    if m == 0:
        return AugmentedSession(
            session=0,
            support=episode.support,
            support_classes=episode.support_classes,
            support_learned=tuple(0 for _ in episode.support),
            query=episode.query,
            query_classes=episode.query_classes,
            classes=episode.classes,
        )
    if store is None or store.session != m:
        raise ValueError(f"exemplar store must be built for session {m}")
    rng = as_rng(seed, "augment", m)
    support: list[Instance] = []
    support_classes: list[str] = []
    support_learned: list[int] = []
    for entry in store.entries:
        for ins in entry.instances:
            support.append(ins)
            support_classes.append(entry.cls)
            support_learned.append(entry.learned_session)
    for ins, c in zip(episode.support, episode.support_classes):
        support.append(ins)
        support_classes.append(c)
        support_learned.append(m)

    query: list[Instance] = list(episode.query)
    query_classes: list[str] = list(episode.query_classes)
    present = set(support_classes)
    excluded = {id(ins) for ins in support}
    for c in plan.covered_classes(m - 1):
        if c not in present:
            continue  # replay ablated for this class (per_base = 0)
        origin = plan.origin_session[c]
        ds = plan.dataset(origin)
        pool = [
            i for i in ds.by_class[c] if id(ds.instances[i]) not in excluded
        ]
        if len(pool) < query_size:
            raise ValueError(
                f"class {c!r} has {len(pool)} instances left for replay queries, "
                f"needs {query_size}"
            )
        chosen = rng.choice(len(pool), size=query_size, replace=False)
        for j in chosen:
            query.append(ds.instances[pool[j]])
            query_classes.append(c)

    order = [c for c in plan.covered_classes(m) if c in present]
    return AugmentedSession(
        session=m,
        support=tuple(support),
        support_classes=tuple(support_classes),
        support_learned=tuple(support_learned),
        query=tuple(query),
        query_classes=tuple(query_classes),
        classes=tuple(order),
    )


def load_dataset(path: str | Path) -> Dataset:
    """Read a JSONL dataset of ``{"tokens": [...], "labels": [...]}`` records."""
    path = Path(path)
    instances: list[Instance] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            if not isinstance(rec, dict) or "tokens" not in rec or "labels" not in rec:
                raise ValueError(f"{path}:{lineno}: record needs 'tokens' and 'labels'")
            tokens = rec["tokens"]
            labels = rec["labels"]
            if (
                not isinstance(tokens, list)
                or not isinstance(labels, list)
                or not all(isinstance(t, str) for t in tokens)
                or not all(isinstance(t, str) for t in labels)
            ):
                raise ValueError(f"{path}:{lineno}: tokens and labels must be string lists")
            try:
                instances.append(
                    Instance(
                        tokens=tuple(tokens),
                        labels=tuple(labels),
                        doc_id=rec.get("doc_id"),
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return Dataset(tuple(instances))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ins in dataset.instances:
            fh.write(json.dumps(ins.to_record(), sort_keys=True) + "\n")


# Shared filler vocabulary for the synthetic generator. Trigger lexemes are
# minted per class so every class is learnable by construction.
FILLER_VOCAB: tuple[str, ...] = (
    "the", "a", "an", "report", "said", "that", "team", "official", "city",
    "yesterday", "today", "group", "people", "after", "before", "during",
    "meeting", "local", "new", "old", "two", "three", "many", "some",
    "member", "leader", "company", "country", "region", "statement",
    "news", "early", "late", "again", "still", "also", "near", "against",
    "about", "while",
)


def generate_synthetic(
    num_classes: int,
    instances_per_class: int,
    *,
    seed: int,
    filler_vocab: Sequence[str] = FILLER_VOCAB,
    multi_token_fraction: float = 0.25,
    distractor_prob: float = 0.2,
) -> Dataset:
    """Generate a synthetic corpus with class-correlated trigger lexemes.

    Each class owns two dedicated trigger tokens embedded into templated
    sentences over a shared filler vocabulary; a fraction of instances use a
    two-token trigger span, and distractor trigger tokens from other classes
    may appear labelled O to force context-sensitive discrimination.
    Deterministic: the same arguments always yield byte-identical datasets.
    """
    if num_classes <= 0 or instances_per_class <= 0:
        raise ValueError("num_classes and instances_per_class must be positive")
    if not filler_vocab:
        raise ValueError("filler vocabulary must be non-empty")
    rng = rng_from(seed, "synthetic", num_classes, instances_per_class)
    names = [f"event{i:02d}" for i in range(num_classes)]
    triggers = {name: (f"{name}a", f"{name}b") for name in names}
    instances: list[Instance] = []
    for ci, name in enumerate(names):
        for k in range(instances_per_class):
            n_pre = int(rng.integers(1, 5))
            n_post = int(rng.integers(1, 5))
            pre = [filler_vocab[int(j)] for j in rng.integers(0, len(filler_vocab), n_pre)]
            post = [filler_vocab[int(j)] for j in rng.integers(0, len(filler_vocab), n_post)]
            if rng.random() < distractor_prob and num_classes > 1:
                other = int(rng.integers(0, num_classes - 1))
                if other >= ci:
                    other += 1
                lure = triggers[names[other]][int(rng.integers(0, 2))]
                slot = int(rng.integers(0, len(pre) + len(post)))
                if slot < len(pre):
                    pre[slot] = lure
                else:
                    post[slot - len(pre)] = lure
            a, b = triggers[name]
            if rng.random() < multi_token_fraction:
                span_tokens = [a, b]
                span_labels = [f"B-{name}", f"I-{name}"]
            else:
                span_tokens = [a if rng.random() < 0.5 else b]
                span_labels = [f"B-{name}"]
            tokens = pre + span_tokens + post
            labels = [O_LABEL] * len(pre) + span_labels + [O_LABEL] * len(post)
            instances.append(
                Instance(
                    tokens=tuple(tokens),
                    labels=tuple(labels),
                    doc_id=f"syn-{name}-{k:03d}",
                )
            )
    return Dataset(tuple(instances))
