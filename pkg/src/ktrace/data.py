"""Dataset schema, parsing, user-level splits, windowed batching, and a
synthetic student simulator.

Files are plain comma-separated text with fixed headers:

* interactions: ``user_id,question_id,correct,timestamp``
* tags:         ``question_id,tag``
* truth:        ``user_id,step,question_id,true_p`` (simulator output;
  ``step`` is the 1-based position in that user's sequence)

The simulator draws a two-parameter logistic response model: each question
gets a discrimination and a difficulty, each user a latent ability per
topic tag, and the probability of answering question j correctly is
``sigmoid(a_j * (mean ability over j's tags - b_j))``. Abilities on a
question's tags grow by a fixed gain after every attempt, so users
improve as they practice. Every event's generating probability is kept,
which gives evaluation a Bayes-optimal reference score.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import DataFormatError

INTERACTIONS_HEADER = "user_id,question_id,correct,timestamp"
TAGS_HEADER = "question_id,tag"
TRUTH_HEADER = "user_id,step,question_id,true_p"


@dataclass(frozen=True)
class Interaction:
    user_id: str
    question_id: str
    correct: int
    timestamp: int


@dataclass
class UserSequence:
    """One user's interactions, ordered by timestamp (file order on ties)."""

    user_id: str
    interactions: list[Interaction]

    def __len__(self) -> int:
        return len(self.interactions)


@dataclass
class Catalog:
    """Dense question-id indexing plus per-question tag sets."""

    ids: list[str]
    tags: dict[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.index = {qid: i for i, qid in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise DataFormatError("duplicate question ids in catalog")

    @property
    def vocab(self) -> int:
        return len(self.ids)

    def index_of(self, question_id: str) -> int:
        """Dense index; unknown ids map to the reserved slot ``vocab``."""
        return self.index.get(question_id, self.vocab)

    def tags_of(self, question_id: str) -> frozenset[str]:
        return self.tags.get(question_id, frozenset())


def parse_interactions(stream: TextIO | Iterable[str]):
    """Read an interactions file into per-user sequences.

    Rows are grouped by user and sorted by timestamp (stable, so file
    order breaks ties); sequences come back sorted by user id. Returns
    (sequences, row_count).
    """
    lines = iter(stream)
    header = next(lines, None)
    if header is None or header.strip() != INTERACTIONS_HEADER:
        raise DataFormatError(
            f"expected header {INTERACTIONS_HEADER!r}", line=1)
    per_user: dict[str, list[Interaction]] = {}
    rows = 0
    for lineno, raw in enumerate(lines, start=2):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise DataFormatError(f"expected 4 fields, got {len(parts)}",
                                  line=lineno)
        user_id, question_id, correct_s, ts_s = parts
        if correct_s not in ("0", "1"):
            raise DataFormatError(
                f"correct must be 0 or 1, got {correct_s!r}", line=lineno)
        try:
            timestamp = int(ts_s)
        except ValueError:
            raise DataFormatError(f"bad timestamp {ts_s!r}", line=lineno) from None
        if timestamp < 0:
            raise DataFormatError(f"negative timestamp {timestamp}", line=lineno)
        per_user.setdefault(user_id, []).append(
            Interaction(user_id, question_id, int(correct_s), timestamp))
        rows += 1
    sequences = []
    for user_id in sorted(per_user):
        events = sorted(per_user[user_id], key=lambda it: it.timestamp)
        sequences.append(UserSequence(user_id, events))
    return sequences, rows


def write_interactions(sequences: Sequence[UserSequence],
                       stream: TextIO) -> None:
    stream.write(INTERACTIONS_HEADER + "\n")
    for seq in sequences:
        for it in seq.interactions:
            stream.write(f"{it.user_id},{it.question_id},{it.correct},"
                         f"{it.timestamp}\n")


def parse_tags(stream: TextIO | Iterable[str]) -> dict[str, frozenset[str]]:
    """Read a tags file into per-question tag sets (duplicates collapse)."""
    lines = iter(stream)
    header = next(lines, None)
    if header is None or header.strip() != TAGS_HEADER:
        raise DataFormatError(f"expected header {TAGS_HEADER!r}", line=1)
    acc: dict[str, set[str]] = {}
    for lineno, raw in enumerate(lines, start=2):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise DataFormatError(f"expected 2 fields, got {len(parts)}",
                                  line=lineno)
        acc.setdefault(parts[0], set()).add(parts[1])
    return {qid: frozenset(tags) for qid, tags in acc.items()}


def write_tags(tags: dict[str, frozenset[str]], stream: TextIO) -> None:
    stream.write(TAGS_HEADER + "\n")
    for qid in sorted(tags):
        for tag in sorted(tags[qid]):
            stream.write(f"{qid},{tag}\n")


def build_catalog(sequences: Sequence[UserSequence],
                  tags: dict[str, frozenset[str]] | None = None) -> Catalog:
    """Dense indexing over every question id seen in the data or tag file."""
    ids = {it.question_id for seq in sequences for it in seq.interactions}
    if tags:
        ids.update(tags)
    return Catalog(ids=sorted(ids), tags=dict(tags or {}))


def split_by_user(sequences: Sequence[UserSequence],
                  ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                  seed: int = 0):
    """Assign each user wholly to train/validation/test by a seeded shuffle.

    Split sizes land within one user of the exact proportions. Same seed,
    same assignment.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("need three positive ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios sum to {sum(ratios)}, expected 1")
    n = len(sequences)
    if n < len(ratios):
        raise ValueError(f"cannot split {n} users into {len(ratios)} parts")
    order = np.random.default_rng(seed).permutation(n)
    bounds = [round(sum(ratios[:i + 1]) * n) for i in range(len(ratios))]
    splits = []
    start = 0
    for stop in bounds:
        chunk = [sequences[i] for i in order[start:stop]]
        chunk.sort(key=lambda s: s.user_id)
        splits.append(chunk)
        start = stop
    return tuple(splits)


# ---------------------------------------------------------------------------
# windowed batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded training/evaluation examples.

    ``questions``/``responses`` are (B, L) index arrays, ``mask`` marks the
    real steps, ``targets``/``labels`` describe the predicted position, and
    ``seq_index``/``position`` point back at (sequence, 1-based step) so
    reports can be grouped.
    """

    questions: np.ndarray
    responses: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    seq_index: np.ndarray
    position: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


def iter_examples(sequences: Sequence[UserSequence], window: int):
    """Yield (seq_index, target_index, prefix_start) for every position
    t >= 2; the prefix covers at most ``window`` most recent interactions."""
    for si, seq in enumerate(sequences):
        for j in range(1, len(seq.interactions)):
            yield si, j, max(0, j - window)


def window_and_batch(sequences: Sequence[UserSequence], catalog: Catalog,
                     window: int, batch_size: int,
                     shuffle_seed: int | None = None,
                     bucket_by_length: bool = True) -> list[Batch]:
    """Build padded batches of (history prefix, target, label) examples.

    Position 1 is skipped (no history). When ``bucket_by_length`` is set,
    examples of similar prefix length share a batch so little compute is
    wasted on padding; pass a ``shuffle_seed`` to randomize assignment
    within equal lengths (batch order itself is the trainer's business).
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    examples = list(iter_examples(sequences, window))
    if not examples:
        return []
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        examples = [examples[i] for i in rng.permutation(len(examples))]
    if bucket_by_length:
        examples.sort(key=lambda e: e[1] - e[2])
    batches = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        bsz = len(chunk)
        max_len = max(j - s for _, j, s in chunk)
        questions = np.zeros((bsz, max_len), dtype=np.int64)
        responses = np.zeros((bsz, max_len), dtype=np.int64)
        mask = np.zeros((bsz, max_len), dtype=np.float32)
        targets = np.zeros(bsz, dtype=np.int64)
        labels = np.zeros(bsz, dtype=np.float32)
        seq_index = np.zeros(bsz, dtype=np.int64)
        position = np.zeros(bsz, dtype=np.int64)
        for row, (si, j, s) in enumerate(chunk):
            events = sequences[si].interactions
            length = j - s
            for k in range(length):
                it = events[s + k]
                questions[row, k] = catalog.index_of(it.question_id)
                responses[row, k] = it.correct
            mask[row, :length] = 1.0
            targets[row] = catalog.index_of(events[j].question_id)
            labels[row] = events[j].correct
            seq_index[row] = si
            position[row] = j + 1
        batches.append(Batch(questions, responses, mask, targets, labels,
                             seq_index, position))
    return batches


def example_count(sequences: Sequence[UserSequence]) -> int:
    return sum(max(0, len(seq) - 1) for seq in sequences)


# ---------------------------------------------------------------------------
# synthetic student simulator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """Generator settings for the synthetic corpus.

    Question discriminations are LogNormal(0, 0.25^2), difficulties and
    per-tag abilities standard normal; ``learning_gain`` is added to a
    user's ability on every tag of an attempted question.
    """

    n_users: int
    n_questions: int
    n_tags: int
    sequence_length: int
    tags_per_question: tuple[int, int] = (1, 3)
    learning_gain: float = 0.02
    policy: str = "uniform"
    session_length: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_questions", "n_tags", "sequence_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.tags_per_question
        if not (1 <= lo <= hi <= self.n_tags):
            raise ValueError("tags_per_question range must fit in [1, n_tags]")
        if self.learning_gain < 0:
            raise ValueError("learning_gain must be >= 0")
        if self.policy not in ("uniform", "adaptive", "sessions"):
            raise ValueError("policy must be 'uniform', 'adaptive', or "
                             "'sessions'")
        if self.session_length < 1:
            raise ValueError("session_length must be >= 1")


@dataclass(frozen=True)
class TruthRow:
    """Generating probability of one simulated event (1-based step)."""

    user_id: str
    step: int
    question_id: str
    true_p: float
    correct: int


@dataclass
class SimResult:
    """Simulator output plus the latent quantities that generated it.

    Iterates/unpacks as (sequences, catalog, truth); the latent item
    parameters and initial abilities support oracle-style experiments.
    """

    sequences: list[UserSequence]
    catalog: Catalog
    truth: list[TruthRow]
    discrimination: np.ndarray          # (n_questions,)
    difficulty: np.ndarray              # (n_questions,)
    question_tags: list[np.ndarray]     # tag indices per question
    abilities: np.ndarray               # (n_users, n_tags) before any learning

    def __iter__(self):
        return iter((self.sequences, self.catalog, self.truth))


def _sigmoid64(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def response_probability(discrimination, difficulty, mean_ability):
    """Two-parameter logistic response law:
    sigmoid(discrimination * (mean_ability - difficulty))."""
    return _sigmoid64(discrimination * (mean_ability - difficulty))


def simulate(config: SimConfig) -> SimResult:
    """Generate a synthetic cohort; see :class:`SimResult`.

    Each user gets an independent keyed random stream, so the output is
    deterministic for a seed no matter how users are iterated. Items are
    drawn without replacement: ``uniform`` picks any unanswered question,
    ``adaptive`` picks the unanswered question whose current true
    probability is closest to 0.5 (the most informative next measurement),
    and ``sessions`` mimics topic-based study: a random tag is practiced
    for ``session_length`` consecutive items before switching (falling
    back to any unanswered item once that tag's pool runs dry).
    """
    if config.sequence_length > config.n_questions:
        raise ValueError(
            f"sequence_length {config.sequence_length} exceeds the "
            f"{config.n_questions}-question pool")
    qw = len(str(config.n_questions - 1))
    uw = len(str(config.n_users - 1))
    tw = len(str(config.n_tags - 1))
    question_ids = [f"q{i:0{qw}d}" for i in range(config.n_questions)]
    tag_names = [f"t{i:0{tw}d}" for i in range(config.n_tags)]

    master = np.random.default_rng(config.seed)
    discrimination = np.exp(master.normal(0.0, 0.25, config.n_questions))
    difficulty = master.normal(0.0, 1.0, config.n_questions)
    lo, hi = config.tags_per_question
    tag_counts = master.integers(lo, hi + 1, config.n_questions)
    question_tags = [master.choice(config.n_tags, size=int(k), replace=False)
                     for k in tag_counts]

    tags = {question_ids[j]: frozenset(tag_names[t] for t in question_tags[j])
            for j in range(config.n_questions)}
    catalog = Catalog(ids=list(question_ids), tags=tags)

    by_tag = [np.array([j for j in range(config.n_questions)
                        if t in question_tags[j]], dtype=int)
              for t in range(config.n_tags)]
    sequences = []
    truth = []
    abilities = np.zeros((config.n_users, config.n_tags))
    for u in range(config.n_users):
        user_id = f"u{u:0{uw}d}"
        rng = np.random.default_rng([config.seed, u])
        theta = rng.normal(0.0, 1.0, config.n_tags)
        abilities[u] = theta
        answered = np.zeros(config.n_questions, dtype=bool)
        events = []
        session_tag = -1
        for step in range(1, config.sequence_length + 1):
            if config.policy == "uniform":
                open_idx = np.flatnonzero(~answered)
                j = int(open_idx[rng.integers(len(open_idx))])
                ability = theta[question_tags[j]].mean()
                p = float(response_probability(discrimination[j], difficulty[j],
                                               ability))
            elif config.policy == "sessions":
                if (step - 1) % config.session_length == 0:
                    session_tag = int(rng.integers(config.n_tags))
                pool = by_tag[session_tag][~answered[by_tag[session_tag]]]
                if len(pool) == 0:
                    pool = np.flatnonzero(~answered)
                j = int(pool[rng.integers(len(pool))])
                ability = theta[question_tags[j]].mean()
                p = float(response_probability(discrimination[j], difficulty[j],
                                               ability))
            else:
                mean_theta = np.array([theta[t].mean() for t in question_tags])
                p_all = response_probability(discrimination, difficulty,
                                             mean_theta)
                gap = np.abs(p_all - 0.5)
                gap[answered] = np.inf
                j = int(np.argmin(gap))
                p = float(p_all[j])
            answered[j] = True
            correct = int(rng.random() < p)
            events.append(Interaction(user_id, question_ids[j], correct,
                                      step * 1000))
            truth.append(TruthRow(user_id, step, question_ids[j], p, correct))
            theta[question_tags[j]] += config.learning_gain
        sequences.append(UserSequence(user_id, events))
    return SimResult(sequences=sequences, catalog=catalog, truth=truth,
                     discrimination=discrimination, difficulty=difficulty,
                     question_tags=question_tags, abilities=abilities)


def write_truth(truth: Sequence[TruthRow], stream: TextIO) -> None:
    stream.write(TRUTH_HEADER + "\n")
    for row in truth:
        stream.write(f"{row.user_id},{row.step},{row.question_id},"
                     f"{row.true_p!r}\n")


def parse_truth(stream: TextIO | Iterable[str]) -> list[TruthRow]:
    """Read a truth file; outcomes are filled by ``attach_outcomes``."""
    lines = iter(stream)
    header = next(lines, None)
    if header is None or header.strip() != TRUTH_HEADER:
        raise DataFormatError(f"expected header {TRUTH_HEADER!r}", line=1)
    rows = []
    for lineno, raw in enumerate(lines, start=2):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise DataFormatError(f"expected 4 fields, got {len(parts)}",
                                  line=lineno)
        try:
            rows.append(TruthRow(parts[0], int(parts[1]), parts[2],
                                 float(parts[3]), correct=-1))
        except ValueError:
            raise DataFormatError(f"bad numeric field in {line!r}",
                                  line=lineno) from None
    return rows


def attach_outcomes(truth: Sequence[TruthRow],
                    sequences: Sequence[UserSequence]) -> list[TruthRow]:
    """Join truth rows with observed outcomes by (user, step)."""
    outcome = {}
    for seq in sequences:
        for step, it in enumerate(seq.interactions, start=1):
            outcome[(seq.user_id, step)] = it.correct
    joined = []
    for row in truth:
        key = (row.user_id, row.step)
        if key in outcome:
            joined.append(TruthRow(row.user_id, row.step, row.question_id,
                                   row.true_p, outcome[key]))
    return joined
