"""Metrics and analysis reports: F1/AUC/ACC, per-timestep curves,
attention-versus-tag statistics, embedding neighborhood and analogy
reports, and the simulator's Bayes-optimal reference score.

Report rows are plain dicts so they serialize unchanged to both the
tab-separated and the JSON-lines output forms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .data import Catalog, TruthRow, UserSequence, window_and_batch
from .errors import ShapeError
from .model import ModelConfig, Parameters, forward_batch


@dataclass(frozen=True)
class MetricsReport:
    """Thresholded binary metrics plus the ranking AUC (None if labels
    are single-class, where AUC is undefined)."""

    f1: float
    auc: float | None
    acc: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int

    def to_dict(self) -> dict:
        return {"f1": self.f1, "auc": self.auc, "acc": self.acc,
                "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "n": self.n}


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group's average rank."""
    values = np.asarray(values)
    n = len(values)
    order = np.argsort(values, kind="mergesort")
    ordered = values[order]
    starts = np.r_[0, np.flatnonzero(ordered[1:] != ordered[:-1]) + 1]
    stops = np.r_[starts[1:], n]
    group_rank = (starts + stops + 1) / 2.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(group_rank, stops - starts)
    return ranks


def auc(predictions, labels) -> float:
    """Rank-based AUC (ties count half), identical to brute-force pair
    counting."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"predictions {predictions.shape} vs labels "
                         f"{labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined without both classes")
    ranks = average_ranks(predictions)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def binary_metrics(predictions, labels, threshold: float = 0.5) -> MetricsReport:
    """Confusion-matrix metrics at a threshold (ties count as positive);
    the positive class is correct = 1."""
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"predictions {predictions.shape} vs labels "
                         f"{labels.shape}")
    if predictions.size == 0:
        raise ValueError("need at least one prediction")
    if np.any(predictions < 0) or np.any(predictions > 1):
        raise ValueError("predictions must lie in [0, 1]")
    predicted_pos = predictions >= threshold
    actual_pos = labels == 1
    tp = int(np.sum(predicted_pos & actual_pos))
    fp = int(np.sum(predicted_pos & ~actual_pos))
    fn = int(np.sum(~predicted_pos & actual_pos))
    tn = int(np.sum(~predicted_pos & ~actual_pos))
    n = len(labels)
    acc = (tp + tn) / n
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    auc_value = None
    if 0 < actual_pos.sum() < n:
        auc_value = auc(predictions, labels)
    return MetricsReport(f1=f1, auc=auc_value, acc=acc,
                         tp=tp, fp=fp, tn=tn, fn=fn, n=n)


def oracle_auc(truth: Sequence[TruthRow]) -> float:
    """AUC of the simulator's generating probabilities against outcomes.

    This is the best achievable ranking score on those events, so it
    bounds any learned model from above (in expectation).
    """
    if any(row.correct not in (0, 1) for row in truth):
        raise ValueError("truth rows lack outcomes; join with interactions "
                         "first")
    scores = np.array([row.true_p for row in truth])
    labels = np.array([row.correct for row in truth])
    return auc(scores, labels)


# ---------------------------------------------------------------------------
# batched scoring over datasets
# ---------------------------------------------------------------------------


@dataclass
class EventPredictions:
    """Model outputs for every scoreable position of a dataset."""

    seq_index: np.ndarray
    position: np.ndarray     # 1-based target step t
    prob: np.ndarray
    label: np.ndarray


def predict_events(params: Parameters, config: ModelConfig, catalog: Catalog,
                   sequences: Sequence[UserSequence],
                   window: int | None = None, batch_size: int = 512,
                   max_step: int | None = None) -> EventPredictions:
    """Score every position t >= 2 (optionally only t <= max_step)."""
    if max_step is not None:
        sequences = [UserSequence(s.user_id, s.interactions[:max_step])
                     for s in sequences]
    batches = window_and_batch(sequences, catalog,
                               window or config.window, batch_size)
    seq_index, position, prob, label = [], [], [], []
    for batch in batches:
        trace = forward_batch(params, config, batch.questions, batch.responses,
                              batch.mask, batch.targets, cache=False)
        seq_index.append(batch.seq_index)
        position.append(batch.position)
        prob.append(trace.prob.astype(np.float64))
        label.append(batch.labels)
    if not batches:
        empty = np.zeros(0)
        return EventPredictions(empty, empty, empty, empty)
    return EventPredictions(np.concatenate(seq_index),
                            np.concatenate(position),
                            np.concatenate(prob),
                            np.concatenate(label))


@dataclass(frozen=True)
class TimestepPoint:
    step: int
    value: float
    count: int


@dataclass
class TimestepCurve:
    metric: str
    points: list[TimestepPoint]

    def steps(self) -> list[int]:
        return [p.step for p in self.points]

    def values(self) -> list[float]:
        return [p.value for p in self.points]


def _metric_at(kind: str, probs: np.ndarray, labels: np.ndarray) -> float | None:
    if kind == "auc":
        if len(set(labels.tolist())) < 2:
            return None
        return auc(probs, labels)
    report = binary_metrics(probs, labels)
    return report.acc if kind == "acc" else report.f1


def per_timestep(params: Parameters, config: ModelConfig, catalog: Catalog,
                 sequences: Sequence[UserSequence], metric: str = "auc",
                 max_step: int = 50, window: int | None = None,
                 events: EventPredictions | None = None) -> TimestepCurve:
    """Metric at each history length t in [2, max_step].

    The value at t pools the prediction at position t of every user with
    at least t interactions; steps where the metric is undefined (nobody
    reaches t, or AUC with one class) are omitted rather than zero-filled.
    """
    if max_step < 2:
        raise ValueError("max_step must be >= 2")
    if metric not in ("auc", "acc", "f1"):
        raise ValueError(f"unknown metric {metric!r}")
    if events is None:
        events = predict_events(params, config, catalog, sequences,
                                window=window, max_step=max_step)
    points = []
    for t in range(2, max_step + 1):
        at_t = events.position == t
        if not np.any(at_t):
            continue
        value = _metric_at(metric, events.prob[at_t], events.label[at_t])
        if value is None:
            continue
        points.append(TimestepPoint(step=t, value=value,
                                    count=int(at_t.sum())))
    return TimestepCurve(metric=metric, points=points)


# ---------------------------------------------------------------------------
# attention and tag analysis
# ---------------------------------------------------------------------------


def tag_matching_ratio(exhausted_tags: frozenset | set,
                       potential_tags: frozenset | set) -> float:
    """Share of the candidate question's tags already covered by one
    history question."""
    if not potential_tags:
        raise ValueError("candidate question has no tags; ratio undefined")
    return len(set(exhausted_tags) & set(potential_tags)) / len(potential_tags)


@dataclass(frozen=True)
class RankStat:
    rank: int          # 1 = most attended; -1 = least attended
    mean_ratio: float
    count: int


@dataclass
class AttentionTagReport:
    rows: list[RankStat]

    def by_rank(self) -> dict[int, RankStat]:
        return {r.rank: r for r in self.rows}


def rank_order(alpha_row: np.ndarray, tie_rng: np.random.Generator) -> np.ndarray:
    """Positions sorted by attention weight, descending.

    Exact ties are broken by a random permutation: tied weights carry no
    ordering information, and a positional tie-break would fake a rank
    trend for uniform attention on temporally structured data.
    """
    perm = tie_rng.permutation(len(alpha_row))
    return perm[np.argsort(-alpha_row[perm], kind="stable")]


def attention_tag_report(params: Parameters, config: ModelConfig,
                         catalog: Catalog, sequences: Sequence[UserSequence],
                         ranks: Sequence[int] = (1, 2, 3, -3, -2, -1),
                         window: int | None = None, batch_size: int = 256,
                         max_predictions: int | None = None,
                         seed: int = 0) -> AttentionTagReport:
    """Mean tag matching ratio of the n-th most-attended history question.

    For every prediction, history steps are ordered by attention weight
    (descending, exact ties randomized by ``seed``); rank n > 0 counts
    from the top and n < 0 from the bottom. Predictions whose candidate
    has no tags are skipped; a prediction contributes to a rank only if
    its history is long enough to have one.
    """
    if any(r == 0 for r in ranks):
        raise ValueError("ranks are 1-based (positive) or -1-based (negative)")
    sums = {r: 0.0 for r in ranks}
    counts = {r: 0 for r in ranks}
    done = 0
    tie_rng = np.random.default_rng(seed)
    batches = window_and_batch(sequences, catalog, window or config.window,
                               batch_size)
    for batch in batches:
        trace = forward_batch(params, config, batch.questions, batch.responses,
                              batch.mask, batch.targets, cache=False)
        alpha = trace.alpha
        lengths = batch.mask.sum(axis=1).astype(int)
        for row in range(len(batch)):
            if max_predictions is not None and done >= max_predictions:
                break
            target_idx = int(batch.targets[row])
            if target_idx >= catalog.vocab:
                continue
            target_tags = catalog.tags_of(catalog.ids[target_idx])
            if not target_tags:
                continue
            length = lengths[row]
            order = rank_order(alpha[row, :length], tie_rng)
            used = False
            for r in ranks:
                offset = r - 1 if r > 0 else length + r
                if offset < 0 or offset >= length:
                    continue
                qidx = int(batch.questions[row, order[offset]])
                q_tags = (catalog.tags_of(catalog.ids[qidx])
                          if qidx < catalog.vocab else frozenset())
                sums[r] += tag_matching_ratio(q_tags, target_tags)
                counts[r] += 1
                used = True
            if used:
                done += 1
        if max_predictions is not None and done >= max_predictions:
            break
    rows = [RankStat(rank=r, mean_ratio=sums[r] / counts[r] if counts[r] else 0.0,
                     count=counts[r]) for r in ranks]
    return AttentionTagReport(rows=rows)


# ---------------------------------------------------------------------------
# embedding-space reports
# ---------------------------------------------------------------------------


def _question_matrix(params: Parameters, catalog: Catalog) -> np.ndarray:
    # trained rows only; the reserved unknown slot is not a real question
    return np.asarray(params["embed.question"][:catalog.vocab],
                      dtype=np.float64)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _cosine_to_all(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    qn = np.linalg.norm(query)
    denom = norms * qn
    out = np.zeros(len(matrix))
    ok = denom > 0
    out[ok] = (matrix[ok] @ query) / denom[ok]
    return out


def embedding_neighbors(params: Parameters, catalog: Catalog,
                        queries: Sequence[str] | None = None, k: int = 3,
                        n_queries: int = 10, seed: int = 0) -> list[dict]:
    """Top-k cosine neighbors per query question, with both tag sets."""
    matrix = _question_matrix(params, catalog)
    if queries is None:
        rng = np.random.default_rng(seed)
        pick = rng.choice(catalog.vocab, size=min(n_queries, catalog.vocab),
                          replace=False)
        queries = [catalog.ids[int(i)] for i in sorted(pick)]
    rows = []
    for qid in queries:
        if qid not in catalog.index:
            raise KeyError(f"unknown question id {qid!r}")
        qi = catalog.index[qid]
        sims = _cosine_to_all(matrix, matrix[qi])
        sims[qi] = -np.inf
        top = np.argsort(-sims, kind="mergesort")[:k]
        for rank, ni in enumerate(top, start=1):
            rows.append({
                "query": qid,
                "query_tags": sorted(catalog.tags_of(qid)),
                "rank": rank,
                "neighbor": catalog.ids[int(ni)],
                "similarity": float(sims[ni]),
                "neighbor_tags": sorted(catalog.tags_of(catalog.ids[int(ni)])),
            })
    return rows


def embedding_analogies(params: Parameters, catalog: Catalog,
                        triples: Sequence[tuple[str, str, str]] | None = None,
                        n_triples: int = 100, seed: int = 0) -> list[dict]:
    """vec(a) - vec(b) + vec(c) nearest-neighbor probes.

    The tag-algebra prediction (tags(a) \\ tags(b)) | tags(c) is reported
    next to the retrieved question's actual tags and their overlap.
    """
    matrix = _question_matrix(params, catalog)
    if triples is None:
        if catalog.vocab < 4:
            raise ValueError("need at least 4 questions to sample analogies")
        rng = np.random.default_rng(seed)
        triples = []
        for _ in range(n_triples):
            a, b, c = (int(i) for i in rng.choice(catalog.vocab, size=3,
                                                  replace=False))
            triples.append((catalog.ids[a], catalog.ids[b], catalog.ids[c]))
    rows = []
    for a, b, c in triples:
        for qid in (a, b, c):
            if qid not in catalog.index:
                raise KeyError(f"unknown question id {qid!r}")
        ia, ib, ic = (catalog.index[q] for q in (a, b, c))
        target = matrix[ia] - matrix[ib] + matrix[ic]
        sims = _cosine_to_all(matrix, target)
        sims[[ia, ib, ic]] = -np.inf
        di = int(np.argmax(sims))
        predicted = (set(catalog.tags_of(a)) - set(catalog.tags_of(b))) \
            | set(catalog.tags_of(c))
        actual = set(catalog.tags_of(catalog.ids[di]))
        rows.append({
            "a": a, "b": b, "c": c,
            "result": catalog.ids[di],
            "similarity": float(sims[di]),
            "predicted_tags": sorted(predicted),
            "result_tags": sorted(actual),
            "overlap": len(predicted & actual),
        })
    return rows


def embedding_report(params: Parameters, catalog: Catalog, mode: str,
                     **kwargs) -> list[dict]:
    if mode == "neighbors":
        return embedding_neighbors(params, catalog, **kwargs)
    if mode == "analogy":
        return embedding_analogies(params, catalog, **kwargs)
    raise ValueError(f"unknown embedding report mode {mode!r}")


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------


def write_tsv(rows: Sequence[dict], columns: Sequence[str],
              stream: TextIO) -> None:
    stream.write("\t".join(columns) + "\n")
    for row in rows:
        cells = []
        for col in columns:
            value = row[col]
            if isinstance(value, float):
                cells.append(f"{value:.6f}")
            elif isinstance(value, (list, tuple, set, frozenset)):
                cells.append("|".join(str(v) for v in value))
            else:
                cells.append(str(value))
        stream.write("\t".join(cells) + "\n")


def write_jsonl(rows: Sequence[dict], stream: TextIO) -> None:
    for row in rows:
        stream.write(json.dumps(row, sort_keys=True) + "\n")


def curve_rows(curve: TimestepCurve) -> list[dict]:
    return [{"step": p.step, "value": p.value, "count": p.count}
            for p in curve.points]


def report_rows(report: AttentionTagReport) -> list[dict]:
    return [{"rank": r.rank, "mean_ratio": r.mean_ratio, "count": r.count}
            for r in report.rows]
