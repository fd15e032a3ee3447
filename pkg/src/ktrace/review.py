"""Inference-time policies: candidate scoring, low-probability
recommendation, attention-based review pairing, and a short adaptive
diagnostic.

Everything here works at the question-id level and goes through a
:class:`Predictor`, which owns the id-to-index map and the cold-start
prior (a user with no history gets the calibrated base rate, since the
sequence model needs at least one interaction).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Catalog
from .errors import ColdStartError
from .model import ForwardTrace, ModelConfig, Parameters, forward_batch, \
    forward_step

HistoryPair = tuple[str, int]


class Predictor:
    """Scores question ids for one user history with fixed parameters."""

    def __init__(self, config: ModelConfig, params: Parameters,
                 catalog: Catalog, prior_p: float = 0.5):
        self.config = config
        self.params = params
        self.catalog = catalog
        self.prior_p = float(prior_p)

    @classmethod
    def from_checkpoint(cls, checkpoint,
                        tags: dict[str, frozenset[str]] | None = None):
        return cls(checkpoint.config, checkpoint.params,
                   checkpoint.catalog(tags), checkpoint.prior_p)

    def index_of(self, question_id: str) -> int:
        return self.catalog.index_of(question_id)

    def windowed(self, history: Sequence[HistoryPair]) -> list[HistoryPair]:
        return list(history)[-self.config.window:]

    def trace(self, history: Sequence[HistoryPair],
              target_id: str) -> ForwardTrace:
        pairs = [(self.index_of(q), r) for q, r in history]
        return forward_step(self.params, self.config, pairs,
                            self.index_of(target_id))

    def predict(self, history: Sequence[HistoryPair], target_id: str) -> float:
        """Correctness probability; empty histories get the prior."""
        if len(history) == 0:
            return self.prior_p
        return self.trace(history, target_id).prob

    def score_candidates(self, history: Sequence[HistoryPair],
                         candidates: Sequence[str], chunk: int = 256):
        """Score many candidates against one history in padded batches.

        Returns (probs, attention) where attention rows align with the
        windowed history. Raises on an empty history: the caller decides
        whether the prior applies.
        """
        recent = self.windowed(history)
        if not recent:
            raise ColdStartError("empty history: serve the calibrated prior")
        length = len(recent)
        q_row = np.array([self.index_of(q) for q, _ in recent], dtype=np.int64)
        r_row = np.array([r for _, r in recent], dtype=np.int64)
        probs = np.empty(len(candidates), dtype=np.float64)
        alphas = np.empty((len(candidates), length), dtype=np.float64)
        for start in range(0, len(candidates), chunk):
            ids = candidates[start:start + chunk]
            bsz = len(ids)
            questions = np.tile(q_row, (bsz, 1))
            responses = np.tile(r_row, (bsz, 1))
            mask = np.ones((bsz, length), dtype=np.float32)
            targets = np.array([self.index_of(c) for c in ids], dtype=np.int64)
            trace = forward_batch(self.params, self.config, questions,
                                  responses, mask, targets, cache=False)
            probs[start:start + bsz] = trace.prob
            alphas[start:start + bsz] = trace.alpha
        return probs, alphas


@dataclass(frozen=True)
class CandidateScore:
    """One pool question's predicted probability and the attention it put
    on the user's (windowed) history."""

    question_id: str
    prob: float
    attention: np.ndarray


@dataclass(frozen=True)
class ReviewPair:
    """A weak candidate paired with the most-attended history question the
    user got wrong."""

    weak_question_id: str
    review_question_id: str
    attention_weight: float
    original_response: int


def score_pool(predictor: Predictor, history: Sequence[HistoryPair],
               pool: Sequence[str]) -> list[CandidateScore]:
    """Score every pool question; results sorted by ascending probability
    (ties by question id). Cold-start histories score at the prior."""
    if not pool:
        raise ValueError("candidate pool is empty")
    if len(history) == 0:
        empty = np.zeros(0)
        scores = [CandidateScore(qid, predictor.prior_p, empty) for qid in pool]
    else:
        probs, alphas = predictor.score_candidates(history, pool)
        scores = [CandidateScore(qid, float(p), a)
                  for qid, p, a in zip(pool, probs, alphas)]
    scores.sort(key=lambda s: (s.prob, s.question_id))
    return scores


def recommend_next(scores: Sequence[CandidateScore],
                   already_answered: Iterable[str] = (),
                   eliminate_above: float = 0.85, k: int = 10) -> list[str]:
    """The k lowest-probability unanswered questions, after dropping
    anything the model already expects the user to get right."""
    answered = set(already_answered)
    kept = [s for s in scores
            if s.question_id not in answered and s.prob <= eliminate_above]
    kept.sort(key=lambda s: (s.prob, s.question_id))
    return [s.question_id for s in kept[:k]]


def smart_review_pair(predictor: Predictor, history: Sequence[HistoryPair],
                      weak_candidate: str) -> ReviewPair | None:
    """Pick review material for a weak candidate.

    Among the (windowed) history questions the user answered incorrectly,
    returns the one the candidate's attention weighs highest; ties break
    by ascending question id. None when the user got everything right.
    """
    recent = predictor.windowed(history)
    if not recent:
        return None
    probs, alphas = predictor.score_candidates(history, [weak_candidate])
    alpha = alphas[0]
    best: tuple[float, str] | None = None
    for step, (qid, response) in enumerate(recent):
        if response != 0:
            continue
        weight = float(alpha[step])
        if best is None or weight > best[0] or \
                (weight == best[0] and qid < best[1]):
            best = (weight, qid)
    if best is None:
        return None
    return ReviewPair(weak_question_id=weak_candidate,
                      review_question_id=best[1],
                      attention_weight=best[0],
                      original_response=0)


ScoreFn = Callable[[Sequence[HistoryPair], Sequence[str]], np.ndarray]


def model_score_fn(predictor: Predictor) -> ScoreFn:
    """Adapt a predictor to the scoring interface ``adaptive_diagnostic``
    expects (cold starts score at the prior)."""

    def score(history: Sequence[HistoryPair],
              candidates: Sequence[str]) -> np.ndarray:
        if len(history) == 0:
            return np.full(len(candidates), predictor.prior_p)
        probs, _ = predictor.score_candidates(history, candidates)
        return probs

    return score


def adaptive_diagnostic(score_fn: ScoreFn, pool: Sequence[str],
                        respond: Callable[[str], int], steps: int = 6,
                        history: Sequence[HistoryPair] = ()) -> list[str]:
    """Greedy maximum-uncertainty item selection.

    At each step the unasked question with probability closest to 0.5 is
    asked (ties by ascending id), the response from ``respond`` is
    appended to the history, and the scores are refreshed. Returns the
    asked ids in order; no item repeats.
    """
    if len(pool) < steps:
        raise ValueError(f"pool of {len(pool)} cannot supply {steps} items")
    remaining = sorted(set(pool))
    current = list(history)
    asked: list[str] = []
    for _ in range(steps):
        probs = np.asarray(score_fn(current, remaining), dtype=np.float64)
        pick = int(np.argmin(np.abs(probs - 0.5)))
        qid = remaining.pop(pick)
        response = int(respond(qid))
        current.append((qid, response))
        asked.append(qid)
    return asked
