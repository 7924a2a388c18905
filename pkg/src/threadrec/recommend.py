"""Ranking, evaluation protocol, and reference baselines.

The protocol ranks candidate threads once per student at the start of the
test window, using the student's trained state projected to that time, and
scores the ranking with mean average precision at a cutoff against the
threads the student actually posted on inside the window. Candidates are
the threads with at least one training post, and the excitation weights
entering the candidate targets are computed from training history only.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import Dataset, ThreadEventIndex
from .model import (
    AblationFlags,
    DynamicState,
    DynamicStateStore,
    ModelParams,
    PredictedThreadEmbedding,
    StaticEmbedding,
    assign_course_topic,
    excitation,
    predict_next,
    project_student,
    project_thread,
)
from .text import TopicDistribution


class EvaluationError(ValueError):
    pass


@dataclass
class RankedRecommendation:
    """Candidate threads in increasing distance order, ties broken by the
    smaller thread id."""
    thread_ids: list[int]
    distances: list[float]


def rank_threads(query, candidates: Mapping[int, np.ndarray],
                 top_k: int | None = None) -> RankedRecommendation:
    """Order candidate threads by Euclidean distance between the query
    vector and each thread's target vector."""
    if isinstance(query, PredictedThreadEmbedding):
        query = query.vector
    query = np.asarray(query, dtype=np.float64)
    if not candidates:
        raise EvaluationError("no candidate threads to rank")
    if top_k is not None and top_k < 1:
        raise ValueError("top_k must be >= 1")
    ids = np.array(sorted(candidates), dtype=np.int64)
    mat = np.stack([np.asarray(candidates[int(i)], dtype=np.float64) for i in ids])
    if mat.shape[1] != query.shape[0]:
        raise ValueError("candidate vectors do not match the query dimension")
    dists = np.linalg.norm(mat - query, axis=1)
    order = np.lexsort((ids, dists))
    if top_k is not None:
        order = order[:top_k]
    return RankedRecommendation([int(ids[i]) for i in order],
                                [float(dists[i]) for i in order])


def average_precision(ranked: Sequence[int], relevant: set, n_cutoff: int) -> float:
    """Average precision at a cutoff: precision at each hit position within
    the top n_cutoff, summed and divided by min(|relevant|, n_cutoff).
    Returns 0 for an empty relevant set."""
    if n_cutoff < 1:
        raise ValueError("n_cutoff must be >= 1")
    top = list(ranked[:n_cutoff])
    if len(set(top)) != len(top):
        raise ValueError("ranking contains duplicate thread ids")
    if not relevant:
        return 0.0
    hits = 0
    score = 0.0
    for pos, tid in enumerate(top, start=1):
        if tid in relevant:
            hits += 1
            score += hits / pos
    return score / min(len(relevant), n_cutoff)


@dataclass
class EvalReport:
    method: str
    n_cutoff: int
    users_evaluated: int
    map_at_n: float
    per_user_ap: dict[int, float] = field(default_factory=dict)


def evaluate(rank_fn: Callable[[int], object], test_events, n_cutoff: int = 5,
             method: str = "model") -> EvalReport:
    """Score a per-student ranking function against the test window.

    rank_fn maps a student id to a RankedRecommendation or a plain ordered
    list of thread ids. Students with no test-window post are skipped; a
    window with no students at all is an error."""
    if isinstance(test_events, Dataset):
        test_events = test_events.events
    relevant: dict[int, set[int]] = {}
    for ev in test_events:
        relevant.setdefault(ev.student_id, set()).add(ev.thread_id)
    if not relevant:
        raise EvaluationError("test window contains no students to evaluate")
    per_user = {}
    for student in sorted(relevant):
        ranking = rank_fn(student)
        if isinstance(ranking, RankedRecommendation):
            ranking = ranking.thread_ids
        per_user[student] = average_precision(ranking, relevant[student], n_cutoff)
    map_at_n = sum(per_user.values()) / len(per_user)
    return EvalReport(method, n_cutoff, len(per_user), map_at_n, per_user)


# ---------------------------------------------------------------------------
# model ranker


def _candidate_threads(train: Dataset) -> list[int]:
    seen = sorted({ev.thread_id for ev in train.events})
    if not seen:
        raise EvaluationError("training window has no posted threads")
    return seen


def _rank_student(params: ModelParams, store: DynamicStateStore,
                  week_topics: Sequence[TopicDistribution], course, index,
                  candidates: Sequence[int], student: int, t_query: float,
                  flags: AblationFlags, top_k: int | None) -> RankedRecommendation:
    d, n = params.embed_dim, params.num_threads
    u_vec = store.student_vecs[student]

    if flags.no_student_projection:
        u_hat = u_vec
    else:
        last_t = store.student_last_t[student] if store.student_seen[student] else 0.0
        delta = max(t_query - last_t, 0.0) / store.time_scale
        if store.student_seen[student]:
            week = assign_course_topic(
                TopicDistribution(store.student_last_theta[student]), week_topics)
        else:
            week = course.week_of(t_query)
        u_hat = project_student(DynamicState(u_vec, None), delta, week, params)

    last_thread = int(store.student_last_thread[student])
    if last_thread < 0:
        p_dyn = np.zeros(d)
        p_static = None
    else:
        p_dyn = store.thread_vecs[last_thread]
        p_static = StaticEmbedding(last_thread, n)
    q = predict_next(u_hat, StaticEmbedding(student, params.num_students),
                     p_dyn, p_static, params)

    targets = {}
    for c in candidates:
        if flags.no_thread_projection:
            p_hat = store.thread_vecs[c]
        else:
            hist = index.history(student, c, t_query)
            z = excitation(hist, t_query, params.post_decay, params.reply_decay,
                           store.time_scale)
            p_hat = project_thread(u_vec, store.thread_vecs[c], z)
        target = np.zeros(n + d)
        target[c] = 1.0
        target[n:] = p_hat
        targets[c] = target
    return rank_threads(q, targets, top_k)


def build_model_ranker(params: ModelParams, store: DynamicStateStore,
                       week_topics: Sequence[TopicDistribution], train: Dataset,
                       t_query: float, flags: AblationFlags = AblationFlags(),
                       top_k: int | None = None) -> Callable[[int], RankedRecommendation]:
    """Ranking function over training-active threads for any student at a
    fixed query time. Interaction histories come from the training window
    only."""
    candidates = _candidate_threads(train)
    index = ThreadEventIndex(train)

    def rank(student: int) -> RankedRecommendation:
        if not (0 <= student < params.num_students):
            raise EvaluationError("unknown student %d" % student)
        return _rank_student(params, store, week_topics, train.course, index,
                             candidates, student, t_query, flags, top_k)

    return rank


def evaluate_per_event(params: ModelParams, store: DynamicStateStore,
                       week_topics: Sequence[TopicDistribution], train: Dataset,
                       test_events, n_cutoff: int = 5,
                       flags: AblationFlags = AblationFlags()) -> EvalReport:
    """Re-ranking variant of the protocol: every test event is scored by a
    fresh ranking for its student at the event's own time, with interaction
    histories extended by the earlier test-window posts. Embeddings stay
    frozen at their trained values. A student's score is the mean reciprocal
    quality of their events' rankings measured as single-item average
    precision; the report averages over students."""
    if isinstance(test_events, Dataset):
        test_events = test_events.events
    if not test_events:
        raise EvaluationError("test window contains no students to evaluate")
    merged = Dataset(list(train.events) + list(test_events), train.num_students,
                     train.num_threads, train.course, train.student_ids, train.thread_ids)
    index = ThreadEventIndex(merged)
    candidates = _candidate_threads(train)

    scores: dict[int, list[float]] = {}
    for ev in test_events:
        ranking = _rank_student(params, store, week_topics, train.course, index,
                                candidates, ev.student_id, ev.timestamp, flags, None)
        ap = average_precision(ranking.thread_ids, {ev.thread_id}, n_cutoff)
        scores.setdefault(ev.student_id, []).append(ap)
    per_user = {u: sum(v) / len(v) for u, v in sorted(scores.items())}
    map_at_n = sum(per_user.values()) / len(per_user)
    return EvalReport("model-per-event", n_cutoff, len(per_user), map_at_n, per_user)


# ---------------------------------------------------------------------------
# baselines


def baseline_pop(train: Dataset) -> list[int]:
    """All threads by descending training post count; ties and never-posted
    threads fall back to ascending thread id."""
    counts = np.zeros(train.num_threads, dtype=np.int64)
    for ev in train.events:
        counts[ev.thread_id] += 1
    return sorted(range(train.num_threads), key=lambda t: (-counts[t], t))


def baseline_rec(train: Dataset, ascending: bool = False) -> list[int]:
    """Threads by recency of their latest training post, most recent first
    by default (ascending=True reverses the active part). Threads never
    posted on always come last, in id order."""
    last: dict[int, float] = {}
    for ev in train.events:
        last[ev.thread_id] = ev.timestamp
    active = sorted(last, key=lambda t: (last[t], t) if ascending else (-last[t], t))
    inactive = [t for t in range(train.num_threads) if t not in last]
    return active + inactive


def baseline_user_rec(train: Dataset, student: int, ascending: bool = False) -> list[int]:
    """The student's own threads ordered by the recency of their own last
    post on each, followed by the remaining threads in baseline_rec order."""
    own: dict[int, float] = {}
    for ev in train.events:
        if ev.student_id == student:
            own[ev.thread_id] = ev.timestamp
    head = sorted(own, key=lambda t: (own[t], t) if ascending else (-own[t], t))
    tail = [t for t in baseline_rec(train, ascending) if t not in own]
    return head + tail


# ---------------------------------------------------------------------------
# report files


def write_report_json(report: EvalReport, path) -> None:
    payload = {
        "method": report.method,
        "n_cutoff": report.n_cutoff,
        "users_evaluated": report.users_evaluated,
        "map_at_n": report.map_at_n,
        "per_user_ap": {str(u): ap for u, ap in sorted(report.per_user_ap.items())},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "ap_at_%d" % report.n_cutoff])
        for student, ap in sorted(report.per_user_ap.items()):
            writer.writerow([student, repr(float(ap))])


def write_trajectories(rows: Iterable[tuple], path) -> None:
    """CSV of embedding snapshots: kind, entity, timestamp, then one column
    per embedding coordinate."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if rows:
            dim = len(rows[0]) - 3
            writer.writerow(["kind", "entity", "timestamp"] + ["e%d" % i for i in range(dim)])
            for row in rows:
                writer.writerow([row[0], row[1], repr(float(row[2]))]
                                + [repr(float(v)) for v in row[3:]])
        else:
            writer.writerow(["kind", "entity", "timestamp"])
