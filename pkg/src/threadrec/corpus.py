"""Forum event log: data model, ingestion, splitting, interaction history.

A dataset is an ordered list of post events over dense student and thread
indices, together with the course schedule. External ids from the raw log
are re-indexed at ingest time and the mapping is persisted separately.
"""
from __future__ import annotations

import bisect
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

from .text import preprocess

log = logging.getLogger(__name__)


class ParseError(ValueError):
    """A line of the input file could not be parsed. Carries the 1-based
    line number."""

    def __init__(self, line_no, message):
        super().__init__("line %d: %s" % (line_no, message))
        self.line_no = line_no


class IntegrityError(ValueError):
    """The file parsed but violates a dataset invariant (duplicate ids,
    bad parent references, and the like)."""


class EmptyDatasetError(ValueError):
    pass


@dataclass
class PostEvent:
    post_id: int
    student_id: int
    thread_id: int
    timestamp: float
    tokens: list[str]
    parent_post_id: int | None = None


@dataclass
class CourseSchedule:
    """Per-week syllabus documents and the week start times."""
    week_docs: list[list[str]]
    week_boundaries: list[float]

    def __post_init__(self):
        if len(self.week_docs) != len(self.week_boundaries):
            raise ValueError("week_docs and week_boundaries must have equal length")
        if not self.week_docs:
            raise ValueError("schedule must contain at least one week")
        for a, b in zip(self.week_boundaries, self.week_boundaries[1:]):
            if not b > a:
                raise ValueError("week boundaries must be strictly increasing")

    @property
    def num_weeks(self) -> int:
        return len(self.week_docs)

    def week_of(self, t: float) -> int:
        """Index of the week containing time t, clamped to the schedule."""
        i = bisect.bisect_right(self.week_boundaries, t) - 1
        return min(max(i, 0), self.num_weeks - 1)


@dataclass
class Dataset:
    events: list[PostEvent]
    num_students: int
    num_threads: int
    course: CourseSchedule
    # dense index -> external id, identity when the input was already dense
    student_ids: list[int] = field(default_factory=list)
    thread_ids: list[int] = field(default_factory=list)


@dataclass
class SplitSpec:
    train_end: float
    test_end: float

    def __post_init__(self):
        if not (0 < self.train_end < self.test_end):
            raise ValueError("need 0 < train_end < test_end")


class ReplyHistory(NamedTuple):
    """Interaction record of one student on one thread up to a query time.

    last_own_post is the time of the student's latest post on the thread
    before the query time, or None if they never posted there. post_times
    and reply_times hold events by other students strictly between
    last_own_post and the query time: explicit replies to any of the
    student's posts on the thread land in reply_times, every other post
    lands in post_times. The two lists never share an event."""
    last_own_post: float | None
    post_times: list[float]
    reply_times: list[float]


def validate_dataset(ds: Dataset) -> None:
    """Check ordering, index range, and parent reference invariants."""
    if ds.num_students < 1 or ds.num_threads < 1:
        raise IntegrityError("dataset must register at least one student and thread")
    seen_posts: dict[int, PostEvent] = {}
    prev_t = None
    prev_id = None
    for ev in ds.events:
        if ev.timestamp < 0:
            raise IntegrityError("post %d has negative timestamp" % ev.post_id)
        if not (0 <= ev.student_id < ds.num_students):
            raise IntegrityError("post %d references unknown student %d" % (ev.post_id, ev.student_id))
        if not (0 <= ev.thread_id < ds.num_threads):
            raise IntegrityError("post %d references unknown thread %d" % (ev.post_id, ev.thread_id))
        if ev.post_id in seen_posts:
            raise IntegrityError("duplicate post id %d" % ev.post_id)
        if prev_t is not None:
            if ev.timestamp < prev_t:
                raise IntegrityError("events not sorted by timestamp at post %d" % ev.post_id)
            if ev.timestamp == prev_t and ev.post_id <= prev_id:
                raise IntegrityError("post ids not increasing within timestamp tie at post %d" % ev.post_id)
        if ev.parent_post_id is not None:
            parent = seen_posts.get(ev.parent_post_id)
            if parent is None:
                raise IntegrityError("post %d replies to unknown or later post %d" % (ev.post_id, ev.parent_post_id))
            if parent.thread_id != ev.thread_id:
                raise IntegrityError("post %d replies across threads" % ev.post_id)
            if not parent.timestamp < ev.timestamp:
                raise IntegrityError("post %d does not strictly follow its parent" % ev.post_id)
        seen_posts[ev.post_id] = ev
        prev_t, prev_id = ev.timestamp, ev.post_id


def load_schedule(path) -> CourseSchedule:
    with open(path) as fh:
        raw = json.load(fh)
    weeks = raw.get("weeks")
    if not isinstance(weeks, list) or not weeks:
        raise ValueError("schedule must contain a non-empty 'weeks' list")
    docs = []
    bounds = []
    for i, wk in enumerate(weeks):
        try:
            bounds.append(float(wk["start_ts"]))
            docs.append(preprocess(str(wk["text"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError("week %d malformed in schedule: %s" % (i, exc)) from None
    return CourseSchedule(docs, bounds)


def _field(record, name, line_no):
    if name not in record:
        raise ParseError(line_no, "missing field %r" % name)
    return record[name]


def ingest_jsonl(posts_path, schedule) -> Dataset:
    """Read a JSONL post log into a Dataset.

    Each line is an object with post_id, student_id, thread_id, timestamp,
    text, and optionally parent_post_id. Text is tokenized immediately.
    Student and thread ids are re-indexed densely in ascending external id
    order; events are sorted by (timestamp, post_id).
    """
    if isinstance(schedule, CourseSchedule):
        course = schedule
    else:
        course = load_schedule(schedule)

    rows = []
    with open(posts_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, "invalid JSON (%s)" % exc.msg) from None
            if not isinstance(record, dict):
                raise ParseError(line_no, "expected a JSON object")
            try:
                post_id = int(_field(record, "post_id", line_no))
                student = int(_field(record, "student_id", line_no))
                thread = int(_field(record, "thread_id", line_no))
                timestamp = float(_field(record, "timestamp", line_no))
                text = _field(record, "text", line_no)
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(line_no, "bad field value (%s)" % exc) from None
            if not isinstance(text, str):
                raise ParseError(line_no, "text must be a string")
            if timestamp < 0:
                raise ParseError(line_no, "timestamp must be >= 0")
            parent = record.get("parent_post_id")
            if parent is not None:
                try:
                    parent = int(parent)
                except (TypeError, ValueError):
                    raise ParseError(line_no, "parent_post_id must be an integer") from None
            rows.append((post_id, student, thread, timestamp, preprocess(text), parent))

    if not rows:
        raise EmptyDatasetError("post log %s contains no events" % posts_path)

    student_ids = sorted({r[1] for r in rows})
    thread_ids = sorted({r[2] for r in rows})
    student_map = {ext: i for i, ext in enumerate(student_ids)}
    thread_map = {ext: i for i, ext in enumerate(thread_ids)}

    events = [
        PostEvent(pid, student_map[s], thread_map[t], ts, toks, parent)
        for pid, s, t, ts, toks, parent in rows
    ]
    events.sort(key=lambda ev: (ev.timestamp, ev.post_id))
    ds = Dataset(events, len(student_ids), len(thread_ids), course, student_ids, thread_ids)
    validate_dataset(ds)
    return ds


def write_jsonl(ds: Dataset, path) -> None:
    """Serialize events using the dataset's dense ids; together with
    write_schedule this round-trips through ingest_jsonl."""
    with open(path, "w") as fh:
        for ev in ds.events:
            record = {
                "post_id": ev.post_id,
                "student_id": ev.student_id,
                "thread_id": ev.thread_id,
                "timestamp": ev.timestamp,
                "text": " ".join(ev.tokens),
            }
            if ev.parent_post_id is not None:
                record["parent_post_id"] = ev.parent_post_id
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


def write_schedule(course: CourseSchedule, path) -> None:
    weeks = [
        {"start_ts": b, "text": " ".join(doc)}
        for b, doc in zip(course.week_boundaries, course.week_docs)
    ]
    with open(path, "w") as fh:
        json.dump({"weeks": weeks}, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_id_map(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["external_id", "dense_id", "kind"])
        for dense, ext in enumerate(ds.student_ids):
            writer.writerow([ext, dense, "student"])
        for dense, ext in enumerate(ds.thread_ids):
            writer.writerow([ext, dense, "thread"])


def load_id_map(path) -> dict[str, dict[int, int]]:
    """Returns {'student': {external: dense}, 'thread': {external: dense}}."""
    out: dict[str, dict[int, int]] = {"student": {}, "thread": {}}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["external_id", "dense_id", "kind"]:
            raise ValueError("unrecognized id map header")
        for ext, dense, kind in reader:
            if kind not in out:
                raise ValueError("unknown id kind %r" % kind)
            out[kind][int(ext)] = int(dense)
    return out


def split_by_time(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Partition events into a training window [0, train_end) and a test
    window [train_end, test_end). Both halves share the id registries and
    the course schedule. An empty training window is an error; an empty
    test window only warns."""
    train_events = [ev for ev in ds.events if ev.timestamp < spec.train_end]
    test_events = [
        ev for ev in ds.events if spec.train_end <= ev.timestamp < spec.test_end
    ]
    if not train_events:
        raise EmptyDatasetError("no events before train_end=%r" % spec.train_end)
    if not test_events:
        log.warning("test window [%r, %r) contains no events", spec.train_end, spec.test_end)
    train = Dataset(train_events, ds.num_students, ds.num_threads, ds.course,
                    ds.student_ids, ds.thread_ids)
    test = Dataset(test_events, ds.num_students, ds.num_threads, ds.course,
                   ds.student_ids, ds.thread_ids)
    return train, test


class ThreadEventIndex:
    """Per-thread event lists plus a post author lookup, for repeated
    interaction-history queries against a fixed dataset."""

    def __init__(self, ds: Dataset):
        self.by_thread: dict[int, list[PostEvent]] = {}
        self.author_of: dict[int, int] = {}
        for ev in ds.events:
            self.by_thread.setdefault(ev.thread_id, []).append(ev)
            self.author_of[ev.post_id] = ev.student_id

    def history(self, student: int, thread: int, t_end: float) -> ReplyHistory:
        events = self.by_thread.get(thread, ())
        t_up = None
        for ev in events:
            if ev.student_id == student and ev.timestamp < t_end:
                t_up = ev.timestamp
        if t_up is None:
            return ReplyHistory(None, [], [])
        posts = []
        replies = []
        for ev in events:
            if ev.timestamp >= t_end:
                break
            if ev.timestamp <= t_up or ev.student_id == student:
                continue
            parent = ev.parent_post_id
            if parent is not None and self.author_of.get(parent) == student:
                replies.append(ev.timestamp)
            else:
                posts.append(ev.timestamp)
        return ReplyHistory(t_up, posts, replies)


def reply_history(ds: Dataset, student: int, thread: int, t_end: float) -> ReplyHistory:
    """Interaction history of one student on one thread before t_end; see
    ReplyHistory for the exact window semantics."""
    if not (0 <= student < ds.num_students):
        raise IntegrityError("unknown student %d" % student)
    if not (0 <= thread < ds.num_threads):
        raise IntegrityError("unknown thread %d" % thread)
    return ThreadEventIndex(ds).history(student, thread, t_end)
