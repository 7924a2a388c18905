"""Training: event batching, feature preparation, the optimization loop,
and the finite-difference gradient checker.

Events are grouped into t-batches: each event lands one batch after the
latest batch touching its student or its thread, so no batch repeats an
entity and replaying batches in order preserves every per-entity timeline.
Gradients are accumulated per batch with the dynamic states entering the
batch treated as constants, then applied with Adam. Dynamic states reset to
zero at the start of every epoch.
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import time
from dataclasses import dataclass, replace

import numpy as np

from . import recommend
from .corpus import Dataset, EmptyDatasetError, ThreadEventIndex
from .model import (
    AblationFlags,
    DynamicStateStore,
    EventInputs,
    ModelParams,
    TENSOR_NAMES,
    assign_course_topic,
    event_grads,
    event_loss,
    excitation,
)
from .text import LdaModel, Vocabulary, lda_infer, term_frequency


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite; the message names
    the epoch, batch, and post where it happened."""


@dataclass
class TrainConfig:
    embed_dim: int = 10
    epochs: int = 80
    learning_rate: float = 0.001
    lambda_student: float = 1.0
    lambda_thread: float = 1.0
    post_decay: float = 0.5
    reply_decay: float = 0.001
    seed: int = 0
    clip_norm: float = 5.0          # 0 disables clipping
    init_std: float = 0.1
    activation: str = "sigmoid"
    topic_infer_iters: int = 50
    no_dynamic_student: bool = False
    no_dynamic_thread: bool = False
    no_student_projection: bool = False
    no_thread_projection: bool = False
    no_text_features: bool = False

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0 (0 disables clipping)")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if self.post_decay < 0 or self.reply_decay < 0:
            raise ValueError("decay rates must be nonnegative")
        if self.lambda_student < 0 or self.lambda_thread < 0:
            raise ValueError("smoothness weights must be nonnegative")
        if self.activation not in ("sigmoid", "tanh"):
            raise ValueError("activation must be 'sigmoid' or 'tanh'")
        if self.topic_infer_iters < 2:
            raise ValueError("topic_infer_iters must be >= 2")

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(
            self.no_dynamic_student, self.no_dynamic_thread,
            self.no_student_projection, self.no_thread_projection,
            self.no_text_features,
        )

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        """Build a config from string-valued keys, as read from a config
        file. Unknown keys are an error."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            f = fields.get(key)
            if f is None:
                raise ValueError("unknown config key %r" % key)
            if f.type in ("bool", bool):
                kwargs[key] = _parse_bool(key, value)
            elif f.type in ("int", int):
                kwargs[key] = int(value)
            elif f.type in ("float", float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = str(value)
        return cls(**kwargs)


def _parse_bool(key, value):
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError("config key %r expects a boolean, got %r" % (key, value))


def ablation_variant(config: TrainConfig, names) -> TrainConfig:
    """Copy of config with the named ablation flags switched on. 'full'
    means no flags. Unknown names are an error."""
    if isinstance(names, str):
        names = [names]
    names = [n for n in names if n != "full"]
    flags = AblationFlags.from_names(names)  # validates
    return replace(config, **{n: True for n in flags.active()})


ABLATION_VARIANTS = ("full",) + AblationFlags.NAMES


# ---------------------------------------------------------------------------
# t-batching


def t_batch(events) -> list[list[int]]:
    """Partition time-ordered events into batches of indices. An event goes
    one batch after the latest previous batch containing its student or its
    thread, so within a batch every student and thread appears at most
    once."""
    last_student: dict[int, int] = {}
    last_thread: dict[int, int] = {}
    batches: list[list[int]] = []
    for i, ev in enumerate(events):
        b = 1 + max(last_student.get(ev.student_id, -1), last_thread.get(ev.thread_id, -1))
        if b == len(batches):
            batches.append([])
        batches[b].append(i)
        last_student[ev.student_id] = b
        last_thread[ev.thread_id] = b
    return batches


# ---------------------------------------------------------------------------
# feature preparation


@dataclass
class EventFeatures:
    """Per-event quantities that depend only on the data, computed once
    before the epoch loop. Elapsed times are already normalized."""
    student: int
    thread: int
    last_thread: int | None
    theta: np.ndarray
    delta_student: float
    delta_thread: float
    week: int
    excitation_value: float
    timestamp: float
    post_id: int


def mean_event_gap(events) -> float:
    """Mean gap between consecutive event timestamps; 1.0 when undefined
    or zero so normalization is always well posed."""
    if len(events) < 2:
        return 1.0
    gaps = np.diff([ev.timestamp for ev in events])
    mean = float(gaps.mean())
    return mean if mean > 0 else 1.0


def prepare_event_features(train: Dataset, lda: LdaModel, vocab: Vocabulary,
                           week_topics, config: TrainConfig) -> tuple[list[EventFeatures], float]:
    """Topic-infer every post and derive the replay features: elapsed times
    (normalized by the training mean event gap), the course-week context of
    the student at the event, the previous thread, and the excitation
    weight of the target thread."""
    time_scale = mean_event_gap(train.events)
    index = ThreadEventIndex(train)
    iters = config.topic_infer_iters
    burn = iters // 2

    last_t_student: dict[int, float] = {}
    last_t_thread: dict[int, float] = {}
    last_theta: dict[int, np.ndarray] = {}
    last_thread: dict[int, int] = {}
    feats = []
    for ev in train.events:
        theta = lda_infer(lda, term_frequency(ev.tokens, vocab), iters=iters, burn_in=burn)
        prev_theta = last_theta.get(ev.student_id)
        if prev_theta is None:
            week = train.course.week_of(ev.timestamp)
        else:
            week = assign_course_topic(_Wrap(prev_theta), week_topics)
        hist = index.history(ev.student_id, ev.thread_id, ev.timestamp)
        exc = excitation(hist, ev.timestamp, config.post_decay, config.reply_decay, time_scale)
        feats.append(EventFeatures(
            student=ev.student_id,
            thread=ev.thread_id,
            last_thread=last_thread.get(ev.student_id),
            theta=theta.probs,
            delta_student=(ev.timestamp - last_t_student.get(ev.student_id, 0.0)) / time_scale,
            delta_thread=(ev.timestamp - last_t_thread.get(ev.thread_id, 0.0)) / time_scale,
            week=week,
            excitation_value=exc,
            timestamp=ev.timestamp,
            post_id=ev.post_id,
        ))
        last_t_student[ev.student_id] = ev.timestamp
        last_t_thread[ev.thread_id] = ev.timestamp
        last_theta[ev.student_id] = theta.probs
        last_thread[ev.student_id] = ev.thread_id
    return feats, time_scale


class _Wrap:
    """Duck-typed stand-in for TopicDistribution when re-wrapping stored
    probability vectors without re-validation."""

    def __init__(self, probs):
        self.probs = probs


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: ModelParams, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(params.tensor(name)) for name in TENSOR_NAMES}
        self.v = {name: np.zeros_like(params.tensor(name)) for name in TENSOR_NAMES}

    def step(self, params: ModelParams, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in TENSOR_NAMES:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.tensor(name)[...] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint Euclidean norm is at most
    max_norm. Returns the pre-clip norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# fitting


def fit(train: Dataset, lda: LdaModel, vocab: Vocabulary, week_topics,
        config: TrainConfig, log_path=None, trajectory_sink: list | None = None,
        features: tuple[list[EventFeatures], float] | None = None):
    """Train the model on a time-ordered event list.

    Returns (params, store) where store holds the dynamic states after the
    final epoch, ready for ranking at later times. If log_path is given, a
    CSV with one row per epoch (epoch, mean_loss, seconds) is written. If
    trajectory_sink is a list, rows (kind, entity, timestamp, *embedding)
    are appended for every state write of the final epoch. `features` lets
    sweeps over seeds or ablations reuse one prepare_event_features result,
    which is valid as long as the decay and topic-inference settings match.
    """
    if not train.events:
        raise EmptyDatasetError("cannot fit on an empty training window")
    if len(week_topics) != train.course.num_weeks:
        raise ValueError("week topic count does not match the schedule")

    rng = np.random.default_rng(config.seed)
    params = ModelParams.init(
        rng, config.embed_dim, lda.num_topics, train.course.num_weeks,
        train.num_students, train.num_threads,
        init_std=config.init_std, post_decay=config.post_decay,
        reply_decay=config.reply_decay, lambda_student=config.lambda_student,
        lambda_thread=config.lambda_thread, activation=config.activation,
    )
    if features is None:
        features = prepare_event_features(train, lda, vocab, week_topics, config)
    feats, time_scale = features
    batches = t_batch(train.events)
    flags = config.flags
    opt = Adam(params, config.learning_rate)

    log_rows = []
    store = None
    for epoch in range(config.epochs):
        start = time.perf_counter()
        store = DynamicStateStore(train.num_students, train.num_threads,
                                  config.embed_dim, lda.num_topics, time_scale)
        collect = trajectory_sink is not None and epoch == config.epochs - 1
        epoch_loss = 0.0
        for b, batch in enumerate(batches):
            grads = params.zero_grads()
            writes = []
            for i in batch:
                f = feats[i]
                ev = EventInputs(
                    student=f.student,
                    target_thread=f.thread,
                    last_thread=f.last_thread,
                    student_vec=store.student_vecs[f.student].copy(),
                    target_thread_vec=store.thread_vecs[f.thread].copy(),
                    last_thread_vec=(np.zeros(config.embed_dim) if f.last_thread is None
                                     else store.thread_vecs[f.last_thread].copy()),
                    theta=f.theta,
                    delta_student=f.delta_student,
                    delta_thread=f.delta_thread,
                    delta_proj=f.delta_student,
                    week=f.week,
                    excitation_value=f.excitation_value,
                )
                loss_i, grads_i, (u_new, p_new) = event_grads(ev, params, flags)
                if not np.isfinite(loss_i):
                    raise TrainingDiverged(
                        "non-finite loss at epoch %d batch %d post %d" % (epoch, b, f.post_id))
                epoch_loss += loss_i
                for name in TENSOR_NAMES:
                    grads[name] += grads_i[name]
                writes.append((f, u_new, p_new))

            # state writes land after the whole batch so every event read
            # the values from the previous batch
            for f, u_new, p_new in writes:
                if not flags.no_dynamic_student:
                    store.student_vecs[f.student] = u_new
                if not flags.no_dynamic_thread:
                    store.thread_vecs[f.thread] = p_new
                store.student_last_t[f.student] = f.timestamp
                store.student_seen[f.student] = True
                store.thread_last_t[f.thread] = f.timestamp
                store.thread_seen[f.thread] = True
                store.student_last_theta[f.student] = f.theta
                store.student_last_thread[f.student] = f.thread
                if collect:
                    trajectory_sink.append(
                        ("student", f.student, f.timestamp, *store.student_vecs[f.student]))
                    trajectory_sink.append(
                        ("thread", f.thread, f.timestamp, *store.thread_vecs[f.thread]))

            total = clip_gradients(grads, config.clip_norm)
            if not np.isfinite(total):
                raise TrainingDiverged("non-finite gradient at epoch %d batch %d" % (epoch, b))
            opt.step(params, grads)
        log_rows.append((epoch, epoch_loss / len(feats), time.perf_counter() - start))

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "seconds"])
            for row in log_rows:
                writer.writerow([row[0], repr(float(row[1])), "%.6f" % row[2]])
    return params, store


# ---------------------------------------------------------------------------
# gradient checking


def random_event(rng: np.random.Generator, params: ModelParams,
                 cold_start: bool = False) -> EventInputs:
    """Random but well-posed per-event inputs for gradient checking."""
    d, k = params.embed_dim, params.num_topics
    last = None if cold_start else int(rng.integers(params.num_threads))
    return EventInputs(
        student=int(rng.integers(params.num_students)),
        target_thread=int(rng.integers(params.num_threads)),
        last_thread=last,
        student_vec=rng.uniform(0.05, 0.95, d),
        target_thread_vec=rng.uniform(0.05, 0.95, d),
        last_thread_vec=np.zeros(d) if last is None else rng.uniform(0.05, 0.95, d),
        theta=rng.dirichlet(np.ones(k)),
        delta_student=float(rng.uniform(0.1, 2.0)),
        delta_thread=float(rng.uniform(0.1, 2.0)),
        delta_proj=float(rng.uniform(0.1, 2.0)),
        week=int(rng.integers(params.num_weeks)),
        excitation_value=float(rng.uniform(0.0, 3.0)),
    )


def gradient_check(params: ModelParams, ev: EventInputs,
                   flags: AblationFlags = AblationFlags(),
                   eps: float = 1e-5, analytic: dict | None = None) -> float:
    """Compare analytic per-event gradients against central finite
    differences of the loss over every entry of every tensor. Returns the
    maximum relative error. Pass analytic to check an externally supplied
    gradient set instead of the model's own."""
    if analytic is None:
        _, analytic, _ = event_grads(ev, params, flags)
    worst = 0.0
    for name in TENSOR_NAMES:
        tensor = params.tensor(name)
        grad = analytic[name]
        flat = tensor.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = event_loss(ev, params, flags)
            flat[i] = orig - eps
            down = event_loss(ev, params, flags)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1e-8, abs(gflat[i]) + abs(numeric))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# hyperparameter grid


def grid_search(train: Dataset, lda: LdaModel, vocab: Vocabulary, week_topics,
                base_config: TrainConfig, grid: dict, holdout_seconds: float = 86400.0,
                n_cutoff: int = 5):
    """Exhaustive search over config-field grids, selecting by ranking
    quality on the trailing holdout_seconds of the training window.

    Returns (best_config, rows) with one (values, map) row per combination;
    ties keep the earliest combination in iteration order."""
    if not grid:
        raise ValueError("empty grid")
    t_end = train.events[-1].timestamp
    t_cut = t_end - holdout_seconds
    inner = [ev for ev in train.events if ev.timestamp < t_cut]
    held = [ev for ev in train.events if ev.timestamp >= t_cut]
    if not inner or not held:
        raise ValueError("holdout window leaves an empty training or validation set")
    inner_ds = Dataset(inner, train.num_students, train.num_threads, train.course,
                       train.student_ids, train.thread_ids)

    keys = sorted(grid)
    rows = []
    best = None
    for values in itertools.product(*(grid[k] for k in keys)):
        cfg = replace(base_config, **dict(zip(keys, values)))
        params, store = fit(inner_ds, lda, vocab, week_topics, cfg)
        ranker = recommend.build_model_ranker(params, store, week_topics, inner_ds,
                                              t_cut, flags=cfg.flags)
        report = recommend.evaluate(ranker, held, n_cutoff)
        rows.append((dict(zip(keys, values)), report.map_at_n))
        if best is None or report.map_at_n > best[1]:
            best = (cfg, report.map_at_n)
    return best[0], rows
