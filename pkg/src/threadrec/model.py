"""Embedding model core.

Students and threads carry dynamic embeddings that evolve together: each
post updates both through a recurrent cell driven by the post's topic
distribution and the elapsed times. Between posts a student's embedding is
projected forward by a multiplicative time-and-week context, and a thread's
embedding is projected toward a student by an excitation weight built from
recent activity on the thread. The prediction head maps the projected
student, the pair of one-hot identities, and the dynamic embedding of the
student's previous thread to a target that concatenates the next thread's
one-hot with its projected embedding.

Training minimizes, per event, the unsquared Euclidean distance between
prediction and target plus two smoothness penalties on the embedding jumps.
Gradients are derived by hand in event_grads and validated against central
finite differences; see train.gradient_check.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .corpus import ReplyHistory
from .text import TopicDistribution

TENSOR_NAMES = (
    "student_update",
    "thread_update",
    "time_context",
    "week_context",
    "predictor",
    "predictor_bias",
)


@dataclass
class DynamicState:
    """Evolving embedding of one entity and the time it was last written.

    last_update is None before the entity's first interaction; embeddings
    start at the zero vector."""
    embedding: np.ndarray
    last_update: float | None = None


@dataclass
class StaticEmbedding:
    """One-hot identity of an entity, kept as an index so the dense vector
    is never materialized."""
    index: int
    dimension: int

    def __post_init__(self):
        if not (0 <= self.index < self.dimension):
            raise ValueError("one-hot index %d outside dimension %d" % (self.index, self.dimension))


@dataclass
class PredictedThreadEmbedding:
    """Output of the prediction head: first num_threads entries score the
    thread identities, the last embed_dim entries estimate the projected
    embedding of the next thread."""
    vector: np.ndarray


@dataclass(frozen=True)
class AblationFlags:
    no_dynamic_student: bool = False
    no_dynamic_thread: bool = False
    no_student_projection: bool = False
    no_thread_projection: bool = False
    no_text_features: bool = False

    NAMES = (
        "no_dynamic_student",
        "no_dynamic_thread",
        "no_student_projection",
        "no_thread_projection",
        "no_text_features",
    )

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "AblationFlags":
        unknown = [n for n in names if n not in cls.NAMES]
        if unknown:
            raise ValueError("unknown ablation flag(s): %s" % ", ".join(unknown))
        return cls(**{n: True for n in names})

    def active(self) -> list[str]:
        return [n for n in self.NAMES if getattr(self, n)]


@dataclass
class ModelParams:
    """All trainable tensors plus the fixed hyperparameters they were
    trained with.

    Shapes, with D = embed_dim, K = num_topics, S = num_weeks,
    M = num_students, N = num_threads:

      student_update, thread_update : (2D + K + 1, D)
      time_context                  : (D, 1)
      week_context                  : (D, S)
      predictor                     : (M + N + 2D, N + D)
      predictor_bias                : (N + D,)
    """
    student_update: np.ndarray
    thread_update: np.ndarray
    time_context: np.ndarray
    week_context: np.ndarray
    predictor: np.ndarray
    predictor_bias: np.ndarray
    post_decay: float
    reply_decay: float
    lambda_student: float
    lambda_thread: float
    embed_dim: int
    num_topics: int
    num_weeks: int
    num_students: int
    num_threads: int
    activation: str = "sigmoid"

    def __post_init__(self):
        d, k = self.embed_dim, self.num_topics
        s, m, n = self.num_weeks, self.num_students, self.num_threads
        expected = {
            "student_update": (2 * d + k + 1, d),
            "thread_update": (2 * d + k + 1, d),
            "time_context": (d, 1),
            "week_context": (d, s),
            "predictor": (m + n + 2 * d, n + d),
            "predictor_bias": (n + d,),
        }
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError("%s has shape %s, expected %s" % (name, arr.shape, shape))
            setattr(self, name, arr)
        if self.post_decay < 0 or self.reply_decay < 0:
            raise ValueError("decay rates must be nonnegative")
        if self.lambda_student < 0 or self.lambda_thread < 0:
            raise ValueError("smoothness weights must be nonnegative")
        if self.activation not in ("sigmoid", "tanh"):
            raise ValueError("activation must be 'sigmoid' or 'tanh'")

    @classmethod
    def init(cls, rng: np.random.Generator, embed_dim, num_topics, num_weeks,
             num_students, num_threads, init_std=0.1, post_decay=0.5,
             reply_decay=0.001, lambda_student=1.0, lambda_thread=1.0,
             activation="sigmoid") -> "ModelParams":
        """Gaussian-initialized weights with zero bias."""
        d, k, s = embed_dim, num_topics, num_weeks
        m, n = num_students, num_threads
        if min(d, k, s, m, n) < 1:
            raise ValueError("all dimensions must be >= 1")
        def g(*shape):
            return rng.normal(0.0, init_std, size=shape)
        return cls(
            student_update=g(2 * d + k + 1, d),
            thread_update=g(2 * d + k + 1, d),
            time_context=g(d, 1),
            week_context=g(d, s),
            predictor=g(m + n + 2 * d, n + d),
            predictor_bias=np.zeros(n + d),
            post_decay=post_decay,
            reply_decay=reply_decay,
            lambda_student=lambda_student,
            lambda_thread=lambda_thread,
            embed_dim=d, num_topics=k, num_weeks=s,
            num_students=m, num_threads=n,
            activation=activation,
        )

    def tensor(self, name: str) -> np.ndarray:
        if name not in TENSOR_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def copy(self) -> "ModelParams":
        return replace(self, **{name: self.tensor(name).copy() for name in TENSOR_NAMES})

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(self.tensor(name)) for name in TENSOR_NAMES}


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return expit(x)
    return np.tanh(x)


def _act_deriv(out: np.ndarray, kind: str) -> np.ndarray:
    # derivative expressed through the activation's own output
    if kind == "sigmoid":
        return out * (1.0 - out)
    return 1.0 - out * out


def _norm_grad(vec: np.ndarray) -> tuple[float, np.ndarray]:
    """Euclidean norm and its subgradient, zero at the origin."""
    n = float(np.linalg.norm(vec))
    if n == 0.0:
        return 0.0, np.zeros_like(vec)
    return n, vec / n


# ---------------------------------------------------------------------------
# forward operations


def update(u_prev: DynamicState, p_prev: DynamicState, theta: TopicDistribution,
           delta_student: float, delta_thread: float, params: ModelParams):
    """Joint recurrent update at a post: both new embeddings are computed
    from the pre-update pair, the post's topic distribution, and the two
    normalized elapsed times. Returns (student_embedding, thread_embedding)."""
    theta_vec = np.asarray(theta.probs, dtype=np.float64)
    return _update_kernel(
        np.asarray(u_prev.embedding, dtype=np.float64),
        np.asarray(p_prev.embedding, dtype=np.float64),
        theta_vec, delta_student, delta_thread, params,
    )[:2]


def _update_kernel(u_vec, p_vec, theta_vec, delta_student, delta_thread, params):
    d, k = params.embed_dim, params.num_topics
    if u_vec.shape != (d,) or p_vec.shape != (d,):
        raise ValueError("embedding dimension mismatch")
    if theta_vec.shape != (k,):
        raise ValueError("topic vector has length %d, expected %d" % (len(theta_vec), k))
    if delta_student < 0 or delta_thread < 0:
        raise ValueError("elapsed times must be nonnegative")
    xu = np.concatenate([u_vec, p_vec, theta_vec, [delta_student]])
    xp = np.concatenate([p_vec, u_vec, theta_vec, [delta_thread]])
    u_new = _act(xu @ params.student_update, params.activation)
    p_new = _act(xp @ params.thread_update, params.activation)
    return u_new, p_new, xu, xp


def assign_course_topic(theta: TopicDistribution, week_topics: Sequence[TopicDistribution]) -> int:
    """Index of the course week whose topic profile is closest to theta in
    Euclidean distance; ties resolve to the smallest index."""
    if not week_topics:
        raise ValueError("no course week topics given")
    probs = np.asarray(theta.probs)
    best = 0
    best_dist = None
    for i, wk in enumerate(week_topics):
        dist = float(np.linalg.norm(probs - wk.probs))
        if best_dist is None or dist < best_dist:
            best, best_dist = i, dist
    return best


def project_student(state: DynamicState, delta: float, week: int,
                    params: ModelParams) -> np.ndarray:
    """Drift the student's embedding forward by elapsed time delta within
    course week `week`: an elementwise gain of one plus a time term plus a
    week term multiplies the stored embedding."""
    if delta < 0:
        raise ValueError("elapsed time must be nonnegative")
    if not (0 <= week < params.num_weeks):
        raise ValueError("week %d outside schedule of %d weeks" % (week, params.num_weeks))
    vec = np.asarray(state.embedding, dtype=np.float64)
    if vec.shape != (params.embed_dim,):
        raise ValueError("embedding dimension mismatch")
    return _project_student_kernel(vec, delta, week, params)[0]


def _project_student_kernel(u_vec, delta, week, params):
    gain = 1.0 + params.time_context[:, 0] * delta + params.week_context[:, week]
    return gain * u_vec, gain


def excitation(history: ReplyHistory, t_query: float, post_decay: float,
               reply_decay: float, time_scale: float = 1.0) -> float:
    """Excitation weight of a thread toward a student at t_query.

    Zero when the student never posted on the thread. Otherwise each later
    post by another student contributes exp(-post_decay * gap) and each
    explicit reply to the student contributes exp(-reply_decay * gap), where
    the gap is measured from the student's own last post and divided by
    time_scale."""
    if history.last_own_post is None:
        return 0.0
    if time_scale <= 0:
        raise ValueError("time_scale must be positive")
    t_up = history.last_own_post
    total = 0.0
    for times, rate in ((history.post_times, post_decay), (history.reply_times, reply_decay)):
        for t in times:
            gap = t - t_up
            if gap < 0:
                raise ValueError("history event at %r precedes the student's last post at %r" % (t, t_up))
            if t >= t_query:
                raise ValueError("history event at %r is not before the query time %r" % (t, t_query))
            total += float(np.exp(-rate * gap / time_scale))
    return total


def project_thread(student_vec: np.ndarray, thread_vec: np.ndarray,
                   excitation_value: float) -> np.ndarray:
    """Convex combination pulling the thread embedding toward the student:
    weight excitation/(1+excitation) on the student, the rest on the thread.
    With zero excitation the thread embedding is returned unchanged."""
    if excitation_value < 0:
        raise ValueError("excitation must be nonnegative")
    student_vec = np.asarray(student_vec, dtype=np.float64)
    thread_vec = np.asarray(thread_vec, dtype=np.float64)
    if student_vec.shape != thread_vec.shape:
        raise ValueError("embedding dimension mismatch")
    if excitation_value == 0.0:
        return thread_vec.copy()
    w = excitation_value / (1.0 + excitation_value)
    return w * student_vec + (1.0 - w) * thread_vec


def predict_next(student_proj: np.ndarray, student_static: StaticEmbedding,
                 thread_dyn: np.ndarray, thread_static: StaticEmbedding | None,
                 params: ModelParams) -> PredictedThreadEmbedding:
    """Apply the prediction head. thread_dyn and thread_static describe the
    thread of the student's previous post; pass zeros and None for a student
    with no history, which contributes nothing from those blocks. One-hot
    blocks are applied by row selection, never as dense vectors."""
    if student_static.dimension != params.num_students:
        raise ValueError("student one-hot dimension mismatch")
    if thread_static is not None and thread_static.dimension != params.num_threads:
        raise ValueError("thread one-hot dimension mismatch")
    student_proj = np.asarray(student_proj, dtype=np.float64)
    thread_dyn = np.asarray(thread_dyn, dtype=np.float64)
    d = params.embed_dim
    if student_proj.shape != (d,) or thread_dyn.shape != (d,):
        raise ValueError("embedding dimension mismatch")
    q = _predict_kernel(student_proj, student_static.index, thread_dyn,
                        None if thread_static is None else thread_static.index,
                        params)
    return PredictedThreadEmbedding(q)


def _predict_kernel(u_hat, student, p_dyn, last_thread, params):
    d, m = params.embed_dim, params.num_students
    W = params.predictor
    q = u_hat @ W[:d]
    q = q + W[d + student]
    q = q + p_dyn @ W[d + m : 2 * d + m]
    if last_thread is not None:
        q = q + W[2 * d + m + last_thread]
    return q + params.predictor_bias


def loss(pred: PredictedThreadEmbedding, target_static: StaticEmbedding,
         target_proj: np.ndarray, u_new, u_prev, p_new, p_prev,
         params: ModelParams) -> float:
    """Per-event objective: unsquared Euclidean distance from the prediction
    to the concatenated target (next thread one-hot, projected embedding),
    plus smoothness penalties on the two embedding jumps."""
    if target_static.dimension != params.num_threads:
        raise ValueError("target one-hot dimension mismatch")
    n, d = params.num_threads, params.embed_dim
    target_proj = np.asarray(target_proj, dtype=np.float64)
    if target_proj.shape != (d,):
        raise ValueError("target projection dimension mismatch")
    target = np.zeros(n + d)
    target[target_static.index] = 1.0
    target[n:] = target_proj
    pred_term = float(np.linalg.norm(pred.vector - target))
    reg_u = params.lambda_student * float(np.linalg.norm(np.asarray(u_new) - np.asarray(u_prev)))
    reg_p = params.lambda_thread * float(np.linalg.norm(np.asarray(p_new) - np.asarray(p_prev)))
    return pred_term + reg_u + reg_p


# ---------------------------------------------------------------------------
# per-event training graph


@dataclass
class EventInputs:
    """Everything the per-event loss needs besides the parameters. State
    vectors are the values entering the current batch and are treated as
    constants by the backward pass."""
    student: int
    target_thread: int
    last_thread: int | None          # thread of the student's previous post
    student_vec: np.ndarray          # stored student embedding
    target_thread_vec: np.ndarray    # stored embedding of the target thread
    last_thread_vec: np.ndarray      # stored embedding of last_thread, zeros if none
    theta: np.ndarray                # topic distribution of the current post
    delta_student: float             # normalized time since student's last post
    delta_thread: float              # normalized time since last post on target thread
    delta_proj: float                # normalized projection horizon
    week: int                        # course week context for the projection
    excitation_value: float


def _event_forward(ev: EventInputs, params: ModelParams, flags: AblationFlags):
    if flags.no_student_projection:
        u_hat, gain = ev.student_vec, None
    else:
        u_hat, gain = _project_student_kernel(ev.student_vec, ev.delta_proj, ev.week, params)

    q = _predict_kernel(u_hat, ev.student, ev.last_thread_vec, ev.last_thread, params)

    if flags.no_thread_projection:
        p_hat = ev.target_thread_vec
    else:
        p_hat = project_thread(ev.student_vec, ev.target_thread_vec, ev.excitation_value)

    n = params.num_threads
    target = np.zeros(n + params.embed_dim)
    target[ev.target_thread] = 1.0
    target[n:] = p_hat

    theta_eff = np.zeros(params.num_topics) if flags.no_text_features else ev.theta
    u_new, p_new, xu, xp = _update_kernel(
        ev.student_vec, ev.target_thread_vec, theta_eff,
        ev.delta_student, ev.delta_thread, params,
    )
    if flags.no_dynamic_student:
        u_new = ev.student_vec
    if flags.no_dynamic_thread:
        p_new = ev.target_thread_vec

    residual = q - target
    pred_term, _ = _norm_grad(residual)
    du = u_new - ev.student_vec
    dp = p_new - ev.target_thread_vec
    reg_u = params.lambda_student * float(np.linalg.norm(du))
    reg_p = params.lambda_thread * float(np.linalg.norm(dp))
    total = pred_term + reg_u + reg_p
    return total, (u_hat, q, residual, u_new, p_new, xu, xp, du, dp)


def event_loss(ev: EventInputs, params: ModelParams,
               flags: AblationFlags = AblationFlags()) -> float:
    return _event_forward(ev, params, flags)[0]


def event_state_updates(ev: EventInputs, params: ModelParams,
                        flags: AblationFlags = AblationFlags()):
    """New (student, thread) embeddings the event writes back."""
    _, inter = _event_forward(ev, params, flags)
    return inter[3], inter[4]


def event_grads(ev: EventInputs, params: ModelParams,
                flags: AblationFlags = AblationFlags()):
    """Loss, parameter gradients, and the new state pair for one event.

    The backward pass is hand derived. State vectors entering the event are
    constants, so the prediction term reaches only the projection context
    and the prediction head, while the smoothness terms reach the two
    update matrices."""
    total, inter = _event_forward(ev, params, flags)
    u_hat, q, residual, u_new, p_new, xu, xp, du, dp = inter
    grads = params.zero_grads()
    d, m = params.embed_dim, params.num_students

    _, g_q = _norm_grad(residual)
    grads["predictor_bias"] += g_q
    Wg = grads["predictor"]
    Wg[:d] += np.outer(u_hat, g_q)
    Wg[d + ev.student] += g_q
    Wg[d + m : 2 * d + m] += np.outer(ev.last_thread_vec, g_q)
    if ev.last_thread is not None:
        Wg[2 * d + m + ev.last_thread] += g_q

    if not flags.no_student_projection:
        g_uhat = params.predictor[:d] @ g_q
        g_gain = g_uhat * ev.student_vec
        grads["time_context"][:, 0] += g_gain * ev.delta_proj
        grads["week_context"][:, ev.week] += g_gain

    if not flags.no_dynamic_student:
        norm_du, g_du = _norm_grad(du)
        if norm_du > 0.0:
            g_pre = params.lambda_student * g_du * _act_deriv(u_new, params.activation)
            grads["student_update"] += np.outer(xu, g_pre)

    if not flags.no_dynamic_thread:
        norm_dp, g_dp = _norm_grad(dp)
        if norm_dp > 0.0:
            g_pre = params.lambda_thread * g_dp * _act_deriv(p_new, params.activation)
            grads["thread_update"] += np.outer(xp, g_pre)

    return total, grads, (u_new, p_new)


# ---------------------------------------------------------------------------
# replay state


class DynamicStateStore:
    """Dense dynamic state for every student and thread during replay, plus
    the per-student context needed to rank later: last post time, topic of
    the last post, and the thread it was on."""

    def __init__(self, num_students, num_threads, embed_dim, num_topics, time_scale=1.0):
        self.student_vecs = np.zeros((num_students, embed_dim))
        self.thread_vecs = np.zeros((num_threads, embed_dim))
        self.student_last_t = np.zeros(num_students)
        self.thread_last_t = np.zeros(num_threads)
        self.student_seen = np.zeros(num_students, dtype=bool)
        self.thread_seen = np.zeros(num_threads, dtype=bool)
        self.student_last_theta = np.zeros((num_students, num_topics))
        self.student_last_thread = np.full(num_students, -1, dtype=np.int64)
        self.time_scale = float(time_scale)

    @property
    def num_students(self):
        return self.student_vecs.shape[0]

    @property
    def num_threads(self):
        return self.thread_vecs.shape[0]

    def student_state(self, s: int) -> DynamicState:
        last = float(self.student_last_t[s]) if self.student_seen[s] else None
        return DynamicState(self.student_vecs[s].copy(), last)

    def thread_state(self, p: int) -> DynamicState:
        last = float(self.thread_last_t[p]) if self.thread_seen[p] else None
        return DynamicState(self.thread_vecs[p].copy(), last)


# ---------------------------------------------------------------------------
# checkpoint container

_CKPT_MAGIC = "threadrec checkpoint v1"

_STORE_ARRAYS = (
    ("student_vecs", np.float64),
    ("thread_vecs", np.float64),
    ("student_last_t", np.float64),
    ("thread_last_t", np.float64),
    ("student_seen", np.bool_),
    ("thread_seen", np.bool_),
    ("student_last_theta", np.float64),
    ("student_last_thread", np.int64),
)


def save_checkpoint(path, params: ModelParams, store: DynamicStateStore,
                    week_topics: Sequence[TopicDistribution], meta: dict) -> None:
    """Write a self-contained checkpoint: parameters, final replay state,
    course week topics, and a JSON metadata block. The layout is a magic
    line, a JSON header describing the arrays, then raw little-endian array
    bytes in header order. Writing is byte-deterministic."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name in TENSOR_NAMES:
        arrays.append(("params." + name, params.tensor(name)))
    for name, dtype in _STORE_ARRAYS:
        arrays.append(("store." + name, np.asarray(getattr(store, name), dtype=dtype)))
    arrays.append(("week_topics", np.stack([t.probs for t in week_topics])))

    header = {
        "arrays": [
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
            for name, arr in arrays
        ],
        "scalars": {
            "embed_dim": params.embed_dim,
            "num_topics": params.num_topics,
            "num_weeks": params.num_weeks,
            "num_students": params.num_students,
            "num_threads": params.num_threads,
            "post_decay": params.post_decay,
            "reply_decay": params.reply_decay,
            "lambda_student": params.lambda_student,
            "lambda_thread": params.lambda_thread,
            "activation": params.activation,
            "time_scale": store.time_scale,
        },
        "meta": meta,
    }
    with open(path, "wb") as fh:
        fh.write((_CKPT_MAGIC + "\n").encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint. Returns (params, store, week_topics, meta)."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode().strip()
        if magic != _CKPT_MAGIC:
            raise ValueError("%s is not a checkpoint file" % path)
        header = json.loads(fh.readline().decode())
        data = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ValueError("checkpoint truncated at array %s" % spec["name"])
            data[spec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(spec["shape"]).copy()
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")

    sc = header["scalars"]
    params = ModelParams(
        *(data["params." + name] for name in TENSOR_NAMES),
        post_decay=sc["post_decay"], reply_decay=sc["reply_decay"],
        lambda_student=sc["lambda_student"], lambda_thread=sc["lambda_thread"],
        embed_dim=sc["embed_dim"], num_topics=sc["num_topics"],
        num_weeks=sc["num_weeks"], num_students=sc["num_students"],
        num_threads=sc["num_threads"], activation=sc["activation"],
    )
    store = DynamicStateStore(sc["num_students"], sc["num_threads"],
                              sc["embed_dim"], sc["num_topics"], sc["time_scale"])
    for name, dtype in _STORE_ARRAYS:
        setattr(store, name, data["store." + name].astype(dtype))
    week_topics = [TopicDistribution(row) for row in data["week_topics"]]
    return params, store, week_topics, header["meta"]
