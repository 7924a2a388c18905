"""Dynamic thread recommendation for course discussion forums.

Students and threads carry evolving embeddings that update together at
every post, conditioned on the post's topic mixture and the time elapsed
since each side was last active. Rankings come from projecting a student
forward to the query time and scoring candidate threads by distance to a
jointly predicted thread state.
"""

from .corpus import (CourseSchedule, Dataset, EmptyDatasetError, IntegrityError,
                     ParseError, PostEvent, SplitSpec, ingest_jsonl,
                     load_schedule, reply_history, split_by_time,
                     validate_dataset)
from .model import (AblationFlags, DynamicStateStore, ModelParams,
                    excitation, load_checkpoint, predict_next, project_student,
                    project_thread, save_checkpoint, update)
from .recommend import (EvalReport, average_precision, baseline_pop,
                        baseline_rec, baseline_user_rec, build_model_ranker,
                        evaluate, rank_threads)
from .synth import GroundTruth, SynthConfig, algo_like, generate
from .text import (LdaModel, TopicDistribution, Vocabulary, build_vocabulary,
                   course_topics, lda_fit, lda_infer, preprocess,
                   term_frequency)
from .train import TrainConfig, fit, gradient_check, grid_search, t_batch

__version__ = "0.1.0"

__all__ = [
    "AblationFlags", "CourseSchedule", "Dataset", "DynamicStateStore",
    "EmptyDatasetError", "EvalReport", "GroundTruth", "IntegrityError",
    "LdaModel", "ModelParams", "ParseError", "PostEvent", "SplitSpec",
    "SynthConfig", "TopicDistribution", "TrainConfig", "Vocabulary",
    "algo_like", "average_precision", "baseline_pop", "baseline_rec",
    "baseline_user_rec", "build_model_ranker", "build_vocabulary",
    "course_topics", "evaluate", "excitation", "fit", "generate",
    "gradient_check", "grid_search", "ingest_jsonl", "lda_fit", "lda_infer",
    "load_checkpoint", "load_schedule", "predict_next", "preprocess",
    "project_student", "project_thread", "rank_threads", "reply_history",
    "save_checkpoint", "split_by_time", "t_batch", "term_frequency", "update",
    "validate_dataset", "__version__",
]
