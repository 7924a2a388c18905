import numpy as np
import pytest

from threadrec.corpus import CourseSchedule, Dataset, PostEvent
from threadrec.model import ModelParams

WEEK = 604800.0


def make_event(post_id, student, thread, t, tokens=None, parent=None):
    return PostEvent(post_id, student, thread, t, tokens or ["zqaaa", "zqaab"], parent)


@pytest.fixture
def course2():
    docs = [["zqaaa", "zqaab", "zqaaa"], ["zqaac", "zqaad", "zqaac"]]
    return CourseSchedule(docs, [0.0, WEEK])


@pytest.fixture
def tiny_ds(course2):
    # three students, four threads, two weeks; student 0 revisits thread 0
    events = [
        make_event(0, 0, 0, 100.0),
        make_event(1, 1, 0, 200.0),
        make_event(2, 1, 1, 300.0, parent=None),
        make_event(3, 2, 0, 400.0, parent=0),
        make_event(4, 0, 0, WEEK + 100.0),
        make_event(5, 0, 2, WEEK + 500.0),
        make_event(6, 2, 3, WEEK + 900.0),
    ]
    return Dataset(events, 3, 4, course2, [0, 1, 2], [0, 1, 2, 3])


@pytest.fixture
def small_params():
    rng = np.random.default_rng(3)
    return ModelParams.init(rng, embed_dim=3, num_topics=2, num_weeks=2,
                            num_students=3, num_threads=4)
