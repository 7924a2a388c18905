import json

import numpy as np
import pytest

from threadrec import synth
from threadrec.corpus import validate_dataset
from threadrec.synth import SynthConfig, algo_like, generate, stable_vocabulary
from threadrec.text import preprocess


def small_config(**overrides):
    base = dict(num_students=12, num_threads=8, num_weeks=3, num_topics=3,
                vocab_size=40, mean_posts_per_student=4, seed=5)
    base.update(overrides)
    return SynthConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(num_students=0)
    with pytest.raises(ValueError):
        small_config(drift_strength=1.5)
    with pytest.raises(ValueError):
        small_config(reply_prob=-0.1)
    with pytest.raises(ValueError):
        small_config(vocab_size=2)  # fewer words than topics
    with pytest.raises(ValueError):
        algo_like(scale=0.0)


def test_algo_like_preset_scales():
    cfg = algo_like(scale=0.1)
    assert cfg.num_students == 183
    assert cfg.num_threads == 132
    assert cfg.num_weeks == 9
    assert cfg.num_topics == 9
    assert cfg.mean_posts_per_student == 5


def test_stable_vocabulary_words_survive_preprocessing():
    words = stable_vocabulary(50)
    assert len(words) == len(set(words)) == 50
    for w in words:
        assert preprocess(w) == [w]


def test_generate_is_deterministic():
    a, _ = generate(small_config())
    b, _ = generate(small_config())
    assert a.events == b.events
    assert a.course.week_docs == b.course.week_docs


def test_generate_passes_validation_and_shapes():
    cfg = small_config()
    ds, gt = generate(cfg)
    validate_dataset(ds)
    assert ds.num_students == cfg.num_students
    assert ds.num_threads == cfg.num_threads
    assert ds.course.num_weeks == cfg.num_weeks
    assert gt.student_interests.shape == (12, 3, 3)
    assert gt.thread_mixtures.shape == (8, 3)
    assert gt.topic_words.shape == (3, 40)
    assert np.allclose(gt.student_interests.sum(axis=2), 1.0)
    assert np.allclose(gt.thread_mixtures.sum(axis=1), 1.0)


def test_generate_text_round_trips_through_preprocess():
    ds, _ = generate(small_config())
    for ev in ds.events[:20]:
        assert preprocess(" ".join(ev.tokens)) == ev.tokens
    for doc in ds.course.week_docs:
        assert preprocess(" ".join(doc)) == doc


def test_generate_post_ids_follow_time_order():
    ds, _ = generate(small_config())
    ids = [ev.post_id for ev in ds.events]
    assert ids == list(range(len(ds.events)))
    times = [ev.timestamp for ev in ds.events]
    assert times == sorted(times)


def test_reply_probability_extremes():
    ds_none, _ = generate(small_config(reply_prob=0.0))
    assert all(ev.parent_post_id is None for ev in ds_none.events)

    ds_all, _ = generate(small_config(reply_prob=1.0, revisit_boost=20.0))
    seen_threads = set()
    for ev in ds_all.events:
        if ev.thread_id in seen_threads:
            assert ev.parent_post_id is not None
        seen_threads.add(ev.thread_id)


def test_parents_reference_earlier_same_thread_posts():
    ds, _ = generate(small_config(reply_prob=0.8))
    by_id = {ev.post_id: ev for ev in ds.events}
    replies = [ev for ev in ds.events if ev.parent_post_id is not None]
    assert replies, "expected some replies at reply_prob=0.8"
    for ev in replies:
        parent = by_id[ev.parent_post_id]
        assert parent.thread_id == ev.thread_id
        assert parent.timestamp < ev.timestamp


def test_revisit_boost_concentrates_posts():
    def revisit_fraction(boost):
        ds, _ = generate(small_config(revisit_boost=boost,
                                      mean_posts_per_student=8, seed=11))
        seen = set()
        repeats = 0
        for ev in ds.events:
            key = (ev.student_id, ev.thread_id)
            if key in seen:
                repeats += 1
            seen.add(key)
        return repeats / len(ds.events)

    assert revisit_fraction(25.0) > revisit_fraction(0.0) + 0.1


def test_drift_pulls_interests_toward_schedule():
    cfg = small_config(drift_strength=0.9)
    _, gt = generate(cfg)
    # by the last week interests should be dominated by that week's topic
    last_week_topic = (cfg.num_weeks - 1) % cfg.num_topics
    dominant = np.argmax(gt.student_interests[:, -1, :], axis=1)
    assert (dominant == last_week_topic).mean() > 0.9


def test_write_ground_truth(tmp_path):
    _, gt = generate(small_config())
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    synth.write_ground_truth(gt, a)
    synth.write_ground_truth(gt, b)
    assert a.read_bytes() == b.read_bytes()
    payload = json.loads(a.read_text())
    assert set(payload) == {"student_interests", "thread_mixtures",
                            "topic_words", "vocab_words"}
    assert len(payload["vocab_words"]) == 40
