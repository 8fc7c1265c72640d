import inspect
from collections.abc import Mapping

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waferlatent import data as wd
from waferlatent.classifier import NetworkConfig, TrainConfig, build_network, mean_loss, predict, train_supervised
from waferlatent.errors import InvalidArgumentError
from waferlatent.semisup import (PipelineConfig, PseudoLabel, build_student_set, fine_tune, run_pipeline,
                                 score_unlabeled, select_topk, train_student)
from waferlatent.vae import VaeConfig, VaeTrainConfig, pretrain_vae

SMALL_NET = NetworkConfig(image_size=15, stem_kernel=3, stem_stride=1, stem_channels=4,
                          block_counts=(1, 1, 1, 1), widths=(4, 8, 8, 8), latent_dim=4)
SMALL_VAE = VaeConfig(image_size=15, latent_dim=4, channels=(4, 8))


def small_pipeline(seed=0, **kw):
    return PipelineConfig(
        confidence_threshold=kw.pop("threshold", 0.3), top_k=kw.pop("top_k", 4),
        teacher=SMALL_NET, student=SMALL_NET.with_fusion("after_stage2"),
        train=TrainConfig(epochs=kw.pop("epochs", 3), batch_size=16, seed=seed),
        fine_tune_epochs=kw.pop("fine_tune_epochs", 1),
        vae_model=SMALL_VAE, vae_train=VaeTrainConfig(epochs=1, batch_size=32, seed=seed), seed=seed, **kw)


@pytest.fixture(scope="module")
def corpus():
    maps = wd.generate_dataset(270, size=15, noise_rate=0.02, seed=9)
    return wd.split(maps, (0.3, 0.5, 0.2), rng_seed=1)


@pytest.fixture(scope="module")
def small_vae(corpus):
    vae, _ = pretrain_vae(corpus.labeled + corpus.unlabeled, VaeTrainConfig(epochs=2, seed=0), SMALL_VAE)
    return vae


@pytest.fixture(scope="module")
def teacher(corpus):
    net, _ = train_supervised(build_network(SMALL_NET, 0), None, corpus.labeled,
                              TrainConfig(epochs=4, batch_size=16))
    return net


# ---------------------------------------------------------------------------
# select_topk


def brute_force_topk(pseudo, k, threshold):
    out = []
    for c in range(9):
        keep = [p for p in pseudo if p.predicted_class == c and p.confidence >= threshold]
        keep.sort(key=lambda p: p.example_id)
        keep.sort(key=lambda p: p.confidence, reverse=True)  # stable: ids stay ascending within ties
        out += keep[:k]
    return out


def random_pseudo(rng, n, tie_rate=0.3):
    confs = rng.uniform(0.8, 1.0, n)
    ties = rng.random(n) < tie_rate
    confs[ties] = rng.choice([0.9, 0.95, 1.0], ties.sum())
    return [PseudoLabel(f"u{int(i):04d}", int(rng.integers(0, 9)), float(c))
            for i, c in zip(rng.permutation(n), confs)]


def test_all_below_threshold_selects_nothing():
    pseudo = [PseudoLabel(f"x{i}", i % 9, 0.5) for i in range(20)]
    assert select_topk(pseudo, 5, 0.9) == []


def test_k_larger_than_supply_keeps_everything():
    pseudo = [PseudoLabel(i, 4, c) for i, c in (("a", 0.91), ("b", 0.99), ("c", 0.95))]
    assert [p.example_id for p in select_topk(pseudo, 10, 0.9)] == ["b", "c", "a"]


@pytest.mark.parametrize("seed", range(20))
def test_topk_matches_brute_force(seed):
    pseudo = random_pseudo(np.random.default_rng(seed), 50)
    assert select_topk(pseudo, 5, 0.9) == brute_force_topk(pseudo, 5, 0.9)


def test_ties_break_by_ascending_id():
    pseudo = [PseudoLabel(i, 0, 0.95) for i in ("d", "b", "c", "a")]
    assert [p.example_id for p in select_topk(pseudo, 2, 0.9)] == ["a", "b"]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 12), st.floats(0.05, 0.99))
def test_topk_idempotent(seed, k, threshold):
    pseudo = random_pseudo(np.random.default_rng(seed), 60)
    once = select_topk(pseudo, k, threshold)
    assert select_topk(once, k, threshold) == once


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 12), st.floats(0.05, 0.98), st.floats(0.0, 0.5))
def test_raising_threshold_never_adds(seed, k, low, step):
    pseudo = random_pseudo(np.random.default_rng(seed), 60)
    high = min(low + step, 0.999)
    assert len(select_topk(pseudo, k, high)) <= len(select_topk(pseudo, k, low))


def test_topk_argument_errors():
    with pytest.raises(InvalidArgumentError):
        select_topk([], 0, 0.9)
    with pytest.raises(InvalidArgumentError):
        select_topk([], 3, 1.0)


# ---------------------------------------------------------------------------
# scoring and student set


def test_score_unlabeled_contract(teacher, corpus):
    scored = score_unlabeled(teacher, None, corpus.unlabeled)
    assert len(scored) == len(corpus.unlabeled)
    assert [p.example_id for p in scored] == [m.id for m in corpus.unlabeled]
    assert all(1 / 9 <= p.confidence <= 1 for p in scored)
    for p, m in list(zip(scored, corpus.unlabeled))[:25]:
        c, conf = predict(teacher, None, m)
        assert p.predicted_class == c and abs(p.confidence - conf) < 1e-12
    assert score_unlabeled(teacher, None, corpus.unlabeled) == scored


def test_score_unlabeled_errors(corpus):
    with pytest.raises(InvalidArgumentError):
        score_unlabeled(build_network(SMALL_NET), None, corpus.unlabeled)
    net = build_network(SMALL_NET)
    net.trained = True
    with pytest.raises(InvalidArgumentError):
        score_unlabeled(net, None, [])


def test_student_set_contract(corpus):
    pool = corpus.unlabeled
    assert [e.wafer for e in build_student_set(corpus.labeled, [], pool)] == corpus.labeled
    selected = [PseudoLabel(pool[i].id, (i * 5) % 9, 0.97) for i in range(0, 30, 3)]
    out = build_student_set(corpus.labeled, selected, pool)
    assert len(out) == len(corpus.labeled) + len(selected)
    assert len({e.wafer.id for e in out}) == len(out)
    pseudo = [e for e in out if e.pseudo]
    assert [e.wafer.id for e in pseudo] == [p.example_id for p in selected]
    assert all(e.wafer.label == p.predicted_class for e, p in zip(pseudo, selected))
    assert not any(e.pseudo for e in out[:len(corpus.labeled)])


def test_student_set_rejects_unknown_or_duplicate_ids(corpus):
    with pytest.raises(InvalidArgumentError, match="unknown"):
        build_student_set(corpus.labeled, [PseudoLabel("nope", 0, 0.99)], corpus.unlabeled)
    dup = PseudoLabel(corpus.unlabeled[0].id, 0, 0.99)
    with pytest.raises(InvalidArgumentError):
        build_student_set(corpus.labeled, [dup, dup], corpus.unlabeled)


# ---------------------------------------------------------------------------
# student and fine-tuning


def test_student_without_pseudo_labels_equals_supervised_fusion(corpus, small_vae):
    cfg = SMALL_NET.with_fusion("after_stage2")
    train = TrainConfig(epochs=2, batch_size=16, seed=4)
    student, h1 = train_student(cfg, small_vae, build_student_set(corpus.labeled, [], corpus.unlabeled),
                                train, rng_seed=7)
    direct, h2 = train_supervised(build_network(cfg, 7), small_vae, corpus.labeled, train)
    assert h1 == h2
    for a, b in zip(student.state_dict().values(), direct.state_dict().values()):
        assert a.tobytes() == b.tobytes()


def test_fine_tune_zero_epochs_returns_unchanged_copy(teacher, corpus):
    tuned, history = fine_tune(teacher, None, corpus.labeled, 0)
    assert history == []
    for a, b in zip(teacher.state_dict().values(), tuned.state_dict().values()):
        assert a.tobytes() == b.tobytes()


def test_fine_tune_uses_fresh_optimizer_and_leaves_input(teacher, corpus):
    before = {k: v.copy() for k, v in teacher.state_dict().items()}
    cfg = TrainConfig(epochs=4, batch_size=16)
    tuned, _ = fine_tune(teacher, None, corpus.labeled, 2, cfg, lr_factor=0.1)
    steps = 2 * -(-len(corpus.labeled) // 16)
    assert tuned.optimizer_state.step_count == steps
    assert tuned.optimizer_state.lr == pytest.approx(0.0002)
    for k, v in teacher.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    with pytest.raises(InvalidArgumentError):
        fine_tune(teacher, None, [], 1)


def test_fine_tune_lowers_labeled_loss_on_most_seeds(corpus, small_vae):
    wins = 0
    for seed in range(3):
        cfg = SMALL_NET.with_fusion("after_stage2")
        student, _ = train_supervised(build_network(cfg, seed), small_vae, corpus.labeled + corpus.test,
                                      TrainConfig(epochs=3, batch_size=16, seed=seed))
        before = mean_loss(student, small_vae, corpus.labeled)
        tuned, _ = fine_tune(student, small_vae, corpus.labeled, 2, TrainConfig(batch_size=16, seed=seed))
        wins += mean_loss(tuned, small_vae, corpus.labeled) <= before
    assert wins >= 2


# ---------------------------------------------------------------------------
# full round


class AccessLog(Mapping):
    """Read-only mapping that records which functions touched it."""

    def __init__(self, data):
        self._data = dict(data)
        self.callers = set()

    def _note(self):
        for frame in inspect.stack()[1:]:
            if frame.filename != __file__ and not frame.filename.endswith("_collections_abc.py"):
                self.callers.add(frame.function)
                return

    def __getitem__(self, key):
        self._note()
        return self._data[key]

    def __iter__(self):
        self._note()
        return iter(self._data)

    def __len__(self):
        return len(self._data)


def test_pipeline_report_and_label_separation(corpus, small_vae):
    split = wd.DatasetSplit(list(corpus.labeled), list(corpus.unlabeled), list(corpus.test), corpus.seed,
                            AccessLog(corpus._hidden_labels))
    result = run_pipeline(small_pipeline(seed=2), split, small_vae)
    report = result.report
    stats = report["pseudo_labels"]
    assert all(n <= 4 for n in stats["selected_per_class"])
    assert sum(stats["selected_per_class"]) == stats["selected"] == len(result.selected)
    assert stats["accuracy_selected"] is None or 0.0 <= stats["accuracy_selected"] <= 1.0
    assert report["seed"] == 2 and report["config"]["top_k"] == 4
    assert list(report)[:6] == ["seed", "config", "sizes", "teacher", "student", "pseudo_labels"]
    assert split._hidden_labels.callers <= {"hidden_labels"}
    assert split._hidden_labels.callers  # the report generator did read them


def test_hidden_labels_do_not_influence_training(corpus, small_vae):
    ids = list(corpus._hidden_labels)
    scrambled = dict(zip(ids, np.random.default_rng(0).permutation([corpus._hidden_labels[i] for i in ids])))
    runs = []
    for hidden in (corpus._hidden_labels, scrambled):
        split = wd.DatasetSplit(list(corpus.labeled), list(corpus.unlabeled), list(corpus.test), 1, dict(hidden))
        runs.append(run_pipeline(small_pipeline(seed=3), split, small_vae))
    for model in ("teacher", "student"):
        a, b = getattr(runs[0], model).state_dict(), getattr(runs[1], model).state_dict()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_pipeline_config_validation():
    with pytest.raises(InvalidArgumentError):
        PipelineConfig(confidence_threshold=0.1)
    with pytest.raises(InvalidArgumentError):
        PipelineConfig(confidence_threshold=1.0)
    with pytest.raises(InvalidArgumentError):
        PipelineConfig(top_k=0)
    assert PipelineConfig().confidence_threshold == 0.9
