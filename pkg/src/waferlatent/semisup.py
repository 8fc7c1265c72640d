"""Teacher-student pseudo-labeling with VAE latent fusion.

One round, four steps:

1. train a teacher on the labeled maps;
2. let it label the unlabeled pool and keep, per predicted class, the ``top_k``
   most confident predictions at or above ``confidence_threshold``;
3. train a fresh student (latent-fused) on labeled + selected maps;
4. fine-tune the student on the labeled maps alone at a reduced rate.

The teacher is frozen after step 1. True labels of the unlabeled pool never
reach a training function; only :func:`pseudo_label_stats` reads them, for the
report.
"""

from __future__ import annotations

import logging
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .classifier import (NetworkConfig, ResidualClassifier, TrainConfig, build_network, predict_batch,
                         train_supervised)
from .data import NUM_CLASSES, DatasetSplit, WaferMap
from .errors import InvalidArgumentError
from .metrics import MetricsReport, evaluate, hidden_labels
from .vae import VaeConfig, VaeModel, VaeTrainConfig, pretrain_vae

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PseudoLabel:
    example_id: str
    predicted_class: int
    confidence: float


class StudentExample(NamedTuple):
    wafer: WaferMap
    pseudo: bool


@dataclass(frozen=True)
class PipelineConfig:
    confidence_threshold: float = 0.9
    top_k: int = 50
    teacher: NetworkConfig = NetworkConfig()
    student: NetworkConfig = NetworkConfig(fusion_point="after_stage2")
    train: TrainConfig = TrainConfig()
    fine_tune_epochs: int = 5
    fine_tune_lr_factor: float = 0.1
    vae_model: VaeConfig = VaeConfig()
    vae_train: VaeTrainConfig = VaeTrainConfig(epochs=10)
    seed: int = 0

    def __post_init__(self):
        if not 1.0 / NUM_CLASSES < self.confidence_threshold < 1.0:
            raise InvalidArgumentError(
                f"confidence_threshold must lie in (1/9, 1), got {self.confidence_threshold}")
        if self.top_k < 1:
            raise InvalidArgumentError("top_k must be at least 1")
        if self.fine_tune_epochs < 0 or not 0 < self.fine_tune_lr_factor <= 1:
            raise InvalidArgumentError("invalid fine-tuning settings")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# steps


def score_unlabeled(teacher: ResidualClassifier, vae: Optional[VaeModel],
                    unlabeled: Sequence[WaferMap]) -> list[PseudoLabel]:
    if not unlabeled:
        raise InvalidArgumentError("score_unlabeled: empty unlabeled set")
    if not getattr(teacher, "trained", False):
        raise InvalidArgumentError("score_unlabeled: teacher has not been trained")
    classes, conf = predict_batch(teacher, vae, unlabeled)
    return [PseudoLabel(m.id, int(c), float(p)) for m, c, p in zip(unlabeled, classes, conf)]


def select_topk(pseudo: Sequence[PseudoLabel], k: int, threshold: float) -> list[PseudoLabel]:
    """Per predicted class: keep confidence >= threshold, best first (ties by id), first k.

    Classes are emitted in ascending order.
    """
    if k < 1:
        raise InvalidArgumentError("k must be at least 1")
    if not 0.0 < threshold < 1.0:
        raise InvalidArgumentError(f"threshold must lie in (0, 1), got {threshold}")
    by_class: dict[int, list[PseudoLabel]] = defaultdict(list)
    for p in pseudo:
        if p.confidence >= threshold:
            by_class[p.predicted_class].append(p)
    out: list[PseudoLabel] = []
    for c in sorted(by_class):
        ranked = sorted(by_class[c], key=lambda p: (-p.confidence, p.example_id))
        out.extend(ranked[:k])
    return out


def build_student_set(labeled: Sequence[WaferMap], selected: Sequence[PseudoLabel],
                      pool: Sequence[WaferMap]) -> list[StudentExample]:
    """Labeled maps (in order) followed by the selected pool maps under their pseudo-labels."""
    by_id = {m.id: m for m in pool}
    labeled_ids = {m.id for m in labeled}
    out = [StudentExample(m, False) for m in labeled]
    seen: set[str] = set()
    for p in selected:
        if p.example_id not in by_id:
            raise InvalidArgumentError(f"pseudo-label refers to unknown id {p.example_id!r}")
        if p.example_id in labeled_ids or p.example_id in seen:
            raise InvalidArgumentError(f"id {p.example_id!r} would appear twice in the student set")
        seen.add(p.example_id)
        out.append(StudentExample(by_id[p.example_id].with_label(p.predicted_class), True))
    return out


def train_student(student_config: NetworkConfig, vae: Optional[VaeModel],
                  student_set: Sequence[StudentExample], config: TrainConfig = TrainConfig(),
                  rng_seed: int = 0) -> tuple[ResidualClassifier, list[dict]]:
    if student_config.fusion_point == "none":
        log.info("training a student without latent fusion")
    student = build_network(student_config, rng_seed)
    return train_supervised(student, vae, [e.wafer for e in student_set], config)


def fine_tune(student: ResidualClassifier, vae: Optional[VaeModel], labeled: Sequence[WaferMap],
              fine_tune_epochs: int, config: TrainConfig = TrainConfig(),
              lr_factor: float = 0.1) -> tuple[ResidualClassifier, list[dict]]:
    """Continue training a copy of ``student`` on true labels only.

    Uses a fresh Adam state at ``config.lr * lr_factor`` with a constant rate.
    """
    if not labeled:
        raise InvalidArgumentError("fine_tune: empty labeled set")
    tuned = student.clone()
    if fine_tune_epochs == 0:
        return tuned, []
    cfg = replace(config, epochs=fine_tune_epochs, lr=config.lr * lr_factor, schedule="constant",
                  seed=config.seed + 7919)
    return train_supervised(tuned, vae, labeled, cfg)


# ---------------------------------------------------------------------------
# the whole round


@dataclass
class PipelineResult:
    teacher: ResidualClassifier
    student: ResidualClassifier
    vae: Optional[VaeModel]
    teacher_metrics: MetricsReport
    student_metrics: MetricsReport
    pseudo_labels: list[PseudoLabel]
    selected: list[PseudoLabel]
    report: "OrderedDict[str, object]" = field(default_factory=OrderedDict)


def pseudo_label_stats(selected: Sequence[PseudoLabel], scored: Sequence[PseudoLabel],
                       split: DatasetSplit, top_k: int) -> "OrderedDict[str, object]":
    truth = hidden_labels(split)
    per_class = [0] * NUM_CLASSES
    for p in selected:
        per_class[p.predicted_class] += 1

    def accuracy(items):
        known = [p for p in items if p.example_id in truth]
        if not known:
            return None
        return sum(truth[p.example_id] == p.predicted_class for p in known) / len(known)

    return OrderedDict([
        ("scored", len(scored)),
        ("selected", len(selected)),
        ("top_k", top_k),
        ("selected_per_class", per_class),
        ("accuracy_selected", accuracy(selected)),
        ("accuracy_all_scored", accuracy(scored)),
    ])


def run_pipeline(config: PipelineConfig, data: DatasetSplit,
                 vae: Optional[VaeModel] = None) -> PipelineResult:
    """Teacher -> pseudo-labels -> student -> fine-tune, then score both models on the test maps.

    A VAE is pretrained on labeled + unlabeled maps when one is needed and
    not supplied.
    """
    seed = config.seed
    needs_vae = config.teacher.fusion_point != "none" or config.student.fusion_point != "none"
    if needs_vae and vae is None:
        pool = list(data.labeled) + list(data.unlabeled)
        vae_cfg = replace(config.vae_model, image_size=pool[0].shape[0])
        vae, _ = pretrain_vae(pool, replace(config.vae_train, seed=seed), vae_cfg)
    train_cfg = replace(config.train, seed=seed)
    teacher_vae = vae if config.teacher.fusion_point != "none" else None
    student_vae = vae if config.student.fusion_point != "none" else None

    log.info("seed %d: training teacher on %d labeled maps", seed, len(data.labeled))
    teacher, teacher_hist = train_supervised(build_network(config.teacher, seed), teacher_vae,
                                             data.labeled, train_cfg)
    frozen = teacher.state_dict()

    scored = score_unlabeled(teacher, teacher_vae, data.unlabeled)
    selected = select_topk(scored, config.top_k, config.confidence_threshold)
    log.info("seed %d: selected %d of %d pseudo-labels", seed, len(selected), len(scored))

    student_set = build_student_set(data.labeled, selected, data.unlabeled)
    student, student_hist = train_student(config.student, student_vae, student_set, train_cfg,
                                          rng_seed=seed + 1)
    final, ft_hist = fine_tune(student, student_vae, data.labeled, config.fine_tune_epochs, train_cfg,
                               config.fine_tune_lr_factor)

    for name, arr in teacher.state_dict().items():
        if not np.array_equal(arr, frozen[name]):
            raise RuntimeError(f"teacher parameter {name} changed after teacher training")

    teacher_metrics = evaluate(teacher, teacher_vae, data.test)
    student_metrics = evaluate(final, student_vae, data.test)
    report = OrderedDict([
        ("seed", seed),
        ("config", config.to_dict()),
        ("sizes", OrderedDict([("labeled", len(data.labeled)), ("unlabeled", len(data.unlabeled)),
                               ("test", len(data.test)), ("student_set", len(student_set))])),
        ("teacher", teacher_metrics.to_dict()),
        ("student", student_metrics.to_dict()),
        ("pseudo_labels", pseudo_label_stats(selected, scored, data, config.top_k)),
        ("training", OrderedDict([
            ("teacher_final", teacher_hist[-1] if teacher_hist else None),
            ("student_final", student_hist[-1] if student_hist else None),
            ("fine_tune_final", ft_hist[-1] if ft_hist else None),
        ])),
    ])
    return PipelineResult(teacher, final, vae, teacher_metrics, student_metrics, scored, selected, report)
