"""End-to-end experiment plumbing shared by the CLI and the acceptance suite.

Order of operations: split planning on the masks, box filtering of each
referenced cube, pixel gathering, representation fitting on the training
split, training, evaluation.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .dataset import SplitPlan, build_splits, collect_samples, default_class_map
from .errors import DataError
from .evaluation import EvalReport, evaluate
from .hscube import AnnotationSet, HsCube
from .mlp import Checkpoint, TrainConfig, TrainResult, build_model, predict_proba, train
from .preprocess import SampleSet, box_filter
from .transforms import PCA_COMPONENTS, FeatureTransform, Mode, fit_transform, transform_dataset

__all__ = ["ExperimentResult", "prepare_samples", "run_experiment", "evaluate_checkpoint"]

log = logging.getLogger(__name__)


def _filtered_loader(load: Callable[[str], HsCube], box_kernel: int | None) -> Callable[[str], HsCube]:
    def loader(cube_id: str) -> HsCube:
        cube = load(cube_id)
        return box_filter(cube, box_kernel) if box_kernel and box_kernel > 1 else cube

    return loader


def prepare_samples(
    annotations: Sequence[AnnotationSet],
    load_cube: Callable[[str], HsCube],
    targets: Mapping[str, int | Sequence[int]],
    class_map: Mapping[int, int] | None = None,
    box_kernel: int | None = 5,
    seed: int = 0,
) -> tuple[SplitPlan, dict[str, SampleSet]]:
    """Plan image-disjoint splits and gather (filtered) raw spectra for each."""
    class_map = dict(class_map) if class_map is not None else default_class_map(annotations)
    plan = build_splits(annotations, class_map, targets, seed)
    samples = collect_samples(plan, _filtered_loader(load_cube, box_kernel))
    return plan, samples


@dataclass(eq=False)
class ExperimentResult:
    mode: Mode
    transform: FeatureTransform
    training: TrainResult
    report: EvalReport


def run_experiment(
    samples: Mapping[str, SampleSet],
    wavelengths_nm: np.ndarray,
    mode: Mode | str,
    config: TrainConfig,
    n_classes: int,
    metadata: dict | None = None,
    n_components: int = PCA_COMPONENTS,
    rgb_gain: float = 1.0,
    on_epoch=None,
) -> ExperimentResult:
    """Fit the representation on train, train the MLP, score the final model on test."""
    mode = Mode.parse(mode)
    if "train" not in samples:
        raise DataError("samples must include a 'train' split")
    state = fit_transform(mode, samples["train"].features, wavelengths_nm, n_components, rgb_gain)
    tr = transform_dataset(samples["train"], mode, state)
    va = transform_dataset(samples["val"], mode, state) if "val" in samples else None
    model = build_model(tr.dim, n_classes, config)
    meta = {"mode": mode.value, **(metadata or {})}
    result = train(model, tr, va, config, transform=state, metadata=meta, on_epoch=on_epoch)
    report = evaluate_checkpoint(result.final, samples["test"]) if "test" in samples else None
    return ExperimentResult(mode, state, result, report)


def evaluate_checkpoint(ckpt: Checkpoint, raw_samples: SampleSet) -> EvalReport:
    """Score a checkpoint on raw (untransformed, filtered) spectra."""
    feats = raw_samples.features
    if ckpt.transform is not None:
        feats = ckpt.transform.apply(feats)
    if feats.shape[1] != ckpt.model.input_dim:
        raise DataError(f"features have dim {feats.shape[1]}, model expects {ckpt.model.input_dim}")
    pred = np.argmax(predict_proba(ckpt.model, feats), axis=1)
    return evaluate(pred, raw_samples.labels, ckpt.model.n_classes)
