"""Grouped data splits, per-fold champion selection, and ensemble inference.

Slides are split by an opaque group column (medical centre or cohort) so
that no group ever straddles two folds.  Centre-based k-fold uses greedy
size balancing; leave-one-cohort-out makes one fold per cohort.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bagio import FeatureBag, SlideRecord
from .concord import pearson
from .milnet import HyperParams, ModelParams, forward, load_checkpoint, save_checkpoint

GROUP_KEYS = ("centre", "cohort")


class FoldError(ValueError):
    pass


@dataclass
class FoldPlan:
    k: int
    group_key: str
    assignment: dict[str, int]  # slide_id -> fold index

    def fold_of(self, slide_id: str) -> int:
        return self.assignment[slide_id]

    def validate_groups(self, records: list[SlideRecord]) -> None:
        """Assert group purity: every group lives in exactly one fold."""
        seen: dict[str, int] = {}
        for r in records:
            group = getattr(r, self.group_key)
            fold = self.assignment[r.slide_id]
            if group in seen and seen[group] != fold:
                raise FoldError(f"group {group!r} straddles folds {seen[group]} and {fold}")
            seen[group] = fold

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("slide_id,fold\n")
            for sid in sorted(self.assignment):
                fh.write(f"{sid},{self.assignment[sid]}\n")


def split_by_group(records: list[SlideRecord], group_key: str, k: int, seed: int = 0) -> FoldPlan:
    """Greedy size-balanced grouped k-fold.

    Groups are placed largest-first onto the currently smallest fold; the
    seed only breaks ties between equal-sized groups.
    """
    if group_key not in GROUP_KEYS:
        raise FoldError(f"group_key must be one of {GROUP_KEYS}")
    groups: dict[str, list[str]] = {}
    for r in records:
        groups.setdefault(getattr(r, group_key), []).append(r.slide_id)
    if len(groups) < k:
        raise FoldError(f"need at least {k} distinct {group_key} groups, found {len(groups)}")
    rng = np.random.default_rng(seed)
    names = sorted(groups)
    tiebreak = {name: float(t) for name, t in zip(names, rng.random(len(names)))}
    ordered = sorted(names, key=lambda g: (-len(groups[g]), tiebreak[g]))
    fold_sizes = [0] * k
    assignment: dict[str, int] = {}
    for g in ordered:
        fold = int(np.argmin(fold_sizes))
        fold_sizes[fold] += len(groups[g])
        for sid in groups[g]:
            assignment[sid] = fold
    return FoldPlan(k=k, group_key=group_key, assignment=assignment)


def leave_one_cohort_out(records: list[SlideRecord]) -> FoldPlan:
    """One fold per cohort; fold i's validation set is exactly cohort i."""
    cohorts = sorted({r.cohort for r in records})
    if len(cohorts) < 2:
        raise FoldError("leave-one-cohort-out needs at least 2 cohorts")
    index = {c: i for i, c in enumerate(cohorts)}
    return FoldPlan(k=len(cohorts), group_key="cohort",
                    assignment={r.slide_id: index[r.cohort] for r in records})


@dataclass
class Candidate:
    """One trained model with its validation predictions."""

    params: ModelParams
    val_preds: np.ndarray
    val_labels: np.ndarray
    order: int = 0  # e.g. best epoch; earliest wins ties


def select_champion(candidates: list[Candidate]) -> Candidate:
    """Highest validation Pearson wins; exact ties go to the earliest order."""
    if not candidates:
        raise FoldError("no candidates")
    scored = [(pearson(c.val_preds, c.val_labels), c) for c in candidates]
    best_r = max(r for r, _ in scored)
    contenders = [c for r, c in scored if r == best_r]
    return min(contenders, key=lambda c: c.order)


@dataclass
class Ensemble:
    members: list[ModelParams]
    hyper: HyperParams

    def __post_init__(self):
        if not self.members:
            raise FoldError("ensemble needs at least one member")
        dims = {(m.dim, m.enc_out) for m in self.members}
        if len(dims) != 1:
            raise FoldError("ensemble members have mismatched shapes")


def ensemble_predict(ensemble: Ensemble, bag: FeatureBag) -> float:
    """Arithmetic mean of member predictions."""
    preds = [forward(m, bag).prediction for m in ensemble.members]
    return float(np.mean(preds))


def save_ensemble(ensemble: Ensemble, out_dir, extra: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, member in enumerate(ensemble.members):
        name = f"fold{i:03d}.ckpt"
        save_checkpoint(member, ensemble.hyper, out_dir / name)
        names.append(name)
    manifest = {"members": names}
    if extra:
        manifest.update(extra)
    with open(out_dir / "ensemble.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_ensemble(path) -> Ensemble:
    """Accepts an ensemble directory (with ensemble.json) or one checkpoint file."""
    path = Path(path)
    if path.is_dir():
        with open(path / "ensemble.json") as fh:
            manifest = json.load(fh)
        members, hyper = [], None
        for name in manifest["members"]:
            params, hyper = load_checkpoint(path / name)
            members.append(params)
        return Ensemble(members=members, hyper=hyper)
    params, hyper = load_checkpoint(path)
    return Ensemble(members=[params], hyper=hyper)
