"""Synthetic pair-labeled video datasets for desk-scale training and evaluation.

Each event is a base video of random unit-norm frame descriptors. Its
positives are temporal crops of the base with per-entry Gaussian noise
(rows re-normalized afterwards), so an event's videos agree strongly under
frame-level matching while distractors are independent random sequences.
The generated manifest uses the event's (base, positive) pairs as the core
set; the ground truth marks each base as a query whose relevant videos are
its positives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import MalformedInputError

GROUND_TRUTH_TIER = "relevant"


@dataclass(frozen=True)
class SyntheticSpec:
    num_events: int = 10
    positives_per_event: int = 3
    num_distractors: int = 100
    frames_range: tuple[int, int] = (16, 48)
    dim: int = 64
    noise_sigma: float = 0.05
    crop_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.num_events, self.positives_per_event, self.num_distractors,
               self.dim) < 1:
            raise MalformedInputError("all synthetic counts must be at least 1")
        lo, hi = self.frames_range
        if lo < 1 or hi < lo:
            raise MalformedInputError(f"invalid frames_range {self.frames_range}")
        if self.noise_sigma < 0.0:
            raise MalformedInputError("noise_sigma must be non-negative")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise MalformedInputError("crop_fraction must lie in (0, 1]")


@dataclass
class SyntheticDataset:
    sequences: dict[str, np.ndarray]
    core_pairs: list[tuple[str, str]]
    distractors: list[str]
    ground_truth: dict[str, dict[str, list[str]]]

    @property
    def queries(self) -> list[str]:
        return sorted(self.ground_truth)


def _unit_rows(rng: np.random.Generator, f: int, d: int) -> np.ndarray:
    rows = rng.standard_normal((f, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def generate(spec: SyntheticSpec) -> SyntheticDataset:
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.frames_range
    sequences: dict[str, np.ndarray] = {}
    core_pairs: list[tuple[str, str]] = []
    ground_truth: dict[str, dict[str, list[str]]] = {}

    for e in range(spec.num_events):
        base_id = f"event{e:03d}"
        f = int(rng.integers(lo, hi + 1))
        base = _unit_rows(rng, f, spec.dim)
        sequences[base_id] = base
        relevant = []
        for p in range(spec.positives_per_event):
            pos_id = f"{base_id}_pos{p}"
            crop_len = max(1, int(round(spec.crop_fraction * f)))
            start = int(rng.integers(0, f - crop_len + 1))
            rows = base[start : start + crop_len].copy()
            if spec.noise_sigma > 0.0:
                rows = rows + rng.normal(0.0, spec.noise_sigma, size=rows.shape)
            rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
            sequences[pos_id] = rows
            core_pairs.append((base_id, pos_id))
            relevant.append(pos_id)
        ground_truth[base_id] = {GROUND_TRUTH_TIER: relevant}

    distractors = []
    for j in range(spec.num_distractors):
        vid = f"distractor{j:05d}"
        f = int(rng.integers(lo, hi + 1))
        sequences[vid] = _unit_rows(rng, f, spec.dim)
        distractors.append(vid)

    return SyntheticDataset(
        sequences=sequences,
        core_pairs=core_pairs,
        distractors=distractors,
        ground_truth=ground_truth,
    )
