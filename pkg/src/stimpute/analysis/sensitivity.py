"""Sweeps over catheter area and dwell time, split by signal entropy."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from ..datapipe import shannon_entropy
from ..diffcore import Tensor
from ..geometry import covers_once, dwell_frames, patch_count
from ..model import ModelConfig
from ..trainer import FineTuneConfig, Patient, fine_tune, walk_mask, WalkSpec
from .horizon import binned_by_horizon, imputation_horizon
from .metrics import masked_metrics


@dataclass
class SweepCell:
    area: float
    dwell: float
    group: str
    mae: float
    mae_std: float
    patients: list[str]
    horizon_levels: list[int] = field(default_factory=list)
    ci_width: list[float] = field(default_factory=list)  # mean q_hi - q_lo per level
    horizon_mae: list[float] = field(default_factory=list)


def entropy_groups(patients: list[Patient], bins: int = 64) -> dict[str, list[Patient]]:
    """Split at the median of the per-patient mean node entropy."""
    score = np.array([np.mean([shannon_entropy(row, bins) for row in p.values]) for p in patients])
    median = np.median(score)
    low = [p for p, s in zip(patients, score) if s <= median]
    high = [p for p, s in zip(patients, score) if s > median]
    return {"low": low, "high": high}


def feasible(area: float, dwell: float, n_frames: int, sampling_rate: float) -> bool:
    """One full patch cycle must fit in the recording."""
    frames = dwell_frames(dwell, sampling_rate)
    return frames >= 1 and covers_once(patch_count(area), frames, n_frames)


def sensitivity_sweep(params: dict[str, Tensor], model_config: ModelConfig,
                      patients: list[Patient], areas, dwells, finetune: FineTuneConfig,
                      overlap: int = 0, groups: dict[str, list[Patient]] | None = None,
                      seed: int = 0, log=None) -> list[SweepCell]:
    """Fine-tune and score every feasible (area, dwell) pair for each patient group."""
    groups = groups if groups is not None else entropy_groups(patients)
    lo, hi = 0, model_config.n_quantiles - 1
    cells = []
    for area in areas:
        for dwell in dwells:
            for name, members in sorted(groups.items()):
                ok = [p for p in members if feasible(area, dwell, p.n_frames, p.sampling_rate)]
                if not ok:
                    continue
                maes, widths, errs, horizons = [], [], [], []
                for k, p in enumerate(ok):
                    mask = walk_mask(p.mesh, p.n_frames, p.sampling_rate,
                                     WalkSpec(area, dwell, overlap), seed + k, fixed=True)
                    res = fine_tune(params, model_config, p.mesh, p.values, mask, finetune)
                    hidden = mask == 0
                    if not hidden.any():  # full coverage: score the whole field
                        hidden = np.ones_like(mask, bool)
                    maes.append(masked_metrics(res.imputed, p.values, hidden).mae)
                    horizons.append(imputation_horizon(mask, p.mesh)[hidden])
                    widths.append((res.quantiles[..., hi] - res.quantiles[..., lo])[hidden])
                    errs.append(np.abs(res.imputed - p.values)[hidden])
                h = np.concatenate(horizons)
                levels, w, _ = binned_by_horizon(h, np.concatenate(widths))
                _, e, _ = binned_by_horizon(h, np.concatenate(errs))
                cell = SweepCell(area, dwell, name, float(np.mean(maes)), float(np.std(maes)),
                                 [p.pid for p in ok], levels.tolist(), w.tolist(), e.tolist())
                if log:
                    log(cell)
                cells.append(cell)
    return cells


def cells_to_csv(cells: list[SweepCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["area", "dwell", "group", "mae", "mae_std", "n_patients"])
    for c in cells:
        w.writerow([c.area, c.dwell, c.group, c.mae, c.mae_std, len(c.patients)])
    return buf.getvalue()


def cells_to_json(cells: list[SweepCell]) -> list[dict]:
    return [asdict(c) for c in cells]
