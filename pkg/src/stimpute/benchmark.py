"""End-to-end synthetic benchmark: FHN cohort, training, fine-tuning and baselines.

Every stage caches its artifacts under the work directory, so an interrupted
run resumes where it stopped. Run with ``python -m stimpute.benchmark WORKDIR``.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore
from .analysis.metrics import masked_metrics
from .analysis.phase import central_span, detect_ps, face_hops, hilbert_phase, ps_tpr
from .baselines import mean_impute, mf_impute, rnn_impute, train_univariate, univariate_config
from .datapipe import generate_cohort, load_bundle, save_bundle, stratified_split
from .geometry import build_icosphere
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .trainer import (FineTuneConfig, Patient, TrainConfig, TrainResult, evaluation_mask,
                      fine_tune, train_model)

log = logging.getLogger(__name__)

METHODS = ("fibmap", "mean", "mf", "birnn")


@dataclass
class BenchmarkConfig:
    n_patients: int = 12
    seconds: float = 10.0
    sampling_rate: float = 70.0
    subdivisions: int = 2
    train_budget: float = 7000.0  # seconds, below the 2 h allowance
    finetune_budget: float = 540.0  # seconds per patient, below 10 min
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: {"epochs": 60, "iterations_per_epoch": 50})
    finetune: dict = field(default_factory=lambda: {"max_epochs": 40, "iterations_per_epoch": 10})
    seed: int = 0


def ps_rate(imputed: np.ndarray, truth: np.ndarray, mesh, sampling_rate: float,
            fhops: np.ndarray | None = None) -> tuple[float, float]:
    """PS detection rate on the central 70 frames, phases taken over the full recording."""
    lo, hi = central_span(truth.shape[1])
    true_ps = detect_ps(hilbert_phase(truth)[0], mesh).in_span(lo, hi)
    pred_ps = detect_ps(hilbert_phase(imputed)[0], mesh).in_span(lo, hi)
    return ps_tpr(pred_ps, true_ps, mesh, sampling_rate, fhops=fhops)


def _cohort(work: Path, cfg: BenchmarkConfig):
    mesh = build_icosphere(cfg.subdivisions)
    root = work / "cohort"
    paths = [root / f"p{i:02d}" for i in range(cfg.n_patients)]
    if not all((p / "meta.json").exists() for p in paths):
        series = generate_cohort(mesh, cfg.n_patients, cfg.seconds, cfg.sampling_rate, cfg.seed)
        for p, s in zip(paths, series):
            save_bundle(p, mesh, s)
    return mesh, [load_bundle(p)[1] for p in paths]


def _trained(path: Path, train_fn) -> TrainResult:
    if (path / "manifest.json").exists():
        config, params, embeddings, extra = load_checkpoint(path)
        return TrainResult(config, params, embeddings or {}, extra.get("history", []),
                           extra.get("best_epoch", -1))
    res = train_fn()
    save_checkpoint(path, res.config, res.params, res.embeddings,
                    {"history": res.history, "best_epoch": res.best_epoch})
    return res


def run_benchmark(workdir, config: BenchmarkConfig | None = None) -> dict:
    cfg = config or BenchmarkConfig()
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    out_path = work / "results.json"
    if out_path.exists():
        return json.loads(out_path.read_text())
    t0 = time.monotonic()
    mesh, series = _cohort(work, cfg)
    split = stratified_split(series, seed=cfg.seed)
    patients = [Patient(f"p{i:02d}", mesh, s.values, s.sampling_rate) for i, s in enumerate(series)]
    train = [patients[i] for i in split.train]
    val = [patients[i] for i in split.validation]
    mc = ModelConfig(**cfg.model)
    tc = TrainConfig(**{**cfg.train, "time_budget": cfg.train_budget, "seed": cfg.seed})
    timings = {}

    started = time.monotonic()
    model = _trained(work / "fibmap", lambda: train_model(train, mc, tc, validation=val,
                                                          log=lambda r: log.info("fibmap %s", r)))
    timings["train_fibmap"] = time.monotonic() - started
    started = time.monotonic()
    birnn = _trained(work / "birnn", lambda: train_univariate(
        train, tc, True, validation=val, log=lambda r: log.info("birnn %s", r)))
    timings["train_birnn"] = time.monotonic() - started

    fc = FineTuneConfig(**{**cfg.finetune, "time_budget": cfg.finetune_budget, "seed": cfg.seed})
    fhops = face_hops(mesh)
    rows = []
    for i in split.test:
        p = patients[i]
        mask = evaluation_mask(p, seed=cfg.seed + i)
        hidden = 1.0 - mask
        started = time.monotonic()
        ft = fine_tune(model.params, model.config, mesh, p.values, mask, fc, truth=p.values)
        ft_seconds = time.monotonic() - started
        fields = {
            "fibmap": ft.imputed,
            "mean": mean_impute(p.values, mask),
            "mf": mf_impute(p.values, mask, seed=cfg.seed),
            "birnn": rnn_impute(birnn, mesh, p.values, mask, tc.window),
        }
        diffcore.save(work / f"imputed_{p.pid}.sti", np.stack([fields[m] for m in METHODS]))
        row = {"patient": p.pid, "regime": series[i].meta.get("regime"),
               "finetune_seconds": ft_seconds, "finetune_history": ft.history}
        for m in METHODS:
            row[f"{m}_mae"] = masked_metrics(fields[m], p.values, hidden).mae
            row[f"{m}_ps_tpr"], row[f"{m}_ps_tpr_std"] = ps_rate(fields[m], p.values, mesh,
                                                                 p.sampling_rate, fhops)
        log.info("patient %s %s", p.pid, {k: v for k, v in row.items() if k != "finetune_history"})
        rows.append(row)
    timings["total"] = time.monotonic() - t0
    result = {"config": asdict(cfg), "split": split.to_json(), "timings": timings,
              "train_history": model.history, "birnn_history": birnn.history, "patients": rows}
    out_path.write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("workdir")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    run_benchmark(args.workdir, BenchmarkConfig(seed=args.seed))


if __name__ == "__main__":
    main()
