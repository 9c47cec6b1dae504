"""Command-line entry point: ``stimpute <subcommand> [flags]``.

Every run writes its outputs plus a ``run_manifest.json`` next to them.
Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numeric failure; on
failure a JSON error object is printed to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, diffcore
from .datapipe import (FHNConfig, IntegrationError, generate_cohort, generate_spiral, load_bundle,
                       save_bundle, stratified_split, CohortSplit)
from .diffcore import ContainerError, NumericError
from .geometry import ConfigurationError, MeshError, MeshGraph, build_icosphere, deform
from .model import ModelConfig, PatientEmbeddings, load_checkpoint, save_checkpoint
from .trainer import (FineTuneConfig, Patient, TrainConfig, TrainingDiverged, WalkSpec,
                      fine_tune, point_imputation, predict_quantiles, train_model, walk_mask)

SCHEMA_VERSION = 1
SUBCOMMANDS = ("gen-mesh", "gen-data", "split", "train", "finetune", "impute", "baseline", "eval",
               "sweep", "crosscorr")


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------- helpers

class Run:
    """Resolves paths against the workdir and records outputs for the manifest."""

    def __init__(self, args):
        self.args = args
        self.workdir = Path(args.workdir)
        self.outputs: list[Path] = []
        self.inputs: list[Path] = []
        self.config: dict = {}
        self.started = time.monotonic()

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def input(self, p) -> Path:
        q = self.path(p)
        if not q.exists():
            raise FileNotFoundError(f"input not found: {q}")
        self.inputs.append(q)
        return q

    def output(self, p) -> Path:
        q = self.path(p)
        q.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(q)
        return q

    def write_json(self, p, obj) -> Path:
        q = self.output(p)
        q.write_text(json.dumps(obj, indent=2, sort_keys=True))
        return q

    def manifest(self, where: Path) -> None:
        files = []
        for o in self.outputs:
            for f in sorted(o.rglob("*")) if o.is_dir() else [o]:
                if f.is_file() and f.name != "run_manifest.json":
                    files.append(f)
        hashes = {str(f): hashlib.sha256(f.read_bytes()).hexdigest() for f in files}
        body = {"command": self.args.command, "version": __version__, "schema": SCHEMA_VERSION,
                "config": self.config, "seed": self.args.seed,
                "inputs": [str(i) for i in self.inputs], "outputs": [str(o) for o in self.outputs],
                "artifact_sha256": hashes, "wall_seconds": round(time.monotonic() - self.started, 3)}
        where.mkdir(parents=True, exist_ok=True)
        (where / "run_manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True))


def _manifest_dir(run: Run, out: Path) -> Path:
    return out if out.suffix == "" else out.parent


def _load_config(run: Run, path: str | None, sections: tuple[str, ...]) -> dict:
    """Strict JSON config: known sections only, each validated by its dataclass."""
    if not path:
        return {}
    obj = json.loads(run.input(path).read_text())
    if not isinstance(obj, dict):
        raise UsageError("config must be a JSON object")
    version = obj.pop("schema", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise UsageError(f"unsupported config schema {version}")
    unknown = set(obj) - set(sections)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return obj


def _read_array(run: Run, p) -> np.ndarray:
    return diffcore.load(run.input(p))


def _patient_dirs(root: Path) -> list[Path]:
    dirs = sorted(d for d in root.iterdir() if (d / "meta.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no patient bundles under {root}")
    return dirs


def _patient(bundle: Path) -> tuple[Patient, object]:
    mesh, series = load_bundle(bundle)
    return Patient(bundle.name, mesh, series.values, series.sampling_rate), series


def _observation_mask(run: Run, args, patient: Patient) -> np.ndarray:
    if args.mask:
        mask = _read_array(run, args.mask)
        if mask.shape != patient.values.shape:
            raise UsageError("mask dims do not match the recording")
        return mask
    spec = WalkSpec(args.area, args.dwell, args.overlap)
    return walk_mask(patient.mesh, patient.n_frames, patient.sampling_rate, spec, args.seed,
                     fixed=True)


def _overrides(args, names: dict[str, str]) -> dict:
    return {key: getattr(args, flag) for flag, key in names.items()
            if getattr(args, flag, None) is not None}


# --------------------------------------------------------------------------- subcommands

def cmd_gen_mesh(run: Run, args) -> Path:
    mesh = build_icosphere(args.subdiv)
    if args.deform:
        mesh = deform(mesh)
    out = run.output(args.out)
    mesh.save(out)
    run.config = {"subdiv": args.subdiv, "deform": args.deform, "nodes": mesh.n_nodes}
    return out.parent


def cmd_gen_data(run: Run, args) -> Path:
    mesh = MeshGraph.load(run.input(args.mesh)) if args.mesh else build_icosphere(2)
    out = run.output(args.out)
    frames = int(round(args.seconds * args.rate))
    if args.kind == "spiral":
        rng = np.random.default_rng(args.seed)
        series = []
        for p in range(args.patients):
            s = generate_spiral(mesh, float(rng.uniform(4.0, 8.0)) * 2 * np.pi, frames, args.rate,
                                int(rng.integers(mesh.n_nodes)))
            s.meta["patient"] = p
            series.append(s)
    else:
        series = generate_cohort(mesh, args.patients, args.seconds, args.rate, args.seed,
                                 jobs=args.jobs)
    for p, s in enumerate(series):
        save_bundle(out / f"p{p:02d}", mesh, s)
    run.config = {"kind": args.kind, "patients": args.patients, "seconds": args.seconds,
                  "rate": args.rate, "fhn": FHNConfig().to_json()}
    return out


def cmd_split(run: Run, args) -> Path:
    dirs = _patient_dirs(run.input(args.data))
    series = [load_bundle(d)[1] for d in dirs]
    split = stratified_split(series, tuple(args.fractions), seed=args.seed)
    body = split.to_json()
    body["patients"] = [d.name for d in dirs]
    out = run.write_json(args.out, body)
    run.config = {"fractions": args.fractions}
    return out.parent


def _split_patients(run: Run, args):
    dirs = _patient_dirs(run.input(args.data))
    patients = [_patient(d)[0] for d in dirs]
    if not args.split:
        return patients, []
    split = CohortSplit.from_json(json.loads(run.input(args.split).read_text()))
    return [patients[i] for i in split.train], [patients[i] for i in split.validation]


def cmd_train(run: Run, args) -> Path:
    cfg = _load_config(run, args.config, ("model", "train"))
    if args.model == "fibmap":
        model = ModelConfig.from_json(cfg.get("model", {}))
    else:
        base = {"d": 16, "enc_hidden": 32, "dec_hidden": 64, **cfg.get("model", {})}
        base.update({"q": 0, "r": 0, "quantiles": [0.5], "use_graph": False,
                     "bidirectional": args.model == "birnn"})
        model = ModelConfig.from_json(base)
    train_cfg = {**cfg.get("train", {}), "seed": args.seed}
    train_cfg.update(_overrides(args, {"epochs": "epochs", "iterations": "iterations_per_epoch",
                                       "lr": "learning_rate", "batch_size": "batch_size",
                                       "time_budget": "time_budget"}))
    tc = TrainConfig.from_json(train_cfg)
    train, val = _split_patients(run, args)
    res = train_model(train, model, tc, validation=val or None)
    out = run.output(args.out)
    save_checkpoint(out, res.config, res.params, res.embeddings, {"best_epoch": res.best_epoch})
    (out / "loss_history.csv").write_text(res.history_csv())
    run.config = {"model": model.to_json(), "train": tc.to_json(), "kind": args.model}
    return out


def _save_embeddings(out: Path, emb: PatientEmbeddings) -> None:
    diffcore.save(out / "V.sti", emb.V.data)
    diffcore.save(out / "g.sti", emb.g.data)


def cmd_finetune(run: Run, args) -> Path:
    config, params, _, _ = load_checkpoint(run.input(args.checkpoint))
    cfg = _load_config(run, args.config, ("finetune",))
    fc_obj = {**cfg.get("finetune", {}), "seed": args.seed}
    fc_obj.update(_overrides(args, {"lr": "learning_rate", "max_epochs": "max_epochs",
                                    "time_budget": "time_budget"}))
    fc = FineTuneConfig.from_json(fc_obj)
    patient, _ = _patient(run.input(args.bundle))
    mask = _observation_mask(run, args, patient)
    res = fine_tune(params, config, patient.mesh, patient.values, mask, fc)
    out = run.output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_embeddings(out, res.embeddings)
    diffcore.save(out / "mask.sti", mask)
    diffcore.save(out / "quantiles.sti", res.quantiles)
    diffcore.save(out / "pred.sti", res.imputed)
    (out / "history.json").write_text(json.dumps(res.history, indent=1))
    run.config = {"finetune": fc.to_json()}
    return out


def cmd_impute(run: Run, args) -> Path:
    config, params, _, _ = load_checkpoint(run.input(args.checkpoint))
    emb_dir = run.input(args.embeddings)
    emb = PatientEmbeddings(diffcore.Tensor(diffcore.load(emb_dir / "V.sti")),
                            diffcore.Tensor(diffcore.load(emb_dir / "g.sti")))
    patient, _ = _patient(run.input(args.bundle))
    mask = _observation_mask(run, args, patient)
    q = predict_quantiles(params, emb, patient.mesh, patient.values, mask, config, args.window)
    out = run.output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    diffcore.save(out / "quantiles.sti", q)
    diffcore.save(out / "pred.sti", point_imputation(q, patient.values, mask, config))
    return out


def cmd_baseline(run: Run, args) -> Path:
    from .baselines import mean_impute, mf_impute, rnn_impute
    from .trainer import TrainResult

    patient, _ = _patient(run.input(args.bundle))
    mask = _observation_mask(run, args, patient)
    if args.method == "mean":
        pred = mean_impute(patient.values, mask)
    elif args.method == "mf":
        pred = mf_impute(patient.values, mask, args.rank, args.iterations, args.ridge, args.seed)
    else:
        if not args.checkpoint:
            raise UsageError("rnn baselines need --checkpoint from `train --model rnn|birnn`")
        config, params, _, _ = load_checkpoint(run.input(args.checkpoint))
        pred = rnn_impute(TrainResult(config, params, {}), patient.mesh, patient.values, mask)
    out = run.output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    diffcore.save(out / "pred.sti", pred)
    diffcore.save(out / "mask.sti", mask)
    run.config = {"method": args.method}
    return out


def cmd_eval(run: Run, args) -> Path:
    from .analysis.metrics import masked_metrics, reports_to_csv
    from .analysis.phase import central_span, detect_ps, hilbert_phase, ps_tpr
    from .plotting import plot_reconstruction

    pred, truth, mask = (_read_array(run, p) for p in (args.pred, args.truth, args.mask))
    if not (pred.shape == truth.shape == mask.shape):
        raise UsageError("pred, truth and mask must share dims")
    hidden = 1.0 - mask if (mask == 0).any() else np.ones_like(mask)
    report = masked_metrics(pred, truth, hidden)
    out = run.output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mesh:
        mesh = MeshGraph.load(run.input(args.mesh))
        lo, hi = central_span(truth.shape[1])
        true_ps = detect_ps(hilbert_phase(truth)[0], mesh).in_span(lo, hi)
        pred_ps = detect_ps(hilbert_phase(pred)[0], mesh).in_span(lo, hi)
        if len(true_ps):
            report.ps_tpr, report.std["ps_tpr"] = ps_tpr(pred_ps, true_ps, mesh, args.rate,
                                                         seed=args.seed)
        (out / "ps_truth.csv").write_text(true_ps.to_csv())
        (out / "ps_pred.csv").write_text(pred_ps.to_csv())
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(reports_to_csv([report]))
    plot_reconstruction(out / "reconstruction.png", truth, pred, mask, args.rate)
    return out


def cmd_sweep(run: Run, args) -> Path:
    from .analysis.sensitivity import cells_to_csv, cells_to_json, sensitivity_sweep
    from .plotting import plot_sweep

    config, params, _, _ = load_checkpoint(run.input(args.checkpoint))
    dirs = _patient_dirs(run.input(args.data))
    patients = [_patient(d)[0] for d in dirs]
    if args.split:
        split = CohortSplit.from_json(json.loads(run.input(args.split).read_text()))
        patients = [patients[i] for i in split.test]
    fc = FineTuneConfig(max_epochs=args.max_epochs, seed=args.seed)
    cells = sensitivity_sweep(params, config, patients, args.areas, args.dwells, fc,
                              overlap=args.overlap, seed=args.seed)
    out = run.output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(cells_to_csv(cells))
    (out / "sweep.json").write_text(json.dumps(cells_to_json(cells), indent=1))
    if cells:
        plot_sweep(out / "sweep.png", cells)
    run.config = {"areas": args.areas, "dwells": args.dwells, "finetune": fc.to_json()}
    return out


def _on_mesh(mesh_a: MeshGraph, mesh_b: MeshGraph, values_b: np.ndarray, k: int) -> np.ndarray:
    """Bring B's field onto A's vertices (ICP on centred vertices, then k-NN)."""
    from .analysis.crosscorr import icp_align, knn_project

    if mesh_a.n_nodes == mesh_b.n_nodes and np.allclose(mesh_a.vertices, mesh_b.vertices):
        return values_b
    transform = icp_align(mesh_b.vertices, mesh_a.vertices)
    return knn_project(transform.apply(mesh_b.vertices), mesh_a.vertices, values_b, k)


def cmd_crosscorr(run: Run, args) -> Path:
    from .analysis.crosscorr import (bootstrap_percentile_ci, sliding_cross_corr,
                                     spatiotemporal_shuffle)
    from .analysis.phase import hilbert_phase
    from .plotting import plot_crosscorr

    mesh_a, a = load_bundle(run.input(args.a))
    comparisons = {"intra": run.input(args.b)}
    if args.other:
        comparisons["inter"] = run.input(args.other)
    phase_a = hilbert_phase(a.values)[0]
    phases = {}
    for name, path in comparisons.items():
        mesh_b, b = load_bundle(path)
        phases[name] = hilbert_phase(_on_mesh(mesh_a, mesh_b, b.values, args.k))[0]
    phases["shuffled"] = spatiotemporal_shuffle(phases["intra"], args.seed)
    rows, first = {n: [] for n in phases}, {}
    for w in args.windows:
        for name, ph in phases.items():
            cc = sliding_cross_corr(phase_a, ph, w, a.sampling_rate, args.stride)
            point, lo, hi = bootstrap_percentile_ci(cc.values, 99.0, args.rounds, args.resample,
                                                    args.seed)
            rows[name].append({"window": w, "point": point, "lo": lo, "hi": hi,
                               "flat_windows": cc.flat_windows})
            first.setdefault(name, cc.matrix)
    out = run.output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "percentiles.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    lines = ["comparison,window,point,lo,hi"]
    lines += [f"{n},{r['window']},{r['point']},{r['lo']},{r['hi']}" for n, rs in rows.items() for r in rs]
    (out / "percentiles.csv").write_text("\n".join(lines) + "\n")
    for name, mat in first.items():
        diffcore.save(out / f"corr_{name}.sti", mat)
    plot_crosscorr(out / "crosscorr.png", first, rows)
    run.config = {"windows": args.windows, "stride": args.stride, "rounds": args.rounds,
                  "resample": args.resample}
    return out


# --------------------------------------------------------------------------- parser

def _walk_flags(p) -> None:
    p.add_argument("--mask", help="observation mask (.sti); otherwise a fixed walk is simulated")
    p.add_argument("--area", type=float, default=0.1)
    p.add_argument("--dwell", type=float, default=1.0)
    p.add_argument("--overlap", type=int, default=0)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stimpute", description="Spatiotemporal field imputation.")
    ap.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="base for relative paths")
    common.add_argument("--seed", type=int, default=None, help="defaults to $STIMPUTE_SEED or 0")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-patient work")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-mesh", parents=[common], help="write an icosphere mesh")
    p.add_argument("--subdiv", type=int, default=2)
    p.add_argument("--deform", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="simulate patient recordings")
    p.add_argument("--mesh")
    p.add_argument("--kind", choices=("fhn", "spiral"), default="fhn")
    p.add_argument("--patients", type=int, default=12)
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--rate", type=float, default=70.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", parents=[common], help="entropy-stratified cohort split")
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", type=_floats, default=[0.7, 0.1, 0.2])
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train the model or an RNN baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--config")
    p.add_argument("--model", choices=("fibmap", "rnn", "birnn"), default="fibmap")
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--time-budget", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", parents=[common], help="fit embeddings for one patient")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--config")
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--time-budget", type=float)
    _walk_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("impute", parents=[common], help="predict with fitted embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--window", type=int, default=20)
    _walk_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("baseline", parents=[common], help="mean, MF or RNN imputation")
    p.add_argument("--method", choices=("mean", "mf", "rnn", "birnn"), required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--rank", type=int, default=10)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--ridge", type=float, default=1e-3)
    _walk_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="metrics, PS rate and figure")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--mesh")
    p.add_argument("--rate", type=float, default=70.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", parents=[common], help="area x dwell sensitivity grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--areas", type=_floats, default=[0.025, 0.05, 0.1, 0.2])
    p.add_argument("--dwells", type=_floats, default=[0.5, 1.0, 2.0])
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("crosscorr", parents=[common], help="sliding-window phase correlation")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--other", help="recording from a different regime")
    p.add_argument("--windows", type=_floats, default=[0.5, 1.0, 2.0, 4.0])
    p.add_argument("--stride", type=float, default=0.1)
    p.add_argument("--rounds", type=int, default=1000)
    p.add_argument("--resample", type=int, default=10000)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    return ap


COMMANDS = {
    "gen-mesh": cmd_gen_mesh, "gen-data": cmd_gen_data, "split": cmd_split, "train": cmd_train,
    "finetune": cmd_finetune, "impute": cmd_impute, "baseline": cmd_baseline, "eval": cmd_eval,
    "sweep": cmd_sweep, "crosscorr": cmd_crosscorr,
}


def _fail(code: int, kind: str, exc: BaseException) -> int:
    body = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    for attr in ("epoch", "iteration", "frame"):
        if getattr(exc, attr, None) is not None:
            body[attr] = getattr(exc, attr)
    print(json.dumps(body), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None:
        env = os.environ.get("STIMPUTE_SEED")
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            return _fail(2, "usage", UsageError("STIMPUTE_SEED must be an integer"))
    run = Run(args)
    try:
        where = COMMANDS[args.command](run, args)
        run.manifest(where)
    except (FileNotFoundError, IsADirectoryError, PermissionError, ContainerError, MeshError,
            json.JSONDecodeError) as exc:
        return _fail(3, "io", exc)
    except (NumericError, TrainingDiverged, IntegrationError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        return _fail(4, "numeric", exc)
    except (UsageError, ConfigurationError, ValueError, TypeError) as exc:
        return _fail(2, "usage", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
