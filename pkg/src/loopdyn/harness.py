"""Declarative experiments: spec files, pipelines and deterministic output emission.

Spec files are YAML mappings. Every run is a pure function of the spec, so
the same spec always produces byte-identical output files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from . import classify as C
from . import dynamics as D
from . import metrics as Mt
from . import model as M
from .errors import DivergedForwardError, InvalidInputError, LoopdynError, SpecError
from .weights_io import load_weights

log = logging.getLogger(__name__)

GRID_LAYERS = 12
GRID_LOOPS = 128
PROP1_TARGET = 1e-6
PROP1_MAX_ITER = 256
# calibrated from the measured local gain of block 1 on converged states
PROP1_TOL = 1e-3


class ExperimentKind(str, Enum):
    STABILITY_GRID = "StabilityGrid"
    DYNAMICS = "Dynamics"
    CLASSIFY = "Classify"
    TRAJECTORY = "Trajectory"
    METRICS = "Metrics"
    PROP2_AUDIT = "Prop2Audit"


# --- spec -------------------------------------------------------------------

_MODEL_KEYS = {f for f in M.ModelConfig.__dataclass_fields__}
_SCHEMA: dict[str, Any] = {
    "kind": str,
    "model": dict,
    "loops": int,
    "seeds": list,
    "sequence": {"random_embeddings": int, "token_ids": list},
    "capture": {"residuals": bool, "attentions": bool, "attn_inputs": bool},
    "output": str,
    "classifier": {"tau": float, "rho": float, "series_kind": str},
    "reference": int,
    "grid": {"schemes": list, "injection": list},
    "metrics": list,
    "sink_k": int,
    "layers": list,
    "token": int,
}


@dataclass
class ExperimentSpec:
    kind: ExperimentKind
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    weights_path: str | None = None
    loops: int = GRID_LOOPS
    seeds: list[int] = field(default_factory=lambda: [0])
    n_tokens: int = 32
    token_ids: list[int] | None = None
    capture: M.CaptureFlags = field(default_factory=M.CaptureFlags)
    output: str = "out"
    classifier: C.ClassifierParams = field(default_factory=C.ClassifierParams)
    reference: int = D.DEFAULT_REFERENCE
    schemes: list[str] = field(default_factory=lambda: [s.value for s in M.NormScheme])
    injection: list[bool] = field(default_factory=lambda: [True, False])
    metrics: list[str] = field(default_factory=lambda: [m.value for m in Mt.AttentionMetric])
    sink_k: int | None = None
    layers: list[int] | None = None
    token: int = -1

    def __post_init__(self):
        self.kind = ExperimentKind(self.kind)
        if not self.seeds:
            raise SpecError("seeds must be non-empty", "seeds")
        for s in self.seeds:
            if not isinstance(s, int) or isinstance(s, bool) or not 0 <= s < 2**64:
                raise SpecError("seeds must be unsigned 64-bit integers", "seeds")
        if self.loops < 1:
            raise SpecError("loops must be >= 1", "loops")
        if self.reference < 1:
            raise SpecError("reference must be >= 1", "reference")
        if self.n_tokens < 1:
            raise SpecError("random_embeddings must be >= 1", "sequence.random_embeddings")

    def to_dict(self) -> dict:
        model = {"weights": self.weights_path} if self.weights_path else self.model.to_dict()
        if not self.weights_path:
            model.pop("seed")
        seq = {"token_ids": list(self.token_ids)} if self.token_ids is not None else {"random_embeddings": self.n_tokens}
        out = {
            "kind": self.kind.value,
            "model": model,
            "loops": self.loops,
            "seeds": list(self.seeds),
            "sequence": seq,
            "capture": self.capture.to_dict(),
            "output": self.output,
            "classifier": {"tau": self.classifier.tau, "rho": self.classifier.rho, "series_kind": self.classifier.series_kind.value},
            "reference": self.reference,
            "grid": {"schemes": list(self.schemes), "injection": list(self.injection)},
            "metrics": list(self.metrics),
            "token": self.token,
        }
        if self.sink_k is not None:
            out["sink_k"] = self.sink_k
        if self.layers is not None:
            out["layers"] = list(self.layers)
        return out

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_for(self, seed: int) -> M.ModelConfig:
        return replace(self.model, seed=seed)


def _mark(node) -> str:
    m = node.start_mark
    return f"line {m.line + 1}, column {m.column + 1}"


def _check_node(node, schema, path: str) -> None:
    """Walk a composed YAML node against the schema, rejecting unknown keys."""
    if isinstance(schema, dict):
        if not isinstance(node, yaml.MappingNode):
            raise SpecError("expected a mapping", f"{path or '<root>'} ({_mark(node)})")
        for key_node, value_node in node.value:
            key = key_node.value
            sub = f"{path}.{key}" if path else key
            if key not in schema:
                raise SpecError(f"unknown key '{key}'", f"{sub} ({_mark(key_node)})")
            _check_node(value_node, schema[key], sub)
    elif schema is dict and path == "model":
        if not isinstance(node, yaml.MappingNode):
            raise SpecError("expected a mapping", f"{path} ({_mark(node)})")
        allowed = (_MODEL_KEYS - {"seed"}) | {"weights"}
        for key_node, _ in node.value:
            if key_node.value not in allowed:
                raise SpecError(f"unknown key '{key_node.value}'", f"model.{key_node.value} ({_mark(key_node)})")


def parse_spec(text: str, source: str = "<spec>") -> ExperimentSpec:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        m = exc.problem_mark
        where = f"{source}:{m.line + 1}:{m.column + 1}" if m else source
        raise SpecError(f"parse error: {exc.problem}", where) from exc
    if node is None:
        raise SpecError("empty spec", source)
    _check_node(node, _SCHEMA, "")
    data = yaml.safe_load(text)
    return spec_from_dict(data)


def spec_from_dict(data: dict) -> ExperimentSpec:
    for key in data:
        if key not in _SCHEMA:
            raise SpecError(f"unknown key '{key}'", key)
    if "kind" not in data:
        raise SpecError("missing required key", "kind")
    kw: dict[str, Any] = {}
    try:
        kw["kind"] = ExperimentKind(data["kind"])
    except ValueError as exc:
        raise SpecError(f"unknown experiment kind {data['kind']!r}", "kind") from exc
    model = dict(data.get("model") or {})
    try:
        if "weights" in model:
            extra = set(model) - {"weights"}
            if extra:
                raise SpecError("a weights file cannot be combined with config keys", f"model.{sorted(extra)[0]}")
            kw["weights_path"] = str(model["weights"])
        else:
            kw["model"] = M.ModelConfig.from_dict(model)
    except InvalidInputError as exc:
        raise SpecError(str(exc), "model") from exc
    for key in ("loops", "seeds", "output", "reference", "metrics", "sink_k", "layers", "token"):
        if key in data:
            kw[key] = data[key]
    seq = data.get("sequence") or {}
    if "random_embeddings" in seq and "token_ids" in seq:
        raise SpecError("choose one of random_embeddings or token_ids", "sequence")
    if "random_embeddings" in seq:
        kw["n_tokens"] = int(seq["random_embeddings"])
    if "token_ids" in seq:
        kw["token_ids"] = [int(i) for i in seq["token_ids"]]
    if "capture" in data:
        kw["capture"] = M.CaptureFlags(**data["capture"])
    if "classifier" in data:
        try:
            kw["classifier"] = C.ClassifierParams(**data["classifier"])
        except (InvalidInputError, ValueError) as exc:
            raise SpecError(str(exc), "classifier") from exc
    grid = data.get("grid") or {}
    if "schemes" in grid:
        for s in grid["schemes"]:
            try:
                M.NormScheme(s)
            except ValueError as exc:
                raise SpecError(f"unknown norm scheme {s!r}", "grid.schemes") from exc
        kw["schemes"] = list(grid["schemes"])
    if "injection" in grid:
        kw["injection"] = [bool(v) for v in grid["injection"]]
    for m in kw.get("metrics", []):
        try:
            Mt.AttentionMetric(m)
        except ValueError as exc:
            raise SpecError(f"unknown metric {m!r}", "metrics") from exc
    return ExperimentSpec(**kw)


def load_spec(path) -> ExperimentSpec:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise SpecError(f"cannot read spec: {exc}", str(p)) from exc
    return parse_spec(text, str(p))


# --- output -------------------------------------------------------------------

CSV_SCHEMAS = {
    "grid_cells.csv": ("norm_scheme", "injection", "seed", "recurrence", "layer1_cosine", "min_layer_cosine"),
    "grid_mean.csv": ("norm_scheme", "injection", "recurrence", "layer1_cosine", "min_layer_cosine", "layer1_std", "min_layer_std"),
    "metrics": Mt.CSV_COLUMNS,
    "successive": Mt.CSV_COLUMNS,
    "fixed_points": ("layer", "recurrence", "distance", "cosine"),
    "similarity": ("kind", "i", "j", "value"),
    "labels": ("example", "token", "layer", "kind", "freq", "amp", "slope"),
    "trajectory": ("depth", "recurrence", "layer", "pc1", "pc2"),
    "prop2": ("layer", "recurrence", "lhs", "rhs", "holds"),
}


def _schema_for(name: str):
    if name in CSV_SCHEMAS:
        return CSV_SCHEMAS[name]
    stem = Path(name).name.split("_seed")[0].split(".")[0]
    for key in (stem, stem.split("_")[0]):
        if key in CSV_SCHEMAS:
            return CSV_SCHEMAS[key]
    raise InvalidInputError(f"no column schema declared for {name}")


def validate_csv(name: str, text: str) -> None:
    """Header equals the declared schema and every row has the same width."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != tuple(_schema_for(name)):
        raise InvalidInputError(f"{name}: header does not match its schema")
    width = len(rows[0])
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise InvalidInputError(f"{name}: row {i} has {len(row)} fields, expected {width}")


def emit_outputs(artifacts: dict[str, Any], out_dir) -> list[Path]:
    """Write artifacts in sorted name order; CSVs are schema-checked first."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(artifacts):
        body = artifacts[name]
        if name.endswith(".csv"):
            validate_csv(name, body)
        elif name.endswith(".json") and not isinstance(body, str):
            body = json.dumps(body, indent=1, sort_keys=True) + "\n"
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(body, encoding="utf-8", newline="\n")
        written.append(path)
    return written


# --- shared pieces ----------------------------------------------------------------


def _run_map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _weights_and_inputs(spec: ExperimentSpec, seed: int) -> tuple[M.ModelWeights, np.ndarray]:
    if spec.weights_path:
        weights = load_weights(spec.weights_path)
        weights = replace(weights, config=replace(weights.config, seed=seed))
    else:
        weights = M.init_random(spec.config_for(seed))
    cfg = weights.config
    if spec.token_ids is not None:
        if weights.embedding is None:
            raise SpecError("token_ids need a model with an embedding table", "sequence.token_ids")
        x = M.embed_tokens(spec.token_ids, weights.embedding)
    else:
        x = M.random_embeddings(spec.n_tokens, cfg.d_model, seed)
    return weights, x


def _trace(spec, seed, capture=None) -> tuple[M.ModelWeights, M.Trace]:
    weights, x = _weights_and_inputs(spec, seed)
    return weights, M.run_recurrent(x, weights, spec.loops, capture or spec.capture)


def _require(spec: ExperimentSpec, kind: ExperimentKind) -> None:
    if spec.kind is not kind:
        raise SpecError(f"expected kind {kind.value}, got {spec.kind.value}", "kind")


def _report(spec: ExperimentSpec, **extra) -> dict:
    echo = spec.to_dict()
    echo.pop("output")  # outputs must not depend on where they are written
    return {"tool": "loopdyn", "version": __version__, "spec": echo, **extra}


# --- stability grid ----------------------------------------------------------------


@dataclass
class GridCell:
    norm_scheme: str
    injection: bool
    seed: int
    status: str = "ok"  # ok | diverged
    error: str | None = None
    layer1_cosine: np.ndarray | None = None  # layer 1 vs its own state at the reference
    min_layer_cosine: np.ndarray | None = None  # layer 1 vs the reference state least similar to layer 1's
    converged: bool = False
    degenerate: bool = False
    report: D.FixedPointReport | None = None
    prop1: D.CyclicShiftResult | None = None

    def summary(self) -> dict:
        out = {
            "norm_scheme": self.norm_scheme,
            "injection": self.injection,
            "seed": self.seed,
            "status": self.status,
            "converged": bool(self.converged),
            "degenerate": bool(self.degenerate),
        }
        if self.error:
            out["error"] = self.error
        if self.report is not None:
            out["layer_converged"] = [bool(v) for v in self.report.converged]
            out["cosine_window"] = [float(v) for v in self.report.cosine_window]
            out["relative_window"] = [float(v) for v in self.report.relative_window]
            out["min_fixed_point_cosine"] = float(self.report.fixed_point_cosines.min())
        if self.prop1 is not None:
            p = self.prop1
            out["prop1"] = {
                "residual": p.residual,
                "shifted_residual": p.shifted_residual,
                "amplification": p.amplification,
                "extra_iterations": p.iterations,
                "tolerance": PROP1_TOL,
                "checked": p.residual <= PROP1_TARGET,
                "holds": (p.shifted_residual <= PROP1_TOL) if p.residual <= PROP1_TARGET else None,
            }
        return out


@dataclass
class StabilityGridResult:
    cells: list[GridCell]
    loops: int
    reference: int

    def cell(self, scheme: str, injection: bool, seed: int) -> GridCell:
        for c in self.cells:
            if c.norm_scheme == scheme and c.injection == injection and c.seed == seed:
                return c
        raise KeyError((scheme, injection, seed))

    def group(self, scheme: str, injection: bool) -> list[GridCell]:
        return [c for c in self.cells if c.norm_scheme == scheme and c.injection == injection]

    def cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_SCHEMAS["grid_cells.csv"])
        for c in self.cells:
            if c.status != "ok":
                continue
            for r in range(self.loops):
                w.writerow((c.norm_scheme, int(c.injection), c.seed, r + 1, Mt.fmt(c.layer1_cosine[r]), Mt.fmt(c.min_layer_cosine[r])))
        return buf.getvalue()

    def mean_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_SCHEMAS["grid_mean.csv"])
        keys = []
        for c in self.cells:
            if (c.norm_scheme, c.injection) not in keys:
                keys.append((c.norm_scheme, c.injection))
        for scheme, inj in keys:
            ok = [c for c in self.group(scheme, inj) if c.status == "ok"]
            if not ok:
                continue
            l1 = np.stack([c.layer1_cosine for c in ok])
            mn = np.stack([c.min_layer_cosine for c in ok])
            for r in range(self.loops):
                w.writerow(
                    (scheme, int(inj), r + 1, Mt.fmt(l1[:, r].mean()), Mt.fmt(mn[:, r].mean()), Mt.fmt(l1[:, r].std()), Mt.fmt(mn[:, r].std()))
                )
        return buf.getvalue()

    def summary(self) -> list[dict]:
        return [c.summary() for c in self.cells]


def run_grid_cell(scheme: str, injection: bool, seed: int, spec: ExperimentSpec, check_prop1: bool = True) -> GridCell:
    cell = GridCell(scheme, injection, seed)
    cfg = replace(spec.config_for(seed), norm_scheme=M.NormScheme(scheme), input_injection=injection)
    weights = M.init_random(cfg)
    x = M.random_embeddings(spec.n_tokens, cfg.d_model, seed)
    try:
        tr = M.run_recurrent(x, weights, spec.loops, M.CaptureFlags(residuals=True, attentions=False))
    except DivergedForwardError as exc:
        cell.status, cell.error = "diverged", str(exc)
        return cell
    ref = min(spec.reference, spec.loops)
    rec = tr.recurrent
    fp1 = rec[ref - 1, 0]
    cell.layer1_cosine = D._flat_cos(rec[:, 0], fp1[None])
    far = int(np.argmin(D._flat_cos(rec[ref - 1], fp1[None])))
    cell.min_layer_cosine = D._flat_cos(rec[:, 0], rec[ref - 1, far][None])
    cell.report = D.fixed_point_report(tr, ref)
    cell.converged = cell.report.all_converged
    cell.degenerate = cell.report.degenerate
    if check_prop1 and cell.converged:
        try:
            cell.prop1 = D.cyclic_shift_check(weights, x, tr.carried[-1], target=PROP1_TARGET, max_iter=PROP1_MAX_ITER, probe_seed=seed)
        except DivergedForwardError as exc:
            cell.error = f"cyclic-shift check diverged: {exc}"
    return cell


def run_stability_grid(spec: ExperimentSpec, threads: int = 1) -> StabilityGridResult:
    """Norm scheme x injection x seed grid of 12-layer models, no prelude or coda."""
    _require(spec, ExperimentKind.STABILITY_GRID)
    spec = replace(spec, model=replace(spec.model, prelude_layers=0, coda_layers=0, recurrent_layers=GRID_LAYERS))
    jobs = [(s, inj, seed) for s in spec.schemes for inj in spec.injection for seed in spec.seeds]
    cells = _run_map(lambda j: run_grid_cell(*j, spec), jobs, threads)
    return StabilityGridResult(cells, spec.loops, min(spec.reference, spec.loops))


def grid_artifacts(spec: ExperimentSpec, result: StabilityGridResult) -> dict:
    return {
        "grid_cells.csv": result.cells_csv(),
        "grid_mean.csv": result.mean_csv(),
        "grid_summary.json": _report(spec, cells=result.summary()),
    }


# --- dynamics -----------------------------------------------------------------------


def run_dynamics(spec: ExperimentSpec, threads: int = 1) -> dict:
    """Fixed points, successive differences and similarity matrices per seed."""
    _require(spec, ExperimentKind.DYNAMICS)
    capture = M.CaptureFlags(residuals=True, attentions=True, attn_inputs=False)

    def one(seed):
        arts, errors = {}, []
        _, tr = _trace(spec, seed, capture)
        sfx = f"_seed{seed}"
        try:
            arts[f"successive{sfx}.csv"] = D.successive_differences(tr).to_csv() + D.successive_cosines(tr).to_csv(header=False)
        except LoopdynError as exc:
            errors.append({"op": "successive_differences", "error": type(exc).__name__, "message": str(exc)})
        ref = min(spec.reference, spec.loops)
        rep = D.fixed_point_report(tr, ref)
        arts[f"fixed_points{sfx}.csv"] = rep.to_csv()
        arts[f"fixed_points{sfx}.json"] = rep.to_json() + "\n"
        for kind in D.SimilarityKind:
            sim = D.pairwise_similarity(tr, kind)
            arts[f"similarity_{kind.value}{sfx}.csv"] = sim.to_csv()
        summary = {"seed": seed, "reference": ref, "converged": rep.converged.tolist(), "degenerate": rep.degenerate, "errors": errors}
        return arts, summary

    results = _run_map(one, spec.seeds, threads)
    arts = {}
    for a, _ in results:
        arts.update(a)
    arts["dynamics_report.json"] = _report(spec, runs=[s for _, s in results])
    return arts


# --- metrics --------------------------------------------------------------------------


def run_metrics(spec: ExperimentSpec, threads: int = 1) -> dict:
    """Metric series over the seed batch in all three groupings."""
    _require(spec, ExperimentKind.METRICS)
    capture = M.CaptureFlags(residuals=True, attentions=True)
    traces = _run_map(lambda s: _trace(spec, s, capture)[1], spec.seeds, threads)
    arts = {}
    for g in Mt.Grouping:
        parts = []
        records = []
        for i, name in enumerate(spec.metrics):
            series = Mt.metric_over_trace(traces, Mt.AttentionMetric(name), g, sink_k=spec.sink_k)
            parts.append(series.to_csv(header=i == 0))
            records.extend(series.records())
        arts[f"metrics_{g.value}.csv"] = "".join(parts)
        arts[f"metrics_{g.value}.json"] = json.dumps(records, indent=1) + "\n"
    arts["metrics_report.json"] = _report(spec, n_traces=len(traces))
    return arts


# --- classification ----------------------------------------------------------------------


def classify_trace(trace: M.Trace, params: C.ClassifierParams, example: int = 0, layers=None) -> list[C.LabelRecord]:
    k = trace.config.recurrent_layers
    p = trace.config.prelude_layers
    layer_ids = range(k) if layers is None else [l - p for l in layers]
    out = []
    for j in layer_ids:
        for t in range(trace.n_tokens):
            s = C.build_token_series(trace, t, j)
            out.append(C.LabelRecord(example, t, p + j, C.classify_series(s, params)))
    return out


def run_classify(spec: ExperimentSpec, threads: int = 1) -> dict:
    _require(spec, ExperimentKind.CLASSIFY)
    if spec.loops < C.MIN_LENGTH + 1:
        raise SpecError(f"classification needs loops >= {C.MIN_LENGTH + 1}", "loops")
    capture = M.CaptureFlags(residuals=True, attentions=False)

    def one(seed):
        _, tr = _trace(spec, seed, capture)
        return classify_trace(tr, spec.classifier, example=seed, layers=spec.layers)

    records = [r for rs in _run_map(one, spec.seeds, threads) for r in rs]
    stats = C.label_statistics(records)
    return {
        "labels.csv": C.labels_csv(records),
        "label_statistics.json": C.statistics_json(stats) + "\n",
        "classify_report.json": _report(spec, n_labels=len(records)),
    }


# --- trajectories ------------------------------------------------------------------------


def run_trajectory(spec: ExperimentSpec, threads: int = 1) -> dict:
    _require(spec, ExperimentKind.TRAJECTORY)
    capture = M.CaptureFlags(residuals=True, attentions=False)

    def one(seed):
        _, tr = _trace(spec, seed, capture)
        traj = D.pca_trajectory(tr, spec.token)
        k = tr.config.recurrent_layers
        summary = {"seed": seed, "token": traj.token, "rank_deficient": traj.rank_deficient, "explained": traj.explained.tolist()}
        if tr.loops >= 2:
            rec = tr.recurrent[:, :, traj.token, :]
            summary["final_recurrence_gap"] = float(np.max(np.linalg.norm(rec[-1] - rec[-2], axis=-1)))
            seg = traj.segments()
            last, prev = seg[tr.loops - 1][-k:], seg[tr.loops - 2][-k:]
            summary["final_projection_gap"] = float(np.max(np.linalg.norm(last - prev, axis=-1)))
        return {f"trajectory_seed{seed}.csv": traj.to_csv()}, summary

    results = _run_map(one, spec.seeds, threads)
    arts = {}
    for a, _ in results:
        arts.update(a)
    arts["trajectory_report.json"] = _report(spec, runs=[s for _, s in results])
    return arts


# --- proposition-2 audit ---------------------------------------------------------------------


def audit_trace(trace: M.Trace, weights: M.ModelWeights, layers=None) -> list[D.BoundRecord]:
    p, k = trace.config.prelude_layers, trace.config.recurrent_layers
    ids = range(p, p + k) if layers is None else layers
    return [r for layer in ids for r in D.prop2_bound_check(trace, weights, layer)]


def run_prop2_audit(spec: ExperimentSpec, threads: int = 1) -> dict:
    _require(spec, ExperimentKind.PROP2_AUDIT)
    capture = M.CaptureFlags(residuals=False, attentions=True, attn_inputs=True)

    def one(seed):
        weights, tr = _trace(spec, seed, capture)
        return audit_trace(tr, weights, spec.layers)

    per_seed = _run_map(one, spec.seeds, threads)
    arts = {}
    violations = 0
    for seed, recs in zip(spec.seeds, per_seed):
        arts[f"prop2_seed{seed}.csv"] = D.bound_records_csv(recs)
        violations += sum(not r.holds for r in recs)
    arts["prop2_report.json"] = _report(spec, checks=sum(len(r) for r in per_seed), violations=violations)
    return arts


RUNNERS = {
    ExperimentKind.DYNAMICS: run_dynamics,
    ExperimentKind.METRICS: run_metrics,
    ExperimentKind.CLASSIFY: run_classify,
    ExperimentKind.TRAJECTORY: run_trajectory,
    ExperimentKind.PROP2_AUDIT: run_prop2_audit,
}


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> tuple[dict, bool]:
    """Artifacts for any spec kind, plus whether a grid cell diverged."""
    if spec.kind is ExperimentKind.STABILITY_GRID:
        res = run_stability_grid(spec, threads)
        return grid_artifacts(spec, res), any(c.status == "diverged" for c in res.cells)
    return RUNNERS[spec.kind](spec, threads), False
