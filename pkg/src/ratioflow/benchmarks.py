"""Dataset generators, metrics and benchmark drivers.

Three experiments:

* Gaussian ratios: ``q = N(s 1, I)`` (label 1) against ``q' = N(0, I)``
  (label 0); MSE of estimated vs analytic log-ratios plus runtime of the
  single-solve estimator against the two-solve baseline.
* Mutual information: block-correlated ``N(0, Sigma)`` (label 1) against
  ``N(0, I)`` (label 0); MI is the mean log-ratio over samples of the first.
* Differential abundance: a 2-D four-cluster mixture whose binary treatment
  label is drawn with cluster-specific probabilities ``{0.5, 0.5+a, 0.5-a, 0.5}``.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from sklearn.metrics import average_precision_score

from .errors import ConfigurationError
from .flow_model import (ConditionSpec, FlowScoreModel, LabeledDataset, ModelConfig,
                         TrainConfig, checkpoint_hash, model_field_provider, train)
from .oracles import (GaussianSpec, analytic_log_ratio, block_correlated_cov, endpoint_gaussian,
                      mi_ground_truth, oracle_field_provider, shifted_gaussian,
                      standard_gaussian)
from .ratio import SolverConfig, estimate_log_ratio, naive_log_ratio
from .schedules import Schedule

REPORT_SCHEMA = 1
#: Solver used with closed-form oracle fields, which are finite on all of [0, 1].
ORACLE_SOLVER = SolverConfig("rk4", 200, 0.0)
DA_PROBS = lambda a: (0.5, 0.5 + a, 0.5 - a, 0.5)  # noqa: E731
DA_MEANS = ((-3.0, 3.0), (3.0, 3.0), (-3.0, -3.0), (3.0, -3.0))
DA_CLUSTERS = (1, 2, 3, 4)


# -- specs --------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianBenchSpec:
    """Sample counts are per condition."""

    s: float = 1.0
    d: int = 2
    n_train: int = 90_000
    n_test: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.n_train <= 0 or self.n_test <= 0:
            raise ConfigurationError("n_train and n_test must be positive")
        if self.d <= 0:
            raise ConfigurationError("d must be positive")


@dataclass(frozen=True)
class MiBenchSpec:
    """``n_samples`` training points per condition; ``n_eval`` evaluation points from q."""

    d: int = 20
    n_samples: int = 100_000
    seed: int = 0
    rho: float = 0.8
    n_eval: int = 1000
    n_eval_oracle: int = 10_000

    def __post_init__(self):
        if self.d <= 0 or self.d % 2:
            raise ConfigurationError(f"d must be a positive even integer, got {self.d}")
        if self.n_samples <= 0 or self.n_eval <= 0 or self.n_eval_oracle <= 0:
            raise ConfigurationError("sample counts must be positive")


@dataclass(frozen=True)
class DaBenchSpec:
    a: float = 0.0
    means: tuple = DA_MEANS
    n_per_cluster: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.a <= 0.5:
            raise ConfigurationError(f"a must lie in [0, 0.5], got {self.a}")
        means = tuple(tuple(float(v) for v in m) for m in self.means)
        if len(means) != 4 or any(len(m) != 2 for m in means):
            raise ConfigurationError("the DA mixture needs four 2-D cluster means")
        object.__setattr__(self, "means", means)
        if self.n_per_cluster <= 0:
            raise ConfigurationError("n_per_cluster must be positive")


# -- generators ---------------------------------------------------------------

BINARY = ConditionSpec((("label", 2),))
TREATMENT = ConditionSpec((("treatment", 2),))


def gen_two_gaussians(q: GaussianSpec, q0: GaussianSpec, n: int, rng) -> LabeledDataset:
    """``n`` points from ``q`` (label 1) followed by ``n`` from ``q0`` (label 0)."""
    x1 = q.sample(n, rng)
    x0 = q0.sample(n, rng)
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
    return LabeledDataset(np.vstack([x1, x0]), labels, BINARY)


def gen_shifted_gaussian(spec: GaussianBenchSpec, rng) -> LabeledDataset:
    """``n_train + n_test`` points from each of ``q`` (label 1) and ``q'`` (label 0)."""
    return gen_two_gaussians(shifted_gaussian(spec.s, spec.d), standard_gaussian(spec.d),
                             spec.n_train + spec.n_test, rng)


def gen_block_correlated(spec: MiBenchSpec, rng) -> LabeledDataset:
    """Label 1 ~ ``N(0, Sigma)`` drawn block by block, label 0 ~ ``N(0, I)``."""
    n, d = spec.n_samples, spec.d
    chol = np.linalg.cholesky(np.array([[1.0, spec.rho], [spec.rho, 1.0]]))
    z = rng.standard_normal((n, d // 2, 2))
    x1 = (z @ chol.T).reshape(n, d)
    x0 = rng.standard_normal((n, d))
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64)])
    return LabeledDataset(np.vstack([x1, x0]), labels, BINARY)


def gen_da_mixture(spec: DaBenchSpec, rng):
    """Returns ``(dataset, cluster_ids)`` with clusters numbered 1..4."""
    n = spec.n_per_cluster
    probs = DA_PROBS(spec.a)
    pts, treat, ids = [], [], []
    for cid, mean, p in zip(DA_CLUSTERS, spec.means, probs):
        pts.append(np.asarray(mean) + rng.standard_normal((n, 2)))
        treat.append((rng.random(n) < p).astype(np.int64))
        ids.append(np.full(n, cid, dtype=np.int64))
    return LabeledDataset(np.vstack(pts), np.concatenate(treat), TREATMENT), np.concatenate(ids)


def split_by_label(ds: LabeledDataset, n_test: int):
    """Last ``n_test`` rows of every label value form the test split."""
    test_mask = np.zeros(ds.n, dtype=bool)
    for value in np.unique(ds.labels[:, 0]):
        rows = np.flatnonzero(ds.labels[:, 0] == value)
        test_mask[rows[-n_test:]] = True
    return ds.where(~test_mask), ds.where(test_mask)


# -- metrics ------------------------------------------------------------------

def metric_mse(pred, truth) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    return float(np.mean((pred - truth) ** 2))


def metric_mae(pred, truth) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    return float(np.mean(np.abs(pred - truth)))


def metric_spearman(xs, ys) -> float:
    """Rank correlation with average ranks for ties; NaN for constant input."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if xs.shape != ys.shape or xs.size < 2:
        raise ConfigurationError("spearman needs two equal-length sequences of length >= 2")
    rx, ry = stats.rankdata(xs), stats.rankdata(ys)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        return float("nan")
    return float(np.corrcoef(rx, ry)[0, 1])


def metric_auc_pr(scores, labels) -> float:
    """Area under the precision-recall curve with step interpolation.

    Tied scores share one threshold, so a constant score gives the positive
    prevalence.
    """
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ConfigurationError("AUC-PR needs both positive and negative labels")
    return float(average_precision_score(labels, np.asarray(scores, float)))


def metric_nar(ratios, cluster_ids) -> float:
    """Mean ``|log r|`` over clusters 2, 3 divided by that over clusters 1, 4.

    A zero denominator returns ``inf``.
    """
    r = np.abs(np.asarray(ratios, float))
    ids = np.asarray(cluster_ids)
    da = np.isin(ids, (2, 3))
    base = np.isin(ids, (1, 4))
    if not da.any() or not base.any():
        raise ConfigurationError("NAR needs points in both DA and non-DA clusters")
    den = float(r[base].mean())
    if den == 0.0:
        return float("inf")
    return float(r[da].mean()) / den


def metric_csp(ratios, cluster_ids, a: float) -> Optional[float]:
    """Correct-sign proportion over clusters 2 (expect > 0) and 3 (expect < 0).

    Undefined when ``a == 0``; returns ``None`` then.
    """
    if a == 0:
        return None
    r = np.asarray(ratios, float)
    ids = np.asarray(cluster_ids)
    c2, c3 = ids == 2, ids == 3
    total = int(c2.sum() + c3.sum())
    if total == 0:
        raise ConfigurationError("CSP needs points in clusters 2 or 3")
    return float((np.count_nonzero(r[c2] > 0) + np.count_nonzero(r[c3] < 0)) / total)


def mc_standard_error(values) -> float:
    v = np.asarray(values, float)
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")


# -- reports ------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def spec_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


@dataclass
class MetricRecord:
    name: str
    value: Optional[float]
    n: int
    seed: int
    runtime_seconds: Optional[float] = None
    spec_hash: str = ""
    checkpoint_hash: Optional[str] = None
    config: dict = field(default_factory=dict)
    flag: Optional[str] = None


@dataclass
class BenchReport:
    """Records plus everything needed to rerun them.

    ``to_json`` holds only deterministic content; wall-clock timings are kept
    apart in ``timings_json`` so reruns produce byte-identical reports.
    """

    kind: str
    spec: dict
    records: list = field(default_factory=list)

    def add(self, **kw) -> MetricRecord:
        rec = MetricRecord(**kw)
        self.records.append(rec)
        return rec

    def get(self, name: str, **match) -> MetricRecord:
        for rec in self.records:
            if rec.name == name and all(rec.config.get(k) == v for k, v in match.items()):
                return rec
        raise KeyError(name)

    def value(self, name: str, **match):
        return self.get(name, **match).value

    def to_dict(self, timings: bool = False):
        recs = []
        for r in self.records:
            d = asdict(r)
            if not timings:
                d.pop("runtime_seconds")
            recs.append(d)
        return {"schema": REPORT_SCHEMA, "kind": self.kind, "spec": self.spec,
                "spec_hash": spec_hash(self.spec), "records": recs}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2) + "\n"

    def timings_json(self) -> str:
        rows = [{"name": r.name, "config": r.config, "runtime_seconds": r.runtime_seconds}
                for r in self.records if r.runtime_seconds is not None]
        return json.dumps({"schema": REPORT_SCHEMA, "kind": self.kind,
                           "spec_hash": spec_hash(self.spec), "timings": rows},
                          sort_keys=True, indent=2) + "\n"


def _jsonable(obj):
    """Replace non-finite floats by strings so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return "nan" if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _train_model(ds: LabeledDataset, schedule: Schedule, model_cfg: ModelConfig,
                 train_cfg: TrainConfig):
    rng = np.random.default_rng(train_cfg.seed)
    model = FlowScoreModel.create(ds.dim, ds.condition_spec, schedule, model_cfg, rng,
                                  train_cfg.t_window)
    start = time.perf_counter()
    model, trace = train(ds, model, train_cfg, rng)
    return model, trace, time.perf_counter() - start


def _bench_spec(kind, spec, schedule, model_cfg, train_cfg, solver, **extra):
    out = {"kind": kind, "data": asdict(spec), "schedule": schedule.to_dict(),
           "model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
           "solver": solver.to_dict()}
    out.update(extra)
    return json.loads(canonical_json(out))


def _loss_records(report, trace, n, seed, base):
    k = max(1, len(trace) // 20)
    report.add(name="train_loss_first5pct_median", value=float(np.median(trace[:k])), n=k,
               seed=seed, **base)
    report.add(name="train_loss_last5pct_median", value=float(np.median(trace[-k:])), n=k,
               seed=seed, **base)


# -- drivers ------------------------------------------------------------------

def run_gaussian_bench(spec: GaussianBenchSpec, schedule: Schedule,
                       train_cfg: TrainConfig, solver: SolverConfig = SolverConfig(),
                       model_cfg: ModelConfig = ModelConfig(), n_eval: Optional[int] = 1000,
                       return_model: bool = False):
    """Train one conditional model; score held-out ``q`` points with S1, naive and oracle."""
    rng = np.random.default_rng(spec.seed)
    ds = gen_shifted_gaussian(spec, rng)
    train_ds, test_ds = split_by_label(ds, spec.n_test)
    q, q0 = shifted_gaussian(spec.s, spec.d), standard_gaussian(spec.d)
    x = test_ds.with_label((1,))
    if n_eval is not None:
        x = x[:n_eval]
    bench = _bench_spec("gaussians", spec, schedule, model_cfg, train_cfg, solver, n_eval=n_eval)
    report = BenchReport("gaussians", bench)
    sh = spec_hash(bench)

    model, trace, train_time = _train_model(train_ds, schedule, model_cfg, train_cfg)
    ck = checkpoint_hash(model)
    base = {"spec_hash": sh, "checkpoint_hash": ck}
    n = x.shape[0]
    truth = analytic_log_ratio(q, q0, x)

    num, den = model_field_provider(model, (1,)), model_field_provider(model, (0,))
    s1 = estimate_log_ratio(x, num, den, solver=solver)
    naive = naive_log_ratio(num, den, x, solver=solver)
    report.add(name="train_seconds", value=None, n=train_cfg.steps, seed=train_cfg.seed,
               runtime_seconds=train_time, **base)
    _loss_records(report, trace, n, train_cfg.seed, base)
    report.add(name="mse_scratio_s1", value=metric_mse(s1.values, truth), n=n, seed=spec.seed,
               runtime_seconds=s1.runtime_seconds, **base)
    report.add(name="mse_naive", value=metric_mse(naive.values, truth), n=n, seed=spec.seed,
               runtime_seconds=naive.runtime_seconds, **base)
    report.add(name="n_failed_s1", value=s1.n_failed, n=n, seed=spec.seed, **base)
    report.add(name="n_failed_naive", value=naive.n_failed, n=n, seed=spec.seed, **base)
    report.add(name="naive_over_s1_runtime", value=None, n=n, seed=spec.seed,
               runtime_seconds=naive.runtime_seconds / s1.runtime_seconds, **base)
    if train_cfg.dropout_beta > 0:
        s2 = estimate_log_ratio(x, num, den, model_field_provider(model, (None,)), solver)
        report.add(name="mse_scratio_s2", value=metric_mse(s2.values, truth), n=n,
                   seed=spec.seed, runtime_seconds=s2.runtime_seconds, **base)

    # oracle fields: exact ODE right-hand side, so only solver error remains
    onum, oden = oracle_field_provider(q, schedule), oracle_field_provider(q0, schedule)
    orc = estimate_log_ratio(x, onum, oden, solver=ORACLE_SOLVER)
    flow_truth = analytic_log_ratio(endpoint_gaussian(q, schedule),
                                    endpoint_gaussian(q0, schedule), x)
    obase = {"spec_hash": sh, "checkpoint_hash": None, "config": {"solver": ORACLE_SOLVER.to_dict()}}
    report.add(name="mse_oracle", value=metric_mse(orc.values, flow_truth), n=n, seed=spec.seed,
               runtime_seconds=orc.runtime_seconds, **obase)
    report.add(name="mse_oracle_vs_data_ratio", value=metric_mse(orc.values, truth), n=n,
               seed=spec.seed, **obase)
    if return_model:
        return report, model
    return report


def run_mi_bench(spec: MiBenchSpec, schedule: Schedule, train_cfg: TrainConfig,
                 solver: SolverConfig = SolverConfig(), model_cfg: ModelConfig = ModelConfig(),
                 oracle_solver: SolverConfig = ORACLE_SOLVER):
    """MI as the mean S1 log-ratio over fresh samples of the correlated Gaussian."""
    rng = np.random.default_rng(spec.seed)
    ds = gen_block_correlated(spec, rng)
    q = GaussianSpec(np.zeros(spec.d), block_correlated_cov(spec.d, spec.rho))
    q0 = standard_gaussian(spec.d)
    x_eval = q.sample(max(spec.n_eval, spec.n_eval_oracle), rng)
    truth = mi_ground_truth(spec.d, spec.rho)
    bench = _bench_spec("mi", spec, schedule, model_cfg, train_cfg, solver,
                        oracle_solver=oracle_solver.to_dict())
    report = BenchReport("mi", bench)
    sh = spec_hash(bench)
    report.add(name="mi_ground_truth", value=truth, n=0, seed=spec.seed, spec_hash=sh)

    onum, oden = oracle_field_provider(q, schedule), oracle_field_provider(q0, schedule)
    xo = x_eval[:spec.n_eval_oracle]
    orc = estimate_log_ratio(xo, onum, oden, solver=oracle_solver)
    mi_o = float(np.mean(orc.values))
    obase = {"spec_hash": sh, "config": {"estimator": "oracle"}}
    report.add(name="mi_estimate", value=mi_o, n=xo.shape[0], seed=spec.seed,
               runtime_seconds=orc.runtime_seconds, **obase)
    report.add(name="mi_mae", value=abs(mi_o - truth), n=xo.shape[0], seed=spec.seed, **obase)
    report.add(name="mi_mc_standard_error", value=mc_standard_error(orc.values), n=xo.shape[0],
               seed=spec.seed, **obase)

    model, trace, train_time = _train_model(ds, schedule, model_cfg, train_cfg)
    ck = checkpoint_hash(model)
    base = {"spec_hash": sh, "checkpoint_hash": ck}
    report.add(name="train_seconds", value=None, n=train_cfg.steps, seed=train_cfg.seed,
               runtime_seconds=train_time, **base)
    _loss_records(report, trace, train_cfg.steps, train_cfg.seed, base)
    xm = x_eval[:spec.n_eval]
    res = estimate_log_ratio(xm, model_field_provider(model, (1,)),
                             model_field_provider(model, (0,)), solver=solver)
    vals = res.values[res.converged]
    mi_m = float(np.mean(vals)) if vals.size else float("nan")
    tbase = dict(base, config={"estimator": "scratio_s1"})
    report.add(name="mi_estimate", value=mi_m, n=int(vals.size), seed=spec.seed,
               runtime_seconds=res.runtime_seconds, **tbase)
    report.add(name="mi_mae", value=abs(mi_m - truth), n=int(vals.size), seed=spec.seed, **tbase)
    report.add(name="mi_mc_standard_error", value=mc_standard_error(vals), n=int(vals.size),
               seed=spec.seed, **tbase)
    report.add(name="n_failed", value=res.n_failed, n=xm.shape[0], seed=spec.seed, **tbase)
    return report


def run_da_bench(specs: Sequence[DaBenchSpec], schedule: Schedule, train_cfg: TrainConfig,
                 solver: SolverConfig = SolverConfig(), model_cfg: ModelConfig = ModelConfig(),
                 n_eval: Optional[int] = None):
    """Per ``a``: train a treatment-conditional model, score ``log r(x | 1, 0)`` with S1.

    ``n_eval`` caps the scored points per cluster (``None`` scores all).
    """
    specs = list(specs)
    if not specs:
        raise ConfigurationError("the DA benchmark needs at least one spec")
    bench = _bench_spec("da", specs[0], schedule, model_cfg, train_cfg, solver,
                        a_values=[s.a for s in specs], seeds=[s.seed for s in specs],
                        n_eval=n_eval)
    report = BenchReport("da", bench)
    sh = spec_hash(bench)
    rows = []
    for spec in specs:
        rng = np.random.default_rng(spec.seed)
        ds, ids = gen_da_mixture(spec, rng)
        model, trace, train_time = _train_model(ds, schedule, model_cfg, train_cfg)
        base = {"spec_hash": sh, "checkpoint_hash": checkpoint_hash(model),
                "config": {"a": spec.a}}
        keep = np.ones(ds.n, dtype=bool)
        if n_eval is not None:
            keep = np.zeros(ds.n, dtype=bool)
            for cid in DA_CLUSTERS:
                keep[np.flatnonzero(ids == cid)[:n_eval]] = True
        x, cid = ds.points[keep], ids[keep]
        res = estimate_log_ratio(x, model_field_provider(model, (1,)),
                                 model_field_provider(model, (0,)), solver=solver)
        r = np.where(res.converged, res.values, 0.0)
        n = x.shape[0]
        auc = metric_auc_pr(np.abs(r), np.isin(cid, (2, 3)))
        nar = metric_nar(r, cid)
        csp = metric_csp(r, cid, spec.a)
        report.add(name="train_seconds", value=None, n=train_cfg.steps, seed=spec.seed,
                   runtime_seconds=train_time, **base)
        _loss_records(report, trace, train_cfg.steps, spec.seed, base)
        report.add(name="auc_pr", value=auc, n=n, seed=spec.seed,
                   runtime_seconds=res.runtime_seconds, **base)
        report.add(name="nar", value=nar, n=n, seed=spec.seed,
                   flag=None if np.isfinite(nar) else "zero_denominator", **base)
        report.add(name="csp", value=csp, n=n, seed=spec.seed,
                   flag="not_applicable" if csp is None else None, **base)
        report.add(name="n_failed", value=res.n_failed, n=n, seed=spec.seed, **base)
        for c in DA_CLUSTERS:
            m = cid == c
            report.add(name="cluster_mean_log_ratio", value=float(r[m].mean()),
                       n=int(m.sum()), seed=spec.seed,
                       **dict(base, config={"a": spec.a, "cluster": c}))
        rows.append((spec.a, auc, nar, csp))

    if len(rows) >= 2:
        a_vals = [row[0] for row in rows]
        for j, name in ((1, "auc_pr"), (2, "nar")):
            report.add(name=f"spearman_{name}_vs_a", value=metric_spearman(a_vals, [r[j] for r in rows]),
                       n=len(rows), seed=specs[0].seed, spec_hash=sh)
        csp_rows = [(row[0], row[3]) for row in rows if row[3] is not None]
        if len(csp_rows) >= 2:
            report.add(name="spearman_csp_vs_a",
                       value=metric_spearman(*zip(*csp_rows)), n=len(csp_rows),
                       seed=specs[0].seed, spec_hash=sh)
    return report
