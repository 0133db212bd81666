"""Two-stage training, conformal training of the correction model, and
repeated-split evaluation with hard conformal prediction."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import conformal as cp
from . import smooth
from .config import ExperimentConfig
from .conformal import ScoreKind
from .exceptions import CalibrationError, LeakageError, RankCPError
from .gcn import (GcnParams, TrainHyper, correction_logits, cross_entropy, forward_base,
                  forward_correction, init_correction_params, log_probs, sgd_momentum_step,
                  train_base)
from .graph import Graph, NodeSplit, generate_sbm, load_dataset, normalized_adjacency, split_nodes
from .tensor import Tape, backward

__all__ = [
    "VARIANTS",
    "MetricsRecord",
    "RunResult",
    "build_graph",
    "conformal_pools",
    "evaluate",
    "make_split",
    "read_results_csv",
    "run_ablation",
    "run_conformal_training",
    "run_experiment",
    "run_once",
    "summarize",
    "write_results_csv",
    "write_summary_csv",
]

# variant -> (score kind, conformal loss enabled)
VARIANTS: Dict[str, Tuple[str, bool]] = {
    "rcp-gnn": ("rank", True),
    "rcp-thr": ("thr", True),
    "rcp-aps": ("aps", True),
    "wo-conf-tr": ("rank", False),
}

# Stream tags keeping the per-purpose random generators independent.
_SPLIT, _POOL, _COR_INIT, _FOLD, _EVAL = range(5)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def run_seed(cfg: ExperimentConfig, run: int) -> int:
    return cfg.run.seed + run


@dataclass(frozen=True)
class MetricsRecord:
    run: int
    split: int
    score: str
    alpha: float
    coverage: float
    ineff: float

    def __post_init__(self):
        if not 0 <= self.coverage <= 1:
            raise RankCPError(f"coverage {self.coverage} outside [0, 1]")
        if self.ineff < 0:
            raise RankCPError(f"inefficiency {self.ineff} is negative")


def build_graph(cfg: ExperimentConfig) -> Graph:
    ds = cfg.dataset
    if ds.source == "files":
        return load_dataset(ds.features, ds.edges, ds.labels)
    return generate_sbm(ds.blocks, ds.p_in, ds.p_out, ds.feature_dim, ds.feature_noise, ds.seed)


def make_split(cfg: ExperimentConfig, g: Graph, run: int) -> NodeSplit:
    ds = cfg.dataset
    rest = 1.0 - ds.train_ratio - ds.valid_ratio
    return split_nodes(g, (ds.train_ratio, ds.valid_ratio, rest), ds.calib_fraction,
                       seed=int(_rng(run_seed(cfg, run), _SPLIT).integers(2**32)))


def conformal_pools(split: NodeSplit, holdout_fraction: float, seed: int):
    """Divide the calibration nodes into a conformal-training pool and a
    held-out part; the evaluation pool is the held-out part plus the test set.

    Returns ``(train_pool, eval_pool)`` as sorted id arrays.
    """
    perm = _rng(seed, _POOL).permutation(split.calib)
    n_hold = int(math.floor(holdout_fraction * len(perm) + 1e-9))
    held, pool = perm[:n_hold], perm[n_hold:]
    if len(pool) == 0 or n_hold == 0:
        raise RankCPError("holdout_fraction leaves an empty conformal-training or held-out pool")
    return np.sort(pool), np.sort(np.concatenate([held, split.test]))


def _smooth_scores(tape, probs, kind: ScoreKind, tau):
    if kind is ScoreKind.RANK:
        return smooth.smooth_rank_scores(tape, probs, tau)
    if kind is ScoreKind.APS:
        return smooth.smooth_aps_scores(tape, probs, tau)
    return probs


def _smooth_low_in_set(kind: ScoreKind) -> bool:
    # Soft ranks grow for less likely classes; the soft APS mass and the raw
    # probability grow for more likely ones.
    return kind is ScoreKind.RANK


def _quantile_level(kind: ScoreKind, alpha: float, n: int) -> float:
    base = 1 - alpha if _smooth_low_in_set(kind) else alpha
    return base * (1 + 1 / n)


def _min_fold(alpha: float) -> int:
    return int(math.ceil(1 / alpha - 1e-9))


def _cp_loss(tape, probs, calib_idx, calib_labels, pred_idx, kind, sc: smooth.SmoothConfig):
    """Conformity loss: threshold from ``calib_idx`` rows, soft sizes on ``pred_idx`` rows."""
    low = _smooth_low_in_set(kind)
    calib_p = tape.apply("gather-rows", probs, index=calib_idx)
    true = smooth.true_class_scores(tape, _smooth_scores(tape, calib_p, kind, sc.tau),
                                    calib_labels)
    level = _quantile_level(kind, sc.alpha, len(calib_idx))
    eta = smooth.smooth_quantile(tape, true, level, sc.quantile_tau)
    pred_p = tape.apply("gather-rows", probs, index=pred_idx)
    sizes = smooth.soft_set_size(tape, _smooth_scores(tape, pred_p, kind, sc.tau), eta,
                                 sc.tau, sc.kappa, low)
    return smooth.conformity_loss(tape, sizes, tape.value(probs).shape[1])


@dataclass
class _CorrectionProblem:
    """Constant inputs shared by every conformal-training epoch."""

    g: Graph
    split: NodeSplit
    adj: np.ndarray
    mu: np.ndarray
    train_pool: np.ndarray

    def __post_init__(self):
        self.log_mu = log_probs(self.mu)
        self.amu = self.adj @ self.mu

    def tape_with(self, weights):
        tape = Tape()
        ws = [tape.parameter(w) for w in weights]
        logits = correction_logits(tape, tape.constant(self.adj), tape.constant(self.mu),
                                   tape.constant(self.log_mu), ws, tape.constant(self.amu))
        return tape, ws, logits


def _validation_key(problem: _CorrectionProblem, weights, kind, sc, conformal):
    """(objective on D_val, hard inefficiency on D_val) for model selection."""
    tape, _, logits = problem.tape_with(weights)
    labels = problem.g.labels
    val = problem.split.valid
    obj = tape.value(cross_entropy(tape, logits, val, labels))[0, 0]
    probs = tape.apply("row-softmax", logits)
    if conformal:
        pool = problem.train_pool
        lcp = tape.value(_cp_loss(tape, probs, pool, labels[pool], val, kind, sc))[0, 0]
        obj = obj + sc.lam * lcp
    p = tape.value(probs)
    cal = cp.calibrate(p[problem.train_pool], labels[problem.train_pool], sc.alpha, kind)
    hard = cp.inefficiency(cp.build_sets(p[val], cal, kind, sc.alpha))
    return float(obj), hard


def run_conformal_training(cfg: ExperimentConfig, g: Graph, split: NodeSplit,
                           base_params: GcnParams, run: int = 0, variant: str = "rcp-gnn",
                           adj=None, record: Optional[list] = None) -> GcnParams:
    """Train the correction model on frozen base probabilities.

    Every epoch re-splits the conformal-training pool into two halves, takes
    a smooth quantile of true-class scores on the first, and penalizes soft
    set sizes on the second, alongside cross-entropy on the training nodes.
    Returns the weights with the lowest validation objective; ties go to the
    smaller hard inefficiency, then to the earlier epoch.

    If ``record`` is a list, ``(epoch, training loss, validation objective)``
    tuples are appended to it.
    """
    score, conformal = _variant(cfg, variant)
    kind = ScoreKind.parse(score)
    sc = cfg.smooth()
    if not conformal:
        sc = smooth.SmoothConfig(sc.tau, sc.kappa, 0.0, sc.alpha, sc.quantile_tau)
    seed = run_seed(cfg, run)
    adj = normalized_adjacency(g) if adj is None else adj
    train_pool, _ = conformal_pools(split, cfg.dataset.holdout_fraction, seed)
    half = len(train_pool) // 2
    if conformal and half < _min_fold(sc.alpha):
        raise CalibrationError(
            f"conformal-training folds of {half} nodes are smaller than "
            f"ceil(1/alpha) = {_min_fold(sc.alpha)}")
    mu = forward_base(g, base_params, adj=adj)
    problem = _CorrectionProblem(g, split, adj, mu, train_pool)

    m = cfg.model
    params = init_correction_params(g.n_classes, m.cor_hidden, m.cor_layers,
                                    seed=int(_rng(seed, _COR_INIT).integers(2**32)))
    weights = list(params.layer_weights)
    velocity = [np.zeros_like(w) for w in weights]
    best_key = _validation_key(problem, weights, kind, sc, conformal)
    best = params
    labels = g.labels
    for epoch in range(m.cor_epochs):
        tape, ws, logits = problem.tape_with(weights)
        loss = cross_entropy(tape, logits, split.train, labels)
        if conformal:
            folds = _rng(seed, _FOLD, epoch).permutation(train_pool)
            calib_hat, test_hat = folds[:half], folds[half:]
            probs = tape.apply("row-softmax", logits)
            lcp = _cp_loss(tape, probs, calib_hat, labels[calib_hat], test_hat, kind, sc)
            loss = smooth.total_loss(tape, loss, lcp, sc.lam)
        value = float(tape.value(loss)[0, 0])
        grads = backward(tape, loss)
        weights, velocity = sgd_momentum_step(weights, [grads[w] for w in ws], velocity,
                                              m.cor_lr, m.momentum)
        key = _validation_key(problem, weights, kind, sc, conformal)
        if record is not None:
            record.append((epoch, value, key[0]))
        if key < best_key:
            best_key, best = key, params.replace(weights)
    return best


def _variant(cfg: ExperimentConfig, variant: str) -> Tuple[str, bool]:
    """Score kind and conformal flag; ``rcp-gnn`` follows the configured score."""
    if variant not in VARIANTS:
        raise RankCPError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    if variant == "rcp-gnn":
        return cfg.cp.score, True
    return VARIANTS[variant]


def evaluate(probs: np.ndarray, labels, eval_pool, training_nodes, alpha: float, kind,
             n_splits: int, seed: int, run: int = 0) -> List[MetricsRecord]:
    """Hard conformal prediction over random 50/50 calib/eval splits of ``eval_pool``."""
    kind = ScoreKind.parse(kind)
    eval_pool = np.asarray(eval_pool, dtype=np.int64)
    overlap = np.intersect1d(eval_pool, np.asarray(training_nodes, dtype=np.int64))
    if overlap.size:
        raise LeakageError(f"{overlap.size} evaluation nodes were used in training, "
                           f"e.g. node {overlap[0]}")
    labels = np.asarray(labels)
    half = len(eval_pool) // 2
    records = []
    for s in range(n_splits):
        perm = _rng(seed, _EVAL, s).permutation(eval_pool)
        cal, ev = perm[:half], perm[half:]
        calibration = cp.calibrate(probs[cal], labels[cal], alpha, kind)
        sets = cp.build_sets(probs[ev], calibration, kind, alpha)
        records.append(MetricsRecord(run, s, kind.value, alpha,
                                     cp.coverage(sets, labels[ev]), cp.inefficiency(sets)))
    return records


@dataclass
class RunResult:
    run: int
    split: NodeSplit
    base_params: GcnParams
    cor_params: GcnParams
    train_pool: np.ndarray
    eval_pool: np.ndarray
    probs: np.ndarray
    records: List[MetricsRecord] = field(default_factory=list)
    trajectory: list = field(default_factory=list)

    @property
    def training_nodes(self) -> np.ndarray:
        return np.concatenate([self.split.train, self.split.valid, self.train_pool])


def run_once(cfg: ExperimentConfig, g: Graph, run: int, variant: str = "rcp-gnn",
             alphas: Optional[Sequence[float]] = None, adj=None,
             base_params: Optional[GcnParams] = None) -> RunResult:
    """One seeded run: split, base training, conformal training, evaluation."""
    adj = normalized_adjacency(g) if adj is None else adj
    seed = run_seed(cfg, run)
    split = make_split(cfg, g, run)
    m = cfg.model
    if base_params is None:
        base_params = train_base(g, split, TrainHyper(m.lr, m.epochs, m.hidden, m.layers,
                                                      m.momentum, seed), adj=adj)
    trajectory: list = []
    cor = run_conformal_training(cfg, g, split, base_params, run, variant, adj, trajectory)
    probs = forward_correction(forward_base(g, base_params, adj=adj), g, cor, adj=adj)
    train_pool, eval_pool = conformal_pools(split, cfg.dataset.holdout_fraction, seed)
    result = RunResult(run, split, base_params, cor, train_pool, eval_pool, probs,
                       trajectory=trajectory)
    kind = _variant(cfg, variant)[0]
    for alpha in (cfg.cp.alpha,) if alphas is None else alphas:
        result.records.extend(evaluate(probs, g.labels, eval_pool, result.training_nodes,
                                       alpha, kind, cfg.run.splits, seed, run))
    return result


def _run_job(args):
    cfg, g, run, variant, alphas = args
    return run_once(cfg, g, run, variant, alphas)


def run_experiment(cfg: ExperimentConfig, variant: str = "rcp-gnn",
                   alphas: Optional[Sequence[float]] = None, g: Optional[Graph] = None,
                   jobs: Optional[int] = None) -> List[RunResult]:
    """All ``cfg.run.runs`` runs of one variant, in run order."""
    g = build_graph(cfg) if g is None else g
    jobs = cfg.run.jobs if jobs is None else jobs
    tasks = [(cfg, g, r, variant, alphas) for r in range(cfg.run.runs)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_job, tasks))
    return [_run_job(t) for t in tasks]


def run_ablation(cfg: ExperimentConfig, variant: str, g: Optional[Graph] = None,
                 jobs: Optional[int] = None) -> List[MetricsRecord]:
    """Metrics for one ablation variant under the configured seeds."""
    _variant(cfg, variant)
    results = run_experiment(cfg, variant, g=g, jobs=jobs)
    return [rec for res in results for rec in res.records]


RESULTS_HEADER = "run,split,score,alpha,coverage,ineff"
SUMMARY_HEADER = "score,alpha,runs,splits,coverage_mean,coverage_sd,ineff_mean,ineff_sd"


def write_results_csv(path, records: Iterable[MetricsRecord]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(RESULTS_HEADER + "\n")
        for r in records:
            fh.write(f"{r.run},{r.split},{r.score},{r.alpha!r},"
                     f"{r.coverage:.6f},{r.ineff:.6f}\n")
    return path


def read_results_csv(path) -> List[MetricsRecord]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise RankCPError(f"cannot read {path}: {err}") from None
    if not lines or lines[0].strip() != RESULTS_HEADER:
        raise RankCPError(f"{path}: missing header '{RESULTS_HEADER}'")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            run, split, score, alpha, cov, ineff = parts
            records.append(MetricsRecord(int(run), int(split), score, float(alpha),
                                         float(cov), float(ineff)))
        except (ValueError, RankCPError):
            raise RankCPError(f"{path}:{lineno}: malformed row") from None
    if not records:
        raise RankCPError(f"{path}: no result rows")
    return records


def summarize(records: Iterable[MetricsRecord]) -> List[dict]:
    """Per (score, alpha): mean and population sd across runs of per-run means."""
    groups: Dict[tuple, Dict[int, list]] = {}
    for r in records:
        groups.setdefault((r.score, r.alpha), {}).setdefault(r.run, []).append(r)
    rows = []
    for (score, alpha), runs in sorted(groups.items()):
        cov = np.array([np.mean([r.coverage for r in rs]) for rs in runs.values()])
        ineff = np.array([np.mean([r.ineff for r in rs]) for rs in runs.values()])
        rows.append(dict(score=score, alpha=alpha, runs=len(runs),
                         splits=max(len(rs) for rs in runs.values()),
                         coverage_mean=float(cov.mean()), coverage_sd=float(cov.std()),
                         ineff_mean=float(ineff.mean()), ineff_sd=float(ineff.std())))
    return rows


def write_summary_csv(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        for row in rows:
            fh.write(f"{row['score']},{row['alpha']!r},{row['runs']},{row['splits']},"
                     f"{row['coverage_mean']:.6f},{row['coverage_sd']:.6f},"
                     f"{row['ineff_mean']:.6f},{row['ineff_sd']:.6f}\n")
    return path
