"""
Maximum-likelihood training of CRF weights.

The likelihood of a partially observed example is
``log Z_clamped - log Z_free``: observed nodes are clamped to their labels
and hidden nodes are summed out. Gradients are moment differences of the
pairwise features (kernel value for weights, 1 for biases) under the two
distributions.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from src.core.exceptions import LabelError, TrainingError
from src.core.graph import FusionGraph
from src.core.models import NodeRef
from src.core.weights import KIND_FIELDS, MATRIX_FIELDS, SYMMETRIC_FIELDS, WeightSet, parameter_layout
from src.crf.inference import BPConfig, exact_enumerate, sum_product


logger = logging.getLogger('obstacle_fusion.training')

STEP_RULES = ("fixed-step", "line-search-quasi-newton")
RELATIVE_ERROR_FLOOR = 1e-3


@dataclass(frozen=True)
class TrainingExample:
    """A graph plus the labels of its non-hidden nodes."""
    graph: FusionGraph
    observed_labels: Mapping[NodeRef, int]

    def __post_init__(self):
        """Check the labels cover exactly the observed nodes."""
        expected = set(self.graph.observed())
        given = set(self.observed_labels)
        if given != expected:
            extra = sorted(map(str, given - expected))
            missing = sorted(map(str, expected - given))
            raise LabelError(f"Observed labels must cover exactly the non-hidden nodes "
                             f"(missing: {missing[:3]}, unexpected: {extra[:3]})")
        for ref, label in self.observed_labels.items():
            i = self.graph.index[ref]
            if not (0 <= label < self.graph.label_set.count) or not self.graph.admissible[i, label]:
                raise LabelError(f"Observed label {label} is inadmissible at node {ref}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings for ``fit``."""
    l2_lambda: float = 0.1
    max_outer_iterations: int = 100
    gradient_tolerance: float = 1e-4
    step_rule: str = "line-search-quasi-newton"
    tie_symmetric: bool = True
    step_size: float = 0.05
    exact_inference: bool = False
    threads: int = 1

    def __post_init__(self):
        """Validate ranges."""
        if self.l2_lambda < 0:
            raise TrainingError("l2_lambda must be nonnegative")
        if self.max_outer_iterations < 1:
            raise TrainingError("max_outer_iterations must be positive")
        if not self.gradient_tolerance > 0:
            raise TrainingError("gradient_tolerance must be positive")
        if self.step_rule not in STEP_RULES:
            raise TrainingError(f"Unknown step rule '{self.step_rule}' (expected one of {STEP_RULES})")
        if not self.step_size > 0:
            raise TrainingError("step_size must be positive")
        if self.threads < 1:
            raise TrainingError("threads must be positive")


@dataclass
class WeightGradient:
    """Gradient with the shape of a WeightSet.

    When ``tied`` is false the symmetric matrices hold one derivative per
    direction; ``to_vector`` adds the two directions of each tied parameter.
    """
    matrices: Dict[str, np.ndarray]
    tied: bool = True

    def __getitem__(self, name: str) -> np.ndarray:
        return self.matrices[name]

    def to_vector(self) -> np.ndarray:
        """Entries in ``parameter_layout`` order."""
        matrices = self.matrices
        if not self.tied:
            matrices = {name: (m + m.T if name in SYMMETRIC_FIELDS else m) for name, m in matrices.items()}
        count = matrices["w2d"].shape[0]
        return np.array([matrices[s.field][s.row, s.col] for s in parameter_layout(count)])

    def max_abs(self) -> float:
        return float(max(np.abs(m).max() for m in self.matrices.values()))


def _partitions(example: TrainingExample, weights: WeightSet, cfg: BPConfig, exact: bool):
    """(clamped, free) inference results."""
    if exact:
        return (exact_enumerate(example.graph, weights, clamp=example.observed_labels),
                exact_enumerate(example.graph, weights))
    clamped = sum_product(example.graph, weights, cfg, clamp=example.observed_labels)
    free = sum_product(example.graph, weights, cfg)
    return clamped, free


def _penalty(weights: WeightSet) -> Tuple[float, np.ndarray]:
    """(λ/2)‖θ_w‖² over the non-bias parameter vector and its gradient."""
    vector = weights.to_vector()
    masked = np.where(weights.non_bias_mask(), vector, 0.0)
    return 0.5 * weights.l2_lambda * float(masked @ masked), weights.l2_lambda * masked


def log_likelihood(example: TrainingExample, weights: WeightSet, cfg: BPConfig = BPConfig(),
                   exact: bool = False) -> float:
    """log p(observed labels | observations), hidden nodes marginalized."""
    clamped, free = _partitions(example, weights, cfg, exact)
    return float(clamped.log_partition - free.log_partition)


def regularized_log_likelihood(example: TrainingExample, weights: WeightSet,
                               cfg: BPConfig = BPConfig(), exact: bool = False) -> float:
    """Log-likelihood minus the L2 penalty on non-bias weights."""
    penalty, _ = _penalty(weights)
    return log_likelihood(example, weights, cfg, exact) - penalty


def _feature_moments(graph: FusionGraph, edge_marginals: Sequence[np.ndarray]) -> Dict[str, np.ndarray]:
    """Expected pairwise features per matrix entry, rows indexed by endpoint ``a``."""
    count = graph.label_set.count
    moments = {name: np.zeros((count, count)) for name in MATRIX_FIELDS}
    for edge, kernel, table in zip(graph.edges, graph.kernels, edge_marginals):
        w_name, b_name = KIND_FIELDS[edge.kind]
        moments[w_name] += kernel * table
        moments[b_name] += table
    off_diagonal = ~np.eye(count, dtype=bool)
    return {name: m * off_diagonal for name, m in moments.items()}


def _example_gradient(example: TrainingExample, weights: WeightSet, cfg: BPConfig,
                      tie_symmetric: bool, exact: bool) -> Tuple[float, Dict[str, np.ndarray], bool]:
    """Unregularized log-likelihood, gradient matrices and convergence flag."""
    clamped, free = _partitions(example, weights, cfg, exact)
    value = float(clamped.log_partition - free.log_partition)
    converged = getattr(clamped, "converged", True) and getattr(free, "converged", True)

    clamped_m = _feature_moments(example.graph, clamped.edge_marginals)
    free_m = _feature_moments(example.graph, free.edge_marginals)
    grads = {}
    for name in MATRIX_FIELDS:
        g = free_m[name] - clamped_m[name]
        if tie_symmetric and name in SYMMETRIC_FIELDS:
            g = g + g.T
        grads[name] = g
    return value, grads, converged


def gradient(example: TrainingExample, weights: WeightSet, cfg: BPConfig = BPConfig(),
             tie_symmetric: bool = True, exact: bool = False) -> WeightGradient:
    """Gradient of the regularized log-likelihood of one example.

    With ``tie_symmetric`` both directions of a symmetric label pair are
    accumulated into each tied entry, so the matrices stay symmetric and
    ``to_vector`` yields the derivative with respect to the free parameters.
    Without it each direction keeps its own entry; ``to_vector`` then adds
    them, so the parameter vector is the same either way.
    """
    _, grads, converged = _example_gradient(example, weights, cfg, tie_symmetric, exact)
    if not converged:
        logger.warning("Gradient computed from non-converged belief propagation")
    if weights.l2_lambda > 0:
        for name in MATRIX_FIELDS[:4]:
            # untied directions each carry half of a shared parameter's penalty
            share = 0.5 if not tie_symmetric and name in SYMMETRIC_FIELDS else 1.0
            grads[name] = grads[name] - share * weights.l2_lambda * getattr(weights, name)
    return WeightGradient(grads, tied=tie_symmetric)


def finite_diff_check(example: TrainingExample, weights: WeightSet, step: float = 1e-5,
                      cfg: BPConfig = BPConfig(), exact: Optional[bool] = None,
                      tie_symmetric: bool = True) -> float:
    """Largest relative error between the analytic gradient and central differences.

    Differences are taken on the free parameter vector of the regularized
    log-likelihood. With ``exact`` both partitions come from enumeration,
    otherwise from belief propagation (exact on forests, Bethe on cycles).
    Entries smaller than ``RELATIVE_ERROR_FLOOR`` in both estimates are
    compared on that absolute scale.
    """
    if not step > 0:
        raise TrainingError("Finite-difference step must be positive")
    use_exact = bool(exact)
    analytic = gradient(example, weights, cfg, tie_symmetric=tie_symmetric, exact=use_exact).to_vector()
    base = weights.to_vector()
    count = weights.count
    worst = 0.0
    for k in range(len(base)):
        up, down = base.copy(), base.copy()
        up[k] += step
        down[k] -= step
        f_up = regularized_log_likelihood(
            example, WeightSet.from_vector(up, count, weights.l2_lambda), cfg, use_exact)
        f_down = regularized_log_likelihood(
            example, WeightSet.from_vector(down, count, weights.l2_lambda), cfg, use_exact)
        numeric = (f_up - f_down) / (2.0 * step)
        scale = max(abs(analytic[k]), abs(numeric), RELATIVE_ERROR_FLOOR)
        worst = max(worst, abs(analytic[k] - numeric) / scale)
    return float(worst)


class _DatasetObjective:
    """Negative regularized log-likelihood of a dataset over the parameter vector."""

    def __init__(self, dataset: Sequence[TrainingExample], cfg: TrainConfig, bpcfg: BPConfig,
                 count: int, labels: Optional[Tuple[str, ...]]):
        self.dataset = list(dataset)
        self.cfg = cfg
        self.bpcfg = bpcfg
        self.count = count
        self.labels = labels
        self.layout = parameter_layout(count)
        self.non_bias = np.array([not s.is_bias for s in self.layout])
        self.evaluations = 0

    def weights(self, vector: np.ndarray) -> WeightSet:
        return WeightSet.from_vector(vector, self.count, self.cfg.l2_lambda, self.labels)

    def _one(self, item: Tuple[int, TrainingExample], weights: WeightSet):
        index, example = item
        value, grads, converged = _example_gradient(
            example, weights, self.bpcfg, self.cfg.tie_symmetric, self.cfg.exact_inference)
        if not converged:
            logger.warning(f"Training example {index}: belief propagation did not converge, "
                           f"using last iterate")
        return index, value, WeightGradient(grads, tied=self.cfg.tie_symmetric).to_vector()

    def __call__(self, vector: np.ndarray) -> Tuple[float, np.ndarray]:
        weights = self.weights(vector)
        items = list(enumerate(self.dataset))
        if self.cfg.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
                results = list(pool.map(lambda item: self._one(item, weights), items))
        else:
            results = [self._one(item, weights) for item in items]

        total = 0.0
        grad = np.zeros(len(vector))
        for index, value, g in results:
            if not np.isfinite(value) or not np.all(np.isfinite(g)):
                raise TrainingError(f"Non-finite objective on training example {index}")
            total += value
            grad += g

        masked = np.where(self.non_bias, vector, 0.0)
        total -= 0.5 * self.cfg.l2_lambda * float(masked @ masked)
        grad -= self.cfg.l2_lambda * masked
        self.evaluations += 1
        logger.debug(f"Objective evaluation {self.evaluations}: log-likelihood {total:.6f}, "
                     f"|grad|_inf {np.abs(grad).max() if len(grad) else 0.0:.3e}")
        return -total, -grad


def _fixed_step(objective: Callable, x0: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    x = x0.copy()
    for iteration in range(1, cfg.max_outer_iterations + 1):
        value, grad = objective(x)
        norm = float(np.abs(grad).max()) if len(grad) else 0.0
        logger.info(f"Training iteration {iteration}: objective {-value:.6f}, |grad|_inf {norm:.3e}")
        if norm < cfg.gradient_tolerance:
            break
        x = x - cfg.step_size * grad
    return x


def fit(dataset: Sequence[TrainingExample], cfg: TrainConfig = TrainConfig(),
        bpcfg: BPConfig = BPConfig(), init: Optional[WeightSet] = None) -> WeightSet:
    """Maximize the regularized log-likelihood summed over ``dataset``.

    The L2 penalty ``cfg.l2_lambda`` is applied once for the whole dataset.

    Raises:
        TrainingError: empty dataset or non-finite objective
    """
    if not dataset:
        raise TrainingError("Cannot fit on an empty dataset")
    labels = dataset[0].graph.label_set
    for index, example in enumerate(dataset):
        if example.graph.label_set != labels:
            raise TrainingError(f"Training example {index} uses a different label set")
    if init is None:
        init = WeightSet.zeros(labels.count)
    if init.count != labels.count:
        raise TrainingError(f"Initial weights cover {init.count} labels, dataset has {labels.count}")

    objective = _DatasetObjective(dataset, cfg, bpcfg, labels.count, labels.names)
    x0 = init.to_vector()
    logger.info(f"Fitting {len(x0)} parameters on {len(dataset)} examples "
                f"({cfg.step_rule}, lambda={cfg.l2_lambda})")

    if cfg.step_rule == "fixed-step":
        x = _fixed_step(objective, x0, cfg)
    else:
        iteration = [0]

        def report(xk):
            iteration[0] += 1
            logger.info(f"Training iteration {iteration[0]}")

        solution = optimize.minimize(
            objective, x0, jac=True, method="L-BFGS-B", callback=report,
            options={"maxiter": cfg.max_outer_iterations, "gtol": cfg.gradient_tolerance},
        )
        logger.info(f"Optimizer finished: {solution.message} after {solution.nit} iterations")
        x = solution.x

    fitted = objective.weights(x)
    fitted.validate()
    return fitted


def dataset_log_likelihood(dataset: Sequence[TrainingExample], weights: WeightSet,
                           bpcfg: BPConfig = BPConfig(), exact: bool = False) -> float:
    """Summed (unregularized) log-likelihood, used for held-out comparisons."""
    return float(sum(log_likelihood(example, weights, bpcfg, exact) for example in dataset))


def feature_moments(example: TrainingExample, weights: WeightSet, bpcfg: BPConfig = BPConfig(),
                    exact: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """(clamped, free) expected features in parameter-vector order."""
    clamped, free = _partitions(example, weights, bpcfg, exact)
    layout = parameter_layout(weights.count)

    def flatten(moments: Dict[str, np.ndarray]) -> np.ndarray:
        tied = {name: (m + m.T if name in SYMMETRIC_FIELDS else m) for name, m in moments.items()}
        return np.array([tied[s.field][s.row, s.col] for s in layout])

    return (flatten(_feature_moments(example.graph, clamped.edge_marginals)),
            flatten(_feature_moments(example.graph, free.edge_marginals)))
