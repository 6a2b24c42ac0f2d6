"""
Design-rule extraction: Sobol sensitivity, shallow regression trees near the
Pareto set, variable/objective correlations and derivative statistics of eta
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from SALib.analyze import sobol as sobol_analyze
from SALib.sample import sobol as sobol_sample
from scipy import stats
from sklearn.tree import DecisionTreeRegressor

from errors import DataError, EmptyInput, InsufficientHistory, NumericalError
from geometry import is_crank_rocker, workspace_area_polar
from moo import ParetoArchive
from schemas import (
    ABS_LENGTH_NAMES,
    CorrelationPair,
    CorrelationReport,
    DerivativeReport,
    RuleCheck,
    SobolIndices,
    SobolReport,
    TreeNode,
    VariableDistribution,
)
from services.executor import parallel_map

logger = logging.getLogger(__name__)

OBJECTIVE_LABELS: Tuple[str, ...] = ("eta", "tau1", "tau2")


# ==================== SOBOL ====================

def sobol_indices(
    model: Union[Callable[[np.ndarray], np.ndarray], object],
    bounds: Sequence[Tuple[float, float]],
    base_n: int = 1024,
    seed: int = 0,
    variable_names: Optional[Sequence[str]] = None,
    objective_names: Optional[Sequence[str]] = None,
    num_resamples: int = 100,
) -> SobolReport:
    """
    First- and total-order Sobol indices of every model output

    Args:
        model: anything with `predict(X)` or a callable mapping (n, d) to (n, k)
        bounds: (low, high) per input
        base_n: Saltelli base sample size, a power of two

    Returns:
        SobolReport over base_n * (2d + 2) model evaluations
    """
    if base_n < 2 or base_n & (base_n - 1):
        raise ValueError(f"base_n must be a power of two, got {base_n}")
    bounds = [tuple(map(float, b)) for b in bounds]
    names = list(variable_names or [f"x{i + 1}" for i in range(len(bounds))])
    problem = {"num_vars": len(bounds), "names": names, "bounds": [list(b) for b in bounds]}

    X = sobol_sample.sample(problem, base_n, calc_second_order=True, seed=seed)
    evaluate = model.predict if hasattr(model, "predict") else model
    Y = np.asarray(evaluate(X), dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    objectives = list(objective_names or [f"y{k + 1}" for k in range(Y.shape[1])])
    logger.info(f"Sobol: {len(X)} evaluations of {len(objectives)} outputs (N={base_n}, d={len(names)})")

    results: Dict[str, SobolIndices] = {}
    for k, objective in enumerate(objectives):
        Si = sobol_analyze.analyze(
            problem,
            Y[:, k],
            calc_second_order=True,
            num_resamples=num_resamples,
            conf_level=0.95,
            seed=seed,
        )
        s1, st = np.asarray(Si["S1"], dtype=float), np.asarray(Si["ST"], dtype=float)
        s1_conf, st_conf = np.asarray(Si["S1_conf"], dtype=float), np.asarray(Si["ST_conf"], dtype=float)
        # a negative index inside its bootstrap interval is sampling noise
        negative = (s1 < -s1_conf) | (st < -st_conf)
        if negative.any():
            flagged = [names[i] for i in np.flatnonzero(negative)]
            logger.warning(f"Sobol indices of {objective} are negative beyond their bootstrap interval for {flagged}")
        results[objective] = SobolIndices(
            S1=s1.tolist(),
            S1_conf=s1_conf.tolist(),
            ST=st.tolist(),
            ST_conf=st_conf.tolist(),
            negative_flags=negative.tolist(),
        )
    return SobolReport(variables=names, objectives=results, base_n=base_n, n_evaluations=len(X), seed=seed)


# ==================== DECISION TREES ====================

def _to_node(tree, node_id: int, depth: int, feature_names: Sequence[str]) -> TreeNode:
    left, right = tree.children_left[node_id], tree.children_right[node_id]
    node = TreeNode(
        depth=depth,
        n_samples=int(tree.n_node_samples[node_id]),
        value=float(tree.value[node_id][0][0]),
    )
    if left == right:
        return node
    return node.model_copy(update={
        "feature": feature_names[tree.feature[node_id]],
        "threshold": float(tree.threshold[node_id]),
        "left": _to_node(tree, left, depth + 1, feature_names),
        "right": _to_node(tree, right, depth + 1, feature_names),
    })


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    max_depth: int = 3,
    feature_names: Optional[Sequence[str]] = None,
    min_samples_leaf: int = 5,
    seed: int = 0,
) -> TreeNode:
    """
    CART regression tree: greedy squared-error splits with `x <= threshold`
    going left. A constant target yields a single leaf.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(X) < 2:
        raise DataError(f"A tree needs at least 2 samples, got {len(X)}")
    if max_depth < 1:
        raise ValueError("max_depth must be at least 1")
    names = list(feature_names or [f"x{i + 1}" for i in range(X.shape[1])])
    leaf = max(1, min(min_samples_leaf, len(X) // 2))
    regressor = DecisionTreeRegressor(max_depth=max_depth, min_samples_leaf=leaf, random_state=seed)
    regressor.fit(X, y)
    root = _to_node(regressor.tree_, 0, 0, names)
    if root.is_leaf:
        logger.info("Target has no usable variance; tree is a single leaf")
    return root


def split_directions(node: TreeNode) -> List[Dict]:
    """
    Which side of each split lowers the target, for reading the tree as a
    minimization rule and as the opposite (maximization) rule
    """
    out: List[Dict] = []
    stack = [node]
    while stack:
        current = stack.pop(0)
        if current.is_leaf:
            continue
        lower = "left" if current.left.value <= current.right.value else "right"
        out.append({
            "depth": current.depth,
            "feature": current.feature,
            "threshold": current.threshold,
            "minimize_side": lower,
            "maximize_side": "right" if lower == "left" else "left",
        })
        stack.extend([current.left, current.right])
    return out


def _describe(node: TreeNode, unit: str) -> str:
    if unit == "m":
        return f"{node.feature} <= {node.threshold:.6f} m ({node.threshold * 1000.0:.3f} mm)"
    return f"{node.feature} <= {node.threshold:.6g}"


def render_tree_text(node: TreeNode, target: str = "y", unit: str = "m") -> str:
    """Indented text with one line per node"""
    lines = [f"tree for {target} (depth {node.max_depth()})"]

    def walk(current: TreeNode, prefix: str) -> None:
        pad = "    " * current.depth
        if current.is_leaf:
            lines.append(f"{pad}{prefix}leaf: {target} = {current.value:.6g} (n={current.n_samples})")
            return
        lower = "left" if current.left.value <= current.right.value else "right"
        lines.append(
            f"{pad}{prefix}{_describe(current, unit)} (n={current.n_samples}, mean={current.value:.6g}, "
            f"lower {target} on the {lower})"
        )
        walk(current.left, "yes: ")
        walk(current.right, "no:  ")

    walk(node, "")
    return "\n".join(lines) + "\n"


def render_tree_dot(node: TreeNode, target: str = "y", unit: str = "m") -> str:
    """Graphviz DOT description of the tree"""
    lines = [f'digraph "{target}" {{', "    node [shape=box];"]
    counter = [0]

    def walk(current: TreeNode) -> int:
        node_id = counter[0]
        counter[0] += 1
        if current.is_leaf:
            label = f"{target} = {current.value:.6g}\\nn = {current.n_samples}"
            lines.append(f'    n{node_id} [label="{label}", style=rounded];')
            return node_id
        label = f"{_describe(current, unit)}\\nn = {current.n_samples}\\nmean = {current.value:.6g}"
        lines.append(f'    n{node_id} [label="{label}"];')
        left_id = walk(current.left)
        right_id = walk(current.right)
        lines.append(f'    n{node_id} -> n{left_id} [label="yes"];')
        lines.append(f'    n{node_id} -> n{right_id} [label="no"];')
        return node_id

    walk(node)
    lines.append("}")
    return "\n".join(lines) + "\n"


# ==================== CORRELATIONS ====================

def _finite_or_none(value: float) -> Optional[float]:
    value = float(value)
    return value if np.isfinite(value) else None


def correlations(
    X: np.ndarray,
    Y: np.ndarray,
    alpha: float = 0.05,
    variable_names: Optional[Sequence[str]] = None,
    objective_names: Optional[Sequence[str]] = None,
) -> CorrelationReport:
    """
    Pearson and Spearman coefficients for every (variable, objective) pair

    A pair where either side is constant has no coefficient and is reported
    as not significant.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    Y = Y[:, None] if Y.ndim == 1 else Y
    if len(X) != len(Y):
        raise DataError(f"X has {len(X)} rows but Y has {len(Y)}")
    if len(X) < 3:
        raise DataError(f"Correlations need at least 3 samples, got {len(X)}")
    variables = list(variable_names or [f"x{i + 1}" for i in range(X.shape[1])])
    objectives = list(objective_names or [f"y{k + 1}" for k in range(Y.shape[1])])

    pairs: List[CorrelationPair] = []
    for i, variable in enumerate(variables):
        for k, objective in enumerate(objectives):
            x, y = X[:, i], Y[:, k]
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                pairs.append(CorrelationPair(
                    variable=variable, objective=objective,
                    pearson_r=None, pearson_p=None, spearman_rho=None, spearman_p=None,
                    pearson_significant=False, spearman_significant=False,
                ))
                continue
            r, p_r = stats.pearsonr(x, y)
            rho, p_rho = stats.spearmanr(x, y)
            r, p_r = _finite_or_none(np.clip(r, -1.0, 1.0)), _finite_or_none(p_r)
            rho, p_rho = _finite_or_none(np.clip(rho, -1.0, 1.0)), _finite_or_none(p_rho)
            pairs.append(CorrelationPair(
                variable=variable, objective=objective,
                pearson_r=r, pearson_p=p_r, spearman_rho=rho, spearman_p=p_rho,
                pearson_significant=p_r is not None and p_r < alpha,
                spearman_significant=p_rho is not None and p_rho < alpha,
            ))
    return CorrelationReport(alpha=alpha, n_samples=len(X), pairs=pairs)


# ==================== NEIGHBORHOOD ====================

@dataclass
class NeighborhoodSet:
    """Designs near the Pareto set with their surrogate objectives"""
    X: np.ndarray
    F: np.ndarray
    source: List[str]
    generation: np.ndarray

    def __len__(self) -> int:
        return len(self.X)

    @property
    def n_pareto(self) -> int:
        return sum(1 for s in self.source if s == "pareto")

    def to_frame(self, variable_names: Sequence[str], objective_names: Sequence[str]) -> pd.DataFrame:
        frame = pd.DataFrame(self.X, columns=list(variable_names))
        for k, name in enumerate(objective_names):
            frame[name] = self.F[:, k]
        frame["source"] = self.source
        frame["generation"] = self.generation
        return frame


def extract_neighborhood(
    archive: ParetoArchive,
    n_pareto: int = 100,
    n_history: int = 300,
    seed: int = 0,
) -> NeighborhoodSet:
    """
    Pareto members plus individuals from the last three generations

    Pareto members are sampled without replacement (all of them when there
    are no more than n_pareto); the history rows are drawn from the union of
    the last three populations.
    """
    if len(archive.history) < 3:
        raise InsufficientHistory(f"Need at least 3 generations of history, archive has {len(archive.history)}")
    rng = np.random.default_rng(seed)

    pareto = archive.pareto
    if len(pareto) <= n_pareto:
        p_idx = np.arange(len(pareto))
    else:
        p_idx = np.sort(rng.choice(len(pareto), size=n_pareto, replace=False))

    last = archive.history[-3:]
    hX = np.vstack([pop.X for pop in last])
    hF = np.vstack([pop.F for pop in last])
    hgen = np.concatenate([np.full(len(pop), pop.generation) for pop in last])
    if len(hX) <= n_history:
        h_idx = np.arange(len(hX))
    else:
        h_idx = np.sort(rng.choice(len(hX), size=n_history, replace=False))
    if len(h_idx) < n_history:
        logger.warning(f"Only {len(h_idx)} history rows available, {n_history} requested")

    return NeighborhoodSet(
        X=np.vstack([pareto.X[p_idx], hX[h_idx]]),
        F=np.vstack([pareto.F[p_idx], hF[h_idx]]),
        source=["pareto"] * len(p_idx) + ["history"] * len(h_idx),
        generation=np.concatenate([np.full(len(p_idx), pareto.generation), hgen[h_idx]]),
    )


# ==================== DERIVATIVES ====================

def _eta(lengths_abs: np.ndarray, task_area: float, phi_samples: int, levels: int) -> float:
    if not is_crank_rocker(lengths_abs):
        raise NumericalError("Perturbed design is no longer a crank-rocker")
    return task_area / workspace_area_polar(lengths_abs, phi_samples, levels)


def eta_gradient(
    lengths_abs: Sequence[float],
    task_area: float,
    h: float = 1e-3,
    phi_samples: int = 2048,
    levels: int = 512,
) -> np.ndarray:
    """
    Central differences of eta = task_area / workspace_area with a relative
    step h on each absolute length

    Raises:
        NumericalError: when a perturbed design cannot be evaluated
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(lengths_abs, dtype=float)
    grad = np.empty_like(x)
    for i in range(len(x)):
        step = h * x[i]
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (_eta(up, task_area, phi_samples, levels) - _eta(down, task_area, phi_samples, levels)) / (2.0 * step)
    return grad


def _gradient_job(args) -> Optional[List[float]]:
    lengths, task_area, h, phi_samples, levels = args
    try:
        return eta_gradient(lengths, task_area, h, phi_samples, levels).tolist()
    except NumericalError:
        return None


def _distribution(name: str, values: np.ndarray) -> VariableDistribution:
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    inside = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
    return VariableDistribution(
        variable=name,
        mean_abs=float(np.mean(np.abs(values))),
        mean=float(np.mean(values)),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
    )


def derivative_stats(
    designs_abs: np.ndarray,
    task_area: float,
    h: float = 1e-3,
    variable_names: Sequence[str] = ABS_LENGTH_NAMES,
    phi_samples: int = 2048,
    levels: int = 512,
    workers: Optional[int] = None,
) -> DerivativeReport:
    """
    Box-plot statistics of d eta / d x_i over a set of feasible designs,
    evaluated on the geometric workspace, not the surrogate

    Designs where a perturbation leaves the feasible region are skipped and
    counted.
    """
    designs_abs = np.atleast_2d(np.asarray(designs_abs, dtype=float))
    if len(designs_abs) == 0:
        raise EmptyInput("No designs to differentiate")
    grads = parallel_map(
        _gradient_job,
        [(row, task_area, h, phi_samples, levels) for row in designs_abs],
        workers,
    )
    kept = np.array([g for g in grads if g is not None], dtype=float)
    skipped = len(grads) - len(kept)
    if skipped:
        logger.info(f"Derivative statistics skipped {skipped} designs whose perturbation broke feasibility")
    if len(kept) == 0:
        raise NumericalError("Every design broke feasibility under perturbation")
    return DerivativeReport(
        step_rel=h,
        n_designs=len(kept),
        n_skipped=skipped,
        variables=[_distribution(name, kept[:, i]) for i, name in enumerate(variable_names)],
    )


# ==================== RULES ====================

def scale_scatter(frame: pd.DataFrame) -> pd.DataFrame:
    """Objective columns colored by the absolute frame length"""
    columns = ["eta", "tau1_nm", "tau2_nm", "scale_m"]
    return frame[columns].reset_index(drop=True)


def design_rule_checks(
    sobol: SobolReport,
    trees: Dict[str, TreeNode],
    neighborhood: CorrelationReport,
    objective_pairs: CorrelationReport,
    derivatives: Optional[DerivativeReport],
    key_variable: str = "eex_abs",
) -> List[RuleCheck]:
    """
    Evaluate the expected qualitative design rules. Failures are reported with
    the computed values, never raised.
    """
    checks: List[RuleCheck] = []

    largest = {}
    for objective, indices in sobol.objectives.items():
        top = sobol.variables[int(np.nanargmax(indices.ST))]
        largest[objective] = top
    checks.append(RuleCheck(
        rule="largest Sobol total index is ee_x for every objective",
        passed=all(v == key_variable for v in largest.values()),
        detail={"largest_total_index": largest},
    ))

    roots = {name: trees[name].feature for name in ("tau1", "tau2") if name in trees}
    checks.append(RuleCheck(
        rule="tree root splits on ee_x for tau1 and tau2",
        passed=bool(roots) and all(v == key_variable for v in roots.values()),
        detail={"root_feature": roots},
    ))

    torque_pair = objective_pairs.pairs[0] if objective_pairs.pairs else None
    torque_r = torque_pair.pearson_r if torque_pair else None
    checks.append(RuleCheck(
        rule="Pearson(tau1, tau2) >= 0.8 near the Pareto set",
        passed=torque_r is not None and torque_r >= 0.8,
        detail={"pearson_r": torque_r},
    ))

    for variable in (key_variable, "l1_abs"):
        try:
            pair = neighborhood.get(variable, "eta")
        except KeyError:
            pair = None
        r = pair.pearson_r if pair else None
        checks.append(RuleCheck(
            rule=f"Pearson({variable}, eta) is negative and significant",
            passed=pair is not None and r is not None and r < 0 and pair.pearson_significant,
            detail={"pearson_r": r, "pearson_p": pair.pearson_p if pair else None},
        ))

    if derivatives is not None:
        top3 = derivatives.ranking()[:3]
        checks.append(RuleCheck(
            rule="ee_x and l3 are among the top three mean |d eta / dx|",
            passed=key_variable in top3 and "l3_abs" in top3,
            detail={"top3": top3},
        ))

    for check in checks:
        level = logging.INFO if check.passed else logging.WARNING
        logger.log(level, f"Design rule '{check.rule}': {'pass' if check.passed else 'FAIL'} {check.detail}")
    return checks
