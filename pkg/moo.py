"""
Constrained NSGA-II over surrogate predictions

Objectives (eta', tau1', tau2') are all minimized. Constraints are carried as
non-negative violation magnitudes; selection uses constraint-domination.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pymoo.indicators.hv import HV

from errors import InvalidBounds, NoFeasibleIndividual
from schemas import ABS_LENGTH_NAMES, TARGET_NAMES
from surrogate import SurrogateModel

logger = logging.getLogger(__name__)

CONSTRAINT_NAMES: Tuple[str, ...] = tuple(f"g{i}" for i in range(1, 11))
OBJECTIVE_NAMES: Tuple[str, ...] = ("eta_pred", "tau1_pred", "tau2_pred")


# ==================== PROBLEM ====================

class MooProblem:
    """Box-bounded problem returning objectives F (n, n_obj) and violations G (n, n_constr)"""

    def __init__(self, xl: Sequence[float], xu: Sequence[float], n_obj: int, n_constr: int = 0):
        self.xl = np.asarray(xl, dtype=float)
        self.xu = np.asarray(xu, dtype=float)
        if self.xl.shape != self.xu.shape or np.any(self.xl >= self.xu):
            raise InvalidBounds("Problem bounds must satisfy min < max for every variable")
        self.n_var = len(self.xl)
        self.n_obj = n_obj
        self.n_constr = n_constr

    def evaluate(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


@dataclass
class ConstraintStats:
    """Per-target dataset mean/std defining the in-distribution bands"""
    mean: np.ndarray
    std: np.ndarray
    z: float = 1.95

    @property
    def lower(self) -> np.ndarray:
        return self.mean - self.z * self.std

    @property
    def upper(self) -> np.ndarray:
        return self.mean + self.z * self.std


def evaluate_constraints(x: np.ndarray, preds: np.ndarray, stats: ConstraintStats) -> np.ndarray:
    """
    Violations of g1..g10, zero when satisfied

    g1-g3: predictions positive; g4: crank-rocker on absolute lengths;
    g5-g10: each prediction inside mean ± z·std (lower then upper per target).
    """
    single = np.ndim(preds) == 1
    x = np.atleast_2d(np.asarray(x, dtype=float))
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    G = np.zeros((len(x), len(CONSTRAINT_NAMES)))
    G[:, 0:3] = np.maximum(0.0, -preds)
    l1, l2, l3, l4 = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
    G[:, 3] = np.maximum(0.0, (l2 + l3) - (l1 + l4))
    lower, upper = stats.lower, stats.upper
    for k in range(3):
        G[:, 4 + 2 * k] = np.maximum(0.0, lower[k] - preds[:, k])
        G[:, 5 + 2 * k] = np.maximum(0.0, preds[:, k] - upper[k])
    return G[0] if single else G


class SurrogateProblem(MooProblem):
    """Six absolute lengths, surrogate objectives, g1..g10"""

    def __init__(self, surrogate: SurrogateModel, xl, xu, stats: ConstraintStats):
        super().__init__(xl, xu, n_obj=3, n_constr=len(CONSTRAINT_NAMES))
        if not (np.all(np.isfinite(stats.mean)) and np.all(np.isfinite(stats.std))):
            raise InvalidBounds("Constraint statistics must be finite")
        self.surrogate = surrogate
        self.stats = stats

    @classmethod
    def from_dataset(cls, surrogate: SurrogateModel, frame: pd.DataFrame, z: float = 1.95) -> "SurrogateProblem":
        X = frame[list(ABS_LENGTH_NAMES)].to_numpy(dtype=float)
        Y = frame[list(TARGET_NAMES)].to_numpy(dtype=float)
        stats = ConstraintStats(mean=Y.mean(axis=0), std=Y.std(axis=0), z=z)
        return cls(surrogate, X.min(axis=0), X.max(axis=0), stats)

    def evaluate(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        F = self.surrogate.predict(X)
        return F, evaluate_constraints(X, F, self.stats)


# ==================== RANKING ====================

def _domination_matrix(F: np.ndarray, cv: Optional[np.ndarray]) -> np.ndarray:
    """dom[i, j] is True when i constraint-dominates j"""
    n = len(F)
    cv = np.zeros(n) if cv is None else np.asarray(cv, dtype=float)
    le = np.all(F[:, None, :] <= F[None, :, :], axis=2)
    lt = np.any(F[:, None, :] < F[None, :, :], axis=2)
    pareto = le & lt
    feasible = cv <= 0
    both = feasible[:, None] & feasible[None, :]
    neither = ~feasible[:, None] & ~feasible[None, :]
    return (
        (both & pareto)
        | (feasible[:, None] & ~feasible[None, :])
        | (neither & (cv[:, None] < cv[None, :]))
    )


def non_dominated_sort(F: np.ndarray, cv: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """Fronts of indices, best first, under constraint-domination"""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    dom = _domination_matrix(F, cv)
    dominated_by = dom.sum(axis=0)
    assigned = np.zeros(len(F), dtype=bool)
    fronts: List[np.ndarray] = []
    while not assigned.all():
        current = np.flatnonzero((dominated_by == 0) & ~assigned)
        fronts.append(current)
        assigned[current] = True
        dominated_by = dominated_by - dom[current].sum(axis=0)
    return fronts


def crowding_distance(F: np.ndarray) -> np.ndarray:
    """Sum over objectives of the normalized gap between neighbours; boundaries are infinite"""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    n, n_obj = F.shape
    if n <= 2:
        return np.full(n, np.inf)
    distance = np.zeros(n)
    for m in range(n_obj):
        order = np.argsort(F[:, m], kind="stable")
        values = F[order, m]
        distance[order[0]] = np.inf
        distance[order[-1]] = np.inf
        span = values[-1] - values[0]
        if span <= 0:
            continue
        distance[order[1:-1]] += (values[2:] - values[:-2]) / span
    return distance


def rank_and_crowding(F: np.ndarray, cv: np.ndarray) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray]]:
    rank = np.zeros(len(F), dtype=int)
    crowd = np.zeros(len(F))
    fronts = non_dominated_sort(F, cv)
    for r, front in enumerate(fronts):
        rank[front] = r
        crowd[front] = crowding_distance(F[front])
    return rank, crowd, fronts


# ==================== VARIATION ====================

@dataclass
class VariationSettings:
    crossover_eta: float = 15.0
    crossover_prob: float = 0.9
    mutation_eta: float = 20.0
    mutation_prob: Optional[float] = None


def binary_tournament(rng: np.random.Generator, rank: np.ndarray, crowd: np.ndarray, n: int) -> np.ndarray:
    """Lower rank wins, then larger crowding; ranks already encode feasibility"""
    a = rng.integers(0, len(rank), size=n)
    b = rng.integers(0, len(rank), size=n)
    a_wins = (rank[a] < rank[b]) | ((rank[a] == rank[b]) & (crowd[a] >= crowd[b]))
    return np.where(a_wins, a, b)


def sbx_crossover(rng, parents_a, parents_b, xl, xu, eta, prob) -> Tuple[np.ndarray, np.ndarray]:
    """Simulated binary crossover with bound-aware spread"""
    c1, c2 = parents_a.copy(), parents_b.copy()
    n, n_var = parents_a.shape
    do_pair = rng.random(n) < prob
    do_var = (rng.random((n, n_var)) < 0.5) & do_pair[:, None]
    do_var &= np.abs(parents_a - parents_b) > 1e-14
    u = rng.random((n, n_var))
    swap = rng.random((n, n_var)) < 0.5

    y1 = np.minimum(parents_a, parents_b)
    y2 = np.maximum(parents_a, parents_b)
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = np.where(do_var, y2 - y1, 1.0)

        def betaq(beta):
            alpha = 2.0 - np.power(beta, -(eta + 1.0))
            low = np.power(u * alpha, 1.0 / (eta + 1.0))
            high = np.power(1.0 / (2.0 - u * alpha), 1.0 / (eta + 1.0))
            return np.where(u <= 1.0 / alpha, low, high)

        child1 = 0.5 * ((y1 + y2) - betaq(1.0 + 2.0 * (y1 - xl) / gap) * gap)
        child2 = 0.5 * ((y1 + y2) + betaq(1.0 + 2.0 * (xu - y2) / gap) * gap)
    child1 = np.clip(child1, xl, xu)
    child2 = np.clip(child2, xl, xu)
    first = np.where(swap, child2, child1)
    second = np.where(swap, child1, child2)
    c1[do_var] = first[do_var]
    c2[do_var] = second[do_var]
    return c1, c2


def polynomial_mutation(rng, X, xl, xu, eta, prob) -> np.ndarray:
    X = X.copy()
    span = xu - xl
    mutate = rng.random(X.shape) < prob
    u = rng.random(X.shape)
    delta1 = (X - xl) / span
    delta2 = (xu - X) / span
    power = 1.0 / (eta + 1.0)
    with np.errstate(invalid="ignore"):
        low = np.power(2.0 * u + (1.0 - 2.0 * u) * np.power(1.0 - delta1, eta + 1.0), power) - 1.0
        high = 1.0 - np.power(2.0 * (1.0 - u) + 2.0 * (u - 0.5) * np.power(1.0 - delta2, eta + 1.0), power)
    deltaq = np.where(u < 0.5, low, high)
    mutated = np.clip(X + deltaq * span, xl, xu)
    X[mutate] = mutated[mutate]
    return X


# ==================== ALGORITHM ====================

@dataclass
class Individual:
    x: np.ndarray
    objectives: np.ndarray
    violations: np.ndarray
    constraint_violation: float
    rank: int
    crowding: float


@dataclass
class Population:
    generation: int
    X: np.ndarray
    F: np.ndarray
    G: np.ndarray
    rank: np.ndarray
    crowding: np.ndarray

    @property
    def cv(self) -> np.ndarray:
        return self.G.sum(axis=1) if self.G.size else np.zeros(len(self.X))

    def __len__(self) -> int:
        return len(self.X)

    def individuals(self) -> List[Individual]:
        cv = self.cv
        return [
            Individual(self.X[i], self.F[i], self.G[i], float(cv[i]), int(self.rank[i]), float(self.crowding[i]))
            for i in range(len(self.X))
        ]

    def to_frame(self, variable_names: Sequence[str], objective_names: Sequence[str]) -> pd.DataFrame:
        frame = pd.DataFrame(self.X, columns=list(variable_names))
        for k, name in enumerate(objective_names):
            frame[name] = self.F[:, k]
        for k in range(self.G.shape[1]):
            frame[CONSTRAINT_NAMES[k] if k < len(CONSTRAINT_NAMES) else f"g{k + 1}"] = self.G[:, k]
        frame["cv"] = self.cv
        frame["rank"] = self.rank
        frame["crowding"] = self.crowding
        frame.insert(0, "generation", self.generation)
        return frame


@dataclass
class ParetoArchive:
    pareto: Population
    history: List[Population]
    config: Dict = field(default_factory=dict)


def _population(generation, X, F, G) -> Population:
    cv = G.sum(axis=1) if G.size else np.zeros(len(X))
    rank, crowd, _ = rank_and_crowding(F, cv)
    return Population(generation, X, F, G, rank, crowd)


def _survivors(F: np.ndarray, cv: np.ndarray, size: int) -> np.ndarray:
    keep: List[int] = []
    for front in non_dominated_sort(F, cv):
        if len(keep) + len(front) <= size:
            keep.extend(front.tolist())
            if len(keep) == size:
                break
            continue
        crowd = crowding_distance(F[front])
        order = np.argsort(-crowd, kind="stable")
        keep.extend(front[order[: size - len(keep)]].tolist())
        break
    return np.asarray(keep, dtype=int)


def nsga2(
    problem: MooProblem,
    pop_size: int = 100,
    generations: int = 200,
    seed: int = 0,
    settings: Optional[VariationSettings] = None,
) -> ParetoArchive:
    """
    Elitist non-dominated sorting GA

    Returns:
        ParetoArchive with the feasible first front of the final population
        and every generation's population (generation 0 is the random start)
    """
    if pop_size < 4 or pop_size % 2:
        raise ValueError("pop_size must be even and at least 4")
    settings = settings or VariationSettings()
    p_mut = settings.mutation_prob if settings.mutation_prob is not None else 1.0 / problem.n_var
    rng = np.random.default_rng(seed)
    xl, xu = problem.xl, problem.xu

    X = xl + rng.random((pop_size, problem.n_var)) * (xu - xl)
    F, G = problem.evaluate(X)
    population = _population(0, X, F, G)
    history = [population]

    for gen in range(1, generations + 1):
        mating = binary_tournament(rng, population.rank, population.crowding, pop_size)
        parents_a, parents_b = population.X[mating[0::2]], population.X[mating[1::2]]
        child_a, child_b = sbx_crossover(
            rng, parents_a, parents_b, xl, xu, settings.crossover_eta, settings.crossover_prob
        )
        offspring = polynomial_mutation(rng, np.vstack([child_a, child_b]), xl, xu, settings.mutation_eta, p_mut)
        F_off, G_off = problem.evaluate(offspring)

        X_all = np.vstack([population.X, offspring])
        F_all = np.vstack([population.F, F_off])
        G_all = np.vstack([population.G, G_off])
        cv_all = G_all.sum(axis=1) if G_all.size else np.zeros(len(X_all))
        keep = _survivors(F_all, cv_all, pop_size)
        population = _population(gen, X_all[keep], F_all[keep], G_all[keep])
        history.append(population)

        if gen % 50 == 0 or gen == generations:
            n_feasible = int(np.sum(population.cv <= 0))
            logger.info(f"generation {gen}: {n_feasible}/{pop_size} feasible")

    final_cv = population.cv
    best = (population.rank == 0) & (final_cv <= 0)
    if not best.any():
        raise NoFeasibleIndividual(f"No feasible design after {generations} generations")
    idx = np.flatnonzero(best)
    _, unique = np.unique(population.X[idx], axis=0, return_index=True)
    idx = idx[np.sort(unique)]
    F_best = population.F[idx]
    pareto = Population(
        generations, population.X[idx], F_best, population.G[idx],
        np.zeros(len(idx), dtype=int), crowding_distance(F_best),
    )
    config = {
        "pop_size": pop_size,
        "generations": generations,
        "seed": seed,
        "crossover_eta": settings.crossover_eta,
        "crossover_prob": settings.crossover_prob,
        "mutation_eta": settings.mutation_eta,
        "mutation_prob": p_mut,
    }
    return ParetoArchive(pareto=pareto, history=history, config=config)


def hypervolume(F: np.ndarray, ref_point: Sequence[float]) -> float:
    """Dominated hypervolume of the points below the reference point"""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    ref = np.asarray(ref_point, dtype=float)
    inside = np.all(F < ref, axis=1)
    if not inside.any():
        return 0.0
    return float(HV(ref_point=ref)(F[inside]))
