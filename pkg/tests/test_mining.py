import math
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from errors import DataError, EmptyInput, InsufficientHistory
from geometry import workspace_area_polar
from mining import (
    correlations,
    derivative_stats,
    design_rule_checks,
    eta_gradient,
    extract_neighborhood,
    fit_tree,
    render_tree_dot,
    render_tree_text,
    scale_scatter,
    sobol_indices,
    split_directions,
)
from moo import ParetoArchive, Population
from schemas import (
    ABS_LENGTH_NAMES,
    CorrelationPair,
    CorrelationReport,
    DerivativeReport,
    SobolIndices,
    SobolReport,
    TreeNode,
    VariableDistribution,
)

UNIT_BOX = [(0.0, 1.0)] * 3
REFERENCE_ABS = 0.5 * np.array([1.0, 0.25, 0.95, 0.5, 1.2, 0.45])
TASK_AREA = math.pi * 0.025 ** 2


def population(generation, n, seed):
    rng = np.random.default_rng(seed)
    return Population(
        generation=generation,
        X=rng.uniform(size=(n, 6)),
        F=rng.uniform(size=(n, 3)),
        G=np.zeros((n, 10)),
        rank=np.zeros(n, dtype=int),
        crowding=np.zeros(n),
    )


def pair(variable, objective, r, p=0.001):
    return CorrelationPair(
        variable=variable, objective=objective,
        pearson_r=r, pearson_p=p, spearman_rho=r, spearman_p=p,
        pearson_significant=p < 0.05, spearman_significant=p < 0.05,
    )


class TestSobol:
    def test_single_active_input(self):
        report = sobol_indices(lambda X: X[:, 0], UNIT_BOX, base_n=4096, seed=1)
        s = report.objectives["y1"]
        assert s.S1[0] == pytest.approx(1.0, abs=0.02)
        assert s.ST[0] == pytest.approx(1.0, abs=0.02)
        assert max(abs(v) for v in s.ST[1:]) < 0.02

    def test_equal_additive_inputs(self):
        s = sobol_indices(lambda X: X[:, 0] + X[:, 1], UNIT_BOX, base_n=4096, seed=2).objectives["y1"]
        assert s.S1[0] == pytest.approx(0.5, abs=0.03)
        assert s.S1[1] == pytest.approx(0.5, abs=0.03)

    def test_additive_first_order_sums_to_one(self):
        s = sobol_indices(
            lambda X: X[:, 0] + 2.0 * X[:, 1] + 3.0 * X[:, 2], UNIT_BOX, base_n=4096, seed=6,
        ).objectives["y1"]
        assert sum(s.S1) == pytest.approx(1.0, abs=0.05)

    def test_pure_interaction(self):
        box = [(-1.0, 1.0)] * 3
        s = sobol_indices(lambda X: X[:, 0] * X[:, 1], box, base_n=4096, seed=3).objectives["y1"]
        assert abs(s.S1[0]) < 0.05 and abs(s.S1[1]) < 0.05
        assert s.ST[0] == pytest.approx(1.0, abs=0.05)
        assert s.ST[1] == pytest.approx(1.0, abs=0.05)

    def test_negative_flag_uses_bootstrap_interval(self):
        analysis = {
            "S1": np.array([0.6, -0.01, -0.2]),
            "S1_conf": np.array([0.02, 0.05, 0.05]),
            "ST": np.array([0.7, 0.02, 0.1]),
            "ST_conf": np.array([0.02, 0.05, 0.05]),
        }
        with patch("mining.sobol_analyze.analyze", return_value=analysis):
            s = sobol_indices(lambda X: X[:, 0], UNIT_BOX, base_n=8, seed=0).objectives["y1"]
        assert s.negative_flags == [False, False, True]

    def test_evaluation_count(self):
        report = sobol_indices(lambda X: X.sum(axis=1), [(0.0, 1.0)] * 6, base_n=64, seed=0)
        assert report.n_evaluations == 14 * 64

    def test_multiple_outputs_are_named(self):
        report = sobol_indices(
            lambda X: np.column_stack([X[:, 0], X[:, 2]]), UNIT_BOX, base_n=128,
            variable_names=["a", "b", "c"], objective_names=["first", "second"],
        )
        assert set(report.objectives) == {"first", "second"}
        assert report.variables == ["a", "b", "c"]

    def test_base_n_power_of_two(self):
        with pytest.raises(ValueError, match="power of two"):
            sobol_indices(lambda X: X[:, 0], UNIT_BOX, base_n=1000)


class TestTrees:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.X = rng.uniform(size=(200, 2))
        self.y = (self.X[:, 0] > 0.5).astype(float)

    def test_step_function_split(self):
        root = fit_tree(self.X, self.y, max_depth=1, feature_names=["a", "b"])
        assert root.feature == "a"
        assert root.threshold == pytest.approx(0.5, abs=0.05)
        assert root.left.value == pytest.approx(0.0)
        assert root.right.value == pytest.approx(1.0)

    def test_constant_target_is_a_leaf(self):
        root = fit_tree(self.X, np.full(200, 3.0), max_depth=3)
        assert root.is_leaf
        assert root.value == 3.0

    def test_root_split_minimizes_squared_error(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(size=(40, 3))
        y = X[:, 1] ** 2 + 0.3 * X[:, 2]

        def sse(mask):
            return sum(((y[m] - y[m].mean()) ** 2).sum() for m in (mask, ~mask) if m.any())

        best = min(
            sse(X[:, j] <= t)
            for j in range(3)
            for t in np.unique(X[:, j])[:-1]
        )
        root = fit_tree(X, y, max_depth=1, min_samples_leaf=1)
        j = int(root.feature[1:]) - 1
        assert sse(X[:, j] <= root.threshold) == pytest.approx(best)

    def test_leaf_value_is_mean_of_routed_samples(self):
        rng = np.random.default_rng(6)
        y = self.X[:, 1] * 2 + rng.normal(scale=0.1, size=200)
        root = fit_tree(self.X, y, max_depth=3, feature_names=["a", "b"])
        predicted = np.array([root.predict_one({"a": a, "b": b}) for a, b in self.X])
        for value in np.unique(predicted):
            assert y[predicted == value].mean() == pytest.approx(value)

    def test_depth_limit(self):
        root = fit_tree(self.X, self.X[:, 0] + self.X[:, 1], max_depth=2)
        assert root.max_depth() <= 2

    def test_split_directions(self):
        root = fit_tree(self.X, self.y, max_depth=1, feature_names=["a", "b"])
        directions = split_directions(root)
        assert directions == [{
            "depth": 0, "feature": "a", "threshold": root.threshold,
            "minimize_side": "left", "maximize_side": "right",
        }]

    def test_rendering(self):
        root = fit_tree(self.X, self.y, max_depth=1, feature_names=["eex_abs", "l3_abs"])
        text = render_tree_text(root, target="tau1")
        assert text.startswith("tree for tau1 (depth 1)")
        assert "eex_abs <= " in text and " mm)" in text
        assert "yes: leaf" in text and "no:  leaf" in text
        dot = render_tree_dot(root, target="tau1")
        assert dot.startswith('digraph "tau1"')
        assert dot.count("->") == 2

    def test_json_round_trip(self):
        root = fit_tree(self.X, self.X[:, 0], max_depth=3)
        assert TreeNode.model_validate_json(root.model_dump_json()) == root

    def test_too_few_samples(self):
        with pytest.raises(DataError):
            fit_tree(self.X[:1], self.y[:1])


class TestCorrelations:
    def setup_method(self):
        self.x = np.linspace(0.1, 2.0, 30)

    def test_linear(self):
        report = correlations(self.x, 2 * self.x)
        result = report.get("x1", "y1")
        assert result.pearson_r == pytest.approx(1.0)
        assert result.spearman_rho == pytest.approx(1.0)
        assert result.pearson_significant

    def test_monotone_nonlinear(self):
        result = correlations(self.x, self.x ** 3).get("x1", "y1")
        assert result.spearman_rho == pytest.approx(1.0)
        assert result.pearson_r < 1.0

    def test_constant_column(self):
        X = np.column_stack([self.x, np.ones_like(self.x)])
        result = correlations(X, self.x, variable_names=["a", "b"]).get("b", "y1")
        assert result.pearson_r is None and result.spearman_rho is None
        assert not result.pearson_significant

    def test_coefficients_bounded(self):
        rng = np.random.default_rng(2)
        report = correlations(rng.normal(size=(50, 4)), rng.normal(size=(50, 2)))
        assert len(report.pairs) == 8
        assert all(-1 <= p.pearson_r <= 1 and -1 <= p.spearman_rho <= 1 for p in report.pairs)

    def test_row_mismatch(self):
        with pytest.raises(DataError):
            correlations(self.x, self.x[:-1])


class TestNeighborhood:
    def setup_method(self):
        self.archive = ParetoArchive(
            pareto=population(9, 8, seed=100),
            history=[population(g, 10, seed=g) for g in range(10)],
        )

    def test_counts(self):
        hood = extract_neighborhood(self.archive, n_pareto=5, n_history=20, seed=1)
        assert len(hood) == 25
        assert hood.n_pareto == 5
        assert set(hood.generation[5:]) <= {7, 8, 9}

    def test_small_sets_taken_whole(self):
        hood = extract_neighborhood(self.archive, n_pareto=100, n_history=300)
        assert len(hood) == 8 + 30

    def test_seeded(self):
        a = extract_neighborhood(self.archive, n_pareto=5, n_history=20, seed=4)
        b = extract_neighborhood(self.archive, n_pareto=5, n_history=20, seed=4)
        assert np.array_equal(a.X, b.X)

    def test_frame(self):
        frame = extract_neighborhood(self.archive, 3, 6).to_frame(ABS_LENGTH_NAMES, ["eta", "tau1", "tau2"])
        assert list(frame["source"]) == ["pareto"] * 3 + ["history"] * 6

    def test_insufficient_history(self):
        archive = ParetoArchive(pareto=self.archive.pareto, history=self.archive.history[:2])
        with pytest.raises(InsufficientHistory):
            extract_neighborhood(archive)


class TestDerivatives:
    def test_euler_homogeneity(self):
        grad = eta_gradient(REFERENCE_ABS, TASK_AREA, h=1e-3, phi_samples=1024, levels=256)
        eta = TASK_AREA / workspace_area_polar(REFERENCE_ABS, 1024, 256)
        assert float(REFERENCE_ABS @ grad) == pytest.approx(-2 * eta, rel=0.05)

    def test_converges_when_step_is_halved(self):
        rng = np.random.default_rng(4)
        designs = REFERENCE_ABS * rng.uniform(0.97, 1.03, size=(4, 6))
        converged = 0
        for lengths in designs:
            coarse = eta_gradient(lengths, TASK_AREA, h=2e-3)
            fine = eta_gradient(lengths, TASK_AREA, h=1e-3)
            converged += np.linalg.norm(fine - coarse) < 0.01 * np.linalg.norm(fine)
        assert converged / len(designs) >= 0.95

    def test_stats(self):
        designs = np.vstack([REFERENCE_ABS, REFERENCE_ABS * 1.3])
        report = derivative_stats(designs, TASK_AREA, phi_samples=512, levels=128, workers=1)
        assert report.n_designs + report.n_skipped == 2
        assert [v.variable for v in report.variables] == list(ABS_LENGTH_NAMES)
        for v in report.variables:
            assert v.whisker_low <= v.q1 <= v.median <= v.q3 <= v.whisker_high
        assert sorted(report.ranking()) == sorted(ABS_LENGTH_NAMES)

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            derivative_stats(np.empty((0, 6)), TASK_AREA)

    def test_non_positive_step(self):
        with pytest.raises(ValueError):
            eta_gradient(REFERENCE_ABS, TASK_AREA, h=0.0)


class TestDesignRules:
    def setup_method(self):
        names = list(ABS_LENGTH_NAMES)
        st = [0.1, 0.05, 0.2, 0.05, 0.6, 0.1]
        indices = SobolIndices(S1=st, S1_conf=[0.01] * 6, ST=st, ST_conf=[0.01] * 6, negative_flags=[False] * 6)
        self.sobol = SobolReport(
            variables=names, objectives={k: indices for k in ("eta", "tau1", "tau2")},
            base_n=64, n_evaluations=896, seed=0,
        )
        leaf = TreeNode(depth=1, n_samples=5, value=1.0)
        root = TreeNode(depth=0, n_samples=10, value=1.0, feature="eex_abs", threshold=0.5, left=leaf, right=leaf)
        self.trees = {"eta": root, "tau1": root, "tau2": root}
        self.hood = CorrelationReport(alpha=0.05, n_samples=400, pairs=[
            pair("eex_abs", "eta", -0.6), pair("l1_abs", "eta", -0.3),
        ])
        self.objective_pairs = CorrelationReport(alpha=0.05, n_samples=400, pairs=[pair("tau1", "tau2", 0.93)])
        magnitudes = dict(zip(names, [0.1, 0.05, 0.8, 0.2, 0.9, 0.01]))
        self.derivatives = DerivativeReport(step_rel=1e-3, n_designs=10, n_skipped=0, variables=[
            VariableDistribution(variable=n, mean_abs=m, mean=-m, q1=-m, median=-m, q3=-m,
                                 whisker_low=-m, whisker_high=-m)
            for n, m in magnitudes.items()
        ])

    def test_all_rules_hold(self):
        checks = design_rule_checks(self.sobol, self.trees, self.hood, self.objective_pairs, self.derivatives)
        assert len(checks) == 6
        assert all(check.passed for check in checks)

    def test_failures_are_reported_not_raised(self):
        weak = CorrelationReport(alpha=0.05, n_samples=400, pairs=[pair("tau1", "tau2", 0.4)])
        checks = design_rule_checks(self.sobol, self.trees, self.hood, weak, None)
        failed = [c for c in checks if not c.passed]
        assert len(checks) == 5
        assert len(failed) == 1
        assert failed[0].detail["pearson_r"] == 0.4

    def test_missing_neighborhood_variable(self):
        hood = CorrelationReport(alpha=0.05, n_samples=400, pairs=[pair("eex_abs", "eta", -0.6)])
        checks = design_rule_checks(self.sobol, self.trees, hood, self.objective_pairs, None)
        assert [c.passed for c in checks if "l1_abs" in c.rule] == [False]


class TestScaleScatter:
    def test_columns(self):
        frame = pd.DataFrame({"eta": [0.1], "tau1_nm": [2.0], "tau2_nm": [1.0], "scale_m": [0.4], "l2": [0.3]})
        assert list(scale_scatter(frame).columns) == ["eta", "tau1_nm", "tau2_nm", "scale_m"]
