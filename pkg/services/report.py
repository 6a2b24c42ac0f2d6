"""
Markdown run summary built from the artifacts listed in the manifest
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from schemas import ABS_LENGTH_NAMES, RunManifest

logger = logging.getLogger(__name__)

STRAIGHT_LINKS: Tuple[str, ...] = ("l1_abs", "l2_abs", "l3_abs", "l4_abs")


def fits_envelope(lengths_abs_m: Sequence[float], envelope_mm: Tuple[float, float, float]) -> bool:
    """
    Whether a scaled design can be printed in a W x L x H build volume

    Each straight link lies along the longest side; the L-shaped upper arm
    (ee_x by ee_y) lies flat on the W x L plate in either orientation.
    """
    l1, l2, l3, l4, eex, eey = (1000.0 * float(v) for v in lengths_abs_m)
    width, length, height = envelope_mm
    longest = max(width, length, height)
    if max(l1, l2, l3, l4) > longest:
        return False
    return (eex <= width and eey <= length) or (eex <= length and eey <= width)


def printable_mask(frame: pd.DataFrame, envelope_mm: Optional[Tuple[float, float, float]]) -> np.ndarray:
    if envelope_mm is None:
        return np.ones(len(frame), dtype=bool)
    X = frame[list(ABS_LENGTH_NAMES)].to_numpy(dtype=float)
    return np.array([fits_envelope(row, envelope_mm) for row in X], dtype=bool)


def _table(frame: pd.DataFrame, columns: Sequence[str], digits: int = 4) -> List[str]:
    header = "| " + " | ".join(columns) + " |"
    rule = "|" + "|".join("---" for _ in columns) + "|"
    rows = []
    for record in frame[list(columns)].itertuples(index=False):
        cells = [f"{v:.{digits}g}" if isinstance(v, (float, np.floating)) else str(v) for v in record]
        rows.append("| " + " | ".join(cells) + " |")
    return [header, rule, *rows]


class ReportBuilder:
    """Assembles the run summary section by section"""

    def __init__(self, manifest: RunManifest, envelope_mm: Optional[Tuple[float, float, float]], max_rows: int = 10):
        """
        Args:
            manifest: complete run manifest
            envelope_mm: printer build volume W x L x H, None disables the filter
            max_rows: selected designs listed in the table
        """
        self.manifest = manifest
        self.envelope_mm = envelope_mm
        self.max_rows = max_rows
        self.lines: List[str] = ["# Quasi-serial manipulator design run", ""]

    def stages(self) -> "ReportBuilder":
        self.lines += [
            f"Software version {self.manifest.software_version}, config sha256 `{self.manifest.config_sha256[:16]}`",
            "",
            "## Stages",
            "",
            "| stage | seed | outputs | stats |",
            "|---|---|---|---|",
        ]
        for stage in ("generate", "label", "train", "optimize", "mine"):
            record = self.manifest.stages[stage]
            stats = ", ".join(f"{k}={v:.6g}" for k, v in sorted(record.stats.items()))
            outputs = ", ".join(sorted(record.files))
            self.lines.append(f"| {stage} | {record.seed if record.seed is not None else '-'} | {outputs} | {stats} |")
        self.lines.append("")
        return self

    def metrics(self, metrics: Dict) -> "ReportBuilder":
        self.lines += ["## Surrogate accuracy (normalized targets)", "", "| split | R² | MSE | RMSE |", "|---|---|---|---|"]
        for split in ("train", "test"):
            agg = metrics[split]["aggregate"]
            self.lines.append(f"| {split} | {agg['r2']:.5f} | {agg['mse']:.5f} | {agg['rmse']:.5f} |")
        self.lines.append("")
        return self

    def selected_designs(self, pareto: pd.DataFrame) -> "ReportBuilder":
        mask = printable_mask(pareto, self.envelope_mm)
        selected = pareto.loc[mask].sort_values(["eta_pred", "tau1_pred", "tau2_pred"], kind="mergesort")
        title = "## Selected Pareto designs"
        if self.envelope_mm is not None:
            w, l, h = self.envelope_mm
            title += f" (printable in {w:g} x {l:g} x {h:g} mm)"
        self.lines += [title, "", f"{int(mask.sum())} of {len(pareto)} Pareto designs pass the size filter.", ""]
        if selected.empty:
            self.lines += ["No design fits the envelope.", ""]
            return self
        columns = [*ABS_LENGTH_NAMES, "eta_pred", "tau1_pred", "tau2_pred"]
        columns += [c for c in ("eta_true", "tau1_true", "tau2_true") if c in selected.columns]
        self.lines += _table(selected.head(self.max_rows), columns)
        self.lines += ["", "Lengths in meters, torques in N·m.", ""]
        return self

    def sensitivity(self, sobol: Dict) -> "ReportBuilder":
        variables = sobol["variables"]
        self.lines += ["## Sobol total-order indices", "", "| objective | " + " | ".join(variables) + " |",
                       "|---|" + "|".join("---" for _ in variables) + "|"]
        for objective, indices in sorted(sobol["objectives"].items()):
            cells = " | ".join(f"{v:.3f}" for v in indices["ST"])
            self.lines.append(f"| {objective} | {cells} |")
        self.lines += ["", f"{sobol['n_evaluations']} surrogate evaluations.", ""]
        return self

    def rules(self, checks: List[Dict]) -> "ReportBuilder":
        self.lines += ["## Design rule checks", ""]
        for check in checks:
            mark = "pass" if check["passed"] else "FAIL"
            self.lines.append(f"- [{mark}] {check['rule']}: {check['detail']}")
        self.lines.append("")
        return self

    def trees(self, texts: Dict[str, str]) -> "ReportBuilder":
        self.lines += ["## Decision trees near the Pareto set", ""]
        for name in sorted(texts):
            self.lines += ["```", texts[name].rstrip("\n"), "```", ""]
        return self

    def render(self) -> str:
        return "\n".join(self.lines).rstrip("\n") + "\n"
