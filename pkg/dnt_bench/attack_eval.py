"""
Robustness grid: aggregation rules x attacks x lifecycle phases.

For every rule a clean V-twin is built once; the V-twin rows rebuild it with
the attacker joining every round, the H-twin rows continue the clean twin
with the attacker joining every maintenance batch.
"""

import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from tqdm import tqdm

from dnt_bench.config import ExperimentConfig
from dnt_bench.pipeline import (
    ExperimentData,
    build_assignment,
    build_vtwins,
    clone_twins,
    effective_k,
    evaluate_twins,
    maintain_twins,
)
from twinpress.aggregation import RuleRegistry, build_rule
from twinpress.errors import ConfigurationError, TwinError
from twinpress.metrics import METRIC_CAP, QualityReport
from twinpress.network import ClusterAssignment
from twinpress.threat import ATTACK_KINDS

PHASES = ("vtwin", "htwin")
RULES = ("mean", "median", "fltrust", "tid")
GRID_COLUMNS = ["phase", "rule", "attack", "mae", "mse"]


def _row(phase: str, rule: str, attack: str, quality: Optional[QualityReport]) -> Dict[str, object]:
    if quality is None:
        return {"phase": phase, "rule": rule, "attack": attack, "mae": METRIC_CAP, "mse": METRIC_CAP}
    return {"phase": phase, "rule": rule, "attack": attack, "mae": quality.mae, "mse": quality.mse}


def evaluate_rule(
    config: ExperimentConfig,
    data: ExperimentData,
    assignment: ClusterAssignment,
    rule_name: str,
    attacks: Sequence[str] = ATTACK_KINDS,
) -> List[Dict[str, object]]:
    """All grid rows of one rule.

    A twin whose training diverges under attack is reported at the metric cap.
    """
    rule = build_rule(rule_name, tau=config.fedsync.tau)
    clean = build_vtwins(config, data, assignment, rule, evaluate=False)
    htwin_cfg = config.sync_config(batch_size=config.attack.batch_size)
    rows = []
    for attack in attacks:
        attack_cfg = config.attack_config(kind=attack) if attack != "none" else None

        try:
            twins = clean if attack_cfg is None else build_vtwins(config, data, assignment, rule, attack=attack_cfg, evaluate=False)
            quality = evaluate_twins(data, assignment, twins)
        except TwinError as e:
            logging.warning(f"V-twin {rule_name}/{attack} failed ({e}); reporting the cap")
            quality = None
        rows.append(_row("vtwin", rule_name, attack, quality))

        try:
            result = maintain_twins(
                config, data, assignment, clone_twins(clean), rule, cfg=htwin_cfg, attack=attack_cfg, evaluate=False
            )
            quality = evaluate_twins(data, result.assignment, result.twins)
        except TwinError as e:
            logging.warning(f"H-twin {rule_name}/{attack} failed ({e}); reporting the cap")
            quality = None
        rows.append(_row("htwin", rule_name, attack, quality))
        logging.info(f"Grid {rule_name}/{attack}: vtwin mae={rows[-2]['mae']:.6g}, htwin mae={rows[-1]['mae']:.6g}")
    return rows


def _evaluate_rule_wrapper(args: Tuple[ExperimentConfig, ExperimentData, ClusterAssignment, str, Tuple[str, ...]]):
    config, data, assignment, rule_name, attacks = args
    return evaluate_rule(config, data, assignment, rule_name, attacks)


def run_attack_eval(
    config: ExperimentConfig,
    data: ExperimentData,
    rules: Sequence[str] = RULES,
    attacks: Sequence[str] = ATTACK_KINDS,
    num_workers: int = 1,
    no_cluster: bool = False,
    progress: bool = True,
) -> pd.DataFrame:
    """
    Evaluate every (phase, rule, attack) cell.

    Args:
        config: Experiment config; attack.* sets the attacker, attack.batch_size
            the H-twin batch
        data: Prepared experiment data
        rules: Aggregation rules to evaluate
        attacks: Attack kinds, "none" included for the clean reference
        num_workers: Rules evaluated in parallel processes when > 1
        no_cluster: Evaluate with a single cluster
        progress: Show a tqdm bar over the rules

    Returns:
        DataFrame with GRID_COLUMNS in (phase, rule, attack) order
    """
    unknown = [r for r in rules if r not in RuleRegistry().names()]
    if unknown:
        raise ConfigurationError(f"unknown rules {unknown}, expected some of {RuleRegistry().names()}", key="fedsync.rule")
    assignment, _ = build_assignment(config, data, effective_k(config, no_cluster))
    tasks = [(config, data, assignment, rule, tuple(attacks)) for rule in rules]

    rows: List[Dict[str, object]] = []
    pbar = tqdm(total=len(tasks), desc="Rules evaluated", disable=not progress)
    if num_workers > 1:
        from multiprocessing import Pool

        with Pool(num_workers) as pool:
            for result in pool.imap_unordered(_evaluate_rule_wrapper, tasks):
                rows.extend(result)
                pbar.update(1)
    else:
        for task in tasks:
            rows.extend(_evaluate_rule_wrapper(task))
            pbar.update(1)
    pbar.close()

    frame = pd.DataFrame(rows, columns=GRID_COLUMNS)
    order = {
        "phase": {p: i for i, p in enumerate(PHASES)},
        "rule": {r: i for i, r in enumerate(rules)},
        "attack": {a: i for i, a in enumerate(attacks)},
    }
    frame = frame.sort_values(["phase", "rule", "attack"], key=lambda col: col.map(order[col.name]), kind="stable")
    return frame.reset_index(drop=True)


def format_grid(frame: pd.DataFrame) -> str:
    """One text table: (rule, metric) rows by (phase, attack) columns."""
    rules = list(dict.fromkeys(frame["rule"]))
    attacks = list(dict.fromkeys(frame["attack"]))
    phases = [p for p in PHASES if p in set(frame["phase"])]
    long = frame.melt(id_vars=["phase", "rule", "attack"], value_vars=["mae", "mse"], var_name="metric")
    long["metric"] = long["metric"].str.upper()
    table = long.pivot(index=["rule", "metric"], columns=["phase", "attack"], values="value")
    table = table.reindex(
        index=pd.MultiIndex.from_product([rules, ["MAE", "MSE"]], names=["rule", "metric"]),
        columns=pd.MultiIndex.from_product([phases, attacks], names=["phase", "attack"]),
    )
    header = f"Errors capped at {METRIC_CAP:g}"
    return header + "\n" + table.to_string(float_format=lambda v: f"{v:.6g}") + "\n"


def write_attack_eval(frame: pd.DataFrame, output_dir: str) -> List[str]:
    os.makedirs(output_dir, exist_ok=True)
    csv_path = os.path.join(output_dir, "attack_eval.csv")
    txt_path = os.path.join(output_dir, "attack_eval.txt")
    frame.to_csv(csv_path, index=False, lineterminator="\n", float_format="%.10g")
    with open(txt_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_grid(frame))
    logging.info(f"Saved {len(frame)} grid rows to {csv_path}")
    return [csv_path, txt_path]
