"""
Run-directory summary: collects the artifacts the other subcommands wrote
into summary.txt and summary.json.
"""

import glob
import json
import logging
import os
from typing import Any, Dict, List, Optional

import pandas as pd

from twinpress.errors import RunIOError
from twinpress.metrics import CostReport, cost_reduction
from twinpress.state_manager import MANIFEST_NAME, RunStateManager

EXPECTED_FILES = (MANIFEST_NAME, "timeline_*.csv", "quality_*.csv", "attack_eval.csv", "cache_sim.csv")


def _read_csv(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (OSError, ValueError) as e:
        raise RunIOError(f"cannot read {path}: {e}") from e


def _records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    # NaN has no JSON form
    return json.loads(frame.to_json(orient="records", double_precision=10))


def collect_cost_reductions(ledgers: Dict[str, Dict[str, Any]]) -> List[Dict[str, Any]]:
    """One entry per (candidate, baseline) pair flagged in the manifest."""
    candidates = sorted(name for name, entry in ledgers.items() if entry.get("role") == "candidate")
    baselines = sorted(name for name, entry in ledgers.items() if entry.get("role") == "baseline")
    results = []
    for cand in candidates:
        for base in baselines:
            percent = cost_reduction(CostReport.from_dict(ledgers[cand]), CostReport.from_dict(ledgers[base]))
            results.append({"candidate": cand, "baseline": base, "percent": round(percent, 6)})
    return results


def build_summary(run_dir: str) -> Dict[str, Any]:
    """
    Gather every known artifact of a run directory.

    Raises:
        RunIOError: If the directory holds none of EXPECTED_FILES
    """
    if not os.path.isdir(run_dir):
        raise RunIOError(f"{run_dir} is not a directory")
    manifest = RunStateManager(run_dir).export_store()
    timelines = sorted(glob.glob(os.path.join(run_dir, "timeline_*.csv")))
    qualities = sorted(glob.glob(os.path.join(run_dir, "quality_*.csv")))
    attack_path = os.path.join(run_dir, "attack_eval.csv")
    cache_path = os.path.join(run_dir, "cache_sim.csv")
    if not (manifest or timelines or qualities or os.path.exists(attack_path) or os.path.exists(cache_path)):
        raise RunIOError(f"no run outputs in {run_dir}; expected any of: {', '.join(EXPECTED_FILES)}")

    summary: Dict[str, Any] = {"run_dir": os.path.basename(os.path.normpath(run_dir))}
    if manifest.get("config"):
        summary["seed"] = manifest["config"].get("seed")

    finals = []
    for path in timelines:
        frame = _read_csv(path)
        if frame.empty:
            continue
        last = _records(frame.tail(1))[0]
        finals.append({"timeline": os.path.basename(path)[len("timeline_"):-len(".csv")], **last})
    summary["timelines"] = finals

    summary["quality"] = {
        os.path.basename(path)[len("quality_"):-len(".csv")]: _records(_read_csv(path)) for path in qualities
    }
    summary["attack_eval"] = _records(_read_csv(attack_path)) if os.path.exists(attack_path) else []
    summary["cache_sim"] = _records(_read_csv(cache_path)) if os.path.exists(cache_path) else []

    ledgers = manifest.get("ledgers", {})
    summary["ledgers"] = ledgers
    summary["cost_reduction"] = collect_cost_reductions(ledgers)
    return summary


def _section(title: str, body: Optional[str]) -> List[str]:
    return [f"== {title} ==", body if body else "(none)", ""]


def format_summary(summary: Dict[str, Any]) -> str:
    lines = [f"Run: {summary['run_dir']}"]
    if summary.get("seed") is not None:
        lines.append(f"Seed: {summary['seed']}")
    lines.append("")

    timelines = pd.DataFrame(summary["timelines"])
    lines += _section("Final twin versions", timelines.to_string(index=False) if not timelines.empty else None)

    for name, rows in summary["quality"].items():
        lines += _section(f"Held-out quality ({name})", pd.DataFrame(rows).to_string(index=False))

    attack = pd.DataFrame(summary["attack_eval"])
    lines += _section("Attack evaluation", attack.to_string(index=False) if not attack.empty else None)

    cache = pd.DataFrame(summary["cache_sim"])
    lines += _section("Edge caching", cache.to_string(index=False) if not cache.empty else None)

    ledgers = pd.DataFrame(
        [{"ledger": name, **entry} for name, entry in sorted(summary["ledgers"].items())]
    )
    lines += _section("Cost ledgers", ledgers.fillna("-").to_string(index=False) if not ledgers.empty else None)

    reductions = [
        f"cost_reduction {r['candidate']} vs {r['baseline']}: {r['percent']:.2f}%" for r in summary["cost_reduction"]
    ]
    lines += _section("Cost reduction", "\n".join(reductions) if reductions else None)
    return "\n".join(lines)


def write_report(run_dir: str) -> List[str]:
    summary = build_summary(run_dir)
    txt_path = os.path.join(run_dir, "summary.txt")
    json_path = os.path.join(run_dir, "summary.json")
    try:
        with open(txt_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(format_summary(summary))
        with open(json_path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise RunIOError(f"cannot write summary to {run_dir}: {e}") from e
    logging.info(f"Saved summary of {run_dir} ({len(summary['cost_reduction'])} cost comparisons)")
    return [txt_path, json_path]
