import asyncio
import csv
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence

from pocketflow import BatchFlow, Context, Flow, Params
from nodes import CheckNode, WriteReportNode
from utility import format_number, thread_cap
from verify_harness import CheckContext, select_checks

logger = logging.getLogger(__name__)

ROLLUP_COLUMNS = ("check_id", "observed", "expected", "tol", "pass", "runtime_s", "seed")


def build_flow(check_ctx: CheckContext) -> Flow:
    """CheckNode --write--> WriteReportNode."""
    check = CheckNode(check_ctx)
    return Flow(check).edge(check, "write", WriteReportNode())


def write_rollup(reports: Sequence[Dict[str, Any]], path: Path) -> Path:
    """One CSV row per report, sorted by check_id; lists are ';'-joined."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROLLUP_COLUMNS)
        for r in sorted(reports, key=lambda r: r["check_id"]):
            writer.writerow([
                r["check_id"],
                ";".join(format_number(v) for v in r["observed"]),
                ";".join(format_number(v) for v in r["expected"]),
                r["tolerance"],
                "true" if r["pass"] else "false",
                format_number(r["runtime"]),
                r.get("seed", ""),
            ])
    return path


async def run_suite_async(ids: Sequence[str] = (), kind: str | None = None, *, seed: int = 20240611,
                          scale: float = 1.0, threads: int | None = None,
                          output_dir: str | Path = "reports") -> List[Dict[str, Any]]:
    """
    Run the selected checks concurrently and write their reports.

    Args:
        ids: Check ids; empty means every registered check
        kind: "analytic" or "stochastic" to filter, None for both
        scale: Multiplier on every check's path count

    Returns:
        Serialised reports in check_id order

    Raises:
        KeyError: For an unknown check id (before anything runs)
    """
    entries = select_checks(list(ids), kind)  # type: ignore[arg-type]
    cap = thread_cap(threads)
    # checks run side by side; each gets an even share of the threads for its shards
    per_check = max(1, cap // max(1, min(cap, len(entries))))
    check_ctx = CheckContext(seed=seed, scale=scale, threads=per_check)
    ctx: Context = {"threads": cap, "output_dir": str(output_dir), "reports": []}
    logger.info("[CHECK] running %d check(s) with %d thread(s)", len(entries), cap)
    batch = BatchFlow(build_flow(check_ctx))
    await batch.run(ctx, [Params({"check_id": e.check_id}) for e in entries], max_parallel=cap)
    reports = sorted(ctx["reports"], key=lambda r: r["check_id"])
    write_rollup(reports, Path(output_dir) / "summary.csv")
    return reports


def run_suite(ids: Sequence[str] = (), kind: str | None = None, **kwargs) -> List[Dict[str, Any]]:
    """Blocking wrapper around run_suite_async."""
    return asyncio.run(run_suite_async(ids, kind, **kwargs))
