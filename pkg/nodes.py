import asyncio
import logging
import math
from pathlib import Path
from typing import Any, Dict, Tuple

import orjson

from pocketflow import Context, Node, Params
from verify_harness import CheckContext, CheckReport, run_check, select_checks
from utility import config_digest

logger = logging.getLogger(__name__)


class CheckNode(Node):
    """
    Runs one registered check off the event loop and validates its report.

    A check that raises still yields a report: failed, with the error recorded,
    so a suite run emits one report file per requested check.
    """

    def __init__(self, check_ctx: CheckContext):
        self.check_ctx = check_ctx

    async def __call__(self, ctx: Context, p: Params) -> Tuple[str, Any]:
        check_id = p.data["check_id"]
        overrides = dict(p.data.get("overrides", {}))
        try:
            report = await asyncio.to_thread(run_check, check_id, self.check_ctx, **overrides)
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            logger.error("[CHECK] %s raised %s: %s", check_id, type(exc).__name__, exc)
            kind = select_checks([check_id])[0].kind
            report = CheckReport(check_id, kind, [], [], "check raised", False, 0.0,
                                 config_digest({"check_id": check_id, "seed": self.check_ctx.seed}),
                                 self.check_ctx.seed, {"error": f"{type(exc).__name__}: {exc}"})
        data = report.to_dict()
        self._validate_report(data)
        return "write", data

    def _validate_report(self, report: Dict[str, Any]) -> None:
        """
        Validate the structure of a serialised check report.

        Args:
            report: Output of CheckReport.to_dict

        Raises:
            ValueError: If a field is missing, mistyped or not finite
        """
        required_fields = ["check_id", "observed", "expected", "tolerance", "pass", "runtime", "config_digest"]

        for field in required_fields:
            if field not in report:
                raise ValueError(f"check report missing required field: {field}")

        if not isinstance(report["check_id"], str) or not report["check_id"]:
            raise ValueError("check_id must be a non-empty string")

        if not isinstance(report["pass"], bool):
            raise ValueError("pass must be a boolean")

        for field in ("observed", "expected"):
            values = report[field]
            if not isinstance(values, list):
                raise ValueError(f"{field} must be a list")
            if any(not isinstance(v, float) for v in values):
                raise ValueError(f"{field} must hold floats")

        # non-finite numbers are only acceptable in a failed report
        if report["pass"] and any(not math.isfinite(v) for v in report["observed"] + report["expected"]):
            raise ValueError(f"{report['check_id']}: passing report carries non-finite numbers")

        if not isinstance(report["runtime"], float) or report["runtime"] < 0:
            raise ValueError("runtime must be a non-negative float")

        digest = report["config_digest"]
        if not isinstance(digest, str) or len(digest) != 64:
            raise ValueError("config_digest must be a SHA-256 hex string")


class WriteReportNode(Node):
    """Writes one JSON report per check into ctx["output_dir"] and collects it in ctx["reports"]."""

    async def __call__(self, ctx: Context, p: Params) -> Tuple[str, Any]:
        report = p.data["value"]
        out_dir = Path(ctx.get("output_dir", "reports"))
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{report['check_id']}.json"
        blob = orjson.dumps(report, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)
        await asyncio.to_thread(path.write_bytes, blob)
        ctx.setdefault("reports", []).append(report)
        logger.info("[REPORT] %s -> %s (%s)", report["check_id"], path, "pass" if report["pass"] else "FAIL")
        return "done", report
