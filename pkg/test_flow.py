#!/usr/bin/env python3
"""
Tests for the node graph runner and the check-suite flow built on it.
"""

import asyncio
import csv
import math

import orjson
import pytest

from flow import ROLLUP_COLUMNS, run_suite, write_rollup
from nodes import CheckNode, WriteReportNode
from pocketflow import BatchFlow, Flow, Node, Params
from verify_harness import CheckContext


class AddOne(Node):
    def __init__(self, action: str = "next"):
        self.action = action

    async def __call__(self, ctx, p):
        return self.action, p.data.get("value", p.data.get("start", 0)) + 1


class Tracked(Node):
    """Counts how many instances run at once."""

    def __init__(self, gauge: dict, action: str):
        self.gauge = gauge
        self.action = action

    async def __call__(self, ctx, p):
        self.gauge["now"] += 1
        self.gauge["peak"] = max(self.gauge["peak"], self.gauge["now"])
        await asyncio.sleep(0.01)
        self.gauge["now"] -= 1
        return self.action, p.data["id"]


def test_flow_follows_action_edges():
    a, b, c = AddOne(), AddOne(), AddOne("stop")
    flow = Flow(a).edge(a, "next", b).edge(b, "next", c)
    assert asyncio.run(flow.run({}, Params({"start": 10}))) == 13


def test_flow_stops_on_unrouted_action():
    a, b = AddOne("elsewhere"), AddOne()
    flow = Flow(a).edge(a, "next", b)
    assert asyncio.run(flow.run({})) == 1


def test_batch_flow_respects_parallel_cap_without_deadlock():
    """Two-node chains under a cap of one slot still complete."""
    gauge = {"now": 0, "peak": 0}
    first, second = Tracked(gauge, "next"), Tracked(gauge, "done")
    flow = Flow(first).edge(first, "next", second)
    results = asyncio.run(BatchFlow(flow).run({}, [Params({"id": i}) for i in range(5)], max_parallel=1))
    assert results == [0, 1, 2, 3, 4]
    assert gauge["peak"] == 1


def test_batch_flow_runs_in_parallel_without_cap():
    gauge = {"now": 0, "peak": 0}
    node = Tracked(gauge, "done")
    asyncio.run(BatchFlow(Flow(node)).run({}, [Params({"id": i}) for i in range(4)]))
    assert gauge["peak"] > 1


def test_check_node_turns_errors_into_failed_reports():
    node = CheckNode(CheckContext(seed=3))
    action, report = asyncio.run(node({}, Params({"check_id": "harmonicity", "overrides": {"xs": (-1.0,)}})))
    assert action == "write"
    assert report["pass"] is False
    assert "DomainError" in report["details"]["error"]
    assert report["kind"] == "analytic"
    assert len(report["config_digest"]) == 64


def test_report_validation():
    node = CheckNode(CheckContext())
    good = {"check_id": "x", "observed": [1.0], "expected": [1.0], "tolerance": "exact", "pass": True,
            "runtime": 0.1, "config_digest": "0" * 64}
    node._validate_report(good)
    with pytest.raises(ValueError):
        node._validate_report({k: v for k, v in good.items() if k != "tolerance"})
    with pytest.raises(ValueError):
        node._validate_report({**good, "observed": [math.nan]})
    node._validate_report({**good, "pass": False, "observed": [math.nan]})
    with pytest.raises(ValueError):
        node._validate_report({**good, "config_digest": "abc"})
    with pytest.raises(ValueError):
        node._validate_report({**good, "observed": [1]})


def test_write_report_node(tmp_path):
    report = {"check_id": "demo", "pass": True, "observed": [0.5]}
    ctx = {"output_dir": str(tmp_path), "reports": []}
    action, value = asyncio.run(WriteReportNode()(ctx, Params({"value": report})))
    assert action == "done" and value is report
    assert orjson.loads((tmp_path / "demo.json").read_bytes()) == report
    assert ctx["reports"] == [report]


def test_rollup_is_sorted_and_joins_lists(tmp_path):
    reports = [
        {"check_id": "b", "observed": [0.1, 0.2], "expected": [0.1, 0.2], "tolerance": "3 sigma", "pass": False,
         "runtime": 1.5, "seed": 7},
        {"check_id": "a", "observed": [1.0], "expected": [1.0], "tolerance": "exact", "pass": True,
         "runtime": 0.25, "seed": 7},
    ]
    path = write_rollup(reports, tmp_path / "out" / "summary.csv")
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == ROLLUP_COLUMNS
    assert [r[0] for r in rows[1:]] == ["a", "b"]
    assert rows[2][1] == "0.10000000000000001;0.20000000000000001"
    assert rows[1][4] == "true" and rows[2][4] == "false"


def test_run_suite_writes_reports(tmp_path):
    reports = run_suite(["harmonicity"], output_dir=tmp_path, threads=1, seed=11)
    assert [r["check_id"] for r in reports] == ["harmonicity"]
    assert reports[0]["pass"] is True
    stored = orjson.loads((tmp_path / "harmonicity.json").read_bytes())
    assert stored["config_digest"] == reports[0]["config_digest"]
    assert stored["seed"] == 11
    rows = list(csv.reader((tmp_path / "summary.csv").open()))
    assert len(rows) == 2 and rows[1][0] == "harmonicity"


def test_run_suite_rejects_unknown_ids_before_running(tmp_path):
    with pytest.raises(KeyError):
        run_suite(["harmonicity", "bogus"], output_dir=tmp_path)
    assert not (tmp_path / "harmonicity.json").exists()


def test_failed_stochastic_check_keeps_its_kind():
    node = CheckNode(CheckContext(seed=3))
    params = Params({"check_id": "survival_asymptotic", "overrides": {"dt": -1.0}})
    action, report = asyncio.run(node({}, params))
    assert action == "write"
    assert report["pass"] is False
    assert report["kind"] == "stochastic"
