"""Minimal async node graph: checks and report writers are nodes, action strings are edges."""
from __future__ import annotations

import asyncio
import contextlib
from dataclasses import dataclass
from typing import Any, AsyncIterator, Mapping, Sequence, TypedDict


class Context(TypedDict, total=False):
    """State shared by every node of a suite run."""
    threads: int
    output_dir: str
    reports: list


@dataclass(slots=True, frozen=True)
class Params:
    """Per-run parameters; the previous node's payload arrives under "value"."""
    data: Mapping[str, Any]

    def carrying(self, value: Any) -> "Params":
        return Params({**self.data, "value": value})


class Node:
    """A step of the graph.  Subclasses implement __call__."""

    async def __call__(self, ctx: Context, p: Params) -> tuple[str, Any]:
        """
        Returns (action, value):
          action picks the outgoing edge; no matching edge ends the run
          value is handed on as p.data["value"], or returned if the run ends here
        """
        raise NotImplementedError


@contextlib.asynccontextmanager
async def _slot(semaphore: asyncio.Semaphore | None) -> AsyncIterator[None]:
    if semaphore is None:
        yield
    else:
        async with semaphore:
            yield


class Flow:
    """Walks from a start node along (node, action) edges."""

    def __init__(self, start: Node) -> None:
        self._start = start
        self._edges: dict[tuple[int, str], Node] = {}

    def edge(self, source: Node, action: str, target: Node) -> "Flow":
        self._edges[(id(source), action)] = target
        return self

    async def run(self, ctx: Context, params: Params | None = None, *,
                  semaphore: asyncio.Semaphore | None = None) -> Any:
        """
        Run one walk and return the last node's value.

        A semaphore slot is taken per node, never for a whole walk, so a cap of one
        cannot deadlock multi-node walks.
        """
        current = params if params is not None else Params({})
        node: Node | None = self._start
        value: Any = None
        while node is not None:
            async with _slot(semaphore):
                action, value = await node(ctx, current)
            node = self._edges.get((id(node), action))
            if node is not None:
                current = current.carrying(value)
        return value


class BatchFlow:
    """One walk per Params, run concurrently; results come back in input order."""

    def __init__(self, flow: Flow) -> None:
        self._flow = flow

    async def run(self, ctx: Context, params_list: Sequence[Params], *,
                  max_parallel: int | None = None) -> list[Any]:
        semaphore = asyncio.Semaphore(max_parallel) if max_parallel else None
        return list(await asyncio.gather(*(self._flow.run(ctx, p, semaphore=semaphore) for p in params_list)))
