"""In-process simulation of data-parallel collectives.

Each rank runs as a thread executing the same worker function.  Ranks only
exchange data through the collectives below; every collective is a lockstep
rendezvous that first checks all ranks called the *same* collective (same op,
tag, root, phase and, where required, shape).  A mismatch raises
:class:`ConsistencyError` on every rank, so a control-flow divergence cannot
silently mix data from different code paths.

Reductions sum in rank order, so results do not depend on thread timing.
"""
from __future__ import annotations

import copy
import threading
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ConsistencyError, DeadlockError, ProtocolError


class RankGroup:
    def __init__(self, world_size: int = 1, timeout: float = 60.0):
        if world_size < 1:
            raise ProtocolError("world_size must be >= 1")
        self.world_size = world_size
        self.timeout = timeout
        self._barrier = threading.Barrier(world_size)
        self._slots: list[Any] = [None] * world_size
        self.comms = [Communicator(self, r) for r in range(world_size)]

    def run(self, fn: Callable[..., Any], *args, **kwargs) -> list[Any]:
        """Run ``fn(comm, *args, **kwargs)`` on every rank; return per-rank results."""
        results: list[Any] = [None] * self.world_size
        errors: list[BaseException | None] = [None] * self.world_size

        def target(rank: int) -> None:
            try:
                results[rank] = fn(self.comms[rank], *args, **kwargs)
            except BaseException as exc:  # noqa: BLE001 - re-raised below
                errors[rank] = exc
                self._barrier.abort()

        if self.world_size == 1:
            target(0)
        else:
            threads = [threading.Thread(target=target, args=(r,), name=f"rank{r}") for r in range(self.world_size)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        raised = [e for e in errors if e is not None]
        if raised:
            # prefer the root cause over secondary broken-barrier errors
            primary = [e for e in raised if not isinstance(e, DeadlockError)]
            raise (primary or raised)[0]
        self._barrier.reset()
        return results


class Communicator:
    def __init__(self, group: RankGroup, rank: int):
        self.group = group
        self.rank = rank
        self.world_size = group.world_size
        self.phase = 0

    def _wait(self) -> None:
        try:
            self.group._barrier.wait(timeout=self.group.timeout)
        except threading.BrokenBarrierError as exc:
            raise DeadlockError(f"rank {self.rank}: peers did not reach collective at phase {self.phase}") from exc

    def _exchange(self, op: str, tag: str, meta: Any, payload: Any) -> list[tuple]:
        slots = self.group._slots
        slots[self.rank] = (op, tag, meta, self.phase, payload)
        self._wait()
        entries = list(slots)
        self._wait()
        slots[self.rank] = None
        self.phase += 1
        heads = [e[:4] for e in entries]
        if any(h[:2] != heads[0][:2] or h[3] != heads[0][3] for h in heads):
            raise ConsistencyError(f"rank divergence: {[h[:2] + (h[3],) for h in heads]}")
        if any(h[2] != heads[0][2] for h in heads):
            raise ProtocolError(f"{op}[{tag}]: mismatched arguments across ranks: {[h[2] for h in heads]}")
        return entries

    def broadcast(self, value: Any, root: int = 0, tag: str = "") -> Any:
        entries = self._exchange("broadcast", tag, root, value)
        return copy.deepcopy(entries[root][4])

    def all_gather(self, arr: np.ndarray, tag: str = "") -> np.ndarray:
        arr = np.asarray(arr)
        entries = self._exchange("all_gather", tag, (arr.shape, arr.dtype.str), arr)
        parts = [np.atleast_1d(e[4]) for e in entries]
        return np.concatenate(parts, axis=0)

    def all_reduce_mean(self, arr: np.ndarray, tag: str = "") -> np.ndarray:
        arr = np.asarray(arr)
        entries = self._exchange("all_reduce_mean", tag, (arr.shape, arr.dtype.str), arr)
        if self.world_size == 1:
            return arr.copy()
        total = np.array(entries[0][4], copy=True)
        for e in entries[1:]:
            total = total + e[4]
        return (total / self.world_size).astype(arr.dtype)

    def scatter(self, payloads: Sequence[Any] | None, root: int = 0, tag: str = "") -> Any:
        if self.rank == root:
            if payloads is None or len(payloads) != self.world_size:
                n = None if payloads is None else len(payloads)
                # still rendezvous so peers fail the same collective instead of hanging
                self._exchange("scatter", tag, root, None)
                raise ProtocolError(f"scatter needs {self.world_size} payloads, got {n}")
        entries = self._exchange("scatter", tag, root, payloads if self.rank == root else None)
        sent = entries[root][4]
        if sent is None:
            raise ProtocolError(f"scatter root provided no payloads")
        return copy.deepcopy(sent[self.rank])

    def barrier(self, tag: str = "") -> None:
        self._exchange("barrier", tag, None, None)
