"""Block-streaming pipeline: one reader, P workers, one snapshot writer.

The reader fills a bounded queue (capacity = worker count, i.e. at most P
blocks in flight); workers consume whole blocks and update the shared model
lock-free. Snapshots are weakly consistent: taken while workers keep
running. Single-worker mode bypasses the threads entirely and is exactly
sequential.
"""

from __future__ import annotations

import queue
import threading

from .model import FactorModel, save_snapshot

_DONE = object()


def for_each_block(blocked, workers: int, handle) -> None:
    """Run handle(block, worker_id) over every block.

    With workers <= 1 this is a plain sequential loop; otherwise a reader
    thread streams blocks into a bounded queue consumed by worker threads.
    The first exception raised anywhere is re-raised here after shutdown.
    """
    if workers <= 1:
        for block in blocked.iter_blocks():
            handle(block, 0)
        return

    q: queue.Queue = queue.Queue(maxsize=workers)
    failures: list[BaseException] = []

    def reader():
        try:
            for block in blocked.iter_blocks():
                q.put(block)
        except BaseException as exc:  # noqa: BLE001 - propagated below
            failures.append(exc)
        finally:
            for _ in range(workers):
                q.put(_DONE)

    def worker(wid: int):
        failed = False
        while True:
            block = q.get()
            if block is _DONE:
                return
            if failed:
                continue  # drain so the reader never blocks
            try:
                handle(block, wid)
            except BaseException as exc:  # noqa: BLE001
                failures.append(exc)
                failed = True

    threads = [threading.Thread(target=reader, daemon=True)]
    threads += [threading.Thread(target=worker, args=(w,), daemon=True) for w in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        raise failures[0]


class SnapshotWriter:
    """Periodically saves the (possibly in-flux) model every N blocks."""

    def __init__(self, model: FactorModel, path, every_blocks: int):
        self.model = model
        self.path = path
        self.every = int(every_blocks)
        self.blocks_done = 0
        self.snapshots_written = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        if self.every > 0 and path is not None:
            self._thread.start()

    def block_done(self) -> None:
        self.blocks_done += 1  # racy increment is fine: cadence only

    def _write_due(self) -> None:
        due = self.blocks_done // self.every
        if due > self.snapshots_written:
            save_snapshot(self.model, self.path)
            self.snapshots_written = due

    def _loop(self) -> None:
        while not self._stop.wait(0.02):
            self._write_due()

    def close(self) -> None:
        if self._thread.is_alive():
            self._stop.set()
            self._thread.join()
            self._write_due()
