"""Hosting for the asyncio services (NRF, proxy, wrapper).

A service object has ``async start()`` which binds its sockets and an
``async stop()``.  :class:`ServiceHandle` runs one on a private event loop
in a daemon thread, which is what tests and in-process callers use;
:func:`run_foreground` runs one on the main thread until SIGINT/SIGTERM,
which is what the CLI uses.
"""

from __future__ import annotations

import asyncio
import json
import signal
import sys
import threading
from typing import Any, Optional


class StartupError(RuntimeError):
    pass


class BindFailure(OSError):
    pass


async def bind(handler, address: str):
    """``asyncio.start_server`` on ``host:port`` with bind errors as :class:`BindFailure`."""
    from .transport import parse_address

    host, port = parse_address(address)
    try:
        return await asyncio.start_server(handler, host, port)
    except OSError as exc:
        raise BindFailure(exc.errno, f"cannot bind {address}: {exc.strerror}") from None


class ServiceHandle:
    def __init__(self, service, name: Optional[str] = None) -> None:
        self.service = service
        self.name = name or type(service).__name__
        self.loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._run, name=self.name, daemon=True)
        self._ready = threading.Event()
        self._error: Optional[BaseException] = None

    def _run(self) -> None:
        asyncio.set_event_loop(self.loop)
        try:
            self.loop.run_until_complete(self.service.start())
        except BaseException as exc:
            self._error = exc
            self._ready.set()
            self.loop.close()
            return
        self._ready.set()
        try:
            self.loop.run_forever()
        finally:
            # connection handlers still parked on reads
            pending = asyncio.all_tasks(self.loop)
            for task in pending:
                task.cancel()
            if pending:
                self.loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
            self.loop.run_until_complete(self.loop.shutdown_asyncgens())
            self.loop.close()

    def start(self, timeout: float = 10.0) -> "ServiceHandle":
        self._thread.start()
        if not self._ready.wait(timeout):
            raise StartupError(f"{self.name} did not start within {timeout}s")
        if self._error is not None:
            raise self._error
        return self

    def call(self, coro, timeout: Optional[float] = 30.0) -> Any:
        """Run a coroutine on the service loop and wait for its result."""
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def call_soon(self, fn, *args) -> Any:
        async def _wrap():
            return fn(*args)

        return self.call(_wrap())

    def close(self, timeout: float = 10.0) -> None:
        if not self._thread.is_alive():
            return
        try:
            self.call(self.service.stop(), timeout)
        finally:
            self.loop.call_soon_threadsafe(self.loop.stop)
            self._thread.join(timeout)

    def __enter__(self) -> "ServiceHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __getattr__(self, item):
        # expose the service's public attributes (address, admin_address, ...)
        if item.startswith("_") or item in ("service", "loop", "name"):
            raise AttributeError(item)
        return getattr(self.service, item)


def run_foreground(service, announce: bool = True) -> int:
    """Run ``service`` until interrupted; returns the process exit code."""

    async def main() -> None:
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        # handlers first, so a signal right after READY is a clean stop
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await service.start()
        if announce:
            sys.stdout.write("READY " + json.dumps(service.describe(), sort_keys=True) + "\n")
            sys.stdout.flush()
        await stop.wait()
        await service.stop()

    asyncio.run(main())
    return 0
