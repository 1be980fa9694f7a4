"""Shared helpers: a TCP testbed on a background thread and a CLI invoker."""

import asyncio
import threading

from tcx.cli import run, serve_testbed


class Server:
    """Testbed served over TCP from a background thread."""

    def __init__(self, seed=0):
        self.ready = threading.Event()
        self.thread = threading.Thread(target=asyncio.run, args=(self._main(seed),), daemon=True)

    async def _main(self, seed):
        self.loop = asyncio.get_running_loop()
        self.stop = asyncio.Event()

        def on_ready(tb, port, handle):
            self.tb, self.port, self.handle = tb, port, handle
            self.ready.set()

        await serve_testbed(seed, "127.0.0.1", 0, on_ready, self.stop)

    def __enter__(self):
        self.thread.start()
        assert self.ready.wait(30)
        self.address = f"127.0.0.1:{self.port}"
        return self

    def call(self, fn, *args):
        done = threading.Event()
        self.loop.call_soon_threadsafe(lambda: (fn(*args), done.set()))
        assert done.wait(10)

    def __exit__(self, *exc):
        self.loop.call_soon_threadsafe(self.stop.set)
        self.thread.join(10)



def tcx(capsysbinary, *args):
    code = run([str(a) for a in args])
    out, err = capsysbinary.readouterr()
    return code, out, err.decode()
