import time
from contextlib import contextmanager

RESULTS: list[tuple[str, bool, str]] = []


@contextmanager
def criterion(name: str, budget: float | None = None):
    """Record one acceptance line; a blown time budget counts as a failure."""
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        RESULTS.append((name, False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"))
        raise
    took = time.perf_counter() - start
    if budget is not None and took > budget:
        RESULTS.append((name, False, f"took {took:.2f}s, budget {budget:.0f}s"))
        raise AssertionError(f"{name}: took {took:.2f}s > {budget}s")
    RESULTS.append((name, True, f"{took:.2f}s"))


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, note in RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({note})")
