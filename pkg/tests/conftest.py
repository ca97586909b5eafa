import pytest

from autoscout.space import builtin_space, load_space


def feature(name, domain, kind="sparse", default=None, requires=(), **extra):
    f = {"name": name, "kind": kind, "domain": list(domain),
         "default": domain[0] if default is None else default}
    if requires:
        f["requires"] = [{"feature": a, "op": op, "value": v} for a, op, v in requires]
    f.update(extra)
    return f


def space_doc(features, devices=(("gpu", 12, 80.0, 1.0),), constraints=()):
    return {
        "hardware": {"devices": [{"class": c, "count": n, "mem_gb": m, "rel_throughput": r}
                                 for c, n, m, r in devices]},
        "features": list(features),
        "constraints": list(constraints),
    }


@pytest.fixture(scope="session")
def megatron():
    return builtin_space()


@pytest.fixture
def gated_tp():
    return load_space(space_doc([feature("tp", [1, 2]), feature("sp", [False, True], requires=[("tp", ">", 1)])]))


_ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one acceptance criterion's verdict for the terminal summary."""
    def record(n, ok, detail=""):
        _ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
