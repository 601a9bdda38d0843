import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from cadfield import library, shapes

threadpool_limits(1)

CUBE_OBJ = """\
v -0.5 -0.5 -0.5
v 0.5 -0.5 -0.5
v 0.5 0.5 -0.5
v -0.5 0.5 -0.5
v -0.5 -0.5 0.5
v 0.5 -0.5 0.5
v 0.5 0.5 0.5
v -0.5 0.5 0.5
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


@pytest.fixture(scope="session")
def unit_cube():
    from cadfield.mesh import TriangleMesh, parse_obj

    v, f = parse_obj(CUBE_OBJ)
    return TriangleMesh(v, f, name="cube")


@pytest.fixture(scope="session")
def toy_library():
    """The four-model library used by the reconstruction scenarios."""
    return library.build_library(
        [shapes.make_shape(n) for n in ("cuboid", "sphere", "cylinder", "torus")], 100, 2.0, 128
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion_log():
    """``log(n, passed, detail)`` stores one summary line per acceptance criterion."""
    def log(number, passed, detail):
        _CRITERIA[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        return passed

    return log


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
