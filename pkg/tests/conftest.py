import numpy as np
import pytest
import sympy as sy

from vibtomo.fem import HEX8_NODES


def symbolic_hex8_stiffness(a, b, c, nu, E=1):
    """Exact stiffness of an a x b x c brick element by symbolic integration.

    Shape functions are written directly in physical coordinates and every
    entry of B^T D B is integrated monomial by monomial, so no quadrature
    rule or isoparametric map from the package is involved.
    """
    x, y, z = sy.symbols("x y z")
    a, b, c, nu, E = (sy.nsimplify(t) for t in (a, b, c, nu, E))
    N = []
    for sx, sy_, sz in HEX8_NODES.astype(int):
        fx = x / a if sx > 0 else 1 - x / a
        fy = y / b if sy_ > 0 else 1 - y / b
        fz = z / c if sz > 0 else 1 - z / c
        N.append(sy.expand(fx * fy * fz))
    B = sy.zeros(6, 24)
    for i, Ni in enumerate(N):
        dx, dy, dz = sy.diff(Ni, x), sy.diff(Ni, y), sy.diff(Ni, z)
        B[0, 3 * i] = dx
        B[1, 3 * i + 1] = dy
        B[2, 3 * i + 2] = dz
        B[3, 3 * i], B[3, 3 * i + 1] = dy, dx
        B[4, 3 * i + 1], B[4, 3 * i + 2] = dz, dy
        B[5, 3 * i], B[5, 3 * i + 2] = dz, dx
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    D = sy.zeros(6, 6)
    for i in range(3):
        for j in range(3):
            D[i, j] = lam + (2 * mu if i == j else 0)
        D[3 + i, 3 + i] = mu
    integrand = B.T * D * B

    def integrate(expr):
        poly = sy.Poly(sy.expand(expr), x, y, z)
        return sum(coef * a ** (i + 1) * b ** (j + 1) * c ** (k + 1) / ((i + 1) * (j + 1) * (k + 1))
                   for (i, j, k), coef in poly.terms())

    K = np.zeros((24, 24))
    for i in range(24):
        for j in range(i, 24):
            K[i, j] = K[j, i] = float(integrate(integrand[i, j]))
    return K


def brick_coords(a, b, c):
    return ((HEX8_NODES + 1) / 2) * np.array([a, b, c])


def rigid_body_modes(coords):
    """Three translations and three infinitesimal rotations, node-major DOFs."""
    modes = []
    for d in range(3):
        t = np.zeros((len(coords), 3))
        t[:, d] = 1
        modes.append(t.ravel())
    for axis in np.eye(3):
        modes.append(np.cross(axis, coords).ravel())
    return np.array(modes).T


@pytest.fixture(scope="session")
def sym_brick():
    dims = (0.01, 0.02, 0.015)
    return dims, symbolic_hex8_stiffness(*dims, nu=0.3)


def dense_assembly(mesh, ke, me, w, v):
    """Reference global matrices by looping over elements (full DOFs, then restricted)."""
    dpv = mesh.dof_per_vertex
    N = dpv * mesh.q
    K = np.zeros((N, N))
    M = np.zeros((N, N))
    for e, conn in enumerate(mesh.elements):
        dofs = (dpv * np.asarray(conn)[:, None] + np.arange(dpv)).ravel()
        vox = mesh.voxel_of_element[e]
        K[np.ix_(dofs, dofs)] += w[vox] * ke[e]
        M[np.ix_(dofs, dofs)] += v[vox] * me[e]
    free = np.sort(mesh.dof_map.ravel()[mesh.dof_map.ravel() >= 0])
    keep = np.flatnonzero(mesh.dof_map.ravel() >= 0)
    order = np.argsort(mesh.dof_map.ravel()[keep])
    idx = keep[order]
    assert len(free) == len(idx)
    return K[np.ix_(idx, idx)], M[np.ix_(idx, idx)]


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    _CRITERIA[mark.args[0]] = (rep.passed, item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, name, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}")
