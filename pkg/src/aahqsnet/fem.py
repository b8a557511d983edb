"""Complete electrode model: P1 forward solver and sensitivity matrix.

Unknowns are the nodal potentials ``u`` followed by the electrode
potentials ``U``.  The CEM matrix

    [ sum_e sigma_e K_e + B_zz    -B_zU ]
    [ -B_zU^T                      D_z  ]

is augmented with one Lagrange row enforcing ``sum(U) = 0``, and the
resulting symmetric saddle-point system is factorised once per
conductivity and reused for every right-hand side.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import ElectrodeConfig, Mesh, element_areas, element_gradients

SOLVE_RTOL = 1e-10


class SingularSystemError(RuntimeError):
    """The CEM system cannot be factorised for the given configuration."""


class ForwardSolveError(RuntimeError):
    """A linear solve did not meet its residual tolerance."""


class ProtocolError(ValueError):
    """Invalid or mismatched stimulation protocol."""


@dataclass(frozen=True)
class StimProtocol:
    """Injection pairs with the measurement pairs read for each injection.

    ``injections`` holds ``(drive_plus, drive_minus, current)`` triples and
    ``measurements[i]`` the ``(meas_plus, meas_minus)`` pairs for injection
    ``i``.
    """

    injections: tuple[tuple[int, int, float], ...]
    measurements: tuple[tuple[tuple[int, int], ...], ...]
    n_electrodes: int

    def __post_init__(self):
        inj = tuple((int(a), int(b), float(c)) for a, b, c in self.injections)
        meas = tuple(tuple((int(p), int(q)) for p, q in pairs) for pairs in self.measurements)
        object.__setattr__(self, "injections", inj)
        object.__setattr__(self, "measurements", meas)
        if len(inj) != len(meas):
            raise ProtocolError("one measurement list is required per injection")
        L = self.n_electrodes
        for (a, b, _), pairs in zip(inj, meas):
            if a == b:
                raise ProtocolError(f"drive electrodes coincide ({a})")
            if not (0 <= a < L and 0 <= b < L):
                raise ProtocolError("drive electrode out of range")
            for p, q in pairs:
                if p == q:
                    raise ProtocolError(f"measurement pair uses electrode {p} twice")
                if not (0 <= p < L and 0 <= q < L):
                    raise ProtocolError("measurement electrode out of range")
                if {p, q} & {a, b}:
                    raise ProtocolError(f"measurement pair ({p}, {q}) touches drive ({a}, {b})")

    @property
    def n_M(self) -> int:
        return sum(len(p) for p in self.measurements)

    def rows(self) -> np.ndarray:
        """``(n_M, 3)`` array of (injection index, meas+, meas-) per row."""
        out = [(i, p, q) for i, pairs in enumerate(self.measurements) for p, q in pairs]
        return np.array(out, dtype=np.int64).reshape(-1, 3)

    def current_patterns(self) -> np.ndarray:
        """Electrode currents, shape ``(n_injections, L)``."""
        I = np.zeros((len(self.injections), self.n_electrodes))
        for i, (a, b, c) in enumerate(self.injections):
            I[i, a] += c
            I[i, b] -= c
        return I

    def to_dict(self) -> dict:
        return {
            "n_electrodes": self.n_electrodes,
            "injections": [list(x) for x in self.injections],
            "measurements": [[list(p) for p in pairs] for pairs in self.measurements],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StimProtocol":
        return cls(tuple(map(tuple, d["injections"])),
                   tuple(tuple(map(tuple, pairs)) for pairs in d["measurements"]),
                   int(d["n_electrodes"]))


def opposite_adjacent_protocol(n_electrodes: int = 16, current: float = 1.0,
                               exclude_drive: bool = True) -> StimProtocol:
    """Opposite injection ``(l, l + L/2)`` with adjacent-pair measurements.

    Pairs touching a drive electrode are skipped, which gives
    ``16 * 12 = 192`` rows for sixteen electrodes.
    """
    L = n_electrodes
    if L % 2:
        raise ProtocolError("opposite injection needs an even electrode count")
    inj, meas = [], []
    for l in range(L):
        a, b = l, (l + L // 2) % L
        inj.append((a, b, current))
        pairs = [(k, (k + 1) % L) for k in range(L)]
        if exclude_drive:
            pairs = [p for p in pairs if not {p[0], p[1]} & {a, b}]
        meas.append(tuple(pairs))
    return StimProtocol(tuple(inj), tuple(meas), L)


@dataclass
class ForwardSolution:
    """Nodal potentials ``u`` (n_inj, n_nodes) and electrode potentials ``U`` (n_inj, L)."""

    u: np.ndarray
    U: np.ndarray
    protocol: StimProtocol | None = None
    residual: float = 0.0


@dataclass
class MeasurementSet:
    v: np.ndarray
    protocol: StimProtocol | None = None
    noise: dict = field(default_factory=lambda: {"eta": 0.0, "snr_db": float("inf")})

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        if not np.all(np.isfinite(self.v)):
            raise ValueError("measurement vector has non-finite entries")
        if self.protocol is not None and len(self.v) != self.protocol.n_M:
            raise ProtocolError(f"expected {self.protocol.n_M} measurements, got {len(self.v)}")


class ForwardModel:
    """Reusable CEM discretisation for one mesh, electrode set and protocol.

    All per-mesh quantities (element stiffness templates, electrode
    boundary integrals, sparsity pattern) are computed once here; each call
    at a new conductivity only rescales element blocks and refactorises.
    """

    def __init__(self, mesh: Mesh, electrodes: ElectrodeConfig, protocol: StimProtocol | None = None):
        if mesh.n_E != electrodes.n_electrodes:
            raise ValueError(f"mesh has {mesh.n_E} electrodes, config has {electrodes.n_electrodes}")
        self.mesh = mesh
        self.electrodes = electrodes
        self.protocol = protocol or opposite_adjacent_protocol(electrodes.n_electrodes)
        if self.protocol.n_electrodes != mesh.n_E:
            raise ProtocolError("protocol electrode count does not match the mesh")
        self.n_nodes = mesh.n_nodes
        self.n_T = mesh.n_T
        self.L = mesh.n_E
        self.areas = element_areas(mesh)
        self.grads = element_gradients(mesh)
        # K_e = area * G^T G, flattened row-major per element
        self._ke = (self.areas[:, None, None] * np.einsum("eki,ekj->eij", self.grads, self.grads)).reshape(self.n_T, 9)
        tri = mesh.triangles
        self._rows = np.repeat(tri, 3, axis=1).ravel()
        self._cols = np.tile(tri, (1, 3)).ravel()
        self._electrode_block = self._assemble_electrode_terms(1.0 / electrodes.z)
        n = self.n_nodes + self.L
        c = np.zeros(n)
        c[self.n_nodes:] = 1.0
        self._constraint = sp.csc_matrix(c.reshape(-1, 1))
        self._rows_table = self.protocol.rows()
        pairs = sorted({(int(p), int(q)) for _, p, q in self._rows_table})
        self._pairs = pairs
        pair_index = {pq: k for k, pq in enumerate(pairs)}
        self._row_pair = np.array([pair_index[(int(p), int(q))] for _, p, q in self._rows_table], dtype=np.int64)

    # -- assembly ---------------------------------------------------------
    def _assemble_electrode_terms(self, inv_z: np.ndarray) -> sp.csr_matrix:
        N, L = self.n_nodes, self.L
        rows, cols, vals = [], [], []
        for l in range(L):
            edges = self.mesh.electrode_edges(l)
            if len(edges) == 0:
                raise SingularSystemError(f"electrode {l} covers zero boundary edges")
            total = 0.0
            for p, q in edges:
                h = float(np.linalg.norm(self.mesh.nodes[q] - self.mesh.nodes[p]))
                total += h
                w = inv_z[l] * h
                for (i, j, m) in ((p, p, 2), (q, q, 2), (p, q, 1), (q, p, 1)):
                    rows.append(i); cols.append(j); vals.append(w * m / 6.0)
                for i in (p, q):
                    rows += [i, N + l]; cols += [N + l, i]; vals += [-w / 2.0, -w / 2.0]
            rows.append(N + l); cols.append(N + l); vals.append(inv_z[l] * total)
        return sp.csr_matrix((vals, (rows, cols)), shape=(N + L, N + L))

    def assemble(self, sigma) -> sp.csr_matrix:
        """Singular CEM matrix (without the grounding row) for ``sigma``."""
        sigma = self._check_sigma(sigma)
        n = self.n_nodes + self.L
        S = sp.csr_matrix(((sigma[:, None] * self._ke).ravel(), (self._rows, self._cols)), shape=(n, n))
        return S + self._electrode_block

    def _check_sigma(self, sigma) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (self.n_T,):
            raise ValueError(f"sigma must have shape ({self.n_T},), got {sigma.shape}")
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ValueError("conductivity must be finite and strictly positive")
        return sigma

    def factorize(self, sigma) -> "_Factor":
        A = self.assemble(sigma)
        K = sp.bmat([[A, self._constraint], [self._constraint.T, None]], format="csc")
        try:
            lu = spla.splu(K)
        except RuntimeError as exc:
            raise SingularSystemError(f"CEM system is singular: {exc}") from exc
        return _Factor(K, lu, self.n_nodes, self.L)

    # -- solves -----------------------------------------------------------
    def solve_patterns(self, sigma, currents: np.ndarray, factor: "_Factor | None" = None):
        """Potentials for each row of ``currents`` (shape ``(k, L)``)."""
        factor = factor or self.factorize(sigma)
        return factor.solve(np.atleast_2d(currents))

    def solve(self, sigma, factor=None) -> ForwardSolution:
        u, U, res = self.solve_patterns(sigma, self.protocol.current_patterns(), factor)
        return ForwardSolution(u, U, self.protocol, res)

    def measure(self, solution: ForwardSolution) -> np.ndarray:
        if solution.protocol is not None and solution.protocol != self.protocol:
            raise ProtocolError("solution was computed under a different protocol")
        return measure(solution, self.protocol).v

    def forward(self, sigma) -> np.ndarray:
        """Noiseless electrode measurements ``F(sigma)``."""
        return self.measure(self.solve(sigma))

    def linearize(self, sigma, floor: float | None = None):
        """Return ``(F(sigma), J(sigma))`` sharing one factorisation.

        ``floor`` clips the conductivity from below before evaluation; the
        unrolled reconstructors use it to keep intermediate iterates
        admissible.
        """
        sigma = np.asarray(sigma, dtype=float)
        if floor is not None:
            sigma = np.maximum(sigma, floor)
        factor = self.factorize(sigma)
        I = self.protocol.current_patterns()
        adj = np.zeros((len(self._pairs), self.L))
        for k, (p, q) in enumerate(self._pairs):
            adj[k, p] += 1.0
            adj[k, q] -= 1.0
        u, U, _ = factor.solve(np.vstack([I, adj]))
        n_inj = len(I)
        rows = self._rows_table
        v = U[rows[:, 0], rows[:, 1]] - U[rows[:, 0], rows[:, 2]]
        J = self._sensitivity(u[:n_inj], u[n_inj:])
        return v, J

    def jacobian(self, sigma) -> np.ndarray:
        return self.linearize(sigma)[1]

    def _sensitivity(self, u_drive: np.ndarray, u_adj: np.ndarray) -> np.ndarray:
        tri = self.mesh.triangles
        gd = np.einsum("ekj,iej->iek", self.grads, u_drive[:, tri])
        gm = np.einsum("ekj,iej->iek", self.grads, u_adj[:, tri])
        rows = self._rows_table
        # dv/dsigma_j = -area_j * grad(u_d) . grad(u_m) with u_m the unit-current adjoint field
        return -self.areas[None, :] * np.einsum("iek,iek->ie", gd[rows[:, 0]], gm[self._row_pair])


class _Factor:
    def __init__(self, K, lu, n_nodes, L):
        self.K, self.lu, self.n_nodes, self.L = K, lu, n_nodes, L

    def solve(self, currents: np.ndarray):
        n = self.K.shape[0]
        b = np.zeros((n, len(currents)))
        b[self.n_nodes:self.n_nodes + self.L] = currents.T
        x = self.lu.solve(b)
        r = self.K @ x - b
        bnorm = np.linalg.norm(b, axis=0)
        rel = np.linalg.norm(r, axis=0) / np.where(bnorm > 0, bnorm, 1.0)
        worst = float(rel.max()) if rel.size else 0.0
        if not np.all(np.isfinite(x)) or worst > SOLVE_RTOL:
            diag = np.abs(self.K.diagonal())
            raise ForwardSolveError(
                f"relative residual {worst:.3e} exceeds {SOLVE_RTOL:g}; "
                f"diagonal range [{diag.min():.3e}, {diag.max():.3e}]"
            )
        u = x[:self.n_nodes].T.copy()
        U = x[self.n_nodes:self.n_nodes + self.L].T.copy()
        return u, U, worst


# -- functional interface ------------------------------------------------------

def assemble_system(mesh: Mesh, sigma, electrodes: ElectrodeConfig) -> sp.csr_matrix:
    return ForwardModel(mesh, electrodes, _trivial_protocol(electrodes.n_electrodes)).assemble(sigma)


def _trivial_protocol(L: int) -> StimProtocol:
    return StimProtocol(((0, 1, 0.0),), ((),), L)


def solve_forward(mesh: Mesh, sigma, electrodes: ElectrodeConfig, protocol: StimProtocol) -> ForwardSolution:
    return ForwardModel(mesh, electrodes, protocol).solve(sigma)


def measure(solution: ForwardSolution, protocol: StimProtocol) -> MeasurementSet:
    """Voltage differences ``U[meas+] - U[meas-]``, injection-major order."""
    if solution.protocol is not None and solution.protocol != protocol:
        raise ProtocolError("solution was computed under a different protocol")
    if solution.U.shape != (len(protocol.injections), protocol.n_electrodes):
        raise ProtocolError("solution shape does not match the protocol")
    rows = protocol.rows()
    v = solution.U[rows[:, 0], rows[:, 1]] - solution.U[rows[:, 0], rows[:, 2]]
    return MeasurementSet(v, protocol)


def forward_map(mesh: Mesh, sigma, electrodes: ElectrodeConfig, protocol: StimProtocol) -> MeasurementSet:
    return MeasurementSet(ForwardModel(mesh, electrodes, protocol).forward(sigma), protocol)


def assemble_jacobian(mesh: Mesh, sigma, electrodes: ElectrodeConfig, protocol: StimProtocol) -> np.ndarray:
    return ForwardModel(mesh, electrodes, protocol).jacobian(sigma)
