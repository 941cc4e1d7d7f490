"""Sparse nonlinear least-squares backend over typed nodes.

Node kinds: keyframe/origin (SE(3)), wall (plane with a 2+1 tangent update),
room (planar 2-vector), floor (3-vector, always held fixed).  Factors connect
them with odometry, pose-plane, room-wall, inter-robot match and prior
constraints.  Optimization is Levenberg-Marquardt with additive damping over
sparse normal equations; the hot factor kinds (odometry, pose-plane, priors)
are linearized analytically in batch, the rare ones fall back to per-factor
central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import (
    Plane,
    Pose,
    quat_from_rotvec,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    quat_to_rotvec,
    room_center_from_walls,
    skew,
    so3_right_jacobian_inv,
    tangent_basis,
    tangent_basis_batch,
    transform_plane,
    wrap_angle,
)


class SingularSystemError(RuntimeError):
    """The normal equations cannot be solved: the graph is under-constrained."""


NODE_DIMS = {"keyframe": 6, "origin": 6, "wall": 3, "room": 2, "floor": 3}
FACTOR_ARITY = {
    "odometry": 2,
    "pose_plane": 2,
    "room_wall": 5,
    "room_match": 3,
    "wall_match": 3,
    "prior": 1,
}


@dataclass(frozen=True)
class NodeId:
    owner: int
    kind: str
    index: int

    def __repr__(self) -> str:
        return f"{self.kind}({self.owner},{self.index})"


@dataclass
class GraphNode:
    id: NodeId
    state: Any
    fixed: bool = False


@dataclass
class PlanarMatchMeasurement:
    """Room-to-room match: transform t/yaw maps peer-room coordinates into the
    local room frame; yaw_a / yaw_b are the room frame headings in their own
    map frames at match time."""

    t: np.ndarray
    yaw: float
    yaw_a: float
    yaw_b: float

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(2)


@dataclass
class Factor:
    kind: str
    nodes: tuple[NodeId, ...]
    measurement: Any
    information: np.ndarray
    robust: bool = False
    sqrt_info: np.ndarray = field(init=False)
    meas_basis: np.ndarray | None = field(init=False, default=None)

    def __post_init__(self):
        if self.kind not in FACTOR_ARITY:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        if len(self.nodes) != FACTOR_ARITY[self.kind]:
            raise ValueError(
                f"{self.kind} factor takes {FACTOR_ARITY[self.kind]} nodes, "
                f"got {len(self.nodes)}"
            )
        info = np.asarray(self.information, dtype=float)
        if info.ndim == 1:
            info = np.diag(info)
        if not np.allclose(info, info.T, atol=1e-9):
            raise ValueError("information matrix must be symmetric")
        self.information = info
        # whitening by L^T where info = L L^T
        self.sqrt_info = np.linalg.cholesky(info).T
        if self.kind in ("pose_plane", "prior") and isinstance(self.measurement, Plane):
            self.meas_basis = tangent_basis(self.measurement.normal)

    @property
    def dim(self) -> int:
        return self.information.shape[0]


# ---------------------------------------------------------------------------
# residuals (scalar forms; the optimizer batches the hot ones)
# ---------------------------------------------------------------------------


def plane_error(pred_n: np.ndarray, pred_d: float, meas: Plane,
                meas_basis: np.ndarray | None = None) -> np.ndarray:
    """Minimal 3-vector difference between a predicted plane and a measured
    one: 2 tangent components of the normal plus the offset gap.  The
    prediction is flipped onto the measurement hemisphere first, so the error
    is insensitive to the sign convention of either side."""
    if meas_basis is None:
        meas_basis = tangent_basis(meas.normal)
    s = 1.0 if float(pred_n @ meas.normal) >= 0.0 else -1.0
    rn = meas_basis.T @ (s * pred_n)
    rd = s * pred_d - meas.offset
    return np.array([rn[0], rn[1], rd])


def residual_odometry(Ti: Pose, Tj: Pose, meas: Pose) -> np.ndarray:
    """[rotvec, translation] of meas^-1 Ti^-1 Tj; zero iff the relative pose
    equals the measurement."""
    err = meas.inverse().compose(Ti.inverse().compose(Tj))
    return np.concatenate([quat_to_rotvec(err.q), err.t])


def residual_pose_plane(T: Pose, wall: Plane, meas: Plane) -> np.ndarray:
    """Wall (map frame) re-expressed in the body frame of T versus the
    observed body-frame plane: n_b = R^T n, d_b = d + n . t."""
    R = quat_to_matrix(T.q)
    n_b = R.T @ wall.normal
    d_b = wall.offset + float(wall.normal @ T.t)
    return plane_error(n_b, d_b, meas)


def residual_room_wall(room: np.ndarray, walls: list[Plane]) -> np.ndarray:
    """Room center minus the analytic center of its four inward walls."""
    return np.asarray(room, dtype=float) - room_center_from_walls(walls)


def residual_room_match(origin_b: Pose, room_a: np.ndarray, room_b: np.ndarray,
                        meas: PlanarMatchMeasurement) -> np.ndarray:
    """Planar (x, y, yaw) inconsistency between the origin_b-transformed peer
    room frame and the placement the match transform predicts."""
    cb = np.array([room_b[0], room_b[1], 0.0])
    mapped = origin_b.apply(cb)[:2]
    predicted = np.asarray(room_a, dtype=float) + _rot2(meas.yaw_a) @ meas.t
    r_yaw = wrap_angle(origin_b.yaw + meas.yaw_b - meas.yaw_a - meas.yaw)
    return np.array([mapped[0] - predicted[0], mapped[1] - predicted[1], r_yaw])


def residual_wall_match(origin_b: Pose, wall_a: Plane, wall_b: Plane) -> np.ndarray:
    """Minimal difference between a local wall and the peer wall mapped into
    the local frame by the peer-origin estimate."""
    mapped = transform_plane(origin_b, wall_b)
    return plane_error(mapped.normal, mapped.offset, wall_a)


def residual_prior(state: Any, meas: Any) -> np.ndarray:
    if isinstance(meas, Pose):
        err = meas.inverse().compose(state)
        return np.concatenate([quat_to_rotvec(err.q), state.t - meas.t])
    if isinstance(meas, Plane):
        return plane_error(state.normal, state.offset, meas)
    return np.asarray(state, dtype=float) - np.asarray(meas, dtype=float)


def _rot2(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def evaluate_residual(factor: Factor, states: list[Any]) -> np.ndarray:
    k = factor.kind
    if k == "odometry":
        return residual_odometry(states[0], states[1], factor.measurement)
    if k == "pose_plane":
        return residual_pose_plane(states[0], states[1], factor.measurement)
    if k == "room_wall":
        signs = factor.measurement
        walls = [w if s > 0 else w.flipped() for w, s in zip(states[1:], signs)]
        return residual_room_wall(states[0], walls)
    if k == "room_match":
        return residual_room_match(states[0], states[1], states[2], factor.measurement)
    if k == "wall_match":
        return residual_wall_match(states[0], states[1], states[2])
    if k == "prior":
        return residual_prior(states[0], factor.measurement)
    raise ValueError(k)


def retract_state(state: Any, delta: np.ndarray) -> Any:
    """Apply a local perturbation: right-multiplicative rotation plus additive
    translation for poses, tangent (2) + offset (1) for planes, additive for
    vector states."""
    if isinstance(state, Pose):
        q = quat_normalize(quat_mul(state.q, quat_from_rotvec(delta[:3])))
        return Pose(q, state.t + delta[3:6])
    if isinstance(state, Plane):
        b = tangent_basis(state.normal)
        n = state.normal + b @ delta[:2]
        n = n / np.linalg.norm(n)
        return Plane(n, state.offset + delta[2], state.covariance)
    return np.asarray(state, dtype=float) + delta


def state_dim(state: Any) -> int:
    if isinstance(state, Pose):
        return 6
    if isinstance(state, Plane):
        return 3
    return int(np.asarray(state).size)


def numeric_factor_jacobians(factor: Factor, states: list[Any],
                             step: float = 1e-6) -> list[np.ndarray]:
    """Central-difference Jacobian blocks w.r.t. each node's local update."""
    out = []
    for i, st in enumerate(states):
        d = state_dim(st)
        J = np.zeros((factor.dim, d))
        for k in range(d):
            dv = np.zeros(d)
            dv[k] = step
            sp_ = list(states)
            sm_ = list(states)
            sp_[i] = retract_state(st, dv)
            sm_[i] = retract_state(st, -dv)
            J[:, k] = (evaluate_residual(factor, sp_) - evaluate_residual(factor, sm_)) / (2 * step)
        out.append(J)
    return out


def _wall_match_linearize(origin: Pose, wall_a: Plane, wall_b: Plane,
                          step: float = 1e-6):
    """Residual and central-difference Jacobian blocks, evaluated in one
    vectorized batch over all perturbed parameter sets."""
    rows = 1 + 2 * 12
    qs = np.tile(origin.q, (rows, 1))
    ts = np.tile(origin.t, (rows, 1))
    nas = np.tile(wall_a.normal, (rows, 1))
    das = np.full(rows, wall_a.offset)
    nbs = np.tile(wall_b.normal, (rows, 1))
    dbs = np.full(rows, wall_b.offset)
    Ba = tangent_basis(wall_a.normal)
    Bb = tangent_basis(wall_b.normal)
    r_i = 1
    for axis in range(3):
        for sgn in (1.0, -1.0):
            dv = np.zeros(3)
            dv[axis] = sgn * step
            qs[r_i] = quat_mul(origin.q, quat_from_rotvec(dv))
            r_i += 1
    for axis in range(3):
        for sgn in (1.0, -1.0):
            ts[r_i, axis] += sgn * step
            r_i += 1
    for B, ns, ds in ((Ba, nas, das), (Bb, nbs, dbs)):
        for k in range(2):
            for sgn in (1.0, -1.0):
                n = ns[r_i] + sgn * step * B[:, k]
                ns[r_i] = n / np.linalg.norm(n)
                r_i += 1
        for sgn in (1.0, -1.0):
            ds[r_i] += sgn * step
            r_i += 1

    n_map = quat_rotate(qs, nbs)
    d_map = dbs - np.einsum("ni,ni->n", n_map, ts)
    sigma = np.where(np.einsum("ni,ni->n", n_map, nas) >= 0.0, 1.0, -1.0)
    Bas = tangent_basis_batch(nas)
    rn = np.einsum("nij,ni->nj", Bas, sigma[:, None] * n_map)
    rd = sigma * d_map - das
    r_all = np.concatenate([rn, rd[:, None]], axis=1)

    r = r_all[0]
    cols = (r_all[1::2] - r_all[2::2]).T / (2.0 * step)  # (3, 12)
    return r, [cols[:, :6], cols[:, 6:9], cols[:, 9:12]]


def _room_match_linearize(origin: Pose, room_a, room_b,
                          meas: PlanarMatchMeasurement, step: float = 1e-6):
    rows = 1 + 2 * 10
    qs = np.tile(origin.q, (rows, 1))
    ts = np.tile(origin.t, (rows, 1))
    ras = np.tile(np.asarray(room_a, dtype=float), (rows, 1))
    rbs = np.tile(np.asarray(room_b, dtype=float), (rows, 1))
    r_i = 1
    for axis in range(3):
        for sgn in (1.0, -1.0):
            dv = np.zeros(3)
            dv[axis] = sgn * step
            qs[r_i] = quat_mul(origin.q, quat_from_rotvec(dv))
            r_i += 1
    for axis in range(3):
        for sgn in (1.0, -1.0):
            ts[r_i, axis] += sgn * step
            r_i += 1
    for arr in (ras, rbs):
        for k in range(2):
            for sgn in (1.0, -1.0):
                arr[r_i, k] += sgn * step
                r_i += 1

    cb3 = np.concatenate([rbs, np.zeros((rows, 1))], axis=1)
    mapped = quat_rotate(qs, cb3) + ts
    pred = ras + _rot2(meas.yaw_a) @ meas.t
    m = quat_to_matrix(qs)
    yaw = np.arctan2(m[:, 1, 0], m[:, 0, 0])
    r_yaw = wrap_angle(yaw + meas.yaw_b - meas.yaw_a - meas.yaw)
    r_all = np.concatenate([mapped[:, :2] - pred, r_yaw[:, None]], axis=1)

    r = r_all[0]
    cols = (r_all[1::2] - r_all[2::2]).T / (2.0 * step)  # (3, 10)
    return r, [cols[:, :6], cols[:, 6:8], cols[:, 8:10]]


def _room_wall_jacobians(factor: Factor, states: list[Any]) -> list[np.ndarray]:
    """Analytic blocks for room - analytic_center(walls)."""
    signs = factor.measurement
    planes = [w if s > 0 else w.flipped() for w, s in zip(states[1:], signs)]
    # forward pass
    rows = np.zeros((2, 2))
    rhs = np.zeros(2)
    us = []
    for k, (p, q) in enumerate(((planes[0], planes[1]), (planes[2], planes[3]))):
        v = (p.normal - q.normal)[:2]
        nv = np.linalg.norm(v)
        u = v / nv
        rows[k] = u
        rhs[k] = 0.5 * (q.offset - p.offset)
        us.append((u, nv))
    center = np.linalg.solve(rows, rhs)
    Uinv = np.linalg.inv(rows)

    jac = [np.eye(2)]
    for w_idx in range(4):
        pair = w_idx // 2
        first = w_idx % 2 == 0
        s = signs[w_idx]
        base = states[1 + w_idx]
        B = tangent_basis(base.normal)  # retraction basis of the raw state
        u, nv = us[pair]
        P = np.eye(2) - np.outer(u, u)
        J = np.zeros((2, 3))
        for col in range(3):
            if col < 2:
                dn = s * B[:, col]  # oriented normal derivative
                de = 0.0
            else:
                dn = np.zeros(3)
                de = s
            dv = dn[:2] if first else -dn[:2]
            du = P @ dv / nv
            drhs = (-0.5 * de) if first else (0.5 * de)
            dU = np.zeros((2, 2))
            dU[pair] = du
            d_rhs = np.zeros(2)
            d_rhs[pair] = drhs
            dcenter = Uinv @ (d_rhs - dU @ center)
            J[:, col] = -dcenter
        jac.append(J)
    return jac


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizeConfig:
    max_iterations: int = 50
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0
    lambda_max: float = 1e10
    rel_decrease_tol: float = 1e-9
    step_tol: float = 1e-10
    huber_delta: float = 1.0


@dataclass
class OptimizeResult:
    initial_cost: float
    final_cost: float
    cost_history: list[float]
    iterations: int
    converged: bool
    termination: str


class FactorGraph:
    def __init__(self):
        self.nodes: dict[NodeId, GraphNode] = {}
        self.factors: list[Factor] = []
        self._marginal_cache: tuple | None = None

    # -- construction -------------------------------------------------------

    def add_node(self, node_id: NodeId, state: Any, fixed: bool = False) -> NodeId:
        if node_id in self.nodes:
            raise ValueError(f"duplicate node {node_id}")
        expected = NODE_DIMS.get(node_id.kind)
        if expected is None:
            raise ValueError(f"unknown node kind {node_id.kind!r}")
        if node_id.kind in ("keyframe", "origin") and not isinstance(state, Pose):
            raise TypeError(f"{node_id.kind} state must be a Pose")
        if node_id.kind == "wall" and not isinstance(state, Plane):
            raise TypeError("wall state must be a Plane")
        if node_id.kind in ("room", "floor"):
            state = np.asarray(state, dtype=float).reshape(expected // 1)
            if state.size != expected:
                raise ValueError(f"{node_id.kind} state must have {expected} entries")
        self.nodes[node_id] = GraphNode(node_id, state, fixed)
        self._marginal_cache = None
        return node_id

    def add_factor(self, kind: str, nodes, measurement, information,
                   robust: bool = False) -> Factor:
        nodes = tuple(nodes)
        for nid in nodes:
            if nid not in self.nodes:
                raise KeyError(f"factor references unknown node {nid}")
        f = Factor(kind, nodes, measurement, information, robust)
        self.factors.append(f)
        self._marginal_cache = None
        return f

    def state(self, node_id: NodeId) -> Any:
        return self.nodes[node_id].state

    def set_state(self, node_id: NodeId, state: Any) -> None:
        self.nodes[node_id].state = state
        self._marginal_cache = None

    def set_fixed(self, node_id: NodeId, fixed: bool) -> None:
        self.nodes[node_id].fixed = fixed

    # -- evaluation ---------------------------------------------------------

    def factor_states(self, factor: Factor) -> list[Any]:
        return [self.nodes[n].state for n in factor.nodes]

    def factor_residual(self, factor: Factor) -> np.ndarray:
        return evaluate_residual(factor, self.factor_states(factor))

    def factor_jacobians(self, factor: Factor) -> list[np.ndarray]:
        """Jacobian blocks of the (unwhitened) residual, in node order.

        Uses the same analytic expressions the optimizer uses for the hot
        kinds and central differences elsewhere.
        """
        states = self.factor_states(factor)
        if factor.kind == "odometry":
            r, Ji, Jj = _odometry_linearize(states[0], states[1], factor.measurement)
            return [Ji, Jj]
        if factor.kind == "pose_plane":
            r, Jp, Jw = _pose_plane_linearize(states[0], states[1], factor)
            return [Jp, Jw]
        if factor.kind == "prior":
            return [_prior_jacobian(states[0], factor)]
        if factor.kind == "room_wall":
            return _room_wall_jacobians(factor, states)
        if factor.kind == "wall_match":
            return _wall_match_linearize(states[0], states[1], states[2])[1]
        if factor.kind == "room_match":
            return _room_match_linearize(states[0], states[1], states[2],
                                         factor.measurement)[1]
        return numeric_factor_jacobians(factor, states)

    def total_cost(self, huber_delta: float = 1.0) -> float:
        cost = 0.0
        for f in self.factors:
            r = f.sqrt_info @ self.factor_residual(f)
            e = float(np.linalg.norm(r))
            if f.robust and e > huber_delta:
                cost += huber_delta * (2.0 * e - huber_delta)
            else:
                cost += e * e
        return cost

    # -- optimization -------------------------------------------------------

    def optimize(self, config: OptimizeConfig | None = None) -> OptimizeResult:
        config = config or OptimizeConfig()
        self._check_gauge()
        prob = _Problem(self, config)
        result = prob.run()
        prob.write_back()
        self._marginal_cache = None
        return result

    def _check_gauge(self) -> None:
        """A component holding free pose nodes needs a fixed node or a prior."""
        parent: dict[NodeId, NodeId] = {n: n for n in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        anchored: set[NodeId] = set()
        for f in self.factors:
            root = find(f.nodes[0])
            for n in f.nodes[1:]:
                parent[find(n)] = root
            if f.kind == "prior":
                anchored.add(f.nodes[0])
        comp_fixed: dict[NodeId, bool] = {}
        for n, node in self.nodes.items():
            r = find(n)
            comp_fixed.setdefault(r, False)
            if node.fixed or n in anchored:
                comp_fixed[r] = True
        for f in self.factors:
            if f.kind != "odometry":
                continue
            if not comp_fixed[find(f.nodes[0])]:
                raise SingularSystemError(
                    "pose component has no fixed node and no prior"
                )

    # -- marginals ----------------------------------------------------------

    def marginal_covariance(self, node_ids) -> dict[NodeId, np.ndarray]:
        """Marginal covariance blocks from the Gauss-Newton approximation at
        the current states."""
        prob = _Problem(self, OptimizeConfig())
        H, _, _ = prob.normal_equations()
        n = H.shape[0]
        if n == 0:
            return {nid: np.zeros((0, 0)) for nid in node_ids}
        H = H + 1e-12 * sp.identity(n, format="csc")
        try:
            lu = splu(H.tocsc())
        except RuntimeError as exc:
            raise SingularSystemError(str(exc)) from exc
        out = {}
        for nid in node_ids:
            off = prob.offsets.get(nid)
            d = state_dim(self.nodes[nid].state)
            if off is None:
                out[nid] = np.zeros((d, d))
                continue
            rhs = np.zeros((n, d))
            rhs[off : off + d] = np.eye(d)
            sol = lu.solve(rhs)
            out[nid] = sol[off : off + d]
        return out


# ---------------------------------------------------------------------------
# analytic linearizations
# ---------------------------------------------------------------------------


def _odometry_linearize(Ti: Pose, Tj: Pose, meas: Pose):
    Ri = quat_to_matrix(Ti.q)
    Rm = quat_to_matrix(meas.q)
    q_err = quat_mul(quat_mul((meas.q * np.array([-1.0, -1, -1, 1])),
                              (Ti.q * np.array([-1.0, -1, -1, 1]))), Tj.q)
    phi = quat_to_rotvec(quat_normalize(q_err))
    t_rel = Ri.T @ (Tj.t - Ti.t)
    t_err = Rm.T @ (t_rel - meas.t)
    r = np.concatenate([phi, t_err])

    jr_inv = so3_right_jacobian_inv(phi)
    jl_inv = jr_inv.T
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[:3, :3] = -jl_inv @ Rm.T
    Ji[3:, :3] = Rm.T @ skew(t_rel)
    Ji[3:, 3:] = -Rm.T @ Ri.T
    Jj[:3, :3] = jr_inv
    Jj[3:, 3:] = Rm.T @ Ri.T
    return r, Ji, Jj


def _pose_plane_linearize(T: Pose, wall: Plane, factor: Factor):
    meas: Plane = factor.measurement
    Bm = factor.meas_basis
    R = quat_to_matrix(T.q)
    n_b = R.T @ wall.normal
    d_b = wall.offset + float(wall.normal @ T.t)
    s = 1.0 if float(n_b @ meas.normal) >= 0.0 else -1.0
    r = np.array([*(Bm.T @ (s * n_b)), s * d_b - meas.offset])

    Bw = tangent_basis(wall.normal)
    Jp = np.zeros((3, 6))
    Jp[:2, :3] = s * Bm.T @ skew(n_b)
    Jp[2, 3:] = s * wall.normal
    Jw = np.zeros((3, 3))
    Jw[:2, :2] = s * Bm.T @ R.T @ Bw
    Jw[2, :2] = s * T.t @ Bw
    Jw[2, 2] = s
    return r, Jp, Jw


def _prior_jacobian(state: Any, factor: Factor) -> np.ndarray:
    meas = factor.measurement
    if isinstance(meas, Pose):
        err = meas.inverse().compose(state)
        phi = quat_to_rotvec(err.q)
        J = np.zeros((6, 6))
        J[:3, :3] = so3_right_jacobian_inv(phi)
        J[3:, 3:] = np.eye(3)
        return J
    if isinstance(meas, Plane):
        Bm = factor.meas_basis
        s = 1.0 if float(state.normal @ meas.normal) >= 0.0 else -1.0
        Bw = tangent_basis(state.normal)
        J = np.zeros((3, 3))
        J[:2, :2] = s * Bm.T @ Bw
        J[2, 2] = s
        return J
    return np.eye(state_dim(state))


# ---------------------------------------------------------------------------
# packed problem used inside optimize()
# ---------------------------------------------------------------------------


class _Problem:
    def __init__(self, graph: FactorGraph, config: OptimizeConfig):
        self.graph = graph
        self.config = config

        # pack states by kind
        self.pose_ids: list[NodeId] = []
        self.plane_ids: list[NodeId] = []
        self.vec_ids: list[NodeId] = []
        referenced = set()
        for f in graph.factors:
            referenced.update(f.nodes)
        for nid, node in graph.nodes.items():
            if nid.kind in ("keyframe", "origin"):
                self.pose_ids.append(nid)
            elif nid.kind == "wall":
                self.plane_ids.append(nid)
            else:
                self.vec_ids.append(nid)
        self.pose_row = {n: i for i, n in enumerate(self.pose_ids)}
        self.plane_row = {n: i for i, n in enumerate(self.plane_ids)}
        self.vec_row = {n: i for i, n in enumerate(self.vec_ids)}

        self.pose_q = np.array([graph.nodes[n].state.q for n in self.pose_ids]).reshape(-1, 4)
        self.pose_t = np.array([graph.nodes[n].state.t for n in self.pose_ids]).reshape(-1, 3)
        self.plane_nd = np.array(
            [[*graph.nodes[n].state.normal, graph.nodes[n].state.offset] for n in self.plane_ids]
        ).reshape(-1, 4)
        self.vec_states = [np.asarray(graph.nodes[n].state, dtype=float).copy() for n in self.vec_ids]

        # column layout over free, referenced nodes
        self.offsets: dict[NodeId, int] = {}
        col = 0
        for nid in list(graph.nodes):
            node = graph.nodes[nid]
            if node.fixed or nid not in referenced:
                continue
            self.offsets[nid] = col
            col += state_dim(node.state)
        self.n_cols = col

        # residual row layout
        row = 0
        self.factor_rows = []
        for f in graph.factors:
            self.factor_rows.append(row)
            row += f.dim
        self.n_rows = row

        self._group_factors()
        self._build_triplets()

    # -- factor grouping ----------------------------------------------------

    def _group_factors(self):
        g = self.graph
        self.odo_idx = [i for i, f in enumerate(g.factors)
                        if f.kind == "odometry" and not f.robust]
        self.pp_idx = [i for i, f in enumerate(g.factors)
                       if f.kind == "pose_plane" and not f.robust]
        hot = set(self.odo_idx) | set(self.pp_idx)
        self.slow_idx = [i for i in range(len(g.factors)) if i not in hot]

        if self.odo_idx:
            fs = [g.factors[i] for i in self.odo_idx]
            self.odo_i = np.array([self.pose_row[f.nodes[0]] for f in fs])
            self.odo_j = np.array([self.pose_row[f.nodes[1]] for f in fs])
            self.odo_mq = np.array([f.measurement.q for f in fs])
            self.odo_mt = np.array([f.measurement.t for f in fs])
            self.odo_sqrt = np.array([f.sqrt_info for f in fs])
        if self.pp_idx:
            fs = [g.factors[i] for i in self.pp_idx]
            self.pp_pose = np.array([self.pose_row[f.nodes[0]] for f in fs])
            self.pp_wall = np.array([self.plane_row[f.nodes[1]] for f in fs])
            self.pp_mn = np.array([f.measurement.normal for f in fs])
            self.pp_md = np.array([f.measurement.offset for f in fs])
            self.pp_basis = np.array([f.meas_basis for f in fs])
            self.pp_sqrt = np.array([f.sqrt_info for f in fs])

    def _build_triplets(self):
        """COO pattern for the whitened Jacobian; data refilled per iteration."""
        entries = []  # (fi, slot, r0, col, d, nd, data_start)
        start = 0
        for fi, f in enumerate(self.graph.factors):
            r0 = self.factor_rows[fi]
            for slot, nid in enumerate(f.nodes):
                off = self.offsets.get(nid)
                if off is None:
                    continue
                nd = state_dim(self.graph.nodes[nid].state)
                entries.append((fi, slot, r0, off, f.dim, nd, start))
                start += f.dim * nd
        self.jac_rows = np.zeros(start, dtype=np.int64)
        self.jac_cols = np.zeros(start, dtype=np.int64)
        self.jac_data = np.zeros(start)
        # fill index patterns per (d, nd) shape group in one shot
        groups: dict[tuple[int, int], list] = {}
        for e in entries:
            groups.setdefault((e[4], e[5]), []).append(e)
        for (d, nd), es in groups.items():
            r0 = np.array([e[2] for e in es])
            off = np.array([e[3] for e in es])
            ds = np.array([e[6] for e in es])
            block_rows = (r0[:, None, None] +
                          np.arange(d)[None, :, None] +
                          np.zeros((1, 1, nd), dtype=np.int64)).reshape(len(es), -1)
            block_cols = (off[:, None, None] +
                          np.zeros((1, d, 1), dtype=np.int64) +
                          np.arange(nd)[None, None, :]).reshape(len(es), -1)
            pos = ds[:, None] + np.arange(d * nd)
            self.jac_rows[pos] = block_rows
            self.jac_cols[pos] = block_cols
        self.slot_lookup = {
            (e[0], e[1]): (e[6], e[4], e[5]) for e in entries
        }
        # flat scatter indices for the batched kinds
        self._odo_scatter = self._batch_scatter(self.odo_idx, 6, (6, 6))
        self._pp_scatter = self._batch_scatter(self.pp_idx, 3, (6, 3))

    def _batch_scatter(self, factor_ids, dim, node_dims):
        """Per-slot flat index arrays into res / jac_data for a factor batch."""
        if not factor_ids:
            return None
        r0 = np.array([self.factor_rows[fi] for fi in factor_ids])
        res_idx = r0[:, None] + np.arange(dim)
        slots = []
        for slot, nd in enumerate(node_dims):
            ds = np.array([self.slot_lookup.get((fi, slot), (-1,))[0]
                           for fi in factor_ids])
            ok = ds >= 0
            pos = ds[ok, None] + np.arange(dim * nd)
            slots.append((ok, pos))
        return res_idx, slots

    # -- state access -------------------------------------------------------

    def _pose(self, row: int) -> Pose:
        return Pose(self.pose_q[row], self.pose_t[row])

    def _plane(self, row: int) -> Plane:
        return Plane(self.plane_nd[row, :3], self.plane_nd[row, 3])

    def _node_state(self, nid: NodeId):
        if nid.kind in ("keyframe", "origin"):
            return self._pose(self.pose_row[nid])
        if nid.kind == "wall":
            return self._plane(self.plane_row[nid])
        return self.vec_states[self.vec_row[nid]]

    def write_back(self):
        g = self.graph
        for nid, i in self.pose_row.items():
            g.nodes[nid].state = Pose(self.pose_q[i], self.pose_t[i])
        for nid, i in self.plane_row.items():
            old = g.nodes[nid].state
            g.nodes[nid].state = Plane(self.plane_nd[i, :3], self.plane_nd[i, 3],
                                       old.covariance)
        for nid, i in self.vec_row.items():
            g.nodes[nid].state = self.vec_states[i].copy()

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, fill_jacobian: bool) -> tuple[float, np.ndarray]:
        """Whitened, robust-scaled residual vector (and COO data when asked);
        returns (cost, residual)."""
        res = np.zeros(self.n_rows)
        cost = 0.0
        delta = self.config.huber_delta

        def emit(fi, r_w, blocks):
            nonlocal cost
            f = self.graph.factors[fi]
            e = float(np.linalg.norm(r_w))
            w = 1.0
            if f.robust and e > delta:
                w = delta / e
                cost += delta * (2.0 * e - delta)
            else:
                cost += e * e
            sw = np.sqrt(w)
            r0 = self.factor_rows[fi]
            res[r0 : r0 + f.dim] = sw * r_w
            if fill_jacobian:
                for slot, Jw in blocks:
                    ds, d, nd = self.slot_lookup[(fi, slot)]
                    self.jac_data[ds : ds + d * nd] = (sw * Jw).ravel()

        # odometry batch
        if self.odo_idx:
            qi = self.pose_q[self.odo_i]
            ti = self.pose_t[self.odo_i]
            qj = self.pose_q[self.odo_j]
            tj = self.pose_t[self.odo_j]
            Ri = quat_to_matrix(qi)
            Rm = quat_to_matrix(self.odo_mq)
            conj = np.array([-1.0, -1, -1, 1])
            q_err = quat_mul(quat_mul(self.odo_mq * conj, qi * conj), qj)
            phi = quat_to_rotvec(quat_normalize(q_err))
            t_rel = np.einsum("nij,nj->ni", np.swapaxes(Ri, 1, 2), tj - ti)
            t_err = np.einsum("nij,nj->ni", np.swapaxes(Rm, 1, 2), t_rel - self.odo_mt)
            r = np.concatenate([phi, t_err], axis=1)
            r_w = np.einsum("nij,nj->ni", self.odo_sqrt, r)
            res_idx, slots = self._odo_scatter
            res[res_idx] = r_w
            cost += float(np.sum(r_w * r_w))

            if fill_jacobian:
                jr_inv = so3_right_jacobian_inv(phi)
                jl_inv = np.swapaxes(jr_inv, 1, 2)
                RmT = np.swapaxes(Rm, 1, 2)
                RmTRiT = RmT @ np.swapaxes(Ri, 1, 2)
                Ji = np.zeros((len(self.odo_idx), 6, 6))
                Jj = np.zeros_like(Ji)
                Ji[:, :3, :3] = -jl_inv @ RmT
                Ji[:, 3:, :3] = RmT @ skew(t_rel)
                Ji[:, 3:, 3:] = -RmTRiT
                Jj[:, :3, :3] = jr_inv
                Jj[:, 3:, 3:] = RmTRiT
                for slot, Jb in ((0, Ji), (1, Jj)):
                    ok, pos = slots[slot]
                    if len(pos):
                        Jw = (self.odo_sqrt[ok] @ Jb[ok]).reshape(ok.sum(), -1)
                        self.jac_data[pos] = Jw

        # pose-plane batch
        if self.pp_idx:
            q = self.pose_q[self.pp_pose]
            t = self.pose_t[self.pp_pose]
            R = quat_to_matrix(q)
            RT = np.swapaxes(R, 1, 2)
            n = self.plane_nd[self.pp_wall, :3]
            d = self.plane_nd[self.pp_wall, 3]
            n_b = np.einsum("nij,nj->ni", RT, n)
            d_b = d + np.einsum("ni,ni->n", n, t)
            s = np.where(np.einsum("ni,ni->n", n_b, self.pp_mn) >= 0.0, 1.0, -1.0)
            BmT = np.swapaxes(self.pp_basis, 1, 2)
            rn = np.einsum("nij,nj->ni", BmT, s[:, None] * n_b)
            rd = s * d_b - self.pp_md
            r = np.concatenate([rn, rd[:, None]], axis=1)
            r_w = np.einsum("nij,nj->ni", self.pp_sqrt, r)
            res_idx, slots = self._pp_scatter
            res[res_idx] = r_w
            cost += float(np.sum(r_w * r_w))

            if fill_jacobian:
                Bw = tangent_basis_batch(n)
                Jp = np.zeros((len(self.pp_idx), 3, 6))
                Jw = np.zeros((len(self.pp_idx), 3, 3))
                Jp[:, :2, :3] = s[:, None, None] * (BmT @ skew(n_b))
                Jp[:, 2, 3:] = s[:, None] * n
                Jw[:, :2, :2] = s[:, None, None] * (BmT @ RT @ Bw)
                Jw[:, 2, :2] = s[:, None] * np.einsum("ni,nij->nj", t, Bw)
                Jw[:, 2, 2] = s
                for slot, Jb in ((0, Jp), (1, Jw)):
                    ok, pos = slots[slot]
                    if len(pos):
                        Jwht = (self.pp_sqrt[ok] @ Jb[ok]).reshape(ok.sum(), -1)
                        self.jac_data[pos] = Jwht

        # remaining kinds, per factor
        for fi in self.slow_idx:
            f = self.graph.factors[fi]
            states = [self._node_state(n) for n in f.nodes]
            jacs = None
            if f.kind == "wall_match":
                r, jacs = _wall_match_linearize(states[0], states[1], states[2])
            elif f.kind == "room_match":
                r, jacs = _room_match_linearize(states[0], states[1], states[2],
                                                f.measurement)
            else:
                r = evaluate_residual(f, states)
            r_w = f.sqrt_info @ r
            blocks = []
            if fill_jacobian:
                if jacs is None:
                    if f.kind == "room_wall":
                        jacs = _room_wall_jacobians(f, states)
                    elif f.kind == "prior":
                        jacs = [_prior_jacobian(states[0], f)]
                    else:
                        jacs = numeric_factor_jacobians(f, states)
                for slot, J in enumerate(jacs):
                    if (fi, slot) in self.slot_lookup:
                        blocks.append((slot, f.sqrt_info @ J))
            emit(fi, r_w, blocks)

        return cost, res

    def normal_equations(self):
        cost, res = self.evaluate(fill_jacobian=True)
        J = sp.coo_matrix(
            (self.jac_data, (self.jac_rows, self.jac_cols)),
            shape=(self.n_rows, self.n_cols),
        ).tocsr()
        H = (J.T @ J).tocsc()
        b = -J.T @ res
        return H, b, cost

    # -- retraction ---------------------------------------------------------

    def apply_step(self, delta: np.ndarray):
        """New packed states from the base states and a stacked update."""
        new_q = self.pose_q.copy()
        new_t = self.pose_t.copy()
        new_nd = self.plane_nd.copy()
        new_vec = [v.copy() for v in self.vec_states]
        for nid, off in self.offsets.items():
            if nid.kind in ("keyframe", "origin"):
                i = self.pose_row[nid]
                new_q[i] = quat_normalize(quat_mul(self.pose_q[i], quat_from_rotvec(delta[off : off + 3])))
                new_t[i] = self.pose_t[i] + delta[off + 3 : off + 6]
            elif nid.kind == "wall":
                i = self.plane_row[nid]
                b = tangent_basis(self.plane_nd[i, :3])
                n = self.plane_nd[i, :3] + b @ delta[off : off + 2]
                new_nd[i, :3] = n / np.linalg.norm(n)
                new_nd[i, 3] = self.plane_nd[i, 3] + delta[off + 2]
            else:
                i = self.vec_row[nid]
                new_vec[i] = self.vec_states[i] + delta[off : off + state_dim(new_vec[i])]
        return new_q, new_t, new_nd, new_vec

    def set_states(self, packed):
        self.pose_q, self.pose_t, self.plane_nd, self.vec_states = packed

    def snapshot(self):
        return (self.pose_q.copy(), self.pose_t.copy(), self.plane_nd.copy(),
                [v.copy() for v in self.vec_states])

    # -- main loop ----------------------------------------------------------

    def run(self) -> OptimizeResult:
        cfg = self.config
        if self.n_cols == 0 or self.n_rows == 0:
            c = self.evaluate(fill_jacobian=False)[0]
            return OptimizeResult(c, c, [c], 0, True, "nothing to optimize")

        lam = cfg.lambda_init
        H, b, cost = self.normal_equations()
        initial_cost = cost
        history = [cost]
        eye = sp.identity(self.n_cols, format="csc")
        termination = "max iterations"
        converged = False

        for it in range(cfg.max_iterations):
            accepted = False
            while lam <= cfg.lambda_max:
                try:
                    delta = splu(H + lam * eye).solve(b)
                except RuntimeError as exc:
                    raise SingularSystemError(str(exc)) from exc
                if not np.all(np.isfinite(delta)):
                    raise SingularSystemError("non-finite update")
                if np.linalg.norm(delta) < cfg.step_tol:
                    return OptimizeResult(initial_cost, cost, history, it, True,
                                          "step tolerance")
                base = self.snapshot()
                self.set_states(self.apply_step(delta))
                new_cost = self.evaluate(fill_jacobian=False)[0]
                if new_cost <= cost:
                    lam = max(lam / cfg.lambda_factor, 1e-12)
                    accepted = True
                    break
                self.set_states(base)
                lam *= cfg.lambda_factor
            if not accepted:
                termination = "damping limit"
                break
            prev = cost
            cost = new_cost
            history.append(cost)
            if prev - cost < cfg.rel_decrease_tol * max(prev, 1e-30):
                converged = True
                termination = "relative decrease"
                return OptimizeResult(initial_cost, cost, history, it + 1,
                                      converged, termination)
            H, b, cost_check = self.normal_equations()
            cost = cost_check
        else:
            termination = "max iterations"
        return OptimizeResult(initial_cost, cost, history, cfg.max_iterations,
                              converged, termination)
