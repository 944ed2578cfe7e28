"""Constrained gradient flow of the tangent-point energy.

One step: differential (Barnes-Hut plus penalties), metric and Schur setup on
the current mesh, projected descent direction, Armijo backtracking on the
Barnes-Hut objective evaluated at the trial point after corrective projection
onto the constraint set, and a remeshing pass followed by a second projection.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .barnes_hut import BhParams, StaleFrontsError, bh_energy, bh_energy_and_differential
from .bvh import BvhParams, BvhTree, build_bvh, refit_bvh
from .constraints import (
    Barycenter,
    ConstraintSet,
    Pin,
    _barycenter_weights,
    barycenter_rate,
    normalized_residual,
    positional_rows,
    project_direction,
    project_positions,
    schur_build,
)
from .hmatrix import FractionalStack, build_bct
from .mesh import DEGENERATE_AREA, MeshError, TriMesh, validate_mesh
from .penalties import PenaltyError, PenaltySet
from .precond import baseline_metric, fractional_system, sparse_system
from .remesh import RemeshParams, RemeshStats, edge_length_fraction, remesh_pass
from .tpe import EnergyParams, energy_exact

log = logging.getLogger(__name__)

METRICS = ("Hs", "L2", "H1", "H2")
FRONT_SLACK = 2.0  # replayed far pairs must stay separated at this multiple of theta


class LineSearchError(RuntimeError):
    pass


class ProjectionError(RuntimeError):
    pass


class FlowError(RuntimeError):
    """A step failed; ``state`` is the state the step started from."""

    def __init__(self, message: str, state: "FlowState"):
        super().__init__(message)
        self.state = state


@dataclass
class FlowOptions:
    metric: str = "Hs"
    chi: float = 0.5
    leaf_size: int = 8
    free_barycenter: bool = False
    disable_low_order: bool = False
    solver_tol: float = 1e-6
    solver_max_iter: int = 600
    projection_tol: float = 1e-8
    stop_tol: float = 1e-6  # relative to the bounding-box diagonal
    remesh: bool = True
    c1: float = 1e-4
    max_halvings: int = 40
    exact_log_faces: int = 6000  # log the exact energy up to this many faces

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.chi < 0:
            raise ValueError("chi must be non-negative")


@dataclass
class StepRecord:
    step: int
    objective: float  # logged energy plus weighted penalties, after the step
    energy: float  # exact energy on small meshes, Barnes-Hut otherwise
    penalties: dict
    residual: float  # max normalized constraint residual after the step
    tau: float
    iterations: int  # Krylov iterations spent in the step
    seconds: float
    direction_norm: float  # sqrt(-<g, x>)
    armijo_lhs: float = 0.0  # objective at the retracted trial point
    armijo_rhs: float = 0.0  # E(f) + c1 tau <g, x>
    remesh: RemeshStats | None = None
    remesh_accepted: bool = False
    bh_objective: float = 0.0  # Barnes-Hut objective on a fresh tree, after the step
    projected_objective: float = 0.0  # logged objective after projection, before remeshing


@dataclass(eq=False)
class FlowState:
    mesh: TriMesh
    energy: EnergyParams = field(default_factory=EnergyParams)
    bh: BhParams = field(default_factory=BhParams)
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    penalties: PenaltySet = field(default_factory=PenaltySet)
    options: FlowOptions = field(default_factory=FlowOptions)
    remesh_params: RemeshParams | None = None
    bvh: BvhParams = field(default_factory=BvhParams)
    step: int = 0
    history: list = field(default_factory=list)
    converged: bool = False

    def __post_init__(self):
        validate_mesh(self.mesh)
        if self.remesh_params is None:
            self.remesh_params = RemeshParams.for_mesh(self.mesh)
        self.bvh = replace(self.bvh, leaf_size=self.options.leaf_size)
        self._cover_components()
        self.constraints.initialize(self.mesh)
        self.penalties.initialize(self.mesh, self.energy.p)
        self.initial_objective = self.logged_objective()[0]

    def _cover_components(self):
        """Give every component without a barycenter or pin a barycenter constraint."""
        covered = set()
        for c in self.constraints:
            if isinstance(c, Barycenter):
                covered.add(c.component)
            elif isinstance(c, Pin):
                covered.add(int(self.mesh.component_of[c.vertex]))
        for comp in range(self.mesh.n_components):
            if comp not in covered:
                log.info("component %d has no positional constraint; fixing its barycenter", comp)
                self.constraints.constraints.append(Barycenter(comp))

    @property
    def pinned(self) -> list[int]:
        return [c.vertex for c in self.constraints if isinstance(c, Pin)]

    def objective(self, mesh: TriMesh | None = None, tree: BvhTree | None = None, fronts=None) -> float:
        """Barnes-Hut energy plus weighted penalties.

        With ``tree`` its topology is refit to ``mesh``; with ``fronts`` the
        recorded interaction lists are replayed as well.
        """
        mesh = self.mesh if mesh is None else mesh
        tree = build_bvh(mesh, self.bvh) if tree is None else refit_bvh(tree, mesh)
        slack = FRONT_SLACK if fronts is not None else 0.0
        return bh_energy(mesh, tree, self.energy, self.bh, fronts, slack) + self.penalties.value(mesh)

    def logged_objective(self, mesh: TriMesh | None = None) -> tuple[float, float, dict]:
        """``(objective, energy, penalty parts)`` as written to the log."""
        mesh = self.mesh if mesh is None else mesh
        if mesh.n_faces <= self.options.exact_log_faces:
            energy = energy_exact(mesh, self.energy)
        else:
            energy = bh_energy(mesh, build_bvh(mesh, self.bvh), self.energy, self.bh)
        value, _, parts = self.penalties.evaluate(mesh)
        return energy + value, energy, parts


def bbox_diagonal(mesh: TriMesh) -> float:
    return float(np.linalg.norm(mesh.positions.max(axis=0) - mesh.positions.min(axis=0)))


def armijo_search(mesh: TriMesh, x: np.ndarray, g: np.ndarray, objective, f0: float, L0: float,
                  c1: float = 1e-4, max_halvings: int = 40, retract=None) -> tuple[float, float, TriMesh]:
    """Backtracking from ``tau0 = L0 / max |x_i|`` until ``E(f + tau x) <= E(f) + c1 tau <g, x>``.

    ``objective`` maps a mesh to its value and may raise (an obstacle
    penetration, a degenerate face), which counts as a rejection. With
    ``retract`` the trial point ``f + tau x`` is first mapped back onto the
    constraint set and the objective is evaluated there. Returns ``(tau,
    value, trial mesh)``.
    """
    slope = float(np.sum(g * x))
    if not slope < 0:
        raise LineSearchError(f"not a descent direction (<g, x> = {slope:.3e})")
    tau = L0 / float(np.linalg.norm(x, axis=1).max())
    for _ in range(max_halvings + 1):
        trial = mesh.with_positions(mesh.positions + tau * x)
        try:
            if trial.face_areas.min() < DEGENERATE_AREA:
                raise MeshError("degenerate face")
            if retract is not None:
                trial = retract(trial)
            value = objective(trial)
        except (PenaltyError, MeshError, StaleFrontsError, ProjectionError):
            value = np.inf
        if value <= f0 + c1 * tau * slope:
            return tau, value, trial
        tau *= 0.5
    raise LineSearchError(f"no sufficient decrease after {max_halvings} halvings")


def _metric_system(state: FlowState, rows):
    mesh, opts = state.mesh, state.options
    extra = state.penalties.metric_term(mesh)
    if opts.metric == "Hs":
        stack = FractionalStack(mesh, build_bct(build_bvh(mesh, state.bvh), opts.chi), state.energy.p)
        return fractional_system(stack, rows, low_order=not opts.disable_low_order, extra=extra)
    S = baseline_metric(mesh, opts.metric)
    if extra is not None:
        S = S + extra
    return sparse_system(mesh, S, rows, opts.metric)


def _component_means(mesh: TriMesh, g: np.ndarray) -> np.ndarray:
    """Area-weighted mean of ``g`` per component, spread back to the vertices."""
    out = np.zeros_like(g)
    for comp in range(mesh.n_components):
        w = _barycenter_weights(mesh, comp)
        out[mesh.component_of == comp] = w @ g
    return out


def _hold_barycenters(state: FlowState, x: np.ndarray) -> np.ndarray:
    """Translate each barycenter-constrained component so its dual-area barycenter is stationary.

    The frozen-weight rows leave the first-order change of the weights; a
    translation removes it without touching area, volume or the frozen rows.
    Components that also carry a pin are left alone.
    """
    mesh = state.mesh
    pinned = set(mesh.component_of[state.pinned].tolist())
    x = x.copy()
    for c in state.constraints:
        if isinstance(c, Barycenter) and c.component not in pinned:
            x[mesh.component_of == c.component] -= barycenter_rate(mesh, c.component, x)
    return x


def descent_direction(state: FlowState, g: np.ndarray):
    """Projected direction ``x`` for differential ``g`` and the Krylov iteration count."""
    mesh, opts = state.mesh, state.options
    rows, _ = positional_rows(state.constraints, mesh)
    system = _metric_system(state, rows)
    cache = schur_build(system, state.constraints, mesh, opts.solver_tol, opts.solver_max_iter)
    x, report = project_direction(cache, g, opts.solver_max_iter)
    if opts.free_barycenter:
        x = x - _component_means(mesh, g)
    else:
        x = _hold_barycenters(state, x)
    iterations = report.iterations + sum(r.iterations for r in cache.reports)
    return x, cache, iterations


def _project(state: FlowState, mesh: TriMesh, cache=None) -> TriMesh:
    tol = state.options.projection_tol
    if cache is not None:
        projected, res = project_positions(state.constraints, mesh, cache, tol=0.01 * tol)
        if not len(res) or np.abs(res).max() <= tol:
            return projected
        log.debug("cached projection stalled at %.2e; using the sparse metric", np.abs(res).max())
    projected, res = project_positions(state.constraints, mesh, None, tol=0.01 * tol)
    if len(res) and np.abs(res).max() > tol:
        raise ProjectionError(f"constraint projection stalled at residual {np.abs(res).max():.2e}")
    return projected


def flow_step(state: FlowState) -> FlowState:
    """Advance ``state`` by one step in place and return it.

    Raises :class:`FlowError` (with the unchanged starting state attached)
    when the solver or the line search fails.
    """
    t0 = time.perf_counter()
    mesh = state.mesh
    tree = build_bvh(mesh, state.bvh)
    energy, dE, fronts = bh_energy_and_differential(mesh, tree, state.energy, state.bh, record=True)
    pen_value, pen_grad, _ = state.penalties.evaluate(mesh)
    g = dE + pen_grad
    f0 = energy + pen_value
    try:
        x, cache, iterations = descent_direction(state, g)
    except Exception as exc:  # solver failures carry their own message
        raise FlowError(f"step {state.step}: {exc}", state) from exc
    slope = float(np.sum(g * x))
    norm = float(np.sqrt(max(-slope, 0.0)))
    if norm < state.options.stop_tol * bbox_diagonal(mesh):
        state.converged = True
        log.info("step %d: direction norm %.3e below tolerance; converged", state.step, norm)
        return state
    def retract(trial):
        if state.options.free_barycenter:
            for c in state.constraints:
                if isinstance(c, Barycenter):
                    c.target = _barycenter_weights(trial, c.component) @ trial.positions
        return _project(state, trial, cache)

    try:
        tau, value, moved = armijo_search(
            mesh, x, g, lambda m: state.objective(m, tree, fronts), f0, state.remesh_params.L0,
            state.options.c1, state.options.max_halvings, retract,
        )
    except LineSearchError as exc:
        raise FlowError(f"step {state.step}: {exc}", state) from exc

    logged = state.logged_objective(moved)
    projected_objective = logged[0]
    previous = state.history[-1].objective if state.history else state.initial_objective
    stats, accepted = None, False
    if state.options.remesh:
        try:
            remeshed, vmap, stats, accepted = _remesh(state, moved, max(previous, logged[0]))
        except ProjectionError as exc:
            raise FlowError(f"step {state.step}: after remeshing, {exc}", state) from exc
        if accepted:
            moved = remeshed
            logged = state.logged_objective(moved)

    state.mesh = moved
    res = normalized_residual(state.constraints, moved)
    objective, energy, parts = logged
    record = StepRecord(
        step=state.step, objective=objective, energy=energy, penalties=parts,
        residual=float(np.abs(res).max()) if len(res) else 0.0, tau=tau, iterations=iterations,
        seconds=time.perf_counter() - t0, direction_norm=norm,
        armijo_lhs=value, armijo_rhs=f0 + state.options.c1 * tau * slope, remesh=stats,
        remesh_accepted=accepted, bh_objective=state.objective(moved),
        projected_objective=projected_objective,
    )
    state.history.append(record)
    log.info("step %d: objective %.6g, tau %.3g, %d iterations, %.2fs",
             state.step, record.objective, tau, iterations, record.seconds)
    state.step += 1
    return state


def _remesh(state: FlowState, mesh: TriMesh, ceiling: float):
    """Remesh and re-project; keep the result if it does not raise the logged
    objective above ``ceiling`` or if edges have left ``[L0/2, 3 L0/2]``."""
    pins = [(c, c.vertex) for c in state.constraints if isinstance(c, Pin)]
    remeshed, vmap, stats = remesh_pass(mesh, state.remesh_params, state.pinned)
    state.constraints.remap(vmap)
    remeshed = _project(state, remeshed)
    forced = edge_length_fraction(mesh, state.remesh_params.L0) < 1.0
    if forced or state.logged_objective(remeshed)[0] <= ceiling:
        return remeshed, vmap, stats, True
    for c, v in pins:
        c.vertex = v
    log.debug("remesh pass would raise the objective; keeping the current mesh")
    return mesh, None, stats, False


def run_flow(state: FlowState, max_steps: int, callback=None) -> FlowState:
    for _ in range(max_steps):
        flow_step(state)
        if state.converged:
            break
        if callback is not None:
            callback(state)
    return state
