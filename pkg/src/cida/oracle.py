"""Exact checks of the equilibrium theory on small discrete distributions.

Every quantity here is computed by summing over finite probability tables,
so identities can be asserted at 1e-12.  Entropies are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TOL = 1e-12


class DegenerateVarianceError(ValueError):
    """A conditional index variance is zero, so the Gaussian loss has no optimum."""


class DependenceError(ValueError):
    """The index is not independent of the label."""


# -------------------------------------------------------------------- tables


@dataclass
class DiscreteJoint:
    """Finite joint ``p(z, u)`` or ``p(z, u, y)`` with real-valued ``u``.

    ``prob`` has axes (z, u) or (z, u, y).  For the three-player
    construction the first axis plays the role of the input ``x``.
    """

    prob: np.ndarray
    u_values: np.ndarray
    z_values: list | None = None
    y_values: list | None = None

    def __post_init__(self):
        self.prob = np.asarray(self.prob, dtype=np.float64)
        self.u_values = np.asarray(self.u_values, dtype=np.float64)
        if self.prob.ndim not in (2, 3):
            raise ValueError("prob must have axes (z, u) or (z, u, y)")
        if self.prob.shape[1] != len(self.u_values):
            raise ValueError("u axis length does not match u_values")
        if (self.prob < 0).any():
            raise ValueError("probabilities must be non-negative")
        if abs(self.prob.sum() - 1.0) > TOL:
            raise ValueError(f"probabilities sum to {self.prob.sum()!r}, not 1")
        if self.z_values is None:
            self.z_values = list(range(self.prob.shape[0]))
        if len(self.z_values) != self.prob.shape[0]:
            raise ValueError("z axis length does not match z_values")
        if self.prob.ndim == 3 and self.y_values is None:
            self.y_values = list(range(self.prob.shape[2]))

    @property
    def has_y(self) -> bool:
        return self.prob.ndim == 3

    @property
    def p_zu(self) -> np.ndarray:
        return self.prob.sum(axis=2) if self.has_y else self.prob

    @property
    def p_z(self) -> np.ndarray:
        return self.p_zu.sum(axis=1)

    @property
    def p_u(self) -> np.ndarray:
        return self.p_zu.sum(axis=0)

    @property
    def p_zy(self) -> np.ndarray:
        if not self.has_y:
            raise ValueError("joint has no label axis")
        return self.prob.sum(axis=1)


@dataclass
class MomentTable:
    p_z: np.ndarray
    cond_mean: np.ndarray
    cond_var: np.ndarray
    mean: float
    var: float


def moments(joint: DiscreteJoint) -> MomentTable:
    """Conditional and marginal mean/variance of ``u`` by direct summation."""
    p_zu = joint.p_zu
    p_z = p_zu.sum(axis=1)
    if (p_z <= 0).any():
        bad = [joint.z_values[i] for i in np.flatnonzero(p_z <= 0)]
        raise ValueError(f"zero-mass encoding value(s) {bad}: p(u|z) undefined")
    u = joint.u_values
    cond = p_zu / p_z[:, None]
    cond_mean = cond @ u
    cond_var = (cond * (u[None, :] - cond_mean[:, None]) ** 2).sum(axis=1)
    p_u = p_zu.sum(axis=0)
    mean = float(p_u @ u)
    var = float(p_u @ (u - mean) ** 2)
    return MomentTable(p_z, cond_mean, cond_var, mean, var)


# -------------------------------------------------------------------- report


@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    tol: float
    relation: str = "eq"

    @property
    def passed(self) -> bool:
        if self.relation == "eq":
            return abs(self.lhs - self.rhs) <= self.tol
        if self.relation == "le":
            return self.lhs <= self.rhs + self.tol
        if self.relation == "lt":
            return self.lhs < self.rhs
        raise ValueError(self.relation)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {self.lhs!r} {self.rhs!r} {self.tol!r}"


@dataclass
class Report:
    checks: list[Check] = field(default_factory=list)

    def add(self, name: str, lhs, rhs, tol: float = TOL, relation: str = "eq") -> Check:
        c = Check(name, float(lhs), float(rhs), tol, relation)
        self.checks.append(c)
        return c

    def flag(self, name: str, ok: bool) -> Check:
        return self.add(name, float(bool(ok)), 1.0, 0.0)

    def extend(self, other: "Report", prefix: str = "") -> "Report":
        for c in other.checks:
            self.checks.append(Check(prefix + c.name, c.lhs, c.rhs, c.tol, c.relation))
        return self

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def lines(self) -> list[str]:
        return [c.line() for c in self.checks]

    def __str__(self) -> str:
        return "\n".join(self.lines())


def _grid_step(grid: np.ndarray) -> float:
    return float(np.max(np.diff(grid))) if len(grid) > 1 else 0.0


# ------------------------------------------------------- optimal discriminators


def verify_optimal_point_discriminator(joint: DiscreteJoint, grid) -> Report:
    """Brute-force the L2-optimal index estimate per encoding over ``grid``."""
    grid = np.sort(np.asarray(grid, dtype=np.float64))
    if grid.size == 0:
        raise ValueError("empty grid")
    mt = moments(joint)
    step = _grid_step(grid)
    cond = joint.p_zu / mt.p_z[:, None]
    u = joint.u_values
    rep = Report()
    for i, z in enumerate(joint.z_values):
        losses = ((grid[:, None] - u[None, :]) ** 2) @ cond[i]
        best = int(np.argmin(losses))
        target = mt.cond_mean[i]
        rep.add(f"point[z={z}].argmin", grid[best], target, step, "eq")
        at_opt = float(cond[i] @ (u - target) ** 2)
        rep.add(f"point[z={z}].loss_at_mean=var", at_opt, mt.cond_var[i])
        rep.add(f"point[z={z}].mean_beats_grid", at_opt, losses[best], TOL, "le")
    return rep


def verify_optimal_gaussian_discriminator(joint: DiscreteJoint, mu_grid, var_grid) -> Report:
    """Brute-force the Gaussian-NLL-optimal (mean, variance) per encoding."""
    mu_grid = np.sort(np.asarray(mu_grid, dtype=np.float64))
    var_grid = np.sort(np.asarray(var_grid, dtype=np.float64))
    if mu_grid.size == 0 or var_grid.size == 0:
        raise ValueError("empty grid")
    if (var_grid <= 0).any():
        raise ValueError("variance grid must be positive")
    mt = moments(joint)
    if (mt.cond_var <= 0).any():
        bad = [joint.z_values[i] for i in np.flatnonzero(mt.cond_var <= 0)]
        raise DegenerateVarianceError(f"V[u|z] = 0 for z in {bad}")
    step_mu, step_var = _grid_step(mu_grid), _grid_step(var_grid)
    cond = joint.p_zu / mt.p_z[:, None]
    u = joint.u_values
    rep = Report()
    for i, z in enumerate(joint.z_values):
        sq = ((mu_grid[:, None] - u[None, :]) ** 2) @ cond[i]
        losses = sq[:, None] / (2.0 * var_grid[None, :]) + 0.5 * np.log(var_grid)[None, :]
        m, s = np.unravel_index(int(np.argmin(losses)), losses.shape)
        mean, var = mt.cond_mean[i], mt.cond_var[i]
        rep.add(f"gauss[z={z}].argmin_mu", mu_grid[m], mean, step_mu)
        rep.add(f"gauss[z={z}].argmin_var", var_grid[s], var, step_var)
        at_opt = float(cond[i] @ ((u - mean) ** 2 / (2.0 * var) + 0.5 * math.log(var)))
        rep.add(f"gauss[z={z}].value=0.5+0.5log(var)", at_opt, 0.5 + 0.5 * math.log(var))
        rep.add(f"gauss[z={z}].optimum_beats_grid", at_opt, losses[m, s], TOL, "le")
    return rep


# ---------------------------------------------------------------- criteria


@dataclass
class Criterion:
    c_d: float
    bound: float
    gap: float
    report: Report


def _constant(values: np.ndarray, tol: float = 1e-9) -> bool:
    return float(values.max() - values.min()) <= tol


def cida_criterion(joint: DiscreteJoint) -> Criterion:
    """Encoder objective under the optimal L2 discriminator: ``E_z V[u|z]``."""
    mt = moments(joint)
    c_d = float(mt.p_z @ mt.cond_var)
    bound = mt.var
    gap = bound - c_d
    spread = float(mt.p_z @ (mt.cond_mean - mt.mean) ** 2)
    rep = Report()
    rep.add("cida.c_d<=var_u", c_d, bound, TOL, "le")
    rep.add("cida.gap=var_z(E[u|z])", gap, spread)
    rep.add("cida.total_expectation", mt.p_z @ mt.cond_mean, mt.mean)
    const = _constant(mt.cond_mean)
    rep.flag("cida.gap_zero_iff_constant_mean", (abs(gap) < TOL) == const)
    if const:
        rep.add("cida.constant_mean=E[u]", mt.cond_mean[0], mt.mean, 1e-9)
    return Criterion(c_d, bound, gap, rep)


def pcida_criterion(joint: DiscreteJoint) -> Criterion:
    """Encoder objective under the optimal Gaussian discriminator."""
    mt = moments(joint)
    if (mt.cond_var <= 0).any():
        bad = [joint.z_values[i] for i in np.flatnonzero(mt.cond_var <= 0)]
        raise DegenerateVarianceError(f"V[u|z] = 0 for z in {bad}")
    u = joint.u_values
    p_zu = joint.p_zu
    quad = float((p_zu * (mt.cond_mean[:, None] - u[None, :]) ** 2 / (2.0 * mt.cond_var[:, None])).sum())
    c_d = quad + 0.5 * float(mt.p_z @ np.log(mt.cond_var))
    bound = 0.5 + 0.5 * math.log(mt.var)
    gap = bound - c_d
    rep = Report()
    rep.add("pcida.quadratic_term=0.5", quad, 0.5)
    rep.add("pcida.c_d<=0.5+0.5log(var_u)", c_d, bound, TOL, "le")
    rep.add("pcida.total_variance", mt.p_z @ mt.cond_var + mt.p_z @ (mt.cond_mean - mt.mean) ** 2, mt.var)
    const = _constant(mt.cond_mean) and _constant(mt.cond_var)
    rep.flag("pcida.gap_zero_iff_constant_moments", (abs(gap) < TOL) == const)
    if const:
        rep.add("pcida.constant_mean=E[u]", mt.cond_mean[0], mt.mean, 1e-9)
        rep.add("pcida.constant_var=V[u]", mt.cond_var[0], mt.var, 1e-9)
    return Criterion(c_d, bound, gap, rep)


# --------------------------------------------------------- three-player game


def conditional_entropy(p_zy: np.ndarray) -> float:
    """``H(y|z)`` in nats for a table with axes (z, y)."""
    p_z = p_zy.sum(axis=1, keepdims=True)
    live = p_zy > 0
    ratio = np.where(live, p_zy / np.where(p_z > 0, p_z, 1.0), 1.0)
    return float(-(p_zy[live] * np.log(ratio[live])).sum())


def cross_entropy_of(p_zy: np.ndarray, q_y_given_z: np.ndarray) -> float:
    live = p_zy > 0
    if (q_y_given_z[live] <= 0).any():
        return math.inf
    return float(-(p_zy[live] * np.log(q_y_given_z[live])).sum())


@dataclass
class PredictorBound:
    entropy: float
    optimal_loss: float
    report: Report


def predictor_bound(joint: DiscreteJoint, n_random: int = 100, seed=0) -> PredictorBound:
    """``H(y|z)`` and the loss of the table predictor ``F(z) = p(y|z)``."""
    p_zy = joint.p_zy
    p_z = p_zy.sum(axis=1)
    if (p_z <= 0).any():
        raise ValueError("zero-mass encoding value: p(y|z) undefined")
    table = p_zy / p_z[:, None]
    h = conditional_entropy(p_zy)
    opt = cross_entropy_of(p_zy, table)
    rep = Report()
    rep.add("predictor.table_loss=H(y|z)", opt, h)
    rng = np.random.default_rng(seed)
    beaten = 0
    for _ in range(n_random):
        q = rng.dirichlet(np.ones(p_zy.shape[1]), size=p_zy.shape[0])
        ce = cross_entropy_of(p_zy, q)
        if not ce > opt:
            beaten += 1
    rep.add("predictor.random_predictors_beating_table", beaten, 0, 0.0)
    return PredictorBound(h, opt, rep)


def _group_rows(rows: np.ndarray, tol: float = TOL) -> np.ndarray:
    """Label rows so that rows equal within ``tol`` share a label."""
    labels = -np.ones(len(rows), dtype=np.int64)
    reps: list[np.ndarray] = []
    for i, r in enumerate(rows):
        for k, rep in enumerate(reps):
            if np.abs(rep - r).max() <= tol:
                labels[i] = k
                break
        else:
            reps.append(r)
            labels[i] = len(reps) - 1
    return labels


@dataclass
class GameConstruction:
    encoding_joint: DiscreteJoint
    h_y_given_z: float
    h_y_given_xu: float
    report: Report


def full_game_construction(joint: DiscreteJoint) -> GameConstruction:
    """Encode each (x, u) cell by its label posterior and check the equilibrium.

    ``joint.prob`` has axes (x, u, y).  Rejects inputs where ``u`` and ``y``
    are dependent.
    """
    if not joint.has_y:
        raise ValueError("joint needs a label axis")
    p = joint.prob
    p_uy = p.sum(axis=0)
    indep = np.outer(p_uy.sum(axis=1), p_uy.sum(axis=0))
    dep = float(np.abs(p_uy - indep).max())
    if dep > TOL:
        raise DependenceError(f"u and y are dependent (max |p(u,y) - p(u)p(y)| = {dep:.3g})")
    n_x, n_u, n_y = p.shape
    cells = p.reshape(n_x * n_u, n_y)
    mass = cells.sum(axis=1)
    live = np.flatnonzero(mass > 0)
    posterior = cells[live] / mass[live, None]
    z_of_cell = _group_rows(posterior)
    n_z = int(z_of_cell.max()) + 1
    p_zuy = np.zeros((n_z, n_u, n_y))
    for cell, z in zip(live, z_of_cell):
        p_zuy[z, cell % n_u] += cells[cell]
    z_vals = [tuple(np.round(posterior[np.flatnonzero(z_of_cell == k)[0]], 12)) for k in range(n_z)]
    enc = DiscreteJoint(p_zuy, joint.u_values, z_vals, joint.y_values)

    h_z = conditional_entropy(enc.p_zy)
    h_xu = conditional_entropy(cells)
    rep = Report()
    rep.add("game.H(y|E0)=H(y|x,u)", h_z, h_xu)
    p_zu = enc.p_zu
    indep_err = float(np.abs(p_zu - np.outer(p_zu.sum(axis=1), p_zu.sum(axis=0))).max())
    rep.add("game.E0_independent_of_u", indep_err, 0.0)
    cida = cida_criterion(enc)
    rep.add("game.cida_c_d_at_bound", cida.gap, 0.0)
    mt = moments(enc)
    if (mt.cond_var > 0).all():
        rep.add("game.pcida_c_d_at_bound", pcida_criterion(enc).gap, 0.0)
    return GameConstruction(enc, h_z, h_xu, rep)


# ------------------------------------------------------------------ appendix


def constraint_counts(n_z: int, n_u: int, d_z: int, d_u: int = 1) -> tuple[int, int]:
    """Scalars fixed by matching mean and variance of p(u|z) vs of p(z|u).

    Python integers, so enormous encoding alphabets stay exact.
    """
    return 2 * n_z * d_u, 2 * n_u * d_z


def alignment_counterexample() -> DiscreteJoint:
    """p(z|u) has the same mean and variance for both u, yet E[u|z] varies."""
    z_values = [-2.0, -1.0, 0.0, 1.0, 2.0]
    p_z_given_u0 = np.array([0.0, 0.5, 0.0, 0.5, 0.0])
    p_z_given_u1 = np.array([0.125, 0.0, 0.75, 0.0, 0.125])
    prob = 0.5 * np.column_stack([p_z_given_u0, p_z_given_u1])
    return DiscreteJoint(prob, np.array([0.0, 1.0]), z_values)


def alignment_strength_demo():
    """Return ``(counterexample joint, constraint counts, report)``."""
    joint = alignment_counterexample()
    z = np.asarray(joint.z_values)
    p_zu = joint.p_zu
    p_u = p_zu.sum(axis=0)
    cond_z = p_zu / p_u[None, :]
    z_mean = z @ cond_z
    z_var = ((z[:, None] - z_mean[None, :]) ** 2 * cond_z).sum(axis=0)
    mt = moments(joint)
    rep = Report()
    rep.add("appendix.E[z|u]_constant", z_mean[0], z_mean[1])
    rep.add("appendix.V[z|u]_constant", z_var[0], z_var[1])
    rep.add("appendix.E[u|z]_varies", 0.0, mt.cond_mean.max() - mt.cond_mean.min(), 0.0, "lt")
    counts = constraint_counts(4**100, 4, 100, 1)
    rep.flag("appendix.count_p(u|z)=2*4^100", counts[0] == 2 * 4**100)
    rep.add("appendix.count_p(z|u)", counts[1], 800, 0.0)
    return joint, counts, rep


# ------------------------------------------------------------ random tables


def random_joint(rng: np.random.Generator, n_z: int, n_u: int, product: bool = False) -> DiscreteJoint:
    """Dirichlet-random joint over ``n_z`` encodings and ``n_u`` index values in [0, 1]."""
    u = np.sort(rng.uniform(0.0, 1.0, size=n_u))
    if product:
        prob = np.outer(rng.dirichlet(np.ones(n_z)), rng.dirichlet(np.ones(n_u)))
    else:
        prob = rng.dirichlet(np.ones(n_z * n_u)).reshape(n_z, n_u)
    return DiscreteJoint(prob / prob.sum(), u)


def random_shifted_joint(rng: np.random.Generator, n_x: int, n_u: int, n_y: int) -> DiscreteJoint:
    """Joint over (x, u, y) where x is a u-dependent relabelling of a latent x0.

    ``(x0, y)`` is independent of ``u`` and each domain permutes the x
    alphabet differently, so x itself depends on u while u stays
    independent of y.
    """
    p_x0y = rng.dirichlet(np.ones(n_x * n_y)).reshape(n_x, n_y)
    p_u = rng.dirichlet(np.ones(n_u))
    prob = np.zeros((n_x, n_u, n_y))
    for j in range(n_u):
        perm = rng.permutation(n_x)
        prob[perm, j, :] = p_u[j] * p_x0y
    u = np.sort(rng.uniform(0.0, 1.0, size=n_u))
    return DiscreteJoint(prob / prob.sum(), u)


def uniform_independent_joint(n_z: int = 3) -> DiscreteJoint:
    """``u`` uniform on {1, 2, 3, 4} and independent of ``z``."""
    return DiscreteJoint(np.full((n_z, 4), 1.0 / (4 * n_z)), np.arange(1.0, 5.0))


# --------------------------------------------------------------------- suites


def lemma_suite(n_joints: int = 50, step: float = 1e-3, seed: int = 0) -> Report:
    rng = np.random.default_rng(seed)
    rep = Report()
    mu_grid = np.arange(0.0, 1.0 + step / 2, step)
    var_grid = np.arange(step, 0.25 + step / 2, step)
    for k in range(n_joints):
        joint = random_joint(rng, int(rng.integers(1, 7)), int(rng.integers(2, 7)))
        rep.extend(verify_optimal_point_discriminator(joint, mu_grid), f"joint{k}.")
        rep.extend(verify_optimal_gaussian_discriminator(joint, mu_grid, var_grid), f"joint{k}.")
    return rep


def theorem_suite(n_joints: int = 200, n_game: int = 50, seed: int = 0) -> Report:
    rng = np.random.default_rng(seed)
    rep = Report()
    for k in range(n_joints):
        n_z, n_u = int(rng.integers(1, 9)), int(rng.integers(2, 9))
        joint = random_joint(rng, n_z, n_u, product=bool(k % 2))
        cida = cida_criterion(joint)
        rep.extend(cida.report, f"joint{k}.")
        if k % 2:
            rep.add(f"joint{k}.product_cida_gap", cida.gap, 0.0)
        if (moments(joint).cond_var > 0).all():
            pc = pcida_criterion(joint)
            rep.extend(pc.report, f"joint{k}.")
            if k % 2:
                rep.add(f"joint{k}.product_pcida_gap", pc.gap, 0.0)
    pc = pcida_criterion(uniform_independent_joint())
    rep.add("uniform1to4.pcida_c_d", pc.c_d, 0.5 + 0.5 * math.log(1.25))
    for k in range(n_game):
        joint = random_shifted_joint(rng, int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 4)))
        rep.extend(predictor_bound(joint, seed=k).report, f"game{k}.")
        rep.extend(full_game_construction(joint).report, f"game{k}.")
    return rep


def appendix_suite() -> Report:
    return alignment_strength_demo()[2]


SUITES = {"lemmas": lemma_suite, "theorems": theorem_suite, "appendix": appendix_suite}


def run_suite(name: str) -> Report:
    if name == "all":
        rep = Report()
        for sub in SUITES:
            rep.extend(SUITES[sub]())
        return rep
    try:
        return SUITES[name]()
    except KeyError:
        raise ValueError(f"unknown suite '{name}'") from None
