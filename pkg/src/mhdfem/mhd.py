"""Stationary incompressible MHD in magnetic/electric field variables.

The driver assembles and solves the Picard linearization of the coupled
system for (u, E, B, p, r): momentum with the Lorentz force s(j x B-, v)
where j = E + u x B-, Ohm's law s(j, F) - alpha(B, curl F) = <g, F>,
Faraday's law alpha(curl E, C) plus the divergence constraint on B, and
incompressibility.  Two boundary-condition families are supported
(normal_B: u = 0, B.n = 0, E x n = 0 essential; tangential_B: natural
magnetic conditions), and two treatments of the divergence constraint
(Lagrange multiplier r, or the augmented grad-div term alpha(div B, div C)).

The magnetic multiplier space differs between the families: the
constrained-flux family pairs with zero-mean piecewise constants (the
divergence of the constrained face space is exactly the zero-mean
space), while the natural family uses the full piecewise-constant space,
whose divergence map is onto.  Restricting the natural family's
multiplier to zero mean leaves a one-dimensional kernel (the face field
with uniform divergence) and a singular linear system, so the full space
is the well-posed choice; the computed multiplier is zero either way.

Every Picard iterate satisfies cellwise div B = 0, r = 0, curl E = 0 and
the energy identity

    Re^-1 |grad u|^2 + s |j|^2 = <f, u> + <g, E>

exactly (to solver tolerance).  The source work term pairs g with the
electric field because E is the admissible Ohm test function; when g = 0
this is the scheme's plain energy law, and j coincides with E + u x B at
a converged state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse as sp

from . import assembly, derham, linalg, operators
from .derham import FeSpace, FieldFunction, make_space
from .mesh import Mesh, build_topology


class MhdError(Exception):
    """Raised for invalid parameters or driver misuse."""


BC_FAMILIES = ("normal_B", "tangential_B")
VARIANTS = ("multiplier", "augmented")


@dataclass(frozen=True)
class MhdParams:
    """Physical and scheme parameters.

    Re, Rm: fluid and magnetic Reynolds numbers; s: coupling number.
    alpha = s / Rm is always derived, never stored.
    """

    Re: float = 1.0
    Rm: float = 1.0
    s: float = 1.0
    bc_family: str = "normal_B"
    variant: str = "multiplier"

    def __post_init__(self):
        for name in ("Re", "Rm", "s"):
            if not getattr(self, name) > 0:
                raise MhdError(f"parameter {name} must be positive")
        if self.bc_family not in BC_FAMILIES:
            raise MhdError(f"unknown bc_family {self.bc_family!r}")
        if self.variant not in VARIANTS:
            raise MhdError(f"unknown variant {self.variant!r}")

    @property
    def alpha(self) -> float:
        return self.s / self.Rm

    def as_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = self.alpha
        return d


@dataclass
class SourceData:
    """Body force f on the velocity space and optional magnetic source g
    on the curl space; both analytic callables (N, 3) -> (N, 3) or None."""

    f: object = None
    g: object = None


@dataclass
class MhdState:
    """One solution snapshot; r is None in the augmented variant."""

    u: FieldFunction
    E: FieldFunction
    B: FieldFunction
    p: FieldFunction
    r: FieldFunction | None = None


@dataclass
class Diagnostics:
    """Solution diagnostics; the exact identities evaluate the same
    assembled matrices and quadrature as the linear system."""

    divB_max: float
    divB_scale: float
    r_norm: float
    curlE_norm: float
    j_norm: float
    hcurlB_norm: float
    energy_residual: float
    dissipation: float
    joule: float
    work_f: float
    work_g: float
    dual_f: float
    energy2_lhs: float
    energy2_rhs: float
    energy3_lhs: float
    energy3_rhs: float
    energy4_lhs: float
    energy4_rhs: float
    energy5_ratio: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class PicardReport:
    """Iteration history of one Picard run."""

    converged: bool
    iterations: int
    increments: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    diagnostics_history: list = field(default_factory=list)
    states: list = field(default_factory=list, repr=False)
    state_norm: float = 0.0


def _nonzero(f: FieldFunction | None) -> bool:
    return f is not None and bool(np.any(f.coeffs))


class MhdDriver:
    """Owns the spaces, constant matrices and Picard loop for one case."""

    def __init__(self, mesh: Mesh, params: MhdParams, sources: SourceData | None = None):
        self.mesh = mesh
        self.params = params
        self.sources = sources if sources is not None else SourceData()
        topo = build_topology(mesh)
        ess = "essential_zero" if params.bc_family == "normal_B" else "none"

        self.u_space = make_space("lagrange_p2_vector", "essential_zero", mesh, topo)
        self.E_space = make_space("nedelec1_lowest", ess, mesh, topo)
        self.B_space = make_space("rt_lowest", ess, mesh, topo)
        self.p_space = make_space(
            "lagrange_p1_pressure", "none", mesh, topo, mean_constraint=True
        )
        if params.variant == "multiplier":
            zero_mean = params.bc_family == "normal_B"
            self.r_space = make_space(
                "dg0", "none", mesh, topo, mean_constraint=zero_mean
            )
        else:
            self.r_space = None

        self.K_u = assembly.assemble_bilinear("grad_grad", self.u_space, self.u_space)
        self.M_u = assembly.assemble_bilinear("vec_mass", self.u_space, self.u_space)
        self.M_E = assembly.assemble_bilinear("vec_mass", self.E_space, self.E_space)
        self.M_B = assembly.assemble_bilinear("vec_mass", self.B_space, self.B_space)
        self.R_EB = assembly.assemble_bilinear(
            "curl_mass_pairing", self.B_space, self.E_space
        )
        self.R_BE = assembly.assemble_bilinear(
            "weak_curl_pairing", self.E_space, self.B_space
        )
        self.D_p = assembly.assemble_bilinear("div_pressure", self.u_space, self.p_space)
        self.border_p = assembly.domain_integral_vector(self.p_space)
        if self.r_space is not None:
            self.D_r = assembly.assemble_bilinear("div_scalar", self.B_space, self.r_space)
            self.border_r = (
                assembly.domain_integral_vector(self.r_space)
                if self.r_space.mean_constraint
                else None
            )
        else:
            self.G_dd = assembly.assemble_bilinear("divdiv", self.B_space, self.B_space)

        self.load_f = (
            assembly.assemble_linear(self.u_space, self.sources.f)
            if self.sources.f is not None
            else np.zeros(self.u_space.num_free)
        )
        self.load_g = (
            assembly.assemble_linear(self.E_space, self.sources.g)
            if self.sources.g is not None
            else np.zeros(self.E_space.num_free)
        )

        self.dcurl = operators.DiscreteCurl(self.E_space, self.B_space)
        self.dual = operators.VelocityDualNorm(self.u_space, stiffness=self.K_u)

    # ------------------------------------------------------------------
    # assembly of one Picard step

    def zero_state(self) -> MhdState:
        return MhdState(
            u=FieldFunction.zeros(self.u_space),
            E=FieldFunction.zeros(self.E_space),
            B=FieldFunction.zeros(self.B_space),
            p=FieldFunction.zeros(self.p_space),
            r=FieldFunction.zeros(self.r_space) if self.r_space is not None else None,
        )

    def cross_blocks(self, B_prev: FieldFunction):
        """Ohm coupling (F, u x B-) and velocity Lorentz Gram matrix for a
        frozen magnetic field; (None, None) when B- = 0."""
        if not _nonzero(B_prev):
            return None, None
        O = assembly.assemble_bilinear(
            "ohm_cross", self.u_space, self.E_space, coefficient=B_prev
        )
        Luu = assembly.assemble_bilinear(
            "lorentz_cross", self.u_space, self.u_space, coefficient=B_prev
        )
        return O, Luu

    def assemble_picard_step(
        self, u_prev: FieldFunction, B_prev: FieldFunction, cross=None
    ) -> linalg.BlockSystem:
        """Linear system of one Picard step at the frozen state (u-, B-)."""
        if u_prev.space is not self.u_space or B_prev.space is not self.B_space:
            raise MhdError("previous iterate lives on foreign spaces")
        p = self.params
        s, alpha = p.s, p.alpha

        A_uu = (1.0 / p.Re) * self.K_u
        if _nonzero(u_prev):
            A_uu = A_uu + assembly.assemble_bilinear(
                "convection_skew", self.u_space, self.u_space, coefficient=u_prev
            )
        O, Luu = self.cross_blocks(B_prev) if cross is None else cross

        blocks = {
            ("E", "E"): s * self.M_E,
            ("E", "B"): -alpha * self.R_EB,
            ("B", "E"): alpha * self.R_BE,
            ("u", "p"): -self.D_p.T.tocsr(),
            ("p", "u"): -self.D_p,
        }
        pairs = [
            (("B", "E"), ("E", "B"), -1.0),
            (("u", "p"), ("p", "u"), 1.0),
        ]
        if O is not None:
            blocks[("E", "u")] = s * O
            blocks[("u", "E")] = blocks[("E", "u")].T.tocsr()
            pairs.append((("u", "E"), ("E", "u"), 1.0))
            A_uu = A_uu + s * Luu
        blocks[("u", "u")] = A_uu.tocsr()

        order = ("u", "E", "B", "p")
        sizes = {
            "u": self.u_space.num_free,
            "E": self.E_space.num_free,
            "B": self.B_space.num_free,
            "p": self.p_space.num_free,
        }
        borders = [("p", self.border_p)]
        if self.r_space is not None:
            order = order + ("r",)
            sizes["r"] = self.r_space.num_free
            blocks[("B", "r")] = self.D_r.T.tocsr()
            blocks[("r", "B")] = self.D_r
            pairs.append((("B", "r"), ("r", "B"), 1.0))
            if self.border_r is not None:
                borders.append(("r", self.border_r))
        else:
            blocks[("B", "B")] = alpha * self.G_dd

        return linalg.BlockSystem(
            field_order=order,
            sizes=sizes,
            blocks=blocks,
            rhs={"u": self.load_f, "E": self.load_g},
            borders=borders,
            transpose_pairs=pairs,
        )

    def _state_from_parts(self, parts: dict) -> MhdState:
        state = self.zero_state()
        state.u.coeffs[self.u_space.free] = parts["u"]
        state.E.coeffs[self.E_space.free] = parts["E"]
        state.B.coeffs[self.B_space.free] = parts["B"]
        state.p.coeffs[self.p_space.free] = parts["p"]
        if self.r_space is not None:
            state.r.coeffs[self.r_space.free] = parts["r"]
        return state

    # ------------------------------------------------------------------
    # Picard loop

    def picard_solve(
        self,
        *,
        tol: float = 1e-8,
        maxit: int = 100,
        init: MhdState | None = None,
        keep_states: bool = False,
    ):
        """Iterate to the fixed point; returns (MhdState, PicardReport).

        Stops when the W-norm of the (u, B) increment drops below
        tol * max(1, W-norm of the iterate); non-convergence at maxit is
        reported in the flag, not raised.  keep_states retains every
        iterate (including the initial guess) in report.states for
        iterate-level checks; leave it off for large runs.
        """
        if not tol > 0 or maxit < 1:
            raise MhdError("need tol > 0 and maxit >= 1")
        state = init if init is not None else self.zero_state()
        report = PicardReport(converged=False, iterations=0)
        if keep_states:
            report.states.append(state)

        for _ in range(maxit):
            cross = self.cross_blocks(state.B)
            system = self.assemble_picard_step(state.u, state.B, cross=cross)
            A, b, imap = linalg.flatten(system)
            x = linalg.solve_direct(A, b)
            bnorm = np.linalg.norm(b)
            resid = np.linalg.norm(b - A @ x) / bnorm if bnorm > 0 else 0.0
            parts = linalg.unflatten(x, imap)
            new_state = self._state_from_parts(parts)

            du = FieldFunction(self.u_space, new_state.u.coeffs - state.u.coeffs)
            dB = FieldFunction(self.B_space, new_state.B.coeffs - state.B.coeffs)
            increment = operators.norm_w(du, dB, self.dcurl)
            diag = self.diagnostics(new_state, B_prev=state.B, cross=cross)

            report.iterations += 1
            report.increments.append(increment)
            report.residuals.append(float(resid))
            report.diagnostics_history.append(diag)
            if keep_states:
                report.states.append(new_state)
            scale = max(1.0, operators.norm_w(new_state.u, new_state.B, self.dcurl))
            state = new_state
            if increment <= tol * scale:
                report.converged = True
                break

        report.state_norm = operators.norm_w(state.u, state.B, self.dcurl)
        return state, report

    # ------------------------------------------------------------------
    # diagnostics

    def diagnostics(
        self, state: MhdState, *, B_prev: FieldFunction | None = None, cross=None
    ) -> Diagnostics:
        """Exact-identity and energy-chain diagnostics for a state.

        B_prev is the frozen field of the step that produced the state;
        it defaults to state.B, which is the converged interpretation.
        """
        p = self.params
        if B_prev is None:
            B_prev = state.B
        uf = state.u.coeffs[self.u_space.free]
        Ef = state.E.coeffs[self.E_space.free]

        div = derham.evaluate_div_on_cells(state.B)
        divB_max = float(np.max(np.abs(div))) if len(div) else 0.0
        divB_scale = max(
            1.0,
            float(
                np.sqrt(
                    operators.lp_norm(state.B, 2, quad_degree=4) ** 2
                    + norm_sq_cellwise(div, self.mesh.volumes)
                )
            ),
        )
        r_norm = (
            operators.lp_norm(state.r, 2, quad_degree=2) if state.r is not None else 0.0
        )
        curlE_norm = operators.norm_curl_part(state.E)

        # energy identity from the assembled operators of the step
        if cross is None:
            cross = self.cross_blocks(B_prev)
        O, Luu = cross
        dissipation = float(uf @ (self.K_u @ uf)) / p.Re
        joule = float(Ef @ (self.M_E @ Ef))
        if O is not None:
            joule += 2.0 * float(Ef @ (O @ uf)) + float(uf @ (Luu @ uf))
        joule *= p.s
        work_f = float(self.load_f @ uf)
        work_g = float(self.load_g @ Ef)
        scale = max(abs(work_f) + abs(work_g), dissipation + joule)
        energy_residual = (
            abs(dissipation + joule - work_f - work_g) / scale if scale > 0 else 0.0
        )

        j_norm = float(np.sqrt(max(joule, 0.0) / p.s))
        hcurlB = self.dcurl.apply(state.B)
        hcurlB_norm = operators.lp_norm(hcurlB, 2, quad_degree=4)
        dual_f = self.dual(self.load_f)

        energy2_lhs = 0.5 * dissipation + joule
        energy2_rhs = 0.5 * p.Re * dual_f**2
        energy3_lhs = hcurlB_norm / p.Rm
        energy3_rhs = j_norm
        energy4_lhs = hcurlB_norm
        energy4_rhs = p.Rm * np.sqrt(0.5 * p.Re / p.s) * dual_f
        E_norm = float(np.sqrt(max(float(Ef @ (self.M_E @ Ef)), 0.0)))
        e5_scale = p.Re**1.5 * p.Rm / np.sqrt(p.s) * dual_f**2
        energy5_ratio = E_norm / e5_scale if e5_scale > 0 else 0.0

        return Diagnostics(
            divB_max=divB_max,
            divB_scale=divB_scale,
            r_norm=r_norm,
            curlE_norm=curlE_norm,
            j_norm=j_norm,
            hcurlB_norm=hcurlB_norm,
            energy_residual=energy_residual,
            dissipation=dissipation,
            joule=joule,
            work_f=work_f,
            work_g=work_g,
            dual_f=dual_f,
            energy2_lhs=energy2_lhs,
            energy2_rhs=energy2_rhs,
            energy3_lhs=energy3_lhs,
            energy3_rhs=energy3_rhs,
            energy4_lhs=energy4_lhs,
            energy4_rhs=energy4_rhs,
            energy5_ratio=energy5_ratio,
        )

    # ------------------------------------------------------------------
    # reduced-system equivalence

    def reduced_equivalence_check(
        self, state: MhdState, *, B_cross: FieldFunction | None = None
    ) -> float:
        """Residual of the eliminated-E form with g = 0.

        Returns the max of |E + P(u x B) - Rm^-1 curl_h B| and the
        penalty split defect | |j|^2 - |E + P(u x B)|^2 - |(I - P)(u x B)|^2 |
        divided by |j|, so both components carry length units with a
        rounding floor of eps times the field scale (a square root of the
        defect would floor at sqrt(eps) relative, masking nothing but
        failing any eps-level tolerance).

        At a converged state the cross product uses state.B itself; for a
        single Picard iterate pass the previous iterate's field as B_cross
        (the frozen field of the linear step), keeping the identity exact.
        """
        rule = assembly.quadrature_rule(6)
        wdet = assembly.quadrature_weights(self.mesh, rule)
        uv = derham.evaluate_on_cells(state.u, rule.points)
        Bv = derham.evaluate_on_cells(B_cross if B_cross is not None else state.B, rule.points)
        cross = np.cross(uv, Bv)
        Pj = self.dcurl.project(cross, rule)
        hcurlB = self.dcurl.apply(state.B)

        ident = FieldFunction(
            self.E_space,
            state.E.coeffs + Pj.coeffs - hcurlB.coeffs / self.params.Rm,
        )
        ident_norm = operators.lp_norm(ident, 2, quad_degree=4)

        Ev = derham.evaluate_on_cells(state.E, rule.points)
        Pjv = derham.evaluate_on_cells(Pj, rule.points)
        j_sq = _weighted_sq(Ev + cross, wdet)
        a_sq = _weighted_sq(Ev + Pjv, wdet)
        b_sq = _weighted_sq(cross - Pjv, wdet)
        defect = abs(j_sq - a_sq - b_sq)
        split = float(defect / np.sqrt(j_sq)) if j_sq > 0 else 0.0
        return max(ident_norm, split)

    # ------------------------------------------------------------------
    # stability proxy

    def linearized_matrix(self, state: MhdState):
        """Flattened Picard matrix at a state, with its index map."""
        system = self.assemble_picard_step(state.u, state.B)
        A, _, imap = linalg.flatten(system)
        return A, imap

    def stability_weight_matrix(self, state: MhdState) -> sp.csr_matrix:
        """SPD norm matrix of the linearization norms on the flattened
        unknowns: the (u, E, B) triple norm with the frozen-field Ohm
        term, L^2 for the scalar multipliers, identity on border rows."""
        O, Luu = self.cross_blocks(state.B)
        W_uu = self.M_u + self.K_u
        if O is not None:
            W_uu = W_uu + Luu
        C_EE = assembly.assemble_bilinear("curl_curl", self.E_space, self.E_space)
        W_EE = self.M_E + C_EE
        if self.params.variant == "multiplier":
            W_BB = self.M_B + assembly.assemble_bilinear(
                "divdiv", self.B_space, self.B_space
            )
        else:
            W_BB = self.M_B + self.G_dd
        M_p = assembly.assemble_bilinear("scalar_mass", self.p_space, self.p_space)
        order = ["u", "E", "B", "p"]
        diag = {"u": W_uu, "E": W_EE, "B": W_BB, "p": M_p}
        off = {}
        if O is not None:
            off[("E", "u")] = O
            off[("u", "E")] = O.T.tocsr()
        if self.r_space is not None:
            order.append("r")
            diag["r"] = assembly.assemble_bilinear(
                "scalar_mass", self.r_space, self.r_space
            )
        grid = [
            [off.get((t, f), diag[t] if t == f else None) for f in order]
            for t in order
        ]
        W = sp.bmat(grid, format="csr")
        nb = 1 + (1 if (self.r_space is not None and self.border_r is not None) else 0)
        return sp.block_diag([W, sp.identity(nb, format="csr")], format="csr")


def norm_sq_cellwise(values: np.ndarray, volumes: np.ndarray) -> float:
    """Integral of a cellwise-constant scalar squared."""
    return float((values * values) @ volumes)


def _weighted_sq(vals: np.ndarray, wdet: np.ndarray) -> float:
    return float(np.einsum("cq,cqd,cqd->", wdet, vals, vals))


def variant_equivalence(
    mesh: Mesh, params: MhdParams, sources: SourceData, *, tol: float = 1e-10, maxit: int = 100
) -> dict:
    """Solve with the multiplier and the augmented variant and compare.

    Returns the relative W-norm discrepancy of (u, B) plus per-field L^2
    differences and both reports.
    """
    results = {}
    for variant in VARIANTS:
        pv = MhdParams(
            Re=params.Re,
            Rm=params.Rm,
            s=params.s,
            bc_family=params.bc_family,
            variant=variant,
        )
        driver = MhdDriver(mesh, pv, sources)
        state, report = driver.picard_solve(tol=tol, maxit=maxit)
        results[variant] = (driver, state, report)

    drv_m, st_m, rep_m = results["multiplier"]
    _, st_a, rep_a = results["augmented"]
    du = FieldFunction(drv_m.u_space, st_m.u.coeffs - st_a.u.coeffs)
    dB = FieldFunction(drv_m.B_space, st_m.B.coeffs - st_a.B.coeffs)
    dE = FieldFunction(drv_m.E_space, st_m.E.coeffs - st_a.E.coeffs)
    dp = FieldFunction(drv_m.p_space, st_m.p.coeffs - st_a.p.coeffs)
    diff_w = operators.norm_w(du, dB, drv_m.dcurl)
    scale = max(operators.norm_w(st_m.u, st_m.B, drv_m.dcurl), 1e-300)
    return {
        "rel_w": diff_w / scale,
        "diff_E": operators.lp_norm(dE, 2, quad_degree=4),
        "diff_p": operators.lp_norm(dp, 2, quad_degree=2),
        "converged": rep_m.converged and rep_a.converged,
        "reports": (rep_m, rep_a),
        "states": (st_m, st_a),
    }
