"""Modified logarithms and the closed forms of the spectral density.

Everything here lives in two commuting indeterminates

    x             (standing for log of the modular operator)
    w = e^{x/2}   (kept independent; substituting it back only happens
                   in numeric evaluation and Taylor expansion)

in which all functions of interest are honest rational functions, so
exact equality is decided by rational normalization over QQ.

A formal modular function is a dict {(s, m): Fraction} meaning

    sum  c * Delta^{s/2} * Lm(Delta)        (m = 0: no log factor)

where Lm is the modified logarithm

    Lm(u) = (-1)^m (u-1)^{-(m+1)} (log u - sum_{j<=m} (-1)^{j+1} (u-1)^j / j)
          = integral_0^1 t^m / (1 + (u-1) t) dt .
"""

from __future__ import annotations

import math
from fractions import Fraction

import mpmath
import sympy as sp

X, W = sp.symbols("x w")

#: coefficients {(s, m): c} of the spectral density F in
#: zeta(0)+1 = 2*pi * phi(F(Delta)(delta_j k) delta_j k):
#: F(u) = 1/6 u^{-1/2} - 1/3 + L1(u) - 2(1+u^{1/2}) L2(u)
#:        + (1+u^{1/2})^2 L3(u)
DENSITY_COEFFS: dict[tuple[int, int], Fraction] = {
    (-1, 0): Fraction(1, 6),
    (0, 0): Fraction(-1, 3),
    (0, 1): Fraction(1),
    (0, 2): Fraction(-2),
    (1, 2): Fraction(-2),
    (0, 3): Fraction(1),
    (1, 3): Fraction(2),
    (2, 3): Fraction(1),
}

SERIES_RADIUS = 0.1   # |u - 1| below which eval_L switches to the series
_SERIES_DEGREE = 20
_XSERIES_RADIUS = 0.5  # |x| below which h and K evaluate by series


class ClosedForm:
    """Rational function of (x, w) with exact equality."""

    __slots__ = ("expr",)

    def __init__(self, expr):
        self.expr = sp.cancel(sp.together(sp.sympify(expr)))

    def __eq__(self, other):
        if not isinstance(other, ClosedForm):
            other = ClosedForm(other)
        return sp.cancel(sp.together(self.expr - other.expr)) == 0

    def __hash__(self):
        return hash(sp.srepr(self.expr))

    def __repr__(self):
        return f"ClosedForm({self.expr})"

    def __add__(self, other):
        return ClosedForm(self.expr + ClosedForm(other).expr)

    def __mul__(self, other):
        return ClosedForm(self.expr * ClosedForm(other).expr)

    def __sub__(self, other):
        return ClosedForm(self.expr - ClosedForm(other).expr)

    def reflected(self) -> "ClosedForm":
        """x -> -x, w -> 1/w (the parity involution)."""
        return ClosedForm(self.expr.subs({X: -X, W: 1 / W},
                                         simultaneous=True))

    def in_x(self):
        """Substitute w = e^{x/2}; a function of x alone."""
        return self.expr.subs(W, sp.exp(X / 2))

    def taylor(self, order: int) -> list[Fraction]:
        """Exact Taylor coefficients at x = 0, degrees 0..order."""
        if order > 12:
            raise ValueError("exact series capped at degree 12")
        ser = sp.series(self.in_x(), X, 0, order + 1).removeO()
        poly = sp.Poly(sp.expand(ser), X)
        out = [Fraction(0)] * (order + 1)
        for (deg,), c in poly.terms():
            if deg <= order:
                out[deg] = Fraction(int(sp.fraction(c)[0]),
                                    int(sp.fraction(c)[1]))
        return out

    def eval(self, x: float) -> float:
        w = math.exp(x / 2)
        return float(self.expr.subs({X: x, W: w}))


def is_odd(cf: ClosedForm) -> bool:
    """True iff cf(x) + cf(-x) normalizes to zero exactly."""
    return sp.cancel(sp.together(cf.expr + cf.reflected().expr)) == 0


# ---------------------------------------------------------------------------
# closed forms


def modified_log_closed(m: int):
    """Lm(e^x) as a rational function of (x, w)."""
    u = W ** 2
    tail = sum(sp.Integer(-1) ** (j + 1) * (u - 1) ** j / j
               for j in range(1, m + 1))
    return sp.Integer(-1) ** m * (X - tail) / (u - 1) ** (m + 1)


def density_closed_form(coeffs=None) -> ClosedForm:
    """The formal sum c * Delta^{s/2} Lm(Delta) as a ClosedForm in (x, w)."""
    coeffs = DENSITY_COEFFS if coeffs is None else coeffs
    acc = sp.Integer(0)
    for (s, m), c in coeffs.items():
        term = sp.Rational(c.numerator, c.denominator) * W ** s
        if m:
            term *= modified_log_closed(m)
        acc += term
    return ClosedForm(acc)


f_closed_form = density_closed_form


def h_closed_form() -> ClosedForm:
    """The entire function h with F(u) = h(log u), written out."""
    num = -(-1 + 3 * W + 3 * W ** 2 + 6 * W ** 3 * X
            - 3 * W ** 4 - 3 * W ** 5 + W ** 6)
    return ClosedForm(num / (W * 6 * (W - 1) ** 4 * (W + 1) ** 2))


def h_from_f(coeffs=None) -> ClosedForm:
    """Substitute u = e^x into the density and simplify; asserts exact
    agreement with the displayed form of h."""
    got = density_closed_form(coeffs)
    want = h_closed_form()
    if got != want:
        raise ArithmeticError(
            f"density does not simplify to h: off by "
            f"{sp.cancel(got.expr - want.expr)}")
    return want


def K_closed_form() -> ClosedForm:
    """K(x) = -(x - sh(x/2) - sh(x) + sh(3x/2)/3) / (x^2 sh(x/2)^2),
    with the hyperbolic sines written in w = e^{x/2}."""
    sh_half = (W - 1 / W) / 2
    sh_one = (W ** 2 - 1 / W ** 2) / 2
    sh_three_half = (W ** 3 - 1 / W ** 3) / 2
    num = X - sh_half - sh_one + sh_three_half / 3
    return ClosedForm(-num / (X ** 2 * sh_half ** 2))


def K_from_h(h: ClosedForm | None = None) -> ClosedForm:
    """K(x) = 4 (e^{x/2} - 1)^2 x^{-2} h(x); asserts exact agreement with
    the hyperbolic-sine form."""
    h = h_closed_form() if h is None else h
    got = ClosedForm(4 * (W - 1) ** 2 / X ** 2 * h.expr)
    want = K_closed_form()
    if got != want:
        raise ArithmeticError(
            f"4 (w-1)^2 x^-2 h does not simplify to K: off by "
            f"{sp.cancel(got.expr - want.expr)}")
    return want


def taylor_h(order: int) -> list[Fraction]:
    """Exact Taylor coefficients of h at 0 (starts -x/20 + x^2/40 - ...)."""
    return h_closed_form().taylor(order)


# ---------------------------------------------------------------------------
# numeric evaluation


def eval_L(m: int, u: float, branch: str = "auto") -> float:
    """Modified logarithm Lm(u) for u > 0.

    branch "auto" switches to the series around u = 1 where the closed
    form cancels catastrophically; "closed" evaluates the closed form in
    high precision inside the series radius so that both branches stay
    comparable everywhere.
    """
    if not 1 <= m <= 3:
        raise ValueError("m must be 1, 2 or 3")
    if u <= 0:
        raise ValueError("domain error: u must be positive")
    near = abs(u - 1) < SERIES_RADIUS
    if branch == "auto":
        branch = "series" if near else "closed"
    if branch == "series":
        t = u - 1.0
        acc = 0.0
        for i in range(_SERIES_DEGREE, -1, -1):
            acc = acc * t + (-1.0) ** i / (m + 1 + i)
        return acc
    if branch == "closed":
        if near:  # double precision would lose ~10 digits here
            return eval_L_hp(m, u)
        tail = sum((-1.0) ** (j + 1) * (u - 1.0) ** j / j
                   for j in range(1, m + 1))
        return (-1.0) ** m * (math.log(u) - tail) / (u - 1.0) ** (m + 1)
    raise ValueError(f"unknown branch {branch!r}")


def eval_L_hp(m: int, u: float, dps: int = 40) -> float:
    """Closed form in mpmath working precision (reference values)."""
    with mpmath.workdps(dps):
        uu = mpmath.mpf(u)
        tail = mpmath.fsum((-1) ** (j + 1) * (uu - 1) ** j / j
                           for j in range(1, m + 1))
        val = (-1) ** m * (mpmath.log(uu) - tail) / (uu - 1) ** (m + 1)
        return float(val)


def eval_L_quadrature(m: int, u: float) -> float:
    """Independent route: the compactified integral form

        Lm(u) = integral_0^1 t^m / (1 + (u-1) t) dt

    (the substitution t = x/(x+1) of the resolvent-integral kernel)."""
    from scipy.integrate import quad
    if u <= 0:
        raise ValueError("domain error: u must be positive")
    val, err = quad(lambda t: t ** m / (1.0 + (u - 1.0) * t), 0.0, 1.0,
                    epsabs=1e-13, epsrel=1e-13, limit=200)
    if err > 1e-10:
        raise ArithmeticError(f"quadrature did not converge: err={err}")
    return val


def eval_density(u: float, coeffs=None) -> float:
    coeffs = DENSITY_COEFFS if coeffs is None else coeffs
    acc = 0.0
    for (s, m), c in coeffs.items():
        term = float(c) * u ** (s / 2.0)
        if m:
            term *= eval_L(m, u)
        acc += term
    return acc


class _SeriesCache:
    def __init__(self):
        self.coeffs: dict[str, list[float]] = {}

    def get(self, name: str) -> list[float]:
        if name not in self.coeffs:
            cf = h_closed_form() if name == "h" else K_closed_form()
            self.coeffs[name] = [float(c) for c in cf.taylor(12)]
        return self.coeffs[name]


_series = _SeriesCache()


def h_numeric(x: float) -> float:
    """h(x) in double precision; series through the removable point 0."""
    if abs(x) < _XSERIES_RADIUS:
        acc = 0.0
        for c in reversed(_series.get("h")):
            acc = acc * x + c
        return acc
    w = math.exp(x / 2)
    num = -(-1 + 3 * w + 3 * w ** 2 + 6 * w ** 3 * x
            - 3 * w ** 4 - 3 * w ** 5 + w ** 6)
    return num / (w * 6 * (w - 1) ** 4 * (w + 1) ** 2)


def K_numeric(x: float) -> float:
    if abs(x) < _XSERIES_RADIUS:
        acc = 0.0
        for c in reversed(_series.get("K")):
            acc = acc * x + c
        return acc
    num = x - math.sinh(x / 2) - math.sinh(x) + math.sinh(1.5 * x) / 3
    return -num / (x ** 2 * math.sinh(x / 2) ** 2)


def sample(fn, grid) -> list[tuple[float, float]]:
    """Numeric table [(x, fn(x))] for plotting; fn is "h", "K" or a
    ClosedForm (whose own series handles removable points)."""
    if fn == "h":
        f = h_numeric
    elif fn == "K":
        f = K_numeric
    elif isinstance(fn, ClosedForm):
        f = fn.eval
    else:
        raise ValueError(f"cannot sample {fn!r}")
    return [(float(x), f(float(x))) for x in grid]
