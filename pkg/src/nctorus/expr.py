"""Exact operator-valued symbol calculus on the noncommutative two-torus.

An expression is a finite sum of terms

    coeff * xi1^a * xi2^b * w      ("xi" phase)
    coeff * r^p          * w       ("r" phase, after angular averaging)

where ``coeff`` is an exact rational and ``w`` is a word in the
non-commuting atoms

    ("k", n)            n-th power of the conformal (Weyl) factor, n != 0
    ("dk", i1, i2)      delta_1^i1 delta_2^i2 (k), (i1, i2) != (0, 0)
    ("b0", p)           resolvent power (k^2 |xi|^2 + 1)^{-p}, p >= 1
    ("mod", s, m, arg)  (Delta^{s/2} * Lm(Delta))(arg) applied to a "dk"
                        atom; m = 0 means no modified-logarithm factor

k and b0 commute with each other, so every maximal run of ("k", .) and
("b0", .) atoms is merged into a single normal-ordered block [k^n b0^p].
Nothing commutes past a "dk" or "mod" atom.

The order of a term counts each xi (or r) power as +1 and each b0 power
as -2; the parametrix terms b0, b1, b2 are homogeneous of orders -2, -3,
-4 in this grading.

All coefficients are ``fractions.Fraction``; no floating point enters
any rewriting step.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Iterable, Iterator

Atom = tuple
Word = tuple


class PhaseError(ValueError):
    """Operation applied to an expression in the wrong phase."""


class TermShapeError(ValueError):
    """A term does not match the structural pattern a rewrite requires."""


# ---------------------------------------------------------------------------
# atoms


def kpow(n: int) -> Atom:
    if n == 0:
        raise ValueError("k^0 is the empty word, not an atom")
    return ("k", n)


def dk(i1: int, i2: int) -> Atom:
    if i1 < 0 or i2 < 0 or (i1, i2) == (0, 0):
        raise ValueError(f"invalid derivative multi-index ({i1}, {i2})")
    return ("dk", i1, i2)


def b0pow(p: int) -> Atom:
    if p < 1:
        raise ValueError("resolvent power must be >= 1")
    return ("b0", p)


def modatom(s: int, m: int, arg: Atom) -> Atom:
    """Delta^{s/2} * Lm(Delta) applied to ``arg`` (a "dk" atom)."""
    if arg[0] != "dk":
        raise ValueError("modular functions are only applied to dk atoms")
    if not 0 <= m <= 3:
        raise ValueError("modified-logarithm index out of range")
    if s == 0 and m == 0:
        raise ValueError("identity wrapper; use the bare atom")
    return ("mod", s, m, arg)


def wrap_mod(s: int, m: int, atom: Atom) -> Atom:
    """Compose Delta^{s/2} Lm(Delta) onto a bare or already-wrapped atom."""
    if atom[0] == "dk":
        return atom if (s == 0 and m == 0) else modatom(s, m, atom)
    if atom[0] == "mod":
        _, s0, m0, arg = atom
        if m and m0:
            raise TermShapeError("cannot stack two modified-logarithm factors")
        return wrap_mod(s + s0, m or m0, arg)
    raise ValueError(f"cannot apply a modular function to {atom!r}")


def atom_key(atom: Atom):
    """Total order on atoms: k < dk (graded) < b0 < mod, then lexicographic."""
    tag = atom[0]
    if tag == "k":
        return (0, atom[1])
    if tag == "dk":
        return (1, atom[1] + atom[2], atom[1], atom[2])
    if tag == "b0":
        return (2, atom[1])
    return (3, atom[1], atom[2], atom_key(atom[3]))


def canon_word(atoms: Iterable[Atom]) -> Word:
    """Merge commuting k/b0 runs into normal-ordered [k^n b0^p] blocks."""
    out: list[Atom] = []
    kexp = 0
    pexp = 0

    def flush():
        nonlocal kexp, pexp
        if kexp:
            out.append(("k", kexp))
        if pexp:
            out.append(("b0", pexp))
        kexp = pexp = 0

    for atom in atoms:
        tag = atom[0]
        if tag == "k":
            kexp += atom[1]
        elif tag == "b0":
            pexp += atom[1]
        else:
            flush()
            out.append(atom)
    flush()
    return tuple(out)


def word_b0_total(word: Word) -> int:
    return sum(a[1] for a in word if a[0] == "b0")


# ---------------------------------------------------------------------------
# expressions

XI = "xi"
R = "r"


class Expr:
    """Canonically merged multiset of terms, immutable after construction.

    ``terms`` maps (monomial, word) -> Fraction.  In the xi phase the
    monomial is a pair (a, b) of xi1/xi2 exponents; in the r phase it is
    the integer exponent of r.
    """

    __slots__ = ("phase", "terms")

    def __init__(self, phase: str, items: Iterable[tuple] = ()):
        if phase not in (XI, R):
            raise ValueError(f"unknown phase {phase!r}")
        terms: dict = {}
        for mono, word, coeff in items:
            coeff = Fraction(coeff)
            if not coeff:
                continue
            key = (mono, canon_word(word))
            c = terms.get(key, 0) + coeff
            if c:
                terms[key] = c
            else:
                del terms[key]
        object.__setattr__(self, "phase", phase)
        object.__setattr__(self, "terms", terms)

    def __setattr__(self, *a):
        raise AttributeError("Expr is immutable")

    def __reduce__(self):
        return (_rebuild_expr, (self.phase, tuple(self.terms.items())))

    # -- construction helpers

    @classmethod
    def zero(cls, phase: str = XI) -> "Expr":
        return cls(phase)

    @classmethod
    def one(cls, phase: str = XI) -> "Expr":
        mono = (0, 0) if phase == XI else 0
        return cls(phase, [(mono, (), 1)])

    @classmethod
    def word(cls, *atoms: Atom, coeff=1, mono=None, phase: str = XI) -> "Expr":
        if mono is None:
            mono = (0, 0) if phase == XI else 0
        return cls(phase, [(mono, atoms, coeff)])

    @classmethod
    def _raw(cls, phase: str, terms: dict) -> "Expr":
        out = cls(phase)
        object.__setattr__(out, "terms", terms)
        return out

    # -- basic protocol

    def items(self) -> Iterator[tuple]:
        for (mono, word), coeff in self.terms.items():
            yield mono, word, coeff

    def __len__(self):
        return len(self.terms)

    def __bool__(self):
        return bool(self.terms)

    def __eq__(self, other):
        if not isinstance(other, Expr):
            return NotImplemented
        if not self.terms and not other.terms:
            return True
        return self.phase == other.phase and self.terms == other.terms

    def __hash__(self):
        return hash((self.phase if self.terms else None,
                     frozenset(self.terms.items())))

    def _check_phase(self, other: "Expr"):
        if self.terms and other.terms and self.phase != other.phase:
            raise PhaseError("cannot combine xi-phase and r-phase expressions")

    def __add__(self, other: "Expr") -> "Expr":
        self._check_phase(other)
        phase = self.phase if self.terms else other.phase
        merged = dict(self.terms)
        for key, c in other.terms.items():
            s = merged.get(key, 0) + c
            if s:
                merged[key] = s
            else:
                merged.pop(key, None)
        return Expr._raw(phase, merged)

    def __neg__(self) -> "Expr":
        return self.scale(-1)

    def __sub__(self, other: "Expr") -> "Expr":
        return self + other.scale(-1)

    def scale(self, c) -> "Expr":
        c = Fraction(c)
        if not c:
            return Expr(self.phase)
        return Expr._raw(self.phase,
                         {k: v * c for k, v in self.terms.items()})

    def __mul__(self, other: "Expr") -> "Expr":
        """Pointwise (algebra) product: concatenate words, add monomials."""
        self._check_phase(other)
        phase = self.phase if self.terms else other.phase
        items = []
        for (m1, w1), c1 in self.terms.items():
            for (m2, w2), c2 in other.terms.items():
                if phase == XI:
                    mono = (m1[0] + m2[0], m1[1] + m2[1])
                else:
                    mono = m1 + m2
                items.append((mono, w1 + w2, c1 * c2))
        return Expr(phase, items)

    def __repr__(self):
        if not self.terms:
            return "<Expr 0>"
        bits = []
        for (mono, word), coeff in sorted(
                self.terms.items(),
                key=lambda kv: (kv[0][0], tuple(map(atom_key, kv[0][1])))):
            if self.phase == XI:
                mstr = f"xi1^{mono[0]} xi2^{mono[1]}"
            else:
                mstr = f"r^{mono}"
            wstr = " ".join(_atom_str(a) for a in word) or "1"
            bits.append(f"{coeff} * {mstr} * [{wstr}]")
        return "<Expr " + " + ".join(bits) + ">"

    # -- structural queries

    def max_order(self) -> int | None:
        orders = [term_order(self.phase, m, w) for m, w, _ in self.items()]
        return max(orders) if orders else None

    def truncate(self, min_order: int) -> "Expr":
        return Expr._raw(self.phase, {
            (m, w): c for (m, w), c in self.terms.items()
            if term_order(self.phase, m, w) >= min_order})

    def map_terms(self, fn) -> "Expr":
        """Rebuild with fn(mono, word, coeff) -> iterable of new items."""
        items = []
        for mono, word, coeff in self.items():
            items.extend(fn(mono, word, coeff))
        return Expr(self.phase, items)

    def has_resolvent(self) -> bool:
        return any(a[0] == "b0" for _, w in self.terms for a in w)


def _rebuild_expr(phase, items):
    return Expr._raw(phase, dict(items))


def _atom_str(atom: Atom) -> str:
    tag = atom[0]
    if tag == "k":
        return "k" if atom[1] == 1 else f"k^{atom[1]}"
    if tag == "dk":
        return f"d({atom[1]},{atom[2]})k"
    if tag == "b0":
        return "b0" if atom[1] == 1 else f"b0^{atom[1]}"
    _, s, m, arg = atom
    parts = []
    if m:
        parts.append(f"L{m}")
    if s:
        parts.append("D" if s == 2 else f"D^{Fraction(s, 2)}")
    return "*".join(parts) + f"({_atom_str(arg)})"


def term_order(phase: str, mono, word: Word) -> int:
    deg = (mono[0] + mono[1]) if phase == XI else mono
    return deg - 2 * word_b0_total(word)


# ---------------------------------------------------------------------------
# derivations


def xi_derivative(e: Expr, i: int) -> Expr:
    """d/dxi_i: monomial rule plus the resolvent rule
    d/dxi_i b0^p = -2p xi_i k^2 b0^{p+1} (k commutes with b0)."""
    if e.terms and e.phase != XI:
        raise PhaseError("xi-derivative of an angular-averaged expression")
    if i not in (1, 2):
        raise ValueError("direction must be 1 or 2")
    items = []
    for (a, b), word, coeff in e.items():
        exp = a if i == 1 else b
        if exp:
            mono = (a - 1, b) if i == 1 else (a, b - 1)
            items.append((mono, word, coeff * exp))
        bumped = (a + 1, b) if i == 1 else (a, b + 1)
        for pos, atom in enumerate(word):
            if atom[0] != "b0":
                continue
            p = atom[1]
            new = word[:pos] + (("k", 2), ("b0", p + 1)) + word[pos + 1:]
            items.append((bumped, new, coeff * (-2 * p)))
    return Expr(XI, items)


def _delta_atom(atom: Atom, i: int):
    """Yield (u_power, replacement_atoms, sign) for delta_i of one atom;
    u_power counts scalar factors of u = |xi|^2 (resolvent rule only)."""
    d = dk(1, 0) if i == 1 else dk(0, 1)
    tag = atom[0]
    if tag == "dk":
        yield 0, (("dk", atom[1] + (i == 1), atom[2] + (i == 2)),), 1
    elif tag == "k":
        n = atom[1]
        if n > 0:
            for a in range(n):
                pre = (("k", a),) if a else ()
                post = (("k", n - 1 - a),) if n - 1 - a else ()
                yield 0, pre + (d,) + post, 1
        else:
            # delta(k^-1) = -k^-1 delta(k) k^-1, iterated over |n| factors
            for a in range(-n):
                yield 0, (("k", a + n), d, ("k", -1 - a)), -1
    elif tag == "b0":
        # delta(b0) = -u b0 (delta(k) k + k delta(k)) b0 over each factor
        p = atom[1]
        for a in range(p):
            left = ("b0", a + 1)
            right = ("b0", p - a)
            yield 1, (left, d, ("k", 1), right), -1
            yield 1, (left, ("k", 1), d, right), -1
    else:
        raise TermShapeError(
            "modular-function atoms are opaque to the derivations")


def delta_derivative(e: Expr, i: int) -> Expr:
    """Leibniz derivation delta_i over every atom of every word."""
    if i not in (1, 2):
        raise ValueError("direction must be 1 or 2")
    items = []
    for mono, word, coeff in e.items():
        for pos, atom in enumerate(word):
            for upow, repl, sign in _delta_atom(atom, i):
                new = word[:pos] + repl + word[pos + 1:]
                if upow == 0:
                    items.append((mono, new, coeff * sign))
                elif e.phase == R:
                    items.append((mono + 2 * upow, new, coeff * sign))
                else:
                    a, b = mono
                    items.append(((a + 2, b), new, coeff * sign))
                    items.append(((a, b + 2), new, coeff * sign))
    return Expr(e.phase, items)


def _xi_power(e: Expr, l1: int, l2: int) -> Expr:
    for _ in range(l1):
        e = xi_derivative(e, 1)
    for _ in range(l2):
        e = xi_derivative(e, 2)
    return e


def _delta_power(e: Expr, l1: int, l2: int) -> Expr:
    for _ in range(l1):
        e = delta_derivative(e, 1)
    for _ in range(l2):
        e = delta_derivative(e, 2)
    return e


def adjoint_word(word: Word) -> tuple[Word, int]:
    """Reverse a word atom by atom; each delta order flips the sign once
    (the derivations anticommute with the star operation)."""
    sign = 1
    out = []
    for atom in reversed(word):
        if atom[0] == "dk":
            sign *= (-1) ** (atom[1] + atom[2])
        elif atom[0] == "mod":
            raise TermShapeError("adjoint of a modular-function atom")
        out.append(atom)
    return tuple(out), sign


def adjoint_symbol(e: Expr) -> Expr:
    """Symbol of the adjoint operator:

        sum_{l1,l2} 1/(l1! l2!) d1^l1 d2^l2 delta1^l1 delta2^l2 (rho*)

    for a xi-polynomial rho (the series terminates on its own)."""
    if e.terms and e.phase != XI:
        raise PhaseError("adjoint expansion needs the xi phase")
    if e.has_resolvent():
        raise TermShapeError(
            "adjoint series does not terminate on resolvent atoms")

    def star(mono, word, coeff):
        w, sign = adjoint_word(word)
        return [(mono, w, coeff * sign)]

    rho = e.map_terms(star)
    total = Expr.zero(XI)
    cur1 = rho
    l1 = 0
    while cur1:
        cur2 = cur1
        l2 = 0
        while cur2:
            total = total + cur2.scale(
                Fraction(1, math.factorial(l1) * math.factorial(l2)))
            cur2 = xi_derivative(delta_derivative(cur2, 2), 2)
            l2 += 1
        cur1 = xi_derivative(delta_derivative(cur1, 1), 1)
        l1 += 1
    return total


# ---------------------------------------------------------------------------
# symbol product


def symbol_product(a: Expr, b: Expr, min_order: int | None = None) -> Expr:
    """Composition in the symbol algebra:

        sum_{l1,l2 >= 0} 1/(l1! l2!) d1^l1 d2^l2 (a) . delta1^l1 delta2^l2 (b)

    truncated to drop every resulting term of order below ``min_order``.
    With ``min_order=None`` the series must terminate on its own, which
    requires ``a`` free of resolvent atoms.
    """
    for e in (a, b):
        if e.terms and e.phase != XI:
            raise PhaseError("symbol product needs xi-phase inputs")
    if not a or not b:
        return Expr.zero(XI)
    if min_order is None:
        if a.has_resolvent():
            raise TermShapeError(
                "untruncated symbol product needs a polynomial left factor")
        bound = None
    else:
        # each xi-derivative lowers the left order by exactly one
        bound = a.max_order() + b.max_order() - min_order
        if bound < 0:
            return Expr.zero(XI)

    total = Expr.zero(XI)
    da1, db1 = a, b
    l1 = 0
    while da1 and (bound is None or l1 <= bound):
        da2, db2 = da1, db1
        l2 = 0
        while da2 and (bound is None or l1 + l2 <= bound):
            piece = (da2 * db2).scale(
                Fraction(1, math.factorial(l1) * math.factorial(l2)))
            if min_order is not None:
                piece = piece.truncate(min_order)
            total = total + piece
            da2 = xi_derivative(da2, 2)
            db2 = delta_derivative(db2, 2)
            l2 += 1
        da1 = xi_derivative(da1, 1)
        db1 = delta_derivative(db1, 1)
        l1 += 1
    return total


# ---------------------------------------------------------------------------
# Laplacian symbol and parametrix terms


def laplacian_symbol() -> Expr:
    """Symbol of the conformally rescaled Laplacian k (d1^2 + d2^2) k:
    the symbol-algebra composition of |xi|^2 with k, multiplied by k on
    the left.  Expands to

        k^2 |xi|^2  +  2 xi_i k delta_i(k)  +  k delta_i delta_i(k).
    """
    lap = Expr(XI, [((2, 0), (), 1), ((0, 2), (), 1)])
    kfac = Expr.word(kpow(1))
    return kfac * symbol_product(lap, kfac)


def split_by_xi_degree(e: Expr) -> dict[int, Expr]:
    parts: dict[int, list] = {}
    for (a, b), word, coeff in e.items():
        parts.setdefault(a + b, []).append(((a, b), word, coeff))
    return {deg: Expr(XI, items) for deg, items in parts.items()}


def b0_expr() -> Expr:
    return Expr.word(b0pow(1))


def compute_b1() -> Expr:
    """b1 = -(b0 a1 b0 + d_i(b0) delta_i(a2) b0); homogeneous of order -3."""
    parts = split_by_xi_degree(laplacian_symbol())
    a2, a1 = parts[2], parts[1]
    b0e = b0_expr()
    acc = b0e * a1 * b0e
    for i in (1, 2):
        acc = acc + xi_derivative(b0e, i) * delta_derivative(a2, i) * b0e
    return -acc


def compute_b2_core() -> Expr:
    """b2 without the trailing b0 factor shared by all five summands:

        -(b0 a0 + b1 a1 + d_i(b0) delta_i(a1) + d_i(b1) delta_i(a2)
          + 1/2 d_i d_j(b0) delta_i delta_j(a2))
    """
    parts = split_by_xi_degree(laplacian_symbol())
    a2, a1, a0 = parts[2], parts[1], parts[0]
    b0e = b0_expr()
    b1 = compute_b1()
    acc = b0e * a0 + b1 * a1
    for i in (1, 2):
        acc = acc + xi_derivative(b0e, i) * delta_derivative(a1, i)
        acc = acc + xi_derivative(b1, i) * delta_derivative(a2, i)
        for j in (1, 2):
            acc = acc + (
                xi_derivative(xi_derivative(b0e, i), j)
                * delta_derivative(delta_derivative(a2, i), j)
            ).scale(Fraction(1, 2))
    return -acc


def compute_b2() -> Expr:
    """Full b2; every term homogeneous of order -4."""
    return compute_b2_core() * b0_expr()


def discard_xi_odd(e: Expr) -> Expr:
    """Drop terms odd in either xi exponent (their angular integrals vanish)."""
    if e.terms and e.phase != XI:
        raise PhaseError("parity filter applies to the xi phase")
    return Expr._raw(XI, {
        (m, w): c for (m, w), c in e.terms.items()
        if m[0] % 2 == 0 and m[1] % 2 == 0})


# ---------------------------------------------------------------------------
# exact zero decision modulo the resolvent identity


def _word_blocks(word: Word):
    """Split a canonical word into (skeleton, blocks): blocks[i] is the
    (k-exponent, b0-exponent) run preceding skeleton atom i, plus one
    trailing block."""
    skeleton: list[Atom] = []
    blocks: list[tuple[int, int]] = []
    kexp = pexp = 0
    for atom in word:
        if atom[0] == "k":
            kexp = atom[1]
        elif atom[0] == "b0":
            pexp = atom[1]
        else:
            blocks.append((kexp, pexp))
            skeleton.append(atom)
            kexp = pexp = 0
    blocks.append((kexp, pexp))
    return tuple(skeleton), blocks


def resolvent_residue(e: Expr) -> dict:
    """Clear all resolvent denominators and expand.

    Within each group of terms sharing the same skeleton of non-block
    atoms, every block is brought to the common denominator
    (k^2 u + 1)^{Q_i}; the numerators expand into pure k-power tensors
    with the scalar u = |xi|^2 (or r^2) folded into the monomial.  The
    expression is identically zero iff the expansion cancels completely.
    """
    groups: dict = {}
    for mono, word, coeff in e.items():
        skel, blocks = _word_blocks(word)
        groups.setdefault(skel, []).append((mono, blocks, coeff))

    residue: dict = {}

    def bump(key, c):
        s = residue.get(key, 0) + c
        if s:
            residue[key] = s
        else:
            residue.pop(key, None)

    for skel, terms in groups.items():
        qmax = [0] * (len(skel) + 1)
        for _, blocks, _ in terms:
            for i, (_, p) in enumerate(blocks):
                qmax[i] = max(qmax[i], p)
        for mono, blocks, coeff in terms:
            # expand prod_i k^{n_i} (k^2 u + 1)^{qmax_i - p_i}
            partial = [((), 0, coeff)]  # (k-exp per block, u-power, coeff)
            for i, (n, p) in enumerate(blocks):
                m = qmax[i] - p
                nxt = []
                for kexps, upow, c in partial:
                    for j in range(m + 1):
                        nxt.append((kexps + (n + 2 * j,),
                                    upow + j,
                                    c * math.comb(m, j)))
                partial = nxt
            for kexps, upow, c in partial:
                if e.phase == R:
                    bump((skel, kexps, mono + 2 * upow), c)
                else:
                    a, b = mono
                    for s in range(upow + 1):
                        bump((skel, kexps, (a + 2 * s, b + 2 * (upow - s))),
                             c * math.comb(upow, s))
    return residue


def is_zero_mod_resolvent(e: Expr) -> bool:
    return not resolvent_residue(e)


def verify_parametrix(cutoff: int = -2) -> Expr:
    """Check that the approximate inverse built from b0 + b1 + b2 solves

        sigma . (sigma(laplacian) + 1) = 1

    exactly through every component of order >= ``cutoff``.  The order-g
    component collects the product-formula contributions
    1/(l1! l2!) d^l(b_i) . delta^l(a_j (+1 for j=2)) with
    g = j - 2 - i - |l|; each must vanish identically modulo the
    resolvent identity (k^2 u + 1) b0 = 1.  Returns the sum of the
    non-vanishing components (empty expression = pass).
    """
    parts = split_by_xi_degree(laplacian_symbol())
    pieces = {2: parts[2] + Expr.one(), 1: parts[1], 0: parts[0]}
    bs = {0: b0_expr(), 1: compute_b1(), 2: compute_b2()}

    components: dict[int, Expr] = {}
    for i, bi in bs.items():
        for j, pj in pieces.items():
            lmax = j - 2 - i - cutoff
            if lmax < 0:
                continue
            for l1 in range(lmax + 1):
                dbi = _xi_power(bi, l1, 0)
                for l2 in range(lmax - l1 + 1):
                    g = j - 2 - i - l1 - l2
                    piece = (_xi_power(dbi, 0, l2)
                             * _delta_power(pj, l1, l2)).scale(
                        Fraction(1, math.factorial(l1) * math.factorial(l2)))
                    components[g] = components.get(g, Expr.zero(XI)) + piece
    components[0] = components.get(0, Expr.zero(XI)) - Expr.one()

    residual = Expr.zero(XI)
    for g in sorted(components, reverse=True):
        if not is_zero_mod_resolvent(components[g]):
            residual = residual + components[g]
    return residual
