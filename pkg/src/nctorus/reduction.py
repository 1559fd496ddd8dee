"""Reduction of the order -4 parametrix term to modular-operator form.

Pipeline (each stage is exact, Fraction arithmetic only):

  1. xi-even part of the b2 core        (symbol algebra)
  2. angular averaging  xi1^2a xi2^2b -> M(a,b) r^{2(a+b)}
  3. left-resolvent bump: under the trace, the trailing b0 factor of b2
     becomes +1 on the leading resolvent exponent
  4. split by resolvent layout: all-left / b0^2 in the middle / b0 in
     the middle
  5. all-left terms: closed-form radial integral (Beta integral)
  6. b0^2-middle terms: integration by parts in r, leaving first-power
     middle resolvents; combined with the native b0-middle terms
  7. middle terms: the resolvent-integral identity turns each
     u-integral into a modified-logarithm function of the modular
     operator applied to the sandwiched element
  8. second tau-derivatives are removed by integration by parts of the
     derivation under the trace, and all k-powers are collected by the
     modular rewrites  x k^b = k^b Delta^{b/2}(x)
  9. assembly of the spectral density F with
     zeta(0) + 1 = 2*pi * phi(F(Delta)(delta_j k) delta_j k)

The overall factor 2*pi of the angular integral is tracked as metadata
(PREFACTOR); the sign flip from evaluating the resolvent at -1 is
applied inside the two integration stages, where the u-integrals are
actually performed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .expr import (Expr, R, XI, TermShapeError, atom_key, canon_word,
                   compute_b1, compute_b2_core, delta_derivative,
                   discard_xi_odd, term_order, wrap_mod)
from .serialize import expr_to_records

PREFACTOR = "2*pi"  # angular integral, never multiplied into coefficients


class DerivationMismatch(RuntimeError):
    """A pipeline stage disagrees with its frozen term list."""

    def __init__(self, stage, difference):
        self.stage = stage
        self.difference = difference
        super().__init__(f"stage {stage!r} off by {difference!r}")


# ---------------------------------------------------------------------------
# trace-cyclic canonical form


def word_rotations(word):
    return [word[i:] + word[:i] for i in range(len(word))] or [word]


def trace_key(word):
    """Lexicographically minimal rotation under the fixed atom order."""
    return min((tuple(map(atom_key, canon_word(w))), canon_word(w))
               for w in word_rotations(word))[1]


def trace_canonical(e: Expr) -> Expr:
    """Rotate every word to its canonical rotation (valid under the trace)."""
    return e.map_terms(lambda m, w, c: [(m, trace_key(w), c)])


def rotate_trailing_k(word):
    """Cycle trailing k-powers to the front (a trace move; they merge
    with the leading commuting block)."""
    while word and word[-1][0] == "k":
        word = canon_word((word[-1],) + word[:-1])
    return word


# ---------------------------------------------------------------------------
# angular averaging and the left-resolvent trick


def angular_mean(a: int, b: int) -> Fraction:
    """(1/2pi) integral of cos^{2a} sin^{2b} over a period."""
    return Fraction(math.factorial(2 * a) * math.factorial(2 * b),
                    4 ** (a + b) * math.factorial(a) * math.factorial(b)
                    * math.factorial(a + b))


def angular_average(e: Expr) -> Expr:
    """Replace xi1^{2a} xi2^{2b} by M(a,b) r^{2(a+b)}; the overall 2*pi
    stays in PREFACTOR."""
    if e.terms and e.phase != XI:
        raise TermShapeError("angular averaging expects the xi phase")
    items = []
    for (a, b), word, coeff in e.items():
        if a % 2 or b % 2:
            raise TermShapeError(
                f"xi-odd term survived to angular averaging: xi1^{a} xi2^{b}")
        items.append((a + b, word, coeff * angular_mean(a // 2, b // 2)))
    return Expr(R, items)


def cyclic_left_b0(e: Expr) -> Expr:
    """Trade the trailing right b0 factor for +1 on the leading resolvent
    exponent (equal under the trace by cyclicity)."""

    def bump(mono, word, coeff):
        if word and word[0][0] == "b0":
            return [(mono, (("b0", word[0][1] + 1),) + word[1:], coeff)]
        if (len(word) > 1 and word[0][0] == "k" and word[1][0] == "b0"):
            return [(mono, (word[0], ("b0", word[1][1] + 1)) + word[2:],
                     coeff)]
        raise TermShapeError(f"term does not begin with a resolvent: {word}")

    return e.map_terms(bump)


# ---------------------------------------------------------------------------
# resolvent layout


def word_blocks(word):
    """(skeleton, blocks): blocks[i] = (k-exp, b0-exp) run before skeleton
    atom i, plus one trailing block."""
    skeleton = []
    blocks = []
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


def split_resolvent_layout(e: Expr) -> dict[str, Expr]:
    """Partition into all-left / b0^2-middle / b0-middle term lists."""
    buckets = {"all_left": [], "middle2": [], "middle1": []}
    for mono, word, coeff in e.items():
        _, blocks = word_blocks(word)
        inner = [p for _, p in blocks[1:] if p]
        if not inner:
            buckets["all_left"].append((mono, word, coeff))
        elif inner == [2]:
            buckets["middle2"].append((mono, word, coeff))
        elif inner == [1]:
            buckets["middle1"].append((mono, word, coeff))
        else:
            raise TermShapeError(f"unexpected resolvent layout {blocks}")
    return {k: Expr(e.phase, v) for k, v in buckets.items()}


# ---------------------------------------------------------------------------
# stage 5: all-left radial integrals


def radial_integrate_all_left(e: Expr) -> Expr:
    """Integrate (1/2) u^p k^n b0^q du in closed form per term and apply
    the overall sign flip from the resolvent evaluated at -1:

        (1/2) int_0^oo u^p (k^2 u + 1)^{-q} du
            = (1/2) k^{-2(p+1)} p! (q-p-2)! / (q-1)!

    The weight commutes with every factor of these terms, so the k-power
    produced by the integral merges into the leading block.
    """
    if e.terms and e.phase != R:
        raise TermShapeError("radial integration expects the r phase")
    items = []
    for mono, word, coeff in e.items():
        word = rotate_trailing_k(word)
        _, blocks = word_blocks(word)
        if any(p for _, p in blocks[1:]):
            raise TermShapeError(f"resolvent not all-left: {word}")
        if mono % 2:
            raise TermShapeError(f"odd radial power r^{mono}")
        p = mono // 2
        n, q = blocks[0]
        if q - p - 2 < 0:
            raise TermShapeError(
                f"divergent radial integral: u^{p} with resolvent power {q}")
        value = Fraction(math.factorial(p) * math.factorial(q - p - 2),
                         2 * math.factorial(q - 1))
        rest = word[1 if word[0][0] == "k" else 0:]
        rest = rest[1 if rest and rest[0][0] == "b0" else 0:]
        nk = n - 2 * (p + 1)
        new = ((("k", nk),) if nk else ()) + rest
        items.append((0, new, -coeff * value))
    return Expr(R, items)


# ---------------------------------------------------------------------------
# stage 6: integration by parts in r


def integrate_by_parts_r(e: Expr) -> Expr:
    """Lower the middle resolvent power from two to one.

    With d_r(b0) = -2 k^2 r b0^2 a term  C r^{2n} [k^a b0^j] x [k^c b0^2] y
    (as an r dr integrand) equals, after one integration by parts with
    vanishing boundary terms,

        (C n r^{2n-2} [k^a b0^j] - C j r^{2n} [k^{a+2} b0^{j+1}])
            x [k^{c-2} b0] y.
    """
    if e.terms and e.phase != R:
        raise TermShapeError("integration by parts expects the r phase")
    items = []
    for mono, word, coeff in e.items():
        skel, blocks = word_blocks(word)
        inner = [(i, p) for i, (_, p) in enumerate(blocks) if p and i > 0]
        if len(inner) != 1 or inner[0][1] != 2:
            raise TermShapeError(f"no single middle b0^2 factor: {word}")
        mid = inner[0][0]
        a, j = blocks[0]
        c = blocks[mid][0]
        if mono < 2 or j < 1:
            raise TermShapeError(f"boundary term would survive: {word}")
        n = mono // 2

        def rebuild(lead_k, lead_p, mid_k, mid_p):
            out = []
            if lead_k:
                out.append(("k", lead_k))
            if lead_p:
                out.append(("b0", lead_p))
            bi = 1
            for si, atom in enumerate(skel):
                out.append(atom)
                bk, bp = blocks[si + 1]
                if si + 1 == mid:
                    bk, bp = mid_k, mid_p
                if bk:
                    out.append(("k", bk))
                if bp:
                    out.append(("b0", bp))
            return tuple(out)

        items.append((mono - 2, rebuild(a, j, c - 2, 1), coeff * n))
        items.append((mono, rebuild(a + 2, j + 1, c - 2, 1), -coeff * j))
    return Expr(R, items)


# ---------------------------------------------------------------------------
# stages 7-8: modular rewriting and the resolvent-integral identity


def modular_normalize(e: Expr) -> Expr:
    """Move every k-power left of the derivative atoms using
    x k^b = k^b Delta^{b/2}(x); pure algebra, no trace needed."""

    def fix(mono, word, coeff):
        word = list(word)
        changed = True
        while changed:
            changed = False
            for pos in range(len(word) - 1):
                if word[pos][0] in ("dk", "mod") and word[pos + 1][0] == "k":
                    b = word[pos + 1][1]
                    word[pos:pos + 2] = [("k", b), wrap_mod(b, 0, word[pos])]
                    changed = True
                    break
        return [(mono, canon_word(word), coeff)]

    return e.map_terms(fix)


def apply_move_lemma(e: Expr) -> Expr:
    """Replace the u-integral of  k^{2m+2} u^m b0^{m+1} rho b0  by the
    modified logarithm Lm of the modular operator applied to rho.

    Preprocessing per term (both trace moves or pure algebra): trailing
    k-powers rotate to the front and all other k-powers collect into the
    leading block, so the term reads

        C u^m [k^A b0^{m+1}] rho [b0] rho2 .

    The surviving k-excess k^{A-2m-2} stays as the trace weight.  The
    coefficient picks up 1/2 (from r dr = du/2) and the overall sign
    flip of the resolvent evaluated at -1.
    """
    if e.terms and e.phase != R:
        raise TermShapeError("the integral identity expects the r phase")

    items = []
    for mono, word, coeff in e.items():
        word = rotate_trailing_k(word)
        [(_, w2, _)] = modular_normalize(
            Expr(R, [(mono, word, 1)])).items()
        word = w2
        if mono % 2:
            raise TermShapeError(f"odd radial power r^{mono}")
        m = mono // 2
        if not 1 <= m <= 3:
            raise TermShapeError(f"no matching integral pattern for u^{m}")
        skel, blocks = word_blocks(word)
        ok = (len(skel) == 2 and blocks[0][1] == m + 1
              and blocks[1] == (0, 1) and blocks[2] == (0, 0))
        if not ok:
            raise TermShapeError(
                f"term does not match the integral pattern: "
                f"r^{mono} {word}")
        a = blocks[0][0]
        nk = a - 2 * m - 2
        new = ((("k", nk),) if nk else ()) + (wrap_mod(0, m, skel[0]),
                                              skel[1])
        items.append((0, new, -coeff / 2))
    return Expr(R, items)


def reduce_second_derivatives(e: Expr) -> Expr:
    """Remove second tau-derivatives under the trace: since tau vanishes
    on every delta_l image, tau(k^n delta_l^2-type terms) integrates by
    parts to -tau(delta_l(k^n) . first-derivative atom)."""
    out = Expr.zero(R)
    for mono, word, coeff in e.items():
        second = [(pos, atom) for pos, atom in enumerate(word)
                  if atom[0] == "dk" and atom[1] + atom[2] >= 2]
        if not second:
            out = out + Expr(R, [(mono, word, coeff)])
            continue
        if len(word) != 2 or len(second) != 1 or word[0][0] != "k":
            raise TermShapeError(
                f"unsupported second-derivative pattern: {word}")
        (_, (_, i1, i2)) = second[0]
        l = 1 if i1 else 2
        rest = ("dk", i1 - (l == 1), i2 - (l == 2))
        lead = Expr(R, [(mono, word[:1], coeff)])
        out = out + (-delta_derivative(lead, l)) * Expr.word(
            rest, phase=R, mono=0)
    return out


# ---------------------------------------------------------------------------
# stage 9: assembly


def assemble_density(e: Expr) -> dict[tuple[int, int], Fraction]:
    """Collect the reduced terms tau(k^-2 F(Delta)(delta_j k) delta_j k)
    into the coefficient dict {(s, m): c} of
    F = sum c Delta^{s/2} Lm(Delta); the two derivative directions must
    contribute identically."""
    per_j: dict[int, dict] = {1: {}, 2: {}}
    for mono, word, coeff in e.items():
        word = rotate_trailing_k(word)
        if mono != 0 or len(word) != 3 or word[0] != ("k", -2):
            raise TermShapeError(f"not a reduced trace term: r^{mono} {word}")
        first, second = word[1], word[2]
        if second[0] != "dk" or second[1] + second[2] != 1:
            raise TermShapeError(f"not a reduced trace term: {word}")
        j = 1 if second[1] else 2
        if first[0] == "dk":
            if first != second:
                raise TermShapeError(f"mismatched directions: {word}")
            s, m = 0, 0
        elif first[0] == "mod" and first[3] == second:
            s, m = first[1], first[2]
        else:
            raise TermShapeError(f"not a reduced trace term: {word}")
        d = per_j[j]
        d[(s, m)] = d.get((s, m), Fraction(0)) + coeff
        if not d[(s, m)]:
            del d[(s, m)]
    if per_j[1] != per_j[2]:
        raise DerivationMismatch("assemble", (per_j[1], per_j[2]))
    return per_j[1]


# ---------------------------------------------------------------------------
# full pipeline with trace records


@dataclass
class Stage:
    name: str
    rule: str
    n_in: int
    n_out: int
    terms: list = field(repr=False, default_factory=list)


@dataclass
class Derivation:
    stages: list[Stage]
    density: dict
    prefactor: str = PREFACTOR

    def stage(self, name):
        return next(s for s in self.stages if s.name == name)


def derive(collect_terms: bool = True) -> Derivation:
    """Run the whole reduction; returns the stage log and the assembled
    density F with zeta(0)+1 = 2*pi*phi(F(Delta)(delta_j k) delta_j k)."""
    stages = []

    def log(name, rule, before, after):
        stages.append(Stage(
            name, rule,
            len(before) if before is not None else 0, len(after),
            expr_to_records(after) if collect_terms else []))
        return after

    b1 = compute_b1()
    log("b1", "order -3 parametrix term", None, b1)
    core = compute_b2_core()
    even = log("b2_even", "xi-even part of the order -4 term (trailing "
               "resolvent factor deferred)", core, discard_xi_odd(core))
    avg = log("angular", "angular average, 2*pi prefactor kept aside",
              even, angular_average(even))
    bumped = log("cyclic", "trailing resolvent factor as +1 on the leading "
                 "exponent (trace cyclicity)", avg, cyclic_left_b0(avg))
    split = split_resolvent_layout(bumped)
    res = log("all_left", "closed-form radial integrals, sign flip applied",
              split["all_left"],
              radial_integrate_all_left(split["all_left"]))
    combined = log("by_parts", "middle resolvent power lowered by parts in r",
                   split["middle2"],
                   integrate_by_parts_r(split["middle2"]) + split["middle1"])
    moved = log("move", "u-integrals to modified logarithms of the modular "
                "operator, sign flip applied", combined,
                apply_move_lemma(combined))
    reduced = log("reduce", "second derivatives by parts under the trace; "
                  "k-powers collected by modular rewrites", res + moved,
                  modular_normalize(reduce_second_derivatives(res)) + moved)
    density = assemble_density(reduced)
    stages.append(Stage("assemble", "collected spectral density F",
                        len(reduced), len(density),
                        [{"s": s, "m": m, "coeff": str(c)}
                         for (s, m), c in sorted(density.items())]))
    return Derivation(stages, density)
