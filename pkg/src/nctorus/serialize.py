"""Structured text form for expressions, used by fixtures and trace output.

A term serializes to one JSON record

    {"coeff": "p/q", "xi": [a, b], "word": [token, ...]}     (xi phase)
    {"coeff": "p/q", "r": p,       "word": [token, ...]}     (r phase)

with word tokens

    "k", "k^3", "k^-2"        powers of the conformal factor
    "b0", "b0^4"              resolvent powers
    "d(1,0)k", "d(0,2)k"      derivatives of k
    "L2(d(1,0)k)"             modified logarithm applied to an atom
    "L2*D^1/2(d(1,0)k)"       with an extra modular power Delta^{1/2}
    "D^-1/2(d(1,0)k)", "D(d(0,1)k)"
"""

from __future__ import annotations

import json
import re
from fractions import Fraction
from importlib import resources

from .expr import Expr, R, XI, atom_key

_K = re.compile(r"^k(?:\^(-?\d+))?$")
_B0 = re.compile(r"^b0(?:\^(\d+))?$")
_DK = re.compile(r"^d\((\d+),(\d+)\)k$")
_FUN = re.compile(r"^(?:L(\d))?\*?(?:D(?:\^(-?\d+(?:/2)?))?)?$")


def atom_to_token(atom) -> str:
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
    return "*".join(parts) + f"({atom_to_token(arg)})"


def token_to_atom(token: str):
    m = _K.match(token)
    if m:
        return ("k", int(m.group(1) or 1))
    m = _B0.match(token)
    if m:
        return ("b0", int(m.group(1) or 1))
    m = _DK.match(token)
    if m:
        return ("dk", int(m.group(1)), int(m.group(2)))
    if token.endswith(")") and "(" in token:
        head, inner = token.split("(", 1)
        m = _FUN.match(head)
        if m:
            lm = int(m.group(1) or 0)
            if "D" in head:
                s = int(2 * Fraction(m.group(2) or 1))
            else:
                s = 0
            return ("mod", s, lm, token_to_atom(inner[:-1]))
    raise ValueError(f"unrecognized word token {token!r}")


def term_to_record(phase: str, mono, word, coeff) -> dict:
    rec = {"coeff": str(Fraction(coeff))}
    if phase == XI:
        rec["xi"] = list(mono)
    else:
        rec["r"] = mono
    rec["word"] = [atom_to_token(a) for a in word]
    return rec


def record_to_item(rec: dict):
    coeff = Fraction(rec["coeff"])
    word = tuple(token_to_atom(t) for t in rec["word"])
    if "xi" in rec:
        return XI, (tuple(rec["xi"]), word, coeff)
    return R, (rec["r"], word, coeff)


def _sort_key(item):
    mono, word, _ = item
    m = mono if isinstance(mono, tuple) else (mono,)
    return (len(word), tuple(map(atom_key, word)), m)


def expr_to_records(e: Expr) -> list[dict]:
    items = sorted(e.items(), key=_sort_key)
    return [term_to_record(e.phase, m, w, c) for m, w, c in items]


def records_to_expr(records, phase: str | None = None) -> Expr:
    items = []
    for rec in records:
        ph, item = record_to_item(rec)
        if phase is None:
            phase = ph
        elif phase != ph:
            raise ValueError("mixed xi/r records in one expression")
        items.append(item)
    return Expr(phase or XI, items)


def modfun_to_records(fun: dict) -> list[dict]:
    return [{"s": s, "m": m, "coeff": str(c)}
            for (s, m), c in sorted(fun.items())]


def records_to_modfun(records) -> dict:
    return {(rec["s"], rec["m"]): Fraction(rec["coeff"]) for rec in records}


# ---------------------------------------------------------------------------
# fixture files shipped with the package


def dump_expr(e: Expr, description: str) -> dict:
    return {"description": description, "phase": e.phase,
            "terms": expr_to_records(e)}


def load_expr(doc: dict) -> Expr:
    return records_to_expr(doc["terms"], doc["phase"])


def load_fixture(name: str):
    """Load fixtures/<name>.json; term-list fixtures load as Expr, the
    spectral-density fixture as a {(s, m): Fraction} dict."""
    path = resources.files("nctorus.fixtures").joinpath(f"{name}.json")
    doc = json.loads(path.read_text())
    if "fun" in doc:
        return records_to_modfun(doc["fun"])
    return load_expr(doc)


def write_fixture(path, doc: dict):
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
