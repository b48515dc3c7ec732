"""SpectRL specifications: box-union regions, predicates, formulas, parser and
finite-prefix evaluation."""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Raised when boxes, regions or states disagree on dimension."""


class SpecSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} at line {line}, column {column}")
        self.line = line
        self.column = column


class UnknownRegionError(KeyError):
    pass


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box ``[lo_0, hi_0] x ... x [lo_{d-1}, hi_{d-1}]``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or not lo:
            raise DimensionError("box bounds must have equal, nonzero length")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box has lo > hi: {lo} {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_intervals(cls, *intervals: tuple[float, float]) -> "Box":
        return cls(tuple(a for a, _ in intervals), tuple(b for _, b in intervals))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

    @property
    def widths(self) -> np.ndarray:
        return np.array(self.hi) - np.array(self.lo)

    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionError(f"state of shape {x.shape} vs box dim {self.dim}")
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def intersect(self, other: "Box") -> "Box | None":
        if other.dim != self.dim:
            raise DimensionError("box dimension mismatch")
        lo = tuple(max(a, b) for a, b in zip(self.lo, other.lo))
        hi = tuple(min(a, b) for a, b in zip(self.hi, other.hi))
        if any(a > b for a, b in zip(lo, hi)):
            return None
        return Box(lo, hi)

    def __str__(self) -> str:
        return "x".join(f"[{_fmt(a)},{_fmt(b)}]" for a, b in zip(self.lo, self.hi))


def _fmt(v: float) -> str:
    return format(float(v), ".12g")


@dataclass(frozen=True)
class Region:
    """Finite union of closed boxes.

    Complements are taken within a bounding box and returned closed, so points
    on a shared face belong to both a region and its complement.
    """

    boxes: tuple[Box, ...]
    dim: int

    def __post_init__(self):
        boxes = tuple(self.boxes)
        if any(b.dim != self.dim for b in boxes):
            raise DimensionError("all boxes of a region must share one dimension")
        object.__setattr__(self, "boxes", boxes)

    @classmethod
    def of(cls, *boxes: Box) -> "Region":
        if not boxes:
            raise ValueError("use Region.empty(dim) for the empty region")
        return cls(tuple(boxes), boxes[0].dim)

    @classmethod
    def empty(cls, dim: int) -> "Region":
        return cls((), dim)

    @property
    def is_empty(self) -> bool:
        return not self.boxes

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.boxes:
            return np.zeros((0, self.dim)), np.zeros((0, self.dim))
        return (np.array([b.lo for b in self.boxes], dtype=float),
                np.array([b.hi for b in self.boxes], dtype=float))

    def _check(self, other: "Region"):
        if other.dim != self.dim:
            raise DimensionError(f"region dimension {other.dim} vs {self.dim}")

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionError(f"state of shape {x.shape} vs region dim {self.dim}")
        return bool(self.contains_many(x[None])[0])

    def contains_many(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != self.dim:
            raise DimensionError(f"points of shape {points.shape} vs region dim {self.dim}")
        lo, hi = self.arrays()
        return _kernels.points_in_boxes(points, lo, hi)

    def union(self, other: "Region") -> "Region":
        self._check(other)
        seen = dict.fromkeys(self.boxes + other.boxes)
        return Region(tuple(seen), self.dim)

    def intersect(self, other: "Region") -> "Region":
        self._check(other)
        out = []
        for a in self.boxes:
            for b in other.boxes:
                c = a.intersect(b)
                if c is not None:
                    out.append(c)
        return Region(tuple(dict.fromkeys(out)), self.dim)

    def complement_within(self, space: Box) -> "Region":
        """Closure of ``space`` minus this region, as disjoint-interior boxes."""
        if space.dim != self.dim:
            raise DimensionError("space dimension mismatch")
        clipped = [c for c in (b.intersect(space) for b in self.boxes) if c is not None]
        cuts = []
        for j in range(self.dim):
            pts = {space.lo[j], space.hi[j]}
            for b in clipped:
                pts.add(b.lo[j])
                pts.add(b.hi[j])
            cuts.append(sorted(pts))
        cells = []
        for idx in itertools.product(*[range(len(c) - 1) for c in cuts]):
            lo = tuple(cuts[j][i] for j, i in enumerate(idx))
            hi = tuple(cuts[j][i + 1] for j, i in enumerate(idx))
            if any(a == b for a, b in zip(lo, hi)):
                continue
            mid = [(a + b) / 2 for a, b in zip(lo, hi)]
            # each elementary cell is either inside a box or interior-disjoint from all
            if not any(all(b.lo[j] <= mid[j] <= b.hi[j] for j in range(self.dim)) for b in clipped):
                cells.append((idx, lo, hi))
        return Region(tuple(_merge_cells(cells, self.dim)), self.dim)

    def intersects(self, other: "Region", strict: bool = False) -> bool:
        """Whether the two closed regions share a point (positive volume if strict)."""
        self._check(other)
        if self.is_empty or other.is_empty:
            return False
        alo, ahi = self.arrays()
        blo, bhi = other.arrays()
        return bool(_kernels.boxes_overlap(alo, ahi, blo, bhi, strict).any())

    def issubset(self, other: "Region") -> bool:
        """Exact containment test for closed box unions."""
        self._check(other)
        for box in self.boxes:
            cuts = []
            for j in range(self.dim):
                pts = {box.lo[j], box.hi[j]}
                for b in other.boxes:
                    for v in (b.lo[j], b.hi[j]):
                        if box.lo[j] < v < box.hi[j]:
                            pts.add(v)
                pts = sorted(pts)
                reps = list(pts) + [(a + b) / 2 for a, b in zip(pts, pts[1:])]
                cuts.append(reps)
            reps = np.array(list(itertools.product(*cuts)), dtype=float)
            if not other.contains_many(reps).all():
                return False
        return True

    def bounding_box(self) -> Box:
        if self.is_empty:
            raise ValueError("empty region has no bounding box")
        lo, hi = self.arrays()
        return Box(tuple(lo.min(axis=0)), tuple(hi.max(axis=0)))

    def volume_upper(self) -> float:
        return float(sum(b.volume() for b in self.boxes))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform samples; boxes are chosen by volume (degenerate boxes equally)."""
        if self.is_empty:
            raise ValueError("cannot sample an empty region")
        vols = np.array([b.volume() for b in self.boxes])
        w = vols / vols.sum() if vols.sum() > 0 else np.full(len(vols), 1 / len(vols))
        which = rng.choice(len(self.boxes), size=n, p=w)
        lo, hi = self.arrays()
        u = rng.random((n, self.dim))
        return lo[which] + u * (hi[which] - lo[which])

    def to_json(self) -> list:
        return [[list(b.lo), list(b.hi)] for b in self.boxes]

    @classmethod
    def from_json(cls, data, dim: int) -> "Region":
        return cls(tuple(Box(tuple(lo), tuple(hi)) for lo, hi in data), dim)

    def __str__(self) -> str:
        if self.is_empty:
            return "empty"
        return " + ".join(str(b) for b in self.boxes)


def _merge_cells(cells, dim):
    """Greedily merge elementary cells along the last axis, then the others."""
    if not cells:
        return []
    boxes = [(list(lo), list(hi)) for _, lo, hi in sorted(cells)]
    for axis in reversed(range(dim)):
        boxes.sort(key=lambda b: tuple(b[0][j] for j in range(dim) if j != axis) + (b[0][axis],))
        merged = []
        for lo, hi in boxes:
            if merged:
                plo, phi = merged[-1]
                same = all(plo[j] == lo[j] and phi[j] == hi[j] for j in range(dim) if j != axis)
                if same and phi[axis] == lo[axis]:
                    phi[axis] = hi[axis]
                    continue
            merged.append((lo, hi))
        boxes = merged
    boxes.sort()
    return [Box(tuple(lo), tuple(hi)) for lo, hi in boxes]


_BOX_RE = re.compile(r"\[\s*([^,\]]+)\s*,\s*([^\]]+)\s*\]")


def parse_box(text: str) -> Box:
    """Parse ``[a,b]x[c,d]`` (the ``x`` separators are optional)."""
    parts = _BOX_RE.findall(text)
    rest = _BOX_RE.sub("", text).replace("x", "").replace("*", "").strip()
    if not parts or rest:
        raise ValueError(f"malformed box: {text!r}")
    return Box.from_intervals(*[(float(a), float(b)) for a, b in parts])


def parse_region(text: str, dim: int | None = None) -> Region:
    """Parse ``box + box + ...`` or the word ``empty``."""
    text = text.strip()
    if text == "empty":
        if dim is None:
            raise ValueError("empty region needs an explicit dimension")
        return Region.empty(dim)
    boxes = [parse_box(p) for p in text.split("+")]
    region = Region.of(*boxes)
    if dim is not None and region.dim != dim:
        raise DimensionError(f"region {text!r} has dimension {region.dim}, expected {dim}")
    return region


# ---------------------------------------------------------------------------
# Predicates
# ---------------------------------------------------------------------------

class Predicate:
    def holds_many(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def holds(self, x) -> bool:
        return bool(self.holds_many(np.asarray(x, dtype=float)[None])[0])

    def to_region(self, space: Box) -> Region:
        raise NotImplementedError

    def atoms(self) -> set[str]:
        raise NotImplementedError


@dataclass(frozen=True)
class Atom(Predicate):
    name: str
    region: Region

    def holds_many(self, points):
        return self.region.contains_many(points)

    def to_region(self, space):
        return self.region

    def atoms(self):
        return {self.name}

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class PredAnd(Predicate):
    left: Predicate
    right: Predicate

    def holds_many(self, points):
        return self.left.holds_many(points) & self.right.holds_many(points)

    def to_region(self, space):
        return self.left.to_region(space).intersect(self.right.to_region(space))

    def atoms(self):
        return self.left.atoms() | self.right.atoms()

    def __str__(self):
        return f"{_pwrap(self.left, 2)} & {_pwrap(self.right, 3)}"


@dataclass(frozen=True)
class PredOr(Predicate):
    left: Predicate
    right: Predicate

    def holds_many(self, points):
        return self.left.holds_many(points) | self.right.holds_many(points)

    def to_region(self, space):
        return self.left.to_region(space).union(self.right.to_region(space))

    def atoms(self):
        return self.left.atoms() | self.right.atoms()

    def __str__(self):
        return f"{_pwrap(self.left, 1)} | {_pwrap(self.right, 2)}"


@dataclass(frozen=True)
class PredNot(Predicate):
    arg: Predicate

    def holds_many(self, points):
        return ~self.arg.holds_many(points)

    def to_region(self, space):
        return self.arg.to_region(space).complement_within(space)

    def atoms(self):
        return self.arg.atoms()

    def __str__(self):
        return f"!{_pwrap(self.arg, 3)}"


def _pprec(p: Predicate) -> int:
    return {PredOr: 1, PredAnd: 2}.get(type(p), 3)


def _pwrap(p: Predicate, need: int) -> str:
    s = str(p)
    return f"({s})" if _pprec(p) < need else s


# ---------------------------------------------------------------------------
# Formulas
# ---------------------------------------------------------------------------

class SpectrlFormula:
    def size(self) -> int:
        raise NotImplementedError

    def depth(self) -> int:
        raise NotImplementedError

    def __str__(self):
        return to_text(self)


@dataclass(frozen=True)
class Achieve(SpectrlFormula):
    pred: Predicate

    def size(self):
        return 1

    def depth(self):
        return 1


@dataclass(frozen=True)
class Ensuring(SpectrlFormula):
    body: SpectrlFormula
    pred: Predicate

    def size(self):
        return 1 + self.body.size()

    def depth(self):
        return 1 + self.body.depth()


@dataclass(frozen=True)
class Seq(SpectrlFormula):
    first: SpectrlFormula
    second: SpectrlFormula

    def size(self):
        return 1 + self.first.size() + self.second.size()

    def depth(self):
        return 1 + max(self.first.depth(), self.second.depth())


@dataclass(frozen=True)
class Or(SpectrlFormula):
    left: SpectrlFormula
    right: SpectrlFormula

    def size(self):
        return 1 + self.left.size() + self.right.size()

    def depth(self):
        return 1 + max(self.left.depth(), self.right.depth())


_FPREC = {Or: 1, Seq: 2, Ensuring: 3, Achieve: 4}


def to_text(f: SpectrlFormula) -> str:
    """Render a formula in the concrete syntax accepted by :func:`parse_spec`."""

    def wrap(g, need):
        s = to_text(g)
        return f"({s})" if _FPREC[type(g)] < need else s

    if isinstance(f, Achieve):
        return f"achieve {_pwrap(f.pred, 3)}"
    if isinstance(f, Ensuring):
        return f"{wrap(f.body, 3)} ensuring {_pwrap(f.pred, 3)}"
    if isinstance(f, Seq):
        return f"{wrap(f.first, 2)} ; {wrap(f.second, 3)}"
    if isinstance(f, Or):
        return f"{wrap(f.left, 1)} or {wrap(f.right, 2)}"
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\s*(?:(?P<id>[A-Za-z_][A-Za-z0-9_]*)|(?P<sym>[;()&|!]))")
_SKIP_RE = re.compile(r"(?:\s|#[^\n]*)*")
_KEYWORDS = {"achieve", "ensuring", "or"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    line_starts = [0] + [m.end() for m in re.finditer("\n", text)]

    def where(p):
        ln = max(i for i, s in enumerate(line_starts) if s <= p)
        return ln + 1, p - line_starts[ln] + 1

    while True:
        m = _SKIP_RE.match(text, pos)
        pos = m.end()
        if pos >= len(text):
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise SpecSyntaxError(f"unexpected character {text[pos]!r}", *where(pos))
        start = m.start("id") if m.group("id") else m.start("sym")
        ln, col = where(start)
        if m.group("id"):
            word = m.group("id")
            toks.append(_Tok("kw" if word in _KEYWORDS else "id", word, ln, col))
        else:
            toks.append(_Tok("sym", m.group("sym"), ln, col))
        pos = m.end()
    ln, col = where(len(text))
    toks.append(_Tok("eof", "", ln, col))
    return toks


class _Parser:
    def __init__(self, text: str, regions: Mapping[str, Region]):
        self.toks = _tokenize(text)
        self.i = 0
        self.regions = regions

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def take(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def fail(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.peek()
        where = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise SpecSyntaxError(f"{msg} (found {where})", tok.line, tok.col)

    def expect(self, kind: str, text: str):
        t = self.peek()
        if t.kind != kind or t.text != text:
            self.fail(f"expected {text!r}")
        return self.take()

    def parse(self) -> SpectrlFormula:
        f = self.or_expr()
        if self.peek().kind != "eof":
            self.fail("unexpected token")
        return f

    def or_expr(self):
        f = self.seq_expr()
        while self.peek().kind == "kw" and self.peek().text == "or":
            self.take()
            f = Or(f, self.seq_expr())
        return f

    def seq_expr(self):
        f = self.ens_expr()
        while self.peek().kind == "sym" and self.peek().text == ";":
            self.take()
            f = Seq(f, self.ens_expr())
        return f

    def ens_expr(self):
        f = self.primary()
        while self.peek().kind == "kw" and self.peek().text == "ensuring":
            self.take()
            f = Ensuring(f, self.pred_unary())
        return f

    def primary(self):
        t = self.peek()
        if t.kind == "kw" and t.text == "achieve":
            self.take()
            return Achieve(self.pred_unary())
        if t.kind == "sym" and t.text == "(":
            self.take()
            f = self.or_expr()
            self.expect("sym", ")")
            return f
        self.fail("expected 'achieve' or '('")

    # predicates are operands of achieve/ensuring; binary connectives need parentheses
    def pred_unary(self) -> Predicate:
        t = self.peek()
        if t.kind == "sym" and t.text == "!":
            self.take()
            return PredNot(self.pred_unary())
        if t.kind == "sym" and t.text == "(":
            self.take()
            p = self.pred_or()
            self.expect("sym", ")")
            return p
        if t.kind == "id":
            self.take()
            if t.text not in self.regions:
                raise UnknownRegionError(f"unknown region {t.text!r} at line {t.line}, column {t.col}")
            return Atom(t.text, self.regions[t.text])
        self.fail("expected a predicate")

    def pred_or(self):
        p = self.pred_and()
        while self.peek().kind == "sym" and self.peek().text == "|":
            self.take()
            p = PredOr(p, self.pred_and())
        return p

    def pred_and(self):
        p = self.pred_unary()
        while self.peek().kind == "sym" and self.peek().text == "&":
            self.take()
            p = PredAnd(p, self.pred_unary())
        return p


def parse_spec(text: str, regions: Mapping[str, Region]) -> SpectrlFormula:
    """Parse the concrete syntax.

    Precedence from tightest: ``ensuring`` (postfix), ``;``, ``or``; both binary
    operators associate to the left. Predicates after ``achieve``/``ensuring``
    are a name, ``!p``, or a parenthesised ``&``/``|`` expression.
    """
    dims = {r.dim for r in regions.values()}
    if len(dims) > 1:
        raise DimensionError(f"regions disagree on dimension: {sorted(dims)}")
    return _Parser(text, regions).parse()


def formula_atoms(f: SpectrlFormula) -> set[str]:
    if isinstance(f, Achieve):
        return f.pred.atoms()
    if isinstance(f, Ensuring):
        return formula_atoms(f.body) | f.pred.atoms()
    if isinstance(f, Seq):
        return formula_atoms(f.first) | formula_atoms(f.second)
    return formula_atoms(f.left) | formula_atoms(f.right)


def formula_dim(f: SpectrlFormula) -> int:
    def first_atom(p):
        if isinstance(p, Atom):
            return p.region.dim
        if isinstance(p, PredNot):
            return first_atom(p.arg)
        return first_atom(p.left)

    if isinstance(f, Achieve):
        return first_atom(f.pred)
    if isinstance(f, Ensuring):
        return formula_dim(f.body)
    if isinstance(f, Seq):
        return formula_dim(f.first)
    return formula_dim(f.left)


# ---------------------------------------------------------------------------
# Semantics
# ---------------------------------------------------------------------------

def segment_table(f: SpectrlFormula, prefix: np.ndarray) -> np.ndarray:
    """Boolean table ``M[i, j]``: segment ``x_i..x_j`` satisfies ``f`` (i <= j).

    A segment satisfies ``achieve b`` when it ends in ``b``; ``ensuring p``
    additionally needs every state of the segment in ``p``; a sequence splits
    the segment at a shared state; ``or`` is disjunction.
    """
    L = prefix.shape[0]
    upper = np.triu(np.ones((L, L), dtype=bool))
    memo: dict[int, np.ndarray] = {}

    def table(g) -> np.ndarray:
        key = id(g)
        if key in memo:
            return memo[key]
        if isinstance(g, Achieve):
            m = upper & g.pred.holds_many(prefix)[None, :]
        elif isinstance(g, Ensuring):
            ok = g.pred.holds_many(prefix).astype(np.int64)
            bad = np.concatenate([[0], np.cumsum(1 - ok)])
            # all of x_i..x_j satisfy p  <=>  no failures in [i, j]
            clean = (bad[None, 1:] - bad[:-1, None]) == 0
            m = table(g.body) & clean & upper
        elif isinstance(g, Seq):
            a = table(g.first).astype(np.int64)
            b = table(g.second).astype(np.int64)
            # both tables are upper triangular, so the product ranges over i <= t <= j
            m = (a @ b) > 0
        elif isinstance(g, Or):
            m = table(g.left) | table(g.right)
        else:
            raise TypeError(f"not a formula: {g!r}")
        memo[key] = m
        return m

    return table(f)


def eval_prefix(formula: SpectrlFormula, prefix) -> bool:
    """Whether some prefix ``x_0..x_K`` of the given states satisfies ``formula``."""
    prefix = np.asarray(prefix, dtype=float)
    if prefix.ndim != 2 or prefix.shape[0] < 1:
        raise ValueError("prefix must be a nonempty (length, dim) array")
    d = formula_dim(formula)
    if prefix.shape[1] != d:
        raise DimensionError(f"states of dimension {prefix.shape[1]}, formula regions have {d}")
    return bool(segment_table(formula, prefix)[0].any())


def finitary_to_spectrl(words: Iterable[Sequence[str]], regions: Mapping[str, Region]) -> SpectrlFormula:
    """Disjunction over words of ``achieve w_1 ; ... ; achieve w_H``."""
    words = sorted({tuple(w) for w in words})
    if not words:
        raise ValueError("the word set must be nonempty")
    lengths = {len(w) for w in words}
    if len(lengths) != 1 or 0 in lengths:
        raise ValueError(f"all words must share one positive length, got {sorted(lengths)}")
    for w in words:
        for a in w:
            if a not in regions:
                raise UnknownRegionError(f"unknown atomic predicate {a!r}")

    def chain(w):
        return reduce(Seq, [Achieve(Atom(a, regions[a])) for a in w])

    return reduce(Or, [chain(w) for w in words])
