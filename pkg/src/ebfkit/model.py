"""Model specification, formula parsing, and design-matrix construction.

A model is declared with an lme4-flavoured formula::

    resp ~ fixed ("+" "(" reterms ("|" | "||") group ")")*

Fixed terms are ``1`` and column names (the intercept is always implicit
and cannot be removed).  Random terms list their design columns literally:
``(1 + x | g)`` is a correlated intercept/slope pair, ``(1 + x || g)`` the
independent version, and ``(x | g)`` a slope-only term.  Structured
unit-level terms (one level per data row) use the reserved group ``unit``
with a kind suffix: ``(1 | unit:iid)``, ``(1 | unit:car)``,
``(1 | unit:gp(x))``.

Categorical levels are ordered by first appearance in the data so that
coefficient indices are reproducible.  All containers here are immutable
after construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import DataError, FormulaError

FAMILIES = ("gaussian-identity", "bernoulli-logit", "poisson-log")
COV_KINDS = ("diagonal", "correlated", "car", "gp-se")
UNIT_GROUP = "unit"
INTERCEPT = "1"


@dataclass(frozen=True)
class Categorical:
    """Integer-coded factor; ``levels[codes[i]]`` is row i's label."""

    codes: np.ndarray
    levels: tuple[str, ...]

    def __post_init__(self):
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= len(self.levels)):
            raise DataError("categorical codes out of range")

    @classmethod
    def from_labels(cls, labels):
        seen: dict[str, int] = {}
        codes = np.empty(len(labels), dtype=np.int64)
        for i, lab in enumerate(labels):
            lab = str(lab)
            if lab not in seen:
                seen[lab] = len(seen)
            codes[i] = seen[lab]
        return cls(codes=codes, levels=tuple(seen))

    def __len__(self):
        return len(self.codes)

    def __eq__(self, other):
        return (
            isinstance(other, Categorical)
            and self.levels == other.levels
            and np.array_equal(self.codes, other.codes)
        )


@dataclass(frozen=True)
class Dataset:
    """Columnar data: numeric float arrays or :class:`Categorical` factors."""

    columns: dict
    n_rows: int

    @classmethod
    def from_dict(cls, cols):
        out = {}
        n = None
        for name, values in cols.items():
            if isinstance(values, Categorical):
                col = values
            else:
                arr = np.asarray(values)
                if arr.dtype.kind in "iufb":
                    col = np.asarray(arr, dtype=float)
                else:
                    col = Categorical.from_labels(list(arr))
            m = len(col) if isinstance(col, Categorical) else col.shape[0]
            if n is None:
                n = m
            elif m != n:
                raise DataError(f"column {name!r} has {m} rows, expected {n}")
            out[name] = col
        if not out or n is None or n < 1:
            raise DataError("dataset needs at least one column and one row")
        return cls(columns=out, n_rows=n)

    def numeric(self, name):
        col = self._get(name)
        if isinstance(col, Categorical):
            raise DataError(f"column {name!r} is categorical, expected numeric")
        return col

    def categorical(self, name):
        col = self._get(name)
        if not isinstance(col, Categorical):
            raise DataError(f"column {name!r} is numeric, expected categorical (grouping)")
        return col

    def _get(self, name):
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def subset(self, rows):
        """Row subset; categorical levels are re-derived by first appearance."""
        rows = np.asarray(rows)
        cols = {}
        for name, col in self.columns.items():
            if isinstance(col, Categorical):
                labels = [col.levels[c] for c in col.codes[rows]]
                cols[name] = Categorical.from_labels(labels)
            else:
                cols[name] = col[rows]
        return Dataset.from_dict(cols)


def read_csv(path):
    """Load a CSV (header mandatory, UTF-8, comma-delimited) into a Dataset.

    Columns are auto-typed: numeric when every cell parses as a float,
    categorical otherwise.  Rows with missing (empty) cells are rejected.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row is mandatory") from None
        raw = {name: [] for name in header}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            for name, cell in zip(header, row):
                if cell.strip() == "":
                    raise DataError(f"{path}:{lineno}: missing value in column {name!r}")
                raw[name].append(cell.strip())
    cols = {}
    for name, cells in raw.items():
        try:
            cols[name] = np.array([float(c) for c in cells])
        except ValueError:
            cols[name] = Categorical.from_labels(cells)
    return Dataset.from_dict(cols)


@dataclass(frozen=True)
class RandomTerm:
    label: str
    group: str                      # column name, or "unit" for car/gp/unit-iid
    design_columns: tuple[str, ...]
    cov_kind: str                   # diagonal | correlated | car | gp-se
    cov_meta: str | None = None     # gp input column; None otherwise

    def __post_init__(self):
        if self.cov_kind not in COV_KINDS:
            raise FormulaError(f"unknown covariance kind {self.cov_kind!r}")
        if self.cov_kind == "correlated" and len(self.design_columns) < 2:
            raise FormulaError("correlated random term needs >= 2 design columns")
        if self.cov_kind in ("car", "gp-se"):
            if self.group != UNIT_GROUP or self.design_columns != (INTERCEPT,):
                raise FormulaError(f"{self.cov_kind} terms require exactly (1 | unit:...)")


@dataclass(frozen=True)
class ModelSpec:
    response: str
    family: str = "gaussian-identity"
    offset: str | None = None
    fixed_terms: tuple[str, ...] = ()
    random_terms: tuple[RandomTerm, ...] = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        labels = [t.label for t in self.random_terms]
        if len(set(labels)) != len(labels):
            raise FormulaError(f"duplicate random-term labels: {sorted(labels)}")

    def with_family(self, family, offset=None):
        return replace(self, family=family, offset=offset)

    def render(self) -> str:
        """Canonical formula text; ``parse_formula(spec.render()) == spec``."""
        parts = [INTERCEPT, *self.fixed_terms] if self.fixed_terms else [INTERCEPT]
        for t in self.random_terms:
            bar = "||" if (t.cov_kind == "diagonal" and len(t.design_columns) > 1) else "|"
            parts.append(f"({' + '.join(t.design_columns)} {bar} {t.label})")
        return f"{self.response} ~ {' + '.join(parts)}"


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<op>\|\||[~+():|])|(?P<num>1)(?![\w.])|(?P<ident>[A-Za-z_][\w.]*)|(?P<bad>\S))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            break
        if m.group("bad") is not None:
            raise FormulaError(f"unknown token {m.group('bad')!r}", offset=m.start("bad"))
        kind = "op" if m.group("op") else ("num" if m.group("num") else "ident")
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind=None, value=None):
        tok = self.tokens[self.i]
        if kind is not None and tok[0] != kind or value is not None and tok[1] != value:
            expected = value if value is not None else kind
            raise FormulaError(f"expected {expected!r}, found {tok[1] or 'end of input'!r}", offset=tok[2])
        self.i += 1
        return tok

    def parse(self):
        response = self.take("ident")[1]
        self.take("op", "~")
        fixed: list[str] = []
        random: list[RandomTerm] = []
        while True:
            tok = self.peek()
            if tok[:2] == ("op", "("):
                random.append(self._random_term())
            elif tok[0] == "num":
                self.take()  # literal 1: the intercept is implicit anyway
            elif tok[0] == "ident":
                name = self.take()[1]
                if name not in fixed:
                    fixed.append(name)
            else:
                raise FormulaError(f"expected a term, found {tok[1] or 'end of input'!r}", offset=tok[2])
            if self.peek()[:2] == ("op", "+"):
                self.take()
                continue
            break
        self.take("eof")
        return ModelSpec(
            response=response, fixed_terms=tuple(fixed), random_terms=tuple(random)
        )

    def _random_term(self):
        open_tok = self.take("op", "(")
        cols: list[str] = []
        while True:
            tok = self.peek()
            if tok[0] == "num":
                self.take()
                if INTERCEPT not in cols:
                    cols.append(INTERCEPT)
            elif tok[0] == "ident":
                name = self.take()[1]
                if name not in cols:
                    cols.append(name)
            else:
                break
            if self.peek()[:2] == ("op", "+"):
                self.take()
                continue
            break
        if not cols:
            raise FormulaError("empty random term", offset=open_tok[2])
        bar = self.take("op")
        if bar[1] not in ("|", "||"):
            raise FormulaError(f"expected '|' or '||', found {bar[1]!r}", offset=bar[2])
        group = self.take("ident")[1]
        kind_suffix = None
        gp_input = None
        if self.peek()[:2] == ("op", ":"):
            colon = self.take()
            if group != UNIT_GROUP:
                raise FormulaError("':kind' suffix is only valid on the 'unit' group", offset=colon[2])
            kind_tok = self.take("ident")
            kind_suffix = kind_tok[1]
            if kind_suffix == "gp":
                self.take("op", "(")
                gp_input = self.take("ident")[1]
                self.take("op", ")")
            elif kind_suffix not in ("iid", "car"):
                raise FormulaError(f"unknown unit kind {kind_suffix!r}", offset=kind_tok[2])
        self.take("op", ")")

        if group == UNIT_GROUP:
            kind_suffix = kind_suffix or "iid"
            if kind_suffix == "iid":
                label, kind, meta = f"{UNIT_GROUP}:iid", "diagonal", None
            elif kind_suffix == "car":
                label, kind, meta = f"{UNIT_GROUP}:car", "car", None
            else:
                label, kind, meta = f"{UNIT_GROUP}:gp({gp_input})", "gp-se", gp_input
            if kind != "diagonal" and tuple(cols) != (INTERCEPT,):
                raise FormulaError(f"{kind} terms allow only an intercept column", offset=open_tok[2])
        else:
            label = group
            kind = "correlated" if (bar[1] == "|" and len(cols) >= 2) else "diagonal"
            meta = None
        return RandomTerm(
            label=label, group=group, design_columns=tuple(cols), cov_kind=kind, cov_meta=meta
        )


def parse_formula(text: str) -> ModelSpec:
    """Parse a model formula; raises :class:`FormulaError` with a byte offset."""
    return _Parser(text).parse()


@dataclass(frozen=True)
class TermInfo:
    """Everything downstream code needs to know about one random term."""

    label: str
    kind: str
    design_columns: tuple[str, ...]
    n_levels: int
    levels: tuple[str, ...]
    offset: int                       # start of this term in the stacked theta
    adjacency: object = None          # covstruct.Adjacency, attached at fit time
    gp_inputs: np.ndarray | None = None

    @property
    def n_coefs(self):
        return self.n_levels * len(self.design_columns)

    @property
    def indices(self):
        return np.arange(self.offset, self.offset + self.n_coefs)

    def column_indices(self, col):
        """Stacked indices of one design column (coefficients are level-major)."""
        if col not in self.design_columns:
            raise DataError(f"term {self.label!r} has no design column {col!r}")
        c = self.design_columns.index(col)
        d = len(self.design_columns)
        return self.offset + c + d * np.arange(self.n_levels)

    def coef_names(self):
        return [
            f"{self.label}[{lvl}]:{col}"
            for lvl in self.levels
            for col in self.design_columns
        ]


@dataclass(frozen=True)
class DesignMatrices:
    X: np.ndarray
    fixed_names: tuple[str, ...]
    Z_blocks: tuple
    terms: tuple[TermInfo, ...]
    y: np.ndarray
    offset: np.ndarray | None

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return sum(t.n_coefs for t in self.terms)

    @property
    def Z(self):
        if not self.Z_blocks:
            return sp.csr_matrix((self.n, 0))
        return sp.hstack(self.Z_blocks, format="csr")

    def term(self, label):
        for t in self.terms:
            if t.label == label:
                return t
        raise DataError(f"unknown random term {label!r}")

    @property
    def block_offsets(self):
        return {t.label: (t.offset, t.offset + t.n_coefs) for t in self.terms}


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise DataError(f"column {name!r} contains non-finite values")


def build_design(spec: ModelSpec, data: Dataset) -> DesignMatrices:
    """Construct the fixed design X and one sparse Z block per random term.

    Coefficients within a term are level-major: level 0's columns first.
    Deterministic: identical inputs give bit-identical matrices.
    """
    y = data.numeric(spec.response)
    _check_finite(spec.response, y)
    n = data.n_rows

    cols = [np.ones(n)]
    for name in spec.fixed_terms:
        v = data.numeric(name)
        _check_finite(name, v)
        cols.append(v)
    X = np.column_stack(cols)
    fixed_names = ("(Intercept)", *spec.fixed_terms)

    offset_col = None
    if spec.offset is not None:
        offset_col = data.numeric(spec.offset)
        _check_finite(spec.offset, offset_col)

    blocks = []
    infos = []
    start = 0
    for t in spec.random_terms:
        if t.group == UNIT_GROUP:
            codes = np.arange(n, dtype=np.int64)
            levels = tuple(str(i) for i in range(n))
        else:
            cat = data.categorical(t.group)
            codes = cat.codes
            levels = cat.levels
            counts = np.bincount(codes, minlength=len(levels))
            if (counts == 0).any():
                empty = [levels[i] for i in np.flatnonzero(counts == 0)]
                raise DataError(f"group {t.group!r} has zero observations for levels {empty}")
        J = len(levels)
        d = len(t.design_columns)
        rows = np.repeat(np.arange(n), d)
        Zcols = np.empty(n * d, dtype=np.int64)
        vals = np.empty(n * d)
        for c, colname in enumerate(t.design_columns):
            if colname == INTERCEPT:
                v = np.ones(n)
            else:
                v = data.numeric(colname)
                _check_finite(colname, v)
            Zcols[c::d] = codes * d + c
            vals[c::d] = v
        block = sp.csr_matrix((vals, (rows, Zcols)), shape=(n, J * d))
        gp_inputs = None
        if t.cov_kind == "gp-se":
            gp_inputs = np.asarray(data.numeric(t.cov_meta), dtype=float)
            _check_finite(t.cov_meta, gp_inputs)
        infos.append(
            TermInfo(
                label=t.label,
                kind=t.cov_kind,
                design_columns=t.design_columns,
                n_levels=J,
                levels=levels,
                offset=start,
                gp_inputs=gp_inputs,
            )
        )
        blocks.append(block)
        start += J * d
    return DesignMatrices(
        X=X,
        fixed_names=fixed_names,
        Z_blocks=tuple(blocks),
        terms=tuple(infos),
        y=y,
        offset=offset_col,
    )


@dataclass(frozen=True)
class ValidationReport:
    term_summaries: tuple
    issues: tuple
    family_compatible: bool

    def __str__(self):
        lines = []
        for s in self.term_summaries:
            lines.append(
                f"term {s['label']}: {s['n_levels']} levels, "
                f"obs per level {s['min_obs']}..{s['max_obs']}"
            )
        lines.append(f"family compatible: {self.family_compatible}")
        lines.extend(f"note: {msg}" for msg in self.issues)
        return "\n".join(lines)


def validate(spec: ModelSpec, data: Dataset) -> ValidationReport:
    """Report-only diagnostics: level counts and family/response compatibility."""
    issues = []
    summaries = []
    for t in spec.random_terms:
        if t.group == UNIT_GROUP:
            summaries.append(
                {"label": t.label, "n_levels": data.n_rows, "min_obs": 1, "max_obs": 1}
            )
            continue
        try:
            cat = data.categorical(t.group)
        except DataError as exc:
            issues.append(str(exc))
            continue
        counts = np.bincount(cat.codes, minlength=len(cat.levels))
        summaries.append(
            {
                "label": t.label,
                "n_levels": len(cat.levels),
                "min_obs": int(counts.min()),
                "max_obs": int(counts.max()),
            }
        )
    compatible = True
    try:
        y = data.numeric(spec.response)
    except DataError as exc:
        issues.append(str(exc))
        y = None
        compatible = False
    if y is not None:
        if spec.family == "bernoulli-logit" and not np.isin(y, (0.0, 1.0)).all():
            issues.append("bernoulli response must be 0/1")
            compatible = False
        if spec.family == "poisson-log" and (
            (y < 0).any() or not np.allclose(y, np.round(y))
        ):
            issues.append("poisson response must be nonnegative integers")
            compatible = False
    if spec.offset is not None:
        try:
            off = data.numeric(spec.offset)
            if (off == 0.0).any():
                issues.append(
                    f"offset column {spec.offset!r} contains exact zeros; if this is a raw "
                    "exposure, take logs first (log of zero exposure is undefined)"
                )
        except DataError as exc:
            issues.append(str(exc))
            compatible = False
    return ValidationReport(
        term_summaries=tuple(summaries), issues=tuple(issues), family_compatible=compatible
    )
