"""Sample data model and CSV ingestion.

A :class:`SurveySample` holds what the analyst observes for the drawn
sample: inclusion probabilities, item values with gaps, and unit response
flags. Item-response indicators are derived from it, never stored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MIN_ITEMS = 3


class SchemaError(ValueError):
    """Input columns do not match the declared schema."""


class ParseError(ValueError):
    """A CSV row could not be parsed."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class ValidationError(ValueError):
    """Sample fails one of its invariants."""


@dataclass(frozen=True)
class SurveySample:
    """Observed sample. ``y`` uses NaN for missing item values."""

    unit_id: np.ndarray
    pi: np.ndarray
    y: np.ndarray
    unit_respondent: np.ndarray
    N: int
    item_names: tuple = ()

    def __post_init__(self):
        unit_id = np.asarray(self.unit_id)
        pi = np.asarray(self.pi, dtype=float)
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        resp = np.asarray(self.unit_respondent, dtype=bool)
        n = unit_id.shape[0]
        if pi.shape != (n,) or resp.shape != (n,) or y.shape[0] != n:
            raise ValidationError("unit_id, pi, y and unit_respondent disagree on n")
        if np.any(~np.isfinite(pi)) or np.any(pi <= 0) or np.any(pi > 1):
            bad = int(np.flatnonzero(~((pi > 0) & (pi <= 1)))[0])
            raise ValidationError(f"pi outside (0, 1] for unit {unit_id[bad]}")
        if len(np.unique(unit_id)) != n:
            raise ValidationError("duplicate unit ids")
        if int(self.N) < n:
            raise ValidationError(f"N={self.N} smaller than n={n}")
        nonresp_with_data = ~resp & np.any(~np.isnan(y), axis=1)
        if np.any(nonresp_with_data):
            k = int(np.flatnonzero(nonresp_with_data)[0])
            raise ValidationError(f"unit nonrespondent {unit_id[k]} has item values")
        names = tuple(self.item_names) or tuple(f"y{l + 1}" for l in range(y.shape[1]))
        if len(names) != y.shape[1]:
            raise ValidationError("item_names length differs from item count")
        for name, val in (("unit_id", unit_id), ("pi", pi), ("y", y),
                          ("unit_respondent", resp), ("item_names", names)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "N", int(self.N))
        for arr in (unit_id, pi, y, resp):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.unit_id.shape[0]

    @property
    def m(self) -> int:
        return self.y.shape[1]

    def partition(self) -> "RespondentPartition":
        observed = ~np.isnan(self.y)
        r = frozenset(self.unit_id[self.unit_respondent].tolist())
        r_bar = frozenset(self.unit_id[~self.unit_respondent].tolist())
        r_items = tuple(
            frozenset(self.unit_id[self.unit_respondent & observed[:, l]].tolist())
            for l in range(self.m)
        )
        return RespondentPartition(r=r, r_bar=r_bar, r_items=r_items)


@dataclass(frozen=True)
class ItemResponseMatrix:
    """Binary item-response indicators, one row per unit."""

    x: np.ndarray
    unit_id: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x))
        if not np.all((x == 0) | (x == 1)):
            raise ValidationError("indicator matrix must be binary")
        if x.shape[1] < MIN_ITEMS:
            raise SchemaError(f"need at least {MIN_ITEMS} items, got {x.shape[1]}")
        x = x.astype(np.int8)
        ids = np.arange(x.shape[0]) if self.unit_id is None else np.asarray(self.unit_id)
        if ids.shape != (x.shape[0],):
            raise ValidationError("unit_id length differs from row count")
        x.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "unit_id", ids)

    @property
    def n_units(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1]

    def subset(self, mask) -> "ItemResponseMatrix":
        mask = np.asarray(mask)
        return ItemResponseMatrix(self.x[mask], self.unit_id[mask])


@dataclass(frozen=True)
class RespondentPartition:
    r: frozenset
    r_bar: frozenset
    r_items: tuple


def derive_indicators(sample: SurveySample) -> ItemResponseMatrix:
    """x_kl = 1 iff unit k reported a value for item l."""
    x = (~np.isnan(sample.y)).astype(np.int8)
    return ItemResponseMatrix(x, sample.unit_id)


def raw_scores(matrix: ItemResponseMatrix) -> np.ndarray:
    """Number of items answered by each unit."""
    return matrix.x.sum(axis=1).astype(int)


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(row, f"column {column!r}: cannot parse {text!r}") from None


def load_survey_csv(
    path,
    items: Sequence[str],
    N: Optional[int] = None,
    id_column: str = "unit_id",
    pi_column: str = "pi",
    respondent_column: Optional[str] = None,
    missing: Sequence[str] = ("", "NA"),
) -> SurveySample:
    """Read a survey file into a validated :class:`SurveySample`.

    Missing cells match any string in ``missing`` (after stripping). If the
    file has no ``pi_column``, SRSWOR is assumed and pi = n/N, which needs
    ``N``. Without ``respondent_column`` a unit counts as a respondent when
    it answered at least one item.
    """
    items = list(items)
    if len(items) < MIN_ITEMS:
        raise SchemaError(f"need at least {MIN_ITEMS} item columns, got {len(items)}")
    missing = {s.strip() for s in missing}
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        absent = [c for c in [id_column, *items] if c not in header]
        if respondent_column is not None and respondent_column not in header:
            absent.append(respondent_column)
        if absent:
            raise SchemaError(f"{path}: missing columns {absent}")
        col = {name: i for i, name in enumerate(header)}
        has_pi = pi_column in col

        ids, pis, ys, flags = [], [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(rowno, f"expected {len(header)} fields, got {len(row)}")
            cells = [c.strip() for c in row]
            ident = cells[col[id_column]]
            try:
                ids.append(int(ident))
            except ValueError:
                raise ParseError(rowno, f"unit_id {ident!r} is not an integer") from None
            if has_pi:
                pis.append(_parse_float(cells[col[pi_column]], rowno, pi_column))
            ys.append([
                np.nan if cells[col[c]] in missing else _parse_float(cells[col[c]], rowno, c)
                for c in items
            ])
            if respondent_column is not None:
                flag = cells[col[respondent_column]].lower()
                if flag not in {"0", "1", "true", "false"}:
                    raise ParseError(rowno, f"respondent flag {flag!r} not boolean")
                flags.append(flag in {"1", "true"})

    n = len(ids)
    y = np.array(ys, dtype=float).reshape(n, len(items))
    if has_pi:
        pi = np.array(pis)
        if N is None:
            N = int(round(np.sum(1.0 / pi)))
    else:
        if N is None:
            raise SchemaError("no pi column; population size N is required")
        pi = np.full(n, n / N)
    resp = np.array(flags, dtype=bool) if flags else np.any(~np.isnan(y), axis=1)
    return SurveySample(np.array(ids), pi, y, resp, N, tuple(items))
