"""Parsing of prepared lot transaction records and owner categorization.

The input is a flat transactions CSV (one row per sale). Rows are grouped
into per-lot histories, each lot's owner as of a given year is classified
into one of the behavioral categories, and yearly category counts plus
permit tallies are derived for the estimation stage.

Permit years missing from the records fall back to the year before the
house was built.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import statistics
import warnings
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from lotflow.core import OwnerCategory, StateVector

#: Required transactions.csv columns, in documented order.
CSV_COLUMNS = (
    "lot_id",
    "date",
    "price",
    "buyer_id",
    "buyer_is_contractor",
    "instrument",
    "adjacent_to_owner_residence",
    "owner_lot_count",
    "permit_year",
    "built_year",
)

#: Default cutoff for "turns over lots quickly": median holding years.
DEFAULT_FLIPPER_HOLDING_YEARS = 2.0

#: A sale within this many years of the build year marks the seller as a
#: builder (spec home sold around completion).
BUILDER_SALE_WINDOW_YEARS = 1


class ParseError(ValueError):
    """Malformed transactions input; carries the offending row numbers."""

    def __init__(self, message: str, rows: list[int] | None = None):
        self.rows = rows or []
        if self.rows:
            message = f"{message} (row{'s' if len(self.rows) > 1 else ''} {', '.join(map(str, self.rows))})"
        super().__init__(message)


class CategorizationError(ValueError):
    """The lot cannot be categorized for the requested year."""


@dataclass(frozen=True)
class TransactionRecord:
    """One recorded sale of a lot.

    The buyer-evidence fields (contractor flag, adjacency, lot count)
    describe the buyer at purchase time and drive categorization of the
    ownership stint this transaction opens.
    """

    lot_id: str
    date: dt.date
    buyer_id: str
    buyer_is_contractor: bool
    instrument: str = ""
    price: float | None = None
    adjacent_to_owner_residence: bool = False
    owner_lot_count: int = 1


@dataclass(frozen=True)
class LotHistory:
    """Chronology of one lot: its sales and its permit/build facts."""

    lot_id: str
    transactions: tuple[TransactionRecord, ...]
    permit_year: int | None = None
    built_year: int | None = None
    adjacent_to_owner_residence: bool = False
    owner_lot_count: int = 1

    def __post_init__(self) -> None:
        if not self.lot_id:
            raise ValueError("lot_id must be non-empty")
        if not self.transactions:
            raise ValueError(f"lot {self.lot_id}: transactions must be non-empty")
        dates = [t.date for t in self.transactions]
        if dates != sorted(dates):
            raise ValueError(f"lot {self.lot_id}: transactions out of date order")
        if (
            self.permit_year is not None
            and self.built_year is not None
            and self.permit_year > self.built_year
        ):
            raise ValueError(
                f"lot {self.lot_id}: permit_year {self.permit_year} after built_year {self.built_year}"
            )

    @property
    def effective_permit_year(self) -> int | None:
        """Recorded permit year, else the year before the build year."""
        if self.permit_year is not None:
            return self.permit_year
        if self.built_year is not None:
            return self.built_year - 1
        return None

    def first_owned_year(self) -> int:
        return self.transactions[0].date.year

    def owner_index_asof(self, year: int) -> int | None:
        """Index of the transaction whose buyer owns the lot in `year`."""
        idx = None
        for i, t in enumerate(self.transactions):
            if t.date.year <= year:
                idx = i
        return idx


@dataclass(frozen=True, eq=False)
class AnnualObservation:
    """Category counts, permit activity and the custom-home share for one year."""

    year: int
    category_counts: StateVector
    permits_issued: float
    custom_ratio: float | None = None
    residual: float = 0.0


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no", ""):
        return False
    raise ValueError(f"not a boolean flag: {raw!r}")


def _parse_optional_int(raw: str) -> int | None:
    v = raw.strip()
    return int(v) if v else None


def _open_source(source: str | Path | IO[str] | bytes) -> Iterator[str]:
    if isinstance(source, bytes):
        yield from io.StringIO(source.decode("utf-8"))
    elif isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as handle:
            yield from handle
    else:
        yield from source


def parse_transactions(source: str | Path | IO[str] | bytes) -> list[LotHistory]:
    """Read a transactions CSV into per-lot histories.

    Lines starting with '#' are provenance comments and are skipped.
    Transactions are sorted by date within each lot (file order breaks
    ties). Rows with unparseable dates abort the parse with their row
    numbers; duplicate (lot_id, date, buyer_id) rows warn and keep the
    first occurrence. Lot-level permit/built years take the last
    non-empty value in file order.
    """
    numbered_rows: list[tuple[int, list[str]]] = []
    header: list[str] | None = None
    for line_no, line in enumerate(_open_source(source), start=1):
        if line.startswith("#") or not line.strip():
            continue
        row = next(csv.reader([line]))
        if header is None:
            header = [h.strip() for h in row]
        else:
            numbered_rows.append((line_no, row))
    if header is None:
        raise ParseError("missing header")
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"malformed header: missing column(s) {', '.join(missing)}")
    col = {name: header.index(name) for name in CSV_COLUMNS}

    bad_date_rows: list[int] = []
    parsed: list[tuple[int, dict]] = []
    for line_no, row in numbered_rows:
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        try:
            date = dt.date.fromisoformat(row[col["date"]].strip())
        except ValueError:
            bad_date_rows.append(line_no)
            continue
        try:
            fields = {
                "lot_id": row[col["lot_id"]].strip(),
                "date": date,
                "price": float(row[col["price"]]) if row[col["price"]].strip() else None,
                "buyer_id": row[col["buyer_id"]].strip(),
                "buyer_is_contractor": _parse_bool(row[col["buyer_is_contractor"]]),
                "instrument": row[col["instrument"]].strip(),
                "adjacent_to_owner_residence": _parse_bool(row[col["adjacent_to_owner_residence"]]),
                "owner_lot_count": int(row[col["owner_lot_count"]] or 1),
                "permit_year": _parse_optional_int(row[col["permit_year"]]),
                "built_year": _parse_optional_int(row[col["built_year"]]),
            }
        except ValueError as exc:
            raise ParseError(f"unparseable field: {exc}", rows=[line_no]) from exc
        if not fields["lot_id"]:
            raise ParseError("empty lot_id", rows=[line_no])
        parsed.append((line_no, fields))
    if bad_date_rows:
        raise ParseError("unparseable date(s)", rows=bad_date_rows)

    by_lot: dict[str, list[tuple[int, dict]]] = {}
    for line_no, fields in parsed:
        by_lot.setdefault(fields["lot_id"], []).append((line_no, fields))

    lots: list[LotHistory] = []
    for lot_id, rows in by_lot.items():
        seen: set[tuple] = set()
        kept: list[tuple[int, dict]] = []
        for line_no, fields in rows:
            key = (fields["date"], fields["buyer_id"])
            if key in seen:
                warnings.warn(
                    f"lot {lot_id}: duplicate transaction on {fields['date']} "
                    f"by {fields['buyer_id']} at row {line_no}; keeping first",
                    stacklevel=2,
                )
                continue
            seen.add(key)
            kept.append((line_no, fields))
        kept.sort(key=lambda pair: (pair[1]["date"], pair[0]))
        permit_year = None
        built_year = None
        for _, fields in kept:
            if fields["permit_year"] is not None:
                permit_year = fields["permit_year"]
            if fields["built_year"] is not None:
                built_year = fields["built_year"]
        transactions = tuple(
            TransactionRecord(
                lot_id=lot_id,
                date=f["date"],
                buyer_id=f["buyer_id"],
                buyer_is_contractor=f["buyer_is_contractor"],
                instrument=f["instrument"],
                price=f["price"],
                adjacent_to_owner_residence=f["adjacent_to_owner_residence"],
                owner_lot_count=f["owner_lot_count"],
            )
            for _, f in kept
        )
        last = transactions[-1]
        lots.append(
            LotHistory(
                lot_id=lot_id,
                transactions=transactions,
                permit_year=permit_year,
                built_year=built_year,
                adjacent_to_owner_residence=last.adjacent_to_owner_residence,
                owner_lot_count=last.owner_lot_count,
            )
        )
    return lots


class OwnerSalesIndex:
    """Completed holding spells per buyer, across every lot in a dataset.

    A spell is opened by a purchase and closed by the next sale of the
    same lot; permitting does not close a spell. Median holding time of
    the sales completed by a given year is the flipper-rule evidence.
    """

    def __init__(self, lots: Iterable[LotHistory]):
        self._sales: dict[str, list[tuple[int, int]]] = {}
        for lot in lots:
            txs = lot.transactions
            for i in range(len(txs) - 1):
                sale_year = txs[i + 1].date.year
                self._sales.setdefault(txs[i].buyer_id, []).append(
                    (sale_year, sale_year - txs[i].date.year)
                )
        for sales in self._sales.values():
            sales.sort()

    def median_holding_years(self, buyer_id: str, as_of_year: int | None = None) -> float | None:
        """Median holding of sales completed by `as_of_year` (None for all)."""
        sales = self._sales.get(buyer_id)
        if not sales:
            return None
        if as_of_year is None:
            spells = [h for _, h in sales]
        else:
            spells = [h for y, h in sales if y <= as_of_year]
        if not spells:
            return None
        return float(statistics.median(spells))


def _stint_category(
    lot: LotHistory,
    tx_index: int,
    sales_index: OwnerSalesIndex | None,
    flipper_holding_years: float,
    as_of_year: int | None = None,
) -> OwnerCategory:
    """Category of the owner who bought at transactions[tx_index]."""
    tx = lot.transactions[tx_index]
    if tx.buyer_is_contractor:
        return OwnerCategory.BUILDERS
    if lot.built_year is not None and tx_index + 1 < len(lot.transactions):
        sale_year = lot.transactions[tx_index + 1].date.year
        if abs(sale_year - lot.built_year) <= BUILDER_SALE_WINDOW_YEARS:
            return OwnerCategory.BUILDERS
    if tx.adjacent_to_owner_residence:
        return OwnerCategory.ADJACENTS
    if tx.owner_lot_count >= 2:
        median = None
        if sales_index is not None:
            median = sales_index.median_holding_years(tx.buyer_id, as_of_year)
        # No completed sales on record leaves quick turnover unrebutted.
        if median is None or median <= flipper_holding_years:
            return OwnerCategory.FLIPPERS
    return OwnerCategory.PROSPECTS


def categorize(
    lot: LotHistory,
    as_of_year: int,
    sales_index: OwnerSalesIndex | None = None,
    flipper_holding_years: float = DEFAULT_FLIPPER_HOLDING_YEARS,
) -> OwnerCategory:
    """Behavioral category of the lot's owner in `as_of_year`.

    Rules, in priority order: contractor-flagged buyer (or a sale of the
    house within a year of completion) is a Builder; a declared
    neighboring-lot owner is an Adjacent; a multi-lot owner whose recorded
    sales turn over at or under the holding threshold is a Flipper;
    everyone else is a Prospect. The lot must be owned and unpermitted as
    of the year.
    """
    epy = lot.effective_permit_year
    if epy is not None and epy <= as_of_year:
        raise CategorizationError(
            f"lot {lot.lot_id} already permitted in {epy}, cannot categorize for {as_of_year}"
        )
    idx = lot.owner_index_asof(as_of_year)
    if idx is None:
        raise CategorizationError(
            f"lot {lot.lot_id} has no owner as of {as_of_year} "
            f"(first transaction {lot.first_owned_year()})"
        )
    return _stint_category(lot, idx, sales_index, flipper_holding_years, as_of_year)


def permit_holder_category(
    lot: LotHistory,
    sales_index: OwnerSalesIndex | None = None,
    flipper_holding_years: float = DEFAULT_FLIPPER_HOLDING_YEARS,
) -> OwnerCategory | None:
    """Category of the owner who held the lot when it was permitted."""
    epy = lot.effective_permit_year
    if epy is None:
        return None
    idx = lot.owner_index_asof(epy)
    if idx is None:
        idx = 0
    return _stint_category(lot, idx, sales_index, flipper_holding_years, epy)


def custom_spec_ratio(
    lots: list[LotHistory],
    year: int,
    sales_index: OwnerSalesIndex | None = None,
    flipper_holding_years: float = DEFAULT_FLIPPER_HOLDING_YEARS,
) -> float | None:
    """Share of houses completed in `year` built under a prospect's permit.

    Prospect-held permits are custom builds; builder-held permits are
    spec builds. Returns None when nothing was completed that year.
    """
    if sales_index is None:
        sales_index = OwnerSalesIndex(lots)
    total = 0
    custom = 0
    for lot in lots:
        if lot.built_year != year:
            continue
        holder = permit_holder_category(lot, sales_index, flipper_holding_years)
        if holder is None:
            continue
        total += 1
        if holder is OwnerCategory.PROSPECTS:
            custom += 1
    if total == 0:
        return None
    return custom / total


def _category_asof(
    lot: LotHistory,
    start_years: list[int],
    year: int,
    sales_index: OwnerSalesIndex,
    flipper_holding_years: float,
) -> OwnerCategory | None:
    epy = lot.effective_permit_year
    if epy is not None and epy <= year:
        return OwnerCategory.PERMITS
    idx = bisect_right(start_years, year) - 1
    if idx < 0:
        return None
    return _stint_category(lot, idx, sales_index, flipper_holding_years, year)


def annual_observations(
    lots: list[LotHistory],
    first_year: int,
    last_year: int,
    platted: int,
    flipper_holding_years: float = DEFAULT_FLIPPER_HOLDING_YEARS,
) -> list[AnnualObservation]:
    """Yearly category counts, permits and custom-home share.

    For each year: unpermitted owned lots are tallied by category, the
    permits slot carries cumulative permits, and platted lots not yet
    sold into the market are excluded from the counts and reported as the
    residual. Counts + permits + residual equal `platted` exactly.
    """
    if first_year > last_year:
        raise ValueError(f"empty year range {first_year}..{last_year}")
    if platted < len(lots):
        raise ValueError(f"platted {platted} below lot count {len(lots)}")
    sales_index = OwnerSalesIndex(lots)
    start_years = [[t.date.year for t in lot.transactions] for lot in lots]

    observations = []
    prev_cumulative = sum(
        1
        for lot in lots
        if lot.effective_permit_year is not None and lot.effective_permit_year < first_year
    )
    for year in range(first_year, last_year + 1):
        counts = np.zeros(5)
        for lot, starts in zip(lots, start_years):
            cat = _category_asof(lot, starts, year, sales_index, flipper_holding_years)
            if cat is not None:
                counts[cat] += 1
        cumulative = counts[OwnerCategory.PERMITS]
        issued = cumulative - prev_cumulative
        prev_cumulative = cumulative
        residual = float(platted) - counts.sum()
        observations.append(
            AnnualObservation(
                year=year,
                category_counts=StateVector(counts, year),
                permits_issued=float(issued),
                custom_ratio=custom_spec_ratio(
                    lots, year, sales_index, flipper_holding_years
                ),
                residual=residual,
            )
        )
    return observations
