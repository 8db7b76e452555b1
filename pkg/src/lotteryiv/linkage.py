"""Loading, linking, and evaluation-sample construction for lottery and employment records.

Two sources are linked on a person identifier: lottery participation records
(one per application) and annual employment statistics. Demographics are
resolved with priority for the employment source. The evaluation sample
anchors each person at one participation, codes the instrument from the
pre-draw outcome, the treatment from residence one year later, and collects
outcome rows from two years after the participation onward.
"""

from __future__ import annotations

import csv
import warnings
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

SEASONS = ("spring", "fall")
NATIONALITIES = ("AT", "DE", "IT", "CH", "OTHER")
GENDERS = ("female", "male")

LOTTERY_HEADER = [
    "person_id", "lottery_year", "lottery_season", "predraw_won",
    "birth_year", "nationality", "gender",
]
EMPLOYMENT_HEADER = [
    "person_id", "year", "employed", "activity_level", "resides_in_li",
    "birth_year", "nationality", "gender",
]


class LinkageError(ValueError):
    """Malformed input files or broken record invariants."""


class OutcomeKind(Enum):
    """The five outcomes measured per person and outcome period."""

    RESIDING = "residing"
    EMPLOYED = "employed"
    ACTIVITY_LEVEL = "activity_level"
    YEARS_RESIDING = "years_residing"
    YEARS_EMPLOYED = "years_employed"


#: Column order of ``EvaluationSample.outcomes``.
OUTCOME_ORDER = (
    OutcomeKind.RESIDING,
    OutcomeKind.EMPLOYED,
    OutcomeKind.ACTIVITY_LEVEL,
    OutcomeKind.YEARS_RESIDING,
    OutcomeKind.YEARS_EMPLOYED,
)

OUTCOME_LABELS = {
    OutcomeKind.RESIDING: "Residing (binary)",
    OutcomeKind.EMPLOYED: "Employed (binary)",
    OutcomeKind.ACTIVITY_LEVEL: "Activity level (%)",
    OutcomeKind.YEARS_RESIDING: "Years residing",
    OutcomeKind.YEARS_EMPLOYED: "Years employed",
}


@dataclass(frozen=True)
class LotteryRecord:
    person_id: str
    lottery_year: int
    lottery_season: str
    predraw_won: bool
    birth_year: int | None = None
    nationality: str | None = None
    gender: str | None = None


@dataclass(frozen=True)
class EmploymentRecord:
    person_id: str
    year: int
    employed: bool
    activity_level: float
    resides_in_li: bool
    birth_year: int | None = None
    nationality: str | None = None
    gender: str | None = None


@dataclass
class LinkedPerson:
    """One person's merged history with source-resolved demographics.

    A demographic field of ``None`` means neither source supplied it.
    """

    person_id: str
    participations: list[LotteryRecord]
    employment: dict[int, EmploymentRecord]
    birth_year: int | None
    nationality: str | None
    gender: str | None


@dataclass
class LinkedPanel:
    persons: dict[str, LinkedPerson]
    n_lottery_records: int

    def __len__(self) -> int:
        return len(self.persons)


@dataclass
class EvaluationSample:
    """Analysis units (one per selected participant) plus their outcome rows.

    Participant arrays are aligned; ``row_person`` indexes into them and rows
    of a participant are stored contiguously in ascending period order, which
    the cluster bootstrap relies on. Outcome columns follow ``OUTCOME_ORDER``.
    """

    person_ids: list[str]
    t0: np.ndarray
    z: np.ndarray
    d: np.ndarray
    commuter: np.ndarray
    age: np.ndarray
    nationality: np.ndarray
    female: np.ndarray
    age_missing: np.ndarray
    nationality_missing: np.ndarray
    gender_missing: np.ndarray
    row_person: np.ndarray
    row_t: np.ndarray
    outcomes: np.ndarray
    exclusions: dict[str, int] = field(default_factory=dict)
    n_lottery_records: int = 0
    n_persons_linked: int = 0
    monotonicity_violations: int = 0
    row_start: np.ndarray = field(default=None, repr=False)
    row_counts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.row_start is None or self.row_counts is None:
            n = len(self.person_ids)
            counts = np.bincount(self.row_person, minlength=n)
            self.row_counts = counts.astype(np.int64)
            self.row_start = np.concatenate(([0], np.cumsum(counts)[:-1]))

    @property
    def n_participants(self) -> int:
        return len(self.person_ids)

    @property
    def n_rows(self) -> int:
        return self.row_person.shape[0]

    def outcome_column(self, kind: OutcomeKind) -> np.ndarray:
        return self.outcomes[:, OUTCOME_ORDER.index(kind)]

    def rows_of(self, participant_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gather the row indices of the given participants, with multiplicity.

        Returns ``(rows, owners)`` where ``rows`` indexes into the row arrays
        and ``owners[i]`` is the position within ``participant_idx`` that
        contributed ``rows[i]``. Drawing a participant twice contributes all
        of that person's rows twice.
        """
        counts = self.row_counts[participant_idx]
        total = int(counts.sum())
        owners = np.repeat(np.arange(len(participant_idx)), counts)
        begins = np.cumsum(counts) - counts
        rows = (
            np.arange(total)
            - np.repeat(begins, counts)
            + np.repeat(self.row_start[participant_idx], counts)
        )
        return rows, owners

    def subset(self, mask: np.ndarray) -> "EvaluationSample":
        """Restrict to the participants selected by a boolean mask."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_participants,):
            raise ValueError("mask must have one entry per participant")
        idx = np.flatnonzero(mask)
        rows, _ = self.rows_of(idx)
        remap = np.full(self.n_participants, -1, dtype=np.int64)
        remap[idx] = np.arange(len(idx))
        return EvaluationSample(
            person_ids=[self.person_ids[i] for i in idx],
            t0=self.t0[idx],
            z=self.z[idx],
            d=self.d[idx],
            commuter=self.commuter[idx],
            age=self.age[idx],
            nationality=self.nationality[idx],
            female=self.female[idx],
            age_missing=self.age_missing[idx],
            nationality_missing=self.nationality_missing[idx],
            gender_missing=self.gender_missing[idx],
            row_person=remap[self.row_person[rows]],
            row_t=self.row_t[rows],
            outcomes=self.outcomes[rows],
            exclusions=dict(self.exclusions),
            n_lottery_records=self.n_lottery_records,
            n_persons_linked=self.n_persons_linked,
            monotonicity_violations=int(
                np.sum((self.d[idx] == 1) & (self.z[idx] == 0))
            ),
        )


def _parse_int(cell: str, what: str, line_no: int) -> int:
    try:
        return int(cell)
    except ValueError:
        raise LinkageError(f"line {line_no}: malformed {what} {cell!r}") from None


def _parse_flag(cell: str, what: str, line_no: int) -> bool:
    if cell == "1":
        return True
    if cell == "0":
        return False
    raise LinkageError(f"line {line_no}: malformed {what} {cell!r} (expected 0 or 1)")


def _optional_int(cell: str) -> int | None:
    try:
        return int(cell)
    except ValueError:
        return None


def _optional_enum(cell: str, allowed: tuple[str, ...]) -> str | None:
    return cell if cell in allowed else None


def _check_header(row: list[str], expected: list[str], path) -> None:
    if row != expected:
        raise LinkageError(
            f"{path}: header {row!r} does not match expected {expected!r}"
        )


def load_lottery_csv(path) -> list[LotteryRecord]:
    """Read lottery participation records.

    Key cells (year, season, pre-draw flag) must parse; a malformed key cell
    raises with its line number. Demographic cells that are empty or
    unparseable become missing without dropping the row. A duplicate
    (person, year, season) triple is an error: multiple applications to the
    same lottery are not possible.
    """
    records: list[LotteryRecord] = []
    seen: set[tuple[str, int, str]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LinkageError(f"{path}: empty file") from None
        _check_header(header, LOTTERY_HEADER, path)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(LOTTERY_HEADER):
                raise LinkageError(f"line {line_no}: expected {len(LOTTERY_HEADER)} cells")
            pid = row[0]
            if not pid:
                raise LinkageError(f"line {line_no}: empty person_id")
            year = _parse_int(row[1], "lottery_year", line_no)
            season = row[2]
            if season not in SEASONS:
                raise LinkageError(f"line {line_no}: malformed lottery_season {season!r}")
            won = _parse_flag(row[3], "predraw_won", line_no)
            key = (pid, year, season)
            if key in seen:
                raise LinkageError(
                    f"line {line_no}: duplicate participation {key} "
                    "(one application per lottery)"
                )
            seen.add(key)
            records.append(LotteryRecord(
                person_id=pid,
                lottery_year=year,
                lottery_season=season,
                predraw_won=won,
                birth_year=_optional_int(row[4]),
                nationality=_optional_enum(row[5], NATIONALITIES),
                gender=_optional_enum(row[6], GENDERS),
            ))
    return records


def load_employment_csv(path) -> list[EmploymentRecord]:
    """Read annual employment records (one per person and year)."""
    records: list[EmploymentRecord] = []
    seen: set[tuple[str, int]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LinkageError(f"{path}: empty file") from None
        _check_header(header, EMPLOYMENT_HEADER, path)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(EMPLOYMENT_HEADER):
                raise LinkageError(f"line {line_no}: expected {len(EMPLOYMENT_HEADER)} cells")
            pid = row[0]
            if not pid:
                raise LinkageError(f"line {line_no}: empty person_id")
            year = _parse_int(row[1], "year", line_no)
            employed = _parse_flag(row[2], "employed", line_no)
            try:
                activity = float(row[3])
            except ValueError:
                raise LinkageError(
                    f"line {line_no}: malformed activity_level {row[3]!r}"
                ) from None
            if not 0.0 <= activity <= 100.0:
                raise LinkageError(f"line {line_no}: activity_level {activity} outside [0, 100]")
            if not employed and activity != 0.0:
                raise LinkageError(
                    f"line {line_no}: activity_level must be 0 when employed is 0"
                )
            resides = _parse_flag(row[4], "resides_in_li", line_no)
            key = (pid, year)
            if key in seen:
                raise LinkageError(f"line {line_no}: duplicate employment record {key}")
            seen.add(key)
            records.append(EmploymentRecord(
                person_id=pid,
                year=year,
                employed=employed,
                activity_level=activity,
                resides_in_li=resides,
                birth_year=_optional_int(row[5]),
                nationality=_optional_enum(row[6], NATIONALITIES),
                gender=_optional_enum(row[7], GENDERS),
            ))
    return records


def write_lottery_csv(records: list[LotteryRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOTTERY_HEADER)
        for r in records:
            writer.writerow([
                r.person_id, r.lottery_year, r.lottery_season,
                int(r.predraw_won),
                "" if r.birth_year is None else r.birth_year,
                "" if r.nationality is None else r.nationality,
                "" if r.gender is None else r.gender,
            ])


def write_employment_csv(records: list[EmploymentRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EMPLOYMENT_HEADER)
        for r in records:
            writer.writerow([
                r.person_id, r.year, int(r.employed),
                ("%g" % r.activity_level), int(r.resides_in_li),
                "" if r.birth_year is None else r.birth_year,
                "" if r.nationality is None else r.nationality,
                "" if r.gender is None else r.gender,
            ])


def _modal(values: list[tuple[int, object]]):
    """Modal value of (recency, value) pairs; ties go to the most recent."""
    present = [(rank, v) for rank, v in values if v is not None]
    if not present:
        return None
    counts = Counter(v for _, v in present)
    top = max(counts.values())
    candidates = {v for v, c in counts.items() if c == top}
    best = max((rank, v) for rank, v in present if v in candidates)
    return best[1]


def _resolve_field(person_id: str, name: str,
                   employment_values: list[tuple[int, object]],
                   lottery_values: list[tuple[int, object]]):
    emp_present = [v for _, v in employment_values if v is not None]
    if emp_present:
        if name == "birth_year" and len(set(emp_present)) > 1:
            warnings.warn(
                f"person {person_id}: conflicting birth_year across employment "
                f"years {sorted(set(emp_present))}; using modal value",
                stacklevel=3,
            )
        return _modal(employment_values)
    return _modal(lottery_values)


def link_records(lottery: list[LotteryRecord],
                 employment: list[EmploymentRecord]) -> LinkedPanel:
    """Link the two sources on person_id and resolve demographics.

    Employment values take priority over lottery values for every
    demographic field. Within a source, conflicting values resolve to the
    modal one, tie-broken by the most recent year. Persons present in only
    one source are retained.
    """
    participations: dict[str, list[LotteryRecord]] = {}
    for rec in lottery:
        participations.setdefault(rec.person_id, []).append(rec)
    employment_by_person: dict[str, dict[int, EmploymentRecord]] = {}
    for rec in employment:
        employment_by_person.setdefault(rec.person_id, {})[rec.year] = rec

    persons: dict[str, LinkedPerson] = {}
    for pid in sorted(set(participations) | set(employment_by_person)):
        parts = sorted(
            participations.get(pid, ()),
            key=lambda r: (r.lottery_year, SEASONS.index(r.lottery_season)),
        )
        emp = employment_by_person.get(pid, {})
        emp_rows = sorted(emp.values(), key=lambda r: r.year)
        lot_ranked = [
            ((r.lottery_year, SEASONS.index(r.lottery_season)), r) for r in parts
        ]
        resolved = {}
        for name in ("birth_year", "nationality", "gender"):
            resolved[name] = _resolve_field(
                pid, name,
                [(r.year, getattr(r, name)) for r in emp_rows],
                [(rank, getattr(r, name)) for rank, r in lot_ranked],
            )
        persons[pid] = LinkedPerson(
            person_id=pid,
            participations=parts,
            employment=emp,
            birth_year=resolved["birth_year"],
            nationality=resolved["nationality"],
            gender=resolved["gender"],
        )
    return LinkedPanel(persons=persons, n_lottery_records=len(lottery))


def build_evaluation_sample(panel: LinkedPanel,
                            window_first: tuple[int, int] = (2006, 2016),
                            last_outcome_year: int = 2018) -> EvaluationSample:
    """Construct the analysis sample anchored at each person's first participation."""
    return select_participation(panel, 1, window_first, last_outcome_year)


def select_participation(panel: LinkedPanel, k: int,
                         window: tuple[int, int] = (2006, 2016),
                         last_outcome_year: int = 2018) -> EvaluationSample:
    """Anchor the sample at the k-th participation of persons with at least k.

    ``k=1`` is the main first-participation sample. For ``k>1`` the anchor
    participation must fall in the window and the person's first
    participation must not predate it. The instrument is the pre-draw result
    of the anchor participation; treatment is residence one year after it.
    Persons excluded at any step are tallied in the exclusion ledger.
    """
    if k < 1:
        raise ValueError("participation number k must be >= 1")
    lo, hi = window

    person_ids: list[str] = []
    t0s, zs, ds, commuters = [], [], [], []
    ages, age_miss = [], []
    nats, nat_miss = [], []
    females, gender_miss = [], []
    row_person, row_t = [], []
    out_rows: list[tuple[float, float, float, float, float]] = []
    exclusions: Counter = Counter()
    max_participations = 0

    for pid in sorted(panel.persons):
        person = panel.persons[pid]
        parts = person.participations
        if not parts:
            exclusions["no_lottery_participation"] += 1
            continue
        max_participations = max(max_participations, len(parts))
        if len(parts) < k:
            exclusions["fewer_than_k_participations"] += 1
            continue
        anchor = parts[k - 1]
        first_year = parts[0].lottery_year
        if first_year < lo:
            exclusions["first_participation_before_window"] += 1
            continue
        if anchor.lottery_year > hi:
            exclusions[
                "first_participation_after_window" if k == 1
                else "anchor_participation_after_window"
            ] += 1
            continue

        t0 = anchor.lottery_year
        z = int(anchor.predraw_won)
        treat_row = person.employment.get(t0 + 1)
        d = int(treat_row.resides_in_li) if treat_row is not None else 0
        base_row = person.employment.get(t0 - 1)
        commuter = bool(
            base_row is not None and base_row.employed and not base_row.resides_in_li
        )

        idx = len(person_ids)
        person_ids.append(pid)
        t0s.append(t0)
        zs.append(z)
        ds.append(d)
        commuters.append(commuter)
        if person.birth_year is None:
            ages.append(np.nan)
            age_miss.append(True)
        else:
            ages.append(float(t0 - person.birth_year))
            age_miss.append(False)
        nats.append(person.nationality or "")
        nat_miss.append(person.nationality is None)
        females.append(1.0 if person.gender == "female" else 0.0)
        gender_miss.append(person.gender is None)

        years_res = 0.0
        years_emp = 0.0
        for t in range(2, last_outcome_year - t0 + 1):
            row = person.employment.get(t0 + t)
            residing = float(row.resides_in_li) if row is not None else 0.0
            employed = float(row.employed) if row is not None else 0.0
            activity = float(row.activity_level) if row is not None and row.employed else 0.0
            years_res += residing
            years_emp += employed
            row_person.append(idx)
            row_t.append(t)
            out_rows.append((residing, employed, activity, years_res, years_emp))

    if k > max_participations and max_participations > 0:
        warnings.warn(
            f"no person has {k} participations (maximum observed: "
            f"{max_participations}); sample is empty",
            stacklevel=2,
        )

    z_arr = np.asarray(zs, dtype=np.int8)
    d_arr = np.asarray(ds, dtype=np.int8)
    return EvaluationSample(
        person_ids=person_ids,
        t0=np.asarray(t0s, dtype=np.int64),
        z=z_arr,
        d=d_arr,
        commuter=np.asarray(commuters, dtype=bool),
        age=np.asarray(ages, dtype=np.float64),
        nationality=np.asarray(nats, dtype=object),
        female=np.asarray(females, dtype=np.float64),
        age_missing=np.asarray(age_miss, dtype=bool),
        nationality_missing=np.asarray(nat_miss, dtype=bool),
        gender_missing=np.asarray(gender_miss, dtype=bool),
        row_person=np.asarray(row_person, dtype=np.int64),
        row_t=np.asarray(row_t, dtype=np.int64),
        outcomes=np.asarray(out_rows, dtype=np.float64).reshape(len(out_rows), 5),
        exclusions=dict(exclusions),
        n_lottery_records=panel.n_lottery_records,
        n_persons_linked=sum(1 for p in panel.persons.values() if p.participations),
        monotonicity_violations=int(np.sum((d_arr == 1) & (z_arr == 0))),
    )
