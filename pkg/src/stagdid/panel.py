"""Balanced unit-by-period panel model and the data-construction steps.

The panel is stored column-major: one float matrix per outcome with shape
(n_units, n_periods), a first-adoption period per unit (``NEVER`` for units
that never adopt), optional time-invariant covariates, and an optional
population grid. All arrays are frozen after construction; every operation
returns a new :class:`PanelDataset`, so instances are safe to share across
threads.

Period labels are calendar integers. Internally the estimation code works
with positions 1..T; all user-facing reports keep calendar labels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConflictingGroupError,
    DuplicateCellError,
    MissingPopulationError,
    NonIntegerPeriodError,
    NonpositiveValueError,
    UnmappedUnitError,
)

#: Sentinel for units that never adopt within the sample window.
NEVER = "never"

_NEVER_CODE = np.inf


def _as_period(value):
    """Parse a period label into an int, rejecting non-integer labels."""
    if isinstance(value, bool):
        raise NonIntegerPeriodError(f"period {value!r} is not an integer")
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, float):
        if value != int(value):
            raise NonIntegerPeriodError(f"period {value!r} is not an integer")
        return int(value)
    try:
        text = str(value).strip()
        if text and float(text) == int(float(text)):
            return int(float(text))
    except ValueError:
        pass
    raise NonIntegerPeriodError(f"period {value!r} is not an integer")


def _as_group(value):
    """Parse a group label: an adoption year or the ``never`` sentinel."""
    if value is None:
        return _NEVER_CODE
    if isinstance(value, float) and math.isinf(value):
        return _NEVER_CODE
    if isinstance(value, str) and value.strip().lower() in ("", NEVER, "nan", "inf"):
        return _NEVER_CODE
    try:
        return float(_as_period(value))
    except NonIntegerPeriodError:
        raise NonIntegerPeriodError(f"group {value!r} is neither an integer nor {NEVER!r}")


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel over a unit-by-period grid.

    Attributes
    ----------
    units : tuple of str
        Sorted unit identifiers.
    periods : tuple of int
        Sorted calendar periods retained in the panel.
    group : ndarray of float, shape (n_units,)
        First adoption period per unit, aligned with ``units``; ``inf``
        encodes never-treated. Values are calendar labels and, when finite,
        always lie in ``periods[1:]``.
    outcomes : dict of str -> ndarray, shape (n_units, n_periods)
    covariates : dict of str -> ndarray, shape (n_units,)
        Time-invariant baseline values.
    population : ndarray or None, shape (n_units, n_periods)
    """

    units: tuple
    periods: tuple
    group: np.ndarray
    outcomes: dict
    covariates: dict = field(default_factory=dict)
    population: np.ndarray | None = None

    def __post_init__(self):
        for arr in self._all_arrays():
            arr.flags.writeable = False

    def _all_arrays(self):
        yield self.group
        yield from self.outcomes.values()
        yield from self.covariates.values()
        if self.population is not None:
            yield self.population

    # -- basic accessors ----------------------------------------------------

    @property
    def n_units(self):
        return len(self.units)

    @property
    def n_periods(self):
        return len(self.periods)

    def unit_index(self, unit):
        try:
            return self._unit_pos[unit]
        except AttributeError:
            object.__setattr__(self, "_unit_pos", {u: i for i, u in enumerate(self.units)})
            return self._unit_pos[unit]

    def period_index(self, period):
        try:
            return self.periods.index(int(period))
        except ValueError:
            raise KeyError(f"period {period} not in panel")

    def group_of(self, unit):
        """Adoption period of ``unit`` as an int, or ``NEVER``."""
        g = self.group[self.unit_index(unit)]
        return NEVER if np.isinf(g) else int(g)

    def value(self, unit, period, outcome):
        return float(self.outcomes[outcome][self.unit_index(unit), self.period_index(period)])

    def treated_groups(self):
        """Sorted distinct adoption periods present in the panel."""
        finite = self.group[np.isfinite(self.group)]
        return sorted(int(g) for g in np.unique(finite))

    def never_treated_mask(self):
        return np.isinf(self.group)

    # -- transformations ------------------------------------------------------

    def subset_units(self, keep_mask):
        """New panel retaining units where ``keep_mask`` is True."""
        keep_mask = np.asarray(keep_mask, dtype=bool)
        units = tuple(u for u, k in zip(self.units, keep_mask) if k)
        return PanelDataset(
            units=units,
            periods=self.periods,
            group=self.group[keep_mask].copy(),
            outcomes={k: v[keep_mask].copy() for k, v in self.outcomes.items()},
            covariates={k: v[keep_mask].copy() for k, v in self.covariates.items()},
            population=None if self.population is None else self.population[keep_mask].copy(),
        )

    def subset_periods(self, keep_periods):
        keep = [i for i, p in enumerate(self.periods) if p in keep_periods]
        idx = np.asarray(keep, dtype=int)
        return PanelDataset(
            units=self.units,
            periods=tuple(self.periods[i] for i in keep),
            group=self.group.copy(),
            outcomes={k: v[:, idx].copy() for k, v in self.outcomes.items()},
            covariates={k: v.copy() for k, v in self.covariates.items()},
            population=None if self.population is None else self.population[:, idx].copy(),
        )

    def to_frame(self):
        """Long-format pandas frame mirroring the input CSV schema."""
        import pandas as pd

        rows = []
        for i, unit in enumerate(self.units):
            g = self.group[i]
            glabel = NEVER if np.isinf(g) else int(g)
            for j, period in enumerate(self.periods):
                row = {"unit_id": unit, "period": period, "group": glabel}
                for name, arr in self.outcomes.items():
                    row[f"outcome_{name}"] = arr[i, j]
                for name, arr in self.covariates.items():
                    row[f"cov_{name}"] = arr[i]
                if self.population is not None:
                    row["population"] = self.population[i, j]
                rows.append(row)
        return pd.DataFrame(rows)


@dataclass(frozen=True)
class ValidationReport:
    """What :func:`validate_panel` removed or rewrote, and why."""

    dropped: dict
    reclassified_never: tuple = ()
    snapped_groups: dict = field(default_factory=dict)

    def counts(self):
        out = {}
        for reason in self.dropped.values():
            out[reason] = out.get(reason, 0) + 1
        return out


@dataclass(frozen=True)
class ValidationResult:
    panel: PanelDataset
    report: ValidationReport


def _normalize_groups(units, periods, group):
    """Clamp adoption periods onto the retained grid.

    Units adopting after the last retained period are reclassified as
    never-treated (they are untreated everywhere we observe them). Units
    adopting at or before the first retained period have no pre-treatment
    period and are dropped. Adoption years falling in a gap snap forward to
    the next retained period.
    """
    first, last = periods[0], periods[-1]
    period_arr = np.asarray(periods)
    keep = np.ones(len(units), dtype=bool)
    group = group.copy()
    dropped, reclassified, snapped = {}, [], {}
    for i, unit in enumerate(units):
        g = group[i]
        if np.isinf(g):
            continue
        if g > last:
            group[i] = _NEVER_CODE
            reclassified.append(unit)
            continue
        if g not in period_arr:
            target = float(period_arr[period_arr >= g][0])
            snapped[unit] = (int(g), int(target))
            group[i] = g = target
        if g <= first:
            keep[i] = False
            dropped[unit] = "treated_from_first_period"
    return keep, group, dropped, tuple(reclassified), snapped


def validate_panel(records):
    """Build a balanced :class:`PanelDataset` from raw long-format records.

    Parameters
    ----------
    records : iterable of dict
        Each record carries ``unit_id``, ``period``, ``group`` plus any
        number of ``outcome_<name>``, ``cov_<name>`` and ``population``
        fields (the CSV schema). Missing fields are allowed per record;
        completeness is enforced per unit over the full grid.

    Returns
    -------
    ValidationResult
        The validated panel plus a report naming every dropped unit and the
        reason. Units missing any outcome/covariate/population cell on the
        retained grid are dropped entirely, which keeps the panel balanced.

    Raises
    ------
    ConflictingGroupError
        If a unit is reported with two different adoption periods.
    NonIntegerPeriodError
        If a period or group label is not an integer.
    DuplicateCellError
        If the same cell appears twice with different values.
    """
    records = list(records)
    if not records:
        raise ValueError("no records supplied")

    group_by_unit = {}
    cells = {}  # (unit, period) -> {column: value}
    cov_by_unit = {}
    outcome_names, cov_names, has_population = set(), set(), False

    for rec in records:
        unit = str(rec.get("unit_id", rec.get("unit")))
        period = _as_period(rec["period"])
        g = _as_group(rec.get("group"))
        if unit in group_by_unit:
            if group_by_unit[unit] != g:
                raise ConflictingGroupError(
                    f"unit {unit!r} reported with groups "
                    f"{_group_label(group_by_unit[unit])} and {_group_label(g)}"
                )
        else:
            group_by_unit[unit] = g

        values = {}
        for key, raw in rec.items():
            if key in ("unit_id", "unit", "period", "group"):
                continue
            if raw is None or (isinstance(raw, str) and not raw.strip()):
                continue
            val = float(raw)
            if key.startswith("outcome_"):
                outcome_names.add(key[8:])
                values[key] = val
            elif key.startswith("cov_"):
                name = key[4:]
                cov_names.add(name)
                prev = cov_by_unit.setdefault(unit, {})
                if name in prev and not _close(prev[name], val):
                    raise DuplicateCellError(
                        f"covariate {name!r} differs across rows of unit {unit!r}"
                    )
                prev[name] = val
            elif key == "population":
                if val < 0:
                    raise ValueError(f"negative population for unit {unit!r}")
                has_population = True
                values[key] = val
            else:
                raise ValueError(f"unrecognized column {key!r}")

        cell = cells.setdefault((unit, period), {})
        for key, val in values.items():
            if key in cell and not _close(cell[key], val):
                raise DuplicateCellError(
                    f"cell (unit={unit!r}, period={period}, column={key!r}) "
                    f"has conflicting values {cell[key]} and {val}"
                )
            cell[key] = val

    units = sorted(group_by_unit)
    periods = tuple(sorted({p for _, p in cells}))
    outcome_names = sorted(outcome_names)
    cov_names = sorted(cov_names)

    # Drop any unit with an incomplete grid; the estimators require balance.
    dropped = {}
    complete = []
    for unit in units:
        ok = True
        for period in periods:
            cell = cells.get((unit, period))
            if cell is None or any(f"outcome_{n}" not in cell for n in outcome_names):
                ok = False
                break
            if has_population and "population" not in cell:
                ok = False
                break
        if ok and any(n not in cov_by_unit.get(unit, {}) for n in cov_names):
            ok = False
        if ok:
            complete.append(unit)
        else:
            dropped[unit] = "incomplete_grid"

    group = np.array([group_by_unit[u] for u in complete], dtype=float)
    keep, group, norm_dropped, reclassified, snapped = _normalize_groups(
        complete, periods, group
    )
    dropped.update(norm_dropped)
    kept_units = tuple(u for u, k in zip(complete, keep) if k)
    group = group[keep]

    n, T = len(kept_units), len(periods)
    outcomes = {name: np.empty((n, T)) for name in outcome_names}
    population = np.empty((n, T)) if has_population else None
    covariates = {name: np.empty(n) for name in cov_names}
    for i, unit in enumerate(kept_units):
        for name in cov_names:
            covariates[name][i] = cov_by_unit[unit][name]
        for j, period in enumerate(periods):
            cell = cells[(unit, period)]
            for name in outcome_names:
                outcomes[name][i, j] = cell[f"outcome_{name}"]
            if has_population:
                population[i, j] = cell["population"]

    panel = PanelDataset(
        units=kept_units,
        periods=periods,
        group=group,
        outcomes=outcomes,
        covariates=covariates,
        population=population,
    )
    report = ValidationReport(
        dropped=dropped, reclassified_never=reclassified, snapped_groups=snapped
    )
    return ValidationResult(panel=panel, report=report)


def _close(a, b):
    return abs(a - b) <= 1e-12 * max(1.0, abs(a), abs(b))


def _group_label(g):
    return NEVER if np.isinf(g) else int(g)


# --------------------------------------------------------------------------
# aggregation to stable-border units
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class McaMapping:
    """Surjective map from raw unit ids onto stable-border area ids."""

    mapping: dict

    def area_of(self, unit):
        return self.mapping[unit]

    def areas(self):
        return sorted(set(self.mapping.values()))


def aggregate_mca(panel, mapping):
    """Collapse raw units into minimum comparable areas.

    Outcome and population values of an area are sums over member units per
    period. An area counts as treated from the first adoption among its
    members (never-treated only if every member is). Baseline covariates are
    combined as population-weighted means, population measured in the first
    period; when the panel has no population column a simple mean is used.

    Raises
    ------
    UnmappedUnitError
        If some panel unit does not appear in ``mapping``.
    """
    missing = [u for u in panel.units if u not in mapping.mapping]
    if missing:
        raise UnmappedUnitError(f"units not in mapping: {missing[:5]}{'...' if len(missing) > 5 else ''}")

    areas = sorted({mapping.mapping[u] for u in panel.units})
    area_pos = {a: i for i, a in enumerate(areas)}
    member_rows = [[] for _ in areas]
    for i, unit in enumerate(panel.units):
        member_rows[area_pos[mapping.mapping[unit]]].append(i)

    n, T = len(areas), panel.n_periods
    outcomes = {name: np.empty((n, T)) for name in panel.outcomes}
    population = np.empty((n, T)) if panel.population is not None else None
    covariates = {name: np.empty(n) for name in panel.covariates}
    group = np.empty(n)

    for a, rows in enumerate(member_rows):
        idx = np.asarray(rows, dtype=int)
        group[a] = panel.group[idx].min()
        for name, arr in panel.outcomes.items():
            outcomes[name][a] = arr[idx].sum(axis=0)
        if population is not None:
            population[a] = panel.population[idx].sum(axis=0)
        if panel.covariates:
            if panel.population is not None:
                w = panel.population[idx, 0]
                w = w / w.sum() if w.sum() > 0 else np.full(len(idx), 1.0 / len(idx))
            else:
                w = np.full(len(idx), 1.0 / len(idx))
            for name, arr in panel.covariates.items():
                covariates[name][a] = float(arr[idx] @ w)

    return PanelDataset(
        units=tuple(str(a) for a in areas),
        periods=panel.periods,
        group=group,
        outcomes=outcomes,
        covariates=covariates,
        population=population,
    )


# --------------------------------------------------------------------------
# sample selection
# --------------------------------------------------------------------------

#: Population cap derived from the largest treated unit.
AUTO = "auto"


@dataclass(frozen=True)
class SelectionRules:
    """Pure unit/period filters, applied in a fixed order.

    Order of application: partial-adopter exclusion, population cap,
    admissible-region filter, strict-positivity filter, period drop.
    Applying the same rules twice is a no-op on the second pass.

    Attributes
    ----------
    exclude_partially_treated_ids : frozenset
        Never-treated units known to run a partial variant of the policy;
        removed from the comparison group.
    population_cap : float, ``AUTO`` or None
        Drop never-treated units whose baseline population exceeds the cap.
        ``AUTO`` uses the maximum baseline population among treated units.
    population_baseline_period : int or None
        Calendar period at which population is measured for the cap
        (default: first retained period).
    admissible_region_ids : frozenset or None
        Keep only units whose region code is in the set.
    region_covariate : str
        Covariate column holding each unit's region code.
    require_strictly_positive : bool
        Drop units with a nonpositive value of the chosen outcome in any
        retained period.
    drop_periods : frozenset of int
        Calendar periods removed from the grid.
    """

    exclude_partially_treated_ids: frozenset = frozenset()
    population_cap: object = None
    population_baseline_period: int | None = None
    admissible_region_ids: frozenset | None = None
    region_covariate: str = "region"
    require_strictly_positive: bool = False
    drop_periods: frozenset = frozenset()


@dataclass(frozen=True)
class SelectionResult:
    panel: PanelDataset
    audit: dict

    def audit_counts(self):
        return {rule: entry["count"] for rule, entry in self.audit.items()}


def apply_sample_selection(panel, rules, outcome=None):
    """Filter a panel per :class:`SelectionRules` and audit every rule.

    Parameters
    ----------
    panel : PanelDataset
    rules : SelectionRules
    outcome : str, optional
        Outcome column for the strict-positivity rule; when omitted the
        rule checks every outcome column.

    Returns
    -------
    SelectionResult
        Filtered panel plus an audit mapping each rule name to the dropped
        units (or periods) in application order. An empty result panel is
        reported, never raised.
    """
    audit = {}

    def record(rule, dropped_units, extra=None):
        entry = {"count": len(dropped_units), "units": sorted(dropped_units)}
        if extra:
            entry.update(extra)
        audit[rule] = entry

    # 1. partial adopters out of the comparison group
    never = panel.never_treated_mask()
    in_set = np.array([u in rules.exclude_partially_treated_ids for u in panel.units])
    drop = never & in_set
    record("exclude_partially_treated", [u for u, d in zip(panel.units, drop) if d])
    panel = panel.subset_units(~drop)

    # 2. population cap on the comparison group
    if rules.population_cap is not None:
        if panel.population is None:
            raise MissingPopulationError("population cap requested but panel has no population")
        base = rules.population_baseline_period
        j = panel.period_index(base) if base is not None else 0
        pop0 = panel.population[:, j]
        never = panel.never_treated_mask()
        if rules.population_cap == AUTO:
            treated_pop = pop0[~never]
            cap = float(treated_pop.max()) if treated_pop.size else np.inf
        else:
            cap = float(rules.population_cap)
        drop = never & (pop0 > cap)
        record(
            "population_cap",
            [u for u, d in zip(panel.units, drop) if d],
            {"cap": cap},
        )
        panel = panel.subset_units(~drop)
    else:
        record("population_cap", [])

    # 3. admissible regions
    if rules.admissible_region_ids is not None:
        region = panel.covariates.get(rules.region_covariate)
        if region is None:
            raise ValueError(
                f"region filter requested but covariate {rules.region_covariate!r} is absent"
            )
        admissible = {int(r) for r in rules.admissible_region_ids}
        drop = np.array([int(r) not in admissible for r in region])
        record("admissible_region", [u for u, d in zip(panel.units, drop) if d])
        panel = panel.subset_units(~drop)
    else:
        record("admissible_region", [])

    # 4. strict positivity of the analyzed outcome
    if rules.require_strictly_positive:
        names = [outcome] if outcome is not None else list(panel.outcomes)
        drop = np.zeros(panel.n_units, dtype=bool)
        for name in names:
            drop |= (panel.outcomes[name] <= 0).any(axis=1)
        record("strict_positivity", [u for u, d in zip(panel.units, drop) if d])
        panel = panel.subset_units(~drop)
    else:
        record("strict_positivity", [])

    # 5. period exclusion, then re-clamp adoption periods onto the new grid
    dropped_periods = sorted(p for p in panel.periods if p in rules.drop_periods)
    if dropped_periods:
        panel = panel.subset_periods([p for p in panel.periods if p not in rules.drop_periods])
        keep, group, norm_dropped, reclassified, snapped = _normalize_groups(
            panel.units, panel.periods, panel.group
        )
        if not keep.all() or reclassified or snapped:
            panel = replace(
                panel.subset_units(keep),
                group=group[keep],
            )
        record(
            "drop_periods",
            sorted(norm_dropped),
            {"periods": dropped_periods, "reclassified_never": sorted(reclassified)},
        )
    else:
        record("drop_periods", [], {"periods": []})

    return SelectionResult(panel=panel, audit=audit)


# --------------------------------------------------------------------------
# log transform
# --------------------------------------------------------------------------


def log_transform(panel, outcome):
    """Replace ``outcome`` with its natural log; other columns untouched.

    Raises
    ------
    NonpositiveValueError
        Naming the first offending unit and period if any value is <= 0.
    """
    arr = panel.outcomes[outcome]
    bad = np.argwhere(arr <= 0)
    if bad.size:
        i, j = bad[0]
        raise NonpositiveValueError(outcome, panel.units[i], panel.periods[j])
    outcomes = dict(panel.outcomes)
    outcomes[outcome] = np.log(arr)
    return replace(panel, outcomes=outcomes)


# --------------------------------------------------------------------------
# CSV interfaces
# --------------------------------------------------------------------------


def read_panel_records(path):
    """Read the panel CSV schema into validate_panel-ready records."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "unit_id" not in reader.fieldnames:
            raise ValueError(f"{path}: expected a header row with a unit_id column")
        return [dict(row) for row in reader]


def read_panel_csv(path):
    """Read and validate a panel CSV; returns a :class:`ValidationResult`."""
    return validate_panel(read_panel_records(path))


def write_panel_csv(panel, path):
    """Write a panel back out in the input CSV schema (sorted, stable)."""
    outcome_names = sorted(panel.outcomes)
    cov_names = sorted(panel.covariates)
    header = ["unit_id", "period", "group"]
    header += [f"outcome_{n}" for n in outcome_names]
    header += [f"cov_{n}" for n in cov_names]
    if panel.population is not None:
        header.append("population")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, unit in enumerate(panel.units):
            g = panel.group[i]
            glabel = NEVER if np.isinf(g) else int(g)
            for j, period in enumerate(panel.periods):
                row = [unit, period, glabel]
                row += [repr(float(panel.outcomes[n][i, j])) for n in outcome_names]
                row += [repr(float(panel.covariates[n][i])) for n in cov_names]
                if panel.population is not None:
                    row.append(repr(float(panel.population[i, j])))
                writer.writerow(row)


def read_mca_csv(path):
    """Read a ``unit_id,mca_id`` mapping CSV."""
    mapping = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            mapping[str(row["unit_id"])] = str(row["mca_id"])
    return McaMapping(mapping=mapping)
