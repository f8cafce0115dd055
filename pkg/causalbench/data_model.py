"""Immutable study data: covariate schema, units, datasets and CSV I/O."""

from __future__ import annotations

import logging
import re
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from causalbench.errors import (
    EmptyArm,
    MissingColumn,
    MissingData,
    NaNCell,
    NonBinaryTreatment,
    SchemaError,
    TooFewUnits,
    UnknownCategoryLevel,
)

logger = logging.getLogger(__name__)

RESERVED_COLUMNS = ("id", "arm", "z")
OUTCOME_PREFIX = "y_"
IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class Arm(str, Enum):
    RCT = "RCT"
    NRS = "NRS"


class CovariateKind(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"
    CATEGORICAL = "categorical"


class CovariateRole(str, Enum):
    COVARIATE = "covariate"
    CENTER_INDICATOR = "center_indicator"


@dataclass(frozen=True)
class DesignColumn:
    """One numeric column of the design matrix after categorical expansion."""

    name: str
    source: str
    kind: CovariateKind
    role: CovariateRole
    level: str | None = None


@dataclass(frozen=True)
class CovariateSchema:
    """Declaration of one covariate as it appears in a CSV file.

    Categorical covariates list their levels; the lexicographically first level
    is the reference and the remaining k-1 levels become indicator columns.
    """

    name: str
    kind: CovariateKind = CovariateKind.CONTINUOUS
    role: CovariateRole = CovariateRole.COVARIATE
    levels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not IDENTIFIER.match(self.name):
            raise SchemaError(f"Covariate name '{self.name}' is not an identifier")
        if self.name in RESERVED_COLUMNS or self.name.startswith(OUTCOME_PREFIX):
            raise SchemaError(f"Covariate name '{self.name}' is reserved")
        if self.kind is CovariateKind.CATEGORICAL:
            levels = tuple(str(level) for level in self.levels)
            if len(levels) < 2:
                raise SchemaError(
                    f"Categorical covariate '{self.name}' needs at least 2 levels"
                )
            if len(set(levels)) != len(levels):
                raise SchemaError(f"Categorical covariate '{self.name}' repeats a level")
            object.__setattr__(self, "levels", tuple(sorted(levels)))
        elif self.levels:
            raise SchemaError(f"Only categorical covariates take levels ('{self.name}')")

    @property
    def reference_level(self) -> str | None:
        return self.levels[0] if self.kind is CovariateKind.CATEGORICAL else None

    def design_columns(self) -> tuple[DesignColumn, ...]:
        if self.kind is not CovariateKind.CATEGORICAL:
            return (DesignColumn(self.name, self.name, self.kind, self.role),)
        return tuple(
            DesignColumn(
                f"{self.name}_{level}", self.name, CovariateKind.BINARY, self.role, level
            )
            for level in self.levels[1:]
        )


def validate_schema(schema: Sequence[CovariateSchema]) -> tuple[CovariateSchema, ...]:
    names = [c.name for c in schema]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise SchemaError(f"Duplicate covariate names: {', '.join(duplicates)}")
    columns = [col.name for c in schema for col in c.design_columns()]
    clashes = sorted({n for n in columns if columns.count(n) > 1})
    if clashes:
        raise SchemaError(f"Indicator columns collide: {', '.join(clashes)}")
    return tuple(schema)


@dataclass(frozen=True)
class Unit:
    id: int
    arm: Arm
    z: int
    y: Mapping[str, float]
    x: tuple[float, ...]


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated study data held column-wise.

    ``x`` is the expanded design (one column per DesignColumn); arrays are
    read-only so a Dataset can be shared between concurrent estimator runs.
    """

    schema: tuple[CovariateSchema, ...]
    ids: np.ndarray
    arms: np.ndarray
    z: np.ndarray
    x: np.ndarray
    y: Mapping[str, np.ndarray]
    columns: tuple[DesignColumn, ...] = field(init=False)

    def __post_init__(self) -> None:
        schema = validate_schema(self.schema)
        columns = tuple(col for cov in schema for col in cov.design_columns())
        ids = np.asarray(self.ids, dtype=np.int64)
        n = ids.shape[0]
        z = np.asarray(self.z)
        x = np.asarray(self.x, dtype=float).reshape(n, len(columns))
        arms = np.asarray([Arm(a).value for a in self.arms], dtype=object)
        if z.shape != (n,) or arms.shape != (n,):
            raise SchemaError("id, arm and z columns must have equal length")
        if not np.isin(z, (0, 1)).all():
            row = int(np.flatnonzero(~np.isin(z, (0, 1)))[0]) + 1
            raise NonBinaryTreatment(f"Treatment z must be 0/1 (row {row})")
        if np.unique(ids).size != n:
            raise SchemaError("Unit ids must be unique")
        if np.isnan(x).any():
            row, col = np.argwhere(np.isnan(x))[0]
            raise NaNCell(f"NaN covariate in row {row + 1}, column '{columns[col].name}'")
        outcomes: dict[str, np.ndarray] = {}
        for name, values in self.y.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (n,):
                raise SchemaError(f"Outcome '{name}' has {values.shape} values, expected {n}")
            if np.isnan(values).any():
                row = int(np.flatnonzero(np.isnan(values))[0]) + 1
                raise NaNCell(f"NaN outcome in row {row}, column '{OUTCOME_PREFIX}{name}'")
            outcomes[name] = _frozen(values)
        for col in columns:
            if col.kind is CovariateKind.BINARY:
                values = x[:, columns.index(col)]
                if not np.isin(values, (0.0, 1.0)).all():
                    raise SchemaError(f"Binary column '{col.name}' holds values outside {{0,1}}")
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "ids", _frozen(ids))
        object.__setattr__(self, "arms", _frozen(arms))
        object.__setattr__(self, "z", _frozen(z.astype(np.int8)))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", outcomes)

    @classmethod
    def from_arrays(
        cls,
        x: np.ndarray,
        z: np.ndarray,
        y: Mapping[str, np.ndarray] | np.ndarray,
        schema: Sequence[CovariateSchema] | None = None,
        arm: Arm | str | Sequence[str] = Arm.NRS,
        ids: np.ndarray | None = None,
    ) -> Dataset:
        """Build a dataset from an already-expanded design matrix.

        Without a schema the columns are continuous covariates ``x0, x1, ...``;
        a bare outcome array becomes the outcome ``y``.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] == 1 and np.asarray(z).size != 1:
            x = x.T
        n = x.shape[0]
        if schema is None:
            schema = [CovariateSchema(f"x{j}") for j in range(x.shape[1])]
        if isinstance(y, np.ndarray):
            y = {"y": y}
        if isinstance(arm, (Arm, str)):
            arms = np.full(n, Arm(arm).value, dtype=object)
        else:
            arms = np.asarray(arm, dtype=object)
        return cls(
            schema=tuple(schema),
            ids=np.arange(n) if ids is None else np.asarray(ids),
            arms=arms,
            z=np.asarray(z),
            x=x,
            y=dict(y),
        )

    @property
    def n(self) -> int:
        return int(self.ids.shape[0])

    @property
    def outcome_names(self) -> tuple[str, ...]:
        return tuple(self.y)

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(col.name for col in self.columns)

    @property
    def treated(self) -> np.ndarray:
        return self.z == 1

    @property
    def n_treated(self) -> int:
        return int(self.treated.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    @property
    def units(self) -> list[Unit]:
        return list(self.iter_units())

    def iter_units(self) -> Iterator[Unit]:
        for i in range(self.n):
            yield Unit(
                id=int(self.ids[i]),
                arm=Arm(self.arms[i]),
                z=int(self.z[i]),
                y={name: float(values[i]) for name, values in self.y.items()},
                x=tuple(float(v) for v in self.x[i]),
            )

    def outcome(self, name: str | None = None) -> np.ndarray:
        if name is None:
            if not self.y:
                raise MissingColumn("Dataset has no outcome columns")
            name = next(iter(self.y))
        if name.startswith(OUTCOME_PREFIX) and name not in self.y:
            name = name[len(OUTCOME_PREFIX) :]
        try:
            return self.y[name]
        except KeyError:
            raise MissingColumn(
                f"Unknown outcome '{name}' (have: {', '.join(self.y)})"
            ) from None

    def column(self, name: str) -> np.ndarray:
        try:
            return self.x[:, self.column_names.index(name)]
        except ValueError:
            raise MissingColumn(f"Unknown covariate column '{name}'") from None

    def design(
        self, include_centers: bool = True, columns: Sequence[str] | None = None
    ) -> tuple[np.ndarray, tuple[str, ...]]:
        """Return the covariate matrix and its column names.

        Center indicators are dropped when ``include_centers`` is false; an
        explicit ``columns`` list overrides both.
        """
        if columns is not None:
            idx = [self.column_names.index(c) for c in columns]
        else:
            idx = [
                j
                for j, col in enumerate(self.columns)
                if include_centers or col.role is not CovariateRole.CENTER_INDICATOR
            ]
        return self.x[:, idx], tuple(self.columns[j].name for j in idx)

    def subset(self, selector: np.ndarray | Sequence[int]) -> Dataset:
        """Rows picked by a boolean mask or positional indices; ids are kept."""
        selector = np.asarray(selector)
        return Dataset(
            schema=self.schema,
            ids=self.ids[selector],
            arms=self.arms[selector],
            z=self.z[selector],
            x=self.x[selector],
            y={name: values[selector] for name, values in self.y.items()},
        )

    def take(self, indices: np.ndarray) -> Dataset:
        """Rows at ``indices`` (repeats allowed) relabelled with fresh ids 0..m-1."""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            schema=self.schema,
            ids=np.arange(indices.size),
            arms=self.arms[indices],
            z=self.z[indices],
            x=self.x[indices],
            y={name: values[indices] for name, values in self.y.items()},
        )

    def positions(self, ids: Sequence[int]) -> np.ndarray:
        """Positional indices of the given unit ids."""
        lookup = {int(uid): i for i, uid in enumerate(self.ids)}
        try:
            return np.array([lookup[int(uid)] for uid in ids], dtype=np.int64)
        except KeyError as e:
            raise MissingData(f"Unknown unit id {e.args[0]}") from None

    def require_groups(self, min_per_group: int = 1) -> None:
        if self.n_treated < min_per_group or self.n_control < min_per_group:
            raise TooFewUnits(
                f"Need at least {min_per_group} treated and control units, "
                f"got {self.n_treated} treated and {self.n_control} control"
            )

    def to_frame(self, collapse_categoricals: bool = False) -> pd.DataFrame:
        frame = pd.DataFrame(
            {"id": self.ids, "arm": self.arms.astype(str), "z": self.z.astype(int)}
        )
        for cov in self.schema:
            cols = cov.design_columns()
            block = np.column_stack([self.column(c.name) for c in cols])
            if collapse_categoricals and cov.kind is CovariateKind.CATEGORICAL:
                labels = np.where(
                    block.sum(axis=1) == 0,
                    cov.levels[0],
                    np.asarray(cov.levels[1:], dtype=object)[block.argmax(axis=1)],
                )
                frame[cov.name] = labels
            elif cov.kind is CovariateKind.CONTINUOUS:
                frame[cov.name] = block[:, 0]
            else:
                for j, col in enumerate(cols):
                    frame[col.name] = block[:, j].astype(int)
        for name, values in self.y.items():
            frame[f"{OUTCOME_PREFIX}{name}"] = values
        return frame


def _numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    raw = frame[column].str.strip()
    values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(np.isnan(values))
    if bad.size:
        row = int(bad[0]) + 1
        raise NaNCell(f"Missing or non-numeric cell in row {row}, column '{column}'")
    return values


def load_csv(path: str | Path, schema: Sequence[CovariateSchema]) -> Dataset:
    """Read and validate a study CSV.

    Args:
        path: CSV file with reserved columns ``id,arm,z``, the schema's covariates
            and one or more ``y_``-prefixed outcome columns
        schema: Covariate declarations

    Returns:
        Dataset: Validated dataset with categorical covariates expanded

    Raises:
        MissingColumn, MissingData, NonBinaryTreatment, NaNCell,
        UnknownCategoryLevel: Each message names the offending row/column
    """
    schema = validate_schema(schema)
    try:
        frame = pd.read_csv(
            path, dtype=str, keep_default_na=False, encoding="utf-8", skipinitialspace=True
        )
    except pd.errors.EmptyDataError:
        raise MissingData(f"{path}: file is empty") from None
    frame.columns = [c.strip() for c in frame.columns]

    for column in (*RESERVED_COLUMNS, *(c.name for c in schema)):
        if column not in frame.columns:
            raise MissingColumn(f"{path}: missing column '{column}'")
    outcome_columns = [c for c in frame.columns if c.startswith(OUTCOME_PREFIX)]
    if not outcome_columns:
        raise MissingColumn(f"{path}: no outcome columns (prefix '{OUTCOME_PREFIX}')")
    known = set(RESERVED_COLUMNS) | {c.name for c in schema} | set(outcome_columns)
    extra = [c for c in frame.columns if c not in known]
    if extra:
        raise SchemaError(f"{path}: unexpected columns {', '.join(extra)}")
    if frame.empty:
        raise MissingData(f"{path}: no data rows")

    z = _numeric(frame, "z")
    if not np.isin(z, (0.0, 1.0)).all():
        row = int(np.flatnonzero(~np.isin(z, (0.0, 1.0)))[0]) + 1
        raise NonBinaryTreatment(f"{path}: treatment z must be 0 or 1 (row {row})")
    ids = _numeric(frame, "id")
    if not np.equal(np.mod(ids, 1), 0).all():
        raise SchemaError(f"{path}: ids must be integers")
    arms = frame["arm"].str.strip()
    bad_arm = ~arms.isin([a.value for a in Arm])
    if bad_arm.any():
        row = int(np.flatnonzero(bad_arm.to_numpy())[0]) + 1
        raise SchemaError(f"{path}: arm must be RCT or NRS (row {row})")

    blocks: list[np.ndarray] = []
    for cov in schema:
        if cov.kind is CovariateKind.CATEGORICAL:
            labels = frame[cov.name].str.strip()
            unknown = ~labels.isin(cov.levels)
            if unknown.any():
                row = int(np.flatnonzero(unknown.to_numpy())[0]) + 1
                raise UnknownCategoryLevel(
                    f"{path}: level '{labels.iloc[row - 1]}' of '{cov.name}' "
                    f"not in {list(cov.levels)} (row {row})"
                )
            blocks.append(
                np.column_stack(
                    [(labels == level).to_numpy(dtype=float) for level in cov.levels[1:]]
                )
            )
        else:
            blocks.append(_numeric(frame, cov.name)[:, None])

    outcomes = {
        c[len(OUTCOME_PREFIX) :]: _numeric(frame, c) for c in outcome_columns
    }
    dataset = Dataset(
        schema=schema,
        ids=ids.astype(np.int64),
        arms=arms.to_numpy(dtype=object),
        z=z.astype(np.int8),
        x=np.hstack(blocks) if blocks else np.empty((len(frame), 0)),
        y=outcomes,
    )
    logger.info(
        "loaded %s: %d units (%d treated, %d control)",
        path,
        dataset.n,
        dataset.n_treated,
        dataset.n_control,
    )
    return dataset


def dataset_csv_text(d: Dataset) -> str:
    """CSV text in the layout ``load_csv`` reads back; floats keep 17 digits."""
    return str(
        d.to_frame(collapse_categoricals=True).to_csv(index=False, float_format="%.17g")
    )


def write_csv(d: Dataset, path: str | Path) -> None:
    Path(path).write_text(dataset_csv_text(d), encoding="utf-8")


def arm_subset(d: Dataset, arm: Arm | str) -> Dataset:
    arm = Arm(arm)
    mask = d.arms == arm.value
    if not mask.any():
        raise EmptyArm(f"No units carry the arm tag {arm.value}")
    return d.subset(mask)


@dataclass(frozen=True)
class Moments:
    mean: float
    sd: float
    n: int


@dataclass(frozen=True)
class ColumnSummary:
    column: str
    treated: Moments
    control: Moments


def summarize(d: Dataset) -> list[ColumnSummary]:
    """Mean, sample sd (n-1) and count per covariate column by treatment group."""
    d.require_groups(min_per_group=2)
    treated = d.treated
    summaries = []
    for j, col in enumerate(d.columns):
        groups = []
        for mask in (treated, ~treated):
            values = d.x[mask, j]
            groups.append(
                Moments(float(values.mean()), float(values.std(ddof=1)), values.size)
            )
        summaries.append(ColumnSummary(col.name, groups[0], groups[1]))
    return summaries


def schema_to_list(schema: Sequence[CovariateSchema]) -> list[dict[str, object]]:
    return [
        {"name": c.name, "kind": c.kind.value, "role": c.role.value, "levels": list(c.levels)}
        for c in schema
    ]


def schema_from_list(data: Sequence[Mapping[str, object]]) -> tuple[CovariateSchema, ...]:
    """Inverse of ``schema_to_list``.

    Raises:
        SchemaError: An entry is malformed
    """
    try:
        schema = tuple(
            CovariateSchema(
                str(entry["name"]),
                CovariateKind(entry.get("kind", CovariateKind.CONTINUOUS.value)),
                CovariateRole(entry.get("role", CovariateRole.COVARIATE.value)),
                tuple(str(level) for level in entry.get("levels", ()) or ()),  # type: ignore[attr-defined]
            )
            for entry in data
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"Malformed schema entry: {e}") from None
    return validate_schema(schema)


def infer_schema(
    path: str | Path, center_columns: Sequence[str] = ("center",)
) -> tuple[CovariateSchema, ...]:
    """Guess a schema from a CSV header and its values.

    Numeric 0/1 columns become binary, other numeric columns continuous and
    anything non-numeric categorical; ``center_columns`` get the center role.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    frame.columns = [c.strip() for c in frame.columns]
    schema = []
    for column in frame.columns:
        if column in RESERVED_COLUMNS or column.startswith(OUTCOME_PREFIX):
            continue
        values = frame[column].str.strip()
        numeric = pd.to_numeric(values, errors="coerce")
        role = (
            CovariateRole.CENTER_INDICATOR
            if column in center_columns
            else CovariateRole.COVARIATE
        )
        if column in center_columns or numeric.isna().any():
            schema.append(
                CovariateSchema(
                    column, CovariateKind.CATEGORICAL, role, tuple(sorted(set(values)))
                )
            )
        elif set(numeric.unique()) <= {0.0, 1.0}:
            schema.append(CovariateSchema(column, CovariateKind.BINARY, role))
        else:
            schema.append(CovariateSchema(column, CovariateKind.CONTINUOUS, role))
    return validate_schema(schema)
