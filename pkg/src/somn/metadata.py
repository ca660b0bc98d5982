"""Subject metadata tables: age, sex, BMI per subject id.

Accepts comma- or tab-delimited text with a header row. Missing age/BMI
cells parse to None and are imputed later from training-split means;
out-of-range values are rejected outright.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DataError

_ID_COLUMNS = ("subject_id", "nsrrid", "id")
_AGE_COLUMNS = ("age_years", "age")
_SEX_COLUMNS = ("sex", "gender")
_BMI_COLUMNS = ("bmi_kg_m2", "bmi")

_SEX_VALUES = {
    "m": "male", "male": "male", "1": "male",
    "f": "female", "female": "female", "2": "female",
}


@dataclass
class SubjectMetadata:
    subject_id: str
    age_years: float | None
    sex: str | None
    bmi_kg_m2: float | None

    @property
    def needs_imputation(self) -> bool:
        return self.age_years is None or self.bmi_kg_m2 is None or self.sex is None


def _find_column(header: list[str], names: tuple[str, ...]) -> int | None:
    lowered = [h.strip().lower() for h in header]
    for name in names:
        if name in lowered:
            return lowered.index(name)
    return None


def parse_metadata_table(text: str) -> list[SubjectMetadata]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty metadata table")
    delim = "\t" if "\t" in lines[0] else ","
    header = lines[0].split(delim)

    id_col = _find_column(header, _ID_COLUMNS)
    if id_col is None:
        raise DataError(f"metadata table has no subject id column (looked for {_ID_COLUMNS})")
    age_col = _find_column(header, _AGE_COLUMNS)
    sex_col = _find_column(header, _SEX_COLUMNS)
    bmi_col = _find_column(header, _BMI_COLUMNS)

    out: list[SubjectMetadata] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in line.split(delim)]

        def cell(col: int | None) -> str:
            if col is None or col >= len(cells):
                return ""
            return cells[col]

        sid = cell(id_col)
        if not sid:
            raise DataError(f"metadata line {lineno}: empty subject id")
        if sid in seen:
            raise DataError(f"metadata line {lineno}: duplicate subject id {sid!r}")
        seen.add(sid)

        age: float | None = None
        if cell(age_col):
            try:
                age = float(cell(age_col))
            except ValueError as exc:
                raise DataError(f"metadata line {lineno}: bad age {cell(age_col)!r}") from exc
            if not 0.0 < age < 120.0:
                raise DataError(f"metadata line {lineno}: age {age} outside (0, 120)")

        sex: str | None = None
        if cell(sex_col):
            sex = _SEX_VALUES.get(cell(sex_col).lower())
            if sex is None:
                raise DataError(f"metadata line {lineno}: bad sex value {cell(sex_col)!r}")

        bmi: float | None = None
        if cell(bmi_col):
            try:
                bmi = float(cell(bmi_col))
            except ValueError as exc:
                raise DataError(f"metadata line {lineno}: bad BMI {cell(bmi_col)!r}") from exc
            if not 10.0 < bmi < 80.0:
                raise DataError(f"metadata line {lineno}: BMI {bmi} outside (10, 80)")

        out.append(SubjectMetadata(subject_id=sid, age_years=age, sex=sex, bmi_kg_m2=bmi))
    return out


def write_metadata_table(rows: list[SubjectMetadata]) -> str:
    lines = ["subject_id,age,sex,bmi"]
    for r in rows:
        age = "" if r.age_years is None else f"{r.age_years:g}"
        sex = "" if r.sex is None else ("M" if r.sex == "male" else "F")
        bmi = "" if r.bmi_kg_m2 is None else f"{r.bmi_kg_m2:g}"
        lines.append(f"{r.subject_id},{age},{sex},{bmi}")
    return "\n".join(lines) + "\n"
