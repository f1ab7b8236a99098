"""Tests for mortality tables and the table training set."""

import logging
from pathlib import Path

import numpy as np
import pytest

from premium_calibration.actuarial import ALIVE
from premium_calibration.actuarial import DEAD
from premium_calibration.actuarial import PAYMENT_STYLES
from premium_calibration.actuarial import is_transition_matrix
from premium_calibration.errors import InputError
from premium_calibration.errors import SchemaError
from premium_calibration.mortality import A_MAX
from premium_calibration.mortality import MortalityTable
from premium_calibration.mortality import build_dav_dataset
from premium_calibration.mortality import load_table
from premium_calibration.mortality import subannual_matrix
from premium_calibration.mortality import synthetic_table
from premium_calibration.mortality import write_table


def write_rows(path: Path, rows: list[str], header: str = "age,q_male,q_female") -> Path:
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return path


def full_rows(overrides: dict[int, str] | None = None, skip: int | None = None) -> list[str]:
    overrides = overrides or {}
    rows = []
    for age in range(A_MAX + 1):
        if age == skip:
            continue
        rows.append(overrides.get(age, f"{age},0.01,0.008"))
    return rows


class TestLoadTable:
    """Tests for table CSV parsing."""

    def test_parses_values(self, temp_dir: Path):
        """Row '40,0.001,0.0008' yields the male and female rates."""
        path = write_rows(temp_dir / "table.csv", full_rows({40: "40,0.001,0.0008"}))
        table = load_table(path)
        assert table.q_at(40, "male") == 0.001
        assert table.q_at(40, "female") == 0.0008
        assert table.a_max == A_MAX
        assert table.name == "table"

    def test_missing_age_named(self, temp_dir: Path):
        """A gap in the ages is a schema error naming the age."""
        path = write_rows(temp_dir / "table.csv", full_rows(skip=77))
        with pytest.raises(SchemaError, match="missing age 77"):
            load_table(path)

    def test_probability_out_of_range(self, temp_dir: Path):
        """q = 1.5 is rejected with its row number."""
        path = write_rows(temp_dir / "table.csv", full_rows({10: "10,1.5,0.1"}))
        with pytest.raises(SchemaError, match="probability out of range") as excinfo:
            load_table(path)
        assert excinfo.value.row == 12

    def test_duplicate_age(self, temp_dir: Path):
        rows = full_rows()
        rows.insert(5, "3,0.01,0.01")
        with pytest.raises(SchemaError, match="duplicate age 3"):
            load_table(write_rows(temp_dir / "table.csv", rows))

    def test_wrong_header(self, temp_dir: Path):
        path = write_rows(temp_dir / "table.csv", full_rows(), header="age,male,female")
        with pytest.raises(SchemaError, match="header"):
            load_table(path)

    def test_non_numeric_value(self, temp_dir: Path):
        path = write_rows(temp_dir / "table.csv", full_rows({2: "2,abc,0.1"}))
        with pytest.raises(SchemaError, match="not a number"):
            load_table(path)

    def test_missing_file(self, temp_dir: Path):
        """A missing file is an input error naming the path."""
        with pytest.raises(InputError, match="nope.csv"):
            load_table(temp_dir / "nope.csv")

    def test_round_trip_with_writer(self, temp_dir: Path, table: MortalityTable):
        """write_table output loads back to the same rates."""
        path = temp_dir / "synthetic.csv"
        write_table(table, path)
        loaded = load_table(path)
        np.testing.assert_array_equal(loaded.q_male, table.q_male)
        np.testing.assert_array_equal(loaded.q_female, table.q_female)
        assert path.read_text().splitlines()[0] == "age,q_male,q_female"


class TestSyntheticTable:
    """Tests for the bundled synthetic table."""

    def test_covers_all_ages(self, table: MortalityTable):
        assert len(table.q_male) == A_MAX + 1
        assert table.name == "synthetic-gompertz-makeham"

    def test_shorter_table(self, table: MortalityTable):
        short = synthetic_table(a_max=100)
        assert short.a_max == 100
        np.testing.assert_array_equal(short.q_male, table.q_male[:101])

    def test_increasing_and_bounded(self, table: MortalityTable):
        """Gompertz-Makeham rates increase with age and stay probabilities."""
        for gender in ("male", "female"):
            q = table.q(gender)
            assert np.all(np.diff(q) >= 0)
            assert np.all((q >= 0) & (q <= 1))

    def test_females_below_males(self, table: MortalityTable):
        assert np.all(table.q_female[:100] < table.q_male[:100])

    def test_unknown_gender(self, table: MortalityTable):
        with pytest.raises(ValueError):
            table.q("other")


class TestSubannualMatrix:
    """Tests for sub-annual one-step matrices."""

    def test_monthly_division(self):
        """q=0.012 and m=12 give a monthly death probability of 0.001."""
        q = np.full(A_MAX + 1, 0.012)
        table = MortalityTable(q_male=q, q_female=q)
        assert subannual_matrix(table, 40, 12, "male")[ALIVE, DEAD] == pytest.approx(0.001)

    def test_annual_reads_table(self, table: MortalityTable):
        """m=1 embeds the table value exactly."""
        assert subannual_matrix(table, 50, 1, "female")[ALIVE, DEAD] == table.q_female[50]

    @pytest.mark.parametrize("m", PAYMENT_STYLES)
    def test_scaling_and_validity(self, table: MortalityTable, m: int):
        """m * pi_01(a, m) = pi_01(a, 1) and every matrix is valid."""
        for age in (0, 40, 121):
            matrix = subannual_matrix(table, age, m, "male")
            assert is_transition_matrix(matrix)
            assert m * matrix[ALIVE, DEAD] == pytest.approx(subannual_matrix(table, age, 1, "male")[ALIVE, DEAD])

    def test_invalid_style(self, table: MortalityTable):
        with pytest.raises(ValueError):
            subannual_matrix(table, 40, 3, "male")

    def test_clamps_old_ages_once(self, table: MortalityTable, caplog):
        """Ages beyond a_max clamp to a_max with a single warning."""
        with caplog.at_level(logging.WARNING):
            first = subannual_matrix(table, 130, 1, "male")
            second = subannual_matrix(table, 140, 1, "male")
        assert first[ALIVE, DEAD] == table.q_male[A_MAX]
        assert second[ALIVE, DEAD] == table.q_male[A_MAX]
        assert sum("clamping" in r.message for r in caplog.records) == 1


class TestBuildDavDataset:
    """Tests for the table training set."""

    def test_record_count(self, table: MortalityTable):
        """122 ages times 4 payment styles."""
        dataset = build_dav_dataset(table, "male")
        assert len(dataset) == 488
        assert dataset.features.shape == (488, 2)
        assert dataset.targets.shape == (488, 2, 2)

    def test_age_scaling_endpoints(self, table: MortalityTable):
        """Age 0 scales to 0 and age 121 to 1."""
        dataset = build_dav_dataset(table, "female")
        assert dataset.features[dataset.ages == 0, 0].max() == 0.0
        assert dataset.features[dataset.ages == A_MAX, 0].min() == 1.0

    def test_targets_are_subannual_matrices(self, table: MortalityTable):
        dataset = build_dav_dataset(table, "male")
        row = np.flatnonzero((dataset.ages == 40) & (dataset.styles == 12))[0]
        target = dataset.targets[row]
        assert target[ALIVE].sum() == pytest.approx(1.0)
        np.testing.assert_allclose(target, subannual_matrix(table, 40, 12, "male"))
