"""Table/JSON rendering of report rows on stdout."""

import json
from dataclasses import dataclass
from enum import Enum
from typing import Any

from rich.console import Console, JustifyMethod
from rich.table import Table


class OutputFormat(str, Enum):
    table = "table"
    json = "json"


@dataclass
class Column:
    header: str
    key: str
    style: str | None = None
    justify: JustifyMethod = "left"
    precision: int | None = None

    def cell(self, row: dict[str, Any]) -> str:
        value = row.get(self.key, "")
        if self.precision is not None and isinstance(value, float):
            return f"{value:.{self.precision}f}"
        return str(value)


def render(
    data: list[dict[str, Any]],
    format: OutputFormat,
    columns: list[Column] | None = None,
    footer: str | None = None,
    title: str | None = None,
) -> None:
    """Print report rows.

    JSON mode dumps the raw rows, floats untouched and non-ASCII kept (shapes use ``×``).
    Table mode applies each column's style, alignment and float precision, then prints
    the footer (e.g. "mean min val loss 0.41") under the table.
    """
    if format == OutputFormat.json:
        print(json.dumps(data, indent=2, ensure_ascii=False))
        return

    console = Console()
    if data:
        if columns is None:
            columns = [Column(header=key, key=key) for key in data[0]]

        table = Table(show_header=True, header_style="bold", title=title)
        for col in columns:
            table.add_column(col.header, style=col.style, justify=col.justify)
        for row in data:
            table.add_row(*(col.cell(row) for col in columns))
        console.print(table)

    if footer:
        console.print(f"\n{footer}")


def numeric_columns(keys: list[str], first: str, precision: int = 4) -> list[Column]:
    """Columns for a report whose first key is a label and the rest are right-aligned numbers."""
    numbers = [Column(k, k, justify="right", precision=precision) for k in keys if k != first]
    return [Column(first, first, style="bold"), *numbers]
