"""
 TVT-SR - Transfer VAE Training toolset for one-step super-resolution

 tvt_sr.tasks.common
 This module implements supporting classes and functions for tasks
"""
import logging
import csv
import re
import json
from collections import Counter, namedtuple
from numbers import Number
from pathlib import Path
from typing import Union, Optional, Any
from collections.abc import Sequence, Iterable, Iterator
from ..base.metrics import MetricRecord
from ..base.complexity import CostReport, CrossCheckRow, ReductionReport


class Tally(Counter):
    """ Message counts by log level, readable as attributes: tally.warning """
    def __getattr__(self, level: str) -> int:
        if level.startswith('_'):
            raise AttributeError(level)
        return self[level]

    def incr(self, level: str) -> None:
        self[level] += 1


class TableFilter:
    """
    Row predicate for Table.filtered. Marker rows always pass, empty cells count as a match.
    @param regex: Pattern searched in the cell text
    @param column: Index of the column to search, None searches every column
    @param inverse: Keep the rows that do not match instead
    """
    def __init__(self, regex: str, column: Optional[int] = None, inverse: bool = False) -> None:
        if column is not None and column < 0:
            raise ValueError(f'Invalid filter column {column}, must be a non-negative index')
        self.regex_pattern = re.compile(regex)
        self.column = column
        self.inverse = inverse

    def _matches(self, cell: Any) -> bool:
        return cell is None or self.regex_pattern.search(str(cell)) is not None

    def __call__(self, table_row: Optional[tuple]) -> bool:
        if table_row is None:
            return True
        cells = table_row if self.column is None else (table_row[self.column],)

        return any(map(self._matches, cells)) != self.inverse


def is_numeric(value: Any) -> bool:
    return isinstance(value, Number) and not isinstance(value, bool)


def format_cell(value: Any) -> str:
    """ Display text of a cell: thousands separators on integers, MAC and parameter counts get long """
    if isinstance(value, int) and not isinstance(value, bool):
        return f'{value:,}'
    return '' if value is None else str(value)


class Table:
    """
    Rows of values under a header, None rows are section markers.
    Floats are rounded on insertion. Console rendering right-aligns numeric columns, exports keep raw values.
    """
    DECIMAL_DIGITS = 4

    def __init__(self, *columns: str, name: Optional[str] = None, meta: Optional[str] = None) -> None:
        self.header = tuple(columns)
        self.name = name
        self.meta = meta
        self._row_class = namedtuple('Row', [f'column_{index}' for index in range(len(columns))])
        self._rows: list[Optional[tuple]] = []

    @classmethod
    def process_value(cls, value: Any) -> Any:
        return round(value, cls.DECIMAL_DIGITS) if isinstance(value, float) else value

    def _make_row(self, row_values: Iterable[Any]) -> tuple:
        return self._row_class(*(self.process_value(value) for value in row_values))

    def add(self, *row_values: Any) -> None:
        self._rows.append(self._make_row(row_values))

    def add_marker(self) -> None:
        self._rows.append(None)

    def extend(self, row_values_iter: Iterable[Iterable[Any]]) -> None:
        self._rows.extend(self._make_row(row_values) for row_values in row_values_iter)

    def filtered(self, *filter_fns: TableFilter) -> 'Table':
        """ New table with the rows every filter_fn allows """
        new_table = Table(*self.header, name=self.name, meta=self.meta)
        new_table._rows = [row for row in self._rows if all(filter_fn(row) for filter_fn in filter_fns)]
        return new_table

    @property
    def data_rows(self) -> list[tuple]:
        return [row for row in self._rows if row is not None]

    def __iter__(self):
        return iter(self._rows)

    def __len__(self) -> int:
        return len(self.data_rows)

    def __str__(self) -> str:
        return '\n'.join(self.pretty_iter())

    def pretty_iter(self) -> Iterator[str]:
        rows = self.data_rows
        numeric = [bool(rows) and all(is_numeric(row[index]) or row[index] is None for row in rows)
                   for index in range(len(self.header))]
        widths = [max([len(title)] + [len(format_cell(row[index])) for row in rows])
                  for index, title in enumerate(self.header)]

        def render(cells: Iterable[str]) -> str:
            aligned = (cell.rjust(width) if right else cell.ljust(width)
                       for cell, width, right in zip(cells, widths, numeric))
            return '| ' + ' | '.join(aligned) + ' |'

        rule = '+' + '+'.join('-' * (width + 2) for width in widths) + '+'
        if self.name is not None:
            yield f'*** {self.name} ***'
        yield rule.replace('-', '=')
        yield render(self.header)
        yield rule.replace('-', '=')

        # Consecutive or trailing markers collapse into one rule
        pending_rule = emitted = False
        for row in self._rows:
            if row is None:
                pending_rule = emitted
                continue
            if pending_rule:
                yield rule
                pending_rule = False
            yield render(format_cell(value) for value in row)
            emitted = True
        if rows:
            yield rule
        if self.meta is not None:
            yield self.meta

    def dict(self) -> dict:
        return {
            'header': {
                'name': self.name or '',
                'title': dict(zip(self._row_class._fields, self.header)),
            },
            'data': [row._asdict() for row in self.data_rows],
        }

    def json(self, **dumps_kwargs: Any) -> str:
        return json.dumps(self.dict(), **dumps_kwargs)

    def save(self, filename: Union[str, Path]) -> None:
        """ CSV export, markers are dropped """
        with open(filename, 'w', newline='') as csv_file:
            writer = csv.writer(csv_file)
            writer.writerow(self.header)
            writer.writerows(self.data_rows)


def get_table_filters(exclude_regex: Optional[str], include_regex: Optional[str]) -> Sequence[TableFilter]:
    filters = []
    if exclude_regex is not None:
        filters.append(TableFilter(exclude_regex, inverse=True))
    if include_regex is not None:
        filters.append(TableFilter(include_regex))

    return filters


def filtered_tables(tables: Sequence[Table], *filter_fns: TableFilter) -> Sequence[Table]:
    if not filter_fns:
        return tables

    filtered_table_iter = (table.filtered(*filter_fns) for table in tables)

    return [filtered_table for filtered_table in filtered_table_iter if filtered_table]


#
# Table builders
#
def metric_table(records: Iterable[MetricRecord], name: Optional[str] = None, label: Optional[str] = None) -> Table:
    """
    One row per MetricRecord. With label, a leading column identifies the model or method the records belong to.
    """
    columns = ('Metric', 'Mean', 'Count')
    table = Table(*(('Model',) + columns if label is not None else columns), name=name)
    for record in records:
        row = (record.name, record.mean, record.count)
        table.add(*((label,) + row if label is not None else row))

    return table


def loss_table(records: Sequence[dict[str, Any]], name: Optional[str] = None) -> Table:
    """ Final training-log record of each phase in records """
    table = Table('Phase', 'Steps', 'L1', 'LPIPS', 'GAN', 'KL', 'VSD', 'Total', name=name)
    last_records: dict[str, dict[str, Any]] = {}
    for record in records:
        last_records[record['phase']] = record
    table.extend(
        (phase, record['step'] + 1, record['l1'], record['lpips'], record['gan_g'], record['kl'], record['vsd'],
         record['total'])
        for phase, record in last_records.items()
    )

    return table


def cost_table(report: CostReport, name: Optional[str] = None) -> Table:
    table = Table('Layer', 'Kind', 'Params', 'MACs', 'Attention MACs', name=name)
    table.extend((layer.name, layer.kind, layer.params, layer.macs, layer.attention_macs) for layer in report)
    table.add_marker()
    table.add('total', '', report.params, report.macs, report.attention_macs)

    return table


def cost_summary_table(report: CostReport, name: Optional[str] = None) -> Table:
    table = Table('Kind', 'Params', 'MACs', 'GMACs', name=name)
    table.extend((kind, params, macs, macs / 1e9) for kind, (params, macs) in sorted(report.by_kind().items()))
    table.add_marker()
    table.add('total', report.params, report.macs, report.macs / 1e9)
    table.meta = f'FLOPs (2 x (MACs + attention MACs)): {report.flops / 1e9:.2f}G'

    return table


def reduction_table(reduction: ReductionReport, name: Optional[str] = None) -> Table:
    table = Table('Measure', 'Reduction (%)', name=name)
    table.extend(zip(reduction._fields, reduction))

    return table


def crosscheck_table(rows: Iterable[CrossCheckRow], name: Optional[str] = None) -> Table:
    table = Table('Item', 'Metric', 'Published', 'Audited', 'Delta (%)', name=name)
    table.extend((row.item, row.metric, row.published, row.audited, row.delta_pct) for row in rows)

    return table


class Task:
    """ Base of the CLI tasks: a static argparse parser, a runner returning printable tables, counted log helpers """
    OUTCOME_LEVELS = (('warning', 'warnings'),)

    def __init__(self) -> None:
        self.log_count = Tally()

    def log_info(self, msg: str, *args) -> None:
        self._log('info', msg, *args)

    def log_warning(self, msg: str, *args) -> None:
        self._log('warning', msg, *args)

    def _log(self, level: str, msg: str, *args) -> None:
        """ Log through the task class logger, %-style args, and count the message under its level """
        getattr(logging.getLogger(type(self).__name__), level)(msg, *args)
        self.log_count.incr(level)

    def outcome(self, success_msg: str, failure_msg: str) -> str:
        """ failure_msg when warnings were logged, its {tally} field holds the count """
        counts = [f'{self.log_count[level]} {label}' for level, label in self.OUTCOME_LEVELS if self.log_count[level]]
        return failure_msg.format(tally=', '.join(counts)) if counts else success_msg

    @staticmethod
    def parser(task_args, **kwargs):
        raise NotImplementedError()

    def runner(self, parsed_args) -> Union[None, list]:
        """
        @return: Objects printed with str() once the task completes, None when everything went to files
        """
        raise NotImplementedError()

    def table_output(self, parsed_args, tables: Sequence[Table]) -> Union[None, list]:
        """
        Apply --exclude/--include filters, export to --save-csv/--save-json when requested
        @return: Tables to display, None if they were exported
        """
        filters = get_table_filters(getattr(parsed_args, 'exclude', None), getattr(parsed_args, 'include', None))
        tables = filtered_tables(tables, *filters)
        if not tables:
            return None

        save_csv = getattr(parsed_args, 'save_csv', None)
        if save_csv is not None:
            for index, table in enumerate(tables):
                filename = save_csv if index == 0 else indexed_filename(save_csv, index)
                table.save(filename)
                self.log_info(f"Table exported as CSV file '{filename}'")

        save_json = getattr(parsed_args, 'save_json', None)
        if save_json is not None:
            export_json(tables, save_json)
            self.log_info(f"Tables exported as JSON file '{save_json}'")

        return list(tables) if (save_csv is None and save_json is None) else None


class TaskException(Exception):
    """ Exception for Task errors """
    pass


def indexed_filename(filename: str, index: int) -> str:
    """ report.csv, 2 -> report_2.csv """
    stem, dot, suffix = filename.rpartition('.')
    return f'{stem}_{index}.{suffix}' if dot else f'{filename}_{index}'


def export_json(tables: Iterable[Table], filename: Union[str, Path]) -> None:
    """ All tables in one JSON document, a list of {header, data} objects """
    Path(filename).write_text(json.dumps([table.dict() for table in tables], indent=2))
