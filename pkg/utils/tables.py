from texttable import Texttable

MAX_TABLE_WIDTH = 160


def render_table(rows, columns, precision=4):
    """Rows of dicts as a plain-text table; missing cells render empty."""
    table = Texttable(max_width=MAX_TABLE_WIDTH)
    table.set_deco(Texttable.HEADER)
    table.set_precision(precision)
    table.set_cols_dtype(['a'] * len(columns))
    table.header(list(columns))

    for row in rows:
        table.add_row([_cell(row.get(c, '')) for c in columns])

    return table.draw()


def _cell(value):
    if value is None:
        return ''

    if isinstance(value, str):
        try:
            return float(value) if '.' in value or 'e' in value.lower() else int(value)
        except ValueError:
            return value

    return value
