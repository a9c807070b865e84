import os
from typing import Optional
import pandas as pd

SCHEMA_VERSION = 1

#column order of every table written by the package
SCHEMAS = {
    'schedule': ['layer', 'raw_ratio', 'clamped_ratio'],
    'cost': ['layer', 'ratio', 'processed_tokens', 'flops', 'baseline_flops', 'kv_entries', 'baseline_kv_entries'],
    'cost_summary': ['metric', 'value'],
    'ablation': ['experiment', 'label', 'seed', 'accuracy', 'router_auc', 'mean_retention', 'flops_ratio', 'final_loss'],
    'probe': ['group', 'layers', 'ratio', 'accuracy', 'kl_divergence'],
    'trace': ['sample', 'layer', 'token_index', 'selected', 'normalized_weight'],
    'loss_curve': ['step', 'loss'],
    'overflow': ['case', 'factor', 'first_overflow_layer_fp16', 'first_overflow_layer_fp64'],
}


def schema_header(schema: str) -> str:
    """Comment line identifying a table schema, e.g. `# pmodlab schedule/v1`."""
    return f"# pmodlab {schema}/v{SCHEMA_VERSION}"


def _check_folder(folder: str) -> None:
    if not os.path.isdir(folder):
        raise FileNotFoundError(f"🛑 Output folder {folder} does not exist. Please provide a valid folder")


def _ordered(table: pd.DataFrame, schema: str) -> pd.DataFrame:
    if schema not in SCHEMAS:
        raise KeyError(f"🛑 Unknown table schema '{schema}'")
    missing = [c for c in SCHEMAS[schema] if c not in table.columns]
    if missing:
        raise ValueError(f"🛑 Table is missing column(s) {missing} of schema '{schema}'")
    return table[SCHEMAS[schema]]


def write_table(table: pd.DataFrame, folder: str, name: str, schema: str, prefix: str = '') -> str:
    """
    Write one table as a CSV file headed by its schema line.

    Parameters
    ----------
    table
        The data frame to write; extra columns are dropped and the schema order is enforced.
    folder
        Existing output folder.
    name
        File name without extension.
    schema
        One of the keys of :data:`SCHEMAS`.
    prefix
        Prefix for the output file. Default to no prefix used.

    Returns
    ----------
    str
        Path of the written file.
    """
    _check_folder(folder)
    path = os.path.join(folder, f"{prefix}{name}.csv")
    with open(path, 'w', encoding = 'utf-8', newline = '') as fh:
        fh.write(schema_header(schema) + '\n')
        _ordered(table, schema).to_csv(fh, index = False)
    return path


def write_tables(tables: dict, folder: str, prefix: str = '', xlsx: bool = False) -> list:
    """
    Write several tables at once.

    Parameters
    ----------
    tables
        Mapping of file name -> (data frame, schema).
    folder
        Existing output folder.
    prefix
        Prefix for the output files. Default to no prefix used.
    xlsx
        Whether to merge the tables into a single Excel (.xlsx), one sheet per table.
        (Default: `False`)

    Returns
    ----------
    list
        Paths of the written files.
    """
    _check_folder(folder)
    if not xlsx:
        return [write_table(table, folder, name, schema, prefix) for name, (table, schema) in tables.items()]
    path = os.path.join(folder, f"{prefix}pmodlab_result.xlsx")
    with pd.ExcelWriter(path) as writer:
        for name, (table, schema) in tables.items():
            _ordered(table, schema).to_excel(writer, sheet_name = name[:31], index = False)
    return [path]


def read_table(path: str, schema: Optional[str] = None) -> pd.DataFrame:
    """
    Read a CSV written by :func:`write_table`.

    Parameters
    ----------
    path
        Path to the CSV file.
    schema
        If given, check the header line against it.

    Returns
    ----------
    :class:`~pandas.DataFrame`
        The table without its header line.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"🛑 No such file: {path}")
    if schema is not None:
        with open(path, 'rt', encoding = 'utf-8') as fh:
            first = fh.readline().rstrip('\n')
        if first != schema_header(schema):
            raise ValueError(f"🛑 {path} is not a '{schema}' table (header: {first!r})")
    return pd.read_csv(path, comment = '#')
