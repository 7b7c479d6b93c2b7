"""
Schema of the results database and the clear-then-insert refresh every
experiment command uses to store its rows.
"""
import logging
import math

logger = logging.getLogger(__name__)

RESULT_TABLES = {
    'surface': [
        ('ber', 'REAL'),
        ('bandwidth', 'INTEGER'),
        ('acc', 'REAL'),
        ('sim', 'REAL'),
        ('n', 'INTEGER'),
        ('true_sim', 'REAL'),
        ('PRIMARY KEY', '(ber, bandwidth)'),
    ],
    'harq_rounds': [
        ('theta', 'REAL'),
        ('ber', 'REAL'),
        ('session', 'INTEGER'),
        ('step', 'INTEGER'),
        ('bits', 'INTEGER'),
        ('score', 'REAL'),
        ('decision', 'TEXT'),
        ('digest', 'TEXT'),
    ],
    'harq_summary': [
        ('theta', 'REAL'),
        ('ber', 'REAL'),
        ('bandwidth', 'REAL'),
        ('acc', 'REAL'),
        ('mean_final_t', 'REAL'),
        ('n', 'INTEGER'),
        ('PRIMARY KEY', '(theta, ber)'),
    ],
    'gaps': [
        ('theta', 'REAL'),
        ('ber', 'REAL'),
        ('bandwidth', 'REAL'),
        ('harq_acc', 'REAL'),
        ('surface_acc', 'REAL'),
        ('gap_pp', 'REAL'),
        ('PRIMARY KEY', '(theta, ber)'),
    ],
    'baseline': [
        ('ber', 'REAL'),
        ('bandwidth', 'REAL'),
        ('acc', 'REAL'),
        ('crc_success', 'REAL'),
        ('n', 'INTEGER'),
        ('fec', 'TEXT'),
        ('PRIMARY KEY', '(ber)'),
    ],
    'baseline_rounds': [
        ('ber', 'REAL'),
        ('session', 'INTEGER'),
        ('step', 'INTEGER'),
        ('bits', 'INTEGER'),
        ('decision', 'TEXT'),
    ],
}


def table_columns(table):
    return [name for name, _ in RESULT_TABLES[table] if name != 'PRIMARY KEY']


def setup_results_db(conn):
    """Create the result tables or add missing columns if they already exist."""
    c = conn.cursor()
    for table_name, columns in RESULT_TABLES.items():
        c.execute("SELECT name FROM sqlite_master WHERE type='table' AND name=?", (table_name,))
        if c.fetchone() is None:
            columns_sql = []
            primary_key = None
            for col_name, col_type in columns:
                if col_name == 'PRIMARY KEY':
                    primary_key = f"PRIMARY KEY {col_type}"
                else:
                    columns_sql.append(f"{col_name} {col_type}")
            if primary_key:
                columns_sql.append(primary_key)
            c.execute(f"CREATE TABLE {table_name} ({', '.join(columns_sql)})")
            logger.debug(f"Created table: {table_name}")
        else:
            c.execute(f"PRAGMA table_info({table_name})")
            existing_columns = {row[1] for row in c.fetchall()}
            for col_name, col_type in columns:
                if col_name != 'PRIMARY KEY' and col_name not in existing_columns:
                    c.execute(f"ALTER TABLE {table_name} ADD COLUMN {col_name} {col_type}")
                    logger.info(f"Added missing column to {table_name}: {col_name} {col_type}")
    c.execute('CREATE INDEX IF NOT EXISTS idx_harq_rounds_key ON harq_rounds(theta, ber, session)')
    c.execute('CREATE INDEX IF NOT EXISTS idx_baseline_rounds_key ON baseline_rounds(ber, session)')
    conn.commit()


def _sql_value(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    if hasattr(value, 'item'):
        return _sql_value(value.item())
    return value


def replace_rows(conn, table, rows):
    """Clear `table` and insert `rows` (dicts keyed by column name)."""
    columns = table_columns(table)
    c = conn.cursor()
    c.execute(f'DELETE FROM {table}')
    placeholders = ', '.join('?' for _ in columns)
    c.executemany(f"INSERT INTO {table} ({', '.join(columns)}) VALUES ({placeholders})",
                  [tuple(_sql_value(row.get(col)) for col in columns) for row in rows])
    conn.commit()
    logger.info(f"Stored {len(rows)} rows in {table}")
    return len(rows)
