"""
sqlite access to the experiment results store.

ResultsDatabase opens the file named by paths.results_db, applies the
connection pragmas, brings the result tables up to the current schema and
commits on a clean exit (rolls back otherwise).
"""
import logging
import os
import sqlite3

from utils.config_loader import load_config, get_config_value
from utils.results_schema import setup_results_db

logger = logging.getLogger(__name__)

DEFAULT_RESULTS_DB = 'results/spikeharq_results.db'
# Sweep workers only write through the main thread, so NORMAL sync is enough under WAL.
CONNECTION_PRAGMAS = ('journal_mode=WAL', 'synchronous=NORMAL', 'foreign_keys=ON')


class ResultsDatabase:
    def __init__(self, db_path, ensure_schema=True):
        self.db_path = db_path
        self.ensure_schema = ensure_schema
        self.connection = None

    def __enter__(self):
        os.makedirs(os.path.dirname(os.path.abspath(self.db_path)), exist_ok=True)
        self.connection = sqlite3.connect(self.db_path)
        for pragma in CONNECTION_PRAGMAS:
            self.connection.execute(f'PRAGMA {pragma};')
        if self.ensure_schema:
            setup_results_db(self.connection)
        return self.connection

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.connection:
            if exc_type is None:
                self.connection.commit()
            else:
                logger.warning(f"Rolling back {self.db_path} after {exc_type.__name__}: {exc_val}")
                self.connection.rollback()
            self.connection.close()
            self.connection = None


def results_db_path(config=None):
    config = load_config() if config is None else config
    return get_config_value(config, 'paths', 'results_db', default=DEFAULT_RESULTS_DB)


def get_db_connection(db_path=None, ensure_schema=True):
    """Context manager over the results database; the path defaults to paths.results_db."""
    db_path = results_db_path() if db_path is None else db_path
    logger.debug(f"Opening results database {db_path}")
    return ResultsDatabase(db_path, ensure_schema=ensure_schema)
