import json
import logging
from unittest import TestCase

import matplotlib

matplotlib.use('Agg')
from matplotlib import pyplot as plt

from richwasm.core.interp import Store
from richwasm.core.ir import Mem, RefV, StructHT, StructHV
from richwasm.util.utils import (DIAGNOSTIC_COLUMNS, CheckError, SourceSpan, configure_logging, diagnostics_to_df,
                                 error, referenced_locations, visualize_store)


class TestDiagnostics(TestCase):
    def setUp(self) -> None:
        self.located = error('LIN001', 'local 0 was already moved', SourceSpan('a.rwasm', (3, 5), (3, 20)))
        self.bare = error('CLI001', 'no such file')

    def test_text(self) -> None:
        self.assertEqual(str(self.located), 'a.rwasm:3:5: error LIN001: local 0 was already moved')
        self.assertEqual(str(self.bare), 'error CLI001: no such file')

    def test_json(self) -> None:
        record = json.loads(self.located.to_json())
        self.assertEqual(record, {'code': 'LIN001', 'severity': 'error', 'file': 'a.rwasm', 'line': 3,
                                  'column': 5, 'message': 'local 0 was already moved'})
        self.assertIsNone(json.loads(self.bare.to_json())['line'])

    def test_dataframe(self) -> None:
        df = diagnostics_to_df(CheckError([self.located, self.bare]).diagnostics)
        self.assertEqual(list(df.columns), DIAGNOSTIC_COLUMNS)
        self.assertEqual(list(df['code']), ['LIN001', 'CLI001'])
        self.assertEqual(df['line'][0], 3)

    def test_unknown_code(self) -> None:
        with self.assertRaises(AssertionError):
            error('XYZ999', 'nope')

    def test_error_code(self) -> None:
        self.assertEqual(CheckError([self.located, self.bare]).code, 'LIN001')

    def test_logging_levels(self) -> None:
        for verbosity, level in [(0, logging.WARNING), (1, logging.INFO), (5, logging.DEBUG)]:
            configure_logging(verbosity)
            self.assertEqual(logging.getLogger('richwasm').level, level)
        configure_logging(0)


class TestStorePlot(TestCase):
    def setUp(self) -> None:
        self.store = Store()
        inner = self.store.allocate(Mem.LIN, StructHV(()), 32, StructHT(()))
        self.outer = self.store.allocate(Mem.UNR, StructHV((RefV(inner),)), 32, StructHT(()))
        self.inner = inner

    def test_references(self) -> None:
        self.assertEqual(referenced_locations(self.store.read(self.outer)), [self.inner])

    def test_visualize_store(self) -> None:
        fig, ax = visualize_store(self.store, title='two cells')
        self.assertIsNotNone(fig)
        self.assertEqual(len(ax.patches), 2)
        self.assertEqual(ax.get_title(), 'two cells')
        plt.close(fig)

    def test_visualize_into_axes(self) -> None:
        fig, ax = plt.subplots()
        none, same = visualize_store(self.store, ax=ax)
        self.assertIsNone(none)
        self.assertIs(same, ax)
        plt.close(fig)
