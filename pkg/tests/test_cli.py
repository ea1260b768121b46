import io
import json
import os
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from unittest import TestCase, mock

from richwasm.cli import ENGINE_VARIABLE, EXIT_DIAGNOSTICS, EXIT_OK, EXIT_USAGE, main


def call(*argv: str):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


class TestCommands(TestCase):
    def setUp(self) -> None:
        self.data = 'tests/data'

    def test_check(self) -> None:
        code, out, _ = call('check', f'{self.data}/add.rwasm')
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(out, 'add: ok (2 functions, 0 globals)\n')

    def test_check_reports_diagnostics(self) -> None:
        code, out, err = call('check', f'{self.data}/counter_readonly.rwasm')
        self.assertEqual(code, EXIT_DIAGNOSTICS)
        self.assertIn('CAP002', err)
        self.assertIn('counter_readonly.rwasm:', err)

        code, out, _ = call('--json', 'check', f'{self.data}/counter_readonly.rwasm')
        self.assertEqual(code, EXIT_DIAGNOSTICS)
        self.assertEqual(json.loads(out.splitlines()[0])['code'], 'CAP002')

    def test_run(self) -> None:
        self.assertEqual(call('run', f'{self.data}/add.rwasm')[:2], (EXIT_OK, '5\n'))
        self.assertEqual(call('run', f'{self.data}/oob_array.rwasm', '--entry', 'read', '--args', '1')[:2],
                         (EXIT_OK, '7\n'))
        self.assertEqual(call('run', f'{self.data}/oob_array.rwasm')[:2], (EXIT_DIAGNOSTICS, 'TRAP\n'))

    def test_run_linked_frontends(self) -> None:
        code, out, _ = call('run', f'ml={self.data}/stash_fixed.mlx', f'{self.data}/stash_client_fixed.l3')
        self.assertEqual((code, out), (EXIT_OK, '42\n'))

    def test_usage_errors(self) -> None:
        code, _, err = call('run', f'{self.data}/missing.rwasm')
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn('CLI001', err)
        code, _, err = call('check', 'README.md')
        self.assertEqual(code, EXIT_USAGE)
        with self.assertRaises(SystemExit) as context:
            call('frobnicate')
        self.assertEqual(context.exception.code, 2)

    def test_lower(self) -> None:
        with mock.patch.dict(os.environ):
            os.environ.pop(ENGINE_VARIABLE, None)
            code, out, _ = call('lower', f'{self.data}/add.rwasm', '--run')
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(out.startswith('(module'))
        self.assertEqual(out.splitlines()[-1], '5')

    def test_lower_to_files(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            binary, text = Path(tmp) / 'add.wasm', Path(tmp) / 'add.wat'
            self.assertEqual(call('lower', f'{self.data}/add.rwasm', '-o', str(binary))[0], EXIT_OK)
            self.assertEqual(binary.read_bytes()[:4], b'\x00asm')
            self.assertEqual(call('lower', f'{self.data}/add.rwasm', '-o', str(text))[0], EXIT_OK)
            self.assertTrue(text.read_text().startswith('(module'))

    def test_compile(self) -> None:
        code, out, _ = call('compile-ml', f'{self.data}/stash_fixed.mlx')
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(out.startswith('(module'))
        code, out, _ = call('compile-l3', f'{self.data}/stash_client_fixed.l3')
        self.assertEqual(code, EXIT_OK)
        self.assertIn('(import "ml" "stash")', out)

    def test_compile_rejects_duplicated_linear_value(self) -> None:
        code, _, err = call('compile-ml', f'{self.data}/stash_naive.mlx')
        self.assertEqual(code, EXIT_DIAGNOSTICS)
        self.assertIn('LIN001', err)

    def test_link(self) -> None:
        code, out, _ = call('link', f'ml={self.data}/stash_fixed.mlx', f'{self.data}/stash_client_fixed.l3')
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(out.splitlines()[0], 'ml: stash, get_stashed')

    def test_fuzz(self) -> None:
        code, out, _ = call('fuzz', '--count', '20', '--seed', '8')
        self.assertEqual(code, EXIT_OK)
        self.assertIn('20 programs, 0 progress violations, 0 preservation violations', out)
