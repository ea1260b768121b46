from pathlib import Path
from unittest import TestCase

from richwasm.core.ir import (LIN, UNR, Const, ExLocT, LocVar, NumKind, Priv, RefT, StructHT, SizeConst, Type,
                              NumT)
from richwasm.core.syntax import (parse_instrs, parse_module, parse_module_with_spans, parse_type, print_module,
                                  show_type)
from richwasm.fuzz import GenConfig, generate_program
from richwasm.util.utils import ParseError

GENERATED_MODULES = 1000


class TestRoundtrip(TestCase):
    def setUp(self) -> None:
        self.fixtures = sorted(Path('tests/data').glob('*.rwasm'))

    def test_fixtures(self) -> None:
        self.assertGreater(len(self.fixtures), 0)
        for path in self.fixtures:
            m = parse_module(path.read_text(), str(path))
            printed = print_module(m)
            self.assertEqual(parse_module(printed), m, msg=f'{path} does not survive printing')
            self.assertEqual(print_module(parse_module(printed)), printed)

    def test_generated_modules(self) -> None:
        cfg = GenConfig(seed=7)
        for index in range(GENERATED_MODULES):
            m, _, _ = generate_program(cfg, index)
            self.assertEqual(parse_module(print_module(m)), m, msg=f'generated module {index}')


class TestParsing(TestCase):
    def test_types(self) -> None:
        t = parse_type('((exloc $l ((ref rw $l (struct ((i32 unr) 32))) lin)) lin)')
        inner = Type(RefT(Priv.RW, LocVar(0), StructHT(((Type(NumT(NumKind.I32), UNR), SizeConst(32)),))), LIN)
        self.assertEqual(t, Type(ExLocT(inner), LIN))
        self.assertEqual(show_type(t), '((exloc $l0 ((ref rw $l0 (struct ((i32 unr) 32))) lin)) lin)')

    def test_instructions(self) -> None:
        self.assertEqual(parse_instrs('(i32.const -4) (f64.const 2.5)'),
                         (Const(NumKind.I32, -4), Const(NumKind.F64, 2.5)))

    def test_spans(self) -> None:
        text = Path('tests/data/add.rwasm').read_text()
        _, spans = parse_module_with_spans(text, 'add.rwasm')
        # the body of main starts on line 8
        self.assertEqual(spans[(1, (0,))].file, 'add.rwasm')
        self.assertEqual(spans[(1, (0,))].start[0], 8)

    def test_errors(self) -> None:
        cases = [('(module #)', 'PAR001'),
                 ('(module (func', 'PAR002'),
                 ('(module (func (fn () -> ()) (locals) (body (get_local 0 $q))))', 'PAR003'),
                 ('(module (frob))', 'PAR004'),
                 ('(module (func (fn () -> ()) (locals) (body (br))))', 'PAR004')]
        for text, code in cases:
            with self.assertRaises(ParseError) as context:
                parse_module(text, 'bad.rwasm')
            self.assertEqual(context.exception.code, code, msg=text)
            self.assertEqual(context.exception.diagnostics[0].span.file, 'bad.rwasm')
