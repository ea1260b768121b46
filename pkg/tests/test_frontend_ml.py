from pathlib import Path
from unittest import TestCase

from richwasm.core.interp import instantiate_module, invoke
from richwasm.core.ir import UNR, Const, NumKind, NumT, ProdT, Type, UnitV
from richwasm.core.lower import lower_module, rich_results
from richwasm.core.syntax import parse_module, print_module
from richwasm.core.typecheck import check_module
from richwasm.core.wasm_exec import run_export
from richwasm.frontend.ml import annotate, closure_convert, compile_ml, parse_ml, typecheck_ml
from richwasm.util.utils import CheckError, FrontendError, ParseError

FORTY_TWO = (Const(NumKind.I32, 42),)


def run_main(text: str):
    return invoke(instantiate_module(compile_ml(text)), 'main')


class TestCompile(TestCase):
    def test_function(self) -> None:
        result = run_main('fun double (x : Int) : Int = x + x in double 21')
        self.assertEqual(result.status, 'done')
        self.assertEqual(result.values, FORTY_TWO)

    def test_closure(self) -> None:
        result = run_main('fun apply (k : Int) : Int = (fun (y : Int) -> y + k) 2 in apply 40')
        self.assertEqual(result.values, FORTY_TWO)

    def test_closure_environment_is_an_unboxed_product(self) -> None:
        text = 'fun apply (k : Int) : Int = (fun (y : Int) -> y + k) 2 in apply 40'
        annotated = annotate(closure_convert(typecheck_ml(parse_ml(text))))
        lifted = [unit for unit in annotated.program.codes if unit.captured]
        self.assertEqual(len(lifted), 1)
        self.assertEqual(lifted[0].env_type, Type(ProdT((Type(NumT(NumKind.I32), UNR),)), UNR))
        self.assertFalse(lifted[0].boxed_env)

    def test_reference(self) -> None:
        result = run_main('fun bump (n : Int) : Int = let r = ref n in r := !r + 41; !r in bump 1')
        self.assertEqual(result.values, FORTY_TWO)

    def test_polymorphic_function(self) -> None:
        self.assertEqual(run_main('fun id [a] (x : a) : a = x in id [Int] 42').values, FORTY_TWO)

    def test_variant(self) -> None:
        result = run_main('case inj 1 35 : <Unit | Int> of | u -> 0 | n -> n + 7')
        self.assertEqual(result.values, FORTY_TWO)

    def test_output_is_readable_richwasm(self) -> None:
        m = compile_ml('fun double (x : Int) : Int = x + x in double 21')
        again = parse_module(print_module(m))
        self.assertEqual(again, m)
        check_module(again)

    def test_lowered(self) -> None:
        m = compile_ml('fun double (x : Int) : Int = x + x in double 21')
        main = next(f for f in m.funcs if 'main' in f.exports)
        status, words = run_export(lower_module(m), 'main')
        self.assertEqual(status, 'done')
        self.assertEqual(rich_results(main.type.outs, words), FORTY_TWO)


class TestDiagnostics(TestCase):
    def test_ill_typed(self) -> None:
        with self.assertRaises(FrontendError) as context:
            compile_ml('1 + ()', 'bad.mlx')
        self.assertEqual(context.exception.code, 'ML001')
        self.assertEqual(context.exception.diagnostics[0].span.file, 'bad.mlx')

    def test_unbound_variable(self) -> None:
        with self.assertRaises(FrontendError):
            typecheck_ml(parse_ml('fun f (x : Int) : Int = y in f 1'))

    def test_syntax_error(self) -> None:
        with self.assertRaises(ParseError):
            parse_ml('fun f (x : Int) = in')


class TestStash(TestCase):
    def setUp(self) -> None:
        self.data = Path('tests/data')

    def test_duplicated_linear_reference_is_rejected(self) -> None:
        text = (self.data / 'stash_naive.mlx').read_text()
        # plain ML typing has nothing against it
        typecheck_ml(parse_ml(text))
        with self.assertRaises(CheckError) as context:
            compile_ml(text, 'stash_naive.mlx')
        self.assertEqual(context.exception.code, 'LIN001')

    def test_empty_cell(self) -> None:
        m = compile_ml((self.data / 'stash_fixed.mlx').read_text(), 'stash_fixed.mlx')
        result = invoke(instantiate_module(m, 'ml'), 'get_stashed', [UnitV()])
        self.assertEqual(result.status, 'trap')
