from pathlib import Path
from unittest import TestCase

from richwasm.core.interp import instantiate, instantiate_module, invoke
from richwasm.core.ir import Const, FuncImport, Mem, NumKind, VariantHV
from richwasm.core.typecheck import check_link
from richwasm.frontend.l3 import Bang, L3Int, L3Unit, compile_l3, parse_l3, typecheck_l3
from richwasm.frontend.ml import compile_ml
from richwasm.util.utils import FrontendError, LinkError

FORTY_TWO = (Const(NumKind.I32, 42),)


def run_main(text: str):
    return invoke(instantiate_module(compile_l3(text)), 'main')


class TestCompile(TestCase):
    def test_cell(self) -> None:
        result = run_main('free (new !41 1) + 1')
        self.assertEqual(result.status, 'done')
        self.assertEqual(result.values, FORTY_TWO)

    def test_function(self) -> None:
        self.assertEqual(run_main('fun inc (x : !Int) : !Int = x + 1;; inc !41').values, FORTY_TWO)

    def test_comments(self) -> None:
        self.assertEqual(run_main('# one cell\nfree (new !42 1)').values, FORTY_TWO)

    def test_free_leaves_linear_memory_empty(self) -> None:
        store = instantiate_module(compile_l3('free (new !42 1)'))
        result = invoke(store, 'main')
        self.assertEqual(result.values, FORTY_TWO)
        self.assertEqual(store.mem[Mem.LIN], {})

    def test_swap_changes_the_cell_type(self) -> None:
        text = 'let (c, old) = swap (new !41 1) () in free c; old + 1'
        program = typecheck_l3(parse_l3(text))
        swap = program.main.value
        cell, old = swap.ty.left, swap.ty.right
        self.assertEqual(swap.target.ty.body.left.elem, Bang(L3Int()))
        self.assertEqual(cell.body.left.elem, L3Unit())
        self.assertEqual(old, Bang(L3Int()))
        self.assertEqual(run_main(text).values, FORTY_TWO)

    def test_split_undoes_join(self) -> None:
        text = 'free (split (join (new !42 1)))'
        program = typecheck_l3(parse_l3(text))
        split = program.main.value
        self.assertEqual(split.ty, split.value.value.ty)
        self.assertEqual(run_main(text).values, FORTY_TWO)


class TestDiagnostics(TestCase):
    def test_unused_linear_variable(self) -> None:
        with self.assertRaises(FrontendError) as context:
            compile_l3('let x = new !1 1 in 5')
        self.assertEqual(context.exception.code, 'L3001')

    def test_linear_variable_used_twice(self) -> None:
        with self.assertRaises(FrontendError) as context:
            typecheck_l3(parse_l3('let x = new !1 1 in free x; free x'))
        self.assertEqual(context.exception.code, 'L3001')

    def test_oversized_cell(self) -> None:
        with self.assertRaises(FrontendError) as context:
            compile_l3('new !(1, 2) 1')
        self.assertEqual(context.exception.code, 'L3002')


class TestInterop(TestCase):
    def setUp(self) -> None:
        self.data = Path('tests/data')
        self.ml = compile_ml((self.data / 'stash_fixed.mlx').read_text(), 'stash_fixed.mlx')

    def client(self, name: str):
        return compile_l3((self.data / name).read_text(), name)

    def test_boundary_types_agree(self) -> None:
        client = self.client('stash_client_fixed.l3')
        exported = {e: f.type for f in self.ml.funcs for e in f.exports}
        for f in client.funcs:
            if isinstance(f, FuncImport):
                self.assertEqual(f.type, exported[f.name], msg=f.name)

    def test_stash_round_trip(self) -> None:
        store = instantiate([('ml', self.ml), ('client', self.client('stash_client_fixed.l3'))])
        result = invoke(store, 'main')
        self.assertEqual(result.status, 'done')
        self.assertEqual(result.values, FORTY_TWO)
        # what is left in linear memory is the emptied cell owned by the global
        residue = [hv for hv, _ in store.mem[Mem.LIN].values()]
        self.assertTrue(all(isinstance(hv, VariantHV) and hv.tag == 0 for hv in residue))

    def test_mismatched_client_does_not_link(self) -> None:
        client = self.client('stash_client.l3')
        with self.assertRaises(LinkError) as context:
            check_link([('ml', self.ml), ('client', client)])
        self.assertEqual(context.exception.code, 'LNK002')
