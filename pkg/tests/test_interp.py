from collections import defaultdict
from pathlib import Path
from unittest import TestCase

from hypothesis import given, settings
from hypothesis import strategies as st

from richwasm.core.interp import (Configuration, Done, Store, Stepped, Trapped, collect, instantiate_module,
                                  invoke, run, step)
from richwasm.core.ir import (ArrayHV, Binop, Const, Drop, Mem, NumKind, RefV, StructHT, StructHV)
from richwasm.core.syntax import parse_instrs, parse_module
from richwasm.core.typecheck import check_module
from richwasm.util.utils import InterpreterFault

STORE_LOCATIONS = 200


def load(name: str):
    m = parse_module(Path(f'tests/data/{name}.rwasm').read_text(), name)
    check_module(m)
    return instantiate_module(m)


class TestReduction(TestCase):
    def setUp(self) -> None:
        self.store = load('add')

    def config(self, text: str) -> Configuration:
        return Configuration(self.store, (), 0, parse_instrs(text))

    def test_single_steps(self) -> None:
        outcome = step(self.config('(i32.const 1) (i32.const 2) i32.add'))
        self.assertIsInstance(outcome, Stepped)
        self.assertEqual(outcome.rule, 'i32.add')
        self.assertEqual(outcome.config.instrs, (Const(NumKind.I32, 3),))
        self.assertEqual(step(outcome.config), Done((Const(NumKind.I32, 3),)))

    def test_numeric_trap(self) -> None:
        outcome = step(Configuration(self.store, (), 0, (Const(NumKind.I32, 1), Const(NumKind.I32, 0),
                                                         Binop(NumKind.I32, 'div'))))
        self.assertEqual(outcome.rule, 'binop trap: integer division by zero')
        self.assertIsInstance(step(outcome.config), Trapped)

    def test_stuck_configurations_fault(self) -> None:
        with self.assertRaises(InterpreterFault):
            run(Configuration(self.store, (), 0, (Drop(),)))

    def test_fuel(self) -> None:
        m = parse_module('(module (func (export "spin") (fn () -> ()) (locals) (body (loop (arrow () ()) (br 0)))))')
        check_module(m)
        result = invoke(instantiate_module(m), 'spin', fuel=500)
        self.assertEqual(result.status, 'out_of_fuel')
        self.assertEqual(result.steps, 500)

    def test_variant_malloc_allocates_tag_and_payload(self) -> None:
        result = run(self.config('(i32.const 5) (variant.malloc 0 ((i32 unr) (unit unr)) lin)'), trace=True)
        self.assertEqual(result.trace, ['variant.malloc', 'malloc 64 lin'])

    def test_exists_pack_allocates_type_and_payload(self) -> None:
        result = run(self.config('(i64.const 5) (exists.pack i64 (ex $a unr 64 ($a unr)) unr)'), trace=True)
        self.assertEqual(result.trace, ['exists.pack', 'malloc 128 unr'])

    def test_linear_variant_case(self) -> None:
        config = self.config('(i32.const 7) (variant.malloc 0 ((i32 unr)) lin) '
                             '(memunpack $l (arrow () ((i32 unr))) (effect) '
                             '(variant.case lin (variant (i32 unr)) (arrow () ((i32 unr))) (effect) (case)))')
        trace = []
        while True:
            outcome = step(config, trace)
            if not isinstance(outcome, Stepped):
                break
            config = outcome.config
            if outcome.rule == 'variant.case.lin':
                # the payload moved out, an empty array is left behind until the free
                self.assertEqual(self.store.mem[Mem.LIN][1][0], ArrayHV(()))
        self.assertEqual(outcome, Done((Const(NumKind.I32, 7),)))
        self.assertEqual(trace, ['variant.malloc', 'malloc 64 lin', 'memunpack', 'variant.case.lin', 'free (lin 1)',
                                 'label.exit', 'label.exit'])
        self.assertEqual(self.store.mem[Mem.LIN], {})

    def test_linear_exists_unpack(self) -> None:
        config = self.config('(i32.const 7) (exists.pack i32 (ex $a unr 32 ($a unr)) lin) '
                             '(memunpack $l (arrow () ((i32 unr))) (effect) '
                             '(exists.unpack $a lin (ex $a unr 32 ($a unr)) (arrow () ((i32 unr))) (effect)))')
        result = run(config, trace=True)
        self.assertEqual(result.values, (Const(NumKind.I32, 7),))
        self.assertEqual(result.trace, ['exists.pack', 'malloc 96 lin', 'memunpack', 'exists.unpack.lin',
                                        'free (lin 1)', 'label.exit', 'label.exit'])


class TestPrograms(TestCase):
    def test_add(self) -> None:
        result = invoke(load('add'), 'main')
        self.assertEqual(result.status, 'done')
        self.assertEqual(result.values, (Const(NumKind.I32, 5),))

    def test_array_bounds(self) -> None:
        store = load('oob_array')
        self.assertEqual(invoke(store, 'in_bounds').values, (Const(NumKind.I32, 7),))
        for entry in ('main', 'negative'):
            result = invoke(store, entry, trace=True)
            self.assertEqual(result.status, 'trap', msg=entry)
            self.assertIn('array.get trap', result.trace)
            # the unreachable array is collected once the run ends
            self.assertEqual(result.trace[-1], 'collect 1')
            self.assertEqual(result.store.mem[Mem.UNR], {})

    def test_array_read_with_argument(self) -> None:
        store = load('oob_array')
        self.assertEqual(invoke(store, 'read', [Const(NumKind.I32, 0)]).values, (Const(NumKind.I32, 7),))
        self.assertEqual(invoke(store, 'read', [Const(NumKind.I32, 3)]).status, 'trap')

    def test_counter(self) -> None:
        for collect_every in (0, 1, 64):
            result = invoke(load('counter'), 'main', collect_every=collect_every)
            self.assertEqual(result.status, 'done')
            self.assertEqual(result.values, (Const(NumKind.I32, 6),), msg=f'collect_every={collect_every}')


@st.composite
def heap_graphs(draw):
    n = draw(st.integers(min_value=1, max_value=STORE_LOCATIONS))
    mems = draw(st.lists(st.sampled_from([Mem.LIN, Mem.UNR]), min_size=n, max_size=n))
    edges = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=2 * n))
    roots = draw(st.lists(st.integers(0, n - 1), max_size=4))
    return mems, edges, roots


class TestCollector(TestCase):
    @settings(max_examples=100, deadline=None)
    @given(heap_graphs())
    def test_removes_exactly_the_unreachable(self, graph) -> None:
        mems, edges, roots = graph
        store = Store()
        locs = [store.allocate(mem, StructHV(()), 32, StructHT(())) for mem in mems]
        targets = defaultdict(list)
        for a, b in edges:
            targets[a].append(b)
        for a, bs in targets.items():
            store.write(locs[a], StructHV(tuple(RefV(locs[b]) for b in bs)))

        reached, todo = set(), list(roots)
        while todo:
            i = todo.pop()
            if i not in reached:
                reached.add(i)
                todo += targets[i]

        removed = collect(store, [locs[i] for i in roots])
        self.assertEqual(removed, len(mems) - len(reached))
        kept = {(mem, address) for mem in (Mem.LIN, Mem.UNR) for address in store.mem[mem]}
        self.assertEqual(kept, {(locs[i].mem, locs[i].address) for i in reached})
        self.assertEqual(set(store.heap_types[Mem.UNR]), set(store.mem[Mem.UNR]))
