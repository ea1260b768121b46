import bisect
import math
import os
from pathlib import Path
from unittest import TestCase, skipUnless

import numpy as np

from richwasm.cli import ENGINE_VARIABLE, run_engine
from richwasm.core.env import TypeBound
from richwasm.core.interp import instantiate, invoke
from richwasm.core.ir import LIN, UNR, Const, ExLocT, LocVar, NumKind, NumT, Priv, ProdT, RefT, StructHT, \
    SizeConst, SizeVar, Type, UnitT, UnitV, VarT
from richwasm.core.lower import lower_module, lower_program, lower_type, packed_layout, rich_results, wasm_args
from richwasm.core.runtime import FREE_HEAD, HEADER, HEAP_BASE, HEAP_TOP, MAX_PAGES, UNRESTRICTED
from richwasm.core.syntax import parse_module
from richwasm.core.wasm import PAGE, emit_wasm_binary, emit_wat
from richwasm.core.wasm_exec import WasmInstance, run_export
from richwasm.fuzz import GenConfig, generate_program

ALLOCATOR_SEQUENCES = 10_000
ENGINE_PROGRAMS = 50


def outcome_key(values):
    """Comparable form of result values; addresses and tuples are opaque to the lowered side."""
    key = []
    for v in values:
        if isinstance(v, Const):
            value = 'nan' if isinstance(v.value, float) and math.isnan(v.value) else v.value
            key.append((v.num, value))
        elif isinstance(v, UnitV):
            key.append('unit')
        else:
            key.append(None)
    return tuple(key)


def interpreted(modules, entry, args=()):
    result = invoke(instantiate(modules), entry, args)
    return result.status, outcome_key(result.values) if result.status == 'done' else ()


def lowered(modules, entry, args=()):
    ft = next(f.type for f in modules[-1][1].funcs if entry in f.exports)
    status, words = run_export(lower_program(modules), entry, wasm_args(args))
    return status, outcome_key(rich_results(ft.outs, words)) if status == 'done' else ()


def fixture(name: str):
    return [(name, parse_module(Path(f'tests/data/{name}.rwasm').read_text(), name))]


class FirstFit:
    """Allocator model: an address-ordered free list of header addresses and a bump pointer."""

    def __init__(self):
        self.top = HEAP_BASE
        self.free = []
        self.size = {}

    def alloc(self, n: int) -> int:
        size = max(8, (n + 7) // 8 * 8)
        for k, h in enumerate(self.free):
            csize = self.size[h]
            if csize >= size:
                if csize - size >= 2 * HEADER:
                    rest = h + HEADER + size
                    self.size[rest] = csize - size - HEADER
                    self.size[h] = size
                    self.free[k] = rest
                else:
                    del self.free[k]
                return h + HEADER
        h = self.top
        self.size[h] = size
        self.top = h + HEADER + size
        return h + HEADER

    def release(self, address: int) -> None:
        h = address - HEADER
        bisect.insort(self.free, h)
        k = self.free.index(h)
        if k + 1 < len(self.free) and h + HEADER + self.size[h] == self.free[k + 1]:
            self.size[h] += HEADER + self.size[self.free.pop(k + 1)]
        if k > 0 and self.free[k - 1] + HEADER + self.size[self.free[k - 1]] == h:
            self.size[self.free[k - 1]] += HEADER + self.size[h]
            self.free.pop(k)


class TestLayouts(TestCase):
    def test_flat_layouts(self) -> None:
        i32, f64 = Type(NumT(NumKind.I32), UNR), Type(NumT(NumKind.F64), UNR)
        layout = lower_type(Type(ProdT((i32, f64, Type(UnitT(), UNR))), UNR))
        self.assertEqual(layout.valtypes, ('i32', 'f64'))
        self.assertEqual(layout.addresses, (False, False))
        ref = Type(ExLocT(Type(RefT(Priv.RW, LocVar(0), StructHT(((i32, SizeConst(32)),))), LIN)), LIN)
        self.assertEqual(lower_type(ref).valtypes, ('i32',))
        self.assertEqual(lower_type(ref).addresses, (True,))

    def test_packed_slots(self) -> None:
        self.assertEqual(packed_layout(160).valtypes, ('i64', 'i64', 'i32'))
        self.assertEqual(packed_layout(96).valtypes, ('i64', 'i32'))
        self.assertEqual(packed_layout(0).valtypes, ())

    def test_local_slots(self) -> None:
        w = lower_module(parse_module('(module (func (export "f") (fn () -> ()) (locals 160) (body)))'))
        f = next(f for f in w.funcs if 'f' in f.exports)
        # local 0 is the root base of the frame
        self.assertEqual(f.locals[1:4], ['i64', 'i64', 'i32'])

    def test_size_variable_slot(self) -> None:
        w = lower_module(parse_module('(module (func (export "f") (fn (size $s) () -> ()) (locals $s 32) (body)))'))
        f = next(f for f in w.funcs if 'f' in f.exports)
        # a boxed slot is one address word
        self.assertEqual(f.locals[1:3], ['i32', 'i32'])
        s = Type(VarT(0), UNR)
        self.assertEqual(lower_type(s, (TypeBound(UNR, SizeVar(0)),), slot=True).valtypes, ('i32',))

    def test_emitters(self) -> None:
        w = lower_program(fixture('add'))
        self.assertTrue(emit_wat(w).startswith('(module'))
        self.assertIn('(export "main"', emit_wat(w))
        self.assertEqual(emit_wasm_binary(w)[:8], b'\x00asm\x01\x00\x00\x00')


class TestAllocator(TestCase):
    def setUp(self) -> None:
        self.runtime = lower_module(parse_module('(module)'))

    def fresh(self) -> WasmInstance:
        return WasmInstance(self.runtime)

    def test_first_fit(self) -> None:
        rt = self.fresh()
        a, = rt.invoke('rw_alloc', [16, 0])
        b, = rt.invoke('rw_alloc', [16, 0])
        self.assertEqual((a, b), (HEAP_BASE + HEADER, HEAP_BASE + 2 * HEADER + 16))
        rt.invoke('rw_free', [a])
        self.assertEqual(rt.invoke('rw_alloc', [16, 0]), (a,))

    def test_exhaustion(self) -> None:
        rt = self.fresh()
        self.assertEqual(rt.invoke('rw_alloc', [MAX_PAGES * PAGE + 1, 0]), (0,))

    def test_sequences_match_the_model(self) -> None:
        for seq in range(ALLOCATOR_SEQUENCES):
            rng = np.random.default_rng([11, seq])
            rt, model, live = self.fresh(), FirstFit(), []
            for _ in range(int(rng.integers(1, 7))):
                if live and rng.random() < 0.4:
                    address = live.pop(int(rng.integers(len(live))))
                    rt.invoke('rw_free', [address])
                    model.release(address)
                else:
                    n = int(rng.integers(0, 200))
                    address, = rt.invoke('rw_alloc', [n, 0])
                    self.assertEqual(address, model.alloc(n), msg=f'sequence {seq}')
                    live.append(address)
                self.assertEqual(rt.globals[HEAP_TOP], model.top, msg=f'sequence {seq}')
                self.assertEqual(rt.globals[FREE_HEAD], model.free[0] if model.free else 0, msg=f'sequence {seq}')
            for address in live:
                self.assertEqual(rt.load('i32', address - HEADER), model.size[address - HEADER])

    def test_collect_frees_unreachable_unrestricted_blocks(self) -> None:
        rt = self.fresh()
        a, = rt.invoke('rw_alloc', [16, UNRESTRICTED])
        rt.invoke('rw_alloc', [16, UNRESTRICTED])
        rt.invoke('rw_alloc', [16, 0])
        self.assertEqual(rt.invoke('rw_collect'), (2,))
        self.assertEqual(rt.invoke('rw_alloc', [16, 0]), (a,))

    def test_roots_keep_blocks(self) -> None:
        rt = self.fresh()
        a, = rt.invoke('rw_alloc', [16, UNRESTRICTED])
        rt.invoke('rw_alloc', [16, UNRESTRICTED])
        base, = rt.invoke('rw_root_push', [1])
        rt.store('i32', base, a)
        self.assertEqual(rt.invoke('rw_collect'), (1,))
        rt.invoke('rw_root_pop', [1])
        self.assertEqual(rt.invoke('rw_collect'), (1,))


class TestDifferential(TestCase):
    def test_fixtures(self) -> None:
        cases = [('add', 'main', []), ('oob_array', 'in_bounds', []), ('oob_array', 'main', []),
                 ('oob_array', 'negative', []), ('oob_array', 'read', [Const(NumKind.I32, 1)]),
                 ('counter', 'main', [])]
        for name, entry, args in cases:
            modules = fixture(name)
            self.assertEqual(lowered(modules, entry, args), interpreted(modules, entry, args), msg=f'{name}.{entry}')

    def test_expected_values(self) -> None:
        self.assertEqual(lowered(fixture('add'), 'main'), ('done', ((NumKind.I32, 5),)))
        self.assertEqual(lowered(fixture('counter'), 'main'), ('done', ((NumKind.I32, 6),)))
        self.assertEqual(lowered(fixture('oob_array'), 'main'), ('trap', ()))

    def test_size_polymorphic_locals(self) -> None:
        source = '''(module
  (func (fn (size $s) (type $a unr $s) (($a unr)) -> (($a unr))) (locals) (body (get_local 0 unr)))
  (func (fn (size $s) (type $a unr $s) (($a unr)) -> (($a unr))) (locals $s)
    (body (get_local 0 unr) (set_local 1) (get_local 1 unr)))
  (func (fn (size $s (lower 32)) ((i32 unr)) -> ((i32 unr))) (locals $s)
    (body (get_local 0 unr) (set_local 1) (get_local 1 unr)))
  (func (export "identity") (fn () -> ((i32 unr))) (locals)
    (body (i32.const 7) (call 0 (size 32) (pretype i32))))
  (func (export "through_local") (fn () -> ((i64 unr))) (locals)
    (body (i64.const 9) (call 1 (size 64) (pretype i64))))
  (func (export "number_in_box") (fn () -> ((i32 unr))) (locals)
    (body (i32.const 11) (call 2 (size 64)))))'''
        modules = [('poly', parse_module(source, 'poly'))]
        expected = {'identity': (NumKind.I32, 7), 'through_local': (NumKind.I64, 9),
                    'number_in_box': (NumKind.I32, 11)}
        for entry, value in expected.items():
            self.assertEqual(interpreted(modules, entry), ('done', (value,)), msg=entry)
            self.assertEqual(lowered(modules, entry), interpreted(modules, entry), msg=entry)

    def test_generated_programs(self) -> None:
        cfg = GenConfig(seed=3, max_depth=2, max_instructions=4)
        for index in range(30):
            module, _, _ = generate_program(cfg, index)
            modules = [('gen', module)]
            self.assertEqual(lowered(modules, 'main'), interpreted(modules, 'main'), msg=f'program {index}')

    @skipUnless(os.environ.get(ENGINE_VARIABLE), f'${ENGINE_VARIABLE} is not set')
    def test_external_engine(self) -> None:
        engine = os.environ[ENGINE_VARIABLE]
        programs = [fixture(name) for name in ('add', 'oob_array', 'counter')]
        cfg = GenConfig(seed=5, max_depth=2, max_instructions=4)
        index = 0
        while len(programs) < ENGINE_PROGRAMS:
            module, _, _ = generate_program(cfg, index)
            index += 1
            outs = module.funcs[1].type.outs
            if all(isinstance(t.pre, NumT) and not t.pre.num.is_float for t in outs):
                programs.append([('gen', module)])
        for modules in programs:
            status, words = run_engine(engine, emit_wasm_binary(lower_program(modules)), 'main', [])
            expected = interpreted(modules, 'main')
            self.assertEqual(status, expected[0])
            if status == 'done':
                self.assertEqual(tuple(words), tuple(value for _, value in expected[1]))
