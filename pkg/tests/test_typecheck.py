import itertools
from pathlib import Path
from unittest import TestCase

from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.strategies import composite

from richwasm.core.constraints import no_caps, qual_leq, size_const, size_leq, size_of, type_valid
from richwasm.core.env import FunctionEnv, LinearLedger, ModuleEnv, QualBound, SizeBound, StoreTyping, TypeBound
from richwasm.core.interp import Configuration, instantiate_module
from richwasm.core.ir import (LIN, UNR, Binop, CapT, CapV, Const, ExHT, GetLocal, Kind, LocConst, LocVar, Mem,
                              NumKind, NumT, OwnT, OwnV, PackHV, Priv, ProdT, ProdV, QualVar, RecT, RefT, RefV,
                              SizeConst, SizePlus, SizeVar, StructHT, StructHV, Type, TypeQ, UnitT, VarT)
from richwasm.core.subst import substitute
from richwasm.core.syntax import parse_module, parse_module_with_spans
from richwasm.core.typecheck import check_config, check_heap_value, check_instrs, check_link, check_module, \
    check_value
from richwasm.util.utils import CheckError, LinkError, SubstitutionKindError

I32, I64 = Type(NumT(NumKind.I32), UNR), Type(NumT(NumKind.I64), UNR)
_FRESH = itertools.count()


def function(body: str, locals_: str = '', ft: str = '(fn () -> ())') -> str:
    return f'(module (func {ft} (locals {locals_}) (body {body})))'


def verdict(text: str) -> str:
    try:
        check_module(parse_module(text))
    except CheckError as exc:
        return exc.code
    return 'ok'


def evaluate(size, valuation) -> int:
    if isinstance(size, SizeConst):
        return size.bits
    if isinstance(size, SizeVar):
        return valuation[size.index]
    return evaluate(size.left, valuation) + evaluate(size.right, valuation)


def de_bruijn(node, names) -> Type:
    """Type of a named term; ``names`` lists the type variables in scope, innermost first."""
    tag = node[0]
    if tag == 'num':
        pre = NumT(node[1])
    elif tag == 'var':
        pre = VarT(names.index(node[1]))
    elif tag == 'prod':
        pre = ProdT(tuple(de_bruijn(c, names) for c in node[1]))
    else:
        pre = RecT(UNR, de_bruijn(node[2], (node[1],) + names))
    return Type(pre, UNR)


def replace_name(node, name: str, replacement):
    tag = node[0]
    if tag == 'var':
        return replacement if node[1] == name else node
    if tag == 'prod':
        return 'prod', tuple(replace_name(c, name, replacement) for c in node[1])
    if tag == 'rec':
        return 'rec', node[1], replace_name(node[2], name, replacement)
    return node


@composite
def named_types(draw, scope, depth=0):
    # binder names are never reused, so naive substitution cannot capture
    options = ['num'] + (['var'] if scope else []) + (['prod', 'rec'] if depth < 3 else [])
    which = draw(st.sampled_from(options))
    if which == 'num':
        return 'num', draw(st.sampled_from([NumKind.I32, NumKind.I64]))
    if which == 'var':
        return 'var', draw(st.sampled_from(scope))
    if which == 'prod':
        return 'prod', tuple(draw(st.lists(named_types(scope, depth + 1), max_size=2)))
    name = f'r{next(_FRESH)}'
    return 'rec', name, draw(named_types((name,) + scope, depth + 1))


@composite
def qual_problems(draw):
    n = draw(st.integers(0, 3))
    quals = st.sampled_from([UNR, LIN])
    if n:
        quals = st.one_of(quals, st.integers(0, n - 1).map(QualVar))
    ctx = tuple(QualBound(tuple(draw(st.lists(quals, max_size=2))), tuple(draw(st.lists(quals, max_size=2))))
                for _ in range(n))
    return ctx, draw(quals), draw(quals), draw(quals)


@composite
def size_problems(draw):
    n = draw(st.integers(1, 3))
    constants = st.integers(0, 8).map(SizeConst)
    ctx = tuple(SizeBound(tuple(draw(st.lists(constants, max_size=1))), tuple(draw(st.lists(constants, max_size=1))))
                for _ in range(n))
    sizes = st.recursive(st.one_of(constants, st.integers(0, n - 1).map(SizeVar)),
                         lambda inner: st.tuples(inner, inner).map(lambda pair: SizePlus(*pair)), max_leaves=4)
    return ctx, draw(sizes), draw(sizes)


simple_types = st.recursive(
    st.one_of(st.sampled_from(list(NumKind)).map(lambda k: Type(NumT(k), UNR)), st.just(Type(UnitT(), UNR))),
    lambda inner: st.lists(inner, max_size=3).map(lambda ts: Type(ProdT(tuple(ts)), UNR)),
    max_leaves=6)

ALPHA_TEMPLATES = [
    function('(i32.const 1) (struct.malloc (sizes 64) lin) '
             '(memunpack @L (arrow () ((i64 unr))) (effect) '
             '(i64.const 5) (struct.swap 0) drop (struct.get 0) (set_local 0) struct.free '
             '(get_local 0 unr) unit (set_local 0))',
             '64', '(fn () -> ((i64 unr)))'),
    function('(i32.const 7) (variant.malloc 0 ((i32 unr)) unr) '
             '(memunpack @L (arrow () ((i32 unr))) (effect) '
             '(variant.case @Q (variant (i32 unr)) (arrow () ((i32 unr))) (effect) (case)) '
             '(set_local 0) drop (get_local 0 unr) unit (set_local 0))',
             '32', '(fn (qual @Q) () -> ((i32 unr)))'),
    function('(get_local 0 unr) (set_local 1) (get_local 1 unr)',
             '@S', '(fn (size @S) (type @A unr @S) ((@A unr)) -> ((@A unr)))'),
    function('(i32.const 7) (exists.pack i32 (ex @A unr 32 (@A unr)) lin) '
             '(memunpack @L (arrow () ()) (effect) '
             '(exists.unpack @A lin (ex @A unr 32 (@A unr)) (arrow () ()) (effect) drop))'),
]


class TestConstraints(TestCase):
    def test_qualifiers(self) -> None:
        self.assertTrue(qual_leq((), UNR, LIN))
        self.assertFalse(qual_leq((), LIN, UNR))
        # q0 has lower bound lin, so it can only be lin
        ctx = (QualBound(lower=(LIN,), upper=()),)
        self.assertTrue(qual_leq(ctx, LIN, QualVar(0)))
        self.assertFalse(qual_leq(ctx, QualVar(0), UNR))

    def test_sizes(self) -> None:
        ctx = (SizeBound(lower=(), upper=(SizeConst(32),)),)
        self.assertTrue(size_leq(ctx, SizeVar(0), SizeConst(64)))
        self.assertTrue(size_leq(ctx, SizePlus(SizeVar(0), SizeConst(32)), SizeConst(64)))
        self.assertFalse(size_leq(ctx, SizeConst(64), SizeVar(0)))

    def test_size_of(self) -> None:
        self.assertEqual(size_const(size_of((), Type(ProdT((I32, I64, Type(UnitT(), UNR))), UNR))), 96)
        ref = Type(RefT(Priv.RW, LocConst(0, Mem.LIN), StructHT(((I64, SizeConst(64)),))), LIN)
        self.assertEqual(size_const(size_of((), ref)), 32)
        self.assertEqual(size_of((TypeBound(UNR, SizeVar(0)),), VarT(0)), SizeVar(0))

    def test_no_caps(self) -> None:
        loc = LocConst(0, Mem.LIN)
        self.assertTrue(no_caps((), I32))
        self.assertFalse(no_caps((), Type(OwnT(loc), LIN)))
        self.assertFalse(no_caps((), Type(CapT(Priv.RW, loc, StructHT(())), LIN)))
        self.assertFalse(no_caps((), Type(ProdT((I32, Type(OwnT(loc), LIN))), LIN)))
        self.assertTrue(no_caps((TypeBound(UNR, SizeConst(32)),), VarT(0)))
        self.assertFalse(no_caps((TypeBound(UNR, SizeConst(32), caps=True),), VarT(0)))

    def test_type_valid(self) -> None:
        F = FunctionEnv().push(TypeQ(LIN, SizeConst(32)))
        self.assertTrue(type_valid(F, Type(VarT(0), LIN)))
        # a variable bounded below by lin cannot be used at unr
        self.assertFalse(type_valid(F, Type(VarT(0), UNR)))
        self.assertFalse(type_valid(FunctionEnv(), Type(VarT(0), UNR)))
        self.assertFalse(type_valid(F, Type(ProdT((Type(VarT(0), LIN),)), UNR)))


class TestConstraintProperties(TestCase):
    @settings(max_examples=200, deadline=None)
    @given(qual_problems())
    def test_qualifier_order_is_a_preorder(self, problem) -> None:
        ctx, a, b, c = problem
        self.assertTrue(qual_leq(ctx, a, a))
        self.assertTrue(qual_leq(ctx, UNR, a))
        self.assertTrue(qual_leq(ctx, a, LIN))
        if qual_leq(ctx, a, b) and qual_leq(ctx, b, c):
            self.assertTrue(qual_leq(ctx, a, c))

    @settings(max_examples=100, deadline=None)
    @given(size_problems())
    def test_size_order_holds_under_every_valuation(self, problem) -> None:
        ctx, a, b = problem
        if not size_leq(ctx, a, b):
            return
        ranges = []
        for bound in ctx:
            low = bound.lower[0].bits if bound.lower else 0
            high = bound.upper[0].bits if bound.upper else 12
            ranges.append(range(low, high + 1))
        for valuation in itertools.product(*ranges):
            self.assertLessEqual(evaluate(a, valuation), evaluate(b, valuation), msg=f'{a} <= {b} at {valuation}')

    @settings(max_examples=100, deadline=None)
    @given(st.lists(simple_types, max_size=4))
    def test_product_size_is_the_sum(self, types) -> None:
        total = size_const(size_of((), Type(ProdT(tuple(types)), UNR)))
        self.assertEqual(total, sum(size_const(size_of((), t)) for t in types))


class TestSubstitution(TestCase):
    def test_replaces_variable_zero(self) -> None:
        t = Type(ProdT((Type(VarT(0), UNR), Type(VarT(1), UNR))), UNR)
        self.assertEqual(substitute(t, Kind.TYPE, NumT(NumKind.I32)), Type(ProdT((I32, Type(VarT(0), UNR))), UNR))

    def test_replacement_is_shifted_under_binders(self) -> None:
        t = Type(RecT(UNR, Type(ProdT((Type(VarT(0), UNR), Type(VarT(1), UNR))), UNR)), UNR)
        out = substitute(t, Kind.TYPE, VarT(3))
        self.assertEqual(out, Type(RecT(UNR, Type(ProdT((Type(VarT(0), UNR), Type(VarT(4), UNR))), UNR)), UNR))

    def test_locations(self) -> None:
        loc = LocConst(2, Mem.UNR)
        self.assertEqual(substitute(Type(OwnT(LocVar(0)), UNR), Kind.LOC, loc), Type(OwnT(loc), UNR))

    def test_payload_must_match_the_kind(self) -> None:
        with self.assertRaises(SubstitutionKindError):
            substitute(Type(VarT(0), UNR), Kind.TYPE, SizeConst(32))
        with self.assertRaises(SubstitutionKindError):
            substitute(SizeVar(0), Kind.SIZE, NumT(NumKind.I32))
        with self.assertRaises(SubstitutionKindError):
            substitute(Type(OwnT(LocVar(0)), UNR), Kind.LOC, UNR)

    @settings(max_examples=200, deadline=None)
    @given(st.data())
    def test_agrees_with_named_substitution(self, data) -> None:
        outer = ('a', 'b')
        body = data.draw(named_types(('x',) + outer))
        replacement = data.draw(named_types(outer))
        expected = de_bruijn(replace_name(body, 'x', replacement), outer)
        actual = substitute(de_bruijn(body, ('x',) + outer), Kind.TYPE, de_bruijn(replacement, outer).pre)
        self.assertEqual(actual, expected)


class TestCheckInstrs(TestCase):
    def setUp(self) -> None:
        self.M, self.F = ModuleEnv(), FunctionEnv()

    def test_arithmetic(self) -> None:
        instrs = [Const(NumKind.I32, 1), Const(NumKind.I32, 2), Binop(NumKind.I32, 'add')]
        stack, L = check_instrs(self.M, self.F, (), instrs)
        self.assertEqual(stack, (Type(NumT(NumKind.I32), UNR),))
        self.assertEqual(L, ())

    def test_linear_read_moves_out(self) -> None:
        held = Type(ProdT(()), LIN)
        stack, L = check_instrs(self.M, self.F, ((held, SizeConst(0)),), [GetLocal(0, LIN)])
        self.assertEqual(stack, (held,))
        self.assertEqual(L, ((Type(UnitT(), LIN), SizeConst(0)),))
        with self.assertRaises(CheckError) as context:
            check_instrs(self.M, self.F, L, [GetLocal(0, LIN)])
        self.assertEqual(context.exception.code, 'LIN001')


class TestRuntimeValues(TestCase):
    def setUp(self) -> None:
        self.F = FunctionEnv()
        self.cell = LocConst(0, Mem.LIN)
        self.S = StoreTyping(lin={0: StructHT(((I32, SizeConst(32)),))})
        self.pack = ExHT(UNR, SizeConst(32), Type(VarT(0), UNR))

    def test_linear_location_owned_twice(self) -> None:
        pair = ProdV((RefV(self.cell), RefV(self.cell)))
        with self.assertRaises(CheckError) as context:
            check_value(self.S, self.F, LinearLedger([0]), pair)
        self.assertEqual(context.exception.code, 'LIN001')

    def test_reference_consumes_its_location(self) -> None:
        ledger = LinearLedger([0])
        t = check_value(self.S, self.F, ledger, RefV(self.cell))
        self.assertEqual(t.qual, LIN)
        self.assertEqual(ledger.remaining(), set())

    def test_package_witness_within_bounds(self) -> None:
        check_heap_value(self.S, self.F, LinearLedger(), PackHV(NumT(NumKind.I32), Const(NumKind.I32, 5), self.pack),
                         self.pack)

    def test_package_witness_too_large(self) -> None:
        hv = PackHV(NumT(NumKind.I64), Const(NumKind.I64, 5), self.pack)
        with self.assertRaises(CheckError) as context:
            check_heap_value(self.S, self.F, LinearLedger(), hv, self.pack)
        self.assertEqual(context.exception.code, 'HEAP001')

    def test_package_witness_carrying_ownership(self) -> None:
        hv = PackHV(OwnT(self.cell), OwnV(self.cell), self.pack)
        with self.assertRaises(CheckError) as context:
            check_heap_value(self.S, self.F, LinearLedger(), hv, self.pack)
        self.assertEqual(context.exception.code, 'HEAP001')

    def test_struct_field_too_large_for_its_slot(self) -> None:
        heap = StructHT(((I64, SizeConst(32)),))
        with self.assertRaises(CheckError) as context:
            check_heap_value(self.S, self.F, LinearLedger(), StructHV((Const(NumKind.I64, 5),)), heap)
        self.assertEqual(context.exception.code, 'HEAP001')


class TestCheckConfig(TestCase):
    def setUp(self) -> None:
        self.store = instantiate_module(parse_module(Path('tests/data/add.rwasm').read_text()))
        self.cell = StructHT(((I32, SizeConst(32)),))

    def verdict(self, locals_=(), instrs=()) -> str:
        try:
            check_config(self.store.typing(), Configuration(self.store, tuple(locals_), 0, tuple(instrs)))
        except CheckError as exc:
            return exc.code
        return 'ok'

    def test_locals_are_read(self) -> None:
        config = Configuration(self.store, ((Const(NumKind.I32, 4), SizeConst(32)),), 0, (GetLocal(0, UNR),))
        self.assertEqual(check_config(self.store.typing(), config), (I32,))

    def test_linear_local_left_behind(self) -> None:
        loc = self.store.allocate(Mem.LIN, StructHV((Const(NumKind.I32, 1),)), 32, self.cell)
        self.assertEqual(self.verdict([(RefV(loc), SizeConst(32))]), 'LIN003')

    def test_local_larger_than_its_slot(self) -> None:
        self.assertEqual(self.verdict([(Const(NumKind.I64, 1), SizeConst(32))]), 'TYP003')

    def test_unowned_linear_location(self) -> None:
        self.store.allocate(Mem.LIN, StructHV((Const(NumKind.I32, 1),)), 32, self.cell)
        self.assertEqual(self.verdict(), 'MEM001')

    def test_capability_behind_unrestricted_memory(self) -> None:
        inner = self.store.allocate(Mem.LIN, StructHV((Const(NumKind.I32, 1),)), 32, self.cell)
        cap = Type(CapT(Priv.RW, inner, self.cell), LIN)
        holder_heap = StructHT(((cap, SizeConst(0)),))
        holder = self.store.allocate(Mem.LIN, StructHV((CapV(inner),)), 0, holder_heap)
        ref = Type(RefT(Priv.RW, holder, holder_heap), LIN)
        self.store.allocate(Mem.UNR, StructHV((RefV(holder),)), 32, StructHT(((ref, SizeConst(32)),)))
        self.assertEqual(self.verdict(), 'CAP001')


class TestCheckModule(TestCase):
    def setUp(self) -> None:
        self.data = Path('tests/data')

    def test_fixtures_check(self) -> None:
        for name in ('add', 'oob_array', 'counter'):
            path = self.data / f'{name}.rwasm'
            m, spans = parse_module_with_spans(path.read_text(), str(path))
            env = check_module(m, spans)
            self.assertEqual(len(env.funcs), len(m.funcs))

    def test_read_only_config_rejects_writes(self) -> None:
        path = self.data / 'counter_readonly.rwasm'
        m, spans = parse_module_with_spans(path.read_text(), str(path))
        with self.assertRaises(CheckError) as context:
            check_module(m, spans)
        self.assertEqual(context.exception.code, 'CAP002')

    def test_linear_use(self) -> None:
        make = '(i32.const 1) (struct.malloc (sizes 32) lin)'
        cases = [(function(f'{make} drop'), 'LIN002'),
                 (function(f'{make} (set_local 0) (get_local 0 lin) (get_local 0 lin) drop drop', '64'), 'LIN001'),
                 (function(f'{make} (set_local 0)', '64'), 'LIN003'),
                 (function(f'{make} (set_local 0) {make} (set_local 0)', '64'), 'LIN002')]
        for text, code in cases:
            with self.assertRaises(CheckError) as context:
                check_module(parse_module(text))
            self.assertEqual(context.exception.code, code, msg=text)

    def test_free_needs_a_linear_reference(self) -> None:
        text = function('(i32.const 1) (struct.malloc (sizes 32) unr) (memunpack $l (arrow () ()) (effect) '
                        'struct.free)')
        with self.assertRaises(CheckError) as context:
            check_module(parse_module(text))
        self.assertEqual(context.exception.code, 'LIN004')

    def test_stack_shape(self) -> None:
        cases = [(function('i32.add', ft='(fn () -> ((i32 unr)))'), 'TYP001'),
                 (function('(i32.const 1) (i64.const 2) i32.add drop'), 'TYP001'),
                 (function('(i32.const 1)'), 'TYP001'),
                 (function('(br 3)'), 'TYP005'),
                 (function('(call 4)'), 'TYP005'),
                 (function('(i32.const 1) (set_local 2)', '32'), 'TYP005')]
        for text, code in cases:
            with self.assertRaises(CheckError) as context:
                check_module(parse_module(text))
            self.assertEqual(context.exception.code, code, msg=text)

    def test_every_function_reports(self) -> None:
        text = ('(module'
                ' (func (fn () -> ()) (locals) (body i32.add))'
                ' (func (fn () -> ()) (locals) (body (i32.const 1) (struct.malloc (sizes 32) lin) drop)))')
        with self.assertRaises(CheckError) as context:
            check_module(parse_module(text))
        self.assertEqual([d.code for d in context.exception.diagnostics], ['TYP001', 'LIN002'])

    def test_strong_update_on_linear_struct(self) -> None:
        text = function('(i32.const 1) (struct.malloc (sizes 64) lin) '
                        '(memunpack $l (arrow () ((i64 unr))) (effect) '
                        '(i64.const 5) (struct.swap 0) drop (struct.get 0) (set_local 0) struct.free '
                        '(get_local 0 unr) unit (set_local 0))',
                        '64', '(fn () -> ((i64 unr)))')
        check_module(parse_module(text))

    def test_case_qualifier_must_be_decided(self) -> None:
        body = ('(i32.const 7) (variant.malloc 0 ((i32 unr)) unr) '
                '(memunpack $l (arrow () ((i32 unr))) (effect) '
                '(variant.case $q (variant (i32 unr)) (arrow () ((i32 unr))) (effect) (case)) '
                '(set_local 0) drop (get_local 0 unr) unit (set_local 0))')
        with self.assertRaises(CheckError) as context:
            check_module(parse_module(function(body, '32', '(fn (qual $q) () -> ((i32 unr)))')))
        self.assertEqual(context.exception.code, 'TYP002')
        check_module(parse_module(function(body, '32', '(fn (qual $q (upper unr)) () -> ((i32 unr)))')))

    def test_unpack_qualifier_must_be_decided(self) -> None:
        body = ('(i32.const 7) (exists.pack i32 (ex $a unr 32 ($a unr)) unr) '
                '(memunpack $l (arrow () ()) (effect) '
                '(exists.unpack $a $q (ex $a unr 32 ($a unr)) (arrow () ()) (effect) drop) drop)')
        with self.assertRaises(CheckError) as context:
            check_module(parse_module(function(body, ft='(fn (qual $q) () -> ())')))
        self.assertEqual(context.exception.code, 'TYP002')

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.text('abcdefghijklmnopqrstuvwxyz', min_size=1, max_size=5), min_size=8, max_size=8,
                    unique=True))
    def test_verdicts_ignore_binder_names(self, names) -> None:
        def rename(text, chosen):
            for placeholder, name in zip(('@L', '@Q', '@S', '@A'), chosen):
                text = text.replace(placeholder, f'${name}')
            return text

        for template in ALPHA_TEMPLATES:
            self.assertEqual(verdict(rename(template, names[:4])), verdict(rename(template, names[4:])),
                             msg=template)


class TestCheckLink(TestCase):
    def setUp(self) -> None:
        self.lib = parse_module('(module (func (export "f") (fn () -> ((i32 unr))) (locals) (body (i32.const 1))))')

    def test_resolved(self) -> None:
        user = parse_module('(module (func (import "lib" "f") (fn () -> ((i32 unr)))))')
        check_link([('lib', self.lib), ('user', user)])

    def test_unresolved(self) -> None:
        user = parse_module('(module (func (import "lib" "g") (fn () -> ((i32 unr)))))')
        with self.assertRaises(LinkError) as context:
            check_link([('lib', self.lib), ('user', user)])
        self.assertEqual(context.exception.code, 'LNK001')

    def test_mismatch(self) -> None:
        user = parse_module('(module (func (import "lib" "f") (fn () -> ())))')
        with self.assertRaises(LinkError) as context:
            check_link([('lib', self.lib), ('user', user)])
        self.assertEqual(context.exception.code, 'LNK002')

    def test_link_map(self) -> None:
        user = parse_module('(module (func (import "other" "h") (fn () -> ((i32 unr)))))')
        check_link([('lib', self.lib), ('user', user)], {('other', 'h'): ('lib', 'f')})
