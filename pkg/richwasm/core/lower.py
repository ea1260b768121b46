"""Type-directed lowering of checked RichWasm modules to WebAssembly 1.0 with multi-value results.

Values are flattened into Wasm words (``lower_type``). The operand stack lives in Wasm locals keyed by stack position,
word index, value type and whether the word may hold an address, so every Wasm block has the empty block type and
branches move their values into the target label's positions. RichWasm locals become slot-packed Wasm locals.
Heap objects are laid out as consecutive bytes in the single Wasm memory managed by ``richwasm.core.runtime``.
Type-level instructions are erased.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

from richwasm.core.constraints import qual_leq, size_const, size_of
from richwasm.core.env import FunctionEnv, TypeBound
from richwasm.core.ir import (Kind, NumKind, Type, UnitT, NumT, ProdT, RefT, PtrT, CapT, OwnT, RecT, ExLocT,
                              CodeRefT, VarT, FunType, Const, UnitV, Binop, Relop, Testop, Unop, Convert,
                              Unreachable, Nop, Drop, Select, Block, Loop, Ite, Br, BrIf, BrTable, Return, GetLocal,
                              SetLocal, TeeLocal, GetGlobal, SetGlobal, Qualify, CodeRefI, Inst, CallIndirect, Call,
                              RecFold, RecUnfold, MemPack, MemUnpack, Group, Ungroup, CapSplit, CapJoin, RefDemote,
                              RefSplit, RefJoin, StructMalloc, StructFree, StructGet, StructSet, StructSwap,
                              VariantMalloc, VariantCase, ArrayMalloc, ArrayGet, ArraySet, ArrayFree, ExistPack,
                              ExistUnpack, Func, FuncImport, Global, GlobalImport, RWModule, LIN, UNR)
from richwasm.core.numerics import normalize, wrap
from richwasm.core.runtime import (ALL_ADDRESSES, ARG_AREA, ARG_SLOT_BYTES, ARG_SLOTS, INITIAL_PAGES, MAX_PAGES,
                                   MAX_SITES, NO_ADDRESSES, ROOT_TOP, ROOTS, RUNTIME_FUNCS, SCRATCH,
                                   SCRATCH_BYTES, LayoutDescriptor, block_info, layout_segment, runtime_funcs,
                                   runtime_globals, runtime_index)
from richwasm.core.subst import shift
from richwasm.core.typecheck import check_module
from richwasm.core.wasm import PAGE, WasmFunc, WasmGlobal, WasmImport, WasmModule
from richwasm.util.utils import CheckError, LinkError, LowerError, error

logger = logging.getLogger(__name__)

_WIDTH = {'i32': 4, 'i64': 8, 'f32': 4, 'f64': 8}
_VALTYPE = {NumKind.I32: 'i32', NumKind.UI32: 'i32', NumKind.I64: 'i64', NumKind.UI64: 'i64',
            NumKind.F32: 'f32', NumKind.F64: 'f64'}
_MAX_BYTES = MAX_PAGES * PAGE


def _fail(message: str):
    raise LowerError([error('LOW001', message)])


@dataclass(frozen=True)
class FlatLayout:
    """The Wasm words representing one RichWasm value, in order.

    ``addresses[i]`` is set when word ``i`` may hold a heap address; the collector scans exactly those words.
    """
    valtypes: Tuple[str, ...] = ()
    addresses: Tuple[bool, ...] = ()

    def __add__(self, other: 'FlatLayout') -> 'FlatLayout':
        return FlatLayout(self.valtypes + other.valtypes, self.addresses + other.addresses)

    @property
    def bits(self) -> int:
        return 8 * self.bytes

    @property
    def bytes(self) -> int:
        return sum(_WIDTH[v] for v in self.valtypes)

    @property
    def offsets(self) -> Tuple[int, ...]:
        out, at = [], 0
        for v in self.valtypes:
            out.append(at)
            at += _WIDTH[v]
        return tuple(out)

    def address_words(self, offset: int = 0) -> Set[int]:
        """Indices of the 4-byte memory words that may hold addresses when the value is stored at ``offset``."""
        found = set()
        for at, vt, address in zip(self.offsets, self.valtypes, self.addresses):
            if address:
                found.add((offset + at) // 4)
                if vt == 'i64':
                    found.add((offset + at) // 4 + 1)
        return found


BOXED = FlatLayout(('i32',), (True,))


def packed_layout(bits: int) -> FlatLayout:
    """Greedy 64-then-32 packing of ``bits`` bits; every word may hold an address."""
    valtypes = ['i64'] * (bits // 64)
    rest = bits % 64
    if rest > 32:
        valtypes.append('i64')
    elif rest > 0:
        valtypes.append('i32')
    return FlatLayout(tuple(valtypes), (True,) * len(valtypes))


def _flatten(pre, env: Tuple[TypeBound, ...]) -> FlatLayout:
    if isinstance(pre, (UnitT, CapT, OwnT)):
        return FlatLayout()
    if isinstance(pre, NumT):
        return FlatLayout((_VALTYPE[pre.num],), (False,))
    if isinstance(pre, (RefT, PtrT)):
        return FlatLayout(('i32',), (True,))
    if isinstance(pre, CodeRefT):
        return FlatLayout(('i32',), (False,))
    if isinstance(pre, ProdT):
        layout = FlatLayout()
        for component in pre.types:
            layout = layout + _flatten(component.pre, env)
        return layout
    if isinstance(pre, ExLocT):
        return _flatten(pre.body.pre, env)
    if isinstance(pre, RecT):
        return _flatten(pre.body.pre, (TypeBound(pre.qual, None),) + env)
    assert isinstance(pre, VarT), f'Not a pretype: {pre}.'
    if not 0 <= pre.index < len(env):
        _fail(f'type variable {pre.index} is not in scope')
    bound = env[pre.index].size
    if bound is None:
        _fail('a recursive type variable used without indirection has no layout')
    bits = size_const(bound)
    if bits is None:
        return BOXED
    return packed_layout(bits)


def lower_type(t, type_env: Sequence[TypeBound] = (), slot: bool = False) -> FlatLayout:
    """Flattens a type into Wasm words

    Parameters
    ----------
    t: Type or PreType
        A checked, sized type.

    type_env: Sequence[TypeBound], default = ()
        Bounds of the type variables in scope, innermost first.

    slot: bool, default = False
        When set, returns the layout of a local slot holding ``t``: greedy 64-then-32 packing of its size,
        or one boxed i32 when the size depends on a size variable.
        Otherwise the layout is componentwise: Unit, Cap and Own vanish, numbers map to themselves, references,
        pointers and code references become one i32, and a type variable takes the packed layout of its size bound
        (one boxed i32 when the bound is not a constant).

    Returns
    -------
    layout: FlatLayout

    Raises
    ------
    LowerError
        For unsized types.
    """
    env = tuple(type_env)
    if slot:
        try:
            bits = size_const(size_of(env, t))
        except CheckError as exc:
            raise LowerError([error('LOW001', exc.diagnostics[0].message)])
        return BOXED if bits is None else packed_layout(bits)
    return _flatten(t.pre if isinstance(t, Type) else t, env)


def _boxed(t: Type, env: Sequence[TypeBound]) -> bool:
    if not isinstance(t.pre, VarT) or not 0 <= t.pre.index < len(env):
        return False
    bound = env[t.pre.index].size
    return bound is not None and size_const(bound) is None


def _align4(n: int) -> int:
    return (n + 3) & ~3


def _field_bytes(size) -> int:
    bits = size_const(size)
    if bits is None:
        _fail('a heap field size depends on a size variable')
    return _align4((bits + 7) // 8)


def _field_offsets(sizes) -> Tuple[List[int], int]:
    offsets, at = [], 0
    for size in sizes:
        offsets.append(at)
        at += _field_bytes(size)
    return offsets, at


def _descriptor(flagged: Set[int], words: int, skip: int = 0) -> LayoutDescriptor:
    if not flagged:
        return NO_ADDRESSES
    period = max(words, max(flagged) + 1)
    if period > 32:
        return LayoutDescriptor(ALL_ADDRESSES.mask, 32, skip)
    return LayoutDescriptor(sum(1 << w for w in flagged), period, skip)


def _const(num: NumKind, value) -> tuple:
    vt = _VALTYPE[num]
    if num.is_float:
        return f'{vt}.const', float(value)
    return f'{vt}.const', wrap(int(value), NumKind.I32 if vt == 'i32' else NumKind.I64)


_SIGNED_SUFFIX = ('div', 'rem', 'shr', 'lt', 'gt', 'le', 'ge')


def _numeric_op(num: NumKind, op: str) -> str:
    prefix = _VALTYPE[num]
    if not num.is_float and op in _SIGNED_SUFFIX:
        return f'{prefix}.{op}_{"s" if num.signed else "u"}'
    return f'{prefix}.{op}'


def _convert_ops(src: NumKind, dst: NumKind) -> List[tuple]:
    s, d = _VALTYPE[src], _VALTYPE[dst]
    if not src.is_float and not dst.is_float:
        if s == d:
            return []
        if d == 'i64':
            return [(f'i64.extend_i32_{"s" if src.signed else "u"}',)]
        return [('i32.wrap_i64',)]
    if not src.is_float:
        return [(f'{d}.convert_{s}_{"s" if src.signed else "u"}',)]
    if not dst.is_float:
        return [(f'{d}.trunc_{s}_{"s" if dst.signed else "u"}',)]
    if s == d:
        return []
    return [('f32.demote_f64',)] if d == 'f32' else [('f64.promote_f32',)]


def _signature(ft: FunType) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
    env = FunctionEnv().push_all(ft.quants).types
    params = tuple(vt for t in ft.ins for vt in lower_type(t, env).valtypes)
    results = tuple(vt for t in ft.outs for vt in lower_type(t, env).valtypes)
    return params, results


_RESTACK = {Qualify: 1, RecFold: 1, RecUnfold: 1, MemPack: 1, RefDemote: 1, Inst: 1, Ungroup: 1, CapSplit: 1,
            CapJoin: 2, RefSplit: 1, RefJoin: 2}


@dataclass(frozen=True)
class _Label:
    level: int
    base: int
    arity: int


Words = List[Tuple[int, str]]


class _FunctionLowering:
    """Lowers one function body (or global initializer) of module ``k``."""

    def __init__(self, program: '_Program', k: int, key: int, ft: FunType, local_sizes, body, name: str,
                 exports: Tuple[str, ...] = ()):
        self.p = program
        self.k = k
        self.key = key
        self.ft = ft
        self.body = body
        self.name = name
        self.exports = exports
        self.stacks = program.stacks[k]
        F0 = FunctionEnv().push_all(ft.quants)
        self.F0 = F0
        self.param_layouts = [lower_type(t, F0.types) for t in ft.ins]
        self.result_layouts = [lower_type(t, F0.types) for t in ft.outs]
        self.params, self.results = _signature(ft)
        self.locals: List[str] = []
        self.keyed: Dict[tuple, int] = {}
        self.roots: List[Tuple[int, str, int]] = []
        self.root_words = 0
        self.temp_pool: Dict[str, List[int]] = {}
        self.temp_used: Dict[str, int] = {}
        self.labels: List[_Label] = []
        self.depth = 0
        self.rb = self.new_local('i32')
        sizes = [size_of(F0.types, t) for t in ft.ins] + list(local_sizes)
        self.slots: List[Words] = []
        # slots sized by a size variable hold the address of a box
        self.boxed_slots: Set[int] = set()
        for j, size in enumerate(sizes):
            bits = size_const(size)
            if bits is None:
                self.boxed_slots.add(j)
            layout = BOXED if bits is None else packed_layout(bits)
            self.slots.append([(self.new_local(vt, True), vt) for vt in layout.valtypes])

    # locals

    def new_local(self, vt: str, address: bool = False) -> int:
        index = len(self.params) + len(self.locals)
        self.locals.append(vt)
        if address and vt in ('i32', 'i64'):
            self.roots.append((index, vt, self.root_words))
            self.root_words += 1 if vt == 'i32' else 2
        return index

    def temp(self, vt: str) -> int:
        pool = self.temp_pool.setdefault(vt, [])
        used = self.temp_used.get(vt, 0)
        if used == len(pool):
            pool.append(self.new_local(vt))
        self.temp_used[vt] = used + 1
        return pool[used]

    def at(self, pos: int, layout: FlatLayout) -> Words:
        words = []
        for w, (vt, address) in enumerate(zip(layout.valtypes, layout.addresses)):
            key = (pos, w, vt, address)
            if key not in self.keyed:
                self.keyed[key] = self.new_local(vt, address)
            words.append((self.keyed[key], vt))
        return words

    def lay(self, t: Type, F: FunctionEnv) -> FlatLayout:
        return lower_type(t, F.types)

    def value_at(self, pos: int, t: Type, F: FunctionEnv) -> Words:
        return self.at(pos, self.lay(t, F))

    def values_at(self, base: int, stack, start: int, F: FunctionEnv) -> Words:
        words = []
        for j in range(start, len(stack)):
            words += self.value_at(base + j, stack[j], F)
        return words

    # code helpers

    def move(self, src: Words, dst: Words) -> List[tuple]:
        """Copies a value between word lists, going through the scratch area when the layouts differ."""
        if [vt for _, vt in src] == [vt for _, vt in dst]:
            if all(s == d for (s, _), (d, _) in zip(src, dst)):
                return []
            return [('local.get', s) for s, _ in src] + [('local.set', d) for d, _ in reversed(dst)]
        src_bytes = sum(_WIDTH[vt] for _, vt in src)
        dst_bytes = sum(_WIDTH[vt] for _, vt in dst)
        if max(src_bytes, dst_bytes) > SCRATCH_BYTES:
            _fail(f'{self.name}: a value of {max(src_bytes, dst_bytes)} bytes does not fit the relayout scratch')
        code, at = [], SCRATCH
        for s, vt in src:
            code += [('i32.const', 0), ('local.get', s), (f'{vt}.store', at)]
            at += _WIDTH[vt]
        at = SCRATCH
        for d, vt in dst:
            code += [('i32.const', 0), (f'{vt}.load', at), ('local.set', d)]
            at += _WIDTH[vt]
        return code

    def fits(self, src: Words, dst: Words, what: str) -> None:
        if sum(_WIDTH[vt] for _, vt in src) > sum(_WIDTH[vt] for _, vt in dst):
            _fail(f'{self.name}: the layout of a value is larger than its {what}')

    def slot_in(self, j: int, t: Type, F: FunctionEnv, src: Words) -> List[tuple]:
        """Stores a value of type ``t`` into local slot ``j``, boxing it when the slot is boxed and ``t`` is not."""
        slot = self.slots[j]
        if j not in self.boxed_slots:
            self.fits(src, slot, f'local slot {j}')
            return self.move(src, slot)
        if not src:
            return []
        if _boxed(t, F.types):
            return self.move(src, slot)
        code, words = self.box(src)
        return code + self.move(words, slot)

    def slot_out(self, j: int, t: Type, F: FunctionEnv, dst: Words) -> List[tuple]:
        slot = self.slots[j]
        if j not in self.boxed_slots or _boxed(t, F.types):
            return self.move(slot, dst)
        if not dst:
            return []
        return self.load_words(slot[0][0], 0, self.lay(t, F), dst)

    @staticmethod
    def load_words(address: int, offset: int, layout: FlatLayout, dst: Words) -> List[tuple]:
        code = []
        for at, (d, vt) in zip(layout.offsets, dst):
            code += [('local.get', address), (f'{vt}.load', offset + at), ('local.set', d)]
        return code

    @staticmethod
    def store_words(address: int, offset: int, layout: FlatLayout, src: Words) -> List[tuple]:
        code = []
        for at, (s, vt) in zip(layout.offsets, src):
            code += [('local.get', address), ('local.get', s), (f'{vt}.store', offset + at)]
        return code

    def flush(self) -> List[tuple]:
        """Stores every address-carrying local into this frame's root slots."""
        code = []
        for index, vt, slot in self.roots:
            if vt == 'i32':
                code += [('local.get', self.rb), ('local.get', index), ('i32.store', 4 * slot)]
            else:
                code += [('local.get', self.rb), ('local.get', index), ('i32.wrap_i64',), ('i32.store', 4 * slot),
                         ('local.get', self.rb), ('local.get', index), ('i64.const', 32), ('i64.shr_u',),
                         ('i32.wrap_i64',), ('i32.store', 4 * slot + 4)]
        return code

    def alloc(self, size_code: List[tuple], descriptor: LayoutDescriptor, unrestricted: bool,
              address: int) -> List[tuple]:
        info = block_info(self.p.site(descriptor), unrestricted)
        return self.flush() + size_code + [('i32.const', info), ('call', self.p.rt['rw_alloc']),
                                           ('local.tee', address), ('i32.eqz',), ('if', [('unreachable',)], [])]

    def leave(self, words: Words) -> List[tuple]:
        return [('local.get', self.rb), ('global.set', ROOT_TOP)] + [('local.get', w) for w, _ in words]

    def dispatch(self, selector: List[tuple], arms: List[Callable[[], List[tuple]]]) -> tuple:
        """Nested blocks with a br_table on ``selector``; arm i runs after block i closes, then leaves the exit."""
        k = len(arms)
        exit_level = self.depth
        code = selector + [('br_table', list(range(k - 1)), k - 1)]
        for i, arm in enumerate(arms):
            self.depth = exit_level + 1 + (k - 1 - i)
            arm_code = arm()
            if i < k - 1:
                arm_code = arm_code + [('br', k - 1 - i)]
            code = [('block', code)] + arm_code
        self.depth = exit_level
        return 'block', code

    def branch(self, depth: int, stack, F: FunctionEnv, base: int) -> List[tuple]:
        label = self.labels[-1 - depth]
        start = len(stack) - label.arity
        src = self.values_at(base, stack, start, F)
        dst = []
        for j in range(label.arity):
            dst += self.value_at(label.base + j, stack[start + j], F)
        return self.move(src, dst) + [('br', self.depth - 1 - label.level)]

    def nested(self, instrs, path, base: int, outs, arity: int) -> List[tuple]:
        self.labels.append(_Label(self.depth, base, arity))
        self.depth += 1
        code, _ = self.lower_seq(instrs, path, base, outs)
        self.depth -= 1
        self.labels.pop()
        return code

    # calls

    def box(self, src: Words) -> Tuple[List[tuple], Words]:
        address = self.new_local('i32', True)
        size = sum(_WIDTH[vt] for _, vt in src)
        layout = FlatLayout(tuple(vt for _, vt in src), (True,) * len(src))
        code = self.alloc([('i32.const', size)], ALL_ADDRESSES, True, address)
        return code + self.store_words(address, 0, layout, src), [(address, 'i32')]

    def coerce_in(self, caller: Type, F: FunctionEnv, callee: Type, env, src: Words) -> Tuple[List[tuple], Words]:
        if _boxed(callee, env):
            if _boxed(caller, F.types):
                return [], src
            return self.box(src)
        if isinstance(callee.pre, ProdT) and isinstance(caller.pre, ProdT):
            code, words, at = [], [], 0
            for ct, kt in zip(caller.pre.types, callee.pre.types):
                n = len(self.lay(ct, F).valtypes)
                c, w = self.coerce_in(ct, F, kt, env, src[at:at + n])
                code, words, at = code + c, words + w, at + n
            return code, words
        if isinstance(callee.pre, ExLocT) and isinstance(caller.pre, ExLocT):
            return self.coerce_in(caller.pre.body, F, callee.pre.body, env, src)
        target = lower_type(callee, env)
        if [vt for _, vt in src] == list(target.valtypes):
            return [], src
        dst = [(self.temp(vt), vt) for vt in target.valtypes]
        return self.move(src, dst), dst

    def coerce_out(self, callee: Type, env, caller: Type, F: FunctionEnv, src: Words, dst: Words) -> List[tuple]:
        if _boxed(callee, env) and not _boxed(caller, F.types):
            return self.load_words(src[0][0], 0, self.lay(caller, F), dst)
        if isinstance(callee.pre, ProdT) and isinstance(caller.pre, ProdT):
            code, s_at, d_at = [], 0, 0
            for kt, ct in zip(callee.pre.types, caller.pre.types):
                ns, nd = len(lower_type(kt, env).valtypes), len(self.lay(ct, F).valtypes)
                code += self.coerce_out(kt, env, ct, F, src[s_at:s_at + ns], dst[d_at:d_at + nd])
                s_at, d_at = s_at + ns, d_at + nd
            return code
        if isinstance(callee.pre, ExLocT) and isinstance(caller.pre, ExLocT):
            return self.coerce_out(callee.pre.body, env, caller.pre.body, F, src, dst)
        return self.move(src, dst)

    # driver

    def lower(self) -> WasmFunc:
        body, word = [], 0
        for j, layout in enumerate(self.param_layouts):
            src = [(word + w, vt) for w, vt in enumerate(layout.valtypes)]
            word += len(src)
            body += self.slot_in(j, self.ft.ins[j], self.F0, src)
        code, diverged = self.lower_seq(self.body, (), 0, self.ft.outs)
        body += code
        if not diverged:
            results = []
            for j, layout in enumerate(self.result_layouts):
                results += self.at(j, layout)
            body += self.leave(results)
        prologue = [('i32.const', self.root_words), ('call', self.p.rt['rw_root_push']), ('local.set', self.rb)]
        logger.debug('lowered %s: %d locals, %d root words', self.name, len(self.locals), self.root_words)
        return WasmFunc(self.name, self.params, self.results, self.locals, prologue + body, self.exports)

    def lower_seq(self, instrs, path, base: int, outs) -> Tuple[List[tuple], bool]:
        code = []
        for i, e in enumerate(instrs):
            record = self.stacks.get((self.key, path + (i,)))
            if record is None:
                return code, True
            stack, F, L = record
            if i + 1 < len(instrs):
                following = self.stacks.get((self.key, path + (i + 1,)))
                after = following[0] if following is not None else None
            else:
                after = tuple(outs)
            self.temp_used = {}
            instr_code, diverged = self.instr(e, stack, after, F, L, base, path + (i,))
            code += instr_code
            if diverged:
                return code, True
        return code, False

    def instr(self, e, stack, after, F: FunctionEnv, L, base: int, here) -> Tuple[List[tuple], bool]:
        p = base + len(stack)
        rt = self.p.rt

        def get(words):
            return [('local.get', w) for w, _ in words]

        def put(words):
            return [('local.set', w) for w, _ in reversed(words)]

        # numeric
        if isinstance(e, Const):
            return [_const(e.num, e.value)] + put(self.value_at(p, after[-1], F)), False
        if isinstance(e, UnitV):
            return [], False
        if isinstance(e, (Binop, Relop)):
            a, b = self.value_at(p - 2, stack[-2], F), self.value_at(p - 1, stack[-1], F)
            dst = self.value_at(p - 2, after[-1], F)
            return get(a) + get(b) + [(_numeric_op(e.num, e.op),)] + put(dst), False
        if isinstance(e, (Testop, Unop)):
            a = self.value_at(p - 1, stack[-1], F)
            return get(a) + [(_numeric_op(e.num, e.op),)] + put(self.value_at(p - 1, after[-1], F)), False
        if isinstance(e, Convert):
            a = self.value_at(p - 1, stack[-1], F)
            return get(a) + _convert_ops(e.src, e.dst) + put(self.value_at(p - 1, after[-1], F)), False

        # control
        if isinstance(e, Unreachable):
            return [('unreachable',)], True
        if isinstance(e, (Nop, Drop)):
            return [], False
        if isinstance(e, Select):
            a, b = self.value_at(p - 3, stack[-3], F), self.value_at(p - 2, stack[-2], F)
            c = self.value_at(p - 1, stack[-1], F)
            code = []
            for (aw, _), (bw, _) in zip(a, b):
                code += [('local.get', aw), ('local.get', bw), ('local.get', c[0][0]), ('select',),
                         ('local.set', aw)]
            return code, False
        if isinstance(e, Block):
            inner = p - len(e.arrow.ins)
            return [('block', self.nested(e.body, here + (0,), inner, e.arrow.outs, len(e.arrow.outs)))], False
        if isinstance(e, Loop):
            inner = p - len(e.arrow.ins)
            return [('loop', self.nested(e.body, here + (0,), inner, e.arrow.outs, len(e.arrow.ins)))], False
        if isinstance(e, Ite):
            c = self.value_at(p - 1, stack[-1], F)
            inner = p - 1 - len(e.arrow.ins)
            arity = len(e.arrow.outs)
            then = self.nested(e.then, here + (0,), inner, e.arrow.outs, arity)
            else_ = self.nested(e.else_, here + (1,), inner, e.arrow.outs, arity)
            return get(c) + [('if', then, else_)], False
        if isinstance(e, Br):
            return self.branch(e.depth, stack, F, base), True
        if isinstance(e, BrIf):
            c = self.value_at(p - 1, stack[-1], F)
            self.depth += 1
            taken = self.branch(e.depth, stack[:-1], F, base)
            self.depth -= 1
            return get(c) + [('if', taken, [])], False
        if isinstance(e, BrTable):
            c = self.value_at(p - 1, stack[-1], F)
            rest = stack[:-1]
            arms = [(lambda d: lambda: self.branch(d, rest, F, base))(d) for d in e.targets + (e.default,)]
            return [self.dispatch(get(c), arms), ('unreachable',)], True
        if isinstance(e, Return):
            m = len(F.ret)
            return self.leave(self.values_at(base, stack, len(stack) - m, F)) + [('return',)], True

        # locals and globals
        if isinstance(e, GetLocal):
            t = L[e.index][0]
            return self.slot_out(e.index, t, F, self.value_at(p, t, F)), False
        if isinstance(e, (SetLocal, TeeLocal)):
            src = self.value_at(p - 1, stack[-1], F)
            return self.slot_in(e.index, stack[-1], F, src), False
        if isinstance(e, GetGlobal):
            words = self.p.global_words[(self.k, e.index)]
            return [('global.get', g) for g, _, _ in words] + put(self.value_at(p, after[-1], F)), False
        if isinstance(e, SetGlobal):
            src = self.value_at(p - 1, stack[-1], F)
            words = self.p.global_words[(self.k, e.index)]
            code = get(src) + [('global.set', g) for g, _, _ in reversed(words)]
            for (s, _), (_, _, slot) in zip(src, words):
                if slot is not None:
                    code += [('i32.const', 0), ('local.get', s), ('i32.store', ROOTS + 4 * slot)]
            return code, False

        # type-level
        if type(e) in _RESTACK or isinstance(e, Group):
            consumed = e.count if isinstance(e, Group) else _RESTACK[type(e)]
            start = len(stack) - consumed
            src = self.values_at(base, stack, start, F)
            dst = self.values_at(base, after, start, F)
            return self.move(src, dst), False
        if isinstance(e, CodeRefI):
            return [('i32.const', self.p.table_base[self.k] + e.index)] + put(self.value_at(p, after[-1], F)), False
        if isinstance(e, Call):
            return self.call(e, stack, after, F, base), False
        if isinstance(e, CallIndirect):
            return self.call_indirect(stack, after, F, base), False
        if isinstance(e, MemUnpack):
            inner = p - 1 - len(e.arrow.ins)
            outs = shift(e.arrow.outs, Kind.LOC)
            return [('block', self.nested(e.body, here + (0,), inner, outs, len(outs)))], False

        # heap
        if isinstance(e, StructMalloc):
            n = len(e.sizes)
            start = len(stack) - n
            offsets, total = _field_offsets(e.sizes)
            layouts = [self.lay(t, F) for t in stack[start:]]
            flagged = set()
            for layout, offset, size in zip(layouts, offsets, e.sizes):
                if layout.bytes > _field_bytes(size):
                    _fail(f'{self.name}: the layout of a struct field is larger than the field')
                flagged |= layout.address_words(offset)
            unrestricted = not qual_leq(F.quals, LIN, e.qual)
            descriptor = _descriptor(flagged, total // 4) if e.qual == UNR else \
                _descriptor(set(range(total // 4)), total // 4)
            address = self.temp('i32')
            code = self.alloc([('i32.const', total)], descriptor, unrestricted, address)
            for j, (layout, offset) in enumerate(zip(layouts, offsets)):
                src = self.value_at(base + start + j, stack[start + j], F)
                code += self.store_words(address, offset, layout, src)
            return code + [('local.get', address)] + put(self.value_at(base + start, after[-1], F)), False
        if isinstance(e, StructFree):
            ref = self.value_at(p - 1, stack[-1], F)
            return get(ref) + [('call', rt['rw_free'])], False
        if isinstance(e, StructGet):
            ref_t = stack[-1]
            fields = ref_t.pre.heap.fields
            offsets, _ = _field_offsets([sz for _, sz in fields])
            ref = self.value_at(p - 1, ref_t, F)
            field = fields[e.index][0]
            dst = self.value_at(p, after[-1], F)
            return self.load_words(ref[0][0], offsets[e.index], self.lay(field, F), dst), False
        if isinstance(e, (StructSet, StructSwap)):
            ref_t = stack[-2]
            fields = ref_t.pre.heap.fields
            offsets, _ = _field_offsets([sz for _, sz in fields])
            offset = offsets[e.index]
            ref = self.value_at(p - 2, ref_t, F)[0][0]
            new_layout = self.lay(stack[-1], F)
            if new_layout.bytes > _field_bytes(fields[e.index][1]):
                _fail(f'{self.name}: the layout of a struct field is larger than the field')
            src = self.value_at(p - 1, stack[-1], F)
            if isinstance(e, StructSet):
                return self.store_words(ref, offset, new_layout, src), False
            old_layout = self.lay(fields[e.index][0], F)
            temps = [(self.temp(vt), vt) for vt in old_layout.valtypes]
            code = self.load_words(ref, offset, old_layout, temps)
            code += self.store_words(ref, offset, new_layout, src)
            return code + self.move(temps, self.value_at(p - 1, after[-1], F)), False
        if isinstance(e, VariantMalloc):
            payload = self.lay(stack[-1], F)
            flagged, words = set(), 1
            for case in e.cases:
                layout = self.lay(case, F)
                flagged |= layout.address_words(4)
                words = max(words, 1 + layout.bytes // 4)
            unrestricted = not qual_leq(F.quals, LIN, e.qual)
            address = self.temp('i32')
            code = self.alloc([('i32.const', 4 + payload.bytes)], _descriptor(flagged, words), unrestricted, address)
            code += [('local.get', address), ('i32.const', e.tag), ('i32.store', 0)]
            code += self.store_words(address, 4, payload, self.value_at(p - 1, stack[-1], F))
            return code + [('local.get', address)] + put(self.value_at(p - 1, after[-1], F)), False
        if isinstance(e, VariantCase):
            return self.variant_case(e, stack, F, base, here), False
        if isinstance(e, ArrayMalloc):
            return self.array_malloc(e, stack, after, F, base), False
        if isinstance(e, (ArrayGet, ArraySet)):
            at = 2 if isinstance(e, ArrayGet) else 3
            ref_t = stack[-at]
            layout = self.lay(ref_t.pre.heap.elem, F)
            ref = self.value_at(p - at, ref_t, F)[0][0]
            index = self.value_at(p - at + 1, stack[-at + 1], F)[0][0]
            element = self.temp('i32')
            code = [('local.get', index), ('local.get', ref), ('i32.load', 0), ('i32.ge_u',),
                    ('if', [('unreachable',)], []),
                    ('local.get', ref), ('local.get', index), ('i32.const', layout.bytes), ('i32.mul',),
                    ('i32.add',), ('local.set', element)]
            if isinstance(e, ArrayGet):
                return code + self.load_words(element, 4, layout, self.value_at(p - 1, after[-1], F)), False
            return code + self.store_words(element, 4, layout, self.value_at(p - 1, stack[-1], F)), False
        if isinstance(e, ArrayFree):
            return get(self.value_at(p - 1, stack[-1], F)) + [('call', rt['rw_free'])], False
        if isinstance(e, ExistPack):
            heap = e.heap
            if size_const(heap.size) is None:
                _fail(f'{self.name}: an existential package bound depends on a size variable')
            concrete = self.lay(stack[-1], F)
            abstract = lower_type(heap.body, (TypeBound(heap.qual, heap.size),) + tuple(F.types))
            size = max(concrete.bytes, abstract.bytes)
            descriptor = _descriptor(concrete.address_words() | abstract.address_words(), size // 4)
            unrestricted = not qual_leq(F.quals, LIN, e.qual)
            address = self.temp('i32')
            code = self.alloc([('i32.const', size)], descriptor, unrestricted, address)
            code += self.store_words(address, 0, concrete, self.value_at(p - 1, stack[-1], F))
            return code + [('local.get', address)] + put(self.value_at(p - 1, after[-1], F)), False
        if isinstance(e, ExistUnpack):
            return self.exist_unpack(e, stack, F, base, here), False
        _fail(f'{self.name}: {type(e).__name__} cannot appear in a module being lowered')

    def call(self, e: Call, stack, after, F: FunctionEnv, base: int) -> List[tuple]:
        target = self.p.func_target[(self.k, e.index)]
        ft = self.p.target_type(target)
        env = FunctionEnv().push_all(ft.quants).types
        start = len(stack) - len(ft.ins)
        code, args = [], []
        for j, callee_t in enumerate(ft.ins):
            src = self.value_at(base + start + j, stack[start + j], F)
            c, words = self.coerce_in(stack[start + j], F, callee_t, env, src)
            code, args = code + c, args + words
        code += self.flush() + [('local.get', w) for w, _ in args] + [('call', self.p.target_index(target))]
        results = [[(self.temp(vt), vt) for vt in lower_type(t, env).valtypes] for t in ft.outs]
        code += [('local.set', w) for words in reversed(results) for w, _ in reversed(words)]
        for j, callee_t in enumerate(ft.outs):
            dst = self.value_at(base + start + j, after[start + j], F)
            code += self.coerce_out(callee_t, env, after[start + j], F, results[j], dst)
        return code

    def call_indirect(self, stack, after, F: FunctionEnv, base: int) -> List[tuple]:
        p = base + len(stack)
        ft = stack[-1].pre.fun
        if len(ft.ins) > ARG_SLOTS or len(ft.outs) > ARG_SLOTS:
            _fail(f'{self.name}: indirect calls pass at most {ARG_SLOTS} arguments and results')
        coderef = self.value_at(p - 1, stack[-1], F)[0][0]
        start = len(stack) - 1 - len(ft.ins)
        code = []
        for j in range(len(ft.ins)):
            layout = self.lay(stack[start + j], F)
            if layout.bytes > ARG_SLOT_BYTES:
                _fail(f'{self.name}: an indirect-call argument is larger than {ARG_SLOT_BYTES} bytes')
            for at, (s, vt) in zip(layout.offsets, self.value_at(base + start + j, stack[start + j], F)):
                code += [('i32.const', 0), ('local.get', s), (f'{vt}.store', ARG_AREA + ARG_SLOT_BYTES * j + at)]
        code += self.flush() + [('local.get', coderef), ('call_indirect', ((), ()))]
        for j in range(len(ft.outs)):
            layout = self.lay(after[start + j], F)
            if layout.bytes > ARG_SLOT_BYTES:
                _fail(f'{self.name}: an indirect-call result is larger than {ARG_SLOT_BYTES} bytes')
            for at, (d, vt) in zip(layout.offsets, self.value_at(base + start + j, after[start + j], F)):
                code += [('i32.const', 0), (f'{vt}.load', ARG_AREA + ARG_SLOT_BYTES * j + at), ('local.set', d)]
        return code

    def unpacking(self, e, stack, F: FunctionEnv, base: int):
        """Common part of variant.case and exists.unpack: returns (code, address local, inner base, linear)."""
        n = len(e.arrow.ins)
        position = base + len(stack) - n - 1
        address = self.new_local('i32')
        code = [('local.get', self.value_at(position, stack[-n - 1], F)[0][0]), ('local.set', address)]
        linear = qual_leq(F.quals, LIN, e.qual)
        if linear:
            src, dst = [], []
            for j in range(n):
                t = stack[len(stack) - n + j]
                src += self.value_at(position + 1 + j, t, F)
                dst += self.value_at(position + j, t, F)
            code += self.move(src, dst)
            return code, address, position, linear
        return code, address, position + 1, linear

    def variant_case(self, e: VariantCase, stack, F: FunctionEnv, base: int, here) -> List[tuple]:
        cases = stack[-len(e.arrow.ins) - 1].pre.heap.cases
        code, address, inner, linear = self.unpacking(e, stack, F, base)
        if not cases:
            return code + [('unreachable',)]
        label = _Label(self.depth, inner, len(e.arrow.outs))
        n = len(e.arrow.ins)

        def arm(k):
            def lower_arm():
                layout = self.lay(cases[k], F)
                arm_code = self.load_words(address, 4, layout, self.at(inner + n, layout))
                if linear:
                    arm_code += [('local.get', address), ('call', self.p.rt['rw_free'])]
                self.labels.append(label)
                body, _ = self.lower_seq(e.bodies[k], here + (k,), inner, e.arrow.outs)
                self.labels.pop()
                return arm_code + body
            return lower_arm

        selector = [('local.get', address), ('i32.load', 0)]
        return code + [self.dispatch(selector, [arm(k) for k in range(len(cases))])]

    def exist_unpack(self, e: ExistUnpack, stack, F: FunctionEnv, base: int, here) -> List[tuple]:
        heap = stack[-len(e.arrow.ins) - 1].pre.heap
        if size_const(heap.size) is None:
            _fail(f'{self.name}: an existential package bound depends on a size variable')
        code, address, inner, linear = self.unpacking(e, stack, F, base)
        layout = lower_type(heap.body, (TypeBound(heap.qual, heap.size),) + tuple(F.types))
        opening = self.load_words(address, 0, layout, self.at(inner + len(e.arrow.ins), layout))
        if linear:
            opening += [('local.get', address), ('call', self.p.rt['rw_free'])]
        outs = shift(e.arrow.outs, Kind.TYPE)
        body = self.nested(e.body, here + (0,), inner, outs, len(outs))
        return code + [('block', opening + body)]

    def array_malloc(self, e: ArrayMalloc, stack, after, F: FunctionEnv, base: int) -> List[tuple]:
        p = base + len(stack)
        elem = self.lay(stack[-2], F)
        width = elem.bytes
        count = self.temp('i32')
        address = self.temp('i32')
        code = [('local.get', self.value_at(p - 1, stack[-1], F)[0][0]), ('local.set', count),
                ('local.get', count), ('i32.const', 0), ('i32.lt_s',), ('if', [('unreachable',)], [])]
        if width > 0:
            code += [('local.get', count), ('i32.const', _MAX_BYTES // width), ('i32.gt_u',),
                     ('if', [('unreachable',)], [])]
        flagged = elem.address_words()
        if not flagged or width == 0:
            descriptor = NO_ADDRESSES
        elif width // 4 > 32:
            descriptor = LayoutDescriptor(ALL_ADDRESSES.mask, 32, 1)
        else:
            descriptor = LayoutDescriptor(sum(1 << w for w in flagged), width // 4, 1)
        size = [('i32.const', 4), ('local.get', count), ('i32.const', width), ('i32.mul',), ('i32.add',)]
        code += self.alloc(size, descriptor, not qual_leq(F.quals, LIN, e.qual), address)
        code += [('local.get', address), ('local.get', count), ('i32.store', 0)]
        if width > 0:
            i = self.temp('i32')
            element = self.temp('i32')
            fill = [('local.get', i), ('local.get', count), ('i32.ge_s',), ('br_if', 1),
                    ('local.get', address), ('local.get', i), ('i32.const', width), ('i32.mul',), ('i32.add',),
                    ('local.set', element)]
            fill += self.store_words(element, 4, elem, self.value_at(p - 2, stack[-2], F))
            fill += [('local.get', i), ('i32.const', 1), ('i32.add',), ('local.set', i), ('br', 0)]
            code += [('i32.const', 0), ('local.set', i), ('block', [('loop', fill)])]
        return code + [('local.get', address), ('local.set', self.value_at(p - 2, after[-1], F)[0][0])]


class _Program:
    def __init__(self, modules: Sequence[Tuple[str, RWModule]], link_map: Optional[Dict] = None):
        self.modules = list(modules)
        self.link_map = dict(link_map or {})
        self.stacks = []
        for name, m in self.modules:
            records = {}

            def record(func_index, path, stack, F, L, records=records):
                records[(func_index, path)] = (stack, F, L)

            check_module(m, recorder=record)
            self.stacks.append(records)
        self.sites: List[LayoutDescriptor] = [NO_ADDRESSES, ALL_ADDRESSES]
        self.imports: List[Tuple[WasmImport, FunType]] = []
        self.func_target: Dict[Tuple[int, int], tuple] = {}
        self.global_source: Dict[Tuple[int, int], Tuple[int, int]] = {}
        self.resolve()
        self.rt = runtime_index(len(self.imports))
        self.func_index: Dict[Tuple[int, int], int] = {}
        next_index = len(self.imports) + len(RUNTIME_FUNCS)
        for k, (_, m) in enumerate(self.modules):
            for i, f in enumerate(m.funcs):
                if isinstance(f, Func):
                    self.func_index[(k, i)] = next_index
                    next_index += 1
        self.first_free_index = next_index
        self.table_base: Dict[int, int] = {}
        self.table: List[tuple] = []
        for k, (_, m) in enumerate(self.modules):
            self.table_base[k] = len(self.table)
            self.table += [self.func_target[(k, entry)] for entry in m.table.entries]
        self.wasm_globals: List[WasmGlobal] = runtime_globals()
        self.global_words: Dict[Tuple[int, int], List[Tuple[int, str, Optional[int]]]] = {}
        self.global_root_words = 0
        for k, (_, m) in enumerate(self.modules):
            for i, g in enumerate(m.globals):
                if isinstance(g, Global):
                    words = []
                    layout = lower_type(g.pre)
                    for vt, address in zip(layout.valtypes, layout.addresses):
                        slot = None
                        if address and vt == 'i32':
                            slot = self.global_root_words
                            self.global_root_words += 1
                        words.append((len(self.wasm_globals), vt, slot))
                        self.wasm_globals.append(WasmGlobal(vt, True, 0.0 if vt in ('f32', 'f64') else 0))
                    self.global_words[(k, i)] = words
        for (k, i), source in self.global_source.items():
            self.global_words[(k, i)] = self.global_words[source]

    def resolve(self) -> None:
        exports = {}
        wasm_imports = {}
        for k, (name, m) in enumerate(self.modules):
            for i, f in enumerate(m.funcs):
                if isinstance(f, FuncImport):
                    wanted = self.link_map.get((f.module, f.name), (f.module, f.name))
                    found = exports.get(wanted)
                    if found is None:
                        if wanted not in wasm_imports:
                            params, results = _signature(f.type)
                            wasm_imports[wanted] = len(self.imports)
                            self.imports.append((WasmImport(wanted[0], wanted[1], params, results), f.type))
                        self.func_target[(k, i)] = ('import', wasm_imports[wanted])
                    elif found[0] != 'func':
                        raise LinkError([error('LNK001', f'{name}: {f.module}.{f.name} is not a function')])
                    else:
                        if self.target_type(found[1]) != f.type:
                            raise LinkError([error('LNK002', f'{name}: import {f.module}.{f.name} has a '
                                                             f'different type than its export')])
                        self.func_target[(k, i)] = found[1]
                else:
                    self.func_target[(k, i)] = ('func', k, i)
                for export in f.exports:
                    exports[(name, export)] = ('func', self.func_target[(k, i)])
            for i, g in enumerate(m.globals):
                if isinstance(g, GlobalImport):
                    found = exports.get(self.link_map.get((g.module, g.name), (g.module, g.name)))
                    if found is None or found[0] != 'global':
                        _fail(f'{name}: global import {g.module}.{g.name} must be provided by an earlier module')
                    self.global_source[(k, i)] = found[1]
                    source = found[1]
                else:
                    source = (k, i)
                for export in g.exports:
                    exports[(name, export)] = ('global', source)

    def target_type(self, target: tuple) -> FunType:
        if target[0] == 'import':
            return self.imports[target[1]][1]
        _, k, i = target
        return self.modules[k][1].funcs[i].type

    def target_index(self, target: tuple) -> int:
        if target[0] == 'import':
            return target[1]
        return self.func_index[(target[1], target[2])]

    def site(self, descriptor: LayoutDescriptor) -> int:
        if descriptor in self.sites:
            return self.sites.index(descriptor)
        if len(self.sites) >= MAX_SITES:
            _fail(f'more than {MAX_SITES} distinct allocation layouts')
        self.sites.append(descriptor)
        return len(self.sites) - 1

    def adapter(self, target: tuple, name: str) -> WasmFunc:
        """Table entry wrapper: reads parameters from the argument area and writes results back to it."""
        ft = self.target_type(target)
        env = FunctionEnv().push_all(ft.quants).types
        if len(ft.ins) > ARG_SLOTS or len(ft.outs) > ARG_SLOTS:
            _fail(f'{name}: indirect calls pass at most {ARG_SLOTS} arguments and results')
        body, result_locals = [], []
        for j, t in enumerate(ft.ins):
            layout = lower_type(t, env)
            if _boxed(t, env) or layout.bytes > ARG_SLOT_BYTES:
                _fail(f'{name}: table entries cannot take boxed or oversized arguments')
            for at, vt in zip(layout.offsets, layout.valtypes):
                body += [('i32.const', 0), (f'{vt}.load', ARG_AREA + ARG_SLOT_BYTES * j + at)]
        body.append(('call', self.target_index(target)))
        stores = []
        for j, t in enumerate(ft.outs):
            layout = lower_type(t, env)
            if _boxed(t, env) or layout.bytes > ARG_SLOT_BYTES:
                _fail(f'{name}: table entries cannot return boxed or oversized results')
            for at, vt in zip(layout.offsets, layout.valtypes):
                local = len(result_locals)
                result_locals.append(vt)
                stores += [('i32.const', 0), ('local.get', local),
                           (f'{vt}.store', ARG_AREA + ARG_SLOT_BYTES * j + at)]
        body += [('local.set', i) for i in reversed(range(len(result_locals)))] + stores
        return WasmFunc(name, (), (), result_locals, body)

    def lower(self) -> WasmModule:
        w = WasmModule(imports=[imp for imp, _ in self.imports], memory=(INITIAL_PAGES, MAX_PAGES),
                       memory_export='memory')
        w.funcs += runtime_funcs(len(self.imports))
        last = len(self.modules) - 1
        exported: Dict[tuple, List[str]] = {}
        for k, (name, m) in enumerate(self.modules):
            for i, f in enumerate(m.funcs):
                names = []
                for export in f.exports:
                    if len(self.modules) > 1:
                        names.append(f'{name}.{export}')
                    if k == last:
                        names.append(export)
                exported.setdefault(self.func_target[(k, i)], []).extend(names)
        for k, (name, m) in enumerate(self.modules):
            for i, f in enumerate(m.funcs):
                if isinstance(f, Func):
                    fl = _FunctionLowering(self, k, i, f.type, f.locals, f.body, f'{name}.f{i}',
                                           tuple(exported.get(('func', k, i), ())))
                    w.funcs.append(fl.lower())
        for target, names in exported.items():
            if target[0] == 'import' and names:
                logger.warning('re-exporting imported function %s.%s is not supported; skipped',
                               self.imports[target[1]][0].module, self.imports[target[1]][0].name)
        adapters = [self.adapter(target, f'adapter{j}') for j, target in enumerate(self.table)]
        w.table = [len(w.imports) + len(w.funcs) + j for j in range(len(adapters))]
        w.funcs += adapters
        start = []
        if self.global_root_words:
            start += [('i32.const', self.global_root_words), ('call', self.rt['rw_root_push']), ('drop',)]
        for k, (name, m) in enumerate(self.modules):
            for i, g in enumerate(m.globals):
                if not isinstance(g, Global):
                    continue
                ft = FunType((), (), (Type(g.pre, UNR),))
                init = _FunctionLowering(self, k, -1 - i, ft, (), g.init, f'{name}.init{i}').lower()
                start.append(('call', len(w.imports) + len(w.funcs)))
                w.funcs.append(init)
                words = self.global_words[(k, i)]
                start += [('global.set', g_index) for g_index, _, _ in reversed(words)]
                for g_index, _, slot in words:
                    if slot is not None:
                        start += [('i32.const', 0), ('global.get', g_index), ('i32.store', ROOTS + 4 * slot)]
        if start:
            w.start = len(w.imports) + len(w.funcs)
            w.funcs.append(WasmFunc('rw_start', (), (), [], start))
        w.globals = self.wasm_globals
        w.data = [layout_segment(self.sites)]
        logger.info('lowered %d modules into %d Wasm functions', len(self.modules), len(w.funcs))
        return w


def lower_program(modules: Sequence[Tuple[str, RWModule]], link_map: Optional[Dict] = None) -> WasmModule:
    """Lowers a sequence of named modules into one Wasm module

    Function imports satisfied by an earlier module become direct calls; the rest become Wasm imports. Global imports
    must be satisfied. Per-module tables are concatenated into one indirect-call table.

    Parameters
    ----------
    modules: Sequence[Tuple[str, RWModule]]
        Named modules in instantiation order.

    link_map: Dict, default = None
        Overrides: import (module, name) to export (module, name).

    Returns
    -------
    w: WasmModule
        The lowered program with the runtime functions, one memory and the layout-descriptor data segment.

    Raises
    ------
    CheckError
        When a module does not type check.
    LowerError
        When a construct falls outside the lowerable fragment.
    """
    assert len(modules) > 0, f'Nothing to lower.'
    return _Program(modules, link_map).lower()


def lower_module(m: RWModule, name: str = 'main') -> WasmModule:
    return lower_program([(name, m)])


def wasm_args(values) -> List:
    """Wasm words for numeric argument values."""
    words = []
    for v in values:
        if isinstance(v, Const):
            words.append(_const(v.num, v.value)[1])
        elif not isinstance(v, UnitV):
            raise ValueError(f'Only numeric and unit arguments can be passed to lowered code, got {v}.')
    return words


def rich_results(types: Sequence[Type], words: Sequence) -> Tuple:
    """Reads lowered results back as RichWasm values; addresses are reported as None."""
    out, at = [], 0
    for t in types:
        n = len(lower_type(t).valtypes)
        chunk = words[at:at + n]
        at += n
        if isinstance(t.pre, NumT):
            out.append(Const(t.pre.num, normalize(t.pre.num, chunk[0])))
        elif n == 0:
            out.append(UnitV())
        else:
            out.append(None)
    return tuple(out)
