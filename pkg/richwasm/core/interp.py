"""Reference interpreter: small-step reduction over configurations with a two-memory store.

The store keeps, next to every heap value, the heap type it was allocated at (updated by strong updates). The
interpreter never consults these types; they exist so that a configuration can be re-checked after any step.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from richwasm.core import numerics
from richwasm.core.constraints import size_of, size_const
from richwasm.core.env import ModuleEnv, StoreTyping
from richwasm.core.ir import (Kind, UNR, LIN, QualConst, SizeConst, Mem, NumKind, Type, UnitT,
                              StructHT, VariantHT, ArrayHT, LocConst, Const, UnitV, ProdV, RefV, PtrV, CapV,
                              OwnV, FoldV, MemPackV, CodeRefV, VariantHV, StructHV, ArrayHV, PackHV, Binop, Relop,
                              Testop, Unop, Convert, Unreachable, Nop, Drop, Select, Block, Loop, Ite, Br, BrIf,
                              BrTable, Return, GetLocal, SetLocal, TeeLocal, GetGlobal, SetGlobal, Qualify, CodeRefI,
                              Inst, CallIndirect, Call, RecFold, RecUnfold, MemPack, MemUnpack, Group, Ungroup,
                              CapSplit, CapJoin, RefDemote, RefSplit, RefJoin, StructMalloc, StructFree, StructGet,
                              StructSet, StructSwap, VariantMalloc, VariantCase, ArrayMalloc, ArrayGet, ArraySet,
                              ArrayFree, ExistPack, ExistUnpack, Trap, CallClosure, Label, LocalFrame, Malloc, Free,
                              Breaking, Returning, Func, FuncImport, Global, GlobalImport, RWModule, is_value)
from richwasm.core.subst import instantiate as instantiate_binders, substitute
from richwasm.core.typecheck import module_env, check_link, value_type
from richwasm.util.utils import InterpreterFault, LinkError, error, referenced_locations

logger = logging.getLogger(__name__)

DEFAULT_FUEL = 100_000
DEFAULT_COLLECT_EVERY = 64


@dataclass(frozen=True)
class Closure:
    inst: int
    index: int
    code: Func


@dataclass
class Instance:
    name: str
    module: RWModule
    env: ModuleEnv
    funcs: Tuple[Closure, ...] = ()
    globals: Tuple[int, ...] = ()
    table: Tuple[Closure, ...] = ()


@dataclass
class Store:
    """Instances, global cells and the two memories.

    ``mem[m]`` maps an address to its heap value and slot size in bits; ``heap_types[m]`` maps it to the heap type
    the location currently has.
    """
    instances: List[Instance] = field(default_factory=list)
    globals: List = field(default_factory=list)
    mem: Dict[Mem, Dict[int, Tuple[object, int]]] = field(
        default_factory=lambda: {Mem.LIN: {}, Mem.UNR: {}})
    heap_types: Dict[Mem, Dict[int, object]] = field(
        default_factory=lambda: {Mem.LIN: {}, Mem.UNR: {}})
    next_address: Dict[Mem, int] = field(default_factory=lambda: {Mem.LIN: 1, Mem.UNR: 1})

    def typing(self) -> StoreTyping:
        return StoreTyping(tuple(inst.env for inst in self.instances),
                           self.heap_types[Mem.UNR], self.heap_types[Mem.LIN])

    def read(self, loc: LocConst):
        cells = self.mem[loc.mem]
        if loc.address not in cells:
            raise InterpreterFault(f'access to {loc.mem.value} location {loc.address}, which is not allocated')
        return cells[loc.address][0]

    def write(self, loc: LocConst, hv, heap=None) -> None:
        cells = self.mem[loc.mem]
        cells[loc.address] = (hv, cells[loc.address][1])
        if heap is not None:
            self.heap_types[loc.mem][loc.address] = heap

    def allocate(self, mem: Mem, hv, bits: int, heap) -> LocConst:
        address = self.next_address[mem]
        self.next_address[mem] += 1
        self.mem[mem][address] = (hv, bits)
        self.heap_types[mem][address] = heap
        return LocConst(address, mem)

    def release(self, loc: LocConst) -> None:
        if loc.address not in self.mem[loc.mem]:
            raise InterpreterFault(f'free of {loc.mem.value} location {loc.address}, which is not allocated')
        del self.mem[loc.mem][loc.address]
        del self.heap_types[loc.mem][loc.address]


@dataclass(frozen=True)
class Configuration:
    store: Store
    locals: Tuple[Tuple[object, object], ...]
    inst: int
    instrs: Tuple


@dataclass(frozen=True)
class Stepped:
    config: Configuration
    rule: str = ''


@dataclass(frozen=True)
class Done:
    values: Tuple


@dataclass(frozen=True)
class Trapped:
    reason: str = ''


@dataclass(frozen=True)
class Stuck:
    description: str


StepOutcome = Union[Stepped, Done, Trapped, Stuck]


@dataclass
class RunResult:
    status: str
    values: Tuple = ()
    steps: int = 0
    store: Optional[Store] = None
    trace: List[str] = field(default_factory=list)


class _Stuck(Exception):
    pass


class _Trap(Exception):
    pass


def _closed_bits(t) -> int:
    bits = size_const(size_of((), t))
    if bits is None:
        raise InterpreterFault('size of a runtime type depends on a variable')
    return bits


def _memory_of(q) -> Mem:
    if not isinstance(q, QualConst):
        raise InterpreterFault('allocation qualifier was not instantiated')
    return Mem.LIN if q is LIN else Mem.UNR


def _num(v, what: str):
    if not isinstance(v, Const):
        raise _Stuck(f'{what} expects a number, found {v}')
    return v.value


class _Machine:
    def __init__(self, store: Store, trace: Optional[List[str]] = None):
        self.store = store
        self.trace = trace
        self.rule = ''

    def note(self, line: str) -> None:
        self.rule = line
        if self.trace is not None:
            self.trace.append(line)

    def reduce(self, es: Tuple, locals_: Tuple, inst: int):
        """Performs one reduction in ``es``; returns (es', locals') or None when ``es`` is terminal."""
        k = 0
        while k < len(es) and is_value(es[k]):
            k += 1
        if k == len(es):
            return None
        vs, e, rest = es[:k], es[k], es[k + 1:]
        if isinstance(e, (Trap, Breaking, Returning)):
            if k == 0 and not rest:
                return None
            self.note('trap' if isinstance(e, Trap) else 'unwind')
            return (e,), locals_
        if isinstance(e, Label):
            return self.reduce_label(vs, e, rest, locals_, inst)
        if isinstance(e, LocalFrame):
            return self.reduce_frame(vs, e, rest, locals_)
        if isinstance(e, Br):
            self.note('br')
            return (Breaking(e.depth, vs),), locals_
        if isinstance(e, Return):
            self.note('return')
            return (Returning(vs),), locals_
        if isinstance(e, Unreachable):
            self.note('unreachable')
            return (Trap(),), locals_
        try:
            consumed, out, locals_ = self.basic(e, vs, locals_, inst)
        except _Trap as exc:
            self.note(f"{exc} trap")
            return (Trap(),), locals_
        except numerics.NumericTrap as exc:
            self.note(f"{type(e).__name__.lower()} trap: {exc}")
            return (Trap(),), locals_
        if out and isinstance(out[0], (Breaking, Returning)):
            return out, locals_
        return vs[:len(vs) - consumed] + tuple(out) + rest, locals_

    def reduce_label(self, vs, e: Label, rest, locals_, inst):
        body = e.body
        if all(is_value(x) for x in body):
            self.note('label.exit')
            return vs + body + rest, locals_
        if len(body) == 1 and isinstance(body[0], Trap):
            self.note('trap')
            return (Trap(),), locals_
        if len(body) == 1 and isinstance(body[0], Breaking):
            brk = body[0]
            if brk.depth == 0:
                self.note('label.br')
                passed = brk.values[len(brk.values) - e.arity:] if e.arity else ()
                return vs + passed + e.cont + rest, locals_
            self.note('unwind')
            return (Breaking(brk.depth - 1, brk.values),), locals_
        if len(body) == 1 and isinstance(body[0], Returning):
            self.note('unwind')
            return body, locals_
        inner = self.reduce(body, locals_, inst)
        if inner is None:
            raise _Stuck(f'label body cannot step: {body}')
        body, locals_ = inner
        return vs + (Label(e.arity, e.cont, body),) + rest, locals_

    def reduce_frame(self, vs, e: LocalFrame, rest, locals_):
        body = e.body
        if all(is_value(x) for x in body):
            self.note('frame.exit')
            return vs + body + rest, locals_
        if len(body) == 1 and isinstance(body[0], Trap):
            self.note('trap')
            return (Trap(),), locals_
        if len(body) == 1 and isinstance(body[0], Returning):
            self.note('frame.return')
            values = body[0].values
            passed = values[len(values) - e.arity:] if e.arity else ()
            return vs + passed + rest, locals_
        if len(body) == 1 and isinstance(body[0], Breaking):
            raise _Stuck('branch escapes a function frame')
        inner = self.reduce(body, e.locals, e.inst)
        if inner is None:
            raise _Stuck(f'frame body cannot step: {body}')
        body, frame_locals = inner
        return vs + (LocalFrame(e.arity, e.inst, frame_locals, body),) + rest, locals_

    # basic instructions: return (number of consumed values, replacement, locals)

    def basic(self, e, vs, locals_, inst: int):
        store = self.store

        def need(n: int):
            if len(vs) < n:
                raise _Stuck(f'{type(e).__name__} needs {n} operands, found {len(vs)}')
            return vs[len(vs) - n:]

        if isinstance(e, Binop):
            a, b = need(2)
            self.note(f'{e.num.value}.{e.op}')
            result = numerics.binop(e.num, e.op, _num(a, 'binop'), _num(b, 'binop'))
            return 2, (Const(e.num, result),), locals_
        if isinstance(e, Relop):
            a, b = need(2)
            self.note(f'{e.num.value}.{e.op}')
            return 2, (Const(NumKind.I32, numerics.relop(e.num, e.op, _num(a, 'relop'), _num(b, 'relop'))),), \
                locals_
        if isinstance(e, Testop):
            a, = need(1)
            self.note(f'{e.num.value}.eqz')
            return 1, (Const(NumKind.I32, numerics.testop(e.num, _num(a, 'testop'))),), locals_
        if isinstance(e, Unop):
            a, = need(1)
            self.note(f'{e.num.value}.{e.op}')
            return 1, (Const(e.num, numerics.unop(e.num, e.op, _num(a, 'unop'))),), locals_
        if isinstance(e, Convert):
            a, = need(1)
            self.note('cvt')
            return 1, (Const(e.dst, numerics.convert(e.src, e.dst, _num(a, 'cvt'))),), locals_
        if isinstance(e, Nop):
            self.note('nop')
            return 0, (), locals_
        if isinstance(e, Drop):
            need(1)
            self.note('drop')
            return 1, (), locals_
        if isinstance(e, Select):
            a, b, c = need(3)
            self.note('select')
            return 3, (a if _num(c, 'select') != 0 else b,), locals_
        if isinstance(e, (Block, Loop, Ite)):
            return self.enter(e, vs, need, locals_)
        if isinstance(e, BrIf):
            c, = need(1)
            self.note('br_if')
            if _num(c, 'br_if') == 0:
                return 1, (), locals_
            return len(vs), (Breaking(e.depth, vs[:-1]),), locals_
        if isinstance(e, BrTable):
            c, = need(1)
            self.note('br_table')
            j = numerics.pattern(_num(c, 'br_table'), 32)
            depth = e.targets[j] if j < len(e.targets) else e.default
            return len(vs), (Breaking(depth, vs[:-1]),), locals_

        if isinstance(e, GetLocal):
            value, sz = self.slot(locals_, e.index)
            self.note('get_local')
            if e.qual is not UNR:
                locals_ = _set_local(locals_, e.index, UnitV())
            return 0, (value,), locals_
        if isinstance(e, (SetLocal, TeeLocal)):
            v, = need(1)
            self.slot(locals_, e.index)
            self.note('set_local' if isinstance(e, SetLocal) else 'tee_local')
            if isinstance(e, SetLocal):
                return 1, (), _set_local(locals_, e.index, v)
            kept = UnitV() if _owns_linear(v) else v
            return 1, (v,), _set_local(locals_, e.index, kept)
        if isinstance(e, GetGlobal):
            self.note('get_global')
            return 0, (store.globals[store.instances[inst].globals[e.index]],), locals_
        if isinstance(e, SetGlobal):
            v, = need(1)
            self.note('set_global')
            store.globals[store.instances[inst].globals[e.index]] = v
            return 1, (), locals_

        if isinstance(e, Qualify):
            need(1)
            self.note('qualify')
            return 0, (), locals_
        if isinstance(e, CodeRefI):
            self.note('coderef')
            return 0, (CodeRefV(inst, e.index, ()),), locals_
        if isinstance(e, Inst):
            v, = need(1)
            if not isinstance(v, CodeRefV):
                raise _Stuck('inst expects a code reference')
            self.note('inst')
            return 1, (CodeRefV(v.inst, v.index, v.indices + tuple(e.indices)),), locals_
        if isinstance(e, CallIndirect):
            v, = need(1)
            if not isinstance(v, CodeRefV):
                raise _Stuck('call_indirect expects a code reference')
            target = store.instances[v.inst].table[v.index]
            self.note('call_indirect')
            return 1, (CallClosure(target.inst, target.index, v.indices),), locals_
        if isinstance(e, Call):
            target = store.instances[inst].funcs[e.index]
            self.note('call')
            return 0, (CallClosure(target.inst, target.index, tuple(e.indices)),), locals_
        if isinstance(e, CallClosure):
            return self.call_closure(e, need, locals_)
        if isinstance(e, RecFold):
            v, = need(1)
            self.note('rec.fold')
            return 1, (FoldV(e.pre, v),), locals_
        if isinstance(e, RecUnfold):
            v, = need(1)
            if not isinstance(v, FoldV):
                raise _Stuck('rec.unfold expects a folded value')
            self.note('rec.unfold')
            return 1, (v.value,), locals_
        if isinstance(e, MemPack):
            v, = need(1)
            if not isinstance(e.loc, LocConst):
                raise _Stuck('mempack of an uninstantiated location')
            self.note('mempack')
            return 1, (MemPackV(e.loc, v),), locals_
        if isinstance(e, MemUnpack):
            n = len(e.arrow.ins)
            args = need(n + 1)
            package = args[-1]
            if not isinstance(package, MemPackV):
                raise _Stuck('memunpack expects a location package')
            self.note('memunpack')
            body = substitute(e.body, Kind.LOC, package.loc)
            return n + 1, (Label(len(e.arrow.outs), (), args[:-1] + (package.value,) + body),), locals_
        if isinstance(e, Group):
            parts = need(e.count)
            self.note('group')
            return e.count, (ProdV(tuple(parts)),), locals_
        if isinstance(e, Ungroup):
            v, = need(1)
            if not isinstance(v, ProdV):
                raise _Stuck('ungroup expects a tuple')
            self.note('ungroup')
            return 1, v.values, locals_
        if isinstance(e, (CapSplit, CapJoin, RefDemote, RefSplit, RefJoin)):
            return self.restructure(e, need, locals_)

        return self.heap(e, vs, need, locals_, inst)

    def enter(self, e, vs, need, locals_):
        if isinstance(e, Ite):
            n = len(e.arrow.ins)
            operands = need(n + 1)
            args, c = operands[:-1], operands[-1]
            self.note('ite')
            body = e.then if _num(c, 'ite') != 0 else e.else_
            return n + 1, (Label(len(e.arrow.outs), (), args + body),), locals_
        n = len(e.arrow.ins)
        args = need(n) if n else ()
        if isinstance(e, Block):
            self.note('block')
            return n, (Label(len(e.arrow.outs), (), args + e.body),), locals_
        self.note('loop')
        return n, (Label(n, (e,), args + e.body),), locals_

    def slot(self, locals_, index: int):
        if not 0 <= index < len(locals_):
            raise _Stuck(f'local {index} does not exist')
        return locals_[index]

    def call_closure(self, e: CallClosure, need, locals_):
        f = self.store.instances[e.inst].module.funcs[e.index]
        if not isinstance(f, Func):
            raise _Stuck('call of an unresolved import')
        quants = f.type.quants
        ins = instantiate_binders(f.type.ins, quants, e.indices)
        outs = instantiate_binders(f.type.outs, quants, e.indices)
        declared = instantiate_binders(f.locals, quants, e.indices)
        body = instantiate_binders(f.body, quants, e.indices)
        args = need(len(ins)) if ins else ()
        frame_locals = tuple((v, size_of((), t)) for v, t in zip(args, ins)) + \
            tuple((UnitV(), sz) for sz in declared)
        self.note('call_cl')
        return len(ins), (LocalFrame(len(outs), e.inst, frame_locals, body),), locals_

    def restructure(self, e, need, locals_):
        if isinstance(e, CapSplit):
            cap, = need(1)
            self.note('cap.split')
            return 1, (CapV(cap.loc), OwnV(cap.loc)), locals_
        if isinstance(e, CapJoin):
            cap, _ = need(2)
            self.note('cap.join')
            return 2, (CapV(cap.loc),), locals_
        if isinstance(e, RefDemote):
            need(1)
            self.note('ref.demote')
            return 0, (), locals_
        if isinstance(e, RefSplit):
            ref, = need(1)
            self.note('ref.split')
            return 1, (CapV(ref.loc), PtrV(ref.loc)), locals_
        cap, _ = need(2)
        self.note('ref.join')
        return 2, (RefV(cap.loc),), locals_

    def heap(self, e, vs, need, locals_, inst: int):
        store = self.store
        typing = store.typing()

        if isinstance(e, StructMalloc):
            values = need(len(e.sizes))
            bits = 0
            for sz in e.sizes:
                slot = size_const(sz)
                if slot is None:
                    raise InterpreterFault('struct.malloc size depends on a variable')
                bits += slot
            heap = StructHT(tuple((value_type(typing, v), sz) for v, sz in zip(values, e.sizes)))
            self.note('struct.malloc')
            return len(values), (Malloc(SizeConst(bits), StructHV(tuple(values)), e.qual, heap),), locals_
        if isinstance(e, VariantMalloc):
            v, = need(1)
            self.note('variant.malloc')
            bits = 32 + _closed_bits(e.cases[e.tag])
            return 1, (Malloc(SizeConst(bits), VariantHV(e.tag, v), e.qual, VariantHT(e.cases)),), locals_
        if isinstance(e, ArrayMalloc):
            v, n = need(2)
            length = _num(n, 'array.malloc')
            if length < 0:
                raise _Trap("array.malloc")
            elem = value_type(typing, v)
            self.note('array.malloc')
            return 2, (Malloc(SizeConst(length * _closed_bits(elem)), ArrayHV((v,) * length), e.qual,
                              ArrayHT(elem)),), locals_
        if isinstance(e, ExistPack):
            v, = need(1)
            self.note('exists.pack')
            payload = substitute(e.heap.body, Kind.TYPE, e.pre)
            bits = 64 + _closed_bits(payload)
            return 1, (Malloc(SizeConst(bits), PackHV(e.pre, v, e.heap), e.qual, e.heap),), locals_
        if isinstance(e, Malloc):
            mem = _memory_of(e.qual)
            loc = store.allocate(mem, e.value, size_const(e.size), e.heap)
            self.note(f'malloc {size_const(e.size)} {mem.value}')
            return 0, (MemPackV(loc, RefV(loc)),), locals_

        if isinstance(e, (StructFree, ArrayFree, Free)):
            ref, = need(1)
            if ref.loc.mem is not Mem.LIN:
                raise InterpreterFault('free of an unrestricted location')
            store.release(ref.loc)
            self.note(f"free ({ref.loc.mem.value} {ref.loc.address})")
            return 1, (), locals_
        if isinstance(e, StructGet):
            ref, = need(1)
            hv = self.cell(ref, StructHV)
            self.note('struct.get')
            return 0, (hv.values[e.index],), locals_
        if isinstance(e, (StructSet, StructSwap)):
            ref, v = need(2)
            hv = self.cell(ref, StructHV)
            values = list(hv.values)
            old, values[e.index] = values[e.index], v
            heap = store.heap_types[ref.loc.mem][ref.loc.address]
            if ref.loc.mem is Mem.LIN:
                fields = list(heap.fields)
                fields[e.index] = (value_type(typing, v), fields[e.index][1])
                heap = StructHT(tuple(fields))
            store.write(ref.loc, StructHV(tuple(values)), heap)
            if isinstance(e, StructSet):
                self.note('struct.set')
                return 1, (), locals_
            self.note('struct.swap')
            return 1, (old,), locals_
        if isinstance(e, ArrayGet):
            ref, j = need(2)
            hv = self.cell(ref, ArrayHV)
            index = _num(j, 'array.get')
            if not 0 <= index < len(hv.values):
                raise _Trap("array.get")
            self.note('array.get')
            return 1, (hv.values[index],), locals_
        if isinstance(e, ArraySet):
            ref, j, v = need(3)
            hv = self.cell(ref, ArrayHV)
            index = _num(j, 'array.set')
            if not 0 <= index < len(hv.values):
                raise _Trap("array.set")
            values = list(hv.values)
            values[index] = v
            store.write(ref.loc, ArrayHV(tuple(values)))
            self.note('array.set')
            return 2, (), locals_
        if isinstance(e, VariantCase):
            n = len(e.arrow.ins)
            args = need(n + 1)
            ref, args = args[0], args[1:]
            hv = self.cell(ref, VariantHV)
            body = (Label(len(e.arrow.outs), (), args + (hv.value,) + e.bodies[hv.tag]),)
            if e.qual is LIN:
                self.empty(ref.loc)
                self.note('variant.case.lin')
                return n + 1, (ref, Free()) + body, locals_
            self.note('variant.case.unr')
            return n, body, locals_
        if isinstance(e, ExistUnpack):
            n = len(e.arrow.ins)
            args = need(n + 1)
            ref, args = args[0], args[1:]
            hv = self.cell(ref, PackHV)
            inner = substitute(e.body, Kind.TYPE, hv.pre)
            body = (Label(len(e.arrow.outs), (), args + (hv.value,) + inner),)
            if e.qual is LIN:
                self.empty(ref.loc)
                self.note('exists.unpack.lin')
                return n + 1, (ref, Free()) + body, locals_
            self.note('exists.unpack.unr')
            return n, body, locals_
        raise _Stuck(f'no rule for {type(e).__name__}')

    def cell(self, ref, cls):
        if not isinstance(ref, RefV):
            raise _Stuck(f'expected a reference, found {ref}')
        hv = self.store.read(ref.loc)
        if not isinstance(hv, cls):
            raise _Stuck(f'{ref.loc.mem.value} location {ref.loc.address} holds {type(hv).__name__}')
        return hv

    def empty(self, loc: LocConst) -> None:
        """Overwrites a linear location whose payload was moved out with an empty array."""
        self.store.write(loc, ArrayHV(()), ArrayHT(Type(UnitT(), UNR)))


def _owns_linear(v) -> bool:
    if isinstance(v, (RefV, CapV, OwnV)):
        return v.loc.mem is Mem.LIN
    if isinstance(v, ProdV):
        return any(_owns_linear(x) for x in v.values)
    if isinstance(v, (FoldV, MemPackV)):
        return _owns_linear(v.value)
    return False


def _set_local(locals_, index: int, v):
    slots = list(locals_)
    slots[index] = (v, slots[index][1])
    return tuple(slots)


# Driver

def _terminal(config: Configuration) -> Optional[StepOutcome]:
    instrs = config.instrs
    if all(is_value(e) for e in instrs):
        return Done(tuple(instrs))
    if len(instrs) == 1 and isinstance(instrs[0], Trap):
        return Trapped()
    return None


def step(config: Configuration, trace: Optional[List[str]] = None) -> StepOutcome:
    """Applies exactly one reduction to ``config``.

    Parameters
    ----------
    config: Configuration
        Configuration to reduce; its store is updated in place.

    trace: List[str], default = None
        When given, receives one line naming the rule applied.

    Returns
    -------
    outcome: StepOutcome
        Stepped, Done, Trapped, or Stuck.
    """
    terminal = _terminal(config)
    if terminal is not None:
        return terminal
    instrs = config.instrs
    machine = _Machine(config.store, trace)
    try:
        result = machine.reduce(instrs, config.locals, config.inst)
    except _Stuck as exc:
        return Stuck(str(exc))
    if result is None:
        return Stuck(f'no reduction applies to {instrs}')
    instrs, locals_ = result
    return Stepped(replace(config, instrs=instrs, locals=locals_), machine.rule)


def roots(config: Configuration) -> List[LocConst]:
    found = referenced_locations(config.instrs) + referenced_locations(config.locals)
    for value in config.store.globals:
        found += referenced_locations(value)
    return found


def collect(store: Store, root_locations: Sequence[LocConst], trace: Optional[List[str]] = None) -> int:
    """Removes every location not reachable from ``root_locations``.

    Linear locations are only ever unreachable when their owner was an unreachable unrestricted location, so they
    are removed with it.

    Returns
    -------
    removed: int
        Number of locations removed.
    """
    nodes = [(mem, address) for mem in (Mem.LIN, Mem.UNR) for address in sorted(store.mem[mem])]
    if not nodes:
        return 0
    number = {node: i + 1 for i, node in enumerate(nodes)}
    rows, cols = [], []
    for loc in root_locations:
        if (loc.mem, loc.address) in number:
            rows.append(0)
            cols.append(number[(loc.mem, loc.address)])
    for node, i in number.items():
        hv, _ = store.mem[node[0]][node[1]]
        for loc in referenced_locations(hv):
            if (loc.mem, loc.address) in number:
                rows.append(i)
                cols.append(number[(loc.mem, loc.address)])
    n = len(nodes) + 1
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    reached = set(breadth_first_order(graph, 0, directed=True, return_predecessors=False).tolist())
    removed = 0
    for node, i in number.items():
        if i not in reached:
            del store.mem[node[0]][node[1]]
            del store.heap_types[node[0]][node[1]]
            removed += 1
    if trace is not None and removed:
        trace.append(f'collect {removed}')
    return removed


def run(config: Configuration,
        fuel: int = DEFAULT_FUEL,
        collect_every: int = DEFAULT_COLLECT_EVERY,
        trace: bool = False) -> RunResult:
    """Reduces ``config`` until it produces values, traps, or runs out of fuel.

    Parameters
    ----------
    config: Configuration
        Starting configuration.

    fuel: int, default = 100000
        Maximum number of reductions.

    collect_every: int, default = 64
        Number of reductions between collections. A collection also runs before returning.

    trace: bool, default = False
        Record one line per reduction.

    Returns
    -------
    result: RunResult
        Status ``done``, ``trap`` or ``out_of_fuel``, with the produced values and the final store.

    Raises
    ------
    InterpreterFault
        If the configuration gets stuck.
    """
    assert fuel > 0, f'Fuel must be positive.'
    lines = [] if trace else None
    steps = 0
    status = 'out_of_fuel'
    values = ()
    while steps < fuel:
        outcome = step(config, lines)
        if isinstance(outcome, Done):
            status, values = 'done', outcome.values
            break
        if isinstance(outcome, Trapped):
            status = 'trap'
            break
        if isinstance(outcome, Stuck):
            raise InterpreterFault(f'stuck after {steps} steps: {outcome.description}')
        config = outcome.config
        steps += 1
        if collect_every and steps % collect_every == 0:
            collect(config.store, roots(config), lines)
    else:
        outcome = _terminal(config)
        if isinstance(outcome, Done):
            status, values = 'done', outcome.values
        elif isinstance(outcome, Trapped):
            status = 'trap'
    collect(config.store, roots(config), lines)
    logger.debug('run finished: %s after %d steps', status, steps)
    return RunResult(status, tuple(values), steps, config.store, lines or [])


# Instantiation

LinkMap = Dict[Tuple[str, str], Tuple[str, str]]


def instantiate(modules: Sequence[Tuple[str, RWModule]],
                link_map: Optional[LinkMap] = None,
                fuel: int = DEFAULT_FUEL) -> Store:
    """Links modules into one store.

    Imports resolve by (module name, export name); ``link_map`` may redirect an import to another export. Modules
    are instantiated in order, so an import must name a module that appears earlier. Global initializers run in
    their instance before the next module is instantiated.

    Parameters
    ----------
    modules: Sequence[Tuple[str, RWModule]]
        Named modules in instantiation order.

    link_map: LinkMap, default = None
        Overrides: import (module, name) to export (module, name).

    fuel: int, default = 100000
        Step budget of each global initializer.

    Returns
    -------
    store: Store
        Store with one instance per module.

    Raises
    ------
    LinkError
        LNK001 for unresolved imports and LNK002 for type mismatches.
    """
    link_map = dict(link_map or {})
    for (module, name), target in link_map.items():
        logger.warning('import %s.%s resolved to %s.%s by the link map', module, name, *target)
    check_link(modules, link_map)
    store = Store()
    exports = {}

    def resolve(owner: str, module: str, name: str, kind):
        target = exports.get(link_map.get((module, name), (module, name)))
        if not isinstance(target, kind):
            raise LinkError([error('LNK001', f'{owner}: import {module}.{name} must be provided by an '
                                             f'earlier module')])
        return target

    for inst_index, (name, m) in enumerate(modules):
        funcs = [resolve(name, f.module, f.name, Closure) if isinstance(f, FuncImport) else Closure(inst_index, j, f)
                 for j, f in enumerate(m.funcs)]
        instance = Instance(name, m, module_env(m), tuple(funcs))
        instance.table = tuple(funcs[i] for i in m.table.entries)
        store.instances.append(instance)
        cells = []
        for g in m.globals:
            if isinstance(g, GlobalImport):
                cells.append(resolve(name, g.module, g.name, int))
            else:
                result = run(Configuration(store, (), inst_index, g.init), fuel, collect_every=0)
                if result.status != 'done' or len(result.values) != 1:
                    raise InterpreterFault(f'{name}: global initializer did not produce a value')
                store.globals.append(result.values[0])
                cells.append(len(store.globals) - 1)
            instance.globals = tuple(cells)
        for f, closure in zip(m.funcs, funcs):
            for export in f.exports:
                exports[(name, export)] = closure
        for g, cell in zip(m.globals, cells):
            for export in g.exports:
                exports[(name, export)] = cell
        logger.info('instantiated %s as instance %d', name, inst_index)
    return store


def instantiate_module(m: RWModule, name: str = 'main') -> Store:
    return instantiate([(name, m)])


def find_export(store: Store, name: str, inst: Optional[int] = None) -> Closure:
    candidates = range(len(store.instances)) if inst is None else [inst]
    for i in reversed(list(candidates)):
        instance = store.instances[i]
        for f, closure in zip(instance.module.funcs, instance.funcs):
            if name in f.exports:
                return closure
    raise LinkError([error('LNK001', f'no exported function named {name}')])


def invoke(store: Store,
           name: str,
           args: Sequence = (),
           indices: Sequence = (),
           fuel: int = DEFAULT_FUEL,
           collect_every: int = DEFAULT_COLLECT_EVERY,
           trace: bool = False) -> RunResult:
    """Runs an exported function on argument values."""
    closure = find_export(store, name)
    config = Configuration(store, (), closure.inst, tuple(args) + (CallClosure(closure.inst, closure.index,
                                                                                 tuple(indices)),))
    return run(config, fuel, collect_every, trace)
