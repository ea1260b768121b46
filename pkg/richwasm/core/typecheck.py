"""Algorithmic type checking of RichWasm modules and runtime configurations.

The checker walks each instruction sequence forward over an abstract stack of types, threading the local
environment through every instruction. Blocks record, in the function environment's linear stack, whether the
values they leave below an inner block are droppable, so that branches can verify they discard nothing linear.

Configurations produced by the interpreter are checked in runtime mode: value types are synthesized from the
values themselves, and a synthesized type is accepted wherever a type it can be weakened to is expected.
"""
import logging
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from richwasm.core.constraints import (qual_leq, size_leq, size_of, no_caps, check_type_valid, check_heap_type,
                                       check_fun_type, check_scope)
from richwasm.core.env import FunctionEnv, LocalEnv, ModuleEnv, StoreTyping, LinearLedger, TypeBound
from richwasm.core.ir import (Kind, UNR, LIN, Qual, QualConst, Mem, Priv, NumKind, Type, UnitT, NumT,
                              ProdT, RefT, PtrT, CapT, OwnT, RecT, ExLocT, CodeRefT, VariantHT, StructHT,
                              ArrayHT, ExHT, LocQ, SizeQ, QualQ, TypeQ, FunType, PreTypeI,
                              LocVar, LocConst, Const, UnitV, ProdV, RefV, PtrV, CapV, OwnV, FoldV, MemPackV,
                              CodeRefV, VariantHV, StructHV, ArrayHV, PackHV, Binop, Relop, Testop, Unop, Convert,
                              Unreachable, Nop, Drop, Select, Block, Loop, Ite, Br, BrIf, BrTable, Return, GetLocal,
                              SetLocal, TeeLocal, GetGlobal, SetGlobal, Qualify, CodeRefI, Inst, CallIndirect, Call,
                              RecFold, RecUnfold, MemPack, MemUnpack, Group, Ungroup, CapSplit, CapJoin, RefDemote,
                              RefSplit, RefJoin, StructMalloc, StructFree, StructGet, StructSet, StructSwap,
                              VariantMalloc, VariantCase, ArrayMalloc, ArrayGet, ArraySet, ArrayFree, ExistPack,
                              ExistUnpack, Trap, CallClosure, Label, LocalFrame, Malloc, Free, Breaking, Returning,
                              Func, FuncImport, Global, GlobalImport, RWModule, is_value)
from richwasm.core.subst import shift, substitute, instantiate_funtype, abstract_loc, index_payload
from richwasm.core.syntax import show_type, show_instr, show_qual, show_size
from richwasm.util.utils import CheckError, LinkError, IllScopedError, Diagnostic, error, referenced_locations

logger = logging.getLogger(__name__)

I32_UNR = Type(NumT(NumKind.I32), UNR)
UNIT_UNR = Type(UnitT(), UNR)

# Called before every instruction with (function index, path, stack, function env, locals).
Recorder = Callable[[int, Tuple[int, ...], Tuple[Type, ...], FunctionEnv, LocalEnv], None]


class _Pending:
    """Result types of a runtime label or frame, learnt from the first branch or exit that reaches it."""

    def __init__(self, arity: int):
        self.arity = arity
        self.types: Optional[Tuple[Type, ...]] = None
        self.locals: Optional[LocalEnv] = None


def _fail(code: str, message: str):
    raise CheckError([error(code, message)])


def effect_apply(F: FunctionEnv, L: LocalEnv, effect) -> LocalEnv:
    """Local environment after a block with the given local effect."""
    slots = list(L)
    for index, t in effect:
        if not 0 <= index < len(slots):
            _fail('TYP005', f'local effect names local {index}, but there are {len(slots)} locals')
        check_type_valid(F, t)
        if not size_leq(F.sizes, size_of(F.types, t), slots[index][1]):
            _fail('TYP003', f'local effect type {show_type(t)} does not fit local {index}')
        slots[index] = (t, slots[index][1])
    return tuple(slots)


class _Checker:
    def __init__(self,
                 M: ModuleEnv,
                 S: Optional[StoreTyping] = None,
                 ledger: Optional[LinearLedger] = None,
                 recorder: Optional[Recorder] = None,
                 spans: Optional[Dict] = None,
                 func_index: int = 0):
        self.M = M
        self.S = S
        self.ledger = ledger
        self.runtime = S is not None
        self.recorder = recorder
        self.spans = spans or {}
        self.func_index = func_index

    # comparisons

    def same(self, F: FunctionEnv, actual: Type, expected: Type) -> bool:
        if actual == expected:
            return True
        return self.runtime and matches(F, actual, expected)

    def same_all(self, F: FunctionEnv, actual: Sequence[Type], expected: Sequence[Type]) -> bool:
        return len(actual) == len(expected) and all(self.same(F, a, e) for a, e in zip(actual, expected))

    def same_locals(self, F: FunctionEnv, actual: LocalEnv, expected: LocalEnv) -> bool:
        return len(actual) == len(expected) and all(
            self.same(F, a[0], e[0]) and a[1] == e[1] for a, e in zip(actual, expected))

    @staticmethod
    def droppable(F: FunctionEnv, t: Type) -> bool:
        return isinstance(t.pre, UnitT) or qual_leq(F.quals, t.qual, UNR)

    def join(self, F: FunctionEnv, types: Sequence[Type]) -> QualConst:
        return UNR if all(self.droppable(F, t) for t in types) else LIN

    # stack helpers

    @staticmethod
    def pop(stack: List[Type], what: str) -> Type:
        if not stack:
            _fail('TYP001', f'{what} expects an operand but the stack is empty')
        return stack.pop()

    def pop_many(self, stack: List[Type], n: int, what: str) -> List[Type]:
        if len(stack) < n:
            _fail('TYP001', f'{what} expects {n} operands but the stack has {len(stack)}')
        taken = stack[len(stack) - n:]
        del stack[len(stack) - n:]
        return taken

    def pop_expect(self, F: FunctionEnv, stack: List[Type], expected: Sequence[Type], what: str) -> List[Type]:
        taken = self.pop_many(stack, len(expected), what)
        for actual, want in zip(taken, expected):
            if not self.same(F, actual, want):
                _fail('TYP001', f'{what} expects {show_type(want)} but found {show_type(actual)}')
        return taken

    def pop_num(self, stack: List[Type], num: NumKind, what: str) -> Type:
        t = self.pop(stack, what)
        if not (isinstance(t.pre, NumT) and t.pre.num is num):
            _fail('TYP001', f'{what} expects {num.value} but found {show_type(t)}')
        return t

    def pop_ref(self, stack: List[Type], what: str, heap_cls=None, cls=RefT) -> Type:
        t = self.pop(stack, what)
        if not isinstance(t.pre, cls) or (heap_cls is not None and not isinstance(t.pre.heap, heap_cls)):
            kind = '' if heap_cls is None else heap_cls.__name__[:-2].lower() + ' '
            _fail('TYP001', f'{what} expects a {kind}{cls.__name__[:-1].lower()} but found {show_type(t)}')
        return t

    # sequences

    def check_seq(self, F: FunctionEnv, instrs, stack: List[Type], L: LocalEnv, path: Tuple[int, ...]):
        """Checks a sequence; returns (stack, locals, diverged)."""
        for i, e in enumerate(instrs):
            here = path + (i,)
            if self.recorder is not None:
                self.recorder(self.func_index, here, tuple(stack), F, L)
            try:
                stack, L, diverged = self.check_instr(F, e, stack, L, here)
            except CheckError as exc:
                raise self.located(exc, here)
            except IllScopedError as exc:
                raise self.located(CheckError([error('TYP006', str(exc))]), here)
            if diverged:
                return stack, L, True
        return stack, L, False

    def located(self, exc: CheckError, path) -> CheckError:
        first = exc.diagnostics[0]
        if first.span is not None:
            return exc
        span = self.spans.get((self.func_index, path))
        where = f'function {self.func_index}' if self.func_index >= 0 else f'global {-1 - self.func_index}'
        message = first.message if span is not None else f'{first.message} (in {where}, instruction {path})'
        return CheckError([Diagnostic(first.severity, first.code, message, span)] + exc.diagnostics[1:])

    def check_body(self, F: FunctionEnv, body, ins: Sequence[Type], outs: Sequence[Type], L: LocalEnv,
                   L_out: LocalEnv, path, what: str) -> None:
        stack, L_end, diverged = self.check_seq(F, body, list(ins), L, path)
        if diverged:
            return
        if not self.same_all(F, stack, outs):
            _fail('TYP001', f'{what} body produces ({", ".join(show_type(t) for t in stack)}) but its type '
                            f'promises ({", ".join(show_type(t) for t in outs)})')
        if not self.same_locals(F, L_end, L_out):
            self.explain_locals(F, L_end, L_out, what)

    def explain_locals(self, F, actual: LocalEnv, expected: LocalEnv, what: str):
        for i, (a, e) in enumerate(zip(actual, expected)):
            if not self.same(F, a[0], e[0]):
                if isinstance(e[0].pre, UnitT) and not isinstance(a[0].pre, UnitT) and not self.droppable(F, a[0]):
                    _fail('LIN003', f'{what} leaves linear {show_type(a[0])} in local {i}')
                _fail('TYP004', f'{what} ends with local {i} of type {show_type(a[0])}, '
                                f'but its local effect expects {show_type(e[0])}')
        _fail('TYP004', f'{what} changes the number of locals')

    def frozen(self, F: FunctionEnv, below: Sequence[Type]) -> QualConst:
        return self.join(F, below)

    # branches

    def check_branch(self, F: FunctionEnv, depth: int, stack: List[Type], L: LocalEnv, consume: bool):
        if not 0 <= depth < len(F.labels):
            _fail('TYP005', f'branch to label {depth}, but only {len(F.labels)} labels are in scope')
        types, L_label = F.labels[depth]
        if isinstance(types, _Pending):
            pending = types
            if len(stack) < pending.arity:
                _fail('TYP001', f'branch needs {pending.arity} values')
            passed = stack[len(stack) - pending.arity:]
            if pending.types is None:
                pending.types, pending.locals = tuple(passed), L
            elif not self.same_all(F, passed, pending.types):
                _fail('TYP004', 'branch values disagree with an earlier branch to the same label')
            types, L_label = pending.types, pending.locals
        if len(stack) < len(types):
            _fail('TYP004', f'branch to label {depth} needs {len(types)} values, the stack has {len(stack)}')
        rest = stack[:len(stack) - len(types)]
        passed = stack[len(stack) - len(types):]
        if not self.same_all(F, passed, types):
            _fail('TYP004', f'branch to label {depth} passes ({", ".join(show_type(t) for t in passed)}) '
                            f'but the label expects ({", ".join(show_type(t) for t in types)})')
        if not all(self.droppable(F, t) for t in rest):
            _fail('LIN002', f'branch to label {depth} discards a linear value')
        for k in range(1, depth + 1):
            if not qual_leq(F.quals, F.linear[k], UNR):
                _fail('LIN002', f'branch to label {depth} discards linear values of an enclosing block')
        if not self.same_locals(F, L, L_label):
            self.explain_locals(F, L, L_label, f'branch to label {depth}')

    def check_return(self, F: FunctionEnv, stack: List[Type], L: LocalEnv):
        if F.ret is None:
            _fail('TYP004', 'return outside of a function')
        ret = F.ret
        if isinstance(ret, _Pending):
            if ret.types is None:
                if len(stack) < ret.arity:
                    _fail('TYP001', f'return needs {ret.arity} values')
                ret.types = tuple(stack[len(stack) - ret.arity:])
            ret = ret.types
        if len(stack) < len(ret):
            _fail('TYP001', f'return needs {len(ret)} values, the stack has {len(stack)}')
        passed = stack[len(stack) - len(ret):]
        if not self.same_all(F, passed, ret):
            _fail('TYP001', f'return passes ({", ".join(show_type(t) for t in passed)}) but the function '
                            f'returns ({", ".join(show_type(t) for t in ret)})')
        if not all(self.droppable(F, t) for t in stack[:len(stack) - len(ret)]):
            _fail('LIN002', 'return discards a linear value')
        if not all(qual_leq(F.quals, q, UNR) for q in F.linear[1:]):
            _fail('LIN002', 'return discards linear values of an enclosing block')
        for i, (t, _) in enumerate(L):
            if not self.droppable(F, t):
                _fail('LIN003', f'return leaves linear {show_type(t)} in local {i}')

    # instantiation

    def check_index(self, F: FunctionEnv, quant, z) -> None:
        payload = index_payload(z)
        check_scope(F, payload)
        if quant.kind is not z.kind:
            _fail('TYP007', f'{z.kind.value} index supplied for a {quant.kind.value} quantifier')
        if isinstance(quant, SizeQ):
            if not all(size_leq(F.sizes, lower, payload) for lower in quant.lower) or \
                    not all(size_leq(F.sizes, payload, upper) for upper in quant.upper):
                _fail('TYP007', 'size index violates the quantifier bounds')
        elif isinstance(quant, QualQ):
            if not all(qual_leq(F.quals, lower, payload) for lower in quant.lower) or \
                    not all(qual_leq(F.quals, payload, upper) for upper in quant.upper):
                _fail('TYP007', 'qualifier index violates the quantifier bounds')
        elif isinstance(quant, TypeQ):
            if not size_leq(F.sizes, size_of(F.types, payload), quant.size):
                _fail('TYP007', f'type index {show_type(payload)} is larger than the quantifier allows')
            if not quant.caps and not no_caps(F.types, payload):
                _fail('TYP007', f'type index {show_type(payload)} may carry a capability')
            try:
                check_type_valid(F, Type(payload, quant.qual))
            except CheckError:
                _fail('TYP007', f'type index {show_type(payload)} is not valid at the quantifier qualifier')

    def instantiate(self, F: FunctionEnv, ft: FunType, indices) -> FunType:
        if len(indices) > len(ft.quants):
            _fail('TYP007', f'{len(indices)} indices supplied for {len(ft.quants)} quantifiers')
        for z in indices:
            self.check_index(F, ft.quants[0], z)
            ft = instantiate_funtype(ft, [z])
        return ft

    # instructions

    def check_instr(self, F: FunctionEnv, e, stack: List[Type], L: LocalEnv, path):
        stack = list(stack)
        name = type(e).__name__

        if is_value(e):
            if not self.runtime:
                if isinstance(e, Const):
                    stack.append(Type(NumT(e.num), UNR))
                elif isinstance(e, UnitV):
                    stack.append(UNIT_UNR)
                else:
                    _fail('TYP006', f'{show_instr(e)} may only appear in a running program')
            else:
                stack.append(check_value(self.S, F, self.ledger, e))
            return stack, L, False

        # numeric
        if isinstance(e, Binop):
            self.pop_num(stack, e.num, f'{e.num.value}.{e.op}')
            self.pop_num(stack, e.num, f'{e.num.value}.{e.op}')
            stack.append(Type(NumT(e.num), UNR))
            return stack, L, False
        if isinstance(e, Relop):
            self.pop_num(stack, e.num, f'{e.num.value}.{e.op}')
            self.pop_num(stack, e.num, f'{e.num.value}.{e.op}')
            stack.append(I32_UNR)
            return stack, L, False
        if isinstance(e, Testop):
            self.pop_num(stack, e.num, f'{e.num.value}.eqz')
            stack.append(I32_UNR)
            return stack, L, False
        if isinstance(e, Unop):
            self.pop_num(stack, e.num, f'{e.num.value}.{e.op}')
            stack.append(Type(NumT(e.num), UNR))
            return stack, L, False
        if isinstance(e, Convert):
            self.pop_num(stack, e.src, 'cvt')
            stack.append(Type(NumT(e.dst), UNR))
            return stack, L, False

        # control
        if isinstance(e, (Unreachable, Trap)):
            return stack, L, True
        if isinstance(e, Nop):
            return stack, L, False
        if isinstance(e, Drop):
            t = self.pop(stack, 'drop')
            if not self.droppable(F, t):
                _fail('LIN002', f'drop discards linear {show_type(t)}')
            return stack, L, False
        if isinstance(e, Select):
            self.pop_num(stack, NumKind.I32, 'select')
            second = self.pop(stack, 'select')
            first = self.pop(stack, 'select')
            if not self.same(F, second, first):
                _fail('TYP001', f'select operands differ: {show_type(first)} and {show_type(second)}')
            if not self.droppable(F, first):
                _fail('LIN002', 'select discards a linear value')
            stack.append(first)
            return stack, L, False
        if isinstance(e, Block):
            return self.check_block(F, e.arrow, e.effect, [e.body], stack, L, path, 'block')
        if isinstance(e, Ite):
            self.pop_num(stack, NumKind.I32, 'ite')
            return self.check_block(F, e.arrow, e.effect, [e.then, e.else_], stack, L, path, 'ite')
        if isinstance(e, Loop):
            self.pop_expect(F, stack, e.arrow.ins, 'loop')
            inner = F.enter_block(e.arrow.ins, L, self.frozen(F, stack))
            self.check_body(inner, e.body, e.arrow.ins, e.arrow.outs, L, L, path + (0,), 'loop')
            stack.extend(e.arrow.outs)
            return stack, L, False
        if isinstance(e, Br):
            self.check_branch(F, e.depth, stack, L, True)
            return stack, L, True
        if isinstance(e, BrIf):
            self.pop_num(stack, NumKind.I32, 'br_if')
            self.check_branch(F, e.depth, stack, L, False)
            return stack, L, False
        if isinstance(e, BrTable):
            self.pop_num(stack, NumKind.I32, 'br_table')
            for depth in e.targets + (e.default,):
                self.check_branch(F, depth, stack, L, True)
            return stack, L, True
        if isinstance(e, Return):
            self.check_return(F, stack, L)
            return stack, L, True

        # locals and globals
        if isinstance(e, GetLocal):
            t, sz = self.local(L, e.index)
            if isinstance(t.pre, UnitT) and not qual_leq(F.quals, t.qual, UNR):
                _fail('LIN001', f'local {e.index} is read again after its linear value was moved out')
            if t.qual != e.qual and not (self.runtime and qual_leq(F.quals, t.qual, e.qual)):
                _fail('TYP002', f'get_local {e.index} annotated {show_qual(e.qual)} but the local holds '
                                f'{show_type(t)}')
            stack.append(t)
            if not qual_leq(F.quals, e.qual, UNR):
                L = self.set_slot(L, e.index, Type(UnitT(), e.qual))
            return stack, L, False
        if isinstance(e, (SetLocal, TeeLocal)):
            t = self.pop(stack, 'set_local')
            old, sz = self.local(L, e.index)
            if not self.droppable(F, old):
                _fail('LIN002', f'set_local {e.index} overwrites linear {show_type(old)}')
            if not size_leq(F.sizes, size_of(F.types, t), sz):
                _fail('TYP003', f'{show_type(t)} does not fit local {e.index}')
            L = self.set_slot(L, e.index, t)
            if isinstance(e, TeeLocal):
                stack.append(t)
                if not self.droppable(F, t):
                    L = self.set_slot(L, e.index, Type(UnitT(), t.qual))
            return stack, L, False
        if isinstance(e, GetGlobal):
            _, pre = self.global_(e.index)
            stack.append(Type(pre, UNR))
            return stack, L, False
        if isinstance(e, SetGlobal):
            mutable, pre = self.global_(e.index)
            if not mutable:
                _fail('TYP006', f'global {e.index} is immutable')
            t = self.pop(stack, 'set_global')
            if not self.same(F, Type(t.pre, UNR), Type(pre, UNR)) or not self.droppable(F, t):
                _fail('TYP001', f'set_global {e.index} expects unrestricted {show_type(pre)}')
            return stack, L, False

        # type-level and calls
        if isinstance(e, Qualify):
            check_scope(F, e.qual)
            t = self.pop(stack, 'qualify')
            if not qual_leq(F.quals, t.qual, e.qual):
                _fail('TYP002', f'qualify cannot weaken {show_type(t)} to {show_qual(e.qual)}')
            stack.append(Type(t.pre, e.qual))
            return stack, L, False
        if isinstance(e, CodeRefI):
            if not 0 <= e.index < len(self.M.table):
                _fail('TYP005', f'table has no entry {e.index}')
            stack.append(Type(CodeRefT(self.M.table[e.index]), UNR))
            return stack, L, False
        if isinstance(e, Inst):
            t = self.pop_ref(stack, 'inst', cls=CodeRefT)
            stack.append(Type(CodeRefT(self.instantiate(F, t.pre.fun, e.indices)), t.qual))
            return stack, L, False
        if isinstance(e, CallIndirect):
            t = self.pop_ref(stack, 'call_indirect', cls=CodeRefT)
            ft = t.pre.fun
            if ft.quants:
                _fail('TYP007', 'call_indirect needs a fully instantiated code reference')
            self.pop_expect(F, stack, ft.ins, 'call_indirect')
            stack.extend(ft.outs)
            return stack, L, False
        if isinstance(e, Call):
            if not 0 <= e.index < len(self.M.funcs):
                _fail('TYP005', f'module has no function {e.index}')
            ft = self.M.funcs[e.index]
            if len(e.indices) != len(ft.quants):
                _fail('TYP007', f'call {e.index} needs {len(ft.quants)} indices, got {len(e.indices)}')
            ft = self.instantiate(F, ft, e.indices)
            self.pop_expect(F, stack, ft.ins, f'call {e.index}')
            stack.extend(ft.outs)
            return stack, L, False
        if isinstance(e, CallClosure):
            ft = self.S.instances[e.inst].funcs[e.index]
            ft = instantiate_funtype(ft, e.indices)
            self.pop_expect(F, stack, ft.ins, 'call_cl')
            stack.extend(ft.outs)
            return stack, L, False
        if isinstance(e, RecFold):
            check_scope(F, e.pre)
            if not isinstance(e.pre, RecT):
                _fail('TYP006', 'rec.fold needs a recursive pretype')
            t = self.pop(stack, 'rec.fold')
            unfolded = substitute(e.pre.body, Kind.TYPE, e.pre)
            if not self.same(F, t, unfolded):
                _fail('TYP001', f'rec.fold expects {show_type(unfolded)} but found {show_type(t)}')
            stack.append(Type(e.pre, t.qual))
            return stack, L, False
        if isinstance(e, RecUnfold):
            t = self.pop_ref(stack, 'rec.unfold', cls=RecT)
            stack.append(substitute(t.pre.body, Kind.TYPE, t.pre))
            return stack, L, False
        if isinstance(e, MemPack):
            check_scope(F, e.loc)
            t = self.pop(stack, 'mempack')
            stack.append(Type(ExLocT(abstract_loc(t, e.loc)), t.qual))
            return stack, L, False
        if isinstance(e, MemUnpack):
            package = self.pop_ref(stack, 'memunpack', cls=ExLocT)
            self.pop_expect(F, stack, e.arrow.ins, 'memunpack')
            L_out = effect_apply(F, L, e.effect)
            inner = F.enter_block(e.arrow.outs, L_out, self.frozen(F, stack)).push(LocQ())
            ins = tuple(shift(e.arrow.ins, Kind.LOC)) + (package.pre.body,)
            self.check_body(inner, e.body, ins, shift(e.arrow.outs, Kind.LOC), shift(L, Kind.LOC),
                            shift(L_out, Kind.LOC), path + (0,), 'memunpack')
            stack.extend(e.arrow.outs)
            return stack, L_out, False
        if isinstance(e, Group):
            check_scope(F, e.qual)
            parts = self.pop_many(stack, e.count, 'group')
            for t in parts:
                if not qual_leq(F.quals, t.qual, e.qual):
                    _fail('TYP002', f'group {show_qual(e.qual)} cannot hold {show_type(t)}')
            stack.append(Type(ProdT(tuple(parts)), e.qual))
            return stack, L, False
        if isinstance(e, Ungroup):
            t = self.pop_ref(stack, 'ungroup', cls=ProdT)
            stack.extend(t.pre.types)
            return stack, L, False

        # capabilities and references
        if isinstance(e, CapSplit):
            t = self.pop_ref(stack, 'cap.split', cls=CapT)
            if t.pre.priv is not Priv.RW:
                _fail('CAP002', 'cap.split needs a read-write capability')
            stack += [Type(CapT(Priv.R, t.pre.loc, t.pre.heap), t.qual), Type(OwnT(t.pre.loc), t.qual)]
            return stack, L, False
        if isinstance(e, CapJoin):
            own = self.pop_ref(stack, 'cap.join', cls=OwnT)
            cap = self.pop_ref(stack, 'cap.join', cls=CapT)
            if cap.pre.priv is not Priv.R or own.pre.loc != cap.pre.loc:
                _fail('TYP001', 'cap.join needs a read-only capability and ownership of the same location')
            stack.append(Type(CapT(Priv.RW, cap.pre.loc, cap.pre.heap), cap.qual))
            return stack, L, False
        if isinstance(e, RefDemote):
            t = self.pop_ref(stack, 'ref.demote')
            stack.append(Type(RefT(Priv.R, t.pre.loc, t.pre.heap), t.qual))
            return stack, L, False
        if isinstance(e, RefSplit):
            t = self.pop_ref(stack, 'ref.split')
            stack += [Type(CapT(t.pre.priv, t.pre.loc, t.pre.heap), t.qual), Type(PtrT(t.pre.loc), UNR)]
            return stack, L, False
        if isinstance(e, RefJoin):
            ptr = self.pop_ref(stack, 'ref.join', cls=PtrT)
            cap = self.pop_ref(stack, 'ref.join', cls=CapT)
            if ptr.pre.loc != cap.pre.loc:
                _fail('TYP001', 'ref.join needs a capability and a pointer to the same location')
            stack.append(Type(RefT(cap.pre.priv, cap.pre.loc, cap.pre.heap), cap.qual))
            return stack, L, False

        # heap
        if isinstance(e, StructMalloc):
            check_scope(F, (e.sizes, e.qual))
            fields = self.pop_many(stack, len(e.sizes), 'struct.malloc')
            for t, sz in zip(fields, e.sizes):
                self.storable(F, t, sz, 'struct.malloc')
            heap = StructHT(tuple(zip(shift(tuple(fields), Kind.LOC), e.sizes)))
            stack.append(self.allocated(heap, e.qual))
            return stack, L, False
        if isinstance(e, StructFree):
            t = self.pop_ref(stack, 'struct.free', StructHT)
            self.freeable(F, t, [f for f, _ in t.pre.heap.fields], 'struct.free')
            return stack, L, False
        if isinstance(e, StructGet):
            t = self.pop_ref(stack, 'struct.get', StructHT)
            field, _ = self.field(t, e.index)
            if not self.droppable(F, field):
                _fail('TYP002', f'struct.get {e.index} would copy linear {show_type(field)}; use struct.swap')
            stack += [t, field]
            return stack, L, False
        if isinstance(e, (StructSet, StructSwap)):
            what = 'struct.set' if isinstance(e, StructSet) else 'struct.swap'
            new = self.pop(stack, what)
            t = self.pop_ref(stack, what, StructHT)
            old, sz = self.field(t, e.index)
            if t.pre.priv is not Priv.RW:
                _fail('CAP002', f'{what} {e.index} writes through a read-only reference')
            if isinstance(e, StructSet) and not self.droppable(F, old):
                _fail('LIN002', f'struct.set {e.index} overwrites linear {show_type(old)}')
            self.storable(F, new, sz, what)
            if qual_leq(F.quals, LIN, t.qual):
                fields = list(t.pre.heap.fields)
                fields[e.index] = (new, sz)
                t = Type(RefT(t.pre.priv, t.pre.loc, StructHT(tuple(fields))), t.qual)
            elif not self.same(F, new, old):
                _fail('TYP001', f'{what} {e.index} on an unrestricted struct must keep the field type '
                                f'{show_type(old)}, got {show_type(new)}')
            stack.append(t)
            if isinstance(e, StructSwap):
                stack.append(old)
            return stack, L, False
        if isinstance(e, VariantMalloc):
            check_scope(F, (e.cases, e.qual))
            if not 0 <= e.tag < len(e.cases):
                _fail('TYP005', f'variant.malloc tag {e.tag} out of range')
            for case in e.cases:
                check_type_valid(F, case)
                if not no_caps(F.types, case):
                    _fail('CAP001', f'variant case {show_type(case)} may carry a capability')
            self.pop_expect(F, stack, [e.cases[e.tag]], 'variant.malloc')
            stack.append(self.allocated(VariantHT(shift(e.cases, Kind.LOC)), e.qual))
            return stack, L, False
        if isinstance(e, VariantCase):
            return self.check_case(F, e, stack, L, path)
        if isinstance(e, ArrayMalloc):
            check_scope(F, e.qual)
            self.pop_num(stack, NumKind.I32, 'array.malloc')
            t = self.pop(stack, 'array.malloc')
            if not self.droppable(F, t):
                _fail('TYP002', f'array.malloc would copy linear {show_type(t)}')
            if not no_caps(F.types, t):
                _fail('CAP001', f'{show_type(t)} may carry a capability')
            stack.append(self.allocated(ArrayHT(shift(t, Kind.LOC)), e.qual))
            return stack, L, False
        if isinstance(e, ArrayGet):
            self.pop_num(stack, NumKind.I32, 'array.get')
            t = self.pop_ref(stack, 'array.get', ArrayHT)
            if not self.droppable(F, t.pre.heap.elem):
                _fail('TYP002', 'array.get would copy a linear element')
            stack += [t, t.pre.heap.elem]
            return stack, L, False
        if isinstance(e, ArraySet):
            new = self.pop(stack, 'array.set')
            self.pop_num(stack, NumKind.I32, 'array.set')
            t = self.pop_ref(stack, 'array.set', ArrayHT)
            if t.pre.priv is not Priv.RW:
                _fail('CAP002', 'array.set writes through a read-only reference')
            if not self.same(F, new, t.pre.heap.elem):
                _fail('TYP001', f'array.set expects {show_type(t.pre.heap.elem)} but found {show_type(new)}')
            if not self.droppable(F, t.pre.heap.elem):
                _fail('LIN002', 'array.set overwrites a linear element')
            stack.append(t)
            return stack, L, False
        if isinstance(e, ArrayFree):
            t = self.pop_ref(stack, 'array.free', ArrayHT)
            self.freeable(F, t, [t.pre.heap.elem], 'array.free')
            return stack, L, False
        if isinstance(e, ExistPack):
            check_scope(F, (e.pre, e.heap, e.qual))
            if not isinstance(e.heap, ExHT):
                _fail('TYP006', 'exists.pack needs an existential heap type')
            check_heap_type(F, e.heap)
            self.check_index(F, TypeQ(e.heap.qual, e.heap.size), PreTypeI(e.pre))
            body = substitute(e.heap.body, Kind.TYPE, e.pre)
            self.pop_expect(F, stack, [body], 'exists.pack')
            if not no_caps(F.types, body):
                _fail('CAP001', 'exists.pack payload may carry a capability')
            stack.append(self.allocated(shift(e.heap, Kind.LOC), e.qual))
            return stack, L, False
        if isinstance(e, ExistUnpack):
            return self.check_unpack(F, e, stack, L, path)

        # administrative
        if isinstance(e, Malloc):
            heap = e.heap
            if heap is None:
                _fail('TYP006', 'malloc without a heap type annotation')
            self.check_heap_value(F, e.value, heap)
            stack.append(self.allocated(shift(heap, Kind.LOC), e.qual))
            return stack, L, False
        if isinstance(e, Free):
            t = self.pop_ref(stack, 'free')
            heap = t.pre.heap
            contents = [f for f, _ in heap.fields] if isinstance(heap, StructHT) else \
                [heap.elem] if isinstance(heap, ArrayHT) else []
            self.freeable(F, t, contents, 'free')
            return stack, L, False
        if isinstance(e, Label):
            return self.check_label(F, e, stack, L, path)
        if isinstance(e, LocalFrame):
            return self.check_frame(F, e, stack, L, path)
        if isinstance(e, Breaking):
            stack += [check_value(self.S, F, self.ledger, v) for v in e.values]
            self.check_branch(F, e.depth, stack, L, True)
            return stack, L, True
        if isinstance(e, Returning):
            stack += [check_value(self.S, F, self.ledger, v) for v in e.values]
            self.check_return(F, stack, L)
            return stack, L, True
        raise CheckError([error('TYP006', f'unsupported instruction {name}')])

    # rule helpers

    @staticmethod
    def local(L: LocalEnv, index: int):
        if not 0 <= index < len(L):
            _fail('TYP005', f'local {index} does not exist ({len(L)} locals)')
        return L[index]

    @staticmethod
    def set_slot(L: LocalEnv, index: int, t: Type) -> LocalEnv:
        slots = list(L)
        slots[index] = (t, slots[index][1])
        return tuple(slots)

    def global_(self, index: int):
        if not 0 <= index < len(self.M.globals):
            _fail('TYP005', f'module has no global {index}')
        return self.M.globals[index]

    @staticmethod
    def field(t: Type, index: int):
        fields = t.pre.heap.fields
        if not 0 <= index < len(fields):
            _fail('TYP005', f'struct has no field {index}')
        return fields[index]

    def storable(self, F: FunctionEnv, t: Type, sz, what: str) -> None:
        if not size_leq(F.sizes, size_of(F.types, t), sz):
            _fail('TYP003', f'{what}: {show_type(t)} does not fit in {show_size(sz)} bits')
        if not no_caps(F.types, t):
            _fail('CAP001', f'{what}: {show_type(t)} may carry a capability')

    def freeable(self, F: FunctionEnv, t: Type, contents, what: str) -> None:
        if not qual_leq(F.quals, LIN, t.qual):
            _fail('LIN004', f'{what} needs a linear reference, found {show_type(t)}')
        if t.pre.priv is not Priv.RW:
            _fail('CAP002', f'{what} needs a read-write reference')
        for c in contents:
            if not self.droppable(F, c):
                _fail('LIN002', f'{what} would discard linear {show_type(c)}')

    @staticmethod
    def allocated(heap, q: Qual) -> Type:
        return Type(ExLocT(Type(RefT(Priv.RW, LocVar(0), heap), q)), q)

    def check_block(self, F, arrow, effect, bodies, stack, L, path, what):
        self.pop_expect(F, stack, arrow.ins, what)
        L_out = effect_apply(F, L, effect)
        inner = F.enter_block(arrow.outs, L_out, self.frozen(F, stack))
        for k, body in enumerate(bodies):
            self.check_body(inner, body, arrow.ins, arrow.outs, L, L_out, path + (k,), what)
        stack.extend(arrow.outs)
        return stack, L_out, False

    def linear_mode(self, F: FunctionEnv, q: Qual, what: str) -> bool:
        """The rule a case or unpack takes must not change when its qualifier is instantiated."""
        if qual_leq(F.quals, LIN, q):
            return True
        if qual_leq(F.quals, q, UNR):
            return False
        _fail('TYP002', f'{what} {show_qual(q)} is neither provably linear nor provably unrestricted')

    def check_case(self, F: FunctionEnv, e: VariantCase, stack, L, path):
        check_scope(F, (e.qual, e.heap))
        self.pop_expect(F, stack, e.arrow.ins, 'variant.case')
        ref = self.pop_ref(stack, 'variant.case', VariantHT)
        if not self.same_heap(F, ref.pre.heap, e.heap):
            _fail('TYP001', f'variant.case annotation {show_type(e.heap)} differs from the reference\'s '
                            f'{show_type(ref.pre.heap)}')
        cases = ref.pre.heap.cases
        if len(e.bodies) != len(cases):
            _fail('TYP001', f'variant.case has {len(e.bodies)} branches for {len(cases)} cases')
        if self.linear_mode(F, e.qual, 'variant.case'):
            self.freeable(F, ref, [], 'variant.case lin')
            below = stack
        else:
            for case in cases:
                if not self.droppable(F, case):
                    _fail('TYP002', f'variant.case unr would copy linear {show_type(case)}')
            below = stack + [ref]
        L_out = effect_apply(F, L, e.effect)
        inner = F.enter_block(e.arrow.outs, L_out, self.frozen(F, below))
        for k, (body, case) in enumerate(zip(e.bodies, cases)):
            self.check_body(inner, body, tuple(e.arrow.ins) + (case,), e.arrow.outs, L, L_out, path + (k,),
                            'variant.case')
        stack = below + list(e.arrow.outs)
        return stack, L_out, False

    def check_unpack(self, F: FunctionEnv, e: ExistUnpack, stack, L, path):
        check_scope(F, (e.qual, e.heap))
        if not isinstance(e.heap, ExHT):
            _fail('TYP006', 'exists.unpack needs an existential heap type')
        self.pop_expect(F, stack, e.arrow.ins, 'exists.unpack')
        ref = self.pop_ref(stack, 'exists.unpack', ExHT)
        if not self.same_heap(F, ref.pre.heap, e.heap):
            _fail('TYP001', f'exists.unpack annotation {show_type(e.heap)} differs from the reference\'s '
                            f'{show_type(ref.pre.heap)}')
        heap = ref.pre.heap
        if self.linear_mode(F, e.qual, 'exists.unpack'):
            self.freeable(F, ref, [], 'exists.unpack lin')
            below = stack
        else:
            if not qual_leq(F.quals, heap.body.qual, UNR):
                _fail('TYP002', f'exists.unpack unr would copy linear {show_type(heap.body)}')
            below = stack + [ref]
        L_out = effect_apply(F, L, e.effect)
        inner = F.enter_block(e.arrow.outs, L_out, self.frozen(F, below)).push(TypeQ(heap.qual, heap.size))
        ins = tuple(shift(e.arrow.ins, Kind.TYPE)) + (heap.body,)
        self.check_body(inner, e.body, ins, shift(e.arrow.outs, Kind.TYPE), shift(L, Kind.TYPE),
                        shift(L_out, Kind.TYPE), path + (0,), 'exists.unpack')
        return below + list(e.arrow.outs), L_out, False

    def same_heap(self, F, actual, expected) -> bool:
        return actual == expected or (self.runtime and heap_matches(F, actual, expected))

    def check_heap_value(self, F: FunctionEnv, hv, heap) -> None:
        check_heap_value(self.S, F, self.ledger, hv, heap)

    def check_label(self, F: FunctionEnv, e: Label, stack, L, path):
        below = self.frozen(F, stack)
        if e.cont and isinstance(e.cont[0], Loop):
            loop = e.cont[0]
            inner = F.enter_block(loop.arrow.ins, L, below)
            self.check_body(inner, e.body, (), loop.arrow.outs, L, L, path + (0,), 'loop label')
            return stack + list(loop.arrow.outs), L, False
        pending = _Pending(e.arity)
        inner = replace(F, labels=((pending, None),) + F.labels, linear=(UNR, below) + F.linear[1:])
        body_stack, L_end, diverged = self.check_seq(inner, e.body, [], L, path + (0,))
        if not diverged:
            if len(body_stack) != e.arity:
                _fail('TYP001', f'label body leaves {len(body_stack)} values, arity is {e.arity}')
            if pending.types is not None and not self.same_all(F, body_stack, pending.types):
                _fail('TYP004', 'label exit disagrees with a branch to it')
            if pending.types is not None and not self.same_locals(F, L_end, pending.locals):
                self.explain_locals(F, L_end, pending.locals, 'label')
            return stack + body_stack, L_end, False
        if pending.types is None:
            return stack, L, True
        return stack + list(pending.types), pending.locals, False

    def check_frame(self, F: FunctionEnv, e: LocalFrame, stack, L, path):
        if not 0 <= e.inst < len(self.S.instances):
            _fail('TYP005', f'frame refers to instance {e.inst}')
        locals_ = _slot_types(self.S, FunctionEnv(), self.ledger, e.locals)
        pending = _Pending(e.arity)
        frame_checker = _Checker(self.S.instances[e.inst], self.S, self.ledger, None, None, self.func_index)
        inner = FunctionEnv(ret=pending)
        body_stack, L_end, diverged = frame_checker.check_seq(inner, e.body, [], locals_, path + (0,))
        if not diverged:
            if len(body_stack) != e.arity:
                _fail('TYP001', f'frame body leaves {len(body_stack)} values, arity is {e.arity}')
            for i, (t, _) in enumerate(L_end):
                if not self.droppable(inner, t):
                    _fail('LIN003', f'frame ends with linear {show_type(t)} in local {i}')
            return stack + body_stack, L, False
        if pending.types is None:
            return stack, L, True
        return stack + list(pending.types), L, False


# Runtime value typing

def matches(F: FunctionEnv, actual: Type, expected: Type) -> bool:
    """Whether a synthesized value type can be weakened to ``expected`` (qualifier raised, read-write read as
    read-only)."""
    if actual == expected:
        return True
    if not qual_leq(F.quals, actual.qual, expected.qual):
        return False
    a, b = actual.pre, expected.pre
    if type(a) is not type(b):
        return False
    if isinstance(a, ProdT):
        return len(a.types) == len(b.types) and all(matches(F, x, y) for x, y in zip(a.types, b.types))
    if isinstance(a, (RefT, CapT)):
        return a.loc == b.loc and (a.priv == b.priv or b.priv is Priv.R) and heap_matches(F, a.heap, b.heap)
    if isinstance(a, ExLocT):
        return matches(F.push(LocQ()), a.body, b.body)
    if isinstance(a, RecT):
        return a.qual == b.qual and matches(F.push_rec(a.qual), a.body, b.body)
    return a == b


def heap_matches(F: FunctionEnv, actual, expected) -> bool:
    if actual == expected:
        return True
    if type(actual) is not type(expected):
        return False
    if isinstance(actual, StructHT):
        return len(actual.fields) == len(expected.fields) and all(
            matches(F, a, b) and sa == sb for (a, sa), (b, sb) in zip(actual.fields, expected.fields))
    if isinstance(actual, VariantHT):
        return len(actual.cases) == len(expected.cases) and all(
            matches(F, a, b) for a, b in zip(actual.cases, expected.cases))
    if isinstance(actual, ArrayHT):
        return matches(F, actual.elem, expected.elem)
    return False


def _location_heap(S: StoreTyping, loc: LocConst):
    memory = S.lin if loc.mem is Mem.LIN else S.unr
    if loc.address not in memory:
        _fail('MEM001', f'reference to {loc.mem.value} location {loc.address}, which is not allocated')
    return memory[loc.address]


def check_value(S: StoreTyping, F: FunctionEnv, ledger: LinearLedger, v) -> Type:
    """Synthesizes the most precise type of a runtime value, consuming the linear locations it owns."""
    if isinstance(v, Const):
        return Type(NumT(v.num), UNR)
    if isinstance(v, UnitV):
        return UNIT_UNR
    if isinstance(v, ProdV):
        parts = tuple(check_value(S, F, ledger, x) for x in v.values)
        linear = any(not (isinstance(t.pre, UnitT) or qual_leq(F.quals, t.qual, UNR)) for t in parts)
        return Type(ProdT(parts), LIN if linear else UNR)
    if isinstance(v, (RefV, CapV)):
        heap = _location_heap(S, v.loc)
        if v.loc.mem is Mem.LIN and ledger is not None:
            ledger.consume(v.loc.address)
        cls = RefT if isinstance(v, RefV) else CapT
        return Type(cls(Priv.RW, v.loc, heap), LIN if v.loc.mem is Mem.LIN else UNR)
    if isinstance(v, PtrV):
        _location_heap(S, v.loc)
        return Type(PtrT(v.loc), UNR)
    if isinstance(v, OwnV):
        return Type(OwnT(v.loc), LIN if v.loc.mem is Mem.LIN else UNR)
    if isinstance(v, FoldV):
        t = check_value(S, F, ledger, v.value)
        if not isinstance(v.pre, RecT):
            _fail('TYP006', 'folded value without a recursive type')
        unfolded = substitute(v.pre.body, Kind.TYPE, v.pre)
        if not matches(F, t, unfolded):
            _fail('TYP001', f'folded value has type {show_type(t)}, expected {show_type(unfolded)}')
        return Type(v.pre, t.qual)
    if isinstance(v, MemPackV):
        t = check_value(S, F, ledger, v.value)
        return Type(ExLocT(abstract_loc(t, v.loc)), t.qual)
    assert isinstance(v, CodeRefV), f'Not a value: {v}.'
    if not 0 <= v.inst < len(S.instances) or not 0 <= v.index < len(S.instances[v.inst].table):
        _fail('TYP005', f'code reference to missing table entry {v.inst}.{v.index}')
    return Type(CodeRefT(instantiate_funtype(S.instances[v.inst].table[v.index], v.indices)), UNR)


def value_type(S: StoreTyping, v) -> Type:
    """Type of a closed value without ownership accounting."""
    return check_value(S, FunctionEnv(), None, v)


def _slot_types(S: StoreTyping, F: FunctionEnv, ledger: Optional[LinearLedger], slots) -> LocalEnv:
    L = []
    for i, (v, sz) in enumerate(slots):
        t = check_value(S, F, ledger, v)
        if not size_leq(F.sizes, size_of(F.types, t), sz):
            _fail('TYP003', f'local {i} holds {show_type(t)}, which does not fit in {show_size(sz)} bits')
        L.append((t, sz))
    return tuple(L)


def _heap_no_caps(heap) -> bool:
    if isinstance(heap, StructHT):
        return all(no_caps((), t) for t, _ in heap.fields)
    if isinstance(heap, VariantHT):
        return all(no_caps((), t) for t in heap.cases)
    if isinstance(heap, ArrayHT):
        return no_caps((), heap.elem)
    return no_caps((TypeBound(heap.qual, heap.size),), heap.body)


def check_heap_value(S: StoreTyping, F: FunctionEnv, ledger: LinearLedger, hv, heap) -> None:
    def mismatch(message: str):
        _fail('HEAP001', message)

    if isinstance(hv, StructHV):
        if not isinstance(heap, StructHT) or len(heap.fields) != len(hv.values):
            mismatch('struct value does not match its heap type')
        for v, (t, sz) in zip(hv.values, heap.fields):
            actual = check_value(S, F, ledger, v)
            if not matches(F, actual, t):
                mismatch(f'struct field holds {show_type(actual)}, expected {show_type(t)}')
            if not size_leq(F.sizes, size_of(F.types, actual), sz):
                mismatch(f'struct field holds {show_type(actual)}, which does not fit in {show_size(sz)} bits')
    elif isinstance(hv, VariantHV):
        if not isinstance(heap, VariantHT) or not 0 <= hv.tag < len(heap.cases):
            mismatch('variant value does not match its heap type')
        actual = check_value(S, F, ledger, hv.value)
        if not matches(F, actual, heap.cases[hv.tag]):
            mismatch(f'variant payload has {show_type(actual)}, expected {show_type(heap.cases[hv.tag])}')
    elif isinstance(hv, ArrayHV):
        if not isinstance(heap, ArrayHT):
            mismatch('array value does not match its heap type')
        for v in hv.values:
            actual = check_value(S, F, ledger, v)
            if not matches(F, actual, heap.elem):
                mismatch(f'array element has {show_type(actual)}, expected {show_type(heap.elem)}')
    else:
        assert isinstance(hv, PackHV), f'Not a heap value: {hv}.'
        if not isinstance(heap, ExHT):
            mismatch('package does not match its heap type')
        try:
            _Checker(ModuleEnv()).check_index(F, TypeQ(heap.qual, heap.size), PreTypeI(hv.pre))
        except CheckError as exc:
            mismatch(f'package witness {show_type(hv.pre)} violates the bounds of {show_type(heap)}: '
                     f'{exc.diagnostics[0].message}')
        actual = check_value(S, F, ledger, hv.value)
        expected = substitute(heap.body, Kind.TYPE, hv.pre)
        if not matches(F, actual, expected):
            mismatch(f'package holds {show_type(actual)}, expected {show_type(expected)}')


# Entry points

def module_env(m: RWModule) -> ModuleEnv:
    funcs = tuple(f.type for f in m.funcs)
    globals_ = tuple((g.mutable, g.pre) for g in m.globals)
    for entry in m.table.entries:
        if not 0 <= entry < len(funcs):
            raise CheckError([error('TYP005', f'table entry {entry} names a missing function')])
    return ModuleEnv(funcs, globals_, tuple(funcs[i] for i in m.table.entries))


def check_instrs(M: ModuleEnv,
                 F: FunctionEnv,
                 L: LocalEnv,
                 instrs: Sequence,
                 stack: Sequence[Type] = (),
                 S: Optional[StoreTyping] = None,
                 ledger: Optional[LinearLedger] = None) -> Tuple[Tuple[Type, ...], LocalEnv]:
    """Checks an instruction sequence over an abstract stack.

    Parameters
    ----------
    M: ModuleEnv
        Functions, globals and table of the enclosing module.
    F: FunctionEnv
        Typing context (quantifier bounds, labels, return type, linear stack).
    L: LocalEnv
        Slot types and sizes on entry.
    instrs: Sequence
        The instructions.
    stack: Sequence[Type], default = ()
        Types below the sequence on entry.
    S: StoreTyping, default = None
        Store typing; when given the sequence is checked in runtime mode.
    ledger: LinearLedger, default = None
        Linear locations still available to values (runtime mode only).

    Returns
    -------
    stack: Tuple[Type, ...]
        Types on the stack after the sequence. After a branch, return or unreachable the remaining instructions
        are not checked and the stack is the one reached at that point.
    locals: LocalEnv
        Slot types after the sequence.
    """
    checker = _Checker(M, S, ledger)
    out, L_end, _ = checker.check_seq(F, tuple(instrs), list(stack), tuple(L), ())
    return tuple(out), L_end


def check_function(M: ModuleEnv,
                   f: Func,
                   func_index: int = 0,
                   spans: Optional[Dict] = None,
                   recorder: Optional[Recorder] = None) -> None:
    """Checks one function definition against its declared type.

    Raises
    ------
    CheckError
        With the first violated rule as its diagnostic.
    """
    checker = _Checker(M, recorder=recorder, spans=spans, func_index=func_index)
    F = FunctionEnv()
    try:
        check_fun_type(F, f.type)
    except CheckError as exc:
        raise checker.located(exc, ())
    F = replace(F.push_all(f.type.quants), ret=f.type.outs)
    try:
        check_scope(F, f.locals)
        L = tuple((t, size_of(F.types, t)) for t in f.type.ins) + tuple((UNIT_UNR, sz) for sz in f.locals)
    except (CheckError, IllScopedError) as exc:
        exc = exc if isinstance(exc, CheckError) else CheckError([error('TYP006', str(exc))])
        raise checker.located(exc, ())
    stack, L_end, diverged = checker.check_seq(F, f.body, [], L, ())
    if diverged:
        return
    try:
        if not checker.same_all(F, stack, f.type.outs):
            _fail('TYP001', f'function body produces ({", ".join(show_type(t) for t in stack)}) but the '
                            f'function returns ({", ".join(show_type(t) for t in f.type.outs)})')
        for i, (t, _) in enumerate(L_end):
            if not checker.droppable(F, t):
                _fail('LIN003', f'function ends with linear {show_type(t)} in local {i}')
    except CheckError as exc:
        raise checker.located(exc, (len(f.body),))


def check_global(M: ModuleEnv,
                 g: Global,
                 global_index: int,
                 spans: Optional[Dict] = None,
                 recorder: Optional[Recorder] = None) -> None:
    checker = _Checker(M, recorder=recorder, spans=spans, func_index=-1 - global_index)
    F = FunctionEnv()
    stack, _, diverged = checker.check_seq(F, g.init, [], (), ())
    if not diverged and (len(stack) != 1 or stack[0].pre != g.pre or not checker.droppable(F, stack[0])):
        raise checker.located(CheckError([error('TYP001', f'global {global_index} initializer must produce one '
                                                          f'unrestricted {show_type(g.pre)}')]), ())


def check_module(m: RWModule,
                 spans: Optional[Dict] = None,
                 recorder: Optional[Recorder] = None) -> ModuleEnv:
    """Type checks every global initializer and function of a module.

    Parameters
    ----------
    m: RWModule
        Module to check.

    spans: Dict, default = None
        Instruction spans from ``parse_module_with_spans``, used to locate diagnostics.

    recorder: Recorder, default = None
        Called with the abstract stack before every instruction of every function and global initializer.

    Returns
    -------
    env: ModuleEnv
        The module's typing environment.

    Raises
    ------
    CheckError
        Carrying one diagnostic per rejected function or global.
    """
    M = module_env(m)
    diagnostics = []
    for i, g in enumerate(m.globals):
        if isinstance(g, Global):
            try:
                check_global(M, g, i, spans, recorder)
            except CheckError as exc:
                diagnostics += exc.diagnostics
    for i, f in enumerate(m.funcs):
        if isinstance(f, FuncImport):
            try:
                check_fun_type(FunctionEnv(), f.type)
            except CheckError as exc:
                diagnostics += exc.diagnostics
            continue
        try:
            check_function(M, f, i, spans, recorder)
        except CheckError as exc:
            diagnostics += exc.diagnostics
    if diagnostics:
        raise CheckError(diagnostics)
    logger.info('module checked: %d functions, %d globals', len(m.funcs), len(m.globals))
    return M


def check_link(modules: Sequence[Tuple[str, RWModule]], link_map: Optional[Dict] = None) -> None:
    """Checks that every function and global import is satisfied by an export of the named module at the same type.

    ``link_map`` may redirect an import (module, name) to another export (module, name).

    Raises
    ------
    LinkError
        LNK001 for unresolved imports, LNK002 for type mismatches.
    """
    link_map = link_map or {}
    exports = {}
    for name, m in modules:
        for f in m.funcs:
            for export in f.exports:
                exports[(name, export)] = ('func', f.type)
        for g in m.globals:
            for export in g.exports:
                exports[(name, export)] = ('global', (g.mutable, g.pre))
    diagnostics = []
    for name, m in modules:
        for f in m.funcs:
            if isinstance(f, FuncImport):
                found = exports.get(link_map.get((f.module, f.name), (f.module, f.name)))
                if found is None or found[0] != 'func':
                    diagnostics.append(error('LNK001', f'{name}: unresolved function import {f.module}.{f.name}'))
                elif found[1] != f.type:
                    diagnostics.append(error('LNK002', f'{name}: import {f.module}.{f.name} expects '
                                                       f'{show_type(f.type)} but the export has '
                                                       f'{show_type(found[1])}'))
        for g in m.globals:
            if isinstance(g, GlobalImport):
                found = exports.get(link_map.get((g.module, g.name), (g.module, g.name)))
                if found is None or found[0] != 'global':
                    diagnostics.append(error('LNK001', f'{name}: unresolved global import {g.module}.{g.name}'))
                elif found[1] != (g.mutable, g.pre):
                    diagnostics.append(error('LNK002', f'{name}: global import {g.module}.{g.name} has a '
                                                       f'different type'))
    if diagnostics:
        raise LinkError(diagnostics)


def check_config(S: StoreTyping, config, store=None) -> Tuple[Type, ...]:
    """Checks a runtime configuration against a store typing.

    Every linear location in ``S`` must be owned exactly once, either by a heap value or by the program.

    Parameters
    ----------
    S: StoreTyping
        Store typing; usually ``config.store.typing()``.

    config: richwasm.core.interp.Configuration
        The configuration to check.

    Returns
    -------
    types: Tuple[Type, ...]
        Types of the values the configuration produces if it diverges neither by trap nor by branch.
    """
    ledger = LinearLedger(S.lin.keys())
    F = FunctionEnv()
    store = config.store if store is None else store
    for mem, typing in ((Mem.LIN, S.lin), (Mem.UNR, S.unr)):
        for address, heap in typing.items():
            hv, _ = store.mem[mem][address]
            try:
                check_heap_value(S, F, ledger, hv, heap)
            except CheckError as exc:
                first = exc.diagnostics[0]
                raise CheckError([error(first.code, f'{mem.value} location {address}: {first.message}')])
    checker = _Checker(S.instances[config.inst], S, ledger)
    for address in S.unr:
        hv, _ = store.mem[Mem.UNR][address]
        for loc in referenced_locations(hv):
            if loc.mem is Mem.LIN and loc.address in S.lin and not _heap_no_caps(S.lin[loc.address]):
                _fail('CAP001', f'unr location {address} owns lin location {loc.address}, whose heap type '
                                f'{show_type(S.lin[loc.address])} may hold a capability')
    L = _slot_types(S, F, ledger, config.locals)
    stack, L_end, diverged = checker.check_seq(F, config.instrs, [], L, ())
    if not diverged:
        for i, (t, _) in enumerate(L_end):
            if not checker.droppable(F, t):
                _fail('LIN003', f'configuration ends with linear {show_type(t)} in local {i}')
    if ledger.remaining():
        _fail('MEM001', f'linear locations {sorted(ledger.remaining())} are owned by nothing')
    return tuple(stack)
