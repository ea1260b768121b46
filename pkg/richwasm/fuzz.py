"""Type-safety fuzzing: generate well-typed programs, run them step by step, and re-check after every step.

Programs are built type first. The generator is asked for code producing a value of a given closed type and picks
one of the instruction forms whose typing rule yields that type, so every program is well typed by construction.
The interpreter then reduces the program one rule at a time; a configuration that cannot step is a progress
violation, one that no longer checks at its original result type is a preservation violation.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

from richwasm.core.constraints import size_of
from richwasm.core.env import FunctionEnv
from richwasm.core.interp import Configuration, Done, Stuck, Trapped, collect, instantiate, roots, step
from richwasm.core.ir import (UNR, LIN, NumKind, SizeConst, Type, UnitT, NumT, ProdT, ExLocT, RefT, VarT, StructHT,
                              VariantHT, ExHT, FunType, ArrowType, Priv, LocVar, Const, UnitV, Binop, Relop,
                              Drop, Select, Block, Loop, Ite, Br, BrIf, Unreachable, GetLocal, SetLocal, TeeLocal,
                              GetGlobal, SetGlobal, Qualify, CodeRefI, CallIndirect, Call, MemUnpack, Group, Ungroup,
                              RefDemote, RefSplit, RefJoin, StructMalloc, StructFree, StructGet, StructSet,
                              StructSwap, VariantMalloc, VariantCase, ArrayMalloc, ArrayGet, ArraySet, ArrayFree,
                              ExistPack, ExistUnpack, CallClosure, Func, Global, Table, RWModule)
from richwasm.core.typecheck import check_config, check_module, matches
from richwasm.util.utils import CheckError, InterpreterFault

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['seed', 'index', 'status', 'steps', 'allocations', 'progress_violation',
                  'preservation_violation', 'detail']

I32_UNR = Type(NumT(NumKind.I32), UNR)
NUM_KINDS = (NumKind.I32, NumKind.I64, NumKind.F32, NumKind.F64)
INT_OPS = ('add', 'sub', 'mul', 'and', 'or', 'xor', 'div')
FLOAT_OPS = ('add', 'sub', 'mul', 'min', 'max')
# exists.pack packages: one type variable, unrestricted, at most 64 bits
PACKAGE = ExHT(UNR, SizeConst(64), Type(VarT(0), UNR))
ADD = FunType((), (I32_UNR, I32_UNR), (I32_UNR,))


@dataclass
class GenConfig:
    """Generator settings

    Parameters
    ----------
    seed: int, default = 0
        Base seed; program ``i`` is generated from ``(seed, i)``.

    max_depth: int, default = 3
        Nesting depth of generated expressions. Depth 0 yields configurations made of values only.

    max_locations: int, default = 4
        Allocation sites per program.

    max_instructions: int, default = 12
        Statements generated before the result values.

    collect_interval: int, default = 64
        Reductions between collections while running.
    """
    seed: int = 0
    max_depth: int = 3
    max_locations: int = 4
    max_instructions: int = 12
    collect_interval: int = 64


def _num(kind: NumKind, q=UNR) -> Type:
    return Type(NumT(kind), q)


def _allocated(heap, q) -> Type:
    return Type(ExLocT(Type(RefT(Priv.RW, LocVar(0), heap), q)), q)


class _ProgramGenerator:
    def __init__(self, cfg: GenConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.sizes: List[SizeConst] = []
        self.allocations = 0

    def pick(self, options):
        return options[int(self.rng.integers(len(options)))]

    def chance(self, p: float) -> bool:
        return bool(self.rng.random() < p)

    def temp(self, t: Type) -> int:
        self.sizes.append(size_of((), t))
        return len(self.sizes) - 1

    def can_allocate(self) -> bool:
        return self.allocations < self.cfg.max_locations

    def constant(self, kind: NumKind) -> Const:
        if kind.is_float:
            return Const(kind, float(np.round(self.rng.normal(0, 100), 2)))
        return Const(kind, int(self.rng.integers(-20, 100)))

    # types

    def value_type(self, depth: int) -> Type:
        choice = int(self.rng.integers(8 if depth > 0 else 5))
        if choice < 3:
            return _num(self.pick(NUM_KINDS))
        if choice == 3:
            return Type(UnitT(), UNR)
        if choice == 4:
            return _num(self.pick(NUM_KINDS), LIN)
        if choice == 5:
            parts = tuple(_num(self.pick(NUM_KINDS)) for _ in range(int(self.rng.integers(2, 4))))
            return Type(ProdT(parts), self.pick((UNR, LIN)))
        field = _num(self.pick(NUM_KINDS))
        return _allocated(StructHT(((field, size_of((), field)),)), self.pick((UNR, LIN)))

    # expressions

    def produce(self, t: Type, depth: int) -> list:
        """Code pushing one value of the closed type ``t``; locals it touches are reset before it ends."""
        pre = t.pre
        if isinstance(pre, UnitT):
            code = [UnitV()]
        elif isinstance(pre, ProdT):
            code = [e for part in pre.types for e in self.produce(part, depth - 1 if depth else 0)]
            code.append(Group(len(pre.types), t.qual))
            return code
        elif isinstance(pre, ExLocT):
            field, sz = pre.body.pre.heap.fields[0]
            self.allocations += 1
            return self.produce(field, depth - 1 if depth else 0) + [StructMalloc((sz,), t.qual)]
        else:
            code = self.number(Type(pre, UNR), depth)
        if t.qual != UNR:
            code.append(Qualify(t.qual))
        return code

    def number(self, t: Type, depth: int) -> list:
        kind = t.pre.num
        if depth <= 0:
            return [self.constant(kind)]
        forms = ['const', 'binop', 'block', 'ite', 'br', 'br_if', 'loop', 'select', 'local']
        if kind is NumKind.I32:
            forms += ['relop', 'global', 'call', 'call_indirect']
        if self.can_allocate():
            forms += ['struct', 'struct', 'variant', 'exists', 'array']
        form = self.pick(forms)
        inner = depth - 1
        arrow = ArrowType((), (t,))
        if form == 'const':
            return [self.constant(kind)]
        if form == 'binop':
            op = self.pick(FLOAT_OPS if kind.is_float else INT_OPS)
            return self.number(t, inner) + self.number(t, inner) + [Binop(kind, op)]
        if form == 'relop':
            other = _num(self.pick(NUM_KINDS))
            op = self.pick(('eq', 'ne', 'lt', 'gt', 'le', 'ge'))
            return self.number(other, inner) + self.number(other, inner) + [Relop(other.pre.num, op)]
        if form == 'block':
            return self.statements(inner, 1) + [Block(arrow, (), tuple(self.number(t, inner)))]
        if form == 'ite':
            cond = self.number(I32_UNR, inner)
            return cond + [Ite(arrow, (), tuple(self.number(t, inner)), tuple(self.number(t, inner)))]
        if form == 'br':
            body = self.number(t, inner) + [Br(0)] + self.number(t, inner) + [Unreachable()]
            return [Block(arrow, (), tuple(body))]
        if form == 'br_if':
            body = self.number(t, inner) + self.number(I32_UNR, inner) + [BrIf(0), Drop()] + self.number(t, inner)
            return [Block(arrow, (), tuple(body))]
        if form == 'loop':
            return [Loop(arrow, tuple(self.number(t, inner)))]
        if form == 'select':
            return self.number(t, inner) + self.number(t, inner) + self.number(I32_UNR, inner) + [Select()]
        if form == 'local':
            slot = self.temp(t)
            return self.number(t, inner) + [TeeLocal(slot), Drop(), GetLocal(slot, UNR), UnitV(), SetLocal(slot)]
        if form == 'global':
            return [GetGlobal(0)]
        if form == 'call':
            return self.number(t, inner) + self.number(t, inner) + [Call(0)]
        if form == 'call_indirect':
            return self.number(t, inner) + self.number(t, inner) + [CodeRefI(0), CallIndirect()]
        self.allocations += 1
        return getattr(self, form)(t, inner)

    def drop_under(self, top: Type) -> list:
        slot = self.temp(top)
        return [SetLocal(slot), Drop(), GetLocal(slot, UNR), UnitV(), SetLocal(slot)]

    def struct(self, t: Type, depth: int) -> list:
        q = self.pick((UNR, LIN))
        sz = size_of((), t)
        code = self.number(t, depth) + [StructMalloc((sz,), q)]
        if q == UNR:
            body = [RefDemote(), StructGet(0)] if self.chance(0.3) else [StructGet(0)]
            if self.chance(0.5):
                body = self.set_field(t, depth) + body
            body += self.drop_under(t)
        else:
            slot = self.temp(t)
            body = [RefSplit(), RefJoin()] if self.chance(0.5) else []
            body += [UnitV(), StructSwap(0), SetLocal(slot), StructFree(), GetLocal(slot, UNR), UnitV(),
                     SetLocal(slot)]
        return code + [MemUnpack(ArrowType((), (t,)), (), tuple(body))]

    def set_field(self, t: Type, depth: int) -> list:
        return self.number(t, depth) + [StructSet(0)]

    def variant(self, t: Type, depth: int) -> list:
        cases = tuple(self.value_type(0) for _ in range(int(self.rng.integers(1, 4))))
        cases = tuple(Type(c.pre, UNR) for c in cases)
        tag = int(self.rng.integers(len(cases)))
        q = self.pick((UNR, LIN))
        arrow = ArrowType((), (t,))
        bodies = tuple(tuple([Drop()] + self.number(t, depth)) for _ in cases)
        body = [VariantCase(q, VariantHT(cases), arrow, (), bodies)]
        if q == UNR:
            body += self.drop_under(t)
        return self.produce(cases[tag], depth) + [VariantMalloc(tag, cases, q),
                                                   MemUnpack(arrow, (), tuple(body))]

    def exists(self, t: Type, depth: int) -> list:
        hidden = self.pick(NUM_KINDS)
        q = self.pick((UNR, LIN))
        arrow = ArrowType((), (t,))
        body = [ExistUnpack(q, PACKAGE, arrow, (), tuple([Drop()] + self.number(t, depth)))]
        if q == UNR:
            body += self.drop_under(t)
        return self.number(_num(hidden), depth) + [ExistPack(NumT(hidden), PACKAGE, q),
                                                   MemUnpack(arrow, (), tuple(body))]

    def array(self, t: Type, depth: int) -> list:
        q = self.pick((UNR, LIN))
        length = int(self.rng.integers(0, 4))
        # indices range one past each end so out-of-bounds traps occur
        index = int(self.rng.integers(-1, length + 1))
        body = []
        if self.chance(0.5):
            body += [Const(NumKind.I32, int(self.rng.integers(-1, length + 1)))] + self.number(t, depth) + \
                [ArraySet()]
        body += [Const(NumKind.I32, index), ArrayGet()]
        if q == UNR:
            body += self.drop_under(t)
        else:
            slot = self.temp(t)
            body += [SetLocal(slot), ArrayFree(), GetLocal(slot, UNR), UnitV(), SetLocal(slot)]
        code = self.number(t, depth) + [Const(NumKind.I32, length), ArrayMalloc(q)]
        return code + [MemUnpack(ArrowType((), (t,)), (), tuple(body))]

    # statements

    def statements(self, depth: int, count: int) -> list:
        code = []
        for _ in range(count):
            form = self.pick(('drop', 'global', 'pair', 'free') if depth > 0 else ('drop', 'global'))
            if form == 'drop':
                code += self.number(_num(self.pick(NUM_KINDS)), depth) + [Drop()]
            elif form == 'global':
                code += self.number(I32_UNR, depth) + [SetGlobal(0)]
            elif form == 'pair':
                parts = tuple(_num(self.pick(NUM_KINDS)) for _ in range(2))
                code += self.produce(Type(ProdT(parts), UNR), depth) + [Ungroup(), Drop(), Drop()]
            elif self.can_allocate():
                field = _num(self.pick(NUM_KINDS))
                self.allocations += 1
                code += self.number(field, depth - 1) + [StructMalloc((size_of((), field),), LIN),
                                                         MemUnpack(ArrowType((), ()), (), (StructFree(),))]
        return code

    def program(self) -> Tuple[RWModule, Tuple]:
        depth = self.cfg.max_depth
        results = tuple(self.value_type(depth) for _ in range(int(self.rng.integers(1, 3))))
        if depth == 0:
            values = tuple(self.constant(t.pre.num) if isinstance(t.pre, NumT) else UnitV() for t in results)
            return RWModule((self.helper(), Func(FunType((), (), ()), (), ())), (self.global_(),), Table((0,))), values
        body = self.statements(depth, int(self.rng.integers(0, self.cfg.max_instructions + 1)))
        for t in results:
            body += self.produce(t, depth)
        main = Func(FunType((), (), results), tuple(self.sizes), tuple(body), ('main',))
        module = RWModule((self.helper(), main), (self.global_(),), Table((0,)))
        return module, (CallClosure(0, 1, ()),)

    @staticmethod
    def helper() -> Func:
        return Func(ADD, (), (GetLocal(0, UNR), GetLocal(1, UNR), Binop(NumKind.I32, 'add')))

    def global_(self) -> Global:
        return Global(True, NumT(NumKind.I32), (self.constant(NumKind.I32),))


def generate_program(cfg: GenConfig, index: int = 0) -> Tuple[RWModule, Tuple, int]:
    """The ``index``-th program for ``cfg``: its module, the instructions of the starting configuration, and the
    number of allocation sites. The same settings and index always give the same program."""
    generator = _ProgramGenerator(cfg, np.random.default_rng([cfg.seed, index]))
    module, instrs = generator.program()
    return module, instrs, generator.allocations


def _results_match(actual: Sequence[Type], expected: Sequence[Type]) -> bool:
    F = FunctionEnv()
    return len(actual) == len(expected) and all(matches(F, a, e) for a, e in zip(actual, expected))


def check_safety(module: RWModule, instrs: Tuple, fuel: int = 10_000, collect_interval: int = 64) -> dict:
    """Runs one program, re-checking the configuration after every reduction

    Parameters
    ----------
    module: RWModule
        Program module; it is type checked first.

    instrs: Tuple
        Instructions of the starting configuration, run in the module's instance.

    fuel: int, default = 10000
        Maximum number of reductions.

    collect_interval: int, default = 64
        Reductions between collections; 0 disables collection.

    Returns
    -------
    verdict: dict
        Keys ``status``, ``steps``, ``progress_violation``, ``preservation_violation`` and ``detail``.
    """
    assert fuel > 0, f'Fuel must be positive.'
    verdict = dict(status='out_of_fuel', steps=0, progress_violation=False, preservation_violation=False, detail='')
    check_module(module)
    store = instantiate([('fuzz', module)])
    config = Configuration(store, (), 0, tuple(instrs))
    expected = check_config(store.typing(), config)
    steps = 0
    while steps < fuel:
        outcome = step(config)
        if isinstance(outcome, Done):
            verdict['status'] = 'done'
            break
        if isinstance(outcome, Trapped):
            verdict['status'] = 'trap'
            break
        if isinstance(outcome, Stuck):
            verdict.update(status='stuck', progress_violation=True, detail=outcome.description)
            break
        config = outcome.config
        steps += 1
        if collect_interval and steps % collect_interval == 0:
            collect(config.store, roots(config))
        try:
            actual = check_config(config.store.typing(), config)
        except (CheckError, InterpreterFault) as exc:
            verdict.update(preservation_violation=True, detail=f'step {steps} ({outcome.rule}): {exc}')
            break
        if not _results_match(actual, expected):
            verdict.update(preservation_violation=True,
                           detail=f'step {steps} ({outcome.rule}): result type changed')
            break
    verdict['steps'] = steps
    return verdict


def fuzz_safety(cfg: GenConfig = GenConfig(), n: int = 1000, fuel: int = 10_000) -> pd.DataFrame:
    """Generates ``n`` well-typed programs and checks progress and preservation while running each

    Parameters
    ----------
    cfg: GenConfig
        Generator settings.

    n: int, default = 1000
        Number of programs.

    fuel: int, default = 10000
        Reduction budget per program.

    Returns
    -------
    report: pd.DataFrame
        One row per program with columns ['seed', 'index', 'status', 'steps', 'allocations',
        'progress_violation', 'preservation_violation', 'detail']. A program the checker rejects before it runs
        is reported as a preservation violation at step 0.
    """
    assert n >= 0, f'Number of programs must be non-negative.'
    rows = []
    for index in range(n):
        module, instrs, allocations = generate_program(cfg, index)
        try:
            verdict = check_safety(module, instrs, fuel, cfg.collect_interval)
        except CheckError as exc:
            verdict = dict(status='rejected', steps=0, progress_violation=False, preservation_violation=True,
                           detail=f'generated program does not check: {exc}')
        rows.append([cfg.seed, index, verdict['status'], verdict['steps'], allocations,
                     verdict['progress_violation'], verdict['preservation_violation'], verdict['detail']])
        if verdict['progress_violation'] or verdict['preservation_violation']:
            logger.warning('program %d of seed %d: %s', index, cfg.seed, verdict['detail'])
    report = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    logger.info('fuzzed %d programs: %d progress and %d preservation violations', n,
                int(report['progress_violation'].sum()), int(report['preservation_violation'].sum()))
    return report
