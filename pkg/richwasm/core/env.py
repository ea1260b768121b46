"""Typing environments: function, local, module and store typings, and the linear-location ledger."""
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Set, Tuple

from richwasm.core.ir import (Kind, Qual, Size, Type, PreType, FunType, HeapType, Quantifier, LocQ, SizeQ, QualQ,
                              TypeQ, UNR)
from richwasm.core.subst import shift
from richwasm.util.utils import CheckError, error


@dataclass(frozen=True)
class QualBound:
    lower: Tuple[Qual, ...] = ()
    upper: Tuple[Qual, ...] = ()


@dataclass(frozen=True)
class SizeBound:
    lower: Tuple[Size, ...] = ()
    upper: Tuple[Size, ...] = ()


@dataclass(frozen=True)
class TypeBound:
    """Bounds of a type variable. ``size`` is None for the variable of a recursive type, which has no size."""
    qual: Qual
    size: Optional[Size]
    caps: bool = False


# One (type, slot size) pair per local slot.
LocalEnv = Tuple[Tuple[Type, Size], ...]


@dataclass(frozen=True)
class FunctionEnv:
    """Per-function typing context. Every sequence is ordered innermost first.

    ``linear`` holds one qualifier per enclosing block: the join of the qualifiers of the values that block left on
    its stack below the inner block. Entry 0 belongs to the block being checked and is always Unr; the live part of
    that block is read from the abstract stack instead.
    """
    labels: Tuple[Tuple[Tuple[Type, ...], LocalEnv], ...] = ()
    ret: Optional[Tuple[Type, ...]] = None
    quals: Tuple[QualBound, ...] = ()
    sizes: Tuple[SizeBound, ...] = ()
    types: Tuple[TypeBound, ...] = ()
    locations: int = 0
    linear: Tuple[Qual, ...] = (UNR,)

    def push(self, quant: Quantifier) -> 'FunctionEnv':
        """Enters the scope of a quantifier whose bounds are written in the current context."""
        kind = quant.kind
        env = self.shifted(kind)
        if isinstance(quant, LocQ):
            return replace(env, locations=env.locations + 1)
        if isinstance(quant, SizeQ):
            bound = SizeBound(shift(quant.lower, kind), shift(quant.upper, kind))
            return replace(env, sizes=(bound,) + env.sizes)
        if isinstance(quant, QualQ):
            bound = QualBound(shift(quant.lower, kind), shift(quant.upper, kind))
            return replace(env, quals=(bound,) + env.quals)
        assert isinstance(quant, TypeQ), f'Not a quantifier: {quant}.'
        return replace(env, types=(TypeBound(quant.qual, quant.size, quant.caps),) + env.types)

    def push_all(self, quants: Tuple[Quantifier, ...]) -> 'FunctionEnv':
        env = self
        for q in quants:
            env = env.push(q)
        return env

    def push_rec(self, qual: Qual) -> 'FunctionEnv':
        return replace(self.shifted(Kind.TYPE), types=(TypeBound(qual, None, False),) + self.types)

    def shifted(self, kind: Kind) -> 'FunctionEnv':
        """Moves every stored type one binder of ``kind`` deeper."""
        return FunctionEnv(labels=shift(self.labels, kind),
                           ret=shift(self.ret, kind),
                           quals=shift(self.quals, kind),
                           sizes=shift(self.sizes, kind),
                           types=shift(self.types, kind),
                           locations=self.locations,
                           linear=shift(self.linear, kind))

    def enter_block(self, outs: Tuple[Type, ...], local_env: LocalEnv, below: Qual) -> 'FunctionEnv':
        return replace(self, labels=((outs, local_env),) + self.labels, linear=(UNR, below) + self.linear[1:])


@dataclass(frozen=True)
class ModuleEnv:
    funcs: Tuple[FunType, ...] = ()
    globals: Tuple[Tuple[bool, PreType], ...] = ()
    table: Tuple[FunType, ...] = ()


@dataclass
class StoreTyping:
    instances: Tuple[ModuleEnv, ...] = ()
    unr: Dict[int, HeapType] = field(default_factory=dict)
    lin: Dict[int, HeapType] = field(default_factory=dict)


class LinearLedger:
    """Tracks which linear locations are still unaccounted for while typing a configuration.

    Every reference, capability or pointer to a linear location must consume that location exactly once.
    """

    def __init__(self, addresses=()):
        self.available: Set[int] = set(addresses)
        self.consumed: Set[int] = set()

    def consume(self, address: int) -> None:
        if address in self.consumed:
            raise CheckError([error('LIN001', f'linear location {address} is referenced more than once')])
        if address not in self.available:
            raise CheckError([error('MEM001', f'linear location {address} is not in the store typing')])
        self.available.remove(address)
        self.consumed.add(address)

    def remaining(self) -> Set[int]:
        return set(self.available)
