"""Abstract syntax of RichWasm: qualifiers, sizes, locations, types, instructions, values and modules.

All nodes are immutable dataclasses. Variables are de Bruijn indices, one index space per binder kind
(location, size, qualifier, type); index 0 always names the innermost binder of its kind.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar, Optional, Tuple, Union


class Kind(Enum):
    LOC = 'loc'
    SIZE = 'size'
    QUAL = 'qual'
    TYPE = 'type'


# Qualifiers

class QualConst(Enum):
    UNR = 'unr'
    LIN = 'lin'


UNR = QualConst.UNR
LIN = QualConst.LIN


@dataclass(frozen=True)
class QualVar:
    index: int
    kind: ClassVar[Kind] = Kind.QUAL


Qual = Union[QualConst, QualVar]


# Sizes, in bits

@dataclass(frozen=True)
class SizeConst:
    bits: int


@dataclass(frozen=True)
class SizeVar:
    index: int
    kind: ClassVar[Kind] = Kind.SIZE


@dataclass(frozen=True)
class SizePlus:
    left: 'Size'
    right: 'Size'


Size = Union[SizeConst, SizeVar, SizePlus]


# Locations

class Mem(Enum):
    LIN = 'lin'
    UNR = 'unr'


@dataclass(frozen=True)
class LocVar:
    index: int
    kind: ClassVar[Kind] = Kind.LOC


@dataclass(frozen=True)
class LocConst:
    address: int
    mem: Mem


Loc = Union[LocVar, LocConst]


class Priv(Enum):
    RW = 'rw'
    R = 'r'


class NumKind(Enum):
    I32 = 'i32'
    I64 = 'i64'
    UI32 = 'ui32'
    UI64 = 'ui64'
    F32 = 'f32'
    F64 = 'f64'

    @property
    def bits(self) -> int:
        return 64 if self in (NumKind.I64, NumKind.UI64, NumKind.F64) else 32

    @property
    def is_float(self) -> bool:
        return self in (NumKind.F32, NumKind.F64)

    @property
    def signed(self) -> bool:
        return self in (NumKind.I32, NumKind.I64)


# Pretypes and types

@dataclass(frozen=True)
class UnitT:
    pass


@dataclass(frozen=True)
class NumT:
    num: NumKind


@dataclass(frozen=True)
class ProdT:
    types: Tuple['Type', ...]


@dataclass(frozen=True)
class RefT:
    priv: Priv
    loc: Loc
    heap: 'HeapType'


@dataclass(frozen=True)
class PtrT:
    loc: Loc


@dataclass(frozen=True)
class CapT:
    priv: Priv
    loc: Loc
    heap: 'HeapType'


@dataclass(frozen=True)
class OwnT:
    loc: Loc


@dataclass(frozen=True)
class RecT:
    """Recursive pretype. Type variable 0 inside ``body`` stands for the whole pretype."""
    qual: Qual
    body: 'Type'
    binds: ClassVar[Tuple[Tuple[str, Kind], ...]] = (('body', Kind.TYPE),)


@dataclass(frozen=True)
class ExLocT:
    """Location-existential pretype: location variable 0 inside ``body`` is hidden."""
    body: 'Type'
    binds: ClassVar[Tuple[Tuple[str, Kind], ...]] = (('body', Kind.LOC),)


@dataclass(frozen=True)
class CodeRefT:
    fun: 'FunType'


@dataclass(frozen=True)
class VarT:
    index: int
    kind: ClassVar[Kind] = Kind.TYPE


PreType = Union[UnitT, NumT, ProdT, RefT, PtrT, CapT, OwnT, RecT, ExLocT, CodeRefT, VarT]


@dataclass(frozen=True)
class Type:
    pre: PreType
    qual: Qual


# Heap types

@dataclass(frozen=True)
class VariantHT:
    cases: Tuple[Type, ...]


@dataclass(frozen=True)
class StructHT:
    fields: Tuple[Tuple[Type, Size], ...]


@dataclass(frozen=True)
class ArrayHT:
    elem: Type


@dataclass(frozen=True)
class ExHT:
    """Heap existential over a type variable with qualifier lower bound and size upper bound."""
    qual: Qual
    size: Size
    body: Type
    binds: ClassVar[Tuple[Tuple[str, Kind], ...]] = (('body', Kind.TYPE),)


HeapType = Union[VariantHT, StructHT, ArrayHT, ExHT]


# Quantifiers and function types

@dataclass(frozen=True)
class LocQ:
    kind: ClassVar[Kind] = Kind.LOC


@dataclass(frozen=True)
class SizeQ:
    lower: Tuple[Size, ...] = ()
    upper: Tuple[Size, ...] = ()
    kind: ClassVar[Kind] = Kind.SIZE


@dataclass(frozen=True)
class QualQ:
    lower: Tuple[Qual, ...] = ()
    upper: Tuple[Qual, ...] = ()
    kind: ClassVar[Kind] = Kind.QUAL


@dataclass(frozen=True)
class TypeQ:
    """Type quantifier: qualifier lower bound, size upper bound, and whether capabilities are allowed."""
    qual: Qual
    size: Size
    caps: bool = False
    kind: ClassVar[Kind] = Kind.TYPE


Quantifier = Union[LocQ, SizeQ, QualQ, TypeQ]


@dataclass(frozen=True)
class FunType:
    quants: Tuple[Quantifier, ...]
    ins: Tuple[Type, ...]
    outs: Tuple[Type, ...]


@dataclass(frozen=True)
class ArrowType:
    ins: Tuple[Type, ...]
    outs: Tuple[Type, ...]


@dataclass(frozen=True)
class LocI:
    loc: Loc
    kind: ClassVar[Kind] = Kind.LOC


@dataclass(frozen=True)
class SizeI:
    size: Size
    kind: ClassVar[Kind] = Kind.SIZE


@dataclass(frozen=True)
class QualI:
    qual: Qual
    kind: ClassVar[Kind] = Kind.QUAL


@dataclass(frozen=True)
class PreTypeI:
    pre: PreType
    kind: ClassVar[Kind] = Kind.TYPE


Index = Union[LocI, SizeI, QualI, PreTypeI]

LocalEffect = Tuple[Tuple[int, Type], ...]


# Values. Values are instructions too: a value in an instruction sequence pushes itself.

@dataclass(frozen=True)
class Const:
    num: NumKind
    value: Union[int, float]


@dataclass(frozen=True)
class UnitV:
    pass


@dataclass(frozen=True)
class ProdV:
    values: Tuple['Value', ...]


@dataclass(frozen=True)
class RefV:
    loc: LocConst


@dataclass(frozen=True)
class PtrV:
    loc: LocConst


@dataclass(frozen=True)
class CapV:
    loc: LocConst


@dataclass(frozen=True)
class OwnV:
    loc: LocConst


@dataclass(frozen=True)
class FoldV:
    pre: PreType
    value: 'Value'


@dataclass(frozen=True)
class MemPackV:
    loc: LocConst
    value: 'Value'


@dataclass(frozen=True)
class CodeRefV:
    inst: int
    index: int
    indices: Tuple[Index, ...] = ()


Value = Union[Const, UnitV, ProdV, RefV, PtrV, CapV, OwnV, FoldV, MemPackV, CodeRefV]
VALUE_TYPES = (Const, UnitV, ProdV, RefV, PtrV, CapV, OwnV, FoldV, MemPackV, CodeRefV)


def is_value(instr) -> bool:
    return isinstance(instr, VALUE_TYPES)


# Heap values

@dataclass(frozen=True)
class VariantHV:
    tag: int
    value: Value


@dataclass(frozen=True)
class StructHV:
    values: Tuple[Value, ...]


@dataclass(frozen=True)
class ArrayHV:
    values: Tuple[Value, ...]


@dataclass(frozen=True)
class PackHV:
    pre: PreType
    value: Value
    heap: HeapType


HeapValue = Union[VariantHV, StructHV, ArrayHV, PackHV]


# Numeric instructions

@dataclass(frozen=True)
class Binop:
    num: NumKind
    op: str


@dataclass(frozen=True)
class Relop:
    num: NumKind
    op: str


@dataclass(frozen=True)
class Testop:
    num: NumKind
    op: str = 'eqz'


@dataclass(frozen=True)
class Unop:
    num: NumKind
    op: str


@dataclass(frozen=True)
class Convert:
    src: NumKind
    dst: NumKind


INT_BINOPS = ('add', 'sub', 'mul', 'div', 'rem', 'and', 'or', 'xor', 'shl', 'shr')
FLOAT_BINOPS = ('add', 'sub', 'mul', 'div', 'min', 'max')
RELOPS = ('eq', 'ne', 'lt', 'gt', 'le', 'ge')
INT_UNOPS = ('clz', 'ctz', 'popcnt')
FLOAT_UNOPS = ('neg', 'abs', 'sqrt')


# Control

@dataclass(frozen=True)
class Unreachable:
    pass


@dataclass(frozen=True)
class Nop:
    pass


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class Select:
    pass


@dataclass(frozen=True)
class Block:
    arrow: ArrowType
    effect: LocalEffect
    body: Tuple['Instr', ...]


@dataclass(frozen=True)
class Loop:
    arrow: ArrowType
    body: Tuple['Instr', ...]


@dataclass(frozen=True)
class Ite:
    arrow: ArrowType
    effect: LocalEffect
    then: Tuple['Instr', ...]
    else_: Tuple['Instr', ...]


@dataclass(frozen=True)
class Br:
    depth: int


@dataclass(frozen=True)
class BrIf:
    depth: int


@dataclass(frozen=True)
class BrTable:
    targets: Tuple[int, ...]
    default: int


@dataclass(frozen=True)
class Return:
    pass


# Locals and globals

@dataclass(frozen=True)
class GetLocal:
    index: int
    qual: Qual


@dataclass(frozen=True)
class SetLocal:
    index: int


@dataclass(frozen=True)
class TeeLocal:
    index: int


@dataclass(frozen=True)
class GetGlobal:
    index: int


@dataclass(frozen=True)
class SetGlobal:
    index: int


# Type-level and calls

@dataclass(frozen=True)
class Qualify:
    qual: Qual


@dataclass(frozen=True)
class CodeRefI:
    index: int


@dataclass(frozen=True)
class Inst:
    indices: Tuple[Index, ...]


@dataclass(frozen=True)
class CallIndirect:
    pass


@dataclass(frozen=True)
class Call:
    index: int
    indices: Tuple[Index, ...] = ()


@dataclass(frozen=True)
class RecFold:
    pre: PreType


@dataclass(frozen=True)
class RecUnfold:
    pass


@dataclass(frozen=True)
class MemPack:
    loc: Loc


@dataclass(frozen=True)
class MemUnpack:
    arrow: ArrowType
    effect: LocalEffect
    body: Tuple['Instr', ...]
    binds: ClassVar[Tuple[Tuple[str, Kind], ...]] = (('body', Kind.LOC),)


@dataclass(frozen=True)
class Group:
    count: int
    qual: Qual


@dataclass(frozen=True)
class Ungroup:
    pass


@dataclass(frozen=True)
class CapSplit:
    pass


@dataclass(frozen=True)
class CapJoin:
    pass


@dataclass(frozen=True)
class RefDemote:
    pass


@dataclass(frozen=True)
class RefSplit:
    pass


@dataclass(frozen=True)
class RefJoin:
    pass


# Heap

@dataclass(frozen=True)
class StructMalloc:
    sizes: Tuple[Size, ...]
    qual: Qual


@dataclass(frozen=True)
class StructFree:
    pass


@dataclass(frozen=True)
class StructGet:
    index: int


@dataclass(frozen=True)
class StructSet:
    index: int


@dataclass(frozen=True)
class StructSwap:
    index: int


@dataclass(frozen=True)
class VariantMalloc:
    tag: int
    cases: Tuple[Type, ...]
    qual: Qual


@dataclass(frozen=True)
class VariantCase:
    qual: Qual
    heap: HeapType
    arrow: ArrowType
    effect: LocalEffect
    bodies: Tuple[Tuple['Instr', ...], ...]


@dataclass(frozen=True)
class ArrayMalloc:
    qual: Qual


@dataclass(frozen=True)
class ArrayGet:
    pass


@dataclass(frozen=True)
class ArraySet:
    pass


@dataclass(frozen=True)
class ArrayFree:
    pass


@dataclass(frozen=True)
class ExistPack:
    pre: PreType
    heap: HeapType
    qual: Qual


@dataclass(frozen=True)
class ExistUnpack:
    qual: Qual
    heap: HeapType
    arrow: ArrowType
    effect: LocalEffect
    body: Tuple['Instr', ...]
    binds: ClassVar[Tuple[Tuple[str, Kind], ...]] = (('body', Kind.TYPE),)


# Administrative forms; they only arise during reduction.

@dataclass(frozen=True)
class Trap:
    pass


@dataclass(frozen=True)
class CallClosure:
    inst: int
    index: int
    indices: Tuple[Index, ...] = ()


@dataclass(frozen=True)
class Label:
    arity: int
    cont: Tuple['Instr', ...]
    body: Tuple['Instr', ...]


@dataclass(frozen=True)
class LocalFrame:
    arity: int
    inst: int
    locals: Tuple[Tuple[Value, Size], ...]
    body: Tuple['Instr', ...]


@dataclass(frozen=True)
class Malloc:
    size: Size
    value: HeapValue
    qual: Qual
    heap: Optional[HeapType] = None


@dataclass(frozen=True)
class Free:
    pass


@dataclass(frozen=True)
class Breaking:
    depth: int
    values: Tuple[Value, ...]


@dataclass(frozen=True)
class Returning:
    values: Tuple[Value, ...]


ADMIN_TYPES = (Trap, CallClosure, Label, LocalFrame, Malloc, Free, Breaking, Returning)

Instr = Union[
    Value, Binop, Relop, Testop, Unop, Convert, Unreachable, Nop, Drop, Select, Block, Loop, Ite, Br, BrIf,
    BrTable, Return, GetLocal, SetLocal, TeeLocal, GetGlobal, SetGlobal, Qualify, CodeRefI, Inst, CallIndirect,
    Call, RecFold, RecUnfold, MemPack, MemUnpack, Group, Ungroup, CapSplit, CapJoin, RefDemote, RefSplit, RefJoin,
    StructMalloc, StructFree, StructGet, StructSet, StructSwap, VariantMalloc, VariantCase, ArrayMalloc, ArrayGet,
    ArraySet, ArrayFree, ExistPack, ExistUnpack, Trap, CallClosure, Label, LocalFrame, Malloc, Free, Breaking,
    Returning]


# Modules

@dataclass(frozen=True)
class Func:
    type: FunType
    locals: Tuple[Size, ...]
    body: Tuple[Instr, ...]
    exports: Tuple[str, ...] = ()


@dataclass(frozen=True)
class FuncImport:
    module: str
    name: str
    type: FunType
    exports: Tuple[str, ...] = ()


@dataclass(frozen=True)
class Global:
    mutable: bool
    pre: PreType
    init: Tuple[Instr, ...]
    exports: Tuple[str, ...] = ()


@dataclass(frozen=True)
class GlobalImport:
    module: str
    name: str
    mutable: bool
    pre: PreType
    exports: Tuple[str, ...] = ()


@dataclass(frozen=True)
class Table:
    entries: Tuple[int, ...] = ()
    exports: Tuple[str, ...] = ()


@dataclass(frozen=True)
class RWModule:
    funcs: Tuple[Union[Func, FuncImport], ...] = ()
    globals: Tuple[Union[Global, GlobalImport], ...] = ()
    table: Table = field(default_factory=Table)


def unr(pre: PreType) -> Type:
    return Type(pre, UNR)


def lin(pre: PreType) -> Type:
    return Type(pre, LIN)


I32 = NumT(NumKind.I32)
I64 = NumT(NumKind.I64)
UNIT = UnitT()
