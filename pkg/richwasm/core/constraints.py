"""Constraint solving for qualifiers and sizes, and the structural judgements built on them."""
from collections import Counter
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from richwasm.core.env import FunctionEnv, QualBound, SizeBound, TypeBound
from richwasm.core.ir import (Kind, Qual, QualConst, QualVar, UNR, LIN, Size, SizeConst, SizeVar, SizePlus,
                              Type, UnitT, NumT, ProdT, RefT, PtrT, CapT, OwnT, RecT, ExLocT, CodeRefT,
                              VarT, HeapType, VariantHT, StructHT, ArrayHT, ExHT, FunType, LocQ, SizeQ, QualQ,
                              TypeQ)
from richwasm.core.subst import free_vars
from richwasm.util.utils import CheckError, IllScopedError, error


# Qualifiers

def qual_leq(ctx: Sequence[QualBound], a: Qual, b: Qual) -> bool:
    """Decides ``a <= b`` under the bounds of the qualifier variables in scope.

    Unr is the least and Lin the greatest qualifier; the remaining facts come from the declared bounds, and the
    answer is reachability from ``a`` to ``b`` in the graph they form.

    Parameters
    ----------
    ctx: Sequence[QualBound]
        Bounds of qualifier variables, innermost first.

    a: Qual
        Left-hand qualifier.

    b: Qual
        Right-hand qualifier.

    Returns
    -------
    leq: bool
        Whether ``a <= b`` follows from the bounds.
    """
    for q in (a, b):
        if isinstance(q, QualVar) and not 0 <= q.index < len(ctx):
            raise IllScopedError(f'qualifier variable {q.index} is not in scope')
    if a == b or a is UNR or b is LIN:
        return True
    if isinstance(a, QualConst) and isinstance(b, QualConst):
        return False

    def node(q):
        return {UNR: 0, LIN: 1}[q] if isinstance(q, QualConst) else 2 + q.index

    rows, cols = [0], [1]
    for i, bound in enumerate(ctx):
        for lower in bound.lower:
            rows.append(node(lower))
            cols.append(2 + i)
        for upper in bound.upper:
            rows.append(2 + i)
            cols.append(node(upper))
    n = 2 + len(ctx)
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    reached = breadth_first_order(graph, node(a), directed=True, return_predecessors=False)
    return node(b) in set(reached.tolist())


def qual_join(ctx: Sequence[QualBound], quals: Sequence[Qual]) -> QualConst:
    """Concrete join used by the linear stack: anything not provably Unr counts as Lin."""
    return UNR if all(qual_leq(ctx, q, UNR) for q in quals) else LIN


# Sizes

def normalize_size(size: Size) -> Tuple[Counter, int]:
    """Flattens a size expression into a multiset of variables plus a constant."""
    if isinstance(size, SizeConst):
        return Counter(), size.bits
    if isinstance(size, SizeVar):
        return Counter({size.index: 1}), 0
    left_vars, left_const = normalize_size(size.left)
    right_vars, right_const = normalize_size(size.right)
    return left_vars + right_vars, left_const + right_const


def size_add(a: Size, b: Size) -> Size:
    if isinstance(a, SizeConst) and isinstance(b, SizeConst):
        return SizeConst(a.bits + b.bits)
    if a == SizeConst(0):
        return b
    if b == SizeConst(0):
        return a
    return SizePlus(a, b)


def size_const(size: Size) -> Optional[int]:
    """Bit count of a closed size, None if the size mentions variables."""
    variables, const = normalize_size(size)
    return None if variables else const


def size_leq(ctx: Sequence[SizeBound], a: Size, b: Size) -> bool:
    """Decides ``a <= b``, rewriting variables by their declared upper (left side) and lower (right side) bounds.

    Parameters
    ----------
    ctx: Sequence[SizeBound]
        Bounds of size variables, innermost first.

    a: Size
        Left-hand size.

    b: Size
        Right-hand size.

    Returns
    -------
    leq: bool
        Whether ``a <= b`` follows from the bounds.
    """
    for side in (a, b):
        for index in normalize_size(side)[0]:
            if not 0 <= index < len(ctx):
                raise IllScopedError(f'size variable {index} is not in scope')
    return _size_leq(ctx, normalize_size(a), normalize_size(b), fuel=2 * len(ctx) + 2)


def _size_leq(ctx, a, b, fuel) -> bool:
    a_vars, a_const = a
    b_vars, b_const = b
    common = a_vars & b_vars
    a_vars, b_vars = a_vars - common, b_vars - common
    if not a_vars and a_const <= b_const:
        return True
    if fuel == 0:
        return False
    for index in a_vars:
        for upper in ctx[index].upper:
            up_vars, up_const = normalize_size(upper)
            rest = a_vars - Counter({index: 1})
            if _size_leq(ctx, (rest + up_vars, a_const + up_const), (b_vars, b_const), fuel - 1):
                return True
    for index in b_vars:
        for lower in ctx[index].lower:
            low_vars, low_const = normalize_size(lower)
            rest = b_vars - Counter({index: 1})
            if _size_leq(ctx, (a_vars, a_const), (rest + low_vars, b_const + low_const), fuel - 1):
                return True
    return False


def size_of(type_env: Sequence[TypeBound], t) -> Size:
    """Size in bits of a type or pretype, using the size bounds of type variables."""
    pre = t.pre if isinstance(t, Type) else t
    if isinstance(pre, UnitT):
        return SizeConst(0)
    if isinstance(pre, NumT):
        return SizeConst(pre.num.bits)
    if isinstance(pre, ProdT):
        total = SizeConst(0)
        for component in pre.types:
            total = size_add(total, size_of(type_env, component))
        return total
    if isinstance(pre, (RefT, PtrT, CodeRefT)):
        return SizeConst(32)
    if isinstance(pre, (CapT, OwnT)):
        return SizeConst(0)
    if isinstance(pre, ExLocT):
        return size_of(type_env, pre.body)
    if isinstance(pre, RecT):
        return size_of((TypeBound(pre.qual, None),) + tuple(type_env), pre.body)
    assert isinstance(pre, VarT), f'Not a pretype: {pre}.'
    if not 0 <= pre.index < len(type_env):
        raise IllScopedError(f'type variable {pre.index} is not in scope')
    if type_env[pre.index].size is None:
        raise CheckError([error('TYP003', 'recursive type variable used without indirection has no size')])
    return type_env[pre.index].size


def no_caps(type_env: Sequence[TypeBound], t) -> bool:
    """True when a value of ``t`` can never carry a capability or ownership token and may therefore live in the heap."""
    pre = t.pre if isinstance(t, Type) else t
    if isinstance(pre, (CapT, OwnT)):
        return False
    if isinstance(pre, ProdT):
        return all(no_caps(type_env, component) for component in pre.types)
    if isinstance(pre, ExLocT):
        return no_caps(type_env, pre.body)
    if isinstance(pre, RecT):
        return no_caps((TypeBound(pre.qual, None),) + tuple(type_env), pre.body)
    if isinstance(pre, VarT):
        if not 0 <= pre.index < len(type_env):
            raise IllScopedError(f'type variable {pre.index} is not in scope')
        return not type_env[pre.index].caps
    return True


# Validity

def check_scope(F: FunctionEnv, node) -> None:
    found = free_vars(node)
    limits = {Kind.LOC: F.locations, Kind.SIZE: len(F.sizes), Kind.QUAL: len(F.quals), Kind.TYPE: len(F.types)}
    for kind, indices in found.items():
        if indices and max(indices) >= limits[kind]:
            raise CheckError([error('TYP006', f'{kind.value} variable {max(indices)} is not in scope')])


def check_type_valid(F: FunctionEnv, t: Type) -> None:
    """Raises CheckError unless ``t`` is well formed in ``F``."""
    check_scope(F, t)
    _check_type(F, t)


def type_valid(F: FunctionEnv, t: Type) -> bool:
    try:
        check_type_valid(F, t)
    except (CheckError, IllScopedError):
        return False
    return True


def _require(ok: bool, code: str, message: str) -> None:
    if not ok:
        raise CheckError([error(code, message)])


def _check_type(F: FunctionEnv, t: Type) -> None:
    pre, q = t.pre, t.qual
    if isinstance(pre, ProdT):
        for component in pre.types:
            _require(qual_leq(F.quals, component.qual, q), 'TYP002',
                     'component of a product is more restrictive than the product')
            _check_type(F, component)
    elif isinstance(pre, VarT):
        _require(qual_leq(F.quals, F.types[pre.index].qual, q), 'TYP002',
                 f'type variable {pre.index} used below its qualifier bound')
    elif isinstance(pre, (RefT, CapT)):
        check_heap_type(F, pre.heap)
    elif isinstance(pre, ExLocT):
        _require(qual_leq(F.quals, pre.body.qual, q), 'TYP002',
                 'existential package is less restrictive than its contents')
        _check_type(F.push(LocQ()), pre.body)
    elif isinstance(pre, RecT):
        _require(qual_leq(F.quals, pre.body.qual, q), 'TYP002',
                 'recursive type is less restrictive than its body')
        inner = F.push_rec(pre.qual)
        size_of(inner.types, pre.body)
        _check_type(inner, pre.body)
    elif isinstance(pre, CodeRefT):
        check_fun_type(F, pre.fun)


def check_heap_type(F: FunctionEnv, heap: HeapType) -> None:
    if isinstance(heap, VariantHT):
        for case in heap.cases:
            _check_type(F, case)
    elif isinstance(heap, StructHT):
        for field_type, slot in heap.fields:
            _check_type(F, field_type)
            _require(size_leq(F.sizes, size_of(F.types, field_type), slot), 'TYP003',
                     'struct field does not fit its declared size')
    elif isinstance(heap, ArrayHT):
        _check_type(F, heap.elem)
    else:
        assert isinstance(heap, ExHT), f'Not a heap type: {heap}.'
        inner = F.push(TypeQ(heap.qual, heap.size))
        _check_type(inner, heap.body)


def check_fun_type(F: FunctionEnv, ft: FunType) -> None:
    env = F
    for quant in ft.quants:
        if isinstance(quant, TypeQ):
            check_scope(env, (quant.qual, quant.size))
        elif isinstance(quant, (SizeQ, QualQ)):
            check_scope(env, (quant.lower, quant.upper))
        env = env.push(quant)
    for t in ft.ins + ft.outs:
        _check_type(env, t)
