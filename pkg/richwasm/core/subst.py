"""Capture-avoiding substitution over de Bruijn indices.

Every traversal tracks, per binder kind, how many binders of that kind it has crossed (the depth). A variable of
kind k with index i at depth d is bound inside the traversed node when i < d and free otherwise, in which case it
refers to the enclosing context as index i - d.
"""
from dataclasses import fields, is_dataclass, replace
from functools import lru_cache
from typing import Callable, Dict, Sequence, Set

from richwasm.core.ir import (Kind, LocVar, SizeVar, QualVar, VarT, FunType, Quantifier, Index, LocI, SizeI, QualI,
                              PreTypeI, LocQ, SizeQ, QualQ, TypeQ, LocConst, Loc, Size, Qual, PreType)
from richwasm.util.utils import IllScopedError, SubstitutionKindError

_VAR_KINDS = {LocVar: Kind.LOC, SizeVar: Kind.SIZE, QualVar: Kind.QUAL, VarT: Kind.TYPE}
_ZERO = {k: 0 for k in Kind}
_PAYLOADS = {Kind.LOC: Loc.__args__, Kind.SIZE: Size.__args__, Kind.QUAL: Qual.__args__, Kind.TYPE: PreType.__args__}


@lru_cache(maxsize=None)
def _layout(cls):
    binds = dict(getattr(cls, 'binds', ()))
    return tuple((f.name, binds.get(f.name)) for f in fields(cls))


def map_vars(node, fn: Callable, depth: Dict[Kind, int] = None):
    """Rebuilds ``node`` with every variable ``v`` replaced by ``fn(v, d)``, where ``d`` is the depth of ``v``'s kind.

    Parameters
    ----------
    node:
        Any IR node, tuple of nodes, or leaf (int, str, enum, None).

    fn: Callable
        Receives the variable node and the number of binders of its kind crossed so far.

    depth: Dict[Kind, int], default = None
        Starting depths; all zero when omitted.

    Returns
    -------
    node:
        The rebuilt node; unchanged subtrees are shared.
    """
    return _walk(node, fn, dict(_ZERO) if depth is None else dict(depth))


def _walk(node, fn, depth):
    cls = type(node)
    kind = _VAR_KINDS.get(cls)
    if kind is not None:
        return fn(node, depth[kind])
    if cls is tuple:
        new = tuple(_walk(x, fn, depth) for x in node)
        return node if all(a is b for a, b in zip(new, node)) else new
    if cls is FunType:
        d = dict(depth)
        quants = []
        for q in node.quants:
            quants.append(_walk(q, fn, d))
            d[q.kind] += 1
        ins = _walk(node.ins, fn, d)
        outs = _walk(node.outs, fn, d)
        if ins is node.ins and outs is node.outs and all(a is b for a, b in zip(quants, node.quants)):
            return node
        return FunType(tuple(quants), ins, outs)
    if not is_dataclass(node) or cls is LocConst:
        return node
    changes = {}
    for name, bound in _layout(cls):
        value = getattr(node, name)
        if bound is None:
            new = _walk(value, fn, depth)
        else:
            inner = dict(depth)
            inner[bound] += 1
            new = _walk(value, fn, inner)
        if new is not value:
            changes[name] = new
    return replace(node, **changes) if changes else node


def _make_var(kind: Kind, index: int):
    return {Kind.LOC: LocVar, Kind.SIZE: SizeVar, Kind.QUAL: QualVar, Kind.TYPE: VarT}[kind](index)


def shift(node, kind: Kind, amount: int = 1, cutoff: int = 0):
    """Adds ``amount`` to every free variable of ``kind`` whose index is at least ``cutoff``."""
    if amount == 0:
        return node

    def fn(v, d):
        if _VAR_KINDS[type(v)] is kind and v.index >= d + cutoff:
            return _make_var(kind, v.index + amount)
        return v

    return map_vars(node, fn)


def shift_all(node, counts: Dict[Kind, int]):
    for kind, amount in counts.items():
        node = shift(node, kind, amount)
    return node


def unshift(node, kind: Kind):
    """Removes the innermost free binder of ``kind``; raises IllScopedError if it is still referenced."""

    def fn(v, d):
        if _VAR_KINDS[type(v)] is not kind or v.index < d:
            return v
        if v.index == d:
            raise IllScopedError(f'{kind.value} variable escapes its scope')
        return _make_var(kind, v.index - 1)

    return map_vars(node, fn)


def substitute(node, kind: Kind, replacement):
    """Replaces free variable 0 of ``kind`` by ``replacement`` and lowers the remaining free indices of that kind.

    ``replacement`` lives in the context without the removed binder.

    Raises
    ------
    SubstitutionKindError
        If ``replacement`` is not a location, size, qualifier or pretype as ``kind`` demands.
    """
    if not isinstance(replacement, _PAYLOADS[kind]):
        raise SubstitutionKindError(f'a {type(replacement).__name__} cannot replace a {kind.value} variable')
    return _SubstWalker(kind, replacement).walk(node, dict(_ZERO))


class _SubstWalker:
    def __init__(self, kind: Kind, replacement):
        self.kind = kind
        self.replacement = replacement
        self.cache = {}

    def at_depth(self, depth: Dict[Kind, int]):
        key = tuple(depth[k] for k in Kind)
        if key not in self.cache:
            self.cache[key] = shift_all(self.replacement, depth)
        return self.cache[key]

    def walk(self, node, depth):
        cls = type(node)
        kind = _VAR_KINDS.get(cls)
        if kind is not None:
            d = depth[kind]
            if kind is not self.kind or node.index < d:
                return node
            if node.index == d:
                return self.at_depth(depth)
            return _make_var(kind, node.index - 1)
        if cls is tuple:
            new = tuple(self.walk(x, depth) for x in node)
            return node if all(a is b for a, b in zip(new, node)) else new
        if cls is FunType:
            d = dict(depth)
            quants = []
            for q in node.quants:
                quants.append(self.walk(q, d))
                d = dict(d)
                d[q.kind] += 1
            return FunType(tuple(quants), self.walk(node.ins, d), self.walk(node.outs, d))
        if not is_dataclass(node) or cls is LocConst:
            return node
        changes = {}
        for name, bound in _layout(cls):
            value = getattr(node, name)
            if bound is None:
                new = self.walk(value, depth)
            else:
                inner = dict(depth)
                inner[bound] += 1
                new = self.walk(value, inner)
            if new is not value:
                changes[name] = new
        return replace(node, **changes) if changes else node


def index_payload(index: Index):
    if isinstance(index, LocI):
        return index.loc
    if isinstance(index, SizeI):
        return index.size
    if isinstance(index, QualI):
        return index.qual
    return index.pre


def instantiate(node, quants: Sequence[Quantifier], indices: Sequence[Index]):
    """Simultaneously replaces the variables bound by ``quants`` in ``node`` by ``indices``.

    ``node`` lives under all of ``quants`` (the first quantifier is the outermost); the indices live in the context
    outside the quantifiers.

    Raises
    ------
    SubstitutionKindError
        If an index's kind differs from its quantifier's kind, or the counts differ.
    """
    if len(quants) != len(indices):
        raise SubstitutionKindError(f'expected {len(quants)} indices, got {len(indices)}')
    for q, z in zip(quants, indices):
        if q.kind is not z.kind:
            raise SubstitutionKindError(f'{z.kind.value} index supplied for a {q.kind.value} quantifier')
    for j in reversed(range(len(quants))):
        counts = {k: 0 for k in Kind}
        for q in quants[:j]:
            counts[q.kind] += 1
        node = substitute(node, quants[j].kind, shift_all(index_payload(indices[j]), counts))
    return node


def instantiate_funtype(ft: FunType, indices: Sequence[Index]) -> FunType:
    """Instantiates the leading quantifiers of a function type with ``indices``; the rest stay quantified."""
    if len(indices) > len(ft.quants):
        raise SubstitutionKindError(f'expected at most {len(ft.quants)} indices, got {len(indices)}')
    for z in indices:
        q = ft.quants[0]
        if q.kind is not z.kind:
            raise SubstitutionKindError(f'{z.kind.value} index supplied for a {q.kind.value} quantifier')
        ft = substitute(FunType(ft.quants[1:], ft.ins, ft.outs), q.kind, index_payload(z))
    return ft


def abstract_loc(node, loc):
    """Turns every occurrence of ``loc`` in ``node`` into location variable 0 of a new innermost binder."""
    target = shift(loc, Kind.LOC) if isinstance(loc, LocVar) else loc
    shifted = shift(node, Kind.LOC)

    def fn(v, d):
        if isinstance(v, LocVar) and isinstance(target, LocVar) and v.index == target.index + d:
            return LocVar(d)
        return v

    if isinstance(loc, LocConst):
        return _ConstLocAbstractor(loc).walk(shifted, 0)
    return map_vars(shifted, fn)


class _ConstLocAbstractor:
    def __init__(self, loc: LocConst):
        self.loc = loc

    def walk(self, node, depth):
        cls = type(node)
        if cls is LocConst:
            return LocVar(depth) if node == self.loc else node
        if cls is tuple:
            return tuple(self.walk(x, depth) for x in node)
        if cls is FunType:
            d = depth
            quants = []
            for q in node.quants:
                quants.append(self.walk(q, d))
                d += isinstance(q, LocQ)
            return FunType(tuple(quants), self.walk(node.ins, d), self.walk(node.outs, d))
        if not is_dataclass(node) or cls in _VAR_KINDS:
            return node
        changes = {}
        for name, bound in _layout(cls):
            value = getattr(node, name)
            new = self.walk(value, depth + (bound is Kind.LOC))
            if new is not value:
                changes[name] = new
        return replace(node, **changes) if changes else node


def free_vars(node) -> Dict[Kind, Set[int]]:
    """Indices of the free variables of each kind, relative to the context of ``node``."""
    found = {k: set() for k in Kind}

    def fn(v, d):
        if v.index >= d:
            found[_VAR_KINDS[type(v)]].add(v.index - d)
        return v

    map_vars(node, fn)
    return found


def quantifier_kind(q: Quantifier) -> Kind:
    assert isinstance(q, (LocQ, SizeQ, QualQ, TypeQ)), f'Not a quantifier: {q}.'
    return q.kind


def index_of_kind(kind: Kind, payload) -> Index:
    return {Kind.LOC: LocI, Kind.SIZE: SizeI, Kind.QUAL: QualI, Kind.TYPE: PreTypeI}[kind](payload)
