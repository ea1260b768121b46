"""Local-slot bookkeeping shared by the ML and L³ code generators.

A ``FunctionBuilder`` mirrors the checker's view of a function's locals: it knows the current type of every slot,
so ``get_local`` can carry the right qualifier, linear reads can mark their slot as moved out, and every block can
be annotated with the exact local effect its body has.
"""
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple

from richwasm.core.constraints import size_of
from richwasm.core.env import TypeBound
from richwasm.core.ir import Kind, Type, UnitT, UnitV, GetLocal, SetLocal, Drop, UNR
from richwasm.core.typecheck import UNIT_UNR
from richwasm.core.subst import shift, unshift
from richwasm.util.utils import FrontendError, IllScopedError, error


class FunctionBuilder:
    """Slots of one function under construction

    Parameters
    ----------
    params: Sequence[Type]
        Parameter types; they occupy the first slots.

    type_env: Sequence[TypeBound], default = ()
        Bounds of the function's type variables, innermost first.
    """
    def __init__(self, params: Sequence[Type], type_env: Sequence[TypeBound] = ()):
        self.slots: List[Type] = list(params)
        self.sizes = []
        self.type_env: Tuple[TypeBound, ...] = tuple(type_env)

    def fresh(self, t: Type) -> int:
        """A new declared local big enough for ``t``; it starts out holding unit."""
        self.sizes.append(size_of(self.type_env, t))
        self.slots.append(UNIT_UNR)
        return len(self.slots) - 1

    def get(self, index: int) -> Tuple[GetLocal, Type]:
        t = self.slots[index]
        if t.qual != UNR:
            self.slots[index] = Type(UnitT(), t.qual)
        return GetLocal(index, t.qual), t

    def set(self, index: int, t: Type) -> SetLocal:
        self.slots[index] = t
        return SetLocal(index)

    def reset(self, index: int) -> list:
        self.slots[index] = UNIT_UNR
        return [UnitV(), SetLocal(index)]

    def drop_under(self, top: Type) -> list:
        """Drops the value just below a ``top`` value."""
        tmp = self.fresh(top)
        code = [self.set(tmp, top), Drop()]
        instr, _ = self.get(tmp)
        return code + [instr] + self.reset(tmp)

    # local effects

    def snapshot(self) -> Tuple[Type, ...]:
        return tuple(self.slots)

    def restore(self, state: Sequence[Type]) -> None:
        self.slots = [state[i] if i < len(state) else UNIT_UNR for i in range(len(self.slots))]

    def effect(self, before: Sequence[Type]) -> Tuple[Tuple[int, Type], ...]:
        changed = []
        for i, t in enumerate(self.slots):
            old = before[i] if i < len(before) else UNIT_UNR
            if t != old:
                changed.append((i, t))
        return tuple(changed)

    def arms(self, bodies: Sequence[Callable[[], Tuple[list, bool]]]):
        """Emits alternative bodies from the same starting slots.

        Each callable returns ``(code, diverges)``. The slots afterwards are those left by the first body that does
        not diverge; returns the codes and the resulting local effect.
        """
        before = self.snapshot()
        codes, end = [], None
        for body in bodies:
            self.restore(before)
            code, diverges = body()
            codes.append(code)
            if end is None and not diverges:
                end = self.snapshot()
        self.restore(end if end is not None else before)
        return codes, self.effect(before)

    @contextmanager
    def binder(self, kind: Kind, bound: Optional[TypeBound] = None):
        """Shifts the slot types while emitting the body of a binding instruction."""
        self.slots = [shift(t, kind) for t in self.slots]
        if kind is Kind.TYPE:
            self.type_env = (bound,) + self.type_env
        try:
            yield
        finally:
            if kind is Kind.TYPE:
                self.type_env = self.type_env[1:]
            try:
                self.slots = [unshift(t, kind) for t in self.slots]
            except IllScopedError as exc:
                raise FrontendError([error('TYP006', f'generated code leaves a bound {kind.value} in a local: {exc}')])
