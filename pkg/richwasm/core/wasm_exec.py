"""Executes ``WasmModule`` values directly, without an external engine.

Integers are held as Python ints in their signed range, floats as Python floats rounded through numpy; the linear
memory is a ``numpy.uint8`` buffer. Structured control is run recursively: executing a body yields ``None`` when it
falls through, a non-negative branch depth, or ``_RETURN``.
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from richwasm.core.ir import NumKind
from richwasm.core.numerics import NumericTrap, binop, convert, pattern, relop, round_float, unop, wrap
from richwasm.core.wasm import PAGE, WasmModule

logger = logging.getLogger(__name__)

DEFAULT_WASM_FUEL = 50_000_000
MAX_CALL_DEPTH = 400

I32, I64, UI32, UI64, F32, F64 = NumKind.I32, NumKind.I64, NumKind.UI32, NumKind.UI64, NumKind.F32, NumKind.F64
_INT = {'i32': (I32, UI32), 'i64': (I64, UI64)}
_FLOAT = {'f32': F32, 'f64': F64}

_RETURN = -1


class WasmTrap(RuntimeError):
    pass


class WasmFuelExhausted(WasmTrap):
    pass


def _u(kind: NumKind, v: int) -> int:
    return pattern(v, kind.bits)


def _int_binary(signed: NumKind, unsigned: NumKind, name: str) -> Callable:
    op, _, sign = name.partition('_')
    if op in ('add', 'sub', 'mul', 'and', 'or', 'xor', 'shl'):
        return lambda a, b: binop(signed, op, a, b)
    if sign == 's':
        return lambda a, b: binop(signed, op, a, b)
    return lambda a, b: wrap(binop(unsigned, op, _u(unsigned, a), _u(unsigned, b)), signed)


def _int_compare(signed: NumKind, unsigned: NumKind, name: str) -> Callable:
    op, _, sign = name.partition('_')
    if sign == 'u':
        return lambda a, b: relop(unsigned, op, _u(unsigned, a), _u(unsigned, b))
    return lambda a, b: relop(signed, op, a, b)


def _reinterpret(value, src: str, dst: str):
    return np.array([value], dtype=src).view(dst)[0].item()


def _build_tables():
    binary, unary = {}, {}
    for prefix, (signed, unsigned) in _INT.items():
        for name in ('add', 'sub', 'mul', 'div_s', 'div_u', 'rem_s', 'rem_u', 'and', 'or', 'xor', 'shl', 'shr_s',
                     'shr_u'):
            if name.startswith('shr'):
                if name == 'shr_s':
                    binary[f'{prefix}.{name}'] = (lambda s: lambda a, b: binop(s, 'shr', a, b))(signed)
                else:
                    binary[f'{prefix}.{name}'] = (lambda s, u: lambda a, b: wrap(
                        binop(u, 'shr', _u(u, a), _u(u, b)), s))(signed, unsigned)
                continue
            binary[f'{prefix}.{name}'] = _int_binary(signed, unsigned, name)
        for name in ('eq', 'ne', 'lt_s', 'lt_u', 'gt_s', 'gt_u', 'le_s', 'le_u', 'ge_s', 'ge_u'):
            binary[f'{prefix}.{name}'] = _int_compare(signed, unsigned, name)
        for name in ('clz', 'ctz', 'popcnt'):
            unary[f'{prefix}.{name}'] = (lambda s, n: lambda a: unop(s, n, a))(signed, name)
        unary[f'{prefix}.eqz'] = lambda a: int(a == 0)
    for prefix, kind in _FLOAT.items():
        for name in ('add', 'sub', 'mul', 'div', 'min', 'max'):
            binary[f'{prefix}.{name}'] = (lambda k, n: lambda a, b: binop(k, n, a, b))(kind, name)
        for name in ('eq', 'ne', 'lt', 'gt', 'le', 'ge'):
            binary[f'{prefix}.{name}'] = (lambda k, n: lambda a, b: relop(k, n, a, b))(kind, name)
        for name in ('neg', 'abs', 'sqrt'):
            unary[f'{prefix}.{name}'] = (lambda k, n: lambda a: unop(k, n, a))(kind, name)
    unary.update({
        'i32.wrap_i64': lambda a: wrap(a, I32),
        'i64.extend_i32_s': lambda a: a,
        'i64.extend_i32_u': lambda a: _u(UI32, a),
        'i32.trunc_f32_s': lambda a: convert(F32, I32, a),
        'i32.trunc_f64_s': lambda a: convert(F64, I32, a),
        'i32.trunc_f32_u': lambda a: wrap(convert(F32, UI32, a), I32),
        'i32.trunc_f64_u': lambda a: wrap(convert(F64, UI32, a), I32),
        'i64.trunc_f32_s': lambda a: convert(F32, I64, a),
        'i64.trunc_f64_s': lambda a: convert(F64, I64, a),
        'i64.trunc_f32_u': lambda a: wrap(convert(F32, UI64, a), I64),
        'i64.trunc_f64_u': lambda a: wrap(convert(F64, UI64, a), I64),
        'f32.convert_i32_s': lambda a: convert(I32, F32, a),
        'f32.convert_i32_u': lambda a: convert(UI32, F32, _u(UI32, a)),
        'f32.convert_i64_s': lambda a: convert(I64, F32, a),
        'f32.convert_i64_u': lambda a: convert(UI64, F32, _u(UI64, a)),
        'f64.convert_i32_s': lambda a: convert(I32, F64, a),
        'f64.convert_i32_u': lambda a: convert(UI32, F64, _u(UI32, a)),
        'f64.convert_i64_s': lambda a: convert(I64, F64, a),
        'f64.convert_i64_u': lambda a: convert(UI64, F64, _u(UI64, a)),
        'f32.demote_f64': lambda a: round_float(a, F32),
        'f64.promote_f32': lambda a: a,
        'i32.reinterpret_f32': lambda a: _reinterpret(a, '<f4', '<i4'),
        'i64.reinterpret_f64': lambda a: _reinterpret(a, '<f8', '<i8'),
        'f32.reinterpret_i32': lambda a: _reinterpret(a, '<i4', '<f4'),
        'f64.reinterpret_i64': lambda a: _reinterpret(a, '<i8', '<f8'),
    })
    return binary, unary


_BINARY, _UNARY = _build_tables()

_MEMORY = {'i32': ('<i4', 4), 'i64': ('<i8', 8), 'f32': ('<f4', 4), 'f64': ('<f8', 8)}

_CONST = {'i32.const': lambda v: wrap(int(v), I32),
          'i64.const': lambda v: wrap(int(v), I64),
          'f32.const': lambda v: round_float(float(v), F32),
          'f64.const': lambda v: float(v)}

_DEFAULTS = {'i32': 0, 'i64': 0, 'f32': 0.0, 'f64': 0.0}


class WasmInstance:
    """An instantiated module.

    Parameters
    ----------
    module: WasmModule
        Module to instantiate; its start function runs immediately.

    imports: Dict, default = None
        Maps ``(module, name)`` to a Python callable taking and returning sequences of Wasm values.

    fuel: int, default = DEFAULT_WASM_FUEL
        Instruction budget shared by every call on this instance.
    """

    def __init__(self,
                 module: WasmModule,
                 imports: Optional[Dict[Tuple[str, str], Callable]] = None,
                 fuel: int = DEFAULT_WASM_FUEL):
        assert fuel > 0, f'Fuel must be positive.'
        self.module = module
        self.fuel = fuel
        self.depth = 0
        imports = imports or {}
        self.host = []
        for imp in module.imports:
            if (imp.module, imp.name) not in imports:
                raise WasmTrap(f'unresolved import {imp.module}.{imp.name}')
            self.host.append(imports[(imp.module, imp.name)])
        pages = module.memory[0] if module.memory is not None else 0
        self.max_pages = module.memory[1] if module.memory is not None else 0
        self.memory = np.zeros(pages * PAGE, dtype=np.uint8)
        self.globals: List = [_CONST[f'{g.valtype}.const'](g.init) for g in module.globals]
        for offset, payload in module.data:
            if offset + len(payload) > len(self.memory):
                raise WasmTrap('data segment does not fit in memory')
            self.memory[offset:offset + len(payload)] = np.frombuffer(payload, dtype=np.uint8)
        if module.start is not None:
            self.call(module.start, ())

    # memory

    def load(self, valtype: str, address: int):
        dtype, width = _MEMORY[valtype]
        if address < 0 or address + width > len(self.memory):
            raise WasmTrap(f'out of bounds memory access at {address}')
        return np.frombuffer(self.memory, dtype=dtype, count=1, offset=address)[0].item()

    def store(self, valtype: str, address: int, value) -> None:
        dtype, width = _MEMORY[valtype]
        if address < 0 or address + width > len(self.memory):
            raise WasmTrap(f'out of bounds memory access at {address}')
        self.memory[address:address + width] = np.array([value], dtype=dtype).view(np.uint8)

    def grow(self, pages: int) -> int:
        old = len(self.memory) // PAGE
        if pages < 0 or old + pages > self.max_pages:
            return -1
        self.memory = np.concatenate([self.memory, np.zeros(pages * PAGE, dtype=np.uint8)])
        return old

    # calls

    def invoke(self, name: str, args: Sequence = ()) -> Tuple:
        for export, kind, index in self.module.exports():
            if export == name and kind == 'func':
                return self.call(index, args)
        raise KeyError(f'no exported function {name}')

    def call(self, index: int, args: Sequence) -> Tuple:
        params, results = self.module.signature(index)
        if len(args) != len(params):
            raise WasmTrap(f'function {index} takes {len(params)} arguments, got {len(args)}')
        args = [_CONST[f'{t}.const'](a) for t, a in zip(params, args)]
        if index < len(self.module.imports):
            return tuple(self.host[index](*args))
        f = self.module.funcs[index - len(self.module.imports)]
        if self.depth >= MAX_CALL_DEPTH:
            raise WasmTrap('call stack exhausted')
        self.depth += 1
        try:
            locals_ = list(args) + [_DEFAULTS[t] for t in f.locals]
            stack: List = []
            self.exec(f.body, locals_, stack)
        finally:
            self.depth -= 1
        if len(stack) < len(results):
            raise WasmTrap(f'function {index} returned too few values')
        return tuple(stack[len(stack) - len(results):])

    def exec(self, body, locals_: List, stack: List) -> Optional[int]:
        for instr in body:
            self.fuel -= 1
            if self.fuel < 0:
                raise WasmFuelExhausted('out of fuel')
            op = instr[0]
            fn = _BINARY.get(op)
            if fn is not None:
                b = stack.pop()
                a = stack.pop()
                try:
                    stack.append(fn(a, b))
                except NumericTrap as exc:
                    raise WasmTrap(str(exc))
                continue
            fn = _UNARY.get(op)
            if fn is not None:
                try:
                    stack.append(fn(stack.pop()))
                except NumericTrap as exc:
                    raise WasmTrap(str(exc))
                continue
            if op == 'local.get':
                stack.append(locals_[instr[1]])
            elif op == 'local.set':
                locals_[instr[1]] = stack.pop()
            elif op == 'local.tee':
                locals_[instr[1]] = stack[-1]
            elif op in _CONST:
                stack.append(_CONST[op](instr[1]))
            elif op == 'global.get':
                stack.append(self.globals[instr[1]])
            elif op == 'global.set':
                self.globals[instr[1]] = stack.pop()
            elif op.endswith('.load'):
                address = _u(UI32, stack.pop()) + (instr[1] if len(instr) > 1 else 0)
                stack.append(self.load(op.split('.')[0], address))
            elif op.endswith('.store'):
                value = stack.pop()
                address = _u(UI32, stack.pop()) + (instr[1] if len(instr) > 1 else 0)
                self.store(op.split('.')[0], address, value)
            elif op in ('block', 'loop', 'if'):
                if op == 'if':
                    inner = instr[1] if stack.pop() != 0 else instr[2]
                else:
                    inner = instr[1]
                height = len(stack)
                while True:
                    signal = self.exec(inner, locals_, stack)
                    if signal == _RETURN:
                        return _RETURN
                    if signal is None:
                        break
                    del stack[height:]
                    if signal > 0:
                        return signal - 1
                    if op != 'loop':
                        break
            elif op == 'br':
                return instr[1]
            elif op == 'br_if':
                if stack.pop() != 0:
                    return instr[1]
            elif op == 'br_table':
                i = _u(UI32, stack.pop())
                return instr[1][i] if i < len(instr[1]) else instr[2]
            elif op == 'return':
                return _RETURN
            elif op == 'call':
                self.call_with_stack(instr[1], stack)
            elif op == 'call_indirect':
                i = _u(UI32, stack.pop())
                if i >= len(self.module.table):
                    raise WasmTrap(f'undefined table element {i}')
                index = self.module.table[i]
                sig = (tuple(instr[1][0]), tuple(instr[1][1]))
                if self.module.signature(index) != sig:
                    raise WasmTrap('indirect call signature mismatch')
                self.call_with_stack(index, stack)
            elif op == 'drop':
                stack.pop()
            elif op == 'select':
                c = stack.pop()
                b = stack.pop()
                a = stack.pop()
                stack.append(a if c != 0 else b)
            elif op == 'unreachable':
                raise WasmTrap('unreachable')
            elif op == 'nop':
                pass
            elif op == 'memory.size':
                stack.append(len(self.memory) // PAGE)
            elif op == 'memory.grow':
                stack.append(self.grow(stack.pop()))
            else:
                raise WasmTrap(f'unsupported instruction {op}')
        return None

    def call_with_stack(self, index: int, stack: List) -> None:
        params, _ = self.module.signature(index)
        args = stack[len(stack) - len(params):] if params else []
        del stack[len(stack) - len(params):]
        stack.extend(self.call(index, args))


def run_export(module: WasmModule,
               name: str,
               args: Sequence = (),
               imports: Optional[Dict[Tuple[str, str], Callable]] = None,
               fuel: int = DEFAULT_WASM_FUEL) -> Tuple[str, Tuple]:
    """Instantiates ``module`` and calls one export; returns ``('done', results)`` or ``('trap', ())``."""
    try:
        instance = WasmInstance(module, imports, fuel)
        results = instance.invoke(name, args)
    except WasmFuelExhausted:
        return 'out_of_fuel', ()
    except WasmTrap as exc:
        logger.debug('wasm trap: %s', exc)
        return 'trap', ()
    return 'done', results
