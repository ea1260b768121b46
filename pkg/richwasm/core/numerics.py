"""Fixed-width numeric semantics shared by the interpreter and the lowered-code executor.

Integers are kept in their natural range (signed kinds signed, unsigned kinds non-negative); wraparound is
performed with numpy casts. Floats are Python floats rounded through the numpy dtype of their kind.
"""
import math
from typing import Union

import numpy as np

from richwasm.core.ir import NumKind

Number = Union[int, float]

DTYPES = {NumKind.I32: np.int32,
          NumKind.I64: np.int64,
          NumKind.UI32: np.uint32,
          NumKind.UI64: np.uint64,
          NumKind.F32: np.float32,
          NumKind.F64: np.float64}


class NumericTrap(ArithmeticError):
    pass


def pattern(value: int, bits: int) -> int:
    """Two's complement bit pattern of ``value`` as a non-negative integer."""
    return value & ((1 << bits) - 1)


def wrap(value: int, num: NumKind) -> int:
    """Reduces an arbitrary integer to the range of ``num``."""
    bits = np.array(pattern(value, num.bits), dtype=np.uint64)
    return int(bits.astype(DTYPES[num]))


def round_float(value: float, num: NumKind) -> float:
    return float(DTYPES[num](value))


def normalize(num: NumKind, value: Number) -> Number:
    return round_float(float(value), num) if num.is_float else wrap(int(value), num)


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def binop(num: NumKind, op: str, a: Number, b: Number) -> Number:
    if num.is_float:
        dtype = DTYPES[num]
        x, y = dtype(a), dtype(b)
        with np.errstate(all='ignore'):
            result = {'add': lambda: x + y,
                      'sub': lambda: x - y,
                      'mul': lambda: x * y,
                      'div': lambda: x / y,
                      'min': lambda: np.minimum(x, y),
                      'max': lambda: np.maximum(x, y)}[op]()
        return float(dtype(result))
    bits = num.bits
    if op in ('add', 'sub', 'mul'):
        return wrap({'add': a + b, 'sub': a - b, 'mul': a * b}[op], num)
    if op in ('div', 'rem'):
        if b == 0:
            raise NumericTrap('integer division by zero')
        q = _trunc_div(a, b)
        if op == 'div':
            if wrap(q, num) != q:
                raise NumericTrap('integer overflow')
            return q
        return a - b * q
    if op in ('and', 'or', 'xor'):
        x, y = pattern(a, bits), pattern(b, bits)
        return wrap({'and': x & y, 'or': x | y, 'xor': x ^ y}[op], num)
    k = pattern(b, bits) % bits
    if op == 'shl':
        return wrap(a << k, num)
    if op == 'shr':
        return wrap(a >> k, num) if num.signed else pattern(a, bits) >> k
    raise ValueError(f'Unknown binary operator {op}.')


def relop(num: NumKind, op: str, a: Number, b: Number) -> int:
    return int({'eq': a == b, 'ne': a != b, 'lt': a < b, 'gt': a > b, 'le': a <= b, 'ge': a >= b}[op])


def testop(num: NumKind, a: Number) -> int:
    return int(a == 0)


def unop(num: NumKind, op: str, a: Number) -> Number:
    if num.is_float:
        dtype = DTYPES[num]
        with np.errstate(all='ignore'):
            result = {'neg': np.negative, 'abs': np.abs, 'sqrt': np.sqrt}[op](dtype(a))
        return float(dtype(result))
    bits = num.bits
    p = pattern(a, bits)
    if op == 'clz':
        return bits - p.bit_length()
    if op == 'ctz':
        return bits if p == 0 else (p & -p).bit_length() - 1
    if op == 'popcnt':
        return bin(p).count('1')
    if op == 'eqz':
        return int(p == 0)
    raise ValueError(f'Unknown unary operator {op}.')


def convert(src: NumKind, dst: NumKind, a: Number) -> Number:
    if not src.is_float:
        return round_float(float(a), dst) if dst.is_float else wrap(a, dst)
    if dst.is_float:
        return round_float(a, dst)
    if math.isnan(a) or math.isinf(a):
        raise NumericTrap('invalid conversion to integer')
    t = math.trunc(a)
    if wrap(t, dst) != t:
        raise NumericTrap('integer overflow in conversion')
    return t
