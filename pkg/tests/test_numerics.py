from unittest import TestCase

from hypothesis import given, settings
from hypothesis import strategies as st

from richwasm.core.ir import NumKind
from richwasm.core.numerics import NumericTrap, binop, convert, relop, round_float, unop, wrap


class TestIntegerArithmetic(TestCase):
    def setUp(self) -> None:
        self.int_min = -2 ** 31
        self.int_max = 2 ** 31 - 1

    def test_wraparound(self) -> None:
        self.assertEqual(binop(NumKind.I32, 'add', self.int_max, 1), self.int_min)
        self.assertEqual(binop(NumKind.I32, 'sub', self.int_min, 1), self.int_max)
        self.assertEqual(binop(NumKind.UI32, 'sub', 0, 1), 2 ** 32 - 1)
        self.assertEqual(binop(NumKind.I64, 'mul', 2 ** 62, 4), 0)

    def test_division_truncates_toward_zero(self) -> None:
        self.assertEqual(binop(NumKind.I32, 'div', -7, 2), -3)
        self.assertEqual(binop(NumKind.I32, 'rem', -7, 2), -1)
        self.assertEqual(binop(NumKind.I32, 'rem', 7, -2), 1)

    def test_division_traps(self) -> None:
        with self.assertRaises(NumericTrap):
            binop(NumKind.I32, 'div', 1, 0)
        with self.assertRaises(NumericTrap):
            binop(NumKind.I64, 'rem', 1, 0)
        with self.assertRaises(NumericTrap):
            binop(NumKind.I32, 'div', self.int_min, -1)

    def test_shifts_use_the_count_modulo_width(self) -> None:
        self.assertEqual(binop(NumKind.I32, 'shl', 1, 33), 2)
        self.assertEqual(binop(NumKind.I32, 'shr', -8, 1), -4)
        self.assertEqual(binop(NumKind.UI32, 'shr', 2 ** 32 - 8, 1), 2 ** 31 - 4)

    def test_bit_counting(self) -> None:
        self.assertEqual(unop(NumKind.I32, 'clz', 0), 32)
        self.assertEqual(unop(NumKind.I32, 'clz', 1), 31)
        self.assertEqual(unop(NumKind.I64, 'ctz', 8), 3)
        self.assertEqual(unop(NumKind.I32, 'popcnt', -1), 32)

    def test_comparisons(self) -> None:
        self.assertEqual(relop(NumKind.I32, 'lt', -1, 0), 1)
        self.assertEqual(relop(NumKind.UI32, 'lt', 2 ** 32 - 1, 0), 0)
        self.assertEqual(relop(NumKind.F64, 'eq', float('nan'), float('nan')), 0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(min_value=-2 ** 70, max_value=2 ** 70))
    def test_wrap_matches_modular_arithmetic(self, value: int) -> None:
        self.assertEqual(wrap(value, NumKind.I32), (value + 2 ** 31) % 2 ** 32 - 2 ** 31)
        self.assertEqual(wrap(value, NumKind.UI64), value % 2 ** 64)


class TestFloatArithmetic(TestCase):
    def test_f32_rounding(self) -> None:
        self.assertEqual(round_float(0.1, NumKind.F32), 0.10000000149011612)
        self.assertEqual(binop(NumKind.F32, 'add', 0.1, 0.2), round_float(0.1 + 0.2, NumKind.F32))

    def test_min_max(self) -> None:
        self.assertEqual(binop(NumKind.F64, 'min', -1.5, 2.0), -1.5)
        self.assertEqual(binop(NumKind.F64, 'max', -1.5, 2.0), 2.0)

    def test_conversions(self) -> None:
        self.assertEqual(convert(NumKind.F64, NumKind.I32, -3.9), -3)
        self.assertEqual(convert(NumKind.I64, NumKind.I32, 2 ** 32 + 5), 5)
        self.assertEqual(convert(NumKind.I32, NumKind.F64, 7), 7.0)
        with self.assertRaises(NumericTrap):
            convert(NumKind.F64, NumKind.I32, float('nan'))
        with self.assertRaises(NumericTrap):
            convert(NumKind.F64, NumKind.I32, 2.0 ** 40)
